import numpy as np
import pytest

from bounceid.dataset import (
    DEFAULT_RANGES,
    FormatError,
    N_BINS,
    RandomizationSpec,
    Split,
    THETA_NAMES,
    bin_index,
    export_labels_csv,
    generate,
    generate_varying,
    load,
    sample_params,
    save,
)
from bounceid.dynamics import bounce_times, simulate


def _spec(split=Split.TRAIN, seed=0, **kw):
    return RandomizationSpec(split=split, seed=seed, **kw)


# ---------------------------------------------------------------------------
# sample_params
# ---------------------------------------------------------------------------

def test_train_never_draws_from_test_bins():
    spec = _spec(Split.TRAIN)
    rng = np.random.default_rng(1)
    for _ in range(2000):
        p = sample_params(spec, rng)
        # Bin 1 of e is [0.62, 0.64): reserved for the test split.
        assert not (0.62 <= p.e < 0.64)
        for name, value in zip(THETA_NAMES, p.as_array()):
            assert bin_index(spec, name, value) % 2 == 0


def test_test_split_draws_only_odd_bins():
    spec = _spec(Split.TEST)
    rng = np.random.default_rng(2)
    for _ in range(2000):
        p = sample_params(spec, rng)
        for name, value in zip(THETA_NAMES, p.as_array()):
            assert bin_index(spec, name, value) % 2 == 1


def test_bin_frequencies_binomial_bound():
    spec = _spec(Split.TRAIN)
    rng = np.random.default_rng(3)
    n = 10_000
    values = np.array([sample_params(spec, rng).e for _ in range(n)])
    lo, hi = DEFAULT_RANGES["e"]
    width = (hi - lo) / N_BINS
    sigma = np.sqrt(0.1 * 0.9 / n)
    for b in range(0, N_BINS, 2):
        freq = np.mean((values >= lo + b * width) & (values < lo + (b + 1) * width))
        assert abs(freq - 0.1) <= 3.0 * sigma


def test_sampling_deterministic_under_seed():
    spec = _spec(Split.TRAIN, seed=42)
    a = [sample_params(spec, np.random.default_rng(7)).as_array() for _ in range(5)]
    b = [sample_params(spec, np.random.default_rng(7)).as_array() for _ in range(5)]
    assert np.array_equal(np.array(a), np.array(b))


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def test_generate_shapes_and_split_membership():
    spec = _spec(Split.TEST, seed=11)
    ds = generate(spec, n_clips=8, resolution=(28, 28), n_frames=100)
    assert len(ds) == 8
    assert ds.labels.shape == (8, 100, 7)
    for i in range(8):
        assert ds.clips[i].frames.shape == (100, 28, 28)
        p = ds.clip_params(i)
        for name, value in zip(THETA_NAMES, p.as_array()):
            assert bin_index(spec, name, value) % 2 == 1


def test_generate_deterministic():
    spec = _spec(seed=5)
    a = generate(spec, n_clips=3, n_frames=60)
    b = generate(spec, n_clips=3, n_frames=60)
    assert np.array_equal(a.labels, b.labels)
    for ca, cb in zip(a.clips, b.clips):
        assert np.array_equal(ca.frames, cb.frames)


def test_generate_labels_resimulate_bit_exact():
    spec = _spec(seed=13)
    ds = generate(spec, n_clips=3, n_frames=80)
    for i in range(3):
        params = ds.clip_params(i)
        init = ds.init_state(i)
        traj = simulate(init, params, (80 - 1) * ds.dt, ds.dt)
        pos = traj.positions()
        assert np.array_equal(np.float32(pos[:, 0] / 10.0), ds.labels[i, :, 0])
        assert np.array_equal(np.float32(pos[:, 1] / 5.0), ds.labels[i, :, 1])


def test_generate_most_clips_bounce():
    spec = _spec(seed=17)
    ds = generate(spec, n_clips=40, n_frames=50)
    n_bounce = 0
    for i in range(len(ds)):
        times = bounce_times(ds.init_state(i), ds.clip_params(i), 10.0)
        n_bounce += bool(times)
    assert n_bounce / len(ds) > 0.95


def test_generate_frames_stay_in_unit_range():
    spec = _spec(seed=23)
    ds = generate(spec, n_clips=2, resolution=(100, 50), n_frames=75,
                  blur=True, occlusion=True, surface_line=True)
    for clip in ds.clips:
        assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0
        assert clip.frames.shape == (75, 50, 100)


# ---------------------------------------------------------------------------
# generate_varying
# ---------------------------------------------------------------------------

def test_varying_has_expected_regimes():
    spec = _spec(seed=29)
    ds = generate_varying(spec, n_clips=2, change_every=50, n_frames=200)
    for i in range(2):
        thetas = ds.labels[i, :, 2:]
        regimes = np.unique(thetas, axis=0)
        assert regimes.shape[0] == 4
        # Constant within each 50-frame block.
        for seg in range(4):
            block = thetas[seg * 50:(seg + 1) * 50]
            assert np.all(block == block[0])


def test_varying_state_continuity_at_switches():
    spec = _spec(seed=31)
    ds = generate_varying(spec, n_clips=2, change_every=50, n_frames=200)
    for i in range(2):
        pos = ds.positions_world(i)
        # No teleports at switch frames: displacement bounded by speed * dt.
        for t in (50, 100, 150):
            step = np.linalg.norm(pos[t] - pos[t - 1])
            assert step < 1.0


def test_varying_degenerates_to_generate():
    spec = _spec(seed=37)
    n = 60
    a = generate_varying(spec, n_clips=2, change_every=n, n_frames=n)
    for i in range(2):
        thetas = a.labels[i, :, 2:]
        assert np.all(thetas == thetas[0])


def test_varying_rejects_bad_change_every():
    with pytest.raises(ValueError):
        generate_varying(_spec(), n_clips=1, change_every=33, n_frames=100)


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    spec = _spec(Split.TEST, seed=41)
    ds = generate(spec, n_clips=3, n_frames=40, blur=True, occlusion=True)
    p1 = tmp_path / "a.v2p1"
    p2 = tmp_path / "b.v2p1"
    save(ds, p1)
    ds2 = load(p1)
    save(ds2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(ds.labels, ds2.labels)
    assert np.array_equal(ds.inits, ds2.inits)
    assert ds2.spec == ds.spec
    for ca, cb in zip(ds.clips, ds2.clips):
        # Frames were quantized at generation, so u8 round trip is exact.
        assert np.array_equal(ca.frames, cb.frames)
        assert ca.meta.occlusion_band == cb.meta.occlusion_band


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.v2p1"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(FormatError):
        load(path)


def test_load_rejects_truncated(tmp_path):
    spec = _spec(seed=43)
    ds = generate(spec, n_clips=2, n_frames=30)
    path = tmp_path / "full.v2p1"
    save(ds, path)
    blob = path.read_bytes()
    trunc = tmp_path / "trunc.v2p1"
    trunc.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(FormatError):
        load(trunc)


def test_labels_csv_export(tmp_path):
    spec = _spec(seed=47)
    ds = generate(spec, n_clips=2, n_frames=20)
    path = tmp_path / "labels.csv"
    export_labels_csv(ds, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "clip,frame,e,g,c,r,table_h,x,y"
    assert len(lines) == 1 + 2 * 20
    row = lines[1].split(",")
    assert float(row[2]) == pytest.approx(float(ds.labels[0, 0, 2]), rel=1e-6)
