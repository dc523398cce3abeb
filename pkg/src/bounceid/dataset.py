"""Domain-randomized dataset generation and the V2P1 container format.

Train and test draws use disjoint sub-ranges: every parameter range is cut
into 20 equal bins, training samples come from even-indexed bins and test
samples from odd-indexed ones, so no test parameter value ever appears in
training data.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .dynamics import (
    WORLD_H,
    WORLD_W,
    BallState,
    Mode,
    PhysParams,
    Trajectory,
    bounce_times,
    simulate,
)
from .video import RenderMeta, VideoClip, render

THETA_NAMES = ("e", "g", "c", "r", "table_h")
DEFAULT_RANGES = {
    "e": (0.6, 1.0),
    "g": (-12.81, -6.81),
    "c": (0.0005, 0.05),
    "r": (0.0, 0.7),
    "table_h": (0.0, 1.0),
}
N_BINS = 20
# Per-frame label vector: normalized x, y then the raw parameter vector.
LABEL_DIM = 7

MAGIC = b"V2P1"
FORMAT_VERSION = 1
# Attempts at drawing an initial condition that keeps the ball in the box.
_MAX_INIT_TRIES = 200


class FormatError(ValueError):
    """Dataset file failed magic/version/shape validation."""


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class RandomizationSpec:
    """Sampling ranges, initial-condition box, split assignment, and seed."""

    ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))
    pos_x: tuple[float, float] = (0.5, 2.0)
    pos_y: tuple[float, float] = (2.0, 4.5)
    speed: tuple[float, float] = (0.0, 4.0)
    split: Split = Split.TRAIN
    seed: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["split"] = self.split.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RandomizationSpec":
        d = dict(d)
        d["split"] = Split(d["split"])
        d["ranges"] = {k: tuple(v) for k, v in d["ranges"].items()}
        for k in ("pos_x", "pos_y", "speed"):
            d[k] = tuple(d[k])
        return cls(**d)

    def prior_std(self) -> np.ndarray:
        """Per-component stddev of the uniform prior over the full range."""
        widths = np.array([self.ranges[n][1] - self.ranges[n][0]
                           for n in THETA_NAMES])
        return widths / np.sqrt(12.0)


def _allowed_bins(split: Split) -> np.ndarray:
    start = 0 if split == Split.TRAIN else 1
    return np.arange(start, N_BINS, 2)


def sample_params(spec: RandomizationSpec, rng: np.random.Generator) -> PhysParams:
    """Draw one parameter vector from the split's sub-range bins."""
    bins = _allowed_bins(spec.split)
    values = {}
    for name in THETA_NAMES:
        lo, hi = spec.ranges[name]
        idx = rng.integers(0, len(bins))
        u = rng.random()
        width = (hi - lo) / N_BINS
        values[name] = lo + (bins[idx] + u) * width
    return PhysParams(**values)


def bin_index(spec: RandomizationSpec, name: str, value: float) -> int:
    """Which of the 20 bins a value falls into (clipped to valid indices)."""
    lo, hi = spec.ranges[name]
    width = (hi - lo) / N_BINS
    if width <= 0:
        return 0
    return min(N_BINS - 1, max(0, int((value - lo) / width)))


@dataclass
class DataSet:
    """Rendered clips plus per-frame labels and generation metadata.

    labels[i, t] = (x/WORLD_W, y/WORLD_H, e, g, c, r, table_h) as float32,
    where the parameter entries are those that drove the step into frame t
    (frame 0 carries the initial parameters).
    inits[i] = (x0, y0, vx0, vy0) as float32.
    """

    clips: list
    labels: np.ndarray
    inits: np.ndarray
    spec: RandomizationSpec
    dt: float

    def __len__(self) -> int:
        return len(self.clips)

    def clip_params(self, i: int, frame: int = 0) -> PhysParams:
        return PhysParams.from_array(self.labels[i, frame, 2:].astype(float))

    def positions_world(self, i: int) -> np.ndarray:
        out = self.labels[i, :, 0:2].astype(float).copy()
        out[:, 0] *= WORLD_W
        out[:, 1] *= WORLD_H
        return out

    def init_state(self, i: int) -> BallState:
        x0, y0, vx0, vy0 = (float(v) for v in self.inits[i])
        return BallState(x0, y0, vx0, vy0)


def _default_radius(width: int) -> float:
    return 2.0 if width <= 28 else 3.0


def _in_box(traj: Trajectory) -> bool:
    pos = traj.positions()
    return bool(np.all(pos[:, 0] >= 0.0) and np.all(pos[:, 0] <= WORLD_W)
                and np.all(pos[:, 1] <= WORLD_H))


def _sample_init(spec: RandomizationSpec, rng: np.random.Generator) -> BallState:
    x0 = rng.uniform(*spec.pos_x)
    y0 = rng.uniform(*spec.pos_y)
    s = rng.uniform(*spec.speed)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    return BallState(x0, y0, s * np.cos(phi), s * np.sin(phi))


def _f32(v: float) -> float:
    return float(np.float32(v))


def _f32_params(p: PhysParams) -> PhysParams:
    return PhysParams.from_array(np.asarray(p.as_array(), dtype=np.float32))


def _f32_state(s: BallState) -> BallState:
    return BallState(_f32(s.x), _f32(s.y), _f32(s.vx), _f32(s.vy), s.mode)


def _clip_rng(spec: RandomizationSpec, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(i,)))


def _make_meta(width, height, radius, blur, occlusion, surface_line, table_h,
               rng) -> RenderMeta:
    band = None
    if occlusion:
        band_w = int(rng.integers(max(2, width // 10), max(3, width // 5) + 1))
        start = int(rng.integers(0, width - band_w + 1))
        band = (start, start + band_w)
    kwargs = {"ball_radius_px": radius, "blur_enabled": blur,
              "occlusion_band": band}
    meta = RenderMeta.for_world_box(width, height, **kwargs)
    if surface_line:
        meta = RenderMeta.for_world_box(
            width, height, surface_row=meta.surface_row_for(table_h), **kwargs)
    return meta


def _quantize(frames: np.ndarray) -> np.ndarray:
    return np.round(frames * 255.0) / 255.0


def generate(spec: RandomizationSpec, n_clips: int,
             resolution: tuple[int, int] = (28, 28), n_frames: int = 200,
             clip_seconds: float = 10.0, blur: bool = False,
             occlusion: bool = False, surface_line: bool = False,
             ball_radius_px: Optional[float] = None) -> DataSet:
    """Simulate, render, and label `n_clips` randomized clips.

    Initial conditions are rejection-sampled until the trajectory stays in
    the world box for the whole clip, so rendering never clips the ball.
    """
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    width, height = resolution
    dt = clip_seconds / n_frames
    radius = ball_radius_px if ball_radius_px is not None else _default_radius(width)
    clips = []
    labels = np.zeros((n_clips, n_frames, LABEL_DIM), dtype=np.float32)
    inits = np.zeros((n_clips, 4), dtype=np.float32)
    duration = (n_frames - 1) * dt
    for i in range(n_clips):
        rng = _clip_rng(spec, i)
        params = _f32_params(sample_params(spec, rng))
        traj = None
        for _ in range(_MAX_INIT_TRIES):
            init = _f32_state(_sample_init(spec, rng))
            if init.y <= params.table_h:
                continue
            candidate = simulate(init, params, duration, dt)
            if _in_box(candidate):
                traj = candidate
                break
        if traj is None:
            # Guaranteed-in-box fallback: a pure vertical drop.
            init = _f32_state(BallState(rng.uniform(*spec.pos_x),
                                        rng.uniform(*spec.pos_y), 0.0, 0.0))
            traj = simulate(init, params, duration, dt)
        meta = _make_meta(width, height, radius, blur, occlusion, surface_line,
                          params.table_h, rng)
        clip = render(traj, meta)
        clip.frames = _quantize(clip.frames)
        clips.append(clip)
        pos = traj.positions()
        labels[i, :, 0] = (pos[:, 0] / WORLD_W).astype(np.float32)
        labels[i, :, 1] = (pos[:, 1] / WORLD_H).astype(np.float32)
        labels[i, :, 2:] = params.as_array().astype(np.float32)
        inits[i] = [init.x, init.y, init.vx, init.vy]
    return DataSet(clips=clips, labels=labels, inits=inits, spec=spec, dt=dt)


def generate_varying(spec: RandomizationSpec, n_clips: int, change_every: int,
                     resolution: tuple[int, int] = (28, 28),
                     n_frames: int = 200, clip_seconds: float = 10.0,
                     blur: bool = False, occlusion: bool = False,
                     ball_radius_px: Optional[float] = None) -> DataSet:
    """Like generate(), but parameters are resampled every `change_every`
    frames with position/velocity carried across each switch."""
    if n_frames % change_every != 0:
        raise ValueError("change_every must divide n_frames")
    width, height = resolution
    dt = clip_seconds / n_frames
    radius = ball_radius_px if ball_radius_px is not None else _default_radius(width)
    n_segments = n_frames // change_every
    clips = []
    labels = np.zeros((n_clips, n_frames, LABEL_DIM), dtype=np.float32)
    inits = np.zeros((n_clips, 4), dtype=np.float32)
    for i in range(n_clips):
        rng = _clip_rng(spec, i)
        for _ in range(_MAX_INIT_TRIES):
            thetas = [_f32_params(sample_params(spec, rng))
                      for _ in range(n_segments)]
            init = _f32_state(_sample_init(spec, rng))
            if init.y <= thetas[0].table_h:
                continue
            states = [init]
            state = init
            ok = True
            for seg in range(n_segments):
                params = thetas[seg]
                if state.y < params.table_h:
                    # A surface raised above the ball is unphysical mid-clip.
                    params = PhysParams(params.e, params.g, params.c, params.r,
                                        min(params.table_h, max(0.0, state.y)))
                    thetas[seg] = params
                if state.mode == Mode.ROLLING and state.y > params.table_h:
                    state = BallState(state.x, state.y, state.vx, 0.0, Mode.FLIGHT)
                seg_frames = change_every if seg > 0 else change_every - 1
                seg_traj = simulate(state, params, seg_frames * dt, dt)
                states.extend(seg_traj.states[1:])
                state = seg_traj.states[-1]
                if not _in_box(seg_traj):
                    ok = False
                    break
            if ok:
                break
        else:
            raise RuntimeError("could not sample an in-box varying clip")
        traj = Trajectory(dt=dt, states=states[:n_frames])
        meta = _make_meta(width, height, radius, blur, occlusion, False,
                          thetas[0].table_h, rng)
        clip = render(traj, meta)
        clip.frames = _quantize(clip.frames)
        clips.append(clip)
        pos = traj.positions()
        labels[i, :, 0] = (pos[:, 0] / WORLD_W).astype(np.float32)
        labels[i, :, 1] = (pos[:, 1] / WORLD_H).astype(np.float32)
        for seg in range(n_segments):
            sl = slice(seg * change_every, (seg + 1) * change_every)
            labels[i, sl, 2:] = thetas[seg].as_array().astype(np.float32)
        inits[i] = [init.x, init.y, init.vx, init.vy]
    return DataSet(clips=clips, labels=labels, inits=inits, spec=spec, dt=dt)


# ---------------------------------------------------------------------------
# V2P1 container
# ---------------------------------------------------------------------------

def save(ds: DataSet, path) -> None:
    """Write the dataset: V2P1 header, u8 frames, f32 labels, JSON trailer."""
    n_clips = len(ds)
    if n_clips == 0:
        raise ValueError("empty dataset")
    n_frames = ds.labels.shape[1]
    width, height = ds.clips[0].width, ds.clips[0].height
    frames = np.stack([c.frames for c in ds.clips])
    frame_bytes = np.round(frames * 255.0).astype(np.uint8)
    meta = {
        "spec": ds.spec.to_json(),
        "dt": ds.dt,
        "inits": [[float(v) for v in row] for row in ds.inits],
        "render": [
            {
                "ball_radius_px": c.meta.ball_radius_px,
                "blur_enabled": c.meta.blur_enabled,
                "occlusion_band": list(c.meta.occlusion_band) if c.meta.occlusion_band else None,
                "surface_row": c.meta.surface_row,
            }
            for c in ds.clips
        ],
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<6I", FORMAT_VERSION, n_clips, width, height,
                             n_frames, LABEL_DIM))
        fh.write(frame_bytes.tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<f4").tobytes())
        fh.write(json.dumps(meta).encode("utf-8"))


def load(path) -> DataSet:
    """Read a V2P1 file back; raises FormatError on any mismatch."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 24 or blob[:4] != MAGIC:
        raise FormatError("bad magic; not a V2P1 file")
    version, n_clips, width, height, n_frames, n_theta = struct.unpack(
        "<6I", blob[4:28])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if n_theta != LABEL_DIM:
        raise FormatError(f"label width {n_theta} != {LABEL_DIM}")
    frames_size = n_clips * n_frames * height * width
    labels_size = n_clips * n_frames * n_theta * 4
    off_frames, off_labels = 28, 28 + frames_size
    off_meta = off_labels + labels_size
    if len(blob) < off_meta:
        raise FormatError("truncated file")
    frames = np.frombuffer(blob[off_frames:off_labels], dtype=np.uint8)
    frames = frames.reshape(n_clips, n_frames, height, width).astype(float) / 255.0
    labels = np.frombuffer(blob[off_labels:off_meta], dtype="<f4").reshape(
        n_clips, n_frames, n_theta).copy()
    try:
        meta = json.loads(blob[off_meta:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad metadata trailer: {exc}") from exc
    spec = RandomizationSpec.from_json(meta["spec"])
    inits = np.array(meta["inits"], dtype=np.float32)
    if inits.shape != (n_clips, 4):
        raise FormatError("init table shape mismatch")
    clips = []
    for i in range(n_clips):
        r = meta["render"][i]
        rmeta = RenderMeta.for_world_box(
            width, height, ball_radius_px=r["ball_radius_px"],
            blur_enabled=r["blur_enabled"],
            occlusion_band=tuple(r["occlusion_band"]) if r["occlusion_band"] else None,
            surface_row=r["surface_row"])
        clips.append(VideoClip(width=width, height=height, dt=meta["dt"],
                               frames=frames[i], meta=rmeta))
    return DataSet(clips=clips, labels=labels, inits=inits, spec=spec,
                   dt=meta["dt"])


def export_labels_csv(ds: DataSet, path) -> None:
    """`clip,frame,e,g,c,r,table_h,x,y` with normalized positions."""
    with open(path, "w") as fh:
        fh.write("clip,frame,e,g,c,r,table_h,x,y\n")
        for i in range(len(ds)):
            for t in range(ds.labels.shape[1]):
                row = ds.labels[i, t]
                fh.write(f"{i},{t},{row[2]:.9g},{row[3]:.9g},{row[4]:.9g},"
                         f"{row[5]:.9g},{row[6]:.9g},{row[0]:.9g},{row[1]:.9g}\n")
