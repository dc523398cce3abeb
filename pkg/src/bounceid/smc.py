"""Online probabilistic identification from pixel observations.

A particle filter carries joint hypotheses over the ball state and the
physical parameter vector.  Each frame the particles are propagated through
the exact hybrid dynamics, reweighted by a Gaussian pixel likelihood of the
tracked centroid, and systematically resampled (with parameter jitter) when
the effective sample size degenerates.  Forward prediction rolls the
weighted ensemble out with frozen parameters and reports per-frame
quantiles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import THETA_NAMES, RandomizationSpec
from .dynamics import WORLD_H, WORLD_W, Mode, simulate_batch, step_batch
from .video import PixelObservation, RenderMeta

DEFAULT_N_PARTICLES = 2000


class NeedVisibleFrames(ValueError):
    """Filter initialization requires two visible observations."""


@dataclass
class SmcConfig:
    """Filter knobs; all documented defaults, all overridable."""

    n_particles: int = DEFAULT_N_PARTICLES
    sigma_obs_px: float = 1.5       # pixel likelihood stddev
    resample_frac: float = 0.5      # resample when ESS < frac * N
    # Parameter rejuvenation at resampling: noise scaled to the current
    # posterior stddev of each component, reflected back into range.  A
    # fixed range-fraction jitter either inflates identified components or
    # lets the unexercised ones deplete through lineage selection; scaled
    # roughening grows neutral marginals back toward the prior and barely
    # perturbs converged ones.
    theta_rough: float = 0.12       # noise stddev as a fraction of posterior std
    # State roughening at resampling: without it, resampled duplicates never
    # separate and repeated selection collapses the unexercised parameter
    # marginals through lineage depletion alone.
    state_jitter_pos_px: float = 0.25
    state_jitter_vel_px: float = 0.25  # per frame interval
    init_pos_noise_px: float = 1.0
    init_vel_noise_px: float = 2.0  # per frame interval
    change_detection: bool = False
    boost_jitter_frac: float = 0.05  # jitter while a regime change is suspected
    change_min_history: int = 20     # frames of likelihood history before arming
    # CUSUM on the one-step predictive log-likelihood: accumulate deficits
    # against the running median and trigger when the sum crosses the
    # threshold.  Integrating beats a single-frame percentile cut because a
    # smooth parameter switch is partly absorbed by state re-estimation and
    # only shows up as a persistent, modest likelihood deficit.
    change_cusum_slack: float = 0.5
    change_cusum_threshold: float = 2.5
    change_ref_lag: int = 15         # trailing frames excluded from the reference
    # Frames where the predicted observation spread exceeds this many sigmas
    # are legitimate high-uncertainty events (bounces), not regime changes;
    # the CUSUM ignores them.
    change_spread_gate: float = 3.0
    # Likewise frames where more than this fraction of particles just went
    # through an impact or apex: event-phase mismatch is not a regime change.
    change_event_gate: float = 0.1
    # And frames where the ensemble is mid-way through the flight->rolling
    # transition (settle instants straddle the truth by several frames).
    change_mode_mix_gate: float = 0.02
    reinject_frac: float = 0.3       # particles re-drawn from the prior on trigger
    boost_duration: int = 20         # frames of boosted rejuvenation per trigger


@dataclass
class ParamPosterior:
    """Weighted posterior summary over the parameter vector at one frame."""

    frame: int
    mean: np.ndarray  # (5,) ordered like THETA_NAMES
    std: np.ndarray   # (5,)
    ess: float
    flagged: bool = False  # degenerate weights or suspected regime change


@dataclass
class PredictionFan:
    """Per-frame forecast quantiles in normalized world units.

    Row 0 is the current frame, rows 1..K the future ones.
    """

    horizon: int
    median: np.ndarray  # (K+1, 2)
    q10: np.ndarray
    q90: np.ndarray

    def to_csv(self, path, start_frame: int = 0) -> None:
        with open(path, "w") as fh:
            fh.write("frame,med_x,med_y,q10_x,q10_y,q90_x,q90_y\n")
            for k in range(self.median.shape[0]):
                fh.write(f"{start_frame + k},"
                         f"{self.median[k, 0]:.9g},{self.median[k, 1]:.9g},"
                         f"{self.q10[k, 0]:.9g},{self.q10[k, 1]:.9g},"
                         f"{self.q90[k, 0]:.9g},{self.q90[k, 1]:.9g}\n")


class FilterState:
    """Particle arrays plus bookkeeping; single-writer, reads are safe."""

    def __init__(self, spec: RandomizationSpec, meta: RenderMeta, dt: float,
                 config: SmcConfig, rng: np.random.Generator):
        self.spec = spec
        self.meta = meta
        self.dt = dt
        self.config = config
        self.rng = rng
        n = config.n_particles
        self.x = np.zeros(n)
        self.y = np.zeros(n)
        self.vx = np.zeros(n)
        self.vy = np.zeros(n)
        self.mode = np.zeros(n, dtype=np.int64)
        self.theta = np.zeros((n, 5))
        self.log_w = np.full(n, -math.log(n))
        self.frame = 0
        self.loglik_history: list[float] = []
        self.flagged_frames: list[int] = []
        self.trace: list[ParamPosterior] = []
        self._boost_left = 0
        self._cusum = 0.0
        lo = np.array([spec.ranges[k][0] for k in THETA_NAMES])
        hi = np.array([spec.ranges[k][1] for k in THETA_NAMES])
        self.theta_lo = lo
        self.theta_hi = hi

    # -- weighted summaries -------------------------------------------------

    def weights(self) -> np.ndarray:
        w = np.exp(self.log_w - self.log_w.max())
        return w / w.sum()

    def ess(self) -> float:
        w = self.weights()
        return float(1.0 / np.sum(w ** 2))

    def posterior(self, flagged: bool = False) -> ParamPosterior:
        w = self.weights()
        mean = w @ self.theta
        var = w @ (self.theta - mean) ** 2
        return ParamPosterior(frame=self.frame, mean=mean,
                              std=np.sqrt(np.maximum(var, 0.0)),
                              ess=self.ess(), flagged=flagged)

    def positional_cov_trace(self) -> float:
        w = self.weights()
        mx, my = w @ self.x, w @ self.y
        return float(w @ (self.x - mx) ** 2 + w @ (self.y - my) ** 2)


def init_filter(spec: RandomizationSpec, first_obs: Sequence[PixelObservation],
                meta: RenderMeta, dt: float,
                config: Optional[SmcConfig] = None,
                rng: Optional[np.random.Generator] = None) -> FilterState:
    """Seed particles from the first two visible centroids.

    Parameters are uniform over the full prior ranges; position comes from
    the first centroid with 1 px noise; velocity from the finite difference
    of the two centroids with 2 px/frame noise.
    """
    config = config or SmcConfig()
    rng = rng or np.random.default_rng()
    obs0, obs1 = first_obs[0], first_obs[1]
    if not (obs0.visible and obs1.visible):
        raise NeedVisibleFrames("first two observations must both be visible")
    f = FilterState(spec, meta, dt, config, rng)
    n = config.n_particles

    u = rng.random((n, 5))
    f.theta[:] = f.theta_lo + u * (f.theta_hi - f.theta_lo)

    px_per_x, px_per_y = meta.px_per_world()
    x0, y0 = (float(v) for v in meta.unproject(obs0.cx, obs0.cy))
    x1, y1 = (float(v) for v in meta.unproject(obs1.cx, obs1.cy))
    sig_pos = config.init_pos_noise_px
    f.x[:] = x0 + rng.normal(0.0, sig_pos / px_per_x, n)
    f.y[:] = y0 + rng.normal(0.0, sig_pos / px_per_y, n)
    sig_vel = config.init_vel_noise_px
    f.vx[:] = (x1 - x0) / dt + rng.normal(0.0, sig_vel / px_per_x / dt, n)
    f.vy[:] = (y1 - y0) / dt + rng.normal(0.0, sig_vel / px_per_y / dt, n)

    # A surface above the observed ball is impossible: resample those draws
    # from the admissible sub-interval (conditioning, not clipping).
    th = f.theta[:, 4]
    bad = th >= f.y
    if bad.any():
        cap = np.maximum(np.minimum(f.y[bad], f.theta_hi[4]), f.theta_lo[4])
        f.theta[bad, 4] = f.theta_lo[4] + rng.random(int(bad.sum())) * (
            cap - f.theta_lo[4])
    f.y = np.maximum(f.y, f.theta[:, 4] + 1e-9)
    return f


def _loglik(f: FilterState, obs: PixelObservation) -> np.ndarray:
    """Per-particle Gaussian log-likelihood of the observed centroid (px)."""
    cols, rows = f.meta.project(f.x, f.y)
    sig = f.config.sigma_obs_px
    d2 = (cols - obs.cx) ** 2 + (rows - obs.cy) ** 2
    return -0.5 * d2 / sig ** 2 - math.log(2.0 * math.pi * sig ** 2)


def _reflect_into_bounds(theta: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> None:
    """Reflect out-of-range values at the bounds (clipping would pile mass
    on the boundary and bleed variance from near-uniform marginals)."""
    span = hi - lo
    pos = span > 0
    for j in np.nonzero(pos)[0]:
        col = theta[:, j]
        out = (col < lo[j]) | (col > hi[j])
        if out.any():
            v = np.mod(col[out] - lo[j], 2.0 * span[j])
            v = np.where(v > span[j], 2.0 * span[j] - v, v)
            col[out] = lo[j] + v
    theta[:] = np.clip(theta, lo, hi)


def _systematic_resample(f: FilterState, boost_jitter: float = 0.0) -> None:
    w = f.weights()
    n = len(w)
    # Pre-resampling weighted moments drive the variance-preserving kernel.
    t_mean = w @ f.theta
    t_std = np.sqrt(np.maximum(w @ (f.theta - t_mean) ** 2, 0.0))
    positions = (f.rng.random() + np.arange(n)) / n
    idx = np.searchsorted(np.cumsum(w), positions)
    idx = np.minimum(idx, n - 1)
    for arr in (f.x, f.y, f.vx, f.vy, f.mode):
        arr[:] = arr[idx]
    f.theta[:] = f.theta[idx]
    f.log_w[:] = -math.log(n)
    # Scaled roughening; an optional boost adds range-scaled exploration.
    h = f.config.theta_rough
    f.theta += f.rng.normal(0.0, 1.0, f.theta.shape) * (h * t_std)
    if boost_jitter > 0.0:
        span = f.theta_hi - f.theta_lo
        f.theta += f.rng.normal(0.0, 1.0, f.theta.shape) * (boost_jitter * span)
    _reflect_into_bounds(f.theta, f.theta_lo, f.theta_hi)
    # Roughen duplicated states so selection cannot deplete lineages.
    px_per_x, px_per_y = f.meta.px_per_world()
    sp = f.config.state_jitter_pos_px
    sv = f.config.state_jitter_vel_px
    if sp > 0.0 or sv > 0.0:
        flight_now = f.mode == Mode.FLIGHT
        f.x += f.rng.normal(0.0, sp / px_per_x, n)
        f.y[flight_now] = np.maximum(
            f.y[flight_now] + f.rng.normal(0.0, sp / px_per_y,
                                           int(flight_now.sum())),
            f.theta[flight_now, 4])
        f.vx += f.rng.normal(0.0, sv / px_per_x / f.dt, n)
        f.vy[flight_now] += f.rng.normal(0.0, sv / px_per_y / f.dt,
                                         int(flight_now.sum()))
    # Keep states consistent with the rejuvenated surface height: airborne
    # particles need the surface below them, rolling particles sit on it.
    rolling = f.mode == Mode.ROLLING
    flight = ~rolling
    f.theta[flight, 4] = np.minimum(f.theta[flight, 4], f.y[flight] - 1e-9)
    f.theta[:, 4] = np.maximum(f.theta[:, 4], f.theta_lo[4])
    f.y[rolling] = f.theta[rolling, 4]


def _reinject_from_prior(f: FilterState) -> None:
    """Redraw the parameters of a random particle subset from the prior.

    Re-acquisition after a regime switch needs fresh hypotheses across the
    whole range; jitter alone random-walks there too slowly.
    """
    n = len(f.log_w)
    k = int(round(f.config.reinject_frac * n))
    if k < 1:
        return
    idx = f.rng.choice(n, size=k, replace=False)
    u = f.rng.random((k, 5))
    f.theta[idx] = f.theta_lo + u * (f.theta_hi - f.theta_lo)
    # Keep surfaces consistent with current particle heights.
    f.theta[idx, 4] = np.minimum(f.theta[idx, 4],
                                 np.maximum(f.y[idx] - 1e-9, f.theta_lo[4]))
    rolling = f.mode[idx] == Mode.ROLLING
    if rolling.any():
        f.theta[idx[rolling], 4] = f.y[idx[rolling]]


def update(f: FilterState, obs: PixelObservation) -> ParamPosterior:
    """Assimilate one frame: propagate, weight, resample when degenerate.

    Occluded observations are prediction-only.  A weight collapse (all
    log-likelihoods -inf) resets to uniform weights and flags the frame.
    """
    vy_sign_pre = f.vy > 0.0
    mode_pre = f.mode.copy()
    f.x, f.y, f.vx, f.vy, f.mode = step_batch(f.x, f.y, f.vx, f.vy, f.mode,
                                              f.theta, f.dt)
    f.frame += 1
    flagged = False
    force_resample = False
    boost_jitter = 0.0

    if obs.visible:
        ll = _loglik(f, obs)
        # One-step predictive likelihood under the pre-update mixture.
        shifted = f.log_w + ll
        m = shifted.max()
        if np.isfinite(m):
            mix_ll = float(m + np.log(np.sum(np.exp(shifted - m))))
        else:
            mix_ll = -np.inf
        if f.config.change_detection:
            hist = f.loglik_history
            w_pre = f.weights()
            cols, rows = f.meta.project(f.x, f.y)
            spread = math.sqrt(max(
                float(w_pre @ (cols - w_pre @ cols) ** 2
                      + w_pre @ (rows - w_pre @ rows) ** 2), 0.0))
            eventful = float(np.mean((vy_sign_pre != (f.vy > 0.0))
                                     | (mode_pre != f.mode)))
            frac_rolling = float(np.mean(f.mode == Mode.ROLLING))
            # Trigger only during clean flight: settle cascades and rolling
            # contact produce systematic sub-pixel mismatch that ordinary
            # assimilation absorbs without needing a rejuvenation boost.
            calm = (spread <= f.config.change_spread_gate * f.config.sigma_obs_px
                    and eventful <= f.config.change_event_gate
                    and frac_rolling <= f.config.change_mode_mix_gate)
            if (len(hist) >= f.config.change_min_history
                    and np.isfinite(mix_ll) and calm):
                # Reference excludes the trailing frames so a developing
                # regime change cannot drag its own baseline down.
                cut = max(f.config.change_min_history,
                          len(hist) - f.config.change_ref_lag)
                ref = float(np.median(hist[:cut]))
                deficit = ref - mix_ll - f.config.change_cusum_slack
                f._cusum = max(0.0, f._cusum + deficit)
                if f._cusum > f.config.change_cusum_threshold:
                    f._cusum = 0.0
                    f._boost_left = f.config.boost_duration
                    f.flagged_frames.append(f.frame)
                    flagged = True
                    _reinject_from_prior(f)
            if np.isfinite(mix_ll) and calm:
                f.loglik_history.append(mix_ll)

        if not np.isfinite(m):
            f.log_w[:] = -math.log(len(f.log_w))
            f.flagged_frames.append(f.frame)
            flagged = True
        else:
            f.log_w = shifted - mix_ll

    if f._boost_left > 0:
        force_resample = True
        boost_jitter = f.config.boost_jitter_frac
        f._boost_left -= 1

    if obs.visible or force_resample:
        if force_resample or f.ess() < f.config.resample_frac * len(f.log_w):
            _systematic_resample(f, boost_jitter)

    snap = f.posterior(flagged=flagged)
    f.trace.append(snap)
    return snap


def predict(f: FilterState, horizon: int) -> PredictionFan:
    """Roll the ensemble `horizon` frames ahead with frozen parameters.

    Does not mutate the filter.  Quantiles are weighted by the current
    particle weights and reported in normalized world units.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    w = f.weights()
    if horizon == 0:
        pos = np.stack([f.x / WORLD_W, f.y / WORLD_H], axis=1)[:, None, :]
    else:
        pos, _ = simulate_batch(f.x.copy(), f.y.copy(), f.vx.copy(),
                                f.vy.copy(), f.mode.copy(), f.theta,
                                horizon, f.dt)
        pos[:, :, 0] /= WORLD_W
        pos[:, :, 1] /= WORLD_H
    n_rows = pos.shape[1]
    med = np.empty((n_rows, 2))
    q10 = np.empty((n_rows, 2))
    q90 = np.empty((n_rows, 2))
    for k in range(n_rows):
        for j in range(2):
            med[k, j], q10[k, j], q90[k, j] = _weighted_quantiles(
                pos[:, k, j], w)
    return PredictionFan(horizon=horizon, median=med, q10=q10, q90=q90)


def _weighted_quantiles(values: np.ndarray, w: np.ndarray):
    order = np.argsort(values)
    v = values[order]
    cw = np.cumsum(w[order])
    cw /= cw[-1]
    i50 = int(np.searchsorted(cw, 0.5))
    i10 = int(np.searchsorted(cw, 0.1))
    i90 = int(np.searchsorted(cw, 0.9))
    n = len(v) - 1
    return v[min(i50, n)], v[min(i10, n)], v[min(i90, n)]


def track_changing(f: FilterState,
                   observations: Sequence[PixelObservation]) -> list[ParamPosterior]:
    """Run updates with regime-change rejuvenation enabled."""
    f.config.change_detection = True
    return [update(f, obs) for obs in observations]


def run_filter(spec: RandomizationSpec, observations: Sequence[PixelObservation],
               meta: RenderMeta, dt: float, config: Optional[SmcConfig] = None,
               rng: Optional[np.random.Generator] = None) -> FilterState:
    """Initialize from the first two observations and assimilate the rest."""
    f = init_filter(spec, observations[:2], meta, dt, config=config, rng=rng)
    f.trace.append(f.posterior())
    for obs in observations[1:]:
        update(f, obs)
    return f


# ---------------------------------------------------------------------------
# CSV interfaces shared with other estimators
# ---------------------------------------------------------------------------

def posterior_trace_to_csv(trace: Sequence[ParamPosterior], path) -> None:
    """Long-format `frame,param,mean,std,ess` rows."""
    with open(path, "w") as fh:
        fh.write("frame,param,mean,std,ess\n")
        for snap in trace:
            for i, name in enumerate(THETA_NAMES):
                fh.write(f"{snap.frame},{name},{snap.mean[i]:.9g},"
                         f"{snap.std[i]:.9g},{snap.ess:.9g}\n")


def read_posterior_csv(path) -> dict:
    """Parse the posterior trace CSV into {param: (frames, means, stds)}."""
    out: dict = {name: ([], [], []) for name in THETA_NAMES}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "frame,param,mean,std,ess":
            raise ValueError(f"unexpected posterior CSV header: {header}")
        for line in fh:
            frame, name, mean, std, _ = line.strip().split(",")
            out[name][0].append(int(frame))
            out[name][1].append(float(mean))
            out[name][2].append(float(std))
    return {k: tuple(np.array(v) for v in vals) for k, vals in out.items()}


def read_prediction_csv(path) -> dict:
    """Parse the prediction CSV into named column arrays."""
    cols = "frame,med_x,med_y,q10_x,q10_y,q90_x,q90_y".split(",")
    data: dict = {c: [] for c in cols}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != ",".join(cols):
            raise ValueError(f"unexpected prediction CSV header: {header}")
        for line in fh:
            for c, v in zip(cols, line.strip().split(",")):
                data[c].append(float(v))
    return {c: np.array(v) for c, v in data.items()}
