"""Simulation-alignment baselines: uniform-sampling MLE, GP Bayesian
optimization with Expected Improvement, and exact DMD forecasting.

All alignment methods receive the true initial state and a window of
observed (normalized) positions, and search the physical parameter space
for the best-matching simulation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.stats import norm

from .dataset import DEFAULT_RANGES, THETA_NAMES
from .dynamics import WORLD_H, WORLD_W, BallState, PhysParams, simulate_batch

# GP defaults: no hyperparameter fitting at a 20-point budget.
GP_LENGTHSCALE = 0.2
GP_SIGNAL_VAR = 1.0
GP_JITTER = 1e-8
# Posterior sigmas at (numerically) observed points are jitter noise; EI there is 0.
EI_SIGMA_FLOOR = 1e-3
# Relative singular-value cutoff for the DMD rank.
DMD_SV_RTOL = 1e-10


class CholeskyFailure(RuntimeError):
    """GP covariance stayed non-positive-definite after jitter escalation."""


class DegenerateData(ValueError):
    """DMD input with no usable dynamics (constant observations)."""


@dataclass
class IdentificationResult:
    theta_hat: PhysParams
    objective: float
    n_evals: int
    wall_time: float
    method: str


def _ranges_arrays(ranges: dict) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([ranges[n][0] for n in THETA_NAMES])
    hi = np.array([ranges[n][1] for n in THETA_NAMES])
    return lo, hi


def simulate_normalized(thetas: np.ndarray, init: BallState, n_frames: int,
                        dt: float) -> np.ndarray:
    """Batch-simulate candidates from a shared init; (n, n_frames, 2) in
    normalized world units."""
    n = thetas.shape[0]
    x = np.full(n, init.x)
    y = np.full(n, init.y)
    vx = np.full(n, init.vx)
    vy = np.full(n, init.vy)
    mode = np.full(n, int(init.mode), dtype=np.int64)
    pos, _ = simulate_batch(x, y, vx, vy, mode, thetas, n_frames - 1, dt)
    pos[:, :, 0] /= WORLD_W
    pos[:, :, 1] /= WORLD_H
    return pos


def trajectory_objective(candidate: PhysParams, init: BallState,
                         observed: np.ndarray, dt: float) -> float:
    """MSE between the candidate's simulated trajectory and the observed
    normalized positions over the observation window."""
    observed = np.asarray(observed, dtype=float)
    if observed.ndim != 2 or observed.shape[0] < 1:
        raise ValueError("observed must be a non-empty (T, 2) array")
    sim = simulate_normalized(candidate.as_array()[None, :], init,
                              observed.shape[0], dt)[0]
    return float(np.mean((sim - observed) ** 2))


def _batched_objectives(thetas: np.ndarray, init: BallState,
                        observed: np.ndarray, dt: float) -> np.ndarray:
    sim = simulate_normalized(thetas, init, observed.shape[0], dt)
    return np.mean((sim - observed[None]) ** 2, axis=(1, 2))


def identify_lsq(observed: np.ndarray, init: BallState,
                 ranges: Optional[dict] = None, n_samples: int = 2000,
                 rng: Optional[np.random.Generator] = None,
                 dt: float = 0.05) -> IdentificationResult:
    """Uniform-prior sampling MLE: best of `n_samples` random candidates.

    Candidates are drawn as one row-major block, so a run with a smaller
    budget and the same generator state evaluates a prefix of the larger
    run's candidates.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    ranges = ranges or DEFAULT_RANGES
    rng = rng or np.random.default_rng()
    observed = np.asarray(observed, dtype=float)
    lo, hi = _ranges_arrays(ranges)
    t0 = time.perf_counter()
    thetas = rng.uniform(size=(n_samples, 5)) * (hi - lo) + lo
    objs = _batched_objectives(thetas, init, observed, dt)
    best = int(np.argmin(objs))
    return IdentificationResult(
        theta_hat=PhysParams.from_array(thetas[best]),
        objective=float(objs[best]),
        n_evals=n_samples,
        wall_time=time.perf_counter() - t0,
        method="lsq",
    )


class GPModel:
    """Squared-exponential ARD GP on [0,1]^d inputs, standardized targets."""

    def __init__(self, lengthscale: float = GP_LENGTHSCALE,
                 signal_var: float = GP_SIGNAL_VAR, jitter: float = GP_JITTER):
        self.lengthscale = lengthscale
        self.signal_var = signal_var
        self.jitter = jitter
        self.X: Optional[np.ndarray] = None
        self._chol = None
        self._alpha = None
        self.y_mean = 0.0
        self.y_std = 1.0

    def _kernel(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        d2 = np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=2)
        return self.signal_var * np.exp(-0.5 * d2 / self.lengthscale ** 2)

    def fit(self, X: np.ndarray, y: np.ndarray) -> None:
        """Factorize the training covariance; escalates jitter x10 up to 3
        times before raising CholeskyFailure."""
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        self.y_mean = float(np.mean(y))
        self.y_std = float(np.std(y))
        if self.y_std < 1e-12:
            self.y_std = 1.0
        z = (y - self.y_mean) / self.y_std
        K = self._kernel(X, X)
        jitter = self.jitter
        for attempt in range(4):
            try:
                self._chol = cho_factor(K + jitter * np.eye(len(X)), lower=True)
                break
            except LinAlgError:
                if attempt == 3:
                    raise CholeskyFailure(
                        f"covariance not PD after jitter {jitter}")
                jitter *= 10.0
        self.X = X
        self._alpha = cho_solve(self._chol, z)

    def predict(self, Xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean (original units) and stddev (standardized units)."""
        Kq = self._kernel(np.asarray(Xq, dtype=float), self.X)
        mu_z = Kq @ self._alpha
        v = cho_solve(self._chol, Kq.T)
        var = self.signal_var - np.sum(Kq * v.T, axis=1)
        var = np.maximum(var, 0.0)
        return mu_z * self.y_std + self.y_mean, np.sqrt(var)

    def predict_standardized(self, Xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu, sigma = self.predict(Xq)
        return (mu - self.y_mean) / self.y_std, sigma


def expected_improvement(mu_z: np.ndarray, sigma: np.ndarray,
                         best_z: float) -> np.ndarray:
    """EI for minimization, in standardized objective units.

    Sigmas at or below the jitter noise floor count as zero variance.
    """
    imp = best_z - mu_z
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, imp / sigma, 0.0)
    ei = imp * norm.cdf(z) + sigma * norm.pdf(z)
    ei = np.where(sigma <= EI_SIGMA_FLOOR, 0.0, ei)
    return np.maximum(ei, 0.0)


def identify_bo(observed: np.ndarray, init: BallState,
                ranges: Optional[dict] = None, n_evals: int = 20,
                n_init: int = 5, n_candidates: int = 1024,
                rng: Optional[np.random.Generator] = None,
                dt: float = 0.05) -> IdentificationResult:
    """GP Bayesian optimization of the trajectory objective.

    Starts from `n_init` uniform evaluations, then proposes the EI argmax
    over `n_candidates` random probes per iteration.  A GP that cannot be
    factorized falls back to a random proposal for that iteration.
    """
    if n_evals < 6:
        raise ValueError("n_evals must be >= 6")
    ranges = ranges or DEFAULT_RANGES
    rng = rng or np.random.default_rng()
    observed = np.asarray(observed, dtype=float)
    lo, hi = _ranges_arrays(ranges)
    span = np.where(hi > lo, hi - lo, 1.0)
    t0 = time.perf_counter()

    X = rng.uniform(size=(n_init, 5))
    thetas = X * (hi - lo) + lo
    y = list(_batched_objectives(thetas, init, observed, dt))
    X = [row for row in X]

    while len(y) < n_evals:
        gp = GPModel()
        try:
            gp.fit(np.array(X), np.array(y))
            cand = rng.uniform(size=(n_candidates, 5))
            mu_z, sigma = gp.predict_standardized(cand)
            best_z = (min(y) - gp.y_mean) / gp.y_std
            ei = expected_improvement(mu_z, sigma, best_z)
            x_next = cand[int(np.argmax(ei))]
        except CholeskyFailure:
            x_next = rng.uniform(size=5)
        theta_next = x_next * (hi - lo) + lo
        obj = _batched_objectives(theta_next[None, :], init, observed, dt)[0]
        X.append(x_next)
        y.append(float(obj))

    best = int(np.argmin(y))
    theta_best = np.array(X[best]) * (hi - lo) + lo
    return IdentificationResult(
        theta_hat=PhysParams.from_array(theta_best),
        objective=float(y[best]),
        n_evals=n_evals,
        wall_time=time.perf_counter() - t0,
        method="bo",
    )


# ---------------------------------------------------------------------------
# Exact DMD on delay-embedded positions
# ---------------------------------------------------------------------------

@dataclass
class DmdForecaster:
    """Reduced linear propagator over delay-embedded position snapshots."""

    basis: np.ndarray      # (D, r) POD modes of the embedded space
    reduced_op: np.ndarray  # (r, r)
    last_state: np.ndarray  # (D,) newest embedded snapshot
    embed_dim: int
    data_dim: int

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.reduced_op)

    def propagate(self, state: np.ndarray, n_steps: int) -> np.ndarray:
        """Iterate the projected operator; returns (n_steps, data_dim)
        positions (the newest block of each embedded state)."""
        out = np.empty((n_steps, self.data_dim))
        z = np.asarray(state, dtype=float)
        op = self.basis @ self.reduced_op @ self.basis.T
        for k in range(n_steps):
            z = op @ z
            out[k] = z[:self.data_dim]
        return out

    def forecast(self, n_steps: int) -> np.ndarray:
        return self.propagate(self.last_state, n_steps)


def identify_dmd(observed_positions: np.ndarray, embed_dim: int = 8,
                 rank: Optional[int] = None) -> DmdForecaster:
    """Fit exact DMD to delay-embedded positions.

    The snapshot state stacks the last `embed_dim` positions (newest first);
    the reduced operator comes from an SVD truncated at the requested rank,
    or at singular values above DMD_SV_RTOL * sigma_max capped at embed_dim.
    """
    P = np.asarray(observed_positions, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    T, d = P.shape
    if T < 2 * embed_dim:
        raise ValueError("need at least 2 * embed_dim observations")
    if np.allclose(P, P[0]):
        raise DegenerateData("constant observations carry no dynamics")
    m = embed_dim
    n_snap = T - m + 1
    Z = np.empty((d * m, n_snap))
    for k in range(m):
        Z[k * d:(k + 1) * d, :] = P[m - 1 - k:T - k].T
    X, Y = Z[:, :-1], Z[:, 1:]
    U, s, Vh = np.linalg.svd(X, full_matrices=False)
    if s[0] <= 0.0:
        raise DegenerateData("zero snapshot matrix")
    r_auto = int(np.sum(s > DMD_SV_RTOL * s[0]))
    r = min(r_auto, embed_dim) if rank is None else min(rank, len(s))
    if r < 1:
        raise DegenerateData("effective rank 0")
    Ur = U[:, :r]
    A_tilde = Ur.T @ Y @ Vh[:r].T @ np.diag(1.0 / s[:r])
    return DmdForecaster(basis=Ur, reduced_op=A_tilde, last_state=Z[:, -1],
                         embed_dim=m, data_dim=d)
