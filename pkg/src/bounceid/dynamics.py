"""Hybrid bouncing-ball dynamics.

A point ball undergoes ballistic flight with quadratic air drag, loses a
fraction of its vertical speed at each impact with a flat surface, and
eventually settles into a rolling regime where its horizontal speed decays
geometrically per reference timestep.  All integration is fixed-substep
classical RK4 with bisection-localized impact events, so trajectories are
deterministic and batch-friendly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

# Reference frame interval the per-timestep rolling factor is defined against (s).
DT_REF = 0.05
# Largest integrator substep inside a frame interval (s).
MAX_SUBSTEP = 0.005
# Absolute tolerance of impact-time localization (s).
IMPACT_TOL = 1e-9
# Post-bounce vertical speed below which the ball settles onto the surface (m/s).
SETTLE_VY = 0.05
# Rolling stops once horizontal speed falls below this (m/s).
STOP_VX = 1e-3
# Bounce cascades per substep are physically capped at 1 for in-range
# parameters; the loop bound only guards pathological inputs.
_MAX_EVENT_ITERS = 16

# World box the scene lives in (m); positions are normalized against it.
WORLD_W = 10.0
WORLD_H = 5.0


class NonFiniteState(ValueError):
    """A state component became NaN or infinite during integration."""


class Mode(enum.IntEnum):
    FLIGHT = 0
    ROLLING = 1


@dataclass(frozen=True)
class PhysParams:
    """Physical parameter vector: restitution, gravity, drag, rolling, surface.

    Mass is fixed to 1 and folded into the drag constant ``c``.
    """

    e: float        # restitution factor, [0, 1]
    g: float        # gravitational acceleration (m/s^2), negative
    c: float        # drag constant per unit mass (1/m), >= 0
    r: float        # rolling retention per DT_REF, [0, 1)
    table_h: float = 0.0  # bounce-surface height (m), >= 0

    def __post_init__(self):
        if not (0.0 <= self.e <= 1.0):
            raise ValueError(f"restitution e={self.e} outside [0, 1]")
        if not (self.g < 0.0):
            raise ValueError(f"gravity g={self.g} must be negative")
        if not (self.c >= 0.0):
            raise ValueError(f"drag c={self.c} must be >= 0")
        if not (0.0 <= self.r < 1.0):
            raise ValueError(f"rolling retention r={self.r} outside [0, 1)")
        if not (self.table_h >= 0.0):
            raise ValueError(f"surface height table_h={self.table_h} must be >= 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.e, self.g, self.c, self.r, self.table_h])

    @classmethod
    def from_array(cls, arr) -> "PhysParams":
        e, g, c, r, table_h = (float(v) for v in arr)
        return cls(e=e, g=g, c=c, r=r, table_h=table_h)


@dataclass
class BallState:
    """Continuous ball state plus discrete contact mode."""

    x: float
    y: float
    vx: float
    vy: float
    mode: Mode = Mode.FLIGHT

    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass
class Trajectory:
    """States sampled at t = 0, dt, 2*dt, ... with the generating parameters."""

    dt: float
    states: list[BallState]
    params: Optional[PhysParams] = None

    def __len__(self) -> int:
        return len(self.states)

    def positions(self) -> np.ndarray:
        """(T, 2) array of world positions."""
        return np.array([[s.x, s.y] for s in self.states])

    def velocities(self) -> np.ndarray:
        return np.array([[s.vx, s.vy] for s in self.states])

    def to_csv(self, path) -> None:
        """Write `t,x,y,vx,vy,mode` rows at 9 significant digits."""
        with open(path, "w") as fh:
            fh.write("t,x,y,vx,vy,mode\n")
            for i, s in enumerate(self.states):
                fh.write(
                    f"{i * self.dt:.9g},{s.x:.9g},{s.y:.9g},"
                    f"{s.vx:.9g},{s.vy:.9g},{int(s.mode)}\n"
                )


# ---------------------------------------------------------------------------
# Batched integration core.  Scalar operations wrap these with size-1 arrays,
# so per-particle and per-trajectory paths are bit-identical.
# ---------------------------------------------------------------------------

def _accel(vx, vy, g, c):
    """Flight acceleration with quadratic drag: a = (0, g) - c*v*|v|."""
    speed = np.hypot(vx, vy)
    return -c * vx * speed, g - c * vy * speed


def _rk4_flight(x, y, vx, vy, g, c, h):
    """One classical RK4 step of the flight flow; `h` may be an array."""
    a1x, a1y = _accel(vx, vy, g, c)
    v2x = vx + 0.5 * h * a1x
    v2y = vy + 0.5 * h * a1y
    a2x, a2y = _accel(v2x, v2y, g, c)
    v3x = vx + 0.5 * h * a2x
    v3y = vy + 0.5 * h * a2y
    a3x, a3y = _accel(v3x, v3y, g, c)
    v4x = vx + h * a3x
    v4y = vy + h * a3y
    a4x, a4y = _accel(v4x, v4y, g, c)
    x_new = x + (h / 6.0) * (vx + 2.0 * v2x + 2.0 * v3x + v4x)
    y_new = y + (h / 6.0) * (vy + 2.0 * v2y + 2.0 * v3y + v4y)
    vx_new = vx + (h / 6.0) * (a1x + 2.0 * a2x + 2.0 * a3x + a4x)
    vy_new = vy + (h / 6.0) * (a1y + 2.0 * a2y + 2.0 * a3y + a4y)
    return x_new, y_new, vx_new, vy_new


def _roll_advance(x, vx, r, t):
    """Advance rolling motion by `t`: vx decays as r**(t / DT_REF)."""
    out_x = np.array(x, dtype=float, copy=True)
    out_vx = np.zeros_like(out_x)
    r = np.asarray(r, dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), out_x.shape)
    pos = r > 0.0
    if np.any(pos):
        k = np.log(np.where(pos, r, 1.0)) / DT_REF
        decay = np.exp(k * t)
        # k == 0 cannot occur (r < 1 strictly), so the quotient is safe
        out_x = np.where(pos, x + vx * (decay - 1.0) / np.where(pos, k, 1.0), out_x)
        out_vx = np.where(pos, vx * decay, out_vx)
    out_vx = np.where(np.abs(out_vx) < STOP_VX, 0.0, out_vx)
    return out_x, out_vx


def _bisect_impact(x0, y0, vx0, vy0, g, c, table_h, hi):
    """Earliest crossing time of y(t) = table_h inside (0, hi].

    All arguments are arrays over particles known to cross within `hi`.
    Returns the lower bisection endpoint, so the returned flow state is
    still at-or-above the surface (never below).
    """
    lo = np.zeros_like(hi)
    hi = np.array(hi, dtype=float, copy=True)
    n_iter = max(1, int(math.ceil(math.log2(float(np.max(hi)) / IMPACT_TOL)))) if hi.size else 0
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        _, y_mid, _, _ = _rk4_flight(x0, y0, vx0, vy0, g, c, mid)
        below = y_mid < table_h
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)
    return lo


def _substep(x, y, vx, vy, mode, e, g, c, r, table_h, h):
    """Advance every particle by the substep h, handling impact events."""
    # Fast path: everyone airborne and nobody reaches the surface.
    if not (mode == Mode.ROLLING).any():
        xn, yn, vxn, vyn = _rk4_flight(x, y, vx, vy, g, c, h)
        crossed = (yn < table_h) | ((yn <= table_h) & (vyn < 0.0))
        if not crossed.any():
            return xn, yn, vxn, vyn, mode
    remaining = np.full_like(x, h)
    for _ in range(_MAX_EVENT_ITERS):
        rolling = (mode == Mode.ROLLING) & (remaining > 0.0)
        flight = (mode == Mode.FLIGHT) & (remaining > 0.0)
        if not (rolling.any() or flight.any()):
            break
        if rolling.any():
            idx = np.nonzero(rolling)[0]
            x_r, vx_r = _roll_advance(x[idx], vx[idx], r[idx], remaining[idx])
            x[idx] = x_r
            vx[idx] = vx_r
            remaining[idx] = 0.0
        if flight.any():
            idx = np.nonzero(flight)[0]
            t_leg = remaining[idx]
            xn, yn, vxn, vyn = _rk4_flight(x[idx], y[idx], vx[idx], vy[idx],
                                           g[idx], c[idx], t_leg)
            crossed = (yn < table_h[idx]) | ((yn <= table_h[idx]) & (vyn < 0.0))
            free = idx[~crossed]
            x[free] = xn[~crossed]
            y[free] = yn[~crossed]
            vx[free] = vxn[~crossed]
            vy[free] = vyn[~crossed]
            remaining[free] = 0.0
            if crossed.any():
                hit = idx[crossed]
                t_star = _bisect_impact(x[hit], y[hit], vx[hit], vy[hit],
                                        g[hit], c[hit], table_h[hit],
                                        t_leg[crossed])
                xs, _, vxs, vys = _rk4_flight(x[hit], y[hit], vx[hit], vy[hit],
                                              g[hit], c[hit], t_star)
                x[hit] = xs
                y[hit] = table_h[hit]
                vx[hit] = vxs
                vy_post = -e[hit] * vys
                settle = np.abs(vy_post) < SETTLE_VY
                vy[hit] = np.where(settle, 0.0, vy_post)
                mode[hit] = np.where(settle, Mode.ROLLING, Mode.FLIGHT)
                remaining[hit] = remaining[hit] - t_star
    else:
        # Pathological bounce cascade: pin the stragglers to the surface.
        stuck = (mode == Mode.FLIGHT) & (remaining > 0.0)
        if stuck.any():
            y[stuck] = table_h[stuck]
            vy[stuck] = 0.0
            mode[stuck] = Mode.ROLLING
    return x, y, vx, vy, mode


def step_batch(x, y, vx, vy, mode, theta, dt: float):
    """Advance a batch of particles one frame interval of length dt.

    Returns the advanced arrays; callers must rebind (inputs may or may not
    be reused).  `theta` is (N, 5) ordered (e, g, c, r, table_h).
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    e, g, c, r, table_h = (np.ascontiguousarray(theta[:, i]) for i in range(5))
    n_sub = max(1, int(math.ceil(dt / MAX_SUBSTEP - 1e-12)))
    h = dt / n_sub
    # Overflow from absurd inputs is reported via NonFiniteState, not warnings.
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n_sub):
            x, y, vx, vy, mode = _substep(x, y, vx, vy, mode, e, g, c, r,
                                          table_h, h)
    if not (np.isfinite(x).all() and np.isfinite(y).all()
            and np.isfinite(vx).all() and np.isfinite(vy).all()):
        raise NonFiniteState("non-finite state after step; check parameters and dt")
    return x, y, vx, vy, mode


def simulate_batch(x, y, vx, vy, mode, theta, n_frames: int, dt: float):
    """Roll a particle batch forward, recording positions at every frame.

    Returns (positions, state) where positions is (N, n_frames + 1, 2)
    including the initial frame, and state is the final array tuple.
    """
    n = x.shape[0]
    out = np.empty((n, n_frames + 1, 2))
    out[:, 0, 0] = x
    out[:, 0, 1] = y
    for k in range(1, n_frames + 1):
        x, y, vx, vy, mode = step_batch(x, y, vx, vy, mode, theta, dt)
        out[:, k, 0] = x
        out[:, k, 1] = y
    return out, (x, y, vx, vy, mode)


# ---------------------------------------------------------------------------
# Scalar operations.
# ---------------------------------------------------------------------------

def _state_arrays(state: BallState):
    return (np.array([state.x]), np.array([state.y]),
            np.array([state.vx]), np.array([state.vy]),
            np.array([int(state.mode)]))


def accel(state: BallState, params: PhysParams) -> tuple[float, float]:
    """Instantaneous flight acceleration (ax, ay) including quadratic drag."""
    if state.mode != Mode.FLIGHT:
        raise ValueError("accel is defined for Flight mode only")
    ax, ay = _accel(state.vx, state.vy, params.g, params.c)
    return float(ax), float(ay)


def step(state: BallState, params: PhysParams, dt: float) -> BallState:
    """Advance one frame interval, resolving any impacts inside it."""
    x, y, vx, vy, mode = _state_arrays(state)
    theta = params.as_array()[None, :]
    x, y, vx, vy, mode = step_batch(x, y, vx, vy, mode, theta, dt)
    return BallState(float(x[0]), float(y[0]), float(vx[0]), float(vy[0]),
                     Mode(int(mode[0])))


def solve_impact_time(state: BallState, params: PhysParams,
                      dt: float) -> Optional[float]:
    """Earliest t* in (0, dt] where the flight flow reaches the surface
    moving downward, localized to IMPACT_TOL; None if there is no crossing."""
    if state.mode != Mode.FLIGHT:
        raise ValueError("solve_impact_time requires Flight mode")
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x = np.array([state.x])
    y = np.array([state.y])
    vx = np.array([state.vx])
    vy = np.array([state.vy])
    g = np.array([params.g])
    c = np.array([params.c])
    th = np.array([params.table_h])
    n_sub = max(1, int(math.ceil(dt / MAX_SUBSTEP - 1e-12)))
    h = dt / n_sub
    t_base = 0.0
    for _ in range(n_sub):
        xn, yn, vxn, vyn = _rk4_flight(x, y, vx, vy, g, c, h)
        if yn[0] < th[0] or (yn[0] <= th[0] and vyn[0] < 0.0):
            t_star = _bisect_impact(x, y, vx, vy, g, c, th, np.array([h]))
            return t_base + float(t_star[0])
        x, y, vx, vy = xn, yn, vxn, vyn
        t_base += h
    return None


def simulate(init: BallState, params: PhysParams, duration: float,
             dt: float) -> Trajectory:
    """Simulate from `init` and sample every dt; duration >= dt."""
    if duration < dt:
        raise ValueError("duration must be at least dt")
    n_frames = int(math.ceil(duration / dt - 1e-12))
    x, y, vx, vy, mode = _state_arrays(init)
    theta = params.as_array()[None, :]
    states = [BallState(init.x, init.y, init.vx, init.vy, init.mode)]
    for _ in range(n_frames):
        x, y, vx, vy, mode = step_batch(x, y, vx, vy, mode, theta, dt)
        states.append(BallState(float(x[0]), float(y[0]), float(vx[0]),
                                float(vy[0]), Mode(int(mode[0]))))
    return Trajectory(dt=dt, states=states, params=params)


def bounce_times(init: BallState, params: PhysParams,
                 duration: float) -> list[float]:
    """Absolute impact times within [0, duration], in order.

    Stops early once the ball settles into rolling.
    """
    state = BallState(init.x, init.y, init.vx, init.vy, init.mode)
    times: list[float] = []
    t = 0.0
    while state.mode == Mode.FLIGHT and t < duration:
        t_impact = solve_impact_time(state, params, duration - t)
        if t_impact is None:
            break
        x = np.array([state.x])
        y = np.array([state.y])
        vx = np.array([state.vx])
        vy = np.array([state.vy])
        g = np.array([params.g])
        c = np.array([params.c])
        xs, _, vxs, vys = _rk4_flight(x, y, vx, vy, g, c, np.array([t_impact]))
        t += t_impact
        times.append(t)
        vy_post = -params.e * float(vys[0])
        if abs(vy_post) < SETTLE_VY:
            state = BallState(float(xs[0]), params.table_h, float(vxs[0]), 0.0,
                              Mode.ROLLING)
        else:
            state = BallState(float(xs[0]), params.table_h, float(vxs[0]),
                              vy_post, Mode.FLIGHT)
    return times


def energy(state: BallState, params: PhysParams) -> float:
    """Mechanical energy per unit mass above the bounce surface."""
    return 0.5 * (state.vx ** 2 + state.vy ** 2) + abs(params.g) * (
        state.y - params.table_h)
