"""Independent fine-step reference integrator used only by tests.

Semi-implicit Euler (drift-free averaged-velocity position update) with
linear event interpolation.  Deliberately shares no code with the package's
RK4/bisection path; numba keeps the 1e-6..1e-7 s step counts tractable.
"""

import numpy as np
from numba import njit

DT_REF = 0.05
SETTLE_VY = 0.05
STOP_VX = 1e-3


@njit(cache=True)
def euler_positions(x0, y0, vx0, vy0, e, g, c, r, table_h,
                    duration, h, sample_every):
    """Positions sampled every `sample_every` steps, (n_samples+1, 2)."""
    n_steps = int(round(duration / h))
    n_samples = n_steps // sample_every
    out = np.empty((n_samples + 1, 2))
    out[0, 0] = x0
    out[0, 1] = y0
    x, y, vx, vy = x0, y0, vx0, vy0
    rolling = False
    k = np.log(r) / DT_REF if r > 0.0 else 0.0
    for i in range(1, n_steps + 1):
        if rolling:
            if r > 0.0:
                vx_new = vx * np.exp(k * h)
            else:
                vx_new = 0.0
            if abs(vx_new) < STOP_VX:
                vx_new = 0.0
            x += 0.5 * (vx + vx_new) * h
            vx = vx_new
        else:
            speed = np.sqrt(vx * vx + vy * vy)
            ax = -c * vx * speed
            ay = g - c * vy * speed
            vx_new = vx + ax * h
            vy_new = vy + ay * h
            x_new = x + 0.5 * (vx + vx_new) * h
            y_new = y + 0.5 * (vy + vy_new) * h
            if y_new < table_h and vy_new < 0.0:
                # Linear interpolation of the contact instant inside the step.
                denom = y - y_new
                alpha = (y - table_h) / denom if denom > 0.0 else 0.0
                vy_c = vy + ay * (alpha * h)
                vx_c = vx + ax * (alpha * h)
                rest = (1.0 - alpha) * h
                vy_b = -e * vy_c
                x = x + 0.5 * (vx + vx_c) * (alpha * h)
                y = table_h
                if abs(vy_b) < SETTLE_VY:
                    rolling = True
                    vx = vx_c
                    vy = 0.0
                    if r > 0.0:
                        vx_new = vx * np.exp(k * rest)
                    else:
                        vx_new = 0.0
                    x += 0.5 * (vx + vx_new) * rest
                    vx = vx_new
                else:
                    # Finish the step ballistically from the bounce point.
                    speed = np.sqrt(vx_c * vx_c + vy_b * vy_b)
                    ax2 = -c * vx_c * speed
                    ay2 = g - c * vy_b * speed
                    vx_new = vx_c + ax2 * rest
                    vy_new = vy_b + ay2 * rest
                    x = x + 0.5 * (vx_c + vx_new) * rest
                    y = table_h + 0.5 * (vy_b + vy_new) * rest
                    vx = vx_new
                    vy = vy_new
            else:
                x, y, vx, vy = x_new, y_new, vx_new, vy_new
        if i % sample_every == 0:
            out[i // sample_every, 0] = x
            out[i // sample_every, 1] = y
    return out


@njit(cache=True)
def euler_bounce_times(x0, y0, vx0, vy0, e, g, c, r, table_h,
                       duration, h, max_events):
    """Impact times found by the fine-step integrator, (n_events,)."""
    n_steps = int(round(duration / h))
    times = np.empty(max_events)
    n_found = 0
    x, y, vx, vy = x0, y0, vx0, vy0
    for i in range(1, n_steps + 1):
        speed = np.sqrt(vx * vx + vy * vy)
        ax = -c * vx * speed
        ay = g - c * vy * speed
        vx_new = vx + ax * h
        vy_new = vy + ay * h
        x_new = x + 0.5 * (vx + vx_new) * h
        y_new = y + 0.5 * (vy + vy_new) * h
        if y_new < table_h and vy_new < 0.0:
            denom = y - y_new
            alpha = (y - table_h) / denom if denom > 0.0 else 0.0
            t_c = (i - 1) * h + alpha * h
            if n_found < max_events:
                times[n_found] = t_c
            n_found += 1
            vy_c = vy + ay * (alpha * h)
            vx_c = vx + ax * (alpha * h)
            vy_b = -e * vy_c
            if abs(vy_b) < SETTLE_VY:
                break
            rest = (1.0 - alpha) * h
            speed = np.sqrt(vx_c * vx_c + vy_b * vy_b)
            ax2 = -c * vx_c * speed
            ay2 = g - c * vy_b * speed
            vx = vx_c + ax2 * rest
            vy = vy_b + ay2 * rest
            x = x + 0.5 * (vx_c + vx) * rest
            y = table_h + 0.5 * (vy_b + vy) * rest
        else:
            x, y, vx, vy = x_new, y_new, vx_new, vy_new
    return times[:min(n_found, max_events)]


@njit(cache=True)
def euler_first_crossing(y0, vy0, g, c, table_h, t_max, h):
    """First downward crossing time of the surface, or -1.0."""
    y, vy = y0, vy0
    vx = 0.0
    for i in range(1, int(round(t_max / h)) + 1):
        speed = np.sqrt(vx * vx + vy * vy)
        ay = g - c * vy * speed
        vy_new = vy + ay * h
        y_new = y + 0.5 * (vy + vy_new) * h
        if y_new < table_h and vy_new < 0.0:
            alpha = (y - table_h) / (y - y_new)
            return (i - 1) * h + alpha * h
        y, vy = y_new, vy_new
    return -1.0
