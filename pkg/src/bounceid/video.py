"""Rendering trajectories to grayscale frames and recovering pixel observations.

Balls are drawn as binary discs (no antialiasing) so that pixel-level test
oracles are exact.  Motion blur approximates a shutter streak with five
sub-discs of decaying intensity along the inter-frame displacement.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .dynamics import WORLD_H, WORLD_W, Trajectory

# Number of blur sub-discs and the intensity of the trailing one.
BLUR_STEPS = 5
BLUR_MIN_INTENSITY = 0.2
# Default intensity threshold for the centroid tracker.
DEFAULT_TRACK_THRESHOLD = 0.3
# Intensity of the optional surface line.
SURFACE_INTENSITY = 0.5


class OutOfFrame(ValueError):
    """Projected ball center left the image; the world mapping is wrong."""


@dataclass(frozen=True)
class RenderMeta:
    """Rasterization settings plus the world-to-pixel affine map.

    `world_to_px` is ((sx, ox), (sy, oy)): col = sx * x + ox, row = sy * y + oy.
    The y scale is negative so row 0 is the top of the frame.
    """

    width: int
    height: int
    ball_radius_px: float = 2.0
    occlusion_band: Optional[tuple[int, int]] = None
    blur_enabled: bool = False
    surface_row: Optional[int] = None
    world_to_px: tuple[tuple[float, float], tuple[float, float]] = ((1.0, 0.0), (-1.0, 0.0))

    def __post_init__(self):
        if self.ball_radius_px < 1:
            raise ValueError("ball_radius_px must be >= 1")
        if self.occlusion_band is not None:
            lo, hi = self.occlusion_band
            if not (0 <= lo < hi <= self.width):
                raise ValueError(f"occlusion band {self.occlusion_band} outside frame")

    @classmethod
    def for_world_box(cls, width: int, height: int, **kwargs) -> "RenderMeta":
        """Map the world box onto the full pixel grid, y flipped."""
        sx = (width - 1) / WORLD_W
        sy = -(height - 1) / WORLD_H
        return cls(width=width, height=height,
                   world_to_px=((sx, 0.0), (sy, float(height - 1))), **kwargs)

    def project(self, x, y):
        (sx, ox), (sy, oy) = self.world_to_px
        return sx * np.asarray(x) + ox, sy * np.asarray(y) + oy

    def unproject(self, col, row):
        (sx, ox), (sy, oy) = self.world_to_px
        return (np.asarray(col) - ox) / sx, (np.asarray(row) - oy) / sy

    def px_per_world(self) -> tuple[float, float]:
        """Absolute pixel lengths of one world meter along x and y."""
        return abs(self.world_to_px[0][0]), abs(self.world_to_px[1][0])

    def surface_row_for(self, table_h: float) -> int:
        _, row = self.project(0.0, table_h)
        return int(round(float(row)))


@dataclass
class VideoClip:
    """Grayscale frame sequence with its rendering metadata."""

    width: int
    height: int
    dt: float
    frames: np.ndarray  # (T, height, width), intensities in [0, 1]
    meta: RenderMeta

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class PixelObservation:
    """Sub-pixel ball centroid for one frame; cx/cy are NaN when not visible."""

    t_index: int
    cx: float
    cy: float
    visible: bool


def _draw_disc(frame: np.ndarray, cx: float, cy: float, radius: float,
               intensity: float) -> None:
    """Max-combine a filled disc (pixel centers within `radius`) into frame."""
    h, w = frame.shape
    lo_c = max(0, int(np.floor(cx - radius)))
    hi_c = min(w - 1, int(np.ceil(cx + radius)))
    lo_r = max(0, int(np.floor(cy - radius)))
    hi_r = min(h - 1, int(np.ceil(cy + radius)))
    if lo_c > hi_c or lo_r > hi_r:
        return
    cols = np.arange(lo_c, hi_c + 1)
    rows = np.arange(lo_r, hi_r + 1)
    mask = ((cols[None, :] - cx) ** 2 + (rows[:, None] - cy) ** 2) <= radius ** 2
    patch = frame[lo_r:hi_r + 1, lo_c:hi_c + 1]
    patch[mask] = np.maximum(patch[mask], intensity)


def render(traj: Trajectory, meta: RenderMeta) -> VideoClip:
    """Rasterize a trajectory; one frame per trajectory state."""
    pos = traj.positions()
    cols, rows = meta.project(pos[:, 0], pos[:, 1])
    if (np.any(cols < 0) or np.any(cols > meta.width - 1)
            or np.any(rows < 0) or np.any(rows > meta.height - 1)):
        raise OutOfFrame("projected ball center outside the frame")
    frames = np.zeros((len(traj), meta.height, meta.width))
    for t in range(len(traj)):
        frame = frames[t]
        if meta.surface_row is not None and 0 <= meta.surface_row < meta.height:
            frame[meta.surface_row, :] = SURFACE_INTENSITY
        if meta.blur_enabled and t > 0:
            # Five sub-discs from the current position back to the previous
            # one, intensity decaying linearly 1.0 -> BLUR_MIN_INTENSITY.
            for k in range(BLUR_STEPS):
                frac = k / (BLUR_STEPS - 1)
                inten = 1.0 - (1.0 - BLUR_MIN_INTENSITY) * frac
                cx = cols[t] - frac * (cols[t] - cols[t - 1])
                cy = rows[t] - frac * (rows[t] - rows[t - 1])
                _draw_disc(frame, cx, cy, meta.ball_radius_px, inten)
        else:
            _draw_disc(frame, cols[t], rows[t], meta.ball_radius_px, 1.0)
        if meta.occlusion_band is not None:
            lo, hi = meta.occlusion_band
            frame[:, lo:hi] = 0.0
    return VideoClip(width=meta.width, height=meta.height, dt=traj.dt,
                     frames=frames, meta=meta)


def frame_diff(clip: VideoClip) -> VideoClip:
    """Consecutive-frame difference, clamped to [0, 1]; one fewer frame."""
    if len(clip) < 2:
        raise ValueError("frame_diff needs at least 2 frames")
    diff = np.clip(clip.frames[1:] - clip.frames[:-1], 0.0, 1.0)
    return VideoClip(width=clip.width, height=clip.height, dt=clip.dt,
                     frames=diff, meta=clip.meta)


def track(clip: VideoClip,
          threshold: float = DEFAULT_TRACK_THRESHOLD) -> list[PixelObservation]:
    """Intensity-weighted centroid of above-threshold pixels, per frame."""
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must be in (0, 1)")
    obs = []
    cols = np.arange(clip.width)
    rows = np.arange(clip.height)
    for t, frame in enumerate(clip.frames):
        mask = frame >= threshold
        total = frame[mask].sum()
        if total <= 0.0:
            obs.append(PixelObservation(t, float("nan"), float("nan"), False))
            continue
        w = np.where(mask, frame, 0.0)
        cx = float((w.sum(axis=0) * cols).sum() / total)
        cy = float((w.sum(axis=1) * rows).sum() / total)
        obs.append(PixelObservation(t, cx, cy, True))
    return obs


def write_pgm(frame: np.ndarray, path) -> None:
    """Binary PGM (P5, maxval 255)."""
    h, w = frame.shape
    data = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read back a P5 PGM written by write_pgm, as intensities in [0, 1]."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError("not a binary PGM file")
        w, h = (int(v) for v in fh.readline().split())
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w).astype(float) / maxval
