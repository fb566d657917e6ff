"""Cycle-verified correspondences from dense forward/backward flow.

Pixel coordinates are ``(x, y)`` = ``(column, row)`` with integer values at
pixel centres. Flow arrays have shape ``(H, W, 2)`` holding ``(dx, dy)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CorrespondenceSet:
    """Pixel pairs ``src`` in frame ``pair[0]`` and ``dst`` in frame ``pair[1]``.

    Entries are stored in row-major order of the source pixels flagged in
    ``valid``; ``dst == src + flow(src)`` exactly.
    """

    src: np.ndarray
    dst: np.ndarray
    valid: np.ndarray
    pair: tuple[int, int] = (0, 1)

    def __len__(self) -> int:
        return len(self.src)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @property
    def pixel_index(self) -> np.ndarray:
        """Flat (row-major) source-pixel index of every entry."""
        return np.flatnonzero(self.valid)

    def without(self, drop_mask: np.ndarray) -> "CorrespondenceSet":
        """Entries whose source pixel is *not* set in ``drop_mask``."""
        keep = ~np.asarray(drop_mask, dtype=bool).reshape(-1)[self.pixel_index]
        valid = self.valid.copy()
        valid.reshape(-1)[self.pixel_index[~keep]] = False
        return CorrespondenceSet(self.src[keep], self.dst[keep], valid, self.pair)

    def scatter(self, values: np.ndarray, fill=np.nan) -> np.ndarray:
        """Per-entry values as an ``(H, W)`` map, ``fill`` where undefined."""
        out = np.full(self.valid.size, fill, dtype=np.float64)
        out[self.pixel_index] = values
        return out.reshape(self.valid.shape)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width]
    return xs.astype(np.float64), ys.astype(np.float64)


def bilinear_sample(field: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``field`` (H, W, C) at in-bounds fractional points."""
    h, w = field.shape[:2]
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    f = field.astype(np.float64, copy=False)
    top = f[y0, x0] * (1 - fx) + f[y0, x1] * fx
    bottom = f[y1, x0] * (1 - fx) + f[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def cycle_residual(fwd: np.ndarray, bwd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward-backward round-trip error per pixel and an in-bounds flag.

    Out-of-bounds landings get an infinite residual.
    """
    if fwd.shape != bwd.shape or fwd.ndim != 3 or fwd.shape[2] != 2:
        raise ValueError(f"flow fields must share shape (H, W, 2): {fwd.shape} vs {bwd.shape}")
    h, w = fwd.shape[:2]
    xs, ys = pixel_grid(h, w)
    f = fwd.astype(np.float64)
    lx = (xs + f[..., 0]).reshape(-1)
    ly = (ys + f[..., 1]).reshape(-1)
    inside = (lx >= 0) & (lx <= w - 1) & (ly >= 0) & (ly <= h - 1)
    residual = np.full(h * w, np.inf)
    back = bilinear_sample(bwd, lx[inside], ly[inside])
    round_trip = f.reshape(-1, 2)[inside] + back
    residual[inside] = np.hypot(round_trip[:, 0], round_trip[:, 1])
    return residual.reshape(h, w), inside.reshape(h, w)


def cycle_filter(fwd: np.ndarray, bwd: np.ndarray, tol: float,
                 pair: tuple[int, int] = (0, 1)) -> CorrespondenceSet:
    """Keep pixels whose forward flow is undone by the backward flow within ``tol`` px.

    ``bwd`` is the flow of the *target* frame pointing back, sampled bilinearly
    at the landing point. Landings outside the image are dropped.
    """
    if tol <= 0:
        raise ValueError("cycle tolerance must be positive")
    residual, _ = cycle_residual(fwd, bwd)
    valid = residual <= tol
    h, w = valid.shape
    xs, ys = pixel_grid(h, w)
    src = np.stack([xs[valid], ys[valid]], axis=1)
    dst = src + fwd[valid].astype(np.float64)
    return CorrespondenceSet(src, dst, valid, pair)


def mean_flow_norm(fwd: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Mean L2 flow magnitude over all pixels (or over ``valid`` ones)."""
    f = fwd.astype(np.float64).reshape(-1, 2)
    if f.size == 0:
        raise ValueError("empty flow field")
    norms = np.hypot(f[:, 0], f[:, 1])
    if valid is not None:
        norms = norms[np.asarray(valid, dtype=bool).reshape(-1)]
        if norms.size == 0:
            return 0.0
    # np.sum on a contiguous 1-D array is pairwise and order-fixed
    return float(np.sum(norms) / norms.size)
