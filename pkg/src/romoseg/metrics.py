"""Mask overlap and camera-trajectory accuracy.

Trajectory metrics follow the usual protocol: poses are associated by
timestamp, the estimate is aligned to the reference with a closed-form
rigid or similarity transform (ATE), and relative motions over a fixed frame
step are compared directly (RPE, no alignment needed).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError
from .trajectory import Trajectory, rotation_angle

log = logging.getLogger(__name__)

MAX_TIME_DIFF = 0.02
COLLINEAR_TOL = 1e-10


# ---------------------------------------------------------------- masks

def iou_with_flag(pred: np.ndarray, gt: np.ndarray) -> tuple[float, bool]:
    """Jaccard index and whether both masks were empty (scored 1 by convention)."""
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"mask sizes differ: {pred.shape} vs {gt.shape}")
    union = int(np.count_nonzero(pred | gt))
    if union == 0:
        return 1.0, True
    return np.count_nonzero(pred & gt) / union, False


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    return iou_with_flag(pred, gt)[0]


# ---------------------------------------------------------------- association

def associate(est_stamps, ref_stamps, max_diff: float = MAX_TIME_DIFF):
    """Unique nearest-timestamp matches within ``max_diff``.

    Candidate pairs are accepted greedily in order of increasing time gap, so
    each pose is used at most once. Returns index arrays sorted by estimate time.
    """
    est = np.asarray(est_stamps, dtype=np.float64)
    ref = np.asarray(ref_stamps, dtype=np.float64)
    order = np.argsort(ref, kind="stable")
    ref_sorted = ref[order]
    candidates = []
    for i, t in enumerate(est):
        lo = np.searchsorted(ref_sorted, t - max_diff, side="left")
        hi = np.searchsorted(ref_sorted, t + max_diff, side="right")
        for k in range(lo, hi):
            candidates.append((abs(ref_sorted[k] - t), i, int(order[k])))
    candidates.sort()
    used_est, used_ref, pairs = set(), set(), []
    for _, i, j in candidates:
        if i not in used_est and j not in used_ref:
            used_est.add(i)
            used_ref.add(j)
            pairs.append((i, j))
    pairs.sort(key=lambda p: est[p[0]])
    if not pairs:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    i_est, i_ref = map(np.asarray, zip(*pairs))
    return i_est, i_ref


def associated(est: Trajectory, ref: Trajectory, max_diff: float = MAX_TIME_DIFF):
    """Both trajectories restricted to matched poses, in matching order."""
    est, ref = est.sorted(), ref.sorted()
    i, j = associate(est.timestamps, ref.timestamps, max_diff)
    pick = lambda tr, k: Trajectory(tr.timestamps[k], tr.positions[k], tr.quaternions[k])
    return pick(est, i), pick(ref, j)


# ---------------------------------------------------------------- alignment

@dataclass
class Similarity:
    """``x -> scale * R @ x + t``."""

    R: np.ndarray
    t: np.ndarray
    scale: float = 1.0
    collinear: bool = False

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.R.T + self.t

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.R
        T[:3, 3] = self.t
        return T

    @classmethod
    def identity(cls) -> "Similarity":
        return cls(np.eye(3), np.zeros(3), 1.0)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = False) -> Similarity:
    """Least-squares transform taking ``src`` points onto ``dst`` points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 3:
        raise AlignmentError(f"alignment needs at least 3 associated poses, got {n}")
    if np.array_equal(src, dst):
        return Similarity.identity()
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    var_s = float(np.mean(np.sum(a * a, axis=1)))
    if var_s == 0.0 or not np.any(b):
        raise AlignmentError("positions are all identical; alignment is undefined")
    spread = np.linalg.svd(b, compute_uv=False)
    collinear = bool(spread[1] <= COLLINEAR_TOL * spread[0])
    if collinear:
        log.warning("reference positions are collinear; rotation about the line is unconstrained")
    U, D, Vt = np.linalg.svd(b.T @ a / n)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.sum(D * np.diag(S)) / var_s) if with_scale else 1.0
    t = mu_d - scale * R @ mu_s
    return Similarity(R, t, scale, collinear)


def align_umeyama(est: Trajectory, ref: Trajectory, with_scale: bool = False,
                  max_diff: float = MAX_TIME_DIFF) -> Similarity:
    e, r = associated(est, ref, max_diff)
    return umeyama(e.positions, r.positions, with_scale)


# ---------------------------------------------------------------- errors

def _rmse(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean(values * values))) if values.size else 0.0


def ate(est: Trajectory, ref: Trajectory, with_scale: bool = False,
        max_diff: float = MAX_TIME_DIFF) -> float:
    """RMSE of camera-centre error after aligning the estimate to the reference."""
    e, r = associated(est, ref, max_diff)
    sim = umeyama(e.positions, r.positions, with_scale)
    return _rmse(np.linalg.norm(sim.apply(e.positions) - r.positions, axis=1))


def _relative(R: np.ndarray, p: np.ndarray, delta: int):
    """Motions ``P_i^-1 P_{i+delta}`` as (rotation, translation) stacks."""
    Ra, Rb = R[:-delta], R[delta:]
    rel_R = _mul_t(Ra, Rb)
    rel_t = np.einsum("nki,nk->ni", Ra, p[delta:] - p[:-delta])
    return rel_R, rel_t


def _mul_t(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``A^T @ B`` per item with a fixed summation order, so ``A^T A`` is exactly symmetric."""
    return (A[:, :, :, None] * B[:, :, None, :]).sum(axis=1)


def rpe(est: Trajectory, ref: Trajectory, delta: int = 1, *, scale: float = 1.0,
        max_diff: float = MAX_TIME_DIFF) -> tuple[float, float]:
    """``(rpe_t, rpe_r)``: RMSE of relative translation (m) and rotation (deg) errors.

    ``scale`` multiplies the estimate's translations first (use the
    similarity scale when the estimate has arbitrary scale).
    """
    if delta < 1:
        raise ValueError("frame step must be >= 1")
    e, r = associated(est, ref, max_diff)
    if len(e) < delta + 1:
        raise ValueError(f"RPE with step {delta} needs at least {delta + 1} associated poses, got {len(e)}")
    eR, et = _relative(e.rotations, scale * e.positions, delta)
    rR, rt = _relative(r.rotations, r.positions, delta)
    err_R = _mul_t(rR, eR)
    err_t = np.einsum("nki,nk->ni", rR, et - rt)
    return _rmse(np.linalg.norm(err_t, axis=1)), _rmse(np.degrees(rotation_angle(err_R)))


@dataclass
class PoseMetrics:
    ate: float
    rpe_t: float
    rpe_r: float
    n_poses: int
    with_scale: bool
    scale: float
    collinear: bool = False

    def to_dict(self) -> dict:
        return {
            "ate": self.ate,
            "rpe_t": self.rpe_t,
            "rpe_r": self.rpe_r,
            "n_poses": self.n_poses,
            "alignment": {"type": "sim3" if self.with_scale else "se3", "scale": self.scale,
                          "collinear": self.collinear},
        }


def evaluate_trajectory(est: Trajectory, ref: Trajectory, *, with_scale: bool = False,
                        delta: int = 1, max_diff: float = MAX_TIME_DIFF) -> PoseMetrics:
    e, r = associated(est, ref, max_diff)
    sim = umeyama(e.positions, r.positions, with_scale)
    ate_value = _rmse(np.linalg.norm(sim.apply(e.positions) - r.positions, axis=1))
    rpe_t, rpe_r = rpe(e, r, delta, scale=sim.scale, max_diff=max_diff)
    return PoseMetrics(ate_value, rpe_t, rpe_r, len(e), with_scale, sim.scale, sim.collinear)
