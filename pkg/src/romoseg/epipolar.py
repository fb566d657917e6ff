"""Fundamental-matrix estimation, Sampson scoring and epipolar pseudo-labels.

Orientation convention: ``F`` maps a point ``x`` of the source frame to its
epipolar line in the target frame, so exact correspondences satisfy
``h(x')^T F h(x) = 0``. Every returned ``F`` has unit Frobenius norm and its
largest-magnitude entry positive.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegeneracyError, InsufficientDataError

log = logging.getLogger(__name__)

RANK_TOL = 1e-10
# second-smallest over largest singular value of the normalised design
# matrix below which the inlier set is treated as low-parallax
PARALLAX_TOL = 1e-4
_ALPHAS = np.array([0.0, 1.0, -1.0, 2.0])
_VANDER_INV = np.linalg.inv(np.vander(_ALPHAS, 4))


def homog(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    return np.hstack([x, np.ones((len(x), 1))])


def hartley_transform(x: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    x = np.asarray(x, dtype=np.float64)
    centroid = x.mean(axis=0)
    spread = np.mean(np.hypot(*(x - centroid).T))
    if not spread > 0:
        raise DegeneracyError("all points coincide")
    s = np.sqrt(2.0) / spread
    return np.array([[s, 0.0, -s * centroid[0]],
                     [0.0, s, -s * centroid[1]],
                     [0.0, 0.0, 1.0]])


def _apply(T: np.ndarray, x: np.ndarray) -> np.ndarray:
    return x @ T[:2, :2].T + T[:2, 2]


def design_matrix(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Rows ``kron(h(x2), h(x1))`` so that ``A @ F.ravel() = x2^T F x1``."""
    h1 = homog(x1)
    h2 = homog(x2)
    return (h2[:, :, None] * h1[:, None, :]).reshape(len(h1), 9)


def normalize_fundamental(F: np.ndarray) -> np.ndarray:
    """Scale to unit Frobenius norm with the largest-magnitude entry positive."""
    F = np.asarray(F, dtype=np.float64)
    flat = F.reshape(-1, 9)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    flat = flat / norms
    pivot = flat[np.arange(len(flat)), np.argmax(np.abs(flat), axis=1)]
    flat = flat * np.where(pivot < 0, -1.0, 1.0)[:, None]
    return flat.reshape(F.shape)


def enforce_rank2(F: np.ndarray) -> np.ndarray:
    U, s, Vt = np.linalg.svd(F)
    s[..., 2] = 0.0
    return (U * s[..., None, :]) @ Vt


def _null_space(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Singular values and right singular vectors of ``A`` padded to 9 rows."""
    if A.shape[-2] < 9:
        pad = np.zeros(A.shape[:-2] + (9 - A.shape[-2], 9))
        A = np.concatenate([A, pad], axis=-2)
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    return s, Vt


def eight_point(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Hartley-normalised linear estimate from at least 8 correspondences."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if len(x1) < 8 or len(x1) != len(x2):
        raise InsufficientDataError(f"eight_point needs >= 8 matched points, got {len(x1)}")
    T1, T2 = hartley_transform(x1), hartley_transform(x2)
    A = design_matrix(_apply(T1, x1), _apply(T2, x2))
    s, Vt = _null_space(A)
    if s[7] <= RANK_TOL * s[0]:
        raise DegeneracyError("design matrix has rank < 8")
    F = enforce_rank2(Vt[8].reshape(3, 3))
    return normalize_fundamental(T2.T @ F @ T1)


def real_cubic_roots(coeffs, tol: float = 1e-8) -> np.ndarray:
    """Real roots of a polynomial given highest degree first."""
    coeffs = np.trim_zeros(np.asarray(coeffs, dtype=np.float64), "f")
    if len(coeffs) < 2:
        return np.empty(0)
    roots = np.roots(coeffs)
    real = roots[np.abs(roots.imag) <= tol * (1.0 + np.abs(roots.real))].real
    return np.sort(real)


def _cubic_coefficients(F1: np.ndarray, F2: np.ndarray) -> np.ndarray:
    """Coefficients of ``det(a F1 + (1 - a) F2)`` in ``a``, highest first."""
    mats = _ALPHAS[:, None, None] * F1[..., None, :, :] + (1 - _ALPHAS)[:, None, None] * F2[..., None, :, :]
    dets = np.linalg.det(mats)
    return dets @ _VANDER_INV.T


def _batched_real_roots(coeffs: np.ndarray) -> list[np.ndarray]:
    """Real roots of many cubics at once via companion-matrix eigenvalues."""
    lead = coeffs[:, 0]
    scale = np.abs(coeffs).max(axis=1)
    proper = np.abs(lead) > 1e-12 * scale
    out: list[np.ndarray] = [np.empty(0)] * len(coeffs)
    if proper.any():
        c = coeffs[proper] / lead[proper, None]
        comp = np.zeros((len(c), 3, 3))
        comp[:, 0, :] = -c[:, 1:]
        comp[:, 1, 0] = 1.0
        comp[:, 2, 1] = 1.0
        roots = np.linalg.eigvals(comp)
        real = np.abs(roots.imag) <= 1e-8 * (1.0 + np.abs(roots.real))
        for i, r, ok in zip(np.flatnonzero(proper), roots, real):
            out[i] = np.sort(r.real[ok])
    for i in np.flatnonzero(~proper):
        out[i] = real_cubic_roots(coeffs[i])
    return out


def _seven_point_normalized(A: np.ndarray):
    """Candidate sets for a batch of 7x9 design matrices (normalised coords)."""
    s, Vt = _null_space(A)
    ok = s[..., 6] > RANK_TOL * s[..., 0]
    F1 = Vt[..., 7, :].reshape(-1, 3, 3)
    F2 = Vt[..., 8, :].reshape(-1, 3, 3)
    roots = _batched_real_roots(_cubic_coefficients(F1, F2))
    out = []
    for i in range(len(F1)):
        if not ok[i] or not len(roots[i]):
            out.append(None)
            continue
        a = roots[i][:, None, None]
        out.append(a * F1[i] + (1 - a) * F2[i])
    return out


def seven_point(x1: np.ndarray, x2: np.ndarray) -> list[np.ndarray]:
    """One to three rank-2 solutions from exactly 7 correspondences."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != (7, 2) or x2.shape != (7, 2):
        raise ValueError("seven_point needs exactly 7 correspondences")
    T1, T2 = hartley_transform(x1), hartley_transform(x2)
    A = design_matrix(_apply(T1, x1), _apply(T2, x2))
    (cands,) = _seven_point_normalized(A[None])
    if cands is None:
        raise DegeneracyError("7-point sample is degenerate")
    cands = enforce_rank2(cands)
    return list(normalize_fundamental(T2.T @ cands @ T1))


# ---------------------------------------------------------------- Sampson

def _sampson_from_terms(num, den):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        S = num / den
    zero = den == 0
    if np.any(zero):
        S = np.where(zero, np.where(num == 0, 0.0, np.inf), S)
    return S


def sampson_scores(F: np.ndarray, x1: np.ndarray, x2: np.ndarray,
                   classical: bool = False) -> np.ndarray:
    """Sampson scores for one ``F`` (3, 3) or a stack (M, 3, 3).

    The default denominator applies ``F`` to both points; ``classical`` uses
    ``F^T h(x2)`` for the second term instead.
    """
    F = np.asarray(F, dtype=np.float64)
    # the score is scale-free; unit max-entry keeps tiny or huge F out of under/overflow
    peak = np.abs(F).max(axis=(-2, -1), keepdims=True)
    F = F / np.where(peak > 0, peak, 1.0)
    h1 = homog(x1).T
    h2 = homog(x2).T
    l1 = F @ h1
    num = np.sum(h2 * l1, axis=-2) ** 2
    l2 = (np.swapaxes(F, -1, -2) if classical else F) @ h2
    den = l1[..., 0, :] ** 2 + l1[..., 1, :] ** 2 + l2[..., 0, :] ** 2 + l2[..., 1, :] ** 2
    return _sampson_from_terms(num, den)


def sampson(F: np.ndarray, x, x_prime, classical: bool = False) -> float:
    """Sampson score of a single correspondence ``x`` (source) -> ``x_prime``."""
    return float(sampson_scores(F, np.reshape(x, (1, 2)), np.reshape(x_prime, (1, 2)),
                                classical)[0])


def algebraic_residual(F: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    return np.einsum("ni,ij,nj->n", homog(x2), np.asarray(F, dtype=np.float64), homog(x1))


# ---------------------------------------------------------------- LMedS

@dataclass
class RobustFitReport:
    F: np.ndarray
    median_residual: float
    trials: int
    degenerate: bool
    n_correspondences: int
    n_inliers: int
    n_degenerate_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "F": self.F.tolist(),
            "median_residual": self.median_residual,
            "trials": self.trials,
            "degenerate": self.degenerate,
            "n_correspondences": self.n_correspondences,
            "n_inliers": self.n_inliers,
            "n_degenerate_samples": self.n_degenerate_samples,
        }


def _median_scores(Fs, x1, x2, classical, chunk=64):
    """Median Sampson score of every candidate in ``Fs`` over all points."""
    h1, h2 = homog(x1).T, homog(x2).T
    D = design_matrix(x1, x2).T
    medians = np.empty(len(Fs))
    for lo in range(0, len(Fs), chunk):
        block = Fs[lo:lo + chunk]
        m = len(block)
        num = block.reshape(m, 9) @ D
        np.square(num, out=num)
        g = block[:, :2, :].reshape(2 * m, 3) @ h1
        np.square(g, out=g)
        den = g[0::2] + g[1::2]
        second = np.swapaxes(block, 1, 2) if classical else block
        g = second[:, :2, :].reshape(2 * m, 3) @ h2
        np.square(g, out=g)
        den += g[0::2]
        den += g[1::2]
        S = _sampson_from_terms(num, den)
        medians[lo:lo + m] = np.median(S, axis=1, overwrite_input=True)
    return medians


def low_parallax(x1: np.ndarray, x2: np.ndarray) -> bool:
    """True when the data leave a two-dimensional family of solutions."""
    T1, T2 = hartley_transform(x1), hartley_transform(x2)
    s, _ = _null_space(design_matrix(_apply(T1, x1), _apply(T2, x2)))
    return bool(s[7] <= PARALLAX_TOL * s[0])


def lmeds_fit(corrs, trials: int = 512, seed=0, *, classical: bool = False,
              inlier_scale: float = 2.5) -> RobustFitReport:
    """Least-median-of-squares fit over 7-point samples, polished by 8-point.

    ``corrs`` is a :class:`~romoseg.flow.CorrespondenceSet` or a ``(src, dst)``
    pair of ``(N, 2)`` arrays. ``seed`` is anything ``numpy.random.default_rng``
    accepts.
    """
    x1, x2 = (corrs.src, corrs.dst) if hasattr(corrs, "src") else corrs
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    n = len(x1)
    if n < 8:
        raise InsufficientDataError(f"LMedS needs >= 8 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    T1, T2 = hartley_transform(x1), hartley_transform(x2)
    y1, y2 = _apply(T1, x1), _apply(T2, x2)

    samples = np.stack([rng.choice(n, 7, replace=False) for _ in range(trials)])
    A = design_matrix(y1[samples].reshape(-1, 2), y2[samples].reshape(-1, 2)).reshape(trials, 7, 9)
    per_sample = _seven_point_normalized(A)
    n_degenerate = sum(c is None for c in per_sample)
    cands = [c for c in per_sample if c is not None]
    if not cands:
        raise DegeneracyError(f"all {trials} minimal samples are degenerate")
    cands = enforce_rank2(np.concatenate(cands))
    Fs = normalize_fundamental(T2.T @ cands @ T1)

    medians = _median_scores(Fs, x1, x2, classical)
    best = int(np.argmin(medians))
    F, median = Fs[best], float(medians[best])

    S = sampson_scores(F, x1, x2, classical)
    inliers = S <= inlier_scale ** 2 * median
    n_inliers = int(inliers.sum())
    degenerate = False
    if n_inliers >= 8:
        try:
            F = eight_point(x1[inliers], x2[inliers])
            S = sampson_scores(F, x1, x2, classical)
            median = float(np.median(S))
            degenerate = low_parallax(x1[inliers], x2[inliers])
        except DegeneracyError:
            degenerate = True
    else:
        log.debug("LMedS refit skipped: only %d inliers", n_inliers)
    return RobustFitReport(F=F, median_residual=median, trials=trials, degenerate=degenerate,
                           n_correspondences=n, n_inliers=n_inliers,
                           n_degenerate_samples=n_degenerate)


# ---------------------------------------------------------------- labels

@dataclass
class EpipolarLabels:
    static: np.ndarray  # L: likely static
    dynamic: np.ndarray  # U: likely dynamic
    inlier_fraction: float
    n_scored: int

    @classmethod
    def empty(cls, shape) -> "EpipolarLabels":
        z = np.zeros(shape, dtype=bool)
        return cls(z, z.copy(), 0.0, 0)


def combine_scores(s_fwd: np.ndarray | None, s_bwd: np.ndarray | None) -> np.ndarray:
    """Per-pixel max over the defined sides; NaN where neither is defined."""
    sides = [s for s in (s_fwd, s_bwd) if s is not None]
    if not sides:
        raise ValueError("at least one score map is required")
    if len(sides) == 1:
        return np.asarray(sides[0], dtype=np.float64)
    return np.fmax(sides[0], sides[1])


def label_masks(s_fwd: np.ndarray | None, s_bwd: np.ndarray | None, v_t: float,
                theta_l_mult: float = 0.01, theta_u_mult: float = 2.0) -> EpipolarLabels:
    """Threshold combined Sampson maps into likely-static / likely-dynamic masks.

    Score maps use NaN for pixels without a correspondence.
    """
    if v_t < 0:
        raise ValueError("mean flow norm must be non-negative")
    s = combine_scores(s_fwd, s_bwd)
    defined = ~np.isnan(s)
    n_scored = int(defined.sum())
    if v_t == 0:
        log.warning("mean flow norm is zero; thresholds collapse and labels are empty")
        z = np.zeros(s.shape, dtype=bool)
        return EpipolarLabels(z, z.copy(), 0.0, n_scored)
    theta_l = theta_l_mult * v_t
    theta_u = theta_u_mult * v_t
    with np.errstate(invalid="ignore"):
        static = defined & (s < theta_l)
        dynamic = defined & (s > theta_u)
    fraction = float(static.sum() / n_scored) if n_scored else 0.0
    return EpipolarLabels(static, dynamic, fraction, n_scored)


def frame_reliable(labels: EpipolarLabels, threshold: float = 0.5) -> bool:
    if labels.n_scored == 0:
        return False
    return labels.inlier_fraction >= threshold
