"""The iterative segmentation loop.

Each iteration fits one fundamental matrix per directed pair of adjacent
frames, turns Sampson scores into sparse static/dynamic labels, trains the
classifier on reliable frames and predicts a mask for every frame. Later
iterations refit after discarding correspondences that start inside the
previous iteration's mask.
"""
from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io
from .classifier import TrainState, init_state, predict_mask, train
from .config import RunConfig
from .epipolar import (EpipolarLabels, combine_scores, frame_reliable, label_masks,
                       lmeds_fit, sampson_scores)
from .errors import (DegeneracyError, FormatError, InsufficientDataError,
                     PipelineError, RefinementError)
from .flow import CorrespondenceSet, cycle_filter, mean_flow_norm

log = logging.getLogger(__name__)

FORWARD, BACKWARD = 0, 1


@dataclass
class SequenceBundle:
    """Flow and features for ``T`` frames.

    ``fwd[t]`` maps frame t to t+1 (absent for the last frame) and ``bwd[t]``
    maps frame t to t-1 (absent for the first).
    """

    fwd: list
    bwd: list
    features: list
    frame_ids: list[int] | None = None

    def __post_init__(self):
        if self.frame_ids is None:
            self.frame_ids = list(range(len(self.features)))

    @property
    def frames(self) -> int:
        return len(self.features)

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.fwd[0].shape[:2]) if self.frames > 1 else (0, 0)

    def validate(self) -> None:
        T = self.frames
        if T < 2:
            raise PipelineError("a sequence needs at least two frames (flow links adjacent frames)")
        if len(self.fwd) != T or len(self.bwd) != T:
            raise PipelineError("flow lists must have one slot per frame")
        H, W = self.size
        for t in range(T):
            for name, flows, needed in (("forward", self.fwd, t < T - 1),
                                        ("backward", self.bwd, t > 0)):
                f = flows[t]
                if needed and f is None:
                    raise PipelineError(f"frame {self.frame_ids[t]}: missing {name} flow")
                if f is not None and f.shape != (H, W, 2):
                    raise PipelineError(
                        f"frame {self.frame_ids[t]}: {name} flow has shape {f.shape}, expected {(H, W, 2)}")
        shape = np.shape(self.features[0])
        for t, feat in enumerate(self.features):
            if np.ndim(feat) != 3 or np.shape(feat) != shape:
                raise PipelineError(
                    f"frame {self.frame_ids[t]}: feature map shape {np.shape(feat)} differs from {shape}")
            if not np.all(np.isfinite(feat)):
                raise PipelineError(f"frame {self.frame_ids[t]}: non-finite feature values")


def load_bundle(directory) -> SequenceBundle:
    """Read ``feat_*``, ``flow_fwd_*`` and ``flow_bwd_*`` tensors from a directory.

    Frames are numbered by their feature files and must be contiguous.
    Missing or malformed files raise ``FormatError`` naming the file.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError("input directory does not exist", directory)
    ids = sorted(set(io.frame_indices(directory, io.FEATURE))
                 | set(io.frame_indices(directory, io.FLOW_FWD)))
    if len(ids) < 2:
        raise FormatError("need at least two frames of features and flow", directory)
    if ids != list(range(ids[0], ids[0] + len(ids))):
        raise FormatError(f"frame indices are not contiguous: {ids}", directory)

    def need(pattern, i):
        path = directory / pattern.format(i)
        if not path.exists():
            raise FormatError("missing file", path)
        return io.read_tensor(path)

    features = [need(io.FEATURE, i) for i in ids]
    fwd = [need(io.FLOW_FWD, i) if k < len(ids) - 1 else None for k, i in enumerate(ids)]
    bwd = [need(io.FLOW_BWD, i) if k > 0 else None for k, i in enumerate(ids)]
    bundle = SequenceBundle(fwd, bwd, features, ids)
    try:
        bundle.validate()
    except PipelineError as exc:
        raise FormatError(str(exc), directory) from None
    return bundle


@dataclass
class PairFit:
    """Fundamental-matrix state for one directed frame pair."""

    source: int
    target: int
    corrs: CorrespondenceSet
    F: np.ndarray | None = None
    report: dict | None = None
    kept_previous: bool = False
    n_used: int = 0


@dataclass
class IterationRecord:
    iteration: int
    labels: list[EpipolarLabels]
    reliable: list[bool]
    state: TrainState
    masks: list[np.ndarray]
    scores: list[np.ndarray]
    flow_norms: list[float]
    pairs: list[dict]
    history: list[float] = field(default_factory=list)

    def diagnostics(self, frame_ids=None) -> dict:
        ids = frame_ids or list(range(len(self.masks)))
        frames = []
        for t, (lab, ok, m, v) in enumerate(zip(self.labels, self.reliable, self.masks,
                                                self.flow_norms)):
            frames.append({
                "frame": ids[t],
                "flow_norm": v,
                "n_scored": lab.n_scored,
                "n_static": int(lab.static.sum()),
                "n_dynamic": int(lab.dynamic.sum()),
                "inlier_fraction": lab.inlier_fraction,
                "reliable": bool(ok),
                "mask_fraction": float(m.mean()),
            })
        return {
            "iteration": self.iteration,
            "frames": frames,
            "pairs": self.pairs,
            "train_steps": len(self.history),
            "loss_first": self.history[0] if self.history else None,
            "loss_last": self.history[-1] if self.history else None,
        }


@dataclass
class RunResult:
    records: list[IterationRecord]
    masks: list[np.ndarray]
    refinement: str = "none"

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]


def _directed_pairs(bundle: SequenceBundle, tol: float):
    """Cycle-consistent correspondences for every directed adjacent pair."""
    pairs = {}
    for t in range(bundle.frames):
        if t + 1 < bundle.frames:
            pairs[(t, FORWARD)] = PairFit(t, t + 1, cycle_filter(
                bundle.fwd[t], bundle.bwd[t + 1], tol, (t, t + 1)))
        if t > 0:
            pairs[(t, BACKWARD)] = PairFit(t, t - 1, cycle_filter(
                bundle.bwd[t], bundle.fwd[t - 1], tol, (t, t - 1)))
    return pairs


def _flow_norm(bundle: SequenceBundle, t: int, pairs, cfg: RunConfig) -> float:
    # the last frame has no forward flow; its backward flow stands in
    direction = FORWARD if t + 1 < bundle.frames else BACKWARD
    flow = bundle.fwd[t] if direction == FORWARD else bundle.bwd[t]
    valid = pairs[(t, direction)].corrs.valid if cfg.flow_norm_valid_only else None
    return mean_flow_norm(flow, valid)


def _fit_pair(key, pair: PairFit, drop_mask, cfg: RunConfig, iteration: int):
    """Fit one directed pair; returns ``(F or None, report, n_used, previous_median)``.

    ``previous_median`` is the median Sampson score of the pair's current F on
    the filtered correspondences, so the caller can keep whichever is better.
    """
    t, direction = key
    corrs = pair.corrs if drop_mask is None else pair.corrs.without(drop_mask)
    seed = np.random.SeedSequence([cfg.seed, iteration, t, direction])
    prev_median = None
    if pair.F is not None and len(corrs):
        prev_median = float(np.median(
            sampson_scores(pair.F, corrs.src, corrs.dst, cfg.classical_sampson)))
    try:
        rep = lmeds_fit(corrs, cfg.trials, seed, classical=cfg.classical_sampson,
                        inlier_scale=cfg.inlier_scale)
    except (DegeneracyError, InsufficientDataError) as exc:
        return None, {"error": str(exc)}, len(corrs), prev_median
    return rep.F, rep.to_dict(), len(corrs), prev_median


def _fit_all(pairs, masks, cfg: RunConfig, iteration: int, jobs: int) -> list[dict]:
    """Fit every pair. After the first iteration a refit replaces the previous
    F only if it is non-degenerate and does not raise the median score on the
    filtered correspondences; the previous F acts as one more hypothesis."""
    keys = sorted(pairs)

    def work(key):
        drop = None if masks is None else masks[key[0]]
        return _fit_pair(key, pairs[key], drop, cfg, iteration)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, keys))
    else:
        results = [work(k) for k in keys]

    summary = []
    for key, (F, report, n_used, prev_median) in zip(keys, results):
        pair = pairs[key]
        pair.n_used = n_used
        accept = F is not None
        if accept and pair.F is not None:
            accept = (not report.get("degenerate")
                      and report["median_residual"] <= prev_median)
        pair.kept_previous = not accept and pair.F is not None
        if accept:
            pair.F = F
        pair.report = report
        summary.append({"source": pair.source, "target": pair.target, "n_used": n_used,
                        "kept_previous": pair.kept_previous, "previous_median": prev_median,
                        **report})
    return summary


def _score(pair: PairFit | None, cfg: RunConfig) -> np.ndarray | None:
    if pair is None or pair.F is None:
        return None
    c = pair.corrs
    return c.scatter(sampson_scores(pair.F, c.src, c.dst, cfg.classical_sampson))


def run(bundle: SequenceBundle, cfg: RunConfig | None = None, *, jobs: int = 1,
        drop_labels=()) -> RunResult:
    """Run ``cfg.iterations`` refinement iterations and refine the final masks.

    ``drop_labels`` lists frame positions whose pseudo-labels are discarded
    before training (they still get predicted masks); it exists to check that
    unreliable frames contribute nothing to training.
    """
    cfg = cfg or RunConfig()
    cfg.validate()
    bundle.validate()
    T = bundle.frames
    H, W = bundle.size
    pairs = _directed_pairs(bundle, cfg.cycle_tol)
    norms = [_flow_norm(bundle, t, pairs, cfg) for t in range(T)]
    drop_labels = set(drop_labels)

    records: list[IterationRecord] = []
    state: TrainState | None = None
    masks = None
    for k in range(1, cfg.iterations + 1):
        pair_summary = _fit_all(pairs, masks, cfg, k, jobs)
        labels, reliable, scores = [], [], []
        for t in range(T):
            s_fwd = _score(pairs.get((t, FORWARD)), cfg)
            s_bwd = _score(pairs.get((t, BACKWARD)), cfg)
            if s_fwd is None and s_bwd is None:
                lab = EpipolarLabels.empty((H, W))
                score = np.full((H, W), np.nan)
            else:
                lab = label_masks(s_fwd, s_bwd, norms[t], cfg.theta_l_mult, cfg.theta_u_mult)
                score = combine_scores(s_fwd, s_bwd)
            labels.append(lab)
            reliable.append(frame_reliable(lab, cfg.drop_threshold))
            scores.append(score)

        train_ids = [t for t in range(T) if reliable[t] and t not in drop_labels]
        log.info("iteration %d: %d/%d reliable frames", k, sum(reliable), T)
        if not train_ids:
            if k == 1:
                raise PipelineError("no static anchor: every frame is unreliable at iteration 1")
            log.warning("iteration %d: no reliable frame, classifier left unchanged", k)
            state = state.with_reset_moments()
        else:
            if state is None:
                state = init_state(np.shape(bundle.features[0])[-1], cfg.hidden, cfg.seed)
            else:
                state = state.with_reset_moments()
            train(state, [bundle.features[t] for t in train_ids],
                  [labels[t] for t in train_ids], cfg)
        masks = [predict_mask(state.params, f, (H, W)) for f in bundle.features]
        records.append(IterationRecord(k, labels, reliable, state.copy(), masks, scores,
                                       norms, pair_summary, list(state.history)))

    final = refine_masks(masks, cfg.refinement_mode, command=cfg.refinement_command,
                         min_component_frac=cfg.min_component_frac)
    return RunResult(records, final, cfg.refinement_mode)


# ---------------------------------------------------------------- refinement

_SQUARE = np.ones((3, 3), dtype=bool)


def morphological_refine(mask: np.ndarray, min_component_frac: float = 0.0005) -> np.ndarray:
    """3x3 closing then opening, then drop components below the area fraction.

    The image is edge-padded first so objects touching the border are not
    eroded from outside.
    """
    mask = np.asarray(mask, dtype=bool)
    pad = 4
    m = np.pad(mask, pad, mode="edge")
    m = ndimage.binary_closing(m, structure=_SQUARE)
    m = ndimage.binary_opening(m, structure=_SQUARE)
    m = m[pad:-pad, pad:-pad]
    labels, n = ndimage.label(m, structure=_SQUARE)
    if n:
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        small = sizes < min_component_frac * mask.size
        small[0] = False
        m = m & ~small[labels]
    return m


def external_refine(masks, command: str, workdir=None) -> list[np.ndarray]:
    """Hand masks to ``command <dir>``: it reads ``coarse_%06d.pgm`` and writes
    ``refined_%06d.pgm`` in the same directory."""
    if not command:
        raise RefinementError("external refinement needs a command")
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        handoff = Path(tmp)
        for t, m in enumerate(masks):
            io.write_mask(m, handoff / f"coarse_{t:06d}.pgm")
        try:
            proc = subprocess.run([*shlex.split(command), str(handoff)],
                                  capture_output=True, text=True)
        except OSError as exc:
            raise RefinementError(f"cannot run refiner {command!r}: {exc}") from None
        if proc.returncode != 0:
            raise RefinementError(
                f"refiner exited with status {proc.returncode}: {proc.stderr.strip()[:200]}")
        out = []
        for t, m in enumerate(masks):
            path = handoff / f"refined_{t:06d}.pgm"
            if not path.exists():
                raise RefinementError(f"refiner did not write {path.name}")
            try:
                refined = io.read_mask(path) > 0
            except FormatError as exc:
                raise RefinementError(str(exc)) from None
            if refined.shape != np.shape(m):
                raise RefinementError(f"{path.name} has shape {refined.shape}, expected {np.shape(m)}")
            out.append(refined)
    return out


def refine_masks(masks, mode: str = "morphological", *, command: str | None = None,
                 min_component_frac: float = 0.0005) -> list[np.ndarray]:
    """Post-process final masks; external failures fall back to the input."""
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if mode == "none":
        return [m.copy() for m in masks]
    if mode == "morphological":
        return [morphological_refine(m, min_component_frac) for m in masks]
    if mode == "external":
        try:
            return external_refine(masks, command)
        except RefinementError as exc:
            warnings.warn(f"external refinement failed, keeping coarse masks: {exc}",
                          RuntimeWarning, stacklevel=2)
            return [m.copy() for m in masks]
    raise ValueError(f"unknown refinement mode {mode!r}")
