"""Command-line entry point: ``romoseg <subcommand> ...``.

Exit status is 0 on success, 2 for bad input (unreadable files, invalid
config or scene spec, mismatched frame indices) and 3 when a computation
cannot proceed (no static anchor, failed trajectory alignment).
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__, io, metrics, pipeline, synthgen
from .config import RunConfig, apply_overrides, load_config
from .errors import ConfigError, FormatError, GenerationError, RomoError

log = logging.getLogger("romoseg")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_COMPUTE = 3

PRESETS = {"reference": synthgen.reference_spec, "occluder": synthgen.occluder_spec}


class InputError(RomoError):
    """Command-line input that is well formed but unusable."""


# ---------------------------------------------------------------- helpers

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "romoseg": __version__}


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, args.set or [])
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.refine is not None:
        mode, _, command = args.refine.partition(":")
        if mode == "external":
            cfg = cfg.replace(refinement_mode="external", refinement_command=command or None)
        elif command:
            raise ConfigError("refine", f"only external takes a command, got {args.refine!r}")
        else:
            cfg = cfg.replace(refinement_mode=mode)
    return cfg


def _input_hashes(directory: Path) -> dict:
    names = sorted(p.name for p in directory.iterdir()
                   if p.is_file() and p.suffix == ".npy")
    return {name: _sha256(directory / name) for name in names}


def _run_pipeline(args):
    cfg = _run_config(args)
    in_dir = Path(args.input)
    bundle = pipeline.load_bundle(in_dir)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = pipeline.run(bundle, cfg, jobs=args.jobs)
    notes = [str(w.message) for w in caught]
    for note in notes:
        log.warning("%s", note)
    return cfg, bundle, result, notes


# ---------------------------------------------------------------- subcommands

def cmd_segment(args) -> int:
    cfg, bundle, result, notes = _run_pipeline(args)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    ids = bundle.frame_ids
    outputs = {}
    for i, mask in zip(ids, result.masks):
        name = io.MASK.format(i)
        io.write_mask(mask, out / name)
        outputs[name] = _sha256(out / name)
    for rec in result.records:
        _write_json(out / f"diagnostics_iter{rec.iteration}.json", rec.diagnostics(ids))
    manifest = {
        "command": "segment",
        "input": str(Path(args.input).resolve()),
        "inputs": _input_hashes(Path(args.input)),
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "iterations": len(result.records),
        "refinement": result.refinement,
        "frames": ids,
        "outputs": outputs,
        "warnings": notes,
        "versions": _versions(),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(ids)} masks to {out}")
    return EXIT_OK


def _load_spec(text: str) -> dict:
    if text in PRESETS:
        return PRESETS[text]()
    path = Path(text)
    if not path.is_file():
        raise FormatError("scene spec not found", path)
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GenerationError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(spec, dict):
        raise GenerationError(f"{path}: top level must be a JSON object")
    return spec


def cmd_synth(args) -> int:
    spec = _load_spec(args.spec)
    scene, truth = synthgen.generate(spec, args.seed)
    synthgen.export(scene, truth, args.output)
    flag = " (degenerate: pure rotation)" if truth.degenerate else ""
    print(f"wrote {scene.frames} frames to {args.output}{flag}")
    return EXIT_OK


def _mask_ids(directory: Path) -> list[int]:
    if not directory.is_dir():
        raise FormatError("mask directory does not exist", directory)
    return io.frame_indices(directory, io.MASK)


def cmd_eval_masks(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_ids, gt_ids = _mask_ids(pred_dir), _mask_ids(gt_dir)
    if pred_ids != gt_ids:
        only_pred = sorted(set(pred_ids) - set(gt_ids))
        only_gt = sorted(set(gt_ids) - set(pred_ids))
        raise InputError(f"frame indices differ: only in predictions {only_pred}, "
                         f"only in ground truth {only_gt}")
    if not pred_ids:
        raise InputError(f"no {io.MASK.format(0).replace('000000', '*')} files in {pred_dir}")
    rows = []
    for i in pred_ids:
        pred = io.read_mask(pred_dir / io.MASK.format(i)) > 0
        # every nonzero ground-truth label is foreground, so objects are merged
        gt = io.read_pgm(gt_dir / io.MASK.format(i)) > 0
        if pred.shape != gt.shape:
            raise InputError(f"frame {i}: mask sizes differ {pred.shape} vs {gt.shape}")
        value, both_empty = metrics.iou_with_flag(pred, gt)
        rows.append((i, value, both_empty))
    csv_path = Path(args.csv) if args.csv else pred_dir / "iou.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "iou", "both_empty"])
        for i, value, both_empty in rows:
            writer.writerow([i, repr(float(value)), int(both_empty)])
    mean = float(np.mean([r[1] for r in rows]))
    print(f"mean_iou {mean:.6f}")
    return EXIT_OK


def cmd_eval_traj(args) -> int:
    est = io.read_trajectory(args.est)
    ref = io.read_trajectory(args.ref)
    if args.delta < 1:
        raise InputError("--delta must be >= 1")
    report = metrics.evaluate_trajectory(est, ref, with_scale=args.scale, delta=args.delta)
    data = report.to_dict()
    data["delta"] = args.delta
    text = json.dumps(data, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_dump_labels(args) -> int:
    cfg, bundle, result, _ = _run_pipeline(args)
    out = Path(args.output)
    for rec in result.records:
        d = out / f"iter{rec.iteration}"
        d.mkdir(parents=True, exist_ok=True)
        for i, lab, score, mask in zip(bundle.frame_ids, rec.labels, rec.scores, rec.masks):
            io.write_mask(lab.static, d / f"static_{i:06d}.pgm")
            io.write_mask(lab.dynamic, d / f"dynamic_{i:06d}.pgm")
            io.write_tensor(np.asarray(score, dtype=np.float32), d / f"sampson_{i:06d}.npy")
            io.write_mask(mask, d / f"coarse_{i:06d}.pgm")
        _write_json(d / "diagnostics.json", rec.diagnostics(bundle.frame_ids))
    _write_json(out / "config.json", cfg.to_dict())
    print(f"wrote labels for {len(result.records)} iterations to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("input", help="directory with feat_/flow_fwd_/flow_bwd_ tensors")
    p.add_argument("output", help="output directory")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one configuration field (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for pair fitting")
    p.add_argument("--refine", metavar="MODE",
                   help="mask post-processing: none, morph or external:<command>")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="romoseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="compute motion masks for a sequence")
    _add_run_options(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("dump-labels", help="write per-iteration pseudo-labels and Sampson maps")
    _add_run_options(p)
    p.set_defaults(func=cmd_dump_labels)

    p = sub.add_parser("synth", help="render a synthetic sequence with ground truth")
    p.add_argument("spec", help=f"scene spec JSON file or a preset: {', '.join(PRESETS)}")
    p.add_argument("output", help="output directory")
    p.add_argument("--seed", type=int, help="random seed (overrides the scene file)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval-masks", help="per-frame IoU of predicted against ground-truth masks")
    p.add_argument("pred", help="directory of predicted mask_%%06d.pgm files")
    p.add_argument("gt", help="directory of ground-truth mask_%%06d.pgm files")
    p.add_argument("--csv", help="per-frame table path (default: <pred>/iou.csv)")
    p.set_defaults(func=cmd_eval_masks)

    p = sub.add_parser("eval-traj", help="ATE and RPE of a TUM trajectory against a reference")
    p.add_argument("est", help="estimated trajectory (TUM format)")
    p.add_argument("ref", help="reference trajectory (TUM format)")
    p.add_argument("--scale", action="store_true", help="align with a similarity transform")
    p.add_argument("--delta", type=int, default=1, help="RPE frame step")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval_traj)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("ROMOSEG_LOG", "WARNING").upper()
    if level.isdigit():
        level = int(level)
    elif not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


_INPUT_ERRORS = (FormatError, ConfigError, GenerationError, InputError, FileNotFoundError)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RomoError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
