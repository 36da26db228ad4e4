"""Command-line entry point: ``hierpose <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure. Failures
print a one-line JSON object ``{"error": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

ABLATION_FLAGS = ("disentangle_input", "disentangle_output", "use_hierarchical_embedding", "use_hrst", "use_hrtt",
                  "use_dis_loss")


class UsageError(Exception):
    pass


def _bool(s: str) -> bool:
    v = s.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _load_json(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _add_train_args(p):
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--toy", action="store_true", help="start from the desk-scale overfitting config")
    for name in ("epochs", "max_steps", "batch_size", "seed", "T", "dim", "num_loops", "num_heads", "num_frames"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int)
    p.add_argument("--lr", type=float)
    for flag in ABLATION_FLAGS:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=_bool, metavar="BOOL")


def _train_config(args):
    from .training import TrainConfig, toy_config

    raw = _load_json(args.config)
    try:
        cfg = toy_config(**raw) if args.toy else TrainConfig.from_json(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc
    over = {k: getattr(args, k) for k in ("epochs", "max_steps", "batch_size", "seed", "T", "dim", "num_loops",
                                          "num_heads", "num_frames", "lr") if getattr(args, k, None) is not None}
    abl = {k: getattr(args, k) for k in ABLATION_FLAGS if getattr(args, k, None) is not None}
    cfg = replace(cfg, **over)
    if abl:
        cfg = replace(cfg, ablation=replace(cfg.ablation, **abl))
    return cfg


def _add_infer_args(p):
    p.add_argument("--infer-config", help="InferenceConfig JSON")
    p.add_argument("-H", "--hypotheses", dest="H", type=int)
    p.add_argument("-W", "--iterations", dest="W", type=int)
    p.add_argument("--sigma-scale", type=float)
    p.add_argument("--infer-seed", type=int)


def _infer_config(args, T):
    from .diffusion import InferenceConfig

    raw = {"T": T, **_load_json(args.infer_config)}
    for key, attr in (("H", "H"), ("W", "W"), ("sigma_scale", "sigma_scale"), ("seed", "infer_seed")):
        if getattr(args, attr, None) is not None:
            raw[key] = getattr(args, attr)
    try:
        return InferenceConfig.from_json(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad inference config: {exc}") from exc


def _topology(data_dir):
    from .data_io import read_topology
    from .skeleton import h36m_topology

    return read_topology(data_dir) or h36m_topology()


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_synth(args):
    from .data_io import SyntheticMotionSpec, generate_synthetic, write_dataset
    from .skeleton import topology_by_name

    raw = _load_json(args.spec)
    for key in ("num_sequences", "N", "seed", "topo_name"):
        if getattr(args, key, None) is not None:
            raw[key] = getattr(args, key)
    try:
        spec = SyntheticMotionSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad synthetic spec: {exc}") from exc
    topo = topology_by_name(spec.topo_name)
    seqs = generate_synthetic(spec, topo)
    write_dataset(args.out, seqs, topo, split=args.split, meta={"units": "m", "synthetic": spec.to_json()})
    return {"out": str(args.out), "split": args.split, "sequences": len(seqs)}


def cmd_train(args):
    from .data_io import read_dataset
    from .training import train

    cfg = _train_config(args)
    topo = _topology(args.data)
    seqs = read_dataset(args.data, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.json").write_text(json.dumps(cfg.to_json(), indent=1))
    state, records = train(seqs, cfg, topo, out_dir=out)
    return {"checkpoint": str(out / "checkpoint.bin"), "steps": state.step,
            "final_L_total": records[-1]["L_total"] if records else None}


def cmd_infer(args):
    from .checkpoint import load_checkpoint
    from .data_io import read_dataset
    from .pipeline import predict_dataset

    model, topo, extra = load_checkpoint(args.checkpoint)
    T = extra.get("train", {}).get("T", 1000)
    cfg = _infer_config(args, T)
    seqs = read_dataset(args.data, args.split)
    predict_dataset(model, topo, seqs, cfg, out_dir=args.out)
    return {"out": str(args.out), "sequences": len(seqs), "H": cfg.H, "W": cfg.W}


def _write_report(report, rows, args):
    from .pipeline import write_table
    from .plotting import plot_hierarchy_errors

    payload = report.to_json()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, indent=1))
        if rows:
            write_table(rows, out.with_suffix(".tsv" if args.tsv else ".csv"), delimiter="\t" if args.tsv else ",")
        if args.figure:
            plot_hierarchy_errors({report.aggregation_mode: report.per_hierarchy_mpjpe}, args.figure, unit="(mm)")
    return payload


def cmd_eval(args):
    from .data_io import read_dataset
    from .pipeline import dataset_scale, evaluate_predictions

    topo = _topology(args.gt)
    preds = read_dataset(args.pred, args.pred_split)
    gts = read_dataset(args.gt, args.split)
    scale = args.scale if args.scale is not None else dataset_scale(args.gt)
    rep, rows = evaluate_predictions(preds, gts, topo, args.mode, scale)
    return _write_report(rep, rows, args)


def cmd_ablate(args):
    from .data_io import read_dataset
    from .pipeline import dataset_scale, run_ablation, write_ablation_outputs

    cfg = _train_config(args)
    topo = _topology(args.data)
    seqs = read_dataset(args.data, args.split)
    grids = [g.strip() for g in args.grid.split(",") if g.strip()]
    ifg = _infer_config(args, cfg.T)
    cells = run_ablation(seqs, cfg, topo, grids, ifg, out_dir=args.out, scale=dataset_scale(args.data))
    paths = write_ablation_outputs(cells, args.out, delimiter="\t" if args.tsv else ",")
    return {k: str(v) for k, v in paths.items()}


def cmd_plot(args):
    from .plotting import plot_hierarchy_errors, plot_loss_curves

    if args.kind == "loss":
        curves = {}
        for spec in args.inputs:
            label, _, path = spec.rpartition("=")
            path = Path(path)
            try:
                records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
            except (OSError, json.JSONDecodeError) as exc:
                raise FileNotFoundError(f"cannot read metrics log {path}: {exc}") from exc
            curves[label or path.parent.name or str(path)] = records
        plot_loss_curves(curves, args.out, key=args.key, window=args.window)
    else:
        reports = {}
        for spec in args.inputs:
            label, _, path = spec.rpartition("=")
            rep = _load_json(path)
            reports[label or rep.get("aggregation_mode", path)] = rep["per_hierarchy_mpjpe"]
        plot_hierarchy_errors(reports, args.out, unit="(mm)")
    return {"figure": str(args.out)}


def cmd_skeleton(args):
    from .data_io import read_dataset
    from .plotting import plot_skeleton

    topo = _topology(args.data)
    seqs = {s.name: s for s in read_dataset(args.data, args.split)}
    if args.sequence not in seqs:
        raise KeyError(f"no sequence {args.sequence!r}")
    gt = None
    if args.gt:
        gt = {s.name: s for s in read_dataset(args.gt, args.gt_split)}[args.sequence].pose3d[args.frame]
    plot_skeleton(np.asarray(seqs[args.sequence].pose3d[args.frame]), topo, args.out, gt=gt)
    return {"figure": str(args.out)}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hierpose", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="SyntheticMotionSpec JSON")
    p.add_argument("--num-sequences", dest="num_sequences", type=int)
    p.add_argument("--frames", dest="N", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--topology", dest="topo_name")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_make_synth)

    p = sub.add_parser("train", help="train a denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="multi-hypothesis inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    _add_infer_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--pred-split", default="pred")
    p.add_argument("--gt", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--mode", default="mean", choices=["mean", "j-agg", "j-best"])
    p.add_argument("--scale", type=float, help="factor to millimetres (default from dataset units)")
    p.add_argument("--out", help="report JSON path; a per-sequence table is written next to it")
    p.add_argument("--tsv", action="store_true")
    p.add_argument("--figure", help="per-hierarchy bar chart path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score a grid of ablation toggles")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default="disentangle", help="comma list of: disentangle, modules, loss, hrst")
    p.add_argument("--tsv", action="store_true")
    _add_train_args(p)
    _add_infer_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render figures from logs or reports")
    p.add_argument("kind", choices=["loss", "hierarchy"])
    p.add_argument("inputs", nargs="+", help="[label=]path to metrics.jsonl or report JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--key", default="L_total")
    p.add_argument("--window", type=int, default=20)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("skeleton", help="draw one frame of a sequence")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--sequence", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--gt")
    p.add_argument("--gt-split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_skeleton)
    return ap


def _fail(code, exc):
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .data_io import DataError
    from .diffusion import NumericalError
    from .training import TrainingError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except (DataError, CheckpointError, OSError, KeyError) as exc:
        return _fail(EXIT_DATA, exc)
    except (NumericalError, TrainingError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except ValueError as exc:
        return _fail(EXIT_USAGE, exc)
    print(json.dumps(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
