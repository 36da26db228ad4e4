"""Dataset-level inference, evaluation and the ablation harness."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data_io import Sequence, read_manifest, sequence_camera, write_dataset
from .diffusion import InferenceConfig, cosine_schedule, inference_loop
from .metrics import MetricReport, aggregate_hypotheses, evaluate, mpjpe
from .model import DenoiserAdapter, HSTDenoiser
from .skeleton import SkeletonTopology
from .training import Ablation, TrainConfig, train

log = logging.getLogger(__name__)


def predict_sequence(model: HSTDenoiser, topo: SkeletonTopology, seq: Sequence, cfg: InferenceConfig,
                     batch_size: int = 64) -> np.ndarray:
    """Hypotheses (H, N, J, 3) for one sequence, processed in windows of the model's frame count."""
    if seq.pose2d is None:
        raise ValueError(f"sequence {seq.name} has no 2D condition")
    sched = cosine_schedule(cfg.T)
    den = DenoiserAdapter(model, batch_size=batch_size)
    disentangled = model.cfg.disentangle_input
    cond = np.asarray(seq.pose2d, dtype=np.float64)
    win = model.cfg.num_frames
    chunks = []
    for k, s in enumerate(range(0, cond.shape[0], win)):
        # distinct noise stream per window, still a pure function of the seed
        wcfg = replace(cfg, seed=cfg.seed + k) if k else cfg
        hs = inference_loop(den, cond[s:s + win], wcfg, topo, sched, disentangled=disentangled)
        chunks.append(hs.poses)
    return np.concatenate(chunks, axis=1)


def predict_dataset(model, topo, sequences, cfg: InferenceConfig, out_dir=None) -> list[Sequence]:
    """Run inference on every sequence; optionally write a predictions dataset."""
    provenance = {"seed": cfg.seed, "H": cfg.H, "W": cfg.W, "sigma_scale": cfg.sigma_scale, "T": cfg.T}
    preds = []
    for seq in sequences:
        hyps = predict_sequence(model, topo, seq, cfg)
        preds.append(Sequence(seq.name, {"pose3d": hyps.mean(0), "hypotheses": hyps},
                              {"provenance": provenance, "aggregation": "mean"}))
    if out_dir is not None:
        write_dataset(out_dir, preds, topo, split="pred", meta={"kind": "predictions", "provenance": provenance})
    return preds


def dataset_scale(path) -> float:
    """Millimetre scale factor from the manifest's declared units."""
    units = read_manifest(path).get("meta", {}).get("units", "mm")
    return {"m": 1000.0, "mm": 1.0}.get(units, 1.0)


def evaluate_predictions(preds: list[Sequence], gts: list[Sequence], topo: SkeletonTopology, mode: str = "mean",
                         scale: float = 1.0) -> tuple[MetricReport, list[dict]]:
    """Aggregate hypotheses per sequence, then score all frames together.

    Also returns per-sequence rows (name, mpjpe, per-hypothesis mpjpe range).
    """
    by_name = {s.name: s for s in gts}
    missing = [p.name for p in preds if p.name not in by_name]
    if missing:
        raise KeyError(f"no ground truth for {missing[:3]}")
    all_pred, all_gt, rows = [], [], []
    for p in preds:
        g = by_name[p.name]
        hyps = p.arrays.get("hypotheses", p.pose3d[None])
        hyps = np.asarray(hyps, dtype=np.float64)
        gt = np.asarray(g.pose3d, dtype=np.float64)
        kw = {}
        if mode == "j-agg":
            kw = dict(cond2d=g.pose2d, cam=sequence_camera(g), root_traj=g.root)
        elif mode == "j-best":
            kw = dict(gt=gt)
        agg = aggregate_hypotheses(hyps, mode, **kw)
        per_h = [mpjpe(h, gt) * scale for h in hyps]
        rows.append({"name": p.name, "mpjpe": mpjpe(agg, gt) * scale,
                     "best_hypothesis": min(per_h), "worst_hypothesis": max(per_h)})
        all_pred.append(agg)
        all_gt.append(gt)
    if not all_pred:
        raise ValueError("no predictions to evaluate")
    rep = evaluate(np.concatenate(all_pred), np.concatenate(all_gt), topo, mode=mode, scale=scale)
    return rep, rows


# ---------------------------------------------------------------------------
# ablation harness

GRIDS = {
    # (disentangle input, disentangle output) combinations
    "disentangle": [
        ("raw_in/raw_out", dict(disentangle_input=False, disentangle_output=False)),
        ("raw_in/dis_out", dict(disentangle_input=False, disentangle_output=True)),
        ("dis_in/raw_out", dict(disentangle_input=True, disentangle_output=False)),
        ("dis_in/dis_out", dict(disentangle_input=True, disentangle_output=True)),
    ],
    # modules added one by one to a plain spatial/temporal baseline
    "modules": [
        ("baseline", dict(use_hierarchical_embedding=False, use_hrst=False, use_hrtt=False)),
        ("+hier_emb", dict(use_hierarchical_embedding=True, use_hrst=False, use_hrtt=False)),
        ("+hier_emb+hrst", dict(use_hierarchical_embedding=True, use_hrst=True, use_hrtt=False)),
        ("+hier_emb+hrst+hrtt", dict(use_hierarchical_embedding=True, use_hrst=True, use_hrtt=True)),
    ],
    "loss": [
        ("pos_loss", dict(use_dis_loss=False)),
        ("pos_loss+dis_loss", dict(use_dis_loss=True)),
    ],
    "hrst": [
        ("hrst_off", dict(use_hrst=False)),
        ("hrst_on", dict(use_hrst=True)),
    ],
}

# orderings reported by the reference ablations: (grid, better cell, worse cell)
REFERENCE_CLAIMS = [
    ("disentangle", "dis_in/raw_out", "raw_in/raw_out"),
    ("disentangle", "raw_in/raw_out", "raw_in/dis_out"),
    ("disentangle", "dis_in/raw_out", "dis_in/dis_out"),
    ("modules", "+hier_emb", "baseline"),
    ("modules", "+hier_emb+hrst", "+hier_emb"),
    ("modules", "+hier_emb+hrst+hrtt", "+hier_emb+hrst"),
    ("loss", "pos_loss+dis_loss", "pos_loss"),
]


@dataclass
class AblationCell:
    grid: str
    name: str
    ablation: Ablation
    report: MetricReport | None = None
    records: list | None = None
    steps: int = 0


def run_ablation(sequences, base: TrainConfig, topo: SkeletonTopology, grids=("disentangle",),
                 infer_cfg: InferenceConfig | None = None, out_dir=None, scale: float = 1.0,
                 eval_sequences=None) -> list[AblationCell]:
    """Train and evaluate every cell of the requested grids with otherwise identical settings."""
    infer_cfg = infer_cfg or InferenceConfig(H=1, W=1, T=base.T)
    eval_sequences = eval_sequences if eval_sequences is not None else sequences
    out = Path(out_dir) if out_dir is not None else None
    cells = []
    for grid in grids:
        if grid not in GRIDS:
            raise ValueError(f"unknown ablation grid {grid!r}; choose from {sorted(GRIDS)}")
        for name, flags in GRIDS[grid]:
            ab = replace(base.ablation, **flags)
            cfg = replace(base, ablation=ab)
            cell_dir = out / "cells" / grid / name.replace("/", "_").replace("+", "p") if out else None
            log.info("ablation cell %s/%s", grid, name)
            state, records = train(sequences, cfg, topo, out_dir=cell_dir)
            preds = predict_dataset(state.model, topo, eval_sequences, infer_cfg)
            rep, _ = evaluate_predictions(preds, eval_sequences, topo, "mean", scale)
            cells.append(AblationCell(grid, name, ab, rep, records, state.step))
    return cells


def check_claims(cells: list[AblationCell]) -> list[dict]:
    """Observed direction of each reference ordering; reported, never enforced."""
    table = {(c.grid, c.name): c.report.mpjpe for c in cells}
    out = []
    for grid, better, worse in REFERENCE_CLAIMS:
        if (grid, better) in table and (grid, worse) in table:
            out.append({"grid": grid, "claim": f"{better} < {worse}", "better": table[(grid, better)],
                        "worse": table[(grid, worse)], "holds": bool(table[(grid, better)] < table[(grid, worse)])})
    return out


TABLE_FIELDS = ["grid", "cell", "disentangle_input", "disentangle_output", "use_hierarchical_embedding",
                "use_hrst", "use_hrtt", "use_dis_loss", "steps", "final_L_total", "mpjpe", "p_mpjpe", "pck", "auc"]


def cell_rows(cells: list[AblationCell]) -> list[dict]:
    rows = []
    for c in cells:
        r = {"grid": c.grid, "cell": c.name, **{k: int(v) for k, v in vars(c.ablation).items()}, "steps": c.steps,
             "final_L_total": c.records[-1]["L_total"] if c.records else float("nan")}
        r.update({k: getattr(c.report, k) for k in ("mpjpe", "p_mpjpe", "pck", "auc")})
        rows.append(r)
    return rows


def write_table(rows: list[dict], path, fields=None, delimiter: str = ",") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fields is None:
        fields = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, delimiter=delimiter, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


def write_ablation_outputs(cells: list[AblationCell], out_dir, delimiter: str = ",") -> dict[str, Path]:
    """Table, JSON summary and figures for a finished ablation run."""
    from .plotting import plot_hierarchy_errors, plot_loss_curves

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = "tsv" if delimiter == "\t" else "csv"
    paths = {"table": write_table(cell_rows(cells), out / f"ablation.{ext}", TABLE_FIELDS, delimiter)}
    summary = {
        "cells": [{"grid": c.grid, "cell": c.name, "ablation": vars(c.ablation), "steps": c.steps,
                   "report": c.report.to_json()} for c in cells],
        "reference_claims": check_claims(cells),
    }
    paths["json"] = out / "ablation.json"
    paths["json"].write_text(json.dumps(summary, indent=1))
    for grid in dict.fromkeys(c.grid for c in cells):
        group = [c for c in cells if c.grid == grid]
        paths[f"loss_{grid}"] = plot_loss_curves({c.name: c.records for c in group}, out / f"loss_{grid}.png",
                                                 key="L_pos")
        paths[f"hier_{grid}"] = plot_hierarchy_errors(
            {c.name: c.report.per_hierarchy_mpjpe for c in group}, out / f"hierarchy_{grid}.png", unit="(mm)")
    return paths
