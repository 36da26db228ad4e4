"""Pose error metrics and multi-hypothesis aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data_io import CameraModel, project
from .diffusion import HypothesisSet
from .skeleton import SkeletonTopology, hierarchy_groups

AUC_THRESHOLDS = np.arange(0.0, 151.0, 5.0)


@dataclass
class MetricReport:
    mpjpe: float
    p_mpjpe: float
    per_hierarchy_mpjpe: dict[int, float]
    pck: float
    auc: float
    aggregation_mode: str = "mean"
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_hierarchy_mpjpe"] = {str(k): v for k, v in self.per_hierarchy_mpjpe.items()}
        return d


def _check(pred, gt):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def root_center(pose, root: int | None = 0):
    if root is None:
        return pose
    return pose - pose[..., root:root + 1, :]


def joint_errors(pred, gt, root: int | None = 0) -> np.ndarray:
    """Per-joint Euclidean error (..., J) after root-centering both poses."""
    pred, gt = _check(pred, gt)
    return np.linalg.norm(root_center(pred, root) - root_center(gt, root), axis=-1)


def mpjpe(pred, gt, root: int | None = 0) -> float:
    return float(joint_errors(pred, gt, root).mean())


def procrustes_align(pred, gt, return_flags: bool = False):
    """Align each frame of ``pred`` (..., J, 3) to ``gt`` with the optimal similarity transform.

    Frames whose centered prediction has rank < 2 fall back to translation-only alignment.
    """
    pred, gt = _check(pred, gt)
    shape = pred.shape
    P = pred.reshape(-1, shape[-2], 3)
    G = gt.reshape(-1, shape[-2], 3)
    mu_p, mu_g = P.mean(1, keepdims=True), G.mean(1, keepdims=True)
    P0, G0 = P - mu_p, G - mu_g
    M = np.einsum("fji,fjk->fik", P0, G0)  # (F, 3, 3) = P0^T G0
    U, S, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.ones((len(P), 3))
    D[:, -1] = d
    R = np.einsum("fij,fj,fjk->fik", U, D, Vt)  # maps pred rows onto gt: P0 @ R
    var_p = (P0 ** 2).sum((1, 2))
    scale = (S * D).sum(1) / np.where(var_p > 0, var_p, 1.0)
    sv = np.linalg.svd(P0, compute_uv=False)
    degenerate = sv[:, 1] <= 1e-9 * np.maximum(sv[:, 0], 1e-300)
    aligned = scale[:, None, None] * (P0 @ R) + mu_g
    aligned[degenerate] = P0[degenerate] + mu_g[degenerate]
    aligned = aligned.reshape(shape)
    if return_flags:
        return aligned, degenerate.reshape(shape[:-2])
    return aligned


def p_mpjpe(pred, gt) -> float:
    aligned = procrustes_align(pred, gt)
    return float(np.linalg.norm(aligned - np.asarray(gt, dtype=np.float64), axis=-1).mean())


def per_hierarchy_mpjpe(pred, gt, topo: SkeletonTopology, root: int | None = 0) -> dict[int, float]:
    err = joint_errors(pred, gt, root)
    return {lvl: float(err[..., joints].mean()) for lvl, joints in hierarchy_groups(topo).items() if joints}


def pck_auc(pred, gt, threshold: float = 150.0, auc_thresholds=AUC_THRESHOLDS, root: int | None = 0):
    """PCK at ``threshold`` and the mean PCK over ``auc_thresholds``.

    A joint counts as correct when its error is at most the threshold.
    """
    err = joint_errors(pred, gt, root).ravel()
    pck = float((err <= threshold).mean())
    auc = float(np.mean([(err <= th).mean() for th in auc_thresholds]))
    return pck, auc


def aggregate_hypotheses(hyps, mode: str = "mean", cond2d=None, cam: CameraModel | None = None,
                         root_traj=None, gt=None, root: int = 0) -> np.ndarray:
    """Collapse (H, N, J, 3) hypotheses into one (N, J, 3) pose.

    ``mean`` averages per joint. ``j-agg`` picks, per frame and joint, the hypothesis
    whose reprojection (after adding ``root_traj``) lands closest to ``cond2d``.
    ``j-best`` picks per joint against ``gt`` and is an oracle upper bound only.
    j-best selects on root-relative joints.
    """
    poses = hyps.poses if isinstance(hyps, HypothesisSet) else np.asarray(hyps, dtype=np.float64)
    if poses.ndim != 4 or poses.shape[0] < 1:
        raise ValueError(f"expected (H, N, J, 3) hypotheses, got {poses.shape}")
    if mode == "mean":
        return poses.mean(0)
    if mode == "j-agg":
        if cam is None or cond2d is None:
            raise ValueError("j-agg needs a camera and the 2D condition")
        absolute = poses if root_traj is None else poses + np.asarray(root_traj)[None, :, None, :]
        dist = np.linalg.norm(project(absolute, cam) - np.asarray(cond2d)[None], axis=-1)
    elif mode == "j-best":
        if gt is None:
            raise ValueError("j-best needs ground truth")
        dist = np.linalg.norm(root_center(poses, root) - root_center(np.asarray(gt), root)[None], axis=-1)
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    pick = dist.argmin(0)  # (N, J)
    raw = np.take_along_axis(poses, pick[None, ..., None], axis=0)[0]
    # j-best scores root-relative joints; where hypotheses disagree on the root,
    # re-anchor the chosen offsets on the mean root so choices survive centering
    roots = poses[:, :, root:root + 1]
    same_root = (roots == roots[:1]).all(axis=(0, 2, 3))
    if mode == "j-agg" or same_root.all():
        return raw
    centered = np.take_along_axis(root_center(poses, root), pick[None, ..., None], axis=0)[0]
    return np.where(same_root[:, None, None], raw, centered + roots.mean(0))


def evaluate(pred, gt, topo: SkeletonTopology, mode: str = "mean", scale: float = 1.0) -> MetricReport:
    """Full report. ``scale`` converts pose units to millimeters before thresholding."""
    pred, gt = _check(pred, gt)
    pred, gt = pred * scale, gt * scale
    r = topo.root
    _, flags = procrustes_align(pred, gt, return_flags=True)
    pck, auc = pck_auc(pred, gt, root=r)
    notes = []
    if flags.any():
        notes.append(f"procrustes translation-only fallback on {int(flags.sum())} frames")
    if mode == "j-best":
        notes.append("j-best is an oracle selection against ground truth")
    return MetricReport(
        mpjpe=mpjpe(pred, gt, r),
        p_mpjpe=p_mpjpe(pred, gt),
        per_hierarchy_mpjpe=per_hierarchy_mpjpe(pred, gt, topo, r),
        pck=pck,
        auc=auc,
        aggregation_mode=mode,
        flags=notes,
    )
