"""Kinematic tree, hierarchy levels and the bone length / direction decomposition."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

ROOT = -1
DEGENERATE_EPS = 1e-9

# 17-joint Human3.6M layout. Hierarchy assignment is reconstructed from the standard
# tree: pelvis 0; hips/spine 1; knees/thorax 2; ankles/neck/shoulders 3;
# head/elbows 4; wrists 5.
H36M_JOINT_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
H36M_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)
H36M_HIERARCHY = (0, 1, 2, 3, 1, 2, 3, 1, 2, 3, 4, 3, 4, 5, 3, 4, 5)


class TopologyError(ValueError):
    pass


class DegenerateBoneError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonTopology:
    parents: np.ndarray
    hierarchy: np.ndarray
    triplets: tuple[tuple[int, int, int], ...]
    joint_names: tuple[str, ...] | None = None
    # traversal order with every parent before its children
    order: tuple[int, ...] = field(default=())

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parents == ROOT)[0])

    @property
    def bone_order(self) -> list[tuple[int, int]]:
        """(parent, child) pairs, one per non-root joint in joint-index order."""
        return [(int(self.parents[j]), j) for j in range(self.num_joints) if self.parents[j] != ROOT]

    @property
    def bone_children(self) -> np.ndarray:
        return np.array([c for _, c in self.bone_order], dtype=np.int64)

    @property
    def bone_parents(self) -> np.ndarray:
        return np.array([p for p, _ in self.bone_order], dtype=np.int64)

    def children(self, j: int) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.parents == j)]

    @property
    def num_levels(self) -> int:
        return int(self.hierarchy.max()) + 1

    def to_json(self) -> dict:
        names = list(self.joint_names) if self.joint_names is not None else None
        return {"joint_names": names, "parents": [int(p) for p in self.parents]}


def build_topology(parents, joint_names=None) -> SkeletonTopology:
    parents = np.asarray(parents, dtype=np.int64)
    if parents.ndim != 1 or len(parents) < 2:
        raise TopologyError("need at least two joints")
    J = len(parents)
    roots = np.flatnonzero(parents == ROOT)
    if len(roots) != 1:
        raise TopologyError(f"expected exactly one root, found {len(roots)}")
    bad = [j for j, p in enumerate(parents) if p != ROOT and not 0 <= p < J]
    if bad:
        raise TopologyError(f"parent index out of range for joints {bad}")
    if joint_names is not None:
        joint_names = tuple(str(n) for n in joint_names)
        if len(joint_names) != J:
            raise TopologyError("joint_names length differs from parents")

    hierarchy = np.full(J, -1, dtype=np.int64)
    root = int(roots[0])
    hierarchy[root] = 0
    order = [root]
    frontier = [root]
    while frontier:
        nxt = []
        for p in frontier:
            for c in np.flatnonzero(parents == p):
                hierarchy[c] = hierarchy[p] + 1
                order.append(int(c))
                nxt.append(int(c))
        frontier = nxt
    if (hierarchy < 0).any():
        raise TopologyError(f"cycle detected through joints {np.flatnonzero(hierarchy < 0).tolist()}")

    triplets = tuple(
        (int(parents[j]), int(j), int(c))
        for j in range(J)
        if parents[j] != ROOT
        for c in np.flatnonzero(parents == j)
    )
    parents.setflags(write=False)
    hierarchy.setflags(write=False)
    return SkeletonTopology(parents, hierarchy, triplets, joint_names, tuple(order))


def h36m_topology() -> SkeletonTopology:
    return build_topology(H36M_PARENTS, H36M_JOINT_NAMES)


def load_topology(path) -> SkeletonTopology:
    spec = json.loads(Path(path).read_text())
    return build_topology(spec["parents"], spec.get("joint_names"))


def save_topology(topo: SkeletonTopology, path) -> None:
    Path(path).write_text(json.dumps(topo.to_json(), indent=2))


def topology_by_name(name: str) -> SkeletonTopology:
    if name in ("h36m", "h36m17", "human17"):
        return h36m_topology()
    return load_topology(name)


def hierarchy_groups(topo: SkeletonTopology) -> dict[int, list[int]]:
    return {lvl: [int(j) for j in np.flatnonzero(topo.hierarchy == lvl)] for lvl in range(topo.num_levels)}


@dataclass
class BoneDecomposition:
    lengths: np.ndarray  # (..., J-1, 1)
    directions: np.ndarray  # (..., J-1, 3)
    bone_order: list[tuple[int, int]]
    degenerate: np.ndarray | None = None  # mask (..., J-1) of zero-length bones

    @property
    def has_degenerate(self) -> bool:
        return self.degenerate is not None and bool(self.degenerate.any())


def disentangle(pose, topo: SkeletonTopology, allow_zero: bool = False) -> BoneDecomposition:
    """Split joint positions (..., J, 3) into per-bone lengths and unit directions.

    Bones shorter than ``DEGENERATE_EPS`` raise unless ``allow_zero`` is set, in which
    case their direction is the zero vector and they are flagged in ``degenerate``.
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape[-2] != topo.num_joints or pose.shape[-1] != 3:
        raise ValueError(f"pose shape {pose.shape} does not match {topo.num_joints} joints")
    vec = pose[..., topo.bone_children, :] - pose[..., topo.bone_parents, :]
    lengths = np.linalg.norm(vec, axis=-1, keepdims=True)
    degenerate = lengths[..., 0] < DEGENERATE_EPS
    if degenerate.any() and not allow_zero:
        bones = sorted({int(b) for b in np.argwhere(degenerate)[:, -1]})
        raise DegenerateBoneError(f"zero-length bones at bone indices {bones}")
    safe = np.where(lengths < DEGENERATE_EPS, 1.0, lengths)
    directions = np.where(lengths < DEGENERATE_EPS, 0.0, vec / safe)
    return BoneDecomposition(lengths, directions, topo.bone_order, degenerate)


def compose(root_positions, decomp: BoneDecomposition, topo: SkeletonTopology) -> np.ndarray:
    """Forward kinematics: every joint is its parent plus length * direction."""
    root_positions = np.asarray(root_positions, dtype=np.float64)
    offsets = np.asarray(decomp.lengths) * np.asarray(decomp.directions)
    if offsets.shape[-2] != topo.num_joints - 1 or offsets.shape[:-2] != root_positions.shape[:-1]:
        raise ValueError(
            f"shape mismatch: root {root_positions.shape}, bones {offsets.shape}, J={topo.num_joints}"
        )
    return _forward_kinematics(root_positions, offsets, topo)


def _forward_kinematics(root, offsets, topo):
    # shared by the numpy and torch paths
    bone_of = {c: i for i, (_, c) in enumerate(topo.bone_order)}
    joints = [None] * topo.num_joints
    for j in topo.order:
        p = topo.parents[j]
        joints[j] = root if p == ROOT else joints[p] + offsets[..., bone_of[j], :]
    if isinstance(root, torch.Tensor):
        return torch.stack(joints, dim=-2)
    return np.stack(joints, axis=-2)


# torch variants used inside the differentiable training path


def bone_vectors_t(pose: torch.Tensor, topo: SkeletonTopology) -> torch.Tensor:
    children = torch.as_tensor(topo.bone_children, device=pose.device)
    parents = torch.as_tensor(topo.bone_parents, device=pose.device)
    return pose[..., children, :] - pose[..., parents, :]


def disentangle_t(pose: torch.Tensor, topo: SkeletonTopology):
    """Differentiable decomposition. Returns (lengths, directions, degenerate mask)."""
    vec = bone_vectors_t(pose, topo)
    lengths = vec.norm(dim=-1, keepdim=True)
    degenerate = lengths < DEGENERATE_EPS
    directions = torch.where(degenerate, torch.zeros_like(vec), vec / lengths.clamp_min(DEGENERATE_EPS))
    return lengths, directions, degenerate[..., 0]


def compose_t(root: torch.Tensor, lengths: torch.Tensor, directions: torch.Tensor, topo: SkeletonTopology):
    return _forward_kinematics(root, lengths * directions, topo)


def bones_to_joints(values, topo: SkeletonTopology):
    """Scatter per-bone values (..., J-1, C) to a per-joint layout (..., J, C), root zero.

    Each non-root joint carries the values of its incoming bone.
    """
    children = topo.bone_children
    if isinstance(values, torch.Tensor):
        out = values.new_zeros(values.shape[:-2] + (topo.num_joints, values.shape[-1]))
        out[..., torch.as_tensor(children, device=values.device), :] = values
        return out
    out = np.zeros(values.shape[:-2] + (topo.num_joints, values.shape[-1]), dtype=values.dtype)
    out[..., children, :] = values
    return out
