"""Synthetic motion, camera projection and the on-disk dataset layout.

A dataset is a directory holding ``manifest.json`` plus one raw little-endian
float32 blob per split. Each sequence owns a contiguous byte range of its split's
blob; the manifest records array shapes, byte offsets and a SHA-256 of the range.
Arrays are stored C-order (frame-major, then joint, then coordinate).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from .skeleton import BoneDecomposition, SkeletonTopology, compose, topology_by_name

FORMAT_NAME = "hierpose-dataset"
FORMAT_VERSION = 1
LE_F32 = np.dtype("<f4")


class DataError(RuntimeError):
    pass


@dataclass
class Sequence:
    name: str
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def pose3d(self) -> np.ndarray:
        return self.arrays["pose3d"]

    @property
    def pose2d(self) -> np.ndarray | None:
        return self.arrays.get("pose2d")

    @property
    def root(self) -> np.ndarray | None:
        return self.arrays.get("root")

    @property
    def num_frames(self) -> int:
        return self.pose3d.shape[-3]


# ---------------------------------------------------------------------------
# cameras


@dataclass
class CameraModel:
    kind: str = "pinhole"  # or "orthographic"
    fx: float = 1000.0
    fy: float = 1000.0
    cx: float = 500.0
    cy: float = 500.0
    width: int = 1000
    height: int = 1000
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.kind not in ("pinhole", "orthographic"):
            raise ValueError(f"unknown camera kind {self.kind!r}")
        if self.kind == "pinhole" and (self.fx <= 0 or self.fy <= 0):
            raise ValueError("focal lengths must be positive")
        r = self.rotation
        if r.shape != (3, 3) or not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation must be orthonormal")

    def to_json(self) -> dict:
        d = asdict(self)
        d["rotation"] = self.rotation.tolist()
        d["translation"] = self.translation.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CameraModel":
        return cls(**d)


def normalize_2d(raw, image_w, image_h):
    """Pixel coordinates to [-1, 1] along x, keeping the aspect ratio on y."""
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    raw = np.asarray(raw, dtype=np.float64)
    return raw / image_w * 2 - np.array([1.0, image_h / image_w])


def denormalize_2d(norm, image_w, image_h):
    norm = np.asarray(norm, dtype=np.float64)
    return (norm + np.array([1.0, image_h / image_w])) * image_w / 2


def project(pose, cam: CameraModel, normalize: bool = True) -> np.ndarray:
    """Project (..., 3) world points to (..., 2)."""
    p = np.asarray(pose, dtype=np.float64) @ cam.rotation.T + cam.translation
    if cam.kind == "orthographic":
        return p[..., :2].copy()
    z = p[..., 2:3]
    if (z <= 0).any():
        raise ValueError("point at or behind the camera plane")
    uv = p[..., :2] / z * np.array([cam.fx, cam.fy]) + np.array([cam.cx, cam.cy])
    return normalize_2d(uv, cam.width, cam.height) if normalize else uv


# ---------------------------------------------------------------------------
# synthetic motion

# rest-pose bone directions (x right, y up, z toward viewer) and lengths for the
# 17-joint layout, indexed by child joint
_H36M_REST = {
    1: ((-1, 0, 0), 0.13), 2: ((0, -1, 0), 0.45), 3: ((0, -1, 0), 0.45),
    4: ((1, 0, 0), 0.13), 5: ((0, -1, 0), 0.45), 6: ((0, -1, 0), 0.45),
    7: ((0, 1, 0), 0.23), 8: ((0, 1, 0), 0.25), 9: ((0, 1, 0), 0.10), 10: ((0, 1, 0), 0.12),
    11: ((1, 0, 0), 0.15), 12: ((0, -1, 0), 0.28), 13: ((0, -1, 0), 0.25),
    14: ((-1, 0, 0), 0.15), 15: ((0, -1, 0), 0.28), 16: ((0, -1, 0), 0.25),
}


@dataclass
class SyntheticMotionSpec:
    topo_name: str = "h36m"
    num_sequences: int = 64
    N: int = 27
    bone_lengths: list[float] | None = None  # per bone, in bone order
    angular_speed_range: tuple[float, float] = (0.0, 0.05)
    rest_jitter: float = 0.3  # radians of random tilt away from the rest pose
    length_jitter: float = 0.1  # relative per-sequence length perturbation
    camera_distance: float = 5.0
    yaw_range: tuple[float, float] = (-np.pi / 4, np.pi / 4)  # global heading about the vertical axis
    motion: str = "hinge"  # "hinge": one-sided flexion about fixed lateral axes; "free": random axes
    flex_range: tuple[float, float] = (0.2, 1.2)  # hinge flexion amplitude, radians
    seed: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.bone_lengths is not None and min(self.bone_lengths) <= 0:
            raise ValueError("bone lengths must be positive")
        lo, hi = self.angular_speed_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad angular speed range {self.angular_speed_range}")
        if self.motion not in ("hinge", "free"):
            raise ValueError(f"unknown motion {self.motion!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["angular_speed_range"] = list(self.angular_speed_range)
        d["yaw_range"] = list(self.yaw_range)
        d["flex_range"] = list(self.flex_range)
        return d


def rotation_about(axis, angle):
    """Rodrigues rotation matrices for unit ``axis`` (..., 3) and ``angle`` (...)."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    K = np.stack([np.stack([zero, -z, y], -1), np.stack([z, zero, -x], -1), np.stack([-y, x, zero], -1)], -2)
    s, c = np.sin(angle)[..., None, None], np.cos(angle)[..., None, None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def default_rest(topo: SkeletonTopology, rng: np.random.Generator):
    if topo.num_joints == 17 and tuple(topo.parents) == (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15):
        dirs = np.array([_H36M_REST[c][0] for _, c in topo.bone_order], dtype=np.float64)
        lengths = np.array([_H36M_REST[c][1] for _, c in topo.bone_order])
        return dirs, lengths
    B = topo.num_joints - 1
    return _unit(rng.standard_normal((B, 3))), np.full(B, 0.25)


def generate_synthetic(spec: SyntheticMotionSpec, topo: SkeletonTopology | None = None) -> list[Sequence]:
    """Forward-kinematic motion with fixed per-sequence bone lengths, seen by a pinhole camera.

    Each bone direction starts near the rest pose. With ``motion="hinge"`` it flexes
    back and forth on one side of the rest pose about a fixed lateral axis, so a
    view from the front pins down depth; ``"free"`` spins it about a random axis at
    a constant angular speed, which leaves depth mirror-ambiguous. ``pose3d`` is root-relative in camera
    coordinates; ``root`` holds the camera-frame root trajectory and ``pose2d`` the
    normalized projection of ``pose3d + root``.
    """
    topo = topo if topo is not None else topology_by_name(spec.topo_name)
    rng = np.random.default_rng(spec.seed)
    rest_dirs, base_lengths = default_rest(topo, rng)
    if spec.bone_lengths is not None:
        base_lengths = np.asarray(spec.bone_lengths, dtype=np.float64)
        if base_lengths.shape != (topo.num_joints - 1,):
            raise ValueError(f"need {topo.num_joints - 1} bone lengths")
    B, N = topo.num_joints - 1, spec.N
    # world y-up to camera y-down, camera looking along +z
    flip = np.diag([1.0, -1.0, -1.0])
    cam = CameraModel()
    frames = np.arange(N, dtype=np.float64)
    # lateral axes: rotating about them swings a bone toward the front (+z world)
    hinge = np.cross(rest_dirs, [0.0, 0.0, 1.0])
    small = np.linalg.norm(hinge, axis=-1) < 1e-6
    hinge[small] = [1.0, 0.0, 0.0]
    hinge = _unit(hinge)
    out = []
    for i in range(spec.num_sequences):
        lengths = base_lengths * (1 + spec.length_jitter * rng.uniform(-1, 1, B))
        tilt = rotation_about(_unit(rng.standard_normal((B, 3))), rng.uniform(0, spec.rest_jitter, B))
        start = np.einsum("bij,bj->bi", tilt, rest_dirs)
        if spec.motion == "hinge":
            axis = hinge
            amp = rng.uniform(*spec.flex_range, B)
            speed = rng.uniform(*spec.angular_speed_range, B)
            phase = rng.uniform(0, 2 * np.pi, B)
            angle = amp * 0.5 * (1 - np.cos(speed * frames[:, None] + phase))
        else:
            axis = _unit(rng.standard_normal((B, 3)))
            speed = rng.uniform(*spec.angular_speed_range, B) * rng.choice([-1.0, 1.0], B)
            angle = speed * frames[:, None]
        rot = rotation_about(axis[None], angle)  # (N, B, 3, 3)
        dirs = np.einsum("nbij,bj->nbi", rot, start)
        yaw = rotation_about(np.array([0.0, 1.0, 0.0]), rng.uniform(*spec.yaw_range))
        dirs = dirs @ (flip @ yaw).T
        decomp = BoneDecomposition(
            np.broadcast_to(lengths[None, :, None], (N, B, 1)).copy(), dirs, topo.bone_order
        )
        pose3d = compose(np.zeros((N, 3)), decomp, topo)
        root = np.zeros((N, 3))
        root[:, 2] = spec.camera_distance
        root[:, :2] = rng.uniform(-0.3, 0.3, 2)
        pose2d = project(pose3d + root[:, None, :], cam)
        out.append(Sequence(
            f"synth_{i:04d}",
            {"pose3d": pose3d, "pose2d": pose2d, "root": root},
            {"bone_lengths": lengths.tolist(), "camera": cam.to_json(), "seed": spec.seed},
        ))
    return out


def sequence_camera(seq: Sequence) -> CameraModel | None:
    cam = seq.meta.get("camera")
    return CameraModel.from_json(cam) if cam is not None else None


# ---------------------------------------------------------------------------
# serialization


def _as_f32(a) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=LE_F32))
    if not np.isfinite(a).all():
        raise DataError("refusing to write non-finite values")
    return a


def write_dataset(path, sequences, topo: SkeletonTopology | None = None, split: str = "train",
                  meta: dict | None = None) -> Path:
    """Write ``sequences`` as one split of the dataset at ``path``.

    Other splits already present in the manifest are preserved.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with FileLock(str(root / ".lock")):
        manifest_path = root / "manifest.json"
        manifest = {"format": FORMAT_NAME, "format_version": FORMAT_VERSION, "topology": None,
                    "meta": {}, "splits": {}}
        if manifest_path.exists():
            manifest = _load_manifest(root)
        if topo is not None:
            manifest["topology"] = topo.to_json()
        if meta:
            manifest["meta"].update(meta)

        blob_name = f"{split}.f32"
        table = []
        offset = 0
        with open(root / blob_name, "wb") as fh:
            for seq in sequences:
                start = offset
                digest = hashlib.sha256()
                arrays = {}
                for key, arr in seq.arrays.items():
                    a = _as_f32(arr)
                    raw = a.tobytes()
                    fh.write(raw)
                    digest.update(raw)
                    arrays[key] = {"offset": offset, "shape": list(a.shape)}
                    offset += len(raw)
                first = seq.arrays.get("pose3d", next(iter(seq.arrays.values()), np.zeros((0, 0, 3))))
                table.append({
                    "name": seq.name,
                    "N": int(np.shape(first)[-3]) if np.ndim(first) >= 3 else 0,
                    "J": int(np.shape(first)[-2]) if np.ndim(first) >= 2 else 0,
                    "dtype": "float32",
                    "byte_range": [start, offset],
                    "arrays": arrays,
                    "sha256": digest.hexdigest(),
                    "meta": seq.meta,
                })
        manifest["splits"][split] = {"blob": blob_name, "nbytes": offset, "sequences": table}
        tmp = manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(manifest, indent=1))
        tmp.replace(manifest_path)
    return root


def _load_manifest(root: Path) -> dict:
    path = root / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise DataError(f"{path}: not a {FORMAT_NAME} manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: format version {manifest.get('format_version')} != {FORMAT_VERSION}")
    return manifest


def read_manifest(path) -> dict:
    return _load_manifest(Path(path))


def read_topology(path) -> SkeletonTopology | None:
    from .skeleton import build_topology

    t = read_manifest(path).get("topology")
    return build_topology(t["parents"], t.get("joint_names")) if t else None


def read_dataset(path, split: str = "train") -> list[Sequence]:
    root = Path(path)
    manifest = _load_manifest(root)
    if split not in manifest["splits"]:
        raise DataError(f"{root}: no split {split!r} (have {sorted(manifest['splits'])})")
    info = manifest["splits"][split]
    blob_path = root / info["blob"]
    try:
        payload = blob_path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {blob_path}: {exc}") from exc
    if len(payload) != info["nbytes"]:
        raise DataError(f"{blob_path}: truncated payload ({len(payload)} of {info['nbytes']} bytes)")
    out = []
    for entry in info["sequences"]:
        start, end = entry["byte_range"]
        if hashlib.sha256(payload[start:end]).hexdigest() != entry["sha256"]:
            raise DataError(f"{blob_path}: checksum failure in sequence {entry['name']!r}")
        arrays = {}
        for key, spec in entry["arrays"].items():
            count = int(np.prod(spec["shape"]))
            a = np.frombuffer(payload, dtype=LE_F32, count=count, offset=spec["offset"]).reshape(spec["shape"])
            if not np.isfinite(a).all():
                raise DataError(f"{blob_path}: non-finite values in {entry['name']}/{key}")
            arrays[key] = a.astype(np.float32)
        out.append(Sequence(entry["name"], arrays, entry.get("meta", {})))
    return out
