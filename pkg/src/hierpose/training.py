"""Losses, the diffusion training step, and the epoch loop."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .diffusion import NoiseSchedule, cosine_schedule, q_sample
from .model import DenoiserConfig, HSTDenoiser
from .skeleton import SkeletonTopology, disentangle_t

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Ablation:
    disentangle_input: bool = True
    disentangle_output: bool = False
    use_hierarchical_embedding: bool = True
    use_hrst: bool = True
    use_hrtt: bool = True
    use_dis_loss: bool = True


@dataclass
class TrainConfig:
    T: int = 1000
    lr: float = 1e-4
    lr_decay_per_epoch: float = 0.993
    batch_size: int = 4
    epochs: int = 400
    max_steps: int | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    seed: int = 0
    dim: int = 64
    num_loops: int = 2
    num_heads: int = 4
    num_frames: int = 27
    dropout: float = 0.0
    timestep_embedding: bool = True
    log_every: int = 1
    checkpoint_every: int = 0  # epochs; 0 = only at the end
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError("lr_decay_per_epoch must be in (0, 1]")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if isinstance(self.ablation, dict):
            self.ablation = Ablation(**self.ablation)
        self.betas = tuple(self.betas)

    def denoiser_config(self, num_joints: int) -> DenoiserConfig:
        a = self.ablation
        return DenoiserConfig(
            num_joints=num_joints, num_frames=self.num_frames, dim=self.dim, num_loops=self.num_loops,
            num_heads=self.num_heads, dropout=self.dropout, timestep_embedding=self.timestep_embedding,
            use_hierarchical_embedding=a.use_hierarchical_embedding, use_hrst=a.use_hrst, use_hrtt=a.use_hrtt,
            disentangle_input=a.disentangle_input, disentangle_output=a.disentangle_output,
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def toy_config(**overrides) -> TrainConfig:
    """Desk-scale settings for overfitting a small synthetic set."""
    cfg = dict(lr=2e-3, batch_size=16, epochs=500, max_steps=2000, dim=64, num_loops=2, num_heads=4, num_frames=27)
    cfg.update(overrides)
    return TrainConfig(**cfg)


@dataclass
class LossReport:
    L_l: float
    L_d: float
    L_dis: float
    L_pos: float
    L_total: float
    degenerate_bones: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def disentanglement_loss(pred: torch.Tensor, gt: torch.Tensor, topo: SkeletonTopology, reduce: bool = True):
    """Length and direction residual norms between decompositions of ``pred`` and ``gt``.

    Returns (L_l, L_d, L_dis, n_degenerate); with ``reduce=False`` the losses are per
    sample (mean over every axis except the first).
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    l_p, d_p, degenerate = disentangle_t(pred, topo)
    l_g, d_g, _ = disentangle_t(gt, topo)
    ll = (l_p - l_g).abs()[..., 0]
    ld = (d_p - d_g).norm(dim=-1)
    if reduce:
        ll, ld = ll.mean(), ld.mean()
    else:
        ll, ld = ll.flatten(1).mean(1), ld.flatten(1).mean(1)
    return ll, ld, ll + ld, int(degenerate.sum())


def pose_loss(pred: torch.Tensor, gt: torch.Tensor, reduce: bool = True):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    err = (pred - gt).norm(dim=-1)
    return err.mean() if reduce else err.flatten(1).mean(1)


def total_loss(pred, gt, topo, use_dis_loss: bool = True):
    """Per-sample composite losses: (L_l, L_d, L_pos, L_total, n_degenerate)."""
    ll, ld, ldis, ndeg = disentanglement_loss(pred, gt, topo, reduce=False)
    lpos = pose_loss(pred, gt, reduce=False)
    ltot = ldis + lpos if use_dis_loss else lpos
    return ll, ld, lpos, ltot, ndeg


@dataclass
class TrainState:
    model: HSTDenoiser
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]


def init_state(cfg: TrainConfig, topo: SkeletonTopology) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = HSTDenoiser(cfg.denoiser_config(topo.num_joints), topo)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    return TrainState(model, opt)


def make_noisy_input(gt: torch.Tensor, t: np.ndarray, rng: np.random.Generator, sched: NoiseSchedule,
                     topo: SkeletonTopology, disentangle_input: bool) -> torch.Tensor:
    """Forward-diffuse a batch of clean poses (B, N, J, 3) at per-sample timesteps ``t``."""
    if disentangle_input:
        l0, d0, _ = disentangle_t(gt, topo)
        eps_l = torch.as_tensor(rng.standard_normal(tuple(l0.shape)), dtype=gt.dtype)
        eps_d = torch.as_tensor(rng.standard_normal(tuple(d0.shape)), dtype=gt.dtype)
        return torch.cat([q_sample(l0, t, eps_l, sched), q_sample(d0, t, eps_d, sched)], dim=-1)
    eps = torch.as_tensor(rng.standard_normal(tuple(gt.shape)), dtype=gt.dtype)
    return q_sample(gt, t, eps, sched)


def compute_losses(model: HSTDenoiser, cond, gt, t, noisy, use_dis_loss: bool):
    root = gt[..., model.topo.root, :]
    pred = model(noisy, cond, torch.as_tensor(t, dtype=torch.long), root=root)
    return total_loss(pred, gt, model.topo, use_dis_loss)


def train_step(batch, state: TrainState, cfg: TrainConfig, sched: NoiseSchedule, topo: SkeletonTopology,
               rng: np.random.Generator) -> tuple[TrainState, LossReport]:
    """One AdamW update on ``batch`` = (cond2d (B, N, J, 2), gt3d (B, N, J, 3))."""
    if isinstance(batch, list):
        cond = torch.stack([torch.as_tensor(c) for c, _ in batch])
        gt = torch.stack([torch.as_tensor(g) for _, g in batch])
    else:
        cond, gt = batch
    dtype = next(state.model.parameters()).dtype
    cond, gt = torch.as_tensor(cond, dtype=dtype), torch.as_tensor(gt, dtype=dtype)
    B = gt.shape[0]
    t = rng.integers(1, cfg.T + 1, size=B)  # inference starts from t = T
    noisy = make_noisy_input(gt, t, rng, sched, topo, cfg.ablation.disentangle_input)

    model = state.model
    model.train()
    ll, ld, lpos, ltot, ndeg = compute_losses(model, cond, gt, t, noisy, cfg.ablation.use_dis_loss)
    bad = ~torch.isfinite(ltot)
    if bad.any():
        i = int(torch.nonzero(bad)[0])
        raise TrainingError(f"non-finite loss at step {state.step}: sample {i}, t={int(t[i])}")
    loss = ltot.mean()
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1

    l_l, l_d, l_pos = float(ll.detach().mean()), float(ld.detach().mean()), float(lpos.detach().mean())
    l_dis = l_l + l_d
    report = LossReport(l_l, l_d, l_dis, l_pos, l_dis + l_pos if cfg.ablation.use_dis_loss else l_pos, ndeg)
    return state, report


def _crop(seq, n: int, rng: np.random.Generator):
    p3, p2 = np.asarray(seq.pose3d), np.asarray(seq.pose2d)
    N = p3.shape[0]
    if N < n:
        raise TrainingError(f"sequence {seq.name} has {N} frames, need {n}")
    s = int(rng.integers(0, N - n + 1)) if N > n else 0
    return p2[s:s + n], p3[s:s + n]


def train(dataset, cfg: TrainConfig, topo: SkeletonTopology, out_dir=None, state: TrainState | None = None,
          callback=None):
    """Epoch loop with per-epoch multiplicative lr decay.

    Writes ``metrics.jsonl`` and ``checkpoint.bin`` under ``out_dir`` when given.
    Returns (state, log records).
    """
    if not dataset:
        raise TrainingError("dataset is empty")
    state = state if state is not None else init_state(cfg, topo)
    sched = cosine_schedule(cfg.T)
    rng = np.random.default_rng(cfg.seed)
    records = []
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        try:
            log_fh = open(out / "metrics.jsonl", "w")
        except OSError as exc:
            raise TrainingError(f"cannot open metrics log in {out}: {exc}") from exc

    try:
        done = False
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            order = rng.permutation(len(dataset))
            for s in range(0, len(order), cfg.batch_size):
                items = [_crop(dataset[i], cfg.num_frames, rng) for i in order[s:s + cfg.batch_size]]
                batch = (np.stack([a for a, _ in items]), np.stack([b for _, b in items]))
                lr = state.lr
                state, rep = train_step(batch, state, cfg, sched, topo, rng)
                if state.step % cfg.log_every == 0:
                    rec = {"step": state.step, "epoch": epoch, "lr": lr, **rep.to_json()}
                    records.append(rec)
                    if log_fh:
                        log_fh.write(json.dumps(rec) + "\n")
                if callback is not None:
                    callback(state, rep)
                if cfg.max_steps is not None and state.step >= cfg.max_steps:
                    done = True
                    break
            for g in state.optimizer.param_groups:
                g["lr"] = cfg.lr * cfg.lr_decay_per_epoch ** (epoch + 1)
            if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_e{epoch + 1:04d}.bin", state.model, {"train": cfg.to_json()})
            if done:
                break
    finally:
        if log_fh:
            log_fh.close()
    if out is not None:
        save_checkpoint(out / "checkpoint.bin", state.model, {"train": cfg.to_json(), "steps": state.step})
    return state, records


def moving_average(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        window = max(1, len(v))
    return np.convolve(v, np.ones(window) / window, mode="valid")


def lr_at_epoch(cfg: TrainConfig, k: int) -> float:
    return cfg.lr * cfg.lr_decay_per_epoch ** k

