"""Cosine noise schedule, forward noising and the multi-hypothesis DDIM sampler."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .skeleton import BoneDecomposition, SkeletonTopology, disentangle

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] == 1

    @property
    def betas(self) -> np.ndarray:
        b = np.zeros(self.T + 1)
        b[1:] = 1.0 - self.alpha_bar[1:] / self.alpha_bar[:-1]
        return b

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas


def cosine_schedule(T: int, s: float = COSINE_OFFSET, max_beta: float = MAX_BETA) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")

    def f(t):
        return np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2

    t = np.arange(T + 1, dtype=np.float64)
    raw = f(t) / f(0.0)
    betas = np.minimum(1.0 - raw[1:] / raw[:-1], max_beta)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    alpha_bar.setflags(write=False)
    return NoiseSchedule(T, alpha_bar)


@dataclass
class NoisyDecomposition:
    lengths_t: np.ndarray  # (..., N, J-1, 1)
    directions_t: np.ndarray  # (..., N, J-1, 3)
    t: int


@dataclass
class NoisyPose:
    """Raw joint coordinates under noise, used when bone disentangling is switched off."""

    joints_t: np.ndarray  # (..., N, J, 3)
    t: int


def _coef(values, x):
    # broadcast per-sample coefficients over the trailing dims of x
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return float(values)
    shape = values.shape + (1,) * (x.ndim - values.ndim)
    if isinstance(x, torch.Tensor):
        return torch.as_tensor(values.reshape(shape), dtype=x.dtype, device=x.device)
    return values.reshape(shape)


def q_sample(x0, t, noise, sched: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise. ``t`` may be an int or a batch of ints."""
    if x0.shape != noise.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != data shape {tuple(x0.shape)}")
    ab = sched.alpha_bar[np.asarray(t)]
    return _coef(np.sqrt(ab), x0) * x0 + _coef(np.sqrt(1.0 - ab), x0) * noise


def forward_diffuse(decomp: BoneDecomposition, t: int, noise, sched: NoiseSchedule) -> NoisyDecomposition:
    eps_l, eps_d = noise
    if not 0 <= t <= sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T}]")
    return NoisyDecomposition(
        q_sample(decomp.lengths, t, eps_l, sched),
        q_sample(decomp.directions, t, eps_d, sched),
        t,
    )


def ddim_sigma(ab_t: float, ab_next: float, sigma_scale: float) -> float:
    return sigma_scale * math.sqrt((1 - ab_next) / (1 - ab_t)) * math.sqrt(max(0.0, 1 - ab_t / ab_next))


def ddim_update(x_t, x0_hat, ab_t: float, ab_next: float, sigma_scale: float, noise=None):
    """One DDIM move of a single array from alpha_bar ``ab_t`` to ``ab_next``."""
    sigma = ddim_sigma(ab_t, ab_next, sigma_scale)
    radicand = 1 - ab_next - sigma**2
    if radicand < -1e-12:
        raise NumericalError(f"sigma^2={sigma**2} exceeds 1 - abar_next={1 - ab_next}")
    eps_hat = (x_t - math.sqrt(ab_t) * x0_hat) / math.sqrt(1 - ab_t)
    out = math.sqrt(ab_next) * x0_hat + math.sqrt(max(radicand, 0.0)) * eps_hat
    if sigma > 0:
        if noise is None:
            raise ValueError("stochastic step needs a noise array")
        out = out + sigma * noise
    return out


def ddim_step(current: NoisyDecomposition, predicted_clean: BoneDecomposition, t_next: int,
              sched: NoiseSchedule, sigma_scale: float, rng: np.random.Generator | None = None):
    if t_next >= current.t:
        raise ValueError(f"t_next={t_next} must be below t={current.t}")
    ab_t, ab_next = sched.alpha_bar[current.t], sched.alpha_bar[t_next]
    noise_l = noise_d = None
    if ddim_sigma(ab_t, ab_next, sigma_scale) > 0:
        rng = rng if rng is not None else np.random.default_rng()
        noise_l = rng.standard_normal(current.lengths_t.shape)
        noise_d = rng.standard_normal(current.directions_t.shape)
    return NoisyDecomposition(
        ddim_update(current.lengths_t, predicted_clean.lengths, ab_t, ab_next, sigma_scale, noise_l),
        ddim_update(current.directions_t, predicted_clean.directions, ab_t, ab_next, sigma_scale, noise_d),
        t_next,
    )


@dataclass
class InferenceConfig:
    H: int = 1
    W: int = 1
    T: int = 1000
    sigma_scale: float = 1.0
    seed: int = 0
    timestep_sequence: list[int] | None = field(default=None)

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ValueError("H and W must be >= 1")
        if not 0.0 <= self.sigma_scale <= 1.0:
            raise ValueError("sigma_scale must be in [0, 1]")
        if self.timestep_sequence is None:
            seq = np.linspace(self.T, 0, self.W + 1).round().astype(int).tolist()
            self.timestep_sequence = seq
        seq = list(self.timestep_sequence)
        if len(seq) != self.W + 1 or seq[0] != self.T or any(a <= b for a, b in zip(seq, seq[1:])):
            raise ValueError(f"timestep_sequence must strictly decrease from T over W+1 entries: {seq}")

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("timestep_sequence")
        return d

    @classmethod
    def from_json(cls, d: dict) -> "InferenceConfig":
        keys = {"H", "W", "T", "sigma_scale", "seed", "timestep_sequence"}
        return cls(**{k: v for k, v in d.items() if k in keys})

    @classmethod
    def load(cls, path) -> "InferenceConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def sample_initial_hypotheses(cfg: InferenceConfig, shape: tuple[int, int],
                              rng: np.random.Generator | None = None) -> NoisyDecomposition:
    N, B = shape
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    lengths = rng.standard_normal((cfg.H, N, B, 1))
    directions = rng.standard_normal((cfg.H, N, B, 3))
    return NoisyDecomposition(lengths, directions, cfg.T)


@dataclass
class HypothesisSet:
    poses: np.ndarray  # (H, N, J, 3)
    decompositions: list[BoneDecomposition]
    provenance: dict

    @property
    def H(self) -> int:
        return self.poses.shape[0]


Denoiser = Callable[[object, np.ndarray, int], np.ndarray]


def _check_prediction(pred, it: int):
    pred = np.asarray(pred, dtype=np.float64)
    bad = ~np.isfinite(pred)
    if bad.any():
        h = int(np.argwhere(bad)[0][0])
        raise NumericalError(f"denoiser produced non-finite output at iteration {it}, hypothesis {h}")
    return pred


def inference_loop(denoiser: Denoiser, cond, cfg: InferenceConfig, topo: SkeletonTopology,
                   sched: NoiseSchedule, disentangled: bool = True, init=None) -> HypothesisSet:
    """Run W DDIM refinement rounds over H hypotheses.

    ``denoiser(noisy, cond, t)`` receives the noisy state for all hypotheses at once
    (leading axis H) and returns predicted poses of shape (H, N, J, 3). With
    ``disentangled=False`` the state is a :class:`NoisyPose` over raw joint coordinates.
    """
    cond = np.asarray(cond)
    N, J = cond.shape[0], cond.shape[1]
    if J != topo.num_joints:
        raise ValueError(f"condition has {J} joints, topology has {topo.num_joints}")
    if cfg.T != sched.T:
        raise ValueError(f"config T={cfg.T} differs from schedule T={sched.T}")
    rng = np.random.default_rng(cfg.seed)
    seq = cfg.timestep_sequence
    if disentangled:
        state = init if init is not None else sample_initial_hypotheses(cfg, (N, J - 1), rng)
    else:
        state = init if init is not None else NoisyPose(rng.standard_normal((cfg.H, N, J, 3)), cfg.T)

    pred = None
    for it in range(cfg.W):
        t, t_next = seq[it], seq[it + 1]
        pred = _check_prediction(denoiser(state, cond, t), it)
        if pred.shape != (cfg.H, N, J, 3):
            raise ValueError(f"denoiser returned {pred.shape}, expected {(cfg.H, N, J, 3)}")
        if disentangled:
            clean = disentangle(pred, topo, allow_zero=True)
            state = ddim_step(state, clean, t_next, sched, cfg.sigma_scale, rng)
        else:
            ab_t, ab_next = sched.alpha_bar[t], sched.alpha_bar[t_next]
            noise = None
            if ddim_sigma(ab_t, ab_next, cfg.sigma_scale) > 0:
                noise = rng.standard_normal(state.joints_t.shape)
            state = NoisyPose(ddim_update(state.joints_t, pred, ab_t, ab_next, cfg.sigma_scale, noise), t_next)

    decomps = [disentangle(p, topo, allow_zero=True) for p in pred]
    prov = {"seed": cfg.seed, "H": cfg.H, "W": cfg.W, "sigma_scale": cfg.sigma_scale,
            "timesteps": list(seq)}
    return HypothesisSet(pred, decomps, prov)
