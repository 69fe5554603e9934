"""Trajectory sampling and best-of-K / mean-of-K displacement metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Scene, denormalize
from .graph import build_vlg
from .model import GaussianField, ModelConfig, ModelParams, model_forward


@dataclass
class SampledTrajectories:
    samples: np.ndarray  # [K, T_pred, N, 2] absolute positions
    seed: int

    @property
    def k(self) -> int:
        return self.samples.shape[0]


@dataclass
class MetricReport:
    mADE: float
    mFDE: float
    aADE: float
    aFDE: float
    k: int
    num_scenes: int
    num_agents: int

    def __post_init__(self):
        vals = (self.mADE, self.mFDE, self.aADE, self.aFDE)
        if min(vals) < 0 or not np.all(np.isfinite(vals)):
            raise ValueError(f"metrics must be finite and non-negative: {vals}")
        # Per-agent min <= mean survives averaging; slack covers rounding only.
        tol = 1e-12 * max(1.0, *vals)
        if self.mADE > self.aADE + tol or self.mFDE > self.aFDE + tol:
            raise ValueError(f"min-over-samples exceeds mean-over-samples: {vals}")

    def to_tsv(self) -> str:
        head = "mADE\tmFDE\taADE\taFDE\tK\tscenes\tagents"
        row = f"{self.mADE!r}\t{self.mFDE!r}\t{self.aADE!r}\t{self.aFDE!r}\t{self.k}\t{self.num_scenes}\t{self.num_agents}"
        return head + "\n" + row + "\n"

    def summary(self) -> str:
        return (
            f"mADE {self.mADE:.4f}  mFDE {self.mFDE:.4f}  aADE {self.aADE:.4f}  aFDE {self.aFDE:.4f}"
            f"  (K={self.k}, {self.num_scenes} scenes, {self.num_agents} agents)"
        )


def gaussian_displacements(mu, sigma, rho, z: np.ndarray) -> np.ndarray:
    """mu + L z with L the lower Cholesky factor of the 2x2 covariance. ``z`` is ``[..., 2]``."""
    sx, sy = sigma[..., 0], sigma[..., 1]
    dx = mu[..., 0] + sx * z[..., 0]
    dy = mu[..., 1] + sy * (rho * z[..., 0] + np.sqrt(1.0 - rho * rho) * z[..., 1])
    return np.stack([dx, dy], axis=-1)


def sample_field(
    field: GaussianField | tuple[np.ndarray, np.ndarray, np.ndarray],
    k: int = 20,
    seed: int = 0,
    anchor: np.ndarray | None = None,
    scale: float = 1.0,
) -> SampledTrajectories:
    """Draw ``k`` displacement paths and integrate them from ``anchor`` ([N, 2], normalized).

    Returns absolute positions multiplied by ``scale`` (denormalized).
    """
    mu, sigma, rho = field.arrays() if isinstance(field, GaussianField) else field
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if np.any(np.abs(rho) >= 1.0):
        raise ValueError("correlation must satisfy |rho| < 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((k,) + mu.shape)
    disp = gaussian_displacements(mu[None], sigma[None], rho[None], z)
    if anchor is None:
        anchor = np.zeros(mu.shape[1:])
    paths = anchor[None, None] + np.cumsum(disp, axis=1)
    return SampledTrajectories(denormalize(paths, scale), seed)


def ade_fde(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """Mean Euclidean error over all steps and agents, and over agents at the last step."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    dist = np.linalg.norm(pred - truth, axis=-1)
    return float(dist.mean()), float(dist[-1].mean())


def per_agent_errors(samples: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ADE and FDE per (sample, agent): arrays ``[K, N]``."""
    dist = np.linalg.norm(samples - truth[None], axis=-1)  # [K, T, N]
    return dist.mean(axis=1), dist[:, -1]


def min_and_avg_metrics(
    samples: SampledTrajectories | Sequence[SampledTrajectories],
    truth: np.ndarray | Sequence[np.ndarray],
) -> MetricReport:
    """Per-agent min and mean over samples, then averaged over all agents of all scenes."""
    if isinstance(samples, SampledTrajectories):
        samples, truth = [samples], [truth]
    ade_min, ade_avg, fde_min, fde_avg = [], [], [], []
    k = None
    for s, t in zip(samples, truth):
        ade, fde = per_agent_errors(s.samples, np.asarray(t))
        ade_min.append(ade.min(axis=0))
        ade_avg.append(ade.mean(axis=0))
        fde_min.append(fde.min(axis=0))
        fde_avg.append(fde.mean(axis=0))
        k = s.k if k is None else min(k, s.k)
    cat = np.concatenate
    return MetricReport(
        mADE=float(cat(ade_min).mean()),
        mFDE=float(cat(fde_min).mean()),
        aADE=float(cat(ade_avg).mean()),
        aFDE=float(cat(fde_avg).mean()),
        k=int(k or 0),
        num_scenes=len(samples),
        num_agents=int(sum(len(a) for a in ade_min)),
    )


def linear_baseline(scene: Scene) -> np.ndarray:
    """Constant mean-velocity extrapolation, ``[T_pred, N, 2]`` normalized positions."""
    obs = scene.observed
    if obs.shape[0] < 2:
        raise ValueError("linear baseline needs at least 2 observed frames")
    v = (obs[-1] - obs[0]) / (obs.shape[0] - 1)
    steps = np.arange(1, scene.t_pred + 1)[:, None, None]
    return obs[-1][None] + steps * v[None]


def scene_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def predict_scene(scene: Scene, params: ModelParams, cfg: ModelConfig, k: int, seed) -> SampledTrajectories:
    field = model_forward(build_vlg(scene, cfg.num_classes), params, cfg)
    return sample_field(field, k, seed, anchor=scene.observed[-1], scale=scene.scale)


def evaluate(
    scenes: Sequence[Scene], params: ModelParams, cfg: ModelConfig, k: int = 20, seed: int = 0
) -> tuple[MetricReport, list[SampledTrajectories]]:
    """Sample every scene with a per-scene derived seed and score in pixels."""
    preds = [predict_scene(s, params, cfg, k, scene_seed(seed, i)) for i, s in enumerate(scenes)]
    truths = [denormalize(s.future, s.scale) for s in scenes]
    return min_and_avg_metrics(preds, truths), preds


def evaluate_linear(scenes: Sequence[Scene]) -> MetricReport:
    preds = [SampledTrajectories(denormalize(linear_baseline(s), s.scale)[None], 0) for s in scenes]
    truths = [denormalize(s.future, s.scale) for s in scenes]
    return min_and_avg_metrics(preds, truths)
