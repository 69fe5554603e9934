"""Bivariate Gaussian NLL, Adam, the accumulation training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tc
from .data import ConfigError, Scene
from .graph import VlgBatch, build_vlg
from .model import GaussianField, ModelConfig, ModelParams, init_params, model_forward
from .tensor import NumericError, Tensor

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MAGIC = b"MSGCN1"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 256
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    checkpoint_every: int | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


# ------------------------------------------------------------------- loss


def _nll_elements(mu, sigma, rho, target):
    d = target - mu
    nx, ny = d[..., 0] / sigma[..., 0], d[..., 1] / sigma[..., 1]
    om = 1.0 - rho * rho
    z = nx * nx + ny * ny - 2.0 * rho * nx * ny
    return LOG_2PI + np.log(sigma[..., 0]) + np.log(sigma[..., 1]) + 0.5 * np.log(om) + z / (2 * om)


def bivariate_nll(field: GaussianField, target: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``target`` displacements ``[T_pred, N, 2]``."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != field.mu.shape:
        raise tc.ShapeError(f"bivariate_nll: target dims {list(target.shape)} vs {field.mu.dims}")
    with np.errstate(all="ignore"):
        check = _nll_elements(*field.arrays(), target)
    bad = np.argwhere(~np.isfinite(check))
    if len(bad):
        t, i = (int(v) for v in bad[0])
        raise NumericError(f"bivariate_nll: non-finite loss at step {t}, agent {i}")

    d = tc.sub(Tensor(target), field.mu)
    n = tc.div(d, field.sigma)
    nx, ny = tc.index(n, (..., 0)), tc.index(n, (..., 1))
    rho = field.rho
    z = tc.sub(tc.add(tc.square(nx), tc.square(ny)), tc.scale(tc.mul(rho, tc.mul(nx, ny)), 2.0))
    om = tc.sub(Tensor(np.ones(rho.shape)), tc.square(rho))
    log_sigma = tc.log(field.sigma)
    per = tc.add(
        tc.add(tc.index(log_sigma, (..., 0)), tc.index(log_sigma, (..., 1))),
        tc.add(tc.scale(tc.log(om), 0.5), tc.div(z, tc.scale(om, 2.0))),
    )
    return tc.add(tc.mean(per), Tensor(LOG_2PI))


def target_displacements(scene: Scene) -> np.ndarray:
    return np.diff(scene.positions[scene.t_obs - 1 :], axis=0)


# ------------------------------------------------------------------- Adam


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: dict[str, dict[str, np.ndarray]],
    config: TrainConfig,
    t: int,
) -> None:
    """One bias-corrected Adam update in place. ``moments`` holds ``"m"`` and ``"v"`` maps."""
    if t < 1:
        raise ValueError(f"adam step index must be >= 1, got {t}")
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    m, v = moments.setdefault("m", {}), moments.setdefault("v", {})
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise tc.ShapeError(f"adam_step: grad dims {list(g.shape)} vs {list(p.shape)} for {name}")
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        m[name] = b1 * m[name] + (1.0 - b1) * g
        v[name] = b2 * v[name] + (1.0 - b2) * (g * g)
        p -= config.lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + config.eps)


# -------------------------------------------------------------- gradients


def scene_loss_and_grads(
    batch: VlgBatch, target: np.ndarray, params: ModelParams, cfg: ModelConfig
) -> tuple[float, dict[str, np.ndarray]]:
    with tc.recording() as tape:
        loss = bivariate_nll(model_forward(batch, params, cfg), target)
    grads = tc.backward(loss, tape)
    for p in params.values():
        p.grad = None
    full = {name: grads.get(name, np.zeros_like(p.data)) for name, p in params.items()}
    return float(loss.data), full


def accumulate_gradients(
    items: Sequence[tuple[VlgBatch, np.ndarray]], params: ModelParams, cfg: ModelConfig
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean scene loss and mean gradient, reduced in the given scene order."""
    total = 0.0
    acc = {name: np.zeros_like(p.data) for name, p in params.items()}
    for batch, target in items:
        loss, grads = scene_loss_and_grads(batch, target, params, cfg)
        total += loss
        for name in acc:
            acc[name] += grads[name]
    k = len(items)
    return total / k, {name: g / k for name, g in acc.items()}


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm


# ------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    moments: dict[str, dict[str, np.ndarray]]
    epoch: int = 0
    step: int = 0
    step_in_epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def config_text(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "model": self.model_config.to_dict(),
                "train": asdict(self.train_config),
                "epoch": self.epoch,
                "step": self.step,
                "step_in_epoch": self.step_in_epoch,
                "rng_state": self.rng_state,
                "data": self.data,
            },
            sort_keys=True,
        )

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        text = self.config_text().encode("utf-8")
        out += struct.pack("<I", len(text)) + text
        tensors = [(f"param/{k}", v) for k, v in self.params.items()]
        for kind in ("m", "v"):
            tensors += [(f"adam.{kind}/{k}", v) for k, v in self.moments.get(kind, {}).items()]
        for name, arr in tensors:
            raw = name.encode("utf-8")
            out += struct.pack("<I", len(raw)) + raw
            out += struct.pack("<I", arr.ndim)
            out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
            out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
        return bytes(out)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if not blob.startswith(MAGIC):
            raise ValueError("not a checkpoint: bad magic bytes")
        pos = len(MAGIC)

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(blob):
                raise ValueError("truncated checkpoint")
            chunk = blob[pos : pos + n]
            pos += n
            return chunk

        (tlen,) = struct.unpack("<I", take(4))
        meta = json.loads(take(tlen).decode("utf-8"))
        if meta.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params: dict[str, np.ndarray] = {}
        moments: dict[str, dict[str, np.ndarray]] = {"m": {}, "v": {}}
        while pos < len(blob):
            (nlen,) = struct.unpack("<I", take(4))
            name = take(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}Q", take(8 * rank))
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
            kind, _, key = name.partition("/")
            if kind == "param":
                params[key] = arr
            elif kind in ("adam.m", "adam.v"):
                moments[kind[-1]][key] = arr
            else:
                raise ValueError(f"unknown tensor group {kind!r}")
        train_keys = {f.name for f in fields(TrainConfig)}
        return cls(
            model_config=ModelConfig(**meta["model"]),
            train_config=TrainConfig(**{k: v for k, v in meta["train"].items() if k in train_keys}),
            params=params,
            moments=moments,
            epoch=meta["epoch"],
            step=meta["step"],
            step_in_epoch=meta["step_in_epoch"],
            rng_state=meta["rng_state"],
            data=meta.get("data", {}),
            version=meta["version"],
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def model_params(self) -> ModelParams:
        return {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}


# ------------------------------------------------------------------ loop


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_good: Checkpoint):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[tuple[int, int, float]]


class Trainer:
    """Stateful loop so a run can stop at any step and resume bit-identically."""

    def __init__(
        self,
        scenes: Sequence[Scene],
        config: TrainConfig,
        model_config: ModelConfig | None = None,
        checkpoint: Checkpoint | None = None,
        data_config: dict | None = None,
    ):
        if not scenes:
            raise ConfigError("training needs at least one scene")
        self.data_config = dict(data_config or (checkpoint.data if checkpoint else {}))
        self.items = [(build_vlg(s, (model_config or ModelConfig()).num_classes),
                       target_displacements(s)) for s in scenes]
        if checkpoint is None:
            self.model_config = model_config or ModelConfig()
            self.config = config
            self.params = {k: t.data for k, t in init_params(self.model_config, config.seed).items()}
            self.moments: dict[str, dict[str, np.ndarray]] = {"m": {}, "v": {}}
            self.epoch = self.step = self.step_in_epoch = 0
            self.rng = np.random.default_rng(config.seed)
            self.epoch_rng_state = self.rng.bit_generator.state
        else:
            self.model_config = checkpoint.model_config
            self.config = config
            self.params = {k: v.copy() for k, v in checkpoint.params.items()}
            self.moments = {k: {n: a.copy() for n, a in d.items()} for k, d in checkpoint.moments.items()}
            self.epoch, self.step = checkpoint.epoch, checkpoint.step
            self.step_in_epoch = checkpoint.step_in_epoch
            self.rng = np.random.default_rng()
            self.epoch_rng_state = checkpoint.rng_state
            self.rng.bit_generator.state = self.epoch_rng_state
        self._order = self.rng.permutation(len(self.items))

    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self.items) // self.config.batch_size)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model_config=self.model_config,
            train_config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            moments={k: {n: a.copy() for n, a in d.items()} for k, d in self.moments.items()},
            epoch=self.epoch,
            step=self.step,
            step_in_epoch=self.step_in_epoch,
            rng_state=self.epoch_rng_state,
            data=self.data_config,
        )

    def _tensors(self) -> ModelParams:
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}

    def train_step(self) -> float:
        bs = self.config.batch_size
        idx = self._order[self.step_in_epoch * bs : (self.step_in_epoch + 1) * bs]
        loss, grads = accumulate_gradients([self.items[i] for i in idx], self._tensors(), self.model_config)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at step {self.step}")
        if self.config.clip_norm is not None:
            _clip(grads, self.config.clip_norm)
        self.step += 1
        adam_step(self.params, grads, self.moments, self.config, self.step)
        self.step_in_epoch += 1
        if self.step_in_epoch == self.batches_per_epoch:
            self.epoch += 1
            self.step_in_epoch = 0
            self.epoch_rng_state = self.rng.bit_generator.state
            self._order = self.rng.permutation(len(self.items))
        return loss

    def done(self) -> bool:
        cfg = self.config
        return self.epoch >= cfg.epochs or (cfg.max_steps is not None and self.step >= cfg.max_steps)

    def run(
        self,
        trace_path: str | Path | None = None,
        checkpoint_path: str | Path | None = None,
    ) -> TrainResult:
        trace: list[tuple[int, int, float]] = []
        last_good = self.checkpoint()
        handle = open(trace_path, "a", encoding="utf-8", newline="\n") if trace_path else None
        try:
            while not self.done():
                epoch = self.epoch
                try:
                    loss = self.train_step()
                except NumericError as exc:
                    if checkpoint_path is not None:
                        last_good.save(checkpoint_path)
                    raise TrainingAborted(f"training aborted at step {self.step}: {exc}", last_good) from exc
                trace.append((epoch, self.step, loss))
                if handle:
                    handle.write(f"{epoch}\t{self.step}\t{loss!r}\n")
                every = self.config.checkpoint_every
                if every and self.step % every == 0:
                    last_good = self.checkpoint()
                    if checkpoint_path is not None:
                        last_good.save(checkpoint_path)
                if self.step % 50 == 0:
                    logger.info("epoch %d step %d loss %.6f", epoch, self.step, loss)
        finally:
            if handle:
                handle.close()
        final = self.checkpoint()
        if checkpoint_path is not None:
            final.save(checkpoint_path)
        return TrainResult(final, trace)


def train(
    dataset: Sequence[Scene],
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    trace_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    data_config: dict | None = None,
) -> TrainResult:
    return Trainer(dataset, config, model_config, data_config=data_config).run(
        trace_path, checkpoint_path
    )
