"""Sparse graph network over velocity-label graphs.

Forward order: separate velocity/label embedding, scaled dot-product
attention per stream, asymmetric-convolution enhancement, adaptive
interaction mask, sparsified row-stochastic adjacency, two GCN branches in
opposite stream order, and a temporal-convolution decoder producing a
bivariate Gaussian over per-step displacements.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np

from . import tensor as tc
from .data import NUM_CLASSES
from .graph import VlgBatch
from .tensor import Tensor

ModelParams = Dict[str, Tensor]

RHO_LIMIT = 1.0 - 1e-6
EMBEDDINGS = ("separate", "joint", "velocity")
MASKS = ("adaptive", "fixed")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    num_classes: int = NUM_CLASSES
    t_obs: int = 8
    t_pred: int = 12
    tcn_depth: int = 4
    # "joint" = one matrix over [velocity, label]; "velocity" drops labels.
    embedding: str = "separate"
    mask: str = "adaptive"
    fixed_threshold: float = 0.5
    prelu_init: float = 0.25

    def __post_init__(self):
        if self.embedding not in EMBEDDINGS:
            raise ValueError(f"embedding must be one of {EMBEDDINGS}, got {self.embedding!r}")
        if self.mask not in MASKS:
            raise ValueError(f"mask must be one of {MASKS}, got {self.mask!r}")
        if min(self.d, self.t_obs, self.t_pred, self.tcn_depth) < 1:
            raise ValueError("d, t_obs, t_pred, tcn_depth must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GaussianField:
    """Per future step and agent: displacement mean, scales and correlation."""

    mu: Tensor  # [T_pred, N, 2]
    sigma: Tensor  # [T_pred, N, 2]
    rho: Tensor  # [T_pred, N]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.mu.data, self.sigma.data, self.rho.data


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, L, to, tp = cfg.d, cfg.num_classes, cfg.t_obs, cfg.t_pred
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.embedding == "joint":
        shapes["emb.joint"] = (2 + L, d)
    else:
        shapes["emb.vel"] = (2, d)
        if cfg.embedding == "separate":
            shapes["emb.lab"] = (L, d)
    for stream in ("spatial", "temporal"):
        shapes[f"attn.{stream}.q"] = (d, d)
        shapes[f"attn.{stream}.k"] = (d, d)
    # Spatial maps carry time as channels; temporal maps are single-channel
    # per agent so kernel shapes do not depend on N.
    for stream, c in (("spatial", to), ("temporal", 1)):
        shapes[f"enh.{stream}.k11"] = (c, c, 1, 1)
        shapes[f"enh.{stream}.k13"] = (c, c, 1, 3)
        shapes[f"enh.{stream}.k31"] = (c, c, 3, 1)
        shapes[f"enh.{stream}.alpha"] = ()
    for branch in ("b1", "b2"):
        for stream in ("spatial", "temporal"):
            shapes[f"gcn.{branch}.{stream}.w"] = (d, d)
            shapes[f"gcn.{branch}.{stream}.alpha"] = ()
    shapes["head.w"] = (d, 5)
    shapes["head.b"] = (5,)
    for i in range(cfg.tcn_depth):
        shapes[f"tcn.{i}.k"] = (tp, to if i == 0 else tp, 3, 1)
        shapes[f"tcn.{i}.b"] = (tp,)
        if i < cfg.tcn_depth - 1:
            shapes[f"tcn.{i}.alpha"] = ()
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Scaled-normal weights (variance 1/fan_in), zero biases, PReLU slopes at ``prelu_init``."""
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".alpha"):
            value = np.full(shape, cfg.prelu_init)
        elif name.endswith(".b"):
            value = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            value = rng.standard_normal(shape) / math.sqrt(fan_in)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


# ------------------------------------------------------------------ stages


def vlg_embed(batch: VlgBatch, params: ModelParams, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Return the spatial ``[T, N, D]`` and temporal ``[N, T, D]`` embeddings."""
    vel = Tensor(batch.velocity)
    if cfg.embedding == "joint":
        feats = Tensor(np.concatenate([batch.velocity, batch.labels_onehot], axis=-1))
        e = tc.matmul(feats, params["emb.joint"])
    else:
        e = tc.matmul(vel, params["emb.vel"])
        if cfg.embedding == "separate":
            e = tc.add(e, tc.matmul(Tensor(batch.labels_onehot), params["emb.lab"]))
    return e, tc.transpose(e, (1, 0, 2))


def self_attention(e: Tensor, w_q: Tensor, w_k: Tensor, struct_mask: np.ndarray) -> Tensor:
    """Masked scaled dot-product scores, one ``n x n`` map per leading index."""
    q = tc.matmul(e, w_q)
    k = tc.matmul(e, w_k)
    scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(e.shape[-1]))
    return tc.softmax_masked(scores, struct_mask)


def feature_enhance(a: Tensor, params: ModelParams, stream: str) -> Tensor:
    """prelu(conv1x1 + conv1x3 + conv3x1) over an attention stack.

    The spatial stack ``[T, N, N]`` is one image with T channels; the temporal
    stack ``[N, T, T]`` is N single-channel images sharing the kernels.
    """
    p = f"enh.{stream}."
    x = a if stream == "spatial" else tc.reshape(a, (a.shape[0], 1) + a.shape[1:])
    f = tc.conv2d_same(x, params[p + "k11"])
    f = tc.add(f, tc.conv2d_same(x, params[p + "k13"]))
    f = tc.add(f, tc.conv2d_same(x, params[p + "k31"]))
    f = tc.prelu(f, params[p + "alpha"])
    return f if stream == "spatial" else tc.reshape(f, a.shape)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def adaptive_interaction_mask(f: np.ndarray, self_loops: bool = True) -> np.ndarray:
    """Keep entries whose sigmoid strictly exceeds the row mean of sigmoids."""
    s = _sigmoid(np.asarray(f, dtype=np.float64))
    # Clamp to the row range: a rounded mean of equal values can sit one ulp low.
    thr = np.clip(s.mean(axis=-1, keepdims=True), s.min(axis=-1, keepdims=True), s.max(axis=-1, keepdims=True))
    m = (s > thr).astype(np.float64)
    return _with_diagonal(m) if self_loops else m


def fixed_interaction_mask(f: np.ndarray, threshold: float = 0.5, self_loops: bool = True) -> np.ndarray:
    m = (_sigmoid(np.asarray(f, dtype=np.float64)) > threshold).astype(np.float64)
    return _with_diagonal(m) if self_loops else m


def _with_diagonal(m: np.ndarray) -> np.ndarray:
    n = m.shape[-1]
    idx = np.arange(n)
    m[..., idx, idx] = 1.0
    return m


def sparsify_adjacency(a: Tensor, mask: np.ndarray, struct_mask: np.ndarray) -> Tensor:
    """rownormalize(A * M * struct + I)."""
    keep = np.broadcast_to(mask * struct_mask, a.shape)
    eye = np.broadcast_to(np.eye(a.shape[-1]), a.shape)
    return tc.row_normalize(tc.constant_add(tc.constant_mul(a, keep), eye))


def _hop(adj: Tensor, x: Tensor, w: Tensor, alpha: Tensor) -> Tensor:
    return tc.prelu(tc.matmul(tc.matmul(adj, x), w), alpha)


def gcn_fuse(
    e_s: Tensor, adj_s: Tensor, e_t: Tensor, adj_t: Tensor, params: ModelParams
) -> Tensor:
    """Sum of a spatial-then-temporal branch and a temporal-then-spatial branch, ``[T, N, D]``."""
    g = params
    s1 = _hop(adj_s, e_s, g["gcn.b1.spatial.w"], g["gcn.b1.spatial.alpha"])
    t1 = _hop(adj_t, tc.transpose(s1, (1, 0, 2)), g["gcn.b1.temporal.w"], g["gcn.b1.temporal.alpha"])
    t2 = _hop(adj_t, e_t, g["gcn.b2.temporal.w"], g["gcn.b2.temporal.alpha"])
    s2 = _hop(adj_s, tc.transpose(t2, (1, 0, 2)), g["gcn.b2.spatial.w"], g["gcn.b2.spatial.alpha"])
    return tc.add(tc.transpose(t1, (1, 0, 2)), s2)


def tcn_decode(h: Tensor, params: ModelParams, cfg: ModelConfig) -> GaussianField:
    """Map ``[T_obs, N, D]`` features to a Gaussian field over ``T_pred`` steps.

    The cascade treats time as channels over a (D x N) map with kernel 3 x 1,
    so agents never mix and the decoder stays permutation equivariant. A
    per-node linear head then emits the five distribution parameters.
    """
    y = tc.transpose(h, (0, 2, 1))  # [T_obs, D, N]
    depth = cfg.tcn_depth
    for i in range(depth):
        z = tc.bias_add(tc.conv2d_same(y, params[f"tcn.{i}.k"]), params[f"tcn.{i}.b"], axis=0)
        if i < depth - 1:
            z = tc.prelu(z, params[f"tcn.{i}.alpha"])
        y = z if i == 0 else tc.add(y, z)
    feats = tc.transpose(y, (0, 2, 1))  # [T_pred, N, D]
    raw = tc.bias_add(tc.matmul(feats, params["head.w"]), params["head.b"], axis=-1)
    return gaussian_links(raw)


def gaussian_links(out: Tensor) -> GaussianField:
    """Split raw ``[..., 5]`` outputs into (mu, sigma = exp, rho = clamped tanh)."""
    mu = tc.index(out, (..., slice(0, 2)))
    sigma = tc.exp(tc.index(out, (..., slice(2, 4))))
    rho = tc.clamp(tc.tanh(tc.index(out, (..., 4))), -RHO_LIMIT, RHO_LIMIT)
    return GaussianField(mu, sigma, rho)


def interaction_mask(f: Tensor, cfg: ModelConfig) -> np.ndarray:
    if cfg.mask == "fixed":
        return fixed_interaction_mask(f.data, cfg.fixed_threshold)
    return adaptive_interaction_mask(f.data)


def model_forward(
    batch: VlgBatch, params: ModelParams, cfg: ModelConfig, trace: dict | None = None
) -> GaussianField:
    """Full network on one scene; ``trace`` (if given) receives intermediates."""
    e_s, e_t = vlg_embed(batch, params, cfg)
    struct_s = batch.spatial_adj_init
    struct_t = batch.temporal_query_mask
    a_s = self_attention(e_s, params["attn.spatial.q"], params["attn.spatial.k"], struct_s)
    a_t = self_attention(e_t, params["attn.temporal.q"], params["attn.temporal.k"], struct_t)
    f_s = feature_enhance(a_s, params, "spatial")
    f_t = feature_enhance(a_t, params, "temporal")
    m_s = interaction_mask(f_s, cfg)
    m_t = interaction_mask(f_t, cfg)
    adj_s = sparsify_adjacency(a_s, m_s, struct_s)
    adj_t = sparsify_adjacency(a_t, m_t, struct_t)
    h = gcn_fuse(e_s, adj_s, e_t, adj_t, params)
    field = tcn_decode(h, params, cfg)
    if trace is not None:
        trace.update(
            e_s=e_s, e_t=e_t, a_s=a_s, a_t=a_t, f_s=f_s, f_t=f_t, m_s=m_s, m_t=m_t,
            adj_s=adj_s, adj_t=adj_t, h=h,
        )
    return field
