"""Spatial and temporal velocity-label graphs built from a scene."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import NUM_CLASSES, Scene


class InsufficientFramesError(ValueError):
    pass


class LabelError(ValueError):
    pass


@dataclass
class VlgBatch:
    """Node features and initial adjacency of one scene.

    ``temporal_adj_init`` is indexed ``[key_step, query_step]``: entry
    ``[s, t]`` is 1 iff ``s <= t``, i.e. step ``t`` may draw on steps up to
    and including itself. The model transposes it to query-major rows.
    """

    velocity: np.ndarray  # [T_obs, N, 2]
    labels_onehot: np.ndarray  # [T_obs, N, L]
    spatial_adj_init: np.ndarray  # [N, N]
    temporal_adj_init: np.ndarray  # [T_obs, T_obs]

    @property
    def t_obs(self) -> int:
        return self.velocity.shape[0]

    @property
    def num_agents(self) -> int:
        return self.velocity.shape[1]

    @property
    def temporal_query_mask(self) -> np.ndarray:
        """Row = query step, column = key step; lower-triangular."""
        return self.temporal_adj_init.T


def compute_velocities(positions: np.ndarray) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[0] < 2:
        raise InsufficientFramesError(f"need at least 2 frames, got {positions.shape[0]}")
    vel = np.zeros_like(positions)
    vel[1:] = positions[1:] - positions[:-1]
    return vel


def one_hot(class_id: int, num_classes: int = NUM_CLASSES) -> np.ndarray:
    if not 0 <= int(class_id) < num_classes:
        raise LabelError(f"class id {class_id} outside [0, {num_classes})")
    out = np.zeros(num_classes)
    out[int(class_id)] = 1.0
    return out


def causal_adjacency(t: int) -> np.ndarray:
    return np.triu(np.ones((t, t)))


def build_vlg(scene: Scene, num_classes: int = NUM_CLASSES) -> VlgBatch:
    obs = scene.observed
    labels = np.stack([one_hot(c, num_classes) for c in scene.class_ids]) if scene.num_agents else (
        np.zeros((0, num_classes))
    )
    t_obs, n = obs.shape[:2]
    return VlgBatch(
        velocity=compute_velocities(obs),
        labels_onehot=np.broadcast_to(labels, (t_obs, n, num_classes)).copy(),
        spatial_adj_init=np.ones((n, n)),
        temporal_adj_init=causal_adjacency(t_obs),
    )
