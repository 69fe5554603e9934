"""Synthetic scenes for smoke training and demos."""

from __future__ import annotations

import numpy as np

from .data import NUM_CLASSES, Scene


def constant_velocity_scenes(
    n_scenes: int = 16,
    seed: int = 0,
    agents: tuple[int, int] = (2, 4),
    speed_px: tuple[float, float] = (0.5, 3.0),
    t_obs: int = 8,
    t_pred: int = 12,
    scale: float = 10.0,
) -> list[Scene]:
    """Straight-line agents with random heading, speed and class.

    Speeds are pixels per step; positions are stored normalized by ``scale``.
    """
    rng = np.random.default_rng(seed)
    total = t_obs + t_pred
    scenes = []
    for s in range(n_scenes):
        n = int(rng.integers(agents[0], agents[1] + 1))
        start = rng.uniform(0.0, 50.0, (n, 2))
        speed = rng.uniform(*speed_px, n)
        heading = rng.uniform(0.0, 2 * np.pi, n)
        v = np.stack([speed * np.cos(heading), speed * np.sin(heading)], axis=-1)
        pos = start[None] + np.arange(total)[:, None, None] * v[None]
        scenes.append(
            Scene(
                positions=pos / scale,
                class_ids=rng.integers(0, NUM_CLASSES, n),
                agent_ids=np.arange(n),
                scale=scale,
                t_obs=t_obs,
                start_frame=s,
            )
        )
    return scenes


def random_walk_scene(n: int = 3, seed: int = 0, t_obs: int = 8, t_pred: int = 12,
                      step: float = 0.3) -> Scene:
    rng = np.random.default_rng(seed)
    pos = np.cumsum(rng.normal(0.0, step, (t_obs + t_pred, n, 2)), axis=0)
    return Scene(pos, rng.integers(0, NUM_CLASSES, n), np.arange(n), t_obs=t_obs)
