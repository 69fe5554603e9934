"""SDD annotation ingestion, canonical TSV tables and fixed-length scene windows."""

from __future__ import annotations

import io
import shlex
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SDD_LABELS = {"Pedestrian": 0, "Biker": 1, "Cart": 2, "Car": 3, "Skater": 4, "Bus": 5}
CLASS_NAMES = ("pedestrian", "cyclist", "cart", "car", "skater", "bus")
NUM_CLASSES = len(CLASS_NAMES)


class DataError(ValueError):
    """Malformed input data; message carries the source line when known."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class CanonicalRow:
    frame: int
    agent_id: int
    x: float
    y: float
    class_id: int


@dataclass
class Scene:
    """A window of ``t_obs + t_pred`` frames; ``positions`` are normalized."""

    positions: np.ndarray  # [T_total, N, 2]
    class_ids: np.ndarray  # [N]
    agent_ids: np.ndarray  # [N]
    scale: float = 10.0
    t_obs: int = 8
    start_frame: int = 0

    @property
    def num_agents(self) -> int:
        return self.positions.shape[1]

    @property
    def t_pred(self) -> int:
        return self.positions.shape[0] - self.t_obs

    @property
    def observed(self) -> np.ndarray:
        return self.positions[: self.t_obs]

    @property
    def future(self) -> np.ndarray:
        return self.positions[self.t_obs :]


def convert_sdd(annotation_text: str, frame_stride: int = 12) -> list[CanonicalRow]:
    """Parse SDD ``annotations.txt`` content into canonical rows.

    Keeps frames on the stride grid with ``lost == 0`` and uses the bounding
    box center as the agent position. Rows come back sorted by (frame, agent).
    """
    if frame_stride < 1:
        raise ConfigError(f"frame_stride must be >= 1, got {frame_stride}")
    rows = []
    for lineno, line in enumerate(annotation_text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            parts = shlex.split(line)
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
        if len(parts) != 10:
            raise DataError(f"line {lineno}: expected 10 fields, got {len(parts)}")
        try:
            track, xmin, ymin, xmax, ymax, frame, lost = (int(p) for p in parts[:7])
            int(parts[7]), int(parts[8])
        except ValueError:
            raise DataError(f"line {lineno}: non-integer field") from None
        label = parts[9]
        if label not in SDD_LABELS:
            raise DataError(f"line {lineno}: unknown label {label!r}")
        if lost != 0 or frame % frame_stride != 0:
            continue
        rows.append(
            CanonicalRow(frame, track, (xmin + xmax) / 2.0, (ymin + ymax) / 2.0, SDD_LABELS[label])
        )
    rows.sort()
    _check_rows(rows)
    return rows


def _check_rows(rows: Sequence[CanonicalRow]) -> None:
    seen = set()
    classes: dict[int, int] = {}
    for r in rows:
        key = (r.frame, r.agent_id)
        if key in seen:
            raise DataError(f"duplicate row for frame {r.frame}, agent {r.agent_id}")
        seen.add(key)
        if classes.setdefault(r.agent_id, r.class_id) != r.class_id:
            raise DataError(
                f"agent {r.agent_id} changes class {classes[r.agent_id]} -> {r.class_id}"
            )


def write_canonical(rows: Iterable[CanonicalRow], path: str | Path | io.TextIOBase) -> None:
    """Write rows as tab-separated ``frame agent_id x y class_id``."""
    lines = ["# frame\tagent_id\tx\ty\tclass_id"]
    for r in rows:
        lines.append(f"{r.frame}\t{r.agent_id}\t{r.x!r}\t{r.y!r}\t{r.class_id}")
    text = "\n".join(lines) + "\n"
    if isinstance(path, io.TextIOBase):
        path.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8", newline="\n")


def parse_canonical(text: str) -> list[CanonicalRow]:
    rows = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"line {lineno}: expected 5 tab-separated fields, got {len(parts)}")
        try:
            row = CanonicalRow(
                int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3]), int(parts[4])
            )
        except ValueError:
            raise DataError(f"line {lineno}: malformed field") from None
        if not 0 <= row.class_id < NUM_CLASSES:
            raise DataError(f"line {lineno}: class_id {row.class_id} out of range")
        rows.append(row)
    rows.sort()
    _check_rows(rows)
    return rows


def read_canonical(path: str | Path) -> list[CanonicalRow]:
    try:
        return parse_canonical(Path(path).read_text(encoding="utf-8"))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def make_windows(
    rows: Sequence[CanonicalRow],
    t_obs: int = 8,
    t_pred: int = 12,
    stride: int = 1,
    scale: float = 10.0,
) -> list[Scene]:
    """Cut every ``t_obs + t_pred`` window of consecutive sampled frames.

    The frame grid runs from the first to the last frame in ``rows`` at the
    gcd of their spacings, so a frame nobody appears in still counts. Only
    agents present in every frame of a window are kept; empty windows are
    dropped.
    """
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    if stride < 1 or t_obs < 2 or t_pred < 1:
        raise ConfigError("need stride >= 1, t_obs >= 2, t_pred >= 1")
    total = t_obs + t_pred
    present_frames = sorted({r.frame for r in rows})
    if not present_frames:
        return []
    step = int(np.gcd.reduce(np.diff(present_frames))) if len(present_frames) > 1 else 1
    frames = list(range(present_frames[0], present_frames[-1] + 1, step))
    by_frame: dict[int, dict[int, CanonicalRow]] = defaultdict(dict)
    for r in rows:
        by_frame[r.frame][r.agent_id] = r
    scenes = []
    for start in range(0, len(frames) - total + 1, stride):
        window = frames[start : start + total]
        present = set(by_frame[window[0]])
        for f in window[1:]:
            present &= set(by_frame[f])
        if not present:
            continue
        ids = sorted(present)
        pos = np.array([[(by_frame[f][a].x, by_frame[f][a].y) for a in ids] for f in window])
        scenes.append(
            Scene(
                positions=normalize(pos, scale),
                class_ids=np.array([by_frame[window[0]][a].class_id for a in ids], dtype=int),
                agent_ids=np.array(ids, dtype=int),
                scale=float(scale),
                t_obs=t_obs,
                start_frame=window[0],
            )
        )
    return scenes


def load_scenes(
    paths: Sequence[str | Path], t_obs: int = 8, t_pred: int = 12, stride: int = 1,
    scale: float = 10.0,
) -> list[Scene]:
    """Windows from one or more canonical TSV files or directories of ``*.tsv``."""
    files: list[Path] = []
    for p in map(Path, paths):
        files.extend(sorted(p.glob("*.tsv")) if p.is_dir() else [p])
    scenes = []
    for f in files:
        scenes.extend(make_windows(read_canonical(f), t_obs, t_pred, stride, scale))
    return scenes


def normalize(positions: np.ndarray, scale: float) -> np.ndarray:
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    return np.asarray(positions, dtype=np.float64) / scale


def denormalize(positions: np.ndarray, scale: float) -> np.ndarray:
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    return np.asarray(positions, dtype=np.float64) * scale


def rows_from_tracks(tracks: np.ndarray, class_ids: Sequence[int], frame_step: int = 12,
                     scale: float = 1.0) -> list[CanonicalRow]:
    """Canonical rows for dense tracks ``[T, N, 2]`` (test and demo helper)."""
    rows = []
    for t in range(tracks.shape[0]):
        for i in range(tracks.shape[1]):
            x, y = tracks[t, i] * scale
            rows.append(CanonicalRow(t * frame_step, i, float(x), float(y), int(class_ids[i])))
    return rows
