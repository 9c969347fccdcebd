"""Landmark shapes, component partitions, patch crops and pair geometry.

Shapes are ``(L, 2)`` float arrays of ``(x, y)`` pixel coordinates, x to the
right and y down. Landmark indices are 0-based in code; the 300-W numbering
quoted in docstrings is 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

DEFAULT_EPS = 1e-3


class PartitionError(ValueError):
    pass


class ShapeInputError(ValueError):
    pass


def as_shape(coords) -> np.ndarray:
    """Validate and return an ``(L, 2)`` float64 array (accepts a flat 2L vector)."""
    arr = np.asarray(coords, dtype=np.float64)
    if arr.ndim == 1:
        if arr.size % 2:
            raise ShapeInputError(f"flat shape vector has odd length {arr.size}")
        arr = arr.reshape(-1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeInputError(f"expected (L, 2) coordinates, got {arr.shape}")
    if arr.shape[0] < 3:
        raise ShapeInputError(f"need at least 3 landmarks, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ShapeInputError("shape has non-finite coordinates")
    return arr


@dataclass(frozen=True)
class ComponentPartition:
    """Disjoint named landmark groups covering 0..L-1, with a nose root.

    ``eyes`` names the two groups whose centroids act as pupils for
    inter-pupil normalisation.
    """

    names: tuple[str, ...]
    groups: tuple[tuple[int, ...], ...]
    root: int
    nose: str = "nose"
    eyes: tuple[str, str] = ("right_eye", "left_eye")

    def __post_init__(self):
        if len(self.names) != len(self.groups):
            raise PartitionError("names and groups differ in length")
        if len(set(self.names)) != len(self.names):
            raise PartitionError("group names must be unique")
        if len(self.groups) < 2:
            raise PartitionError("a partition needs at least 2 groups")
        flat = [i for g in self.groups for i in g]
        if sorted(flat) != list(range(len(flat))):
            raise PartitionError("groups must be disjoint and cover 0..L-1 exactly")
        if self.nose not in self.names or self.root not in self.group(self.nose):
            raise PartitionError(f"root {self.root} is not in the {self.nose!r} group")
        for eye in self.eyes:
            if eye not in self.names:
                raise PartitionError(f"eye group {eye!r} missing")

    @property
    def n_landmarks(self) -> int:
        return sum(len(g) for g in self.groups)

    def group(self, name: str) -> tuple[int, ...]:
        return self.groups[self.names.index(name)]

    def to_dict(self) -> dict:
        return {"names": list(self.names), "groups": [list(g) for g in self.groups],
                "root": self.root, "nose": self.nose, "eyes": list(self.eyes)}

    @classmethod
    def from_dict(cls, d: dict) -> "ComponentPartition":
        return cls(tuple(d["names"]), tuple(tuple(g) for g in d["groups"]), int(d["root"]),
                   d.get("nose", "nose"), tuple(d.get("eyes", ("right_eye", "left_eye"))))


def _span(a: int, b: int) -> tuple[int, ...]:
    # 1-based inclusive -> 0-based
    return tuple(range(a - 1, b))


def partition_300w() -> ComponentPartition:
    """The 68-point iBUG layout, rooted at the nose tip (landmark 31)."""
    return ComponentPartition(
        names=("cheek", "right_brow", "left_brow", "nose", "right_eye", "left_eye", "mouth"),
        groups=(_span(1, 17), _span(18, 22), _span(23, 27), _span(28, 36),
                _span(37, 42), _span(43, 48), _span(49, 68)),
        root=30,
    )


def partition_10() -> ComponentPartition:
    """Reduced 10-point layout used by the desk-scale synthetic corpora."""
    return ComponentPartition(
        names=("right_eye", "left_eye", "nose", "mouth"),
        groups=((0, 1), (2, 3), (4, 5), (6, 7, 8, 9)),
        root=5,
    )


def partition_for(n_landmarks: int) -> ComponentPartition:
    if n_landmarks == 68:
        return partition_300w()
    if n_landmarks == 10:
        return partition_10()
    raise PartitionError(f"no built-in partition for L={n_landmarks} (supported: 10, 68)")


def enumerate_pairs(partition: ComponentPartition) -> list[tuple[int, int, int]]:
    """Unordered within-group pairs as ``(group, m, n)`` with ``m < n``."""
    out = []
    for g, members in enumerate(partition.groups):
        out.extend((g, m, n) for m, n in combinations(sorted(members), 2))
    return out


def pair_arrays(partition: ComponentPartition) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pairs = enumerate_pairs(partition)
    if not pairs:
        empty = np.zeros(0, dtype=np.intp)
        return empty, empty, empty
    g, m, n = (np.array(col, dtype=np.intp) for col in zip(*pairs))
    return g, m, n


def geometry_pair_descriptor(shape, m: int, n: int, root: int, eps: float = DEFAULT_EPS) -> np.ndarray:
    """8-vector [log|dx_mn|, log|dy_mn|, log|dx_m*|, log|dy_m*|, then the same from n's side].

    Every |delta| is clamped below at ``eps`` before the natural log.
    """
    p = as_shape(shape)
    L = p.shape[0]
    for i in (m, n, root):
        if not 0 <= i < L:
            raise ShapeInputError(f"landmark index {i} out of range for L={L}")
    if m == n:
        raise ValueError("geometry_pair_descriptor needs two distinct landmarks")
    deltas = np.concatenate([p[m] - p[n], p[m] - p[root], p[n] - p[m], p[n] - p[root]])
    return np.log(np.maximum(np.abs(deltas), eps))


def _round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5).astype(np.intp)


def extract_patches(frame: np.ndarray, shape, d: int) -> np.ndarray:
    """``(L, d, d)`` crops centred at the rounded landmarks, edge-replicated at borders."""
    if d < 3 or d % 2 == 0:
        raise ValueError(f"patch side must be odd and >= 3, got {d}")
    frame = np.asarray(frame)
    if frame.ndim != 2 or frame.size == 0:
        raise ShapeInputError(f"expected a non-empty 2-D frame, got {frame.shape}")
    p = as_shape(shape)
    H, W = frame.shape
    r = d // 2
    offs = np.arange(-r, r + 1)
    cx = _round_half_up(p[:, 0])
    cy = _round_half_up(p[:, 1])
    rows = np.clip(cy[:, None] + offs[None, :], 0, H - 1)
    cols = np.clip(cx[:, None] + offs[None, :], 0, W - 1)
    return frame[rows[:, :, None], cols[:, None, :]]
