"""Spatial relation features: patch appearance + nose-anchored pair geometry.

Feature layout (length ``C*k_G + L*k_A``): one summed geometry block per
group in partition order, then one appearance block per landmark in landmark
order. All functions accept an optional leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import ParamStore, Tensor
from .shape import DEFAULT_EPS, ComponentPartition, extract_patches, pair_arrays

GEOMETRY_DIM = 8


@dataclass
class SpatialWeights:
    W_A: Tensor
    b_A: Tensor
    W_G: Tensor
    b_G: Tensor

    @property
    def k_A(self) -> int:
        return self.W_A.shape[0]

    @property
    def k_G(self) -> int:
        return self.W_G.shape[0]

    @property
    def patch_size(self) -> int:
        return int(round(np.sqrt(self.W_A.shape[1])))

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str = "spatial") -> "SpatialWeights":
        return cls(store[f"{prefix}.W_A"], store[f"{prefix}.b_A"], store[f"{prefix}.W_G"], store[f"{prefix}.b_G"])


def init_spatial_weights(store: ParamStore, d: int, k_A: int = 32, k_G: int = 16,
                         rng: np.random.Generator | None = None, prefix: str = "spatial") -> SpatialWeights:
    rng = rng or np.random.default_rng(0)
    store.add(f"{prefix}.W_A", nn.glorot_uniform(rng, (k_A, d * d), d * d, k_A))
    store.add(f"{prefix}.b_A", np.zeros(k_A))
    store.add(f"{prefix}.W_G", nn.glorot_uniform(rng, (k_G, GEOMETRY_DIM), GEOMETRY_DIM, k_G))
    store.add(f"{prefix}.b_G", np.zeros(k_G))
    return SpatialWeights.from_store(store, prefix)


def feature_length(partition: ComponentPartition, k_A: int, k_G: int) -> int:
    return len(partition.groups) * k_G + partition.n_landmarks * k_A


def appearance_embed(patches, w: SpatialWeights) -> Tensor:
    """ReLU(W_A . flatten(patch) + b_A) for ``(..., d, d)`` patches."""
    patches = np.asarray(patches, dtype=np.float64)
    d = w.patch_size
    if patches.shape[-2:] != (d, d):
        raise nn.ShapeError(f"patch shape {patches.shape[-2:]} != ({d}, {d})")
    flat = patches.reshape(*patches.shape[:-2], d * d)
    return nn.relu(nn.dense(flat, w.W_A, w.b_A))


def geometry_embed(desc, w: SpatialWeights) -> Tensor:
    return nn.relu(nn.dense(desc, w.W_G, w.b_G))


def geometry_descriptors(shape, partition: ComponentPartition, eps: float = DEFAULT_EPS) -> Tensor:
    """``(..., P, 8)`` pair descriptors for every enumerated pair, differentiable in ``shape``."""
    p = nn.as_tensor(shape)
    _, m, n = pair_arrays(partition)
    root = np.full(len(m), partition.root, dtype=np.intp)
    pm = nn.take(p, m, axis=-2)
    pn = nn.take(p, n, axis=-2)
    pr = nn.take(p, root, axis=-2)
    deltas = nn.concat([pm - pn, pm - pr, pn - pm, pn - pr], axis=-1)
    return nn.log_abs_clamped(deltas, eps)


def group_geometry(shape, partition: ComponentPartition, w: SpatialWeights,
                   eps: float = DEFAULT_EPS) -> Tensor:
    """``(..., C, k_G)``: per-group sum of pair embeddings (zero block for pairless groups)."""
    p = nn.as_tensor(shape)
    C = len(partition.groups)
    g, _, _ = pair_arrays(partition)
    if len(g) == 0:
        return Tensor(np.zeros(p.shape[:-2] + (C, w.k_G)))
    emb = geometry_embed(geometry_descriptors(p, partition, eps), w)
    return nn.segment_sum(emb, g, C, axis=-2)


def spatial_feature(frame, init_shape, partition: ComponentPartition, w: SpatialWeights,
                    d: int | None = None, eps: float = DEFAULT_EPS) -> Tensor:
    """f_SR for ``frame`` (H, W) or a batch (B, H, W) cropped at ``init_shape``.

    Patch crops use the value of ``init_shape`` only (rounding is piecewise
    constant); the geometry blocks are differentiable in it.
    """
    d = w.patch_size if d is None else d
    frame = np.asarray(frame, dtype=np.float64)
    p = nn.as_tensor(init_shape)
    if p.value.ndim == 2:
        patches = extract_patches(frame, p.value, d)
    else:
        if frame.ndim != 3 or frame.shape[0] != p.shape[0]:
            raise nn.ShapeError(f"batched frames {frame.shape} do not match shapes {p.shape}")
        patches = np.stack([extract_patches(f, s, d) for f, s in zip(frame, p.value)])
    lead = p.shape[:-2]
    geo = nn.reshape(group_geometry(p, partition, w, eps), lead + (len(partition.groups) * w.k_G,))
    app = nn.reshape(appearance_embed(patches, w), lead + (partition.n_landmarks * w.k_A,))
    return nn.concat([geo, app], axis=-1)
