"""Bidirectional landmark tracker with one shared parameter set."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from math import gcd
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import nn
from .nn import LayerSpec, Network, ParamStore, Tensor
from .shape import DEFAULT_EPS, ComponentPartition
from .spatial import feature_length, init_spatial_weights, spatial_feature

Direction = Literal["forward", "backward"]


@dataclass(frozen=True)
class TrackerConfig:
    patch_size: int = 9
    k_A: int = 32
    k_G: int = 16
    hidden: int = 128
    head: Literal["dense", "conv"] = "dense"
    conv_channels: int = 8
    mode: Literal["offset", "absolute"] = "offset"
    eps: float = DEFAULT_EPS
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd and >= 3, got {self.patch_size}")
        if min(self.k_A, self.k_G, self.hidden, self.conv_channels) <= 0:
            raise ValueError("embedding and hidden sizes must be positive")
        if self.head not in ("dense", "conv"):
            raise ValueError(f"head must be 'dense' or 'conv', got {self.head!r}")
        if self.mode not in ("offset", "absolute"):
            raise ValueError(f"mode must be 'offset' or 'absolute', got {self.mode!r}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def head_specs(n_features: int, n_landmarks: int, cfg: TrackerConfig) -> list[LayerSpec]:
    n_out = 2 * n_landmarks
    if cfg.head == "dense":
        return [LayerSpec("dense", (n_features, cfg.hidden)), LayerSpec("relu"),
                LayerSpec("dense", (cfg.hidden, n_out))]
    width = gcd(cfg.k_A, cfg.k_G)
    rows = n_features // width
    pooled = ((rows - 2) // 2) * ((width - 2) // 2) * cfg.conv_channels
    return [LayerSpec("reshape", (rows, width, 1)),
            LayerSpec("conv2d", (1, cfg.conv_channels, 3, 1)), LayerSpec("relu"),
            LayerSpec("maxpool", (2,)), LayerSpec("reshape", (pooled,)),
            LayerSpec("dense", (pooled, n_out))]


class TrackerModel:
    """Spatial module + regression head. The same weights serve both directions.

    In offset mode the head predicts a displacement added to the initialising
    shape; the last head layer starts at zero so a fresh tracker is the identity.
    """

    def __init__(self, partition: ComponentPartition, config: TrackerConfig = TrackerConfig(),
                 store: ParamStore | None = None):
        self.partition = partition
        self.config = config
        self.n_landmarks = partition.n_landmarks
        self.store = ParamStore() if store is None else store
        rng = np.random.default_rng(config.seed)
        self.spatial = init_spatial_weights(self.store, config.patch_size, config.k_A, config.k_G, rng)
        self.n_features = feature_length(partition, config.k_A, config.k_G)
        self.head = Network(head_specs(self.n_features, self.n_landmarks, config), (self.n_features,),
                            self.store, "tracker.head", rng, zero_last=True)

    def predict(self, frames, init_shape) -> Tensor:
        """Differentiable prediction for one frame ``(H, W)`` or a batch ``(B, H, W)``."""
        p = nn.as_tensor(init_shape)
        if p.shape[-2:] != (self.n_landmarks, 2):
            raise nn.ShapeError(f"init shape {p.shape} does not have {self.n_landmarks} landmarks")
        f = spatial_feature(frames, p, self.partition, self.spatial, self.config.patch_size, self.config.eps)
        if f.shape[-1] != self.n_features:
            raise nn.ShapeError(f"feature length {f.shape[-1]} != head input {self.n_features}")
        out = nn.reshape(self.head(f), p.shape)
        return out + p if self.config.mode == "offset" else out

    def frozen(self) -> "TrackerModel":
        """Deep copy safe for concurrent read-only inference."""
        clone = TrackerModel(self.partition, self.config)
        clone.store.load_values({n: t.value for n, t in self.store.items()})
        return clone

    def meta(self) -> dict:
        return {"kind": "tracker", "config": asdict(self.config), "partition": self.partition.to_dict()}

    def save(self, path: str | Path) -> None:
        nn.save_checkpoint(path, self.store, self.meta())

    @classmethod
    def load(cls, path: str | Path) -> "TrackerModel":
        values, meta = nn.read_checkpoint(path)
        if meta.get("kind") != "tracker":
            raise nn.CheckpointError(f"{path} is not a tracker checkpoint")
        model = cls(ComponentPartition.from_dict(meta["partition"]), TrackerConfig(**meta["config"]))
        model.store.load_values(values)
        return model


@dataclass(frozen=True)
class TrackStep:
    t: int
    direction: str
    init_shape: np.ndarray
    predicted: np.ndarray


def track(frame, init_shape, model: TrackerModel, direction: Direction = "forward") -> Tensor:
    """One tracking step. ``direction`` only labels the call: both use the same network."""
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    return model.predict(frame, init_shape)


def cycle_loss(returned, start) -> Tensor:
    returned, start = nn.as_tensor(returned), nn.as_tensor(start)
    if returned.shape != start.shape:
        raise nn.ShapeError(f"cycle_loss: landmark shapes {returned.shape} and {start.shape} differ")
    return nn.mse_loss(returned, start)


def track_sequence(frames: Sequence[np.ndarray], init_shape, model: TrackerModel,
                   direction: Direction = "forward", return_steps: bool = False):
    """Chain ``track`` along the video, each step seeded by the previous output.

    Forward visits frames 0..T-1, backward visits T-1..0. The result is always
    indexed by frame (``out[t]`` is the prediction on frame t).
    """
    if len(frames) == 0:
        raise ValueError("track_sequence needs at least one frame")
    order = range(len(frames)) if direction == "forward" else range(len(frames) - 1, -1, -1)
    out: list = [None] * len(frames)
    steps = []
    p = np.asarray(init_shape, dtype=np.float64)
    for t in order:
        q = track(frames[t], p, model, direction).value
        steps.append(TrackStep(t, direction, p, q))
        out[t] = q
        p = q
    return (out, steps) if return_steps else out
