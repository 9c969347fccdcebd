"""Spatio-temporal landmark tracking with detector/tracker distillation on numpy."""

from __future__ import annotations

from .shape import ComponentPartition, partition_10, partition_300w, partition_for
from .tracker import TrackerConfig, TrackerModel, track, track_sequence

__version__ = "0.1.0"

__all__ = ["ComponentPartition", "TrackerConfig", "TrackerModel", "partition_10", "partition_300w",
           "partition_for", "track", "track_sequence", "__version__"]
