"""Detector/tracker cross-checking, annotation distillation and retraining."""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Protocol, Sequence

import numpy as np

from . import nn
from .data import write_pts
from .metrics import DegenerateInputError, normalized_rmse
from .nn import LayerSpec, Network, ParamStore
from .shape import ComponentPartition
from .tracker import TrackerModel, cycle_loss, track, track_sequence


class ProtocolError(ValueError):
    pass


class CapabilityError(RuntimeError):
    pass


# ---------------------------------------------------------------- frames & videos


@dataclass(frozen=True)
class Frame:
    image: np.ndarray
    seq_id: str
    index: int
    gt: np.ndarray | None = None


@dataclass
class Video:
    id: str
    frames: np.ndarray                        # (T, H, W) in [0, 1]
    gts: Sequence[np.ndarray | None] | None = None

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, t: int) -> Frame:
        gt = None if self.gts is None else self.gts[t]
        return Frame(self.frames[t], self.id, t, gt)


# ---------------------------------------------------------------- detectors


class Detector(Protocol):
    name: str
    trainable: bool

    def detect(self, frame: Frame) -> np.ndarray: ...


class OracleDetector:
    """Ground truth plus iid Gaussian noise, reproducible per (seed, sequence, frame).

    The same standard-normal draws are scaled by ``sigma``, so detections for
    different noise levels are nested.
    """

    name = "oracle"
    trainable = False

    def __init__(self, sigma: float = 0.0, seed: int = 0):
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.sigma = float(sigma)
        self.seed = int(seed)

    def detect(self, frame: Frame) -> np.ndarray:
        if frame.gt is None:
            raise ProtocolError(f"oracle detector has no ground truth for {frame.seq_id}[{frame.index}]")
        rng = np.random.default_rng([self.seed, zlib.crc32(frame.seq_id.encode()), frame.index])
        gt = np.asarray(frame.gt, dtype=np.float64)
        return gt + self.sigma * rng.standard_normal(gt.shape)


class SimpleRegressorDetector:
    """Dense net from block-averaged frame pixels to landmark coordinates.

    Output is ``mean_shape + unit * net(x)`` with ``unit`` a quarter of the frame
    width, which keeps targets O(1) for SGD.
    """

    name = "regressor"
    trainable = True

    def __init__(self, n_landmarks: int, frame_hw: tuple[int, int], downscale: int = 4,
                 hidden: int = 64, seed: int = 0):
        self.n_landmarks = n_landmarks
        self.frame_hw = tuple(frame_hw)
        self.downscale = downscale
        self.hidden = hidden
        self.seed = seed
        h, w = self.frame_hw
        if h % downscale or w % downscale:
            raise ValueError(f"frame {frame_hw} not divisible by downscale {downscale}")
        self.n_inputs = (h // downscale) * (w // downscale)
        self.unit = w / 4.0
        self.mean_shape = np.zeros((n_landmarks, 2))
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.net = Network([LayerSpec("dense", (self.n_inputs, hidden)), LayerSpec("relu"),
                            LayerSpec("dense", (hidden, 2 * n_landmarks))],
                           (self.n_inputs,), self.store, "detector", rng, zero_last=True)
        self._rng = np.random.default_rng([seed, 1])

    def _features(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.shape[-2:] != self.frame_hw:
            raise ProtocolError(f"detector expects frames {self.frame_hw}, got {images.shape[-2:]}")
        h, w = self.frame_hw
        k = self.downscale
        lead = images.shape[:-2]
        pooled = images.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1))
        return pooled.reshape(*lead, self.n_inputs)

    def _forward(self, images: np.ndarray) -> nn.Tensor:
        out = self.net(self._features(images))
        lead = out.shape[:-1]
        return nn.reshape(out, lead + (self.n_landmarks, 2)) * self.unit + self.mean_shape

    def detect(self, frame: Frame) -> np.ndarray:
        return self._forward(frame.image).value

    def detect_batch(self, images: np.ndarray) -> np.ndarray:
        return self._forward(images).value

    def fit(self, images: np.ndarray, shapes: np.ndarray, epochs: int = 30, lr: float = 0.05,
            batch_size: int = 16) -> list[float]:
        """Minibatch SGD on summed squared error (in units of ``self.unit``).

        Returns the per-epoch mean loss. The first call also fixes ``mean_shape``.
        """
        images = np.asarray(images, dtype=np.float64)
        shapes = np.asarray(shapes, dtype=np.float64)
        if len(images) == 0:
            return []
        if not np.any(self.mean_shape):
            self.mean_shape = shapes.mean(axis=0)
        history = []
        n = len(images)
        for _ in range(epochs):
            order = self._rng.permutation(n)
            total = 0.0
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                pred = self.net(self._features(images[idx]))
                target = ((shapes[idx] - self.mean_shape) / self.unit).reshape(len(idx), -1)
                loss = nn.mse_loss(pred, target) * (1.0 / len(idx))
                total += loss.item() * len(idx)
                nn.backward_and_step(loss, self.store, lr)
            history.append(total / n)
        return history

    def meta(self) -> dict:
        return {"kind": "detector", "n_landmarks": self.n_landmarks, "frame_hw": list(self.frame_hw),
                "downscale": self.downscale, "hidden": self.hidden, "seed": self.seed,
                "mean_shape": self.mean_shape.tolist()}

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.store, self.meta())

    @classmethod
    def load(cls, path) -> "SimpleRegressorDetector":
        values, meta = nn.read_checkpoint(path)
        if meta.get("kind") != "detector":
            raise nn.CheckpointError(f"{path} is not a detector checkpoint")
        det = cls(meta["n_landmarks"], tuple(meta["frame_hw"]), meta["downscale"], meta["hidden"], meta["seed"])
        det.store.load_values(values)
        det.mean_shape = np.asarray(meta["mean_shape"], dtype=np.float64)
        return det


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 0.4
    thresh: float = 0.02
    rounds: int = 2
    seeding: Literal["detection", "tracked"] = "detection"
    cycle_only: bool = True
    tracker_epochs: int = 8
    tracker_lr: float = 1e-3
    batch_size: int = 8
    detector_epochs: int = 10
    detector_lr: float = 0.05
    jobs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.thresh > 0:
            raise ValueError(f"threshold must be > 0, got {self.thresh}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.seeding not in ("detection", "tracked"):
            raise ValueError(f"seeding must be 'detection' or 'tracked', got {self.seeding!r}")
        if self.tracker_epochs < 0 or self.detector_epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.tracker_lr <= 0 or self.detector_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.jobs < 1:
            raise ValueError("batch_size and jobs must be >= 1")


# ---------------------------------------------------------------- gate and routing


def ensemble_loss(tck_losses: Sequence[float], det_losses: Sequence[float], lam: float) -> float:
    """sum(tck) + lam * sum(det)."""
    if len(tck_losses) != len(det_losses):
        raise ValueError(f"{len(tck_losses)} tracking losses vs {len(det_losses)} detection losses")
    return float(np.sum(tck_losses)) + lam * float(np.sum(det_losses))


def gate(L_det: float, L_tck: float, thresh: float) -> str | None:
    """Destination pool for a frame: 'tck', 'det', or None when either loss reaches ``thresh``."""
    if not (L_det < thresh and L_tck < thresh):
        return None
    return "tck" if L_tck > L_det else "det"


@dataclass(frozen=True)
class FrameOutcome:
    seq_id: str
    t: int
    L_det: float
    L_tck: float
    dest: str | None
    annotation: np.ndarray | None
    seed: np.ndarray          # shape the forward track was cropped at
    p_det_prev: np.ndarray
    p_det: np.ndarray
    p_tck: np.ndarray


def distill_frame(prev: Frame, cur: Frame, detector: Detector, tracker: TrackerModel,
                  partition: ComponentPartition, thresh: float,
                  p_det_prev: np.ndarray | None = None, seed: np.ndarray | None = None) -> FrameOutcome:
    """Cross-check one adjacent frame pair and route it to D_tck, D_det or nowhere.

    D_tck receives the detector's shape when the tracker's round trip is the
    worse of the two; otherwise D_det receives the tracker's shape.
    """
    L = partition.n_landmarks
    if p_det_prev is None:
        p_det_prev = detector.detect(prev)
    p_det = detector.detect(cur)
    for p in (p_det_prev, p_det):
        if np.shape(p) != (L, 2):
            raise ProtocolError(f"detector returned shape {np.shape(p)}, expected ({L}, 2)")
    seed = p_det_prev if seed is None else seed
    p_tck = track(cur.image, seed, tracker, "forward").value
    back_det = track(prev.image, p_det, tracker, "backward").value
    back_tck = track(prev.image, p_tck, tracker, "backward").value
    try:
        L_det = normalized_rmse(back_det, p_det_prev, partition)
        L_tck = normalized_rmse(back_tck, p_det_prev, partition)
    except DegenerateInputError:
        # a collapsed detection cannot normalise anything; treat it as unreliable
        L_det = L_tck = float("inf")
    dest = gate(L_det, L_tck, thresh)
    annotation = None if dest is None else (p_det if dest == "tck" else p_tck)
    return FrameOutcome(cur.seq_id, cur.index, L_det, L_tck, dest, annotation, seed, p_det_prev, p_det, p_tck)


@dataclass(frozen=True)
class DistilledEntry:
    seq_id: str
    t: int
    dest: str
    annotation: np.ndarray
    seed: np.ndarray
    L_det: float
    L_tck: float
    round: int = 0


@dataclass
class DistilledSets:
    det: list[DistilledEntry] = field(default_factory=list)
    tck: list[DistilledEntry] = field(default_factory=list)
    n_eligible: int = 0

    @property
    def n_accepted(self) -> int:
        return len(self.det) + len(self.tck)

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_eligible if self.n_eligible else 0.0

    def extend(self, other: "DistilledSets") -> None:
        self.det += other.det
        self.tck += other.tck
        self.n_eligible += other.n_eligible

    def entries(self) -> list[DistilledEntry]:
        return sorted(self.det + self.tck, key=lambda e: (e.seq_id, e.t))


def distill_video(video: Video, detector: Detector, tracker: TrackerModel, config: DistillConfig,
                  round_index: int = 0, outcomes: list | None = None) -> DistilledSets:
    """Run ``distill_frame`` over t = 1..T-1 of one video.

    With ``seeding='detection'`` every forward track starts from the previous
    frame's detection; with ``'tracked'`` it starts from the previous tracked shape.
    """
    if len(video) < 2:
        raise ValueError(f"video {video.id!r} needs at least 2 frames, has {len(video)}")
    partition = tracker.partition
    sets = DistilledSets(n_eligible=len(video) - 1)
    prev = video.frame(0)
    p_prev = detector.detect(prev)
    carried = p_prev
    for t in range(1, len(video)):
        cur = video.frame(t)
        seed = carried if config.seeding == "tracked" else None
        out = distill_frame(prev, cur, detector, tracker, partition, config.thresh, p_det_prev=p_prev, seed=seed)
        if outcomes is not None:
            outcomes.append(out)
        if out.dest is not None:
            entry = DistilledEntry(video.id, t, out.dest, out.annotation, out.seed, out.L_det, out.L_tck, round_index)
            (sets.tck if out.dest == "tck" else sets.det).append(entry)
        prev, p_prev, carried = cur, out.p_det, out.p_tck
    return sets


def distill_corpus(videos: Sequence[Video], detector: Detector, tracker: TrackerModel,
                   config: DistillConfig, round_index: int = 0) -> DistilledSets:
    """Distill every video against frozen copies of the models; ``config.jobs`` threads."""
    frozen = tracker.frozen()
    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            parts = list(pool.map(lambda v: distill_video(v, detector, frozen, config, round_index), videos))
    else:
        parts = [distill_video(v, detector, frozen, config, round_index) for v in videos]
    out = DistilledSets()
    for p in parts:
        out.extend(p)
    return out


# ---------------------------------------------------------------- retraining


def _video_detections(videos: Sequence[Video], detector: Detector) -> dict[str, np.ndarray]:
    return {v.id: np.stack([detector.detect(v.frame(t)) for t in range(len(v))]) for v in videos}


@dataclass
class TrainReport:
    initial_loss: float
    final_loss: float
    epoch_losses: list[float]


def tracker_objective(tracker: TrackerModel, videos: Sequence[Video], detections: dict[str, np.ndarray],
                      d_tck: Sequence[DistilledEntry], lam: float) -> tuple[list[float], list[float]]:
    """Per-frame (cycle, detection-agreement) squared losses over every adjacent pair."""
    by_key = {(e.seq_id, e.t): e for e in d_tck}
    tck, det = [], []
    for v in videos:
        dets = detections[v.id]
        for t in range(1, len(v)):
            start = dets[t - 1]
            fwd = tracker.predict(v.frames[t], start)
            back = tracker.predict(v.frames[t - 1], fwd)
            tck.append(cycle_loss(back, start).item())
            e = by_key.get((v.id, t))
            det.append(0.0 if e is None or lam == 0 else
                       nn.mse_loss(tracker.predict(v.frames[t], e.seed), e.annotation).item())
    return tck, det


def train_tracker(tracker: TrackerModel, d_tck: Sequence[DistilledEntry], videos: Sequence[Video],
                  detector: Detector, config: DistillConfig) -> TrainReport:
    """Minimise sum(cycle) + lam * sum(agreement with D_tck) by minibatch SGD.

    The cycle term for pair (t-1, t) starts from the detection on frame t-1,
    tracks forward onto frame t and back. The agreement term compares the
    forward track on a D_tck frame with that entry's annotation.
    """
    if not d_tck and not config.cycle_only:
        raise nn.UsageError("D_tck is empty and cycle-only training is disabled")
    if not videos:
        raise nn.UsageError("no videos to train on")
    detections = _video_detections(videos, detector)
    by_id = {v.id: v for v in videos}
    det_by_key = {(e.seq_id, e.t): e for e in d_tck} if config.lam > 0 else {}
    pairs = [(v.id, t) for v in videos for t in range(1, len(v))]
    init = ensemble_loss(*tracker_objective(tracker, videos, detections, d_tck, config.lam), config.lam)
    rng = np.random.default_rng([config.seed, 7])
    epoch_losses = []
    for _ in range(config.tracker_epochs):
        order = rng.permutation(len(pairs))
        running = 0.0
        for s in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[s:s + config.batch_size]]
            prev = np.stack([by_id[sid].frames[t - 1] for sid, t in batch])
            cur = np.stack([by_id[sid].frames[t] for sid, t in batch])
            start = np.stack([detections[sid][t - 1] for sid, t in batch])
            fwd = tracker.predict(cur, start)
            back = tracker.predict(prev, fwd)
            loss = cycle_loss(back, start)
            hits = [det_by_key[k] for k in batch if k in det_by_key]
            if hits:
                hit_frames = np.stack([by_id[e.seq_id].frames[e.t] for e in hits])
                pred = tracker.predict(hit_frames, np.stack([e.seed for e in hits]))
                loss = loss + config.lam * nn.mse_loss(pred, np.stack([e.annotation for e in hits]))
            loss = loss * (1.0 / len(batch))
            running += loss.item() * len(batch)
            if loss.requires_grad:
                nn.backward_and_step(loss, tracker.store, config.tracker_lr)
        epoch_losses.append(running / len(pairs))
    final = ensemble_loss(*tracker_objective(tracker, videos, detections, d_tck, config.lam), config.lam)
    return TrainReport(init, final, epoch_losses)


def retrain_detector(detector: Detector, d_det: Sequence[DistilledEntry], labeled: Sequence[tuple],
                     videos: Sequence[Video], config: DistillConfig) -> list[float]:
    """Continue training a trainable detector on D_det plus the labeled (image, shape) set."""
    if not getattr(detector, "trainable", False):
        raise CapabilityError(f"detector {getattr(detector, 'name', detector)!r} is not trainable")
    by_id = {v.id: v for v in videos}
    images = [by_id[e.seq_id].frames[e.t] for e in d_det] + [img for img, _ in labeled]
    shapes = [e.annotation for e in d_det] + [s for _, s in labeled]
    if not images:
        return []
    return detector.fit(np.stack(images), np.stack(shapes), epochs=config.detector_epochs,
                        lr=config.detector_lr, batch_size=16)


# ---------------------------------------------------------------- evaluation & rounds


def evaluate_tracker(tracker: TrackerModel, detector: Detector, videos: Sequence[Video]) -> float:
    """Mean normalised RMSE of tracking each video from its first-frame detection."""
    errs = []
    for v in videos:
        preds = track_sequence(list(v.frames), detector.detect(v.frame(0)), tracker, "forward")
        errs += [normalized_rmse(p, g, tracker.partition) for p, g in zip(preds, v.gts)]
    return float(np.mean(errs))


def evaluate_detector(detector: Detector, videos: Sequence[Video], partition: ComponentPartition) -> float:
    errs = [normalized_rmse(detector.detect(v.frame(t)), v.gts[t], partition)
            for v in videos for t in range(len(v))]
    return float(np.mean(errs))


@dataclass
class RoundMetrics:
    round: int
    n_eligible: int
    n_det: int
    n_tck: int
    acceptance_rate: float
    tracker_initial_loss: float
    tracker_final_loss: float
    heldout_tracker_nrmse: float | None = None
    heldout_detector_nrmse: float | None = None


@dataclass
class RoundsResult:
    tracker: TrackerModel
    detector: Detector
    history: list[DistilledSets]
    metrics: list[RoundMetrics]


def run_rounds(videos: Sequence[Video], detector: Detector, tracker: TrackerModel, config: DistillConfig,
               labeled: Sequence[tuple] = (), heldout: Sequence[Video] = ()) -> RoundsResult:
    """Alternate distillation over the corpus, detector retraining and tracker retraining."""
    history, metrics = [], []
    for r in range(config.rounds):
        sets = distill_corpus(videos, detector, tracker, config, round_index=r)
        if detector.trainable:
            retrain_detector(detector, sets.det, labeled, videos, config)
        report = train_tracker(tracker, sets.tck, videos, detector, config)
        m = RoundMetrics(r, sets.n_eligible, len(sets.det), len(sets.tck), sets.acceptance_rate,
                         report.initial_loss, report.final_loss)
        if heldout:
            m.heldout_tracker_nrmse = evaluate_tracker(tracker, detector, heldout)
            m.heldout_detector_nrmse = evaluate_detector(detector, heldout, tracker.partition)
        history.append(sets)
        metrics.append(m)
    return RoundsResult(tracker, detector, history, metrics)


def write_distilled(out_dir: str | Path, sets: DistilledSets, frame_paths: dict[tuple[str, int], Path],
                    round_index: int) -> Path:
    """Write each accepted annotation as .pts plus one JSON-lines record per entry."""
    out = Path(out_dir)
    pts_dir = out / f"round{round_index}"
    pts_dir.mkdir(parents=True, exist_ok=True)
    manifest = out / f"distilled_round{round_index}.jsonl"
    with open(manifest, "w") as fh:
        for e in sets.entries():
            pts = pts_dir / f"{e.seq_id}_{e.t:04d}_{e.dest}.pts"
            write_pts(pts, e.annotation)
            rec = {"frame": Path(frame_paths[(e.seq_id, e.t)]).as_posix(), "pts": pts.relative_to(out).as_posix(),
                   "dest": e.dest, "L_det": e.L_det, "L_tck": e.L_tck, "round": round_index}
            fh.write(json.dumps(rec) + "\n")
    return manifest


def metrics_row(m: RoundMetrics) -> dict:
    return asdict(m)
