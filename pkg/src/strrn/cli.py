"""``strrn`` command line: synth, train-detector, distill, track, eval.

Settings merge as defaults < ``--config`` JSON file < explicit flags.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import (CorpusError, ParseError, SyntheticConfig, SequenceManifest, generate_corpus, load_corpus,
                   read_pts, write_manifest, write_pts)
from .distill import (DistillConfig, OracleDetector, SimpleRegressorDetector, Video, metrics_row, run_rounds,
                      write_distilled)
from .metrics import sequence_errors, write_reports
from .nn import CheckpointError
from .shape import PartitionError, partition_for
from .tracker import TrackerConfig, TrackerModel, track_sequence

log = logging.getLogger("strrn")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    out: str | None = None
    seed: int = 0
    config: str | None = None
    # synth
    seqs: int = 20
    frames: int = 30
    size: int = 64
    landmarks: int = 10
    face_scale: float | None = None
    rotation_step: float = 0.01
    rotation_amp: float = 0.2
    scale_step: float = 0.005
    translation_step: float = 0.5
    blob_sigma: float = 1.5
    pixel_noise: float = 0.01
    # corpus / detectors
    corpus: str | None = None
    detector: str = "oracle"
    detector_ckpt: str | None = None
    noise: float = 0.0
    labeled_fraction: float = 1.0
    holdout: int = 0
    # tracker model
    patch_size: int = 9
    k_a: int = 32
    k_g: int = 16
    hidden: int = 128
    head: str = "dense"
    mode: str = "offset"
    # distillation
    lam: float = 0.4
    thresh: float = 0.02
    rounds: int = 2
    seeding: str = "detection"
    tracker_epochs: int = 8
    tracker_lr: float = 1e-3
    batch_size: int = 8
    detector_epochs: int = 10
    detector_lr: float = 0.05
    jobs: int = 1
    # track / eval
    tracker: str | None = None
    init: str = "gt"
    pred: str | None = None
    gt: str | None = None

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(
            n_landmarks=self.landmarks, width=self.size, height=self.size, n_frames=self.frames,
            face_scale=self.face_scale if self.face_scale is not None else self.size / 2.0,
            rotation_step=self.rotation_step, rotation_amp=self.rotation_amp, scale_step=self.scale_step,
            translation_step=self.translation_step, blob_sigma=self.blob_sigma,
            pixel_noise=self.pixel_noise, seed=self.seed)

    def distill(self) -> DistillConfig:
        return DistillConfig(lam=self.lam, thresh=self.thresh, rounds=self.rounds, seeding=self.seeding,
                             tracker_epochs=self.tracker_epochs, tracker_lr=self.tracker_lr,
                             batch_size=self.batch_size, detector_epochs=self.detector_epochs,
                             detector_lr=self.detector_lr, jobs=self.jobs, seed=self.seed)

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(patch_size=self.patch_size, k_A=self.k_a, k_G=self.k_g, hidden=self.hidden,
                             head=self.head, mode=self.mode, seed=self.seed)


FIELD_NAMES = {f.name for f in fields(RunConfig)}


def merge_config(flags: dict) -> RunConfig:
    values = {}
    if flags.get("config"):
        path = Path(flags["config"])
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(doc) - FIELD_NAMES)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update(doc)
    values.update({k: v for k, v in flags.items() if k in FIELD_NAMES})
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) in (None, "")]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _validate(cfg: RunConfig) -> None:
    if not 0 < cfg.labeled_fraction <= 1:
        raise ConfigError(f"--labeled-fraction must be in (0, 1], got {cfg.labeled_fraction}")
    if cfg.noise < 0:
        raise ConfigError("--noise must be >= 0")
    if cfg.detector not in ("oracle", "regressor"):
        raise ConfigError(f"--detector must be 'oracle' or 'regressor', got {cfg.detector!r}")
    if cfg.init not in ("gt", "detector"):
        raise ConfigError(f"--init must be 'gt' or 'detector', got {cfg.init!r}")
    if cfg.holdout < 0 or cfg.seqs < 1:
        raise ConfigError("--holdout must be >= 0 and --seqs >= 1")
    try:
        cfg.distill()
        cfg.tracker_config()
        partition_for(cfg.landmarks)
    except (ValueError, PartitionError) as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------- helpers


def _load_videos(cfg: RunConfig) -> tuple[list[SequenceManifest], list[Video]]:
    _require(cfg, "corpus")
    try:
        seqs = load_corpus(cfg.corpus)
    except (CorpusError, ParseError) as e:
        raise ConfigError(str(e)) from e
    videos = [Video(s.id, s.load_frames(), s.load_annotations()) for s in seqs]
    return seqs, videos


def _labeled_subset(videos: list[Video], fraction: float, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded subset of the annotated frames (Semi-supervised mechanism)."""
    pool = [(v.frames[t], v.gts[t]) for v in videos if v.gts is not None
            for t in range(len(v)) if v.gts[t] is not None]
    if not pool:
        return []
    k = max(1, int(round(fraction * len(pool))))
    idx = np.sort(np.random.default_rng([seed, 11]).choice(len(pool), size=k, replace=False))
    return [pool[i] for i in idx]


def _make_detector(cfg: RunConfig, videos: list[Video]):
    if cfg.detector == "oracle":
        return OracleDetector(cfg.noise, seed=cfg.seed)
    if cfg.detector_ckpt:
        try:
            return SimpleRegressorDetector.load(cfg.detector_ckpt)
        except (CheckpointError, OSError) as e:
            raise ConfigError(str(e)) from e
    return SimpleRegressorDetector(cfg.landmarks, videos[0].frames.shape[1:], seed=cfg.seed)


def _out_dir(cfg: RunConfig) -> Path:
    _require(cfg, "out")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> int:
    try:
        syn = cfg.synthetic()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out = _out_dir(cfg)
    seqs = generate_corpus(out, syn, cfg.seqs)
    log.info("wrote %d sequences x %d frames to %s", len(seqs), cfg.frames, out)
    return 0


def cmd_train_detector(cfg: RunConfig) -> int:
    _, videos = _load_videos(cfg)
    out = _out_dir(cfg)
    labeled = _labeled_subset(videos, cfg.labeled_fraction, cfg.seed)
    if not labeled:
        raise ConfigError("corpus has no annotated frames")
    det = SimpleRegressorDetector(labeled[0][1].shape[0], labeled[0][0].shape, seed=cfg.seed)
    history = det.fit(np.stack([i for i, _ in labeled]), np.stack([s for _, s in labeled]),
                      epochs=cfg.detector_epochs, lr=cfg.detector_lr)
    det.save(out / "detector.json")
    with open(out / "detector_train.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows([e, repr(v)] for e, v in enumerate(history))
    log.info("trained detector on %d labeled frames", len(labeled))
    return 0


def cmd_distill(cfg: RunConfig) -> int:
    seqs, videos = _load_videos(cfg)
    if cfg.holdout >= len(videos):
        raise ConfigError(f"--holdout {cfg.holdout} leaves no training sequences")
    n_train = len(videos) - cfg.holdout
    train, heldout = videos[:n_train], videos[n_train:]
    if any(len(v) < 2 for v in train):
        raise ConfigError("every training sequence needs at least 2 frames")
    if cfg.detector == "oracle" and any(v.gts is None or any(g is None for g in v.gts) for v in videos):
        raise ConfigError("the oracle detector needs a fully annotated corpus")
    if heldout and any(any(g is None for g in v.gts) for v in heldout):
        raise ConfigError("held-out sequences must be fully annotated")
    known = [g for v in videos if v.gts is not None for g in v.gts if g is not None]
    n_landmarks = known[0].shape[0] if known else cfg.landmarks
    try:
        partition = partition_for(n_landmarks)
    except PartitionError as e:
        raise ConfigError(str(e)) from e
    cfg.landmarks = n_landmarks
    detector = _make_detector(cfg, videos)
    tracker = TrackerModel(partition, cfg.tracker_config())
    labeled = _labeled_subset(train, cfg.labeled_fraction, cfg.seed) if detector.trainable else []
    if detector.trainable and not cfg.detector_ckpt:
        if not labeled:
            raise ConfigError("a fresh regressor detector needs annotated training frames")
        # backbone training before the first distillation round
        detector.fit(np.stack([i for i, _ in labeled]), np.stack([s for _, s in labeled]),
                     epochs=cfg.detector_epochs, lr=cfg.detector_lr)
    out = _out_dir(cfg)
    result = run_rounds(train, detector, tracker, cfg.distill(), labeled=labeled, heldout=heldout)
    frame_paths = {(s.id, t): f.resolve() for s in seqs for t, f in enumerate(s.frames)}
    for r, sets in enumerate(result.history):
        write_distilled(out, sets, frame_paths, r)
    tracker.save(out / "tracker.json")
    if detector.trainable:
        detector.save(out / "detector.json")
    rows = [metrics_row(m) for m in result.metrics]
    with open(out / "rounds.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for m in result.metrics:
        log.info("round %d: accepted %d/%d (det %d, tck %d)", m.round, m.n_det + m.n_tck, m.n_eligible,
                 m.n_det, m.n_tck)
    return 0


def cmd_track(cfg: RunConfig) -> int:
    _require(cfg, "tracker")
    seqs, videos = _load_videos(cfg)
    try:
        tracker = TrackerModel.load(cfg.tracker)
    except (CheckpointError, OSError, KeyError, TypeError) as e:
        raise ConfigError(f"cannot load tracker checkpoint: {e}") from e
    detector = _make_detector(cfg, videos) if cfg.init == "detector" else None
    out = _out_dir(cfg)
    results = []
    for s, v in zip(seqs, videos):
        if cfg.init == "gt":
            if v.gts is None or v.gts[0] is None:
                raise ConfigError(f"sequence {s.id} has no first-frame annotation for --init gt")
            init = v.gts[0]
        else:
            init = detector.detect(v.frame(0))
        preds = track_sequence(list(v.frames), init, tracker, "forward")
        apaths = []
        for t, p in enumerate(preds):
            path = out / s.id / f"{t:04d}.pts"
            path.parent.mkdir(parents=True, exist_ok=True)
            write_pts(path, p)
            apaths.append(path)
        results.append(SequenceManifest(s.id, list(s.frames), apaths))
    write_manifest(out / "manifest.json", results)
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "pred", "gt")
    try:
        pred = {s.id: s for s in load_corpus(cfg.pred)}
        gt = load_corpus(cfg.gt)
    except (CorpusError, ParseError) as e:
        raise ConfigError(str(e)) from e
    series = []
    for s in gt:
        if s.id not in pred:
            raise ConfigError(f"no predictions for sequence {s.id!r}")
        p = pred[s.id]
        if len(p) != len(s):
            raise ConfigError(f"sequence {s.id!r}: {len(p)} predicted frames vs {len(s)} ground-truth frames")
        if not (p.labeled and s.labeled):
            raise ConfigError(f"sequence {s.id!r}: every frame needs both a prediction and an annotation")
        pp = [read_pts(a) for a in p.annotations]
        gg = [read_pts(a) for a in s.annotations]
        try:
            partition = partition_for(gg[0].shape[0])
        except PartitionError as e:
            raise ConfigError(str(e)) from e
        series.append(sequence_errors(pp, gg, partition, s.id))
    if not series:
        raise ConfigError("ground-truth manifest has no sequences")
    summary = write_reports(_out_dir(cfg), series)
    print(json.dumps(summary))
    return 0


COMMANDS = {"synth": cmd_synth, "train-detector": cmd_train_detector, "distill": cmd_distill,
            "track": cmd_track, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    d = RunConfig()
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="strrn", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True):
        p.add_argument("--config", default=S, help="JSON file of settings (flags override it)")
        p.add_argument("--out", default=S, help="output directory (required)")
        p.add_argument("--seed", type=int, default=S, help=f"random seed (default {d.seed})")
        if corpus:
            p.add_argument("--corpus", default=S, help="corpus directory or manifest.json")

    def model(p):
        p.add_argument("--patch-size", dest="patch_size", type=int, default=S,
                       help=f"odd patch side in px (default {d.patch_size})")
        p.add_argument("--k-a", dest="k_a", type=int, default=S, help=f"appearance embedding size (default {d.k_a})")
        p.add_argument("--k-g", dest="k_g", type=int, default=S, help=f"geometry embedding size (default {d.k_g})")
        p.add_argument("--hidden", type=int, default=S, help=f"dense head width (default {d.hidden})")
        p.add_argument("--head", choices=["dense", "conv"], default=S, help=f"head variant (default {d.head})")
        p.add_argument("--mode", choices=["offset", "absolute"], default=S,
                       help=f"predict offsets or absolute coordinates (default {d.mode})")

    def detector(p):
        p.add_argument("--detector", choices=["oracle", "regressor"], default=S,
                       help=f"backbone detector (default {d.detector})")
        p.add_argument("--detector-ckpt", dest="detector_ckpt", default=S, help="regressor checkpoint to start from")
        p.add_argument("--noise", type=float, default=S, help=f"oracle detector noise sigma in px (default {d.noise})")

    p = sub.add_parser("synth", help="generate a synthetic corpus with exact ground truth")
    common(p, corpus=False)
    p.add_argument("--seqs", type=int, default=S, help=f"number of sequences (default {d.seqs})")
    p.add_argument("--frames", type=int, default=S, help=f"frames per sequence (default {d.frames})")
    p.add_argument("--size", type=int, default=S, help=f"square frame side in px (default {d.size})")
    p.add_argument("--landmarks", type=int, default=S, help=f"10 or 68 (default {d.landmarks})")
    p.add_argument("--face-scale", dest="face_scale", type=float, default=S, help="px per template unit (default size/2)")
    p.add_argument("--rotation-step", dest="rotation_step", type=float, default=S,
                   help=f"rad per frame (default {d.rotation_step})")
    p.add_argument("--rotation-amp", dest="rotation_amp", type=float, default=S,
                   help=f"max |rotation| rad (default {d.rotation_amp})")
    p.add_argument("--scale-step", dest="scale_step", type=float, default=S,
                   help=f"log-scale std per frame (default {d.scale_step})")
    p.add_argument("--translation-step", dest="translation_step", type=float, default=S,
                   help=f"px std per frame (default {d.translation_step})")
    p.add_argument("--blob-sigma", dest="blob_sigma", type=float, default=S, help=f"px (default {d.blob_sigma})")
    p.add_argument("--pixel-noise", dest="pixel_noise", type=float, default=S, help=f"(default {d.pixel_noise})")

    p = sub.add_parser("train-detector", help="train the regressor detector on labeled frames")
    common(p)
    p.add_argument("--labeled-fraction", dest="labeled_fraction", type=float, default=S,
                   help=f"seeded fraction of annotated frames to use (default {d.labeled_fraction})")
    p.add_argument("--epochs", dest="detector_epochs", type=int, default=S, help=f"(default {d.detector_epochs})")
    p.add_argument("--lr", dest="detector_lr", type=float, default=S, help=f"(default {d.detector_lr})")

    p = sub.add_parser("distill", help="run detector/tracker distillation rounds")
    common(p)
    model(p)
    detector(p)
    p.add_argument("--lambda", dest="lam", type=float, default=S,
                   help=f"weight of the detection term in the ensemble loss (default {d.lam})")
    p.add_argument("--thresh", type=float, default=S,
                   help=f"normalised-RMSE gate for new annotations (default {d.thresh})")
    p.add_argument("--rounds", type=int, default=S, help=f"(default {d.rounds})")
    p.add_argument("--seeding", choices=["detection", "tracked"], default=S,
                   help=f"what the forward track starts from (default {d.seeding})")
    p.add_argument("--holdout", type=int, default=S, help="last N sequences are held out for metrics (default 0)")
    p.add_argument("--labeled-fraction", dest="labeled_fraction", type=float, default=S,
                   help=f"labeled subset for detector retraining (default {d.labeled_fraction})")
    p.add_argument("--tracker-epochs", dest="tracker_epochs", type=int, default=S, help=f"(default {d.tracker_epochs})")
    p.add_argument("--tracker-lr", dest="tracker_lr", type=float, default=S, help=f"(default {d.tracker_lr})")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=S, help=f"(default {d.batch_size})")
    p.add_argument("--detector-epochs", dest="detector_epochs", type=int, default=S,
                   help=f"(default {d.detector_epochs})")
    p.add_argument("--detector-lr", dest="detector_lr", type=float, default=S, help=f"(default {d.detector_lr})")
    p.add_argument("--jobs", type=int, default=S, help="threads across sequences during distillation (default 1)")

    p = sub.add_parser("track", help="track every corpus sequence with a tracker checkpoint")
    common(p)
    detector(p)
    p.add_argument("--tracker", default=S, help="tracker checkpoint (required)")
    p.add_argument("--init", choices=["gt", "detector"], default=S,
                   help=f"first-frame initialisation (default {d.init})")

    p = sub.add_parser("eval", help="normalised RMSE, CED and AUC reports")
    p.add_argument("--pred", default=S, help="prediction manifest (required)")
    p.add_argument("--gt", default=S, help="ground-truth manifest (required)")
    p.add_argument("--out", default=S, help="output directory (required)")
    p.add_argument("--config", default=S, help="JSON file of settings")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    logging.basicConfig(level=logging.INFO if args.pop("verbose") else logging.WARNING,
                        format="%(levelname)s %(message)s")
    command = args.pop("command")
    try:
        cfg = merge_config(args)
        _validate(cfg)
        return COMMANDS[command](cfg)
    except ConfigError as e:
        print(f"strrn {command}: configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"strrn {command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
