"""Synthetic face sequences and the on-disk formats (PGM frames, .pts, manifests)."""

from __future__ import annotations

import json
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .shape import as_shape

MANIFEST_NAME = "manifest.json"


class ParseError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class CorpusError(FileNotFoundError):
    pass


# ---------------------------------------------------------------- templates


def _template_10() -> np.ndarray:
    return np.array([
        [-0.45, -0.25], [-0.25, -0.25],          # right eye
        [0.25, -0.25], [0.45, -0.25],            # left eye
        [0.0, -0.05], [0.0, 0.15],               # nose bridge, tip (root)
        [-0.30, 0.45], [0.0, 0.38], [0.30, 0.45], [0.0, 0.55],  # mouth
    ])


def _template_68() -> np.ndarray:
    pts = []
    a = np.linspace(np.pi, 0.0, 17)
    pts += list(zip(0.78 * np.cos(a), -0.25 + 0.95 * np.sin(a)))  # jaw line 1-17
    for sign in (-1.0, 1.0):                                   # brows: right then left
        xs = np.linspace(0.62, 0.12, 5) if sign < 0 else np.linspace(0.12, 0.62, 5)
        pts += [(sign * abs(x), -0.52 - 0.08 * np.sin(np.pi * (abs(x) - 0.12) / 0.5)) for x in xs]
    pts += [(0.0, y) for y in np.linspace(-0.35, -0.02, 4)]    # nose bridge 28-31
    pts += [(x, 0.08) for x in np.linspace(-0.16, 0.16, 5)]    # nostrils 32-36
    for cx in (-0.32, 0.32):                                   # eyes: right then left
        ang = np.array([np.pi, 2 * np.pi / 3, np.pi / 3, 0.0, -np.pi / 3, -2 * np.pi / 3])
        pts += list(zip(cx + 0.13 * np.cos(ang), -0.3 - 0.06 * np.sin(ang)))
    ang = np.linspace(np.pi, -np.pi, 13)[:-1]                  # outer lips 49-60
    pts += list(zip(0.32 * np.cos(ang), 0.38 - 0.13 * np.sin(ang)))
    ang = np.linspace(np.pi, -np.pi, 9)[:-1]                   # inner lips 61-68
    pts += list(zip(0.2 * np.cos(ang), 0.38 - 0.05 * np.sin(ang)))
    out = np.array(pts, dtype=np.float64)
    assert out.shape == (68, 2)
    return out


def unit_template(n_landmarks: int) -> np.ndarray:
    """Canonical layout centred near the origin, inter-eye span ~0.6-0.7 units."""
    if n_landmarks == 10:
        return _template_10()
    if n_landmarks == 68:
        return _template_68()
    raise ValueError(f"no template for L={n_landmarks} (supported: 10, 68)")


# ---------------------------------------------------------------- generator


@dataclass(frozen=True)
class SyntheticConfig:
    n_landmarks: int = 10
    width: int = 64
    height: int = 64
    n_frames: int = 30
    face_scale: float = 32.0         # px per template unit
    rotation_step: float = 0.01      # rad, per-frame random-walk std
    rotation_amp: float = 0.2        # rad, |angle| cap
    scale_step: float = 0.005        # per-frame log-scale std
    scale_range: tuple[float, float] = (0.9, 1.1)
    translation_step: float = 0.5    # px, per-frame random-walk std
    drift: tuple[float, float] = (0.0, 0.0)  # px/frame constant velocity
    initial_jitter: bool = True
    blob_sigma: float = 1.5
    background: float = 0.1
    pixel_noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError(f"n_frames must be >= 1, got {self.n_frames}")
        if self.width < 8 or self.height < 8:
            raise ValueError("frames must be at least 8x8")
        if self.blob_sigma <= 0:
            raise ValueError("blob_sigma must be positive")
        if self.face_scale <= 0:
            raise ValueError("face_scale must be positive")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale_range {self.scale_range}")
        if min(self.rotation_step, self.rotation_amp, self.scale_step, self.translation_step,
               self.pixel_noise) < 0:
            raise ValueError("motion and noise magnitudes must be non-negative")
        unit_template(self.n_landmarks)

    def to_dict(self) -> dict:
        return asdict(self)


def landmark_intensities(n_landmarks: int) -> np.ndarray:
    """Distinct blob peaks so that no two patches look alike."""
    return np.linspace(0.45, 1.0, n_landmarks)


def render_frame(shape, width: int, height: int, blob_sigma: float,
                 intensities: np.ndarray, background: float) -> np.ndarray:
    p = as_shape(shape)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.full((height, width), background)
    for (x, y), a in zip(p, intensities):
        img += a * np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * blob_sigma ** 2))
    return img


def _pose_shape(template: np.ndarray, center: np.ndarray, angle: float, scale: float,
                trans: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    return template @ R.T * scale + center + trans


def _inside_fraction(p: np.ndarray, width: int, height: int) -> float:
    ok = (p[:, 0] >= 0) & (p[:, 0] <= width - 1) & (p[:, 1] >= 0) & (p[:, 1] <= height - 1)
    return float(ok.mean())


def generate_sequence(config: SyntheticConfig, index: int = 0, max_retries: int = 100):
    """Render one sequence; returns ``(frames (T, H, W) in [0, 1], gts (T, L, 2))``.

    Frames are quantised to 8-bit levels so they survive a PGM round trip
    unchanged. ``index`` selects an independent stream under the same seed.
    """
    rng = np.random.default_rng([config.seed, index])
    template = unit_template(config.n_landmarks) * config.face_scale
    center = np.array([(config.width - 1) / 2.0, (config.height - 1) / 2.0])
    lo, hi = config.scale_range
    if config.initial_jitter:
        angle = rng.uniform(-0.5, 0.5) * config.rotation_amp
        scale = rng.uniform(lo, hi)
        trans = rng.uniform(-2.0, 2.0, size=2) * (config.translation_step > 0)
    else:
        angle, scale, trans = 0.0, 1.0, np.zeros(2)
    drift = np.asarray(config.drift, dtype=np.float64)
    gts = []
    for t in range(config.n_frames):
        if t > 0:
            for _ in range(max_retries):
                a = np.clip(angle + rng.normal(0.0, config.rotation_step), -config.rotation_amp,
                            config.rotation_amp)
                s = float(np.clip(scale * np.exp(rng.normal(0.0, config.scale_step)), lo, hi))
                tr = trans + drift + rng.normal(0.0, config.translation_step, size=2)
                cand = _pose_shape(template, center, a, s, tr)
                if _inside_fraction(cand, config.width, config.height) >= 0.9:
                    angle, scale, trans = a, s, tr
                    break
            else:
                raise GenerationError(f"frame {t}: landmarks keep leaving the frame after {max_retries} retries")
            gts.append(cand)
        else:
            first = _pose_shape(template, center, angle, scale, trans)
            if _inside_fraction(first, config.width, config.height) < 0.9:
                raise GenerationError("initial pose does not fit in the frame")
            gts.append(first)
    gts = np.array(gts)
    inten = landmark_intensities(config.n_landmarks)
    frames = np.empty((config.n_frames, config.height, config.width))
    for t, p in enumerate(gts):
        img = render_frame(p, config.width, config.height, config.blob_sigma, inten, config.background)
        if config.pixel_noise > 0:
            img = img + rng.normal(0.0, config.pixel_noise, size=img.shape)
        frames[t] = to_uint8(img) / 255.0
    return frames, gts


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img) * 255.0 + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- .pts


def _pts_array(shape) -> np.ndarray:
    p = np.asarray(shape, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 1:
        raise ValueError(f"expected (L, 2) coordinates, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("shape has non-finite coordinates")
    return p


def format_pts(shape) -> str:
    p = _pts_array(shape)
    lines = ["version: 1", f"n_points: {len(p)}", "{"]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in p]
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_pts(path: str | Path, shape) -> None:
    Path(path).write_text(format_pts(shape))


def parse_pts(text: str, source: str = "<pts>") -> np.ndarray:
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()

    def fail(lineno: int, msg: str):
        raise ParseError(f"{source}: line {lineno}: {msg}")

    if len(lines) < 3:
        fail(len(lines), "truncated header")
    if not re.fullmatch(r"\s*version:\s*1\s*", lines[0]):
        fail(1, f"expected 'version: 1', got {lines[0]!r}")
    m = re.fullmatch(r"\s*n_points:\s*(\d+)\s*", lines[1])
    if not m:
        fail(2, f"expected 'n_points: <int>', got {lines[1]!r}")
    n = int(m.group(1))
    if lines[2].strip() != "{":
        fail(3, f"expected '{{', got {lines[2]!r}")
    coords = []
    for i, line in enumerate(lines[3:], start=4):
        if line.strip() == "}":
            if len(coords) != n:
                fail(i, f"n_points is {n} but {len(coords)} coordinate lines were found")
            if i != len(lines):
                fail(i + 1, "content after closing '}'")
            if not coords:
                fail(i, "no coordinates")
            return np.array(coords, dtype=np.float64)
        parts = line.split()
        if len(parts) != 2:
            fail(i, f"expected '<x> <y>', got {line!r}")
        try:
            x, y = float(parts[0]), float(parts[1])
        except ValueError:
            fail(i, f"non-numeric coordinate {line!r}")
        if not (np.isfinite(x) and np.isfinite(y)):
            fail(i, f"non-finite coordinate {line!r}")
        coords.append((x, y))
    fail(len(lines), "missing closing '}'")


def read_pts(path: str | Path) -> np.ndarray:
    return parse_pts(Path(path).read_text(), str(path))


# ---------------------------------------------------------------- PGM (P5)


def write_pgm(path: str | Path, image) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"write_pgm needs a 2-D uint8 image, got {img.dtype} {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0
    tokens: list[bytes] = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise ParseError(f"{path}: bad PGM header {tokens}") from e
    if not 0 < maxval < 256:
        raise ParseError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise ParseError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------- corpora


@dataclass
class SequenceManifest:
    id: str
    frames: list[Path]
    annotations: list[Path | None]
    labeled: bool = field(init=False)

    def __post_init__(self):
        if len(self.frames) < 1:
            raise CorpusError(f"sequence {self.id!r} has no frames")
        if len(self.annotations) != len(self.frames):
            raise CorpusError(f"sequence {self.id!r}: {len(self.frames)} frames, "
                              f"{len(self.annotations)} annotation slots")
        self.labeled = all(a is not None for a in self.annotations)

    def __len__(self) -> int:
        return len(self.frames)

    def load_frames(self) -> np.ndarray:
        return np.stack([read_pgm(f) for f in self.frames]).astype(np.float64) / 255.0

    def load_annotations(self) -> list[np.ndarray | None]:
        return [None if a is None else read_pts(a) for a in self.annotations]


def resolve_manifest(root: str | Path) -> Path:
    root = Path(root)
    return root / MANIFEST_NAME if root.is_dir() else root


def load_corpus(root: str | Path) -> list[SequenceManifest]:
    """Read a manifest (file or directory holding manifest.json) and check every path exists."""
    path = resolve_manifest(root)
    if not path.is_file():
        raise CorpusError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON: {e}") from e
    base = path.parent
    seqs, missing = [], []
    for entry in doc.get("sequences", []):
        frames = [base / f for f in entry["frames"]]
        annots = entry.get("annotations") or [None] * len(frames)
        annots = [None if a is None else base / a for a in annots]
        missing += [str(p) for p in frames if not p.is_file()]
        missing += [str(p) for p in annots if p is not None and not p.is_file()]
        seqs.append(SequenceManifest(str(entry["id"]), frames, annots))
    if missing:
        raise CorpusError(f"{len(missing)} missing file(s): " + ", ".join(missing))
    return seqs


def write_manifest(path: str | Path, sequences: Sequence[SequenceManifest], extra: dict | None = None) -> None:
    path = Path(path)
    base = path.parent

    def rel(p):
        return None if p is None else Path(os.path.relpath(Path(p).resolve(), base.resolve())).as_posix()

    doc = {"sequences": [{"id": s.id, "frames": [rel(f) for f in s.frames],
                          "annotations": [rel(a) for a in s.annotations]} for s in sequences]}
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=1) + "\n")


def write_sequence(out_dir: str | Path, seq_id: str, frames: np.ndarray, gts=None) -> SequenceManifest:
    """Write frames as PGM (and gts as .pts when given) under ``out_dir/seq_id``."""
    d = Path(out_dir) / seq_id
    d.mkdir(parents=True, exist_ok=True)
    fpaths, apaths = [], []
    for t, img in enumerate(frames):
        fp = d / f"{t:04d}.pgm"
        write_pgm(fp, to_uint8(img))
        fpaths.append(fp)
        if gts is not None and gts[t] is not None:
            ap = d / f"{t:04d}.pts"
            write_pts(ap, gts[t])
            apaths.append(ap)
        else:
            apaths.append(None)
    return SequenceManifest(seq_id, fpaths, apaths)


def generate_corpus(out_dir: str | Path, config: SyntheticConfig, n_sequences: int) -> list[SequenceManifest]:
    if n_sequences < 1:
        raise ValueError("need at least one sequence")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seqs = []
    for i in range(n_sequences):
        frames, gts = generate_sequence(config, index=i)
        seqs.append(write_sequence(out, f"seq{i:03d}", frames, gts))
    write_manifest(out / MANIFEST_NAME, seqs, {"synthetic": config.to_dict()})
    return seqs
