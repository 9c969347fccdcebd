"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line in ``RESULTS`` (shown in the pytest
terminal summary) before asserting. Run standalone with
``python3 tests/test_acceptance.py`` to print only the lines.
"""

from __future__ import annotations

import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from stubs import branch_table, random_dyadic_triples, scripted_pair
from strrn import nn
from strrn.cli import main as cli_main
from strrn.data import SyntheticConfig, generate_sequence, read_pgm, read_pts, unit_template, write_pgm, write_pts
from strrn.distill import DistillConfig, OracleDetector, Video, distill_corpus, distill_frame, gate, run_rounds
from strrn.metrics import auc, ced_curve, normalized_rmse
from strrn.nn import ParamStore
from strrn.shape import enumerate_pairs, geometry_pair_descriptor, partition_10, partition_300w
from strrn.spatial import appearance_embed, geometry_descriptors, geometry_embed, group_geometry, init_spatial_weights
from strrn.tracker import TrackerConfig, TrackerModel, cycle_loss, track

pytestmark = pytest.mark.acceptance

RESULTS: list[str] = []


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  [{number}] {title}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


def synthetic_videos(n: int, seed: int, n_frames: int = 30, offset: int = 0) -> list[Video]:
    cfg = SyntheticConfig(n_landmarks=10, width=64, height=64, n_frames=n_frames, seed=seed)
    out = []
    for i in range(offset, offset + n):
        frames, gts = generate_sequence(cfg, i)
        out.append(Video(f"seq{i:03d}", frames, list(gts)))
    return out


# ---------------------------------------------------------------- 1


def criterion_gradients() -> bool:
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    part = partition_10()
    errs = {}

    # appearance path
    store = ParamStore()
    w = init_spatial_weights(store, 9, 32, 16, r)
    w.b_A.value[...] = r.normal(scale=0.1, size=32)
    patches = r.uniform(size=(10, 9, 9))
    target = r.normal(size=(10, 32))
    errs["appearance"] = nn.grad_check(lambda: nn.mse_loss(appearance_embed(patches, w), target), store,
                                       eps=1e-5, names=["spatial.W_A", "spatial.b_A"])

    # geometry path, including the landmark coordinates themselves
    shape = store.add("shape", r.uniform(5, 60, size=(10, 2)))
    w.b_G.value[...] = r.normal(scale=0.1, size=16)
    gtarget = r.normal(size=(4, 16))
    errs["geometry"] = nn.grad_check(lambda: nn.mse_loss(group_geometry(shape, part, w), gtarget), store,
                                     eps=1e-5, names=["spatial.W_G", "spatial.b_G", "shape"])

    # full cycle loss through two chained track() calls, default-size model
    model = TrackerModel(part, TrackerConfig(seed=1))
    for name, t in model.store.items():
        if name.startswith("tracker.head"):
            t.value[...] = r.normal(scale=0.01, size=t.shape)
    frames, gts = generate_sequence(SyntheticConfig(n_frames=2, seed=3))
    start = gts[0] + r.normal(scale=0.5, size=gts[0].shape)

    def cyc():
        return cycle_loss(track(frames[0], track(frames[1], start, model, "forward"), model, "backward"), start)

    errs["cycle"] = nn.grad_check(cyc, model.store, eps=1e-5, max_entries=40, rng=np.random.default_rng(2))
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f"; {dt:.1f} s"
    return record(1, "gradient integrity (max rel err < 1e-4, < 30 s)", worst < 1e-4 and dt < 30, detail)


# ---------------------------------------------------------------- 2


def criterion_geometry_invariance() -> bool:
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    part = partition_300w()
    # coordinates on a 1/256 grid with integer shifts keep every difference exact
    shapes = np.round(r.uniform(0, 200, size=(1000, 68, 2)) * 256) / 256
    shifts = r.integers(-500, 501, size=(1000, 1, 2)).astype(np.float64)
    a = geometry_descriptors(shapes, part).value
    b = geometry_descriptors(shapes + shifts, part).value
    batched_ok = a.tobytes() == b.tobytes()
    single_ok = True
    pairs = enumerate_pairs(part)
    for k in range(1000):
        for idx in r.choice(len(pairs), size=3, replace=False):
            _, m, n = pairs[idx]
            d1 = geometry_pair_descriptor(shapes[k], m, n, part.root)
            d2 = geometry_pair_descriptor(shapes[k] + shifts[k], m, n, part.root)
            single_ok &= d1.tobytes() == d2.tobytes() and d1.tobytes() == a[k, idx].tobytes()

    w = init_spatial_weights(ParamStore(), 9, 32, 16, r)
    worst = 0.0
    for k in range(20):
        blocks = group_geometry(shapes[k], part, w).value
        emb = geometry_embed(a[k], w).value
        acc = np.zeros_like(blocks)
        for idx in r.permutation(len(pairs)):
            acc[pairs[idx][0]] += emb[idx]
        worst = max(worst, float(np.max(np.abs(acc - blocks) / np.maximum(1.0, np.abs(blocks)))))
    dt = time.perf_counter() - t0
    ok = batched_ok and single_ok and worst < 1e-12 and dt < 10
    detail = (f"descriptors bitwise {'equal' if batched_ok and single_ok else 'DIFFER'} on 1000 shapes; "
              f"permuted block sums within {worst:.1e}; {dt:.1f} s")
    return record(2, "geometry invariance (< 10 s)", ok, detail)


# ---------------------------------------------------------------- 3


def criterion_cycle_identity() -> bool:
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    model = TrackerModel(partition_10(), TrackerConfig())
    bad = 0
    for _ in range(100):
        prev, cur = r.uniform(size=(2, 64, 64))
        start = r.uniform(0, 63, size=(10, 2))
        fwd = track(cur, start, model, "forward")
        back = track(prev, fwd, model, "backward")
        bad += not (np.array_equal(back.value, start) and cycle_loss(back, start).item() == 0.0)
    dt = time.perf_counter() - t0
    return record(3, "cycle identity of a zero-initialised tracker (< 10 s)", bad == 0 and dt < 10,
                  f"{100 - bad}/100 pairs return exactly with zero loss; {dt:.1f} s")


# ---------------------------------------------------------------- 4


def criterion_branch_table() -> bool:
    base, prev, cur, det, trk = scripted_pair()
    mismatches = 0
    for L_det, L_tck, T in random_dyadic_triples(100, seed=4):
        trk.L_det, trk.L_tck = L_det, L_tck
        out = distill_frame(prev, cur, det, trk, trk.partition, T)
        dest, source = branch_table(L_det, L_tck, T)
        want = {"detection": out.p_det, "tracked": out.p_tck, None: None}[source]
        ann_ok = (want is None) == (out.annotation is None) and \
            (want is None or np.array_equal(want, out.annotation))
        mismatches += (out.dest != dest) or (gate(L_det, L_tck, T) != dest) or not ann_ok
        mismatches += (out.L_det, out.L_tck) != (L_det, L_tck)
    return record(4, "routing matches an independent branch table", mismatches == 0,
                  f"{mismatches} mismatches over 100 scripted triples")


# ---------------------------------------------------------------- 5


def criterion_metric_oracles() -> bool:
    r = np.random.default_rng(0)
    part = partition_300w()
    worst = {"nrmse": 0.0, "ced": 0.0, "auc": 0.0}
    th = np.linspace(0.0, 0.1, 41)
    for _ in range(1000):
        gt = unit_template(68) * r.uniform(10, 80) + r.uniform(0, 200, size=2)
        pred = gt + r.normal(scale=r.uniform(0.1, 5), size=gt.shape)
        pt = [np.sqrt((pred[i, 0] - gt[i, 0]) ** 2 + (pred[i, 1] - gt[i, 1]) ** 2) for i in range(68)]
        re = gt[36:42].mean(axis=0)
        le = gt[42:48].mean(axis=0)
        oracle = (sum(pt) / 68) / np.sqrt(((re - le) ** 2).sum())
        worst["nrmse"] = max(worst["nrmse"], abs(normalized_rmse(pred, gt, part) - oracle))

        errors = r.exponential(r.uniform(0.005, 0.06), size=int(r.integers(1, 200)))
        counts = [sum(1 for e in errors if e <= t) / len(errors) for t in th]
        worst["ced"] = max(worst["ced"], float(np.max(np.abs(ced_curve(errors, th).fractions - counts))))
        for theta in (0.05, 0.08):
            # each sample contributes the span of [0, theta] on which it is already counted
            brute = 100.0 / theta * sum(max(theta - e, 0.0) for e in errors) / len(errors)
            worst["auc"] = max(worst["auc"], abs(auc(errors, theta) - brute))
    fixed = auc([0.02], 0.04) == 50.0 and auc([0.0] * 7, 0.05) == 100.0 and auc([0.0] * 7, 0.08) == 100.0
    ok = max(worst.values()) <= 1e-12 and fixed
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; fixed examples {'ok' if fixed else 'WRONG'}"
    return record(5, "metric oracles (1e-12 on 1000 sets)", ok, detail)


# ---------------------------------------------------------------- 6


def distillation_trial(seed: int) -> tuple[float, float, object]:
    train = synthetic_videos(20, seed)
    held = synthetic_videos(5, seed, offset=20)
    detector = OracleDetector(2.0, seed=seed)
    tracker = TrackerModel(partition_10(), TrackerConfig(seed=seed))
    result = run_rounds(train, detector, tracker, DistillConfig(lam=0.4, thresh=0.02, rounds=2, seed=seed),
                        heldout=held)
    m = result.metrics[-1]
    return m.heldout_tracker_nrmse, m.heldout_detector_nrmse, result


def criterion_distillation_gain() -> bool:
    t0 = time.perf_counter()
    wins, parts = 0, []
    for seed in range(5):
        trk, det, result = distillation_trial(seed)
        accepted = sum(m.n_det + m.n_tck for m in result.metrics)
        wins += trk <= 0.9 * det
        parts.append(f"s{seed} {trk:.3f}/{det:.3f} acc {accepted}")
    dt = time.perf_counter() - t0
    ok = wins >= 3 and dt <= 300
    detail = f"tracker/detector held-out nRMSE: {'; '.join(parts)}; {wins}/5 seeds >= 10% better; {dt:.0f} s"
    return record(6, "distillation gain at desk scale", ok, detail)


# ---------------------------------------------------------------- 7


def criterion_noise_monotonicity() -> bool:
    videos = synthetic_videos(20, seed=0)
    sigmas = (0.0, 1.0, 2.0, 4.0)
    good, parts = 0, []
    for seed in range(5):
        tracker = TrackerModel(partition_10(), TrackerConfig(seed=seed))
        rates = [distill_corpus(videos, OracleDetector(s, seed=seed), tracker, DistillConfig(seed=seed))
                 .acceptance_rate for s in sigmas]
        good += all(b <= a for a, b in zip(rates, rates[1:]))
        parts.append("/".join(f"{x:.3f}" for x in rates))
    return record(7, "acceptance rate non-increasing in detector noise", good >= 3,
                  f"rates at sigma 0/1/2/4 per seed: {'; '.join(parts)}; {good}/5 monotone")


# ---------------------------------------------------------------- 8


def _tree(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def criterion_determinism() -> bool:
    r = np.random.default_rng(0)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        trees = []
        for run in ("a", "b"):
            base = tmp / run
            rc = cli_main(["synth", "--seqs", "3", "--frames", "6", "--seed", "5", "--out", str(base / "corpus")])
            rc |= cli_main(["distill", "--corpus", str(base / "corpus"), "--noise", "0.5", "--rounds", "2",
                            "--tracker-epochs", "1", "--holdout", "1", "--out", str(base / "run")])
            if rc:
                return record(8, "determinism and round-trips", False, f"CLI exited with {rc}")
            trees.append(_tree(base))
        same = trees[0] == trees[1]
        has_all = all(any(k.endswith(sfx) for k in trees[0]) for sfx in ("manifest.json", "tracker.json", ".jsonl"))

        drift = 0.0
        for _ in range(1000):
            s = r.uniform(-1e3, 1e3, size=(int(r.integers(1, 69)), 2))
            write_pts(tmp / "s.pts", s)
            drift = max(drift, float(np.max(np.abs(read_pts(tmp / "s.pts") - s))))
        lossless = True
        for h, w in ((1, 1), (64, 64), (17, 31)):
            img = r.integers(0, 256, size=(h, w), dtype=np.uint8)
            write_pgm(tmp / "i.pgm", img)
            lossless &= np.array_equal(read_pgm(tmp / "i.pgm"), img)
    ok = same and has_all and drift < 1e-6 and lossless
    detail = (f"{len(trees[0])} output files {'byte-identical' if same else 'DIFFER'} across runs; "
              f"pts drift {drift:.1e}; PGM {'lossless' if lossless else 'LOSSY'}")
    return record(8, "determinism and round-trips", ok, detail)


CRITERIA = [criterion_gradients, criterion_geometry_invariance, criterion_cycle_identity, criterion_branch_table,
            criterion_metric_oracles, criterion_distillation_gain, criterion_noise_monotonicity,
            criterion_determinism]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i + 1}" for i in range(len(CRITERIA))])
def test_acceptance(criterion):
    assert criterion()


if __name__ == "__main__":
    results = [c() for c in CRITERIA]
    sys.exit(0 if all(results) else 1)
