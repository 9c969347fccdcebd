from __future__ import annotations

import numpy as np
import pytest

from strrn import nn
from strrn.data import SyntheticConfig, generate_sequence
from strrn.nn import CheckpointError
from strrn.tracker import TrackerConfig, TrackerModel, cycle_loss, track, track_sequence

SMALL = TrackerConfig(patch_size=5, k_A=4, k_G=4, hidden=8)


def randomized(partition, config=SMALL, seed=3):
    model = TrackerModel(partition, config)
    r = np.random.default_rng(seed)
    for name, t in model.store.items():
        if name.startswith("tracker.head"):
            t.value[...] = r.normal(scale=0.01, size=t.shape)
    return model


@pytest.fixture
def video():
    frames, gts = generate_sequence(SyntheticConfig(n_frames=4, seed=5))
    return frames, gts


def test_fresh_offset_tracker_is_identity(p10, video):
    frames, gts = video
    model = TrackerModel(p10, SMALL)
    out = track(frames[1], gts[0], model).value
    assert np.array_equal(out, gts[0])


def test_zero_head_cycle_returns_to_start(p10, video):
    frames, gts = video
    model = TrackerModel(p10)
    fwd = track(frames[1], gts[0], model, "forward")
    back = track(frames[0], fwd, model, "backward")
    assert np.array_equal(back.value, gts[0])
    assert cycle_loss(back, gts[0]).item() == 0.0


def test_forward_and_backward_share_weights(p10, video):
    frames, gts = video
    model = randomized(p10)
    a = track(frames[2], gts[1], model, "forward").value
    b = track(frames[2], gts[1], model, "backward").value
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, gts[1])


def test_bad_direction_and_landmark_count(p10, video):
    frames, gts = video
    model = TrackerModel(p10, SMALL)
    with pytest.raises(ValueError):
        track(frames[0], gts[0], model, "sideways")
    with pytest.raises(nn.ShapeError):
        track(frames[0], gts[0][:8], model)


def test_cycle_loss_examples(rng):
    a = rng.normal(size=(10, 2))
    assert cycle_loss(a, a).item() == 0.0
    b = a.copy()
    b[3, 1] += 2.0
    assert cycle_loss(b, a).item() == pytest.approx(4.0, abs=1e-12)
    c = rng.normal(size=(10, 2))
    assert cycle_loss(c, a).item() == nn.mse_loss(c, a).item()
    with pytest.raises(nn.ShapeError):
        cycle_loss(a[:9], a)


def test_track_sequence_zero_head_and_single_frame(p10, video):
    frames, gts = video
    model = TrackerModel(p10, SMALL)
    out = track_sequence(list(frames), gts[0], model, "backward")
    assert all(np.array_equal(o, gts[0]) for o in out)
    one = track_sequence(list(frames[:1]), gts[0], randomized(p10))
    assert len(one) == 1
    with pytest.raises(ValueError):
        track_sequence([], gts[0], model)


def test_track_sequence_matches_unrolled(p10, video):
    frames, gts = video
    model = randomized(p10)
    fwd = track_sequence(list(frames[:3]), gts[0], model, "forward")
    p = gts[0]
    for t in range(3):
        p = track(frames[t], p, model).value
        assert np.array_equal(fwd[t], p)
    back, steps = track_sequence(list(frames[:3]), gts[0], model, "backward", return_steps=True)
    p = gts[0]
    for t in (2, 1, 0):
        p = track(frames[t], p, model).value
        assert np.array_equal(back[t], p)
    assert [s.t for s in steps] == [2, 1, 0]


def test_conv_head_predicts(p10, video):
    frames, gts = video
    model = TrackerModel(p10, TrackerConfig(patch_size=5, k_A=8, k_G=4, head="conv"))
    assert np.array_equal(model.predict(frames[0], gts[0]).value, gts[0])


def test_absolute_mode_starts_at_bias(p10, video):
    frames, gts = video
    model = TrackerModel(p10, TrackerConfig(patch_size=5, k_A=4, k_G=4, mode="absolute"))
    assert np.array_equal(model.predict(frames[0], gts[0]).value, np.zeros((10, 2)))


def test_batched_predict_matches_single(p10, video):
    frames, gts = video
    model = randomized(p10)
    batch = model.predict(frames[:3], gts[:3]).value
    for b in range(3):
        assert np.allclose(batch[b], model.predict(frames[b], gts[b]).value, rtol=0, atol=1e-12)


def test_checkpoint_round_trip(tmp_path, p10, video):
    frames, gts = video
    model = randomized(p10)
    model.save(tmp_path / "t.json")
    loaded = TrackerModel.load(tmp_path / "t.json")
    assert loaded.config == model.config and loaded.partition == model.partition
    assert np.array_equal(loaded.predict(frames[1], gts[0]).value, model.predict(frames[1], gts[0]).value)
    nn.save_checkpoint(tmp_path / "other.json", model.store, {"kind": "detector"})
    with pytest.raises(CheckpointError):
        TrackerModel.load(tmp_path / "other.json")


def test_config_validation():
    with pytest.raises(ValueError):
        TrackerConfig(patch_size=4)
    with pytest.raises(ValueError):
        TrackerConfig(head="lstm")
    with pytest.raises(ValueError):
        TrackerConfig(k_A=0)


def test_cycle_gradient_through_two_tracks(p10, video):
    frames, gts = video
    model = randomized(p10, seed=8)
    start = gts[0] + 0.3

    def fn():
        return cycle_loss(track(frames[0], track(frames[1], start, model), model, "backward"), start)

    assert nn.grad_check(fn, model.store, max_entries=6) < 1e-4


def test_static_sequence_is_a_fixed_map_replay(p10, video):
    frames, gts = video
    model = randomized(p10)
    still = [frames[0]] * 4
    out = track_sequence(still, gts[0], model)
    for t in range(1, 4):
        assert np.array_equal(out[t], track(frames[0], out[t - 1], model).value)
