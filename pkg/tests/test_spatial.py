from __future__ import annotations

import numpy as np
import pytest

from strrn import nn
from strrn.nn import ParamStore
from strrn.shape import ComponentPartition, enumerate_pairs, extract_patches, geometry_pair_descriptor, partition_300w
from strrn.spatial import (appearance_embed, feature_length, geometry_descriptors, geometry_embed, group_geometry,
                           init_spatial_weights, spatial_feature)


def make_weights(d=5, k_A=6, k_G=4, seed=0):
    return init_spatial_weights(ParamStore(), d, k_A, k_G, np.random.default_rng(seed))


def relu_dense(x, W, b):
    return np.maximum(W @ x + b, 0.0)


def test_appearance_zero_patch_zero_bias():
    w = make_weights()
    assert np.array_equal(appearance_embed(np.zeros((5, 5)), w).value, np.zeros(6))


def test_appearance_constant_bias(rng):
    w = make_weights()
    w.W_A.value[...] = 0.0
    w.b_A.value[...] = 0.25
    assert np.array_equal(appearance_embed(rng.uniform(size=(5, 5)), w).value, np.full(6, 0.25))


def test_appearance_matches_dense_relu(rng):
    w = make_weights()
    patch = rng.uniform(size=(5, 5))
    got = appearance_embed(patch, w).value
    want = nn.relu(nn.dense(patch.reshape(-1), w.W_A, w.b_A)).value
    assert np.array_equal(got, want)
    assert np.allclose(got, relu_dense(patch.reshape(-1), w.W_A.value, w.b_A.value), atol=1e-14)


def test_appearance_rejects_wrong_patch_size():
    with pytest.raises(nn.ShapeError):
        appearance_embed(np.zeros((3, 3)), make_weights())


def test_geometry_embed_examples(rng):
    w = make_weights()
    assert np.array_equal(geometry_embed(np.zeros(8), w).value, np.zeros(4))
    desc = rng.normal(size=8)
    assert np.array_equal(geometry_embed(desc, w).value, nn.relu(nn.dense(desc, w.W_G, w.b_G)).value)
    shape = rng.uniform(0, 30, size=(4, 2))
    a = geometry_embed(geometry_pair_descriptor(shape, 0, 1, 2), w).value
    b = geometry_embed(geometry_pair_descriptor(shape + [7.0, -3.0], 0, 1, 2), w).value
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_batched_descriptors_match_single(rng, p10):
    shape = rng.uniform(0, 60, size=(10, 2))
    batch = geometry_descriptors(shape, p10).value
    for k, (_, m, n) in enumerate(enumerate_pairs(p10)):
        assert np.array_equal(batch[k], geometry_pair_descriptor(shape, m, n, p10.root))


def test_group_with_one_pair_equals_its_embedding(rng, p10):
    w = make_weights()
    shape = rng.uniform(0, 60, size=(10, 2))
    blocks = group_geometry(shape, p10, w).value
    # right_eye holds exactly the pair (0, 1)
    want = geometry_embed(geometry_pair_descriptor(shape, 0, 1, p10.root), w).value
    assert np.allclose(blocks[0], want, rtol=0, atol=1e-14)


def test_three_landmark_group_hand_sum(rng):
    part = ComponentPartition(("right_eye", "left_eye", "nose"), ((0, 1, 2), (3, 4), (5, 6)), 6)
    w = make_weights()
    shape = rng.uniform(0, 60, size=(7, 2))
    e = [geometry_embed(geometry_pair_descriptor(shape, m, n, 6), w).value for m, n in [(0, 1), (0, 2), (1, 2)]]
    assert np.allclose(group_geometry(shape, part, w).value[0], e[0] + e[1] + e[2], rtol=0, atol=1e-12)


def test_group_sum_invariant_to_pair_order(rng, p10):
    w = make_weights()
    shape = rng.uniform(0, 60, size=(10, 2))
    pairs = enumerate_pairs(p10)
    blocks = group_geometry(shape, p10, w).value
    for perm in range(5):
        order = np.random.default_rng(perm).permutation(len(pairs))
        acc = np.zeros_like(blocks)
        for k in order:
            g, m, n = pairs[k]
            acc[g] += geometry_embed(geometry_pair_descriptor(shape, m, n, p10.root), w).value
        assert np.allclose(acc, blocks, rtol=1e-12, atol=1e-12)


def test_feature_length_300w():
    assert feature_length(partition_300w(), 32, 16) == 2288


def test_feature_layout_and_zero_weights(rng):
    part = partition_300w()
    w = init_spatial_weights(ParamStore(), 9, 32, 16, rng)
    frame = np.full((80, 80), 0.5)
    shape = rng.uniform(10, 70, size=(68, 2))
    f = spatial_feature(frame, shape, part, w)
    assert f.shape == (2288,)
    for t in (w.W_A, w.b_A, w.W_G, w.b_G):
        t.value[...] = 0.0
    assert np.array_equal(spatial_feature(frame, shape, part, w).value, np.zeros(2288))


def test_feature_matches_recomposition(rng, p10):
    w = make_weights(d=5)
    frame = rng.uniform(size=(40, 40))
    shape = rng.uniform(5, 35, size=(10, 2))
    f = spatial_feature(frame, shape, p10, w).value
    geo = group_geometry(shape, p10, w).value.reshape(-1)
    app = appearance_embed(extract_patches(frame, shape, 5), w).value.reshape(-1)
    assert np.array_equal(f, np.concatenate([geo, app]))


def test_batched_feature_matches_single(rng, p10):
    w = make_weights(d=5)
    frames = rng.uniform(size=(3, 40, 40))
    shapes = rng.uniform(5, 35, size=(3, 10, 2))
    batch = spatial_feature(frames, shapes, p10, w).value
    for b in range(3):
        assert np.allclose(batch[b], spatial_feature(frames[b], shapes[b], p10, w).value, rtol=0, atol=1e-13)
    with pytest.raises(nn.ShapeError):
        spatial_feature(frames[:2], shapes, p10, w)
