import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfcorr import kernels
from sfcorr.data.netpbm import load_label
from sfcorr.errors import ConfigError, ShapeError
from sfcorr.propagation import (FUSED_NETWORK, SINGLE_NETWORK, PropagationConfig, context_frames, decode_keypoints,
                                decode_segmentation, desk_config, dump_affinity_heatmap, keypoints_to_grid,
                                labels_to_grid, propagate_frame, propagate_video, restricted_affinity)


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_video(rng, t=4, g=5, c=6, n_classes=3):
    feats = rng.standard_normal((t, g, g, c))
    labels = rng.random((g, g, n_classes))
    return feats, labels / labels.sum(-1, keepdims=True)


def reference_frame(query, context, labels, radius, tau, k):
    """Dense loops: candidates sorted by (-affinity, frame, row, col)."""
    g = query.shape[0]
    q, ctx = unit(query), unit(context)
    out = np.zeros((g, g, labels.shape[-1]))
    for i in range(g):
        for j in range(g):
            cands = []
            for f in range(len(ctx)):
                for a in range(max(0, i - radius), min(g, i + radius + 1)):
                    for b in range(max(0, j - radius), min(g, j + radius + 1)):
                        cands.append((-math.exp(float(q[i, j] @ ctx[f, a, b]) / tau), f, a, b))
            top = sorted(cands)[:k]
            w = np.array([-c[0] for c in top])
            w /= w.sum()
            for wt, (_, f, a, b) in zip(w, top):
                out[i, j] += wt * labels[f, a, b]
    return out


# restricted affinity ---------------------------------------------------------------------

def test_neighbourhood_counts_on_4x4_radius_1():
    f = np.random.default_rng(0).standard_normal((4, 4, 3))
    counts = restricted_affinity(f, [f], 1, 0.07).counts.reshape(4, 4)
    np.testing.assert_array_equal(counts, [[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]])


def test_radius_zero_sees_colocated_cell_per_frame():
    f = np.random.default_rng(1).standard_normal((3, 4, 4, 3))
    aff = restricted_affinity(f[0], list(f), 0, 0.07)
    assert np.all(aff.counts == 3)
    vals, idx = aff.row(5)
    np.testing.assert_array_equal(idx, [5, 16 + 5, 32 + 5])


def test_large_radius_is_dense():
    f = np.random.default_rng(2).standard_normal((2, 4, 4, 3))
    aff = restricted_affinity(f[0], list(f), 10, 0.07)
    assert np.all(aff.counts == 2 * 16)


def test_affinity_values_are_exp_cos_over_tau():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((3, 3, 4)), rng.standard_normal((3, 3, 4))
    vals, idx = restricted_affinity(a, [b], 1, 0.5).row(4)
    ref = np.exp(unit(b).reshape(9, 4) @ unit(a)[1, 1] / 0.5)
    np.testing.assert_allclose(vals, ref[idx], rtol=1e-12)


def test_bad_temperature_and_grid_mismatch():
    f = np.ones((3, 3, 2))
    with pytest.raises(ConfigError):
        restricted_affinity(f, [f], 1, 0.0)
    with pytest.raises(ShapeError):
        restricted_affinity(f, [np.ones((4, 4, 2))], 1, 0.07)


# propagate_frame ----------------------------------------------------------------------------

def test_self_context_k1_copies_labels_exactly():
    rng = np.random.default_rng(4)
    f, lab = random_video(rng, t=1)
    for r in (0, 1, 3):
        out = propagate_frame(restricted_affinity(f[0], [f[0]], r, 0.07), lab[None], 1)
        assert np.array_equal(out, lab)


def test_uniform_affinities_k2_average_lowest_indices():
    f = np.ones((3, 3, 2))
    lab = np.arange(9.0).reshape(3, 3, 1)
    out = propagate_frame(restricted_affinity(f, [f], 1, 0.07), lab[None], 2)
    # cell (1, 1): window starts at (0, 0) and (0, 1)
    assert out[1, 1, 0] == pytest.approx((0 + 1) / 2)
    # cell (2, 2): window starts at (1, 1) and (1, 2)
    assert out[2, 2, 0] == pytest.approx((4 + 5) / 2)


def test_fewer_candidates_than_k_uses_all():
    f = np.ones((2, 2, 2))
    lab = np.arange(4.0).reshape(2, 2, 1)
    out = propagate_frame(restricted_affinity(f, [f], 0, 0.07), lab[None], 10)
    np.testing.assert_array_equal(out, lab)


def test_one_cell_translation_with_identity_features():
    g = 6
    ids = np.eye(g * g).reshape(g, g, g * g)
    shifted = np.zeros_like(ids)
    shifted[:, 1:] = ids[:, :-1]
    shifted[:, 0] = np.eye(g * g + 1)[-1, :g * g] + 1e-3  # unseen content entering on the left
    lab = np.random.default_rng(5).random((g, g, 4))
    lab /= lab.sum(-1, keepdims=True)
    out = propagate_frame(restricted_affinity(shifted, [ids], 1, 0.07), lab[None], 1)
    np.testing.assert_array_equal(out[:, 1:], lab[:, :-1])
    ref = reference_frame(shifted, ids[None], lab[None], 1, 0.07, 1)
    np.testing.assert_array_equal(out[:, 0], ref[:, 0])


@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(0, 4), st.sampled_from([0.07, 0.3, 1.0]))
@settings(max_examples=60, deadline=None)
def test_propagate_frame_matches_dense_reference(seed, k, radius, tau):
    rng = np.random.default_rng(seed)
    f, lab = random_video(rng, t=3, g=4)
    ctx_labels = np.stack([lab, np.roll(lab, 1, axis=0)])
    out = propagate_frame(restricted_affinity(f[2], [f[0], f[1]], radius, tau), ctx_labels, k)
    ref = reference_frame(f[2], f[:2], ctx_labels, radius, tau, k)
    np.testing.assert_allclose(out, ref, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(0, 4))
@settings(max_examples=60, deadline=None)
def test_numba_and_numpy_kernels_agree(seed, k, radius):
    rng = np.random.default_rng(seed)
    q = unit(rng.standard_normal((20, 5)))
    ctx = unit(rng.standard_normal((3, 20, 5)))
    vn, inn = kernels.restricted_affinity_np(q, ctx, 4, 5, radius, 1 / 0.07)
    vb, inb = kernels.restricted_affinity_nb(q, ctx, 4, 5, radius, 1 / 0.07)
    np.testing.assert_array_equal(inn, inb)
    np.testing.assert_allclose(vn, vb, rtol=1e-12)
    labels = rng.random((60, 3))
    np.testing.assert_allclose(kernels.topk_transfer_np(vn, inn, labels, k),
                               kernels.topk_transfer_nb(vn, inn, labels, k), atol=1e-14)


def test_kernels_break_ties_identically():
    vals = np.ones((1, 6))
    idx = np.array([[-1, 3, 1, -1, 0, 2]])
    labels = np.eye(4)
    a = kernels.topk_transfer_np(vals, idx, labels, 2)
    b = kernels.topk_transfer_nb(vals, idx, labels, 2)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, [[0, 0.5, 0, 0.5]])


# propagate_video ------------------------------------------------------------------------------

def test_context_frames():
    assert context_frames(1, 20) == [0]
    assert context_frames(5, 2) == [0, 3, 4]
    assert context_frames(30, 20) == [0] + list(range(10, 30))
    assert context_frames(3, 0) == [0]


def test_single_frame_video_returns_labels():
    rng = np.random.default_rng(6)
    f, lab = random_video(rng, t=1)
    out = propagate_video(list(f), lab)
    assert out.shape == (1,) + lab.shape and np.array_equal(out[0], lab)


def test_label_grid_mismatch():
    rng = np.random.default_rng(7)
    f, lab = random_video(rng, g=5)
    with pytest.raises(ShapeError):
        propagate_video(list(f), lab[:4, :4])


def _onehot_labels(rng, g, n_classes=3):
    return np.eye(n_classes)[rng.integers(0, n_classes, (g, g))]


@given(st.integers(0, 10_000), st.integers(0, 25), st.integers(0, 8), st.floats(0.01, 2.0))
@settings(max_examples=60, deadline=None)
def test_static_video_k1_reproduces_labels_bit_exactly(seed, m, radius, tau):
    rng = np.random.default_rng(seed)
    frame = rng.standard_normal((6, 6, 8))
    lab = rng.random((6, 6, 3))
    lab /= lab.sum(-1, keepdims=True)
    out = propagate_video([frame] * 5, lab, PropagationConfig(top_k=1, context_m=m, radius=radius, tau=tau))
    assert all(np.array_equal(o, lab) for o in out)


@given(st.integers(0, 10_000), st.integers(1, 20), st.integers(0, 25))
@settings(max_examples=60, deadline=None)
def test_static_video_radius_zero_bit_exact_for_any_k(seed, k, m):
    rng = np.random.default_rng(seed)
    frame = rng.standard_normal((5, 5, 8))
    lab = rng.random((5, 5, 3))
    lab /= lab.sum(-1, keepdims=True)
    out = propagate_video([frame] * 6, lab, PropagationConfig(top_k=k, context_m=m, radius=0))
    assert all(np.array_equal(o, lab) for o in out)


@given(st.integers(0, 10_000), st.integers(1, 15), st.integers(0, 6), st.integers(0, 6))
@settings(max_examples=60, deadline=None)
def test_simplex_preserved(seed, k, m, radius):
    rng = np.random.default_rng(seed)
    f, lab = random_video(rng, t=5)
    out = propagate_video(list(f), lab, PropagationConfig(top_k=k, context_m=m, radius=radius))
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_radius_zero_single_context_is_local_reweighting():
    rng = np.random.default_rng(8)
    f, lab = random_video(rng, t=2)
    lab = _onehot_labels(rng, 5)
    out = propagate_video(list(f), lab, PropagationConfig(top_k=5, context_m=0, radius=0))
    np.testing.assert_array_equal(out[1], lab)


def test_propagation_deterministic():
    rng = np.random.default_rng(9)
    f, lab = random_video(rng, t=6)
    a = propagate_video(list(f), lab, SINGLE_NETWORK)
    b = propagate_video(list(f), lab, SINGLE_NETWORK)
    assert np.array_equal(a, b)


def test_keypoint_channels_stay_distributions():
    rng = np.random.default_rng(10)
    f = rng.standard_normal((5, 6, 6, 4))
    kps = np.array([[5.0, 7.0], [40.0, 20.0]])
    out = propagate_video(list(f), keypoints_to_grid(kps, (6, 6), (48, 48)), desk_config(6), keypoints=True)
    np.testing.assert_allclose(out.sum(axis=(1, 2)), 1.0, atol=1e-9)


@given(st.integers(0, 10_000), st.floats(0.02, 2.0), st.floats(0.02, 2.0))
@settings(max_examples=40, deadline=None)
def test_keypoint_decoding_invariant_to_monotone_affinity_rescaling(seed, tau1, tau2):
    # with k=1 only the ordering of affinities matters, and any tau preserves it
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((4, 5, 5, 6))
    start = keypoints_to_grid(np.array([[3.0, 3.0], [17.0, 9.0], [8.0, 18.0]]), (5, 5), (20, 20))
    dec = [np.stack([decode_keypoints(s, (20, 20)) for s in
                     propagate_video(list(f), start, PropagationConfig(top_k=1, context_m=2, radius=2, tau=t),
                                     keypoints=True)])
           for t in (tau1, tau2)]
    np.testing.assert_array_equal(dec[0], dec[1])


# configs -------------------------------------------------------------------------------------

def test_committed_config_values():
    assert (SINGLE_NETWORK.top_k, SINGLE_NETWORK.context_m, SINGLE_NETWORK.radius) == (10, 20, 12)
    assert (FUSED_NETWORK.top_k, FUSED_NETWORK.radius, FUSED_NETWORK.lam) == (15, 15, 1.75)
    assert SINGLE_NETWORK.tau == 0.07


def test_desk_config_radius_scaling():
    assert desk_config(16).radius == 5
    assert desk_config(16, fused=True).radius == 6
    assert desk_config(8).radius == 3
    assert desk_config(16, top_k=3).top_k == 3


@pytest.mark.parametrize("bad", [dict(top_k=0), dict(radius=-1), dict(tau=0.0), dict(context_m=-1)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        PropagationConfig(**bad).validate()


# encoding / decoding -------------------------------------------------------------------------

def test_labels_to_grid_fractions():
    img = np.zeros((4, 4), dtype=np.uint8)
    img[:2, :2] = 1
    img[0, 2] = 2
    g = labels_to_grid(img, 3, (2, 2))
    np.testing.assert_allclose(g[0, 0], [0, 1, 0])
    np.testing.assert_allclose(g[0, 1], [0.75, 0, 0.25])
    np.testing.assert_allclose(g.sum(-1), 1)


def test_decode_segmentation_nearest_upsampling():
    g = np.zeros((2, 2, 2))
    g[..., 0] = 1
    g[1, 0] = [0.2, 0.8]
    out = decode_segmentation(g, (4, 6))
    assert out.shape == (4, 6)
    assert np.all(out[2:, :3] == 1) and out.sum() == 6


def test_keypoint_roundtrip_through_grid():
    kps = np.array([[2.0, 3.0], [13.0, 9.0]])
    dec = decode_keypoints(keypoints_to_grid(kps, (4, 4), (16, 16)), (16, 16))
    np.testing.assert_allclose(dec, [[2, 2], [14, 10]])


# heatmaps --------------------------------------------------------------------------------------

def test_heatmap_self_similarity_peaks_at_source(tmp_path):
    f = np.random.default_rng(11).standard_normal((2, 5, 7, 32))
    img = dump_affinity_heatmap(f, (2, 3), 0, tmp_path / "h.pgm")
    assert img.shape == (5, 7)
    assert np.unravel_index(np.argmax(img), img.shape) == (2, 3) and img[2, 3] == 255
    np.testing.assert_array_equal(load_label(tmp_path / "h.pgm"), img)


def test_heatmap_constant_map_is_mid_gray():
    f = np.ones((2, 3, 3, 4))
    assert np.all(dump_affinity_heatmap(f, (0, 0), 1) == 128)


def test_heatmap_bad_cell():
    with pytest.raises(IndexError):
        dump_affinity_heatmap(np.ones((1, 3, 3, 2)), (3, 0), 0)
