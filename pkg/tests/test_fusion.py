import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfcorr.errors import ConfigError, ShapeError
from sfcorr.fusion import fuse_feature_maps, fused_affinity, l2norm, resize_bilinear


def rand_maps(seed, g=3, cs=4, cf=5):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((g, g, cs)), rng.standard_normal((g, g, cf))


def test_three_four_five_example():
    f = fuse_feature_maps(np.array([[[3.0, 4.0]]]), np.array([[[0.0, 5.0]]]), 2.0)
    np.testing.assert_allclose(f.data[0, 0], [0.6, 0.8, 0.0, 2.0], atol=1e-12)


def test_half_norms():
    fs, ff = rand_maps(0)
    ff[1, 1] = 0
    f = fuse_feature_maps(fs, ff, 1.75)
    np.testing.assert_allclose(np.linalg.norm(f.semantic, axis=-1), 1, atol=1e-6)
    nf = np.linalg.norm(f.fine, axis=-1)
    assert nf[1, 1] == 0
    nf[1, 1] = 1.75
    np.testing.assert_allclose(nf, 1.75, atol=1e-6)


def test_zero_lambda_depends_only_on_semantic():
    fs, ff = rand_maps(1)
    _, ff2 = rand_maps(2)
    a = fused_affinity(fuse_feature_maps(fs, ff, 0.0), fuse_feature_maps(fs, ff, 0.0))
    b = fused_affinity(fuse_feature_maps(fs, ff2, 0.0), fuse_feature_maps(fs, ff2, 0.0))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_identical_halves_similarity_one():
    fs, ff = rand_maps(3)
    f = fuse_feature_maps(fs, ff, 1.75)
    np.testing.assert_allclose(np.diag(fused_affinity(f, f)), 1, atol=1e-12)


def test_antipodal_fine_halves_cancel_at_lambda_one():
    fs = np.ones((1, 1, 3))
    q = fuse_feature_maps(fs, np.array([[[1.0, 2.0]]]), 1.0)
    c = fuse_feature_maps(fs, np.array([[[-1.0, -2.0]]]), 1.0)
    assert fused_affinity(q, c)[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_lambda_mismatch_rejected():
    fs, ff = rand_maps(4)
    with pytest.raises(ConfigError):
        fused_affinity(fuse_feature_maps(fs, ff, 1.0), fuse_feature_maps(fs, ff, 2.0))


def test_single_cell_query_shape():
    fs, ff = rand_maps(5, g=4)
    f = fuse_feature_maps(fs, ff, 1.0)
    row = fused_affinity(f, f, cell=(1, 2))
    assert row.shape == (4, 4)
    np.testing.assert_allclose(row.ravel(), fused_affinity(f, f)[1 * 4 + 2], atol=1e-12)


@given(st.integers(0, 10_000), st.floats(0.0, 10.0))
@settings(max_examples=100, deadline=None)
def test_convex_combination_identity(seed, lam):
    fs, ff = rand_maps(seed)
    fs2, ff2 = rand_maps(seed + 1)
    got = fused_affinity(fuse_feature_maps(fs, ff, lam), fuse_feature_maps(fs2, ff2, lam))
    sim_s = l2norm(fs).reshape(9, -1) @ l2norm(fs2).reshape(9, -1).T
    sim_f = l2norm(ff).reshape(9, -1) @ l2norm(ff2).reshape(9, -1).T
    np.testing.assert_allclose(got, (sim_s + lam ** 2 * sim_f) / (1 + lam ** 2), atol=1e-10)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_positive_scaling_invariance(seed):
    fs, ff = rand_maps(seed)
    rng = np.random.default_rng(seed)
    base = fused_affinity(fuse_feature_maps(fs, ff, 1.75), fuse_feature_maps(fs, ff, 1.75))
    cs, cf = rng.uniform(0.01, 100, fs.shape[:2] + (1,)), rng.uniform(0.01, 100, ff.shape[:2] + (1,))
    scaled = fuse_feature_maps(fs * cs, ff * cf, 1.75)
    np.testing.assert_allclose(fused_affinity(scaled, scaled), base, atol=1e-6)


@given(st.integers(0, 10_000), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
@settings(max_examples=100, deadline=None)
def test_monotone_in_lambda(seed, l1, l2):
    fs, ff = rand_maps(seed, g=1)
    fs2, ff2 = rand_maps(seed + 7, g=1)
    lo, hi = sorted((l1, l2))
    if hi - lo < 1e-3:
        return
    s = [fused_affinity(fuse_feature_maps(fs, ff, l), fuse_feature_maps(fs2, ff2, l))[0, 0] for l in (lo, hi)]
    sim_s = float(l2norm(fs).ravel() @ l2norm(fs2).ravel())
    sim_f = float(l2norm(ff).ravel() @ l2norm(ff2).ravel())
    if sim_f > sim_s:
        assert s[1] > s[0]
    elif sim_f < sim_s:
        assert s[1] < s[0]


def test_large_lambda_matches_fine_ordering():
    for seed in range(20):
        fs, ff = rand_maps(seed, g=4)
        fs2, ff2 = rand_maps(seed + 100, g=4)
        fused = fused_affinity(fuse_feature_maps(fs, ff, 1e6), fuse_feature_maps(fs2, ff2, 1e6))
        fine = l2norm(ff).reshape(16, -1) @ l2norm(ff2).reshape(16, -1).T
        np.testing.assert_array_equal(np.argsort(-fused, axis=1, kind="stable"),
                                      np.argsort(-fine, axis=1, kind="stable"))


def test_grid_mismatch_upsamples_coarser():
    fs = np.random.default_rng(0).standard_normal((2, 2, 3))
    ff = np.random.default_rng(1).standard_normal((4, 4, 5))
    f = fuse_feature_maps(fs, ff, 1.0)
    assert f.grid == (4, 4)
    np.testing.assert_allclose(np.linalg.norm(f.semantic, axis=-1), 1, atol=1e-6)


def test_bilinear_resize_constant_and_identity():
    c = np.full((3, 3, 2), 7.0)
    np.testing.assert_allclose(resize_bilinear(c, (6, 6)), 7.0)
    x = np.random.default_rng(0).standard_normal((3, 3, 2))
    assert resize_bilinear(x, (3, 3)) is x


def test_incompatible_leading_shapes_rejected():
    with pytest.raises(ShapeError):
        fuse_feature_maps(np.ones((2, 3, 3, 4)), np.ones((3, 3, 3, 4)), 1.0)
