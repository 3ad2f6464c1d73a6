"""
Tests for the seed-addressable feature streams and exact kernels
"""
import numpy as np
import pytest
from scipy.spatial.distance import pdist

from dsgd.analysis import random_pairs
from dsgd.feature_streams import (
    STREAM_FEATURES,
    SHIFT_INVARIANT,
    STREAM_PAIRED_FEATURES,
    BlockCache,
    KernelSpec,
    block_scores,
    cauchy_peak,
    derive_stream,
    exact_kernel,
    featurize,
    featurize_stack,
    kernel_diagonal,
    kernel_matrix,
    median_heuristic,
    sample_block,
    tensor_sketch,
)


def _max_error(spec, r, d=4, n_pairs=50, low=-1.0, seed=0):
    X, Y = random_pairs(n_pairs, d, seed, low=low)
    block = sample_block(spec, d, r, seed, 0)
    estimate = np.sum(featurize(block, spec, X) * featurize(block, spec, Y), axis=1)
    return float(np.max(np.abs(estimate - np.diag(kernel_matrix(spec, X, Y)))))


def test_block_regenerates_bit_identically():
    spec = KernelSpec("gaussian", bandwidth=0.7)
    first = sample_block(spec, 5, 32, 42, 17)
    second = sample_block(spec, 5, 32, 42, 17)
    assert first.same_parameters(second)


def test_blocks_and_tags_give_different_streams():
    spec = KernelSpec("gaussian")
    base = sample_block(spec, 3, 8, 7, 0)
    assert not base.same_parameters(sample_block(spec, 3, 8, 7, 1))
    other_tag = sample_block(spec, 3, 8, 7, 0, STREAM_PAIRED_FEATURES)
    assert not np.array_equal(base.frequencies, other_tag.frequencies)


def test_stream_rejects_negative_index():
    with pytest.raises(ValueError):
        derive_stream(0, -1)


def test_block_parameters_are_read_only():
    block = sample_block(KernelSpec("laplacian"), 2, 4, 0, 0)
    with pytest.raises(ValueError):
        block.frequencies[0, 0] = 1.0


def test_kernel_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec("matern")
    with pytest.raises(ValueError):
        KernelSpec("gaussian", bandwidth=0.0)
    with pytest.raises(ValueError):
        KernelSpec("arc_cosine", order=2)


def test_linear_map_needs_r_equal_d():
    with pytest.raises(ValueError):
        sample_block(KernelSpec("linear"), 3, 4, 0, 0)
    block = sample_block(KernelSpec("linear"), 3, 3, 0, 0)
    X = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(featurize(block, KernelSpec("linear"), X), X)


def test_polynomial_block_must_be_multiple_of_sketch_dim():
    with pytest.raises(ValueError):
        sample_block(KernelSpec("polynomial_sketch", sketch_dim=16), 3, 40, 0, 0)


def test_hellinger_rejects_negative_inputs():
    spec = KernelSpec("hellinger")
    block = sample_block(spec, 2, 8, 0, 0)
    with pytest.raises(ValueError):
        featurize(block, spec, np.array([[0.5, -0.1]]))


def test_dimension_mismatch_is_rejected():
    spec = KernelSpec("gaussian")
    block = sample_block(spec, 3, 8, 0, 0)
    with pytest.raises(ValueError):
        featurize(block, spec, np.zeros((2, 4)))


@pytest.mark.parametrize("family,order", [
    ("gaussian", 0),
    ("laplacian", 0),
    ("cauchy", 0),
    ("arc_cosine", 0),
    ("arc_cosine", 1),
])
def test_features_approximate_exact_kernel(family, order):
    spec = KernelSpec(family, order=order)
    peak = kernel_diagonal(spec, np.zeros((1, 4)))[0] if family in SHIFT_INVARIANT else 1.0
    assert _max_error(spec, 16384) <= 0.1 * peak


def test_cauchy_kernel_peaks_at_two_to_the_d():
    spec = KernelSpec("cauchy")
    assert exact_kernel(spec, np.zeros(2), np.zeros(2)) == pytest.approx(4.0)
    np.testing.assert_allclose(kernel_diagonal(spec, np.ones((3, 5))), 32.0)
    assert cauchy_peak(3) == 8.0
    with pytest.raises(ValueError):
        cauchy_peak(1001)


def test_hellinger_features_approximate_exact_kernel():
    assert _max_error(KernelSpec("hellinger"), 16384, low=0.0) <= 0.1


def test_gaussian_error_shrinks_with_r():
    spec = KernelSpec("gaussian")
    assert _max_error(spec, 8192) < _max_error(spec, 64)


def test_tensor_sketch_approximates_polynomial_kernel():
    spec = KernelSpec("polynomial_sketch", degree=2, bias=0.0, sketch_dim=64)
    assert _max_error(spec, 64 * 256, n_pairs=20) <= 0.25


def test_tensor_sketch_of_single_point_matches_batch():
    spec = KernelSpec("polynomial_sketch", degree=3, sketch_dim=8)
    block = sample_block(spec, 2, 16, 3, 0)
    x = np.array([0.4, -0.2])
    sketch = tensor_sketch(x, spec, block, sketch=1)
    batch = featurize(block, spec, x.reshape(1, -1))[0] * np.sqrt(block.n_sketches)
    np.testing.assert_allclose(sketch, batch[8:16], rtol=1e-12, atol=1e-15)


def test_exact_kernels_closed_forms():
    x, y = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert exact_kernel(KernelSpec("gaussian"), x, y) == pytest.approx(np.exp(-1.0))
    assert exact_kernel(KernelSpec("laplacian"), x, y) == pytest.approx(np.exp(-2.0))
    assert exact_kernel(KernelSpec("cauchy"), x, y) == pytest.approx(1.0)
    assert exact_kernel(KernelSpec("arc_cosine", order=0), x, y) == pytest.approx(0.5)
    assert exact_kernel(KernelSpec("arc_cosine", order=1), x, y) == pytest.approx(1.0 / np.pi)
    assert exact_kernel(KernelSpec("hellinger"), np.array([0.25, 0.0]), np.array([1.0, 4.0])) == pytest.approx(0.5)
    spec = KernelSpec("polynomial_sketch", degree=2, bias=1.0)
    assert exact_kernel(spec, np.array([1.0, 2.0]), np.array([3.0, 1.0])) == pytest.approx(36.0)


def test_featurize_stack_matches_blockwise_features():
    spec = KernelSpec("gaussian", bandwidth=2.0)
    cache = BlockCache(spec, 3, 8, 5)
    X = np.random.default_rng(0).normal(size=(4, 3))
    stacked = featurize_stack(cache.blocks(range(3)), spec, X)
    separate = np.hstack([featurize(cache.get(i), spec, X) for i in range(3)])
    np.testing.assert_allclose(stacked, separate, rtol=1e-12, atol=1e-14)


def test_block_scores_sums_coefficients_over_blocks():
    spec = KernelSpec("cauchy")
    cache = BlockCache(spec, 2, 4, 11, STREAM_FEATURES)
    rng = np.random.default_rng(1)
    coeffs = rng.normal(size=(5, 1, 4))
    X = rng.normal(size=(3, 2))
    expected = sum(featurize(cache.get(i), spec, X) @ coeffs[i, 0] for i in range(5))
    np.testing.assert_allclose(block_scores(cache, coeffs, X, chunk=2)[:, 0], expected, rtol=1e-12)


def test_median_heuristic_uses_all_pairs_when_budget_allows():
    X = np.array([[0.0], [1.0], [3.0]])
    assert median_heuristic(X, 10, derive_stream(0, 0)) == 2.0


def test_median_heuristic_sampled_pairs():
    X = np.random.default_rng(2).standard_normal((1000, 2))
    sampled = median_heuristic(X, 2 ** 12, derive_stream(0, 0))
    # distance of two standard normals in 2-D is sqrt(2) * chi_2, median sqrt(2 ln 4)
    assert sampled == pytest.approx(np.sqrt(2.0) * np.sqrt(2.0 * np.log(2.0)), rel=0.1)
    assert sampled == pytest.approx(float(np.median(pdist(X))), rel=0.1)


def test_median_heuristic_needs_two_points():
    with pytest.raises(ValueError):
        median_heuristic(np.zeros((1, 2)), 10, derive_stream(0, 0))


def test_stream_is_uniform_and_deterministic():
    first = derive_stream(3, 5, STREAM_FEATURES).uniform(size=100_000)
    second = derive_stream(3, 5, STREAM_FEATURES).uniform(size=100_000)
    assert np.array_equal(first, second)
    assert first.mean() == pytest.approx(0.5, abs=0.005)
    assert first.var() == pytest.approx(1.0 / 12.0, abs=0.002)


def test_gaussian_frequencies_have_identity_covariance():
    block = sample_block(KernelSpec("gaussian"), 3, 200_000, 0, 4)
    np.testing.assert_allclose(np.cov(block.frequencies, rowvar=False), np.eye(3), atol=0.02)
    assert np.all((block.offsets >= 0.0) & (block.offsets < 2.0 * np.pi))


def test_hellinger_rows_are_random_signs():
    signs = sample_block(KernelSpec("hellinger"), 6, 4096, 0, 2).sign_rows
    assert set(np.unique(signs)) == {-1.0, 1.0}
    assert abs(signs.mean()) < 0.05


@pytest.mark.parametrize("family", ["gaussian", "laplacian", "cauchy"])
def test_cosine_feature_products_are_bounded(family):
    spec = KernelSpec(family)
    d, r = 3, 256
    X, Y = random_pairs(40, d, 1, low=-3.0, high=3.0)
    block = sample_block(spec, d, r, 1, 0)
    per_feature = r * featurize(block, spec, X) * featurize(block, spec, Y)
    peak = kernel_diagonal(spec, X[:1])[0]
    assert np.max(np.abs(per_feature)) <= 2.0 * peak + 1e-12


def test_tensor_sketch_of_origin_is_zero():
    spec = KernelSpec("polynomial_sketch", degree=3, bias=0.0, sketch_dim=16)
    block = sample_block(spec, 4, 32, 0, 0)
    assert np.array_equal(tensor_sketch(np.zeros(4), spec, block), np.zeros(16))


def test_degree_one_sketch_is_unbiased_over_seeds():
    spec = KernelSpec("polynomial_sketch", degree=1, bias=0.0, sketch_dim=8)
    x, y = np.array([0.4, -0.2, 0.5]), np.array([0.1, 0.3, -0.6])
    estimates = []
    for seed in range(1000):
        block = sample_block(spec, 3, 8, seed, 0)
        estimates.append(tensor_sketch(x, spec, block) @ tensor_sketch(y, spec, block))
    assert np.mean(estimates) == pytest.approx(float(x @ y), abs=0.03)


@pytest.mark.parametrize("spec", [
    KernelSpec("gaussian"),
    KernelSpec("laplacian"),
    KernelSpec("cauchy"),
    KernelSpec("hellinger"),
    KernelSpec("arc_cosine", order=0),
    KernelSpec("arc_cosine", order=1),
    KernelSpec("polynomial_sketch", degree=3, bias=1.0),
    KernelSpec("linear"),
], ids=lambda s: f"{s.family}-{s.order}")
def test_gram_matrices_are_positive_semidefinite(spec):
    X = np.random.default_rng(5).uniform(0.0, 1.0, (40, 3))
    K = kernel_matrix(spec, X, X)
    np.testing.assert_allclose(K, K.T, atol=1e-12)
    assert np.linalg.eigvalsh(K).min() >= -1e-8
