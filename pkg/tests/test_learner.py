"""Covariance reconstruction, whitened template learning, clustering, sizing."""

import numpy as np
import pytest

import whodet as wd
from whodet.bgstats import StatsAccumulator
from whodet.errors import CovarianceMemoryError, ValidationError
from whodet.pipeline import FeaturePipeline


def make_stats(radius, channels, fill=None, rng=None):
    """BackgroundStats with explicit or random autocorrelation matrices."""
    offsets = wd.stored_offsets(radius)
    corr = np.zeros((len(offsets), channels, channels))
    if fill is not None:
        for k, (u, v) in enumerate(offsets):
            corr[k] = fill(u, v)
    else:
        base = rng.normal(size=(channels, channels))
        corr[0] = base @ base.T + channels * np.eye(channels)
        for k in range(1, len(offsets)):
            corr[k] = rng.normal(scale=0.1, size=(channels, channels))
    mean = (rng.normal(size=channels) if rng is not None
            else np.zeros(channels))
    return wd.BackgroundStats(radius=radius, mean=mean, autocorr=corr,
                              cell_count=1000)


def separable_stats(radius, channels, rho_x=0.5, rho_y=0.3, seed=60):
    """Analytic stationary process: corr(u, v) = rho_x^|u| rho_y^|v| Sigma."""
    rng = np.random.default_rng(seed)
    root = rng.normal(size=(channels, channels))
    sigma = root @ root.T + channels * np.eye(channels)
    fill = lambda u, v: (rho_x ** abs(u)) * (rho_y ** abs(v)) * sigma
    stats = make_stats(radius, channels, fill=fill)
    return wd.BackgroundStats(radius=radius,
                              mean=rng.normal(scale=0.1, size=channels),
                              autocorr=stats.autocorr, cell_count=1000)


def brute_force_covariance(stats, m, n):
    channels = stats.channels
    side = m * n * channels
    cov = np.zeros((side, side))
    for a in range(m * n):
        for b in range(m * n):
            ia, ja = a % m, a // m
            ib, jb = b % m, b // m
            cov[a * channels:(a + 1) * channels,
                b * channels:(b + 1) * channels] = stats.gamma(ib - ia, jb - ja)
    return cov


class TestReconstructCovariance:
    def test_one_by_one_is_zero_offset_matrix(self):
        stats = make_stats(2, 3, rng=np.random.default_rng(61))
        cov = wd.reconstruct_covariance(stats, wd.ModelShape(1, 1, 3))
        np.testing.assert_array_equal(cov, stats.gamma(0, 0))

    def test_two_by_one_block_layout(self):
        stats = make_stats(2, 2, rng=np.random.default_rng(62))
        cov = wd.reconstruct_covariance(stats, wd.ModelShape(2, 1, 2))
        g00, g10 = stats.gamma(0, 0), stats.gamma(1, 0)
        np.testing.assert_array_equal(cov[:2, :2], g00)
        np.testing.assert_array_equal(cov[2:, 2:], g00)
        np.testing.assert_array_equal(cov[:2, 2:], g10)
        np.testing.assert_array_equal(cov[2:, :2], g10.T)

    def test_matches_brute_force_assembly(self):
        rng = np.random.default_rng(63)
        stats = make_stats(3, 4, rng=rng)
        for m, n in ((3, 2), (2, 3), (4, 4)):
            cov = wd.reconstruct_covariance(stats, wd.ModelShape(m, n, 4))
            assert np.array_equal(cov, brute_force_covariance(stats, m, n))

    def test_symmetric_and_blocks_bit_identical(self):
        rng = np.random.default_rng(64)
        stats = make_stats(3, 3, rng=rng)
        m, n, channels = 3, 3, 3
        cov = wd.reconstruct_covariance(stats, wd.ModelShape(m, n, channels))
        assert np.array_equal(cov, cov.T)
        blocks = {}
        for a in range(m * n):
            for b in range(m * n):
                key = (b % m - a % m, b // m - a // m)
                block = cov[a * channels:(a + 1) * channels,
                            b * channels:(b + 1) * channels]
                if key in blocks:
                    assert np.array_equal(block, blocks[key])
                else:
                    blocks[key] = block

    def test_radius_too_small_rejected(self):
        stats = make_stats(1, 2, rng=np.random.default_rng(65))
        with pytest.raises(ValidationError, match="radius"):
            wd.reconstruct_covariance(stats, wd.ModelShape(3, 1, 2))

    def test_memory_cap_refusal_names_estimate(self):
        stats = make_stats(2, 2, rng=np.random.default_rng(66))
        shape = wd.ModelShape(3, 3, 2)
        estimate = wd.estimate_covariance_bytes(shape)
        with pytest.raises(CovarianceMemoryError, match=str(estimate)):
            wd.reconstruct_covariance(stats, shape, max_bytes=estimate - 1)


class TestEstimateBytes:
    def test_large_model_exceeds_twenty_gigabytes(self):
        size = wd.estimate_covariance_bytes(wd.ModelShape(12, 12, 512))
        assert size == 21_743_271_936
        assert size > 20 * 2 ** 30

    def test_minimal_model(self):
        assert wd.estimate_covariance_bytes(wd.ModelShape(1, 1, 1)) == 4

    def test_hand_computed_value(self):
        assert wd.estimate_covariance_bytes(wd.ModelShape(5, 4, 32)) == 1_638_400


class TestLearnExemplarLda:
    def test_white_background_returns_centered_mean(self):
        stats = make_stats(2, 3, fill=lambda u, v: np.eye(3) if u == v == 0
                           else np.zeros((3, 3)))
        rng = np.random.default_rng(67)
        positives = [rng.normal(size=(2, 2, 3)) for _ in range(5)]
        comp, info = wd.learn_exemplar_lda(positives, stats, return_info=True)
        target = np.mean(positives, axis=0) - stats.mean
        np.testing.assert_allclose(comp.filter, target, atol=1e-5)
        assert comp.bias == 0.0
        assert info.escalations == 0

    def test_matches_dense_direct_solve(self):
        stats = separable_stats(4, 8)
        rng = np.random.default_rng(68)
        for m, n in ((2, 2), (5, 4), (3, 4)):
            positives = [rng.normal(size=(n, m, 8)) for _ in range(3)]
            comp, info = wd.learn_exemplar_lda(positives, stats, return_info=True)
            dense = brute_force_covariance(stats, m, n)
            dense[np.diag_indices_from(dense)] += info.regularizer
            rhs = (np.mean(positives, axis=0) - stats.mean).ravel()
            oracle = np.linalg.solve(dense, rhs)
            err = np.abs(comp.filter.ravel() - oracle).max() / np.abs(oracle).max()
            assert err < 1e-5

    def test_solve_residual_is_tiny(self):
        stats = separable_stats(3, 4)
        rng = np.random.default_rng(69)
        positives = [rng.normal(size=(3, 3, 4))]
        _, info = wd.learn_exemplar_lda(positives, stats, return_info=True)
        assert info.residual < 1e-6

    def test_indefinite_statistics_force_escalation(self):
        # gamma(1,0) = 1.5 I makes the two-cell covariance indefinite while
        # gamma(0,0) alone stays positive definite
        def fill(u, v):
            if (u, v) == (0, 0):
                return np.eye(2)
            if (u, v) in ((1, 0), (-1, 0)):
                return 1.5 * np.eye(2)
            return np.zeros((2, 2))
        stats = make_stats(1, 2, fill=fill)
        config = wd.LearnerConfig(initial_regularizer=1e-3)
        rng = np.random.default_rng(70)
        comp, info = wd.learn_exemplar_lda([rng.normal(size=(1, 2, 2))], stats,
                                           config, return_info=True)
        assert info.escalations >= 1
        assert info.regularizer > 0.5  # must clear the negative eigenvalue
        assert np.isfinite(comp.filter).all()

    def test_escalation_exhaustion_raises(self):
        def fill(u, v):
            if (u, v) == (0, 0):
                return np.eye(2)
            if (u, v) in ((1, 0), (-1, 0)):
                return 2.0 * np.eye(2)
            return np.zeros((2, 2))
        stats = make_stats(1, 2, fill=fill)
        config = wd.LearnerConfig(initial_regularizer=1e-12, max_escalations=2)
        with pytest.raises(wd.CholeskyError):
            wd.learn_exemplar_lda([np.ones((1, 2, 2))], stats, config)

    def test_feature_scaling_equivariance(self):
        # doubling the features (positives x2, mean x2, correlation x4)
        # halves the solution when no regularizer interferes
        stats = separable_stats(2, 3)
        rng = np.random.default_rng(71)
        positives = [rng.normal(size=(2, 3, 3)) for _ in range(2)]
        config = wd.LearnerConfig(initial_regularizer=0.0)
        base = wd.learn_exemplar_lda(positives, stats, config)
        scaled_stats = wd.BackgroundStats(radius=2, mean=2.0 * stats.mean,
                                          autocorr=4.0 * stats.autocorr,
                                          cell_count=stats.cell_count)
        scaled = wd.learn_exemplar_lda([2.0 * p for p in positives],
                                       scaled_stats, config)
        np.testing.assert_allclose(2.0 * scaled.filter, base.filter, rtol=1e-6)

    def test_shape_mismatch_rejected(self):
        stats = separable_stats(2, 3)
        with pytest.raises(ValidationError):
            wd.learn_exemplar_lda([np.zeros((2, 2, 3)), np.zeros((2, 3, 3))], stats)
        with pytest.raises(ValidationError):
            wd.learn_exemplar_lda([], stats)


class TestClusterSamples:
    def test_single_cluster_holds_everything(self):
        rng = np.random.default_rng(72)
        samples = [(1.0, rng.normal(size=4)) for _ in range(10)]
        labels = wd.cluster_samples(samples, 1, 1)
        assert labels.shape == (10, 2)
        assert np.all(labels == 0)

    def test_bimodal_aspects_split_exactly(self):
        rng = np.random.default_rng(73)
        samples = ([(0.5, rng.normal(size=3)) for _ in range(20)]
                   + [(2.0, rng.normal(size=3)) for _ in range(20)])
        labels = wd.cluster_samples(samples, 2, 1)
        first = labels[:20, 0]
        second = labels[20:, 0]
        assert len(set(first.tolist())) == 1
        assert len(set(second.tolist())) == 1
        assert first[0] != second[0]

    def test_two_by_three_setting_yields_at_most_six(self):
        rng = np.random.default_rng(74)
        samples = [(float(rng.choice([0.5, 2.0])), rng.normal(size=6))
                   for _ in range(60)]
        labels = wd.cluster_samples(samples, 2, 3)
        combos = {(int(a), int(f)) for a, f in labels}
        assert len(combos) <= 6
        assert labels[:, 0].max() < 2 and labels[:, 1].max() < 3

    def test_deterministic_and_permutation_covariant(self):
        rng = np.random.default_rng(75)
        samples = [(float(rng.uniform(0.5, 2.0)), rng.normal(size=5))
                   for _ in range(30)]
        base = wd.cluster_samples(samples, 2, 2, seed=3)
        again = wd.cluster_samples(samples, 2, 2, seed=3)
        assert np.array_equal(base, again)
        perm = rng.permutation(30)
        shuffled = wd.cluster_samples([samples[i] for i in perm], 2, 2, seed=3)
        assert np.array_equal(shuffled, base[perm])

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValidationError):
            wd.cluster_samples([(1.0, np.zeros(2))], 2, 1)


class TestChooseModelSize:
    def test_square_samples_with_eight_pixel_cells(self):
        boxes = [(80.0, 80.0)] * 5
        assert wd.choose_model_size(boxes, wd.CellGeometry(8, 8)) == (10, 10)

    def test_sixteen_pixel_cells_halve_each_dimension(self):
        boxes = [(80.0, 80.0)] * 5
        assert wd.choose_model_size(boxes, wd.CellGeometry(16, 16)) == (5, 5)

    def test_aspect_ratio_preserved(self):
        m, n = wd.choose_model_size([(100.0, 200.0)], wd.CellGeometry(8, 8))
        assert m < n
        assert n / m == pytest.approx(2.0)

    def test_clamped_by_statistics_radius(self):
        m, n = wd.choose_model_size([(400.0, 400.0)], wd.CellGeometry(8, 8),
                                    stats_radius=4)
        assert max(m, n) <= 5

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValidationError):
            wd.choose_model_size([(0.0, 10.0)], wd.CellGeometry(8, 8))


class TestExtractPositive:
    def test_native_size_crop_matches_direct_extraction(self):
        rng = np.random.default_rng(76)
        pattern = rng.uniform(0, 255, (32, 40, 3)).astype(np.uint8)
        image = np.zeros((100, 120, 3), dtype=np.uint8)
        image[10:42, 20:60] = pattern
        shape = wd.ModelShape(width=5, height=4, channels=32)
        tensor = wd.extract_positive(image, (20, 10, 40, 32), shape,
                                     FeaturePipeline())
        oracle = wd.extract_hog(pattern).data
        np.testing.assert_array_equal(tensor, oracle)

    def test_whole_image_at_model_size_needs_no_resampling(self):
        rng = np.random.default_rng(77)
        image = rng.uniform(0, 255, (32, 40, 3)).astype(np.uint8)
        shape = wd.ModelShape(width=5, height=4, channels=32)
        tensor = wd.extract_positive(image, (0, 0, 40, 32), shape,
                                     FeaturePipeline())
        np.testing.assert_array_equal(tensor, wd.extract_hog(image).data)

    def test_resized_crop_recovers_planted_pattern(self):
        rng = np.random.default_rng(78)
        pattern = rng.uniform(0, 255, (32, 40, 3)).astype(np.uint8)
        import cv2
        big = cv2.resize(pattern, (80, 64), interpolation=cv2.INTER_LINEAR)
        image = np.full((150, 150, 3), 127, dtype=np.uint8)
        image[20:84, 30:110] = big
        shape = wd.ModelShape(width=5, height=4, channels=32)
        tensor = wd.extract_positive(image, (30, 20, 80, 64), shape,
                                     FeaturePipeline())
        oracle = wd.extract_hog(pattern).data
        # resampling differences keep this approximate
        assert float(np.abs(tensor - oracle).mean()) < 0.05

    def test_degenerate_box_rejected(self):
        shape = wd.ModelShape(width=2, height=2, channels=32)
        with pytest.raises(ValidationError):
            wd.extract_positive(np.zeros((50, 50, 3), dtype=np.uint8),
                                (10, 10, 0, 12), shape, FeaturePipeline())

    def test_out_of_image_box_rejected(self):
        shape = wd.ModelShape(width=2, height=2, channels=32)
        with pytest.raises(ValidationError):
            wd.extract_positive(np.zeros((50, 50, 3), dtype=np.uint8),
                                (40, 10, 20, 12), shape, FeaturePipeline())
