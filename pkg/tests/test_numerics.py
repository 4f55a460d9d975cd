import numpy as np
import pytest

from cpat.numerics import (
    RngStream,
    categorical_rows,
    categorical_sample,
    check_prob_vector,
    dirichlet_row,
    gaussian_vector,
    grad_check,
    log_softmax,
    rng_new,
    rng_split,
    softmax,
)


class TestRngStream:
    def test_same_seed_same_stream(self):
        a = gaussian_vector(rng_new(7), 100)
        b = gaussian_vector(rng_new(7), 100)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        a = gaussian_vector(rng_new(7), 100)
        b = gaussian_vector(rng_new(8), 100)
        assert not np.array_equal(a, b)

    def test_zero_seed_valid(self):
        x = gaussian_vector(rng_new(0), 10)
        assert np.all(np.isfinite(x))

    def test_split_deterministic(self):
        root = rng_new(3)
        a = gaussian_vector(rng_split(root, "data"), 100)
        b = gaussian_vector(rng_split(root, "data"), 100)
        assert np.array_equal(a, b)

    def test_split_labels_distinguish(self):
        root = rng_new(3)
        a = gaussian_vector(rng_split(root, "data"), 100)
        b = gaussian_vector(rng_split(root, "train"), 100)
        assert not np.array_equal(a, b)

    def test_split_lineage(self):
        root = rng_new(3)
        child = rng_split(rng_split(root, "a"), "b")
        assert child.lineage == ("a", "b")

    def test_split_does_not_consume_parent(self):
        root = rng_new(3)
        before = gaussian_vector(rng_new(3).split("x"), 10)
        root.normal(1000)  # consume parent state
        after = gaussian_vector(root.split("x"), 10)
        assert np.array_equal(before, after)

    def test_empty_label_rejected(self):
        with pytest.raises(ValueError):
            rng_split(rng_new(1), "")

    def test_non_integer_seed_rejected(self):
        with pytest.raises(TypeError):
            RngStream("7")  # type: ignore[arg-type]


class TestGaussian:
    def test_length(self):
        assert gaussian_vector(rng_new(1), 8).shape == (8,)

    def test_zero_length_rejected(self):
        with pytest.raises(ValueError):
            gaussian_vector(rng_new(1), 0)

    def test_moments(self):
        n = 1_000_000
        x = gaussian_vector(rng_new(5).split("moments"), n)
        assert abs(x.mean()) < 4 / np.sqrt(n)
        assert abs(x.var() - 1.0) < 0.01


class TestDirichlet:
    def test_simplex(self):
        p = dirichlet_row(rng_new(2).split("d"), 0.5, 50)
        assert abs(p.sum() - 1.0) <= 1e-12
        assert p.min() >= 0

    def test_mean_uniform(self):
        # coordinate means of Dirichlet(0.5) on 50 cells are 1/50
        rng = rng_new(9).split("mean")
        n, m = 100_000, 50
        total = np.zeros(m)
        for _ in range(n):
            total += dirichlet_row(rng, 0.5, m)
        mean = total / n
        # per-coordinate variance of Dirichlet(0.5, m=50): p(1-p)/(a0+1) with a0=25
        se = np.sqrt((1 / m) * (1 - 1 / m) / 26 / n)
        assert np.all(np.abs(mean - 1 / m) < 3 * se + 1e-4)

    def test_low_concentration_sparser(self):
        rng = rng_new(4).split("sparse")
        n, m = 10_000, 20
        max_half = np.mean([dirichlet_row(rng, 0.5, m).max() for _ in range(n)])
        max_ten = np.mean([dirichlet_row(rng, 10.0, m).max() for _ in range(n)])
        assert max_half > max_ten

    def test_bad_concentration(self):
        with pytest.raises(ValueError):
            dirichlet_row(rng_new(1), 0.0, 5)
        with pytest.raises(ValueError):
            dirichlet_row(rng_new(1), -1.0, 5)

    def test_small_m_rejected(self):
        with pytest.raises(ValueError):
            dirichlet_row(rng_new(1), 0.5, 1)


class TestCategorical:
    def test_one_hot(self):
        probs = np.zeros(7)
        probs[4] = 1.0
        s = rng_new(3).split("cat")
        assert all(categorical_sample(s, probs) == 4 for _ in range(50))

    def test_uniform_frequencies(self):
        probs = np.full(4, 0.25)
        s = rng_new(6).split("cat")
        n = 100_000
        counts = np.bincount([categorical_sample(s, probs) for _ in range(n)], minlength=4)
        se = np.sqrt(0.25 * 0.75 / n)
        assert np.all(np.abs(counts / n - 0.25) < 3 * se)

    def test_biased_frequencies(self):
        probs = np.array([0.9, 0.1])
        s = rng_new(8).split("cat")
        n = 100_000
        freq0 = np.mean([categorical_sample(s, probs) == 0 for _ in range(n)])
        se = np.sqrt(0.9 * 0.1 / n)
        assert abs(freq0 - 0.9) < 3 * se

    def test_row_sampler_matches_scalar(self):
        probs = np.array([[0.2, 0.3, 0.5], [0.7, 0.2, 0.1]])
        idx = categorical_rows(probs, np.array([0.19, 0.95]))
        assert idx.tolist() == [0, 2]

    def test_invalid_probs_rejected(self):
        with pytest.raises(ValueError):
            categorical_sample(rng_new(1), np.array([0.5, 0.6]))


class TestSoftmax:
    def test_symmetric(self):
        assert np.allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_constant_vector_uniform(self):
        for c in (-3.0, 0.0, 11.5):
            p = softmax(np.full(4, c))
            assert np.allclose(p, 0.25)

    def test_shift_invariance(self):
        z = np.array([0.3, -1.2, 2.0, 0.0])
        assert np.max(np.abs(softmax(z) - softmax(z + 123.0))) < 1e-12

    def test_extreme_logits(self):
        p = softmax(np.array([1000.0, 0.0]))
        assert np.isfinite(p).all()
        assert abs(p[0] - 1.0) < 1e-12
        # reference: p[1] = exp(-1000) which underflows to 0 in double precision
        assert p[1] == 0.0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            softmax(np.array([np.nan, 0.0]))
        with pytest.raises(ValueError):
            softmax(np.array([np.inf, 0.0]))

    def test_log_softmax_matches(self):
        z = np.array([0.1, 2.0, -3.0])
        assert np.allclose(log_softmax(z), np.log(softmax(z)), atol=1e-12)

    def test_output_is_prob_vector(self):
        check_prob_vector(softmax(np.array([5.0, -2.0, 0.1, 0.1])))


class TestGradCheck:
    def test_quadratic(self):
        f = lambda x: (0.5 * float(x @ x), x)
        err = grad_check(f, np.array([0.3, -1.1, 2.2]), 1e-5)
        assert err <= 1e-8

    def test_constant_function(self):
        f = lambda x: (3.0, np.zeros_like(x))
        err = grad_check(f, np.array([1.0, -2.0]), 1e-4)
        assert err <= 1e-10

    def test_detects_wrong_gradient(self):
        f = lambda x: (0.5 * float(x @ x), 2.0 * x)  # gradient off by 2x
        err = grad_check(f, np.array([1.0, 3.0]), 1e-5)
        assert err > 0.1

    def test_eps_bounds(self):
        f = lambda x: (float(x.sum()), np.ones_like(x))
        with pytest.raises(ValueError):
            grad_check(f, np.array([1.0]), 1e-2)
        with pytest.raises(ValueError):
            grad_check(f, np.array([1.0]), 1e-8)

    def test_non_finite_rejected(self):
        f = lambda x: (float("nan"), np.ones_like(x))
        with pytest.raises(FloatingPointError):
            grad_check(f, np.array([1.0]), 1e-5)
