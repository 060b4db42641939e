import numpy as np
import pytest
import torch

from duiit.metrics import (
    MetricError,
    TinyFeatureExtractor,
    fid,
    fid_from_features,
    inception_score,
    inception_score_from_probs,
    matrix_sqrt_product,
    mse,
)


class StubExtractor:
    """Feeds prescribed logits/features regardless of images."""

    name = "stub"

    def __init__(self, logits=None, features=None):
        self._logits = logits
        self._features = features
        self.n_classes = 0 if logits is None else logits.shape[1]
        self.feature_dim = 0 if features is None else features.shape[1]

    def __call__(self, images):
        n = images.shape[0]
        logits = self._logits[:n] if self._logits is not None else np.zeros((n, 2))
        feats = self._features[:n] if self._features is not None else np.zeros((n, 2))
        return logits, feats


# ---------------------------------------------------------------------------
# mse
# ---------------------------------------------------------------------------


def test_mse_examples():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([4.0, 5.0], [1.0, 2.0]) == 9.0
    assert mse([1.0, 0.0], [0.0, 2.0]) == 2.5


def test_mse_translation_invariance():
    rng = np.random.default_rng(0)
    p, l = rng.normal(size=20), rng.normal(size=20)
    assert mse(p + 3.7, l + 3.7) == pytest.approx(mse(p, l), rel=1e-12)


def test_mse_errors():
    with pytest.raises(MetricError):
        mse([], [])
    with pytest.raises(MetricError):
        mse([1.0], [1.0, 2.0])


# ---------------------------------------------------------------------------
# inception score
# ---------------------------------------------------------------------------


def test_is_identical_conditionals_is_one():
    probs = np.tile(np.array([[0.2, 0.5, 0.3]]), (30, 1))
    mean, std = inception_score_from_probs(probs, n_splits=3)
    assert mean == pytest.approx(1.0, abs=1e-9)
    assert std == pytest.approx(0.0, abs=1e-9)


def test_is_one_hot_conditionals_is_k():
    k = 6
    probs = np.tile(np.eye(k), (5, 1))  # 30 samples, uniform marginal
    mean, _ = inception_score_from_probs(probs, n_splits=1)
    assert mean == pytest.approx(k, abs=1e-9)


def test_is_range_and_permutation_invariance():
    rng = np.random.default_rng(1)
    raw = rng.random((40, 5))
    probs = raw / raw.sum(axis=1, keepdims=True)
    mean, _ = inception_score_from_probs(probs, n_splits=1)
    assert 1.0 - 1e-12 <= mean <= 5.0 + 1e-12
    perm = rng.permutation(40)
    mean_perm, _ = inception_score_from_probs(probs[perm], n_splits=1)
    assert mean_perm == pytest.approx(mean, rel=1e-12)


def test_is_through_extractor():
    logits = np.eye(4)[np.arange(32) % 4] * 50.0
    stub = StubExtractor(logits=logits)
    mean, _ = inception_score(torch.zeros(32, 1, 8, 8), stub, n_splits=1)
    assert mean == pytest.approx(4.0, rel=1e-6)


def test_is_errors():
    with pytest.raises(MetricError):
        inception_score_from_probs(np.ones((3, 2)) / 2, n_splits=4)
    with pytest.raises(MetricError):
        inception_score(torch.zeros(0, 1, 8, 8), StubExtractor(), n_splits=1)


# ---------------------------------------------------------------------------
# matrix sqrt trace term
# ---------------------------------------------------------------------------


def test_matrix_sqrt_identity():
    for d in (2, 4):
        assert matrix_sqrt_product(np.eye(d), np.eye(d)) == pytest.approx(d, abs=1e-12)


def test_matrix_sqrt_scaled_identity():
    assert matrix_sqrt_product(4.0 * np.eye(3), np.eye(3)) == pytest.approx(6.0, abs=1e-12)


def test_matrix_sqrt_rejects_asymmetric():
    bad = np.array([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(MetricError):
        matrix_sqrt_product(bad, np.eye(2))


def test_matrix_sqrt_matches_extended_precision_oracle():
    import mpmath

    mpmath.mp.dps = 50
    rng = np.random.default_rng(7)
    for d in (2, 3, 5):
        a_root = rng.normal(size=(d, d))
        b_root = rng.normal(size=(d, d))
        cov_a = a_root @ a_root.T
        cov_b = b_root @ b_root.T
        got = matrix_sqrt_product(cov_a, cov_b)

        def mp_sqrtm(mat):
            evals, evecs = mpmath.mp.eigsy(mpmath.matrix(mat.tolist()))
            root = mpmath.diag([mpmath.sqrt(max(v, mpmath.mpf(0))) for v in evals])
            return evecs * root * evecs.T

        root_a = mp_sqrtm(cov_a)
        inner = root_a * mpmath.matrix(cov_b.tolist()) * root_a
        inner = (inner + inner.T) / 2
        evals, _ = mpmath.mp.eigsy(inner)
        oracle = float(sum(mpmath.sqrt(max(v, mpmath.mpf(0))) for v in evals))
        assert got == pytest.approx(oracle, abs=1e-8)


# ---------------------------------------------------------------------------
# fid
# ---------------------------------------------------------------------------


def test_fid_identical_sets_is_zero():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(64, 6))
    assert abs(fid_from_features(feats, feats)) <= 1e-6


def test_fid_symmetry():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(50, 4))
    b = rng.normal(loc=0.3, size=(60, 4))
    assert fid_from_features(a, b) == pytest.approx(fid_from_features(b, a), abs=1e-9)


def test_fid_gaussian_closed_form():
    # mu_a=0, mu_b=e1, identical covariance -> FID exactly 1
    rng = np.random.default_rng(5)
    d = 4
    a = rng.normal(size=(10_000, d))
    b = rng.normal(size=(10_000, d))
    b[:, 0] += 1.0
    assert fid_from_features(a, b) == pytest.approx(1.0, rel=0.05)


def test_fid_small_set_rejected():
    with pytest.raises(MetricError):
        fid_from_features(np.zeros((1, 3)), np.zeros((5, 3)))


def test_fid_through_extractor_on_images():
    fx = TinyFeatureExtractor(channels=1)
    imgs = torch.rand(24, 1, 16, 16) * 2 - 1
    assert abs(fid(imgs, imgs.clone(), fx)) <= 1e-6
    other = torch.rand(24, 1, 16, 16) * 2 - 1
    val = fid(imgs, other, fx)
    assert np.isfinite(val)
    assert val >= -1e-9


def test_tiny_extractor_deterministic():
    fx_a = TinyFeatureExtractor(channels=1, seed=77)
    fx_b = TinyFeatureExtractor(channels=1, seed=77)
    imgs = torch.rand(4, 1, 16, 16)
    la, fa = fx_a(imgs)
    lb, fb = fx_b(imgs)
    assert np.array_equal(la, lb)
    assert np.array_equal(fa, fb)
    assert fx_a.name == fx_b.name
