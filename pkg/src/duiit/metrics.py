"""Quantitative evaluation: test MSE, inception score, and Fréchet distance
between feature distributions, with a pluggable feature extractor.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn


class MetricError(ValueError):
    """Raised for malformed metric inputs."""


def mse(preds, labels) -> float:
    """Mean squared error between two equally sized score vectors."""
    preds = np.asarray(preds, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if preds.size == 0:
        raise MetricError("empty inputs")
    if preds.size != labels.size:
        raise MetricError(f"length mismatch: {preds.size} vs {labels.size}")
    return float(np.mean((preds - labels) ** 2))


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------


class FeatureExtractor:
    """Maps an NCHW image batch to (logits over K classes, feature vectors).

    Implementations must be deterministic. ``name`` tags metric output so
    reported FID/IS values are comparable only within one extractor.
    """

    name: str = "base"
    n_classes: int = 0
    feature_dim: int = 0

    def __call__(self, images: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


class TinyFeatureExtractor(FeatureExtractor):
    """Fixed-seed random conv net for desk-scale, fully offline evaluation."""

    def __init__(self, channels: int = 1, n_classes: int = 8, feature_dim: int = 16, seed: int = 1234):
        self.name = f"tiny-{n_classes}c{feature_dim}d-seed{seed}"
        self.n_classes = n_classes
        self.feature_dim = feature_dim
        gen = torch.Generator().manual_seed(seed)
        self._trunk = nn.Sequential(
            nn.Conv2d(channels, 8, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, feature_dim, 3, stride=2, padding=1),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self._logit_head = nn.Linear(feature_dim, n_classes)
        with torch.no_grad():
            for module in (self._trunk, self._logit_head):
                for p in module.parameters():
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.5)
        self._trunk.eval()
        self._logit_head.eval()

    def __call__(self, images: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
        logits_parts, feat_parts = [], []
        with torch.no_grad():
            for start in range(0, images.shape[0], 256):
                feats = self._trunk(images[start:start + 256].float())
                logits_parts.append(self._logit_head(feats).double().numpy())
                feat_parts.append(feats.double().numpy())
        return np.concatenate(logits_parts), np.concatenate(feat_parts)


class TorchvisionExtractor(FeatureExtractor):
    """Wraps a torchvision classifier as the full-scale feature extractor.

    ``weights="DEFAULT"`` downloads pretrained weights (needs network access);
    ``weights=None`` gives a seeded random backbone that still works offline.
    Grayscale inputs are repeated to three channels; images are resized to the
    classifier's expected input size.
    """

    def __init__(self, model_name: str = "inception_v3", weights: str | None = None, seed: int = 0):
        import torchvision.models as tvm

        torch.manual_seed(seed)
        factory = getattr(tvm, model_name)
        kwargs = {"weights": weights}
        if model_name == "inception_v3":
            kwargs["aux_logits"] = True
            kwargs["init_weights"] = weights is None
        self._model = factory(**kwargs)
        self._model.eval()
        self._input_size = 299 if model_name == "inception_v3" else 224
        self.name = f"{model_name}-{'pretrained' if weights else f'random-seed{seed}'}"
        self.n_classes = 1000
        self._features: torch.Tensor | None = None
        # capture pooled features just before the classification head
        head = self._model.fc if hasattr(self._model, "fc") else self._model.classifier
        self.feature_dim = head.in_features if isinstance(head, nn.Linear) else 0

        def hook(_module, inputs, _output):
            self._features = inputs[0].detach()

        head.register_forward_hook(hook)

    def __call__(self, images: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
        logits_parts, feat_parts = [], []
        with torch.no_grad():
            for start in range(0, images.shape[0], 32):
                batch = images[start:start + 32].float()
                if batch.shape[1] == 1:
                    batch = batch.repeat(1, 3, 1, 1)
                batch = torch.nn.functional.interpolate(
                    batch, size=(self._input_size, self._input_size), mode="bilinear", align_corners=False
                )
                logits = self._model(batch)
                if isinstance(logits, tuple):
                    logits = logits[0]
                logits_parts.append(logits.double().numpy())
                feat_parts.append(self._features.double().numpy())
        return np.concatenate(logits_parts), np.concatenate(feat_parts)


# ---------------------------------------------------------------------------
# Inception score
# ---------------------------------------------------------------------------


def inception_score_from_probs(probs: np.ndarray, n_splits: int) -> tuple[float, float]:
    """Score precomputed class conditionals; ``probs`` is (N, K) row-stochastic."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise MetricError("need a nonempty (N, K) probability matrix")
    if n_splits < 1 or probs.shape[0] < n_splits:
        raise MetricError(f"cannot take {n_splits} splits of {probs.shape[0]} samples")
    scores = []
    for chunk in np.array_split(probs, n_splits):
        marginal = chunk.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(chunk > 0, chunk * (np.log(chunk) - np.log(marginal)), 0.0)
        scores.append(np.exp(kl.sum(axis=1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score(images: torch.Tensor, fx: FeatureExtractor, n_splits: int = 10) -> tuple[float, float]:
    """Exp of the mean KL between per-image class conditionals and their
    split marginal; returns (mean, std) over ``n_splits`` splits. Lives in
    [1, K]."""
    if images.shape[0] == 0:
        raise MetricError("empty image set")
    logits, _ = fx(images)
    logits = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    return inception_score_from_probs(probs, n_splits)


# ---------------------------------------------------------------------------
# Fréchet distance
# ---------------------------------------------------------------------------


def matrix_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray, sym_tol: float = 1e-8) -> float:
    """Tr((Sa Sb)^(1/2)) for symmetric PSD matrices.

    Computed through the symmetrized product Sa^(1/2) Sb Sa^(1/2); eigenvalues
    are clamped at zero before the square roots.
    """
    cov_a = np.asarray(cov_a, dtype=np.float64)
    cov_b = np.asarray(cov_b, dtype=np.float64)
    for name, mat in (("first", cov_a), ("second", cov_b)):
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise MetricError(f"{name} matrix is not square")
        asym = np.abs(mat - mat.T).max()
        if asym > sym_tol * max(1.0, np.abs(mat).max()):
            raise MetricError(f"{name} matrix is not symmetric (max asymmetry {asym:.3g})")
    evals_a, evecs_a = np.linalg.eigh((cov_a + cov_a.T) / 2.0)
    root_a = (evecs_a * np.sqrt(np.clip(evals_a, 0.0, None))) @ evecs_a.T
    inner = root_a @ cov_b @ root_a
    evals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    return float(np.sqrt(np.clip(evals, 0.0, None)).sum())


def fid_from_features(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    for name, f in (("first", feats_a), ("second", feats_b)):
        if f.ndim != 2 or f.shape[0] < 2:
            raise MetricError(f"{name} set too small for covariance estimation (need >= 2 samples)")
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    cov_a = np.cov(feats_a, rowvar=False, ddof=1)
    cov_b = np.cov(feats_b, rowvar=False, ddof=1)
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    delta = mu_a - mu_b
    return float(delta @ delta + np.trace(cov_a) + np.trace(cov_b) - 2.0 * matrix_sqrt_product(cov_a, cov_b))


def fid(images_a: torch.Tensor, images_b: torch.Tensor, fx: FeatureExtractor) -> float:
    """Fréchet distance between the Gaussian feature fits of two image sets.

    Nonnegative up to numerical noise and symmetric in its arguments. Sample
    counts well above the feature dimension are recommended.
    """
    _, feats_a = fx(images_a)
    _, feats_b = fx(images_b)
    return fid_from_features(feats_a, feats_b)
