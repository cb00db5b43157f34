"""scikit-learn style wrappers around the pipeline building blocks."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .allocator import LambdaMode, budget_from_fixed, instance_from_scores, solve_exact
from .data import Dataset, TrainConfig, train_model
from .lrp import contribution_scores, importance_scores
from .ptq import PTQOptions, build_quantized, collect_stats, uniform_bits
from .qsa import LossKind, SweepConfig, SweepContext, run_sweep
from .vit import LayerId, ModelConfig, ToyViT, layer_registry, predict_logits


def check_images(X, config: ModelConfig | None = None) -> np.ndarray:
    """Validate a batch of channels-last images; returns a float array."""
    X = check_array(X, allow_nd=True, dtype=(np.float64, np.float32), ensure_min_samples=1)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, height, width, channels), got {X.shape}")
    if config is not None:
        want = (config.image_height, config.image_width, config.channels)
        if X.shape[1:] != want:
            raise ValueError(f"expected image shape {want}, got {X.shape[1:]}")
    return X


def check_labels(y, n: int, classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0 or (classes is not None and y.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    return y.astype(np.int64)


def check_model(estimator) -> ToyViT:
    """Accept a fitted :class:`ToyViTClassifier` or a bare :class:`ToyViT`."""
    if isinstance(estimator, ToyViT):
        return estimator
    check_is_fitted(estimator, "model_")
    return estimator.model_


class ToyViTClassifier(ClassifierMixin, BaseEstimator):
    """Trains the toy transformer on channels-last images with labels ``0..C-1``."""

    def __init__(self, num_blocks=4, embed_dim=64, heads=4, mlp_dim=128, patch_size=4,
                 classes=10, epochs=3, batch_size=64, lr=3e-3, random_state=0):
        self.num_blocks = num_blocks
        self.embed_dim = embed_dim
        self.heads = heads
        self.mlp_dim = mlp_dim
        self.patch_size = patch_size
        self.classes = classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def _config(self, X) -> ModelConfig:
        return ModelConfig(num_blocks=self.num_blocks, embed_dim=self.embed_dim,
                           heads=self.heads, mlp_dim=self.mlp_dim, classes=self.classes,
                           patch_size=self.patch_size, image_height=X.shape[1],
                           image_width=X.shape[2], channels=X.shape[3],
                           seed=int(self.random_state))

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X), self.classes)
        cfg = self._config(X)
        train = TrainConfig(self.epochs, self.batch_size, self.lr, int(self.random_state))
        self.model_ = train_model(cfg, Dataset(X.astype(np.float32), y), train)
        self.classes_ = np.arange(self.classes)
        return self

    def decision_function(self, X):
        model = check_model(self)
        return predict_logits(model, check_images(X, model.config))

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)


class PTQQuantizer(ClassifierMixin, BaseEstimator):
    """Calibrates activation quantizers of a trained model on ``X``.

    ``bits`` is either one width for every layer or a mapping from layer
    names to widths (unlisted layers stay in full precision).
    """

    def __init__(self, estimator=None, bits=4, percentile=1.0, crl=True, clip_k=2.0,
                 softmax_base=float(np.sqrt(2.0)), gelu_base="adaptive"):
        self.estimator = estimator
        self.bits = bits
        self.percentile = percentile
        self.crl = crl
        self.clip_k = clip_k
        self.softmax_base = softmax_base
        self.gelu_base = gelu_base

    def options(self) -> PTQOptions:
        return PTQOptions(percentile=self.percentile, crl=self.crl, clip_k=self.clip_k,
                          softmax_base=self.softmax_base, gelu_base=self.gelu_base)

    def fit(self, X, y=None):
        model = check_model(self.estimator)
        X = check_images(X, model.config)
        if isinstance(self.bits, (int, np.integer)):
            bits = uniform_bits(model, int(self.bits))
        else:
            bits = {LayerId.parse(k) if isinstance(k, str) else k: int(v)
                    for k, v in self.bits.items()}
        self.stats_ = collect_stats(model, X)
        self.quantized_ = build_quantized(model, self.stats_, bits, self.options())
        self.classes_ = np.arange(model.config.classes)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "quantized_")
        q = self.quantized_
        return predict_logits(q.model, check_images(X, q.model.config), q.plan)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)


class LayerImportanceScorer(BaseEstimator):
    """Relevance-based importance of every quantizable layer."""

    def __init__(self, estimator=None, batch_size=64):
        self.estimator = estimator
        self.batch_size = batch_size

    def fit(self, X, y=None):
        model = check_model(self.estimator)
        X = check_images(X, model.config)
        classes = None if y is None else check_labels(y, len(X), model.config.classes)
        self.contributions_ = contribution_scores(model, X, classes, self.batch_size)
        self.importance_ = importance_scores(self.contributions_)
        return self

    def transform(self, X=None):
        """Importance scores as a vector in layer-registry order."""
        check_is_fitted(self, "importance_")
        model = check_model(self.estimator)
        return np.array([self.importance_[info.layer] for info in layer_registry(model)])


class SensitivityAnalyzer(BaseEstimator):
    """Per-(kind, bit) loss sensitivity against an all-baseline quantized model."""

    def __init__(self, estimator=None, baseline_bits=4, candidate_bits=(2, 3, 4, 5, 6),
                 loss="cross_entropy", calibration=None, percentile=1.0, crl=True):
        self.estimator = estimator
        self.baseline_bits = baseline_bits
        self.candidate_bits = candidate_bits
        self.loss = loss
        self.calibration = calibration
        self.percentile = percentile
        self.crl = crl

    def fit(self, X, y=None):
        model = check_model(self.estimator)
        X = check_images(X, model.config)
        loss = LossKind(self.loss)
        labels = None if y is None else check_labels(y, len(X), model.config.classes)
        cal = X if self.calibration is None else check_images(self.calibration, model.config)
        sweep = SweepConfig(self.baseline_bits, tuple(self.candidate_bits), loss, len(X))
        ctx = SweepContext(model, collect_stats(model, cal), X, labels,
                           PTQOptions(percentile=self.percentile, crl=self.crl))
        self.table_ = run_sweep(ctx, sweep)
        return self


class MixedPrecisionAllocator(BaseEstimator):
    """Chooses per-layer widths that maximize importance under fixed-width budgets.

    ``fit(importance, sensitivity)`` takes fitted :class:`LayerImportanceScorer`
    and :class:`SensitivityAnalyzer` instances (or their tables); pass
    ``sensitivity=None`` for the importance-only objective.
    """

    def __init__(self, bits=(2, 3, 4, 5, 6), b_fixed=4, pins=None, lambda_mode="verbatim"):
        self.bits = bits
        self.b_fixed = b_fixed
        self.pins = pins
        self.lambda_mode = lambda_mode

    def fit(self, importance, sensitivity=None, config: ModelConfig | None = None):
        omega = getattr(importance, "importance_", importance)
        lam = getattr(sensitivity, "table_", sensitivity)
        if config is None:
            config = check_model(importance.estimator).config
        self.instance_ = instance_from_scores(
            layer_registry(config), omega.scores, None if lam is None else lam.scores,
            self.bits, self.pins, LambdaMode(self.lambda_mode))
        self.budget_ = budget_from_fixed(self.instance_, self.b_fixed)
        self.assignment_ = solve_exact(self.instance_, self.budget_)
        return self

    def bit_map(self) -> dict[LayerId, int]:
        check_is_fitted(self, "assignment_")
        return {LayerId.parse(k): v for k, v in self.assignment_.as_dict().items()}
