"""scikit-learn style estimators wrapping the model, calibration and fixing steps."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, MetaEstimatorMixin
from sklearn.utils.validation import check_is_fitted

from .complexity import savings
from .data import Dataset, Normalization
from .fixing import ENTROPY, PER_HEAD, RANDOM, SCOPES, build_plan, random_plan
from .quant import FULL_PRECISION, calibrate_model
from .stats import calibration_indices, entropy_map, kl_map, run_calibration
from .validation import check_bits, check_images, check_images_labels, check_tau
from .vit import Checkpoint, ModelConfig, TrainConfig, predict_logits, train


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64) - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class ViTClassifier(ClassifierMixin, BaseEstimator):
    """A small Vision Transformer trained with hand-written backpropagation.

    ``X`` is a stack of uint8 images ``(n, H, W)`` or ``(n, H, W, C)``.
    Inputs are scaled to [0, 1] and standardised per channel with statistics
    of the training images.
    """

    def __init__(
        self,
        image_size: int = 28,
        patch_size: int = 7,
        embed_dim: int = 64,
        num_layers: int = 4,
        num_heads: int = 4,
        mlp_ratio: int = 4,
        epochs: int = 20,
        batch_size: int = 64,
        learning_rate: float = 1e-3,
        weight_decay: float = 0.0,
        random_state: int = 0,
    ):
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y, eval_set=None, callback=None):
        """``callback(epoch, history)`` runs after every epoch."""
        X, y = check_images_labels(X, y, self.image_size)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.config_ = ModelConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            channels=X.shape[-1],
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            num_classes=len(self.classes_),
            mlp_ratio=self.mlp_ratio,
        )
        self.normalization_ = Normalization.fit(Dataset(X, y_enc, len(self.classes_)))
        val = None
        if eval_set is not None:
            Xv, yv = check_images_labels(*eval_set, self.image_size, X.shape[-1])
            val = (self.normalization_.apply(Xv), np.searchsorted(self.classes_, yv))
        tc = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.learning_rate,
            weight_decay=self.weight_decay,
            seed=self.random_state,
        )
        self.params_, self.history_ = train(self.normalization_.apply(X), y_enc, self.config_, tc, val=val, callback=callback)
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, classes=None) -> "ViTClassifier":
        cfg = ckpt.config
        est = cls(
            image_size=cfg.image_size,
            patch_size=cfg.patch_size,
            embed_dim=cfg.embed_dim,
            num_layers=cfg.num_layers,
            num_heads=cfg.num_heads,
            mlp_ratio=cfg.mlp_ratio,
        )
        est.config_ = cfg
        est.params_ = {k: v.copy() for k, v in ckpt.params.items()}
        est.normalization_ = Normalization(tuple(map(float, ckpt.norm_mean)), tuple(map(float, ckpt.norm_std)))
        est.classes_ = np.arange(cfg.num_classes) if classes is None else np.asarray(classes)
        return est

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "params_")
        return Checkpoint(
            self.config_,
            self.params_,
            np.asarray(self.normalization_.mean, np.float32),
            np.asarray(self.normalization_.std, np.float32),
        )

    def prepare(self, X) -> np.ndarray:
        """Validate and standardise images into model input."""
        check_is_fitted(self, "params_")
        X = check_images(X, self.config_.image_size, self.config_.channels)
        return self.normalization_.apply(X)

    def decision_function(self, X, plan=None, quant=None) -> np.ndarray:
        return predict_logits(self.prepare(X), self.params_, self.config_, plan=plan, quant=quant)

    def predict_proba(self, X, plan=None, quant=None) -> np.ndarray:
        return _softmax(self.decision_function(X, plan, quant))

    def predict(self, X, plan=None, quant=None) -> np.ndarray:
        scores = self.decision_function(X, plan, quant)
        return self.classes_[np.argmax(scores, axis=1)]


class EntropyAttentionFixer(MetaEstimatorMixin, ClassifierMixin, BaseEstimator):
    """Freeze low-entropy attention weights of a fitted :class:`ViTClassifier`.

    ``fit(X)`` runs the wrapped model over a calibration subset of ``X``,
    builds per-weight histograms of the attention maps and selects the
    ``tau`` fraction of weights with the lowest entropy (``method="entropy"``)
    or a random set of the same size (``method="random"``). Prediction uses
    the wrapped model with those weights replaced by their calibration means.

    With ``weight_bits``/``activation_bits`` below 32 the model runs under
    min-max fake quantisation, and by default the statistics come from the
    quantised model (``statistics="auto"``).

    Parameters
    ----------
    estimator : ViTClassifier
        Already fitted; it is not refitted.
    tau : float
        Fraction of attention weights to fix.
    scope : {"per-head", "global"}
        Whether ``tau`` applies within each head or across the whole model.
    calibration_fraction : float
        Share of ``X`` used for calibration (first positions of a seeded
        permutation).
    frozen_attention_bits : int
        Grid for the frozen values; 32 keeps them at full precision.
    """

    def __init__(
        self,
        estimator=None,
        tau: float = 0.1,
        scope: str = PER_HEAD,
        method: str = ENTROPY,
        calibration_fraction: float = 0.05,
        histogram_bits: int = 8,
        weight_bits: int = FULL_PRECISION,
        activation_bits: int = FULL_PRECISION,
        frozen_attention_bits: int = FULL_PRECISION,
        statistics: str = "auto",
        renormalize: bool = False,
        random_state: int = 0,
        n_jobs: int = 1,
    ):
        self.estimator = estimator
        self.tau = tau
        self.scope = scope
        self.method = method
        self.calibration_fraction = calibration_fraction
        self.histogram_bits = histogram_bits
        self.weight_bits = weight_bits
        self.activation_bits = activation_bits
        self.frozen_attention_bits = frozen_attention_bits
        self.statistics = statistics
        self.renormalize = renormalize
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _validate(self):
        if self.estimator is None:
            raise ValueError("estimator is required")
        check_is_fitted(self.estimator, "params_")
        check_tau(self.tau)
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}")
        if self.method not in (ENTROPY, RANDOM):
            raise ValueError("method must be 'entropy' or 'random'")
        if self.statistics not in ("auto", "fp32", "quantized"):
            raise ValueError("statistics must be 'auto', 'fp32' or 'quantized'")
        check_bits(self.histogram_bits, "histogram_bits", 1, 16)
        for name in ("weight_bits", "activation_bits", "frozen_attention_bits"):
            check_bits(getattr(self, name), name, 2, 32)

    @property
    def quantized(self) -> bool:
        return self.weight_bits < FULL_PRECISION or self.activation_bits < FULL_PRECISION

    def fit(self, X, y=None):
        self._validate()
        est = self.estimator
        X = check_images(X, est.config_.image_size, est.config_.channels)
        idx = calibration_indices(len(X), self.calibration_fraction, self.random_state)
        Xc = est.normalization_.apply(X[idx])
        cfg, params = est.config_, est.params_
        self.classes_ = est.classes_
        self.calibration_indices_ = idx
        self.quant_ = None
        if self.quantized:
            self.quant_ = calibrate_model(
                params, cfg, Xc, self.weight_bits, self.activation_bits, self.frozen_attention_bits
            )
        use_q = self.statistics == "quantized" or (self.statistics == "auto" and self.quantized)
        if use_q and self.quant_ is None:
            raise ValueError("statistics='quantized' needs weight_bits or activation_bits below 32")
        self.bank_ = run_calibration(Xc, params, cfg, self.histogram_bits, None, self.n_jobs)
        self.quant_bank_ = (
            run_calibration(Xc, params, cfg, self.histogram_bits, self.quant_, self.n_jobs)
            if self.quant_ is not None
            else None
        )
        stats = self.quant_bank_ if use_q else self.bank_
        self.entropy_map_ = entropy_map(stats)
        if self.method == ENTROPY:
            plan = build_plan(self.entropy_map_, stats, self.tau, self.scope, self.frozen_attention_bits)
        else:
            plan = random_plan(
                cfg.attention_shape, stats, self.tau, self.random_state, self.frozen_attention_bits, self.scope
            )
        self.plan_ = plan.with_renormalize(self.renormalize)
        self.flops_ = savings(self.plan_, cfg)
        return self

    @property
    def kl_map_(self):
        """Divergence of the full-precision statistics from the quantised ones."""
        check_is_fitted(self, "bank_")
        if self.quant_bank_ is None:
            raise AttributeError("kl_map_ needs a quantised model (weight/activation bits < 32)")
        return kl_map(self.bank_, self.quant_bank_)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "plan_")
        return self.estimator.decision_function(X, plan=self.plan_, quant=self.quant_)

    def predict_proba(self, X) -> np.ndarray:
        return _softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
