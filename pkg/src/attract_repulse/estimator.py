"""scikit-learn compatible classifier trained with the attract-and-repulse objective."""

from __future__ import annotations

import logging
import math

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_labels
from .augment import AugmentConfig, AugPolicy
from .exceptions import InvalidInputError
from .losses import LossConfig
from .model import ModelSpec, predict_proba, tencrop_predict
from .train import OptimConfig, ScheduleConfig, TrainState, init_state, train_epoch

logger = logging.getLogger(__name__)


class AttractRepulseClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Image classifier trained from scratch with SCE + contrastive regularization + mean teacher.

    ``X`` is either a ``uint8`` batch in ``(n, H, W, channels)`` layout, which
    is scaled to [0, 1] and standardized with ``policy.mean``/``policy.std``,
    or a float batch in ``(n, channels, H, W)`` layout used as given.

    Loss weights follow the usual names: ``alpha`` (reverse CE), ``beta``
    (contrastive regularization), ``gamma`` (teacher consistency),
    ``aux_weight`` (auxiliary head CE).  ``predict_with`` selects the student
    or the EMA teacher for inference.  ``transform`` returns penultimate
    features.
    """

    def __init__(self, *, alpha=0.01, beta=1.0, gamma=1.0, delta=0.005, tau=0.1, eta=0.999,
                 epsilon_smooth=0.1, rce_floor=-4.0, aux_weight=0.3, fusion_weight=0.3,
                 normalize_cr=True, cr_space="probability", mt_start_step=0,
                 aux_in_cr=False, aux_in_mt=False,
                 widths=(64, 128, 256), blocks_per_stage=2, dropout=0.3, aux_stage=1,
                 activation="silu",
                 epochs=100, batch_size=64, base_lr=0.005, warmup_start_lr=1e-6,
                 warmup_epochs=3, optimizer="rmsprop", weight_decay=1e-5,
                 rmsprop_alpha=0.9, momentum=0.9, eps=1e-3,
                 policy=None, mix_prob=0.5, cutmix_share=0.5, mixup_alpha=0.5, cutmix_alpha=1.0,
                 use_fusion=True, use_tencrop=False, tencrop_size=None,
                 predict_with="student", random_state=0, verbose=0):
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.delta = delta
        self.tau = tau
        self.eta = eta
        self.epsilon_smooth = epsilon_smooth
        self.rce_floor = rce_floor
        self.aux_weight = aux_weight
        self.fusion_weight = fusion_weight
        self.normalize_cr = normalize_cr
        self.cr_space = cr_space
        self.mt_start_step = mt_start_step
        self.aux_in_cr = aux_in_cr
        self.aux_in_mt = aux_in_mt
        self.widths = widths
        self.blocks_per_stage = blocks_per_stage
        self.dropout = dropout
        self.aux_stage = aux_stage
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.warmup_start_lr = warmup_start_lr
        self.warmup_epochs = warmup_epochs
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.rmsprop_alpha = rmsprop_alpha
        self.momentum = momentum
        self.eps = eps
        self.policy = policy
        self.mix_prob = mix_prob
        self.cutmix_share = cutmix_share
        self.mixup_alpha = mixup_alpha
        self.cutmix_alpha = cutmix_alpha
        self.use_fusion = use_fusion
        self.use_tencrop = use_tencrop
        self.tencrop_size = tencrop_size
        self.predict_with = predict_with
        self.random_state = random_state
        self.verbose = verbose

    # config builders -------------------------------------------------

    def _policy(self) -> AugPolicy:
        return self.policy if self.policy is not None else AugPolicy()

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha=self.alpha, beta=self.beta, gamma=self.gamma, delta=self.delta,
            tau=self.tau, eta=self.eta, epsilon_smooth=self.epsilon_smooth,
            rce_floor=self.rce_floor, aux_weight=self.aux_weight,
            fusion_weight=self.fusion_weight, normalize_cr=self.normalize_cr,
            cr_space=self.cr_space, mt_start_step=self.mt_start_step,
            aux_in_cr=self.aux_in_cr, aux_in_mt=self.aux_in_mt,
        )

    def model_spec(self, num_classes: int, in_channels: int) -> ModelSpec:
        return ModelSpec(num_classes=num_classes, in_channels=in_channels,
                         widths=tuple(self.widths), blocks_per_stage=self.blocks_per_stage,
                         dropout=self.dropout, aux_stage=self.aux_stage,
                         activation=self.activation, projector=self.cr_space == "feature")

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(policy=self._policy(), mix_prob=self.mix_prob,
                             cutmix_share=self.cutmix_share, mixup_alpha=self.mixup_alpha,
                             cutmix_alpha=self.cutmix_alpha)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(name=self.optimizer, weight_decay=self.weight_decay,
                           rmsprop_alpha=self.rmsprop_alpha, momentum=self.momentum, eps=self.eps)

    def schedule(self, n_samples: int) -> ScheduleConfig:
        return ScheduleConfig(self.base_lr, self.warmup_start_lr, self.warmup_epochs,
                              self.epochs, math.ceil(n_samples / self.batch_size))

    @classmethod
    def from_run_config(cls, cfg) -> "AttractRepulseClassifier":
        """Build an estimator mirroring a :class:`~attract_repulse.config.RunConfig`."""
        loss, tr, aug, mod, ev = cfg.loss, cfg.train, cfg.augment, cfg.model, cfg.eval
        params = {k: getattr(loss, k) for k in LossConfig.__dataclass_fields__}
        params.update(
            widths=mod.widths, blocks_per_stage=mod.blocks_per_stage, dropout=mod.dropout,
            aux_stage=mod.aux_stage, activation=mod.activation,
            epochs=tr.total_epochs, batch_size=tr.batch_size, base_lr=tr.base_lr,
            warmup_start_lr=tr.warmup_start_lr, warmup_epochs=tr.warmup_epochs,
            optimizer=tr.optim.name, weight_decay=tr.optim.weight_decay,
            rmsprop_alpha=tr.optim.rmsprop_alpha, momentum=tr.optim.momentum, eps=tr.optim.eps,
            policy=aug.policy, mix_prob=aug.mix_prob, cutmix_share=aug.cutmix_share,
            mixup_alpha=aug.mixup_alpha, cutmix_alpha=aug.cutmix_alpha,
            use_fusion=ev.use_fusion, use_tencrop=ev.use_tencrop,
            tencrop_size=ev.tencrop_size, random_state=cfg.seed,
        )
        return cls(**params)

    # fitting -----------------------------------------------------------

    def _prepare(self, X) -> np.ndarray:
        raw = np.asarray(X) if not isinstance(X, torch.Tensor) else X
        x = check_images(raw)
        if getattr(raw, "dtype", None) == np.uint8:
            x = self._policy().normalize(x)
        return x

    def fit(self, X, y, *, callback=None, resume: TrainState | None = None):
        """Train for ``epochs`` epochs.

        Args:
            callback: called as ``callback(self, epoch, step_rows)`` after every
                epoch; returning ``False`` stops training.
            resume: a restored :class:`TrainState` to continue from.
        """
        x = self._prepare(X)
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise InvalidInputError(f"expected {x.shape[0]} labels, got shape {y.shape}")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise InvalidInputError("need at least two classes")
        y_idx = check_labels(y_idx.astype(np.int64), x.shape[0], self.classes_.size)
        self.n_features_in_ = int(np.prod(x.shape[1:]))
        self.image_shape_ = x.shape[1:]

        if resume is None:
            state = init_state(self.model_spec(self.classes_.size, x.shape[1]), self.loss_config(),
                               self.augment_config(), self.schedule(x.shape[0]),
                               self.optim_config(), int(self.random_state), self.batch_size)
        else:
            state = resume
            if state.schedule.steps_per_epoch != math.ceil(x.shape[0] / self.batch_size):
                raise InvalidInputError("resumed state was trained on a different dataset size")
        self.state_ = state
        self.history_ = []
        while state.epoch < state.schedule.total_epochs:
            epoch = state.epoch
            rows = train_epoch(state, x, y_idx)
            self.history_.append(rows)
            if self.verbose:
                logger.info("epoch %d: total %.4f", epoch, np.mean([r["total"] for r in rows]))
            if callback is not None and callback(self, epoch, rows) is False:
                break
        return self

    # inference ---------------------------------------------------------

    @property
    def model_(self):
        check_is_fitted(self, "state_")
        return self.state_.model

    @property
    def teacher_(self):
        check_is_fitted(self, "state_")
        return self.state_.teacher.model

    def _inference_model(self, which: str | None = None):
        which = which or self.predict_with
        if which not in ("student", "teacher"):
            raise InvalidInputError("predict_with must be 'student' or 'teacher'")
        return self.model_ if which == "student" else self.teacher_

    def predict_proba(self, X, which: str | None = None) -> np.ndarray:
        model = self._inference_model(which)
        x = self._prepare(X)
        w = self.fusion_weight if self.use_fusion else 0.0
        if self.use_tencrop:
            size = self.tencrop_size or x.shape[-1] - 4
            probs = tencrop_predict(model, x, size, w)
        else:
            probs = predict_proba(model, x, w)
        return probs.double().numpy()

    def predict(self, X, which: str | None = None) -> np.ndarray:
        check_is_fitted(self, "classes_")
        return self.classes_[self.predict_proba(X, which).argmax(axis=1)]

    @torch.no_grad()
    def transform(self, X) -> np.ndarray:
        """Penultimate (globally pooled) features in eval mode."""
        model = self._inference_model()
        x = torch.from_numpy(self._prepare(X))
        was = model.training
        model.eval()
        try:
            feats = [model(x[i:i + 256]).features for i in range(0, x.shape[0], 256)]
        finally:
            model.train(was)
        return torch.cat(feats).double().numpy()
