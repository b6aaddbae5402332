"""Training loop pieces: combined objective, LR schedule, optimizer step, evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
import torch
from torch import nn

from ._validation import check_range
from .augment import AugmentConfig, make_two_view_batch
from .contrastive import PositiveSets, build_positive_sets, contrastive_regularization
from .exceptions import InvalidInputError, NonFiniteLossError
from .losses import LossConfig, cross_entropy, reverse_cross_entropy
from .model import ConvClassifier, ModelOutput, ModelSpec, predict_proba, tencrop_predict
from .teacher import MeanTeacher, mean_teacher_loss

_OPTIMIZERS = ("rmsprop", "sgd")


@dataclass(frozen=True)
class ScheduleConfig:
    """Linear warmup from ``warmup_start_lr`` to ``base_lr``, then cosine decay to 0."""

    base_lr: float = 0.005
    warmup_start_lr: float = 1e-6
    warmup_epochs: int = 3
    total_epochs: int = 100
    steps_per_epoch: int = 1

    def __post_init__(self):
        if not (self.base_lr > 0 and self.warmup_start_lr > 0):
            raise InvalidInputError("learning rates must be > 0")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise InvalidInputError("need 0 <= warmup_epochs < total_epochs")
        if self.steps_per_epoch < 1:
            raise InvalidInputError("steps_per_epoch must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(step: int, sched: ScheduleConfig) -> float:
    T, W = sched.total_steps, sched.warmup_steps
    if not 0 <= step <= T:
        raise InvalidInputError(f"step {step} outside [0, {T}]")
    if step < W:
        return sched.warmup_start_lr + (sched.base_lr - sched.warmup_start_lr) * step / W
    progress = (step - W) / (T - W)
    return sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class OptimConfig:
    name: str = "rmsprop"
    weight_decay: float = 1e-5
    rmsprop_alpha: float = 0.9
    momentum: float = 0.9
    eps: float = 1e-3

    def __post_init__(self):
        if self.name not in _OPTIMIZERS:
            raise InvalidInputError(f"optimizer must be one of {_OPTIMIZERS}")
        check_range("weight_decay", self.weight_decay, 0.0, math.inf)
        check_range("rmsprop_alpha", self.rmsprop_alpha, 0.0, 1.0)
        check_range("momentum", self.momentum, 0.0, 1.0)
        check_range("eps", self.eps, 0.0, math.inf, low_open=True)


def build_optimizer(model: nn.Module, cfg: OptimConfig, lr: float) -> torch.optim.Optimizer:
    """Weight decay on conv/linear weights only; norms and biases are exempt."""
    decay = [p for p in model.parameters() if p.requires_grad and p.ndim > 1]
    no_decay = [p for p in model.parameters() if p.requires_grad and p.ndim <= 1]
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    if cfg.name == "rmsprop":
        return torch.optim.RMSprop(groups, lr=lr, alpha=cfg.rmsprop_alpha,
                                   momentum=cfg.momentum, eps=cfg.eps)
    return torch.optim.SGD(groups, lr=lr, momentum=cfg.momentum, nesterov=cfg.momentum > 0)


@dataclass
class LossBreakdown:
    """Unweighted loss components plus the weighted total (all 0-d tensors)."""

    ce: torch.Tensor
    rce: torch.Tensor
    cr: torch.Tensor
    mt: torch.Tensor
    aux: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def total_loss(student_out: ModelOutput, teacher_out: ModelOutput | None, labels,
               config: LossConfig, positives: PositiveSets | None = None,
               step: int = 0) -> LossBreakdown:
    """Assemble ce + alpha*rce + beta*cr + gamma*mt + aux_weight*aux over ``2N`` views.

    Terms whose weight is zero are not evaluated and reported as exactly 0.
    ``positives`` is built from ``labels`` when not supplied.
    """
    logits = student_out.logits
    y = torch.as_tensor(labels, dtype=logits.dtype)
    n = logits.shape[0]
    if y.shape != logits.shape:
        raise InvalidInputError(f"labels {tuple(y.shape)} do not match logits {tuple(logits.shape)}")
    if n % 2:
        raise InvalidInputError("a two-view batch must contain an even number of views")
    zero = logits.new_zeros(())
    p = torch.softmax(logits, dim=-1)

    ce = cross_entropy(y, p).mean()
    rce = reverse_cross_entropy(y, p, config.rce_floor).mean() if config.alpha > 0 else zero

    cr = zero
    if config.beta > 0:
        if positives is None:
            positives = build_positive_sets(y.detach(), config.delta)
        if config.cr_space == "feature":
            if student_out.embedding is None:
                raise InvalidInputError("feature-space contrast needs a model built with projector=True")
            vecs = student_out.embedding
        else:
            vecs = p
        cr = contrastive_regularization(vecs, positives, config.tau, config.normalize_cr)
        if config.aux_in_cr:
            p_aux = torch.softmax(student_out.aux_logits, dim=-1)
            cr = 0.5 * (cr + contrastive_regularization(p_aux, positives, config.tau, config.normalize_cr))

    mt = zero
    if config.gamma > 0 and step >= config.mt_start_step:
        if teacher_out is None:
            raise InvalidInputError("gamma > 0 needs teacher outputs")
        if teacher_out.logits.shape != logits.shape:
            raise InvalidInputError("teacher outputs are not aligned with student outputs")
        mt = mean_teacher_loss(p, torch.softmax(teacher_out.logits.detach(), dim=-1))
        if config.aux_in_mt:
            mt = 0.5 * (mt + mean_teacher_loss(torch.softmax(student_out.aux_logits, dim=-1),
                                               torch.softmax(teacher_out.aux_logits.detach(), dim=-1)))

    aux = zero
    if config.aux_weight > 0:
        aux = cross_entropy(y, torch.softmax(student_out.aux_logits, dim=-1)).mean()

    total = ce + config.alpha * rce + config.beta * cr + config.gamma * mt + config.aux_weight * aux
    return LossBreakdown(ce, rce, cr, mt, aux, total)


@dataclass
class TrainState:
    """Everything that evolves during training."""

    model: ConvClassifier
    teacher: MeanTeacher
    optimizer: torch.optim.Optimizer
    loss_cfg: LossConfig
    aug_cfg: AugmentConfig
    schedule: ScheduleConfig
    seed: int
    batch_size: int
    step: int = 0
    history: list = field(default_factory=list)

    @property
    def epoch(self) -> int:
        return self.step // self.schedule.steps_per_epoch

    @property
    def num_classes(self) -> int:
        return self.model.spec.num_classes


def init_state(model_spec: ModelSpec, loss_cfg: LossConfig, aug_cfg: AugmentConfig,
               schedule: ScheduleConfig, optim_cfg: OptimConfig, seed: int,
               batch_size: int, dtype=torch.float32) -> TrainState:
    """Seed torch, build the student, and copy it into the teacher."""
    torch.manual_seed(seed)
    model = ConvClassifier(model_spec).to(dtype)
    teacher = MeanTeacher(model, loss_cfg.eta)
    opt = build_optimizer(model, optim_cfg, lr_at(0, schedule))
    return TrainState(model, teacher, opt, loss_cfg, aug_cfg, schedule, int(seed), int(batch_size))


def batch_rng(seed: int, step: int) -> np.random.Generator:
    """Augmentation stream of one step; depends only on (seed, step)."""
    return np.random.default_rng([int(seed), 0, int(step)])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed), 1, int(epoch)]).permutation(n)


def _all_finite(tensors) -> bool:
    return all(torch.isfinite(t).all() for t in tensors)


def train_step(state: TrainState, batch) -> tuple[TrainState, dict]:
    """One optimizer step on the student followed by one EMA update of the teacher."""
    model, cfg = state.model, state.loss_cfg
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(batch.images()).to(dtype)
    y = torch.from_numpy(batch.stacked_labels()).to(dtype)
    positives = build_positive_sets(y, cfg.delta)

    lr = lr_at(state.step, state.schedule)
    for g in state.optimizer.param_groups:
        g["lr"] = lr

    model.train()
    out = model(x)
    teacher_out = state.teacher(x) if cfg.gamma > 0 else None
    parts = total_loss(out, teacher_out, y, cfg, positives, step=state.step)

    record = {"step": state.step, "batch_seed": [state.seed, 0, state.step],
              "mix": batch.mix_record.kind}
    if not torch.isfinite(parts.total):
        raise NonFiniteLossError(f"non-finite loss at step {state.step}", {**record, **parts.to_dict()})
    state.optimizer.zero_grad(set_to_none=True)
    parts.total.backward()
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    if not _all_finite(grads):
        raise NonFiniteLossError(f"non-finite gradient at step {state.step}", {**record, **parts.to_dict()})
    state.optimizer.step()
    state.teacher.update(model)
    state.step += 1

    metrics = parts.to_dict()
    metrics.update(lr=lr, mean_positives=float(positives.sizes.mean()))
    return state, metrics


def train_epoch(state: TrainState, images: np.ndarray, labels: np.ndarray) -> list[dict]:
    """Run the remaining steps of the current epoch.

    ``images`` are normalized ``(n, ch, H, W)`` float arrays.  Starting in the
    middle of an epoch (after a resume) continues exactly where it stopped.
    """
    spe, bs = state.schedule.steps_per_epoch, state.batch_size
    epoch = state.epoch
    order = epoch_order(state.seed, epoch, images.shape[0])
    rows = []
    for b in range(state.step - epoch * spe, spe):
        idx = order[b * bs:(b + 1) * bs]
        if idx.size == 0:
            raise InvalidInputError("steps_per_epoch exceeds the number of batches")
        batch = make_two_view_batch(images[idx], labels[idx], batch_rng(state.seed, state.step),
                                    state.aug_cfg, num_classes=state.num_classes,
                                    epsilon=state.loss_cfg.epsilon_smooth)
        state, metrics = train_step(state, batch)
        rows.append(metrics)
    return rows


def top1(probs, y) -> float:
    probs = torch.as_tensor(probs)
    y = torch.as_tensor(np.asarray(y))
    return 100.0 * float((probs.argmax(dim=-1) == y).double().mean())


def _predict(model, images, fusion_weight, use_tencrop, crop_size):
    if use_tencrop:
        return tencrop_predict(model, images, crop_size, fusion_weight)
    return predict_proba(model, images, fusion_weight)


def evaluate(model: nn.Module, teacher: nn.Module | None, images, labels, *,
             use_fusion: bool = True, fusion_weight: float = 0.3,
             use_tencrop: bool = False, crop_size: int | None = None) -> dict[str, float]:
    """Top-1 accuracy (%) of student and teacher under the same inference pipeline."""
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    if use_tencrop and crop_size is None:
        raise InvalidInputError("use_tencrop needs crop_size")
    w = fusion_weight if use_fusion else 0.0
    result = {"student_top1": top1(_predict(model, images, w, use_tencrop, crop_size), labels)}
    if teacher is not None:
        result["teacher_top1"] = top1(_predict(teacher, images, w, use_tencrop, crop_size), labels)
    return result
