"""Exponential-moving-average teacher and its consistency loss."""

from __future__ import annotations

import copy
import warnings

import torch
from torch import nn

from ._validation import as_tensor, check_range, check_same_shape
from .exceptions import InvalidInputError
from .losses import kl_divergence


class MeanTeacher:
    """EMA copy of a student network.

    The copy is taken at construction, so teacher and student start equal.
    Teacher parameters never require grad and the module stays in eval mode.

    Args:
        student: network to track.
        eta: decay; ``teacher <- eta * teacher + (1 - eta) * student``.
    """

    def __init__(self, student: nn.Module, eta: float = 0.999):
        eta = check_range("eta", eta, 0.0, 1.0)
        if eta == 1.0:
            warnings.warn("eta = 1 freezes the teacher at its initialization", RuntimeWarning, stacklevel=2)
        self.eta = eta
        self.step_count = 0
        self.model = copy.deepcopy(student)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, student: nn.Module) -> "MeanTeacher":
        t_params = dict(self.model.named_parameters())
        s_params = dict(student.named_parameters())
        if t_params.keys() != s_params.keys():
            raise InvalidInputError("student and teacher parameter names differ")
        for name, tp in t_params.items():
            sp = s_params[name]
            if tp.shape != sp.shape:
                raise InvalidInputError(f"shape mismatch for {name}: {tuple(tp.shape)} vs {tuple(sp.shape)}")
            tp.mul_(self.eta).add_(sp.detach(), alpha=1.0 - self.eta)
        s_bufs = dict(student.named_buffers())
        for name, tb in self.model.named_buffers():
            sb = s_bufs[name]
            if tb.is_floating_point():
                tb.mul_(self.eta).add_(sb, alpha=1.0 - self.eta)
            else:
                tb.copy_(sb)
        self.step_count += 1
        return self

    @torch.no_grad()
    def __call__(self, x):
        self.model.eval()
        return self.model(x)

    def state_dict(self) -> dict:
        return {"model": self.model.state_dict(), "eta": self.eta, "step_count": self.step_count}

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.eta = float(state["eta"])
        self.step_count = int(state["step_count"])


def ema_update(teacher: MeanTeacher, student: nn.Module) -> MeanTeacher:
    """One EMA step; the student is left untouched."""
    return teacher.update(student)


def mean_teacher_loss(student_probs, teacher_probs) -> torch.Tensor:
    """Batch-mean KL(student || teacher); the teacher side is a constant."""
    s = as_tensor(student_probs)
    t = as_tensor(teacher_probs).detach()
    check_same_shape(s, t, ("student_probs", "teacher_probs"))
    return kl_divergence(s, t).mean()
