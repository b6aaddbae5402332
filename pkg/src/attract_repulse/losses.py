"""Loss and divergence primitives over class-probability vectors.

Every function works on the last axis of its inputs, so a ``(C,)`` vector
yields a 0-d tensor and an ``(n, C)`` batch yields ``n`` per-row values.
Probabilities are passed in (not logits); gradients reach the logits
through :func:`softmax`.  All logarithms are natural.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from ._validation import as_tensor, check_range, check_same_shape
from .exceptions import InvalidInputError

PROB_FLOOR = 1e-12
LN2 = math.log(2.0)

_CR_SPACES = ("probability", "feature")


@dataclass(frozen=True)
class LossConfig:
    """Weights and knobs of the combined objective.

    ``alpha``/``beta``/``gamma`` weight the reverse cross entropy, the
    contrastive regularizer and the mean-teacher consistency term;
    ``aux_weight`` weights the auxiliary-head cross entropy.
    """

    alpha: float = 0.01
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 0.005
    tau: float = 0.1
    eta: float = 0.999
    epsilon_smooth: float = 0.1
    rce_floor: float = -4.0
    aux_weight: float = 0.3
    fusion_weight: float = 0.3
    normalize_cr: bool = True
    cr_space: str = "probability"
    mt_start_step: int = 0
    aux_in_cr: bool = False
    aux_in_mt: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "aux_weight"):
            check_range(name, getattr(self, name), 0.0, math.inf)
        check_range("delta", self.delta, 0.0, LN2)
        check_range("tau", self.tau, 0.0, math.inf, low_open=True)
        check_range("eta", self.eta, 0.0, 1.0, high_open=True)
        check_range("epsilon_smooth", self.epsilon_smooth, 0.0, 1.0, high_open=True)
        check_range("rce_floor", self.rce_floor, -math.inf, 0.0, high_open=True)
        check_range("fusion_weight", self.fusion_weight, 0.0, 1.0)
        if self.cr_space not in _CR_SPACES:
            raise InvalidInputError(f"cr_space must be one of {_CR_SPACES}, got {self.cr_space!r}")
        if int(self.mt_start_step) < 0:
            raise InvalidInputError("mt_start_step must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def softmax(logits) -> torch.Tensor:
    """Numerically stable softmax over the last axis."""
    z = as_tensor(logits)
    if z.ndim == 0 or z.shape[-1] < 2:
        raise InvalidInputError("softmax needs at least two classes")
    if not torch.isfinite(z).all():
        raise InvalidInputError("logits must be finite")
    z = z - z.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def cross_entropy(q, p) -> torch.Tensor:
    """H(q, p) = -sum_c q_c log p_c, with p clamped at 1e-12."""
    q, p = as_tensor(q), as_tensor(p)
    check_same_shape(q, p)
    return -(q * torch.log(p.clamp_min(PROB_FLOOR))).sum(dim=-1)


def reverse_cross_entropy(q, p, rce_floor: float = -4.0) -> torch.Tensor:
    """H(p, q) = -sum_c p_c log q_c, where each log q_c is floored at ``rce_floor``.

    The floor stands in for log 0 on hard labels; it is inert when ``q`` is
    strictly positive with log q_c >= rce_floor.
    """
    q, p = as_tensor(q), as_tensor(p)
    check_same_shape(q, p)
    with torch.no_grad():
        log_q = torch.log(q.detach()).clamp_min(float(rce_floor))
    return -(p * log_q).sum(dim=-1)


def symmetric_cross_entropy(q, p, alpha: float = 0.01, rce_floor: float = -4.0) -> torch.Tensor:
    check_range("alpha", alpha, 0.0, math.inf)
    ce = cross_entropy(q, p)
    if alpha == 0:
        return ce
    return ce + alpha * reverse_cross_entropy(q, p, rce_floor)


def kl_divergence(p, r) -> torch.Tensor:
    """KL(p || r) with both arguments clamped at 1e-12 inside the logs."""
    p, r = as_tensor(p), as_tensor(r)
    check_same_shape(p, r, ("p", "r"))
    return (p * (torch.log(p.clamp_min(PROB_FLOOR)) - torch.log(r.clamp_min(PROB_FLOOR)))).sum(dim=-1)


def js_divergence(p, r) -> torch.Tensor:
    """Jensen-Shannon divergence, symmetric and bounded by ln 2."""
    p, r = as_tensor(p), as_tensor(r)
    check_same_shape(p, r, ("p", "r"))
    m = 0.5 * (p + r)
    return 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(r, m)


def label_smoothing(q, epsilon: float, num_classes: int | None = None) -> torch.Tensor:
    """Mix ``q`` with the uniform distribution: (1 - eps) q + eps / C."""
    check_range("epsilon", epsilon, 0.0, 1.0, high_open=True)
    q = as_tensor(q)
    C = q.shape[-1] if num_classes is None else int(num_classes)
    if C != q.shape[-1]:
        raise InvalidInputError(f"num_classes={C} does not match label width {q.shape[-1]}")
    if epsilon == 0:
        return q.clone()
    return (1.0 - epsilon) * q + epsilon / C
