"""Contrastive regularization over class-probability vectors.

A two-view batch of ``2N`` items is ordered ``[views_a; views_b]`` so that
item ``i`` and item ``(i + N) mod 2N`` are the two views of one sample.
Positives of an anchor are the other items whose soft labels lie within
Jensen-Shannon distance ``delta`` of the anchor's label.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ._validation import as_tensor, check_range, check_simplex
from .exceptions import EmptyPositiveSetWarning, InvalidInputError
from .losses import LN2, js_divergence


@dataclass
class PositiveSets:
    """Positive-pair structure of one batch.

    Attributes:
        mask: ``(2N, 2N)`` boolean, ``mask[i, k]`` iff ``k`` is a positive of ``i``.
            The diagonal is always False.
        js: the pairwise JS matrix the mask was thresholded from.
        skipped: anchors with no positive; they are left out of the loss.
    """

    mask: np.ndarray
    js: np.ndarray | None = None
    skipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.mask.shape[0]

    def __getitem__(self, i: int) -> list[int]:
        return np.flatnonzero(self.mask[i]).tolist()

    @property
    def sizes(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @property
    def active(self) -> np.ndarray:
        return self.sizes > 0

    @classmethod
    def cross_view(cls, n_items: int) -> "PositiveSets":
        """Positives fixed to the cross-view partner only."""
        if n_items < 2 or n_items % 2:
            raise InvalidInputError(f"a two-view batch needs an even size >= 2, got {n_items}")
        half = n_items // 2
        mask = np.zeros((n_items, n_items), dtype=bool)
        idx = np.arange(n_items)
        mask[idx, (idx + half) % n_items] = True
        return cls(mask=mask)


def pairwise_js(labels) -> np.ndarray:
    """Symmetric ``(M, M)`` matrix of JS divergences between label rows."""
    y = as_tensor(labels, dtype=torch.float64).detach()
    js = js_divergence(y[:, None, :].expand(-1, y.shape[0], -1),
                       y[None, :, :].expand(y.shape[0], -1, -1)).numpy()
    # symmetrize away summation-order noise so membership is exactly symmetric
    js = np.minimum(js, js.T)
    np.fill_diagonal(js, 0.0)
    return js


def build_positive_sets(labels, delta: float) -> PositiveSets:
    """K'(i) = {k != i : JS(label_k, label_i) <= delta}.

    Anchors with an empty set are recorded in ``skipped`` and trigger an
    :class:`EmptyPositiveSetWarning`.
    """
    y = as_tensor(labels, dtype=torch.float64).detach()
    if y.ndim != 2 or y.shape[0] < 2:
        raise InvalidInputError(f"need a (2N, C) label batch with 2N >= 2, got {tuple(y.shape)}")
    check_simplex("labels", y)
    check_range("delta", delta, 0.0, LN2)
    js = pairwise_js(y)
    mask = js <= delta
    np.fill_diagonal(mask, False)
    skipped = np.flatnonzero(~mask.any(axis=1))
    if skipped.size:
        warnings.warn(
            f"{skipped.size} anchor(s) have no positive and are skipped: {skipped.tolist()}",
            EmptyPositiveSetWarning,
            stacklevel=2,
        )
    return PositiveSets(mask=mask, js=js, skipped=skipped)


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0 or math.isinf(tau):
        raise InvalidInputError(f"tau must be a positive finite number, got {tau}")
    return tau


def contrastive_regularization(probs, positives: PositiveSets, tau: float = 0.1,
                               normalize: bool = True) -> torch.Tensor:
    """Supervised-contrastive loss on probability (or embedding) vectors.

    For each active anchor ``i``::

        l_i = -1/|K'(i)| * sum_{k in K'(i)} log softmax_{a != i}(p_i . p_a / tau)[k]

    and the result is the mean of ``l_i`` over active anchors.
    """
    tau = _check_tau(tau)
    p = as_tensor(probs)
    if p.ndim != 2:
        raise InvalidInputError(f"probs must be (2N, C), got {tuple(p.shape)}")
    n = p.shape[0]
    if positives.mask.shape != (n, n):
        raise InvalidInputError(
            f"positive mask of shape {positives.mask.shape} does not match {n} items"
        )
    if normalize:
        p = F.normalize(p, dim=1)
    sim = p @ p.T / tau
    eye = torch.eye(n, dtype=torch.bool, device=p.device)
    log_den = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    log_prob = sim - log_den

    pos = torch.as_tensor(positives.mask, device=p.device)
    counts = pos.sum(dim=1)
    active = counts > 0
    if not bool(active.any()):
        return p.sum() * 0.0
    # zero out non-positive entries (including the -inf-free diagonal) before summing
    per_anchor = -(log_prob.masked_fill(~pos, 0.0)).sum(dim=1)
    per_anchor = per_anchor[active] / counts[active].to(p.dtype)
    return per_anchor.mean()


def info_nce_reference(probs, tau: float = 0.1, normalize: bool = True) -> torch.Tensor:
    """Plain two-view InfoNCE: the only positive of each item is its other view."""
    tau = _check_tau(tau)
    p = as_tensor(probs)
    if p.ndim != 2 or p.shape[0] < 2 or p.shape[0] % 2:
        raise InvalidInputError(f"probs must be (2N, C) with 2N even, got {tuple(p.shape)}")
    n = p.shape[0]
    if normalize:
        p = F.normalize(p, dim=1)
    sim = p @ p.T / tau
    sim = sim.masked_fill(torch.eye(n, dtype=torch.bool, device=p.device), float("-inf"))
    targets = (torch.arange(n, device=p.device) + n // 2) % n
    return F.cross_entropy(sim, targets)
