"""Input validation helpers shared by the loss, augmentation and estimator code."""

from __future__ import annotations

import math

import numpy as np
import torch

from .exceptions import InvalidInputError


def as_tensor(x, dtype=None) -> torch.Tensor:
    """Return ``x`` as a floating tensor without copying existing tensors."""
    if isinstance(x, torch.Tensor):
        if not x.is_floating_point():
            x = x.to(dtype or torch.get_default_dtype())
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype or torch.float64)


def check_same_shape(a: torch.Tensor, b: torch.Tensor, names=("q", "p")) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(
            f"{names[0]} and {names[1]} must have the same shape, "
            f"got {tuple(a.shape)} and {tuple(b.shape)}"
        )
    if a.ndim == 0:
        raise InvalidInputError(f"{names[0]} must have a class dimension")


def check_range(name: str, value: float, low: float, high: float,
                low_open: bool = False, high_open: bool = False) -> float:
    """Validate ``low <= value <= high`` with optionally open ends."""
    value = float(value)
    if math.isnan(value):
        raise InvalidInputError(f"{name} must be a number, got nan")
    too_low = value <= low if low_open else value < low
    too_high = value >= high if high_open else value > high
    if too_low or too_high:
        lb = "(" if low_open else "["
        hb = ")" if high_open else "]"
        raise InvalidInputError(f"{name} must lie in {lb}{low}, {high}{hb}, got {value}")
    return value


def check_simplex(name: str, x: torch.Tensor, atol: float = 1e-6) -> None:
    """Rows of ``x`` must be nonnegative and sum to one."""
    if torch.any(x < 0):
        raise InvalidInputError(f"{name} has negative entries")
    sums = x.sum(dim=-1)
    if torch.any((sums - 1).abs() > atol):
        raise InvalidInputError(f"{name} rows must sum to 1 within {atol}")


def check_images(X, *, name: str = "X") -> np.ndarray:
    """Coerce an image batch to float32 ``(n, channels, H, W)``.

    Accepts ``uint8`` arrays in channels-last layout ``(n, H, W, channels)``
    (scaled to [0, 1]) or floating arrays already in channels-first layout.
    """
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    X = np.asarray(X)
    if X.ndim != 4:
        raise InvalidInputError(f"{name} must be a 4-d image batch, got shape {X.shape}")
    if X.shape[0] == 0:
        raise InvalidInputError(f"{name} is empty")
    if X.dtype == np.uint8:
        X = X.transpose(0, 3, 1, 2).astype(np.float32) / 255.0
    elif np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float32, copy=False)
    else:
        raise InvalidInputError(f"{name} must be uint8 (NHWC) or floating (NCHW), got {X.dtype}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return np.ascontiguousarray(X)


def check_labels(y, n: int, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise InvalidInputError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise InvalidInputError("labels must be integer class indices")
    if y.min() < 0 or (num_classes is not None and y.max() >= num_classes):
        raise InvalidInputError(f"labels must lie in [0, {num_classes})")
    return y.astype(np.int64)
