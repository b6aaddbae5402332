"""Two-view batch construction with shared mixup/cutmix label mixing.

Images are float arrays in channels-first layout: a single image is
``(channels, H, W)``, a batch is ``(N, channels, H, W)``.  Labels are
``(N, C)`` float64 rows on the probability simplex.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import check_range
from .exceptions import InvalidInputError

# CIFAR-10 training-set channel statistics
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

MIX_KINDS = ("none", "mixup", "cutmix")


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class AugPolicy:
    """Per-image stochastic transform: pad-and-crop, horizontal flip, random erasing."""

    flip_prob: float = 0.5
    pad: int = 4
    crop_size: int | None = None
    erase_prob: float = 0.25
    erase_area: tuple[float, float] = (0.02, 0.25)
    erase_ratio: tuple[float, float] = (0.3, 3.3)
    mean: tuple[float, ...] = CIFAR10_MEAN
    std: tuple[float, ...] = CIFAR10_STD

    def __post_init__(self):
        check_range("flip_prob", self.flip_prob, 0.0, 1.0)
        check_range("erase_prob", self.erase_prob, 0.0, 1.0)
        if int(self.pad) < 0:
            raise InvalidInputError("pad must be >= 0")
        lo, hi = self.erase_area
        if not 0 < lo <= hi < 1:
            raise InvalidInputError(f"erase_area must satisfy 0 < lo <= hi < 1, got {self.erase_area}")
        rlo, rhi = self.erase_ratio
        if not 0 < rlo <= rhi:
            raise InvalidInputError(f"erase_ratio must satisfy 0 < lo <= hi, got {self.erase_ratio}")
        if len(self.mean) != len(self.std) or any(s <= 0 for s in self.std):
            raise InvalidInputError("mean and std must have equal length and positive std")
        object.__setattr__(self, "erase_area", tuple(self.erase_area))
        object.__setattr__(self, "erase_ratio", tuple(self.erase_ratio))
        object.__setattr__(self, "mean", tuple(self.mean))
        object.__setattr__(self, "std", tuple(self.std))

    @classmethod
    def identity(cls, **kw) -> "AugPolicy":
        return cls(flip_prob=0.0, pad=0, erase_prob=0.0, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("erase_area", "erase_ratio", "mean", "std"):
            d[k] = list(d[k])
        return d

    def normalize(self, images: np.ndarray) -> np.ndarray:
        """Standardize a ``[0, 1]`` batch ``(N, channels, H, W)`` per channel."""
        mean = np.asarray(self.mean, dtype=np.float32)[:, None, None]
        std = np.asarray(self.std, dtype=np.float32)[:, None, None]
        if images.shape[-3] != mean.shape[0]:
            raise InvalidInputError(
                f"policy has {mean.shape[0]} channel statistics, images have {images.shape[-3]} channels"
            )
        return ((images - mean) / std).astype(np.float32)


@dataclass(frozen=True)
class AugmentConfig:
    """Batch-level mixing knobs.

    With probability ``mix_prob`` a mixing event happens; it is cutmix with
    probability ``cutmix_share`` and mixup otherwise.
    """

    policy: AugPolicy = field(default_factory=AugPolicy)
    mix_prob: float = 0.5
    cutmix_share: float = 0.5
    mixup_alpha: float = 0.5
    cutmix_alpha: float = 1.0

    def __post_init__(self):
        check_range("mix_prob", self.mix_prob, 0.0, 1.0)
        check_range("cutmix_share", self.cutmix_share, 0.0, 1.0)
        check_range("mixup_alpha", self.mixup_alpha, 0.0, math.inf, low_open=True)
        check_range("cutmix_alpha", self.cutmix_alpha, 0.0, math.inf, low_open=True)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = self.policy.to_dict()
        return d


@dataclass
class MixRecord:
    """Everything needed to replay the label arithmetic of one batch."""

    kind: str = "none"
    lam: float = 1.0
    perm: np.ndarray | None = None
    box: tuple[int, int, int, int] | None = None  # (y0, y1, x0, x1), half-open

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lam": self.lam,
            "perm": None if self.perm is None else self.perm.tolist(),
            "box": None if self.box is None else list(self.box),
        }


@dataclass
class TwoViewBatch:
    views_a: np.ndarray
    views_b: np.ndarray
    labels: np.ndarray
    mix_record: MixRecord

    def __len__(self) -> int:
        return self.views_a.shape[0]

    def images(self) -> np.ndarray:
        """All ``2N`` views, first views then second views."""
        return np.concatenate([self.views_a, self.views_b], axis=0)

    def stacked_labels(self) -> np.ndarray:
        """Labels aligned with :meth:`images`."""
        return np.concatenate([self.labels, self.labels], axis=0)


def one_hot(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise InvalidInputError(f"class index out of range [0, {num_classes})")
    out = np.zeros((y.shape[0], num_classes), dtype=np.float64)
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def sample_view(image: np.ndarray, rng, policy: AugPolicy) -> np.ndarray:
    """Draw one stochastic view of a ``(channels, H, W)`` image."""
    rng = _as_rng(rng)
    image = np.asarray(image)
    if image.ndim != 3:
        raise InvalidInputError(f"expected a (channels, H, W) image, got shape {image.shape}")
    _, H, W = image.shape
    size = policy.crop_size
    th, tw = (H, W) if size is None else (int(size), int(size))
    if H < th or W < tw:
        raise InvalidInputError(f"image {H}x{W} is smaller than the crop target {th}x{tw}")

    out = image
    pad = int(policy.pad)
    if pad or (th, tw) != (H, W):
        padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad))) if pad else image
        y0 = int(rng.integers(0, padded.shape[1] - th + 1))
        x0 = int(rng.integers(0, padded.shape[2] - tw + 1))
        out = padded[:, y0:y0 + th, x0:x0 + tw]
    if policy.flip_prob > 0 and rng.random() < policy.flip_prob:
        out = out[:, :, ::-1]
    out = np.array(out, dtype=image.dtype, copy=True)
    if policy.erase_prob > 0 and rng.random() < policy.erase_prob:
        _random_erase(out, rng, policy)
    return out


def _random_erase(img: np.ndarray, rng: np.random.Generator, policy: AugPolicy) -> None:
    _, H, W = img.shape
    area = H * W
    for _ in range(10):
        target = rng.uniform(*policy.erase_area) * area
        log_r = rng.uniform(math.log(policy.erase_ratio[0]), math.log(policy.erase_ratio[1]))
        ratio = math.exp(log_r)
        h = int(round(math.sqrt(target * ratio)))
        w = int(round(math.sqrt(target / ratio)))
        if 0 < h < H and 0 < w < W:
            y0 = int(rng.integers(0, H - h + 1))
            x0 = int(rng.integers(0, W - w + 1))
            img[:, y0:y0 + h, x0:x0 + w] = rng.standard_normal((img.shape[0], h, w))
            return


def _check_perm(perm, n: int) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise InvalidInputError(f"perm must be a permutation of {n} indices")
    return perm


def mixup_batch(images: np.ndarray, labels: np.ndarray, lam: float, perm) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of each item with its ``perm`` partner."""
    lam = check_range("lambda", lam, 0.0, 1.0)
    perm = _check_perm(perm, images.shape[0])
    mixed = lam * images + (1.0 - lam) * images[perm]
    y = lam * labels + (1.0 - lam) * labels[perm]
    return mixed.astype(images.dtype, copy=False), y


def cutmix_box(lam: float, height: int, width: int, rng) -> tuple[int, int, int, int]:
    """Sample a box whose unclipped area fraction is ``1 - lam``; clipped at borders."""
    lam = check_range("lambda", lam, 0.0, 1.0)
    rng = _as_rng(rng)
    cut = math.sqrt(1.0 - lam)
    ch, cw = int(height * cut), int(width * cut)
    cy = int(rng.integers(0, height))
    cx = int(rng.integers(0, width))
    y0, y1 = max(cy - ch // 2, 0), min(cy + ch // 2, height)
    x0, x1 = max(cx - cw // 2, 0), min(cx + cw // 2, width)
    return y0, y1, x0, x1


def box_lambda(box, height: int, width: int) -> float:
    """Fraction of pixels *kept* from the original image under ``box``."""
    y0, y1, x0, x1 = box
    return 1.0 - (y1 - y0) * (x1 - x0) / float(height * width)


def cutmix_batch(images: np.ndarray, labels: np.ndarray, perm, box) -> tuple[np.ndarray, np.ndarray]:
    """Paste the ``box`` region of each partner image; labels mix by realized area."""
    H, W = images.shape[-2:]
    y0, y1, x0, x1 = (int(v) for v in box)
    if not (0 <= y0 <= y1 <= H and 0 <= x0 <= x1 <= W):
        raise InvalidInputError(f"box {box} lies outside a {H}x{W} image")
    perm = _check_perm(perm, images.shape[0])
    out = images.copy()
    out[..., y0:y1, x0:x1] = images[perm][..., y0:y1, x0:x1]
    lam = box_lambda((y0, y1, x0, x1), H, W)
    y = lam * labels + (1.0 - lam) * labels[perm]
    return out, y


def replay_labels(labels: np.ndarray, record: MixRecord) -> np.ndarray:
    """Recompute mixed labels from pre-mix labels and a :class:`MixRecord`."""
    if record.kind == "none":
        return labels.copy()
    return record.lam * labels + (1.0 - record.lam) * labels[record.perm]


def make_two_view_batch(images: np.ndarray, labels, rng, config: AugmentConfig | None = None,
                        *, num_classes: int | None = None, epsilon: float = 0.1) -> TwoViewBatch:
    """Build the two-view batch for one training step.

    Each image gets two independently drawn views.  Labels are smoothed,
    then one mixing event (or none) is drawn and applied with the same
    lambda, permutation and box to both view sets, so both views of
    sample ``i`` end up with the same soft label.
    """
    config = config or AugmentConfig()
    rng = _as_rng(rng)
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] < 1:
        raise InvalidInputError(f"expected a non-empty (N, channels, H, W) batch, got {images.shape}")
    n = images.shape[0]
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if num_classes is None:
            raise InvalidInputError("num_classes is required for integer labels")
        y = one_hot(labels, num_classes)
    else:
        y = labels.astype(np.float64)
    if y.shape[0] != n:
        raise InvalidInputError(f"{n} images but {y.shape[0]} labels")
    check_range("epsilon", epsilon, 0.0, 1.0, high_open=True)
    if epsilon:
        y = (1.0 - epsilon) * y + epsilon / y.shape[1]

    va, vb = [], []
    for i in range(n):
        va.append(sample_view(images[i], rng, config.policy))
        vb.append(sample_view(images[i], rng, config.policy))
    views_a, views_b = np.stack(va), np.stack(vb)

    record = MixRecord()
    if config.mix_prob > 0 and rng.random() < config.mix_prob:
        perm = rng.permutation(n)
        if rng.random() < config.cutmix_share:
            lam = float(rng.beta(config.cutmix_alpha, config.cutmix_alpha))
            H, W = views_a.shape[-2:]
            box = cutmix_box(lam, H, W, rng)
            views_a, y_mixed = cutmix_batch(views_a, y, perm, box)
            views_b, _ = cutmix_batch(views_b, y, perm, box)
            record = MixRecord("cutmix", box_lambda(box, H, W), perm, box)
        else:
            lam = float(rng.beta(config.mixup_alpha, config.mixup_alpha))
            views_a, y_mixed = mixup_batch(views_a, y, lam, perm)
            views_b, _ = mixup_batch(views_b, y, lam, perm)
            record = MixRecord("mixup", lam, perm, None)
        y = y_mixed
    return TwoViewBatch(views_a, views_b, y, record)
