"""Small convolutional classifier with an auxiliary head on an intermediate stage."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from ._validation import as_tensor, check_range, check_same_shape
from .exceptions import InvalidInputError

_ACTIVATIONS = {"silu": nn.SiLU, "relu": nn.ReLU, "gelu": nn.GELU}


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of :class:`ConvClassifier`.

    ``aux_stage`` is the 0-based index of the stage the auxiliary head reads
    from; it must come before the last stage.
    """

    num_classes: int = 10
    in_channels: int = 3
    widths: tuple[int, ...] = (64, 128, 256)
    blocks_per_stage: int = 2
    dropout: float = 0.3
    aux_stage: int = 1
    activation: str = "silu"
    projector: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.num_classes < 2:
            raise InvalidInputError("num_classes must be >= 2")
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise InvalidInputError("need at least two stages with positive widths")
        if not 0 <= self.aux_stage < len(self.widths) - 1:
            raise InvalidInputError(
                f"aux_stage must be in [0, {len(self.widths) - 1}), got {self.aux_stage}"
            )
        if self.blocks_per_stage < 1:
            raise InvalidInputError("blocks_per_stage must be >= 1")
        check_range("dropout", self.dropout, 0.0, 1.0, high_open=True)
        if self.activation not in _ACTIVATIONS:
            raise InvalidInputError(f"activation must be one of {sorted(_ACTIVATIONS)}")

    @property
    def feature_width(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class ModelOutput(NamedTuple):
    logits: torch.Tensor
    aux_logits: torch.Tensor
    features: torch.Tensor
    embedding: torch.Tensor | None = None


def _stage(cin: int, cout: int, blocks: int, act) -> nn.Sequential:
    layers = []
    for b in range(blocks):
        layers += [
            nn.Conv2d(cin if b == 0 else cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            act(),
        ]
    return nn.Sequential(*layers)


class ConvClassifier(nn.Module):
    """conv-BN-activation stages, 2x average pooling between stages, global pooling head.

    The auxiliary head (global pool + linear) reads the output of stage
    ``spec.aux_stage``.  With ``spec.projector`` a two-layer MLP maps the
    pooled features to an embedding used by feature-space contrast.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        act = _ACTIVATIONS[spec.activation]
        stages, cin = [], spec.in_channels
        for w in spec.widths:
            stages.append(_stage(cin, w, spec.blocks_per_stage, act))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.aux_head = nn.Linear(spec.widths[spec.aux_stage], spec.num_classes)
        self.dropout = nn.Dropout(spec.dropout)
        self.head = nn.Linear(spec.feature_width, spec.num_classes)
        self.projector = None
        if spec.projector:
            fw = spec.feature_width
            self.projector = nn.Sequential(nn.Linear(fw, fw), act(), nn.Linear(fw, fw))

    def forward(self, x: torch.Tensor) -> ModelOutput:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise InvalidInputError(
                f"expected (n, {self.spec.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        aux = None
        for s, stage in enumerate(self.stages):
            if s > 0:
                x = F.avg_pool2d(x, 2) if min(x.shape[-2:]) >= 2 else x
            x = stage(x)
            if s == self.spec.aux_stage:
                aux = self.aux_head(x.mean(dim=(2, 3)))
        features = x.mean(dim=(2, 3))
        logits = self.head(self.dropout(features))
        emb = self.projector(features) if self.projector is not None else None
        return ModelOutput(logits, aux, features, emb)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def aux_fusion(final_probs, aux_probs, fusion_weight: float) -> torch.Tensor:
    """(1 - w) * final + w * aux."""
    w = check_range("fusion_weight", fusion_weight, 0.0, 1.0)
    final_probs, aux_probs = as_tensor(final_probs), as_tensor(aux_probs)
    check_same_shape(final_probs, aux_probs, ("final_probs", "aux_probs"))
    if w == 0.0:
        return final_probs
    if w == 1.0:
        return aux_probs
    return (1.0 - w) * final_probs + w * aux_probs


def output_probs(out: ModelOutput, fusion_weight: float = 0.0) -> torch.Tensor:
    """Class probabilities from a forward pass, optionally fused with the aux head."""
    p = torch.softmax(out.logits, dim=-1)
    if fusion_weight == 0.0:
        return p
    return aux_fusion(p, torch.softmax(out.aux_logits, dim=-1), fusion_weight)


def ten_crops(images: torch.Tensor, crop_size: int) -> torch.Tensor:
    """``(n, ch, H, W)`` -> ``(n, 10, ch, crop, crop)``: 4 corners, center, then their mirror images."""
    H, W = images.shape[-2:]
    c = int(crop_size)
    if c < 1 or H < c or W < c:
        raise InvalidInputError(f"crop size {c} does not fit a {H}x{W} image")
    top, left = (H - c) // 2, (W - c) // 2
    crops = [
        images[..., :c, :c],
        images[..., :c, W - c:],
        images[..., H - c:, :c],
        images[..., H - c:, W - c:],
        images[..., top:top + c, left:left + c],
    ]
    crops += [t.flip(-1) for t in crops]
    return torch.stack(crops, dim=1)


@torch.no_grad()
def predict_proba(model: nn.Module, images, fusion_weight: float = 0.0,
                  batch_size: int = 256) -> torch.Tensor:
    """Eval-mode class probabilities for a batch of images."""
    was_training = model.training
    model.eval()
    x = as_tensor(images, dtype=next(model.parameters()).dtype)
    try:
        return torch.cat([
            output_probs(model(x[i:i + batch_size]), fusion_weight)
            for i in range(0, x.shape[0], batch_size)
        ])
    finally:
        model.train(was_training)


@torch.no_grad()
def tencrop_predict(model: nn.Module, images, crop_size: int, fusion_weight: float = 0.0,
                    batch_size: int = 64) -> torch.Tensor:
    """Average of fused eval-mode probabilities over the ten crops of each image.

    Accepts a single ``(ch, H, W)`` image or a batch.
    """
    x = as_tensor(images, dtype=next(model.parameters()).dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    out = []
    for i in range(0, x.shape[0], batch_size):
        crops = ten_crops(x[i:i + batch_size], crop_size)
        n = crops.shape[0]
        probs = predict_proba(model, crops.flatten(0, 1), fusion_weight)
        out.append(probs.view(n, 10, -1).mean(dim=1))
    probs = torch.cat(out)
    return probs[0] if single else probs
