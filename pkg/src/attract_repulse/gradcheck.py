"""Central finite-difference checks of autograd gradients, in float64."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .contrastive import build_positive_sets, contrastive_regularization, info_nce_reference
from .losses import (LossConfig, cross_entropy, js_divergence, kl_divergence,
                     reverse_cross_entropy, softmax, symmetric_cross_entropy)
from .model import ConvClassifier, ModelSpec
from .teacher import MeanTeacher, mean_teacher_loss
from .train import total_loss

FD_STEP = 1e-5


def central_difference(f, x: torch.Tensor, step: float = FD_STEP) -> torch.Tensor:
    """Numerical gradient of scalar ``f`` at ``x`` by central differences."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            fp = float(f(x))
            flat[i] = orig - step
            fm = float(f(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
    return g


def autograd_gradient(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """||a - b|| / max(||a||, ||b||), with a floor so exact zeros compare as 0."""
    num = float(torch.linalg.vector_norm(a - b))
    den = max(float(torch.linalg.vector_norm(a)), float(torch.linalg.vector_norm(b)), 1e-8)
    return num / den


def _random_simplex(rng: np.random.Generator, n: int, C: int, positive: bool = True) -> torch.Tensor:
    q = rng.dirichlet(np.ones(C), size=n)
    if not positive:
        q[0] = 0.0
        q[0, rng.integers(C)] = 1.0
    return torch.from_numpy(q)


def _two_view_labels(rng: np.random.Generator, n: int, C: int) -> torch.Tensor:
    q = rng.dirichlet(np.ones(C), size=n)
    return torch.from_numpy(np.concatenate([q, q]))


@dataclass
class CheckResult:
    name: str
    cases: int
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.name:<14} cases={self.cases:<4} max_rel_err={self.max_rel_error:.2e} "
                f"tol={self.tolerance:.0e} ({self.seconds:.1f}s)")


def _loss_case_fns(rng: np.random.Generator, C: int):
    """Scalar functions of a logits tensor for each component loss."""
    n = 3
    q = _random_simplex(rng, n, C, positive=bool(rng.integers(2)))
    r = _random_simplex(rng, n, C)
    floor = -float(rng.uniform(1, 8))
    alpha = float(rng.uniform(0, 1))
    n_items = 2 * int(rng.integers(1, 5))
    labels = _two_view_labels(rng, n_items // 2, C)
    pos = build_positive_sets(labels, float(rng.uniform(0, 0.1)))
    tau = float(rng.uniform(0.05, 1.0))
    teacher_p = _random_simplex(rng, n, C)
    return {
        "cross_entropy": ((n, C), lambda z: cross_entropy(q, softmax(z)).sum()),
        "reverse_ce": ((n, C), lambda z: reverse_cross_entropy(q, softmax(z), floor).sum()),
        "symmetric_ce": ((n, C), lambda z: symmetric_cross_entropy(q, softmax(z), alpha, floor).sum()),
        "kl": ((n, C), lambda z: kl_divergence(softmax(z), r).sum()),
        "js": ((n, C), lambda z: js_divergence(softmax(z), r).sum()),
        "contrastive": ((n_items, C), lambda z: contrastive_regularization(softmax(z), pos, tau)),
        "info_nce": ((n_items, C), lambda z: info_nce_reference(softmax(z), tau)),
        "mean_teacher": ((n, C), lambda z: mean_teacher_loss(softmax(z), teacher_p)),
    }


def check_component_losses(cases: int = 100, seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    """FD vs autograd for every loss operation; ``cases`` random draws each, C in {2, 5, 10}."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    elapsed: dict[str, float] = {}
    for k in range(cases):
        C = (2, 5, 10)[k % 3]
        for name, (shape, f) in _loss_case_fns(rng, C).items():
            t = time.perf_counter()
            z = torch.from_numpy(rng.normal(0, 2, size=shape))
            err = relative_error(autograd_gradient(f, z), central_difference(f, z))
            worst[name] = max(worst.get(name, 0.0), err)
            elapsed[name] = elapsed.get(name, 0.0) + time.perf_counter() - t
    return [CheckResult(n, cases, worst[n], tol, elapsed[n]) for n in worst]


def tiny_model_spec() -> ModelSpec:
    """2 stages of width 8, 3 classes, no dropout: cheap enough for coordinate-wise FD."""
    return ModelSpec(num_classes=3, in_channels=3, widths=(8, 8), blocks_per_stage=1,
                     dropout=0.0, aux_stage=0)


def end_to_end_case(seed: int, cfg: LossConfig | None = None):
    """Build ``(model, objective)`` for the full loss on a random tiny batch.

    ``objective()`` evaluates the loss at the model's current parameters.
    """
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    spec = tiny_model_spec()
    model = ConvClassifier(spec).double()
    teacher = MeanTeacher(model, 0.9)
    with torch.no_grad():  # teacher distinct from student
        for p in teacher.model.parameters():
            p.add_(0.1 * torch.randn_like(p))
    n = 2
    x = torch.from_numpy(rng.normal(size=(2 * n, 3, 4, 4)))
    labels = _two_view_labels(rng, n, spec.num_classes)
    cfg = cfg or LossConfig(alpha=0.1, beta=1.0, gamma=1.0, delta=0.005, tau=0.5, aux_weight=0.3)
    positives = build_positive_sets(labels, cfg.delta)
    teacher_out = teacher(x)
    model.train()

    def objective():
        return total_loss(model(x), teacher_out, labels, cfg, positives).total

    return model, objective


def parameter_central_difference(model, objective, step: float = FD_STEP) -> torch.Tensor:
    """FD gradient w.r.t. every parameter, perturbing one coordinate at a time in place."""
    out = []
    with torch.no_grad():
        for p in model.parameters():
            flat = p.view(-1)
            g = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                fp = float(objective())
                flat[i] = orig - step
                fm = float(objective())
                flat[i] = orig
                g[i] = (fp - fm) / (2 * step)
            out.append(g)
    return torch.cat(out)


def check_end_to_end(cases: int = 100, seed: int = 0, tol: float = 1e-3) -> CheckResult:
    """FD vs autograd of the full objective w.r.t. every parameter of the tiny model."""
    t = time.perf_counter()
    worst = 0.0
    for k in range(cases):
        model, objective = end_to_end_case(seed * 100_003 + k)
        model.zero_grad()
        objective().backward()
        g_auto = torch.cat([p.grad.reshape(-1) for p in model.parameters()])
        worst = max(worst, relative_error(g_auto, parameter_central_difference(model, objective)))
    return CheckResult("end_to_end", cases, worst, tol, time.perf_counter() - t)


def run_suite(cases: int = 100, seed: int = 0, tiny_model: bool = True) -> list[CheckResult]:
    results = check_component_losses(cases, seed)
    if tiny_model:
        results.append(check_end_to_end(cases, seed))
    return results
