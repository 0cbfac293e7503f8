"""Sign-gradient attacks on a homography estimator: FGSM, BIM, PGD and SoA.

A *metric* is any callable ``metric(model, x1_adv, x2_adv, pair) -> (B,)``
that the attack maximizes. The two views are perturbed jointly (one gradient
over the stacked pair) but each keeps its own l-inf ball around its clean image.
Attack state is kept in float64 so the ball constraint holds to rounding error
even when the model itself runs in float32.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .errors import AttackDiverged, DegenerateConfiguration, ExcessiveCanvas, ZeroGradientWarning
from .losses import loss_S, loss_SoA

Metric = Callable[..., torch.Tensor]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    beta: float = 5 / 255
    iters: int = 3
    norm: str = "inf"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if self.norm != "inf":
            raise ValueError("only the l-inf threat model is supported")


@dataclass
class ImagePair:
    """Batch of view pairs ``(B, C, H, W)`` with optional ground truth ``(B, 3, 3)``."""

    x1: torch.Tensor
    x2: torch.Tensor
    H_gt: torch.Tensor | None = None

    def __post_init__(self):
        if self.x1.shape != self.x2.shape:
            raise ValueError("views must have matching shapes")

    def double(self) -> "ImagePair":
        H = None if self.H_gt is None else self.H_gt.double()
        return ImagePair(self.x1.double(), self.x2.double(), H)


@dataclass
class AttackedPair:
    x1: torch.Tensor
    x2: torch.Tensor
    delta_norm: float
    loss_trace: list[float] = field(default_factory=list)
    # (iterations + 1, B) per-sample values behind ``loss_trace``
    sample_trace: torch.Tensor | None = None

    def as_pair(self, H_gt=None) -> ImagePair:
        return ImagePair(self.x1, self.x2, H_gt)


# ---------------------------------------------------------------------------
# Metrics


def alignment_metric(model, x1_adv, x2_adv, pair: ImagePair) -> torch.Tensor:
    """Shared-region misalignment of the clean pair under the attacked prediction."""
    H = model(x1_adv, x2_adv)
    return loss_S(pair.x1, pair.x2, H)


def soa_metric(reference: torch.Tensor) -> Metric:
    """Homography deviation plus aligned-content deviation from ``reference``."""

    def metric(model, x1_adv, x2_adv, pair: ImagePair) -> torch.Tensor:
        H = model(x1_adv, x2_adv)
        return loss_SoA(pair.x1, pair.x2, reference, H)

    return metric


def pixel_sum_metric(model, x1_adv, x2_adv, pair) -> torch.Tensor:
    return x1_adv.flatten(1).sum(1) + x2_adv.flatten(1).sum(1)


# ---------------------------------------------------------------------------
# Core loop


def _project(adv, clean, eps):
    adv = torch.minimum(torch.maximum(adv, clean - eps), clean + eps)
    return adv.clamp(0.0, 1.0)


def _iterate(model, pair: ImagePair, metrics: Sequence[Metric], beta: float, eps: float,
             trace_metric: Metric | None, start: tuple | None = None) -> AttackedPair:
    pair = pair.double()
    x1, x2 = pair.x1, pair.x2
    if start is None:
        a1, a2 = x1.clone(), x2.clone()
    else:
        a1, a2 = start
    trace = []

    def record(b1, b2):
        if trace_metric is not None:
            with torch.no_grad():
                trace.append(trace_metric(model, b1, b2, pair).detach())

    try:
        record(a1, a2)
        for metric in metrics:
            a1 = a1.detach().requires_grad_(True)
            a2 = a2.detach().requires_grad_(True)
            loss = metric(model, a1, a2, pair).sum()
            g1, g2 = torch.autograd.grad(loss, [a1, a2], allow_unused=True)
            g1 = torch.zeros_like(a1) if g1 is None else g1
            g2 = torch.zeros_like(a2) if g2 is None else g2
            if not (g1.any() or g2.any()):
                warnings.warn("attack gradient is identically zero", ZeroGradientWarning)
            with torch.no_grad():
                a1 = _project(a1 + beta * torch.sign(g1), x1, eps)
                a2 = _project(a2 + beta * torch.sign(g2), x2, eps)
            record(a1, a2)
    except (DegenerateConfiguration, ExcessiveCanvas) as exc:
        raise AttackDiverged(str(exc)) from exc
    a1, a2 = a1.detach(), a2.detach()
    delta = max(float((a1 - x1).abs().max()), float((a2 - x2).abs().max()))
    per_sample = torch.stack(trace) if trace else None
    return AttackedPair(a1, a2, delta, [float(t.mean()) for t in trace], per_sample)


def fgsm(model, pair: ImagePair, metric: Metric, epsilon: float, track: bool = True) -> AttackedPair:
    """Single sign step of size ``epsilon``."""
    return _iterate(model, pair, [metric], epsilon, epsilon, metric if track else None)


def bim(model, pair: ImagePair, metric: Metric, config: AttackConfig,
        track: bool = True) -> AttackedPair:
    """``config.iters`` sign steps of size ``beta`` with projection after each."""
    return _iterate(model, pair, [metric] * config.iters, config.beta, config.epsilon,
                    metric if track else None)


def pgd(model, pair: ImagePair, metric: Metric, config: AttackConfig, random_start: bool = True,
        generator: torch.Generator | None = None, track: bool = True) -> AttackedPair:
    """BIM, optionally started from a uniform draw inside the epsilon ball."""
    start = None
    if random_start:
        p = pair.double()
        eps = config.epsilon
        u1 = torch.rand(p.x1.shape, generator=generator, dtype=torch.float64)
        u2 = torch.rand(p.x2.shape, generator=generator, dtype=torch.float64)
        start = (_project(p.x1 + (2 * u1 - 1) * eps, p.x1, eps),
                 _project(p.x2 + (2 * u2 - 1) * eps, p.x2, eps))
    return _iterate(model, pair, [metric] * config.iters, config.beta, config.epsilon,
                    metric if track else None, start)


def reference_homography(model, pair: ImagePair, H_gt=None) -> torch.Tensor:
    """Ground truth when known, otherwise the model's own prediction on clean inputs."""
    if H_gt is not None:
        return torch.as_tensor(H_gt).double()
    if pair.H_gt is not None:
        return pair.H_gt.double()
    with torch.no_grad():
        try:
            return model(pair.x1, pair.x2).detach().double()
        except (DegenerateConfiguration, ExcessiveCanvas) as exc:
            raise AttackDiverged(str(exc)) from exc


def soa(model, pair: ImagePair, H_gt=None, config: AttackConfig = AttackConfig(),
        track: bool = True) -> AttackedPair:
    """Stitching-oriented attack.

    The first step ascends the shared-region misalignment; later steps ascend
    the homography deviation plus aligned-content deviation from the reference
    homography.
    """
    reference = reference_homography(model, pair, H_gt)
    later = soa_metric(reference)
    metrics = [alignment_metric] + [later] * (config.iters - 1)
    return _iterate(model, pair, metrics, config.beta, config.epsilon, later if track else None)


ATTACKS = ("fgsm", "bim", "pgd", "soa")


def run_attack(name: str, model, pair: ImagePair, config: AttackConfig,
               generator: torch.Generator | None = None, track: bool = True) -> AttackedPair:
    """Dispatch by name; FGSM/BIM/PGD maximize the shared-region misalignment."""
    if name == "fgsm":
        return fgsm(model, pair, alignment_metric, config.epsilon, track=track)
    if name == "bim":
        return bim(model, pair, alignment_metric, config, track=track)
    if name == "pgd":
        return pgd(model, pair, alignment_metric, config, True, generator, track=track)
    if name == "soa":
        return soa(model, pair, None, config, track=track)
    raise ValueError(f"unknown attack {name!r}; expected one of {ATTACKS}")
