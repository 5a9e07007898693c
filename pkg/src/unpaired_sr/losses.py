"""Training objectives for both stages.

Adversarial losses take raw discriminator logits and use
``softplus(-z) = -log(sigmoid(z))`` so no probability is ever formed
explicitly. Generator-side losses are the label-swapped counterparts of the
discriminator-side ones; their gradients with respect to generated inputs
are those of the non-saturating ``-log(sigmoid(fake))`` form.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import CompositionError, NumericError, ShapeError

LOG4 = 2.0 * math.log(2.0)

GENERATOR = "generator"
DISCRIMINATOR = "discriminator"


def _check_finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if t is not None and torch.isnan(t).any():
            raise NumericError("NaN in loss input")


def _check_side(side: str) -> None:
    if side not in (GENERATOR, DISCRIMINATOR):
        raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


def _bce_pair(positive: torch.Tensor, negative: torch.Tensor) -> torch.Tensor:
    """-mean log sigmoid(positive) - mean log(1 - sigmoid(negative))."""
    return F.softplus(-positive).mean() + F.softplus(negative).mean()


def gan_loss(d_real: torch.Tensor, d_fake: torch.Tensor, side: str) -> torch.Tensor:
    """Standard cross-entropy GAN loss on logit maps.

    The discriminator scores ``d_real`` as real and ``d_fake`` as fake; the
    generator side swaps the labels.
    """
    _check_side(side)
    _check_finite(d_real, d_fake)
    if side == DISCRIMINATOR:
        return _bce_pair(d_real, d_fake)
    return _bce_pair(d_fake, d_real)


def gan_real_hr_loss(d_on_real_hr: torch.Tensor, d_on_sr_of_real_lr: torch.Tensor,
                     side: str) -> torch.Tensor:
    """Adversarial loss between real HR images and SR outputs of real LR inputs."""
    return gan_loss(d_on_real_hr, d_on_sr_of_real_lr, side)


def ragan_loss(c_real: torch.Tensor, c_fake: torch.Tensor, side: str) -> torch.Tensor:
    """Relativistic average GAN loss from backbone scores ``C(x)``.

    Real scores are compared with the mean fake score and vice versa. The
    generator side is ``-E log D(fake, real) - E log(1 - D(real, fake))``;
    the discriminator side swaps the two labels.
    """
    _check_side(side)
    _check_finite(c_real, c_fake)
    rel_real = c_real - c_fake.mean()
    rel_fake = c_fake - c_real.mean()
    if side == GENERATOR:
        return _bce_pair(rel_fake, rel_real)
    return _bce_pair(rel_real, rel_fake)


def adaptive_feature_loss(d_on_gen_features: torch.Tensor,
                          d_on_real_features: torch.Tensor, side: str) -> torch.Tensor:
    """Domain-confusion loss on SR features of generated vs. real LR inputs.

    The discriminator treats generated-LR features as the positive class;
    the feature extractor is trained with the labels swapped.
    """
    _check_side(side)
    _check_finite(d_on_gen_features, d_on_real_features)
    if d_on_gen_features.shape[1:] != d_on_real_features.shape[1:]:
        raise ShapeError(f"feature logit maps differ: {tuple(d_on_gen_features.shape)} "
                         f"vs {tuple(d_on_real_features.shape)}")
    if side == DISCRIMINATOR:
        return _bce_pair(d_on_gen_features, d_on_real_features)
    return _bce_pair(d_on_real_features, d_on_gen_features)


def _match(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def l1_content_loss(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    _match(sr, hr, "l1 content loss")
    return (sr - hr).abs().mean()


def cycle_loss(x_syn: torch.Tensor, recon_syn: torch.Tensor,
               x_real: torch.Tensor | None = None,
               recon_real: torch.Tensor | None = None) -> torch.Tensor:
    """Mean absolute reconstruction error of both cycles.

    The second cycle may be omitted (single-cycle variant).
    """
    _match(x_syn, recon_syn, "cycle loss (synthetic branch)")
    loss = (recon_syn - x_syn).abs().mean()
    if x_real is not None:
        _match(x_real, recon_real, "cycle loss (real branch)")
        loss = loss + (recon_real - x_real).abs().mean()
    return loss


@dataclass(frozen=True)
class LossWeights:
    w1: float = 2.0
    w2: float = 2.0
    w3: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 1.0
    lambda4: float = 2.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not (value >= 0.0 and math.isfinite(value)):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {value}")


STAGE1_TERMS = (("gan_g", "w1"), ("gan_f", "w2"), ("cycle", "w3"))
STAGE2_TERMS = (("l1", "lambda1"), ("ragan", "lambda2"), ("gan_real", "lambda3"),
                ("ada", "lambda4"))


@dataclass
class LossReport:
    """Raw loss terms, the weights applied to them, and their weighted sum."""

    terms: dict[str, float]
    weights: dict[str, float]
    total: float
    loss: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def recompute(self) -> float:
        total = 0.0
        for name, value in self.terms.items():
            total = total + self.weights[name] * value
        return total

    def record(self, step: int) -> dict:
        return {"step": step, **self.terms, "total": self.total}

    def to_json(self, step: int) -> str:
        return json.dumps(self.record(step))


def _weighted(components: dict, weights: LossWeights, table) -> LossReport:
    terms: dict[str, float] = {}
    used: dict[str, float] = {}
    total_t = None
    total = 0.0
    for name, wname in table:
        w = getattr(weights, wname)
        if name not in components or components[name] is None:
            if w > 0:
                raise CompositionError(f"objective term {name!r} has weight {w} but is missing")
            continue
        value = components[name]
        # accumulate in float64 on the Python side in the same fixed order
        # used by recompute(), so reported totals are bit-reproducible
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"loss term {name} is {v}")
        terms[name] = v
        used[name] = w
        total = total + w * v
        if torch.is_tensor(value) and value.requires_grad and w > 0:
            total_t = w * value if total_t is None else total_t + w * value
    return LossReport(terms=terms, weights=used, total=total, loss=total_t)


def stage1_objective(components: dict, weights: LossWeights) -> LossReport:
    """``w1 * gan_g + w2 * gan_f + w3 * cycle``. Zero-weight terms may be absent."""
    return _weighted(components, weights, STAGE1_TERMS)


def stage2_objective(components: dict, weights: LossWeights) -> LossReport:
    """``l1 * lambda1 + ragan * lambda2 + gan_real * lambda3 + ada * lambda4``."""
    return _weighted(components, weights, STAGE2_TERMS)
