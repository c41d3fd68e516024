"""Objectives for the two-generator / two-discriminator training system.

Least-squares adversarial terms push translated images toward the target
domain, the cyclic term makes the two generators mutual inverses, and
the identity term pins each generator to act as the identity on inputs
already in its output domain. L1 norms are per-element means so the
weighting stays resolution independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .tensor import (
    ContractError,
    NumericError,
    Tensor,
    abs_val,
    add,
    add_scalar,
    log_sigmoid,
    mean_all,
    mul_scalar,
    square,
    sub,
)

LSGAN_EQUILIBRIUM = 0.25  # both losses at constant score 1/2


@dataclass
class LossWeights:
    """Coefficients of the cyclic and identity terms in the total objective."""

    lambda_cyc: float = 10.0
    gamma_id: float = 5.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ContractError(f"LossWeights.{f.name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    """Per-iteration scalars, one CSV row."""

    iteration: int
    epoch: int
    g_adv_ab: float
    g_adv_ba: float
    d_a: float
    d_b: float
    cyclic: float
    identity: float
    total_g: float

    CSV_HEADER = "iteration,epoch,g_adv_AB,g_adv_BA,d_A,d_B,cyclic,identity,total_G"

    def csv_row(self) -> str:
        vals = (self.g_adv_ab, self.g_adv_ba, self.d_a, self.d_b,
                self.cyclic, self.identity, self.total_g)
        return f"{self.iteration},{self.epoch}," + ",".join(f"{v:.10g}" for v in vals)

    @classmethod
    def from_csv_row(cls, row: str) -> "LossReport":
        parts = row.strip().split(",")
        return cls(int(parts[0]), int(parts[1]), *(float(v) for v in parts[2:9]))


def _require_nonempty(name: str, t: Tensor) -> None:
    if t.data.size == 0:
        raise ContractError(f"{name}: empty score tensor")


def lsgan_generator_loss(d_scores_on_fake: Tensor) -> Tensor:
    """mean((score - 1)^2) over all score-map elements."""
    _require_nonempty("lsgan_generator_loss", d_scores_on_fake)
    return mean_all(square(add_scalar(d_scores_on_fake, -1.0)))


def lsgan_discriminator_loss(d_scores_real: Tensor, d_scores_fake: Tensor) -> Tensor:
    """0.5*mean((real - 1)^2) + 0.5*mean(fake^2).

    The fake scores must come from a detached copy of the generated image
    so no gradient reaches the generator; the trainer enforces this.
    """
    _require_nonempty("lsgan_discriminator_loss", d_scores_real)
    _require_nonempty("lsgan_discriminator_loss", d_scores_fake)
    real_term = mean_all(square(add_scalar(d_scores_real, -1.0)))
    fake_term = mean_all(square(d_scores_fake))
    return add(mul_scalar(real_term, 0.5), mul_scalar(fake_term, 0.5))


def original_gan_generator_loss(d_scores_on_fake: Tensor) -> Tensor:
    """Saturating log-likelihood generator term: mean(log(1 - sigmoid(score))).

    Kept as a documented alternative to demonstrate the instability of the
    sigmoid cross-entropy objective; not tuned.
    """
    _require_nonempty("original_gan_generator_loss", d_scores_on_fake)
    return mean_all(log_sigmoid(mul_scalar(d_scores_on_fake, -1.0)))


def original_gan_discriminator_loss(d_scores_real: Tensor, d_scores_fake: Tensor) -> Tensor:
    """-0.5*mean(log sigmoid(real)) - 0.5*mean(log(1 - sigmoid(fake)))."""
    _require_nonempty("original_gan_discriminator_loss", d_scores_real)
    _require_nonempty("original_gan_discriminator_loss", d_scores_fake)
    real_term = mean_all(log_sigmoid(d_scores_real))
    fake_term = mean_all(log_sigmoid(mul_scalar(d_scores_fake, -1.0)))
    return add(mul_scalar(real_term, -0.5), mul_scalar(fake_term, -0.5))


def mean_abs_error(a: Tensor, b: Tensor) -> Tensor:
    """Per-element mean of |a - b| (the resolution-independent l1 form)."""
    return mean_all(abs_val(sub(a, b)))


def cyclic_loss(g_ab, g_ba, x_a: Tensor, x_b: Tensor, train: bool = True) -> Tensor:
    """Round-trip reconstruction error through both generators, both directions."""
    aba = g_ba.forward(g_ab.forward(x_a, train=train), train=train)
    bab = g_ab.forward(g_ba.forward(x_b, train=train), train=train)
    return add(mean_abs_error(aba, x_a), mean_abs_error(bab, x_b))


def identity_loss(g_ab, g_ba, x_a: Tensor, x_b: Tensor, train: bool = True) -> Tensor:
    """Deviation of each generator from the identity on its own output domain."""
    idt_b = mean_abs_error(g_ab.forward(x_b, train=train), x_b)
    idt_a = mean_abs_error(g_ba.forward(x_a, train=train), x_a)
    return add(idt_b, idt_a)


def total_generator_objective(
    g_adv_ab: Tensor,
    g_adv_ba: Tensor,
    cyclic: Tensor,
    identity: Tensor,
    weights: LossWeights,
) -> Tensor:
    """g_adv_AB + g_adv_BA + lambda*cyclic + gamma*identity as one scalar."""
    parts = {"g_adv_ab": g_adv_ab, "g_adv_ba": g_adv_ba,
             "cyclic": cyclic, "identity": identity}
    for name, t in parts.items():
        if not math.isfinite(float(t.data)):
            raise NumericError(f"total_generator_objective: component {name} is non-finite")
    total = add(g_adv_ab, g_adv_ba)
    if weights.lambda_cyc != 0.0:
        total = add(total, mul_scalar(cyclic, weights.lambda_cyc))
    if weights.gamma_id != 0.0:
        total = add(total, mul_scalar(identity, weights.gamma_id))
    return total
