"""Joint-embedding objectives: VICReg and NT-Xent, with per-term breakdowns.

All functions take two ``N x D`` tensors of paired embeddings (row ``i`` of
each is a positive pair) and are differentiable through autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .exceptions import DegenerateInputError, ValidationError


@dataclass(frozen=True)
class VicregParams:
    """VICReg weights and constants.

    ``invariance_reduction="sum"`` uses the per-pair squared distance summed
    over dimensions; ``"mean"`` also divides by ``D`` (the ``mse_loss``
    convention of reference training code), which keeps the invariance term
    from swamping the variance hinge on wide expanders.
    """

    invariance: float = 25.0  # lambda
    variance: float = 25.0  # mu
    covariance: float = 1.0  # nu
    gamma: float = 1.0
    eps: float = 1e-4
    invariance_reduction: str = "sum"

    def __post_init__(self):
        if min(self.invariance, self.variance, self.covariance) < 0:
            raise ValueError("VICReg weights must be non-negative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.invariance_reduction not in ("sum", "mean"):
            raise ValueError(f"invariance_reduction must be 'sum' or 'mean', got {self.invariance_reduction!r}")


@dataclass(frozen=True)
class SimclrParams:
    temperature: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class LossBreakdown:
    """Scalar loss tensor plus the value and weight of each term."""

    total: torch.Tensor
    components: dict[str, float]
    weights: dict[str, float] = field(default_factory=dict)

    def weighted_sum(self) -> float:
        return sum(self.weights.get(k, 1.0) * v for k, v in self.components.items())

    def as_row(self) -> dict[str, float]:
        return {"total": float(self.total.detach()), **{f"comp_{k}": v for k, v in self.components.items()}}


def _check_pair(za: torch.Tensor, zb: torch.Tensor) -> None:
    if za.dim() != 2 or za.shape != zb.shape:
        raise ValidationError(f"paired embeddings must share an N x D shape, got {tuple(za.shape)} and {tuple(zb.shape)}")
    if za.shape[0] < 1:
        raise ValidationError("need at least one pair")


def invariance_term(za: torch.Tensor, zb: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Mean over pairs of the squared Euclidean distance (divided by ``D`` for ``"mean"``)."""
    _check_pair(za, zb)
    sq = (za - zb).pow(2).sum(dim=1).mean()
    return sq / za.shape[1] if reduction == "mean" else sq


def variance_term(z: torch.Tensor, gamma: float = 1.0, eps: float = 1e-4) -> torch.Tensor:
    """Mean hinge ``max(0, gamma - sqrt(var + eps))`` over columns (unbiased variance)."""
    if z.dim() != 2 or z.shape[0] < 2:
        raise ValidationError(f"variance term needs N >= 2 rows, got shape {tuple(z.shape)}")
    std = torch.sqrt(z.var(dim=0, unbiased=True) + eps)
    return F.relu(gamma - std).mean()


def covariance_term(z: torch.Tensor) -> torch.Tensor:
    """Sum of squared off-diagonal covariance entries divided by ``D``."""
    if z.dim() != 2 or z.shape[0] < 2:
        raise ValidationError(f"covariance term needs N >= 2 rows, got shape {tuple(z.shape)}")
    n, d = z.shape
    zc = z - z.mean(dim=0)
    cov = zc.T @ zc / (n - 1)
    off = cov - torch.diag(torch.diagonal(cov))
    return off.pow(2).sum() / d


def vicreg_loss(za: torch.Tensor, zb: torch.Tensor, p: VicregParams = VicregParams()) -> LossBreakdown:
    _check_pair(za, zb)
    inv = invariance_term(za, zb, p.invariance_reduction)
    var_a, var_b = variance_term(za, p.gamma, p.eps), variance_term(zb, p.gamma, p.eps)
    cov_a, cov_b = covariance_term(za), covariance_term(zb)
    total = p.invariance * inv + p.variance * (var_a + var_b) + p.covariance * (cov_a + cov_b)
    terms = {"invariance": inv, "variance_a": var_a, "variance_b": var_b, "covariance_a": cov_a, "covariance_b": cov_b}
    weights = {
        "invariance": p.invariance,
        "variance_a": p.variance,
        "variance_b": p.variance,
        "covariance_a": p.covariance,
        "covariance_b": p.covariance,
    }
    return LossBreakdown(total, {k: float(v.detach()) for k, v in terms.items()}, weights)


def nt_xent(za: torch.Tensor, zb: torch.Tensor, p: SimclrParams = SimclrParams()) -> LossBreakdown:
    """Normalised-temperature cross entropy averaged over all ``2N`` anchors."""
    _check_pair(za, zb)
    n = za.shape[0]
    if n < 2:
        raise ValidationError("NT-Xent needs N >= 2 pairs")
    z = torch.cat([za, zb], dim=0)
    norms = z.norm(dim=1)
    if bool((norms == 0).any()):
        raise DegenerateInputError("NT-Xent is undefined for zero-norm embeddings")
    z = z / norms[:, None]
    logits = z @ z.T / p.temperature
    self_mask = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(z.device)
    total = F.cross_entropy(logits, targets, reduction="mean")
    return LossBreakdown(total, {"contrastive": float(total.detach())}, {"contrastive": 1.0})


def ln_uniform_nt_xent(n: int) -> float:
    """NT-Xent value when every embedding is identical."""
    return math.log(2 * n - 1)


LOSSES = {"vicreg": vicreg_loss, "simclr": nt_xent}
