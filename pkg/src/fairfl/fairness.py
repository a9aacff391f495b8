"""Demographic-parity measurements and the smoothed DDP penalty.

DDP here is the sum over both labels of the absolute prediction-rate gap,
which for binary predictions is twice the positive-rate gap and lives in
``[0, 2]``.  Many papers report the single-label gap instead; ``ddp_gap``
gives that number.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClientDataset
from .model import LossReport, ModelParams, bce_from_logits, logits_with_vjp
from .numerics import normal_cdf, normal_pdf


class MissingGroupError(ValueError):
    pass


@dataclass(frozen=True)
class FairnessPenaltyConfig:
    eta: float = 0.0
    bandwidth_h: float = 0.1

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.bandwidth_h <= 0:
            raise ValueError("bandwidth_h must be > 0")


@dataclass(frozen=True)
class GroupRates:
    r0: float
    r1: float
    n0: int
    n1: int


def _masks(s) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s)
    m1 = s == 1
    m0 = ~m1
    if not m0.any() or not m1.any():
        raise MissingGroupError(f"sensitive group s={0 if not m0.any() else 1} is empty")
    return m0, m1


def positive_rates(predictions, s) -> tuple[float, float]:
    pred = np.asarray(predictions)
    if pred.shape != np.shape(s):
        raise ValueError("predictions and s must have equal length")
    m0, m1 = _masks(s)
    return float(np.mean(pred[m0] == 1)), float(np.mean(pred[m1] == 1))


def ddp_hard(predictions, s) -> float:
    """Sum over both labels of |P(yhat=y|s=0) - P(yhat=y|s=1)|."""
    p0, p1 = positive_rates(predictions, s)
    return abs(p0 - p1) + abs((1.0 - p0) - (1.0 - p1))


def ddp_gap(predictions, s) -> float:
    p0, p1 = positive_rates(predictions, s)
    return abs(p0 - p1)


def npr(predictions, s, group: int) -> float:
    pred = np.asarray(predictions)
    mask = np.asarray(s) == group
    if not mask.any():
        raise MissingGroupError(f"sensitive group s={group} is empty")
    return float(np.mean(pred[mask] == 0))


def smoothed_rates(z: np.ndarray, s, h: float) -> GroupRates:
    m0, m1 = _masks(s)
    phi = normal_cdf(np.asarray(z) / h)
    return GroupRates(float(np.mean(phi[m0])), float(np.mean(phi[m1])), int(m0.sum()), int(m1.sum()))


def kde_penalty_from_logits(z: np.ndarray, s, h: float) -> tuple[float, np.ndarray]:
    """Smoothed DDP and its derivative with respect to each logit.

    Each group's positive rate is the mean of ``Phi(z/h)``; the penalty is
    ``2*|r0 - r1|`` with subgradient zero at an exact tie.
    """
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    z = np.asarray(z, dtype=np.float64)
    m0, m1 = _masks(s)
    u = z / h
    phi = normal_cdf(u)
    r0, r1 = float(np.mean(phi[m0])), float(np.mean(phi[m1]))
    diff = r0 - r1
    dz = np.zeros_like(z)
    if diff != 0.0:
        dens = normal_pdf(u) / h
        sign = 2.0 if diff > 0 else -2.0
        dz[m0] = sign * dens[m0] / m0.sum()
        dz[m1] = -sign * dens[m1] / m1.sum()
    return 2.0 * abs(diff), dz


def kde_ddp_penalty_and_grad(params: ModelParams, data: ClientDataset, h: float):
    z, vjp = logits_with_vjp(params, data.X)
    pen, dz = kde_penalty_from_logits(z, data.s, h)
    return pen, vjp(dz)


def fair_loss_and_grad(params: ModelParams, data: ClientDataset, cfg: FairnessPenaltyConfig) -> LossReport:
    """BCE plus ``eta`` times the smoothed DDP penalty."""
    if len(data) == 0:
        raise ValueError("fair_loss_and_grad: empty dataset")
    z, vjp = logits_with_vjp(params, data.X)
    loss, dz = bce_from_logits(z, data.y)
    if cfg.eta == 0.0:
        return LossReport(loss, vjp(dz))
    pen, dz_pen = kde_penalty_from_logits(z, data.s, cfg.bandwidth_h)
    return LossReport(loss + cfg.eta * pen, vjp(dz + cfg.eta * dz_pen))


def fair_loss_parts(params: ModelParams, data: ClientDataset, cfg: FairnessPenaltyConfig):
    """``(bce, penalty)`` at ``params``; used for logging."""
    z, _ = logits_with_vjp(params, data.X)
    loss, _ = bce_from_logits(z, data.y)
    pen, _ = kde_penalty_from_logits(z, data.s, cfg.bandwidth_h)
    return loss, pen
