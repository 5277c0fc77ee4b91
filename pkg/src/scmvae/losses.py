"""Training objective: beta-VAE terms plus two supervised contrastive losses.

Both contrastive losses are soft-nearest-neighbor style: each anchor's
probability of sampling a same-class neighbor in its supervised latent
slot, with an optional inhibition term that also pulls the *other* latent
dimensions of same-class pairs into the denominator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor
from .model import CLS_SLOT, REG_SLOT


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.0015
    temperature: float = 181.0
    threshold: float = 0.035
    lambda1: float = 1.0
    lambda2: float = 1.0
    enable_cls: bool = True
    enable_reg: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")
        if self.lambda1 <= 0 or self.lambda2 < 0:
            raise ValueError("lambda1 must be > 0 and lambda2 >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    reconstruction: float
    kl: float
    contrastive_cls: float
    contrastive_reg: float

    def as_dict(self):
        return {"total": self.total, "reconstruction": self.reconstruction,
                "kl": self.kl, "contrastive_cls": self.contrastive_cls,
                "contrastive_reg": self.contrastive_reg}


class DegenerateBatchError(ValueError):
    """Every anchor in the batch lacks a same-class partner."""


def vae_loss(x, x_hat: Tensor, mu: Tensor, log_var: Tensor):
    """(reconstruction, kl): mean squared coordinate error and closed-form
    diagonal-Gaussian KL to N(0, I), averaged over the batch."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape != x_hat.shape:
        raise ValueError(f"vae_loss: x {x.shape} vs x_hat {x_hat.shape}")
    if not (np.isfinite(x_hat.data).all() and np.isfinite(mu.data).all()
            and np.isfinite(log_var.data).all()):
        raise FloatingPointError("vae_loss: non-finite inputs")
    recon = ((x_hat - x) ** 2).mean()
    kl = ((mu ** 2 + log_var.exp() - 1.0 - log_var).sum(axis=1) * 0.5).mean()
    return recon, kl


def _pairwise_sq_dists(z: Tensor) -> Tensor:
    """(B, D) -> (B, B) squared Euclidean distances, differentiable."""
    sq = (z * z).sum(axis=1, keepdims=True)  # (B, 1)
    return sq + sq.transpose() - 2.0 * (z @ z.transpose())


def _masked_sum_exp(exponents: Tensor, shift: np.ndarray, mask: np.ndarray) -> Tensor:
    """Row sums of exp(exponents - shift) over mask == 1, differentiably.

    Masked-out entries are pushed to exp(-1000) = 0 before exponentiation so
    they can never overflow regardless of their raw exponent.
    """
    shifted = (exponents - Tensor(shift)) * Tensor(mask) + Tensor((mask - 1.0) * 1000.0)
    return shifted.exp().sum(axis=1)


def _snn_loss(z: Tensor, same_mask: np.ndarray, slot: int, inhibit_dims,
              config: LossConfig) -> Tensor:
    b, dz = z.shape
    if b < 2:
        raise ValueError("contrastive losses need a batch of at least 2")
    off_diag = 1.0 - np.eye(b)
    same = same_mask.astype(np.float64) * off_diag

    partnered = same.sum(axis=1) > 0
    if not partnered.any():
        raise DegenerateBatchError("no anchor has a same-class partner")

    # log-sum-exp formulation: per-anchor loss = lse(denominator terms)
    # - lse(numerator terms), with constant per-row shifts, so neither sum
    # can underflow to zero however large the latent distances grow
    z_slot = z[:, slot:slot + 1]
    a = _pairwise_sq_dists(z_slot) * (-1.0 / config.temperature)
    m_num = np.where(same > 0, a.data, -np.inf).max(axis=1, keepdims=True)
    m_num[~partnered] = 0.0  # rows discarded below; keep the arithmetic finite
    m_den = np.where(off_diag > 0, a.data, -np.inf).max(axis=1, keepdims=True)

    if config.lambda2 > 0:
        z_rest = z[:, list(inhibit_dims)]
        r = _pairwise_sq_dists(z_rest) * (-1.0 / ((dz - 1) * config.temperature))
        m_den = np.maximum(m_den, np.where(same > 0, r.data, -np.inf)
                           .max(axis=1, keepdims=True))
        den = (_masked_sum_exp(a, m_den, off_diag) * config.lambda1
               + _masked_sum_exp(r, m_den, same) * config.lambda2)
    else:
        den = _masked_sum_exp(a, m_den, off_diag) * config.lambda1

    # unpartnered anchors are dropped below, but their numerator must stay
    # finite and positive or log() poisons the backward pass with NaNs
    num = _masked_sum_exp(a, m_num, same) + Tensor(1.0 - partnered.astype(np.float64))
    per_anchor = (den.log() + Tensor(m_den[:, 0])) - (num.log() + Tensor(m_num[:, 0]))
    idx = np.flatnonzero(partnered)
    return per_anchor[idx].mean()


def contrastive_cls(z: Tensor, y_cls, config: LossConfig) -> Tensor:
    """Classification contrastive loss on the z1 slot.

    Anchors without a same-class partner are excluded from the mean; a
    batch in which every anchor is partnerless raises DegenerateBatchError.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    y = np.asarray(y_cls)
    same = y[:, None] == y[None, :]
    dims = [d for d in range(z.shape[1]) if d != CLS_SLOT]
    return _snn_loss(z, same, CLS_SLOT, dims, config)


def contrastive_reg(z: Tensor, y_reg, config: LossConfig) -> Tensor:
    """Regression contrastive loss on the z2 slot.

    Two samples count as neighbors when their normalized labels differ by
    at most the configured threshold.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    y = np.asarray(y_reg, dtype=np.float64)
    same = np.abs(y[:, None] - y[None, :]) <= config.threshold
    dims = [d for d in range(z.shape[1]) if d != REG_SLOT]
    return _snn_loss(z, same, REG_SLOT, dims, config)


def total_loss(x, x_hat: Tensor, code, y_cls, y_reg, config: LossConfig):
    """(scalar Tensor, LossBreakdown) for the assembled objective."""
    recon, kl = vae_loss(x, x_hat, code.mu, code.log_var)
    total = recon + kl * config.beta
    cls_val = reg_val = 0.0
    if config.enable_cls:
        lc = contrastive_cls(code.z, y_cls, config)
        total = total + lc
        cls_val = float(lc.data)
    if config.enable_reg:
        lr = contrastive_reg(code.z, y_reg, config)
        total = total + lr
        reg_val = float(lr.data)
    breakdown = LossBreakdown(float(total.data), float(recon.data), float(kl.data),
                              cls_val, reg_val)
    return total, breakdown
