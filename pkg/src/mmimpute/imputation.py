"""Filling missing latent elements.

Four strategies, named as in the comparison they come from:

========== ============================================ ==============
name       fill value for a missing element i           model kind
========== ============================================ ==============
ae-mean    training-set mean of element i               ae
vae-zero   0 (mean of the isotropic prior)              vae
mvae-a     average of element i over all modal means    mmvae
mvae-s     element i of the modal nearest to the        mmvae
           surviving elements
========== ============================================ ==============

Present elements always pass through unchanged.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .channel import MaskedLatent
from .errors import ConfigurationError, NoEvidenceError, ShapeError
from .kernels import masked_sq_dist
from .model import LatentStats, PriorBank

STRATEGIES = ("ae-mean", "vae-zero", "mvae-a", "mvae-s")
STRATEGY_MODEL = {"ae-mean": "ae", "vae-zero": "vae", "mvae-a": "mmvae", "mvae-s": "mmvae"}


@dataclass
class ImputationResult:
    imputed: np.ndarray
    selected_label: Optional[int]
    strategy: str
    filled_count: int


def _fill(m: MaskedLatent, fill) -> np.ndarray:
    fill = np.asarray(fill, dtype=np.float64)
    if fill.shape != m.values.shape:
        raise ShapeError(f"fill vector {fill.shape} does not match latent {m.values.shape}")
    return np.where(m.mask, m.values, fill)


def impute_zero(m: MaskedLatent) -> ImputationResult:
    return ImputationResult(_fill(m, np.zeros(m.latent_dim)), None, "vae-zero", m.latent_dim - m.present_count)


def impute_stat_mean(m: MaskedLatent, stats: LatentStats) -> ImputationResult:
    return ImputationResult(_fill(m, stats.mean), None, "ae-mean", m.latent_dim - m.present_count)


def select_modal(m: MaskedLatent, bank: PriorBank) -> int:
    """Label whose modal mean is nearest over the present elements; ties go to the lowest label."""
    if m.present_count == 0:
        raise NoEvidenceError("no surviving elements to select a modal from")
    if bank.latent_dim != m.latent_dim:
        raise ShapeError(f"bank latent dim {bank.latent_dim} != {m.latent_dim}")
    d = masked_sq_dist(m.values[None, :], m.mask[None, :], bank.means)
    return int(np.argmin(d[0]))


def impute_modal_average(m: MaskedLatent, bank: PriorBank) -> ImputationResult:
    return ImputationResult(_fill(m, bank.means.mean(axis=0)), None, "mvae-a", m.latent_dim - m.present_count)


def impute_modal(m: MaskedLatent, bank: PriorBank, sample_rng=None) -> ImputationResult:
    """Fill from the selected modal's mean.

    With ``sample_rng`` the fill is drawn from N(mu(l*), I) instead of using
    the mean. A latent with no surviving elements falls back to the modal
    average.
    """
    if m.present_count == 0:
        res = impute_modal_average(m, bank)
        res.strategy = "mvae-s"
        return res
    label = select_modal(m, bank)
    fill = bank.means[label]
    if sample_rng is not None:
        gen = sample_rng.gen if hasattr(sample_rng, "gen") else sample_rng
        fill = fill + gen.standard_normal(fill.shape)
    return ImputationResult(_fill(m, fill), label, "mvae-s", m.latent_dim - m.present_count)


def impute_batch(strategy: str, values, mask, *, bank: PriorBank = None, stats: LatentStats = None):
    """Vectorized imputation of ``(B, N)`` values/mask.

    Returns ``(imputed, labels)``; ``labels`` is -1 wherever no modal was
    selected.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    B, N = values.shape
    labels = np.full(B, -1, dtype=np.int64)
    if strategy == "vae-zero":
        fill = np.zeros((B, N))
    elif strategy == "ae-mean":
        if stats is None:
            raise ConfigurationError("ae-mean needs latent statistics from an ae checkpoint")
        fill = np.broadcast_to(stats.mean, (B, N))
    elif strategy in ("mvae-a", "mvae-s"):
        if bank is None:
            raise ConfigurationError(f"{strategy} needs a checkpoint with a prior bank")
        if bank.latent_dim != N:
            raise ShapeError(f"bank latent dim {bank.latent_dim} != {N}")
        fill = np.broadcast_to(bank.means.mean(axis=0), (B, N)).copy()
        if strategy == "mvae-s":
            d = masked_sq_dist(np.where(mask, values, 0.0), mask, bank.means)
            has = mask.any(axis=1)
            labels[has] = np.argmin(d[has], axis=1)
            fill[has] = bank.means[labels[has]]
    else:
        raise ConfigurationError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    return np.where(mask, values, fill), labels

