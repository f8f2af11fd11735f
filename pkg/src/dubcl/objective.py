"""Contrastive objectives over paired embedding views.

For instance i of a B-row pairing (Zv, Za), the positive is (Zv_i, Za_i) and
the negative set mixes both directions into one denominator: the 2(B-1)
pairs (Zv_i, Za_j) and (Zv_j, Za_i) for j != i. The cross-modal loss halves
the sum of the (v_p, a_s) and (v_s, a_p) pairings; the within-modal video
and audio losses use the same per-instance form between the two views of
one modality, summed without the 1/2 factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concatenate, logsumexp

ROW_NORM_TOL = 1e-9


@dataclass
class EmbeddingBatch:
    """Unit-row embeddings for the four views of a minibatch."""

    z_vp: Tensor
    z_vs: Tensor
    z_ap: Tensor
    z_as: Tensor
    tau: float = 0.07

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        b = self.z_vp.shape[0]
        if b < 2:
            raise ValueError(f"batch size must be >= 2, got {b} (empty negative set)")
        for name in ("z_vp", "z_vs", "z_ap", "z_as"):
            z = getattr(self, name)
            if z.shape[0] != b:
                raise ValueError(f"{name} has {z.shape[0]} rows, expected {b}")
            norms = np.sqrt((z.data**2).sum(axis=1))
            worst = np.abs(norms - 1.0).max()
            if worst > ROW_NORM_TOL:
                raise ValueError(f"{name} rows not unit-norm (max deviation {worst:.3e})")

    @property
    def batch_size(self):
        return self.z_vp.shape[0]


@dataclass
class LossBreakdown:
    total: Tensor
    cross: float
    within_video: float
    within_audio: float
    lambda_v: float
    lambda_a: float
    per_instance_cross: np.ndarray  # 2B terms: (v_p,a_s) then (v_s,a_p)
    per_instance_video: np.ndarray
    per_instance_audio: np.ndarray

    @property
    def total_value(self):
        return self.total.item()


def _pair_losses(zv, za, tau):
    """Per-instance losses for one (Zv, Za) pairing, as a length-B tensor."""
    b = zv.shape[0]
    sims = (zv @ za.T) * (1.0 / tau)
    eye = np.eye(b)
    pos = (sims * Tensor(eye)).sum(axis=1)
    # row i of [S | S^T] holds s_ij and s_ji for all j; drop the duplicate
    # diagonal from the transposed half so s_ii enters the denominator once
    both = concatenate([sims, sims.T], axis=1)
    mask = np.concatenate([np.ones((b, b)), 1.0 - eye], axis=1)
    return logsumexp(both, axis=1, mask=mask) - pos


def nt_xent_instance(i, zv, za, tau):
    """Loss of the i-th instance under the (Zv, Za) pairing; scalar tensor."""
    zv = zv if isinstance(zv, Tensor) else Tensor(zv)
    za = za if isinstance(za, Tensor) else Tensor(za)
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    b = zv.shape[0]
    if b < 2:
        raise ValueError(f"batch size must be >= 2, got {b} (empty negative set)")
    if not 0 <= i < b:
        raise ValueError(f"instance index {i} outside [0, {b})")
    return _pair_losses(zv, za, tau)[i]


def cross_modal_loss(batch):
    """Halved sum over the (v_p, a_s) and (v_s, a_p) pairings."""
    l_ps = _pair_losses(batch.z_vp, batch.z_as, batch.tau)
    l_sp = _pair_losses(batch.z_vs, batch.z_ap, batch.tau)
    loss = (l_ps.sum() + l_sp.sum()) * 0.5
    per_instance = np.concatenate([l_ps.data, l_sp.data])
    return loss, per_instance


def within_modal_losses(batch):
    """Video and audio view-pair losses, summed without the 1/2 factor."""
    l_v = _pair_losses(batch.z_vp, batch.z_vs, batch.tau)
    l_a = _pair_losses(batch.z_ap, batch.z_as, batch.tau)
    return l_v.sum(), l_a.sum(), l_v.data.copy(), l_a.data.copy()


def total_loss(batch, lambda_v=0.0, lambda_a=0.0):
    """Combined objective; within-modal terms are always evaluated for logging."""
    if lambda_v < 0 or lambda_a < 0:
        raise ValueError(f"loss weights must be non-negative, got ({lambda_v}, {lambda_a})")
    cross, per_cross = cross_modal_loss(batch)
    l_v, l_a, per_v, per_a = within_modal_losses(batch)
    total = cross
    if lambda_v > 0:
        total = total + l_v * lambda_v
    if lambda_a > 0:
        total = total + l_a * lambda_a
    return LossBreakdown(
        total=total,
        cross=cross.item(),
        within_video=l_v.item(),
        within_audio=l_a.item(),
        lambda_v=lambda_v,
        lambda_a=lambda_a,
        per_instance_cross=per_cross,
        per_instance_video=per_v,
        per_instance_audio=per_a,
    )
