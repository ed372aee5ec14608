"""Joint-position and anchor-surrounding losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import AnchorGrid
from .model import PoseEstimate


@dataclass
class LossConfig:
    alpha: float = 0.5
    tau1: float = 1.0
    tau2: float = 3.0
    lam: float = 3.0
    surrounding_loss_enabled: bool = True

    def __post_init__(self):
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ValueError("smoothness thresholds must be positive")
        if self.alpha <= 0 or self.lam <= 0:
            raise ValueError("alpha and lambda must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def smooth_l1_value(x, tau: float) -> np.ndarray:
    """Plain numpy version: x^2 / (2 tau) inside the knee, |x| - tau / 2 outside."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < tau, x * x / (2.0 * tau), ax - tau / 2.0)


def smooth_l1_tau(x: Tensor, tau: float) -> Tensor:
    """Elementwise smooth-L1 with knee at ``tau``; sum the result for vector residuals."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    xd = x.data.astype(np.float64)
    grad = np.where(np.abs(xd) < tau, xd / tau, np.sign(xd))
    return ad.elementwise(x, smooth_l1_value(xd, tau), grad, "smooth_l1")


def _per_sample(x: Tensor) -> Tensor:
    """Sum every axis but the batch axis, then average over the batch."""
    axes = tuple(range(1, x.ndim))
    return ad.reduce_mean(ad.reduce_sum(x, axes), axis=0)


def joint_position_loss(est: PoseEstimate, target_uv: np.ndarray, target_depth: np.ndarray, cfg: LossConfig) -> Tensor:
    """alpha * sum_j L_tau1(S_hat_j - T^i_j) + sum_j L_tau2(D_hat_j - T^d_j), batch-averaged."""
    ruv = ad.sub(est.uv, Tensor(target_uv))
    rd = ad.sub(est.depth, Tensor(target_depth))
    in_plain = _per_sample(smooth_l1_tau(ruv, cfg.tau1))
    depth = _per_sample(smooth_l1_tau(rd, cfg.tau2))
    return ad.add(ad.mul_scalar(in_plain, cfg.alpha), depth)


def surrounding_loss(weights: Tensor, grid: AnchorGrid, target_uv: np.ndarray, cfg: LossConfig) -> Tensor:
    """sum_j L_tau1(sum_a w_j(a) S(a) - T^i_j): pulls the weight-centroid of anchors onto the joint.

    ``weights`` are the normalized anchor weights, shape (N, A, K).
    """
    n, a, k = weights.shape
    anchor_xy = np.broadcast_to(grid.positions.astype(ad.DTYPE)[None, :, None, :], (n, a, k, 2))
    w2 = ad.expand(ad.reshape(weights, (n, a, k, 1)), (n, a, k, 2))
    centroid = ad.reduce_sum(ad.mul(w2, Tensor(anchor_xy)), axis=1)
    return _per_sample(smooth_l1_tau(ad.sub(centroid, Tensor(target_uv)), cfg.tau1))


def total_loss(loss1: Tensor, loss2: Tensor, cfg: LossConfig) -> Tensor:
    scaled = ad.mul_scalar(loss1, cfg.lam)
    if not cfg.surrounding_loss_enabled or loss2 is None:
        return scaled
    return ad.add(scaled, loss2)


def a2j_loss(est: PoseEstimate, grid: AnchorGrid, target_uv, target_depth, cfg: LossConfig):
    """Returns (loss, loss1, loss2); loss2 is None when the surrounding term is off or weights are absent."""
    loss1 = joint_position_loss(est, target_uv, target_depth, cfg)
    loss2 = None
    if cfg.surrounding_loss_enabled and est.weights is not None:
        loss2 = surrounding_loss(est.weights, grid, target_uv, cfg)
    return total_loss(loss1, loss2, cfg), loss1, loss2
