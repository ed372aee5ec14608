"""Finite-difference gradient checks for every engine op and for the full training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import LossConfig, a2j_loss, smooth_l1_tau
from .model import A2JConfig, A2JNet, Module

OP_TOLERANCE = 1e-3
LOSS_TOLERANCE = 1e-2


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
                   eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients of ``sum(R * fn(*inputs))``.

    ``R`` is a fixed random upstream gradient so every output element matters.
    """
    arrays = [np.array(x, dtype=ad.DTYPE) for x in inputs]
    tensors = [Tensor(x, requires_grad=True) for x in arrays]
    out = fn(*tensors)
    upstream = rng.standard_normal(out.shape).astype(ad.DTYPE)
    ad.reduce_sum(ad.mul(out, Tensor(upstream))).backward()

    def objective(vals):
        y = fn(*[Tensor(v) for v in vals]).data.astype(np.float64)
        return float((y * upstream).sum())

    worst = 0.0
    for i, x in enumerate(arrays):
        numeric = np.zeros(x.shape)
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = objective(arrays)
            flat[j] = orig - eps
            fm = objective(arrays)
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2.0 * eps)
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros(x.shape)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    """name -> (function, inputs). Inputs avoid kinks of piecewise ops."""
    perm = rng.permutation(5)
    idx = rng.integers(0, 4, size=6)
    smooth_x = rng.uniform(-3.0, 3.0, size=(3, 4))
    smooth_x[np.abs(np.abs(smooth_x) - 1.0) < 0.05] += 0.2
    return {
        "add": (ad.add, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        "sub": (ad.sub, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        "mul": (ad.mul, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        "mul_scalar": (lambda a: ad.mul_scalar(a, -2.5), [rng.standard_normal((2, 3))]),
        "add_scalar": (lambda a: ad.add_scalar(a, 1.5), [rng.standard_normal((2, 3))]),
        "relu": (ad.relu, [_away_from_zero(rng, (3, 5))]),
        "reshape": (lambda a: ad.reshape(a, (6, 2)), [rng.standard_normal((3, 4))]),
        "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), [rng.standard_normal((2, 3, 4))]),
        "expand": (lambda a: ad.expand(a, (3, 4, 2)), [rng.standard_normal((3, 1, 2))]),
        "getitem": (lambda a: a[1:, ::2], [rng.standard_normal((3, 5))]),
        "take_perm": (lambda a: ad.take(a, perm, axis=1), [rng.standard_normal((2, 5))]),
        "take_gather": (lambda a: ad.take(a, idx, axis=0), [rng.standard_normal((4, 3))]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [rng.standard_normal((2, 3)), rng.standard_normal((2, 2))]),
        "reduce_sum": (lambda a: ad.reduce_sum(a, axis=(0, 2)), [rng.standard_normal((2, 3, 4))]),
        "reduce_mean": (lambda a: ad.reduce_mean(a, axis=1), [rng.standard_normal((2, 3, 4))]),
        "softmax": (lambda a: ad.softmax(a, axis=1), [rng.standard_normal((2, 6, 3))]),
        "matmul": (ad.matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]),
        "conv2d": (lambda x, w, b: ad.conv2d(x, w, b, stride=1, padding=1),
                   [rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]),
        "conv2d_strided": (lambda x, w: ad.conv2d(x, w, None, stride=2, padding=1),
                           [rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((2, 2, 3, 3))]),
        "conv2d_dilated": (lambda x, w: ad.conv2d(x, w, None, stride=1, padding=2, dilation=2),
                           [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((2, 2, 3, 3))]),
        "norm_train": (lambda x, g, b: ad.channel_affine_norm(x, g, b, np.zeros(3, ad.DTYPE), np.ones(3, ad.DTYPE), True),
                       [rng.standard_normal((4, 3, 2, 2)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]),
        "norm_eval": (lambda x, g, b: ad.channel_affine_norm(x, g, b, np.full(3, 0.2, ad.DTYPE), np.full(3, 1.5, ad.DTYPE), False),
                      [rng.standard_normal((2, 3, 2, 2)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]),
        "smooth_l1": (lambda a: smooth_l1_tau(a, 1.0), [smooth_x]),
    }


@dataclass
class GradReport:
    op_errors: Dict[str, float]
    loss_errors: Dict[str, float]

    @property
    def max_op_error(self) -> float:
        return max(self.op_errors.values())

    @property
    def max_loss_error(self) -> float:
        return max(self.loss_errors.values())

    def passed(self) -> bool:
        return self.max_op_error < OP_TOLERANCE and self.max_loss_error < LOSS_TOLERANCE

    def to_text(self) -> str:
        lines = [f"{name:16s} {err:.3e}" for name, err in sorted(self.op_errors.items())]
        lines.append(f"max op relative error:   {self.max_op_error:.3e} (tolerance {OP_TOLERANCE:g})")
        lines.append(f"max loss relative error: {self.max_loss_error:.3e} (tolerance {LOSS_TOLERANCE:g})")
        return "\n".join(lines) + "\n"


def check_ops(seeds: Sequence[int] = range(10)) -> Dict[str, float]:
    worst: Dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (fn, inputs) in op_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), check_function(fn, inputs, rng))
    return worst


def tiny_config(num_joints: int = 3) -> A2JConfig:
    return A2JConfig(num_joints=num_joints, width=32, height=32, trunk_channels=(4, 4, 8, 8),
                     regression_channels=8, branch_channels=4, branch_layers=1)


def randomize_outputs(model: Module, rng: np.random.Generator, scale: float = 0.05) -> None:
    """Replace zero-initialized weights so every parameter receives a nonzero gradient."""
    for _, p in model.named_parameters():
        if not np.any(p.data):
            p.data = (rng.standard_normal(p.shape) * scale).astype(ad.DTYPE)


def check_loss(cfg: A2JConfig = None, seed: int = 0, batch: int = 2, eps: float = 1e-2,
               loss_cfg: LossConfig = None) -> Dict[str, float]:
    """Directional finite differences of the total loss, one direction per parameter tensor.

    The direction is the normalized analytic gradient plus noise, so the
    directional derivative is never vanishingly small. ReLU masks are frozen
    at the unperturbed activation pattern: a difference quotient straddling a
    kink is not a derivative, and freezing lets the step be large enough to
    rise above float32 rounding of the loss. Targets sit a few pixels from the
    current estimate so both branches of each smooth-L1 term are exercised.
    """
    cfg = cfg or tiny_config()
    loss_cfg = loss_cfg or LossConfig()
    rng = np.random.default_rng(seed)
    model = A2JNet(cfg)
    randomize_outputs(model, rng)
    model.train()
    x = rng.uniform(-1.0, 1.0, size=(batch, 1, cfg.height, cfg.width)).astype(ad.DTYPE)
    est = model.predict(Tensor(x))
    uv = (est.uv.data + rng.normal(0.0, 2.0, est.uv.shape)).astype(ad.DTYPE)
    td = (est.depth.data + rng.normal(0.0, 4.0, est.depth.shape)).astype(ad.DTYPE)

    def total() -> Tensor:
        return a2j_loss(model.predict(Tensor(x)), model.grid, uv, td, loss_cfg)[0]

    with ad.record_kinks() as masks:
        loss = total()
    model.zero_grad()
    loss.backward()
    errors = {}
    for name, p in model.named_parameters():
        g = p.grad.astype(np.float64)
        noise = rng.standard_normal(p.shape)
        gn = np.linalg.norm(g)
        v = g / gn + 0.3 * noise / np.linalg.norm(noise) if gn > 0 else noise / np.linalg.norm(noise)
        v /= np.linalg.norm(v)
        analytic = float((g * v).sum())
        base = p.data.copy()
        with ad.frozen_kinks(masks):
            p.data = (base + eps * v).astype(ad.DTYPE)
            fp = total().item()
        with ad.frozen_kinks(masks):
            p.data = (base - eps * v).astype(ad.DTYPE)
            fm = total().item()
        p.data = base
        numeric = (fp - fm) / (2.0 * eps)
        errors[name] = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-12)
    return errors


def run_suite(seeds: Sequence[int] = range(10), loss_seeds: Sequence[int] = (0, 1)) -> GradReport:
    loss_errors: Dict[str, float] = {}
    for s in loss_seeds:
        for name, err in check_loss(seed=s).items():
            loss_errors[name] = max(loss_errors.get(name, 0.0), err)
    return GradReport(check_ops(seeds), loss_errors)
