"""Training loop, optimizer, evaluation and the ablation grid."""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import NonFiniteError, Tensor
from .checkpoint import save_checkpoint
from .geometry import predictions_to_world
from .losses import LossConfig, a2j_loss
from .metrics import MetricReport, metric_report
from .model import A2JConfig, Module, build_model, infer
from .synth import AugConfig, Dataset, augment, sample_seed

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no-proposal", "no-surround", "merged-branch", "global-reg")


class TrainingDivergedError(FloatingPointError):
    """Loss or an intermediate value became non-finite."""


@dataclass
class TrainConfig:
    lr: float = 0.00035
    weight_decay: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    decay_every: int = 10
    decay_factor: float = 0.1
    batch_size: int = 16
    seed: int = 0
    augment: bool = True
    aug: AugConfig = field(default_factory=AugConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: str = "full"

    def __post_init__(self):
        if isinstance(self.aug, dict):
            self.aug = AugConfig(**self.aug)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.lr <= 0 or self.weight_decay < 0 or not 0 < self.decay_factor <= 1:
            raise ValueError("learning rate and decay factor must be positive, weight decay non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam hyperparameters")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")
        if self.decay_every < 1 or self.decay_every > self.epochs:
            raise ValueError("decay interval must lie between 1 and the number of epochs")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")

    def lr_at(self, epoch: int) -> float:
        """Step schedule: multiply by ``decay_factor`` at every ``decay_every`` epoch boundary."""
        return self.lr * self.decay_factor ** (epoch // self.decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aug"] = self.aug.to_dict()
        return d


def apply_ablation(model_cfg: A2JConfig, loss_cfg: LossConfig, name: str) -> Tuple[A2JConfig, LossConfig]:
    if name == "full":
        return model_cfg, loss_cfg
    if name == "no-proposal":
        return replace(model_cfg, no_proposal_branch=True), loss_cfg
    if name == "no-surround":
        return model_cfg, replace(loss_cfg, surrounding_loss_enabled=False)
    if name == "merged-branch":
        return replace(model_cfg, merged_offset_depth_branch=True), loss_cfg
    if name == "global-reg":
        return replace(model_cfg, global_regression_baseline=True), replace(loss_cfg, surrounding_loss_enabled=False)
    raise ValueError(f"unknown ablation {name!r}")


def is_norm_parameter(name: str) -> bool:
    return name.endswith(".gain") or name.endswith(".shift")


class Adam:
    """Adam with decoupled weight decay; parameters listed in ``no_decay`` are not decayed."""

    def __init__(self, named_params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, no_decay=is_norm_parameter):
        self.params = list(named_params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.decay = [not no_decay(n) for n, _ in self.params]
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        step = self.lr / c1
        for (_, p), m, v, decay in zip(self.params, self.m, self.v, self.decay):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            denom = np.sqrt(v / c2) + self.eps
            if decay and self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (step * m / denom).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state(self) -> Dict[str, np.ndarray]:
        out = {"step": np.array([self.t], dtype=np.float32)}
        for (n, _), m, v in zip(self.params, self.m, self.v):
            out[f"m/{n}"] = m
            out[f"v/{n}"] = v
        return out


@dataclass
class TrainResult:
    model: Module
    loss_log: List[Tuple[int, float, float, Optional[float]]]
    epochs_completed: int
    checkpoints: List[str]
    seconds: float

    def loss_csv(self) -> str:
        lines = ["step,loss,loss1,loss2"]
        for step, loss, l1, l2 in self.loss_log:
            lines.append(f"{step},{loss!r},{l1!r},{'' if l2 is None else repr(l2)}")
        return "\n".join(lines) + "\n"


def batch_arrays(ds: Dataset, idx: Sequence[int], cfg: TrainConfig, epoch: int):
    """Network inputs and targets for a batch, with per-sample deterministic augmentation."""
    if not cfg.augment:
        return ds.network_inputs(idx=idx), ds.uv[idx], ds.td[idx]
    depths, uvs, tds = [], [], []
    for i in idx:
        s = augment(ds.sample(i), sample_seed(cfg.seed, epoch * 10_000_019 + int(i)), cfg.aug)
        depths.append(s.depth)
        uvs.append(s.uv)
        tds.append(s.td)
    return ds.network_inputs(np.stack(depths), idx), np.stack(uvs), np.stack(tds)


def train(ds: Dataset, cfg: TrainConfig, model_cfg: Optional[A2JConfig] = None, out_dir: Optional[str] = None,
          max_steps: Optional[int] = None) -> TrainResult:
    """Train on ``ds``; writes a checkpoint per epoch and ``loss.csv`` when ``out_dir`` is given.

    Raises TrainingDivergedError on a non-finite loss; checkpoints of earlier
    epochs are left in place.
    """
    start = time.perf_counter()
    if len(ds) == 0:
        raise ValueError("empty training set")
    base = model_cfg or A2JConfig(num_joints=ds.num_joints, width=ds.depth.shape[2], height=ds.depth.shape[1])
    if base.num_joints != ds.num_joints:
        raise ValueError(f"model expects K={base.num_joints} joints but the dataset has K={ds.num_joints}")
    mcfg, lcfg = apply_ablation(replace(base, seed=cfg.seed), cfg.loss, cfg.ablation)
    model = build_model(mcfg)
    model.train()
    grid = getattr(model, "grid", None)
    opt = Adam(model.named_parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))
    losses: List[Tuple[int, float, float, Optional[float]]] = []
    checkpoints: List[str] = []
    log_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "loss.csv"), "w", encoding="utf-8")
        log_fh.write("step,loss,loss1,loss2\n")
    step = 0
    epoch = 0
    try:
        for epoch in range(cfg.epochs):
            opt.lr = cfg.lr_at(epoch)
            order = rng.permutation(len(ds))
            for b in range(0, len(order), cfg.batch_size):
                idx = np.sort(order[b:b + cfg.batch_size])
                x, uv, td = batch_arrays(ds, idx, cfg, epoch)
                try:
                    est = model.predict(Tensor(x[:, None]))
                    loss, l1, l2 = a2j_loss(est, grid, uv, td, lcfg)
                    loss_value = loss.item()
                    if not math.isfinite(loss_value):
                        raise NonFiniteError("loss is not finite")
                    opt.zero_grad()
                    loss.backward()
                except NonFiniteError as exc:
                    raise TrainingDivergedError(
                        f"non-finite value at epoch {epoch}, step {step} (lr {opt.lr:g}): {exc}") from exc
                opt.step()
                row = (step, loss_value, l1.item(), None if l2 is None else l2.item())
                losses.append(row)
                if log_fh:
                    log_fh.write(f"{row[0]},{row[1]!r},{row[2]!r},{'' if row[3] is None else repr(row[3])}\n")
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            log.info("epoch %d: lr %.2e, last loss %.4f", epoch, opt.lr, losses[-1][1])
            if out_dir:
                path = os.path.join(out_dir, "checkpoints", f"epoch_{epoch + 1:03d}")
                save_checkpoint(path, model, {"epoch": epoch + 1, "step": step, "train_config": cfg.to_dict()},
                                extra=opt.state())
                checkpoints.append(path)
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return TrainResult(model, losses, epoch + 1, checkpoints, time.perf_counter() - start)


def predict_world(model: Module, ds: Dataset, batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (crop uv, transformed depth, world mm) estimates for every sample."""
    uv, td = infer(model, ds.network_inputs(), batch_size)
    world = np.stack([predictions_to_world(uv[i], td[i], ds.transforms[i], ds.camera) for i in range(len(ds))])
    return uv, td, world


def evaluate(model: Module, ds: Dataset, batch_size: int = 64) -> MetricReport:
    _, _, world = predict_world(model, ds, batch_size)
    gt = ds.world.astype(np.float64)
    cam = ds.camera
    return metric_report(world, gt, cam.project(world)[..., :2], cam.project(gt)[..., :2])


def write_loss_csv(path: str, result: TrainResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(result.loss_csv())


@dataclass
class AblationRow:
    variant: str
    seed: int
    mean_error_mm: float
    seconds: float


def ablation_grid(train_ds: Dataset, test_ds: Dataset, cfg: TrainConfig, model_cfg: Optional[A2JConfig],
                  variants: Sequence[str] = ("full", "global-reg", "no-surround", "no-proposal"),
                  seeds: Sequence[int] = (0, 1, 2)) -> List[AblationRow]:
    rows = []
    for seed in seeds:
        for v in variants:
            res = train(train_ds, replace(cfg, seed=seed, ablation=v), model_cfg)
            rep = evaluate(res.model, test_ds)
            rows.append(AblationRow(v, seed, rep.mean_error_mm, res.seconds))
            log.info("ablation %s seed %d: %.2f mm (%.0f s)", v, seed, rep.mean_error_mm, res.seconds)
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    seeds = sorted({r.seed for r in rows})
    variants = list(dict.fromkeys(r.variant for r in rows))
    lookup = {(r.variant, r.seed): r.mean_error_mm for r in rows}
    header = "variant," + ",".join(f"seed_{s}_mm" for s in seeds) + ",mean_mm"
    lines = [header]
    for v in variants:
        vals = [lookup.get((v, s), float("nan")) for s in seeds]
        lines.append(f"{v}," + ",".join(f"{x:.3f}" for x in vals) + f",{np.nanmean(vals):.3f}")
    return "\n".join(lines) + "\n"
