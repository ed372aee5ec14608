"""Anchor-to-joint network: backbone, three prediction branches and aggregation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import AnchorGrid, build_anchor_grid

DOWNSAMPLE = 16


@dataclass
class A2JConfig:
    num_joints: int = 14
    width: int = 64
    height: int = 64
    anchor_stride: int = 4
    trunk_channels: Tuple[int, ...] = (8, 16, 32, 32)
    regression_channels: int = 32
    regression_layers: int = 1
    branch_channels: int = 32
    branch_layers: int = 4
    no_proposal_branch: bool = False
    merged_offset_depth_branch: bool = False
    global_regression_baseline: bool = False
    seed: int = 0

    def __post_init__(self):
        self.trunk_channels = tuple(int(c) for c in self.trunk_channels)
        if self.num_joints < 1:
            raise ValueError("num_joints must be >= 1")
        if len(self.trunk_channels) != 4:
            raise ValueError("the common trunk needs four stride-2 stages to reach 16x downsampling")
        for size in (self.width, self.height):
            if size % DOWNSAMPLE or size % self.anchor_stride:
                raise ValueError(f"input size {size} must be divisible by {DOWNSAMPLE} and the anchor stride")
        if DOWNSAMPLE % self.anchor_stride:
            raise ValueError("anchor stride must divide the downsampling factor")

    @property
    def anchors_per_cell(self) -> int:
        return (DOWNSAMPLE // self.anchor_stride) ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_channels"] = list(self.trunk_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "A2JConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# -- layers -------------------------------------------------------------------


class Module:
    training = True

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        unexpected = set(state) - set(own) - set(bufs)
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if p.shape != state[name].shape:
                raise ValueError(f"{name}: shape {state[name].shape} does not match {p.shape}")
            p.data = np.array(state[name], dtype=ad.DTYPE)
        for name, b in bufs.items():
            if b.shape != state[name].shape:
                raise ValueError(f"{name}: shape {state[name].shape} does not match {b.shape}")
            b[...] = state[name]


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(ad.DTYPE)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k=3, stride=1, dilation=1, bias=False, zero_init=False):
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (k // 2)
        shape = (cout, cin, k, k)
        w = np.zeros(shape, ad.DTYPE) if zero_init else he_normal(rng, shape, cin * k * k)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, ad.DTYPE), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class Norm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gain = Tensor(np.ones(channels, ad.DTYPE), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, ad.DTYPE), requires_grad=True)
        self.running_mean = np.zeros(channels, ad.DTYPE)
        self.running_var = np.ones(channels, ad.DTYPE)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.channel_affine_norm(x, self.gain, self.shift, self.running_mean, self.running_var,
                                      self.training, self.momentum, self.eps)


class ConvNormReLU(Module):
    def __init__(self, rng, cin, cout, stride=1, dilation=1):
        self.conv = Conv2d(rng, cin, cout, 3, stride, dilation)
        self.norm = Norm(cout)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(self.norm(self.conv(x)))


class Linear(Module):
    def __init__(self, rng, cin, cout):
        self.weight = Tensor(he_normal(rng, (cin, cout), cin) * np.float32(0.1), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, ad.DTYPE), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return ad.add(y, ad.expand(ad.reshape(self.bias, (1, -1)), y.shape))


class Backbone(Module):
    """Common trunk (four stride-2 stages, 16x) and a dilated stride-1 regression trunk."""

    def __init__(self, rng, cfg: A2JConfig):
        chans = (1,) + cfg.trunk_channels
        self.common = [ConvNormReLU(rng, chans[i], chans[i + 1], stride=2) for i in range(4)]
        reg = []
        cin = chans[-1]
        for _ in range(cfg.regression_layers):
            reg.append(ConvNormReLU(rng, cin, cfg.regression_channels, dilation=2))
            cin = cfg.regression_channels
        self.regression = reg
        self.common_channels = chans[-1]
        self.regression_out = cin

    def __call__(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        for layer in self.common:
            x = layer(x)
        common = x
        for layer in self.regression:
            x = layer(x)
        return common, x


class Branch(Module):
    """Intermediate 3x3 conv+norm+relu layers, then a zero-initialized output conv."""

    def __init__(self, rng, cin: int, width: int, layers: int, out_channels: int):
        mids = []
        for _ in range(layers):
            mids.append(ConvNormReLU(rng, cin, width))
            cin = width
        self.mid = mids
        self.out = Conv2d(rng, cin, out_channels, 3, bias=True, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.mid:
            x = layer(x)
        return self.out(x)


# -- outputs ------------------------------------------------------------------


@dataclass
class NetworkOutput:
    offsets: Tensor     # (N, A, K, 2) crop pixels
    depths: Tensor      # (N, A, K) transformed depth units
    responses: Tensor   # (N, A, K) logits


@dataclass
class PoseEstimate:
    uv: Tensor          # (N, K, 2) crop pixels
    depth: Tensor       # (N, K) transformed depth units
    weights: Optional[Tensor] = None   # (N, A, K) normalized anchor weights


def branch_to_anchors(y: Tensor, grid: AnchorGrid, num_joints: int, comps: int) -> Tensor:
    """Output map (N, per*K*comps, h, w) -> (N, A, K, comps), via the grid's cell map.

    Channel ``(slot * K + k) * comps + c`` of cell ``(r, col)`` belongs to anchor
    ``grid.cell_map[r * w + col, slot]``.
    """
    n, ch, h, w = y.shape
    per = grid.anchors_per_cell
    if ch != per * num_joints * comps or (h, w) != grid.feature_shape:
        raise ValueError(f"branch output {y.shape} inconsistent with grid {grid.feature_shape} and K={num_joints}")
    t = ad.reshape(y, (n, per, num_joints, comps, h * w))
    t = ad.transpose(t, (0, 4, 1, 2, 3))
    t = ad.reshape(t, (n, h * w * per, num_joints, comps))
    return ad.take(t, grid.channel_index(), axis=1)


class A2JNet(Module):
    def __init__(self, cfg: A2JConfig):
        if cfg.global_regression_baseline:
            raise ValueError("use GlobalRegressionNet for the global regression baseline")
        self.cfg = cfg
        self.grid = build_anchor_grid(cfg.width, cfg.height, cfg.anchor_stride, DOWNSAMPLE)
        rng = np.random.default_rng(cfg.seed)
        k, per = cfg.num_joints, cfg.anchors_per_cell
        self.backbone = Backbone(rng, cfg)
        creg = self.backbone.regression_out
        if cfg.merged_offset_depth_branch:
            self.offset_depth = Branch(rng, creg, cfg.branch_channels, cfg.branch_layers, per * k * 3)
        else:
            self.offset = Branch(rng, creg, cfg.branch_channels, cfg.branch_layers, per * k * 2)
            self.depth = Branch(rng, creg, cfg.branch_channels, cfg.branch_layers, per * k)
        if not cfg.no_proposal_branch:
            self.proposal = Branch(rng, self.backbone.common_channels, cfg.branch_channels, cfg.branch_layers, per * k)

    def forward(self, x: Tensor) -> NetworkOutput:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (1, cfg.height, cfg.width):
            raise ValueError(f"expected input (N, 1, {cfg.height}, {cfg.width}), got {x.shape}")
        k = cfg.num_joints
        common, reg = self.backbone(x)
        if cfg.merged_offset_depth_branch:
            both = branch_to_anchors(self.offset_depth(reg), self.grid, k, 3)
            offsets = both[..., 0:2]
            depths = both[..., 2]
        else:
            offsets = branch_to_anchors(self.offset(reg), self.grid, k, 2)
            depths = ad.reshape(branch_to_anchors(self.depth(reg), self.grid, k, 1), (x.shape[0], self.grid.count, k))
        if cfg.no_proposal_branch:
            responses = Tensor(np.zeros((x.shape[0], self.grid.count, k), ad.DTYPE))
        else:
            responses = ad.reshape(branch_to_anchors(self.proposal(common), self.grid, k, 1),
                                   (x.shape[0], self.grid.count, k))
        return NetworkOutput(offsets, depths, responses)

    __call__ = forward

    def branch_maps(self, x: Tensor) -> Dict[str, Tuple[int, ...]]:
        """Raw output-map shapes (N, C, h, w) per branch, for layout checks."""
        common, reg = self.backbone(x)
        maps = {}
        if self.cfg.merged_offset_depth_branch:
            maps["offset_depth"] = self.offset_depth(reg).shape
        else:
            maps["offset"] = self.offset(reg).shape
            maps["depth"] = self.depth(reg).shape
        if not self.cfg.no_proposal_branch:
            maps["proposal"] = self.proposal(common).shape
        return maps

    def predict(self, x: Tensor) -> PoseEstimate:
        return aggregate(self.forward(x), self.grid)


def aggregate(out: NetworkOutput, grid: AnchorGrid) -> PoseEstimate:
    """Softmax over anchors, then weighted average of anchor votes per joint."""
    n, a, k = out.responses.shape
    weights = ad.softmax(out.responses, axis=1)
    anchor_xy = np.broadcast_to(grid.positions.astype(ad.DTYPE)[None, :, None, :], (n, a, k, 2))
    votes = ad.add(out.offsets, Tensor(anchor_xy))
    w2 = ad.expand(ad.reshape(weights, (n, a, k, 1)), (n, a, k, 2))
    uv = ad.reduce_sum(ad.mul(w2, votes), axis=1)
    depth = ad.reduce_sum(ad.mul(weights, out.depths), axis=1)
    return PoseEstimate(uv, depth, weights)


def anchor_weights(responses) -> np.ndarray:
    """Softmax over the anchor axis (axis 0 of an (A, K) array) in float64; tolerates -inf."""
    r = np.asarray(responses.data if isinstance(responses, Tensor) else responses, dtype=np.float64)
    r = r - r.max(axis=0, keepdims=True)
    e = np.exp(r)
    return e / e.sum(axis=0, keepdims=True)


def informative_anchors(responses, joint: int, threshold: float = 0.02) -> np.ndarray:
    """Indices of anchors whose normalized weight for ``joint`` exceeds ``threshold``.

    ``responses`` is an (A, K) array of logits for a single image.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    w = anchor_weights(responses)
    if not 0 <= joint < w.shape[1]:
        raise IndexError(f"joint {joint} out of range for K={w.shape[1]}")
    return np.flatnonzero(w[:, joint] > threshold)


class GlobalRegressionNet(Module):
    """Shared backbone, global average pooling and one fully connected layer to K x 3."""

    def __init__(self, cfg: A2JConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.backbone = Backbone(rng, cfg)
        self.fc = Linear(rng, self.backbone.regression_out, cfg.num_joints * 3)
        bias = np.zeros((cfg.num_joints, 3), ad.DTYPE)
        bias[:, 0] = cfg.width / 2.0
        bias[:, 1] = cfg.height / 2.0
        self.fc.bias.data = bias.ravel()

    def predict(self, x: Tensor) -> PoseEstimate:
        _, reg = self.backbone(x)
        pooled = ad.reduce_mean(reg, axis=(2, 3))
        y = ad.reshape(self.fc(pooled), (x.shape[0], self.cfg.num_joints, 3))
        return PoseEstimate(y[..., 0:2], y[..., 2])

    __call__ = predict


def build_model(cfg: A2JConfig) -> Module:
    return GlobalRegressionNet(cfg) if cfg.global_regression_baseline else A2JNet(cfg)


def infer(model: Module, images: np.ndarray, batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Inference-mode estimates for network-ready inputs (N, H, W) -> (uv (N,K,2), depth (N,K))."""
    was_training = model.training
    model.eval()
    uvs, ds = [], []
    try:
        for i in range(0, len(images), batch_size):
            x = Tensor(images[i:i + batch_size, None])
            est = model.predict(x)
            uvs.append(est.uv.data.copy())
            ds.append(est.depth.data.copy())
    finally:
        model.train(was_training)
    return np.concatenate(uvs), np.concatenate(ds)
