"""Synthetic articulated-pose depth data: capsule kinematic chains with exact ground truth."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import (
    CameraIntrinsics,
    CropTransform,
    bbox_region,
    bilinear_sample,
    center_region,
    crop_and_resize,
    network_input,
    predictions_to_world,
    rotation_matrix,
    world_to_crop,
)

log = logging.getLogger(__name__)

FORMAT_NAME = "a2j-synth-dataset"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Malformed, truncated or inconsistent dataset container."""


@dataclass
class GenConfig:
    chains: Tuple[int, ...] = (1, 3, 3, 3, 3)
    width: int = 64
    height: int = 64
    image_width: int = 160
    image_height: int = 160
    focal: float = 220.0
    root_depth: Tuple[float, float] = (480.0, 620.0)
    root_shift: float = 25.0
    background_depth: float = 1000.0
    sensor_range: Tuple[float, float] = (150.0, 1200.0)
    cube_mm: Tuple[float, float, float] = (250.0, 250.0, 250.0)
    palm_radius: float = 16.0
    bone_radius: Tuple[float, float] = (6.5, 8.5)
    segment_length: Tuple[float, float] = (18.0, 30.0)
    finger_spread_deg: float = 22.0
    max_flex_deg: float = 80.0
    max_tilt_deg: float = 35.0
    center_jitter_mm: float = 4.0
    hole_fraction: float = 0.003
    crop_mode: str = "center"          # "center" (hand) or "bbox" (body)
    depth_mu: float = 1.0
    geometry_seed: int = 0
    train_subjects: Tuple[int, ...] = tuple(range(12))
    test_subjects: Tuple[int, ...] = (1000, 1001, 1002, 1003)

    def __post_init__(self):
        for name in ("chains", "root_depth", "sensor_range", "cube_mm", "bone_radius",
                     "segment_length", "train_subjects", "test_subjects"):
            setattr(self, name, tuple(getattr(self, name)))
        if any(c < 1 for c in self.chains):
            raise ValueError("every chain needs at least one joint")
        if self.segment_length[0] <= 0 or self.bone_radius[0] <= 0:
            raise ValueError("bones need positive length and radius")
        if self.crop_mode not in ("center", "bbox"):
            raise ValueError(f"unknown crop mode {self.crop_mode!r}")

    @property
    def num_joints(self) -> int:
        return 1 + sum(self.chains)

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, self.image_width / 2.0, self.image_height / 2.0)

    @property
    def working_volume_diagonal(self) -> float:
        """Diagonal (mm) of the metric cube that every scene is cropped to."""
        return float(np.linalg.norm(self.cube_mm))

    @property
    def input_half_range(self) -> float:
        return self.cube_mm[2] / 2.0

    def parents(self) -> np.ndarray:
        """Parent index per joint: joint 0 is the root; each chain hangs off the root."""
        parents = [-1]
        for length in self.chains:
            prev = 0
            for _ in range(length):
                parents.append(prev)
                prev = len(parents) - 1
        return np.array(parents)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**d)


@dataclass
class Subject:
    """Per-subject chain geometry (bone lengths, radii, chain directions)."""

    lengths: np.ndarray     # (K,) length of the bone ending at each joint (root entry unused)
    radii: np.ndarray       # (K,)
    base_angles: np.ndarray  # (len(chains),) chain direction in the palm plane, degrees


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]))


def make_subject(cfg: GenConfig, subject_id: int) -> Subject:
    rng = _rng(cfg.geometry_seed, 0x5EB1EC7, subject_id)
    k = cfg.num_joints
    scale = rng.uniform(0.85, 1.15)
    lengths = scale * rng.uniform(*cfg.segment_length, size=k)
    radii = rng.uniform(*cfg.bone_radius, size=k)
    parents = cfg.parents()
    chain_index = 0
    for j in range(1, k):
        if parents[j] == 0:
            # first bone of a chain leaves the palm; the single-joint chain is the wrist
            lengths[j] = scale * (rng.uniform(38.0, 48.0) if cfg.chains[chain_index] == 1 else rng.uniform(28.0, 36.0))
            radii[j] = cfg.palm_radius if cfg.chains[chain_index] == 1 else radii[j] * 1.2
            chain_index += 1
    n = len(cfg.chains)
    finger_chains = [i for i, c in enumerate(cfg.chains) if c > 1]
    base = np.zeros(n)
    spread = cfg.finger_spread_deg
    offsets = (np.arange(len(finger_chains)) - (len(finger_chains) - 1) / 2.0) * spread
    for i, ci in enumerate(finger_chains):
        base[ci] = offsets[i] + rng.normal(0.0, 3.0)
    for ci in range(n):
        if cfg.chains[ci] == 1:
            base[ci] = 180.0
    return Subject(lengths, radii, base)


def _axis_rotation(axis: str, deg: float) -> np.ndarray:
    r = np.deg2rad(deg)
    c, s = np.cos(r), np.sin(r)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def pose_chain(cfg: GenConfig, subject: Subject, rng: np.random.Generator) -> np.ndarray:
    """Joint positions (K, 3) in camera-frame millimetres."""
    k = cfg.num_joints
    parents = cfg.parents()
    local = np.zeros((k, 3))
    chain_of = np.zeros(k, dtype=int)
    direction = np.zeros((k, 3))
    # palm plane is local x/y, palm normal is -z (facing the camera)
    chain_index = -1
    for j in range(1, k):
        if parents[j] == 0:
            chain_index += 1
            ang = np.deg2rad(subject.base_angles[chain_index] + rng.normal(0.0, 4.0))
            d = np.array([np.sin(ang), -np.cos(ang), 0.0])
            direction[j] = d
        else:
            flex = np.deg2rad(rng.uniform(0.0, cfg.max_flex_deg))
            d_prev = direction[parents[j]]
            # curl toward the camera-facing palm normal
            d = np.cos(flex) * d_prev + np.sin(flex) * np.array([0.0, 0.0, -1.0]) * np.linalg.norm(d_prev[:2])
            d = d / np.linalg.norm(d)
            direction[j] = d
        chain_of[j] = chain_index
        local[j] = local[parents[j]] + subject.lengths[j] * direction[j]

    rot = (_axis_rotation("z", rng.uniform(-180.0, 180.0))
           @ _axis_rotation("x", rng.uniform(-cfg.max_tilt_deg, cfg.max_tilt_deg))
           @ _axis_rotation("y", rng.uniform(-cfg.max_tilt_deg, cfg.max_tilt_deg)))
    root = np.array([rng.uniform(-cfg.root_shift, cfg.root_shift),
                     rng.uniform(-cfg.root_shift, cfg.root_shift),
                     rng.uniform(*cfg.root_depth)])
    centered = local - local.mean(axis=0)
    return centered @ rot.T + root


def _render_capsule(zbuf: np.ndarray, cam: CameraIntrinsics, a: np.ndarray, b: np.ndarray, r: float) -> None:
    """Z-buffer the nearest ray hit of a capsule (segment a-b, radius r) into ``zbuf``."""
    h, w = zbuf.shape
    lo = np.minimum(a, b) - r
    hi = np.maximum(a, b) + r
    zmin = max(lo[2], 1.0)
    corners = np.array([[x, y, zmin] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])])
    uv = cam.project(corners)[:, :2]
    corners_far = corners.copy()
    corners_far[:, 2] = hi[2]
    uv = np.concatenate([uv, cam.project(corners_far)[:, :2]])
    u0, v0 = np.floor(uv.min(axis=0)).astype(int) - 1
    u1, v1 = np.ceil(uv.max(axis=0)).astype(int) + 1
    u0, v0 = max(u0, 0), max(v0, 0)
    u1, v1 = min(u1, w), min(v1, h)
    if u0 >= u1 or v0 >= v1:
        return
    us, vs = np.meshgrid(np.arange(u0, u1) + 0.5, np.arange(v0, v1) + 0.5)
    d = np.stack([(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us)], axis=-1)
    dd = np.einsum("...i,...i->...", d, d)
    best = np.full(us.shape, np.inf)

    for c in (a, b):
        dc = d @ c
        disc = dc * dc - dd * (c @ c - r * r)
        ok = disc >= 0
        t = np.where(ok, (dc - np.sqrt(np.where(ok, disc, 0.0))) / dd, np.inf)
        best = np.minimum(best, np.where(t > 0, t, np.inf))

    axis = b - a
    length = np.linalg.norm(axis)
    wv = axis / length
    o = -a
    dw = d @ wv
    ow = o @ wv
    dperp = d - dw[..., None] * wv
    operp = o - ow * wv
    qa = np.einsum("...i,...i->...", dperp, dperp)
    qb = 2.0 * (dperp @ operp)
    qc = operp @ operp - r * r
    disc = qb * qb - 4.0 * qa * qc
    ok = (disc >= 0) & (qa > 1e-12)
    t = np.where(ok, (-qb - np.sqrt(np.where(ok, disc, 0.0))) / (2.0 * np.where(qa > 1e-12, qa, 1.0)), np.inf)
    s = ow + t * dw
    t = np.where((s >= 0) & (s <= length) & (t > 0), t, np.inf)
    best = np.minimum(best, t)

    # d has unit z, so the ray parameter equals metric depth
    region = zbuf[v0:v1, u0:u1]
    np.minimum(region, best, out=region)


def render_depth(cfg: GenConfig, joints: np.ndarray, radii: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cam = cfg.camera
    zbuf = np.full((cfg.image_height, cfg.image_width), np.inf)
    parents = cfg.parents()
    for j in range(1, len(joints)):
        _render_capsule(zbuf, cam, joints[parents[j]], joints[j], radii[j])
    depth = np.where(np.isfinite(zbuf), zbuf, cfg.background_depth)
    lo, hi = cfg.sensor_range
    depth[(depth < lo) | (depth > hi)] = 0.0
    if cfg.hole_fraction > 0:
        depth[rng.random(depth.shape) < cfg.hole_fraction] = 0.0
    return depth


@dataclass
class Sample:
    depth: np.ndarray         # (H, W) float32 cropped depth in mm, 0 = invalid
    uv: np.ndarray            # (K, 2) float32 in-plane target, crop pixels
    td: np.ndarray            # (K,) float32 transformed depth target
    transform: CropTransform
    world: np.ndarray         # (K, 3) float32 camera-frame mm
    subject: int = -1


def generate_sample(seed: int, cfg: GenConfig, subject_id: Optional[int] = None,
                    max_tries: int = 20) -> Sample:
    """Render one scene; a pure function of (seed, cfg, subject_id)."""
    rng = _rng(seed, 0xD47A)
    if subject_id is None:
        subject_id = int(rng.choice(cfg.train_subjects))
    subject = make_subject(cfg, subject_id)
    if np.any(subject.lengths[1:] <= 1e-6):
        raise ValueError("degenerate chain: zero-length bone")
    cam = cfg.camera
    for _ in range(max_tries):
        joints = pose_chain(cfg, subject, rng)
        uvz = cam.project(joints)
        inside = ((uvz[:, 0] >= 0) & (uvz[:, 0] < cfg.image_width)
                  & (uvz[:, 1] >= 0) & (uvz[:, 1] < cfg.image_height) & (uvz[:, 2] > 0))
        if inside.all():
            break
    else:
        raise RuntimeError(f"could not place a chain inside the image for seed {seed}")

    image = render_depth(cfg, joints, subject.radii, rng)
    if cfg.crop_mode == "center":
        center = joints.mean(axis=0) + rng.normal(0.0, cfg.center_jitter_mm, size=3)
        c_uvz = cam.project(center)
        region = center_region(c_uvz[:2], c_uvz[2], cfg.cube_mm, cam)
        theta = float(c_uvz[2])
    else:
        region = bbox_region(uvz[:, :2])
        theta = 0.0
    crop, t = crop_and_resize(image, region, (cfg.width, cfg.height), cfg.depth_mu, theta)
    uv, td = world_to_crop(joints, t, cam)
    return Sample(crop.astype(np.float32), uv.astype(np.float32), td.astype(np.float32), t,
                  joints.astype(np.float32), subject_id)


# -- augmentation -------------------------------------------------------------


@dataclass
class AugConfig:
    rotation_deg: float = 30.0
    scale_range: Tuple[float, float] = (0.9, 1.1)
    depth_scale_range: Tuple[float, float] = (0.95, 1.05)
    noise_sigma: float = 5.0
    noise_prob: float = 0.5

    @classmethod
    def identity(cls) -> "AugConfig":
        return cls(0.0, (1.0, 1.0), (1.0, 1.0), 0.0, 0.0)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class AugDraw:
    angle: float
    scale: float
    depth_scale: float
    noise: bool


def draw_augmentation(seed: int, aug: AugConfig) -> AugDraw:
    rng = _rng(seed, 0xA06)
    angle = rng.uniform(-aug.rotation_deg, aug.rotation_deg) if aug.rotation_deg > 0 else 0.0
    scale = rng.uniform(*aug.scale_range) if aug.scale_range[0] != aug.scale_range[1] else aug.scale_range[0]
    dscale = (rng.uniform(*aug.depth_scale_range)
              if aug.depth_scale_range[0] != aug.depth_scale_range[1] else aug.depth_scale_range[0])
    noise = bool(rng.random() < aug.noise_prob)
    return AugDraw(float(angle), float(scale), float(dscale), noise)


def _in_bounds(uv: np.ndarray, w: int, h: int) -> bool:
    return bool(np.all((uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)))


def augment(sample: Sample, seed: int, aug: AugConfig, cam: Optional[CameraIntrinsics] = None,
            draw: Optional[AugDraw] = None) -> Sample:
    """In-plain rotation and scaling about the crop center, depth scaling and Gaussian noise.

    If the drawn rotation/scale would push a joint outside the crop, the
    deviation is halved until it fits (logged).
    """
    d = draw or draw_augmentation(seed, aug)
    h, w = sample.depth.shape
    center = np.array([w / 2.0, h / 2.0])
    angle, scale = d.angle, d.scale
    for _ in range(12):
        uv = center + scale * (sample.uv - center) @ rotation_matrix(angle).T
        if _in_bounds(uv, w, h):
            break
        angle *= 0.5
        scale = 1.0 + (scale - 1.0) * 0.5
    else:
        angle, scale = 0.0, 1.0
        uv = sample.uv.astype(np.float64)
    if (angle, scale) != (d.angle, d.scale):
        log.info("augmentation clamped: rotation %.2f -> %.2f deg, scale %.3f -> %.3f", d.angle, angle, d.scale, scale)

    depth = sample.depth.astype(np.float64)
    if angle != 0.0 or scale != 1.0:
        gx, gy = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        rel = np.stack([gx - center[0], gy - center[1]], axis=-1) @ rotation_matrix(-angle).T / scale
        depth = bilinear_sample(depth, rel[..., 0] + center[0], rel[..., 1] + center[1])
    theta = sample.transform.theta
    valid = depth > 0
    td = sample.td.astype(np.float64)
    if d.depth_scale != 1.0:
        depth = np.where(valid, theta + d.depth_scale * (depth - theta), 0.0)
        td = td * d.depth_scale
    if d.noise and aug.noise_sigma > 0:
        rng = _rng(seed, 0x0153)
        depth = np.where(valid, depth + rng.normal(0.0, aug.noise_sigma, size=depth.shape), 0.0)
        depth = np.where(depth > 0, depth, 0.0)

    world = sample.world
    if cam is not None:
        world = predictions_to_world(uv, td, sample.transform, cam).astype(np.float32)
    return Sample(depth.astype(np.float32), uv.astype(np.float32), td.astype(np.float32),
                  sample.transform, world, sample.subject)


# -- dataset container --------------------------------------------------------


@dataclass
class Dataset:
    depth: np.ndarray        # (N, H, W) float32
    uv: np.ndarray           # (N, K, 2) float32
    td: np.ndarray           # (N, K) float32
    world: np.ndarray        # (N, K, 3) float32
    transforms: List[CropTransform]
    subjects: np.ndarray     # (N,) int
    camera: CameraIntrinsics
    config: GenConfig
    seeds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.depth)

    @property
    def num_joints(self) -> int:
        return self.uv.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.depth[i], self.uv[i], self.td[i], self.transforms[i], self.world[i], int(self.subjects[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, depth=self.depth[idx], uv=self.uv[idx], td=self.td[idx], world=self.world[idx],
                       transforms=[self.transforms[i] for i in idx], subjects=self.subjects[idx],
                       seeds=self.seeds[idx] if len(self.seeds) else self.seeds)

    def network_inputs(self, depth: Optional[np.ndarray] = None, idx=None) -> np.ndarray:
        """Normalized network inputs (N, H, W); ``depth`` replaces the stored maps of samples ``idx``."""
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        depth = self.depth[idx] if depth is None else depth
        half = self.config.input_half_range
        thetas = [self.transforms[i].theta for i in idx]
        if self.config.crop_mode == "bbox":
            return np.stack([_bbox_input(d) for d in depth])
        return np.stack([network_input(d, th, half) for d, th in zip(depth, thetas)])

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], cfg: GenConfig, seeds=None) -> "Dataset":
        return cls(
            depth=np.stack([s.depth for s in samples]).astype(np.float32),
            uv=np.stack([s.uv for s in samples]).astype(np.float32),
            td=np.stack([s.td for s in samples]).astype(np.float32),
            world=np.stack([s.world for s in samples]).astype(np.float32),
            transforms=[s.transform for s in samples],
            subjects=np.array([s.subject for s in samples], dtype=np.int64),
            camera=cfg.camera,
            config=cfg,
            seeds=np.asarray(seeds if seeds is not None else np.zeros(len(samples)), dtype=np.int64),
        )


def _bbox_input(depth: np.ndarray) -> np.ndarray:
    valid = depth > 0
    if not valid.any():
        return np.ones_like(depth, dtype=np.float32)
    near = depth[valid].min()
    return network_input(depth, near + 500.0, 500.0)


def sample_seed(master_seed: int, index: int) -> int:
    """Counter-based per-sample seed: a pure function of (master seed, index)."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0] >> 1)


TEST_STREAM_OFFSET = 1_000_000


def generate_dataset(master_seed: int, cfg: GenConfig, count: int, split: str = "train") -> Dataset:
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    subjects = cfg.train_subjects if split == "train" else cfg.test_subjects
    offset = 0 if split == "train" else TEST_STREAM_OFFSET
    samples, seeds = [], []
    for i in range(count):
        s = sample_seed(master_seed, offset + i)
        subject = subjects[i % len(subjects)]
        samples.append(generate_sample(s, cfg, subject))
        seeds.append(s)
    return Dataset.from_samples(samples, cfg, seeds)


_BLOBS = ("depth", "uv", "td", "world")


def write_dataset(path: str, ds: Dataset) -> None:
    os.makedirs(path, exist_ok=True)
    blobs = {}
    for name in _BLOBS:
        arr = np.ascontiguousarray(getattr(ds, name), dtype="<f4")
        fname = f"{name}.f32"
        with open(os.path.join(path, fname), "wb") as fh:
            fh.write(arr.tobytes())
        blobs[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "count": len(ds),
        "num_joints": ds.num_joints,
        "width": int(ds.depth.shape[2]),
        "height": int(ds.depth.shape[1]),
        "intrinsics": ds.camera.to_dict(),
        "gen_config": ds.config.to_dict(),
        "blobs": blobs,
        "samples": [
            {"transform": t.to_dict(), "subject": int(s), "seed": int(sd)}
            for t, s, sd in zip(ds.transforms, ds.subjects, _padded_seeds(ds))
        ],
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def _padded_seeds(ds: Dataset) -> np.ndarray:
    return ds.seeds if len(ds.seeds) == len(ds) else np.zeros(len(ds), dtype=np.int64)


def read_dataset(path: str) -> Dataset:
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {mpath}: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise DatasetError(f"not a dataset container: format={manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset version {manifest.get('version')} (expected {FORMAT_VERSION})")
    n, k = manifest["count"], manifest["num_joints"]
    h, w = manifest["height"], manifest["width"]
    expected = {"depth": (n, h, w), "uv": (n, k, 2), "td": (n, k), "world": (n, k, 3)}
    arrays = {}
    for name in _BLOBS:
        info = manifest["blobs"][name]
        shape = tuple(info["shape"])
        if shape != expected[name]:
            raise DatasetError(f"blob {name} has shape {shape}, manifest implies {expected[name]}")
        fpath = os.path.join(path, info["file"])
        nbytes = int(np.prod(shape)) * 4
        size = os.path.getsize(fpath) if os.path.exists(fpath) else -1
        if size != nbytes:
            raise DatasetError(f"blob {info['file']} is {size} bytes, expected {nbytes} (truncated or corrupt)")
        arrays[name] = np.fromfile(fpath, dtype="<f4").reshape(shape).astype(np.float32)
    if len(manifest["samples"]) != n:
        raise DatasetError("per-sample metadata count does not match sample count")
    cfg = GenConfig.from_dict(manifest["gen_config"])
    if cfg.num_joints != k:
        raise DatasetError(f"manifest K={k} disagrees with generation config K={cfg.num_joints}")
    return Dataset(
        depth=arrays["depth"], uv=arrays["uv"], td=arrays["td"], world=arrays["world"],
        transforms=[CropTransform.from_dict(s["transform"]) for s in manifest["samples"]],
        subjects=np.array([s["subject"] for s in manifest["samples"]], dtype=np.int64),
        camera=CameraIntrinsics(**manifest["intrinsics"]),
        config=cfg,
        seeds=np.array([s["seed"] for s in manifest["samples"]], dtype=np.int64),
    )
