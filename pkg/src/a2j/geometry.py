"""Anchor grid, cropping with recorded transforms, and coordinate conversions.

Pixel coordinates are continuous: pixel ``i`` covers ``[i, i + 1)`` and its
center sits at ``i + 0.5``. All in-plane quantities (anchors, offsets, targets)
are in cropped-image pixels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class AnchorGrid:
    stride: int
    width: int
    height: int
    positions: np.ndarray   # (A, 2) float, (x, y), row-major order
    cell_map: np.ndarray    # (cells, anchors_per_cell) int, row-major cells and sub-slots
    cells_x: int
    cells_y: int

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def feature_shape(self) -> Tuple[int, int]:
        return self.cells_y, self.cells_x

    @property
    def anchors_per_cell(self) -> int:
        return self.cell_map.shape[1]

    def channel_index(self) -> np.ndarray:
        """For anchor ``a``, its position in the (cell, slot)-flattened order."""
        idx = np.empty(self.count, dtype=np.intp)
        per = self.anchors_per_cell
        for cell, anchors in enumerate(self.cell_map):
            idx[anchors] = cell * per + np.arange(per)
        return idx


def build_anchor_grid(width: int, height: int, stride: int = 4, downsample: int = 16) -> AnchorGrid:
    """Anchors at the centers of ``stride``-sized blocks, grouped per feature cell."""
    if stride <= 0 or width % stride or height % stride:
        raise ValueError(f"image size {width}x{height} is not divisible by anchor stride {stride}")
    if downsample % stride or width % downsample or height % downsample:
        raise ValueError(f"image size {width}x{height} and stride {stride} incompatible with downsample {downsample}")
    nx, ny = width // stride, height // stride
    cols, rows = np.meshgrid(np.arange(nx), np.arange(ny))
    positions = np.stack([cols.ravel() * stride + stride / 2.0, rows.ravel() * stride + stride / 2.0], axis=1)

    sub = downsample // stride
    cx, cy = width // downsample, height // downsample
    cell_map = np.empty((cx * cy, sub * sub), dtype=np.intp)
    for r in range(cy):
        for c in range(cx):
            sr, sc = np.meshgrid(np.arange(sub), np.arange(sub), indexing="ij")
            anchor_rows = r * sub + sr.ravel()
            anchor_cols = c * sub + sc.ravel()
            cell_map[r * cx + c] = anchor_rows * nx + anchor_cols
    return AnchorGrid(stride, width, height, positions, cell_map, cx, cy)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def project(self, xyz: np.ndarray) -> np.ndarray:
        """World (camera-frame) mm to source-image pixels and depth: (..., 3) -> (..., 3)."""
        xyz = np.asarray(xyz, dtype=np.float64)
        z = xyz[..., 2]
        u = self.fx * xyz[..., 0] / z + self.cx
        v = self.fy * xyz[..., 1] / z + self.cy
        return np.stack([u, v, z], axis=-1)

    def backproject(self, uvz: np.ndarray) -> np.ndarray:
        uvz = np.asarray(uvz, dtype=np.float64)
        z = uvz[..., 2]
        x = (uvz[..., 0] - self.cx) * z / self.fx
        y = (uvz[..., 1] - self.cy) * z / self.fy
        return np.stack([x, y, z], axis=-1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CropTransform:
    """Maps source pixels to crop pixels: ``crop = (src - origin) * scale``.

    ``mu`` and ``theta`` parametrize the depth target ``mu * (Z - theta)``.
    """

    x0: float
    y0: float
    x1: float
    y1: float
    out_width: int
    out_height: int
    mu: float = 1.0
    theta: float = 0.0

    @property
    def scale(self) -> Tuple[float, float]:
        return self.out_width / (self.x1 - self.x0), self.out_height / (self.y1 - self.y0)

    def forward_points(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        sx, sy = self.scale
        return np.stack([(uv[..., 0] - self.x0) * sx, (uv[..., 1] - self.y0) * sy], axis=-1)

    def inverse_points(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        sx, sy = self.scale
        return np.stack([uv[..., 0] / sx + self.x0, uv[..., 1] / sy + self.y0], axis=-1)

    def depth_forward(self, z):
        return depth_target_transform(z, self.mu, self.theta)

    def depth_inverse(self, td):
        return depth_target_inverse(td, self.mu, self.theta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CropTransform":
        return cls(**d)


def depth_target_transform(z, mu: float, theta: float):
    return mu * (np.asarray(z) - theta)


def depth_target_inverse(td, mu: float, theta: float):
    if mu == 0:
        raise ValueError("depth transform with mu = 0 is not invertible")
    return np.asarray(td) / mu + theta


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``image`` at continuous coordinates, ignoring zero (invalid) pixels.

    Weights of valid neighbours are renormalized; when no neighbour is valid the
    result is 0. Out-of-bounds neighbours count as invalid.
    """
    h, w = image.shape
    fx = np.asarray(xs, dtype=np.float64) - 0.5
    fy = np.asarray(ys, dtype=np.float64) - 0.5
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    ax = fx - x0
    ay = fy - y0
    acc = np.zeros(fx.shape, dtype=np.float64)
    wsum = np.zeros(fx.shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - ay), (1, ay)):
        for dx, wx in ((0, 1.0 - ax), (1, ax)):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.zeros(fx.shape, dtype=np.float64)
            vals[inside] = image[yi[inside], xi[inside]]
            wgt = wx * wy * (inside & (vals > 0))
            acc += wgt * vals
            wsum += wgt
    out = np.zeros(fx.shape, dtype=np.float64)
    ok = wsum > 1e-12
    out[ok] = acc[ok] / wsum[ok]
    return out


def nearest_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = image.shape
    xi = np.floor(xs).astype(np.int64)
    yi = np.floor(ys).astype(np.int64)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.zeros(np.shape(xs), dtype=np.float64)
    out[inside] = image[yi[inside], xi[inside]]
    return out


def center_region(center_uv: Sequence[float], center_depth: float, cube_mm: Sequence[float],
                  cam: CameraIntrinsics) -> Tuple[float, float, float, float]:
    """Pixel region covered by a metric cube around a given 3-d center."""
    half_w = cam.fx * cube_mm[0] / 2.0 / center_depth
    half_h = cam.fy * cube_mm[1] / 2.0 / center_depth
    u, v = center_uv
    return (u - half_w, v - half_h, u + half_w, v + half_h)


def crop_and_resize(image: np.ndarray, region: Sequence[float], target: Tuple[int, int],
                    mu: float = 1.0, theta: float = 0.0) -> Tuple[np.ndarray, CropTransform]:
    """Resample the pixel ``region`` (x0, y0, x1, y1) of a depth image to ``target`` (W, H).

    Depth values stay in millimetres; invalid (zero) pixels are excluded from
    interpolation.
    """
    x0, y0, x1, y1 = (float(v) for v in region)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate crop region {region}")
    h, w = image.shape
    if x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
        raise ValueError(f"crop region {region} does not overlap the {w}x{h} image")
    tw, th = int(target[0]), int(target[1])
    t = CropTransform(x0, y0, x1, y1, tw, th, float(mu), float(theta))
    gx, gy = np.meshgrid(np.arange(tw) + 0.5, np.arange(th) + 0.5)
    src = t.inverse_points(np.stack([gx, gy], axis=-1))
    out = bilinear_sample(np.asarray(image, dtype=np.float64), src[..., 0], src[..., 1])
    return out.astype(np.float32), t


def bbox_region(uv: np.ndarray, margin: float = 0.15, square: bool = True) -> Tuple[float, float, float, float]:
    """Bounding region of 2-d points expanded by a relative margin."""
    lo = uv.min(axis=0)
    hi = uv.max(axis=0)
    size = hi - lo
    if np.any(size <= 0):
        raise ValueError("degenerate bounding box")
    center = (lo + hi) / 2.0
    half = size / 2.0 * (1.0 + margin)
    if square:
        half = np.full(2, half.max())
    return (center[0] - half[0], center[1] - half[1], center[0] + half[0], center[1] + half[1])


def unwarp_to_world(uv: np.ndarray, depth_mm, t: CropTransform, cam: CameraIntrinsics) -> np.ndarray:
    """Crop-space pixels plus metric depth to camera-frame millimetres."""
    sx, sy = t.scale
    if not (np.isfinite(sx) and np.isfinite(sy)) or sx <= 0 or sy <= 0:
        raise ValueError("crop transform is not invertible")
    src = t.inverse_points(uv)
    z = np.asarray(depth_mm, dtype=np.float64)
    return cam.backproject(np.concatenate([src, z[..., None]], axis=-1))


def world_to_crop(xyz: np.ndarray, t: CropTransform, cam: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Camera-frame millimetres to (crop pixels, transformed depth)."""
    uvz = cam.project(xyz)
    return t.forward_points(uvz[..., :2]), t.depth_forward(uvz[..., 2])


def predictions_to_world(uv: np.ndarray, td: np.ndarray, t: CropTransform, cam: CameraIntrinsics) -> np.ndarray:
    """Network-space estimates (crop pixels, transformed depth) to world mm."""
    return unwarp_to_world(uv, t.depth_inverse(td), t, cam)


def network_input(depth_crop: np.ndarray, theta: float, half_range: float) -> np.ndarray:
    """Normalize a cropped metric depth map to roughly [-1, 1]; invalid and far pixels map to 1."""
    d = np.asarray(depth_crop, dtype=np.float64)
    out = np.clip((d - theta) / half_range, -1.0, 1.0)
    out[d <= 0] = 1.0
    return out.astype(np.float32)


def rotation_matrix(deg: float) -> np.ndarray:
    r = np.deg2rad(deg)
    c, s = np.cos(r), np.sin(r)
    return np.array([[c, -s], [s, c]])


def optional_region(center_or_bbox, cam: Optional[CameraIntrinsics], cube_mm) -> Tuple[float, float, float, float]:
    """Accepts either a (x0, y0, x1, y1) box or a (u, v, depth) center."""
    vals = tuple(float(v) for v in center_or_bbox)
    if len(vals) == 4:
        return vals
    if len(vals) == 3:
        if cam is None or cube_mm is None:
            raise ValueError("center cropping needs camera intrinsics and a cube size")
        return center_region(vals[:2], vals[2], cube_mm, cam)
    raise ValueError("expected a 3-value center or 4-value box")
