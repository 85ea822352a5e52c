"""Synthetic camera rigs, pinhole projection and z-buffer point splatting.

Camera convention: the extrinsic maps world to camera coordinates, the camera
looks along +z, image u grows along camera +x and v along camera +y (down).
A point lands in pixel ``(floor(u), floor(v))``.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import kernels
from .cloud import PointCloud

MIN_DEPTH = 1e-6
WORLD_UP = np.array([0.0, 0.0, 1.0])
FALLBACK_UP = np.array([0.0, 1.0, 0.0])
DEPTH_MAGIC = b"HDM1"


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 256.0
    fy: float = 256.0
    cx: float = 256.0
    cy: float = 256.0
    width: int = 512
    height: int = 512

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 16 or self.height < 16:
            raise ValueError("image must be at least 16x16 pixels")

    @classmethod
    def from_fov(cls, width: int = 512, height: int = 512, hfov_deg: float = 90.0) -> "Intrinsics":
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    def as_tuple(self):
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass
class CameraPose:
    intrinsic: Intrinsics
    extrinsic: np.ndarray  # 4x4 world -> camera

    def __post_init__(self):
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64)
        if self.extrinsic.shape != (4, 4):
            raise ValueError("extrinsic must be 4x4")
        rot = self.extrinsic[:3, :3]
        if orthonormality_residual(rot) > 1e-6 or np.linalg.det(rot) < 0:
            raise ValueError("extrinsic rotation must be a proper rotation")

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.extrinsic[:3, 3]


@dataclass
class RenderedView:
    pose: CameraPose
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W), +inf on empty pixels
    view_id: str
    index_map: Optional[np.ndarray] = None  # (H, W) winning point index, -1 empty


def orthonormality_residual(rot: np.ndarray) -> float:
    return float(np.abs(rot @ rot.T - np.eye(3)).max())


def look_at(eye, target, up=WORLD_UP) -> np.ndarray:
    """World-to-camera extrinsic for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError("camera position coincides with target")
    forward /= norm
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, FALLBACK_UP)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ eye
    return ext


def _grid_axis(lo: float, hi: float, margin: float, spacing: float) -> np.ndarray:
    a, b = lo + margin, hi - margin
    if a > b:
        return np.array([(lo + hi) / 2.0])
    count = int(np.floor((b - a) / spacing + 1e-9)) + 1
    return a + spacing * np.arange(count)


def grid_points(lo, hi, spacing: float, margin: float) -> np.ndarray:
    """Regular grid inside the box inset by ``margin``, anchored at the inset min corner.

    Axes whose inset interval is empty collapse to the box center.
    """
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    axes = [_grid_axis(lo[i], hi[i], margin, spacing) for i in range(3)]
    collapsed = [i for i in range(3) if hi[i] - lo[i] < 2 * margin]
    if collapsed:
        warnings.warn(f"grid axes {collapsed} narrower than twice the margin; "
                      "collapsed to the box center", RuntimeWarning, stacklevel=3)
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def grid_rig(cloud: PointCloud, spacing: float, margin: float,
             intrinsic: Intrinsics = Intrinsics()) -> List[CameraPose]:
    """Eight horizontal cameras (every 45 degrees of azimuth) at each grid point."""
    lo, hi = cloud.positions.min(axis=0), cloud.positions.max(axis=0)
    poses = []
    for center in grid_points(lo, hi, spacing, margin):
        for k in range(8):
            az = np.radians(45.0 * k)
            direction = np.array([np.cos(az), np.sin(az), 0.0])
            poses.append(CameraPose(intrinsic, look_at(center, center + direction)))
    return poses


def cube_rig(target, radius: float, intrinsic: Intrinsics = Intrinsics()) -> List[CameraPose]:
    """Eight cameras on the cube corners around ``target``, all looking at it."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    target = np.asarray(target, dtype=np.float64)
    poses = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            for sz in (-1, 1):
                eye = target + radius * np.array([sx, sy, sz]) / np.sqrt(3.0)
                poses.append(CameraPose(intrinsic, look_at(eye, target)))
    return poses


def to_camera(points: np.ndarray, pose: CameraPose) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points @ pose.rotation.T + pose.extrinsic[:3, 3]


def project_points(points, pose: CameraPose, check_bounds: bool = True):
    """Project world points through ``pose``.

    Returns ``(uv, depth, valid)``. Points with camera depth ``<= 1e-6`` are
    rejected, as are points outside the image when ``check_bounds`` is set.
    Rejected entries carry ``nan`` in ``uv``.
    """
    q = to_camera(points, pose)
    z = q[:, 2]
    valid = z > MIN_DEPTH
    uv = np.full((len(q), 2), np.nan)
    intr = pose.intrinsic
    zs = z[valid]
    uv[valid, 0] = intr.fx * q[valid, 0] / zs + intr.cx
    uv[valid, 1] = intr.fy * q[valid, 1] / zs + intr.cy
    if check_bounds:
        inside = ((uv[:, 0] >= 0) & (uv[:, 0] < intr.width)
                  & (uv[:, 1] >= 0) & (uv[:, 1] < intr.height))
        valid &= inside
        uv[~valid] = np.nan
    return uv, z, valid


def splat_render(cloud: PointCloud, pose: CameraPose, splat_px: int = 2,
                 view_id: str = "view") -> RenderedView:
    """Render RGB and depth by painting a square splat per point, nearest depth wins."""
    if splat_px < 0:
        raise ValueError("splat_px must be >= 0")
    intr = pose.intrinsic
    uv, z, valid = project_points(cloud.positions, pose)
    idx = np.flatnonzero(valid)
    px = np.floor(uv[idx, 0]).astype(np.int64)
    py = np.floor(uv[idx, 1]).astype(np.int64)
    winner, zbuf = kernels.splat_zbuffer(px, py, z[idx], intr.height, intr.width, splat_px)
    index_map = np.full(winner.shape, -1, dtype=np.int64)
    painted = winner >= 0
    index_map[painted] = idx[winner[painted]]
    rgb = np.zeros((intr.height * intr.width, 3))
    hit = index_map >= 0
    rgb[hit] = cloud.colors[index_map[hit]]
    shape = (intr.height, intr.width)
    return RenderedView(pose, rgb.reshape(*shape, 3), zbuf.reshape(shape), view_id,
                        index_map.reshape(shape))


def render_views(cloud: PointCloud, poses: Sequence[CameraPose], splat_px: int = 2,
                 prefix: str = "v", start: int = 0, threads: int = 1) -> List[RenderedView]:
    ids = [f"{prefix}{start + i:05d}" for i in range(len(poses))]
    if threads <= 1:
        return [splat_render(cloud, p, splat_px, v) for p, v in zip(poses, ids)]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(lambda a: splat_render(cloud, a[0], splat_px, a[1]), zip(poses, ids)))


# ----------------------------------------------------------------------- files

def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def write_depth(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    Path(path).write_bytes(DEPTH_MAGIC + struct.pack("<II", h, w)
                           + depth.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != DEPTH_MAGIC:
        raise ValueError(f"{path}: bad depth magic {data[:4]!r}")
    h, w = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * h * w:
        raise ValueError(f"{path}: depth payload size mismatch")
    return np.frombuffer(data, dtype="<f4", offset=12).astype(np.float64).reshape(h, w)


def pose_record(view_id: str, pose: CameraPose) -> dict:
    return {"view_id": view_id,
            "extrinsic": [float(x) for x in pose.extrinsic.ravel()],
            "intrinsic": list(pose.intrinsic.as_tuple())}


def pose_from_record(rec: dict) -> CameraPose:
    fx, fy, cx, cy, w, h = rec["intrinsic"]
    return CameraPose(Intrinsics(fx, fy, cx, cy, int(w), int(h)),
                      np.array(rec["extrinsic"], dtype=np.float64).reshape(4, 4))


def write_manifest(path, views: Sequence[RenderedView]) -> None:
    with open(path, "w") as fh:
        for v in views:
            fh.write(json.dumps(pose_record(v.view_id, v.pose), sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["view_id"]] = pose_from_record(rec)
    return out


def save_views(directory, views: Sequence[RenderedView]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for v in views:
        write_ppm(directory / f"{v.view_id}.ppm", v.rgb)
        write_depth(directory / f"{v.view_id}.hdm1", v.depth)
    write_manifest(directory / "poses.jsonl", views)


def load_views(directory, view_ids: Optional[Sequence[str]] = None) -> List[RenderedView]:
    """Reload saved views. ``index_map`` is not persisted and comes back as ``None``."""
    directory = Path(directory)
    poses = read_manifest(directory / "poses.jsonl")
    ids = list(poses) if view_ids is None else list(view_ids)
    return [RenderedView(poses[v], read_ppm(directory / f"{v}.ppm"),
                         read_depth(directory / f"{v}.hdm1"), v) for v in ids]
