"""Liquid stream geometry: pouring plane, pixel rays and their intersection.

Everything lives in the camera frame (x right, y down, z forward, meters).
The ray origin is the camera center, so a ray is fully described by its
direction ``d = K^-1 [u, v, 1]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class GeometryError(ValueError):
    """Raised when a construction has no well-defined answer."""


class DegenerateGeometryError(GeometryError):
    pass


class NoIntersectionError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


class NoLiquidError(GeometryError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, s: float) -> "CameraIntrinsics":
        """Intrinsics after resizing the image by factor ``s`` (pixel-center convention)."""
        return CameraIntrinsics(self.fx * s, self.fy * s, (self.cx + 0.5) * s - 0.5, (self.cy + 0.5) * s - 0.5)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass(frozen=True)
class Pose:
    """Rotation with columns R_x | R_y | R_z and translation t, camera frame."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R is not a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def Rx(self):
        return self.R[:, 0]

    @property
    def Ry(self):
        return self.R[:, 1]

    @property
    def Rz(self):
        return self.R[:, 2]

    def to_dict(self):
        return {"rotation": self.R.reshape(-1).tolist(), "translation": self.t.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["rotation"], dtype=np.float64).reshape(3, 3), np.array(d["translation"], dtype=np.float64))


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    point: np.ndarray

    def residual(self, p):
        """Signed distance of point(s) ``p`` to the plane."""
        return (np.asarray(p) - self.point) @ self.normal


@dataclass(frozen=True)
class Ray:
    direction: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def at(self, kappa):
        return self.origin + kappa * self.direction


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)
    pixels: np.ndarray  # (N, 2) as (u, v) of the source pixel
    n_dropped: int = 0

    def __len__(self):
        return len(self.points)

    @property
    def empty(self):
        return len(self.points) == 0


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def decompose_axis(Rz, g, tol=1e-6):
    """Split the container axis into parts perpendicular and parallel to gravity.

    Returns ``(R_perp, R_par)`` with ``R_perp + R_par == Rz``.
    """
    Rz = np.asarray(Rz, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    R_par = (Rz @ g) * g
    R_perp = Rz - R_par
    # one refinement pass removes the rounding left in R_perp . g
    R_perp = R_perp - (R_perp @ g) * g
    R_par = Rz - R_perp
    if np.linalg.norm(R_perp) < tol:
        raise DegenerateGeometryError("container axis is parallel to gravity; no pouring plane exists")
    return R_perp, R_par


def pouring_plane(pose: Pose, g) -> Plane:
    R_perp, _ = decompose_axis(pose.Rz, g)
    n = R_perp / np.linalg.norm(R_perp)
    n = n - (n @ g) * np.asarray(g)
    return Plane(normal=n / np.linalg.norm(n), point=pose.t.copy())


def backproject_ray(u, v, K: CameraIntrinsics) -> Ray:
    d = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    return Ray(direction=d)


def backproject_rays(uv: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Vectorised ray directions for an (N, 2) array of (u, v)."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    return np.column_stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(len(uv))])


def intersect(ray: Ray, plane: Plane, tol=1e-9) -> np.ndarray:
    """Point where a camera ray pierces the plane: ``p = kappa d``."""
    denom = ray.direction @ plane.normal
    if abs(denom) <= tol:
        raise NoIntersectionError("ray is parallel to the pouring plane")
    kappa = (plane.point @ plane.normal) / denom
    if kappa <= 0:
        raise BehindCameraError(f"intersection lies behind the camera (kappa={kappa:.3g})")
    return kappa * ray.direction


def intersect_many(dirs: np.ndarray, plane: Plane, tol=1e-9):
    """Vectorised :func:`intersect`. Returns ``(points, valid)``; invalid rows are NaN."""
    denom = dirs @ plane.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = (plane.point @ plane.normal) / denom
    valid = (np.abs(denom) > tol) & (kappa > 0)
    pts = np.full(dirs.shape, np.nan)
    pts[valid] = kappa[valid, None] * dirs[valid]
    return pts, valid


def project(p, K: CameraIntrinsics) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.stack([K.fx * p[..., 0] / p[..., 2] + K.cx, K.fy * p[..., 1] / p[..., 2] + K.cy], axis=-1)


def liquid_point_cloud(mask, pose: Pose, K: CameraIntrinsics, g, skeleton_first=True) -> PointCloud:
    """Lift the pixels of a liquid mask onto the pouring plane.

    With ``skeleton_first`` the mask is thinned to its centerline before lifting.
    Zhang-Suen erases compact blobs (a 2x2 core is deleted whole); if nothing
    survives, the unthinned mask is lifted instead.
    Pixels whose ray misses the plane (parallel or behind camera) are dropped.
    """
    from .camseg import skeletonize

    plane = pouring_plane(pose, g)
    mask = np.asarray(mask).astype(bool)
    if skeleton_first:
        thin = skeletonize(mask)
        if mask.any() and not thin.any():
            log.warning("skeleton of a %d-pixel mask is empty; lifting the full mask", int(mask.sum()))
        else:
            mask = thin
    vs, us = np.nonzero(mask)
    uv = np.column_stack([us, vs]).astype(np.float64)
    if len(uv) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 2)))
    pts, valid = intersect_many(backproject_rays(uv, K), plane)
    n_dropped = int((~valid).sum())
    if n_dropped == len(uv):
        log.warning("all %d liquid pixels were dropped during back-projection", n_dropped)
    return PointCloud(pts[valid], uv[valid], n_dropped)


def horizontal_offset(cloud: PointCloud, target_center, g) -> np.ndarray:
    """Vector from the target center to the stream landing point, gravity removed.

    The landing point is the cloud point lowest along gravity.
    """
    if cloud.empty:
        raise NoLiquidError("no liquid detected: point cloud is empty")
    g = unit(g)
    low = cloud.points[np.argmax(cloud.points @ g)]
    diff = low - np.asarray(target_center, dtype=np.float64)
    return diff - (diff @ g) * g


def liquid_to_container_distance(cloud: PointCloud, target_center, g) -> float:
    return float(np.linalg.norm(horizontal_offset(cloud, target_center, g)))


def rotation_about(axis, angle) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = unit(axis)
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * (Kx @ Kx)


def orthonormalize(R) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    if np.linalg.det(R) < 0:
        u[:, -1] *= -1
        R = u @ vt
    return R


def write_ply(path, points) -> None:
    """ASCII PLY with float x y z vertices."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    lines += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in points.astype(np.float32).astype(np.float64)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path) -> np.ndarray:
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text or text[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = 0
    for i, line in enumerate(text):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line == "end_header":
            body = text[i + 1 : i + 1 + n]
            break
    else:
        raise ValueError(f"{path}: missing end_header")
    if n == 0:
        return np.zeros((0, 3))
    return np.array([[float(t) for t in ln.split()[:3]] for ln in body])
