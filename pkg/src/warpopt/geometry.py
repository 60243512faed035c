"""Pinhole camera model, SE(3) pose algebra and point projection.

Conventions fixed across the whole package:
  * Euler rotations compose as R = Rx(rx) @ Ry(ry) @ Rz(rz).
  * Transforms act on column vectors: X' = R @ X + t.
  * Pixel coordinates are (u, v) = (column, row), u along width.
  * Depth is the camera-frame z coordinate in meters; a point is only
    considered projectable when z > Z_EPS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# Minimum camera-frame depth for a point to project validly.
Z_EPS = 1e-6

# Guard on in-bounds comparisons so projection round-trips are not broken by
# a few ulps of floating-point noise at the image border.
BOUNDS_EPS = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters, in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) coordinate rasters of shape (height, width)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return u.astype(np.float64), v.astype(np.float64)


@dataclass
class PoseSE3:
    """6-DoF rigid motion: three Euler angles (radians) and a translation (meters)."""

    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_params(cls, p) -> "PoseSE3":
        p = np.asarray(p, dtype=np.float64).reshape(6)
        return cls(*[float(x) for x in p])

    def params(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz, self.tx, self.ty, self.tz],
                        dtype=np.float64)

    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz], dtype=np.float64)

    def copy(self) -> "PoseSE3":
        return PoseSE3(*self.params())


@dataclass
class PointCloud:
    """Per-pixel 3D camera-frame points with validity flags."""

    points: np.ndarray  # (..., 3)
    valid: np.ndarray   # (...), bool


class Projection(NamedTuple):
    """Continuous pixel coordinates, depths and in-bounds flags."""

    uv: np.ndarray     # (..., 2)
    depth: np.ndarray  # (...)
    valid: np.ndarray  # (...), bool


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    """R = Rx(rx) @ Ry(ry) @ Rz(rz)."""
    return rot_x(rx) @ rot_y(ry) @ rot_z(rz)


def rotation_derivatives(rx: float, ry: float, rz: float):
    """Rotation matrix and its derivative w.r.t. each Euler angle.

    Returns (R, dR) where dR has shape (3, 3, 3) and dR[i] = dR/dangle_i.
    """
    Rx, Ry, Rz = rot_x(rx), rot_y(ry), rot_z(rz)
    cx_, sx_ = math.cos(rx), math.sin(rx)
    cy_, sy_ = math.cos(ry), math.sin(ry)
    cz_, sz_ = math.cos(rz), math.sin(rz)
    dRx = np.array([[0.0, 0.0, 0.0], [0.0, -sx_, -cx_], [0.0, cx_, -sx_]])
    dRy = np.array([[-sy_, 0.0, cy_], [0.0, 0.0, 0.0], [-cy_, 0.0, -sy_]])
    dRz = np.array([[-sz_, -cz_, 0.0], [cz_, -sz_, 0.0], [0.0, 0.0, 0.0]])
    R = Rx @ Ry @ Rz
    dR = np.stack([dRx @ Ry @ Rz, Rx @ dRy @ Rz, Rx @ Ry @ dRz])
    return R, dR


def pose_to_transform(pose: PoseSE3) -> np.ndarray:
    """4x4 rigid transform for a pose; acts on column vectors X' = R X + t."""
    p = pose.params()
    if not np.all(np.isfinite(p)):
        raise ValueError("pose parameters must be finite")
    T = np.eye(4)
    T[:3, :3] = rotation_matrix(pose.rx, pose.ry, pose.rz)
    T[:3, 3] = [pose.tx, pose.ty, pose.tz]
    return T


def transform_to_pose(T: np.ndarray) -> PoseSE3:
    """Inverse of pose_to_transform, valid for |angles| < pi/2.

    Extraction for the Rx@Ry@Rz convention:
        R[0,2] = sin(ry); R[1,2] = -sin(rx)cos(ry); R[0,1] = -cos(ry)sin(rz).
    """
    T = np.asarray(T, dtype=np.float64)
    R = T[:3, :3]
    sy = float(np.clip(R[0, 2], -1.0, 1.0))
    ry = math.asin(sy)
    if abs(math.cos(ry)) > 1e-9:
        rx = math.atan2(-R[1, 2], R[2, 2])
        rz = math.atan2(-R[0, 1], R[0, 0])
    else:
        # Gimbal lock: rz is unobservable, fold it into rx.
        rx = math.atan2(R[2, 1], R[1, 1])
        rz = 0.0
    return PoseSE3(rx, ry, rz, float(T[0, 3]), float(T[1, 3]), float(T[2, 3]))


def _as_transform(x) -> np.ndarray:
    if isinstance(x, PoseSE3):
        return pose_to_transform(x)
    T = np.asarray(x, dtype=np.float64)
    if T.shape != (4, 4):
        raise ValueError(f"expected PoseSE3 or 4x4 transform, got shape {T.shape}")
    return T


def compose(a, b) -> np.ndarray:
    """Composition a∘b: apply b first, then a. Accepts PoseSE3 or 4x4 arrays."""
    return _as_transform(a) @ _as_transform(b)


def invert(a) -> np.ndarray:
    """Inverse of a rigid transform, computed in closed form."""
    T = _as_transform(a)
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def apply_transform(T, pts: np.ndarray) -> np.ndarray:
    """Apply a rigid transform to an (..., 3) array of points."""
    T = _as_transform(T)
    return pts @ T[:3, :3].T + T[:3, 3]


def backproject(depth: np.ndarray, K: Intrinsics, valid: np.ndarray | None = None) -> PointCloud:
    """Lift a depth map to camera-frame 3D points.

    Point at pixel (u, v) with depth d is ((u-cx)*d/fx, (v-cy)*d/fy, d).
    Non-positive depths are marked invalid, not an error.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (K.height, K.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics "
                         f"{(K.height, K.width)}")
    u, v = K.pixel_grid()
    x = (u - K.cx) * depth / K.fx
    y = (v - K.cy) * depth / K.fy
    pts = np.stack([x, y, depth], axis=-1)
    ok = depth > 0.0
    if valid is not None:
        ok = ok & np.asarray(valid, dtype=bool)
    return PointCloud(points=pts, valid=ok)


def project(points, K: Intrinsics) -> Projection:
    """Project camera-frame points to continuous pixel coordinates.

    valid is False when z <= Z_EPS or the projection leaves
    [0, W-1] x [0, H-1]; such coordinates must be masked out downstream.
    """
    if isinstance(points, PointCloud):
        pts, pre_valid = points.points, points.valid
    else:
        pts, pre_valid = np.asarray(points, dtype=np.float64), None
    z = pts[..., 2]
    safe_z = np.where(np.abs(z) > Z_EPS, z, 1.0)
    u = K.fx * pts[..., 0] / safe_z + K.cx
    v = K.fy * pts[..., 1] / safe_z + K.cy
    ok = (z > Z_EPS) & (u >= -BOUNDS_EPS) & (u <= K.width - 1.0 + BOUNDS_EPS) \
        & (v >= -BOUNDS_EPS) & (v <= K.height - 1.0 + BOUNDS_EPS)
    if pre_valid is not None:
        ok = ok & pre_valid
    return Projection(uv=np.stack([u, v], axis=-1), depth=z, valid=ok)


def upsample_intrinsics(K: Intrinsics, alpha: int) -> Intrinsics:
    """Intrinsics for a grid enlarged by an integer factor alpha.

    All of fx, fy, cx, cy scale by alpha together with the image size.
    """
    if int(alpha) != alpha or alpha < 1:
        raise ValueError("upsampling factor must be an integer >= 1")
    alpha = int(alpha)
    return Intrinsics(
        fx=K.fx * alpha,
        fy=K.fy * alpha,
        cx=K.cx * alpha,
        cy=K.cy * alpha,
        width=K.width * alpha,
        height=K.height * alpha,
    )


def pose_transform_with_jacobian(params6: np.ndarray):
    """Transform and its derivative w.r.t. the 6 pose parameters.

    Returns (T, dT) with dT of shape (6, 4, 4); the first three slots are the
    Euler angles, the last three the translation components.
    """
    p = np.asarray(params6, dtype=np.float64).reshape(6)
    R, dR = rotation_derivatives(p[0], p[1], p[2])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = p[3:]
    dT = np.zeros((6, 4, 4))
    dT[:3, :3, :3] = dR
    for i in range(3):
        dT[3 + i, i, 3] = 1.0
    return T, dT


def invert_with_jacobian(T: np.ndarray, dT: np.ndarray):
    """Closed-form inverse transform together with its parameter jacobian.

    For Ti = [R^T, -R^T t]: dTi = [dR^T, -dR^T t - R^T dt].
    """
    R = T[:3, :3]
    t = T[:3, 3]
    Ti = np.eye(4)
    Ti[:3, :3] = R.T
    Ti[:3, 3] = -R.T @ t
    dTi = np.zeros_like(dT)
    dRT = np.transpose(dT[:, :3, :3], (0, 2, 1))
    dTi[:, :3, :3] = dRT
    dTi[:, :3, 3] = -np.einsum("pij,j->pi", dRT, t) - np.einsum("ij,pj->pi", R.T, dT[:, :3, 3])
    return Ti, dTi
