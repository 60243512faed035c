"""Inverse (grid-sampling) and forward (splatting) warps for rasters.

Inverse warping reconstructs the target view by bilinearly sampling the
source raster at locations computed from the *target* depth and the
target-to-source pose. Forward warping projects every source pixel into the
target view using the *source* depth and the source-to-target pose; collisions
are resolved by a z-buffer and unassigned target pixels remain holes. To
shrink the holes the source rasters can be pre-upsampled by an integer factor
alpha before projection.

Inverse warping is differentiable w.r.t. the sampling coordinates and is the
only warp the optimizer routes gradients through; forward warping uses
nearest-pixel rasterization and is treated as a non-differentiable producer
of intermediate inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    BOUNDS_EPS,
    Intrinsics,
    PoseSE3,
    Z_EPS,
    _as_transform,
    apply_transform,
    backproject,
    upsample_intrinsics,
)


@dataclass
class WarpResult:
    """A warped raster plus validity; invalid pixels carry value 0."""

    data: np.ndarray   # (H, W) or (H, W, C)
    valid: np.ndarray  # (H, W), bool

    @property
    def hole_fraction(self) -> float:
        return float(1.0 - np.count_nonzero(self.valid) / self.valid.size)


def bilinear_sample(src: np.ndarray, u: np.ndarray, v: np.ndarray,
                    clamp: bool = False):
    """Bilinear sampling of src at continuous coordinates (u, v).

    With clamp=False samples use zero padding outside the raster and the
    returned `inside` flags mark coordinates within [0, W-1] x [0, H-1].
    With clamp=True coordinates are clamped to the raster (edge replication)
    and `inside` is all True.
    """
    src = np.asarray(src, dtype=np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[..., None]
    H, W, C = src.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if clamp:
        u = np.clip(u, 0.0, W - 1.0)
        v = np.clip(v, 0.0, H - 1.0)
    inside = (u >= -BOUNDS_EPS) & (u <= W - 1.0 + BOUNDS_EPS) \
        & (v >= -BOUNDS_EPS) & (v <= H - 1.0 + BOUNDS_EPS)

    u0 = np.floor(u)
    v0 = np.floor(v)
    du = u - u0
    dv = v - v0
    u0 = u0.astype(np.int64)
    v0 = v0.astype(np.int64)

    out = np.zeros(u.shape + (C,), dtype=np.float64)
    for oi, oj, w in (
        (0, 0, (1.0 - du) * (1.0 - dv)),
        (1, 0, du * (1.0 - dv)),
        (0, 1, (1.0 - du) * dv),
        (1, 1, du * dv),
    ):
        ui = u0 + oi
        vi = v0 + oj
        ok = (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
        uc = np.clip(ui, 0, W - 1)
        vc = np.clip(vi, 0, H - 1)
        vals = src[vc, uc]
        out += np.where(ok, w, 0.0)[..., None] * vals
    if squeeze:
        out = out[..., 0]
    return out, inside


def bilinear_sample_with_grad(src: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Sampled values plus their derivatives w.r.t. the coordinates.

    Zero padding outside the raster; the derivative is that of the
    zero-padded bilinear interpolant (piecewise linear, defined a.e.).
    Returns (values, d/du, d/dv), each (..., C) for a (H, W, C) source.
    """
    src = np.asarray(src, dtype=np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[..., None]
    H, W, C = src.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)

    u0 = np.floor(u)
    v0 = np.floor(v)
    du = u - u0
    dv = v - v0
    u0 = u0.astype(np.int64)
    v0 = v0.astype(np.int64)

    out = np.zeros(u.shape + (C,), dtype=np.float64)
    gu = np.zeros_like(out)
    gv = np.zeros_like(out)
    for oi, oj, w, wu, wv in (
        (0, 0, (1.0 - du) * (1.0 - dv), -(1.0 - dv), -(1.0 - du)),
        (1, 0, du * (1.0 - dv), (1.0 - dv), -du),
        (0, 1, (1.0 - du) * dv, -dv, (1.0 - du)),
        (1, 1, du * dv, dv, du),
    ):
        ui = u0 + oi
        vi = v0 + oj
        ok = (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
        uc = np.clip(ui, 0, W - 1)
        vc = np.clip(vi, 0, H - 1)
        vals = np.where(ok[..., None], src[vc, uc], 0.0)
        out += w[..., None] * vals
        gu += wu[..., None] * vals
        gv += wv[..., None] * vals
    if squeeze:
        out, gu, gv = out[..., 0], gu[..., 0], gv[..., 0]
    return out, gu, gv


def upsample_raster(raster: np.ndarray, alpha: int) -> np.ndarray:
    """Bilinear upsampling by an integer factor.

    Fine pixel (uf, vf) samples the original raster at (uf/alpha, vf/alpha),
    so fine coordinates stay aligned with intrinsics scaled by the same
    factor; the thin extrapolated margin replicates the border.
    """
    if int(alpha) != alpha or alpha < 1:
        raise ValueError("upsampling factor must be an integer >= 1")
    alpha = int(alpha)
    if alpha == 1:
        return np.array(raster, dtype=np.float64, copy=True)
    H, W = raster.shape[:2]
    uf = np.arange(W * alpha, dtype=np.float64) / alpha
    vf = np.arange(H * alpha, dtype=np.float64) / alpha
    U, V = np.meshgrid(uf, vf)
    out, _ = bilinear_sample(raster, U, V, clamp=True)
    return out


def inverse_warp(src: np.ndarray, depth_tgt: np.ndarray, pose_tgt_to_src,
                 K: Intrinsics, depth_valid: np.ndarray | None = None) -> WarpResult:
    """Warp a source raster onto the target grid by grid sampling.

    For each target pixel p the source is sampled at the projection of the
    target point transformed by pose_tgt_to_src. Output pixels are invalid
    when the sample leaves the source raster, the target depth is invalid,
    or the transformed point falls behind the camera.

    The source may be an image or a depth map; a warped depth map is the
    value-sampled aligned depth used by the geometric consistency check.
    """
    src = np.asarray(src, dtype=np.float64)
    depth_tgt = np.asarray(depth_tgt, dtype=np.float64)
    if src.shape[:2] != (K.height, K.width) or depth_tgt.shape != (K.height, K.width):
        raise ValueError("source/depth shapes do not match intrinsics")
    cloud = backproject(depth_tgt, K, valid=depth_valid)
    pts = apply_transform(pose_tgt_to_src, cloud.points)
    z = pts[..., 2]
    safe_z = np.where(np.abs(z) > Z_EPS, z, 1.0)
    u = K.fx * pts[..., 0] / safe_z + K.cx
    v = K.fy * pts[..., 1] / safe_z + K.cy
    vals, inside = bilinear_sample(src, u, v)
    ok = inside & (z > Z_EPS) & cloud.valid
    if src.ndim == 3:
        data = np.where(ok[..., None], vals, 0.0)
    else:
        data = np.where(ok, vals, 0.0)
    return WarpResult(data=data, valid=ok)


def _forward_splat(payload: np.ndarray, depth_ref: np.ndarray, pose_ref_to_tgt,
                   K: Intrinsics, alpha: int):
    """Shared forward-warp core: splat payload channels with one z-buffer.

    payload is (H, W, C); returns (out (H, W, C), out_depth, valid). Collision
    winners are chosen by smallest transformed depth, with the source pixel
    index as a deterministic tie-break.
    """
    depth_ref = np.asarray(depth_ref, dtype=np.float64)
    H, W = depth_ref.shape
    if payload.shape[:2] != (H, W):
        raise ValueError("payload/depth shapes differ")
    if (H, W) != (K.height, K.width):
        raise ValueError("depth shape does not match intrinsics")

    K_up = upsample_intrinsics(K, alpha)
    d_up = upsample_raster(depth_ref, alpha)
    p_up = upsample_raster(payload, alpha)
    if p_up.ndim == 2:
        p_up = p_up[..., None]

    T = _as_transform(pose_ref_to_tgt)
    cloud = backproject(d_up, K_up)
    pts = apply_transform(T, cloud.points)
    z = pts[..., 2].ravel()
    src_ok = cloud.valid.ravel() & (z > Z_EPS)

    safe_z = np.where(np.abs(z) > Z_EPS, z, 1.0)
    u = (K_up.fx * pts[..., 0].ravel() / safe_z + K_up.cx)
    v = (K_up.fy * pts[..., 1].ravel() / safe_z + K_up.cy)
    ui = np.rint(u).astype(np.int64)
    vi = np.rint(v).astype(np.int64)
    src_ok &= (ui >= 0) & (ui < K_up.width) & (vi >= 0) & (vi < K_up.height)

    idx = np.nonzero(src_ok)[0]
    out = np.zeros((H, W, p_up.shape[-1]), dtype=np.float64)
    out_depth = np.zeros((H, W), dtype=np.float64)
    valid = np.zeros((H, W), dtype=bool)
    if idx.size:
        dest = (vi[idx] // alpha) * W + (ui[idx] // alpha)
        order = np.lexsort((idx, z[idx], dest))
        dest_sorted = dest[order]
        first = np.ones(dest_sorted.size, dtype=bool)
        first[1:] = dest_sorted[1:] != dest_sorted[:-1]
        winners = idx[order[first]]
        cells = dest_sorted[first]
        flat_payload = p_up.reshape(-1, p_up.shape[-1])
        out.reshape(-1, p_up.shape[-1])[cells] = flat_payload[winners]
        out_depth.reshape(-1)[cells] = z[winners]
        valid.reshape(-1)[cells] = True
    return out, out_depth, valid


def forward_warp(src: np.ndarray, depth_ref: np.ndarray, pose_ref_to_tgt,
                 K: Intrinsics, alpha: int = 1) -> tuple[WarpResult, WarpResult]:
    """Forward-project a source image into the target view.

    Steps: bilinearly upsample the source depth/image by alpha (intrinsics
    scaled accordingly), transform every upsampled pixel's 3D point by the
    pose, project into the enlarged target grid, round to the nearest pixel
    and map back into the original grid. Collisions keep the smallest
    transformed depth; unassigned target pixels are holes.

    Returns the warped image and the forward-warped depth, sharing one
    z-buffer and one validity mask.
    """
    src = np.asarray(src, dtype=np.float64)
    out, out_depth, valid = _forward_splat(src if src.ndim == 3 else src[..., None],
                                           depth_ref, pose_ref_to_tgt, K, alpha)
    if src.ndim == 2:
        out = out[..., 0]
    return WarpResult(out, valid), WarpResult(out_depth, valid)


def forward_warp_mask(mask: np.ndarray, depth_ref: np.ndarray, pose_ref_to_tgt,
                      K: Intrinsics, alpha: int = 1) -> WarpResult:
    """Forward-warp a binary mask; fractional splat values are rounded up.

    The mask rides the same z-buffer as an image payload would, so mask
    pixels occluded by nearer geometry vanish. Holes are 0 in both the mask
    and the validity channel.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("mask must be binary")
    out, _, valid = _forward_splat(mask[..., None], depth_ref, pose_ref_to_tgt, K, alpha)
    data = np.where(valid, np.ceil(out[..., 0]), 0.0)
    return WarpResult(np.clip(data, 0.0, 1.0), valid)


def scale_consistent_depth(depth: np.ndarray, pose, K: Intrinsics,
                           depth_valid: np.ndarray | None = None) -> WarpResult:
    """Depth transformed into another camera frame, kept on the input grid.

    Output pixel p carries the z component of pose applied to the
    backprojected point of p; pixels with non-positive transformed depth are
    invalid.
    """
    cloud = backproject(depth, K, valid=depth_valid)
    pts = apply_transform(pose, cloud.points)
    z = pts[..., 2]
    ok = cloud.valid & (z > Z_EPS)
    return WarpResult(np.where(ok, z, 0.0), ok)
