"""Full per-pair evaluation of the instance-wise view-synthesis objective.

The evaluation is split into a discrete stage and a continuous slice. The
discrete stage — forward splatting, mask propagation with rounding, region
ownership, warp validity and the translation priors — is rebuilt at a
parameter point and then held fixed. The continuous slice — inverse-warp
sampling, transformed depths, inconsistency maps and all loss terms — is
differentiable in the pose and height-prior parameters, and this module
propagates its analytic jacobians alongside the values (forward mode, one
6-column block per pose). Gradients are exactly the derivatives of the
slice; the discrete stage is piecewise constant and contributes no
derivative almost everywhere, so finite differences of the slice are the
matching oracle.

Synthesis runs in both temporal directions. The scene is parametrized by one
ego pose (mapping frame-1 points into frame 2) and one residual pose per
object (its motion in the frame-2 camera after ego elimination); the reverse
direction uses the closed-form inverses, which is exact for translating
objects whenever the ego rotation between the frames is small.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .geometry import (
    PoseSE3,
    Z_EPS,
    invert_with_jacobian,
    pose_to_transform,
    pose_transform_with_jacobian,
)
from .instances import MIN_INSTANCE_PIXELS, ScenePair, background_mask
from .losses import (
    HeightPrior,
    LossBreakdown,
    LossConfig,
    make_breakdown,
    mask_pixel_height,
    smoothness_loss,
)
from .warp import _forward_splat, bilinear_sample_with_grad


@dataclass
class SceneParams:
    """Explicit scene parameters: ego pose, per-object residual poses,
    per-category height priors and an optional coarse log-depth correction."""

    ego: PoseSE3 = field(default_factory=PoseSE3)
    objects: dict[int, PoseSE3] = field(default_factory=dict)
    height_priors: dict[int, float] = field(default_factory=dict)
    depth_correction: Optional[np.ndarray] = None

    def copy(self) -> "SceneParams":
        return SceneParams(
            ego=self.ego.copy(),
            objects={k: v.copy() for k, v in self.objects.items()},
            height_priors=dict(self.height_priors),
            depth_correction=None if self.depth_correction is None
            else self.depth_correction.copy(),
        )


@dataclass
class OptimizerConfig:
    """Knobs for evaluation and fitting."""

    alpha: int = 2                      # forward-warp pre-upsampling factor
    max_outer: int = 10                 # rebuilds of the discrete stage
    max_inner: int = 25                 # slice-descent steps per rebuild
    tol: float = 1e-9                   # convergence tolerance on total loss
    gradient_mode: str = "analytic"     # "analytic" | "finite-difference"
    fd_step: float = 1e-4
    solver: str = "gauss_newton"        # "gauss_newton" | "descent"
    init_step: float = 1.0
    use_recon: bool = True
    use_geometric: bool = True
    use_smoothness: bool = True
    use_translation: bool = True
    use_height: bool = True
    optimize_height_priors: bool = False
    min_instance_pixels: int = MIN_INSTANCE_PIXELS
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.alpha not in (1, 2, 4):
            raise ValueError("alpha must be one of 1, 2, 4")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.gradient_mode not in ("analytic", "finite-difference"):
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")
        if self.solver not in ("gauss_newton", "descent"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass(frozen=True)
class ParamLayout:
    """Packing order of the differentiable parameters: ego (6), then 6 per
    active instance id, then one height prior per category (optional)."""

    instance_ids: tuple[int, ...]
    prior_categories: tuple[int, ...] = ()

    @property
    def n_params(self) -> int:
        return 6 + 6 * len(self.instance_ids) + len(self.prior_categories)

    @property
    def ego_slice(self) -> slice:
        return slice(0, 6)

    def obj_slice(self, iid: int) -> slice:
        i = self.instance_ids.index(iid)
        return slice(6 + 6 * i, 12 + 6 * i)

    def prior_index(self, cat: int) -> int:
        return 6 + 6 * len(self.instance_ids) + self.prior_categories.index(cat)

    def pack(self, params: SceneParams) -> np.ndarray:
        vec = np.zeros(self.n_params)
        vec[0:6] = params.ego.params()
        for iid in self.instance_ids:
            if iid not in params.objects:
                raise ValueError(f"missing pose for matched instance {iid}")
            vec[self.obj_slice(iid)] = params.objects[iid].params()
        for cat in self.prior_categories:
            vec[self.prior_index(cat)] = params.height_priors.get(cat, 1.5)
        return vec

    def unpack(self, vec: np.ndarray, template: Optional[SceneParams] = None) -> SceneParams:
        out = template.copy() if template is not None else SceneParams()
        out.ego = PoseSE3.from_params(vec[0:6])
        for iid in self.instance_ids:
            out.objects[iid] = PoseSE3.from_params(vec[self.obj_slice(iid)])
        for cat in self.prior_categories:
            out.height_priors[cat] = float(vec[self.prior_index(cat)])
        return out


def make_layout(pair: ScenePair, cfg: OptimizerConfig) -> ParamLayout:
    ids = tuple(pair.matched_ids(cfg.min_instance_pixels))
    cats: tuple[int, ...] = ()
    if cfg.use_height and ids:
        cats = tuple(sorted({pair.masks2.categories.get(i, 0) for i in ids}))
    return ParamLayout(instance_ids=ids, prior_categories=cats)


# ---------------------------------------------------------------------------
# Static per-direction data and the frozen discrete stage
# ---------------------------------------------------------------------------

@dataclass
class _DirectionView:
    """Inputs of one synthesis direction (src -> tgt)."""

    flip: bool  # False: frame1 -> frame2
    src_img: np.ndarray
    src_depth: np.ndarray
    src_masks: dict[int, np.ndarray]
    tgt_img: np.ndarray
    tgt_depth: np.ndarray
    tgt_masks: dict[int, np.ndarray]
    categories: dict[int, int] = field(default_factory=dict)


@dataclass
class FrozenDirection:
    """Discrete products of one direction, held fixed under differentiation."""

    owner: np.ndarray                      # (H, W) int32: -1 none, 0 bg, iid
    members: dict[int, np.ndarray]         # region id -> flat pixel indices
    union_mask: np.ndarray                 # (H, W) uint8, owner >= 0
    bg_mask: np.ndarray                    # (H, W) uint8 (shared by directions)
    fw_img: Optional[np.ndarray]           # (H, W, C) ego-eliminated source
    fw_depth: Optional[np.ndarray]
    fw_valid: Optional[np.ndarray]
    fw_masks: dict[int, np.ndarray]        # iid -> (H, W) {0,1}, rounded up
    fw_interior: dict[int, np.ndarray]     # iid -> (H, W) bool, full support
    prop_masks: dict[int, np.ndarray]      # iid -> (H, W) uint8, rounded up
    t_prior: dict[int, Optional[np.ndarray]]
    fw_hole_fraction: float
    tgt_pts: Optional[np.ndarray] = None   # cached backprojected target grid
    ssim_cache: dict = field(default_factory=dict)


def _direction_views(pair: ScenePair, active_ids) -> list[_DirectionView]:
    m1 = {i: pair.masks1.masks[i] for i in active_ids}
    m2 = {i: pair.masks2.masks[i] for i in active_ids}
    cats = {i: pair.masks2.categories.get(i, 0) for i in active_ids}
    fwd = _DirectionView(False, pair.image1, pair.depth1, m1,
                         pair.image2, pair.depth2, m2, cats)
    bwd = _DirectionView(True, pair.image2, pair.depth2, m2,
                         pair.image1, pair.depth1, m1, cats)
    return [fwd, bwd]


def _corrected_depths(pair: ScenePair, params: SceneParams):
    d1, d2 = pair.depth1, pair.depth2
    if params.depth_correction is not None:
        f = np.exp(_resize_bilinear(params.depth_correction, d1.shape))
        d1 = d1 * f
        d2 = d2 * f
    return d1, d2


def _resize_bilinear(grid: np.ndarray, shape):
    """Corner-aligned bilinear resize of a coarse field to a raster shape."""
    gh, gw = grid.shape
    H, W = shape
    u = np.linspace(0.0, gw - 1.0, W)
    v = np.linspace(0.0, gh - 1.0, H)
    U, V = np.meshgrid(u, v)
    u0 = np.minimum(np.floor(U).astype(int), gw - 2) if gw > 1 else np.zeros_like(U, int)
    v0 = np.minimum(np.floor(V).astype(int), gh - 2) if gh > 1 else np.zeros_like(V, int)
    fu = U - u0
    fv = V - v0
    if gw == 1:
        fu = np.zeros_like(fu)
    if gh == 1:
        fv = np.zeros_like(fv)
    u1 = np.minimum(u0 + 1, gw - 1)
    v1 = np.minimum(v0 + 1, gh - 1)
    return ((1 - fu) * (1 - fv) * grid[v0, u0] + fu * (1 - fv) * grid[v0, u1]
            + (1 - fu) * fv * grid[v1, u0] + fu * fv * grid[v1, u1])


def _direction_poses(vec: np.ndarray, layout: ParamLayout, flip: bool):
    """Warping transforms of one direction with jacobians w.r.t. their own
    6-parameter block.

    Returns (fw_T, bg_T, bg_dT, obj_Ts, obj_dTs, obj_fw_Ts) where bg_T drives
    the background inverse warp and obj_Ts[iid] the instance inverse warps.
    """
    ego_T, ego_dT = pose_transform_with_jacobian(vec[layout.ego_slice])
    if not flip:
        fw_T = ego_T
        bg_T, bg_dT = invert_with_jacobian(ego_T, ego_dT)
    else:
        fw_T = _invert_T(ego_T)
        bg_T, bg_dT = ego_T, ego_dT
    obj_Ts, obj_dTs, obj_fw_Ts = {}, {}, {}
    for iid in layout.instance_ids:
        q_T, q_dT = pose_transform_with_jacobian(vec[layout.obj_slice(iid)])
        if not flip:
            oT, odT = invert_with_jacobian(q_T, q_dT)
        else:
            oT, odT = q_T, q_dT
        obj_Ts[iid] = oT
        obj_dTs[iid] = odT
        obj_fw_Ts[iid] = q_T
    return fw_T, bg_T, bg_dT, obj_Ts, obj_dTs, obj_fw_Ts


def _invert_T(T):
    out = np.eye(4)
    R = T[:3, :3]
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def _target_points(depth, K):
    u, v = K.pixel_grid()
    x = (u - K.cx) * depth / K.fx
    y = (v - K.cy) * depth / K.fy
    return np.stack([x, y, depth], axis=-1).reshape(-1, 3)


def _region_projection(T, dT, pts, K, want_jac):
    """Transform points, project, and return coordinates, depth and their
    jacobians w.r.t. the 6-parameter block of T."""
    X = pts @ T[:3, :3].T + T[:3, 3]
    z = X[:, 2]
    safe_z = np.where(np.abs(z) > Z_EPS, z, Z_EPS)
    u = K.fx * X[:, 0] / safe_z + K.cx
    v = K.fy * X[:, 1] / safe_z + K.cy
    if not want_jac:
        return u, v, z, None, None, None
    A = dT[:, :3, :3].reshape(-1, 3)          # (6*3, 3), rows ordered (p, i)
    dX = (pts @ A.T).reshape(len(pts), 6, 3).transpose(0, 2, 1) \
        + dT[:, :3, 3].T[None, :, :]
    dz = dX[:, 2, :]
    du = K.fx * (dX[:, 0, :] * safe_z[:, None] - X[:, 0, None] * dz) / (safe_z ** 2)[:, None]
    dv = K.fy * (dX[:, 1, :] * safe_z[:, None] - X[:, 1, None] * dz) / (safe_z ** 2)[:, None]
    return u, v, z, du, dv, dz


def build_frozen(pair: ScenePair, params: SceneParams, cfg: OptimizerConfig,
                 layout: Optional[ParamLayout] = None):
    """Rebuild the discrete stage of both directions at the given parameters."""
    layout = layout or make_layout(pair, cfg)
    for iid in layout.instance_ids:
        if iid not in params.objects:
            raise ValueError(f"missing pose for matched instance {iid}")
    K = pair.intrinsics
    bg = background_mask(pair.masks1, pair.masks2, shape=pair.shape)
    d1, d2 = _corrected_depths(pair, params)
    views = _direction_views(pair, layout.instance_ids)
    views[0].src_depth, views[0].tgt_depth = d1, d2
    views[1].src_depth, views[1].tgt_depth = d2, d1
    vec = layout.pack(params)
    frozens = [
        _freeze_direction(view, vec, layout, cfg, bg, K) for view in views
    ]
    return views, frozens, layout


FULL_SUPPORT = 1.0 - 1e-9


def _freeze_direction(view: _DirectionView, vec, layout: ParamLayout,
                      cfg: OptimizerConfig, bg_mask, K) -> FrozenDirection:
    H, W = view.tgt_depth.shape
    fw_T, bg_T, _, obj_Ts, _, _ = _direction_poses(vec, layout, view.flip)
    ids = layout.instance_ids

    # Forward-splat the source image and all instance masks with one shared
    # z-buffer. Bilinear pre-upsampling blends masks and depths across object
    # silhouettes, so alongside the rounded-up masks we keep "interior"
    # masks (splat value exactly 1): only those pixels carry uncontaminated
    # object depth and color.
    fw_img = fw_depth = fw_valid = None
    fw_masks: dict[int, np.ndarray] = {}
    fw_interior: dict[int, np.ndarray] = {}
    hole_fraction = 0.0
    if ids:
        payload = np.concatenate(
            [view.src_img] + [view.src_masks[i][..., None].astype(np.float64)
                              for i in ids], axis=-1)
        out, fw_depth, fw_valid = _forward_splat(payload, view.src_depth,
                                                 fw_T, K, cfg.alpha)
        C = view.src_img.shape[-1]
        fw_img = out[..., :C]
        for j, iid in enumerate(ids):
            fw_masks[iid] = np.where(fw_valid, np.ceil(out[..., C + j]), 0.0)
            fw_interior[iid] = fw_valid & (out[..., C + j] >= FULL_SUPPORT)
        hole_fraction = 1.0 - np.count_nonzero(fw_valid) / fw_valid.size

    tgt_pts = _target_points(view.tgt_depth, K)
    tgt_dvalid = (view.tgt_depth > 0.0).reshape(-1)

    def project_all(T):
        u, v, z, _, _, _ = _region_projection(T, None, tgt_pts, K, False)
        inside = (u >= 0.0) & (u <= W - 1.0) & (v >= 0.0) & (v <= H - 1.0)
        return u, v, z, inside & (z > Z_EPS) & tgt_dvalid

    # Region membership requires full support of the region's own source
    # indicator at the sampled location: background samples must not touch any
    # source-frame instance pixel, instance samples must lie fully inside the
    # splatted interior. Pixels failing this carry mixed-region content and
    # are excluded from every loss (the ownership map is the valid mask).
    src_union_free = np.ones((H, W))
    for iid in ids:
        src_union_free *= 1.0 - view.src_masks[iid]
    u0, v0, z0, ok0 = project_all(bg_T)
    vals0, _, _ = bilinear_sample_with_grad(
        np.stack([src_union_free, view.src_depth], axis=-1), u0, v0)
    ok0 = ok0 & bg_mask.reshape(-1).astype(bool) \
        & (vals0[:, 0] >= FULL_SUPPORT) & (vals0[:, 1] > Z_EPS)
    cand_depth = {0: (ok0, vals0[:, 1])}

    # Instance membership is additionally gated by the instance's own
    # target-frame mask: applying an object's motion to pixels that do not
    # show that object in the target frame yields meaningless
    # correspondences (e.g. background points landing inside the warped
    # footprint), which would otherwise steal ownership via the depth rule.
    prop_masks: dict[int, np.ndarray] = {}
    for iid in ids:
        uk, vk, zk, okk = project_all(obj_Ts[iid])
        stack = np.stack([fw_masks[iid], fw_interior[iid].astype(np.float64),
                          fw_depth * fw_interior[iid]], axis=-1)
        vals, _, _ = bilinear_sample_with_grad(stack, uk, vk)
        prop = np.where(okk, np.ceil(np.clip(vals[:, 0], 0.0, 1.0)), 0.0)
        prop_masks[iid] = prop.reshape(H, W).astype(np.uint8)
        member = okk & (vals[:, 1] >= FULL_SUPPORT) & (vals[:, 2] > Z_EPS) \
            & (view.tgt_masks[iid].reshape(-1) > 0)
        cand_depth[iid] = (member, vals[:, 2])

    owner = np.full(H * W, -1, dtype=np.int32)
    best = np.full(H * W, np.inf)
    for rid in [0] + list(ids):
        ok, depth_vals = cand_depth[rid]
        better = ok & (depth_vals < best)
        owner[better] = rid
        best[better] = depth_vals[better]

    members = {rid: np.nonzero(owner == rid)[0] for rid in [0] + list(ids)}

    t_prior: dict[int, Optional[np.ndarray]] = {}
    if ids:
        tgt_cloud = tgt_pts.reshape(H, W, 3)
        fw_cloud = _target_points(fw_depth, K).reshape(H, W, 3)
        fw_ok = fw_valid & (fw_depth > 0.0)
        for iid in ids:
            fsel = fw_interior[iid] & fw_ok
            tsel = view.tgt_masks[iid].astype(bool) & (view.tgt_depth > 0.0)
            if fsel.any() and tsel.any():
                t_prior[iid] = (tgt_cloud[tsel].mean(axis=0)
                                - fw_cloud[fsel].mean(axis=0))
            else:
                t_prior[iid] = None

    return FrozenDirection(
        owner=owner.reshape(H, W),
        members=members,
        union_mask=(owner >= 0).reshape(H, W).astype(np.uint8),
        bg_mask=bg_mask,
        fw_img=fw_img,
        fw_depth=fw_depth,
        fw_valid=fw_valid,
        fw_masks=fw_masks,
        fw_interior=fw_interior,
        prop_masks=prop_masks,
        t_prior=t_prior,
        fw_hole_fraction=hole_fraction,
    )


# ---------------------------------------------------------------------------
# Differentiable slice
# ---------------------------------------------------------------------------

def _ssim_region_with_jac(tgt, rec_flat, jac_flat, idx, shape, window, c1, c2,
                          want_jac, cache=None):
    """Per-region SSIM read at the region's own pixels.

    Both streams are masked to the region (zero elsewhere), mirroring the
    instance-wise pairing of each reconstruction with its masked target; this
    keeps every region's photometric term independent of the other regions'
    parameters and of content the region cannot explain. Computation is
    cropped to the region's bounding box (padded by the window) for speed,
    and the pooled target statistics are cached across evaluations since the
    region's pixel set is frozen.
    """
    H, W = shape

    def pool(z):
        return ndimage.uniform_filter(z, size=window, mode="reflect")

    def poolj(z):
        return ndimage.uniform_filter(z, size=(window, window, 1), mode="reflect")

    if cache is None or "bbox" not in cache:
        rows = idx // W
        cols = idx % W
        pad = window
        r0 = max(int(rows.min()) - pad, 0)
        r1 = min(int(rows.max()) + pad + 1, H)
        c0 = max(int(cols.min()) - pad, 0)
        c1_ = min(int(cols.max()) + pad + 1, W)
        C = tgt.shape[-1]
        hb, wb = r1 - r0, c1_ - c0
        patch_t = np.zeros((hb, wb, C))
        patch_t[rows - r0, cols - c0, :] = tgt.reshape(-1, C)[idx]
        stats = []
        for c in range(C):
            x = patch_t[..., c]
            mu_x = pool(x)
            sig_x = pool(x * x) - mu_x ** 2
            stats.append((x, mu_x, sig_x))
        # Variance proxy used by the solver's curvature model for the SSIM
        # part of the cost (2*sigma_x + c2 per member pixel, channel mean).
        b2 = np.zeros(idx.size)
        for _, _, sig_x in stats:
            b2 += 2.0 * sig_x[rows - r0, cols - c0] + c2
        entry = {"bbox": (r0, c0), "rows": rows - r0, "cols": cols - c0,
                 "shape": (hb, wb), "stats": stats, "C": C, "b2": b2 / C}
        if cache is not None:
            cache.update(entry)
        cache = entry

    rows = cache["rows"]
    cols = cache["cols"]
    hb, wb = cache["shape"]
    C = cache["C"]
    P = 0 if jac_flat is None else jac_flat.shape[-1]

    patch_r = np.zeros((hb, wb, C))
    patch_r[rows, cols, :] = rec_flat
    if want_jac:
        patch_j = np.zeros((hb, wb, C, P))
        patch_j[rows, cols] = jac_flat

    ssim_px = np.zeros(idx.size)
    dssim_px = np.zeros((idx.size, P)) if want_jac else None

    for c in range(C):
        x, mu_x, sig_x = cache["stats"][c]
        y = patch_r[..., c]
        mu_y = pool(y)
        sig_y = pool(y * y) - mu_y ** 2
        sig_xy = pool(x * y) - mu_x * mu_y
        A1 = 2 * mu_x * mu_y + c1
        A2 = 2 * sig_xy + c2
        B1 = mu_x ** 2 + mu_y ** 2 + c1
        B2 = sig_x + sig_y + c2
        S = (A1 * A2) / (B1 * B2)
        ssim_px += S[rows, cols]
        if want_jac:
            dy = patch_j[..., c, :]
            dmu_y = poolj(dy)
            dsig_y = poolj(2.0 * y[..., None] * dy) - 2.0 * mu_y[..., None] * dmu_y
            dsig_xy = poolj(x[..., None] * dy) - mu_x[..., None] * dmu_y
            dA1 = 2.0 * mu_x[..., None] * dmu_y
            dA2 = 2.0 * dsig_xy
            dB1 = 2.0 * mu_y[..., None] * dmu_y
            dB2 = dsig_y
            dS = ((dA1 * A2[..., None] + A1[..., None] * dA2)
                  - S[..., None] * (dB1 * B2[..., None] + B1[..., None] * dB2)) \
                / (B1 * B2)[..., None]
            dssim_px += dS[rows, cols]
    ssim_px /= C
    if want_jac:
        dssim_px /= C
    return ssim_px, dssim_px


@dataclass
class DirectionResult:
    l_r: float = 0.0
    l_g: float = 0.0
    l_s: float = 0.0
    l_t: float = 0.0
    l_h: float = 0.0
    weight_mass: float = 0.0            # sum of V
    n_union: int = 0                    # sum of the frozen valid mask
    degenerate: bool = False
    region_recon_sums: dict = field(default_factory=dict)
    region_geo_sums: dict = field(default_factory=dict)
    grad: Optional[np.ndarray] = None           # d(weighted direction loss)/dvec
    curvature: Optional[np.ndarray] = None      # PSD model for the solver
    composed: Optional[np.ndarray] = None
    d_diff: Optional[np.ndarray] = None
    valid_weight: Optional[np.ndarray] = None


def _eval_direction(view: _DirectionView, frozen: FrozenDirection, vec,
                    layout: ParamLayout, cfg: OptimizerConfig, K,
                    want_jac: bool, want_images: bool,
                    only_region: Optional[int] = None) -> DirectionResult:
    H, W = view.tgt_depth.shape
    P = layout.n_params
    lc = cfg.loss
    gamma = lc.ssim_mix
    res = DirectionResult()
    res.n_union = int(frozen.union_mask.sum())

    _, bg_T, bg_dT, obj_Ts, obj_dTs, obj_fw_Ts = _direction_poses(vec, layout, view.flip)
    if frozen.tgt_pts is None:
        frozen.tgt_pts = _target_points(view.tgt_depth, K)
    tgt_pts = frozen.tgt_pts
    tgt_flat = view.tgt_img.reshape(-1, view.tgt_img.shape[-1])

    regions = []
    if frozen.members.get(0) is not None and frozen.members[0].size:
        regions.append((0, bg_T, bg_dT, view.src_img, view.src_depth))
    for iid in layout.instance_ids:
        if frozen.members.get(iid) is not None and frozen.members[iid].size:
            interior = frozen.fw_interior[iid]
            regions.append((iid, obj_Ts[iid], obj_dTs[iid],
                            frozen.fw_img * interior[..., None],
                            frozen.fw_depth * interior))

    # Reconstruction and geometric losses are per-region means averaged over
    # regions, so small objects carry the same weight as the background (the
    # per-instance pixel-count normalization of the training objective).
    # After this normalization the objective is block-separable: each
    # region's terms depend only on its own pose block, which lets the solver
    # restrict an evaluation to one region (only_region) while keeping the
    # full objective's scaling.
    n_regions = len(regions)
    if only_region is not None:
        regions = [r for r in regions if r[0] == only_region]
    recon_terms = []
    geo_terms = []
    recon_grad = np.zeros(P)
    geo_grad = np.zeros(P)
    weight_mass = 0.0
    curvature = np.zeros((P, P)) if want_jac else None
    composed = np.zeros_like(view.tgt_img) if want_images else None
    d_diff_map = np.zeros((H, W)) if want_images else None
    v_map = np.zeros((H, W)) if want_images else None

    for rid, T, dT, src_img, src_depth in regions:
        idx = frozen.members[rid]
        block = layout.ego_slice if rid == 0 else layout.obj_slice(rid)
        pts = tgt_pts[idx]
        u, v, z, du, dv, dz = _region_projection(T, dT, pts, K, want_jac)
        payload = np.concatenate([src_img, src_depth[..., None]], axis=-1)
        vals, gu, gv = bilinear_sample_with_grad(payload, u, v)
        C = src_img.shape[-1]
        img_r = vals[:, :C]
        aligned = vals[:, C]
        if want_jac:
            jac_vals = gu[:, :, None] * du[:, None, :] + gv[:, :, None] * dv[:, None, :]
            d_img = jac_vals[:, :C, :]
            d_aligned = jac_vals[:, C, :]

        # depth inconsistency of this region: |aligned - z| / (aligned + z)
        s = np.maximum(aligned + z, 1e-9)
        diff = aligned - z
        ddiff_vals = np.minimum(np.abs(diff) / s, 1.0)
        if want_jac:
            sign = np.sign(diff)
            d_ddiff = (sign[:, None] * (d_aligned - dz) * s[:, None]
                       - np.abs(diff)[:, None] * (d_aligned + dz)) / (s ** 2)[:, None]

        v_weight = 1.0 - ddiff_vals
        if want_jac:
            d_v = -d_ddiff

        if cfg.use_geometric:
            g_mean = ddiff_vals.sum() / idx.size
            geo_terms.append(g_mean)
            res.region_geo_sums[rid] = float(g_mean)
            if want_jac:
                geo_grad[block] += d_ddiff.sum(axis=0) / idx.size
        if cfg.use_recon:
            resid = tgt_flat[idx] - img_r
            abs_resid = np.abs(resid).mean(axis=1)
            ssim_px, dssim_px = _ssim_region_with_jac(
                view.tgt_img, img_r, d_img if want_jac else None, idx, (H, W),
                lc.ssim_window, lc.ssim_c1, lc.ssim_c2, want_jac,
                cache=frozen.ssim_cache.setdefault(rid, {}))
            cost = (1.0 - gamma) * abs_resid + gamma * (1.0 - ssim_px)
            num = (v_weight * cost).sum()
            den = v_weight.sum()
            weight_mass += den
            if den > 0.0:
                recon_terms.append(num / den)
                res.region_recon_sums[rid] = float(num / den)
                if want_jac:
                    d_num = (d_v * cost[:, None] + v_weight[:, None]
                             * ((1.0 - gamma)
                                * -(np.sign(resid)[:, :, None] * d_img).mean(axis=1)
                                - gamma * dssim_px)).sum(axis=0)
                    d_den = d_v.sum(axis=0)
                    recon_grad[block] += (d_num * den - num * d_den) / den ** 2

        if want_jac:
            # Block-diagonal curvature model (IRLS reweighted squares for the
            # L1 terms plus a variance-scaled quadratic surrogate for the
            # SSIM part); the gradient above is exact, this only shapes the
            # solver's step.
            bidx = np.arange(block.start, block.stop)
            Hb = np.zeros((6, 6))
            norm = n_regions * idx.size
            if cfg.use_recon:
                w_px = (lc.weight_recon * (1.0 - gamma) * v_weight
                        / (np.maximum(abs_resid, 3e-2) * norm))
                b2 = frozen.ssim_cache.get(rid, {}).get("b2")
                if b2 is not None:
                    # scaled down: the quadratic model only holds near perfect
                    # alignment, away from it SSIM saturates
                    w_px = w_px + (lc.weight_recon * gamma * v_weight
                                   * 0.2 / (b2 * norm))
                Jw = (d_img * np.sqrt(w_px)[:, None, None] / C).reshape(-1, 6)
                Hb += Jw.T @ Jw
            if cfg.use_geometric:
                w_g = lc.weight_geo / (np.maximum(ddiff_vals, 3e-2) * norm)
                Jg = d_ddiff * np.sqrt(w_g)[:, None]
                Hb += Jg.T @ Jg
            curvature[np.ix_(bidx, bidx)] += Hb

        if want_images:
            rows = idx // W
            cols = idx % W
            composed[rows, cols] = img_r
            d_diff_map[rows, cols] = ddiff_vals
            v_map[rows, cols] = v_weight

    if cfg.use_recon:
        if recon_terms:
            res.l_r = float(np.sum(recon_terms)) / n_regions
            recon_grad /= n_regions
        elif only_region is None:
            res.degenerate = True
    if cfg.use_geometric and geo_terms:
        res.l_g = float(np.sum(geo_terms)) / n_regions
        geo_grad /= n_regions

    res.weight_mass = weight_mass

    # Smoothness on the source frame of this direction (pose-independent).
    if cfg.use_smoothness and only_region is None:
        res.l_s = smoothness_loss(view.src_depth, view.src_img)

    # Translation-prior loss on the predicted object translations.
    d_lt = np.zeros(P)
    if cfg.use_translation and layout.instance_ids:
        with_prior = [iid for iid in layout.instance_ids
                      if frozen.t_prior.get(iid) is not None]
        terms = []
        for iid in with_prior:
            if only_region is not None and iid != only_region:
                continue
            tp = frozen.t_prior[iid]
            block = layout.obj_slice(iid)
            if not view.flip:
                t_pred = vec[block][3:6]
                d_t = np.zeros((3, 6))
                d_t[:, 3:6] = np.eye(3)
            else:
                q_T, q_dT = pose_transform_with_jacobian(vec[block])
                ti, dti = invert_with_jacobian(q_T, q_dT)
                t_pred = ti[:3, 3]
                d_t = dti[:, :3, 3].T
            err = t_pred - tp
            terms.append(np.abs(err).sum())
            if want_jac:
                d_lt[block] += np.sign(err) @ d_t
        if terms:
            res.l_t = float(np.sum(terms)) / len(with_prior)
            d_lt /= len(with_prior)

    # Height-prior loss on the target frame (tied to the prior parameters,
    # not to any pose block).
    d_lh = np.zeros(P)
    if cfg.use_height and layout.prior_categories and only_region is None:
        depth = view.tgt_depth
        dvalid = depth > 0.0
        mean_depth = float(depth[dvalid].mean()) if dvalid.any() else 0.0
        terms = []
        if mean_depth > 0.0:
            prior = HeightPrior(values={c: vec[layout.prior_index(c)]
                                        for c in layout.prior_categories})
            for iid in layout.instance_ids:
                mask = view.tgt_masks[iid]
                h = mask_pixel_height(mask)
                msel = mask.astype(bool) & dvalid
                if h < 1 or not msel.any():
                    continue
                cat = _mask_category(view, iid)
                p = prior.get(cat)
                expected = K.fy * p / h
                r = depth[msel] - expected
                terms.append(np.abs(r).mean() / mean_depth)
                if want_jac and prior.lo < vec[layout.prior_index(cat)] < prior.hi:
                    d_lh[layout.prior_index(cat)] += \
                        (-np.sign(r).mean()) * K.fy / (h * mean_depth)
        if terms:
            res.l_h = float(np.mean(terms))
            d_lh /= len(terms)

    if want_jac:
        grad = np.zeros(P)
        if cfg.use_recon and recon_terms:
            grad += lc.weight_recon * recon_grad
        if cfg.use_geometric and geo_terms:
            grad += lc.weight_geo * geo_grad
        if cfg.use_translation:
            grad += lc.weight_trans * d_lt
        if cfg.use_height:
            grad += lc.weight_height * d_lh
        if cfg.use_translation:
            for iid in layout.instance_ids:
                b = layout.obj_slice(iid)
                bidx = np.arange(b.start, b.stop)
                curvature[np.ix_(bidx, bidx)] += np.eye(6) * lc.weight_trans * 0.1
        res.grad = grad
        res.curvature = curvature
    if want_images:
        res.composed = composed
        res.d_diff = d_diff_map
        res.valid_weight = v_map
    return res


def _mask_category(view: _DirectionView, iid: int) -> int:
    return view.categories.get(iid, 0)


def _weighted_total(r: DirectionResult, lc: LossConfig) -> float:
    return (lc.weight_recon * r.l_r + lc.weight_geo * r.l_g
            + lc.weight_smooth * r.l_s + lc.weight_trans * r.l_t
            + lc.weight_height * r.l_h)


def eval_slice(views, frozens, vec, layout, cfg, K, want_jac=False,
               want_images=False, only_region=None):
    """Evaluate the differentiable slice at vec with the discrete stage fixed.

    With only_region set, only that region's terms are computed (the
    objective is block-separable, so this is the full objective up to a
    constant). Returns (breakdown, direction results, gradient or None).
    """
    results = [
        _eval_direction(view, frozen, vec, layout, cfg, K, want_jac,
                        want_images, only_region=only_region)
        for view, frozen in zip(views, frozens)
    ]
    nd = len(results)
    bd = make_breakdown(
        sum(r.l_r for r in results) / nd,
        sum(r.l_g for r in results) / nd,
        sum(r.l_s for r in results) / nd,
        sum(r.l_t for r in results) / nd,
        sum(r.l_h for r in results) / nd,
        cfg.loss,
        n_valid_px=sum(r.n_union for r in results) / nd,
        n_instances=len(layout.instance_ids),
    )
    grad = None
    if want_jac:
        grad = sum(r.grad for r in results) / nd
    return bd, results, grad


def evaluate_pair(pair: ScenePair, params: SceneParams,
                  cfg: Optional[OptimizerConfig] = None, *,
                  frozen_state=None, want_images: bool = False):
    """Run the full objective on a matched pair.

    Returns (LossBreakdown, diagnostics). Diagnostics include the per-direction
    results, forward-warp hole fractions, degenerate-sample flags and, with
    want_images=True, the composed reconstructions, inconsistency maps and
    weighted valid masks.
    """
    cfg = cfg or OptimizerConfig()
    if frozen_state is None:
        views, frozens, layout = build_frozen(pair, params, cfg)
    else:
        views, frozens, layout = frozen_state
    vec = layout.pack(params)
    bd, results, _ = eval_slice(views, frozens, vec, layout, cfg,
                                pair.intrinsics, want_jac=False,
                                want_images=want_images)
    diagnostics = {
        "directions": results,
        "layout": layout,
        "frozens": frozens,
        "views": views,
        "degenerate": any(r.degenerate for r in results),
        "fw_hole_fractions": [f.fw_hole_fraction for f in frozens],
    }
    return bd, diagnostics
