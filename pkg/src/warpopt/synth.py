"""Synthetic-scene renderer used as an exact ground-truth oracle.

Scenes are a textured background plane plus rigid textured quads moving in
front of a camera that follows a per-step trajectory. Every frame is rendered
by analytic ray/plane intersection with a z-buffer, so images, depths,
per-object masks, optical flows and all poses are mutually consistent to
floating-point precision. Textures are deterministic functions of surface
coordinates, which keeps resampled views exactly comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Intrinsics,
    PoseSE3,
    invert,
    pose_to_transform,
    rotation_matrix,
    transform_to_pose,
)
from .instances import InstanceMaskSet, ScenePair


@dataclass
class TextureConfig:
    """Procedural surface texture.

    kind: "checker" (parity of the cell index), "blocks" (random value per
    cell) or "noise" (bilinear value noise: smooth, useful where a
    differentiable image is needed). scale is the cell size in meters on the
    surface; lo/hi bound the channel values.
    """

    kind: str = "blocks"
    scale: float = 1.0
    lo: float = 0.2
    hi: float = 0.8
    seed: int = 0

    def sampler(self):
        if self.kind == "checker":
            return _CheckerTexture(self)
        if self.kind == "blocks":
            return _LatticeTexture(self, smooth=False)
        if self.kind == "noise":
            return _LatticeTexture(self, smooth=True)
        raise ValueError(f"unknown texture kind {self.kind!r}")


class _CheckerTexture:
    def __init__(self, cfg: TextureConfig):
        self.cfg = cfg

    def sample(self, s, t):
        cfg = self.cfg
        par = (np.floor(s / cfg.scale) + np.floor(t / cfg.scale)) % 2
        val = np.where(par == 0, cfg.lo, cfg.hi)
        return np.repeat(val[..., None], 3, axis=-1)


class _LatticeTexture:
    """Seeded random value lattice, looked up per cell or interpolated."""

    _N = 64

    def __init__(self, cfg: TextureConfig, smooth: bool):
        self.cfg = cfg
        self.smooth = smooth
        rng = np.random.default_rng(cfg.seed)
        self.lut = cfg.lo + (cfg.hi - cfg.lo) * rng.random((self._N, self._N, 3))

    def sample(self, s, t):
        x = np.asarray(s, dtype=np.float64) / self.cfg.scale
        y = np.asarray(t, dtype=np.float64) / self.cfg.scale
        if not self.smooth:
            xi = np.floor(x).astype(np.int64) % self._N
            yi = np.floor(y).astype(np.int64) % self._N
            return self.lut[yi, xi]
        x0 = np.floor(x)
        y0 = np.floor(y)
        # smoothstep weights make the texture C1, so resampled views have no
        # slope discontinuities beyond those of the sampler itself
        fx = x - x0
        fy = y - y0
        fx = fx * fx * (3.0 - 2.0 * fx)
        fy = fy * fy * (3.0 - 2.0 * fy)
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        out = np.zeros(x.shape + (3,), dtype=np.float64)
        for oi, oj, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                          (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
            out += w[..., None] * self.lut[(y0 + oj) % self._N, (x0 + oi) % self._N]
        return out


@dataclass
class ObjectConfig:
    """A rigid textured quad with a constant per-step motion."""

    size: tuple[float, float]             # width, height in meters
    center: tuple[float, float, float]    # world position at frame 0
    step_translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    step_rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # about own center
    orientation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    texture: TextureConfig = field(default_factory=lambda: TextureConfig(seed=1))
    category: int = 1


@dataclass
class BackgroundConfig:
    """Textured plane: fronto-parallel ("constant") or tilted ("ramp")."""

    kind: str = "constant"
    depth: float = 10.0
    tilt_deg: float = 0.0
    texture: TextureConfig = field(default_factory=TextureConfig)


@dataclass
class SyntheticSceneConfig:
    width: int = 416
    height: int = 128
    fx: float = 200.0
    fy: float = 200.0
    cx: float | None = None
    cy: float | None = None
    n_frames: int = 2
    background: BackgroundConfig = field(default_factory=BackgroundConfig)
    objects: list[ObjectConfig] = field(default_factory=list)
    # Camera motion per step, expressed in the current camera frame.
    ego_step: tuple[float, float, float, float, float, float] = (0, 0, 0, 0, 0, 0)
    seed: int = 0

    def intrinsics(self) -> Intrinsics:
        cx = (self.width - 1) / 2.0 if self.cx is None else self.cx
        cy = (self.height - 1) / 2.0 if self.cy is None else self.cy
        return Intrinsics(self.fx, self.fy, cx, cy, self.width, self.height)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneConfig":
        d = dict(d)
        if "background" in d:
            bg = dict(d["background"])
            if "texture" in bg:
                bg["texture"] = TextureConfig(**bg["texture"])
            d["background"] = BackgroundConfig(**bg)
        objs = []
        for o in d.get("objects", []):
            o = dict(o)
            if "texture" in o:
                o["texture"] = TextureConfig(**o["texture"])
            o["size"] = tuple(o["size"])
            o["center"] = tuple(o["center"])
            objs.append(ObjectConfig(**o))
        d["objects"] = objs
        if "ego_step" in d:
            d["ego_step"] = tuple(d["ego_step"])
        return cls(**d)


class _Plane:
    """Infinite or bounded textured plane for ray intersection."""

    def __init__(self, point, normal, e1, e2, texture, half_extent=None):
        self.point = np.asarray(point, dtype=np.float64)
        n = np.asarray(normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.e1 = np.asarray(e1, dtype=np.float64)
        self.e2 = np.asarray(e2, dtype=np.float64)
        self.texture = texture
        self.half_extent = half_extent

    def intersect(self, origin, dirs):
        """Ray parameter t (== camera depth for unit-z camera dirs) and hit flags."""
        denom = dirs @ self.normal
        denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
        t = ((self.point - origin) @ self.normal) / denom
        hit = t > 1e-6
        pts = origin + t[..., None] * dirs
        rel = pts - self.point
        a = rel @ self.e1
        b = rel @ self.e2
        if self.half_extent is not None:
            hx, hy = self.half_extent
            hit &= (np.abs(a) <= hx) & (np.abs(b) <= hy)
        return t, hit, a, b


@dataclass
class RenderedSequence:
    """Frames with exact depths, masks, flows and poses."""

    config: SyntheticSceneConfig
    frames: list[np.ndarray]
    depths: list[np.ndarray]
    masks: list[InstanceMaskSet]
    flows_fwd: list[np.ndarray]   # flow t -> t+1, defined on frame t
    flows_bwd: list[np.ndarray]   # flow t+1 -> t, defined on frame t+1
    cam_to_world: list[np.ndarray]
    object_motions: list[list[np.ndarray]]  # [step][object] world-frame 4x4

    @property
    def intrinsics(self) -> Intrinsics:
        return self.config.intrinsics()

    def ego_pose(self, t: int) -> PoseSE3:
        """Ground-truth camera motion mapping frame-t points into frame t+1."""
        T = invert(self.cam_to_world[t + 1]) @ self.cam_to_world[t]
        return transform_to_pose(T)

    def object_pose(self, t: int, obj_index: int) -> PoseSE3:
        """Residual object motion in the frame-(t+1) camera after ego elimination."""
        C2 = self.cam_to_world[t + 1]
        W = self.object_motions[t][obj_index]
        return transform_to_pose(invert(C2) @ W @ C2)

    def scene_pair(self, t: int = 0) -> ScenePair:
        return ScenePair(
            image1=self.frames[t], image2=self.frames[t + 1],
            depth1=self.depths[t], depth2=self.depths[t + 1],
            masks1=self.masks[t], masks2=self.masks[t + 1],
            intrinsics=self.intrinsics,
        )


def render_sequence(cfg: SyntheticSceneConfig) -> RenderedSequence:
    """Render all frames of a configured scene.

    Raises ValueError if any object center falls behind a camera.
    """
    K = cfg.intrinsics()
    n = cfg.n_frames
    if n < 1:
        raise ValueError("need at least one frame")

    step_T = pose_to_transform(PoseSE3.from_params(cfg.ego_step))
    cams = [np.eye(4)]
    for _ in range(n - 1):
        cams.append(cams[-1] @ step_T)

    # Object state per frame: center + orientation matrix.
    centers = []
    rots = []
    motions = []  # per step, per object, world affine 4x4
    cur_c = [np.asarray(o.center, dtype=np.float64) for o in cfg.objects]
    cur_R = [rotation_matrix(*o.orientation) for o in cfg.objects]
    centers.append([c.copy() for c in cur_c])
    rots.append([R.copy() for R in cur_R])
    for t in range(n - 1):
        step_motions = []
        for k, o in enumerate(cfg.objects):
            Rw = rotation_matrix(*o.step_rotation)
            tw = np.asarray(o.step_translation, dtype=np.float64)
            W = np.eye(4)
            W[:3, :3] = Rw
            W[:3, 3] = cur_c[k] - Rw @ cur_c[k] + tw
            step_motions.append(W)
            cur_c[k] = cur_c[k] + tw
            cur_R[k] = Rw @ cur_R[k]
        motions.append(step_motions)
        centers.append([c.copy() for c in cur_c])
        rots.append([R.copy() for R in cur_R])

    for t in range(n):
        w2c = invert(cams[t])
        for k in range(len(cfg.objects)):
            zc = (w2c[:3, :3] @ centers[t][k] + w2c[:3, 3])[2]
            if zc <= 0.0:
                raise ValueError(f"object {k} behind camera at frame {t}")

    bg_plane = _make_background_plane(cfg.background)
    obj_tex = [o.texture.sampler() for o in cfg.objects]

    u, v = K.pixel_grid()
    dirs_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy,
                         np.ones_like(u)], axis=-1)

    frames, depths, mask_sets, hit_points, hit_regions = [], [], [], [], []
    for t in range(n):
        C = cams[t]
        origin = C[:3, 3]
        dirs = dirs_cam @ C[:3, :3].T
        best_t = np.full((K.height, K.width), np.inf)
        region = np.full((K.height, K.width), -1, dtype=np.int32)  # -1 none, 0 bg, k>=1
        color = np.zeros((K.height, K.width, 3))

        tb, hitb, a, b = bg_plane.intersect(origin, dirs)
        sel = hitb & (tb < best_t)
        best_t[sel] = tb[sel]
        region[sel] = 0
        color[sel] = bg_plane.texture.sample(a[sel], b[sel])

        for k, o in enumerate(cfg.objects):
            e1 = rots[t][k] @ np.array([1.0, 0.0, 0.0])
            e2 = rots[t][k] @ np.array([0.0, 1.0, 0.0])
            nrm = rots[t][k] @ np.array([0.0, 0.0, 1.0])
            quad = _Plane(centers[t][k], nrm, e1, e2, obj_tex[k],
                          half_extent=(o.size[0] / 2.0, o.size[1] / 2.0))
            tq, hitq, aq, bq = quad.intersect(origin, dirs)
            sel = hitq & (tq < best_t)
            best_t[sel] = tq[sel]
            region[sel] = k + 1
            color[sel] = obj_tex[k].sample(aq[sel], bq[sel])

        depth = np.where(np.isfinite(best_t), best_t, 0.0)
        masks = {}
        cats = {}
        for k, o in enumerate(cfg.objects):
            m = (region == k + 1).astype(np.uint8)
            if m.any():
                masks[k + 1] = m
                cats[k + 1] = o.category
        frames.append(np.clip(color, 0.0, 1.0))
        depths.append(depth)
        mask_sets.append(InstanceMaskSet(masks, cats))
        hit_points.append(origin + best_t[..., None] * dirs)
        hit_regions.append(region)

    flows_fwd, flows_bwd = [], []
    for t in range(n - 1):
        flows_fwd.append(_flow(cfg, K, cams[t], cams[t + 1], hit_points[t],
                               hit_regions[t], motions[t], inverse=False))
        flows_bwd.append(_flow(cfg, K, cams[t + 1], cams[t], hit_points[t + 1],
                               hit_regions[t + 1], motions[t], inverse=True))

    return RenderedSequence(config=cfg, frames=frames, depths=depths,
                            masks=mask_sets, flows_fwd=flows_fwd,
                            flows_bwd=flows_bwd, cam_to_world=cams,
                            object_motions=motions)


def _make_background_plane(bg: BackgroundConfig) -> _Plane:
    tilt = math.radians(bg.tilt_deg) if bg.kind == "ramp" else 0.0
    if bg.kind not in ("constant", "ramp"):
        raise ValueError(f"unknown background kind {bg.kind!r}")
    Rt = rotation_matrix(tilt, 0.0, 0.0)
    normal = Rt @ np.array([0.0, 0.0, 1.0])
    e1 = np.array([1.0, 0.0, 0.0])
    e2 = Rt @ np.array([0.0, 1.0, 0.0])
    return _Plane(np.array([0.0, 0.0, bg.depth]), normal, e1, e2,
                  bg.texture.sampler())


def _flow(cfg, K, own_cam, other_cam, points, region, step_motions, inverse):
    """Analytic flow from material-point correspondence.

    Computed as the difference of two projections (of the moved point into
    the other camera and of the hit point into its own camera) so that static
    content under a static camera yields exactly zero flow.
    """
    moved = points.copy()
    for k in range(len(cfg.objects)):
        W = step_motions[k]
        if inverse:
            W = invert(W)
        sel = region == k + 1
        moved[sel] = moved[sel] @ W[:3, :3].T + W[:3, 3]

    def proj(pts, cam):
        w2c = invert(cam)
        pc = pts @ w2c[:3, :3].T + w2c[:3, 3]
        z = np.where(np.abs(pc[..., 2]) < 1e-12, 1e-12, pc[..., 2])
        return np.stack([K.fx * pc[..., 0] / z + K.cx,
                         K.fy * pc[..., 1] / z + K.cy], axis=-1)

    flow = proj(moved, other_cam) - proj(points, own_cam)
    flow[region < 0] = 0.0
    return flow


# ---------------------------------------------------------------------------
# Scene presets used by the self-test and the verification suites.
# ---------------------------------------------------------------------------

def preset_static(seed: int = 0, block: float = 2.0) -> SyntheticSceneConfig:
    """Ego motion over a static block-textured scene (no moving objects)."""
    rng = np.random.default_rng(seed)
    tz = 0.25 + 0.2 * rng.random()
    tx = 0.04 * (rng.random() - 0.5)
    ry = math.radians(0.3) * (rng.random() - 0.5)
    return SyntheticSceneConfig(
        n_frames=2,
        background=BackgroundConfig(kind="constant", depth=10.0,
                                    texture=TextureConfig(kind="blocks", scale=block,
                                                          seed=seed)),
        ego_step=(0.0, ry, 0.0, tx, 0.0, tz),
        seed=seed,
    )


def preset_recovery(seed: int = 0, n_objects: int = 2) -> SyntheticSceneConfig:
    """Pose-recovery scene: ego motion plus 1..3 independently moving quads.

    Textures are smooth value noise so the photometric surface has a wide,
    well-conditioned basin around the true poses.
    """
    rng = np.random.default_rng(seed)
    ego_t = np.array([0.06 * (rng.random() - 0.5),
                      0.04 * (rng.random() - 0.5),
                      0.2 + 0.3 * rng.random()])
    ego_r = math.radians(0.25) * (rng.random(3) - 0.5)
    objects = []
    xs = np.linspace(-2.2, 2.2, max(n_objects, 1))
    for k in range(n_objects):
        direction = rng.standard_normal(3)
        direction[2] *= 0.3
        direction /= np.linalg.norm(direction)
        magnitude = 0.3 + 0.5 * rng.random()
        objects.append(ObjectConfig(
            size=(1.7, 1.3),
            center=(float(xs[k]), float(0.5 * (rng.random() - 0.5)), 6.0 + 1.2 * k),
            step_translation=tuple(magnitude * direction),
            texture=TextureConfig(kind="noise", scale=0.35, lo=0.05, hi=0.95,
                                  seed=seed * 17 + 3 + k),
            category=1,
        ))
    return SyntheticSceneConfig(
        n_frames=2,
        background=BackgroundConfig(kind="ramp", depth=11.0, tilt_deg=18.0,
                                    texture=TextureConfig(kind="noise", scale=0.8,
                                                          lo=0.05, hi=0.95,
                                                          seed=seed)),
        objects=objects,
        ego_step=(ego_r[0], ego_r[1], ego_r[2], ego_t[0], ego_t[1], ego_t[2]),
        seed=seed,
    )


def preset_gradcheck(seed: int = 0, n_objects: int = 1) -> SyntheticSceneConfig:
    """Smooth-texture scene for derivative checks.

    Wide-angle camera and large, high-contrast value-noise cells keep the
    photometric surface slowly varying, so central differences of the loss
    are a clean oracle; the dominant +z motion keeps the sampling field away
    from validity boundaries.
    """
    rng = np.random.default_rng(seed)
    objects = []
    for k in range(n_objects):
        objects.append(ObjectConfig(
            size=(2.2, 1.6),
            center=(float(2.4 * (k - (n_objects - 1) / 2.0)), 0.0, 6.5 + k),
            step_translation=(0.25 + 0.1 * rng.random(), 0.0, 0.1),
            texture=TextureConfig(kind="noise", scale=1.0, lo=0.05, hi=0.95,
                                  seed=seed * 29 + 7 + k),
        ))
    return SyntheticSceneConfig(
        n_frames=2,
        fx=100.0,
        fy=100.0,
        background=BackgroundConfig(kind="constant", depth=9.0,
                                    texture=TextureConfig(kind="noise", scale=2.0,
                                                          lo=0.05, hi=0.95, seed=seed)),
        objects=objects,
        ego_step=(0.0, 0.0, 0.0, 0.02, 0.01, 0.3),
        seed=seed,
    )


def preset_tracking(n_frames: int = 10) -> SyntheticSceneConfig:
    """Three moving quads; object 1 is fully hidden by object 2 for two frames.

    The occluder (z=2, angular half-width 0.25) steps 0.155 rad/frame across
    the drifting occludee (z=7, half-width 0.064): accounting for both
    motions, full cover holds for t in [5.24, 7.75], i.e. frames 6 and 7,
    with ~7 px visible slivers at frames 5 and 8 and a clear view otherwise.
    The occluder's own step (31 px against a 100 px width) keeps its
    frame-to-frame IoU at 0.53 > 0.5, and the bystander sits at +0.85 rad,
    outside the whole sweep.
    """
    occludee = ObjectConfig(
        size=(0.9, 0.7),
        center=(0.0, 0.0, 7.0),
        step_translation=(0.05, 0.0, 0.0),
        texture=TextureConfig(kind="blocks", scale=0.3, seed=11),
        category=1,
    )
    occluder = ObjectConfig(
        size=(1.0, 0.8),
        center=(-1.92, 0.0, 2.0),
        step_translation=(0.31, 0.0, 0.0),
        texture=TextureConfig(kind="blocks", scale=0.4, seed=12),
        category=1,
    )
    bystander = ObjectConfig(
        size=(1.0, 0.8),
        center=(7.65, -0.3, 9.0),
        step_translation=(-0.05, 0.02, 0.0),
        texture=TextureConfig(kind="blocks", scale=0.3, seed=13),
        category=1,
    )
    return SyntheticSceneConfig(
        n_frames=n_frames,
        background=BackgroundConfig(kind="constant", depth=14.0,
                                    texture=TextureConfig(kind="blocks", scale=2.0,
                                                          seed=5)),
        objects=[occludee, occluder, bystander],
        ego_step=(0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        seed=5,
    )
