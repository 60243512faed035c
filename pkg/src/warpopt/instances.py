"""Background/instance decomposition and depth-inconsistency maps.

The target view is rebuilt region by region: the background through a single
inverse warp driven by the ego pose, and each instance through a forward warp
(ego-motion elimination) followed by an inverse warp driven by that object's
own pose. Masks ride the same warps so every reconstructed pixel can be
attributed to exactly one region, and per-region depth inconsistency maps are
merged into a single confidence weight for the photometric loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Z_EPS
from .warp import WarpResult, inverse_warp

# Instances smaller than this many pixels give degenerate pose estimates and
# are dropped from the active set (configurable in ScenePair.matched_ids).
MIN_INSTANCE_PIXELS = 9

BACKGROUND_ID = 0
NO_OWNER = -1


@dataclass
class InstanceMaskSet:
    """Pairwise-disjoint binary masks keyed by instance id (>= 1).

    Id 0 is reserved for the background. categories optionally labels each
    instance with a semantic class (defaults to 0).
    """

    masks: dict[int, np.ndarray] = field(default_factory=dict)
    categories: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        cover = None
        for iid, m in self.masks.items():
            if iid <= 0:
                raise ValueError("instance ids must be >= 1 (0 is background)")
            m = np.asarray(m)
            if not np.all((m == 0) | (m == 1)):
                raise ValueError(f"mask {iid} is not binary")
            m = m.astype(np.uint8)
            self.masks[iid] = m
            if cover is None:
                cover = m.copy()
            else:
                if m.shape != cover.shape:
                    raise ValueError("masks must share one grid")
                if np.any(cover & m):
                    raise ValueError("instance masks must be pairwise disjoint")
                cover |= m
        for iid in self.masks:
            self.categories.setdefault(iid, 0)

    @property
    def ids(self) -> list[int]:
        return sorted(self.masks)

    def pixel_count(self, iid: int) -> int:
        return int(self.masks[iid].sum())

    def union(self, shape=None) -> np.ndarray:
        if self.masks:
            out = np.zeros(next(iter(self.masks.values())).shape, dtype=np.uint8)
            for m in self.masks.values():
                out |= m
            return out
        if shape is None:
            raise ValueError("shape required for an empty mask set")
        return np.zeros(shape, dtype=np.uint8)


@dataclass
class ScenePair:
    """A matched pair of adjacent frames with depths, masks and intrinsics."""

    image1: np.ndarray
    image2: np.ndarray
    depth1: np.ndarray
    depth2: np.ndarray
    masks1: InstanceMaskSet
    masks2: InstanceMaskSet
    intrinsics: Intrinsics

    def __post_init__(self):
        hw = (self.intrinsics.height, self.intrinsics.width)
        for name in ("image1", "image2", "depth1", "depth2"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape[:2] != hw:
                raise ValueError(f"{name} shape {arr.shape} does not match intrinsics {hw}")
            setattr(self, name, arr)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.intrinsics.height, self.intrinsics.width)

    def matched_ids(self, min_pixels: int = MIN_INSTANCE_PIXELS) -> list[int]:
        """Instance ids present in both frames with at least min_pixels each.

        Instances visible in only one frame stay in the mask sets (so the
        background mask still excludes their pixels) but are not part of the
        active instance set.
        """
        out = []
        for iid in self.masks1.ids:
            if iid in self.masks2.masks \
                    and self.masks1.pixel_count(iid) >= min_pixels \
                    and self.masks2.pixel_count(iid) >= min_pixels:
                out.append(iid)
        return out


@dataclass
class InconsistencyMap:
    """Per-pixel relative depth disagreement in [0, 1) with validity."""

    values: np.ndarray
    valid: np.ndarray


def background_mask(masks1: InstanceMaskSet, masks2: InstanceMaskSet,
                    shape=None) -> np.ndarray:
    """Complement of the union of all instance masks over both frames."""
    u1 = masks1.union(shape)
    u2 = masks2.union(u1.shape)
    if u1.shape != u2.shape:
        raise ValueError("mask sets are on different grids")
    return ((1 - u1) & (1 - u2)).astype(np.uint8)


def reconstruct_background(image1: np.ndarray, depth2: np.ndarray,
                           ego_pose_2_to_1, K: Intrinsics,
                           bg_mask: np.ndarray) -> WarpResult:
    """Background part of the synthesized target view (masked inverse warp)."""
    warped = inverse_warp(image1, depth2, ego_pose_2_to_1, K)
    bg = np.asarray(bg_mask, dtype=bool)
    data = warped.data * (bg[..., None] if warped.data.ndim == 3 else bg)
    return WarpResult(data=data, valid=warped.valid & bg)


def reconstruct_instance(fw_instance_image: np.ndarray, depth2: np.ndarray,
                         obj_pose_2_to_1, K: Intrinsics) -> WarpResult:
    """Inverse-warp one ego-motion-eliminated instance image by its object pose."""
    return inverse_warp(fw_instance_image, depth2, obj_pose_2_to_1, K)


def propagate_instance_mask(fw_mask: np.ndarray, depth2: np.ndarray,
                            obj_pose_2_to_1, K: Intrinsics) -> WarpResult:
    """Carry a forward-warped instance mask through the inverse warp.

    Fractional interpolated values are rounded up so the mask stays binary
    and hole borders stay inside the mask.
    """
    warped = inverse_warp(np.asarray(fw_mask, dtype=np.float64), depth2,
                          obj_pose_2_to_1, K)
    data = np.where(warped.valid, np.ceil(warped.data), 0.0)
    return WarpResult(np.clip(data, 0.0, 1.0), warped.valid)


def union_valid_mask(bg_mask: np.ndarray, propagated_masks) -> np.ndarray:
    """Union of the background mask and all propagated instance masks."""
    out = np.asarray(bg_mask, dtype=np.float64).copy()
    for m in propagated_masks:
        data = m.data if isinstance(m, WarpResult) else np.asarray(m, dtype=np.float64)
        out = out + data
    return np.clip(out, 0.0, 1.0).astype(np.uint8)


def resolve_ownership(bg_mask: np.ndarray,
                      bg_depth: np.ndarray | None,
                      bg_valid: np.ndarray | None,
                      instance_ids,
                      instance_masks,
                      instance_depths,
                      instance_valids) -> np.ndarray:
    """Assign every pixel to at most one region.

    Candidates are the background (where bg_mask is 1 and its warp is valid)
    and each instance (where its propagated mask is 1 and its warp is valid).
    Overlaps go to the candidate with the smaller warped depth; exact ties go
    to the lower region id (background is id 0). Returns an int map with -1
    where no region claims the pixel.
    """
    bg_mask = np.asarray(bg_mask)
    owner = np.full(bg_mask.shape, NO_OWNER, dtype=np.int32)
    best = np.full(bg_mask.shape, np.inf)

    def claim(region_id, mask, depth, ok):
        cand = mask.astype(bool)
        if ok is not None:
            cand &= ok
        if depth is None:
            d = np.zeros(bg_mask.shape)
        else:
            d = np.asarray(depth, dtype=np.float64)
            cand &= d > Z_EPS
        better = cand & (d < best)
        owner[better] = region_id
        best[better] = d[better]

    claim(BACKGROUND_ID, bg_mask, bg_depth, bg_valid)
    for iid, m, d, ok in zip(instance_ids, instance_masks, instance_depths,
                             instance_valids):
        claim(iid, np.asarray(m), d, ok)
    return owner


def compose_full(bg_image, instance_images, instance_masks=None,
                 instance_depths=None, bg_mask=None, bg_depth=None):
    """Merge the background and instance reconstructions into one view.

    With disjoint regions this is a pixelwise sum. When masks and warped
    depths are supplied, overlapping pixels are resolved in favor of the
    nearer region (lower instance id on exact ties) and the ownership map is
    returned alongside the image.
    """
    bg_img = bg_image.data if isinstance(bg_image, WarpResult) else np.asarray(bg_image, dtype=np.float64)
    imgs = [im.data if isinstance(im, WarpResult) else np.asarray(im, dtype=np.float64)
            for im in instance_images]
    if instance_masks is None:
        out = bg_img.copy()
        for im in imgs:
            out = out + im
        return out, None

    n = len(imgs)
    ids = list(range(1, n + 1))
    bg_valid = bg_image.valid if isinstance(bg_image, WarpResult) else None
    inst_valid = [im.valid if isinstance(im, WarpResult) else None
                  for im in instance_images]
    if bg_mask is None:
        bg_mask = np.ones(bg_img.shape[:2], dtype=np.uint8)
    owner = resolve_ownership(
        bg_mask, bg_depth, bg_valid, ids,
        [np.asarray(m) for m in instance_masks],
        instance_depths if instance_depths is not None else [None] * n,
        inst_valid)
    out = np.zeros_like(bg_img if bg_img.ndim == 3 else bg_img[..., None])
    flat_bg = bg_img if bg_img.ndim == 3 else bg_img[..., None]
    sel = owner == BACKGROUND_ID
    out[sel] = flat_bg[sel]
    for iid, im in zip(ids, imgs):
        sel = owner == iid
        out[sel] = (im if im.ndim == 3 else im[..., None])[sel]
    if bg_img.ndim == 2:
        out = out[..., 0]
    return out, owner


def depth_inconsistency(aligned_depth, sc_depth, region_mask) -> InconsistencyMap:
    """Relative disagreement |a - b| / (a + b) between two aligned depths.

    aligned_depth is the value-sampled warped depth, sc_depth the
    scale-consistently transformed depth of the target frame; both live on
    the target grid. Pixels where either depth is invalid, or a + b <= 0,
    are invalid rather than an error.
    """
    a, a_ok = _depth_with_valid(aligned_depth)
    b, b_ok = _depth_with_valid(sc_depth)
    mask = np.asarray(region_mask, dtype=bool)
    s = a + b
    ok = mask & a_ok & b_ok & (s > 0.0)
    vals = np.zeros_like(a)
    np.divide(np.abs(a - b), s, out=vals, where=ok)
    vals[~ok] = 0.0
    return InconsistencyMap(values=vals, valid=ok)


def merge_inconsistency(bg_map: InconsistencyMap, instance_maps) -> InconsistencyMap:
    """Sum the per-region inconsistency maps over their disjoint supports."""
    vals = bg_map.values.copy()
    ok = bg_map.valid.copy()
    for m in instance_maps:
        vals = vals + m.values
        ok = ok | m.valid
    return InconsistencyMap(values=vals, valid=ok)


def weighted_valid_mask(d_diff: InconsistencyMap, union_mask: np.ndarray) -> np.ndarray:
    """Per-pixel confidence (1 - D_diff) gated by the valid-region mask."""
    m = np.asarray(union_mask, dtype=np.float64)
    return np.clip((1.0 - d_diff.values) * m, 0.0, 1.0)


def _depth_with_valid(d):
    if isinstance(d, WarpResult):
        return np.asarray(d.data, dtype=np.float64), d.valid.astype(bool)
    if isinstance(d, InconsistencyMap):
        raise TypeError("expected a depth raster")
    arr = np.asarray(d, dtype=np.float64)
    return arr, arr > 0.0
