"""Auto-annotation of video instance masks and MOTS evaluation.

Per-frame instance masks (from any segmentation source) are linked into
tracks by transporting each mask along the forward optical flow and matching
it to the next frame's masks by IoU. Occluded pixels, detected by
bidirectional flow consensus, are excluded from the comparison on both
sides, so tracks survive partial occlusions; masks left unmatched start new
tracks (adjacent-frame semantics, no re-identification across gaps).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .instances import InstanceMaskSet
from .warp import bilinear_sample

# Bidirectional-consensus threshold: occluded iff
#   |f12 + f21(x + f12)|^2 > a * (|f12|^2 + |f21(x + f12)|^2) + b
CONSENSUS_A = 0.01
CONSENSUS_B = 0.5


@dataclass
class FlowField:
    """Dense optical flow for both directions of a frame pair, in pixels."""

    forward: np.ndarray   # (H, W, 2) flow from frame t to t+1
    backward: np.ndarray  # (H, W, 2) flow from frame t+1 to t

    def __post_init__(self):
        for name in ("forward", "backward"):
            f = np.asarray(getattr(self, name), dtype=np.float64)
            if f.ndim != 3 or f.shape[-1] != 2:
                raise ValueError("flow fields must have shape (H, W, 2)")
            if not np.all(np.isfinite(f)):
                raise ValueError("flow fields must be finite")
            setattr(self, name, f)


@dataclass
class TrackedSequence:
    """Per-frame masks keyed by globally consistent track ids."""

    frames: list[InstanceMaskSet]
    categories: dict[int, int] = field(default_factory=dict)

    @property
    def track_ids(self) -> list[int]:
        ids = set()
        for f in self.frames:
            ids.update(f.ids)
        return sorted(ids)


@dataclass
class MotsScores:
    smotsa: Optional[float]
    motsa: Optional[float]
    motsp: Optional[float]
    ids: int
    tp: int
    fp: int
    fn: int

    def to_record(self) -> dict:
        return {"sMOTSA": self.smotsa, "MOTSA": self.motsa, "MOTSP": self.motsp,
                "IDS": self.ids, "TP": self.tp, "FP": self.fp, "FN": self.fn}


def occlusion_consensus(f12: np.ndarray, f21: np.ndarray,
                        a: float = CONSENSUS_A, b: float = CONSENSUS_B) -> np.ndarray:
    """Occlusion mask on the source grid from bidirectional flow consensus.

    The backward flow is sampled bilinearly at the forward-flow destination;
    destinations outside the image count as occluded.
    """
    f12 = np.asarray(f12, dtype=np.float64)
    f21 = np.asarray(f21, dtype=np.float64)
    if f12.shape != f21.shape or f12.ndim != 3 or f12.shape[-1] != 2:
        raise ValueError("flow fields must share shape (H, W, 2)")
    H, W = f12.shape[:2]
    u, v = np.meshgrid(np.arange(W, dtype=np.float64),
                       np.arange(H, dtype=np.float64))
    du = u + f12[..., 0]
    dv = v + f12[..., 1]
    back, inside = bilinear_sample(f21, du, dv)
    residual = (f12 + back)
    res_sq = (residual ** 2).sum(axis=-1)
    mag_sq = (f12 ** 2).sum(axis=-1) + (back ** 2).sum(axis=-1)
    occluded = res_sq > a * mag_sq + b
    return occluded | ~inside


def transport_mask(mask: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Carry a binary mask along a flow field by nearest-pixel splatting."""
    mask = np.asarray(mask)
    H, W = mask.shape
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return np.zeros((H, W), dtype=np.uint8)
    un = np.rint(cols + flow[rows, cols, 0]).astype(np.int64)
    vn = np.rint(rows + flow[rows, cols, 1]).astype(np.int64)
    ok = (un >= 0) & (un < W) & (vn >= 0) & (vn < H)
    out = np.zeros((H, W), dtype=np.uint8)
    out[vn[ok], un[ok]] = 1
    return out


def mask_iou(a: np.ndarray, b: np.ndarray,
             exclude: Optional[np.ndarray] = None) -> float:
    """IoU of two binary masks; excluded pixels count for neither mask."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if exclude is not None:
        keep = ~np.asarray(exclude, dtype=bool)
        a = a & keep
        b = b & keep
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return float(np.count_nonzero(a & b) / union)


def iou_table(masks1_warped: InstanceMaskSet, masks2: InstanceMaskSet,
              occlusion: Optional[np.ndarray] = None):
    """IoU matrix between transported frame-1 masks and frame-2 masks.

    Occluded pixels are excluded from both intersection and union; an empty
    union scores 0. Returns (ids1, ids2, matrix).
    """
    ids1 = masks1_warped.ids
    ids2 = masks2.ids
    table = np.zeros((len(ids1), len(ids2)))
    for i, a in enumerate(ids1):
        for j, b in enumerate(ids2):
            table[i, j] = mask_iou(masks1_warped.masks[a], masks2.masks[b],
                                   exclude=occlusion)
    return ids1, ids2, table


def match_instances(iou: np.ndarray, tau: float = 0.5,
                    categories1=None, categories2=None,
                    assignment: str = "greedy") -> dict[int, int]:
    """Partial bijection row -> column with IoU strictly above tau.

    Greedy matching in descending IoU order by default; "hungarian" uses an
    optimal assignment instead. With category lists given, only same-category
    pairs may match. Ties at exactly tau do not match.
    """
    if not (0.0 < tau <= 1.0):
        raise ValueError("tau must lie in (0, 1]")
    iou = np.asarray(iou, dtype=np.float64)
    if iou.ndim != 2:
        raise ValueError("iou must be a matrix")

    def allowed(i, j):
        if categories1 is None or categories2 is None:
            return True
        return categories1[i] == categories2[j]

    matches: dict[int, int] = {}
    if assignment == "hungarian":
        from scipy.optimize import linear_sum_assignment

        cost = -iou.copy()
        if categories1 is not None:
            for i in range(iou.shape[0]):
                for j in range(iou.shape[1]):
                    if not allowed(i, j):
                        cost[i, j] = 1.0
        rows, cols = linear_sum_assignment(cost)
        for i, j in zip(rows, cols):
            if iou[i, j] > tau and allowed(i, j):
                matches[int(i)] = int(j)
        return matches
    if assignment != "greedy":
        raise ValueError(f"unknown assignment mode {assignment!r}")

    order = np.argsort(-iou, axis=None, kind="stable")
    used_rows: set[int] = set()
    used_cols: set[int] = set()
    for flat in order:
        i, j = np.unravel_index(flat, iou.shape)
        if iou[i, j] <= tau:
            break
        if i in used_rows or j in used_cols or not allowed(i, j):
            continue
        matches[int(i)] = int(j)
        used_rows.add(int(i))
        used_cols.add(int(j))
    return matches


def track_masks(mask_sets: list[InstanceMaskSet], flows: list[FlowField],
                tau: float = 0.5, consensus_a: float = CONSENSUS_A,
                consensus_b: float = CONSENSUS_B,
                assignment: str = "greedy") -> TrackedSequence:
    """Link per-frame instance masks into tracks using optical flow.

    Frame-t masks are restricted to pixels that survive the forward
    consensus check, transported along the forward flow and compared against
    frame-(t+1) masks with disoccluded pixels excluded; matches above tau
    inherit the track id, everything else starts a new track.
    """
    if len(flows) != len(mask_sets) - 1:
        raise ValueError("need one flow pair per adjacent frame pair")
    next_tid = 1
    categories: dict[int, int] = {}
    tracked: list[InstanceMaskSet] = []

    first = {}
    id_map: dict[int, int] = {}  # raw id in current frame -> track id
    for rid in mask_sets[0].ids:
        first[next_tid] = mask_sets[0].masks[rid]
        categories[next_tid] = mask_sets[0].categories.get(rid, 0)
        id_map[rid] = next_tid
        next_tid += 1
    tracked.append(InstanceMaskSet(first, {t: categories[t] for t in first}))

    for t, flow in enumerate(flows):
        cur = tracked[-1]
        nxt = mask_sets[t + 1]
        occ_fwd = occlusion_consensus(flow.forward, flow.backward,
                                      consensus_a, consensus_b)
        occ_bwd = occlusion_consensus(flow.backward, flow.forward,
                                      consensus_a, consensus_b)
        warped = {}
        for tid in cur.ids:
            visible = cur.masks[tid].astype(bool) & ~occ_fwd
            warped[tid] = transport_mask(visible.astype(np.uint8), flow.forward)
        warped_set = InstanceMaskSet.__new__(InstanceMaskSet)
        warped_set.masks = warped  # transported masks may overlap; bypass checks
        warped_set.categories = {tid: categories[tid] for tid in warped}

        ids1, ids2, table = iou_table(warped_set, nxt, occlusion=occ_bwd)
        cats1 = [categories[tid] for tid in ids1]
        cats2 = [nxt.categories.get(rid, 0) for rid in ids2]
        matches = match_instances(table, tau, cats1, cats2, assignment)

        new_frame = {}
        new_cats = {}
        id_map = {}
        matched_cols = {}
        for i, j in matches.items():
            matched_cols[j] = ids1[i]
        for j, rid in enumerate(ids2):
            if j in matched_cols:
                tid = matched_cols[j]
            else:
                tid = next_tid
                categories[tid] = nxt.categories.get(rid, 0)
                next_tid += 1
            new_frame[tid] = nxt.masks[rid]
            new_cats[tid] = categories[tid]
            id_map[rid] = tid
        tracked.append(InstanceMaskSet(new_frame, new_cats))
    return TrackedSequence(frames=tracked, categories=categories)


def mots_metrics(hypothesis: TrackedSequence, groundtruth: TrackedSequence,
                 iou_thresh: float = 0.5, ids_zero: bool = False) -> MotsScores:
    """MOTS scores from per-frame IoU > 0.5 assignment.

    An id switch is counted when a ground-truth track is matched to a
    different hypothesis id than at its most recent previously matched frame.
    ids_zero reproduces the adjacent-frame evaluation protocol that reports
    IDS as zero inside sMOTSA/MOTSA (the switch count is still returned).
    """
    if len(hypothesis.frames) != len(groundtruth.frames):
        raise ValueError("sequences must have the same frame count")
    tp = fp = fn = 0
    soft_tp = 0.0
    n_gt = 0
    last_match: dict[int, int] = {}
    switches = 0
    for hyp_set, gt_set in zip(hypothesis.frames, groundtruth.frames):
        gids = gt_set.ids
        hids = hyp_set.ids
        n_gt += len(gids)
        _, _, table = iou_table(gt_set, hyp_set)
        matches = match_instances(table, iou_thresh) if table.size else {}
        tp += len(matches)
        fp += len(hids) - len(matches)
        fn += len(gids) - len(matches)
        for i, j in matches.items():
            soft_tp += table[i, j]
            gid = gids[i]
            hid = hids[j]
            if gid in last_match and last_match[gid] != hid:
                switches += 1
            last_match[gid] = hid
    ids_for_score = 0 if ids_zero else switches
    if n_gt == 0:
        return MotsScores(None, None, None, switches, tp, fp, fn)
    motsa = 1.0 - (fn + fp + ids_for_score) / n_gt
    motsp = soft_tp / tp if tp else None
    smotsa = (soft_tp - fp - ids_for_score) / n_gt
    return MotsScores(smotsa, motsa, motsp, switches, tp, fp, fn)
