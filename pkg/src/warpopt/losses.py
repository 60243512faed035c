"""Self-supervision objectives: photometric, geometric, smoothness,
translation-prior and height-prior losses, and their weighted sum.

All pixel sums are normalized to means (per valid pixel, per instance) so the
default weights stay meaningful across resolutions and instance counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .geometry import PointCloud


@dataclass
class LossConfig:
    """Weights and photometric constants.

    Defaults: weight_recon=1.0, weight_geo=0.5, weight_smooth=0.05,
    weight_trans=0.1, weight_height=0.001 and ssim_mix=0.8.
    """

    weight_recon: float = 1.0
    weight_geo: float = 0.5
    weight_smooth: float = 0.05
    weight_trans: float = 0.1
    weight_height: float = 0.001
    ssim_mix: float = 0.8          # gamma: SSIM share of the photometric cost
    ssim_window: int = 3
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2

    def weights(self) -> np.ndarray:
        return np.array([self.weight_recon, self.weight_geo, self.weight_smooth,
                         self.weight_trans, self.weight_height])


@dataclass
class HeightPrior:
    """Learnable per-category metric object heights, clamped to [lo, hi]."""

    values: dict[int, float] = field(default_factory=dict)
    lo: float = 0.5
    hi: float = 5.0

    def get(self, category: int) -> float:
        return float(np.clip(self.values.get(category, 1.5), self.lo, self.hi))

    def clamp(self):
        for k, v in self.values.items():
            self.values[k] = float(np.clip(v, self.lo, self.hi))


@dataclass
class LossBreakdown:
    """Component losses and the weighted total."""

    l_r: float = 0.0
    l_g: float = 0.0
    l_s: float = 0.0
    l_t: float = 0.0
    l_h: float = 0.0
    total: float = 0.0
    n_valid_px: float = 0.0
    n_instances: int = 0

    def to_record(self) -> dict:
        return asdict(self)


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = 3,
             c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> np.ndarray:
    """Local structural similarity per pixel, averaged over channels.

    Statistics are mean-pooled over a window x window neighborhood
    (reflect padding at the borders). Values lie in [-1, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("ssim_map inputs must share one shape")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    out = np.zeros(a.shape[:2], dtype=np.float64)
    for c in range(a.shape[-1]):
        out += _ssim_channel(a[..., c], b[..., c], window, c1, c2)
    return out / a.shape[-1]


def _ssim_channel(x, y, window, c1, c2):
    def pool(z):
        return ndimage.uniform_filter(z, size=window, mode="reflect")

    mu_x = pool(x)
    mu_y = pool(y)
    sigma_x = pool(x * x) - mu_x ** 2
    sigma_y = pool(y * y) - mu_y ** 2
    sigma_xy = pool(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sigma_xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sigma_x + sigma_y + c2)
    return num / den


def photometric_cost(abs_diff: np.ndarray, ssim_vals: np.ndarray,
                     gamma: float) -> np.ndarray:
    """(1 - gamma) * |residual| + gamma * (1 - SSIM), per pixel."""
    return (1.0 - gamma) * abs_diff + gamma * (1.0 - ssim_vals)


def reconstruction_loss(target: np.ndarray, reconstructed: np.ndarray,
                        valid_weight: np.ndarray, gamma: float = 0.8,
                        ssim_vals: np.ndarray | None = None,
                        cfg: LossConfig | None = None) -> tuple[float, bool]:
    """Weighted photometric error between the target view and its synthesis.

    Returns (loss, degenerate) where degenerate flags a sample whose
    weight mass is zero (loss then defined as 0).
    """
    cfg = cfg or LossConfig()
    target = np.asarray(target, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if target.shape != reconstructed.shape:
        raise ValueError("target/reconstruction shapes differ")
    v = np.asarray(valid_weight, dtype=np.float64)
    diff = np.abs(target - reconstructed)
    if diff.ndim == 3:
        diff = diff.mean(axis=-1)
    if ssim_vals is None:
        ssim_vals = ssim_map(target, reconstructed, cfg.ssim_window,
                             cfg.ssim_c1, cfg.ssim_c2)
    ssim_vals = np.broadcast_to(np.asarray(ssim_vals, dtype=np.float64), diff.shape)
    cost = photometric_cost(diff, ssim_vals, gamma)
    denom = float(v.sum())
    if denom <= 0.0:
        return 0.0, True
    return float((v * cost).sum() / denom), False


def geometric_loss(union_mask: np.ndarray, d_diff_values: np.ndarray) -> float:
    """Mean depth inconsistency over the valid-region mask."""
    m = np.asarray(union_mask, dtype=np.float64)
    denom = float(m.sum())
    if denom <= 0.0:
        return 0.0
    return float((m * np.asarray(d_diff_values, dtype=np.float64)).sum() / denom)


def smoothness_loss(depth: np.ndarray, image: np.ndarray) -> float:
    """Edge-aware squared depth-gradient penalty.

    Forward differences in x and y; the image gradient magnitude (mean over
    channels) downweights depth edges that coincide with image edges.
    """
    d = np.asarray(depth, dtype=np.float64)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    dx = d[:, 1:] - d[:, :-1]
    dy = d[1:, :] - d[:-1, :]
    ix = np.abs(img[:, 1:] - img[:, :-1]).mean(axis=-1)
    iy = np.abs(img[1:, :] - img[:-1, :]).mean(axis=-1)
    tx = (dx * np.exp(-ix)) ** 2
    ty = (dy * np.exp(-iy)) ** 2
    return float((tx.sum() + ty.sum()) / (tx.size + ty.size))


def translation_prior(fw_points: PointCloud, tgt_points: PointCloud,
                      fw_mask: np.ndarray, tgt_mask: np.ndarray) -> np.ndarray | None:
    """Mean 3D displacement of an object's points between the two clouds.

    Subtracts the mean of the object's forward-warped points from the mean of
    the target frame's object points. Returns None (instance excluded) when
    either masked cloud is empty.
    """
    fsel = np.asarray(fw_mask, dtype=bool) & fw_points.valid
    tsel = np.asarray(tgt_mask, dtype=bool) & tgt_points.valid
    if not fsel.any() or not tsel.any():
        return None
    return tgt_points.points[tsel].mean(axis=0) - fw_points.points[fsel].mean(axis=0)


def translation_loss(predicted, priors) -> float:
    """Mean L1 gap between predicted object translations and their priors.

    predicted and priors are parallel sequences of 3-vectors; entries with a
    missing prior are skipped.
    """
    terms = []
    for t, tp in zip(predicted, priors):
        if tp is None:
            continue
        terms.append(float(np.abs(np.asarray(t, dtype=np.float64)
                                  - np.asarray(tp, dtype=np.float64)).sum()))
    if not terms:
        return 0.0
    return float(np.mean(terms))


def mask_pixel_height(mask: np.ndarray) -> int:
    """Bounding-box height of a binary mask, in pixels (>= 1 if non-empty)."""
    rows = np.nonzero(np.asarray(mask).any(axis=1))[0]
    if rows.size == 0:
        return 0
    return int(rows[-1] - rows[0] + 1)


def height_loss(depth: np.ndarray, mask_set, priors: HeightPrior,
                fy: float) -> float:
    """Depth-scale anchor from per-category object height priors.

    For instance k the expected depth is fy * p_h / h_k with h_k the mask's
    pixel height; the per-instance mean absolute deviation is normalized by
    the mean scene depth and averaged over instances.
    """
    d = np.asarray(depth, dtype=np.float64)
    valid = d > 0.0
    if not valid.any():
        return 0.0
    mean_depth = float(d[valid].mean())
    if mean_depth <= 0.0:
        return 0.0
    terms = []
    for iid in mask_set.ids:
        m = mask_set.masks[iid].astype(bool) & valid
        h = mask_pixel_height(mask_set.masks[iid])
        if h < 1 or not m.any():
            continue
        expected = fy * priors.get(mask_set.categories.get(iid, 0)) / h
        terms.append(float(np.abs(d[m] - expected).mean()) / mean_depth)
    if not terms:
        return 0.0
    return float(np.mean(terms))


def total_loss(components, cfg: LossConfig | None = None) -> float:
    """Weighted sum of the five loss components.

    components may be a LossBreakdown or a 5-sequence (l_r, l_g, l_s, l_t,
    l_h); bidirectional components are expected to be averaged beforehand.
    """
    cfg = cfg or LossConfig()
    if isinstance(components, LossBreakdown):
        vals = np.array([components.l_r, components.l_g, components.l_s,
                         components.l_t, components.l_h])
    else:
        vals = np.asarray(components, dtype=np.float64).reshape(5)
    return float(cfg.weights() @ vals)


def make_breakdown(l_r, l_g, l_s, l_t, l_h, cfg: LossConfig,
                   n_valid_px=0.0, n_instances=0) -> LossBreakdown:
    bd = LossBreakdown(l_r=float(l_r), l_g=float(l_g), l_s=float(l_s),
                       l_t=float(l_t), l_h=float(l_h),
                       n_valid_px=float(n_valid_px), n_instances=int(n_instances))
    bd.total = total_loss(bd, cfg)
    return bd
