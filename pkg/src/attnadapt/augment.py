"""Per-sample view construction: gentle base views, aggressive mixed-chain
views, and attention-guided pixelwise blending between the two.

All randomness flows through seeds derived from a master seed by the
documented split function, so a ViewSet reconstructs bitwise from
(sample, master seed) regardless of generation order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .attribution import AttentionMap, rollout_map
from .model import Model
from .tensor import ShapeMismatchError
from .util import bilinear_resize, box_blur3, derive_seed, rotate_image, translate_image, write_pgm

log = logging.getLogger(__name__)


@dataclass
class MaskPair:
    """Binary high/low-attention pixel masks from one attribution map."""

    high: np.ndarray
    low: np.ndarray
    threshold: float
    ratio: float


@dataclass
class ViewSet:
    """All views of one test sample; index 0 is the untouched original."""

    base: list[np.ndarray] = field(default_factory=list)
    aggressive: list[np.ndarray] = field(default_factory=list)
    mixed: list[np.ndarray] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    maps: list[AttentionMap | None] = field(default_factory=list)

    def __len__(self):
        return len(self.mixed)


def apply_base_view(image: np.ndarray, flip: bool, crop_scale: float) -> np.ndarray:
    """Deterministic core of base_view: optional horizontal flip, then a
    center crop at `crop_scale` resized back by bilinear interpolation.
    crop_scale 1.0 with no flip reproduces the input bitwise."""
    h, w = image.shape
    out = image[:, ::-1] if flip else image
    ch = max(1, round(h * crop_scale))
    cw = max(1, round(w * crop_scale))
    r0 = (h - ch) // 2
    c0 = (w - cw) // 2
    out = bilinear_resize(np.ascontiguousarray(out[r0:r0 + ch, c0:c0 + cw]), h, w)
    return np.clip(out, 0.0, 1.0)


def base_view(image: np.ndarray, seed: int) -> np.ndarray:
    """Random flip (p=0.5) plus a random-scale center crop in [0.7, 1.0]."""
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < 0.5)
    crop_scale = float(rng.uniform(0.7, 1.0))
    return apply_base_view(image, flip, crop_scale)


# the aggressive op pool: small label-preserving grayscale edits
def _op_brightness(img, rng):
    return np.clip(img + rng.uniform(-0.3, 0.3), 0.0, 1.0)


def _op_contrast(img, rng):
    m = img.mean()
    return np.clip((img - m) * rng.uniform(0.5, 1.5) + m, 0.0, 1.0)


def _op_posterize(img, rng):
    levels = int(rng.integers(3, 7))
    return np.round(img * (levels - 1)) / (levels - 1)


def _op_rotate(img, rng):
    return np.clip(rotate_image(img, rng.uniform(-15.0, 15.0)), 0.0, 1.0)


def _op_translate(img, rng):
    dy, dx = int(rng.integers(-3, 4)), int(rng.integers(-3, 4))
    return translate_image(img, dy, dx)


def _op_blur(img, rng):
    return box_blur3(img)


_AGGRESSIVE_OPS = [_op_brightness, _op_contrast, _op_posterize,
                   _op_rotate, _op_translate, _op_blur]


def apply_aggressive_view(image: np.ndarray, rng: np.random.Generator,
                          mix_weight: float | None = None) -> np.ndarray:
    """Mixed-chain aggressive augmentation: three chains of one to three ops,
    Dirichlet-combined, then blended with the input by a Beta(1,1) draw
    (overridable for the identity case)."""
    weights = rng.dirichlet(np.ones(3))
    mix = np.zeros_like(image)
    for k in range(3):
        out = image
        for _ in range(int(rng.integers(1, 4))):
            op = _AGGRESSIVE_OPS[int(rng.integers(len(_AGGRESSIVE_OPS)))]
            out = op(out, rng)
        mix += weights[k] * out
    m = float(rng.beta(1.0, 1.0)) if mix_weight is None else float(mix_weight)
    return np.clip((1.0 - m) * image + m * mix, 0.0, 1.0)


def aggressive_view(image: np.ndarray, seed: int) -> np.ndarray:
    return apply_aggressive_view(image, np.random.default_rng(seed))


def upsample_nearest(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Blockwise nearest-neighbor upsampling of a G x G grid to pixel size."""
    gh, gw = grid.shape
    if out_h % gh or out_w % gw:
        raise ShapeMismatchError("upsample_nearest", grid.shape, (out_h, out_w),
                                 detail="pixel size must be a multiple of the grid")
    return np.repeat(np.repeat(grid, out_h // gh, axis=0), out_w // gw, axis=1)


def attention_masks(amap: AttentionMap, ratio: float, image_hw: tuple[int, int]) -> MaskPair:
    """Split pixels into high/low attention by the top-`ratio` threshold.

    The threshold is the J-th largest upsampled value with J = ceil(r*H*W);
    ties at the threshold all land in the high mask, so the high count is at
    least J. An all-equal map degenerates to an all-high mask (logged).
    """
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"attention_masks: ratio must be in (0, 1), got {ratio}")
    h, w = image_hw
    up = upsample_nearest(amap.grid, h, w)
    j = int(np.ceil(ratio * h * w))
    threshold = float(np.sort(up.ravel())[::-1][j - 1])
    high = (up >= threshold).astype(np.float64)
    if high.all():
        log.warning("attention_masks: constant map, every pixel is high-attention")
    return MaskPair(high=high, low=1.0 - high, threshold=threshold, ratio=ratio)


def mix_views(base: np.ndarray, aggressive: np.ndarray, masks: MaskPair,
              m_high: float, m_low: float) -> np.ndarray:
    """Blend aggressive content into the base view with per-region strength:
    lam = m_high on high-attention pixels, m_low elsewhere."""
    if not (0.0 <= m_high <= 1.0 and 0.0 <= m_low <= 1.0):
        raise ValueError("mix_views: mixing strengths must lie in [0, 1]")
    if base.shape != aggressive.shape or base.shape != masks.high.shape:
        raise ShapeMismatchError("mix_views", base.shape, aggressive.shape)
    lam = masks.high * m_high + masks.low * m_low
    out = (1.0 - lam) * base + lam * aggressive
    # guard the convexity contract against last-ulp rounding
    lo = np.minimum(base, aggressive)
    hi = np.maximum(base, aggressive)
    return np.minimum(np.maximum(out, lo), hi)


def build_viewset(image: np.ndarray, model: Model, n_views: int, ratio: float,
                  m_high: float, m_low: float, master_seed: int, *,
                  guided: bool = True, variant: str = "refined",
                  swap_mix_strengths: bool = False, normalize_rows: bool = True,
                  P: np.ndarray | None = None) -> ViewSet:
    """Build the N+1 views of one sample (index 0 is the original).

    With guidance on, each view's mixing mask comes from the attribution map
    of its own base view under the given (default) prompts. With guidance
    off, the mixed view is simply the aggressive view. `swap_mix_strengths`
    exchanges the two strengths to probe the protective reading.
    """
    if n_views < 1:
        raise ValueError("build_viewset: need at least one augmented view")
    hi, lo = (m_low, m_high) if swap_mix_strengths else (m_high, m_low)
    vs = ViewSet()
    vs.base.append(image.copy())
    vs.aggressive.append(image.copy())
    vs.mixed.append(image.copy())
    vs.seeds.append(int(master_seed))
    vs.maps.append(None)
    for i in range(1, n_views + 1):
        b_seed = derive_seed(master_seed, "base", i)
        a_seed = derive_seed(master_seed, "aggressive", i)
        b = base_view(image, b_seed)
        x_agg = aggressive_view(b, a_seed)
        amap = None
        if guided:
            amap = rollout_map(model, b, variant=variant, P=P,
                               normalize_rows=normalize_rows, view_id=i)
            masks = attention_masks(amap, ratio, image.shape)
            mixed = mix_views(b, x_agg, masks, hi, lo)
        else:
            mixed = x_agg
        vs.base.append(b)
        vs.aggressive.append(x_agg)
        vs.mixed.append(mixed)
        vs.seeds.append(b_seed)
        vs.maps.append(amap)
    return vs


def dump_contact_sheet(vs: ViewSet, path) -> None:
    """All mixed views of a sample tiled into one PGM for eyeballing."""
    n = len(vs.mixed)
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    h, w = vs.mixed[0].shape
    sheet = np.ones((rows * (h + 2), cols * (w + 2)))
    for i, img in enumerate(vs.mixed):
        r, c = divmod(i, cols)
        sheet[r * (h + 2):r * (h + 2) + h, c * (w + 2):c * (w + 2) + w] = img
    write_pgm(path, sheet)
