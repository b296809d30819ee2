"""Paired augmented views of a target image and score-map alignment.

Geometry is restricted to integer-rect crops followed by align-corners
bilinear resizes, so alignment of the two views is exact for affine
patterns and matches the interpolation used inside the network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import _resize_axis_weights


@dataclass
class AugmentConfig:
    view_extent: tuple = (64, 64)
    global_scale: tuple = (0.7, 1.0)
    local_scale: tuple = (0.3, 0.8)  # local crop area as a ratio of the global view
    color_strength: tuple = (0.6, 1.4)
    hue_range: float = 0.1  # turns


@dataclass
class ColorParams:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0


@dataclass
class ViewPlan:
    global_crop: tuple  # (top, left, height, width) in source pixels
    local_crop: tuple  # (top, left, height, width) in rendered-view pixels
    local_on_first: bool
    color_params_1: ColorParams = field(default_factory=ColorParams)
    color_params_2: ColorParams = field(default_factory=ColorParams)
    seed: int = 0


def _resize_np(image, out_hw):
    """Align-corners bilinear resize of the trailing two axes (numpy arrays)."""
    h, w = image.shape[-2:]
    oh, ow = out_hw
    r0, r1, wr = _resize_axis_weights(h, oh)
    c0, c1, wc = _resize_axis_weights(w, ow)
    wr = wr.reshape(-1, 1)
    wc = wc.reshape(1, -1)
    top = image[..., r0, :][..., c0] * (1 - wc) + image[..., r0, :][..., c1] * wc
    bot = image[..., r1, :][..., c0] * (1 - wc) + image[..., r1, :][..., c1] * wc
    return top * (1 - wr) + bot * wr


def _hue_matrix(turns):
    """Rotation of RGB about the gray axis by ``turns`` of a full revolution."""
    theta = 2.0 * np.pi * turns
    c, s = np.cos(theta), np.sin(theta)
    one_third = 1.0 / 3.0
    sq = np.sqrt(1.0 / 3.0)
    m = np.full((3, 3), one_third * (1.0 - c))
    m += np.eye(3) * c
    m += np.array([[0, -sq, sq], [sq, 0, -sq], [-sq, sq, 0]]) * s
    return m


def apply_color(image, params: ColorParams):
    """Contrast, saturation, hue, then brightness; output clamped to [0, 1]."""
    out = (image - 0.5) * params.contrast + 0.5
    gray = out.mean(axis=0, keepdims=True)
    out = gray + params.saturation * (out - gray)
    out = np.einsum("ij,jhw->ihw", _hue_matrix(params.hue), out)
    out = out * params.brightness
    return np.clip(out, 0.0, 1.0)


def _sample_color(rng, cfg: AugmentConfig):
    lo, hi = cfg.color_strength
    return ColorParams(
        brightness=float(rng.uniform(lo, hi)),
        contrast=float(rng.uniform(lo, hi)),
        saturation=float(rng.uniform(lo, hi)),
        hue=float(rng.uniform(-cfg.hue_range, cfg.hue_range)),
    )


def _sample_rect(rng, extent, scale_range, label):
    h, w = extent
    lo, hi = scale_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"{label} crop-scale range {scale_range} outside (0, 1]")
    ratio = float(rng.uniform(lo, hi))
    side = np.sqrt(ratio)
    ch = max(2, int(round(side * h)))
    cw = max(2, int(round(side * w)))
    ch, cw = min(ch, h), min(cw, w)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return (top, left, ch, cw)


def sample_view_plan(rng_seed, image_extent, cfg: AugmentConfig = None) -> ViewPlan:
    """Deterministic plan: global crop in source coords, local crop in view coords."""
    cfg = cfg or AugmentConfig()
    h, w = image_extent
    min_side = int(np.ceil(np.sqrt(cfg.global_scale[0]) * min(h, w)))
    if min(h, w) < 2 or min_side < 2:
        raise ValueError(f"image extent {image_extent} too small for minimum crop")
    rng = np.random.default_rng(rng_seed)
    global_crop = _sample_rect(rng, (h, w), cfg.global_scale, "global")
    local_crop = _sample_rect(rng, cfg.view_extent, cfg.local_scale, "local")
    return ViewPlan(
        global_crop=global_crop,
        local_crop=local_crop,
        local_on_first=bool(rng.integers(0, 2)),
        color_params_1=_sample_color(rng, cfg),
        color_params_2=_sample_color(rng, cfg),
        seed=int(rng_seed),
    )


def _crop_np(image, rect):
    top, left, ch, cw = rect
    return image[..., top : top + ch, left : left + cw]


def render_views(x, plan: ViewPlan, cfg: AugmentConfig = None):
    """Render the two pixel-aligned views; both have the view extent of ``cfg``."""
    cfg = cfg or AugmentConfig()
    out_hw = cfg.view_extent
    gt, gl, gh, gw = plan.global_crop
    if gt + gh > x.shape[-2] or gl + gw > x.shape[-1]:
        raise ValueError(f"global crop {plan.global_crop} outside image {x.shape[-2:]}")
    global_view = _resize_np(_crop_np(x, plan.global_crop), out_hw)
    local_view = _resize_np(_crop_np(global_view, plan.local_crop), out_hw)
    if plan.local_on_first:
        v1, v2 = local_view, global_view
    else:
        v1, v2 = global_view, local_view
    return apply_color(v1, plan.color_params_1), apply_color(v2, plan.color_params_2)


def align_scores(s1, s2, plan: ViewPlan):
    """Pixel-align two K x H x W score maps over the local-crop region.

    The view that kept the global geometry is cropped to the local rect
    and resized back; the locally cropped view passes through. Works on
    autodiff tensors so the consistency loss can differentiate through it.
    """
    s1, s2 = ad.as_tensor(s1), ad.as_tensor(s2)
    if s1.shape != s2.shape:
        raise ValueError(f"score map shapes differ: {s1.shape} vs {s2.shape}")
    out_hw = s1.shape[-2:]
    top, left, ch, cw = plan.local_crop
    if top + ch > out_hw[0] or left + cw > out_hw[1]:
        raise ValueError(f"local crop {plan.local_crop} inconsistent with maps {out_hw}")

    def refocus(s):
        if (ch, cw) == tuple(out_hw) and (top, left) == (0, 0):
            return s
        return ad.bilinear_resize(ad.crop2d(s, top, left, ch, cw), out_hw)

    if plan.local_on_first:
        return s1, refocus(s2)
    return refocus(s1), s2
