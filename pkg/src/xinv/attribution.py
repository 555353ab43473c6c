"""Grad-CAM over the extractor's last convolutional block."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datapipe, model
from .autodiff import Graph, Tensor


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W) in [0, 1]
    image: np.ndarray  # (H, W) source image


def bilinear_upsample(v, out_h, out_w):
    """Align-corners bilinear interpolation of a 2-d grid; corner values are
    reproduced exactly."""
    v = np.asarray(v, dtype=np.float64)
    h, w = v.shape
    if h == 1 and w == 1:
        return np.full((out_h, out_w), v[0, 0])
    ys = np.linspace(0.0, h - 1, out_h) if h > 1 else np.zeros(out_h)
    xs = np.linspace(0.0, w - 1, out_w) if w > 1 else np.zeros(out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2) if h > 1 else np.zeros(out_h, int)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2) if w > 1 else np.zeros(out_w, int)
    wy = (ys - y0)[:, None] if h > 1 else np.zeros((out_h, 1))
    wx = (xs - x0)[None, :] if w > 1 else np.zeros((1, out_w))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = v[np.ix_(y0, x0)] * (1 - wx) + v[np.ix_(y0, x1)] * wx
    bot = v[np.ix_(y1, x0)] * (1 - wx) + v[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def grad_cam(params, image):
    """Gradient-weighted activation heatmap for the disease logit.

    The last conv block's activation maps are weighted by their spatially
    averaged logit gradients, summed over channels, rectified, upsampled to
    the image size, and max-normalized (an all-zero map stays all-zero).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    x = Tensor(image[None])  # 1,C,H,W
    with Graph() as g:
        feats, acts = model.extract(params, x, return_acts=True)
        logit = model.classify_logit(params, feats)
        ad.backward(g, logit)
    last = acts[-1]
    a = last.data[0]  # (C, h, w)
    grad = np.zeros_like(a) if last.grad is None else last.grad[0]
    weights = grad.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * a).sum(axis=0), 0.0)
    heat = bilinear_upsample(cam, image.shape[1], image.shape[2])
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    return Heatmap(values=heat, image=image[0])


def region_mass_fraction(heatmap, row_slice, col_slice):
    """Share of total heatmap mass inside a rectangular region (0 if the map
    is all-zero)."""
    total = heatmap.values.sum()
    if total == 0:
        return 0.0
    return float(heatmap.values[row_slice, col_slice].sum() / total)


def save_heatmap(heatmap, out_path):
    """Write heatmap PGM, a side-by-side composite (input | 50% overlay), and
    a CSV dump of the raw values."""
    out_path = Path(out_path)
    datapipe.encode_image(out_path, heatmap.values)
    overlay = 0.5 * heatmap.image + 0.5 * heatmap.values
    composite = np.concatenate([heatmap.image, overlay], axis=1)
    datapipe.encode_image(out_path.with_suffix(".composite.pgm"), composite)
    np.savetxt(out_path.with_suffix(".csv"), heatmap.values, delimiter=",", fmt="%.8f")
