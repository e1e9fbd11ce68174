"""Differentiable bilinear resampling of an image by a per-pixel flow field.

Coordinates: ``u`` indexes rows and ``v`` indexes columns, both zero-based.
A flow field has shape (H, W, 2) holding ``(du, dv)`` in pixel units; the
output pixel at ``(u, v)`` reads the input at ``(u + du, v + dv)``, clamped to
the image rectangle. All channels share one flow field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcheck import numerical_gradient, relative_error
from .tensor import ShapeError, Tensor, as_tensor, make_op

__all__ = [
    "bilinear_warp",
    "warp_image",
    "warp_gradient_check",
    "GradientReport",
    "zero_flow",
    "grid_scale",
    "to_grid_units",
]


def zero_flow(height, width):
    return np.zeros((height, width, 2))


def grid_scale(height, width):
    """Per-axis factor from pixels to normalised coordinates spanning [-1, 1].

    One pixel step is ``2 / (size - 1)``; a size-1 axis keeps pixel units.
    """
    return np.array([2.0 / (height - 1) if height > 1 else 1.0, 2.0 / (width - 1) if width > 1 else 1.0])


def to_grid_units(flow):
    """A pixel-unit (H, W, 2) flow expressed in normalised grid coordinates."""
    flow = np.asarray(flow, dtype=np.float64)
    return flow * grid_scale(*flow.shape[:2])


def _check(x, flow):
    if flow.ndim != 3 or flow.shape[2] != 2 or flow.shape[:2] != x.shape[:2]:
        raise ShapeError("bilinear_warp", x.shape, flow.shape)
    if not np.all(np.isfinite(flow.data)):
        raise ValueError("bilinear_warp: flow field contains non-finite values")


def _axis_terms(base, delta, size):
    """Clamped sample coordinate, lower neighbour index and both weights."""
    pos = base + delta
    inside = (pos >= 0) & (pos <= size - 1)
    pos = np.clip(pos, 0, size - 1)
    lo = np.clip(np.floor(pos), 0, max(size - 2, 0)).astype(np.intp)
    hi = np.minimum(lo + 1, size - 1)
    w_hi = pos - lo
    w_lo = 1.0 - w_hi
    if size == 1:
        w_lo, w_hi = np.ones_like(pos), np.zeros_like(pos)
    return lo, hi, w_lo, w_hi, inside


def bilinear_warp(x, flow):
    """Warp ``x`` (H,W) or (H,W,C) by ``flow`` (H,W,2); differentiable in both.

    Each output value is the convex combination of the four integer neighbours
    of its source location, weighted by ``(1-|du'|)(1-|dv'|)``.
    """
    x, flow = as_tensor(x), as_tensor(flow)
    _check(x, flow)
    squeeze = x.ndim == 2
    img = x.data[..., None] if squeeze else x.data
    h, w, _ = img.shape

    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    u0, u1, wu0, wu1, in_u = _axis_terms(rows, flow.data[..., 0], h)
    v0, v1, wv0, wv1, in_v = _axis_terms(cols, flow.data[..., 1], w)

    q00, q01 = img[u0, v0], img[u0, v1]
    q10, q11 = img[u1, v0], img[u1, v1]
    a00 = (wu0 * wv0)[..., None]
    a01 = (wu0 * wv1)[..., None]
    a10 = (wu1 * wv0)[..., None]
    a11 = (wu1 * wv1)[..., None]
    out = q00 * a00 + q01 * a01 + q10 * a10 + q11 * a11

    def backward(g):
        g = g[..., None] if squeeze else g
        gx = None
        if x.requires_grad:
            gx = np.zeros_like(img)
            for ui, vi, a in ((u0, v0, a00), (u0, v1, a01), (u1, v0, a10), (u1, v1, a11)):
                np.add.at(gx, (ui, vi), g * a)
            if squeeze:
                gx = gx[..., 0]
        gf = None
        if flow.requires_grad:
            # d w_hi / d pos = +1, d w_lo / d pos = -1 (right-continuous at integers)
            d_u = ((q10 - q00) * wv0[..., None] + (q11 - q01) * wv1[..., None]) * g
            d_v = ((q01 - q00) * wu0[..., None] + (q11 - q10) * wu1[..., None]) * g
            gf = np.stack([d_u.sum(-1) * in_u, d_v.sum(-1) * in_v], axis=-1)
            if h == 1:
                gf[..., 0] = 0.0
            if w == 1:
                gf[..., 1] = 0.0
        return gx, gf

    return make_op(out[..., 0] if squeeze else out, (x, flow), backward, "bilinear_warp")


def warp_image(x, flow):
    """Plain-array convenience wrapper around :func:`bilinear_warp`."""
    return bilinear_warp(np.asarray(x, dtype=np.float64), np.asarray(flow, dtype=np.float64)).data


@dataclass
class GradientReport:
    passed: bool
    max_rel_err: float
    analytic: np.ndarray
    numeric: np.ndarray


def warp_gradient_check(x, flow, h=1e-3, tol=1e-4, seed=0):
    """Compare d(sum(w * warp(x, f)))/df against central differences.

    ``w`` is a fixed random weighting so every output pixel contributes. The
    flow should stay at least ``h`` away from integer grid lines, where the
    interpolant has kinks.
    """
    x = np.asarray(x, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    weights = np.random.default_rng(seed).standard_normal(x.shape)

    def value(f):
        return float(np.sum(weights * warp_image(x, f)))

    ft = Tensor(flow, requires_grad=True)
    (bilinear_warp(x, ft) * weights).sum().backward()
    analytic = ft.grad

    numeric = numerical_gradient(value, flow, h)
    err = relative_error(analytic, numeric)
    return GradientReport(err <= tol, err, analytic, numeric)
