"""Procedural glyph classes: a cheap stand-in for Omniglot."""

from __future__ import annotations

import numpy as np

from .pool import ClassPool

_CURVE_POINTS = 24


def _prototype(rng, n_strokes):
    # quadratic Bezier control points inside the unit square
    return rng.uniform(0.15, 0.85, size=(n_strokes, 3, 2))


def _curve_points(ctrl):
    t = np.linspace(0.0, 1.0, _CURVE_POINTS)[:, None]
    p0, p1, p2 = ctrl[:, 0, None], ctrl[:, 1, None], ctrl[:, 2, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
    return pts.reshape(-1, 2)


def _jitter(ctrl, rng, amount):
    if amount <= 0:
        return ctrl
    angle = rng.normal(0.0, 0.25 * amount)
    scale = 1.0 + rng.normal(0.0, 0.1 * amount)
    shift = rng.normal(0.0, 0.06 * amount, size=2)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]]) * scale
    centred = ctrl - 0.5
    moved = centred @ rot.T + 0.5 + shift
    return moved + rng.normal(0.0, 0.03 * amount, size=ctrl.shape)


def _rasterize(points, size, width):
    coords = (np.arange(size) + 0.5) / size
    # squared distance is separable in rows and columns
    dr = (coords[:, None] - points[None, :, 0]) ** 2
    dc = (coords[:, None] - points[None, :, 1]) ** 2
    d2 = (dr[:, None, :] + dc[None, :, :]).min(axis=2)
    return np.exp(-d2 / (2.0 * width ** 2))


def synth_glyph_pool(n_classes, instances_per_class=20, image_size=28, noise=0.0, jitter=0.0,
                     rng=None, strokes=(2, 4), stroke_width=None) -> ClassPool:
    """Generate ``n_classes`` glyph classes of ``instances_per_class`` images.

    Each class is a handful of random Bezier strokes; instances apply a
    random similarity transform and control-point wobble scaled by
    ``jitter`` and additive Gaussian pixel noise of std ``noise``.  With both
    at zero every instance of a class is the same image.
    """
    rng = np.random.default_rng(rng)
    width = stroke_width if stroke_width is not None else 0.6 / image_size + 0.02
    images = np.empty((n_classes, instances_per_class, image_size, image_size), dtype=np.float32)
    for c in range(n_classes):
        proto = _prototype(rng, int(rng.integers(strokes[0], strokes[1] + 1)))
        for i in range(instances_per_class):
            img = _rasterize(_curve_points(_jitter(proto, rng, jitter)), image_size, width)
            if noise > 0:
                img = img + rng.normal(0.0, noise, size=img.shape)
            images[c, i] = np.clip(img, 0.0, 1.0)
    return ClassPool(images, "synthetic")
