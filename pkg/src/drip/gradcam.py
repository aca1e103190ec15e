"""Grad-CAM heatmaps and DRIP scores.

A score is the mean, at input resolution, of the rectified Grad-CAM map for
one class. There is deliberately no per-image normalisation: scores are
compared across images, so their magnitude has to survive.
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import RejectedInputError
from .network import _backward, _check_single, _run, tap_gradients


@dataclass(frozen=True)
class ChannelWeights:
    weights: np.ndarray
    z: int  # elements per channel, H_feat * W_feat


@dataclass(frozen=True)
class HeatMap:
    values: np.ndarray  # (height, width), non-negative

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class DripScore:
    value: float
    class_index: int


def channel_weights(gradients):
    """Global-average-pool each gradient channel: ``(K, H, W) -> K`` weights."""
    g = np.asarray(gradients, dtype=np.float64)
    if g.ndim != 3:
        raise RejectedInputError(f"gradients must be (K, H, W), got shape {g.shape}")
    z = g.shape[1] * g.shape[2]
    return ChannelWeights(g.reshape(g.shape[0], -1).sum(axis=1) / z, z)


def raw_heatmap(weights, feature_maps):
    """Channel-weighted sum of the feature maps; may be negative."""
    w = weights.weights if isinstance(weights, ChannelWeights) else np.asarray(weights, dtype=np.float64)
    a = np.asarray(feature_maps, dtype=np.float64)
    if a.ndim != 3 or w.shape != (a.shape[0],):
        raise RejectedInputError(f"{w.shape[0] if w.ndim else 0} weights for feature maps of shape {a.shape}")
    out = np.zeros(a.shape[1:])
    for k in range(a.shape[0]):
        out += w[k] * a[k]
    return out


def rectify(raw):
    return np.maximum(np.asarray(raw, dtype=np.float64), 0.0)


def _sample_positions(src, dst):
    d = np.arange(dst, dtype=np.float64)
    s = (d + 0.5) * (src / dst) - 0.5
    s = np.clip(s, 0.0, src - 1)
    lo = np.floor(s).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, s - lo


def upsample(rectified, width, height):
    """Bilinear resize with half-pixel centres and clamped edges.

    Each lerp is written ``a + f * (b - a)`` so constant regions stay exactly
    constant and non-negative inputs stay non-negative.
    """
    g = np.asarray(rectified, dtype=np.float64)
    if g.ndim != 2:
        raise RejectedInputError(f"expected a 2D grid, got shape {g.shape}")
    h, w = g.shape
    if width < w or height < h:
        raise RejectedInputError(f"target {width}x{height} smaller than source {w}x{h}")
    y0, y1, fy = _sample_positions(h, height)
    x0, x1, fx = _sample_positions(w, width)
    top_l, top_r = g[y0][:, x0], g[y0][:, x1]
    bot_l, bot_r = g[y1][:, x0], g[y1][:, x1]
    top = top_l + fx * (top_r - top_l)
    bottom = bot_l + fx * (bot_r - bot_l)
    return HeatMap(top + fy[:, None] * (bottom - top))


def grid_mean(values):
    """Mean that is exact for constant grids: shift by the first element, then fsum."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise RejectedInputError("mean of an empty grid")
    anchor = v[0]
    return float(anchor + math.fsum(v - anchor) / v.size)


def heatmap_from_maps(feature_maps, gradients, width, height):
    """Grad-CAM steps after differentiation: pool, combine, rectify, resize."""
    weights = channel_weights(gradients)
    return upsample(rectify(raw_heatmap(weights, feature_maps)), width, height)


def compute_drips(model, input, class_index):
    """DRIP score and heatmap of ``input`` for ``class_index`` (pre-softmax logit)."""
    spec = model.spec
    x = np.asarray(input, dtype=np.float64)
    if x.shape != spec.input_shape:
        raise RejectedInputError(f"input shape {x.shape} != {spec.input_shape}")
    _, maps, grads = tap_gradients(model, x[None], [class_index])
    return _score(maps[0], grads[0], class_index, spec.input_shape)


def score_predicted(model, input):
    """Predict the class, then score against it. Returns ``(class, DripScore, HeatMap)``.

    Uses a single forward pass; prediction is argmax of the logits with ties
    going to the lowest index.
    """
    spec = model.spec
    x = np.asarray(input, dtype=np.float64)
    if x.shape != spec.input_shape:
        raise RejectedInputError(f"input shape {x.shape} != {spec.input_shape}")
    xb = _check_single(spec, x)
    logits, maps, caches = _run(spec, model.parameters, xb)
    predicted = int(np.argmax(logits[0]))
    seed = np.zeros_like(logits)
    seed[0, predicted] = 1.0
    grads, _ = _backward(spec, model.parameters, caches, seed, stop=spec.tap)
    score, heat = _score(maps[0], grads[0], predicted, spec.input_shape)
    return predicted, score, heat


def _score(maps, grads, class_index, input_shape):
    _, height, width = input_shape
    heat = heatmap_from_maps(maps, grads, width, height)
    return DripScore(grid_mean(heat.values), int(class_index)), heat


def save_heatmap_csv(heatmap, path):
    np.savetxt(path, heatmap.values, delimiter=",", fmt="%.17g")


def load_heatmap_csv(path):
    return HeatMap(np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64)))
