"""Spatial and channel mask generation.

Softened masks come from a two-way Gumbel softmax and stay differentiable;
binary masks come from an argmax over the same two logits.  Mask convention
throughout: ``1`` keeps a location/channel dense, ``0`` marks it sparse.
Ties in the argmax resolve to ``1``.
"""

from __future__ import annotations

from typing import Mapping, Optional

import numpy as np

from . import autodiff as ad

SOFT = "soft"
BINARY = "binary"

T_TEMP = 500
T_WARM = 50
TAU_FLOOR = 0.4
_U_EPS = 1e-12


def gumbel_noise(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """i.i.d. Gumbel(0, 1) samples, ``-log(-log(u))`` with ``u`` kept off {0, 1}."""
    u = np.clip(rng.random(shape), _U_EPS, 1 - _U_EPS)
    return (-np.log(-np.log(u))).astype(dtype)


def gumbel_softmax(logits, noise: Optional[np.ndarray], tau: float, axis: int = 0):
    """Component 1 of ``softmax((logits + noise) / tau)`` over a size-2 axis.

    The returned array keeps ``axis`` with length 1.  ``noise=None`` gives the
    noise-free relaxation.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if ad.value(logits).shape[axis] != 2:
        raise ValueError(f"logits need size 2 along axis {axis}, got {ad.value(logits).shape}")
    z = logits if noise is None else ad.add(logits, noise)
    s = ad.softmax(ad.mul(z, 1.0 / tau), axis=axis)
    index = [slice(None)] * ad.value(s).ndim
    index[axis] = slice(1, 2)
    return ad.getitem(s, tuple(index))


def argmax_mask(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    """Binary decision ``logit[1] >= logit[0]`` along ``axis`` (kept, length 1)."""
    lv = ad.value(logits)
    l0 = np.take(lv, [0], axis=axis)
    l1 = np.take(lv, [1], axis=axis)
    return (l1 >= l0).astype(lv.dtype)


def hourglass(x, p: Mapping, prefix: str = ""):
    """Spatial-mask predictor: C features -> 2 logits per pixel, same H x W.

    stride-2 3x3 conv (C -> C/4), relu, 3x3 conv, relu, nearest x2 upsample
    cropped back to the input size, 3x3 conv to two channels.
    """
    h, w = ad.value(x).shape[2:]
    y = ad.relu(ad.conv2d(x, p[prefix + "conv1.weight"], p[prefix + "conv1.bias"],
                          stride=2, padding=1))
    y = ad.relu(ad.conv2d(y, p[prefix + "conv2.weight"], p[prefix + "conv2.bias"], padding=1))
    y = ad.upsample_nearest(y, 2, size=(h, w))
    return ad.conv2d(y, p[prefix + "conv3.weight"], p[prefix + "conv3.bias"], padding=1)


def hourglass_shapes(channels: int) -> dict[str, tuple]:
    mid = max(channels // 4, 1)
    return {
        "conv1.weight": (mid, channels, 3, 3), "conv1.bias": (mid,),
        "conv2.weight": (mid, mid, 3, 3), "conv2.bias": (mid,),
        "conv3.weight": (2, mid, 3, 3), "conv3.bias": (2,),
    }


def spatial_mask(features, p: Mapping, prefix: str, tau: float, mode: str = SOFT,
                 rng: Optional[np.random.Generator] = None):
    """Per-sample spatial mask of shape ``(n, 1, h, w)``.

    In soft mode Gumbel noise is drawn from ``rng`` (omitted when ``rng`` is
    None); binary mode ignores noise and takes the argmax.
    """
    logits = hourglass(features, p, prefix)
    if mode == BINARY:
        return argmax_mask(logits, axis=1)
    noise = None
    if rng is not None:
        noise = gumbel_noise(ad.value(logits).shape, rng, ad.value(logits).dtype)
    return gumbel_softmax(logits, noise, tau, axis=1)


def channel_mask(logits, tau: float, mode: str = SOFT,
                 rng: Optional[np.random.Generator] = None):
    """Channel mask of shape ``(1, c, 1, 1)`` from ``(2, c)`` logits."""
    c = ad.value(logits).shape[1]
    if mode == BINARY:
        return argmax_mask(logits, axis=0).reshape(1, c, 1, 1)
    noise = None
    if rng is not None:
        noise = gumbel_noise(ad.value(logits).shape, rng, ad.value(logits).dtype)
    return ad.reshape(gumbel_softmax(logits, noise, tau, axis=0), (1, c, 1, 1))


def sparsity_term(m_ch, m_spa):
    """Ratio of activated output locations of one layer.

    Uses the factorised form ``mean(M_spa) * (1 - mean(M_ch)) + mean(M_ch)``,
    which equals the per-location sum because the summand is separable.
    A batch of spatial masks is averaged over samples.
    """
    a = ad.mean(m_spa)
    b = ad.mean(m_ch)
    return ad.add(ad.mul(a, ad.sub(1.0, b)), b)


def reg_loss(etas):
    """Mean of all per-layer sparsity terms."""
    etas = list(etas)
    if not etas:
        raise ValueError("reg_loss needs at least one sparsity term")
    total = etas[0]
    for e in etas[1:]:
        total = ad.add(total, e)
    return ad.mul(total, 1.0 / len(etas))


def temperature_schedule(epoch: float, t_temp: float = T_TEMP, floor: float = TAU_FLOOR) -> float:
    return max(floor, 1.0 - epoch / t_temp)


def lambda_schedule(epoch: float, lambda0: float, t_warm: float = T_WARM) -> float:
    return lambda0 * min(epoch / t_warm, 1.0)


def gradient_magnitude(image: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude of a 2-D image, edges replicated."""
    img = np.asarray(image, dtype=np.float64)
    p = np.pad(img, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2
    return np.hypot(gx, gy)


def heuristic_spatial_mask(image: np.ndarray, alpha: float) -> np.ndarray:
    """Fixed binary mask marking pixels whose gradient magnitude exceeds ``alpha``.

    ``image`` is a 2-D luminance (or single-channel) array on the 0-255 scale.
    """
    return (gradient_magnitude(image) > alpha).astype(np.float32)


def feature_sparsity_probe(features: np.ndarray) -> np.ndarray:
    """Per-channel ratio of zeros; ``features`` is ``(c, h, w)`` or ``(n, c, h, w)``."""
    f = np.asarray(features)
    if f.ndim == 3:
        f = f[None]
    return (f == 0).mean(axis=(0, 2, 3))


def saturation(mask) -> float:
    """Mean distance of a mask from 0.5 (0.5 means fully binary)."""
    return float(np.abs(np.asarray(ad.value(mask), dtype=np.float64) - 0.5).mean())
