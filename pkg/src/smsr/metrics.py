"""Image quality metrics, mask-driven FLOP accounting and wall-clock benchmarks.

FLOPs follow the SR convention of two per multiply-add.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from threadpoolctl import threadpool_limits

from . import tensor as T
from .model import MaskSet, SmsrModel, forward_infer
from .sparse import MacCounter, layer_macs

HD_720P = (720, 1280)


def _prepare(img, scale: int) -> np.ndarray:
    """Border-cropped luminance plane (float64) of a 0-255 image."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim == 3:
        a = a[None]
    if a.shape[1] == 3:
        a = T.rgb_to_luminance(a)
    elif a.shape[1] != 1:
        raise ValueError(f"expected 1 or 3 channels, got {a.shape[1]}")
    y = a[0, 0]
    if scale > 0:
        y = y[scale:-scale, scale:-scale]
    return y


def psnr(sr, hr, scale: int = 0) -> float:
    """Luminance PSNR in dB with a ``scale``-pixel border crop; ``inf`` when identical."""
    if np.shape(sr) != np.shape(hr):
        raise ValueError(f"shape mismatch: {np.shape(sr)} vs {np.shape(hr)}")
    a, b = _prepare(sr, scale), _prepare(hr, scale)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    g = win[k // 2] / win[k // 2].sum()  # separable 1-D factor
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(sr, hr, scale: int = 0, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 255.0) -> float:
    """Mean SSIM over all fully contained Gaussian windows of the luminance plane."""
    if np.shape(sr) != np.shape(hr):
        raise ValueError(f"shape mismatch: {np.shape(sr)} vs {np.shape(hr)}")
    a, b = _prepare(sr, scale), _prepare(hr, scale)
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    win = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    s_aa = _filter_valid(a * a, win) - mu_a ** 2
    s_bb = _filter_valid(b * b, win) - mu_b ** 2
    s_ab = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))


# -- sparsity / FLOP reports ------------------------------------------------

@dataclass
class SparsityReport:
    etas: np.ndarray              # (K, L) activated-location ratios
    n_imp: list = field(default_factory=list)

    @classmethod
    def from_result(cls, res) -> "SparsityReport":
        return cls(res.eta_values, [int(np.asarray(m).sum()) for m in res.spatial_masks])

    @property
    def per_smm(self) -> np.ndarray:
        """Sparsity of each SMM, one minus its mean eta."""
        return 1.0 - self.etas.mean(axis=1)

    @property
    def aggregate(self) -> float:
        return float(1.0 - self.etas.mean())

    def rows(self) -> list[dict]:
        out = []
        for k in range(self.etas.shape[0]):
            for l in range(self.etas.shape[1]):
                out.append({"smm": k, "layer": l, "eta": float(self.etas[k, l]),
                            "sparsity": float(1 - self.etas[k, l]),
                            "n_imp": self.n_imp[k] if self.n_imp else ""})
        return out


@dataclass
class FlopReport:
    layers: list[tuple[str, int]]
    dense_total: int
    input_size: tuple[int, int]

    @property
    def total(self) -> int:
        return sum(f for _, f in self.layers)

    @property
    def ratio(self) -> float:
        return self.total / self.dense_total if self.dense_total else 1.0

    def by_prefix(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for name, f in self.layers:
            out[name] = out.get(name, 0) + f
        return out


def _dense_layers(model_dims, h: int, w: int) -> dict[str, int]:
    scale, n_blocks, n_layers, c = model_dims
    hw = h * w
    mid = max(c // 4, 1)
    h2, w2 = T.conv_output_size(h, 3, 2, 1), T.conv_output_size(w, 3, 2, 1)
    return {
        "head": 9 * 3 * c * hw,
        "mask": 9 * (c * mid * h2 * w2 + mid * mid * h2 * w2 + mid * 2 * hw),
        "fuse": n_layers * c * c * hw,
        "body": n_blocks * c * c * hw + 9 * c * c * hw,
        "tail": 9 * c * 3 * scale * scale * hw,
    }


def _dims(model) -> tuple[int, int, int, int]:
    if isinstance(model, SmsrModel):
        return model.scale, model.n_blocks, model.n_layers, model.channels
    return tuple(model)


def count_flops(model, masks: Optional[MaskSet], input_size: tuple[int, int]) -> FlopReport:
    """Analytic FLOPs of one inference pass on an LR input of ``input_size``.

    ``masks=None`` gives the all-dense count.  Mask prediction (the hourglass
    convolutions) is charged to every SMM; binary channel masks are static
    after training and cost nothing at inference.
    """
    scale, n_blocks, n_layers, c = _dims(model)
    h, w = input_size
    hw = h * w
    dense = _dense_layers((scale, n_blocks, n_layers, c), h, w)
    layers = [("head", 2 * dense["head"])]
    dense_total = 2 * (dense["head"] + dense["body"] + dense["tail"])
    for k in range(n_blocks):
        layers.append((f"smm{k}.mask", 2 * dense["mask"]))
        dense_total += 2 * (dense["mask"] + dense["fuse"])
        d_in = c
        for l in range(n_layers):
            dense_total += 2 * layer_macs(3, c, 0, c, 0, hw, 0)
            if masks is None:
                layers.append((f"smm{k}.conv{l}", 2 * layer_macs(3, c, 0, c, 0, hw, 0)))
                continue
            d_out = int(np.sum(masks.channel[k][l]))
            macs = layer_macs(3, d_in, c - d_in, d_out, c - d_out, hw, masks.n_imp(k))
            layers.append((f"smm{k}.conv{l}", 2 * macs))
            d_in = d_out
        layers.append((f"smm{k}.fuse", 2 * dense["fuse"]))
    layers.append(("body", 2 * dense["body"]))
    layers.append(("tail", 2 * dense["tail"]))
    return FlopReport(layers, dense_total, (h, w))


def hr_reference_size(scale: int, hr_size: tuple[int, int] = HD_720P) -> tuple[int, int]:
    """LR input size whose SR output is the reference HR resolution (720p)."""
    return hr_size[0] // scale, hr_size[1] // scale


def forced_masks(model, size: tuple[int, int], sparsity: float, dense_fraction: float = 0.25,
                 rng: Optional[np.random.Generator] = None) -> MaskSet:
    """Synthetic binary masks hitting a target aggregate sparsity.

    Every layer keeps ``round(dense_fraction * C)`` dense channels; the
    spatial masks are thresholded smooth noise (blob-shaped like learned
    masks) with the density that makes ``1 - mean(eta)`` equal ``sparsity``.
    """
    _, n_blocks, n_layers, c = _dims(model)
    rng = rng if rng is not None else np.random.default_rng(0)
    n_dense = int(round(dense_fraction * c))
    d = n_dense / c
    eta = 1.0 - sparsity
    if eta < d - 1e-12:
        raise ValueError(f"sparsity {sparsity} unreachable with {n_dense}/{c} dense channels")
    p = 0.0 if d >= 1 else (eta - d) / (1 - d)
    h, w = size
    spatial, channel = [], []
    for _ in range(n_blocks):
        noise = T.bicubic_resize(rng.standard_normal((1, 1, h // 8 + 2, w // 8 + 2)), 8.0)
        field_ = noise[0, 0, :h, :w] + 1e-6 * rng.standard_normal((h, w))
        n_imp = int(round(p * h * w))
        m = np.zeros(h * w, dtype=np.float32)
        if n_imp:
            m[np.argsort(field_.ravel())[-n_imp:]] = 1
        spatial.append(m.reshape(h, w))
        row = []
        for _ in range(n_layers):
            cm = np.zeros(c, dtype=np.float32)
            cm[rng.choice(c, n_dense, replace=False)] = 1
            row.append(cm)
        channel.append(row)
    return MaskSet(spatial, channel)


# -- wall clock --------------------------------------------------------------

@dataclass
class BenchResult:
    mode: str
    times_ms: list[float]
    macs: int
    output: np.ndarray = field(repr=False, default=None)

    @property
    def median_ms(self) -> float:
        return statistics.median(self.times_ms)


def bench(model: SmsrModel, image_size: tuple[int, int], mode: str = "sparse", threads: int = 1,
          runs: int = 10, warmup: int = 3, masks: Optional[MaskSet] = None,
          image: Optional[np.ndarray] = None, seed: int = 0) -> BenchResult:
    """Median wall-clock of ``runs`` inference passes after ``warmup`` untimed ones.

    ``mode="dense"`` runs the maskless network on the same weights and the
    same im2col convolution; ``mode="sparse"`` the four-branch sparse path.
    """
    if mode not in ("dense", "sparse"):
        raise ValueError(f"mode must be 'dense' or 'sparse', got {mode!r}")
    if image is None:
        image = np.random.default_rng(seed).random((3, *image_size)).astype(np.float32)
    dense = mode == "dense"
    counter = MacCounter()
    times = []
    out = None
    with threadpool_limits(limits=threads):
        forward_infer(model, image, masks=masks, dense=dense, counter=counter)
        for _ in range(warmup - 1):
            forward_infer(model, image, masks=masks, dense=dense)
        for _ in range(runs):
            t0 = time.perf_counter()
            out = forward_infer(model, image, masks=masks, dense=dense).sr
            times.append((time.perf_counter() - t0) * 1e3)
    return BenchResult(mode, times, counter.macs, out)


def per_smm_sparsity_table(results: dict[int, Sequence[float]]) -> list[dict]:
    """Rows ``{scale, smm, sparsity}`` for a Fig.-9 style comparison across scales."""
    rows = []
    for scale, values in sorted(results.items()):
        for k, v in enumerate(values):
            rows.append({"scale": scale, "smm": k, "sparsity": float(v)})
    return rows
