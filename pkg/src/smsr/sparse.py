"""Sparse mask convolution in its two formulations.

Training runs a dense convolution and multiplies the result by the masks so
that gradients reach every location.  Inference splits the kernel into four
sub-kernels by the input/output channel masks and computes everything except
the dense-to-dense branch only at important pixels, with a gathered im2col.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import tensor as T


class MacCounter:
    """Tallies multiply-adds issued by the GEMMs it is handed to."""

    def __init__(self):
        self.macs = 0
        self.by_tag: dict[str, int] = {}
        self.tag = ""

    def add(self, n: int):
        self.macs += int(n)
        self.by_tag[self.tag] = self.by_tag.get(self.tag, 0) + int(n)

    @property
    def flops(self) -> int:
        return 2 * self.macs


def masked_conv_train(x, weight, bias, m_ch_in, m_ch_out, m_spa):
    """Training-phase sparse mask convolution (differentiable).

    ``m_ch_in``/``m_ch_out`` are ``(1, c, 1, 1)`` channel masks and ``m_spa`` is
    ``(n, 1, h, w)``.  ``m_ch_in=None`` means every input channel is dense.
    The four branch terms

        D->D: conv(F_D) * m_out
        D->S: conv(F_D) * (1 - m_out) * m_spa
        S->D: conv(F_S) * m_out * m_spa
        S->S: conv(F_S) * (1 - m_out) * m_spa

    are summed in the grouped form ``conv(F_D) * gate + conv(F_S) * m_spa`` with
    ``gate = m_out + (1 - m_out) * m_spa``.  The bias is gated like the D->D
    and D->S terms, so sparse output channels get it only where ``m_spa`` is on.
    """
    xs = ad.value(x).shape
    if ad.value(m_ch_out).shape != (1, ad.value(weight).shape[0], 1, 1):
        raise ValueError(f"output channel mask shape {ad.value(m_ch_out).shape} "
                         f"does not match kernel {ad.value(weight).shape}")
    if m_ch_in is not None and ad.value(m_ch_in).shape != (1, xs[1], 1, 1):
        raise ValueError(f"input channel mask shape {ad.value(m_ch_in).shape} "
                         f"does not match input {xs}")
    ms = ad.value(m_spa).shape
    if len(ms) != 4 or ms[1] != 1 or ms[2:] != xs[2:] or ms[0] not in (1, xs[0]):
        raise ValueError(f"spatial mask shape {ms} does not match input {xs}")

    gate = ad.add(m_ch_out, ad.mul(ad.sub(1.0, m_ch_out), m_spa))
    if m_ch_in is None:
        conv_d = ad.conv2d(x, weight, None, padding=1)
        out = ad.mul(conv_d, gate)
    else:
        conv_d = ad.conv2d(ad.mul(x, m_ch_in), weight, None, padding=1)
        conv_s = ad.conv2d(ad.mul(x, ad.sub(1.0, m_ch_in)), weight, None, padding=1)
        out = ad.add(ad.mul(conv_d, gate), ad.mul(conv_s, m_spa))
    if bias is not None:
        c = ad.value(bias).shape[0]
        out = ad.add(out, ad.mul(ad.reshape(bias, (1, c, 1, 1)), gate))
    return out


def _check_binary(mask: np.ndarray, what: str) -> np.ndarray:
    m = np.asarray(mask).reshape(-1)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{what} must be binary (0/1) at inference")
    return m


@dataclass
class KernelSplit:
    """Four sub-kernels indexed by dense/sparse input and output channels."""

    w_dd: np.ndarray
    w_ds: np.ndarray
    w_sd: np.ndarray
    w_ss: np.ndarray
    dense_in: np.ndarray
    sparse_in: np.ndarray
    dense_out: np.ndarray
    sparse_out: np.ndarray
    bias_dense: Optional[np.ndarray] = None
    bias_sparse: Optional[np.ndarray] = None

    @property
    def c_in(self) -> int:
        return len(self.dense_in) + len(self.sparse_in)

    @property
    def c_out(self) -> int:
        return len(self.dense_out) + len(self.sparse_out)

    @property
    def kernel_size(self) -> int:
        return max(s.shape[2] for s in (self.w_dd, self.w_ds, self.w_sd, self.w_ss))

    def reassemble(self) -> np.ndarray:
        k = self.kernel_size
        dtype = self.w_dd.dtype
        w = np.zeros((self.c_out, self.c_in, k, k), dtype=dtype)
        w[np.ix_(self.dense_out, self.dense_in)] = self.w_dd
        w[np.ix_(self.sparse_out, self.dense_in)] = self.w_ds
        w[np.ix_(self.dense_out, self.sparse_in)] = self.w_sd
        w[np.ix_(self.sparse_out, self.sparse_in)] = self.w_ss
        return w


def split_kernel(weight: np.ndarray, m_ch_in, m_ch_out,
                 bias: Optional[np.ndarray] = None) -> KernelSplit:
    """Partition ``weight`` by binary input/output channel masks."""
    c_out, c_in = weight.shape[:2]
    m_in = _check_binary(m_ch_in, "input channel mask")
    m_out = _check_binary(m_ch_out, "output channel mask")
    if m_in.size != c_in or m_out.size != c_out:
        raise ValueError(f"mask lengths ({m_in.size}, {m_out.size}) do not match "
                         f"kernel {weight.shape}")
    d_in, s_in = np.flatnonzero(m_in == 1), np.flatnonzero(m_in == 0)
    d_out, s_out = np.flatnonzero(m_out == 1), np.flatnonzero(m_out == 0)
    return KernelSplit(
        w_dd=np.ascontiguousarray(weight[np.ix_(d_out, d_in)]),
        w_ds=np.ascontiguousarray(weight[np.ix_(s_out, d_in)]),
        w_sd=np.ascontiguousarray(weight[np.ix_(d_out, s_in)]),
        w_ss=np.ascontiguousarray(weight[np.ix_(s_out, s_in)]),
        dense_in=d_in, sparse_in=s_in, dense_out=d_out, sparse_out=s_out,
        bias_dense=None if bias is None else bias[d_out],
        bias_sparse=None if bias is None else bias[s_out],
    )


@dataclass(frozen=True)
class ImportantIndexList:
    """Row-major flat indices of the pixels where the spatial mask is 1."""

    flat: np.ndarray
    height: int
    width: int

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "ImportantIndexList":
        m = np.asarray(mask)
        m2 = m.reshape(m.shape[-2:])
        _check_binary(m2, "spatial mask")
        return cls(np.flatnonzero(m2 == 1), m2.shape[0], m2.shape[1])

    @property
    def count(self) -> int:
        return int(self.flat.size)

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        return np.divmod(self.flat, self.width)


def gather_columns(x: np.ndarray, idx: ImportantIndexList, k: int = 3) -> np.ndarray:
    """im2col restricted to ``idx``: ``(c*k*k, n_imp)`` columns of a ``(c, h, w)`` input."""
    c, h, w = x.shape
    pad = k // 2
    if c == 0 or idx.count == 0:
        return np.zeros((c * k * k, idx.count), dtype=x.dtype)
    wp = w + 2 * pad
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))).reshape(c, -1)
    ys, xs = idx.positions()
    base = ys * wp + xs
    offsets = (np.arange(k)[:, None] * wp + np.arange(k)[None, :]).reshape(-1)
    cols = xp[:, offsets[:, None] + base[None, :]]
    return cols.reshape(c * k * k, idx.count)


def _gemm(wpart: np.ndarray, cols: np.ndarray, counter: Optional[MacCounter]) -> np.ndarray:
    wmat = wpart.reshape(wpart.shape[0], -1)
    if counter is not None:
        counter.add(wmat.shape[0] * wmat.shape[1] * cols.shape[1])
    return wmat @ cols


def sparse_gather_conv(x: np.ndarray, wpart: np.ndarray, idx: ImportantIndexList,
                       counter: Optional[MacCounter] = None,
                       cols: Optional[np.ndarray] = None) -> np.ndarray:
    """Stride-1, same-padded conv evaluated only at ``idx``.

    Returns the ``(c_out, n_imp)`` values; :func:`scatter` places them into a
    zero-filled plane.
    """
    c_out = wpart.shape[0]
    if c_out == 0 or wpart.shape[1] == 0 or idx.count == 0:
        return np.zeros((c_out, idx.count), dtype=x.dtype)
    if cols is None:
        cols = gather_columns(x, idx, wpart.shape[2])
    return _gemm(wpart, cols, counter)


def scatter(values: np.ndarray, idx: ImportantIndexList) -> np.ndarray:
    out = np.zeros((values.shape[0], idx.height * idx.width), dtype=values.dtype)
    out[:, idx.flat] = values
    return out.reshape(values.shape[0], idx.height, idx.width)


def sparse_mask_conv_infer(x: np.ndarray, split: KernelSplit, idx: ImportantIndexList,
                           counter: Optional[MacCounter] = None) -> np.ndarray:
    """Inference-phase sparse mask convolution of one ``(c, h, w)`` feature.

    Sparse input channels of ``x`` must already be zero outside ``idx``.
    Output channels come back in their original order; sparse output
    channels are exactly zero outside ``idx``.
    """
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError("sparse_mask_conv_infer handles one sample at a time")
        return sparse_mask_conv_infer(x[0], split, idx, counter)[None]
    c, h, w = x.shape
    if c != split.c_in:
        raise ValueError(f"input has {c} channels, kernel split expects {split.c_in}")
    k = split.kernel_size
    out = np.zeros((split.c_out, h * w), dtype=x.dtype)
    d_in, s_in = split.dense_in, split.sparse_in
    d_out, s_out = split.dense_out, split.sparse_out
    x_dense = x[d_in]
    x_sparse = x[s_in]

    # D->D: plain im2col convolution over the whole plane
    if d_out.size:
        if d_in.size:
            dd = T.conv2d(x_dense[None], split.w_dd, None, padding=k // 2, counter=counter)
            out[d_out] = dd[0].reshape(d_out.size, -1)
        if split.bias_dense is not None:
            out[d_out] += split.bias_dense[:, None]

    if idx.count:
        cols_d = gather_columns(x_dense, idx, k) if d_in.size else None
        cols_s = gather_columns(x_sparse, idx, k) if s_in.size else None
        if d_out.size and s_in.size:
            out[np.ix_(d_out, idx.flat)] += _gemm(split.w_sd, cols_s, counter)
        if s_out.size:
            acc = np.zeros((s_out.size, idx.count), dtype=x.dtype)
            if d_in.size:
                acc += _gemm(split.w_ds, cols_d, counter)
            if s_in.size:
                acc += _gemm(split.w_ss, cols_s, counter)
            if split.bias_sparse is not None:
                acc += split.bias_sparse[:, None]
            out[np.ix_(s_out, idx.flat)] = acc
    return out.reshape(split.c_out, h, w)


def layer_macs(k: int, c_in_dense: int, c_in_sparse: int, c_out_dense: int,
               c_out_sparse: int, hw: int, n_imp: int) -> int:
    """Multiply-adds of one inference-mode sparse mask convolution."""
    sparse_pairs = (c_in_dense * c_out_sparse + c_in_sparse * c_out_dense
                    + c_in_sparse * c_out_sparse)
    return k * k * (c_in_dense * c_out_dense * hw + sparse_pairs * n_imp)
