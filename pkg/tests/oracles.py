"""Slow, loop-based reference implementations used only by the tests.

None of these share code with the package; they are written from the
textbook definitions so a shared bug cannot hide in both routes.
"""

import math

import numpy as np


def conv_direct(x, w, b=None, stride=1, pad=0):
    """Cross-correlation by explicit loops over every output element."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    assert ci == c
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo), dtype=np.float64)
    for ni in range(n):
        for o in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for i in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                sy = y * stride + dy - pad
                                sx = xx * stride + dx - pad
                                if 0 <= sy < h and 0 <= sx < wd:
                                    acc += float(x[ni, i, sy, sx]) * float(w[o, i, dy, dx])
                    out[ni, o, y, xx] = acc
    return out


def conv_at(x, w, y, xx, pad=1):
    """Single output pixel (all output channels) of a same-padded conv on (c, h, w)."""
    c, h, wd = x.shape
    co, _, k, _ = w.shape
    acc = np.zeros(co)
    for dy in range(k):
        for dx in range(k):
            sy, sx = y + dy - pad, xx + dx - pad
            if 0 <= sy < h and 0 <= sx < wd:
                acc += w[:, :, dy, dx].astype(np.float64) @ x[:, sy, sx].astype(np.float64)
    return acc


def keys_cubic(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def imresize_1d(signal, scale):
    """One axis of a MATLAB-style bicubic resize, one output sample at a time."""
    n_in = len(signal)
    n_out = int(math.ceil(n_in * scale - 1e-9))
    support = 2.0 / scale if scale < 1 else 2.0
    out = []
    for i in range(1, n_out + 1):
        centre = i / scale + 0.5 * (1 - 1 / scale)   # 1-based source coordinate
        num = den = 0.0
        first = math.floor(centre - support)
        for j in range(first, math.ceil(centre + support) + 1):
            d = centre - j
            wt = scale * keys_cubic(d * scale) if scale < 1 else keys_cubic(d)
            if wt == 0.0:
                continue
            src = min(max(j, 1), n_in) - 1
            num += wt * signal[src]
            den += wt
        out.append(num / den)
    return np.array(out)


def luminance_pixel(r, g, b):
    return 16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def ssim_naive(a, b, window=11, sigma=1.5, data_range=255.0):
    """Mean SSIM, evaluating every valid window position separately."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    r = np.arange(window) - (window - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for y in range(a.shape[0] - window + 1):
        for x in range(a.shape[1] - window + 1):
            pa = a[y:y + window, x:x + window]
            pb = b[y:y + window, x:x + window]
            ma, mb = (g * pa).sum(), (g * pb).sum()
            va = (g * (pa - ma) ** 2).sum()
            vb = (g * (pb - mb) ** 2).sum()
            cov = (g * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                        / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def eta_direct(m_ch, m_spa):
    """Activated-location ratio by summing over every (c, y, x)."""
    c = len(m_ch)
    h, w = m_spa.shape
    total = 0.0
    for i in range(c):
        for y in range(h):
            for x in range(w):
                total += m_ch[i] * 1.0 + (1 - m_ch[i]) * m_spa[y, x]
    return total / (c * h * w)


def central_diff(f, x, eps=1e-6):
    """Numerical gradient of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


SPATIAL_KINDS = ("random", "ones", "zeros", "single")


def masked_instance(rng, kind="random", max_c=8, max_hw=10):
    """Random (features, kernel, bias, binary masks) for one sparse mask conv.

    Sparse input channels are zeroed outside the spatial mask, as they are
    inside a trained block.
    """
    c_in, c_out = (int(v) for v in rng.integers(1, max_c + 1, 2))
    h, w = (int(v) for v in rng.integers(1, max_hw + 1, 2))
    if kind == "ones":
        m_spa = np.ones((h, w))
    elif kind == "zeros":
        m_spa = np.zeros((h, w))
    elif kind == "single":
        m_spa = np.zeros((h, w))
        m_spa[rng.integers(h), rng.integers(w)] = 1
    else:
        m_spa = (rng.random((h, w)) < rng.random()).astype(np.float64)
    m_in = (rng.random(c_in) < rng.random()).astype(np.float64)
    m_out = (rng.random(c_out) < rng.random()).astype(np.float64)
    x = rng.standard_normal((c_in, h, w))
    x[m_in == 0] *= m_spa
    wt = rng.standard_normal((c_out, c_in, 3, 3))
    b = rng.standard_normal(c_out)
    f32 = np.float32
    return x.astype(f32), wt.astype(f32), b.astype(f32), m_in.astype(f32), \
        m_out.astype(f32), m_spa.astype(f32)


def masked_conv_reference(x, wt, b, m_in, m_out, m_spa):
    """Binary-mask semantics from the definition, with a direct convolution."""
    dense = x * m_in[:, None, None]
    sparse = x * (1 - m_in)[:, None, None]
    cd = conv_direct(dense[None], wt, b, 1, 1)[0]
    cs = conv_direct(sparse[None], wt, None, 1, 1)[0]
    gate = m_out[:, None, None] + (1 - m_out[:, None, None]) * m_spa[None]
    return cd * gate + cs * m_spa[None]
