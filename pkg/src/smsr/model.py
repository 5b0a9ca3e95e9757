"""SMSR network assembly, forward passes and the model container format."""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import masks as M
from . import tensor as T
from .autodiff import Parameter
from .sparse import (ImportantIndexList, MacCounter, masked_conv_train,
                     sparse_mask_conv_infer, split_kernel)

MAGIC = b"SMSR"
VERSION = 1
_HEADER = struct.Struct("<4sHBBBH")
_HEUR_TAG = b"HEUR"
_OPTIM_TAG = b"OPTM"


class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


@dataclass
class SmsrModel:
    scale: int
    n_blocks: int
    n_layers: int
    channels: int
    params: dict[str, Parameter] = field(default_factory=dict)
    heuristic_alpha: Optional[float] = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def parameter_breakdown(self) -> dict[str, int]:
        groups: dict[str, int] = {}
        for name, p in self.params.items():
            if name.startswith("smm"):
                _, part = name.split(".", 1)
                key = "smm." + part.split(".")[0].rstrip("0123456789")
            else:
                key = name.split(".")[0]
            groups[key] = groups.get(key, 0) + p.size
        return groups

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.params.items()}


def parameter_shapes(scale: int, n_blocks: int, n_layers: int, channels: int) -> dict[str, tuple]:
    c = channels
    shapes: dict[str, tuple] = {"head.weight": (c, 3, 3, 3), "head.bias": (c,)}
    for k in range(n_blocks):
        pre = f"smm{k}."
        for name, shape in M.hourglass_shapes(c).items():
            shapes[pre + "hourglass." + name] = shape
        for layer in range(n_layers):
            shapes[pre + f"conv{layer}.weight"] = (c, c, 3, 3)
            shapes[pre + f"conv{layer}.bias"] = (c,)
            shapes[pre + f"mask{layer}.logits"] = (2, c)
        shapes[pre + "fuse.weight"] = (c, n_layers * c, 1, 1)
        shapes[pre + "fuse.bias"] = (c,)
    shapes["body.fuse.weight"] = (c, n_blocks * c, 1, 1)
    shapes["body.fuse.bias"] = (c,)
    shapes["body.conv.weight"] = (c, c, 3, 3)
    shapes["body.conv.bias"] = (c,)
    shapes["tail.weight"] = (3 * scale * scale, c, 3, 3)
    shapes["tail.bias"] = (3 * scale * scale,)
    return shapes


def build_model(scale: int = 2, n_blocks: int = 5, n_layers: int = 4, channels: int = 64,
                seed: int = 0, heuristic_alpha: Optional[float] = None) -> SmsrModel:
    """Fresh model: fan-in uniform conv weights, zero biases, N(0, 1) mask logits.

    Conv weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the
    Kaiming-uniform bound with negative slope sqrt(5).
    """
    if scale not in (2, 3, 4):
        raise ValueError(f"scale must be 2, 3 or 4, got {scale}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(scale, n_blocks, n_layers, channels).items():
        if name.endswith(".logits"):
            val = rng.standard_normal(shape)
        elif name.endswith(".bias"):
            val = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            val = rng.uniform(-bound, bound, size=shape)
        params[name] = Parameter(val.astype(T.DTYPE))
    return SmsrModel(scale, n_blocks, n_layers, channels, params, heuristic_alpha)


def heuristic_masks(lr_batch: np.ndarray, alpha: float) -> np.ndarray:
    """Gradient-threshold spatial masks ``(n, 1, h, w)`` for a [0, 1] RGB batch."""
    y = T.rgb_to_luminance(np.asarray(lr_batch, dtype=np.float64) * 255.0)
    out = np.stack([M.heuristic_spatial_mask(y[i, 0], alpha) for i in range(y.shape[0])])
    return out[:, None].astype(T.DTYPE)


@dataclass
class ForwardResult:
    sr: object
    spatial_masks: list = field(default_factory=list)
    channel_masks: list = field(default_factory=list)
    etas: list = field(default_factory=list)
    features: list = field(default_factory=list)

    @property
    def eta_values(self) -> np.ndarray:
        return np.array([[float(np.asarray(ad.value(e))) for e in row] for row in self.etas])

    def smm_sparsity(self) -> np.ndarray:
        return 1.0 - self.eta_values.mean(axis=1)

    def aggregate_sparsity(self) -> float:
        return float(1.0 - self.eta_values.mean())


def forward_train(model: SmsrModel, lr_batch, epoch: float, *, tau: Optional[float] = None,
                  rng: Optional[np.random.Generator] = None, tape: Optional[ad.Tape] = None,
                  mode: str = M.SOFT, t_temp: float = M.T_TEMP,
                  keep_features: bool = False) -> ForwardResult:
    """Training-formulation forward pass.

    With a ``tape`` every parameter is watched and the output is a ``Var``.
    Soft masks draw Gumbel noise from ``rng`` (noise-free when ``rng`` is
    None); ``mode=BINARY`` uses argmax masks, which gives the reference the
    inference path must reproduce.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    if tau is None:
        tau = M.temperature_schedule(epoch, t_temp)
    lr_batch = np.asarray(lr_batch, dtype=T.DTYPE)
    if tape is not None:
        p = {k: tape.watch(v) for k, v in model.params.items()}
    else:
        p = model.values()

    fixed_spa = None
    if model.heuristic_alpha is not None:
        fixed_spa = heuristic_masks(lr_batch, model.heuristic_alpha)

    res = ForwardResult(sr=None)
    head = ad.conv2d(lr_batch, p["head.weight"], p["head.bias"], padding=1)
    x = head
    block_outputs = []
    for k in range(model.n_blocks):
        pre = f"smm{k}."
        if fixed_spa is not None:
            m_spa = fixed_spa
        else:
            m_spa = M.spatial_mask(x, p, pre + "hourglass.", tau, mode, rng)
        res.spatial_masks.append(m_spa)
        row_masks, row_etas = [], []
        y = x
        m_in = None
        outs = []
        for layer in range(model.n_layers):
            m_out = M.channel_mask(p[pre + f"mask{layer}.logits"], tau, mode, rng)
            y = masked_conv_train(y, p[pre + f"conv{layer}.weight"], p[pre + f"conv{layer}.bias"],
                                  m_in, m_out, m_spa)
            y = ad.relu(y)
            if keep_features:
                res.features.append(ad.value(y))
            outs.append(y)
            row_masks.append(m_out)
            row_etas.append(M.sparsity_term(m_out, m_spa))
            m_in = m_out
        res.channel_masks.append(row_masks)
        res.etas.append(row_etas)
        fused = ad.conv2d(ad.concat(outs, axis=1), p[pre + "fuse.weight"], p[pre + "fuse.bias"])
        x = ad.add(fused, x)
        block_outputs.append(x)

    body = ad.conv2d(ad.concat(block_outputs, axis=1), p["body.fuse.weight"], p["body.fuse.bias"])
    body = ad.conv2d(body, p["body.conv.weight"], p["body.conv.bias"], padding=1)
    body = ad.add(body, head)
    up = ad.pixel_shuffle(ad.conv2d(body, p["tail.weight"], p["tail.bias"], padding=1),
                          model.scale)
    res.sr = ad.add(up, T.bicubic_resize(lr_batch, model.scale))
    return res


@dataclass
class MaskSet:
    """Binary masks for one image: a spatial map per SMM, channel masks per layer."""

    spatial: list  # K arrays (h, w) or N_imp counts
    channel: list  # K lists of L length-C vectors

    def n_imp(self, k: int) -> int:
        s = self.spatial[k]
        return int(s) if np.isscalar(s) else int(np.asarray(s).sum())

    def etas(self, hw: int) -> np.ndarray:
        out = []
        for k, row in enumerate(self.channel):
            p = self.n_imp(k) / hw
            out.append([float(np.mean(m)) + (1 - float(np.mean(m))) * p for m in row])
        return np.array(out)

    def aggregate_sparsity(self, hw: int) -> float:
        return float(1.0 - self.etas(hw).mean())


def binary_channel_masks(model: SmsrModel) -> list[list[np.ndarray]]:
    return [[M.argmax_mask(model.params[f"smm{k}.mask{layer}.logits"].value, axis=0).reshape(-1)
             for layer in range(model.n_layers)] for k in range(model.n_blocks)]


def _tagged(counter, tag):
    if counter is not None:
        counter.tag = tag
    return counter


def forward_infer(model: SmsrModel, lr_image, *, masks: Optional[MaskSet] = None,
                  counter: Optional[MacCounter] = None, dense: bool = False,
                  clamp: bool = True, keep_features: bool = False) -> ForwardResult:
    """Inference with binary masks and four-branch sparse convolution.

    ``lr_image`` is ``(3, h, w)`` or ``(1, 3, h, w)`` in [0, 1].  ``masks``
    overrides the predicted masks (spatial maps must be arrays here).
    ``dense=True`` runs the maskless network on the same weights: every conv
    over every channel and pixel, no mask prediction.
    """
    x_in = np.asarray(lr_image, dtype=T.DTYPE)
    if x_in.ndim == 3:
        x_in = x_in[None]
    if x_in.shape[0] != 1:
        raise ValueError("forward_infer processes a single image")
    p = model.values()
    _, _, h, w = x_in.shape
    res = ForwardResult(sr=None)

    ch_masks = masks.channel if masks is not None else binary_channel_masks(model)
    fixed_spa = None
    if masks is None and model.heuristic_alpha is not None:
        fixed_spa = heuristic_masks(x_in, model.heuristic_alpha)[0, 0]

    head = T.conv2d(x_in, p["head.weight"], p["head.bias"], padding=1,
                    counter=_tagged(counter, "head"))
    x = head[0]
    ones = np.ones(model.channels, dtype=T.DTYPE)
    block_outputs = []
    for k in range(model.n_blocks):
        pre = f"smm{k}."
        outs = []
        if dense:
            y = x
            for layer in range(model.n_layers):
                y = T.relu(T.conv2d(y[None], p[pre + f"conv{layer}.weight"],
                                    p[pre + f"conv{layer}.bias"], padding=1,
                                    counter=_tagged(counter, f"smm{k}.conv{layer}"))[0])
                outs.append(y)
        else:
            if masks is not None:
                m_spa = np.asarray(masks.spatial[k], dtype=T.DTYPE).reshape(h, w)
            elif fixed_spa is not None:
                m_spa = fixed_spa
            else:
                logits = _hourglass_infer(x[None], p, pre + "hourglass.",
                                          _tagged(counter, f"smm{k}.mask"))
                m_spa = M.argmax_mask(logits, axis=1)[0, 0]
            idx = ImportantIndexList.from_mask(m_spa)
            res.spatial_masks.append(m_spa)
            row_etas = []
            m_in = ones
            y = x
            for layer in range(model.n_layers):
                m_out = np.asarray(ch_masks[k][layer], dtype=T.DTYPE).reshape(-1)
                split = split_kernel(p[pre + f"conv{layer}.weight"], m_in, m_out,
                                     p[pre + f"conv{layer}.bias"])
                y = T.relu(sparse_mask_conv_infer(y, split, idx,
                                                  _tagged(counter, f"smm{k}.conv{layer}")))
                outs.append(y)
                d = float(m_out.mean())
                row_etas.append(d + (1 - d) * idx.count / (h * w))
                m_in = m_out
            res.channel_masks.append([np.asarray(m).reshape(-1) for m in ch_masks[k]])
            res.etas.append(row_etas)
        if keep_features:
            res.features.extend(outs)
        fused = T.conv2d(np.concatenate(outs, axis=0)[None], p[pre + "fuse.weight"],
                         p[pre + "fuse.bias"], counter=_tagged(counter, f"smm{k}.fuse"))
        x = fused[0] + x
        block_outputs.append(x)

    body = T.conv2d(np.concatenate(block_outputs, axis=0)[None], p["body.fuse.weight"],
                    p["body.fuse.bias"], counter=_tagged(counter, "body"))
    body = T.conv2d(body, p["body.conv.weight"], p["body.conv.bias"], padding=1,
                    counter=counter)
    body = body + head
    up = T.pixel_shuffle(T.conv2d(body, p["tail.weight"], p["tail.bias"], padding=1,
                                  counter=_tagged(counter, "tail")), model.scale)
    sr = up + T.bicubic_resize(x_in, model.scale)
    res.sr = np.clip(sr, 0, 1) if clamp else sr
    return res


def _hourglass_infer(x, p, pre, counter):
    h, w = x.shape[2:]
    y = T.relu(T.conv2d(x, p[pre + "conv1.weight"], p[pre + "conv1.bias"], stride=2,
                        padding=1, counter=counter))
    y = T.relu(T.conv2d(y, p[pre + "conv2.weight"], p[pre + "conv2.bias"], padding=1,
                        counter=counter))
    y = y.repeat(2, axis=2).repeat(2, axis=3)[:, :, :h, :w]
    return T.conv2d(y, p[pre + "conv3.weight"], p[pre + "conv3.bias"], padding=1,
                    counter=counter)


# -- container format -------------------------------------------------------

def _write_table(f, tensors: Sequence[tuple[str, np.ndarray]]):
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"file truncated: wanted {n} bytes at offset {self.pos}, have {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def at_end(self) -> bool:
        return self.pos >= len(self.data)


def _read_table(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(T.DTYPE)
    return out


def dump_model(model: SmsrModel, optimizer: Optional[dict] = None) -> bytes:
    """Serialize ``model`` (and optionally optimizer state) to bytes.

    ``optimizer`` is ``{"epoch": int, "step": int}``; Adam moments are taken
    from the parameters themselves.
    """
    f = io.BytesIO()
    f.write(_HEADER.pack(MAGIC, VERSION, model.scale, model.n_blocks, model.n_layers,
                         model.channels))
    _write_table(f, [(k, p.value) for k, p in model.params.items()])
    if model.heuristic_alpha is not None:
        f.write(_HEUR_TAG + struct.pack("<f", model.heuristic_alpha))
    if optimizer is not None:
        f.write(_OPTIM_TAG + struct.pack("<II", optimizer["epoch"], optimizer["step"]))
        moments = []
        for k, p in model.params.items():
            moments.append(("m/" + k, p.adam_m))
            moments.append(("v/" + k, p.adam_v))
        _write_table(f, moments)
    return f.getvalue()


def parse_model(data: bytes) -> tuple[SmsrModel, Optional[dict]]:
    r = _Reader(data)
    if len(data) < _HEADER.size:
        if not data.startswith(MAGIC[:len(data)]):
            raise BadMagicError("not an SMSR model file (bad magic)")
        raise TruncatedFileError("file truncated inside the header")
    magic, version, scale, k, l, c = _HEADER.unpack(r.take(_HEADER.size))
    if magic != MAGIC:
        raise BadMagicError(f"not an SMSR model file (magic {magic!r})")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported model version {version} (expected {VERSION})")
    tensors = _read_table(r)
    expected = parameter_shapes(scale, k, l, c)
    if list(tensors) != list(expected) or any(
            tensors[n].shape != s for n, s in expected.items()):
        raise ModelFormatError("tensor table does not match the header's architecture")
    model = SmsrModel(scale, k, l, c, {n: Parameter(v) for n, v in tensors.items()})
    optimizer = None
    while not r.at_end():
        tag = r.take(4)
        if tag == _HEUR_TAG:
            (model.heuristic_alpha,) = r.unpack("<f")
        elif tag == _OPTIM_TAG:
            epoch, step = r.unpack("<II")
            moments = _read_table(r)
            for name, p in model.params.items():
                try:
                    p.adam_m = moments["m/" + name]
                    p.adam_v = moments["v/" + name]
                except KeyError as exc:
                    raise ModelFormatError(f"optimizer section lacks {exc}") from None
                p.step_count = step
            optimizer = {"epoch": epoch, "step": step}
        else:
            raise ModelFormatError(f"unknown section tag {tag!r}")
    return model, optimizer


def save_model(model: SmsrModel, path, optimizer: Optional[dict] = None):
    """Write atomically: a crash mid-write never leaves a truncated file behind."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(dump_model(model, optimizer))
    os.replace(tmp, path)


def load_model(path) -> SmsrModel:
    return parse_model(Path(path).read_bytes())[0]


def load_checkpoint(path) -> tuple[SmsrModel, Optional[dict]]:
    return parse_model(Path(path).read_bytes())
