"""PNG I/O, toy corpora and patch sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import tensor as T

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png",)


def read_png(path) -> np.ndarray:
    """Load an 8-bit PNG as a ``(c, h, w)`` float32 array on the 0-255 scale."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32)
    if arr.ndim == 2:
        return arr[None]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_png(path, image: np.ndarray):
    """Write a ``(1|3, h, w)`` array on the 0-255 scale, rounding to uint8."""
    arr = np.asarray(image)
    if arr.ndim == 4:
        arr = arr[0]
    u8 = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    if u8.shape[0] == 1:
        Image.fromarray(u8[0], mode="L").save(path)
    else:
        Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path)


def quantize(image01: np.ndarray) -> np.ndarray:
    """Map a [0, 1] image to the 0-255 scale as a stored PNG would."""
    return np.round(np.clip(image01, 0, 1) * 255.0).astype(np.float32)


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def crop_to_multiple(image: np.ndarray, scale: int) -> np.ndarray:
    h, w = image.shape[-2:]
    return image[..., : h - h % scale, : w - w % scale]


def downscale(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic LR synthesis of a ``(c, h, w)`` image, cropped to a multiple of ``scale``."""
    hr = crop_to_multiple(hr, scale)
    return T.bicubic_resize(hr[None], 1.0 / scale)[0]


def synthetic_image(rng: np.random.Generator, size: int = 128) -> np.ndarray:
    """A flat-shaded scene of polygons, ellipses and stripes, ``(3, size, size)`` 0-255.

    Shapes are drawn at twice the resolution and downsampled so edges are
    antialiased, leaving large flat areas and a minority of edge pixels.
    """
    big = size * 2
    top, bottom = rng.integers(0, 256, 3), rng.integers(0, 256, 3)
    ramp = np.linspace(0, 1, big)[:, None, None]
    bg = (top * (1 - ramp) + bottom * ramp) * np.ones((1, big, 1))
    im = Image.fromarray(bg.astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(im)
    for _ in range(int(rng.integers(4, 9))):
        color = tuple(int(v) for v in rng.integers(0, 256, 3))
        kind = rng.integers(0, 4)
        x0, y0 = rng.integers(-big // 4, big, 2)
        ext = rng.integers(big // 8, big // 2, 2)
        box = [int(x0), int(y0), int(x0 + ext[0]), int(y0 + ext[1])]
        if kind == 0:
            draw.rectangle(box, fill=color)
        elif kind == 1:
            draw.ellipse(box, fill=color)
        elif kind == 2:
            pts = [tuple(int(v) for v in rng.integers(0, big, 2)) for _ in range(3)]
            draw.polygon(pts, fill=color)
        else:
            period = int(rng.integers(6, 16))
            width = max(1, period // 2)
            for off in range(box[0], box[2], period):
                draw.line([(off, box[1]), (off + (box[3] - box[1]) // 3, box[3])],
                          fill=color, width=width)
    im = im.resize((size, size), Image.LANCZOS)
    return np.asarray(im, dtype=np.float32).transpose(2, 0, 1).copy()


def write_synthetic_corpus(directory, count: int, size: int = 128, seed: int = 0) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        p = d / f"img_{i:03d}.png"
        write_png(p, synthetic_image(rng, size))
        paths.append(p)
    return paths


@dataclass
class Dataset:
    """HR images in [0, 1] with their bicubic LR counterparts."""

    scale: int
    hr: list[np.ndarray] = field(default_factory=list)
    lr: list[np.ndarray] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.hr)

    def subset(self, indices) -> "Dataset":
        indices = list(indices)
        return Dataset(self.scale, [self.hr[i] for i in indices], [self.lr[i] for i in indices],
                       [self.names[i] for i in indices])

    def split(self, val_every: int = 4) -> tuple["Dataset", "Dataset"]:
        """Deterministic train/val split: every ``val_every``-th image is held out."""
        val = [i for i in range(len(self)) if i % val_every == val_every - 1]
        train = [i for i in range(len(self)) if i not in val]
        return self.subset(train), self.subset(val)


def load_dataset(directory, scale: int, min_lr_size: int = 0) -> Dataset:
    ds = Dataset(scale)
    for path in list_images(directory):
        img = read_png(path)
        if img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
        hr = crop_to_multiple(img, scale) / 255.0
        if min(hr.shape[1:]) < min_lr_size * scale:
            log.warning("skipping %s: %s smaller than the %d-pixel LR patch",
                        path.name, hr.shape[1:], min_lr_size)
            continue
        ds.hr.append(hr.astype(np.float32))
        ds.lr.append(T.bicubic_resize(hr[None], 1.0 / scale)[0].astype(np.float32))
        ds.names.append(path.name)
    return ds


def dihedral(x: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 rotations/flips of the last two axes (k in 0..7)."""
    y = np.rot90(x, k % 4, axes=(-2, -1))
    if k >= 4:
        y = y[..., ::-1]
    return np.ascontiguousarray(y)


def sample_batch(dataset: Dataset, batch_size: int, patch: int, rng: np.random.Generator,
                 augment: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Aligned random LR/HR crops; the HR crop origin is ``scale`` times the LR one."""
    s = dataset.scale
    lrs, hrs = [], []
    for _ in range(batch_size):
        i = int(rng.integers(len(dataset)))
        lr, hr = dataset.lr[i], dataset.hr[i]
        h, w = lr.shape[1:]
        y = int(rng.integers(h - patch + 1))
        x = int(rng.integers(w - patch + 1))
        lp = lr[:, y:y + patch, x:x + patch]
        hp = hr[:, y * s:(y + patch) * s, x * s:(x + patch) * s]
        if augment:
            k = int(rng.integers(8))
            lp, hp = dihedral(lp, k), dihedral(hp, k)
        lrs.append(lp)
        hrs.append(hp)
    return np.stack(lrs).astype(np.float32), np.stack(hrs).astype(np.float32)
