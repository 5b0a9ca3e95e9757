"""Training loop: L1 + warmed-up sparsity regularisation, annealed Gumbel masks."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import masks as M
from .data import Dataset, sample_batch
from .model import SmsrModel, build_model, forward_infer, forward_train, load_checkpoint, \
    save_model

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "L_SR", "L_reg", "tau", "lambda", "mean_sparsity", "eval_sparsity",
              "mask_saturation", "spatial_density", "wall_seconds")


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda0: float = 0.1
    batch_size: int = 16
    patch: int = 96
    lr: float = 2e-4
    lr_halve_every: int = 200
    epochs: int = 1000
    t_warm: float = M.T_WARM
    t_temp: float = M.T_TEMP
    samples_per_epoch: int = 1000
    seed: int = 0
    scale: int = 2
    augment: bool = True
    channels: int = 64
    n_blocks: int = 5
    n_layers: int = 4
    checkpoint_every: int = 0
    heuristic_alpha: Optional[float] = None
    pixel_range: float = 1.0

    def __post_init__(self):
        for name in ("batch_size", "patch", "lr", "lr_halve_every", "t_warm", "t_temp",
                     "samples_per_epoch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def iters_per_epoch(self) -> int:
        return max(1, math.ceil(self.samples_per_epoch / self.batch_size))

    def learning_rate(self, epoch: int) -> float:
        return self.lr * 0.5 ** (epoch // self.lr_halve_every)


PRESETS = {
    "paper": dict(pixel_range=255.0),
    # annealing compressed so tau reaches its floor at epoch 60 of 200
    "desk": dict(channels=16, n_blocks=3, n_layers=2, patch=32, epochs=200, batch_size=8,
                 samples_per_epoch=32, lr=2e-3, lr_halve_every=80, t_temp=100,
                 pixel_range=255.0),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


def l1_loss(sr, hr):
    return ad.mean(ad.abs(ad.sub(sr, hr)))


def total_loss(sr, hr, etas, lam: float, pixel_range: float = 1.0):
    """``L1(sr, hr) + lam * mean(etas)``; returns ``(total, l1, reg)``.

    ``pixel_range`` rescales the L1 term to intensity units (255 measures it
    on the 8-bit scale) while images stay normalised to [0, 1].
    """
    l_sr = l1_loss(sr, hr)
    if pixel_range != 1.0:
        l_sr = ad.mul(l_sr, pixel_range)
    l_reg = M.reg_loss(etas)
    return ad.add(l_sr, ad.mul(l_reg, lam)), l_sr, l_reg


def _flatten(etas):
    return [e for row in etas for e in row]


def _mask_saturation(res) -> float:
    vals = [np.abs(np.asarray(ad.value(m), dtype=np.float64) - 0.5).ravel()
            for m in res.spatial_masks + _flatten(res.channel_masks)]
    return float(np.concatenate(vals).mean())


def evaluate_sparsity(model: SmsrModel, images) -> tuple[float, float]:
    """Mean binary-mask aggregate sparsity and spatial density over ``images``."""
    spars, dens = [], []
    for img in images:
        res = forward_infer(model, img)
        spars.append(res.aggregate_sparsity())
        dens.append(float(np.mean([m.mean() for m in res.spatial_masks])))
    return float(np.mean(spars)), float(np.mean(dens))


def train(dataset: Dataset, config: TrainConfig, *, val: Optional[Dataset] = None,
          log_path=None, checkpoint_path=None, resume=None,
          model: Optional[SmsrModel] = None) -> tuple[SmsrModel, list[dict]]:
    """Train an SMSR model; returns the model and one log row per epoch.

    Each epoch draws its batches and Gumbel noise from a generator seeded by
    ``(seed, epoch)``, so a run resumed from a checkpoint replays the same
    stream as an uninterrupted one.  A non-finite loss raises
    :class:`NumericalError`; the last checkpoint on disk is left untouched.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    start = 0
    if resume is not None:
        model, opt = load_checkpoint(resume)
        if opt is None:
            raise ValueError(f"{resume} has no optimizer state to resume from")
        start = opt["epoch"]
    elif model is None:
        model = build_model(config.scale, config.n_blocks, config.n_layers, config.channels,
                            seed=config.seed, heuristic_alpha=config.heuristic_alpha)
    probe = [img for img in (val if val is not None and len(val) else dataset).lr[:4]]
    params = list(model.params.values())
    rows: list[dict] = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "a" if resume is not None else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if resume is None:
            writer.writeheader()
    try:
        for epoch in range(start, config.epochs):
            t0 = time.perf_counter()
            tau = M.temperature_schedule(epoch, config.t_temp)
            lam = M.lambda_schedule(epoch, config.lambda0, config.t_warm)
            lr = config.learning_rate(epoch)
            rng = np.random.default_rng([config.seed, epoch])
            l_sr_sum = l_reg_sum = sat_sum = 0.0
            for _ in range(config.iters_per_epoch):
                lr_b, hr_b = sample_batch(dataset, config.batch_size, config.patch, rng,
                                          config.augment)
                tape = ad.Tape()
                res = forward_train(model, lr_b, epoch, tau=tau, rng=rng, tape=tape)
                loss, l_sr, l_reg = total_loss(res.sr, hr_b, _flatten(res.etas), lam,
                                               config.pixel_range)
                if not np.isfinite(loss.value):
                    raise NumericalError(f"non-finite loss at epoch {epoch}")
                tape.backward(loss)
                ad.adam_step(params, lr)
                l_sr_sum += float(l_sr.value)
                l_reg_sum += float(l_reg.value)
                sat_sum += _mask_saturation(res)
            n = config.iters_per_epoch
            eval_sp, density = evaluate_sparsity(model, probe)
            row = {
                "epoch": epoch,
                "L_SR": l_sr_sum / n,
                "L_reg": l_reg_sum / n,
                "tau": tau,
                "lambda": lam,
                "mean_sparsity": 1.0 - l_reg_sum / n,
                "eval_sparsity": eval_sp,
                "mask_saturation": sat_sum / n,
                "spatial_density": density,
                "wall_seconds": time.perf_counter() - t0,
            }
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            log.info("epoch %d L_SR %.5f L_reg %.4f sparsity %.3f", epoch, row["L_SR"],
                     row["L_reg"], eval_sp)
            done = epoch + 1
            if checkpoint_path is not None and config.checkpoint_every and \
                    done % config.checkpoint_every == 0:
                save_model(model, checkpoint_path, {"epoch": done, "step": params[0].step_count})
    finally:
        if fh is not None:
            fh.close()
    return model, rows


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
