"""``smsr`` command line: train, sr, eval, make-dataset, analyze, bench, export-masks.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
CSV reports get a same-stem PNG figure written next to them.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import masks as M
from . import metrics as MX
from . import tensor as T
from .model import ModelFormatError, build_model, forward_infer, load_model, save_model
from .train import NumericalError, preset, train

log = logging.getLogger("smsr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- output helpers -----------------------------------------------------------

@contextlib.contextmanager
def _atomic(path):
    """Yield a temporary sibling of ``path``; move it into place only on success."""
    path = Path(path)
    tmp = path.with_name(f".{path.stem}.tmp{path.suffix}")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _write_csv(path, rows: list[dict], fields=None):
    fields = fields or list(rows[0])
    with _atomic(path) as tmp, open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def _write_png(path, image):
    with _atomic(path) as tmp:
        D.write_png(tmp, image)


def _figure(fn, *args, path):
    with _atomic(path) as tmp:
        fn(*args, tmp)


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.4f}"
    return str(v)


def _print_table(rows: list[dict]):
    if not rows:
        return
    cols = list(rows[0])
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    print("  ".join(c.rjust(w) for c, w in zip(cols, widths)))
    for row in cells:
        print("  ".join(v.rjust(w) for v, w in zip(row, widths)))


# -- input helpers ------------------------------------------------------------

def _require_file(path, what):
    if not Path(path).is_file():
        raise DataError(f"{what} not found: {path}")


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise DataError(f"{what} directory not found: {path}")


def _images(directory) -> list[Path]:
    _require_dir(directory, "image")
    paths = D.list_images(directory)
    if not paths:
        raise DataError(f"no PNG images in {directory}")
    return paths


def _load(path, scale=None):
    _require_file(path, "model")
    model = load_model(path)
    if scale is not None and scale != model.scale:
        raise DataError(f"--scale {scale} does not match the model's x{model.scale}")
    return model


def _rgb(img):
    return np.repeat(img, 3, axis=0) if img.shape[0] == 1 else img


def _size(text) -> tuple[int, int]:
    try:
        parts = [int(v) for v in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) <= 0:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return parts[0], parts[1]


def _unit(text) -> float:
    v = float(text)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1), got {text}")
    return v


# -- commands -----------------------------------------------------------------

def cmd_train(a):
    paths = _images(a.data)
    overrides = dict(lambda0=a.lambda0, scale=a.scale, seed=a.seed,
                     heuristic_alpha=a.heuristic_mask, checkpoint_every=a.checkpoint_every)
    if a.epochs is not None:
        overrides["epochs"] = a.epochs
    cfg = preset(a.preset, **overrides)
    ds = D.load_dataset(a.data, a.scale, min_lr_size=cfg.patch)
    if len(ds) == 0:
        raise DataError(f"none of the {len(paths)} images in {a.data} fit a "
                        f"{cfg.patch}px LR patch at x{a.scale}")
    trn, val = ds.split(a.val_every) if a.val_every and len(ds) >= a.val_every else (ds, None)
    if a.resume:
        _require_file(a.resume, "checkpoint")
    out = Path(a.out)
    log_path = Path(a.log) if a.log else out.with_suffix(".csv")
    ckpt = Path(a.checkpoint) if a.checkpoint else None
    if cfg.checkpoint_every and ckpt is None:
        ckpt = out.with_suffix(".ckpt")
    if a.resume and Path(a.resume) != ckpt:
        raise UsageError("--resume must name the --checkpoint file being written")
    with _atomic(log_path) as tmp_log:
        if a.resume and log_path.exists():
            tmp_log.write_bytes(log_path.read_bytes())
        model, rows = train(trn, cfg, val=val, log_path=tmp_log, checkpoint_path=ckpt,
                            resume=a.resume)
        save_model(model, out)
    if rows:
        from . import plotting
        _figure(plotting.training_curves, rows, path=log_path.with_suffix(".png"))
        last = rows[-1]
        print(f"epoch {int(last['epoch'])}  L1 {last['L_SR']:.4f}  "
              f"sparsity {last['eval_sparsity']:.3f}  -> {out}")
    return EXIT_OK


def cmd_sr(a):
    model = _load(a.model, a.scale)
    _require_file(a.input, "input image")
    img = _rgb(D.read_png(a.input))
    res = forward_infer(model, img / 255.0)
    _write_png(a.out, D.quantize(res.sr[0]))
    if a.report_sparsity:
        for k, s in enumerate(res.smm_sparsity()):
            print(f"smm{k} {s:.4f}")
        print(f"aggregate {res.aggregate_sparsity():.4f}")
    return EXIT_OK


def cmd_eval(a):
    if (a.model is None) == (a.sr is None):
        raise UsageError("eval: give exactly one of --model or --sr")
    bicubic = a.model == "bicubic"
    model = None if bicubic or a.model is None else _load(a.model, a.scale)
    paths = _images(a.hr)
    if a.sr is not None:
        _require_dir(a.sr, "SR image")
    rows = []
    for p in paths:
        hr = D.crop_to_multiple(_rgb(D.read_png(p)), a.scale)
        if a.sr is not None:
            q = Path(a.sr) / p.name
            _require_file(q, "SR image")
            sr = _rgb(D.read_png(q))
            if sr.shape != hr.shape:
                raise DataError(f"{q} is {sr.shape[1:]}, expected {hr.shape[1:]}")
        else:
            lr = D.quantize(D.downscale(hr, a.scale) / 255.0) / 255.0
            if bicubic:
                sr = D.quantize(T.bicubic_resize(lr[None], a.scale)[0])
            else:
                sr = D.quantize(forward_infer(model, lr).sr[0])
        rows.append({"image": p.name, "psnr": MX.psnr(sr, hr, a.scale),
                     "ssim": MX.ssim(sr, hr, a.scale)})
    rows.append({"image": "mean", "psnr": float(np.mean([r["psnr"] for r in rows])),
                 "ssim": float(np.mean([r["ssim"] for r in rows]))})
    if a.out:
        _write_csv(a.out, rows)
    _print_table(rows)
    return EXIT_OK


def cmd_make_dataset(a):
    if (a.hr is None) == (a.synthetic is None):
        raise UsageError("make-dataset: give exactly one of --hr DIR or --synthetic N")
    if a.hr is not None:
        sources = [(p.name, _rgb(D.read_png(p))) for p in _images(a.hr)]
    else:
        if a.synthetic <= 0:
            raise UsageError("make-dataset: --synthetic must be positive")
        rng = np.random.default_rng(a.seed)
        sources = [(f"img_{i:03d}.png", D.synthetic_image(rng, a.size))
                   for i in range(a.synthetic)]
    out = Path(a.out)
    hr_dir, lr_dir = out / "hr", out / f"lr_x{a.scale}"
    hr_dir.mkdir(parents=True, exist_ok=True)
    lr_dir.mkdir(parents=True, exist_ok=True)
    for name, img in sources:
        hr = D.crop_to_multiple(img, a.scale)
        _write_png(hr_dir / name, hr)
        _write_png(lr_dir / name, D.downscale(hr, a.scale))
    print(f"{len(sources)} pairs -> {hr_dir}, {lr_dir}")
    return EXIT_OK


def cmd_analyze(a):
    model = _load(a.model, a.scale)
    paths = _images(a.data)
    out = Path(a.out)
    chan_rows, smm_rows, flop_rows = [], [], []
    for p in paths:
        lr = _rgb(D.read_png(p)) / 255.0
        dense = forward_infer(model, lr, dense=True, keep_features=True)
        for i, f in enumerate(dense.features):
            k, layer = divmod(i, model.n_layers)
            for c, z in enumerate(M.feature_sparsity_probe(f)):
                chan_rows.append({"image": p.name, "smm": k, "layer": layer, "channel": c,
                                  "zero_ratio": float(z)})
        res = forward_infer(model, lr)
        rep = MX.SparsityReport.from_result(res)
        for r in rep.rows():
            smm_rows.append({"image": p.name, **r})
        fr = MX.count_flops(model, MX.MaskSet(res.spatial_masks, res.channel_masks),
                            lr.shape[1:])
        flop_rows.append({"image": p.name, "sparsity": rep.aggregate, "flops": fr.total,
                          "dense_flops": fr.dense_total, "ratio": fr.ratio})
    ref = MX.hr_reference_size(model.scale)
    rng = np.random.default_rng(a.seed)
    sweep = []
    for s in np.linspace(0.0, 0.7, 8):  # 25% dense channels cap sparsity at 0.75
        fr = MX.count_flops(model, MX.forced_masks(model, ref, float(s), rng=rng), ref)
        sweep.append({"sparsity": round(float(s), 4), "ratio": fr.ratio, "flops": fr.total})
    out.mkdir(parents=True, exist_ok=True)
    from . import plotting
    _write_csv(out / "channel_sparsity.csv", chan_rows)
    _figure(plotting.channel_sparsity_hist, np.array([r["zero_ratio"] for r in chan_rows]),
            path=out / "channel_sparsity.png")
    _write_csv(out / "smm_sparsity.csv", smm_rows)
    per_smm = [float(np.mean([r["sparsity"] for r in smm_rows if r["smm"] == k]))
               for k in range(model.n_blocks)]
    _figure(plotting.smm_sparsity_bars, per_smm, path=out / "smm_sparsity.png")
    _write_csv(out / "flops.csv", flop_rows)
    _write_csv(out / "flops_sweep.csv", sweep)
    _figure(plotting.flops_vs_sparsity, [r["sparsity"] for r in sweep],
            [r["ratio"] for r in sweep], path=out / "flops_sweep.png")
    _print_table([{"smm": k, "sparsity": v} for k, v in enumerate(per_smm)])
    return EXIT_OK


def cmd_bench(a):
    if a.model:
        model = _load(a.model, a.scale)
    else:
        model = build_model(a.scale or 2, a.blocks, a.layers, a.channels, seed=a.seed)
    if a.runs < 1 or a.warmup < 1:
        raise UsageError("bench: --runs and --warmup must be at least 1")
    rng = np.random.default_rng(a.seed)
    masks = None if a.sparsity is None else MX.forced_masks(model, a.size, a.sparsity, rng=rng)
    image = rng.random((3, *a.size)).astype(np.float32)
    rows = []
    for mode in ("dense", "sparse"):
        r = MX.bench(model, a.size, mode, threads=a.threads, runs=a.runs, warmup=a.warmup,
                     masks=masks, image=image)
        rows.append({"mode": mode, "median_ms": r.median_ms, "min_ms": min(r.times_ms),
                     "macs": r.macs, "flops": 2 * r.macs})
    for r in rows:
        r["speedup"] = rows[0]["median_ms"] / r["median_ms"]
    if a.out:
        from . import plotting
        _write_csv(a.out, rows)
        _figure(plotting.bench_bars, {r["mode"]: r["median_ms"] for r in rows},
                path=Path(a.out).with_suffix(".png"))
    _print_table(rows)
    return EXIT_OK


def cmd_export_masks(a):
    model = _load(a.model, a.scale)
    _require_file(a.input, "input image")
    lr = _rgb(D.read_png(a.input)) / 255.0
    res = forward_infer(model, lr)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    cell = a.cell
    for k in range(model.n_blocks):
        _write_png(out / f"smm{k}_spatial.png", res.spatial_masks[k][None] * 255.0)
        strip = np.stack(res.channel_masks[k]).astype(np.float32)  # (L, C), 1 = dense
        strip = np.kron(strip, np.ones((cell, cell), dtype=np.float32))
        _write_png(out / f"smm{k}_channel.png", strip[None] * 255.0)
    print(f"{model.n_blocks} spatial + {model.n_blocks} channel masks -> {out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="smsr", description="Sparse-mask super-resolution toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on a directory of HR PNGs")
    p.add_argument("--data", required=True, help="directory of HR PNG images")
    p.add_argument("--scale", type=int, default=2, choices=(2, 3, 4))
    p.add_argument("--lambda0", type=float, default=0.1)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--heuristic-mask", type=float, metavar="ALPHA",
                   help="fix spatial masks to luminance gradients above ALPHA")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="CSV training log (default: OUT with .csv suffix)")
    p.add_argument("--val-every", type=int, default=4,
                   help="hold out every n-th image for the sparsity probe (0: none)")
    p.add_argument("--checkpoint", help="checkpoint file (default: OUT with .ckpt suffix)")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sr", help="super-resolve one image")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, help="assert the model scale")
    p.add_argument("--report-sparsity", action="store_true")
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("eval", help="PSNR/SSIM on a directory of HR images")
    p.add_argument("--model", help="model file, or 'bicubic'")
    p.add_argument("--sr", help="directory of ready-made SR PNGs named like the HR ones")
    p.add_argument("--hr", required=True)
    p.add_argument("--scale", type=int, required=True, choices=(2, 3, 4))
    p.add_argument("--out", help="CSV report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-dataset", help="write HR/LR image pairs")
    p.add_argument("--hr", help="directory of source HR PNGs")
    p.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic images")
    p.add_argument("--size", type=int, default=128, help="synthetic image size")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=2, choices=(2, 3, 4))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("analyze", help="feature and mask sparsity reports")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="directory of LR input PNGs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scale", type=int, help="assert the model scale")
    p.add_argument("--seed", type=int, default=0, help="seed of the FLOP sweep masks")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="dense vs sparse single-image timing")
    p.add_argument("--model", help="model file (default: random weights)")
    p.add_argument("--scale", type=int, choices=(2, 3, 4))
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--blocks", type=int, default=5)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--size", type=_size, default=(128, 128), help="LR size HxW")
    p.add_argument("--sparsity", type=_unit, help="force synthetic masks at this sparsity")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-masks", help="write spatial and channel masks as PNGs")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scale", type=int, help="assert the model scale")
    p.add_argument("--cell", type=int, default=8, help="pixels per channel-mask cell")
    p.set_defaults(func=cmd_export_masks)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ModelFormatError, FileNotFoundError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
