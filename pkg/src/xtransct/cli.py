"""``xtransct`` command line.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import statistics
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .config import RunConfig, load_run_config
from .drr import biplanar_pair, load_projection, save_projection
from .errors import ConfigurationError, ContractError, FormatError, NumericError
from .model import Checkpoint, XTransCT, load_checkpoint, save_checkpoint
from .phantom import PhantomSpec, make_phantom
from .training import Sample, TraceWriter, train_loop
from .volume import load_mask, load_volume, save_volume

log = logging.getLogger("xtransct")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
JSON_VERSION = 1


class UsageError(Exception):
    """Raised by the argument parser instead of exiting."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_json(path: Path, obj: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"version": JSON_VERSION, **obj}, indent=2, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory is not writable: {out}")
    return out


def _render_fn(cfg: RunConfig):
    geo = cfg.geometry
    base = geo.projection(geo.angles[0])
    return lambda vol: biplanar_pair(vol, geo.angles, base, geo.mu, cfg.workers)


def _phantom_spec(cfg: RunConfig, seed: int) -> PhantomSpec:
    ph = cfg.phantom
    return PhantomSpec(ph.kind, ph.dims, seed, spacing=(ph.spacing_mm,) * 3)


def synthetic_dataset(cfg: RunConfig, count: int | None = None) -> list[Sample]:
    render = _render_fn(cfg)
    out = []
    for i in range(count or cfg.phantom.count):
        v, m = make_phantom(_phantom_spec(cfg, cfg.seed + i))
        out.append(Sample(f"phantom_{cfg.seed + i}", v, m, render=render))
    return out


def load_dataset(directory, cfg: RunConfig) -> list[Sample]:
    """Every ``<name>.vol`` in ``directory`` with its optional ``<name>.mask``."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {d}")
    render = _render_fn(cfg)
    out = []
    for vol_path in sorted(d.glob("*.vol")):
        mask_path = vol_path.with_suffix(".mask")
        mask = load_mask(mask_path) if mask_path.exists() else None
        out.append(Sample(vol_path.stem, load_volume(vol_path), mask, render=render))
    if not out:
        raise ConfigurationError(f"dataset directory {d} contains no .vol files")
    return out


def _deciles(values: np.ndarray) -> list[float]:
    return [round(float(x), 4) for x in np.quantile(values, np.linspace(0, 1, 11))]


# -- commands -------------------------------------------------------------------

def cmd_phantom(args, cfg: RunConfig) -> int:
    specs = [_phantom_spec(cfg, cfg.seed + i) for i in range(cfg.phantom.count)]
    out = _out_dir(cfg)
    for i, spec in enumerate(specs):
        name = args.name if cfg.phantom.count == 1 else f"{args.name}_{i:03d}"
        v, m = make_phantom(spec)
        save_volume(v, out / f"{name}.vol")
        save_volume(m, out / f"{name}.mask")
        print(f"{name}: kind {spec.kind} dims {'x'.join(map(str, v.dims))} seed {spec.seed} "
              f"mask voxels {m.count}")
        print(f"  deciles {' '.join(f'{x:.3f}' for x in _deciles(v.values))}")
    return EXIT_OK


def cmd_drr(args, cfg: RunConfig) -> int:
    vol = load_volume(args.volume)
    out = _out_dir(cfg)
    stem = Path(args.volume).stem
    geo = cfg.geometry
    pair = biplanar_pair(vol, geo.angles, geo.projection(geo.angles[0]), geo.mu, cfg.workers)
    views = []
    for i, (ang, p) in enumerate(zip(geo.angles, pair)):
        path = out / f"{stem}_view{i}.{args.format}"
        save_projection(p, path, bits=args.bits, extra={"angle_deg": float(ang), "source": str(args.volume)})
        views.append({"file": path.name, "angle_deg": float(ang), "geometry": p.geometry.to_dict()})
        print(f"{path}: angle {ang:g} deg, {p.pixels.shape[1]}x{p.pixels.shape[0]} px, "
              f"range [{p.pixels.min():.3f}, {p.pixels.max():.3f}]")
    _write_json(out / f"{stem}_geometry.json", {"volume": str(args.volume), "mu": geo.mu, "views": views})
    return EXIT_OK


def _check_dims(samples, model_cfg):
    n = model_cfg.output_size
    bad = [f"{s.name}: {s.volume.dims}" for s in samples if s.volume.dims != (n, n, n)]
    if bad:
        raise ConfigurationError(f"samples must be {n}^3 for this model; got " + ", ".join(bad))


def cmd_train(args, cfg: RunConfig) -> int:
    data = load_dataset(cfg.data, cfg) if cfg.data else synthetic_dataset(cfg, 1 if args.overfit else None)
    validation = load_dataset(cfg.validation, cfg) if cfg.validation else None
    if args.overfit and validation is None:
        validation = data[:1]
    _check_dims(data + (validation or []), cfg.model)
    out = _out_dir(cfg)
    model = XTransCT(cfg.model)
    trace = TraceWriter(out / "loss_trace.csv")

    def save_periodic(ck: Checkpoint):
        save_checkpoint(ck, out / f"checkpoint_{ck.step:06d}.ckpt")

    t0 = time.perf_counter()
    try:
        res = train_loop(data, cfg.train, model, overfit=bool(args.overfit), on_trace=trace,
                         validation=validation if cfg.train.validate_every else None,
                         on_checkpoint=save_periodic)
    except NumericError as exc:
        dump = {"step": getattr(exc, "step", None), "loss": repr(getattr(exc, "loss", None)), "error": str(exc)}
        _write_json(out / "nan_dump.json", dump)
        raise
    finally:
        trace.close()
    wall = time.perf_counter() - t0
    ckpt_path = save_checkpoint(res.checkpoint, out / "model.ckpt")
    first, last = res.trace[0].loss, res.trace[-1].loss
    summary = {
        "steps": res.checkpoint.step,
        "stage": res.checkpoint.stage,
        "initial_loss": first,
        "final_loss": last,
        "loss_reduction": first / last if last > 0 else "inf",
        "overfit": bool(args.overfit),
        "samples": [s.name for s in data[:1] if args.overfit] or [s.name for s in data],
        "wall_s": wall,
        "validation": res.validation,
        "config": cfg.to_dict(),
    }
    if validation:
        rep = metrics.evaluate(model, validation, chunk_size=cfg.chunk_size)
        summary["final_metrics"] = rep.to_dict()
    _write_json(out / "train.json", summary)
    print(f"trained {res.checkpoint.step} steps (stage {res.checkpoint.stage}) in {wall:.1f} s; "
          f"loss {first:.4g} -> {last:.4g}; checkpoint {ckpt_path}")
    if "final_metrics" in summary:
        fm = summary["final_metrics"]
        print(f"  ssim {fm['ssim']['mean']} psnr {fm['psnr_db']['mean']} dice {fm['dice']['mean']}")
    return EXIT_OK


def _model_from(ckpt: Checkpoint, cfg: RunConfig | None, dtype: str | None):
    """Build from the checkpoint's config, or load its weights into an explicit config."""
    if cfg is None:
        return ckpt.build_model(dtype)
    mcfg = cfg.model if dtype is None else cfg.model.replace(dtype=dtype)
    model = XTransCT(mcfg)
    model.load_state_dict(ckpt.params, dtype=mcfg.np_dtype)
    return model


def cmd_infer(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = _model_from(ckpt, cfg if args.config else None, args.dtype)
    img1, img2 = load_projection(args.img1), load_projection(args.img2)
    vol, info = model.infer(img1, img2, chunk_size=cfg.chunk_size, workers=cfg.workers)
    out = _out_dir(cfg)
    save_volume(vol, out / "recon.vol")
    from .plotting import save_montage

    save_montage(out / "recon_montage.png", {"reconstruction": vol}, title=Path(args.checkpoint).name)
    _write_json(out / "timing.json", {**info, "dims": list(vol.dims), "block": model.config.block})
    print(f"{out / 'recon.vol'}: {'x'.join(map(str, vol.dims))} from {info['query_count']} queries "
          f"in {info['infer_ms']:.1f} ms (chunk {info['chunk_size']})")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    from .plotting import save_montage

    ckpt = load_checkpoint(args.checkpoint)
    model = _model_from(ckpt, cfg if args.config else None, args.dtype)
    cfg = replace(cfg, model=model.config).validate(("geometry", "model"))
    samples = load_dataset(args.data, cfg)
    _check_dims(samples, model.config)
    missing = [s.name for s in samples if s.mask is None]
    if missing:
        raise ConfigurationError(f"samples without a ground-truth mask: {', '.join(missing)}")
    band = (args.band_lo, args.band_hi)
    report = metrics.evaluate(model, samples, band=band, chunk_size=cfg.chunk_size)
    out = _out_dir(cfg)
    report.config["checkpoint"] = str(args.checkpoint)
    report.write(out / "report.json", out / "samples.csv")
    for s in samples[:args.montages]:
        pred, _ = model.infer(*s.projections(), chunk_size=cfg.chunk_size)
        save_montage(out / f"montage_{s.name}.png", {"truth": s.volume, "reconstruction": pred}, title=s.name)
    rows = report.samples
    print("sample_id,ssim,psnr_db,dice,infer_ms")
    for r in rows:
        print(f"{r.sample_id},{r.ssim:.5f},{r.psnr_db:.3f},{r.dice:.4f},{r.infer_ms:.1f}")
    agg = report.aggregate()
    print(f"mean,{agg['ssim']['mean']},{agg['psnr_db']['mean']},{agg['dice']['mean']},{agg['infer_ms']['mean']}")
    return EXIT_OK


def machine_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or None,
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "xtransct": __version__,
    }


def _shared(params: dict) -> dict:
    return {k: v for k, v in params.items() if not k.startswith("head.out.")}


def block_variants(base, params: dict | None = None) -> tuple:
    """The same network at block 4 and block 1 with equal output size.

    Every layer except the final head projection shares weights (taken from
    ``params`` when given); the two head projections keep their seeded init.
    """
    n = base.output_size
    if n % 4:
        raise ConfigurationError(f"benchmark needs an output size divisible by 4, got {n}")
    b4 = XTransCT(base.replace(block=4, query_grid=n // 4))
    b1 = XTransCT(base.replace(block=1, query_grid=n))
    shared = _shared(params if params is not None else b4.state_dict())
    for m in (b4, b1):
        m.load_state_dict({**m.state_dict(), **shared}, dtype=m.dtype)
    return b4, b1


def time_inference(model, imgs, repeats: int, chunk_size: int, workers: int = 1) -> list[float]:
    model.infer(*imgs, chunk_size=chunk_size, workers=workers)  # warm-up
    times = []
    for _ in range(repeats):
        _, info = model.infer(*imgs, chunk_size=chunk_size, workers=workers)
        times.append(info["infer_ms"])
    return times


def cmd_bench(args, cfg: RunConfig) -> int:
    params = None
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        base, params = ck.config, ck.params
    else:
        base = cfg.model
    if args.dtype:
        base = base.replace(dtype=args.dtype)
    b4, b1 = block_variants(base, params)
    n = base.output_size
    spec = PhantomSpec(cfg.phantom.kind, n, cfg.seed)
    vol, _ = make_phantom(spec)
    geo = cfg.geometry
    imgs = biplanar_pair(vol, geo.angles, geo.projection(geo.angles[0]), geo.mu)
    results = {}
    for label, model in (("block4", b4), ("block1", b1)):
        times = time_inference(model, imgs, args.repeats, cfg.chunk_size, cfg.workers)
        results[label] = {
            "block": model.config.block,
            "query_grid": model.config.query_grid,
            "query_count": model.config.query_count,
            "median_ms": statistics.median(times),
            "times_ms": times,
        }
    speedup = results["block1"]["median_ms"] / results["block4"]["median_ms"]
    report = {
        "output_size": n,
        "repeats": args.repeats,
        "chunk_size": cfg.chunk_size,
        **results,
        "speedup": speedup,
        "query_ratio": results["block1"]["query_count"] / results["block4"]["query_count"],
        "machine": machine_descriptor(),
        "config": {"model": base.to_dict(), "geometry": cfg.to_dict()["geometry"], "checkpoint": args.checkpoint},
    }
    out = _out_dir(cfg)
    _write_json(out / "bench.json", report)
    print("variant,block,query_count,median_ms")
    for label in ("block4", "block1"):
        r = results[label]
        print(f"{label},{r['block']},{r['query_count']},{r['median_ms']:.2f}")
    print(f"speedup,{speedup:.2f}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

SCOPES = {
    "phantom": ("phantom",),
    "drr": ("geometry",),
    "train": ("phantom", "geometry", "model", "train"),
    "infer": (),
    "eval": ("geometry",),
    "bench": ("phantom", "geometry", "model"),
}


def _common(p):
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="seed for every random choice")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration value (repeatable)")
    p.add_argument("--chunk-size", type=int, help="decoder queries per chunk")
    p.add_argument("--workers", type=int, help="threads for ray casting and query chunks")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="xtransct", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=f"xtransct {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate synthetic phantom volumes and masks")
    _common(p)
    p.add_argument("--kind")
    p.add_argument("--dims", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--name", default="phantom")

    p = sub.add_parser("drr", help="render the two projections of a volume")
    _common(p)
    p.add_argument("volume")
    p.add_argument("--angles", help="two gantry angles in degrees, e.g. 45,135")
    p.add_argument("--detector", type=int)
    p.add_argument("--bits", type=int, default=16, choices=(8, 16))
    p.add_argument("--format", default="png", choices=("png", "pgm"))

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", help="directory of .vol/.mask training samples (default: synthesize)")
    p.add_argument("--validation", help="directory of held-out samples")
    p.add_argument("--overfit", type=int, choices=(0, 1), default=0, help="train on a single sample")
    p.add_argument("--steps", type=int)

    for name, hlp in (("infer", "reconstruct a volume from two projections"),
                      ("eval", "score a checkpoint on a test set")):
        p = sub.add_parser(name, help=hlp)
        _common(p)
        p.add_argument("checkpoint")
        if name == "infer":
            p.add_argument("img1")
            p.add_argument("img2")
        else:
            p.add_argument("data")
            p.add_argument("--band-lo", type=float, default=metrics.DEFAULT_CAVITY_BAND[0])
            p.add_argument("--band-hi", type=float, default=metrics.DEFAULT_CAVITY_BAND[1])
            p.add_argument("--montages", type=int, default=4, help="montage images to write")
        p.add_argument("--dtype", choices=("float32", "float64"))

    p = sub.add_parser("bench", help="time block-4 against block-1 decoding")
    _common(p)
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--repeats", type=int, default=11)
    p.add_argument("--dtype", choices=("float32", "float64"))
    return ap


COMMANDS = {"phantom": cmd_phantom, "drr": cmd_drr, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "bench": cmd_bench}


def _overrides(args) -> list[str]:
    ov = list(args.overrides)
    mapping = {"kind": "phantom.kind", "dims": "phantom.dims", "count": "phantom.count",
               "angles": "geometry.angles", "detector": "geometry.detector", "steps": "train.max_steps"}
    for attr, key in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            ov.append(f"{key}={val}")
    return ov


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        flags = {"seed": args.seed, "out": args.out, "chunk_size": args.chunk_size, "workers": args.workers,
                 "data": getattr(args, "data", None) if args.command == "train" else None,
                 "validation": getattr(args, "validation", None)}
        cfg = load_run_config(args.config, _overrides(args), scope=SCOPES[args.command], **flags)
        return COMMANDS[args.command](args, cfg)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
