"""Command-line entry point for the whole laboratory.

Exit codes: 0 success, 1 usage error, 2 data/config error,
3 numerical failure.
"""

import argparse
import base64
import csv
import json
import os
import struct
import sys
import zlib
from pathlib import Path

# 256 RGB rows of the perceptually-uniform map used by every figure,
# zlib+base64 so the table ships inside the module.
_COLORMAP_B64 = (
    "eNoBAAP//EQBVEQCVkUEV0UFWUYHWkYIXEYKXUYLXkcNYEcOYUcQY0cRZEcTZUgUZ0gWaEgX"
    "aUgYakgabEgbbUgcbkgdb0gfcEggcUghc0gjdEgkdUgldkgmd0goeEgpeUcqekcsekcte0cu"
    "fEcvfUYwfkYyfkYzf0Y0gEU1gUU3gUU4gkQ5g0Q6g0Q7hEM9hEM+hUI/hUJAhkJBhkFCh0FE"
    "h0BFiEBGiD9HiD9IiT5JiT5KiT5Mij1Nij1OijxPijxQiztRiztSizpTizpUjDlVjDlWjDhY"
    "jDhZjDdajDdbjTZcjTZdjTVejTVfjTRgjTRhjTNijTNjjTJkjjJljjFmjjFnjjFojjBpjjBq"
    "ji9rji9sji5tji5uji5vji1wji1xjixxjixyjixzjit0jit1jip2jip3jip4jil5jil6jil7"
    "jih8jih9jid+jid/jieAjiaBjiaCjiaCjiWDjiWEjiWFjiSGjiSHjiOIjiOJjiOKjSKLjSKM"
    "jSKNjSGOjSGPjSGQjSGRjCCSjCCSjCCTjB+UjB+Vix+Wix+Xix+Yix+Zih+aih6bih6ciR6d"
    "iR+eiR+fiB+giB+hiB+hhx+ihyCjhiCkhiGlhSGmhSKnhSKohCOpgySqgyWrgiWsgiatgSet"
    "gSiugCmvfyqwfyyxfi2yfS6zfC+0fDG1ezK2ejS2eTW3eTe4eDi5dzq6dju7dT28dD+8c0C9"
    "ckK+cUS/cEbAb0jBbkrBbUzCbE7Da1DEalLFaVTFaFbGZ1jHZVrIZFzIY17JYmDKYGPLX2XL"
    "XmfMXGnNW2zNWm7OWHDPV3PQVnXQVHfRU3rRUXzSUH/TToHTTYTUS4bVSYnVSIvWRo7WRZDX"
    "Q5PXQZXYQJjYPpvZPJ3ZO6DaOaLaN6XbNqjbNKrcMq3cMLDdL7LdLbXeK7jeKbreKL3fJsDf"
    "JcLfI8XgIcjgIMrhH83hHdDhHNLiG9XiGtjiGdrjGd3jGN/jGOLkGOXkGefkGerlGuzlG+/l"
    "HPHlHfTmHvbmIPjmIfvnI/3nJRfoSno="
)

_colormap_cache = None


def colormap():
    """[256, 3] uint8 lookup table."""
    global _colormap_cache
    if _colormap_cache is None:
        import numpy as np
        raw = zlib.decompress(base64.b64decode(_COLORMAP_B64))
        _colormap_cache = np.frombuffer(raw, dtype=np.uint8).reshape(256, 3)
    return _colormap_cache


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: {message}")


# ---------------------------------------------------------------------------
# figure and report writers


def _png_chunk(tag, payload):
    body = tag + payload
    return (struct.pack(">I", len(payload)) + body
            + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF))


def write_png(path, rgb):
    """Minimal deterministic 8-bit RGB PNG encoder."""
    import numpy as np
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, depth = rgb.shape
    if depth != 3:
        raise ValueError(f"expected [H, W, 3] RGB, got {rgb.shape}")
    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    raw = b"".join(b"\x00" + rgb[r].tobytes() for r in range(h))
    blob = (b"\x89PNG\r\n\x1a\n"
            + _png_chunk(b"IHDR", header)
            + _png_chunk(b"IDAT", zlib.compress(raw, 9))
            + _png_chunk(b"IEND", b""))
    path = Path(path)
    path.write_bytes(blob)
    return path


def render_heatmap(field, path, vmin=None, vmax=None, scale=1):
    """2-D grid -> PNG, linear map over [vmin, vmax], row 0 on top."""
    import numpy as np
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError(f"expected a 2-D field, got shape {field.shape}")
    if not np.isfinite(field).all():
        raise ValueError("field contains non-finite values")
    if scale < 1 or int(scale) != scale:
        raise ValueError(f"scale must be a positive integer, got {scale}")
    vmin = float(field.min()) if vmin is None else float(vmin)
    vmax = float(field.max()) if vmax is None else float(vmax)
    if vmax <= vmin:
        vmax = vmin + 1.0     # constant field: single color
    idx = np.clip(np.rint((field - vmin) / (vmax - vmin) * 255), 0, 255)
    rgb = colormap()[idx.astype(np.intp)]
    if scale > 1:
        rgb = np.repeat(np.repeat(rgb, int(scale), axis=0), int(scale),
                        axis=1)
    return write_png(path, rgb)


_REPORT_COLUMNS = ("id", "mae", "mse", "ssim", "mssim", "soft_f_beta",
                   "soft_f_beta_degenerate")


def report_to_json(report) -> dict:
    return {"per_sample": report.per_sample,
            "aggregate": report.aggregate,
            "provenance": report.provenance}


def report_from_json(obj):
    from . import metrics
    return metrics.MetricsReport(per_sample=obj["per_sample"],
                                 aggregate=obj["aggregate"],
                                 provenance=obj.get("provenance", {}))


def export_report(report, base_path):
    """Write <base>.csv and <base>.json; returns both paths."""
    base = Path(base_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    json_path = base.with_suffix(".json")
    json_path.write_text(
        json.dumps(report_to_json(report), indent=1, sort_keys=True))
    csv_path = base.with_suffix(".csv")
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_REPORT_COLUMNS, restval="")
        writer.writeheader()
        for row in report.per_sample:
            writer.writerow({k: row.get(k, "") for k in _REPORT_COLUMNS})
        agg = dict(report.aggregate)
        agg["id"] = "aggregate"
        writer.writerow({k: agg.get(k, "") for k in _REPORT_COLUMNS})
    return csv_path, json_path


# ---------------------------------------------------------------------------
# subcommand handlers


def _parse_int_list(text):
    try:
        return [int(tok) for tok in str(text).split(",") if tok != ""]
    except ValueError:
        raise ValueError(f"expected a comma-separated integer list, "
                         f"got {text!r}")


def cmd_generate(args):
    from . import dataset

    profile = dataset.get_profile(args.profile)
    out = Path(args.out)
    if args.new_domain:
        manifest = dataset.build_new_domain_dataset(
            out, args.per_type, profile, base_seed=args.seed,
            noise_std=args.noise_std)
    else:
        manifest = dataset.build_dataset(
            out, args.per_type, profile, base_seed=args.seed,
            types=tuple(_parse_int_list(args.types)), fault=args.fault,
            noise_std=args.noise_std or 0.0)
    total = len(manifest.entries)
    if not args.no_split:
        dataset.split(manifest, seed=args.seed,
                      sizes=dataset.default_split_sizes(total))
    print(f"wrote {total} samples to {out} "
          f"({len(manifest.skipped)} skipped)")
    if manifest.splits:
        sizes = {k: len(v) for k, v in manifest.splits.items()}
        print(f"splits: {sizes}")
    return 0


def cmd_simulate(args):
    import numpy as np
    from . import containers, dataset, geomodel, wavesim

    profile = dataset.get_profile(args.profile)
    if args.model:
        values = containers.read_tensor(args.model)
        spec = None
    else:
        spec = geomodel.sample_layer_spec(
            args.seed, args.interfaces, H=profile.height, W=profile.width,
            fault=args.fault)
        values = geomodel.rasterize(
            spec, H=profile.height, W=profile.width).values
    model = geomodel.VelocityModel(values=np.asarray(values,
                                                     dtype=np.float64),
                                   spacing=profile.spacing, spec=spec)
    cube = wavesim.simulate_cube(model, profile.geometry(),
                                 profile.wavelet(), profile.grid())
    cube, _ = dataset.subsample_receivers(cube, profile.receiver_count)
    cube = dataset.normalize_seismic(cube).astype(np.float32)
    containers.write_tensor(args.out, cube)
    if args.model_out:
        containers.write_tensor(args.model_out,
                                np.asarray(values, dtype=np.float32))
    print(f"wrote cube {list(cube.shape)} to {args.out}")
    return 0


def _require(path, what):
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def cmd_train(args):
    from . import dataset, harness

    manifest_path = _require(args.manifest, "dataset manifest")
    manifest = dataset.DatasetManifest.load(manifest_path)
    profile_name = manifest.profile.get("name", "")

    overrides = {}
    if args.config:
        overrides.update(json.loads(Path(args.config).read_text()))
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    elif "epochs" not in overrides:
        overrides["epochs"] = 30 if profile_name == "toy" else 200
    if args.base_lr is not None:
        overrides["base_lr"] = args.base_lr
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.keep_receivers is not None:
        overrides["keep_receivers"] = args.keep_receivers
    if args.time_steps is not None:
        overrides["time_steps"] = args.time_steps
    if args.stop_loss is not None:
        overrides["stop_loss"] = args.stop_loss
    overrides["seed"] = args.seed
    if "val_metrics" in overrides:
        overrides["val_metrics"] = tuple(overrides["val_metrics"])

    config = harness.variant_config(args.variant, manifest_path, args.out,
                                    profile_name, **overrides)

    def log_fn(epoch, iteration, values):
        shown = ", ".join(f"{k}={v:.4f}" for k, v in values.items())
        print(f"epoch {epoch:3d} iter {iteration:5d}  {shown}")

    result = harness.train(config, log_fn=log_fn)
    print(f"best epoch {result.best_epoch} "
          f"({config.best_metric}={result.best_value:.4f})")
    print(f"checkpoints in {result.run_dir / 'checkpoints'}")
    return 0


def cmd_evaluate(args):
    from . import dataset, harness

    ckpt = _require(args.checkpoint, "checkpoint")
    manifest = dataset.DatasetManifest.load(
        _require(args.manifest, "dataset manifest"))
    report = harness.evaluate_checkpoint(ckpt, manifest, args.split)
    out = Path(args.out) if args.out else Path("reports") / args.split
    csv_path, json_path = export_report(report, out)
    shown = {k: round(v, 6) for k, v in report.aggregate.items()}
    print(f"{args.split}: {shown}")
    print(f"wrote {csv_path} and {json_path}")
    return 0


def cmd_invert(args):
    from . import harness

    ckpt = _require(args.checkpoint, "checkpoint")
    cube = _require(args.cube, "cube file")
    vel = harness.invert(ckpt, cube, args.out)
    print(f"wrote velocity model {list(vel.shape)} to {args.out} "
          f"(range {vel.min():.0f}..{vel.max():.0f} m/s)")
    if args.png:
        render_heatmap(vel, args.png, vmin=1500.0, vmax=4000.0,
                       scale=args.scale)
        print(f"wrote {args.png}")
    return 0


def cmd_featuremaps(args):
    from . import dataset, harness

    ckpt = _require(args.checkpoint, "checkpoint")
    manifest = dataset.DatasetManifest.load(
        _require(args.manifest, "dataset manifest"))
    report = harness.featuremap_report(
        ckpt, manifest, split=args.split, source_index=args.source,
        group_size=args.group_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"source_index": report.source_index,
               "group_size": report.group_size,
               "n_samples": report.n_samples, "groups": []}
    for g in report.groups:
        lo, hi = g.receivers
        png = out / f"receivers_{lo:02d}_{hi:02d}.png"
        render_heatmap(g.image, png, scale=args.scale)
        summary["groups"].append({
            "receivers": [lo, hi], "centroid": g.centroid,
            "image": png.name,
        })
    (out / "featuremaps.json").write_text(
        json.dumps(summary, indent=1, sort_keys=True))
    centroids = [round(g["centroid"], 3) for g in summary["groups"]]
    print(f"group centroids (columns): {centroids}")
    print(f"wrote {len(report.groups)} group images to {out}")
    return 0


def cmd_dropout_eval(args):
    from . import dataset, harness

    ckpt = _require(args.checkpoint, "checkpoint")
    manifest = dataset.DatasetManifest.load(
        _require(args.manifest, "dataset manifest"))
    keeps = _parse_int_list(args.keep_receivers)
    reports = harness.receiver_dropout_eval(
        ckpt, manifest, keeps, split=args.split, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(reports, indent=1, sort_keys=True))
    for r in reports:
        print(f"keep {r['keep']:3d}: mssim={r['aggregate']['mssim']:.4f} "
              f"mse={r['aggregate']['mse']:.5f}")
    print(f"wrote {out}")
    return 0


def cmd_finetune(args):
    from . import dataset, harness

    ckpt = _require(args.checkpoint, "checkpoint")
    new_manifest = dataset.DatasetManifest.load(
        _require(args.new_manifest, "new-domain manifest"))
    old_manifest = dataset.DatasetManifest.load(
        _require(args.old_manifest, "old-domain manifest"))
    result = harness.finetune(ckpt, new_manifest, old_manifest, args.out,
                              epochs=args.epochs, base_lr=args.base_lr,
                              seed=args.seed)
    report = {"before": result.before, "after": result.after,
              "checkpoint": str(result.checkpoint)}
    out = Path(args.out) / "reports" / "finetune.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1, sort_keys=True))
    for domain in ("new", "old"):
        print(f"{domain} domain mssim: "
              f"{result.before[domain]['mssim']:.4f} -> "
              f"{result.after[domain]['mssim']:.4f}")
    print(f"wrote {out}")
    return 0


def cmd_plot(args):
    from . import containers

    field = containers.read_tensor(_require(args.input, "tensor file"))
    if field.ndim == 3:
        if args.shot is None:
            raise ValueError(
                f"input has shape {list(field.shape)}; pick one gather "
                f"with --shot")
        field = field[args.shot]
    render_heatmap(field, args.out, vmin=args.vmin, vmax=args.vmax,
                   scale=args.scale)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="seisinv",
                     description="Desk-scale seismic inversion laboratory.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    p = sub.add_parser("generate", help="synthesize a dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-type", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", choices=("toy", "paper"), default="toy")
    p.add_argument("--noise-std", type=float, default=None,
                   help="absolute noise std after normalization")
    p.add_argument("--fault", action="store_true")
    p.add_argument("--types", default="1,2,3,4",
                   help="comma list of interface counts")
    p.add_argument("--new-domain", action="store_true",
                   help="faulted/busier models with ~0 dB noise")
    p.add_argument("--no-split", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate", help="one model -> normalized cube")
    p.add_argument("--model", help="velocity tensor (.sinv); "
                                   "omit to sample one")
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=("toy", "paper"), default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--interfaces", type=int, default=2)
    p.add_argument("--fault", action="store_true")
    p.add_argument("--model-out", help="also store the sampled model")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train one experiment variant")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="eta",
                   choices=("alpha", "beta", "gamma", "delta", "epsilon",
                            "zeta", "eta"))
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--base-lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--keep-receivers", type=int, default=None)
    p.add_argument("--time-steps", type=int, default=None)
    p.add_argument("--stop-loss", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="valid")
    p.add_argument("--out", help="report base path (writes .csv/.json)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("invert", help="cube file -> velocity model file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--png", help="also render a heatmap")
    p.add_argument("--scale", type=int, default=1)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("featuremaps", help="grouped mean feature maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="valid")
    p.add_argument("--source", type=int, default=0)
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_featuremaps)

    p = sub.add_parser("dropout-eval",
                       help="evaluate with random receiver subsets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--keep-receivers", required=True,
                   help="comma list of receiver counts to keep")
    p.add_argument("--split", default="valid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dropout_eval)

    p = sub.add_parser("finetune", help="adapt a checkpoint to a new domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--new-manifest", required=True)
    p.add_argument("--old-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--base-lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("plot", help="render a stored tensor as a heatmap")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vmin", type=float, default=None)
    p.add_argument("--vmax", type=float, default=None)
    p.add_argument("--scale", type=int, default=1)
    p.add_argument("--shot", type=int, default=None,
                   help="gather index when the input is a 3-D cube")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    if os.environ.get("SEISINV_DETERMINISTIC"):
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1

    from . import containers, dataset, harness, wavesim
    try:
        return args.func(args)
    except (harness.TrainingDiverged, wavesim.SimulationError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (dataset.ManifestError, containers.ContainerError,
            FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
