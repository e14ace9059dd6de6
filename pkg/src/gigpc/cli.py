"""Command-line entry point.

Every subcommand writes into ``--out``. Options can also come from a
``--config`` file of ``key = value`` lines; flags given on the command line
win. The effective options are echoed to ``config.txt`` in the run directory
so the run can be repeated with ``--config out/config.txt``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import advae, fileio, metrics
from .fileio import DataError
from .geometry_image import from_point_cloud, render_raster
from .networks import PRESETS, Model
from .pointcloud import FAMILIES, crop_halfspace, normalize_unit_sphere, sample_mesh_surface, \
    synthetic_shape

log = logging.getLogger("gigpc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

REQUIRED = object()

# name -> (type, default, help); REQUIRED marks mandatory options
SCHEMAS: dict[str, dict[str, tuple]] = {
    "train": {
        "data": (str, REQUIRED, "dataset folder of .ply clouds"),
        "out": (str, REQUIRED, "run directory"),
        "preset": (str, "desk", f"architecture preset: {', '.join(PRESETS)}"),
        "seed": (int, 0, "random seed"),
        "epochs": (int, None, "ad-VAE epochs (preset default)"),
        "pretrain_epochs": (int, None, "VAE-only epochs run first (preset default)"),
        "batch_size": (int, 32, "mini-batch size"),
        "lr": (float, None, "Adam learning rate (preset default)"),
        "alpha": (float, 1.0, "prior weight"),
        "beta": (float, 0.1, "adversarial weight"),
        "conditional": (bool, False, "condition on labels.csv categories"),
    },
    "generate": {
        "ckpt": (str, REQUIRED, "checkpoint file"),
        "out": (str, REQUIRED, "output directory"),
        "count": (int, 1, "number of clouds"),
        "seed": (int, 0, "random seed"),
        "label": (str, None, "category for conditional models"),
    },
    "evaluate": {
        "ref": (str, REQUIRED, "reference cloud folder"),
        "out": (str, REQUIRED, "output directory"),
        "gen": (str, None, "generated cloud folder"),
        "ckpt": (str, None, "checkpoint to sample from instead of --gen"),
        "seed": (int, 0, "sampling seed for --ckpt"),
        "repeats": (int, 3, "sampling repeats for --ckpt"),
        "emd": (str, "exact", "EMD solver: exact, auction or auto"),
    },
    "interpolate": {
        "ckpt": (str, REQUIRED, "checkpoint file"),
        "a": (str, REQUIRED, "first cloud (.ply)"),
        "b": (str, REQUIRED, "second cloud (.ply)"),
        "out": (str, REQUIRED, "output directory"),
        "steps": (int, 8, "number of decoded steps, endpoints included"),
        "label": (str, None, "category for conditional models"),
    },
    "arith": {
        "ckpt": (str, REQUIRED, "checkpoint file"),
        "target": (str, REQUIRED, "cloud to edit (.ply)"),
        "plus": (str, REQUIRED, "cloud whose code is added"),
        "minus": (str, REQUIRED, "cloud whose code is subtracted"),
        "out": (str, REQUIRED, "output directory"),
        "label": (str, None, "category for conditional models"),
    },
    "complete": {
        "out": (str, REQUIRED, "output directory"),
        "data": (str, None, "train on this folder of complete clouds"),
        "ckpt": (str, None, "completion checkpoint for inference"),
        "input": (str, None, "partial cloud (.ply) to complete"),
        "preset": (str, "desk", "architecture preset"),
        "seed": (int, 0, "random seed"),
        "epochs": (int, None, "training epochs"),
        "batch_size": (int, 32, "mini-batch size"),
        "lr": (float, None, "Adam learning rate"),
        "keep_fraction": (float, 0.5, "fraction of points kept by the random half-space crop"),
    },
    "export-gim": {
        "out": (str, REQUIRED, "output .ppm file"),
        "ckpt": (str, None, "decode a random code from this checkpoint"),
        "input": (str, None, "or render this .ply cloud laid out row-major"),
        "width": (int, None, "image width for --input (default: square)"),
        "seed": (int, 0, "latent seed for --ckpt"),
        "label": (str, None, "category for conditional models"),
    },
    "sample-mesh": {
        "mesh": (str, REQUIRED, "input .obj or .ply mesh"),
        "out": (str, REQUIRED, "output .ply file"),
        "n": (int, 2048, "number of points"),
        "seed": (int, 0, "random seed"),
        "normalize": (bool, True, "centre and scale into the unit ball"),
    },
    "synth": {
        "out": (str, REQUIRED, "output dataset folder"),
        "family": (str, "ellipsoid", f"shape family: {', '.join(FAMILIES)}"),
        "count": (int, 100, "number of clouds"),
        "n": (int, 256, "points per cloud"),
        "seed": (int, 0, "random seed"),
        "val_fraction": (float, 0.1, "share listed in val.txt"),
        "test_fraction": (float, 0.2, "share listed in test.txt"),
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gigpc", description="Geometry-image point cloud generator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file supplying defaults")
        for key, (typ, default, text) in schema.items():
            flag = "--" + key.replace("_", "-")
            shown = "required" if default is REQUIRED else f"default {default}"
            p.add_argument(flag, dest=key, type=_bool if typ is bool else typ, default=None,
                           help=f"{text} ({shown})")
    return parser


def resolve_options(command: str, ns: argparse.Namespace) -> dict:
    schema = SCHEMAS[command]
    values = {k: (None if d is REQUIRED else d) for k, (_, d, _) in schema.items()}
    if ns.config:
        try:
            values.update(fileio.read_config(ns.config, {k: t for k, (t, _, _) in schema.items()}))
        except DataError as exc:
            raise UsageError(str(exc)) from None
    values.update({k: getattr(ns, k) for k in schema if getattr(ns, k) is not None})
    missing = [k for k, (_, d, _) in schema.items() if d is REQUIRED and values[k] is None]
    if missing:
        raise UsageError(f"{command}: missing --{missing[0].replace('_', '-')}")
    return values


def _echo(out: Path, opts: dict) -> None:
    fileio.ensure_dir(out)
    (out / "config.txt").write_text(fileio.format_config({k: v for k, v in opts.items()
                                                           if v is not None}))
    if "seed" in opts:
        (out / "seed.txt").write_text(f"{opts['seed']}\n")


def _load_model(path) -> tuple[Model, dict]:
    return fileio.load_checkpoint(path)


def _label_vector(model: Model, meta: dict, label: str | None):
    if model.label_dim == 0:
        if label is not None:
            raise UsageError("--label given but the checkpoint is unconditional")
        return None
    if label is None:
        raise UsageError("conditional checkpoint: --label is required")
    cats = meta.get("categories", "").split(",")
    if label not in cats:
        raise DataError(f"unknown category {label!r}; checkpoint knows {cats}")
    return fileio.one_hot([label], cats)[0]


def _posterior_mean(model: Model, path, label=None) -> np.ndarray:
    P = fileio.read_ply(path)
    q = model.encode(P, label)
    return q.mu.data[0]


def _write_clouds(out: Path, clouds, stem: str) -> list[Path]:
    paths = []
    for i, c in enumerate(clouds):
        p = out / f"{stem}_{i:03d}.ply"
        fileio.write_ply(p, c)
        paths.append(p)
    return paths


def _train_config(opts: dict, **extra) -> advae.TrainConfig:
    if opts["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {opts['preset']!r}; choose from {sorted(PRESETS)}")
    kw = {k: opts[k] for k in ("epochs", "pretrain_epochs", "batch_size", "lr", "seed")
          if opts.get(k) is not None}
    kw.update(extra)
    try:
        return advae.TrainConfig.for_preset(opts["preset"], **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(opts: dict) -> None:
    out = Path(opts["out"])
    cfg = _train_config(opts, conditional=opts["conditional"])
    try:
        weights = advae.LossWeights(opts["alpha"], opts["beta"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    root = Path(opts["data"])
    split = "train" if (root / "train.txt").exists() else None
    train = fileio.load_dataset(root, split, opts["conditional"])
    val = fileio.load_dataset(root, "val", opts["conditional"], train.categories) \
        if (root / "val.txt").exists() and (root / "val.txt").read_text().strip() else None
    _echo(out, opts)
    meta = {"preset": cfg.preset, "seed": str(cfg.seed),
            "categories": ",".join(train.categories or [])}
    with open(out / "loss_log.csv", "w") as fh:
        fh.write(advae.LOG_HEADER + "\n")

        def on_epoch(epoch, row):
            fh.write(f"{row[0]},{row[1]:.9g},{row[2]:.9g},{row[3]:.9g},{row[4]:.9g}\n")
            fh.flush()
            log.info("epoch %d  L_rec %.6g  L_prior %.6g  L_adG %.6g", *row[:3], row[4])

        result = advae.train_advae(train.clouds, cfg, weights, labels=train.labels,
                                   val_clouds=None if val is None else val.clouds,
                                   val_labels=None if val is None else val.labels,
                                   on_epoch=on_epoch)
    fileio.save_checkpoint(out / "final.gig", result.model, meta)
    if result.best_model is not None:
        fileio.save_checkpoint(out / "best.gig", result.best_model,
                               {**meta, "val_rec": repr(result.best_val)})


def cmd_generate(opts: dict) -> None:
    model, meta = _load_model(opts["ckpt"])
    label = _label_vector(model, meta, opts["label"])
    if opts["count"] < 1:
        raise UsageError("--count must be positive")
    out = Path(opts["out"])
    _echo(out, opts)
    z = np.random.default_rng(opts["seed"]).standard_normal((opts["count"], model.latent_dim))
    clouds = np.concatenate([model.decode(z[s:s + 32], label) for s in range(0, len(z), 32)])
    _write_clouds(out, clouds, "sample")


def _folder_clouds(path) -> np.ndarray:
    return fileio.load_dataset(path).clouds


def cmd_evaluate(opts: dict) -> None:
    if (opts["gen"] is None) == (opts["ckpt"] is None):
        raise UsageError("evaluate: give exactly one of --gen or --ckpt")
    if opts["emd"] not in ("exact", "auction", "auto"):
        raise UsageError("--emd must be exact, auction or auto")
    ref = _folder_clouds(opts["ref"])
    out = Path(opts["out"])
    _echo(out, opts)
    if opts["gen"] is not None:
        gen = _folder_clouds(opts["gen"])
        report = metrics.MetricReport([metrics.evaluate_sets(ref, gen, opts["emd"])], len(gen))
    else:
        model, meta = _load_model(opts["ckpt"])
        if model.label_dim:
            raise UsageError("evaluate: conditional checkpoints are not supported")
        report = metrics.evaluation_protocol(metrics.model_sampler(model), ref, opts["seed"],
                                             repeats=opts["repeats"], emd_method=opts["emd"])
    (out / "report.txt").write_text(report.text())
    sys.stdout.write(report.text())


def cmd_interpolate(opts: dict) -> None:
    model, meta = _load_model(opts["ckpt"])
    label = _label_vector(model, meta, opts["label"])
    out = Path(opts["out"])
    _echo(out, opts)
    za = _posterior_mean(model, opts["a"], label)
    zb = _posterior_mean(model, opts["b"], label)
    path = advae.interpolate_latent(model, za, zb, opts["steps"], label)
    _write_clouds(out, path, "step")
    (out / "report.txt").write_text(f"max_consecutive_chamfer,{advae.path_smoothness(path):.6g}\n")


def cmd_arith(opts: dict) -> None:
    model, meta = _load_model(opts["ckpt"])
    label = _label_vector(model, meta, opts["label"])
    out = Path(opts["out"])
    _echo(out, opts)
    z = [_posterior_mean(model, opts[k], label) for k in ("target", "plus", "minus")]
    fileio.write_ply(out / "result.ply", advae.latent_arithmetic(model, *z, label=label))


def cmd_complete(opts: dict) -> None:
    out = Path(opts["out"])
    if opts["data"] is not None:
        cfg = _train_config(opts, pretrain_epochs=0)
        full = fileio.load_dataset(opts["data"],
                                   "train" if (Path(opts["data"]) / "train.txt").exists() else None)
        rng = np.random.default_rng(opts["seed"])
        dirs = rng.standard_normal((len(full.clouds), 3))
        partial = np.stack([crop_halfspace(c, d, opts["keep_fraction"])
                            for c, d in zip(full.clouds, dirs)])
        _echo(out, opts)
        result = advae.train_completion(partial, full.clouds, cfg)
        (out / "loss_log.csv").write_text(result.log_text())
        fileio.save_checkpoint(out / "completion.gig", result.model,
                               {"preset": cfg.preset, "seed": str(cfg.seed), "task": "completion"})
        return
    if opts["ckpt"] is None or opts["input"] is None:
        raise UsageError("complete: give --data to train, or --ckpt and --input to complete a cloud")
    model, _ = _load_model(opts["ckpt"])
    _echo(out, opts)
    fileio.write_ply(out / "completed.ply", advae.complete_clouds(model, fileio.read_ply(opts["input"])))


def cmd_export_gim(opts: dict) -> None:
    if (opts["ckpt"] is None) == (opts["input"] is None):
        raise UsageError("export-gim: give exactly one of --ckpt or --input")
    if opts["ckpt"] is not None:
        model, meta = _load_model(opts["ckpt"])
        label = _label_vector(model, meta, opts["label"])
        z = np.random.default_rng(opts["seed"]).standard_normal((1, model.latent_dim))
        image = model.generate(z, label).data[0]
    else:
        P = fileio.read_ply(opts["input"])
        w = opts["width"] or int(round(np.sqrt(len(P))))
        if w < 1 or len(P) % w:
            raise DataError(f"{opts['input']}: {len(P)} points do not form rows of width {w}")
        image = from_point_cloud(P, len(P) // w, w)
    target = Path(opts["out"])
    fileio.ensure_dir(target.parent)
    render_raster(image, target)


def cmd_sample_mesh(opts: dict) -> None:
    if opts["n"] < 1:
        raise UsageError("--n must be positive")
    mesh = fileio.read_mesh(opts["mesh"])
    try:
        P = sample_mesh_surface(mesh, opts["n"], opts["seed"])
    except ValueError as exc:
        raise DataError(f"{opts['mesh']}: {exc}") from None
    if opts["normalize"]:
        P = normalize_unit_sphere(P)[0]
    target = Path(opts["out"])
    fileio.ensure_dir(target.parent)
    fileio.write_ply(target, P)


def cmd_synth(opts: dict) -> None:
    """Write a folder of random shapes from one family with split listings."""
    if opts["family"] not in FAMILIES:
        raise UsageError(f"unknown family {opts['family']!r}; choose from {FAMILIES}")
    if opts["count"] < 1 or opts["n"] < 2:
        raise UsageError("--count and --n must be positive")
    out = Path(opts["out"])
    fileio.ensure_dir(out)
    clouds = synthetic_family(opts["family"], opts["count"], opts["n"], opts["seed"])
    names = [p.name for p in _write_clouds(out, clouds, opts["family"])]
    n_val = int(round(opts["val_fraction"] * len(names)))
    n_test = int(round(opts["test_fraction"] * len(names)))
    n_train = len(names) - n_val - n_test
    for split, chunk in (("train", names[:n_train]), ("val", names[n_train:n_train + n_val]),
                         ("test", names[n_train + n_val:])):
        (out / f"{split}.txt").write_text("".join(f"{n}\n" for n in chunk))


def synthetic_family(family: str, count: int, n: int, seed) -> np.ndarray:
    """``count`` clouds of one family with randomised shape parameters, normalised to the unit ball.

    Ellipsoid axes, box half extents and sphere radii are drawn from [0.5, 1];
    torus tube radii from [0.2, 0.5] with R = 1. Boxes and tori are rescaled
    into the unit ball; ellipsoids and spheres already fit.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        if family == "ellipsoid":
            params = {"axes": rng.uniform(0.5, 1.0, 3)}
        elif family == "box":
            params = {"half_extents": rng.uniform(0.5, 1.0, 3)}
        elif family == "sphere":
            params = {"radius": rng.uniform(0.5, 1.0)}
        else:
            params = {"R": 1.0, "r": rng.uniform(0.2, 0.5)}
        cloud = synthetic_shape(family, n, rng.integers(2 ** 63), **params)
        out.append(normalize_unit_sphere(cloud)[0] if family in ("box", "torus") else cloud)
    return np.stack(out)


COMMANDS = {"train": cmd_train, "generate": cmd_generate, "evaluate": cmd_evaluate,
            "interpolate": cmd_interpolate, "arith": cmd_arith, "complete": cmd_complete,
            "export-gim": cmd_export_gim, "sample-mesh": cmd_sample_mesh, "synth": cmd_synth}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError("missing subcommand; choose from " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(message)s")
        opts = resolve_options(ns.command, ns)
        COMMANDS[ns.command](opts)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except advae.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
