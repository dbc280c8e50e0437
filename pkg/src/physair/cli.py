"""Command-line entry point tying the pieces into reproducible runs.

Five subcommands: ``ingest`` raw csv files into a canonical dataset
directory, ``synth`` a verification dataset from the simulator,
``train`` a seed ensemble, ``evaluate`` every model on the held-out
sensors, and ``interpolate`` a trained ensemble at arbitrary
coordinates.

Every knob can come from three places. Precedence, highest first:

1. a command-line flag,
2. a ``key = value`` line in the file named by ``--config``,
3. the built-in default (for ``dataset`` only, the PHYSAIR_DATA_DIR
   environment variable slots in between 2 and 3).

Commands that produce an output directory write ``resolved.cfg`` into
it with every knob expanded, so any run can be repeated with just
``--config <out>/resolved.cfg``.

Exit codes: 0 success, 2 anything wrong with the user's request or
data, 1 an internal failure worth a bug report.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    export_dataset,
    format_timestamp,
    gap_filter,
    ingest_pm25,
    ingest_wind,
    load_dataset,
    load_sensors,
    _atomic_write_text,
)
from .errors import ShapeError, ValidationError
from .evaluation import (
    SH_BIN_EDGES,
    benchmark_runners,
    binned_mae,
    density_experiment,
    evaluate_models,
    format_binned_table,
    format_density_table,
    format_metrics_table,
    ground_truth_bin_edges,
    high_sh_hours,
    infer_at_location,
    mae_ratio,
    summary_json,
    write_summary,
)
from .model import ModelConfig
from .simulate import default_synth_spec, make_synthetic_dataset
from .training import (
    TrainConfig,
    TrainingDiverged,
    evaluate_target_sensor,
    load_trained,
    make_split,
    train_ensemble,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USER = 2

DATA_DIR_ENV = "PHYSAIR_DATA_DIR"


# ---------------------------------------------------------------------------
# Flat key = value config files.
# ---------------------------------------------------------------------------

def read_config_file(path) -> dict:
    """Parse a flat config file: one ``key = value`` per line, # comments."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config file: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        if key in out:
            raise ValidationError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _cfg_text(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def write_resolved_config(out_dir, options: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved.cfg"
    lines = [f"{key} = {_cfg_text(options[key])}" for key in sorted(options)]
    _atomic_write_text(path, "\n".join(lines) + "\n")
    return path


# Coercers turn config-file strings into typed values. They double as
# argparse ``type=`` callables; ValidationError subclasses ValueError,
# so argparse turns a bad flag into its usual usage error (exit 2).

def parse_seeds(raw) -> tuple:
    try:
        seeds = tuple(int(p) for p in str(raw).split(",") if p.strip())
    except ValueError:
        raise ValidationError(f"bad seeds list {raw!r}; expected e.g. 0,1,2") from None
    if not seeds:
        raise ValidationError("seeds list is empty")
    if len(set(seeds)) != len(seeds):
        raise ValidationError(f"duplicate seeds in {seeds}")
    return seeds


def _to_bool(raw) -> bool:
    text = str(raw).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"expected a boolean, got {raw!r}")


def _to_int(raw) -> int:
    try:
        return int(str(raw), 10)
    except ValueError:
        raise ValidationError(f"expected an integer, got {raw!r}") from None


def _to_float(raw) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ValidationError(f"expected a number, got {raw!r}") from None


# Per-command schemas: key -> (coercer for file values, default).
# Flags resolved by argparse take precedence and skip the coercer.

_INGEST_SCHEMA = {
    "raw": (str, None),
    "out": (str, None),
    "max_gap_hours": (_to_int, 1),
}

_SYNTH_SCHEMA = {
    "out": (str, None),
    "hours": (_to_int, 2928),
    "seed": (_to_int, 0),
    "n_sensors": (_to_int, 40),
    "noise_sd": (_to_float, 0.5),
    "height": (_to_int, 32),
    "width": (_to_int, 32),
}

_TRAIN_SCHEMA = {
    "dataset": (str, None),
    "out": (str, None),
    "preset": (str, "S"),
    "window": (_to_int, 1),
    "local_norm": (str, "inverse"),
    "aggregation": (str, "sum"),
    "seeds": (parse_seeds, (0, 1, 2, 3, 4)),
    "split_seed": (_to_int, 0),
    "workers": (_to_int, 1),
    "resume": (_to_bool, False),
    "batch_size": (_to_int, 32),
    "lr": (_to_float, 1e-4),
    "max_epochs": (_to_int, 500),
    "patience": (_to_int, 20),
    "val_every": (_to_int, 1),
    "val_hour_stride": (_to_int, 1),
    "eval_batch": (_to_int, 64),
}

_EVALUATE_SCHEMA = {
    "dataset": (str, None),
    "models": (str, None),
    "out": (str, None),
    "idw_power": (_to_float, 1.0),
    "workers": (_to_int, 1),
    "density": (_to_bool, True),
    "gp_selection_stride": (_to_int, 4),
    "eval_batch": (_to_int, 64),
}

_INTERPOLATE_SCHEMA = {
    "dataset": (str, None),
    "models": (str, None),
    "out": (str, None),
    "lat": (_to_float, None),
    "lon": (_to_float, None),
    "hours": (str, None),
    "grid_lat": (str, None),
    "grid_lon": (str, None),
    "context": (str, "train"),
    "eval_batch": (_to_int, 64),
}


def resolve_options(args, schema: dict) -> dict:
    """Merge flags, config-file entries, and defaults into one dict."""
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = read_config_file(args.config)
        unknown = sorted(set(file_cfg) - set(schema))
        if unknown:
            raise ValidationError(
                f"unknown config keys for this command: {', '.join(unknown)}")
    out = {}
    for key, (coerce, default) in schema.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in file_cfg:
            try:
                out[key] = coerce(file_cfg[key])
            except ValidationError as exc:
                raise ValidationError(f"config key {key!r}: {exc}") from None
        elif key == "dataset" and os.environ.get(DATA_DIR_ENV):
            out[key] = os.environ[DATA_DIR_ENV]
        else:
            out[key] = default
    return out


def _require(options: dict, *keys: str) -> None:
    for key in keys:
        if options.get(key) in (None, ""):
            hint = f" or set {DATA_DIR_ENV}" if key == "dataset" else ""
            raise ValidationError(
                f"missing required option {key!r}; pass --{key.replace('_', '-')}"
                f" or put it in the config file{hint}")


def _load_dataset_arg(options: dict) -> Dataset:
    path = Path(options["dataset"])
    if not path.exists():
        raise ValidationError(f"dataset path does not exist: {path}")
    return load_dataset(path)


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    options = resolve_options(args, _INGEST_SCHEMA)
    _require(options, "raw", "out")
    raw = Path(options["raw"])
    sensors = load_sensors(raw / "sensors.csv")
    series, start, report = ingest_pm25(raw / "pm25.csv")
    known = {s.sensor_id for s in sensors}
    orphans = sorted(set(series) - known)
    if orphans:
        logger.warning("pm25.csv has %d sensor ids with no coordinates, "
                       "skipping: %s", len(orphans), ", ".join(orphans))
    n_hours = len(next(iter(series.values())))
    pm25 = np.full((n_hours, len(sensors)), np.nan)
    for j, sensor in enumerate(sensors):
        if sensor.sensor_id in series:
            pm25[:, j] = series[sensor.sensor_id]
    wind = ingest_wind(raw / "wind.csv", start, n_hours)
    dataset = Dataset(sensors=sensors, start=start, pm25=pm25, wind=wind,
                      provenance="real").validate()
    filtered, dropped, filled = gap_filter(
        dataset, max_gap_hours=options["max_gap_hours"])
    out = export_dataset(filtered, options["out"])
    write_resolved_config(out, options)
    print(f"ingested {len(filtered.sensors)} sensors x {filtered.hours} hours "
          f"-> {out}")
    print(f"dropped {len(dropped)} gappy sensors, filled {filled} isolated "
          f"hours; {report.rows_malformed} malformed rows skipped, "
          f"{report.values_clamped} negative values clamped")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    options = resolve_options(args, _SYNTH_SCHEMA)
    _require(options, "out")
    spec = default_synth_spec(
        hours=options["hours"], seed=options["seed"],
        n_sensors=options["n_sensors"], noise_sd=options["noise_sd"],
        height=options["height"], width=options["width"])
    dataset, result = make_synthetic_dataset(spec)
    out = export_dataset(dataset, options["out"])
    write_resolved_config(out, options)
    print(f"simulated {spec.height}x{spec.width} grid for {spec.hours} hours "
          f"({len(spec.sources)} source windows), sampled "
          f"{len(dataset.sensors)} sensors -> {out}")
    if result.clamped_readings:
        print(f"{result.clamped_readings} noisy readings clamped at zero")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    options = resolve_options(args, _TRAIN_SCHEMA)
    _require(options, "dataset", "out")
    if options["workers"] < 1:
        raise ValidationError("workers must be at least 1")
    dataset = _load_dataset_arg(options)
    split = make_split(dataset.sensor_ids(), seed=options["split_seed"])
    model_config = ModelConfig(preset=options["preset"],
                               window=options["window"],
                               local_norm=options["local_norm"],
                               aggregation=options["aggregation"])
    train_config = TrainConfig(
        batch_size=options["batch_size"], lr=options["lr"],
        max_epochs=options["max_epochs"], patience=options["patience"],
        val_every=options["val_every"],
        val_hour_stride=options["val_hour_stride"],
        eval_batch=options["eval_batch"])
    out = Path(options["out"])
    write_resolved_config(out, options)
    results = train_ensemble(dataset, split, model_config, train_config, out,
                             seeds=options["seeds"],
                             workers=options["workers"],
                             resume=options["resume"])
    for seed, result in zip(options["seeds"], results):
        state = result.state
        print(f"seed {seed}: best val mse "
              f"{state.best_val_mse:.4f} at epoch {state.best_epoch} "
              f"({result.wall_seconds:.0f}s) -> {result.checkpoint_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _discover_checkpoints(models_arg) -> list:
    path = Path(models_arg)
    if path.is_file():
        return [path]
    if path.is_dir():
        found = sorted(path.glob("seed*/best.ckpt"))
        if not found and (path / "best.ckpt").exists():
            found = [path / "best.ckpt"]
        if found:
            return found
    raise ValidationError(
        f"no checkpoints under {path}; expected a .ckpt file or a training "
        "output directory with seed*/best.ckpt")


def _load_ensemble(models_arg):
    """Load every checkpoint and insist they belong to one experiment."""
    paths = _discover_checkpoints(models_arg)
    models, normalizer, split = [], None, None
    for path in paths:
        model, norm, spl, _ = load_trained(path)
        if normalizer is None:
            normalizer, split = norm, spl
        elif norm != normalizer or spl.to_dict() != split.to_dict():
            raise ValidationError(
                f"{path} was trained with a different split or normalizer "
                "than its ensemble siblings")
        if models and model.config.to_dict() != models[0].config.to_dict():
            raise ValidationError(f"{path} has a mismatched model config")
        models.append(model)
    return paths, models, normalizer, split


def _gnn_eval_job(job):
    paths, dataset, context_ids, target, hours, batch_size, window = job
    models = []
    normalizer = None
    for path in paths:
        model, norm, _, _ = load_trained(path)
        models.append(model)
        if normalizer is None:
            normalizer = norm
    preds, _ = evaluate_target_sensor(models, normalizer, dataset,
                                      context_ids, target, hours,
                                      batch_size=batch_size, window=window)
    return preds


def _parallel_gnn_runner(ckpt_paths, pool, batch_size: int, window: int):
    """Per-target process parallelism; columns match the serial runner."""

    def run(dataset, context_ids, target_ids, hours):
        hours = np.asarray(hours, dtype=int)
        jobs = [(ckpt_paths, dataset, tuple(context_ids), target, hours,
                 batch_size, window) for target in target_ids]
        return np.column_stack(list(pool.map(_gnn_eval_job, jobs)))

    return run


def cmd_evaluate(args) -> int:
    options = resolve_options(args, _EVALUATE_SCHEMA)
    _require(options, "dataset", "models", "out")
    if options["workers"] < 1:
        raise ValidationError("workers must be at least 1")
    dataset = _load_dataset_arg(options)
    paths, models, normalizer, split = _load_ensemble(options["models"])
    window = models[0].config.window
    runners = benchmark_runners(
        dataset, split.train, models=models, normalizer=normalizer,
        idw_power=options["idw_power"],
        gp_selection_stride=options["gp_selection_stride"],
        batch_size=options["eval_batch"], window=window)
    pool = None
    try:
        if options["workers"] > 1:
            pool = ProcessPoolExecutor(max_workers=options["workers"])
            runners["gnn"] = _parallel_gnn_runner(
                paths, pool, options["eval_batch"], window)
        run = evaluate_models(dataset, split.train, split.test, runners,
                              label="test")
        high = high_sh_hours(run.sh)
        reports = run.reports() + run.reports(hour_mask=high,
                                              label="test-high-sh")
        gt_binned, sh_binned = {}, {}
        for name in runners:
            preds, truths, sh = run.flat(name)
            gt_binned[name] = binned_mae(
                truths, preds, truths,
                ground_truth_bin_edges(float(truths.max())),
                axis="ground_truth", label=name)
            sh_binned[name] = binned_mae(sh, preds, truths, SH_BIN_EDGES,
                                         axis="sh", label=name)
        sections = [format_metrics_table(reports),
                    "MAE by ground-truth bin (ug/m3):",
                    format_binned_table(gt_binned),
                    "MAE by spatial-heterogeneity bin:",
                    format_binned_table(sh_binned)]
        ratios = {}
        if "gnn" in runners:
            ratios = {
                "ground_truth": {n: mae_ratio(gt_binned[n], gt_binned["gnn"])
                                 for n in runners if n != "gnn"},
                "sh": {n: mae_ratio(sh_binned[n], sh_binned["gnn"])
                       for n in runners if n != "gnn"},
            }
        density = None
        if options["density"]:
            density = density_experiment(dataset, split.train, split.test,
                                         runners)
            sections += ["Mean MAE by removed context fraction:",
                         format_density_table(density)]
    finally:
        if pool is not None:
            pool.shutdown()
    out = Path(options["out"])
    out.mkdir(parents=True, exist_ok=True)
    text = "\n\n".join(sections) + "\n"
    _atomic_write_text(out / "report.txt", text)
    payload = summary_json(
        reports, density=density,
        binned={f"{b.axis}:{name}": b
                for table in (gt_binned, sh_binned)
                for name, b in table.items()},
        extra={"mae_ratio_vs_gnn": ratios,
               "checkpoints": [str(p) for p in paths],
               "context_sensors": list(split.train),
               "target_sensors": list(split.test)})
    write_summary(out / "report.json", payload)
    write_resolved_config(out, options)
    print(text, end="")
    print(f"report written to {out / 'report.txt'} and {out / 'report.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# interpolate
# ---------------------------------------------------------------------------

def _parse_hour_range(raw, n_hours: int) -> np.ndarray:
    """'12' -> [12]; '0:48' -> [0..47]; None -> every hour."""
    if raw is None:
        return np.arange(n_hours)
    text = str(raw)
    try:
        if ":" in text:
            lo_s, hi_s = text.split(":", 1)
            lo, hi = int(lo_s), int(hi_s)
        else:
            lo = int(text)
            hi = lo + 1
    except ValueError:
        raise ValidationError(
            f"bad hour range {raw!r}; expected H or LO:HI") from None
    if lo < 0 or hi > n_hours or lo >= hi:
        raise ValidationError(
            f"hour range [{lo}, {hi}) outside the dataset's {n_hours} hours")
    return np.arange(lo, hi)


def _parse_axis(raw, name: str) -> np.ndarray:
    parts = str(raw).split(":")
    if len(parts) != 3:
        raise ValidationError(f"bad {name} sweep {raw!r}; expected LO:HI:COUNT")
    try:
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ValidationError(f"bad {name} sweep {raw!r}") from None
    if count < 1:
        raise ValidationError(f"{name} sweep needs at least 1 point")
    return np.linspace(lo, hi, count)


def cmd_interpolate(args) -> int:
    options = resolve_options(args, _INTERPOLATE_SCHEMA)
    _require(options, "dataset", "models")
    dataset = _load_dataset_arg(options)
    paths, models, normalizer, split = _load_ensemble(options["models"])
    window = models[0].config.window
    if options["context"] == "train":
        context = split.train
    elif options["context"] == "all":
        context = tuple(dataset.sensor_ids())
    else:
        raise ValidationError("context must be 'train' or 'all'")
    hours = _parse_hour_range(options["hours"], dataset.hours)
    grid_mode = options["grid_lat"] is not None or options["grid_lon"] is not None
    point_mode = options["lat"] is not None or options["lon"] is not None
    if grid_mode == point_mode:
        raise ValidationError("pass either --lat/--lon or "
                              "--grid-lat/--grid-lon, not both or neither")
    timestamps = dataset.timestamps()
    lines = []
    if point_mode:
        if options["lat"] is None or options["lon"] is None:
            raise ValidationError("point mode needs both --lat and --lon")
        preds = infer_at_location(models, normalizer, dataset, context,
                                  options["lat"], options["lon"], hours,
                                  batch_size=options["eval_batch"],
                                  window=window)
        lines.append("hour,timestamp,pm25")
        for hour, value in zip(hours, preds):
            lines.append(
                f"{hour},{format_timestamp(timestamps[hour])},{float(value)!r}")
    else:
        if options["grid_lat"] is None or options["grid_lon"] is None:
            raise ValidationError("grid mode needs both --grid-lat and --grid-lon")
        lats = _parse_axis(options["grid_lat"], "latitude")
        lons = _parse_axis(options["grid_lon"], "longitude")
        lines.append("latitude,longitude,hour,pm25")
        for lat in lats:
            for lon in lons:
                preds = infer_at_location(models, normalizer, dataset, context,
                                          float(lat), float(lon), hours,
                                          batch_size=options["eval_batch"],
                                          window=window)
                for hour, value in zip(hours, preds):
                    lines.append(f"{float(lat)!r},{float(lon)!r},{hour},"
                                 f"{float(value)!r}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if options["out"]:
        out = Path(options["out"])
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(out / "predictions.csv", text)
        write_resolved_config(out, options)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser assembly and entry.
# ---------------------------------------------------------------------------

def _add_config_flag(parser):
    parser.add_argument("--config", metavar="FILE",
                        help="flat key = value config file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="physair",
        description="Sparse-network PM2.5 interpolation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="raw csv directory -> canonical dataset")
    _add_config_flag(p)
    p.add_argument("--raw", help="directory with sensors.csv, pm25.csv, wind.csv")
    p.add_argument("--out", help="canonical dataset output directory")
    p.add_argument("--max-gap-hours", dest="max_gap_hours", type=int,
                   help="longest missing run a sensor may have (default 1)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="simulate a synthetic dataset")
    _add_config_flag(p)
    p.add_argument("--out")
    p.add_argument("--hours", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-sensors", dest="n_sensors", type=int)
    p.add_argument("--noise-sd", dest="noise_sd", type=float)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a seed ensemble")
    _add_config_flag(p)
    p.add_argument("--dataset", help=f"canonical dataset dir (default ${DATA_DIR_ENV})")
    p.add_argument("--out")
    p.add_argument("--preset", choices=("S", "M", "L"))
    p.add_argument("--window", type=int)
    p.add_argument("--local-norm", dest="local_norm",
                   choices=("direct", "inverse"))
    p.add_argument("--aggregation", choices=("sum", "mean"))
    p.add_argument("--seeds", type=parse_seeds, help="e.g. 0,1,2,3,4")
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--resume", action="store_true", default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--val-every", dest="val_every", type=int)
    p.add_argument("--val-hour-stride", dest="val_hour_stride", type=int)
    p.add_argument("--eval-batch", dest="eval_batch", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score every model on held-out sensors")
    _add_config_flag(p)
    p.add_argument("--dataset", help=f"canonical dataset dir (default ${DATA_DIR_ENV})")
    p.add_argument("--models", help="training output dir or one .ckpt file")
    p.add_argument("--out")
    p.add_argument("--idw-power", dest="idw_power", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--density", dest="density", action="store_true",
                   default=None, help="run the sensor-removal sweep (default)")
    p.add_argument("--no-density", dest="density", action="store_false",
                   default=None, help="skip the sensor-removal sweep")
    p.add_argument("--gp-selection-stride", dest="gp_selection_stride", type=int)
    p.add_argument("--eval-batch", dest="eval_batch", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("interpolate",
                       help="predict at coordinates with a trained ensemble")
    _add_config_flag(p)
    p.add_argument("--dataset", help=f"canonical dataset dir (default ${DATA_DIR_ENV})")
    p.add_argument("--models")
    p.add_argument("--out", help="also write predictions.csv here")
    p.add_argument("--lat", type=float)
    p.add_argument("--lon", type=float)
    p.add_argument("--hours", help="H or LO:HI (half-open); default all hours")
    p.add_argument("--grid-lat", dest="grid_lat", help="LO:HI:COUNT sweep")
    p.add_argument("--grid-lon", dest="grid_lon", help="LO:HI:COUNT sweep")
    p.add_argument("--context", choices=("train", "all"))
    p.add_argument("--eval-batch", dest="eval_batch", type=int)
    p.set_defaults(func=cmd_interpolate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ShapeError, TrainingDiverged) as exc:
        print(f"physair: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except OSError as exc:
        print(f"physair: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except KeyboardInterrupt:
        print("physair: interrupted", file=sys.stderr)
        return 130
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
