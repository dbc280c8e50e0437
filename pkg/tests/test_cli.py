"""End-to-end checks of the command line against real artifacts.

The expensive fixtures (a small synthetic dataset and a two-seed
ensemble trained on it) are built once per module and shared; every
test drives ``main(argv)`` directly and inspects exit codes, stdout,
and the files left behind.
"""

import json

import numpy as np
import pytest

from physair.cli import main, parse_seeds, read_config_file
from physair.data import load_dataset
from physair.errors import ValidationError
from physair.evaluation import infer_at_location
from physair.training import load_trained


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "synth"
    rc = main(["synth", "--out", str(out), "--hours", "36",
               "--n-sensors", "10", "--height", "12", "--width", "12",
               "--seed", "3"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("runs") / "ens"
    rc = main(["train", "--dataset", str(synth_dir), "--out", str(out),
               "--seeds", "0,1", "--max-epochs", "2", "--batch-size", "8",
               "--patience", "5", "--lr", "1e-3"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def eval_dir(tmp_path_factory, synth_dir, train_dir):
    out = tmp_path_factory.mktemp("runs") / "eval"
    rc = main(["evaluate", "--dataset", str(synth_dir),
               "--models", str(train_dir), "--out", str(out)])
    assert rc == 0
    return out


# ---------------------------------------------------------------------------
# Config plumbing.
# ---------------------------------------------------------------------------

def test_read_config_file(tmp_path):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("# comment\nhours = 24\n\nseed=5\n")
    assert read_config_file(cfg) == {"hours": "24", "seed": "5"}


def test_config_duplicate_key_rejected(tmp_path):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("hours = 2\nhours = 3\n")
    with pytest.raises(ValidationError, match="duplicate"):
        read_config_file(cfg)


def test_config_unknown_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("bogus = 1\n")
    rc = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")])
    assert rc == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_flag_overrides_config_file(tmp_path):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("hours = 24\nseed = 5\nn_sensors = 6\n"
                   "height = 12\nwidth = 12\n")
    out = tmp_path / "d"
    rc = main(["synth", "--config", str(cfg), "--out", str(out),
               "--hours", "12"])
    assert rc == 0
    assert load_dataset(out).hours == 12
    resolved = read_config_file(out / "resolved.cfg")
    assert resolved["hours"] == "12"      # flag won
    assert resolved["seed"] == "5"        # file value kept
    assert resolved["noise_sd"] == "0.5"  # default expanded


def test_parse_seeds():
    assert parse_seeds("0,1, 2") == (0, 1, 2)
    with pytest.raises(ValidationError):
        parse_seeds("0,0")
    with pytest.raises(ValidationError):
        parse_seeds("a,b")


def test_duplicate_seed_flag_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["train", "--seeds", "1,1"])
    assert err.value.code == 2


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def test_synth_dataset_loads(synth_dir):
    ds = load_dataset(synth_dir)
    assert ds.provenance == "synthetic"
    assert (ds.hours, len(ds.sensors)) == (36, 10)
    assert np.isfinite(ds.pm25).all()
    assert (synth_dir / "resolved.cfg").exists()


def test_synth_deterministic(tmp_path, synth_dir):
    again = tmp_path / "again"
    assert main(["synth", "--out", str(again), "--hours", "36",
                 "--n-sensors", "10", "--height", "12", "--width", "12",
                 "--seed", "3"]) == 0
    assert (again / "pm25.csv").read_bytes() == \
        (synth_dir / "pm25.csv").read_bytes()
    other = tmp_path / "other"
    assert main(["synth", "--out", str(other), "--hours", "36",
                 "--n-sensors", "10", "--height", "12", "--width", "12",
                 "--seed", "4"]) == 0
    assert (other / "pm25.csv").read_bytes() != \
        (again / "pm25.csv").read_bytes()


def test_resolved_config_reproduces_run(tmp_path, synth_dir):
    rerun = tmp_path / "rerun"
    rc = main(["synth", "--config", str(synth_dir / "resolved.cfg"),
               "--out", str(rerun)])
    assert rc == 0
    assert (rerun / "pm25.csv").read_bytes() == \
        (synth_dir / "pm25.csv").read_bytes()


def test_synth_bad_grid_exits_2(tmp_path, capsys):
    rc = main(["synth", "--out", str(tmp_path / "d"), "--height", "4"])
    assert rc == 2
    assert "too small" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def _write_raw(raw, with_wind=True):
    raw.mkdir()
    coords = {"s1": (36.70, -119.80), "s2": (36.71, -119.79),
              "s3": (36.72, -119.81), "s4": (36.69, -119.78)}
    lines = ["sensor_id,latitude,longitude"]
    lines += [f"{sid},{lat},{lon}" for sid, (lat, lon) in coords.items()]
    (raw / "sensors.csv").write_text("\n".join(lines) + "\n")

    rows = ["sensor_id,timestamp,value"]
    for hour in range(6):
        ts = f"2024-03-01T{hour:02d}:00:00Z"
        rows.append(f"s1,{ts},{10 + hour}")
        if hour != 3:                       # isolated gap, filled
            rows.append(f"s2,{ts},{20 + hour}")
        rows.append(f"s3,{ts},{5 + hour}")
        if hour < 2:                        # 4-hour gap, dropped
            rows.append(f"s4,{ts},{30 + hour}")
        rows.append(f"s9,{ts},1.0")         # no coordinates, skipped
    rows.append("s1,not-a-time,4.0")        # malformed, skipped
    rows.append("s3,2024-03-01T05:30:00Z,-2.0")   # clamped to zero
    (raw / "pm25.csv").write_text("\n".join(rows) + "\n")

    if with_wind:
        wrows = ["timestamp,wind_speed_kmh,wind_dir_deg"]
        wrows += [f"2024-03-01T{hour:02d}:00:00Z,{5 + hour},{30 * hour}"
                  for hour in range(6)]
        (raw / "wind.csv").write_text("\n".join(wrows) + "\n")


def test_ingest_happy_path(tmp_path, capsys):
    raw = tmp_path / "raw"
    _write_raw(raw)
    out = tmp_path / "canon"
    rc = main(["ingest", "--raw", str(raw), "--out", str(out)])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "dropped 1 gappy sensors, filled 1 isolated hours" in stdout
    assert "1 malformed rows skipped" in stdout
    assert "1 negative values clamped" in stdout

    ds = load_dataset(out)
    assert ds.provenance == "real"
    assert ds.sensor_ids() == ["s1", "s2", "s3"]
    assert ds.hours == 6
    # the isolated s2 gap was filled with the mean of its neighbors
    j = ds.sensor_ids().index("s2")
    assert ds.pm25[3, j] == pytest.approx((22 + 24) / 2)
    # hour 5 of s3 averages the on-the-hour reading with the clamped one
    k = ds.sensor_ids().index("s3")
    assert ds.pm25[5, k] == pytest.approx((10 + 0) / 2)
    assert np.isfinite(ds.pm25).all()


def test_ingest_missing_wind_exits_2(tmp_path, capsys):
    raw = tmp_path / "raw"
    _write_raw(raw, with_wind=False)
    rc = main(["ingest", "--raw", str(raw), "--out", str(tmp_path / "c")])
    assert rc == 2
    assert "wind.csv" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_outputs(train_dir):
    for seed in (0, 1):
        assert (train_dir / f"seed{seed}" / "best.ckpt").exists()
    resolved = read_config_file(train_dir / "resolved.cfg")
    assert resolved["seeds"] == "0,1"
    assert resolved["preset"] == "S"
    assert resolved["max_epochs"] == "2"
    model, _, split, _ = load_trained(train_dir / "seed0" / "best.ckpt")
    # preset S resolves to its fixed architecture in the saved config
    assert (model.config.n_layers, model.config.hidden_dim) == (3, 128)
    assert len(split.train) + len(split.val) + len(split.test) == 10


def test_train_seeds_differ(train_dir):
    a = (train_dir / "seed0" / "best.ckpt").read_bytes()
    b = (train_dir / "seed1" / "best.ckpt").read_bytes()
    assert a != b


def test_train_resume_completed_run(synth_dir, train_dir, capsys):
    rc = main(["train", "--dataset", str(synth_dir), "--out", str(train_dir),
               "--seeds", "0,1", "--max-epochs", "2", "--batch-size", "8",
               "--patience", "5", "--lr", "1e-3", "--resume"])
    assert rc == 0
    assert "seed 0: best val mse" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

MODEL_LINEUP = ["mean_fill", "idw", "kriging", "gp", "gnn"]


def test_evaluate_report_files(eval_dir):
    text = (eval_dir / "report.txt").read_text()
    for name in MODEL_LINEUP:
        assert name in text
    assert "test-high-sh" in text
    assert "MAE by spatial-heterogeneity bin:" in text
    for row in ("0%", "20%", "40%", "60%", "80%"):
        assert row in text
    assert (eval_dir / "resolved.cfg").exists()


def test_evaluate_json_payload(eval_dir):
    payload = json.loads((eval_dir / "report.json").read_text())
    metrics = payload["metrics"]
    assert len(metrics) == 2 * len(MODEL_LINEUP)   # test + test-high-sh
    by_label = {}
    for entry in metrics:
        by_label.setdefault(entry["label"], {})[entry["model"]] = entry
    assert sorted(by_label) == ["test", "test-high-sh"]
    counts = {m["count"] for m in by_label["test"].values()}
    assert len(counts) == 1 and counts.pop() > 0
    for entry in by_label["test"].values():
        assert entry["mae"] > 0 and entry["mse"] >= entry["mae"] ** 2
    assert payload["density"]["fractions"] == [0.0, 0.2, 0.4, 0.6, 0.8]
    assert set(payload["extra"]["mae_ratio_vs_gnn"]) == {"ground_truth", "sh"}
    assert len(payload["extra"]["checkpoints"]) == 2


def test_evaluate_no_density(synth_dir, train_dir, tmp_path):
    out = tmp_path / "nodensity"
    rc = main(["evaluate", "--dataset", str(synth_dir),
               "--models", str(train_dir), "--out", str(out), "--no-density"])
    assert rc == 0
    assert "removed" not in (out / "report.txt").read_text()
    assert "density" not in json.loads((out / "report.json").read_text())


def test_evaluate_parallel_matches_serial(synth_dir, train_dir, tmp_path):
    serial, parallel = tmp_path / "w1", tmp_path / "w2"
    for out, workers in ((serial, "1"), (parallel, "2")):
        rc = main(["evaluate", "--dataset", str(synth_dir),
                   "--models", str(train_dir), "--out", str(out),
                   "--workers", workers, "--no-density"])
        assert rc == 0
    a = json.loads((serial / "report.json").read_text())
    b = json.loads((parallel / "report.json").read_text())
    assert a == b


def test_evaluate_without_checkpoints_exits_2(synth_dir, tmp_path, capsys):
    rc = main(["evaluate", "--dataset", str(synth_dir),
               "--models", str(tmp_path / "empty"),
               "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "no checkpoints" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# interpolate
# ---------------------------------------------------------------------------

def test_interpolate_point_matches_library(synth_dir, train_dir, capsys):
    ds = load_dataset(synth_dir)
    lat = float(np.mean([s.latitude for s in ds.sensors]))
    lon = float(np.mean([s.longitude for s in ds.sensors]))
    rc = main(["interpolate", "--dataset", str(synth_dir),
               "--models", str(train_dir),
               "--lat", repr(lat), "--lon", repr(lon), "--hours", "0:12"])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "hour,timestamp,pm25"
    assert len(lines) == 13

    paths = sorted(train_dir.glob("seed*/best.ckpt"))
    models, normalizer, split = [], None, None
    for p in paths:
        model, norm, spl, _ = load_trained(p)
        models.append(model)
        normalizer, split = norm, spl
    want = infer_at_location(models, normalizer, ds, split.train,
                             lat, lon, np.arange(12))
    got = np.array([float(line.split(",")[2]) for line in lines[1:]])
    assert np.array_equal(got, want)
    assert lines[1].split(",")[1] == "2024-01-01T00:00:00+00:00"


def test_interpolate_grid(synth_dir, train_dir, tmp_path, capsys):
    out = tmp_path / "sweep"
    rc = main(["interpolate", "--dataset", str(synth_dir),
               "--models", str(train_dir), "--out", str(out),
               "--grid-lat", "36.70:36.72:2",
               "--grid-lon=-119.81:-119.79:2",    # leading dash needs = form
               "--hours", "5"])
    assert rc == 0
    text = capsys.readouterr().out
    lines = text.strip().splitlines()
    assert lines[0] == "latitude,longitude,hour,pm25"
    assert len(lines) == 1 + 2 * 2
    for line in lines[1:]:
        lat, lon, hour, value = line.split(",")
        assert hour == "5"
        assert np.isfinite(float(value))
    assert (out / "predictions.csv").read_text() == text


@pytest.mark.parametrize("extra", [
    ["--hours", "40:50", "--lat", "36.7", "--lon", "-119.8"],
    ["--hours", "abc", "--lat", "36.7", "--lon", "-119.8"],
    ["--hours", "5:5", "--lat", "36.7", "--lon", "-119.8"],
    ["--lat", "36.7"],                                   # lon missing
    ["--lat", "36.7", "--lon", "-119.8", "--grid-lat", "36:37:2",
     "--grid-lon=-120:-119:2"],                          # both modes
    [],                                                  # neither mode
    ["--grid-lat", "36:37:0", "--grid-lon=-120:-119:2"],
])
def test_interpolate_bad_requests_exit_2(synth_dir, train_dir, extra):
    rc = main(["interpolate", "--dataset", str(synth_dir),
               "--models", str(train_dir)] + extra)
    assert rc == 2


# ---------------------------------------------------------------------------
# dataset default from the environment
# ---------------------------------------------------------------------------

def test_dataset_env_var_default(synth_dir, train_dir, monkeypatch, capsys):
    monkeypatch.setenv("PHYSAIR_DATA_DIR", str(synth_dir))
    rc = main(["interpolate", "--models", str(train_dir),
               "--lat", "36.7", "--lon", "-119.8", "--hours", "0"])
    assert rc == 0
    assert capsys.readouterr().out.startswith("hour,timestamp,pm25")


def test_missing_dataset_names_env_var(monkeypatch, capsys):
    monkeypatch.delenv("PHYSAIR_DATA_DIR", raising=False)
    rc = main(["train", "--out", "/tmp/never-used"])
    assert rc == 2
    assert "PHYSAIR_DATA_DIR" in capsys.readouterr().err
