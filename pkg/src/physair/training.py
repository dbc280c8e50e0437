"""Masked-sensor training: splits, sampling, the loop, and ensembling.

The protocol is spatial hold-out. Sensors are partitioned once into
train/val/test groups. A training sample is one hour of readings over
the train sensors with a single randomly chosen sensor masked: its
input features are zeroed and its observed-flag set to 0, and the model
is scored on recovering that sensor's true value. Validation and test
sensors never appear in any training input; they are attached to the
train graph one at a time, masked, only when being evaluated.

Inputs are standardized by the train-set mean/std. The flag channel is
left raw, and predictions are mapped back to concentration units before
the MSE loss, so reported losses are in (ug/m3)^2.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import (
    Adam,
    Tensor,
    add,
    load_params,
    mse,
    mul,
    reshape,
    save_arrays,
    load_arrays,
    save_params,
    tsum,
)
from .data import Dataset
from .errors import ValidationError
from .geo import Graph, WindRecord, build_graph, convection_edge_features
from .model import GraphWiring, ModelConfig, PhysicsGnn

logger = logging.getLogger(__name__)

SPLIT_RATIO = (28, 4, 9)


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


# ---------------------------------------------------------------------------
# Sensor split.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensorSplit:
    train: tuple
    val: tuple
    test: tuple
    seed: int

    def validate(self, all_ids=None) -> "SensorSplit":
        groups = (set(self.train), set(self.val), set(self.test))
        total = len(self.train) + len(self.val) + len(self.test)
        if sum(len(g) for g in groups) != total:
            raise ValidationError("split contains duplicate sensor ids")
        if groups[0] & groups[1] or groups[0] & groups[2] or groups[1] & groups[2]:
            raise ValidationError("split groups overlap")
        if not (self.train and self.val and self.test):
            raise ValidationError("every split group needs at least one sensor")
        if all_ids is not None and set().union(*groups) != set(all_ids):
            raise ValidationError("split does not cover the sensor set")
        return self

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val),
                "test": list(self.test), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SensorSplit":
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]),
                   int(d["seed"])).validate()


def make_split(sensor_ids, seed: int = 0) -> SensorSplit:
    """Random sensor partition following the 28:4:9 ratio."""
    ids = list(sensor_ids)
    n = len(ids)
    if n < 3:
        raise ValidationError(f"need at least 3 sensors to split, got {n}")
    total = sum(SPLIT_RATIO)
    n_train = max(1, round(n * SPLIT_RATIO[0] / total))
    n_val = max(1, round(n * SPLIT_RATIO[1] / total))
    if n_train + n_val >= n:
        n_train = max(1, n - n_val - 1)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return SensorSplit(
        train=tuple(sorted(shuffled[:n_train])),
        val=tuple(sorted(shuffled[n_train:n_train + n_val])),
        test=tuple(sorted(shuffled[n_train + n_val:])),
        seed=seed,
    ).validate(ids)


# ---------------------------------------------------------------------------
# Normalization.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, y):
        return y * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(float(d["mean"]), float(d["std"]))

    @classmethod
    def from_values(cls, values: np.ndarray) -> "Normalizer":
        values = np.asarray(values, dtype=float)
        std = float(values.std())
        return cls(float(values.mean()), std if std > 0 else 1.0)


# ---------------------------------------------------------------------------
# Masked samples.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskedSample:
    """One training or evaluation instance, fully materialized."""

    hour: int
    masked_id: str
    node_ids: tuple
    inputs: np.ndarray      # (n_nodes, window + 1)
    truth: float


def epoch_sample_plan(n_hours: int, n_train: int, seed: int, epoch: int):
    """(hours, masked train positions) for one epoch, deterministically.

    One sample per hour, masked sensor uniform over train sensors, and
    the visit order reshuffled. Derived from (seed, epoch) alone so a
    resumed run continues exactly where an uninterrupted one would be.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))
    masked = rng.integers(0, n_train, size=n_hours)
    order = rng.permutation(n_hours)
    return order, masked[order]


def build_node_inputs(values_norm: np.ndarray, hour: int, masked_pos: int,
                      window: int) -> np.ndarray:
    """Node features for one sample: windowed values plus observed flag.

    values_norm is (hours, n_nodes) already standardized. The window
    covers hours [hour-window+1, hour], clamped at the series start.
    The masked node is zeroed, flag included.
    """
    n = values_norm.shape[1]
    out = np.empty((n, window + 1))
    for w in range(window):
        h = max(0, hour - (window - 1 - w))
        out[:, w] = values_norm[h]
    out[:, window] = 1.0
    out[masked_pos, :] = 0.0
    return out


def iter_masked_samples(dataset: Dataset, split: SensorSplit, epoch: int,
                        seed: int, window: int = 1):
    """Yield the epoch's training samples as inspectable records."""
    idx = {s: i for i, s in enumerate(dataset.sensor_ids())}
    cols = [idx[s] for s in split.train]
    values = dataset.pm25[:, cols]
    if np.isnan(values).any():
        raise ValidationError("train sensors have missing hours; gap-filter first")
    norm = Normalizer.from_values(values)
    values_norm = norm.normalize(values)
    hours, masked = epoch_sample_plan(dataset.hours, len(cols), seed, epoch)
    for hour, pos in zip(hours, masked):
        yield MaskedSample(
            hour=int(hour),
            masked_id=split.train[pos],
            node_ids=split.train,
            inputs=build_node_inputs(values_norm, int(hour), int(pos), window),
            truth=float(values[hour, pos]),
        )


def leakage_scan(dataset: Dataset, split: SensorSplit, epochs,
                 seed: int = 0, window: int = 1) -> dict:
    """Prove no held-out reading can reach a training input.

    Two independent checks run over every requested epoch (an int means
    epochs 1..n, matching the training loop's numbering):

    1. structural: each sample's node set must be exactly the train ids,
       disjoint from the val and test ids, with the masked node drawn
       from the train set;
    2. numerical: the same sample stream is rebuilt from a copy of the
       dataset whose val and test readings are all replaced with garbage,
       and every input array and truth must come back bit-identical.

    Returns a small summary dict; raises ValidationError on the first
    violation found.
    """
    if isinstance(epochs, int):
        epochs = range(1, epochs + 1)
    held_out = set(split.val) | set(split.test)
    if held_out & set(split.train):
        raise ValidationError("split integrity: train overlaps val/test")

    ids = dataset.sensor_ids()
    poisoned_cols = [i for i, s in enumerate(ids) if s in held_out]
    poisoned = np.array(dataset.pm25, copy=True)
    poisoned[:, poisoned_cols] = 1e9
    decoy = replace(dataset, pm25=poisoned)

    train_set = set(split.train)
    samples = 0
    for epoch in epochs:
        stream = iter_masked_samples(dataset, split, epoch, seed, window)
        decoy_stream = iter_masked_samples(decoy, split, epoch, seed, window)
        for sample, shadow in zip(stream, decoy_stream):
            if set(sample.node_ids) != train_set or sample.masked_id not in train_set:
                raise ValidationError(
                    f"epoch {epoch} hour {sample.hour}: sample nodes stray "
                    f"outside the train set")
            if set(sample.node_ids) & held_out:
                raise ValidationError(
                    f"epoch {epoch} hour {sample.hour}: held-out sensor in node set")
            if (sample.inputs.tobytes() != shadow.inputs.tobytes()
                    or sample.truth != shadow.truth):
                raise ValidationError(
                    f"epoch {epoch} hour {sample.hour}: training input changed "
                    f"when held-out readings were poisoned")
            samples += 1
    return {"epochs": len(epochs), "samples": samples, "clean": True}


# ---------------------------------------------------------------------------
# Graph plumbing shared by training and evaluation.
# ---------------------------------------------------------------------------

def subset_dataset_values(dataset: Dataset, ids) -> np.ndarray:
    idx = {s: i for i, s in enumerate(dataset.sensor_ids())}
    missing = [s for s in ids if s not in idx]
    if missing:
        raise ValidationError(f"unknown sensor ids: {missing}")
    return dataset.pm25[:, [idx[s] for s in ids]]


def graph_for_ids(dataset: Dataset, ids) -> Graph:
    by_id = {s.sensor_id: s for s in dataset.sensors}
    return build_graph(tuple(by_id[i] for i in ids))


def hourly_conv_features(graph: Graph, dataset: Dataset,
                         hours) -> np.ndarray:
    """Stack per-edge wind triples for the given hours, (len, E, 3)."""
    out = np.empty((len(hours), graph.n_edges, 3))
    for row, hour in enumerate(hours):
        speed, direction = dataset.wind[hour]
        rec = WindRecord(str(hour), float(speed), float(direction))
        out[row] = convection_edge_features(graph, rec)
    return out


def masked_batch_predictions(models, wiring: GraphWiring, x: np.ndarray,
                             conv: np.ndarray, masked_pos: np.ndarray,
                             normalizer: Normalizer) -> np.ndarray:
    """Ensemble-mean predictions at the masked node, in raw units."""
    b, n = x.shape[0], x.shape[1]
    onehot = np.zeros((b, n))
    onehot[np.arange(b), masked_pos] = 1.0
    preds = np.zeros(b)
    for model in models:
        out = model.forward(x, wiring, conv)
        picked = tsum(mul(reshape(out, (b, n)), Tensor(onehot)), axis=1)
        preds += picked.data
    return normalizer.denormalize(preds / len(models))


def evaluate_target_sensor(models, normalizer, dataset: Dataset,
                           context_ids, target_id: str, hours,
                           batch_size: int = 64, window: int = 1):
    """Predict a held-out sensor from the context graph, hour by hour.

    Builds the (context + target) graph once, masks the target node,
    and batches the requested hours. Returns (predictions, truths).
    """
    ids = tuple(context_ids) + (target_id,)
    graph = graph_for_ids(dataset, ids)
    wiring = GraphWiring(graph)
    values = subset_dataset_values(dataset, ids)
    if np.isnan(values[:, :-1]).any():
        raise ValidationError("context sensors have missing hours")
    values_norm = normalizer.normalize(np.nan_to_num(values, nan=0.0))
    target_pos = len(ids) - 1
    hours = np.asarray(hours, dtype=int)
    preds = np.empty(len(hours))
    for lo in range(0, len(hours), batch_size):
        chunk = hours[lo:lo + batch_size]
        x = np.stack([build_node_inputs(values_norm, int(h), target_pos, window)
                      for h in chunk])
        conv = hourly_conv_features(graph, dataset, chunk)
        preds[lo:lo + len(chunk)] = masked_batch_predictions(
            models, wiring, x, conv,
            np.full(len(chunk), target_pos), normalizer)
    truths = values[hours, target_pos]
    return preds, truths


def validation_mse(models, normalizer, dataset, split, hours=None,
                   batch_size: int = 64, window: int = 1) -> float:
    if hours is None:
        hours = np.arange(dataset.hours)
    errors = []
    for sensor in split.val:
        preds, truths = evaluate_target_sensor(
            models, normalizer, dataset, split.train, sensor, hours,
            batch_size=batch_size, window=window)
        if np.isnan(truths).any():
            keep = np.isfinite(truths)
            preds, truths = preds[keep], truths[keep]
        errors.append((preds - truths) ** 2)
    return float(np.concatenate(errors).mean())


# ---------------------------------------------------------------------------
# The training loop.
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 500
    patience: int = 20
    val_every: int = 1          # epochs between validation passes
    val_hour_stride: int = 1    # subsample validation hours by this step
    eval_batch: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValidationError("batch_size and max_epochs must be >= 1")
        if self.patience < 1 or self.val_every < 1 or self.val_hour_stride < 1:
            raise ValidationError("patience and validation strides must be >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainState:
    epoch: int = 0
    best_val_mse: float = float("inf")
    best_epoch: int = -1
    evals_since_best: int = 0
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "best_val_mse": self.best_val_mse,
                "best_epoch": self.best_epoch,
                "evals_since_best": self.evals_since_best,
                "history": self.history}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(epoch=int(d["epoch"]),
                   best_val_mse=float(d["best_val_mse"]),
                   best_epoch=int(d["best_epoch"]),
                   evals_since_best=int(d["evals_since_best"]),
                   history=list(d["history"]))


@dataclass
class TrainResult:
    checkpoint_path: Path
    state: TrainState
    normalizer: Normalizer
    split: SensorSplit
    model_config: ModelConfig
    wall_seconds: float


def _atomic_json(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _checkpoint_extra(model_config, train_config, split, normalizer,
                      dataset) -> dict:
    return {
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict(),
        "split": split.to_dict(),
        "normalizer": normalizer.to_dict(),
        "dataset": {"provenance": dataset.provenance, "seed": dataset.seed,
                    "hours": dataset.hours,
                    "sensors": len(dataset.sensors)},
    }


def train_model(dataset: Dataset, split: SensorSplit,
                model_config: ModelConfig, train_config: TrainConfig,
                out_dir, resume: bool = False) -> TrainResult:
    """Train one model; persists best/last checkpoints and a state file.

    Layout under out_dir: ``best.ckpt`` (weights + metadata at the best
    validation epoch), ``last.ckpt`` + ``last.optim`` + ``state.json``
    (for resuming), all written atomically.
    """
    started = time.monotonic()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    best_path, last_path = out / "best.ckpt", out / "last.ckpt"
    optim_path, state_path = out / "last.optim", out / "state.json"

    split.validate(dataset.sensor_ids())
    train_cols = subset_dataset_values(dataset, split.train)
    if np.isnan(train_cols).any():
        raise ValidationError("train sensors have missing hours; gap-filter first")
    normalizer = Normalizer.from_values(train_cols)
    values_norm = normalizer.normalize(train_cols)

    graph = graph_for_ids(dataset, split.train)
    wiring = GraphWiring(graph)
    window = model_config.window
    n_train = len(split.train)
    val_hours = np.arange(0, dataset.hours, train_config.val_hour_stride)

    model = PhysicsGnn(model_config, seed=train_config.seed)
    params = model.params()
    opt = Adam(params, lr=train_config.lr, beta1=train_config.beta1,
               beta2=train_config.beta2, eps=train_config.eps)
    state = TrainState()
    extra = _checkpoint_extra(model_config, train_config, split, normalizer,
                              dataset)

    if resume and state_path.exists():
        with open(state_path, encoding="utf-8") as fh:
            state = TrainState.from_dict(json.load(fh))
        load_params(str(last_path), params)
        _, opt_arrays = load_arrays(str(optim_path))
        opt.load_state_arrays(opt_arrays)
        logger.info("resuming from epoch %d (best val %.4f at %d)",
                    state.epoch, state.best_val_mse, state.best_epoch)

    mean_t, std_t = Tensor(normalizer.mean), Tensor(normalizer.std)

    while state.epoch < train_config.max_epochs:
        epoch = state.epoch + 1
        hours, masked = epoch_sample_plan(dataset.hours, n_train,
                                          train_config.seed, epoch)
        epoch_sq_err = 0.0
        for lo in range(0, len(hours), train_config.batch_size):
            bh = hours[lo:lo + train_config.batch_size]
            bm = masked[lo:lo + train_config.batch_size]
            b = len(bh)
            x = np.stack([build_node_inputs(values_norm, int(h), int(m), window)
                          for h, m in zip(bh, bm)])
            conv = hourly_conv_features(graph, dataset, bh)
            onehot = np.zeros((b, n_train))
            onehot[np.arange(b), bm] = 1.0
            truth = train_cols[bh, bm]

            out_t = model.forward(x, wiring, conv)
            picked = tsum(mul(reshape(out_t, (b, n_train)), Tensor(onehot)),
                          axis=1)
            pred = add(mul(picked, std_t), mean_t)
            loss = mse(pred, Tensor(truth))
            if not np.isfinite(loss.data):
                norms = {p.name: float(np.abs(p.data).max()) for p in params[:6]}
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} "
                    f"batch {lo // train_config.batch_size}: "
                    f"hours {bh[:4].tolist()}..., masked {bm[:4].tolist()}..., "
                    f"leading param max-abs {norms}")
            for p in params:
                p.zero_grad()
            loss.backward()
            opt.step()
            epoch_sq_err += float(loss.data) * b

        train_loss = epoch_sq_err / len(hours)
        record = {"epoch": epoch, "train_mse": train_loss, "val_mse": None}

        if epoch % train_config.val_every == 0 or epoch == train_config.max_epochs:
            val = validation_mse([model], normalizer, dataset, split,
                                 hours=val_hours,
                                 batch_size=train_config.eval_batch,
                                 window=window)
            if not np.isfinite(val):
                raise TrainingDiverged(f"non-finite validation MSE at epoch {epoch}")
            record["val_mse"] = val
            if val < state.best_val_mse:
                state.best_val_mse = val
                state.best_epoch = epoch
                state.evals_since_best = 0
                save_params(str(best_path), params,
                            extra={**extra, "epoch": epoch, "val_mse": val})
            else:
                state.evals_since_best += 1
            logger.info("epoch %d train %.4f val %.4f (best %.4f @ %d)",
                        epoch, train_loss, val, state.best_val_mse,
                        state.best_epoch)

        state.epoch = epoch
        state.history.append(record)
        save_params(str(last_path), params, extra={**extra, "epoch": epoch})
        save_arrays(str(optim_path), list(opt.state_arrays().items()))
        _atomic_json(state_path, state.to_dict())

        if state.evals_since_best >= train_config.patience:
            logger.info("early stop at epoch %d", epoch)
            break

    if state.best_epoch < 0:
        # max_epochs finished without any validation pass recording a best
        save_params(str(best_path), params,
                    extra={**extra, "epoch": state.epoch, "val_mse": None})
    return TrainResult(checkpoint_path=best_path, state=state,
                       normalizer=normalizer, split=split,
                       model_config=model_config,
                       wall_seconds=time.monotonic() - started)


def load_trained(checkpoint_path):
    """Rebuild (model, normalizer, split, extra) from a checkpoint."""
    manifest, _ = load_arrays(str(checkpoint_path))
    extra = manifest.get("extra", {})
    config = ModelConfig.from_dict(extra["model_config"])
    model = PhysicsGnn(config, seed=int(extra["train_config"]["seed"]))
    load_params(str(checkpoint_path), model.params())
    normalizer = Normalizer.from_dict(extra["normalizer"])
    split = SensorSplit.from_dict(extra["split"])
    return model, normalizer, split, extra


def ensemble_predictions(per_model: np.ndarray) -> np.ndarray:
    """Mean across the model axis (models, samples) -> (samples,)."""
    per_model = np.asarray(per_model, dtype=float)
    if per_model.ndim != 2:
        raise ValidationError(f"expected (models, samples), got {per_model.shape}")
    return per_model.mean(axis=0)


def _train_job(args):
    # module-level so ProcessPoolExecutor can pickle it
    dataset, split, model_config, train_config, out_dir, resume = args
    return train_model(dataset, split, model_config, train_config,
                       out_dir, resume=resume)


def train_ensemble(dataset: Dataset, split: SensorSplit,
                   model_config: ModelConfig, train_config: TrainConfig,
                   out_root, seeds=(0, 1, 2, 3, 4), workers: int = 1,
                   resume: bool = False) -> list:
    """Train one model per seed under ``out_root``/seed<k>.

    Each seed gets its own directory and an otherwise identical config,
    so any member can be retrained or resumed on its own. With
    ``workers`` > 1 the seeds run in separate processes; results come
    back in seed order either way. Worker processes each spin up their
    own BLAS threads, so on a small machine cap ``workers`` well below
    the core count.
    """
    seeds = tuple(int(s) for s in seeds)
    if len(set(seeds)) != len(seeds):
        raise ValidationError(f"duplicate ensemble seeds: {seeds}")
    out_root = Path(out_root)
    jobs = []
    for seed in seeds:
        cfg = dataclasses.replace(train_config, seed=seed)
        jobs.append((dataset, split, model_config, cfg,
                     out_root / f"seed{seed}", resume))
    if workers <= 1 or len(jobs) == 1:
        return [_train_job(job) for job in jobs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_train_job, jobs))
