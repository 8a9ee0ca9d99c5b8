"""Run configuration and the training loop shared by the CLI and the test suite."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as dataio
from .checkpoint import load_checkpoint, save_checkpoint
from .data import CsvSchema, Dataset, SynthSpec, apply_norm, fit_norm
from .errors import ConfigError, DDxError, TrainingError
from .metrics import argmax_lowest
from .model import DDxConfig, Head, Model, build, forward, loss_and_grads
from .ops import Mode, sigmoid, softmax
from .optim import Optimizer, Schedule, clip_global_norm, lr_at
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericalFailure(DDxError, RuntimeError):
    """Training produced a non-finite loss or gradient."""


def _reject_unknown(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _typed(obj, key, types, default, where, check=None):
    v = obj.get(key, default)
    if v is None and default is None:
        return None
    if isinstance(v, bool) and bool not in types:
        raise ConfigError(f"{where}.{key} has the wrong type")
    if not isinstance(v, types):
        raise ConfigError(f"{where}.{key} must be {' or '.join(t.__name__ for t in types)}")
    if check is not None and not check(v):
        raise ConfigError(f"{where}.{key} has invalid value {v!r}")
    return v


@dataclass
class OptimConfig:
    algorithm: str = "adam"
    lr: float = 3e-3
    schedule: Schedule = None
    weight_decay: float = 0.0
    clip_norm: float | None = None
    momentum: float = 0.9

    def to_json(self):
        d = {
            "algorithm": self.algorithm, "lr": self.lr, "weight_decay": self.weight_decay,
            "clip_norm": self.clip_norm, "momentum": self.momentum,
        }
        if self.schedule is None or self.schedule.kind == "constant":
            d["schedule"] = {"kind": "constant"}
        else:
            d["schedule"] = {"kind": "step", "factor": self.schedule.factor,
                             "every": self.schedule.every}
        return d

    @classmethod
    def from_json(cls, obj):
        w = "optim"
        _reject_unknown(obj, ("algorithm", "lr", "schedule", "weight_decay", "clip_norm", "momentum"), w)
        algorithm = _typed(obj, "algorithm", (str,), "adam", w, lambda v: v in ("adam", "sgd"))
        lr = float(_typed(obj, "lr", (int, float), 3e-3, w, lambda v: v > 0))
        sched = obj.get("schedule", {"kind": "constant"})
        _reject_unknown(sched, ("kind", "factor", "every"), "optim.schedule")
        kind = sched.get("kind", "constant")
        if kind == "constant":
            if set(sched) - {"kind"}:
                raise ConfigError("constant schedule takes no parameters")
            schedule = Schedule(lr)
        elif kind == "step":
            schedule = Schedule(lr, "step",
                                float(_typed(sched, "factor", (int, float), 0.1, "optim.schedule", lambda v: v > 0)),
                                _typed(sched, "every", (int,), 10, "optim.schedule", lambda v: v >= 1))
        else:
            raise ConfigError(f"unknown schedule kind {kind!r}")
        return cls(
            algorithm, lr, schedule,
            float(_typed(obj, "weight_decay", (int, float), 0.0, w, lambda v: v >= 0)),
            _typed(obj, "clip_norm", (int, float), None, w, lambda v: v > 0),
            float(_typed(obj, "momentum", (int, float), 0.9, w, lambda v: 0 <= v < 1)),
        )

    def make_schedule(self):
        return self.schedule or Schedule(self.lr)


@dataclass
class DataConfig:
    path: str | None = None
    synth: SynthSpec | None = None
    csv: CsvSchema | None = None
    window_len: int | None = None
    stride: int | None = None
    val_fraction: float | None = 0.2
    batch_size: int = 32
    class_weighted: bool = False

    def to_json(self):
        return {
            "path": self.path,
            "synth": None if self.synth is None else asdict(self.synth),
            "csv": None if self.csv is None else asdict(self.csv),
            "window_len": self.window_len, "stride": self.stride,
            "val_fraction": self.val_fraction, "batch_size": self.batch_size,
            "class_weighted": self.class_weighted,
        }

    @classmethod
    def from_json(cls, obj, base_dir="."):
        w = "data"
        _reject_unknown(obj, ("path", "synth", "csv", "window_len", "stride", "val_fraction",
                              "batch_size", "class_weighted"), w)
        path = _typed(obj, "path", (str,), None, w)
        synth = obj.get("synth")
        if (path is None) == (synth is None):
            raise ConfigError("data needs exactly one of 'path' or 'synth'")
        if synth is not None:
            _reject_unknown(synth, SynthSpec.__dataclass_fields__, "data.synth")
            try:
                synth = SynthSpec(**synth)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"data.synth: {exc}") from None
        csv_schema = obj.get("csv")
        if csv_schema is not None:
            _reject_unknown(csv_schema, CsvSchema.__dataclass_fields__, "data.csv")
            try:
                csv_schema = CsvSchema(**csv_schema)
            except TypeError as exc:
                raise ConfigError(f"data.csv: {exc}") from None
        if path is not None:
            path = str((Path(base_dir) / path).resolve())
            if not os.path.exists(path):
                raise ConfigError(f"data.path {path} does not exist")
            if path.endswith(".csv") and csv_schema is None:
                raise ConfigError("CSV data needs a 'csv' schema object")
        val = obj.get("val_fraction", 0.2)
        if val is not None and not (isinstance(val, (int, float)) and 0 < val < 1):
            raise ConfigError("data.val_fraction must lie in (0, 1) or be null")
        return cls(
            path, synth, csv_schema,
            _typed(obj, "window_len", (int,), None, w, lambda v: v >= 1),
            _typed(obj, "stride", (int,), None, w, lambda v: v >= 1),
            val,
            _typed(obj, "batch_size", (int,), 32, w, lambda v: v >= 1),
            _typed(obj, "class_weighted", (bool,), False, w),
        )

    def load(self) -> Dataset:
        if self.synth is not None:
            ds = dataio.synth_generate(self.synth)
        elif self.path.endswith(".csv"):
            ds = dataio.load_csv(self.path, self.csv)
        else:
            ds = dataio.load_binary(self.path)
        return self.window(ds)

    def window(self, ds: Dataset) -> Dataset:
        if self.window_len is not None:
            ds, _ = dataio.window_dataset(ds, self.window_len, self.stride)
        return ds


@dataclass
class TrainConfig:
    epochs: int = 50
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    log_every: int = 1
    target_train_accuracy: float | None = None

    @classmethod
    def from_json(cls, obj, base_dir="."):
        w = "train"
        _reject_unknown(obj, ("epochs", "seed", "checkpoint_dir", "log_every",
                              "target_train_accuracy"), w)
        ckpt = _typed(obj, "checkpoint_dir", (str,), "checkpoints", w)
        return cls(
            _typed(obj, "epochs", (int,), 50, w, lambda v: v >= 1),
            _typed(obj, "seed", (int,), 0, w, lambda v: v >= 0),
            str((Path(base_dir) / ckpt).resolve()),
            _typed(obj, "log_every", (int,), 1, w, lambda v: v >= 1),
            _typed(obj, "target_train_accuracy", (int, float), None, w, lambda v: 0 < v <= 1),
        )

    def to_json(self):
        return asdict(self)


@dataclass
class RunConfig:
    model: DDxConfig
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_json(cls, obj, base_dir=".") -> "RunConfig":
        _reject_unknown(obj, ("model", "optim", "data", "train"), "run config")
        if "model" not in obj or "data" not in obj:
            raise ConfigError("run config needs 'model' and 'data' sections")
        return cls(
            DDxConfig.from_json(obj["model"]),
            OptimConfig.from_json(obj.get("optim", {})),
            DataConfig.from_json(obj["data"], base_dir),
            TrainConfig.from_json(obj.get("train", {}), base_dir),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read run config {path}: {exc}") from None
        return cls.from_json(obj, base_dir=os.path.dirname(os.path.abspath(path)))

    def to_json(self):
        return {"model": self.model.to_json(), "optim": self.optim.to_json(),
                "data": self.data.to_json(), "train": self.train.to_json()}


# -- evaluation helpers ---------------------------------------------------------------------------


def predict_logits(model: Model, dataset: Dataset, batch_size: int = 64) -> np.ndarray:
    chunks = []
    for x, _ in dataio.batch_iter(dataset, batch_size):
        chunks.append(forward(model, Tensor(x.astype(model.dtype, copy=False)), Mode.EVAL).data)
    return np.concatenate(chunks, axis=0)


def probabilities(model: Model, logits: np.ndarray) -> np.ndarray:
    if model.config.head is Head.MULTICLASS:
        return softmax(logits.astype(np.float64))
    return sigmoid(logits.astype(np.float64))


def accuracy_of(model: Model, dataset: Dataset, batch_size: int = 64) -> float:
    """Eval-mode accuracy (label-wise accuracy for multi-label heads)."""
    if not len(dataset):
        return float("nan")
    logits = predict_logits(model, dataset, batch_size)
    labels = dataset.labels()
    if model.config.head is Head.MULTICLASS:
        return float(np.mean(argmax_lowest(logits) == labels))
    return float(np.mean((logits >= 0).astype(np.int64) == labels))


def check_compatible(config: DDxConfig, dataset: Dataset) -> None:
    if dataset.channels != config.in_channels:
        raise ConfigError(
            f"channel mismatch: model expects {config.in_channels}, data has {dataset.channels}"
        )
    if dataset.num_classes != config.num_classes:
        raise ConfigError(
            f"class mismatch: model has {config.num_classes} outputs, data has {dataset.num_classes} classes"
        )
    if dataset.multi_label != (config.head is Head.MULTILABEL):
        raise ConfigError("dataset label arity does not match the model head")


# -- training -------------------------------------------------------------------------------------


@dataclass
class PreparedData:
    train: Dataset
    val: Dataset | None
    norm: dataio.NormStats


def prepare_data(run: RunConfig, dataset: Dataset | None = None) -> PreparedData:
    """Load, window, split, and normalize with statistics from the training split only."""
    ds = run.data.load() if dataset is None else run.data.window(dataset)
    check_compatible(run.model, ds)
    if run.data.val_fraction is not None:
        train, val = dataio.stratified_split(ds, run.data.val_fraction, run.train.seed)
    else:
        train, val = ds, None
    norm = fit_norm(train)
    train = apply_norm(train, norm)
    if val is not None:
        val = apply_norm(val, norm)
    return PreparedData(train, val, norm)


@dataclass
class TrainResult:
    model: Model
    optimizer: Optimizer
    norm: dataio.NormStats
    history: list
    best_path: str
    final_path: str


def _format_line(entry: dict) -> str:
    return json.dumps(entry, sort_keys=True)


def train(run: RunConfig, dataset: Dataset | None = None, resume_from=None,
          stop_after_epoch: int | None = None, log_stream=None) -> TrainResult:
    """Fit a model per ``run``; returns the final state and per-epoch history.

    Checkpoints (``last.ddxc`` every epoch, ``best.ddxc`` on improved validation
    accuracy, ``final.ddxc`` at the end) go to ``run.train.checkpoint_dir``; the
    JSON-lines log goes to ``train_log.jsonl`` there (appended on resume).
    ``stop_after_epoch`` ends the run early, which is how interrupted runs are
    simulated in tests.
    """
    prep = prepare_data(run, dataset)
    cfg = run.train
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    last_path = os.path.join(cfg.checkpoint_dir, "last.ddxc")
    best_path = os.path.join(cfg.checkpoint_dir, "best.ddxc")
    final_path = os.path.join(cfg.checkpoint_dir, "final.ddxc")
    log_path = os.path.join(cfg.checkpoint_dir, "train_log.jsonl")

    schedule = run.optim.make_schedule()
    weights = None
    if run.data.class_weighted and run.model.head is Head.MULTICLASS:
        weights = dataio.class_weights(prep.train.labels(), run.model.num_classes)

    if resume_from is not None:
        model, optimizer, norm, meta = load_checkpoint(resume_from)
        if optimizer is None:
            raise ConfigError(f"{resume_from} holds no optimizer state; cannot resume")
        if norm is None or not (np.array_equal(norm.mean, prep.norm.mean)
                                and np.array_equal(norm.std, prep.norm.std)):
            raise ConfigError(f"{resume_from} was trained on different data")
        start_epoch = int(meta["epoch"]) + 1
        best_score = meta.get("best_score", -1.0)
        log_mode = "a"
    else:
        model = build(run.model, seed=cfg.seed)
        optimizer = Optimizer(run.optim.algorithm, run.optim.weight_decay, run.optim.momentum)
        start_epoch = 0
        best_score = -1.0
        log_mode = "w"

    history = []
    meta = None
    data_meta = {"window_len": run.data.window_len, "stride": run.data.stride,
                 "val_fraction": run.data.val_fraction, "seed": cfg.seed}
    if resume_from is None:
        # the untrained state, so a failure in the first epoch still leaves a checkpoint
        save_checkpoint(last_path, model, optimizer, prep.norm,
                        {"epoch": -1, "data": data_meta, "best_score": best_score})
    x_dtype = model.dtype
    with open(log_path, log_mode, encoding="utf-8") as log_fh:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(schedule, epoch)
            total_loss, seen = 0.0, 0
            for x, y in dataio.batch_iter(prep.train, run.data.batch_size, shuffle=True,
                                          seed=cfg.seed, epoch=epoch):
                model.zero_grad()
                loss, _ = loss_and_grads(model, Tensor(x.astype(x_dtype, copy=False)), y,
                                         Mode.TRAIN, weights)
                if not math.isfinite(loss):
                    raise NumericalFailure(f"non-finite loss at epoch {epoch}")
                grads = model.grads()
                if run.optim.clip_norm is not None:
                    clip_global_norm(grads, run.optim.clip_norm)
                try:
                    optimizer.step(model.params, grads, lr)
                except TrainingError as exc:
                    raise NumericalFailure(str(exc)) from exc
                total_loss += loss * len(y)
                seen += len(y)
            train_acc = accuracy_of(model, prep.train)
            entry = {"epoch": epoch, "lr": lr, "train_loss": total_loss / seen,
                     "train_accuracy": train_acc}
            if prep.val is not None:
                entry["val_accuracy"] = accuracy_of(model, prep.val)
            score = entry.get("val_accuracy", train_acc)
            history.append(entry)
            meta = {"epoch": epoch, "data": data_meta, "best_score": max(best_score, score),
                    "train_accuracy": train_acc, "val_accuracy": entry.get("val_accuracy")}
            save_checkpoint(last_path, model, optimizer, prep.norm, meta)
            if score > best_score:
                best_score = score
                save_checkpoint(best_path, model, optimizer, prep.norm, meta)
            done = (epoch == cfg.epochs - 1
                    or (cfg.target_train_accuracy is not None
                        and train_acc >= cfg.target_train_accuracy))
            if epoch % cfg.log_every == 0 or done:
                line = _format_line(entry)
                log_fh.write(line + "\n")
                log_fh.flush()
                if log_stream is not None:
                    print(line, file=log_stream, flush=True)
            if done or (stop_after_epoch is not None and epoch >= stop_after_epoch):
                break
    if meta is not None:
        save_checkpoint(final_path, model, optimizer, prep.norm, meta)
    return TrainResult(model, optimizer, prep.norm, history, best_path, final_path)
