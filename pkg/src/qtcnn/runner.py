"""Training loops, evaluation, block sweeps, checkpoints and metric export."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Splits, WindowedDataset
from .nn import (CnnArchitecture, NumericError, TrainState, adam_step, bce_loss, cnn_backward,
                 cnn_forward, count_cnn_params, init_theta)
from .qsim import QnnConfig
from .qtcore import (CapacityError, MappingModel, ScalingModel, backprop_generation, count_qt_params,
                     forward_generation, mapping_param_count, required_qubits)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "qtcnn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    mode: str = "qt"
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    n_blocks: int = 12
    mapping_hidden: int = 20
    init_seed: int = 0
    shuffle_seed: int = 1
    split_seed: int = 2
    arch: CnnArchitecture = field(default_factory=CnnArchitecture)
    dataset: str = ""

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = CnnArchitecture(**self.arch)
        if self.mode not in ("qt", "classical"):
            raise ValueError(f"mode must be 'qt' or 'classical', got {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.mode == "qt":
            if self.n_blocks < 1:
                raise ValueError("QT mode needs n_blocks >= 1")
            if self.mapping_hidden < 1:
                raise ValueError("mapping_hidden must be >= 1")

    def seeds(self) -> dict:
        return {"init": self.init_seed, "shuffle": self.shuffle_seed, "split": self.split_seed}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d


@dataclass(frozen=True)
class Metrics:
    loss: float
    accuracy: float
    tp: int
    tn: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    mode: str
    epochs: list[dict]
    test: dict
    best_epoch: int
    trainable: int
    ratio: float
    config: dict
    seeds: dict
    epoch_seconds: list[float] = field(default_factory=list)

    def metrics(self) -> dict:
        """Everything except wall-clock timings; reproducible from (config, seeds)."""
        d = asdict(self)
        d.pop("epoch_seconds")
        return d

    def to_dict(self) -> dict:
        return asdict(self)


# -- parameterisations ------------------------------------------------------------

class ClassicalModel:
    """Trainable vector is theta itself."""

    mode = "classical"

    def __init__(self, arch: CnnArchitecture):
        self.arch = arch
        self.n_params = count_cnn_params(arch)

    def init(self, seed: int) -> np.ndarray:
        return init_theta(self.arch, seed)

    def theta(self, params):
        return params, None

    def pullback(self, dtheta, cache):
        return dtheta

    def state_dict(self, params) -> dict:
        return {"theta": params.tolist()}

    def load_state(self, d: dict) -> np.ndarray:
        return np.array(d["theta"], dtype=np.float64)


class QtModel:
    """Trainable vector is [phi, gamma, scaling]; theta is regenerated on every call."""

    mode = "qt"

    def __init__(self, arch: CnnArchitecture, n_blocks: int, hidden: int = 20):
        self.arch = arch
        self.m = count_cnn_params(arch)
        self.qnn = QnnConfig(required_qubits(self.m), n_blocks)
        if self.qnn.dim < self.m:
            raise CapacityError(f"2^{self.qnn.n_qubits} < {self.m}")
        self.hidden = hidden
        self.n_gamma = mapping_param_count(self.qnn.n_qubits, hidden)
        self.n_params = self.qnn.n_params + self.n_gamma + 8

    def split(self, params):
        a = self.qnn.n_params
        b = a + self.n_gamma
        return (params[:a],
                MappingModel.from_vector(params[a:b], self.qnn.n_qubits, self.hidden),
                ScalingModel.from_vector(params[b:]))

    def init(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        phi = rng.uniform(-np.pi, np.pi, size=self.qnn.n_params)
        mapping = MappingModel.init(self.qnn.n_qubits, self.hidden, rng)
        gen = forward_generation(self.qnn, phi, mapping, ScalingModel.identity(), self.arch)
        scaling = ScalingModel.calibrated(gen.g, self.arch)
        return np.concatenate([phi, mapping.to_vector(), scaling.to_vector()])

    def theta(self, params):
        phi, mapping, scaling = self.split(params)
        gen = forward_generation(self.qnn, phi, mapping, scaling, self.arch)
        return gen.theta, gen

    def pullback(self, dtheta, cache):
        return np.concatenate(backprop_generation(dtheta, cache))

    def state_dict(self, params) -> dict:
        phi, mapping, scaling = self.split(params)
        return {"phi": phi.tolist(), "gamma": mapping.to_vector().tolist(),
                "scaling": scaling.to_vector().tolist(), "n_qubits": self.qnn.n_qubits,
                "n_blocks": self.qnn.n_blocks, "mapping_hidden": self.hidden}

    def load_state(self, d: dict) -> np.ndarray:
        return np.concatenate([d["phi"], d["gamma"], d["scaling"]]).astype(np.float64)


def make_model(config: TrainConfig):
    if config.mode == "qt":
        return QtModel(config.arch, config.n_blocks, config.mapping_hidden)
    return ClassicalModel(config.arch)


# -- evaluation ------------------------------------------------------------------

def evaluate(arch: CnnArchitecture, theta, split: WindowedDataset, batch_size: int = 512) -> Metrics:
    """Loss, accuracy (y_hat >= 0.5 -> class 1) and confusion counts.

    ``theta`` may be a flat parameter vector or a (phi, MappingModel,
    ScalingModel) triple, in which case the weights are generated first.
    """
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    if isinstance(theta, tuple):
        phi, mapping, scaling = theta
        qnn = QnnConfig(mapping.n_inputs - 1, len(phi) // (mapping.n_inputs - 1))
        theta = forward_generation(qnn, phi, mapping, scaling, arch).theta
    preds = np.concatenate([cnn_forward(arch, theta, split.x[i:i + batch_size])
                            for i in range(0, len(split), batch_size)])
    y = split.y
    cls = (preds >= 0.5).astype(np.int64)
    tp = int(np.sum((cls == 1) & (y == 1)))
    tn = int(np.sum((cls == 0) & (y == 0)))
    fp = int(np.sum((cls == 1) & (y == 0)))
    fn = int(np.sum((cls == 0) & (y == 1)))
    return Metrics(bce_loss(y, preds), (tp + tn) / len(y), tp, tn, fp, fn)


# -- training --------------------------------------------------------------------

def _train(model, config: TrainConfig, splits: Splits, progress=None) -> tuple[RunRecord, np.ndarray]:
    arch = config.arch
    params = model.init(config.init_seed)
    state = TrainState.zeros(params.size, lr=config.lr)
    rng = np.random.default_rng(config.shuffle_seed)
    train = splits.train
    if len(train) == 0:
        raise ValueError("empty training split")

    def snapshot(epoch):
        theta, _ = model.theta(params)
        tr = evaluate(arch, theta, train)
        va = evaluate(arch, theta, splits.validation)
        return {"epoch": epoch, "train_loss": tr.loss, "train_accuracy": tr.accuracy,
                "val_loss": va.loss, "val_accuracy": va.accuracy}

    history = [snapshot(0)]
    seconds = [0.0]
    best = params.copy()
    best_key = (history[0]["val_accuracy"], -history[0]["val_loss"])
    best_epoch = 0

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        for step, i in enumerate(range(0, len(train), config.batch_size)):
            idx = order[i:i + config.batch_size]
            theta, cache = model.theta(params)
            loss, dtheta = cnn_backward(arch, theta, train.x[idx], train.y[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch}, step {step}")
            grads = model.pullback(dtheta, cache)
            params, state = adam_step(state, params, grads)
        row = snapshot(epoch)
        history.append(row)
        seconds.append(time.perf_counter() - t0)
        key = (row["val_accuracy"], -row["val_loss"])
        if key > best_key:
            best_key, best, best_epoch = key, params.copy(), epoch
        log.debug("epoch %d train_loss=%.4f val_acc=%.4f", epoch, row["train_loss"], row["val_accuracy"])
        if progress is not None:
            progress(row)

    theta, _ = model.theta(best)
    test = evaluate(arch, theta, splits.test)
    trainable = model.n_params
    record = RunRecord(
        mode=model.mode,
        epochs=history,
        test=test.to_dict(),
        best_epoch=best_epoch,
        trainable=trainable,
        ratio=trainable / count_cnn_params(arch),
        config=config.to_dict(),
        seeds=config.seeds(),
        epoch_seconds=seconds,
    )
    return record, best


def train_qt(config: TrainConfig, splits: Splits, progress=None) -> tuple[RunRecord, np.ndarray]:
    """Train (phi, gamma, s); theta is regenerated from them at every step."""
    config = replace(config, mode="qt")
    return _train(make_model(config), config, splits, progress)


def train_classical(config: TrainConfig, splits: Splits, progress=None) -> tuple[RunRecord, np.ndarray]:
    config = replace(config, mode="classical")
    return _train(make_model(config), config, splits, progress)


def train(config: TrainConfig, splits: Splits, progress=None):
    fn = train_qt if config.mode == "qt" else train_classical
    return fn(config, splits, progress)


def sweep_blocks(config: TrainConfig, splits: Splits, block_list, include_baseline: bool = True) -> list[dict]:
    """One QT run per block count on shared splits and seeds, plus the classical baseline."""
    block_list = list(block_list)
    if not block_list:
        raise ValueError("block_list must not be empty")
    rows = []
    for nb in block_list:
        record, _ = train_qt(replace(config, n_blocks=nb), splits)
        rows.append(_sweep_row("qt", nb, record))
    if include_baseline:
        record, _ = train_classical(config, splits)
        rows.append(_sweep_row("classical", None, record))
    return rows


def _sweep_row(mode, n_blocks, record: RunRecord) -> dict:
    best = record.epochs[record.best_epoch]
    return {"mode": mode, "n_blocks": n_blocks, "trainable": record.trainable, "ratio": record.ratio,
            "train_accuracy": best["train_accuracy"], "test_accuracy": record.test["accuracy"]}


# -- parameter accounting -------------------------------------------------------

PUBLISHED_QT_TOTALS = {12: 456, 96: 1464}


def param_report(arch: CnnArchitecture, n_blocks: int, hidden: int = 20) -> dict:
    m = count_cnn_params(arch)
    n = required_qubits(m)
    qnn = QnnConfig(n, n_blocks)
    total = count_qt_params(qnn, MappingModel.zeros(n, hidden), ScalingModel.identity())
    report = {
        "M": m, "N": n, "n_blocks": n_blocks,
        "qnn": qnn.n_params, "mapping": mapping_param_count(n, hidden), "scaling": 8,
        "total": total, "ratio": total / m,
    }
    if n_blocks in PUBLISHED_QT_TOTALS:
        report["published_total"] = PUBLISHED_QT_TOTALS[n_blocks]
        report["published_difference"] = PUBLISHED_QT_TOTALS[n_blocks] - total
    return report


# -- persistence -----------------------------------------------------------------

def save_checkpoint(path, config: TrainConfig, params) -> None:
    model = make_model(config)
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "mode": config.mode,
           "arch": config.arch.to_dict(), "config": config.to_dict(), "params": model.state_dict(params)}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[TrainConfig, np.ndarray]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    config = TrainConfig(**doc["config"])
    return config, make_model(config).load_state(doc["params"])


def checkpoint_theta(config: TrainConfig, params) -> np.ndarray:
    theta, _ = make_model(config).theta(np.asarray(params, dtype=np.float64))
    return theta


def write_run(out_dir, record: RunRecord, config: TrainConfig, params) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "epochs.jsonl").open("w", encoding="utf-8") as fh:
        for row, sec in zip(record.epochs, record.epoch_seconds):
            fh.write(json.dumps({**row, "seconds": sec, "mode": record.mode}) + "\n")
    (out / "record.json").write_text(json.dumps(record.to_dict(), indent=2) + "\n", encoding="utf-8")
    save_checkpoint(out / "checkpoint.json", config, params)
    return out


SWEEP_COLUMNS = ("mode", "n_blocks", "trainable", "ratio", "train_accuracy", "test_accuracy")


def write_sweep(out_dir, rows: list[dict], config: TrainConfig) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "sweep.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r[k] is None else r[k]) for k in SWEEP_COLUMNS})
    txt_path = out / "sweep.txt"
    txt_path.write_text(format_sweep(rows) + "\n", encoding="utf-8")
    (out / "sweep_config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
    return csv_path, txt_path


def format_sweep(rows: list[dict]) -> str:
    lines = [f"{'mode':<10}{'blocks':>7}{'trainable':>11}{'ratio':>9}{'train_acc':>11}{'test_acc':>10}"]
    for r in rows:
        nb = "-" if r["n_blocks"] is None else str(r["n_blocks"])
        lines.append(f"{r['mode']:<10}{nb:>7}{r['trainable']:>11}{r['ratio'] * 100:>8.2f}%"
                     f"{r['train_accuracy']:>11.4f}{r['test_accuracy']:>10.4f}")
    return "\n".join(lines)
