"""Feature-table ingestion and preprocessing.

Recipe: encode labels, cut stride-1 windows inside contiguous same-label
segments, stratified split of the windows, min-max scaling fitted on the
frames covered by training windows, then clamp-apply to every split.
"""
from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MANIFEST_FORMAT = "qtcnn-dataset-manifest"
MANIFEST_VERSION = 1
DEFAULT_RATIOS = (0.8, 0.1, 0.1)
SPLIT_NAMES = ("train", "validation", "test")


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, msg: str, row: int, column: str):
        super().__init__(f"row {row}, column {column!r}: {msg}")
        self.row = row
        self.column = column


class StratificationError(DataError):
    pass


@dataclass
class FeatureTable:
    features: np.ndarray             # (frames, F)
    labels: np.ndarray               # (frames,) str before encoding, int after
    feature_names: list[str]
    segments: np.ndarray | None = None
    label_map: dict[str, int] | None = None

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class WindowedDataset:
    x: np.ndarray        # (n, w, F)
    y: np.ndarray        # (n,) int in {0, 1}
    starts: np.ndarray   # (n,) frame index of each window start (sample index for synthetic data)
    split: str | None = None

    def __len__(self) -> int:
        return self.y.shape[0]

    def subset(self, idx, split: str | None = None) -> "WindowedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowedDataset(self.x[idx], self.y[idx], self.starts[idx], split)

    def class_counts(self) -> tuple[int, int]:
        n1 = int(self.y.sum())
        return len(self) - n1, n1


@dataclass
class Splits:
    train: WindowedDataset
    validation: WindowedDataset
    test: WindowedDataset

    def __iter__(self):
        return iter((self.train, self.validation, self.test))


@dataclass
class ScalerParams:
    minimum: np.ndarray
    maximum: np.ndarray
    degenerate: np.ndarray = field(init=False)

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        if np.any(self.maximum < self.minimum):
            raise ValueError("scaler maximum below minimum")
        self.degenerate = self.maximum == self.minimum

    def to_dict(self) -> dict:
        return {
            "min": self.minimum.tolist(),
            "max": self.maximum.tolist(),
            "degenerate": self.degenerate.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerParams":
        return cls(np.array(d["min"], dtype=np.float64), np.array(d["max"], dtype=np.float64))


# -- ingestion -----------------------------------------------------------------

def load_feature_csv(path, label_column: str = "LABEL", segment_column: str | None = "SEGMENT") -> FeatureTable:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if label_column not in header:
            raise SchemaError(f"{path}: no label column {label_column!r} in header {header}")
        label_pos = header.index(label_column)
        seg_pos = header.index(segment_column) if segment_column and segment_column in header else None
        feat_pos = [i for i in range(len(header)) if i not in (label_pos, seg_pos)]
        if not feat_pos:
            raise SchemaError(f"{path}: zero feature columns")

        rows, labels, segments = [], [], []
        for rownum, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", rownum, "*")
            vals = []
            for i in feat_pos:
                try:
                    vals.append(float(rec[i]))
                except ValueError:
                    raise ParseError(f"non-numeric value {rec[i]!r}", rownum, header[i]) from None
            rows.append(vals)
            labels.append(rec[label_pos].strip())
            if seg_pos is not None:
                segments.append(rec[seg_pos].strip())

    features = np.array(rows, dtype=np.float64).reshape(len(rows), len(feat_pos))
    return FeatureTable(
        features=features,
        labels=np.array(labels, dtype=object),
        feature_names=[header[i] for i in feat_pos],
        segments=np.array(segments, dtype=object) if seg_pos is not None else None,
    )


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def encode_labels(table: FeatureTable) -> FeatureTable:
    """Map the two label strings to 0/1 in lexicographic order."""
    as_str = np.array([str(v) for v in table.labels], dtype=object)
    classes = sorted(set(as_str))
    if len(classes) != 2:
        raise SchemaError(f"expected exactly 2 label classes, found {len(classes)}: {classes}")
    label_map = {c: i for i, c in enumerate(classes)}
    encoded = np.array([label_map[v] for v in as_str], dtype=np.int64)
    return replace(table, labels=encoded, label_map=label_map)


# -- scaling -------------------------------------------------------------------

def minmax_fit(data, rows: Sequence[int] | None = None) -> ScalerParams:
    """Per-feature min/max over ``rows`` of a table or a (..., F) array."""
    x = data.features if isinstance(data, FeatureTable) else np.asarray(data, dtype=np.float64)
    if rows is not None:
        x = x[np.asarray(rows, dtype=np.int64)]
    x = x.reshape(-1, x.shape[-1])
    if x.shape[0] == 0:
        raise ValueError("cannot fit scaler on an empty split")
    return ScalerParams(x.min(axis=0), x.max(axis=0))


def minmax_apply(params: ScalerParams, data):
    """Scale to [0, 1] with the fitted range; clamp out-of-range values, zero degenerate features."""
    if isinstance(data, FeatureTable):
        return replace(data, features=minmax_apply(params, data.features))
    if isinstance(data, WindowedDataset):
        return replace(data, x=minmax_apply(params, data.x))
    x = np.asarray(data, dtype=np.float64)
    span = np.where(params.degenerate, 1.0, params.maximum - params.minimum)
    out = np.clip((x - params.minimum) / span, 0.0, 1.0)
    return np.where(params.degenerate, 0.0, out)


# -- windows and splits ------------------------------------------------------------

def segment_bounds(table: FeatureTable) -> list[tuple[int, int]]:
    """[start, stop) of each maximal run sharing segment id and label."""
    n = len(table)
    if n == 0:
        return []
    key = np.asarray(table.labels).astype(str)
    if table.segments is not None:
        key = np.char.add(np.char.add(np.asarray(table.segments).astype(str), "\x00"), key)
    change = np.flatnonzero(key[1:] != key[:-1]) + 1
    edges = [0, *change.tolist(), n]
    return list(zip(edges[:-1], edges[1:]))


def window_starts(table: FeatureTable, w: int) -> np.ndarray:
    if w < 1:
        raise ValueError(f"window length must be >= 1, got {w}")
    starts = []
    for a, b in segment_bounds(table):
        if b - a < w:
            warnings.warn(f"segment [{a}, {b}) has {b - a} frames < window {w}; no windows cut")
            continue
        starts.extend(range(a, b - w + 1))
    return np.array(starts, dtype=np.int64)


def windows_at(table: FeatureTable, starts, w: int, split: str | None = None) -> WindowedDataset:
    starts = np.asarray(starts, dtype=np.int64)
    frames = starts[:, None] + np.arange(w)[None, :]
    x = table.features[frames] if len(starts) else np.empty((0, w, table.n_features))
    y = np.asarray(table.labels, dtype=np.int64)[starts]
    return WindowedDataset(x, y, starts, split)


def make_windows(table: FeatureTable, w: int) -> WindowedDataset:
    if table.label_map is None:
        raise SchemaError("labels must be encoded before windowing")
    return windows_at(table, window_starts(table, w), w)


def _allocate(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [n * r for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda j: (-(quotas[j] - counts[j]), j))
    for j in order[: n - sum(counts)]:
        counts[j] += 1
    return counts


def stratified_split(ds: WindowedDataset, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0) -> Splits:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"need three positive ratios summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for cls in (0, 1):
        members = np.flatnonzero(ds.y == cls)
        if members.size < len(ratios):
            raise StratificationError(
                f"class {cls} has {members.size} samples, fewer than {len(ratios)} splits"
            )
        members = members[rng.permutation(members.size)]
        pos = 0
        for j, c in enumerate(_allocate(members.size, ratios)):
            parts[j].extend(members[pos:pos + c].tolist())
            pos += c
    return Splits(*(ds.subset(sorted(p), name) for p, name in zip(parts, SPLIT_NAMES)))


def synth_generate(n_per_class: int, w: int = 5, n_features: int = 26, separation: float = 6.0,
                   seed: int = 0) -> WindowedDataset:
    """Two unit-variance Gaussian classes in window space.

    Class means are +/- separation/2 along the all-ones direction, so the
    mean over window entries separates the classes by ``separation`` noise
    standard deviations.
    """
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    d = w * n_features
    offset = separation / 2 / np.sqrt(d)
    y = np.repeat([0, 1], n_per_class)
    x = rng.standard_normal((2 * n_per_class, w, n_features))
    x += np.where(y == 1, offset, -offset)[:, None, None]
    return WindowedDataset(x, y.astype(np.int64), np.arange(2 * n_per_class, dtype=np.int64))


# -- end-to-end preparation + manifest -------------------------------------------

def _scale_splits(splits: Splits, scaler: ScalerParams) -> Splits:
    return Splits(*(minmax_apply(scaler, s) for s in splits))


def prepare_table(table: FeatureTable, w: int, ratios=DEFAULT_RATIOS, seed: int = 0) -> tuple[Splits, ScalerParams]:
    table = table if table.label_map is not None else encode_labels(table)
    splits = stratified_split(make_windows(table, w), ratios, seed)
    train_frames = np.unique(splits.train.starts[:, None] + np.arange(w)[None, :])
    scaler = minmax_fit(table, train_frames)
    return _scale_splits(splits, scaler), scaler


def prepare_synthetic(n_per_class: int, w: int, n_features: int, separation: float, seed: int,
                      ratios=DEFAULT_RATIOS, split_seed: int = 0) -> tuple[Splits, ScalerParams]:
    splits = stratified_split(synth_generate(n_per_class, w, n_features, separation, seed), ratios, split_seed)
    scaler = minmax_fit(splits.train.x)
    return _scale_splits(splits, scaler), scaler


def build_manifest(source: dict, splits: Splits, scaler: ScalerParams, *, window: int, n_features: int,
                   label_map: dict, ratios, seeds: dict, config: dict,
                   feature_names: list[str] | None = None) -> dict:
    return {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "source": source,
        "window": window,
        "n_features": n_features,
        "feature_names": feature_names,
        "label_map": label_map,
        "ratios": list(ratios),
        "seeds": seeds,
        "scaler": scaler.to_dict(),
        "splits": {name: s.starts.tolist() for name, s in zip(SPLIT_NAMES, splits)},
        "class_counts": {name: list(s.class_counts()) for name, s in zip(SPLIT_NAMES, splits)},
        "config": config,
    }


def write_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != MANIFEST_FORMAT:
        raise SchemaError(f"{path}: not a dataset manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise SchemaError(f"{path}: unsupported manifest version {manifest.get('version')}")
    return manifest


def load_manifest_splits(manifest: dict, base_dir=None) -> Splits:
    """Rebuild the scaled splits a manifest describes."""
    src = manifest["source"]
    w = manifest["window"]
    scaler = ScalerParams.from_dict(manifest["scaler"])
    if src["kind"] == "synthetic":
        ds = synth_generate(src["n_per_class"], w, manifest["n_features"], src["separation"], src["seed"])
        pick = lambda starts, name: ds.subset(starts, name)  # noqa: E731
    elif src["kind"] == "csv":
        path = Path(src["path"])
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        if file_sha256(path) != src["sha256"]:
            raise SchemaError(f"{path}: contents changed since the manifest was written")
        table = encode_labels(load_feature_csv(path, src["label_column"], src.get("segment_column")))
        pick = lambda starts, name: windows_at(table, starts, w, name)  # noqa: E731
    else:
        raise SchemaError(f"unknown source kind {src['kind']!r}")
    splits = Splits(*(pick(manifest["splits"][n], n) for n in SPLIT_NAMES))
    return _scale_splits(splits, scaler)
