"""Command-line entry point: prepare, train, sweep, eval, params.

Exit codes: 0 success, 2 usage/config/schema errors, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data import (DEFAULT_RATIOS, DataError, build_manifest, encode_labels, file_sha256,
                   load_feature_csv, load_manifest_splits, prepare_synthetic, prepare_table,
                   read_manifest, write_manifest)
from .nn import CnnArchitecture, NumericError, count_cnn_params
from .runner import (TrainConfig, evaluate, format_sweep, load_checkpoint, param_report,
                     checkpoint_theta, sweep_blocks, train, write_run, write_sweep)

log = logging.getLogger("qtcnn")

EXIT_USAGE = 2
EXIT_NUMERIC = 3
CONFIG_VERSION = 1

DEFAULTS = {
    "data.window": 5,
    "data.n_features": 26,
    "data.ratios": list(DEFAULT_RATIOS),
    "data.label_column": "LABEL",
    "data.segment_column": "SEGMENT",
    "data.n_per_class": 500,
    "data.separation": 6.0,
    "train.mode": "qt",
    "train.epochs": 50,
    "train.batch_size": 32,
    "train.lr": 1e-3,
    "train.n_blocks": 12,
    "train.mapping_hidden": 20,
    "arch.conv1_channels": 13,
    "arch.conv1_kernel": 3,
    "arch.conv2_channels": 2,
    "arch.conv2_kernel": 3,
    "arch.hidden": 257,
    "seeds.data": 0,
    "seeds.split": 2,
    "seeds.init": 0,
    "seeds.shuffle": 1,
}


class ConfigError(ValueError):
    pass


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config_file(path) -> dict:
    """Read a versioned JSON config; nested tables and dotted keys are both accepted."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    version = raw.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{path}: unsupported config version {version}")
    flat = _flatten(raw)
    unknown = sorted(set(flat) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return flat


def effective_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(load_config_file(args.config))
    if args.seed is not None:
        for k in ("seeds.data", "seeds.split", "seeds.init", "seeds.shuffle"):
            cfg[k] = args.seed
    for key, value in (getattr(args, "overrides", None) or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg


def _arch(cfg: dict) -> CnnArchitecture:
    return CnnArchitecture(
        window=cfg["data.window"], n_features=cfg["data.n_features"],
        conv1_channels=cfg["arch.conv1_channels"], conv1_kernel=cfg["arch.conv1_kernel"],
        conv2_channels=cfg["arch.conv2_channels"], conv2_kernel=cfg["arch.conv2_kernel"],
        hidden=cfg["arch.hidden"],
    )


def _train_config(cfg: dict, dataset: str = "") -> TrainConfig:
    return TrainConfig(
        mode=cfg["train.mode"], epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"], n_blocks=cfg["train.n_blocks"], mapping_hidden=cfg["train.mapping_hidden"],
        init_seed=cfg["seeds.init"], shuffle_seed=cfg["seeds.shuffle"], split_seed=cfg["seeds.split"],
        arch=_arch(cfg), dataset=dataset,
    )


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


# -- subcommands -----------------------------------------------------------------

def cmd_prepare(args, cfg: dict) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    w, ratios = cfg["data.window"], tuple(cfg["data.ratios"])
    seeds = {"data": cfg["seeds.data"], "split": cfg["seeds.split"]}
    if args.input:
        src_path = Path(args.input)
        if not src_path.exists():
            raise DataError(f"input file not found: {src_path}")
        table = encode_labels(load_feature_csv(src_path, cfg["data.label_column"], cfg["data.segment_column"]))
        if table.n_features != cfg["data.n_features"]:
            log.info("feature width %d from %s overrides configured %d",
                     table.n_features, src_path, cfg["data.n_features"])
            cfg["data.n_features"] = table.n_features
        splits, scaler = prepare_table(table, w, ratios, seeds["split"])
        source = {
            "kind": "csv",
            "path": os.path.relpath(src_path.resolve(), out.resolve()),
            "sha256": file_sha256(src_path),
            "label_column": cfg["data.label_column"],
            "segment_column": cfg["data.segment_column"],
        }
        label_map, names = table.label_map, table.feature_names
    else:
        splits, scaler = prepare_synthetic(cfg["data.n_per_class"], w, cfg["data.n_features"],
                                           cfg["data.separation"], seeds["data"], ratios, seeds["split"])
        source = {"kind": "synthetic", "n_per_class": cfg["data.n_per_class"],
                  "separation": cfg["data.separation"], "seed": seeds["data"]}
        label_map, names = {"0": 0, "1": 1}, None
    manifest = build_manifest(source, splits, scaler, window=w, n_features=cfg["data.n_features"],
                              label_map=label_map, ratios=ratios, seeds=seeds, config=cfg,
                              feature_names=names)
    path = out / "manifest.json"
    write_manifest(manifest, path)
    counts = manifest["class_counts"]
    _say(args, f"wrote {path}")
    for name in ("train", "validation", "test"):
        _say(args, f"  {name:<10} {sum(counts[name]):>6} windows  (class 0/1: {counts[name][0]}/{counts[name][1]})")
    _say(args, f"  labels     {label_map}")
    return 0


def _load_manifest(args):
    path = Path(args.manifest) if args.manifest else Path(args.out_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"manifest not found: {path} (run 'qtcnn prepare' first)")
    manifest = read_manifest(path)
    return path, manifest, load_manifest_splits(manifest, base_dir=path.parent)


def _data_cfg_from_manifest(cfg: dict, manifest: dict) -> dict:
    cfg = dict(cfg)
    cfg["data.window"] = manifest["window"]
    cfg["data.n_features"] = manifest["n_features"]
    return cfg


def cmd_train(args, cfg: dict) -> int:
    mpath, manifest, splits = _load_manifest(args)
    cfg = _data_cfg_from_manifest(cfg, manifest)
    config = _train_config(cfg, dataset=str(mpath))
    name = args.run_name or (f"qt-b{config.n_blocks}" if config.mode == "qt" else "classical")
    progress = None if args.quiet else (
        lambda r: print(f"  epoch {r['epoch']:>3}  loss {r['train_loss']:.4f}  "
                        f"train {r['train_accuracy']:.4f}  val {r['val_accuracy']:.4f}"))
    record, params = train(config, splits, progress)
    run_dir = write_run(Path(args.out_dir) / name, record, config, params)
    _dump(run_dir / "effective_config.json", cfg)
    summary = {"mode": record.mode, "trainable": record.trainable, "ratio": record.ratio,
               "best_epoch": record.best_epoch, "test_accuracy": record.test["accuracy"],
               "run_dir": str(run_dir)}
    _dump(run_dir / "summary.json", {**summary, "config": cfg})
    _say(args, f"{record.mode}: {record.trainable} trainable parameters "
               f"({record.ratio * 100:.2f}% of {count_cnn_params(config.arch)})")
    _say(args, f"best epoch {record.best_epoch}, test accuracy {record.test['accuracy']:.4f}")
    _say(args, f"wrote {run_dir}")
    return 0


def _parse_blocks(spec: str) -> list[int]:
    try:
        if ":" in spec:
            start, stop, step = (int(p) for p in spec.split(":"))
            return list(range(start, stop + 1, step))
        return [int(p) for p in spec.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"bad block list {spec!r}; use '12,24,36' or 'start:stop:step'") from None


def cmd_sweep(args, cfg: dict) -> int:
    mpath, manifest, splits = _load_manifest(args)
    cfg = _data_cfg_from_manifest(cfg, manifest)
    blocks = _parse_blocks(args.blocks)
    if not blocks:
        raise ConfigError("empty block list")
    config = _train_config(cfg, dataset=str(mpath))
    rows = sweep_blocks(config, splits, blocks, include_baseline=not args.no_baseline)
    out = Path(args.out_dir)
    csv_path, txt_path = write_sweep(out, rows, config)
    _dump(out / "sweep_effective_config.json", cfg)
    _say(args, format_sweep(rows))
    _say(args, f"wrote {csv_path} and {txt_path}")
    return 0


def cmd_eval(args, cfg: dict) -> int:
    config, params = load_checkpoint(args.checkpoint)
    _, manifest, splits = _load_manifest(args)
    split = getattr(splits, args.split)
    metrics = evaluate(config.arch, checkpoint_theta(config, params), split)
    doc = {"checkpoint": str(args.checkpoint), "split": args.split, "mode": config.mode,
           **metrics.to_dict(), "config": config.to_dict()}
    print(json.dumps(doc, indent=None if args.quiet else 2, sort_keys=True))
    return 0


def cmd_params(args, cfg: dict) -> int:
    arch = _arch(cfg)
    blocks = _parse_blocks(args.blocks) if args.blocks else [cfg["train.n_blocks"]]
    reports = [param_report(arch, nb, cfg["train.mapping_hidden"]) for nb in blocks]
    first = reports[0]
    lines = [f"classical CNN parameters M = {first['M']}",
             f"qubits N = ceil(log2 M) = {first['N']}  ({1 << first['N']} basis states)",
             f"{'blocks':>7}{'qnn':>7}{'mapping':>9}{'scaling':>9}{'total':>8}{'ratio':>9}"]
    for r in reports:
        line = (f"{r['n_blocks']:>7}{r['qnn']:>7}{r['mapping']:>9}{r['scaling']:>9}"
                f"{r['total']:>8}{r['ratio'] * 100:>8.2f}%")
        if "published_total" in r:
            pub = r["published_total"]
            line += f"   published: {pub} ({pub / r['M'] * 100:.1f}%), differs by {r['published_difference']}"
        lines.append(line)
    if any("published_total" in r for r in reports):
        lines.append("note: published QT totals exceed N*blocks + mapping + scaling by 3; "
                     "the totals above are exact counts of this implementation.")
    print("\n".join(lines))
    if args.json:
        _dump(Path(args.json), {"reports": reports, "config": cfg})
    return 0


# -- parser ----------------------------------------------------------------------

def _override(parser, flag, key, **kw):
    if "choices" not in kw:
        kw.setdefault("metavar", key.split(".")[-1].upper())
    parser.add_argument(flag, dest=f"ov:{key}", default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qtcnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="JSON config file (flat dotted keys or nested tables)")
    p.add_argument("--seed", type=int, help="set every seed (data, split, init, shuffle)")
    p.add_argument("--out-dir", default="runs", help="output directory (default: runs)")
    p.add_argument("--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="encode, split, scale and window a feature table")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="feature CSV with a label column")
    src.add_argument("--synthetic", action="store_true", help="generate the two-Gaussian stand-in dataset")
    _override(sp, "--window", "data.window", type=int)
    _override(sp, "--n-features", "data.n_features", type=int)
    _override(sp, "--label-column", "data.label_column")
    _override(sp, "--segment-column", "data.segment_column")
    _override(sp, "--n-per-class", "data.n_per_class", type=int)
    _override(sp, "--separation", "data.separation", type=float)
    _override(sp, "--ratios", "data.ratios", type=lambda s: [float(x) for x in s.split(",")])
    sp.set_defaults(func=cmd_prepare)

    def train_flags(q, with_mode=True):
        q.add_argument("--manifest", help="dataset manifest (default: OUT_DIR/manifest.json)")
        if with_mode:
            _override(q, "--mode", "train.mode", choices=["qt", "classical"])
        _override(q, "--epochs", "train.epochs", type=int)
        _override(q, "--batch-size", "train.batch_size", type=int)
        _override(q, "--lr", "train.lr", type=float)
        _override(q, "--hidden", "train.mapping_hidden", type=int)

    tp = sub.add_parser("train", help="train a QT or classical model")
    train_flags(tp)
    _override(tp, "--blocks", "train.n_blocks", type=int)
    tp.add_argument("--run-name")
    tp.set_defaults(func=cmd_train)

    wp = sub.add_parser("sweep", help="QT runs over several block counts plus the classical baseline")
    train_flags(wp, with_mode=False)
    wp.add_argument("--blocks", default="12:96:12", help="'12,24' or 'start:stop:step' (default 12:96:12)")
    wp.add_argument("--no-baseline", action="store_true")
    wp.set_defaults(func=cmd_sweep)

    ep = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--manifest")
    ep.add_argument("--split", choices=["train", "validation", "test"], default="test")
    ep.set_defaults(func=cmd_eval)

    pp = sub.add_parser("params", help="parameter accounting for the QT model")
    pp.add_argument("--blocks", help="'12,96' or 'start:stop:step' (default: configured n_blocks)")
    _override(pp, "--hidden", "train.mapping_hidden", type=int)
    pp.add_argument("--json", help="also write the report as JSON to this path")
    pp.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.overrides = {k[3:]: v for k, v in vars(args).items() if k.startswith("ov:")}
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        return args.func(args, cfg)
    except NumericError as e:
        print(f"qtcnn: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"qtcnn: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
