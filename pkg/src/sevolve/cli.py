"""Command-line entry point: dataset generation, training, evaluation,
and single-sample evolution inspection.

Exit codes: 0 success, 2 config/validation error, 3 I/O error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, fields
from typing import get_type_hints

import numpy as np

from sevolve.data import (
    DatasetError,
    DatasetFile,
    GenConfig,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from sevolve.dot import graph_to_dot, trace_to_dot
from sevolve.evolve import EvolveConfig, trace_records
from sevolve.network import (
    NetworkConfig,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from sevolve.optim import NumericError, OptimConfig, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


@dataclass
class RunConfig:
    """All tunables of every command, overridable from a `key = value`
    config file and then from command-line flags."""

    # network
    layers: int = 5
    hidden_dim: int | None = None
    edge_loss_weight: float = 1.0
    # evolution
    max_trials: int = 50
    threshold: float | None = None
    # optimizer
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 60
    seed: int = 0
    # data generation
    grid_n: int = 8
    labels: int = 4
    num_seeds: int | None = None
    feature_dim: int | None = None
    noise: float = 0.5
    samples: int = 200
    # paths and selection
    dataset: str | None = None
    eval_dataset: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    out_dir: str | None = None
    sample_index: int = 0


_FIELD_TYPES = get_type_hints(RunConfig)


def _coerce(key: str, raw: str):
    tp = _FIELD_TYPES[key]
    optional = tp in (int | None, float | None, str | None)
    if optional and raw.lower() in ("none", ""):
        return None
    if tp is int or tp == int | None:
        return int(raw)
    if tp is float or tp == float | None:
        return float(raw)
    return raw


def load_config_file(path, cfg: RunConfig) -> RunConfig:
    """Apply `key = value` lines (# comments allowed); unknown keys are
    rejected."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in text.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                setattr(cfg, key, _coerce(key, raw))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return cfg


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        load_config_file(args.config, cfg)
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    return cfg


def _network_config(cfg: RunConfig, input_dim: int, num_classes: int) -> NetworkConfig:
    return NetworkConfig(
        input_dim=input_dim,
        num_classes=num_classes,
        num_layers=cfg.layers,
        hidden_dim=cfg.hidden_dim,
        edge_loss_weight=cfg.edge_loss_weight,
        evolve=EvolveConfig(max_trials=cfg.max_trials, threshold=cfg.threshold),
    )


def cmd_generate(cfg: RunConfig) -> int:
    if not cfg.out:
        raise ValueError("generate requires --out (or 'out' in the config file)")
    gen = GenConfig(grid_n=cfg.grid_n, num_labels=cfg.labels, num_seeds=cfg.num_seeds,
                    feature_dim=cfg.feature_dim, noise=cfg.noise, seed=cfg.seed)
    dataset = generate_dataset(gen, cfg.samples)
    save_dataset(cfg.out, dataset)
    if dataset.samples:
        frac = float(np.mean([s.edge_targets.mean() for s in dataset.samples]))
    else:
        frac = 0.0
    print(f"samples={len(dataset)} same_label_edge_fraction={frac!r}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    if not cfg.dataset:
        raise ValueError("train requires --dataset")
    if not cfg.out_dir:
        raise ValueError("train requires --out-dir")
    dataset = load_dataset(cfg.dataset)
    eval_samples = None
    if cfg.eval_dataset:
        eval_file = load_dataset(cfg.eval_dataset)
        if (eval_file.feature_dim != dataset.feature_dim
                or eval_file.num_labels != dataset.num_labels):
            raise ValueError("eval dataset dims do not match the training dataset")
        eval_samples = eval_file.samples
    net = _network_config(cfg, dataset.feature_dim, dataset.num_labels)
    opt = OptimConfig(learning_rate=cfg.lr, momentum=cfg.momentum,
                      weight_decay=cfg.weight_decay, epochs=cfg.epochs, seed=cfg.seed)
    params = init_params(net, np.random.default_rng([cfg.seed, 100]))
    os.makedirs(cfg.out_dir, exist_ok=True)

    started = time.perf_counter()

    def progress(row):
        print(f"epoch {row['epoch']}/{opt.epochs}: total={row['total_loss']:.4f} "
              f"task={row['task_loss']:.4f} edge={row['edge_loss']:.4f} "
              f"acc={row['eval_accuracy']:.4f} ({time.perf_counter() - started:.1f}s)",
              file=sys.stderr)

    rows = train(dataset.samples, params, net, opt, eval_dataset=eval_samples,
                 checkpoint_dir=cfg.out_dir,
                 log_path=os.path.join(cfg.out_dir, "train_log.tsv"),
                 progress=progress)
    save_checkpoint(os.path.join(cfg.out_dir, "final.ckpt"), params, net)
    print(f"final_eval_accuracy={rows[-1]['eval_accuracy']!r}")
    return EXIT_OK


def _metrics(conf: np.ndarray):
    total = conf.sum()
    accuracy = float(np.trace(conf) / total) if total else 0.0
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    iou = [float(tp[c] / denom[c]) if present[c] else None for c in range(len(tp))]
    mean_iou = (float(np.mean([v for v in iou if v is not None]))
                if present.any() else 0.0)
    return accuracy, iou, mean_iou


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise ValueError("eval requires --checkpoint")
    if not cfg.dataset:
        raise ValueError("eval requires --dataset")
    params, meta = load_checkpoint(cfg.checkpoint)
    dataset = load_dataset(cfg.dataset)
    if meta["input_dim"] != dataset.feature_dim:
        raise ValueError(
            f"checkpoint input dim {meta['input_dim']} != dataset D={dataset.feature_dim}")
    if meta["num_classes"] != dataset.num_labels:
        raise ValueError(
            f"checkpoint classes {meta['num_classes']} != dataset K={dataset.num_labels}")
    net = NetworkConfig(
        input_dim=meta["input_dim"], num_classes=meta["num_classes"],
        num_layers=meta["num_layers"], hidden_dim=meta["hidden_dim"],
        edge_loss_weight=cfg.edge_loss_weight,
        evolve=EvolveConfig(max_trials=cfg.max_trials, threshold=cfg.threshold))
    conf = np.zeros((net.num_classes, net.num_classes), dtype=np.int64)
    for idx, sample in enumerate(dataset.samples):
        rng = np.random.default_rng([cfg.seed, 3, idx])
        res = forward(sample, params, net, rng, mode="test")
        pred = np.argmax(res.combined_logits, axis=1)
        np.add.at(conf, (sample.labels, pred), 1)
    accuracy, iou, mean_iou = _metrics(conf)
    record = {
        "samples": len(dataset.samples),
        "nodes": int(conf.sum()),
        "accuracy": accuracy,
        "mean_iou": mean_iou,
        "per_class_iou": iou,
    }
    print(json.dumps(record))
    print(f"{'class':>8} {'iou':>10}", file=sys.stderr)
    for c, v in enumerate(iou):
        shown = "absent" if v is None else f"{v:.4f}"
        print(f"{c:>8} {shown:>10}", file=sys.stderr)
    print(f"accuracy {accuracy:.4f}  mean_iou {mean_iou:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_inspect(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise ValueError("inspect requires --checkpoint")
    if not cfg.dataset:
        raise ValueError("inspect requires --dataset")
    if not cfg.out_dir:
        raise ValueError("inspect requires --out-dir")
    params, meta = load_checkpoint(cfg.checkpoint)
    dataset = load_dataset(cfg.dataset)
    if meta["input_dim"] != dataset.feature_dim:
        raise ValueError(
            f"checkpoint input dim {meta['input_dim']} != dataset D={dataset.feature_dim}")
    if not (0 <= cfg.sample_index < len(dataset.samples)):
        raise ValueError(
            f"sample index {cfg.sample_index} out of range "
            f"(dataset has {len(dataset.samples)} samples)")
    sample = dataset.samples[cfg.sample_index]
    net = NetworkConfig(
        input_dim=meta["input_dim"], num_classes=meta["num_classes"],
        num_layers=meta["num_layers"], hidden_dim=meta["hidden_dim"],
        edge_loss_weight=cfg.edge_loss_weight,
        evolve=EvolveConfig(max_trials=cfg.max_trials, threshold=cfg.threshold))
    rng = np.random.default_rng([cfg.seed, 4, cfg.sample_index])
    res = forward(sample, params, net, rng, mode="test")

    os.makedirs(cfg.out_dir, exist_ok=True)
    for t, g in enumerate(res.trace.levels):
        preds = np.argmax(res.level_logits[t], axis=1)
        with open(os.path.join(cfg.out_dir, f"level{t}.dot"), "w") as fh:
            fh.write(graph_to_dot(g, node_labels=preds, name=f"level{t}"))
    with open(os.path.join(cfg.out_dir, "hierarchy.dot"), "w") as fh:
        fh.write(trace_to_dot(res.trace))
    with open(os.path.join(cfg.out_dir, "trace.txt"), "w") as fh:
        for t, trial_log in enumerate(res.trace.decisions):
            fh.write(f"# transition {t} -> {t + 1}\n")
            for line in trace_records(trial_log):
                fh.write(line + "\n")
    sizes = " ".join(str(g.num_nodes) for g in res.trace.levels)
    print(f"level_sizes={sizes}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sevolve",
        description="Graph LSTM over stochastically coarsened graph hierarchies")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)

    p_gen = sub.add_parser("generate", help="write a synthetic dataset")
    add_common(p_gen)
    p_gen.add_argument("--out", help="output dataset path")
    p_gen.add_argument("--samples", type=int)
    p_gen.add_argument("--grid-n", type=int)
    p_gen.add_argument("--labels", type=int)
    p_gen.add_argument("--num-seeds", type=int)
    p_gen.add_argument("--feature-dim", type=int)
    p_gen.add_argument("--noise", type=float)
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="train a model")
    add_common(p_train)
    p_train.add_argument("--dataset")
    p_train.add_argument("--eval-dataset")
    p_train.add_argument("--out-dir")
    p_train.add_argument("--layers", type=int)
    p_train.add_argument("--hidden-dim", type=int)
    p_train.add_argument("--edge-loss-weight", type=float)
    p_train.add_argument("--max-trials", type=int)
    p_train.add_argument("--threshold", type=float)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--momentum", type=float)
    p_train.add_argument("--weight-decay", type=float)
    p_train.add_argument("--epochs", type=int)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--dataset")
    p_eval.add_argument("--max-trials", type=int)
    p_eval.add_argument("--threshold", type=float)
    p_eval.set_defaults(func=cmd_eval)

    p_ins = sub.add_parser("inspect", help="dump one sample's evolution trace")
    add_common(p_ins)
    p_ins.add_argument("--checkpoint")
    p_ins.add_argument("--dataset")
    p_ins.add_argument("--out-dir")
    p_ins.add_argument("--sample-index", type=int)
    p_ins.add_argument("--max-trials", type=int)
    p_ins.add_argument("--threshold", type=float)
    p_ins.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        return args.func(cfg)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
