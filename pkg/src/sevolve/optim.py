"""SGD-with-momentum training loop, weight decay, gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from sevolve.network import backward, compute_loss, forward, predict, save_checkpoint


class NumericError(RuntimeError):
    """Raised when a loss or gradient turns non-finite."""


@dataclass
class OptimConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        # lr = 0 is allowed: it makes training a documented no-op
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


class OptimState:
    """Velocity buffer per parameter tensor, shapes mirroring the params."""

    __slots__ = ("velocity",)

    def __init__(self, params):
        self.velocity = {name: np.zeros_like(t) for name, t in params.tensors()}


def sgd_step(params, grads, state: OptimState, cfg: OptimConfig):
    """v <- momentum * v - lr * (g + weight_decay * w); w <- w + v."""
    for (name, w), (gname, g) in zip(params.tensors(), grads.tensors()):
        if name != gname or w.shape != g.shape:
            raise ValueError(f"gradient tensor {gname}{g.shape} does not match "
                             f"parameter {name}{w.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in tensor {name}")
        v = state.velocity[name]
        if v.shape != w.shape:
            raise ValueError(f"velocity shape mismatch for tensor {name}")
        v *= cfg.momentum
        v -= cfg.learning_rate * (g + cfg.weight_decay * w)
        w += v


@dataclass
class GradCheckReport:
    tensor_errors: dict
    max_error: float
    tolerance: float
    passed: bool


def grad_check(sample, params, cfg, rng, step: float = 1e-5,
               tolerance: float = 1e-5, mode: str = "train") -> GradCheckReport:
    """Central-difference check of the full-network backward pass.

    Runs one forward pass, freezes its structure (visit orders and
    partitions), and compares the analytic gradient of the total loss
    against (L(w+step) - L(w-step)) / (2 step) per parameter coordinate,
    replaying the frozen structure for every probe. Relative error is
    |a - n| / max(|a|, |n|, 1e-8). Parameters are restored afterwards.
    """
    result = forward(sample, params, cfg, rng, mode=mode)
    plan = result.plan()
    analytic = backward(result, sample, cfg)
    analytic_by_name = dict(analytic.tensors())

    def loss_now():
        replay = forward(sample, params, cfg, None, mode=mode, plan=plan)
        return compute_loss(replay, sample, cfg)[0]

    errors = {}
    worst = 0.0
    for name, w in params.tensors():
        a = analytic_by_name[name]
        tensor_worst = 0.0
        flat_w = w.reshape(-1)
        flat_a = a.reshape(-1)
        for k in range(flat_w.size):
            orig = flat_w[k]
            flat_w[k] = orig + step
            loss_plus = loss_now()
            flat_w[k] = orig - step
            loss_minus = loss_now()
            flat_w[k] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            rel = abs(flat_a[k] - numeric) / max(abs(flat_a[k]), abs(numeric), 1e-8)
            if rel > tensor_worst:
                tensor_worst = rel
        errors[name] = tensor_worst
        worst = max(worst, tensor_worst)
    return GradCheckReport(errors, worst, tolerance, worst < tolerance)


def evaluate_accuracy(dataset, params, cfg, seed: int, epoch: int = 0) -> float:
    """Pooled node accuracy under test-mode prediction, one derived rng
    stream per sample."""
    correct = 0
    total = 0
    for idx, sample in enumerate(dataset):
        rng = np.random.default_rng([seed, epoch, 2, idx])
        pred = predict(sample, params, cfg, rng)
        correct += int((pred == sample.labels).sum())
        total += sample.labels.size
    return correct / total if total else 0.0


LOG_COLUMNS = ("epoch", "total_loss", "task_loss", "edge_loss", "eval_accuracy")


def format_log_row(row) -> str:
    return "\t".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                     for c in LOG_COLUMNS)


def train(dataset, params, net_cfg, opt_cfg: OptimConfig, eval_dataset=None,
          checkpoint_dir=None, log_path=None, progress=None):
    """Batch-size-1 SGD over the dataset.

    Per epoch: a seeded shuffle, one forward/backward/sgd_step per sample,
    an accuracy evaluation (on eval_dataset when given, else the training
    set), an optional checkpoint, and one log row. Returns the log rows.
    A non-finite loss aborts with the offending sample id.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    state = OptimState(params)
    rows = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        if log_fh:
            log_fh.write("\t".join(LOG_COLUMNS) + "\n")
        for epoch in range(1, opt_cfg.epochs + 1):
            order = np.random.default_rng([opt_cfg.seed, epoch, 0]).permutation(len(dataset))
            total_sum = task_sum = edge_sum = 0.0
            for sample_id in order:
                sample = dataset[int(sample_id)]
                rng = np.random.default_rng([opt_cfg.seed, epoch, 1, int(sample_id)])
                result = forward(sample, params, net_cfg, rng, mode="train")
                total, task, edge = compute_loss(result, sample, net_cfg)
                if not math.isfinite(total):
                    raise NumericError(
                        f"non-finite loss {total} at sample {sample_id} in epoch {epoch}")
                grads = backward(result, sample, net_cfg)
                sgd_step(params, grads, state, opt_cfg)
                total_sum += total
                task_sum += task
                edge_sum += edge
            acc = evaluate_accuracy(eval_dataset if eval_dataset is not None else dataset,
                                    params, net_cfg, opt_cfg.seed, epoch)
            row = {
                "epoch": epoch,
                "total_loss": total_sum / len(dataset),
                "task_loss": task_sum / len(dataset),
                "edge_loss": edge_sum / len(dataset),
                "eval_accuracy": acc,
            }
            rows.append(row)
            if log_fh:
                log_fh.write(format_log_row(row) + "\n")
                log_fh.flush()
            if checkpoint_dir is not None:
                save_checkpoint(f"{checkpoint_dir}/epoch_{epoch:03d}.ckpt", params, net_cfg)
            if progress is not None:
                progress(row)
    finally:
        if log_fh:
            log_fh.close()
    return rows
