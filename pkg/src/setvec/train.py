"""Joint end-to-end training with Adam."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics
from .checkpoint import Checkpoint, OptimizerState, save_checkpoint
from .data import Bag
from .errors import DomainError, IncompatibilityError, NumericError, UsageError
from .model import ArchConfig, ModelParams, ObjectiveConfig, init_params, loss_and_grads, predict_bags
from .seeding import substream

TARGET_NORMS = ("none", "standardize")


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 100.0
    lambda2: float = 0.01
    eps: float = 1e-8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    bags_per_step: int = 8
    seed: int = 0
    pool_mode: str = "weighted"
    recon_loss: str = "mse"
    grad_clip: Optional[float] = None
    val_fraction: float = 0.1
    target_norm: str = "none"
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if isinstance(self.arch, dict):
            object.__setattr__(self, "arch", ArchConfig(**self.arch))
        if not self.learning_rate > 0:
            raise UsageError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise UsageError("beta1 and beta2 must lie in [0, 1)")
        if self.epochs < 0 or self.bags_per_step < 1:
            raise UsageError("epochs must be >= 0 and bags_per_step >= 1")
        if not 0 <= self.val_fraction < 1:
            raise UsageError("val_fraction must lie in [0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise UsageError("grad_clip must be positive when set")
        if self.target_norm not in TARGET_NORMS:
            raise UsageError(f"target_norm must be one of {TARGET_NORMS}")
        self.objective()  # validates lambdas, eps, pool and loss names

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.lambda1, self.lambda2, self.eps, self.pool_mode, self.recon_loss)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


def _group_of(name: str) -> str:
    return name.split(".", 1)[0]


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their joint norm is at most ``max_norm``; returns the norm before."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def adam_step(params: ModelParams, grads: dict, state: OptimizerState, cfg: TrainConfig):
    """One bias-corrected Adam update. Returns ``(params', state')``; inputs are not modified."""
    for name, g in grads.items():
        if name not in params.arrays or g.shape != params.arrays[name].shape:
            raise UsageError(f"gradient {name!r} does not match any parameter")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter group {_group_of(name)!r} ({name})")
    new_params, new_state = params.copy(), state.copy()
    new_state.step = t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, g in grads.items():
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_state.m[name], new_state.v[name] = m, v
        p = params.arrays[name]
        new_params.arrays[name] = (p - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)
    return new_params, new_state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def split_validation(bags: Sequence[Bag], fraction: float, seed: int):
    """Seeded hold-out of ``round(fraction * n)`` bags; returns ``(train, val)``."""
    n_val = int(round(fraction * len(bags)))
    if n_val == 0:
        return list(bags), []
    order = substream(seed, "split").permutation(len(bags))
    val_idx = set(order[:n_val].tolist())
    return [b for i, b in enumerate(bags) if i not in val_idx], [b for i, b in enumerate(bags) if i in val_idx]


def target_stats(bags: Sequence[Bag], mode: str) -> tuple:
    if mode == "none":
        return 0.0, 1.0
    ys = np.array([b.y for b in bags], dtype=np.float64)
    std = float(ys.std())
    return float(ys.mean()), (std if std > 0 else 1.0)


def evaluate_r2(bags: Sequence[Bag], params: ModelParams, pool_mode: str) -> float:
    outs = predict_bags(bags, params, pool_mode)
    return metrics.r_squared([b.y for b in bags], [o.y_hat for o in outs])


@dataclass
class TrainResult:
    params: ModelParams
    opt_state: OptimizerState
    log: list
    epoch: int
    val_bags: list = field(default_factory=list)


def _write_log_line(path: Optional[Path], record: dict) -> None:
    if path is not None:
        with path.open("a") as fh:
            fh.write(json.dumps(metrics._round_floats(record), sort_keys=True) + "\n")


def train(dataset: Sequence[Bag], cfg: TrainConfig, val_bags: Optional[Sequence[Bag]] = None,
          log_path=None, checkpoint_path=None, resume: Optional[Checkpoint] = None,
          on_epoch: Optional[Callable[[dict, ModelParams], None]] = None,
          initial_params: Optional[ModelParams] = None) -> TrainResult:
    """Optimise the joint objective over ``dataset``.

    Each epoch visits the bags in an order drawn from the ``shuffle:<epoch>``
    sub-stream; every step averages the objective over ``bags_per_step`` bags.
    One NDJSON record per epoch holds the epoch means of L_d, L_g, R and the
    total, plus ``val_r2`` when validation bags exist. With ``checkpoint_path``
    a checkpoint is written after every completed epoch, so a numeric abort
    leaves the last good one on disk. ``initial_params`` replaces the seeded
    initialisation (its target scaling is kept as given).
    """
    if not dataset:
        raise DomainError("cannot train on an empty dataset")
    if any(b.y is None for b in dataset):
        raise UsageError("every training bag needs a target")
    if val_bags is None:
        train_bags, val_bags = split_validation(dataset, cfg.val_fraction, cfg.seed)
    else:
        train_bags, val_bags = list(dataset), list(val_bags)
    obj = cfg.objective()
    log_path = Path(log_path) if log_path is not None else None
    if resume is not None:
        params, state, start_epoch = resume.params.copy(), resume.opt_state.copy(), resume.epoch
        if params.arch != cfg.arch:
            raise IncompatibilityError("resume checkpoint architecture differs from the training config")
    else:
        if initial_params is not None:
            params = initial_params.copy()
        else:
            params = init_params(cfg.arch, substream(cfg.seed, "init"))
            params.target_shift, params.target_scale = target_stats(train_bags, cfg.target_norm)
        state, start_epoch = OptimizerState.fresh(params), 0
        if log_path is not None:
            log_path.write_text("")
    log = []
    for epoch in range(start_epoch, cfg.epochs):
        order = substream(cfg.seed, f"shuffle:{epoch}").permutation(len(train_bags))
        sums = {"L_d": 0.0, "L_g": 0.0, "R": 0.0, "total": 0.0}
        for start in range(0, len(order), cfg.bags_per_step):
            batch = [train_bags[i] for i in order[start:start + cfg.bags_per_step]]
            _, grads, outputs, bn_update = loss_and_grads(batch, params, obj, training=True)
            if cfg.grad_clip is not None:
                clip_gradients(grads, cfg.grad_clip)
            params, state = adam_step(params, grads, state, cfg)
            params.bn_state.update(bn_update)
            for o in outputs:
                sums["L_d"] += o.loss.discriminative
                sums["L_g"] += o.loss.generative
                sums["R"] += o.loss.attention_reg
                sums["total"] += o.loss.total
        record = {"epoch": epoch + 1, "step": state.step, **{k: v / len(train_bags) for k, v in sums.items()}}
        if val_bags:
            record["val_r2"] = evaluate_r2(val_bags, params, cfg.pool_mode)
        log.append(record)
        _write_log_line(log_path, record)
        if checkpoint_path is not None:
            save_checkpoint(Checkpoint(params, state, cfg.to_dict(), cfg.seed, epoch + 1), checkpoint_path)
        if on_epoch is not None:
            on_epoch(record, params)
    return TrainResult(params, state, log, max(cfg.epochs, start_epoch), list(val_bags))


def read_log(path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
