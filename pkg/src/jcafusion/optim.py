"""Initialisation, Adam / SGD-momentum updates and the early-stopping training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, EvaluationError

log = logging.getLogger(__name__)


def xavier_init(shape, seed) -> np.ndarray:
    """Uniform Xavier/Glorot init in ``±sqrt(6 / (fan_in + fan_out))``.

    ``seed`` is an int or a ``numpy.random.Generator`` (consumed in place).
    """
    rows, cols = (int(s) for s in shape)
    if rows < 1 or cols < 1:
        raise ConfigError(f"xavier_init needs positive dims, got {shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


@dataclass
class OptimState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    buffers: dict = field(default_factory=dict)


def _check_grads(grads: Sequence[np.ndarray]) -> None:
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise EvaluationError(f"non-finite gradient for parameter {i}; update rejected")


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState) -> None:
    """One Adam update in place, with decoupled weight decay applied first."""
    _check_grads(grads)
    if not state.buffers:
        state.buffers = {"m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}
    state.step_count += 1
    t = state.step_count
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.buffers["m"], state.buffers["v"]):
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState) -> None:
    """``v <- momentum*v + g + wd*theta``; ``theta <- theta - lr*v``, in place."""
    _check_grads(grads)
    if not state.buffers:
        state.buffers = {"velocity": [np.zeros_like(p) for p in params]}
    state.step_count += 1
    for p, g, vel in zip(params, grads, state.buffers["velocity"]):
        vel *= state.momentum
        vel += g + state.weight_decay * p
        p -= state.learning_rate * vel


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 20
    weight_decay: float = 5e-4
    dropout_p: float = 0.5
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("learning_rate, batch_size and max_epochs must be positive")
        if self.patience < 0 or self.weight_decay < 0:
            raise ConfigError("patience and weight_decay must be non-negative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def make_state(self) -> OptimState:
        return OptimState(kind=self.optimizer, learning_rate=self.learning_rate,
                          momentum=self.momentum, weight_decay=self.weight_decay)


def optimizer_step(params, grads, state: OptimState) -> None:
    (adam_step if state.kind == "adam" else sgd_step)(params, grads, state)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_ccc_valence: float
    val_ccc_arousal: float

    @property
    def val_mean(self) -> float:
        return 0.5 * (self.val_ccc_valence + self.val_ccc_arousal)


METRICS_COLUMNS = ("epoch", "train_loss", "val_ccc_valence", "val_ccc_arousal")


def write_metrics_csv(path, log_rows: Sequence[EpochMetrics]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for row in log_rows:
            w.writerow([row.epoch, repr(row.train_loss), repr(row.val_ccc_valence), repr(row.val_ccc_arousal)])


@dataclass
class TrainResult:
    best_params: dict
    best_epoch: int
    best_val_ccc: float
    log: list

    def as_dict(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_val_ccc": self.best_val_ccc,
                "log": [asdict(r) for r in self.log]}


def _batch_seed(seed: int, epoch: int, batch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch]).generate_state(1)[0])


def evaluate(model, split) -> dict[str, float]:
    """Valence/arousal CCC over the whole concatenated split."""
    from .objective import ccc_per_target

    pred = model.predict(split.audio, split.visual)
    return ccc_per_target(pred, split.labels)


def train_loop(model, dataset, config: TrainConfig) -> TrainResult:
    """Mini-batch training with early stopping on mean validation CCC.

    ``dataset`` provides ``train`` and ``val`` splits (see
    :class:`jcafusion.dataio.ArraySplit`).  On return the model holds the
    parameters of the best validation epoch.
    """
    from . import linalg_ad as ad
    from .objective import ccc_loss

    config.validate()
    train, val = dataset.train, dataset.val
    if train is None or val is None or len(train) == 0 or len(val) == 0:
        raise ConfigError("train and validation splits must both be non-empty")

    named = model.named_parameters()
    nodes = list(named.values())
    state = config.make_state()
    rng = np.random.default_rng(config.seed)
    n_blocks = model.n_backbones if model.combiner == "stack" else 1

    best_val = -math.inf
    best_epoch = 0
    best_params = {n: p.value.copy() for n, p in named.items()}
    history: list[EpochMetrics] = []
    since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = np.sort(order[start:start + config.batch_size])
            audio = [a[idx] for a in train.audio]
            visual = [v[idx] for v in train.visual]
            labels = train.labels[idx]
            if n_blocks > 1:
                labels = np.concatenate([labels] * n_blocks, axis=-2)
            for p in nodes:
                p.zero_grad()
            pred, _ = model.forward(audio, visual, dropout_p=config.dropout_p, training=True,
                                    rng_seed=_batch_seed(config.seed, epoch, b))
            loss = ccc_loss(pred, labels)
            ad.backward(loss)
            optimizer_step([p.value for p in nodes], [p.grad for p in nodes], state)
            losses.append(loss.item())

        scores = evaluate(model, val)
        row = EpochMetrics(epoch, float(np.mean(losses)), scores["valence"], scores["arousal"])
        history.append(row)
        log.debug("epoch %d loss %.4f val ccc %.4f/%.4f", epoch, row.train_loss,
                  row.val_ccc_valence, row.val_ccc_arousal)
        if row.val_mean > best_val:
            best_val, best_epoch, since_best = row.val_mean, epoch, 0
            best_params = {n: p.value.copy() for n, p in named.items()}
        else:
            since_best += 1
            if since_best > config.patience:
                break

    for n, p in named.items():
        p.value = best_params[n].copy()
        p.zero_grad()
    log.info("best epoch %d of %d, val mean CCC %.4f", best_epoch, len(history), best_val)
    return TrainResult(best_params, best_epoch, best_val, history)
