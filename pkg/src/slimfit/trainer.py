"""Fine-tuning loop stitching model, scheduler, codecs, and accounting.

Each iteration follows a fixed protocol: pick the frozen set from current
distances, apply it to the model, run the recorded forward (compression
aware), backpropagate (weight gradients of frozen layers are skipped by
construction), step the optimizer on active parameters only, then refresh
the distance entries of the active layers from their parameter movement.

Frozen layers are genuine pauses: no gradient, no weight decay, no moment
updates, no step-count advance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, TrainingDiverged
from .model import Batch, Model
from .scheduler import DistanceVector, Scheduler, init_distances, update_distances
from .tensor import CompressionConfig


@dataclass
class OptimizerState:
    """SGD or AdamW with per-layer step counters.

    AdamW bias correction uses the owning layer's own step count by
    default, treating frozen iterations as pauses; set global_step_bias
    to correct with the shared iteration count instead.
    """

    kind: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    global_step_bias: bool = False
    moments: dict = field(default_factory=dict)      # id(param) -> (m, v)
    layer_steps: dict = field(default_factory=dict)  # layer_id -> steps taken
    global_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")

    def step(self, model: Model, lr: float, active_ids):
        """Apply one update to the active layers' parameters."""
        self.global_steps += 1
        for lid in active_ids:
            entry = model.registry.by_id(lid)
            if not any(p.grad is not None for p in entry.params):
                continue
            self.layer_steps[lid] = self.layer_steps.get(lid, 0) + 1
            t = self.global_steps if self.global_step_bias else self.layer_steps[lid]
            for p in entry.params:
                if p.grad is None:
                    continue
                if self.kind == "sgd":
                    p.data = p.data - (lr * p.grad).astype(p.data.dtype)
                    continue
                key = id(p)
                if key not in self.moments:
                    self.moments[key] = (np.zeros_like(p.data), np.zeros_like(p.data))
                m, v = self.moments[key]
                g = p.grad
                m = self.beta1 * m + (1 - self.beta1) * g
                v = self.beta2 * v + (1 - self.beta2) * g * g
                self.moments[key] = (m, v)
                mhat = m / (1 - self.beta1 ** t)
                vhat = v / (1 - self.beta2 ** t)
                update = mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data
                p.data = p.data - (lr * update).astype(p.data.dtype)


def linear_schedule(base_lr: float, step: int, total_steps: int, warmup_frac: float) -> float:
    """Linear warmup to base_lr, then linear decay to zero."""
    warmup = int(warmup_frac * total_steps)
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if total_steps <= warmup:
        return base_lr
    frac = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * max(0.0, 1.0 - frac)


@dataclass
class RunConfig:
    scheduler: str = "ils"              # ils | random | progressive | none
    freeze_rate: float = 0.0
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    warmup_frac: float = 0.1
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    global_step_bias: bool = False
    compression: CompressionConfig | None = None
    pinned_active: tuple = ()
    track_memory: bool = True

    def validate(self):
        if not 0.0 <= self.freeze_rate < 1.0:
            raise ConfigError(f"freeze rate must lie in [0, 1), got {self.freeze_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be >= 1")
        if self.scheduler not in ("ils", "random", "progressive", "none"):
            raise ConfigError(f"unknown scheduler {self.scheduler!r}")


@dataclass
class RunLog:
    """Per-iteration traces plus end-of-run summaries."""

    metrics: list = field(default_factory=list)     # (iteration, loss, accuracy, lr)
    schedule: list = field(default_factory=list)    # (iteration, layer_id, frozen, d_i)
    memory: list = field(default_factory=list)      # (iteration, dynamic, static, total)
    update_counts: np.ndarray | None = None
    layer_names: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    final_train_loss: float = float("nan")
    initial_train_loss: float = float("nan")
    final_accuracy: float = float("nan")            # validation accuracy after the run
    distances_over_time: list = field(default_factory=list)

    def distance_matrix(self) -> np.ndarray:
        return np.asarray(self.distances_over_time)


def batches(data, batch_size: int, rng: np.random.Generator, shuffle: bool = True):
    """Deterministically shuffled minibatches of a (tokens, labels) dataset."""
    tokens, labels = data
    n = len(labels)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(tokens[idx], labels[idx])


def fine_tune(model: Model, train_data, run_config: RunConfig,
              val_data=None, scheduler: Scheduler | None = None) -> RunLog:
    """Run the iterative-freezing fine-tuning loop.

    train_data and val_data are (tokens, labels) arrays. Returns the run
    log; the model is updated in place.
    """
    run_config.validate()
    tokens, labels = train_data
    if len(labels) == 0:
        raise ConfigError("training data is empty")
    n_layers = len(model.registry)
    iters_per_epoch = len(labels) // run_config.batch_size
    if iters_per_epoch == 0:
        raise ConfigError("batch size exceeds the training set")
    total_iters = iters_per_epoch * run_config.epochs

    if scheduler is None:
        scheduler = Scheduler(run_config.scheduler, n_layers, run_config.freeze_rate,
                              run_config.seed, total_iters, run_config.pinned_active)
    dv: DistanceVector = init_distances(n_layers, run_config.seed)
    opt = OptimizerState(kind=run_config.optimizer,
                         weight_decay=run_config.weight_decay,
                         global_step_bias=run_config.global_step_bias)
    log = RunLog(update_counts=np.zeros(n_layers, dtype=np.int64),
                 layer_names=model.registry.names())
    data_rng = np.random.default_rng([run_config.seed, 0xDA7A])

    it = 0
    for _ in range(run_config.epochs):
        for batch in batches(train_data, run_config.batch_size, data_rng):
            decision = scheduler.decide(dv, it)
            model.freeze_set(decision.frozen_ids)
            model.zero_grad()

            with T.record(run_config.compression) as tape:
                logits = model.forward(batch)
                loss = T.cross_entropy(logits, batch.labels)
                T.backward(loss)

            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss {loss_val} at iteration {it}",
                    snapshot={"iteration": it, "loss": loss_val,
                              "lr": linear_schedule(run_config.lr, it, total_iters,
                                                    run_config.warmup_frac),
                              "frozen_ids": sorted(decision.frozen_ids),
                              "distances": dv.d.copy()})

            active = sorted(decision.active_ids)
            before = model.clone_layer_data(active)
            lr = linear_schedule(run_config.lr, it, total_iters, run_config.warmup_frac)
            opt.step(model, lr, active)
            after = {lid: [p.data for p in model.registry.by_id(lid).params]
                     for lid in active}
            update_distances(dv, before, after, active)

            acc = float((logits.data.argmax(axis=1) == batch.labels).mean())
            log.metrics.append((it, loss_val, acc, lr))
            for lid in range(n_layers):
                log.schedule.append((it, lid, int(lid in decision.frozen_ids), float(dv.d[lid])))
            log.update_counts[active] += 1
            log.decisions.append(decision)
            log.distances_over_time.append(dv.d.copy())
            if run_config.track_memory:
                cb = tape.cached_bytes()
                log.memory.append((it, cb["dynamic"],
                                   cb["static"] + cb["semi_static"], cb["total"]))
            if it == 0:
                log.initial_train_loss = loss_val
            it += 1

    log.final_train_loss = log.metrics[-1][1]
    model.freeze_set(())
    if val_data is not None:
        acc, _ = evaluate(model, val_data, run_config.batch_size)
        log.final_accuracy = acc
    return log


def evaluate(model: Model, data, batch_size: int = 64) -> tuple[float, float]:
    """Accuracy and mean loss without recording a tape or caching anything."""
    tokens, labels = data
    correct = 0
    loss_sum = 0.0
    seen = 0
    rng = np.random.default_rng(0)
    with T.no_grad():
        for start in range(0, len(labels), batch_size):
            batch = Batch(tokens[start:start + batch_size], labels[start:start + batch_size])
            logits = model.forward(batch)
            loss = T.cross_entropy(logits, batch.labels)
            b = len(batch.labels)
            correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
            loss_sum += float(loss.data) * b
            seen += b
    del rng
    return correct / seen, loss_sum / seen


def pretrain_synthetic(model: Model, data, steps: int, lr: float = 1e-3,
                       batch_size: int = 32, seed: int = 0,
                       warmup_frac: float = 0.1) -> Model:
    """Train on a source task so later fine-tuning starts from small updates.

    Plain training, no freezing, no compression; cycles through the data
    until the requested number of steps is reached.
    """
    if steps == 0:
        return model
    opt = OptimizerState(kind="adamw")
    rng = np.random.default_rng([seed, 0x93E])
    done = 0
    active = list(range(len(model.registry)))
    model.freeze_set(())
    while done < steps:
        for batch in batches(data, batch_size, rng):
            if done >= steps:
                break
            model.zero_grad()
            with T.record(None):
                logits = model.forward(batch)
                loss = T.cross_entropy(logits, batch.labels)
                T.backward(loss)
            if not math.isfinite(float(loss.data)):
                raise TrainingDiverged(f"non-finite loss in pretraining at step {done}")
            opt.step(model, linear_schedule(lr, done, steps, warmup_frac), active)
            done += 1
    return model
