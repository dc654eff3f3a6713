"""Single-run subspace training with momentum SGD.

Each step samples a point of the subspace, runs the network there, and routes
the gradient back to every endpoint scaled by that endpoint's coefficient. An
optional squared-cosine penalty between a random pair of endpoints pushes the
subspace apart; with ``samples > 1`` the batch is split into groups that each
get their own coordinate, which also enables the feature-similarity penalty.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import rng as rngs
from .errors import ConfigError, InputError, NumericError
from .nn import NetworkSpec, ParamVector, backprop, loss_and_grad, trace
from .subspace import (
    Kind,
    SampleCoord,
    Subspace,
    cosine_reg,
    eval_point,
    geometry_stats,
    init_subspace,
    pair_sample,
    route_gradient,
    sample_coord,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 160
    batch_size: int = 128
    lr_max: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    beta: float = 1.0
    lam: float = 0.0
    samples: int = 1
    layerwise: bool = False
    seed: int = 0
    loss: str = "cross_entropy"
    label_smoothing: float = 0.0
    point_init: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.samples < 1:
            raise ConfigError("samples must be at least 1")
        if self.samples > 1 and self.batch_size % self.samples:
            raise ConfigError(f"samples={self.samples} must divide batch_size={self.batch_size}")
        if self.beta < 0 or self.lam < 0:
            raise ConfigError("beta and lam must be non-negative")
        if self.lr_max < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("invalid optimizer settings")
        if self.loss not in ("cross_entropy", "mse"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        for key in d:
            if key not in names:
                raise ConfigError(f"unknown training option {key!r}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    buffers: list
    step: int = 0

    @classmethod
    def fresh(cls, m: int) -> "OptimizerState":
        return cls([None] * m, 0)

    def copy(self) -> "OptimizerState":
        return OptimizerState([None if b is None else b.copy() for b in self.buffers], self.step)


@dataclass
class Streams:
    data: np.random.Generator
    coords: np.random.Generator
    pairs: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        return cls(rngs.stream(seed, "data"), rngs.stream(seed, "coords"), rngs.stream(seed, "pairs"))


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0 to ``lr_max``, then cosine annealing towards 0."""
    total = config.epochs * steps_per_epoch
    warmup = min(config.warmup_epochs * steps_per_epoch, total)
    if step < warmup:
        return config.lr_max * step / warmup
    t = step - warmup
    span = total - warmup
    if span <= 0:
        return config.lr_max
    return config.lr_max * 0.5 * (1.0 + math.cos(math.pi * t / span))


def coord_separation(a: SampleCoord, b: SampleCoord) -> float:
    """|a - b| for scalar coordinates, total variation for simplex weights, layer mean when layerwise."""

    def sep(u, v):
        if np.ndim(u) == 0:
            return abs(float(u) - float(v))
        return 0.5 * float(np.abs(np.asarray(u) - np.asarray(v)).sum())

    if a.layerwise:
        return float(np.mean([sep(a.per_layer[i], b.per_layer[i]) for i in sorted(a.per_layer)]))
    return sep(a.value, b.value)


def feature_reg(phi_j, phi_k, alpha_j, alpha_k, lam: float):
    """``lam * |alpha_j - alpha_k| * cos^2(phi_j, phi_k)`` over flattened features.

    ``alpha_*`` may be scalars or :class:`SampleCoord`. Returns the value and the
    gradients with respect to both feature arrays.
    """
    phi_j = np.asarray(phi_j, dtype=np.float64)
    phi_k = np.asarray(phi_k, dtype=np.float64)
    if phi_j.shape != phi_k.shape:
        raise ConfigError(f"feature shapes differ: {phi_j.shape} vs {phi_k.shape}")
    if isinstance(alpha_j, SampleCoord):
        gap = coord_separation(alpha_j, alpha_k)
    else:
        gap = coord_separation(SampleCoord.of(alpha_j), SampleCoord.of(alpha_k))
    zeros = (np.zeros_like(phi_j), np.zeros_like(phi_k))
    scale = lam * gap
    if scale == 0.0:
        return 0.0, *zeros
    a, b = phi_j.ravel(), phi_k.ravel()
    na, nb = a @ a, b @ b
    if na == 0.0 or nb == 0.0:
        log.warning("zero feature norm, skipping feature-similarity term for this batch")
        return 0.0, *zeros
    d = a @ b
    c = 2.0 * d / (na * nb)
    ga = scale * c * (b - (d / na) * a)
    gb = scale * c * (a - (d / nb) * b)
    return float(scale * d * d / (na * nb)), ga.reshape(phi_j.shape), gb.reshape(phi_k.shape)


@dataclass
class StepMetrics:
    loss: float
    task_loss: float
    reg_value: float
    feature_value: float
    coords: list
    lr: float


def sgd_update(subspace: Subspace, grads: list, config: TrainConfig, optimizer: OptimizerState, lr: float) -> None:
    """Coupled weight decay and heavy-ball momentum, applied per endpoint in place."""
    for i, (w, g) in enumerate(zip(subspace.endpoints, grads)):
        d = g + config.weight_decay * w.values
        buf = optimizer.buffers[i]
        buf = d if buf is None else config.momentum * buf + d
        optimizer.buffers[i] = buf
        subspace.endpoints[i] = w.with_values(w.values - lr * buf)
    optimizer.step += 1


def train_step(
    spec: NetworkSpec,
    subspace: Subspace,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    optimizer: OptimizerState,
    streams: Streams,
    lr: float,
) -> StepMetrics:
    n = len(y)
    if n == 0:
        raise InputError("empty batch")
    s = config.samples
    groups = [np.arange(n)] if s == 1 else np.array_split(np.arange(n), s)
    groups = [g for g in groups if g.size]
    layer_ids = sorted(subspace.endpoints[0].layer_groups) if config.layerwise else ()

    coords, traces, dlogits = [], [], []
    task_loss = 0.0
    for g in groups:
        coord = sample_coord(subspace.kind, streams.coords, config.layerwise, layer_ids)
        theta = eval_point(subspace, coord)
        tr = trace(spec, theta, x[g], "train")
        value, dl = loss_and_grad(tr.logits, y[g], config.loss, config.label_smoothing)
        if len(groups) > 1:
            w = g.size / n
            value, dl = w * value, w * dl
        task_loss += value
        coords.append(coord)
        traces.append(tr)
        dlogits.append(dl)

    dfeat = [None] * len(groups)
    feature_value = 0.0
    if config.lam > 0 and len(groups) >= 2:
        j, k = pair_sample(len(groups), streams.pairs)
        rows = min(groups[j].size, groups[k].size)
        feature_value, gj, gk = feature_reg(
            traces[j].features[:rows], traces[k].features[:rows], coords[j], coords[k], config.lam
        )
        for idx, gpart in ((j, gj), (k, gk)):
            full = np.zeros_like(traces[idx].features)
            full[:rows] = gpart
            dfeat[idx] = full

    grads = None
    for coord, tr, dl, df in zip(coords, traces, dlogits, dfeat):
        routed = route_gradient(subspace, coord, backprop(tr, dl, df))
        if grads is None:
            grads = [r.values for r in routed]
        else:
            grads = [a + r.values for a, r in zip(grads, routed)]

    reg_value = 0.0
    if config.beta > 0 and subspace.m >= 2:
        j, k = pair_sample(subspace.m, streams.pairs)
        reg_value, gj, gk = cosine_reg(subspace.endpoints[j], subspace.endpoints[k], names=(j, k))
        grads[j] = grads[j] + config.beta * gj.values
        grads[k] = grads[k] + config.beta * gk.values

    total = task_loss + config.beta * reg_value + feature_value
    if not math.isfinite(total):
        raise NumericError(
            f"non-finite loss {total} at step {optimizer.step}, coords {[c.to_json() for c in coords]}"
        )
    sgd_update(subspace, grads, config, optimizer, lr)
    return StepMetrics(total, task_loss, reg_value, feature_value, coords, lr)


@dataclass
class TrainState:
    subspace: Subspace
    optimizer: OptimizerState
    epoch: int = 0

    def copy(self) -> "TrainState":
        return TrainState(self.subspace.copy(), self.optimizer.copy(), self.epoch)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def train_epochs(
    spec: NetworkSpec,
    dataset,
    config: TrainConfig,
    state: TrainState,
    streams: Streams,
    n_epochs: int,
    on_epoch=None,
) -> list:
    """Advance ``state`` by ``n_epochs`` epochs; the schedule spans ``config.epochs``."""
    x, y = dataset.inputs, dataset.labels
    spe = steps_per_epoch(len(y), config.batch_size)
    records = []
    for _ in range(n_epochs):
        start = time.perf_counter()
        order = streams.data.permutation(len(y))
        losses, regs = [], []
        lr = 0.0
        for b in range(spe):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            lr = lr_at(state.optimizer.step, config, spe)
            m = train_step(spec, state.subspace, x[idx], y[idx], config, state.optimizer, streams, lr)
            losses.append(m.task_loss)
            regs.append(m.reg_value)
        state.epoch += 1
        rec = {
            "epoch": state.epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "reg_value": float(np.mean(regs)),
        }
        if state.subspace.m >= 2:
            rec.update(geometry_stats(state.subspace).as_record())
        records.append(rec)
        if on_epoch is not None:
            on_epoch(state, rec, time.perf_counter() - start)
    return records


def init_state(spec: NetworkSpec, kind: Kind, config: TrainConfig, init_seed: int | None = None) -> TrainState:
    seed = config.seed if init_seed is None else init_seed
    sub = init_subspace(spec, kind, rngs.stream(seed, "init"), config.point_init)
    return TrainState(sub, OptimizerState.fresh(kind.m))


def train_run(
    spec: NetworkSpec,
    dataset,
    kind: Kind,
    config: TrainConfig,
    out_dir=None,
    checkpoint_every: int = 0,
    checkpoint_extra: dict | None = None,
):
    """Train a subspace from scratch; returns ``(subspace, per-epoch records)``.

    With ``out_dir`` the records go to ``metrics.jsonl`` (deterministic),
    wall-clock times to ``timings.jsonl``, and checkpoints to
    ``checkpoints/epoch_XXXX`` every ``checkpoint_every`` epochs plus
    ``checkpoints/final``.
    """
    from .checkpoint import save_subspace

    config.validate()
    state = init_state(spec, kind, config)
    streams = Streams.from_seed(config.seed)
    if out_dir is None:
        records = train_epochs(spec, dataset, config, state, streams, config.epochs)
        return state.subspace, records

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as mf, open(out / "timings.jsonl", "w") as tf:

        def on_epoch(st, rec, seconds):
            mf.write(json.dumps(rec) + "\n")
            tf.write(json.dumps({"epoch": rec["epoch"], "wall_time": seconds}) + "\n")
            if checkpoint_every and st.epoch % checkpoint_every == 0:
                save_subspace(out / "checkpoints" / f"epoch_{st.epoch:04d}", spec, st.subspace, checkpoint_extra)

        records = train_epochs(spec, dataset, config, state, streams, config.epochs, on_epoch)
    save_subspace(out / "checkpoints" / "final", spec, state.subspace, checkpoint_extra)
    return state.subspace, records
