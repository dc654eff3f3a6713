"""A small feed-forward network engine over one flat parameter vector.

Networks are stacks of dense, batch-norm and ReLU layers ending in a softmax
head. All parameters of a network live in a single float64 vector described by
a segment table, so that subspace arithmetic (convex combinations, gradient
routing, regularizers) can be written once over plain arrays.

Dense weights are stored row-major with shape ``(in_dim, out_dim)`` and applied
as ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ConfigError, InputError, NumericError, StateError

BN_EPS = 1e-5

SEGMENT_KINDS = ("dense_weight", "dense_bias", "bn_gain", "bn_shift")


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class BatchNorm:
    width: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class SoftmaxHead:
    pass


Layer = Union[Dense, BatchNorm, ReLU, SoftmaxHead]


@dataclass(frozen=True)
class Segment:
    layer_index: int
    kind: str
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.length)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_dim: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not any(isinstance(l, Dense) for l in self.layers):
            raise ConfigError("network needs at least one dense layer")
        width = self.input_dim
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if layer.in_dim != width:
                    raise ConfigError(
                        f"layer {i}: dense expects input width {layer.in_dim}, got {width}"
                    )
                width = layer.out_dim
            elif isinstance(layer, BatchNorm):
                if layer.width != width:
                    raise ConfigError(
                        f"layer {i}: batch_norm width {layer.width} does not match {width}"
                    )
            elif isinstance(layer, SoftmaxHead):
                if i != len(self.layers) - 1:
                    raise ConfigError(f"layer {i}: softmax_head must be the last layer")
            elif not isinstance(layer, ReLU):
                raise ConfigError(f"layer {i}: unknown layer {layer!r}")
        if width != self.num_classes:
            raise ConfigError(
                f"network output width {width} does not match num_classes {self.num_classes}"
            )

    @cached_property
    def segments(self) -> tuple[Segment, ...]:
        segs = []
        offset = 0
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                parts = [("dense_weight", layer.in_dim * layer.out_dim), ("dense_bias", layer.out_dim)]
            elif isinstance(layer, BatchNorm):
                parts = [("bn_gain", layer.width), ("bn_shift", layer.width)]
            else:
                continue
            for kind, length in parts:
                segs.append(Segment(i, kind, offset, length))
                offset += length
        return tuple(segs)

    @property
    def num_params(self) -> int:
        return sum(s.length for s in self.segments)

    @cached_property
    def final_dense(self) -> int:
        return max(i for i, l in enumerate(self.layers) if isinstance(l, Dense))

    @property
    def has_batch_norm(self) -> bool:
        return any(isinstance(l, BatchNorm) for l in self.layers)

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                layers.append(["dense", layer.in_dim, layer.out_dim])
            elif isinstance(layer, BatchNorm):
                layers.append(["batch_norm", layer.width])
            elif isinstance(layer, ReLU):
                layers.append(["relu"])
            else:
                layers.append(["softmax_head"])
        return {"input_dim": self.input_dim, "num_classes": self.num_classes, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        makers = {
            "dense": lambda a: Dense(int(a[0]), int(a[1])),
            "batch_norm": lambda a: BatchNorm(int(a[0])),
            "relu": lambda a: ReLU(),
            "softmax_head": lambda a: SoftmaxHead(),
        }
        try:
            layers = [makers[entry[0]](entry[1:]) for entry in d["layers"]]
        except (KeyError, IndexError) as exc:
            raise ConfigError(f"malformed network description: {exc}") from exc
        return cls(tuple(layers), int(d["input_dim"]), int(d["num_classes"]))


def mlp(input_dim: int, hidden: Sequence[int], num_classes: int, batch_norm: bool = True) -> NetworkSpec:
    """Dense -> [BatchNorm] -> ReLU blocks followed by a dense softmax head."""
    layers: list = []
    width = input_dim
    for h in hidden:
        layers.append(Dense(width, h))
        if batch_norm:
            layers.append(BatchNorm(h))
        layers.append(ReLU())
        width = h
    layers.append(Dense(width, num_classes))
    layers.append(SoftmaxHead())
    return NetworkSpec(tuple(layers), input_dim, num_classes)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 weights plus the segment table that gives them structure.

    Arithmetic returns new vectors sharing the same segment table; mixing
    vectors with different tables raises :class:`ConfigError`.
    """

    values: np.ndarray
    segments: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ConfigError("parameter values must be one-dimensional")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "segments", tuple(self.segments))
        offset = 0
        for seg in self.segments:
            if seg.kind not in SEGMENT_KINDS:
                raise ConfigError(f"unknown segment kind {seg.kind!r}")
            if seg.offset != offset or seg.length < 0:
                raise ConfigError(f"segment table is not contiguous at offset {offset}")
            offset = seg.stop
        if offset != values.size:
            raise ConfigError(
                f"segment table covers {offset} values but vector has {values.size}"
            )

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> "ParamVector":
        return cls(np.zeros(spec.num_params), spec.segments)

    def __len__(self) -> int:
        return self.values.size

    @cached_property
    def bn_mask(self) -> np.ndarray:
        mask = np.zeros(self.values.size, dtype=bool)
        for seg in self.segments:
            if seg.kind in ("bn_gain", "bn_shift"):
                mask[seg.slice] = True
        return mask

    @property
    def reg_mask(self) -> np.ndarray:
        """Coordinates that take part in distances and the cosine regularizer."""
        return ~self.bn_mask

    @cached_property
    def layer_groups(self) -> dict[int, list[slice]]:
        groups: dict[int, list[slice]] = {}
        for seg in self.segments:
            groups.setdefault(seg.layer_index, []).append(seg.slice)
        return groups

    def segment(self, layer_index: int, kind: str) -> np.ndarray:
        for seg in self.segments:
            if seg.layer_index == layer_index and seg.kind == kind:
                return self.values[seg.slice]
        raise KeyError((layer_index, kind))

    def same_layout(self, other: "ParamVector") -> bool:
        return self.segments is other.segments or self.segments == other.segments

    def check_layout(self, other: "ParamVector") -> None:
        if not self.same_layout(other):
            raise ConfigError("parameter vectors have different segment tables")

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.segments)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.segments)

    def __add__(self, other):
        if isinstance(other, ParamVector):
            self.check_layout(other)
            return self.with_values(self.values + other.values)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, ParamVector):
            self.check_layout(other)
            return self.with_values(self.values - other.values)
        return NotImplemented

    def __mul__(self, scalar):
        if isinstance(scalar, ParamVector):
            return NotImplemented
        return self.with_values(self.values * float(scalar))

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self.with_values(self.values / float(scalar))

    def __neg__(self):
        return self.with_values(-self.values)

    def dot(self, other: "ParamVector") -> float:
        self.check_layout(other)
        return float(self.values @ other.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def linear_combination(coeffs: Sequence[float], vectors: Sequence[ParamVector]) -> ParamVector:
    if len(coeffs) != len(vectors) or not vectors:
        raise ConfigError("need one coefficient per vector")
    first = vectors[0]
    for v in vectors[1:]:
        first.check_layout(v)
    out = coeffs[0] * first.values
    for c, v in zip(coeffs[1:], vectors[1:]):
        out = out + c * v.values
    return first.with_values(out)


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParamVector:
    """Kaiming-normal dense weights, zero biases, unit gains, zero shifts."""
    values = np.empty(spec.num_params)
    for seg in spec.segments:
        if seg.kind == "dense_weight":
            fan_in = spec.layers[seg.layer_index].in_dim
            values[seg.slice] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=seg.length)
        elif seg.kind == "bn_gain":
            values[seg.slice] = 1.0
        else:
            values[seg.slice] = 0.0
    return ParamVector(values, spec.segments)


@dataclass
class BNLayerStats:
    running_mean: np.ndarray
    running_var: np.ndarray
    sample_count: int


@dataclass
class BNStats:
    layers: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.layers


def _check_params(spec: NetworkSpec, params: ParamVector) -> None:
    if len(params) != spec.num_params or not (
        params.segments is spec.segments or params.segments == spec.segments
    ):
        raise ConfigError(
            f"parameter vector of size {len(params)} does not match network with "
            f"{spec.num_params} parameters"
        )


def _dense_views(spec: NetworkSpec, params: ParamVector, i: int):
    layer = spec.layers[i]
    return (
        params.segment(i, "dense_weight").reshape(layer.in_dim, layer.out_dim),
        params.segment(i, "dense_bias"),
    )


class Trace:
    """Cached activations of one forward pass, consumed by :func:`backprop`."""

    def __init__(self, spec, params, mode):
        self.spec = spec
        self.params = params
        self.mode = mode
        self.inputs: list = []
        self.bn_cache: dict = {}
        self.logits = None
        self.features = None


def trace(
    spec: NetworkSpec,
    params: ParamVector,
    x: np.ndarray,
    mode: str = "train",
    stats: BNStats | None = None,
) -> Trace:
    _check_params(spec, params)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ConfigError(f"expected inputs of shape (batch, {spec.input_dim}), got {x.shape}")
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" and spec.has_batch_norm and (stats is None or stats.empty):
        raise StateError("eval-mode forward needs recomputed batch-norm statistics")

    tr = Trace(spec, params, mode)
    h = x
    for i, layer in enumerate(spec.layers):
        tr.inputs.append(h)
        if isinstance(layer, Dense):
            if i == spec.final_dense:
                tr.features = h
            w, b = _dense_views(spec, params, i)
            h = h @ w + b
        elif isinstance(layer, BatchNorm):
            gain = params.segment(i, "bn_gain")
            shift = params.segment(i, "bn_shift")
            if mode == "train":
                mean = h.mean(axis=0)
                var = ((h - mean) ** 2).mean(axis=0)
            else:
                if i not in stats.layers:
                    raise StateError(f"no batch-norm statistics for layer {i}")
                mean = stats.layers[i].running_mean
                var = stats.layers[i].running_var
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (h - mean) * inv_std
            tr.bn_cache[i] = (xhat, inv_std)
            h = gain * xhat + shift
        elif isinstance(layer, ReLU):
            h = np.maximum(h, 0.0)
        if not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite activations at layer {i}")
    tr.logits = h
    return tr


def forward(
    spec: NetworkSpec,
    params: ParamVector,
    stats: BNStats | None,
    x: np.ndarray,
    mode: str = "eval",
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(logits, features)`` where features feed the final dense layer."""
    tr = trace(spec, params, x, mode, stats)
    return tr.logits, tr.features


def backprop(tr: Trace, dlogits: np.ndarray, dfeatures: np.ndarray | None = None) -> ParamVector:
    spec, params = tr.spec, tr.params
    grad = np.zeros(spec.num_params)
    g = np.asarray(dlogits, dtype=np.float64)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        h_in = tr.inputs[i]
        if isinstance(layer, Dense):
            w, _ = _dense_views(spec, params, i)
            gw = h_in.T @ g
            gb = g.sum(axis=0)
            for seg in spec.segments:
                if seg.layer_index == i:
                    grad[seg.slice] = (gw.ravel() if seg.kind == "dense_weight" else gb)
            g = g @ w.T
            if i == spec.final_dense and dfeatures is not None:
                g = g + dfeatures
        elif isinstance(layer, BatchNorm):
            xhat, inv_std = tr.bn_cache[i]
            gain = params.segment(i, "bn_gain")
            for seg in spec.segments:
                if seg.layer_index == i:
                    grad[seg.slice] = (g * xhat).sum(axis=0) if seg.kind == "bn_gain" else g.sum(axis=0)
            gx = g * gain
            if tr.mode == "train":
                n = gx.shape[0]
                g = inv_std / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
            else:
                g = gx * inv_std
        elif isinstance(layer, ReLU):
            g = g * (h_in > 0)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at layer {i}")
    return ParamVector(grad, spec.segments)


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ConfigError(f"logits {logits.shape} and labels {labels.shape} do not match")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError("labels out of range")
    return labels.astype(np.int64)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(
    logits: np.ndarray,
    labels: np.ndarray,
    kind: str = "cross_entropy",
    smoothing: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Mean batch loss and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    n, k = logits.shape
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), labels] = 1.0
    if kind == "cross_entropy":
        if not 0.0 <= smoothing < 1.0:
            raise InputError(f"label smoothing must lie in [0, 1), got {smoothing}")
        target = onehot if smoothing == 0.0 else (1.0 - smoothing) * onehot + smoothing / k
        m = logits.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
        logp = logits - lse
        value = float(-(target * logp).sum() / n)
        return value, (np.exp(logp) - target) / n
    if kind == "mse":
        diff = logits - onehot
        return float((diff**2).sum() / n), 2.0 * diff / n
    raise InputError(f"unknown loss kind {kind!r}")


def loss(logits, labels, kind: str = "cross_entropy", smoothing: float = 0.0) -> float:
    return loss_and_grad(logits, labels, kind, smoothing)[0]


def backward(
    spec: NetworkSpec,
    params: ParamVector,
    x: np.ndarray,
    labels: np.ndarray,
    kind: str = "cross_entropy",
    smoothing: float = 0.0,
) -> tuple[float, ParamVector]:
    """Train-mode loss and its exact gradient with respect to ``params``."""
    tr = trace(spec, params, x, "train")
    value, dlogits = loss_and_grad(tr.logits, labels, kind, smoothing)
    return value, backprop(tr, dlogits)


def _inputs_of(dataset) -> np.ndarray:
    return np.asarray(getattr(dataset, "inputs", dataset), dtype=np.float64)


def recompute_bn_stats(
    spec: NetworkSpec,
    params: ParamVector,
    dataset,
    batch_size: int = 128,
) -> BNStats:
    """Population batch-norm statistics from one ordered pass over ``dataset``.

    Each batch runs in train mode (layers normalize with their batch
    statistics); the per-layer pre-normalization activations are pooled over
    the whole pass. The variance is the biased (population) estimate.
    """
    if not spec.has_batch_norm:
        return BNStats()
    x = _inputs_of(dataset)
    if x.shape[0] == 0:
        raise InputError("cannot recompute batch-norm statistics on an empty dataset")
    bn_layers = [i for i, l in enumerate(spec.layers) if isinstance(l, BatchNorm)]
    count = 0
    mean = {i: np.zeros(spec.layers[i].width) for i in bn_layers}
    m2 = {i: np.zeros(spec.layers[i].width) for i in bn_layers}
    for start in range(0, x.shape[0], batch_size):
        tr = trace(spec, params, x[start:start + batch_size], "train")
        nb = tr.inputs[bn_layers[0]].shape[0]
        total = count + nb
        for i in bn_layers:
            h = tr.inputs[i]
            bmean = h.mean(axis=0)
            bm2 = ((h - bmean) ** 2).sum(axis=0)
            delta = bmean - mean[i]
            mean[i] = mean[i] + delta * (nb / total)
            m2[i] = m2[i] + bm2 + delta**2 * (count * nb / total)
        count = total
    return BNStats({i: BNLayerStats(mean[i], m2[i] / count, count) for i in bn_layers})


def predict_proba(spec: NetworkSpec, params: ParamVector, stats: BNStats | None, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(spec, params, stats, x, "eval")
    return softmax(logits)


def iter_batches(n: int, batch_size: int, order: Iterable[int] | None = None):
    idx = np.arange(n) if order is None else np.asarray(order)
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]
