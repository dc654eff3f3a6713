"""Experiments built on top of the core library.

* instability analysis: forks of a shared training prefix, their linear path,
  weight average, output ensemble and random mixtures;
* the integral model, whose closed-form ensemble over a line is one forward
  pass at the far endpoint;
* a convex toy problem with an analytic expected loss, used as an oracle.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng as rngs
from .errors import ConfigError, InputError, NumericError
from .evaluation import alpha_sweep, evaluate_params, probs_accuracy, write_csv
from .nn import (
    NetworkSpec,
    ParamVector,
    Segment,
    backprop,
    forward,
    linear_combination,
    loss_and_grad,
    recompute_bn_stats,
    softmax,
    trace,
)
from .subspace import LINE, SampleCoord, Subspace, cosine_reg, eval_point, pair_sample, route_gradient, sample_coord, simplex
from .trainer import (
    OptimizerState,
    Streams,
    TrainConfig,
    init_state,
    lr_at,
    sgd_update,
    steps_per_epoch,
    train_epochs,
)

GRANULARITIES = ("global", "layerwise", "per_weight")


# -- random mixtures -------------------------------------------------------


def _mixture_draw(n_models: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` weight vectors, uniform on the simplex over ``n_models`` models."""
    if n_models == 2:
        a = rng.random(count)
        return np.stack([1.0 - a, a], axis=1)
    e = rng.exponential(size=(count, n_models))
    return e / e.sum(axis=1, keepdims=True)


def mix(params: Sequence[ParamVector], weights: Sequence[np.ndarray]) -> ParamVector:
    """Combine models with per-coordinate weights (``weights[i]`` scalar or length-n)."""
    if len(params) == 2:
        a, b = params
        a.check_layout(b)
        t = np.asarray(weights[1], dtype=np.float64)
        out = (1.0 - t) * a.values + t * b.values
        return a.with_values(np.clip(out, np.minimum(a.values, b.values), np.maximum(a.values, b.values)))
    return linear_combination(list(weights), list(params))


def random_mixture(params: Sequence[ParamVector], granularity: str, rng: np.random.Generator) -> ParamVector:
    """A random point of the convex hull of ``params``.

    ``global`` draws one set of weights, ``layerwise`` one per layer group and
    ``per_weight`` one per coordinate (for two models: a uniform point of the
    hyper-rectangle they span).
    """
    if len(params) < 2:
        raise InputError("random mixtures need at least two models")
    for p in params[1:]:
        params[0].check_layout(p)
    n_models = len(params)
    n = len(params[0])
    if granularity == "global":
        w = _mixture_draw(n_models, 1, rng)[0]
        return mix(params, [w[i] for i in range(n_models)])
    if granularity == "layerwise":
        arrays = [np.empty(n) for _ in range(n_models)]
        for _, slices in sorted(params[0].layer_groups.items()):
            w = _mixture_draw(n_models, 1, rng)[0]
            for i in range(n_models):
                for sl in slices:
                    arrays[i][sl] = w[i]
        return mix(params, arrays)
    if granularity == "per_weight":
        w = _mixture_draw(n_models, n, rng)
        return mix(params, [w[:, i] for i in range(n_models)])
    raise InputError(f"unknown granularity {granularity!r}")


# -- instability analysis --------------------------------------------------


@dataclass
class InstabilityResult:
    k: int
    epochs: int
    num_models: int
    alphas: list
    path_accuracy: list
    path_ensemble_accuracy: list
    endpoint_accuracy: list
    weight_average_accuracy: float
    output_ensemble_accuracy: float
    mixture_accuracy: dict = field(default_factory=dict)

    @property
    def barrier(self) -> float:
        """Mean endpoint accuracy minus the worst accuracy on the linear path."""
        ends = (self.path_accuracy[0] + self.path_accuracy[-1]) / 2.0
        return ends - min(self.path_accuracy)

    def rows(self) -> list:
        rows = [("path", a, acc) for a, acc in zip(self.alphas, self.path_accuracy)]
        rows += [("path_ensemble", a, acc) for a, acc in zip(self.alphas, self.path_ensemble_accuracy)]
        rows += [(f"endpoint_{i}", None, acc) for i, acc in enumerate(self.endpoint_accuracy)]
        rows.append(("weight_average", None, self.weight_average_accuracy))
        rows.append(("output_ensemble", None, self.output_ensemble_accuracy))
        for g, acc in self.mixture_accuracy.items():
            rows.append((f"mixture_{g}", None, acc))
        rows.append(("barrier", None, self.barrier))
        return rows

    def write_csv(self, path):
        return write_csv(path, ["row", "alpha", "accuracy"], self.rows())


def train_forks(
    spec: NetworkSpec,
    train_set,
    k: int,
    config: TrainConfig,
    fork_seeds: Sequence[int],
    different_init: bool = False,
) -> list:
    """Parameters of ``len(fork_seeds)`` standard-training runs sharing ``k`` epochs.

    In shared mode every fork continues the prefix (weights and momentum) with
    its own data-order seed. With ``different_init`` each fork instead starts
    from its own initialization (drawn from its seed) and ``k`` must be 0.
    """
    T = config.epochs
    if not 0 <= k <= T:
        raise InputError(f"need 0 <= k <= T, got k={k}, T={T}")
    if len(fork_seeds) < 2:
        raise InputError("need at least two forks")
    kind = simplex(1)
    forks = []
    if different_init:
        if k != 0:
            raise InputError("different initializations share no trajectory; use k=0")
        for s in fork_seeds:
            st = init_state(spec, kind, config, init_seed=s)
            train_epochs(spec, train_set, config, st, Streams.from_seed(s), T)
            forks.append(st.subspace.endpoints[0])
        return forks
    prefix = init_state(spec, kind, config)
    train_epochs(spec, train_set, config, prefix, Streams.from_seed(config.seed), k)
    for s in fork_seeds:
        st = prefix.copy()
        train_epochs(spec, train_set, config, st, Streams.from_seed(s), T - k)
        forks.append(st.subspace.endpoints[0])
    return forks


def instability_run(
    spec: NetworkSpec,
    train_set,
    test_set,
    k: int,
    config: TrainConfig,
    fork_seeds: Sequence[int],
    different_init: bool = False,
    alphas: Sequence[float] | None = None,
    n_mixtures: int = 4,
) -> InstabilityResult:
    forks = train_forks(spec, train_set, k, config, fork_seeds, different_init)
    alphas = np.linspace(0.0, 1.0, 21) if alphas is None else np.asarray(alphas)
    if not (np.isclose(alphas.min(), 0.0) and np.isclose(alphas.max(), 1.0)):
        raise InputError("the alpha grid must include 0 and 1")
    path = alpha_sweep(spec, Subspace(LINE, forks[:2]), train_set, test_set, alphas)

    evals = [evaluate_params(spec, f, train_set, test_set) for f in forks]
    n = len(forks)
    avg = linear_combination([1.0 / n] * n, forks)
    ensemble = sum(e.probs for e in evals) / n

    rng = rngs.stream(config.seed, "eval")
    mixtures = {}
    for g in GRANULARITIES:
        accs = [evaluate_params(spec, random_mixture(forks, g, rng), train_set, test_set).accuracy for _ in range(n_mixtures)]
        mixtures[g] = float(np.mean(accs))
    return InstabilityResult(
        k=k,
        epochs=config.epochs,
        num_models=n,
        alphas=[p.alpha for p in path],
        path_accuracy=[p.accuracy for p in path],
        path_ensemble_accuracy=[p.ensemble_accuracy for p in path],
        endpoint_accuracy=[e.accuracy for e in evals],
        weight_average_accuracy=evaluate_params(spec, avg, train_set, test_set).accuracy,
        output_ensemble_accuracy=probs_accuracy(ensemble, test_set.labels),
        mixture_accuracy=mixtures,
    )


# -- integral model ----------------------------------------------------------
#
# f(x, P(a)) = g(x, P(0)) + (g(x, P(a + eps)) - g(x, P(a))) / eps
#
# a + eps may exceed 1; the line is extended linearly there.


@dataclass
class IntegralModelState:
    subspace: Subspace
    epsilon: float = 0.1

    def __post_init__(self):
        if self.subspace.kind != LINE:
            raise ConfigError("the integral model lives on a line")
        if not 0.0 < self.epsilon < 1.0:
            raise InputError("epsilon must lie in (0, 1)")


def _integral_points(alpha: float, eps: float):
    return ((0.0, 1.0), (alpha + eps, 1.0 / eps), (alpha, -1.0 / eps))


def integral_loss_and_grad(
    spec: NetworkSpec,
    subspace: Subspace,
    x: np.ndarray,
    y: np.ndarray,
    alpha: float,
    eps: float,
    kind: str = "cross_entropy",
    smoothing: float = 0.0,
):
    """Train-mode loss of the composite output and its gradient for both endpoints."""
    traces = []
    out = 0.0
    for a, w in _integral_points(alpha, eps):
        tr = trace(spec, eval_point(subspace, a, extrapolate=True), x, "train")
        traces.append((a, w, tr))
        out = out + w * tr.logits
    value, dout = loss_and_grad(out, y, kind, smoothing)
    grads = [np.zeros(len(e)) for e in subspace.endpoints]
    for a, w, tr in traces:
        g_theta = backprop(tr, w * dout)
        for i, r in enumerate(route_gradient(subspace, a, g_theta, extrapolate=True)):
            grads[i] += r.values
    return value, grads


def integral_f(spec: NetworkSpec, subspace: Subspace, x: np.ndarray, alpha: float, eps: float, train_set=None) -> np.ndarray:
    """Eval-mode composite logits ``f(x, P(alpha))``."""
    out = 0.0
    for a, w in _integral_points(alpha, eps):
        theta = eval_point(subspace, a, extrapolate=True)
        stats = recompute_bn_stats(spec, theta, train_set) if spec.has_batch_norm else None
        out = out + w * forward(spec, theta, stats, x, "eval")[0]
    return out


def integral_train(spec: NetworkSpec, dataset, config: TrainConfig, eps: float = 0.1, on_epoch=None):
    """Fit the integral model; returns ``(state, per-epoch records)``.

    Only the task loss is optimized: ``beta``, ``lam`` and ``samples`` do not
    apply to this model.
    """
    state = init_state(spec, LINE, config)
    model = IntegralModelState(state.subspace, eps)
    streams = Streams.from_seed(config.seed)
    x, y = dataset.inputs, dataset.labels
    spe = steps_per_epoch(len(y), config.batch_size)
    records = []
    for epoch in range(config.epochs):
        order = streams.data.permutation(len(y))
        losses = []
        lr = 0.0
        for b in range(spe):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            alpha = float(streams.coords.random())
            value, grads = integral_loss_and_grad(spec, state.subspace, x[idx], y[idx], alpha, eps, config.loss, config.label_smoothing)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at step {state.optimizer.step}, alpha {alpha}")
            lr = lr_at(state.optimizer.step, config, spe)
            sgd_update(state.subspace, grads, config, state.optimizer, lr)
            losses.append(value)
        rec = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses))}
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    model.subspace = state.subspace
    return model, records


def integral_predict(spec: NetworkSpec, state: IntegralModelState, x: np.ndarray, train_set=None) -> np.ndarray:
    """Probabilities of ``g(x, P(1))``, the exact average of ``f`` over the whole line."""
    theta = eval_point(state.subspace, 1.0)
    stats = recompute_bn_stats(spec, theta, train_set) if spec.has_batch_norm else None
    return softmax(forward(spec, theta, stats, x, "eval")[0])


# -- convex oracle -----------------------------------------------------------


def convex_expected_line_loss(w1, w2, theta_star) -> float:
    """E over a ~ U[0,1] of ||(1-a) w1 + a w2 - theta*||^2, in closed form."""
    a = np.asarray(getattr(w1, "values", w1), dtype=np.float64) - np.asarray(getattr(theta_star, "values", theta_star))
    b = np.asarray(getattr(w2, "values", w2), dtype=np.float64) - np.asarray(getattr(theta_star, "values", theta_star))
    if a.shape != b.shape:
        raise ConfigError("dimension mismatch")
    return float((a @ a + b @ b + a @ b) / 3.0)


def flat_vector(values) -> ParamVector:
    values = np.asarray(values, dtype=np.float64)
    return ParamVector(values, (Segment(0, "dense_weight", 0, values.size),))


def train_convex_line(theta_star, config: TrainConfig, steps: int, init_scale: float = 1.0) -> Subspace:
    """Train a line on the loss ||theta - theta*||^2 with the regular subspace machinery."""
    theta_star = np.asarray(theta_star, dtype=np.float64)
    init = rngs.stream(config.seed, "init")
    sub = Subspace(LINE, [flat_vector(init_scale * init.standard_normal(theta_star.size)) for _ in range(2)])
    cfg = dataclasses.replace(config, epochs=steps)
    streams = Streams.from_seed(config.seed)
    opt = OptimizerState.fresh(2)
    for step in range(steps):
        coord = sample_coord(LINE, streams.coords)
        theta = eval_point(sub, coord)
        g = theta.with_values(2.0 * (theta.values - theta_star))
        grads = [r.values for r in route_gradient(sub, coord, g)]
        if config.beta > 0:
            j, k = pair_sample(2, streams.pairs)
            _, gj, gk = cosine_reg(sub.endpoints[j], sub.endpoints[k])
            grads[j] = grads[j] + config.beta * gj.values
            grads[k] = grads[k] + config.beta * gk.values
        sgd_update(sub, grads, cfg, opt, lr_at(step, cfg, 1))
    return sub
