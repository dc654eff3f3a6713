"""Accuracy, ensembles and calibration measured over a trained subspace.

Every evaluated weight vector gets its own batch-norm statistics recomputed on
the training set before it sees test data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError
from .nn import BNStats, NetworkSpec, ParamVector, forward, loss, recompute_bn_stats, softmax
from .subspace import Kind, Subspace, center, eval_point, geometry_stats, sample_coord, vertex

DEFAULT_ECE_BINS = 15
BN_BATCH = 128


@dataclass
class PointEval:
    probs: np.ndarray
    accuracy: float
    loss: float


def _nonempty(dataset) -> None:
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")


def accuracy(spec: NetworkSpec, params: ParamVector, stats: BNStats | None, dataset) -> float:
    """Top-1 accuracy; ``stats`` must already match ``params``."""
    _nonempty(dataset)
    logits, _ = forward(spec, params, stats, dataset.inputs, "eval")
    return float(np.mean(logits.argmax(axis=1) == dataset.labels))


def evaluate_params(spec: NetworkSpec, params: ParamVector, train_set, test_set, bn_batch: int = BN_BATCH) -> PointEval:
    _nonempty(test_set)
    stats = recompute_bn_stats(spec, params, train_set, bn_batch)
    logits, _ = forward(spec, params, stats, test_set.inputs, "eval")
    probs = softmax(logits)
    acc = float(np.mean(probs.argmax(axis=1) == test_set.labels))
    return PointEval(probs, acc, loss(logits, test_set.labels))


def probs_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(probs).argmax(axis=1) == labels))


def ensemble_accuracy(spec: NetworkSpec, params_a: ParamVector, params_b: ParamVector, train_set, test_set) -> float:
    """Accuracy of the averaged softmax outputs of two networks."""
    pa = evaluate_params(spec, params_a, train_set, test_set).probs
    pb = evaluate_params(spec, params_b, train_set, test_set).probs
    return probs_accuracy((pa + pb) / 2.0, test_set.labels)


def path_coord(kind: Kind, alpha: float):
    """Scalar sweep position mapped into the domain (simplexes sweep the edge 0 -> 1)."""
    if kind.scalar:
        return float(alpha)
    if kind.m < 2:
        raise InputError("a one-endpoint simplex has no edge to sweep")
    w = np.zeros(kind.m)
    w[0], w[1] = 1.0 - alpha, alpha
    return w


@dataclass
class SweepPoint:
    alpha: float
    accuracy: float
    loss: float
    ensemble_accuracy: float


def parse_grid(text: str) -> np.ndarray:
    """``start:stop:step`` (inclusive stop) or a comma-separated list."""
    text = text.strip()
    if ":" in text:
        try:
            start, stop, step = (float(t) for t in text.split(":"))
        except ValueError as exc:
            raise InputError(f"bad grid {text!r}, expected start:stop:step") from exc
        if step <= 0 or stop < start:
            raise InputError(f"bad grid {text!r}")
        count = int(round((stop - start) / step)) + 1
        return np.linspace(start, start + (count - 1) * step, count)
    try:
        return np.array(sorted(float(t) for t in text.split(",") if t.strip()))
    except ValueError as exc:
        raise InputError(f"bad grid {text!r}") from exc


def alpha_sweep(spec: NetworkSpec, subspace: Subspace, train_set, test_set, grid: Sequence[float]) -> list:
    """Single-model accuracy at each α and accuracy of the P(α)/P(1-α) output ensemble.

    When the grid is symmetric about 0.5 the mirror partner is taken from the
    grid itself, so the ensemble column is exactly symmetric.
    """
    grid = np.asarray(sorted(float(a) for a in grid))
    evals = [evaluate_params(spec, eval_point(subspace, path_coord(subspace.kind, a)), train_set, test_set) for a in grid]
    symmetric = np.allclose(grid + grid[::-1], 1.0, rtol=0, atol=1e-12)
    points = []
    for i, a in enumerate(grid):
        if symmetric:
            partner = evals[len(grid) - 1 - i].probs
        else:
            partner = evaluate_params(spec, eval_point(subspace, path_coord(subspace.kind, 1.0 - a)), train_set, test_set).probs
        ens = probs_accuracy((evals[i].probs + partner) / 2.0, test_set.labels)
        points.append(SweepPoint(float(a), evals[i].accuracy, evals[i].loss, ens))
    return points


def random_simplex_ensemble(spec: NetworkSpec, subspace: Subspace, train_set, test_set, n_members: int, rng):
    """Ensemble ``n_members`` randomly sampled models; returns ``(ensemble_acc, member_accs)``."""
    if subspace.kind.scalar:
        raise InputError("random_simplex_ensemble needs a simplex subspace")
    if n_members < 1:
        raise InputError("need at least one member")
    total = None
    accs = []
    for _ in range(n_members):
        coord = sample_coord(subspace.kind, rng)
        ev = evaluate_params(spec, eval_point(subspace, coord), train_set, test_set)
        accs.append(ev.accuracy)
        total = ev.probs if total is None else total + ev.probs
    return probs_accuracy(total / n_members, test_set.labels), accs


def ece(probs, labels, n_bins: int = DEFAULT_ECE_BINS) -> float:
    """Expected calibration error with equal-width bins ``(lo, hi]`` on the top probability."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],) or probs.shape[0] == 0:
        raise InputError("probabilities must be a non-empty (N, k) array with N labels")
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise InputError("probability rows must be non-negative and sum to 1")
    if n_bins < 1:
        raise InputError("n_bins must be positive")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    bins = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    n = conf.size
    total = 0.0
    for b in range(n_bins):
        sel = bins == b
        count = int(sel.sum())
        if count:
            total += count / n * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)


def tv_distance(p1, p2) -> float:
    """Half the L1 distance between probability rows, averaged over rows."""
    p1 = np.atleast_2d(np.asarray(p1, dtype=np.float64))
    p2 = np.atleast_2d(np.asarray(p2, dtype=np.float64))
    if p1.shape != p2.shape:
        raise InputError(f"shape mismatch: {p1.shape} vs {p2.shape}")
    return float(np.mean(0.5 * np.abs(p1 - p2).sum(axis=1)))


def relative_change(clean_acc: float, corrupted_acc: float) -> float:
    if clean_acc == 0:
        raise InputError("relative change is undefined for zero clean accuracy")
    return (corrupted_acc - clean_acc) / clean_acc


@dataclass
class PlaneGrid:
    xs: np.ndarray
    ys: np.ndarray
    loss: np.ndarray
    error: np.ndarray
    points: dict
    u: np.ndarray
    v: np.ndarray


def plane_basis(w1: ParamVector, w2: ParamVector, w3: ParamVector):
    """Orthonormal in-plane basis with ``w1`` at the origin and ``w2`` on the first axis."""
    w1.check_layout(w2)
    w1.check_layout(w3)
    d2 = w2.values - w1.values
    d3 = w3.values - w1.values
    n2 = np.linalg.norm(d2)
    if n2 == 0.0:
        raise InputError("degenerate plane: first two points coincide")
    u = d2 / n2
    r = d3 - (d3 @ u) * u
    nr = np.linalg.norm(r)
    if nr <= 1e-12 * max(1.0, np.linalg.norm(d3)):
        raise InputError("degenerate plane: the three points are collinear")
    v = r / nr
    coords = {"w1": (0.0, 0.0), "w2": (float(n2), 0.0), "w3": (float(d3 @ u), float(nr))}
    return u, v, coords


def plane_grid(
    w1: ParamVector,
    w2: ParamVector,
    w3: ParamVector,
    spec: NetworkSpec,
    train_set,
    test_set,
    resolution: int = 21,
    margin: float = 0.2,
) -> PlaneGrid:
    """Test loss and error over the plane through three weight vectors.

    The rectangle covers the projected triangle plus ``margin`` times its extent
    on each side; the three vectors themselves are also evaluated and reported
    in ``points`` with their in-plane coordinates.
    """
    if resolution < 2:
        raise InputError("resolution must be at least 2")
    u, v, coords = plane_basis(w1, w2, w3)
    px = [c[0] for c in coords.values()]
    py = [c[1] for c in coords.values()]
    wx, wy = max(px) - min(px), max(py) - min(py)
    xs = np.linspace(min(px) - margin * wx, max(px) + margin * wx, resolution)
    ys = np.linspace(min(py) - margin * wy, max(py) + margin * wy, resolution)

    def at(x, y):
        return evaluate_params(spec, w1.with_values(w1.values + x * u + y * v), train_set, test_set)

    losses = np.empty((resolution, resolution))
    errors = np.empty((resolution, resolution))
    for iy, y in enumerate(ys):
        for ix, x in enumerate(xs):
            ev = at(x, y)
            losses[iy, ix] = ev.loss
            errors[iy, ix] = 1.0 - ev.accuracy
    points = {}
    for name, (x, y) in coords.items():
        ev = at(x, y)
        points[name] = (x, y, ev.loss, 1.0 - ev.accuracy)
    return PlaneGrid(xs, ys, losses, errors, points, u, v)


@dataclass
class EvalReport:
    grid: list
    ensemble_grid: list
    midpoint_accuracy: float
    ece: float
    tv_endpoints: float | None
    geometry: dict
    notes: str = ""


def evaluate_subspace(
    spec: NetworkSpec,
    subspace: Subspace,
    train_set,
    test_set,
    grid: Sequence[float] | None = None,
    n_bins: int = DEFAULT_ECE_BINS,
) -> EvalReport:
    """Sweep, endpoint ensembles, midpoint accuracy and calibration in one report."""
    notes = []
    points = []
    if subspace.kind.scalar or subspace.m >= 2:
        grid = np.linspace(0.0, 1.0, 21) if grid is None else grid
        points = alpha_sweep(spec, subspace, train_set, test_set, grid)
    mid = evaluate_params(spec, eval_point(subspace, center(subspace.kind)), train_set, test_set)
    tv = None
    if subspace.m >= 2:
        p0 = evaluate_params(spec, eval_point(subspace, vertex(subspace.kind, 0)), train_set, test_set).probs
        p1 = evaluate_params(spec, eval_point(subspace, vertex(subspace.kind, 1)), train_set, test_set).probs
        tv = tv_distance(p0, p1)
    else:
        notes.append("single endpoint: no sweep, ensemble or TV")
    if subspace.kind.name == "simplex" and subspace.m > 2:
        notes.append("sweep follows the edge between endpoints 0 and 1")
    return EvalReport(
        grid=[(p.alpha, p.accuracy, p.loss) for p in points],
        ensemble_grid=[(p.alpha, p.ensemble_accuracy) for p in points],
        midpoint_accuracy=mid.accuracy,
        ece=ece(mid.probs, test_set.labels, n_bins),
        tv_endpoints=tv,
        geometry=geometry_stats(subspace).as_record() if subspace.m >= 2 else {},
        notes="; ".join(notes),
    )


def fmt(value) -> str:
    """Fixed-decimal text used in every emitted table."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return f"{float(value):.10f}"


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def write_sweep_csv(path, points: Sequence[SweepPoint]) -> Path:
    return write_csv(
        path,
        ["alpha", "accuracy", "loss", "ensemble_accuracy"],
        [(p.alpha, p.accuracy, p.loss, p.ensemble_accuracy) for p in points],
    )


def write_plane_csv(path, grid: PlaneGrid) -> tuple[Path, Path]:
    path = Path(path)
    rows = [
        (x, y, grid.loss[iy, ix], grid.error[iy, ix])
        for iy, y in enumerate(grid.ys)
        for ix, x in enumerate(grid.xs)
    ]
    main = write_csv(path, ["x", "y", "loss", "error"], rows)
    pts = write_csv(
        path.with_name(path.stem + "_points.csv"),
        ["point", "x", "y", "loss", "error"],
        [(name, *vals) for name, vals in grid.points.items()],
    )
    return main, pts
