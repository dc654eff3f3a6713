"""Command-line entry point: ``subspaces <command> [options]``.

Every command writes its outputs plus a ``manifest.json`` into one output
directory (``--out-dir``, or a fresh directory under ``$SUBSPACES_OUT_ROOT``,
default ``./runs``). Reports are deterministic given the config and seed;
wall-clock data lives only in ``timings.jsonl`` and the manifest.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import rng as rngs
from .checkpoint import load_subspace, save_subspace
from .errors import SubspaceError
from .evaluation import (
    alpha_sweep,
    evaluate_params,
    evaluate_subspace,
    parse_grid,
    plane_grid,
    random_simplex_ensemble,
    relative_change,
    write_csv,
    write_plane_csv,
    write_sweep_csv,
)
from .experiments import instability_run, integral_predict, integral_train
from .subspace import center, eval_point, geometry_stats, init_subspace
from .trainer import train_run

OUT_ROOT_ENV = "SUBSPACES_OUT_ROOT"

log = logging.getLogger("subspaces")


class Run:
    """Output directory plus the manifest describing it."""

    def __init__(self, command: str, args, cfg: dict):
        self.command = command
        self.cfg = cfg
        seed = cfg["train"]["seed"]
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        self.run_id = f"{stamp}-{command}-s{seed}"
        root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
        self.dir = Path(args.out_dir) if args.out_dir else root / self.run_id
        if (self.dir / "manifest.json").exists() and not args.overwrite:
            raise SubspaceError(f"{self.dir} already holds a run; pass --overwrite to replace it")
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "run_id": self.run_id,
            "command": command,
            "artifact_version": __version__,
            "config": cfg,
            "overrides": list(args.set or []),
            "datasets": {},
            "checkpoints": [],
            "files": [],
        }

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.manifest["files"].append(name)
        return p

    def finish(self) -> Path:
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(self.manifest, indent=2, default=str) + "\n")
        return path


def _config(args, base=None) -> dict:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return cfgmod.load_config(args.config, overrides, base=base)


def _data(run: Run):
    train, test = cfgmod.datasets(run.cfg)
    run.manifest["datasets"] = {"train": train.fingerprint(), "test": test.fingerprint()}
    return train, test


def _checkpoint_config(args):
    """Config for commands reading a checkpoint: ``--config`` wins, else the stored snapshot."""
    spec, sub, extra = load_subspace(args.checkpoint)
    base = None if args.config else extra.get("config")
    return spec, sub, _config(args, base=base)


def cmd_train(args) -> int:
    cfg = _config(args)
    run = Run("train", args, cfg)
    train, test = _data(run)
    spec = cfgmod.network_spec(cfg, train)
    tc = cfgmod.train_config(cfg)
    sub, _ = train_run(
        spec, train, cfgmod.subspace_kind(cfg), tc, run.dir, cfg["output"]["checkpoint_every"], {"config": cfg}
    )
    run.manifest["files"] += ["metrics.jsonl", "timings.jsonl"]
    run.manifest["checkpoints"] = sorted(str(p.relative_to(run.dir)) for p in (run.dir / "checkpoints").iterdir())
    run.finish()
    print(json.dumps(geometry_stats(sub).as_record() if sub.m >= 2 else {}, sort_keys=True))
    print(f"wrote {run.dir}")
    return 0


def cmd_sweep(args) -> int:
    spec, sub, cfg = _checkpoint_config(args)
    run = Run("sweep", args, cfg)
    train, test = _data(run)
    grid = parse_grid(args.grid or cfg["eval"]["grid"])
    points = alpha_sweep(spec, sub, train, test, grid)
    write_sweep_csv(run.path("sweep.csv"), points)
    run.manifest["checkpoints"] = [str(args.checkpoint)]
    run.finish()
    print(f"wrote {run.dir / 'sweep.csv'}")
    return 0


def cmd_eval(args) -> int:
    spec, sub, cfg = _checkpoint_config(args)
    run = Run("eval", args, cfg)
    train, test = _data(run)
    grid = parse_grid(args.grid or cfg["eval"]["grid"])
    report = evaluate_subspace(spec, sub, train, test, grid, cfg["eval"]["ece_bins"])
    write_csv(
        run.path("eval.csv"),
        ["alpha", "accuracy", "loss", "ensemble_accuracy"],
        [(a, acc, l, e) for (a, acc, l), (_, e) in zip(report.grid, report.ensemble_grid)],
    )
    summary = [("midpoint_accuracy", report.midpoint_accuracy), ("ece", report.ece), ("tv_endpoints", report.tv_endpoints)]
    summary += sorted(report.geometry.items())
    corrupted = cfgmod.corrupted_test(cfg, test)
    if corrupted is not None:
        acc_c = evaluate_params(spec, eval_point(sub, center(sub.kind)), train, corrupted).accuracy
        summary += [("midpoint_corrupted_accuracy", acc_c), ("midpoint_relative_change", relative_change(report.midpoint_accuracy, acc_c))]
    if not sub.kind.scalar:
        ens, members = random_simplex_ensemble(
            spec, sub, train, test, cfg["eval"]["ensemble_members"], rngs.stream(cfg["train"]["seed"], "eval")
        )
        summary += [("random_ensemble_accuracy", ens), ("random_member_mean_accuracy", float(np.mean(members)))]
    write_csv(run.path("eval_summary.csv"), ["metric", "value"], summary)
    run.manifest["checkpoints"] = [str(args.checkpoint)]
    if report.notes:
        run.manifest["notes"] = report.notes
    run.finish()
    print(f"wrote {run.dir / 'eval.csv'}")
    return 0


def cmd_plane(args) -> int:
    spec, sub, cfg = _checkpoint_config(args)
    if sub.m < 3:
        raise SubspaceError(f"plane needs three parameter sets; checkpoint holds a {sub.kind}")
    run = Run("plane", args, cfg)
    train, test = _data(run)
    w1, w2, w3 = sub.endpoints[:3]
    grid = plane_grid(w1, w2, w3, spec, train, test, cfg["plane"]["resolution"], cfg["plane"]["margin"])
    write_plane_csv(run.path("plane.csv"), grid)
    run.manifest["files"].append("plane_points.csv")
    run.manifest["checkpoints"] = [str(args.checkpoint)]
    run.finish()
    print(f"wrote {run.dir / 'plane.csv'}")
    return 0


def cmd_geometry(args) -> int:
    if args.checkpoint:
        spec, sub, cfg = _checkpoint_config(args)
        run = Run("geometry", args, cfg)
        run.manifest["checkpoints"] = [str(args.checkpoint)]
    else:
        cfg = _config(args)
        run = Run("geometry", args, cfg)
        train, _ = _data(run)
        spec = cfgmod.network_spec(cfg, train)
        tc = cfgmod.train_config(cfg)
        sub = init_subspace(spec, cfgmod.subspace_kind(cfg), rngs.stream(tc.seed, "init"), tc.point_init)
    if sub.m < 2:
        raise SubspaceError("geometry needs at least two endpoints")
    rec = geometry_stats(sub).as_record()
    write_csv(run.path("geometry.csv"), ["metric", "value"], sorted(rec.items()))
    run.manifest["num_params"] = spec.num_params
    run.finish()
    print(json.dumps(rec, sort_keys=True))
    return 0


def cmd_integral(args) -> int:
    cfg = _config(args)
    eps = args.epsilon if args.epsilon is not None else cfg["integral"]["epsilon"]
    cfg["integral"]["epsilon"] = eps
    run = Run("integral", args, cfg)
    train, test = _data(run)
    spec = cfgmod.network_spec(cfg, train)
    tc = cfgmod.train_config(cfg)
    with open(run.path("metrics.jsonl"), "w") as fh:
        state, _ = integral_train(spec, train, tc, eps, on_epoch=lambda r: fh.write(json.dumps(r) + "\n"))
    probs = integral_predict(spec, state, test.inputs, train)
    acc = float(np.mean(probs.argmax(axis=1) == test.labels))
    ends = [evaluate_params(spec, e, train, test).accuracy for e in state.subspace.endpoints]
    rows = [("epsilon", eps), ("integral_accuracy", acc), ("g_at_0_accuracy", ends[0]), ("g_at_1_accuracy", ends[1])]
    write_csv(run.path("integral.csv"), ["metric", "value"], rows)
    ckpt = run.dir / "checkpoints" / "final"
    save_subspace(ckpt, spec, state.subspace, extra={"config": cfg, "integral_epsilon": eps})
    run.manifest["checkpoints"] = ["checkpoints/final"]
    run.finish()
    print(f"integral accuracy {acc:.4f} (epsilon {eps})")
    return 0


def cmd_instability(args) -> int:
    cfg = _config(args)
    ins = cfg["instability"]
    if args.k is not None:
        ins["k"] = args.k
    if args.forks is not None:
        ins["forks"] = args.forks
    if args.different_init:
        ins["different_init"] = True
    run = Run("instability", args, cfg)
    train, test = _data(run)
    spec = cfgmod.network_spec(cfg, train)
    tc = cfgmod.train_config(cfg)
    seeds = ins["fork_seeds"] or [tc.seed + 1 + i for i in range(ins["forks"])]
    result = instability_run(
        spec, train, test, ins["k"], tc, seeds, ins["different_init"],
        np.linspace(0.0, 1.0, ins["alphas"]), ins["n_mixtures"],
    )
    result.write_csv(run.path("instability.csv"))
    run.manifest["fork_seeds"] = list(seeds)
    run.finish()
    print(f"barrier {result.barrier:.4f}, weight average {result.weight_average_accuracy:.4f}, "
          f"ensemble {result.output_ensemble_accuracy:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="root seed (overrides train.seed)")
    common.add_argument("--out-dir", help=f"output directory (default: ${OUT_ROOT_ENV}/<run id>)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    common.add_argument("--overwrite", action="store_true", help="replace an existing run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="subspaces", description="Train and evaluate neural network subspaces.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train a subspace").set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("sweep", cmd_sweep, "accuracy and endpoint ensembles along a learned line/curve"),
        ("eval", cmd_eval, "full evaluation report of a checkpoint"),
        ("plane", cmd_plane, "loss/error over the plane through three parameter sets"),
    ):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--checkpoint", required=True, help="checkpoint directory")
        if name in ("sweep", "eval"):
            sp.add_argument("--grid", help="alpha grid, start:stop:step or comma list")
        sp.set_defaults(func=func)

    sp = sub.add_parser("geometry", parents=[common], help="pairwise endpoint distances and squared cosines")
    sp.add_argument("--checkpoint", help="checkpoint directory (default: fresh initialization)")
    sp.set_defaults(func=cmd_geometry)

    sp = sub.add_parser("integral", parents=[common], help="train and evaluate the integral model")
    sp.add_argument("--epsilon", type=float, help="finite-difference step (default 0.1)")
    sp.set_defaults(func=cmd_integral)

    sp = sub.add_parser("instability", parents=[common], help="fork training after k shared epochs")
    sp.add_argument("--k", type=int, help="shared epochs")
    sp.add_argument("--forks", type=int, help="number of forks")
    sp.add_argument("--different-init", action="store_true", help="independent initializations, no shared prefix")
    sp.set_defaults(func=cmd_instability)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SubspaceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
