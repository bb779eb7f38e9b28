"""Command-line entry point: ``nidapbc train | simulate | certify``.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric abort,
3 certification failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np
import yaml

from .control import ClosedLoop
from .plant import BENCHMARKS, make_plant
from .simulation import format_report, run_certification, simulate, write_trajectory_csv
from .training import (
    CheckpointError,
    TrainConfig,
    TrainingAborted,
    load_checkpoint,
    save_checkpoint,
    train,
    write_log_csv,
)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_FAIL = 0, 1, 2, 3

CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "training_log.csv"
REPORT_NAME = "certification.txt"
RESOLVED_NAME = "resolved_config.yaml"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    benchmark: str = "msd"
    seed: int = 0
    out: str = "runs/out"
    plant: dict = field(default_factory=dict)
    training: TrainConfig = field(default_factory=TrainConfig)
    T: float = 10.0
    h: float = 0.01
    x0: list = field(default_factory=list)
    random_x0: int = 10
    safety_scale: float = 10.0
    samples: int = 10000
    checkpoint: str | None = None
    # post-training overrides for simulate/certify
    rho: float | None = None
    kappa: float | None = None
    epsilon: float | None = None

    def validate(self):
        if self.benchmark not in BENCHMARKS:
            raise ConfigError(f"benchmark must be one of {sorted(BENCHMARKS)}, got {self.benchmark!r}")
        if self.T <= 0 or self.h <= 0:
            raise ConfigError("simulation T and h must be positive")
        if self.samples < 1 or self.random_x0 < 0:
            raise ConfigError("samples must be >= 1 and random_x0 >= 0")

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "benchmark": self.benchmark,
            "seed": self.seed,
            "out": self.out,
            "plant": self.plant,
            "training": self.training.to_dict(),
            "simulation": {
                "T": self.T,
                "h": self.h,
                "x0": [list(map(float, x)) for x in self.x0],
                "random_x0": self.random_x0,
                "safety_scale": self.safety_scale,
                "rho": self.rho,
                "kappa": self.kappa,
                "epsilon": self.epsilon,
            },
            "certify": {"samples": self.samples},
            "checkpoint": self.checkpoint,
        }


_TOP_KEYS = {"schema_version", "benchmark", "seed", "out", "plant", "training", "simulation", "certify", "checkpoint"}
_SIM_KEYS = {"T", "h", "x0", "random_x0", "safety_scale", "rho", "kappa", "epsilon"}


def load_config(path):
    """Parse a YAML run configuration; unknown keys are rejected."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: YAML parse error{where}: {exc.problem}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version {version} unsupported (expected {SCHEMA_VERSION})")
    cfg = RunConfig()
    for key in ("benchmark", "seed", "out", "checkpoint"):
        if key in raw:
            setattr(cfg, key, raw[key])
    cfg.plant = dict(raw.get("plant") or {})
    try:
        cfg.training = TrainConfig.from_dict(dict(raw.get("training") or {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: training: {exc}") from None
    sim = dict(raw.get("simulation") or {})
    bad = set(sim) - _SIM_KEYS
    if bad:
        raise ConfigError(f"{path}: unknown key(s) simulation.{sorted(bad)}")
    for key in _SIM_KEYS:
        if key in sim:
            setattr(cfg, key, sim[key])
    cert = dict(raw.get("certify") or {})
    if set(cert) - {"samples"}:
        raise ConfigError(f"{path}: unknown key(s) certify.{sorted(set(cert) - {'samples'})}")
    cfg.samples = int(cert.get("samples", cfg.samples))
    if "seed" in raw and "seed" not in (raw.get("training") or {}):
        cfg.training.seed = int(raw["seed"])
    return cfg


def _parse_x0(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--x0 expects comma-separated numbers, got {text!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="nidapbc", description="Learned IDA-PBC controllers: train, simulate, certify.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--benchmark", choices=sorted(BENCHMARKS))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--rho", type=float)
        sp.add_argument("--kappa", type=float)
        sp.add_argument("--epsilon", type=float)

    t = sub.add_parser("train", help="train surrogates and write a checkpoint plus the training log")
    common(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--quiet", action="store_true", help="no per-epoch progress lines")

    s = sub.add_parser("simulate", help="integrate the closed loop from a checkpoint")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--x0", type=_parse_x0, action="append", help="initial state, e.g. 0.5,0 (repeatable)")
    s.add_argument("--random-x0", type=int, dest="random_x0")
    s.add_argument("--T", type=float, dest="T")
    s.add_argument("--h", type=float, dest="h")

    c = sub.add_parser("certify", help="structural, linearized and dissipation checks on a checkpoint")
    common(c)
    c.add_argument("--checkpoint")
    c.add_argument("--samples", type=int)
    return p


def resolve(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.benchmark:
        cfg.benchmark = args.benchmark
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.training.seed = args.seed
    if args.out:
        cfg.out = args.out
    tr = cfg.training
    if args.command == "train":
        if args.epochs is not None:
            tr.epochs = args.epochs
        if args.rho is not None:
            tr.rho = args.rho
        if args.kappa is not None:
            tr.kappa = args.kappa
        if args.epsilon is not None:
            tr.epsilon = args.epsilon
        if not 0.0 < tr.kappa_value < tr.rho:
            raise ConfigError(f"kappa must lie in (0, rho); got kappa={tr.kappa_value}, rho={tr.rho}")
    else:
        if args.rho is not None:
            cfg.rho = args.rho
        if args.kappa is not None:
            cfg.kappa = args.kappa
        if args.epsilon is not None:
            cfg.epsilon = args.epsilon
        if getattr(args, "checkpoint", None):
            cfg.checkpoint = args.checkpoint
        for key in ("x0", "random_x0", "T", "h", "samples"):
            v = getattr(args, key, None)
            if v is not None:
                setattr(cfg, key, v)
    cfg.validate()
    return cfg


def _echo_config(cfg, extra=None):
    os.makedirs(cfg.out, exist_ok=True)
    d = cfg.to_dict()
    if extra:
        d.update(extra)
    with open(os.path.join(cfg.out, RESOLVED_NAME), "w") as fh:
        yaml.safe_dump(d, fh, sort_keys=True)


def _plant(cfg):
    overrides = dict(cfg.plant)
    if "box" in overrides:
        overrides["box"] = tuple(overrides["box"])
    return make_plant(cfg.benchmark, **overrides)


def cmd_train(cfg, quiet=False):
    _echo_config(cfg)
    plant = _plant(cfg)
    progress = None if quiet else (lambda line: print(line, flush=True))
    ckpt = os.path.join(cfg.out, CHECKPOINT_NAME)
    try:
        result = train(plant, cfg.training, progress=progress, checkpoint_path=ckpt)
    except TrainingAborted as exc:
        with open(os.path.join(cfg.out, "abort.json"), "w") as fh:
            json.dump({"epoch": exc.epoch, "sample": exc.sample, "residuals": exc.residuals, "message": str(exc)}, fh)
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(result.surrogates, ckpt, plant.name, seed=cfg.training.seed, epoch=cfg.training.epochs, config=cfg.training)
    write_log_csv(result.log, os.path.join(cfg.out, LOG_NAME))
    print(f"wrote {ckpt}")
    return EXIT_OK


def _load(cfg, benchmark_given):
    if not cfg.checkpoint:
        raise ConfigError("--checkpoint is required")
    if not os.path.exists(cfg.checkpoint):
        raise ConfigError(f"checkpoint not found: {cfg.checkpoint}")
    tri = load_checkpoint(cfg.checkpoint, cfg.benchmark if benchmark_given else None)
    cfg.benchmark = tri.meta["benchmark"]
    if cfg.rho is not None:
        tri.rho = cfg.rho
    if cfg.kappa is not None:
        tri.kappa = cfg.kappa
    if cfg.epsilon is not None:
        tri.eps = cfg.epsilon
    if not 0.0 < tri.kappa < tri.rho:
        raise ConfigError(f"kappa must lie in (0, rho); got kappa={tri.kappa}, rho={tri.rho}")
    return tri


def cmd_simulate(cfg, benchmark_given=False):
    tri = _load(cfg, benchmark_given)
    plant = _plant(cfg)
    _echo_config(cfg)
    x0 = [np.asarray(x, dtype=np.float64) for x in cfg.x0]
    for x in x0:
        if x.shape != (plant.n,):
            raise ConfigError(f"--x0 needs {plant.n} components, got {x.size}")
    if not x0:
        rng = np.random.default_rng(cfg.seed)
        x0 = list(rng.uniform(plant.lo, plant.hi, size=(cfg.random_x0, plant.n)))
    if not x0:
        raise ConfigError("no initial states: give --x0 or --random-x0 N with N >= 1")
    trajs = simulate(ClosedLoop(plant, tri), np.stack(x0), cfg.T, cfg.h, safety_scale=cfg.safety_scale)
    meta = dict(benchmark=plant.name, seed=cfg.seed, eps=tri.eps, rho=tri.rho, kappa=tri.kappa, h=cfg.h, T=cfg.T)
    for i, tr in enumerate(trajs):
        path = os.path.join(cfg.out, f"trajectory_{i:03d}.csv")
        write_trajectory_csv(tr, path, dict(meta, x0=",".join(repr(float(v)) for v in x0[i])), plant.n, plant.m)
        status = "left safety box" if tr.exited else f"t_E={tr.t_enter}"
        print(f"{path}: |x(T) - x*| = {np.linalg.norm(tr.x[-1] - plant.x_star):.3e}  {status}")
    return EXIT_OK


def cmd_certify(cfg, benchmark_given=False):
    tri = _load(cfg, benchmark_given)
    plant = _plant(cfg)
    _echo_config(cfg)
    structural, stability, dissipation = run_certification(ClosedLoop(plant, tri), cfg.samples, cfg.seed)
    text, ok = format_report(plant.name, structural, stability, dissipation, cfg.seed)
    with open(os.path.join(cfg.out, REPORT_NAME), "w") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_OK if ok else EXIT_FAIL


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = resolve(args)
        if args.command == "train":
            return cmd_train(cfg, quiet=args.quiet)
        given = args.benchmark is not None
        if args.command == "simulate":
            return cmd_simulate(cfg, given)
        return cmd_certify(cfg, given)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
