"""Command-line front end: simulate datasets, fit models, evaluate heldout.

Configuration comes from an optional key=value file (--config) overridden by
flags; the resolved configuration is echoed to config.echo in the output
directory, in the same format --config accepts.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import dataclass, fields

import numpy as np

from .datasets import (
    HoldoutPlan,
    evaluate_methods,
    fit_baseline,
    gen_evolving_network,
    gen_gaussian_clusters,
    gen_multitask_t3,
    gen_se_surrogate_network,
    load_dataset,
    write_dataset,
    _model_for,
)
from .kernels import SimilarityKernel, SquaredExponentialKernel, TreeKernel
from .likelihoods import MultitaskData
from .mcmc import SamplerOptions, run
from .partitions import TruncationConfig


class UsageError(ValueError):
    """Bad flags, config, or referenced paths; exits with status 2."""


GENERATORS = {
    "gaussian-clusters": gen_gaussian_clusters,
    "mcm-t3": gen_multitask_t3,
    "ecs-synthetic": gen_evolving_network,
    "se-surrogate": gen_se_surrogate_network,
}

MODELS = ("mcm", "ecs", "baseline-independent", "baseline-shared")
KERNELS = ("se", "similarity", "tree")
SCHEDULES = {
    "per-object": "per_object",
    "global": "global",
    "alternating": "alternating",
    "per-object-location": "per_object_location",
}


@dataclass
class RunConfig:
    command: str
    model: str = None
    kernel: str = "se"
    K: int = 20
    iterations: int = 1000
    burnin: int = 500
    thin: int = 1
    seed: int = 0
    data: str = None
    generator: str = None
    holdout_fraction: float = 0.1
    repeats: int = 10
    out: str = None
    schedule: str = "per-object"
    lengthscale: float = 1.0
    newick: str = None
    alpha: float = 1.0
    discount: float = 0.0
    init_sweeps: int = 100
    kernel_delay: int = 0
    kernel_interweave: int = 0
    kernel_collapse: str = "columns"
    label_swaps: int = 0


_INT_KEYS = {
    "K",
    "iterations",
    "burnin",
    "thin",
    "seed",
    "repeats",
    "init_sweeps",
    "kernel_delay",
    "kernel_interweave",
    "label_swaps",
}
_FLOAT_KEYS = {"holdout_fraction", "lengthscale", "alpha", "discount"}


def _read_config_file(path):
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}, line {ln}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(key, value):
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError:
        raise UsageError(f"config key {key} needs a number, got {value!r}") from None
    return value


def resolve_config(args) -> RunConfig:
    cfg = RunConfig(command=args.command)
    known = {f.name for f in fields(RunConfig)} - {"command"}
    if args.config:
        for key, value in _read_config_file(args.config).items():
            if key not in known:
                raise UsageError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, value))
    for key in known:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if cfg.out is None:
        cfg.out = f"dpvp-{cfg.command}"
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.command == "simulate":
        if not cfg.generator:
            raise UsageError("simulate needs --generator")
        if cfg.generator not in GENERATORS:
            raise UsageError(
                f"unknown generator {cfg.generator!r}; choose from {sorted(GENERATORS)}"
            )
        return
    if (cfg.data is None) == (cfg.generator is None):
        raise UsageError("give exactly one of --data or --generator")
    if cfg.generator is not None and cfg.generator not in GENERATORS:
        raise UsageError(
            f"unknown generator {cfg.generator!r}; choose from {sorted(GENERATORS)}"
        )
    if cfg.data is not None and not os.path.exists(cfg.data):
        raise UsageError(f"data manifest not found: {cfg.data}")
    if cfg.kernel not in KERNELS:
        raise UsageError(f"unknown kernel {cfg.kernel!r}; choose from {KERNELS}")
    if cfg.kernel == "tree" and not cfg.newick:
        raise UsageError("tree kernel needs newick=<tree> in the config")
    if cfg.schedule not in SCHEDULES:
        raise UsageError(f"unknown schedule {cfg.schedule!r}")
    if not 0 <= cfg.burnin < cfg.iterations:
        raise UsageError("need 0 <= burnin < iterations")
    if cfg.thin < 1:
        raise UsageError("thin must be >= 1")
    if cfg.K < 2:
        raise UsageError("K must be >= 2")
    if cfg.command == "fit":
        if cfg.model not in MODELS:
            raise UsageError(f"--model must be one of {MODELS}")
    elif cfg.command == "evaluate":
        if not cfg.model:
            raise UsageError("evaluate needs --model with comma-separated methods")
        for m in cfg.model.split(","):
            if m not in ("independent", "shared", "mcm", "ecs"):
                raise UsageError(f"unknown method {m!r}")
        if cfg.repeats < 1:
            raise UsageError("need at least 1 repeat")
        if not 0.0 < cfg.holdout_fraction < 1.0:
            raise UsageError("holdout fraction must lie in (0, 1)")


def _echo_config(cfg: RunConfig, outdir):
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        if f.name == "command":
            continue
        value = getattr(cfg, f.name)
        if value is not None:
            lines.append(f"{f.name}={value}")
    with open(os.path.join(outdir, "config.echo"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_bundle(cfg: RunConfig):
    if cfg.generator:
        return GENERATORS[cfg.generator](np.random.default_rng(cfg.seed))
    return load_dataset(cfg.data)


def _build_kernel(cfg: RunConfig, covariates):
    T = len(covariates)
    if cfg.kernel == "se":
        return SquaredExponentialKernel(locations=tuple(covariates), lengthscale=cfg.lengthscale)
    if cfg.kernel == "similarity":
        return SimilarityKernel.identity(T)
    kernel = TreeKernel.from_newick(cfg.newick)
    if kernel.gram().T != T:
        raise UsageError(
            f"tree kernel has {kernel.gram().T} leaves but the data has {T} parts"
        )
    return kernel


def _sampler_options(cfg: RunConfig) -> SamplerOptions:
    return SamplerOptions(
        iterations=cfg.iterations,
        burnin=cfg.burnin,
        thin=cfg.thin,
        seed=cfg.seed,
        f_mode=SCHEDULES[cfg.schedule],
        init_sweeps=cfg.init_sweeps,
        kernel_delay=cfg.kernel_delay,
        kernel_interweave=bool(cfg.kernel_interweave),
        kernel_collapse=cfg.kernel_collapse,
        label_swaps=bool(cfg.label_swaps),
    )


def cmd_simulate(cfg: RunConfig) -> int:
    bundle = GENERATORS[cfg.generator](np.random.default_rng(cfg.seed))
    manifest = write_dataset(cfg.out, bundle)
    _echo_config(cfg, cfg.out)
    print(f"wrote {manifest}")
    return 0


def cmd_fit(cfg: RunConfig) -> int:
    bundle = _load_bundle(cfg)
    is_multitask = isinstance(bundle.data, MultitaskData)
    if cfg.model == "mcm" and not is_multitask:
        raise UsageError("mcm needs a multitask dataset")
    if cfg.model == "ecs" and is_multitask:
        raise UsageError("ecs needs a network dataset")
    config = TruncationConfig(K=cfg.K, alpha=cfg.alpha, discount=cfg.discount)
    options = _sampler_options(cfg)
    started = time.perf_counter()
    if cfg.model.startswith("baseline-"):
        trace = fit_baseline(cfg.model.split("-", 1)[1], bundle.data, config, options)
    else:
        kernel = _build_kernel(cfg, bundle.covariates)
        trace = run(_model_for(bundle.data, cfg.K), kernel, config, options)
    elapsed = time.perf_counter() - started
    os.makedirs(cfg.out, exist_ok=True)
    trace.write_jsonl(os.path.join(cfg.out, "trace.jsonl"))
    trace.write_assignments_csv(os.path.join(cfg.out, "assignments.csv"))
    trace.write_kernel_posterior_csv(os.path.join(cfg.out, "kernel_posterior.csv"))
    if cfg.kernel == "similarity" and not cfg.model.startswith("baseline-"):
        _write_sigma_mean(trace, os.path.join(cfg.out, "kernel_sigma_mean.csv"))
    with open(os.path.join(cfg.out, "runtime.txt"), "w") as fh:
        fh.write(
            f"iterations={cfg.iterations}\nretained={len(trace)}\n"
            f"seconds={elapsed:.3f}\nseconds_per_iteration={elapsed / cfg.iterations:.6f}\n"
        )
    _echo_config(cfg, cfg.out)
    final = trace.records[-1]
    print(
        f"retained {len(trace)} samples; final loglik {final.loglik:.3f}; "
        f"clusters per location {final.cluster_counts}; {elapsed:.1f}s"
    )
    return 0


def _write_sigma_mean(trace, path):
    names = trace.kernel_param_names()
    summary = {name: mean for name, mean, _, _ in trace.kernel_summary()}
    T = int(round(0.5 * (1 + np.sqrt(1 + 8 * len(names)))))
    sigma = np.eye(T)
    for name in names:
        i, j = (int(x) for x in name[name.index("[") + 1 : name.index("]")].split(","))
        sigma[i, j] = sigma[j, i] = summary[name]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["location"] + [f"location_{t}" for t in range(T)])
        for t in range(T):
            writer.writerow([f"location_{t}"] + [f"{v:.10g}" for v in sigma[t]])


def cmd_evaluate(cfg: RunConfig) -> int:
    bundle = _load_bundle(cfg)
    methods = cfg.model.split(",")
    is_multitask = isinstance(bundle.data, MultitaskData)
    for m in methods:
        if m == "mcm" and not is_multitask:
            raise UsageError("mcm needs a multitask dataset")
        if m == "ecs" and is_multitask:
            raise UsageError("ecs needs a network dataset")
    config = TruncationConfig(K=cfg.K, alpha=cfg.alpha, discount=cfg.discount)
    options = _sampler_options(cfg)
    if is_multitask:
        plan = HoldoutPlan.for_multitask(
            bundle.data, cfg.holdout_fraction, cfg.repeats, cfg.seed
        )
    else:
        plan = HoldoutPlan.for_network(
            bundle.data, cfg.holdout_fraction, cfg.repeats, cfg.seed
        )
    kernel = None
    if any(m in ("mcm", "ecs") for m in methods):
        kernel = _build_kernel(cfg, bundle.covariates)
    results = evaluate_methods(bundle.data, methods, config, options, plan, kernel)
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "eval_table.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "mean", "stderr", "repeats"])
        for res in results:
            writer.writerow([res.method, f"{res.mean:.6f}", f"{res.stderr:.6f}", len(res.scores)])
    _echo_config(cfg, cfg.out)
    for res in results:
        print(f"{res.method}: {res.mean:.4f} +/- {res.stderr:.4f} ({len(res.scores)} repeats)")
    return 0


_COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "evaluate": cmd_evaluate}


def _add_common(sub):
    sub.add_argument("--config", default=None, help="key=value config file")
    sub.add_argument("--model", default=None)
    sub.add_argument("--kernel", default=None, choices=KERNELS)
    sub.add_argument("--K", type=int, default=None, dest="K", help="truncation level")
    sub.add_argument("--iterations", type=int, default=None)
    sub.add_argument("--burnin", type=int, default=None)
    sub.add_argument("--thin", type=int, default=None)
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--data", default=None, help="dataset manifest path")
    sub.add_argument("--generator", default=None)
    sub.add_argument(
        "--holdout-fraction", type=float, default=None, dest="holdout_fraction"
    )
    sub.add_argument("--repeats", type=int, default=None)
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument("--schedule", default=None, choices=sorted(SCHEDULES))
    sub.add_argument("--lengthscale", type=float, default=None)
    sub.add_argument("--newick", default=None, help="tree kernel topology")
    sub.add_argument(
        "--kernel-delay", type=int, default=None, dest="kernel_delay",
        help="sweeps before kernel updates start",
    )
    sub.add_argument(
        "--kernel-interweave", type=int, default=None, dest="kernel_interweave",
        choices=(0, 1), help="add a whitened kernel pass after the standard one",
    )
    sub.add_argument(
        "--kernel-collapse", default=None, dest="kernel_collapse",
        choices=("columns", "reached"),
        help="how much of F the kernel update marginalizes out",
    )
    sub.add_argument(
        "--label-swaps", type=int, default=None, dest="label_swaps",
        choices=(0, 1), help="add label-swap Metropolis passes over locations",
    )


def _parser():
    parser = argparse.ArgumentParser(
        prog="dpvp",
        description="Covariate-dependent random partitions: simulate, fit, evaluate.",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    _add_common(commands.add_parser("simulate", help="write a synthetic dataset"))
    _add_common(commands.add_parser("fit", help="run the sampler on one dataset"))
    _add_common(
        commands.add_parser("evaluate", help="heldout predictive comparison of methods")
    )
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[cfg.command](cfg)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # data or sampler failure
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
