"""``gp2bnn`` command-line interface.

Each subcommand takes an optional ``--config file.json``; explicit flags override
keys from the file. The merged configuration is validated before any compute.

Exit codes: 0 success, 1 invalid configuration or input, 2 no acceptable prior
fit after all restarts, 3 HMC diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from . import posterior as post
from .bnn import sample_functions
from .gp import FAMILIES, InputSet, KernelSpec, sample_gp
from .metrics import METRIC_FIELDS
from .trainer import (
    AllRestartsFailed,
    Checkpoint,
    TrainingConfig,
    evaluate_prior,
    fit_conditional_prior,
    fit_prior,
)

SCHEMA_VERSION = 1
SCHEMA_LINE = f"# gp2bnn-schema: {SCHEMA_VERSION}"

EXIT_OK, EXIT_INVALID, EXIT_RESTARTS, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("gp2bnn")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ configs


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid")
    schema_version: int = SCHEMA_VERSION

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {v}, expected {SCHEMA_VERSION}")
        return v


class _KernelFields(_Config):
    kernel: Optional[Literal[FAMILIES]] = None
    lengthscale: float = 1.0
    amplitude: float = 1.0
    period: Optional[float] = None
    input_dim: int = 1

    def kernel_spec(self) -> Optional[KernelSpec]:
        if self.kernel is None:
            return None
        return KernelSpec(self.kernel, self.lengthscale, self.amplitude, self.period, self.input_dim)


class _Ranged(_KernelFields):
    @field_validator("range", check_fields=False)
    @classmethod
    def _range(cls, r):
        if r is not None and not r[0] < r[1]:
            raise ValueError("range needs lo < hi")
        return r


class FitPriorConfig(_Ranged):
    kernel: Literal[FAMILIES]
    out: str
    width: int = 128
    activation: str = "nn:5:silu"
    iters: int = 2000
    lr: float = 0.01
    sets: int = 1
    points: int = 256
    functions: int = 1024
    mc_samples: int = 1024
    reg_weight: float = 0.0
    range: Optional[tuple[float, float]] = None
    max_restarts: int = 3
    outlier_factor: float = 3.0
    seed: int = 0
    target: Literal["samples", "analytic"] = "samples"
    conditional: bool = False
    gamma_range: tuple[float, float] = (0.25, 4.0)
    trace_csv: Optional[str] = None
    plot: Optional[str] = None


class EvalPriorConfig(_Ranged):
    checkpoint: str
    range: Optional[tuple[float, float]] = None
    n_inputs: int = 100
    n: int = 1000
    seed: int = 0
    shift: float = 0.0
    gamma: Optional[float] = None
    out_csv: Optional[str] = None
    out_json: Optional[str] = None
    plot: Optional[str] = None


class FitPosteriorConfig(_Config):
    checkpoint: str
    data: str
    out_dir: str
    test_data: Optional[str] = None
    likelihood: Literal["gaussian", "bernoulli"] = "gaussian"
    noise_variance: float = 0.1
    width: Optional[int] = None
    gamma: Optional[float] = None
    chains: int = 4
    warmup: int = 500
    samples: int = 1000
    leapfrog: int = 32
    step_size: float = 0.01
    target_accept: float = 0.8
    seed: int = 0
    grid_points: int = 200
    max_draws: int = 1000
    plot: Optional[str] = None


class SampleConfig(_Ranged):
    out: str
    checkpoint: Optional[str] = None
    range: tuple[float, float] = (-3.0, 3.0)
    n_inputs: int = 200
    n: int = 10
    gamma: Optional[float] = None
    seed: int = 0
    plot: Optional[str] = None

    @field_validator("n", "n_inputs")
    @classmethod
    def _positive(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @model_validator(mode="after")
    def _source(self):
        if self.checkpoint is None and self.kernel is None:
            raise ValueError("give a checkpoint, a kernel, or both")
        return self


class MakeDataConfig(_Config):
    kind: Literal["regression", "two-moons"]
    out: str
    test_out: Optional[str] = None
    seed: int = 0
    n: int = 100
    noise: float = 0.1


# ---------------------------------------------------------------- helpers


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _write_csv(path, header, rows):
    lines = [SCHEMA_LINE, ",".join(header)]
    lines += [",".join(v if isinstance(v, str) else _fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _write_json(path, obj):
    Path(path).write_text(json.dumps({"schema_version": SCHEMA_VERSION, **obj}, indent=1, sort_keys=True) + "\n")


def _load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def _input_set(lo, hi, n, dim, seed) -> InputSet:
    if dim == 1:
        return InputSet.grid(lo, hi, n)
    return InputSet(np.random.default_rng(seed).uniform(lo, hi, (n, dim)))


# --------------------------------------------------------------- commands


def cmd_fit_prior(cfg: FitPriorConfig) -> int:
    kernel = cfg.kernel_spec()
    tc = TrainingConfig(
        kernel,
        input_range=cfg.range,
        sets_per_batch=cfg.sets,
        points_per_set=cfg.points,
        functions_per_set=cfg.functions,
        mc_samples=cfg.mc_samples,
        iterations=cfg.iters,
        learning_rate=cfg.lr,
        regularizer_weight=cfg.reg_weight,
        max_restarts=cfg.max_restarts,
        outlier_factor=cfg.outlier_factor,
        seed=cfg.seed,
        target=cfg.target,
    )
    try:
        if cfg.conditional:
            ckpt = fit_conditional_prior(tc, cfg.activation, cfg.width, cfg.gamma_range)
        else:
            ckpt = fit_prior(tc, cfg.activation, cfg.width)
    except AllRestartsFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RESTARTS
    ckpt.save(cfg.out)
    trace_path = cfg.trace_csv or str(Path(cfg.out).with_suffix(".trace.csv"))
    _write_csv(trace_path, ["iteration", "loss"], [(str(i + 1), v) for i, v in enumerate(ckpt.trace)])
    if cfg.plot:
        from .plotting import loss_trace

        loss_trace(cfg.plot, ckpt.trace)
    print(f"final_loss={_fmt(ckpt.final_loss)} attempts={ckpt.attempts} -> {cfg.out}")
    if ckpt.failed:
        print("error: every attempt was an outlier; best checkpoint written", file=sys.stderr)
        return EXIT_RESTARTS
    return EXIT_OK


def cmd_eval_prior(cfg: EvalPriorConfig) -> int:
    ckpt = _load_checkpoint(cfg.checkpoint)
    kernel = cfg.kernel_spec() or ckpt.config.kernel
    gamma = cfg.gamma
    if ckpt.kind == "conditional" and gamma is None:
        gamma = float(np.max(kernel.lengthscale))
    if ckpt.kind == "conditional" and cfg.kernel is None:
        kernel = kernel.with_lengthscale(gamma)
    if cfg.range is not None:
        lo, hi = cfg.range
    elif ckpt.kind == "conditional":
        lo, hi = -3.0 * gamma, 3.0 * gamma
    else:
        lo, hi = ckpt.config.range_for(float(np.max(ckpt.config.kernel.lengthscale)))
    if kernel.input_dim != ckpt.input_dim:
        raise UsageError(f"kernel input_dim {kernel.input_dim} != checkpoint input_dim {ckpt.input_dim}")
    X = _input_set(lo, hi, cfg.n_inputs, kernel.input_dim, cfg.seed).shifted(cfg.shift)
    report = evaluate_prior(ckpt, kernel, X, cfg.n, cfg.seed, gamma=gamma)
    vals = report.values()
    if cfg.out_csv:
        _write_csv(cfg.out_csv, list(METRIC_FIELDS), [[vals[k] for k in METRIC_FIELDS]])
    if cfg.out_json:
        _write_json(
            cfg.out_json,
            {"metrics": vals, "meta": report.meta, "shift": cfg.shift, "range": [lo, hi], "n": cfg.n},
        )
    if cfg.plot and kernel.input_dim == 1:
        from .plotting import sample_fan

        rng = np.random.default_rng(cfg.seed)
        fb = sample_functions(ckpt.prior_at(gamma), X, 30, rng).values
        fg = sample_gp(kernel, X, 30, rng).values
        sample_fan(cfg.plot, X.points[:, 0], {"GP": fg, "BNN": fb})
    print(" ".join(f"{k}={_fmt(vals[k])}" for k in METRIC_FIELDS))
    return EXIT_OK


def _grid_for(data: post.Dataset, n: int) -> np.ndarray:
    lo = data.X.min(axis=0)
    hi = data.X.max(axis=0)
    pad = 0.25 * (hi - lo) + 0.5
    if data.dim == 1:
        return np.linspace(lo[0] - pad[0], hi[0] + pad[0], n)[:, None]
    if data.dim == 2:
        m = max(2, int(round(math.sqrt(n))))
        g0 = np.linspace(lo[0] - pad[0], hi[0] + pad[0], m)
        g1 = np.linspace(lo[1] - pad[1], hi[1] + pad[1], m)
        a, b = np.meshgrid(g0, g1, indexing="ij")
        return np.column_stack([a.ravel(), b.ravel()])
    return data.X


def cmd_fit_posterior(cfg: FitPosteriorConfig) -> int:
    ckpt = _load_checkpoint(cfg.checkpoint)
    try:
        train = post.Dataset.load(cfg.data)
        test = post.Dataset.load(cfg.test_data) if cfg.test_data else None
    except (OSError, post.SchemaError) as exc:
        raise UsageError(f"bad dataset: {exc}") from None
    if ckpt.kind == "conditional" and cfg.gamma is None:
        raise UsageError("conditional checkpoint needs --gamma")
    prior = ckpt.prior_at(cfg.gamma, width=cfg.width)
    reused = prior.input_dim == 1 and train.dim > 1
    if reused:
        # scalar prior scales fitted on 1-D inputs carry over to higher-dimensional inputs
        prior = dataclasses.replace(prior, input_dim=train.dim)
    if train.dim != prior.input_dim or (test is not None and test.dim != prior.input_dim):
        raise UsageError(f"dataset dimension does not match the prior (input_dim {prior.input_dim})")
    if cfg.likelihood == "gaussian":
        lik = post.LikelihoodSpec.gaussian(cfg.noise_variance)
    else:
        if not np.all(np.isin(train.y, (0.0, 1.0))):
            raise UsageError("bernoulli likelihood needs labels in {0, 1}")
        lik = post.LikelihoodSpec.bernoulli()
    hc = post.HMCConfig(cfg.chains, cfg.warmup, cfg.samples, cfg.leapfrog, cfg.step_size, cfg.target_accept, cfg.seed)
    try:
        chain = post.hmc_run(prior, train, lik, hc)
    except post.Diverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "chain.csv").write_text(chain.to_csv())

    grid = _grid_for(train, cfg.grid_points)
    pred = post.predictive(chain, prior, lik, grid, max_draws=cfg.max_draws)
    xh = [f"x_{i + 1}" for i in range(grid.shape[1])]
    first = "mean" if lik.kind == "gaussian" else "prob"
    _write_csv(
        out / "predictive.csv",
        xh + [first, "total_var", "epistemic_var", "aleatoric_var"],
        np.column_stack([grid, pred.mean, pred.total_variance, pred.epistemic_variance, pred.aleatoric_variance]),
    )

    evalset = test if test is not None else train
    pe = post.predictive(chain, prior, lik, evalset.X, max_draws=cfg.max_draws)
    target = evalset.f if (lik.kind == "gaussian" and evalset.f is not None) else evalset.y
    summary = {
        "chain": chain.summary(),
        "hmc": hc.to_dict(),
        "likelihood": lik.to_dict(),
        "prior": prior.to_dict(),
        "eval_set": "test" if test is not None else "train",
        "prior_reused_from_1d": reused,
        "rmse_target": "f" if target is evalset.f else "y",
        "rmse": post.rmse(pe, target),
        "nll": post.nll(pe, lik, evalset.y),
    }
    if lik.kind == "bernoulli_logit":
        summary["accuracy"] = float(np.mean((pe.mean > 0.5) == (evalset.y > 0.5)))
    _write_json(out / "summary.json", summary)
    if cfg.plot and grid.shape[1] == 1:
        from .plotting import predictive_band

        predictive_band(cfg.plot, grid[:, 0], pred.mean, pred.total_variance, train.X[:, 0], train.y)
    print(f"rmse={_fmt(summary['rmse'])} nll={_fmt(summary['nll'])} acceptance={chain.acceptance_rate:.3f}")
    return EXIT_OK


def cmd_sample(cfg: SampleConfig) -> int:
    ckpt = _load_checkpoint(cfg.checkpoint) if cfg.checkpoint else None
    kernel = cfg.kernel_spec()
    dim = ckpt.input_dim if ckpt is not None else kernel.input_dim
    if ckpt is not None and kernel is not None and kernel.input_dim != dim:
        raise UsageError("kernel and checkpoint input dimensions differ")
    gamma = cfg.gamma
    if ckpt is not None and ckpt.kind == "conditional" and gamma is None:
        raise UsageError("conditional checkpoint needs --gamma")
    X = _input_set(cfg.range[0], cfg.range[1], cfg.n_inputs, dim, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    groups = {}
    if ckpt is not None:
        groups["bnn"] = sample_functions(ckpt.prior_at(gamma), X, cfg.n, rng).values
    if kernel is not None:
        groups["gp"] = sample_gp(kernel, X, cfg.n, rng).values
    xh = [f"x_{i + 1}" for i in range(dim)]
    rows = []
    for source, F in groups.items():
        for s in range(F.shape[0]):
            for j in range(X.n):
                rows.append([source, str(s)] + [_fmt(v) for v in X.points[j]] + [_fmt(F[s, j])])
    _write_csv(cfg.out, ["source", "sample"] + xh + ["value"], rows)
    if cfg.plot and dim == 1:
        from .plotting import sample_fan

        sample_fan(cfg.plot, X.points[:, 0], {k.upper(): v for k, v in groups.items()})
    print(f"wrote {sum(F.shape[0] for F in groups.values())} functions -> {cfg.out}")
    return EXIT_OK


def cmd_make_data(cfg: MakeDataConfig) -> int:
    rng = np.random.default_rng(cfg.seed)
    if cfg.kind == "regression":
        train, test = post.regression_demo(rng)
        train.save(cfg.out)
        test_out = cfg.test_out or str(Path(cfg.out).with_suffix(".test.csv"))
        test.save(test_out)
        print(f"wrote {train.n} training rows -> {cfg.out}, {test.n} test rows -> {test_out}")
    else:
        data = post.two_moons(rng, cfg.n, cfg.noise)
        data.save(cfg.out)
        print(f"wrote {data.n} rows -> {cfg.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _kernel_flags(p):
    p.add_argument("--kernel", choices=FAMILIES)
    p.add_argument("--lengthscale", type=float)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--period", type=float)
    p.add_argument("--input-dim", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gp2bnn", description="Transfer GP priors to BNN priors and sample BNN posteriors.")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON config file; flags override its keys")
        p.add_argument("--seed", type=int)
        return p

    p = add("fit-prior", "fit BNN prior scales and activation to a GP")
    _kernel_flags(p)
    p.add_argument("--width", type=int)
    p.add_argument("--activation")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--sets", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--functions", type=int)
    p.add_argument("--mc-samples", type=int)
    p.add_argument("--reg-weight", type=float)
    p.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--max-restarts", type=int)
    p.add_argument("--outlier-factor", type=float)
    p.add_argument("--target", choices=("samples", "analytic"))
    p.add_argument("--conditional", action="store_true")
    p.add_argument("--gamma-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--out")
    p.add_argument("--trace-csv")
    p.add_argument("--plot")

    p = add("eval-prior", "compare a fitted prior with a GP")
    p.add_argument("--checkpoint")
    _kernel_flags(p)
    p.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--n-inputs", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--shift", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    p.add_argument("--plot")

    p = add("fit-posterior", "HMC posterior of a BNN carrying a fitted prior")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--test-data")
    p.add_argument("--likelihood", choices=("gaussian", "bernoulli"))
    p.add_argument("--noise-variance", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--chains", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--leapfrog", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--target-accept", type=float)
    p.add_argument("--grid-points", type=int)
    p.add_argument("--max-draws", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--plot")

    p = add("sample", "sample functions from a checkpoint and/or a GP")
    p.add_argument("--checkpoint")
    _kernel_flags(p)
    p.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--n-inputs", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--out")
    p.add_argument("--plot")

    p = add("make-data", "write a demo dataset")
    p.add_argument("--kind", choices=("regression", "two-moons"))
    p.add_argument("--n", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--out")
    p.add_argument("--test-out")
    return parser


COMMANDS = {
    "fit-prior": (FitPriorConfig, cmd_fit_prior),
    "eval-prior": (EvalPriorConfig, cmd_eval_prior),
    "fit-posterior": (FitPosteriorConfig, cmd_fit_posterior),
    "sample": (SampleConfig, cmd_sample),
    "make-data": (MakeDataConfig, cmd_make_data),
}


def resolve_config(command: str, flags: dict):
    """Merge the optional JSON config file with explicit flags and validate."""
    model, _ = COMMANDS[command]
    merged = {}
    path = flags.pop("config", None)
    if path:
        try:
            merged = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(merged, dict):
            raise UsageError(f"config {path} must hold a JSON object")
    merged.update(flags)
    return model(**merged)


def _describe(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "config"
        lines.append(f"config field '{loc}': {e['msg']}")
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(ns.log_level).upper(), logging.WARNING))
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "log_level")}
    try:
        cfg = resolve_config(ns.command, flags)
    except ValidationError as exc:
        print(f"error: {_describe(exc)}", file=sys.stderr)
        return EXIT_INVALID
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID

    threads = os.environ.get("GP2BNN_THREADS")
    limits = None
    if threads:
        from threadpoolctl import threadpool_limits

        try:
            limits = threadpool_limits(int(threads))
        except ValueError:
            print(f"error: GP2BNN_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return EXIT_INVALID
    try:
        return COMMANDS[ns.command][1](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    finally:
        if limits is not None:
            limits.unregister()


if __name__ == "__main__":
    sys.exit(main())
