"""Prior-matching training loop, restarts, hypernetwork conditioning and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import activations as acts
from .bnn import PriorParams, default_prior, sample_functions
from .gp import InputSet, KernelSpec, gram, sample_gp
from .grad import NonFiniteLoss, ParamVector, TargetSet, TrainingBatchSpec, loss_and_grad
from .hypernet import Hypernetwork
from .metrics import MetricReport, compare

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class AllRestartsFailed(RuntimeError):
    def __init__(self, checkpoint: "Checkpoint"):
        super().__init__(f"no acceptable fit after {checkpoint.attempts} attempts")
        self.checkpoint = checkpoint


@dataclass
class TrainingConfig:
    kernel: KernelSpec
    input_range: Optional[tuple] = None  # None: [-3 l, 3 l]
    sets_per_batch: int = 1
    points_per_set: int = 256
    functions_per_set: int = 1024
    mc_samples: int = 1024
    iterations: int = 2000
    learning_rate: float = 0.01
    regularizer_weight: float = 0.0
    max_restarts: int = 3
    outlier_factor: float = 3.0
    reference_loss: Optional[float] = None
    seed: int = 0
    final_window: int = 50
    target: str = "samples"  # or "analytic": exact GP moments instead of sampled ones

    def __post_init__(self):
        for name in ("sets_per_batch", "points_per_set", "functions_per_set", "mc_samples", "iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.functions_per_set < 2 or self.mc_samples < 2:
            raise ValueError("need at least two target and two Monte Carlo functions")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.regularizer_weight < 0:
            raise ValueError("regularizer_weight must be >= 0")
        if self.input_range is not None:
            lo, hi = self.input_range
            if not lo < hi:
                raise ValueError("input_range needs lo < hi")
            self.input_range = (float(lo), float(hi))
        if self.target not in ("samples", "analytic"):
            raise ValueError("target must be 'samples' or 'analytic'")

    @classmethod
    def periodic_preset(cls, kernel: KernelSpec, **kw) -> "TrainingConfig":
        """8 sets x 512 inputs x 128 functions, 4000 Adam steps at lr 0.01."""
        base = dict(sets_per_batch=8, points_per_set=512, functions_per_set=128, mc_samples=128, iterations=4000)
        base.update(kw)
        return cls(kernel, **base)

    def range_for(self, lengthscale: float) -> tuple:
        if self.input_range is not None:
            return self.input_range
        return (-3.0 * lengthscale, 3.0 * lengthscale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel"] = self.kernel.to_dict()
        if self.input_range is not None:
            d["input_range"] = list(self.input_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        d["kernel"] = KernelSpec.from_dict(d["kernel"])
        if d.get("input_range") is not None:
            d["input_range"] = tuple(d["input_range"])
        return cls(**d)


class Adam:
    def __init__(self, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class Checkpoint:
    kind: str  # "prior" | "conditional"
    config: TrainingConfig
    final_loss: float
    trace: list
    seed: int
    width: int
    input_dim: int = 1
    prior: Optional[PriorParams] = None
    hypernet: Optional[Hypernetwork] = None
    theta: Optional[np.ndarray] = None
    gamma_range: Optional[tuple] = None
    attempts: int = 1
    failed: bool = False
    version: int = CHECKPOINT_VERSION

    def prior_at(self, gamma: Optional[float] = None, width: Optional[int] = None) -> PriorParams:
        width = self.width if width is None else int(width)
        if self.kind == "prior":
            return self.prior.with_width(width)
        if gamma is None:
            raise ValueError("conditional checkpoint needs a lengthscale gamma")
        log_s, eta, _ = self.hypernet.forward(self.theta, float(gamma))
        s = np.exp(log_s)
        return PriorParams(
            width, self.input_dim, float(s[0]), float(s[1]), float(s[2]), float(s[3]),
            self.hypernet.activation.with_params(eta),
        )

    def to_dict(self) -> dict:
        d = {
            "version": self.version,
            "kind": self.kind,
            "width": self.width,
            "input_dim": self.input_dim,
            "config": self.config.to_dict(),
            "final_loss": self.final_loss,
            "trace": list(map(float, self.trace)),
            "seed": self.seed,
            "attempts": self.attempts,
            "failed": self.failed,
        }
        if self.kind == "prior":
            d["prior"] = self.prior.to_dict()
            d["activation"] = self.prior.activation.to_dict()
        else:
            d["hypernet"] = {**self.hypernet.to_dict(), "theta": self.theta.tolist()}
            d["activation"] = {"spec": self.hypernet.activation.spec}
            d["gamma_range"] = list(self.gamma_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        common = dict(
            config=TrainingConfig.from_dict(d["config"]),
            final_loss=float(d["final_loss"]),
            trace=[float(v) for v in d["trace"]],
            seed=int(d["seed"]),
            width=int(d["width"]),
            input_dim=int(d.get("input_dim", 1)),
            attempts=int(d.get("attempts", 1)),
            failed=bool(d.get("failed", False)),
        )
        if d["kind"] == "prior":
            return cls(kind="prior", prior=PriorParams.from_dict(d["prior"]), **common)
        h = d["hypernet"]
        hn = Hypernetwork(acts.from_dict(h["activation"]), tuple(h["hidden"]))
        return cls(
            kind="conditional",
            hypernet=hn,
            theta=np.asarray(h["theta"], float),
            gamma_range=tuple(d["gamma_range"]),
            **common,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _as_activation(activation, rng) -> acts.Activation:
    if isinstance(activation, acts.Activation):
        return activation
    return acts.make_activation(activation, rng=rng)


def _target_set(cfg: TrainingConfig, kernel: KernelSpec, lo, hi, rng, target_prior=None) -> TargetSet:
    X = rng.uniform(lo, hi, size=(cfg.points_per_set, kernel.input_dim))
    if target_prior is not None:
        F = sample_functions(target_prior, InputSet(X), cfg.functions_per_set, rng).values
        return TargetSet.from_samples(X, F)
    if cfg.target == "analytic":
        K = gram(kernel, InputSet(X))
        return TargetSet(X, np.zeros(X.shape[0]), K, None)
    return TargetSet.from_samples(X, sample_gp(kernel, InputSet(X), cfg.functions_per_set, rng).values)


def _final(trace, window):
    tail = trace[-window:] if trace else [math.inf]
    return float(np.mean(tail))


def _run_once(cfg, act, width, seed_seq, target_prior, init_prior, train_sigmas, train_eta):
    data_ss, mc_ss, init_ss = seed_seq.spawn(3)
    data_rng = np.random.default_rng(data_ss)
    mc_rng = np.random.default_rng(mc_ss)
    if init_prior is None:
        act0 = act if act.n_params == 0 else acts.make_activation(act.spec, rng=np.random.default_rng(init_ss))
        init_prior = default_prior(act0, width=width, input_dim=cfg.kernel.input_dim)
    params = ParamVector.from_prior(init_prior)
    mask = np.concatenate([np.full(4, float(train_sigmas)), np.full(act.n_params, float(train_eta))])
    opt = Adam(cfg.learning_rate)
    lo, hi = cfg.range_for(float(np.max(cfg.kernel.lengthscale)))
    trace = []
    for it in range(cfg.iterations):
        sets = [_target_set(cfg, cfg.kernel, lo, hi, data_rng, target_prior) for _ in range(cfg.sets_per_batch)]
        batch = TrainingBatchSpec(sets, cfg.mc_samples, width, init_prior.activation, cfg.regularizer_weight)
        loss, g = loss_and_grad(params, batch, mc_rng)
        trace.append(loss)
        params = params.with_values(opt.step(params.values, g.values * mask))
        if not np.all(np.isfinite(params.values)):
            raise NonFiniteLoss(f"parameters diverged at iteration {it}")
    return params.to_prior(init_prior), trace


def _run_conditional(cfg, act, width, seed_seq, gamma_range, hidden):
    data_ss, mc_ss, init_ss = seed_seq.spawn(3)
    data_rng = np.random.default_rng(data_ss)
    mc_rng = np.random.default_rng(mc_ss)
    init_rng = np.random.default_rng(init_ss)
    act0 = act if act.n_params == 0 else acts.make_activation(act.spec, rng=init_rng)
    hn = Hypernetwork(act0, hidden)
    params = ParamVector.for_hypernet(hn.init_theta(init_rng))
    opt = Adam(cfg.learning_rate)
    log_lo, log_hi = math.log(gamma_range[0]), math.log(gamma_range[1])
    trace = []
    for it in range(cfg.iterations):
        gamma = math.exp(data_rng.uniform(log_lo, log_hi))
        kernel = cfg.kernel.with_lengthscale(gamma)
        lo, hi = -3.0 * gamma, 3.0 * gamma
        sets = [_target_set(cfg, kernel, lo, hi, data_rng) for _ in range(cfg.sets_per_batch)]
        batch = TrainingBatchSpec(
            sets, cfg.mc_samples, width, act0, cfg.regularizer_weight, gamma=gamma, hypernet=hn
        )
        loss, g = loss_and_grad(params, batch, mc_rng)
        trace.append(loss)
        params = params.with_values(opt.step(params.values, g.values))
        if not np.all(np.isfinite(params.values)):
            raise NonFiniteLoss(f"hypernetwork diverged at iteration {it}")
    return hn, params["hnet_theta"].copy(), trace


def _with_restarts(cfg: TrainingConfig, run, make_checkpoint):
    """Run attempts with fresh seeds until one is not an outlier.

    An attempt is an outlier when it diverges or its final loss exceeds
    ``outlier_factor`` times the reference (``cfg.reference_loss`` if set,
    otherwise the best earlier attempt). The best attempt is always returned.
    """
    best = None
    accepted = False
    attempts = 0
    for attempt in range(cfg.max_restarts + 1):
        attempts += 1
        ss = np.random.SeedSequence([cfg.seed, attempt])
        try:
            ckpt = make_checkpoint(*run(ss))
        except NonFiniteLoss as exc:
            log.warning("attempt %d diverged: %s", attempt, exc)
            continue
        ref = cfg.reference_loss if cfg.reference_loss is not None else (best.final_loss if best else None)
        outlier = ref is not None and ckpt.final_loss > cfg.outlier_factor * ref
        if best is None or ckpt.final_loss < best.final_loss:
            best = ckpt
        log.info("attempt %d final loss %.5g%s", attempt, ckpt.final_loss, " (outlier)" if outlier else "")
        if not outlier:
            accepted = True
            break
    if best is None:
        raise AllRestartsFailed(
            Checkpoint("prior", cfg, math.inf, [], cfg.seed, 0, attempts=attempts, failed=True)
        )
    best.attempts = attempts
    best.failed = not accepted
    return best


def fit_prior(
    cfg: TrainingConfig,
    activation: Union[str, acts.Activation] = "nn:5:silu",
    width: int = 128,
    *,
    target_prior: Optional[PriorParams] = None,
    init_prior: Optional[PriorParams] = None,
    train_sigmas: bool = True,
    train_eta: bool = True,
) -> Checkpoint:
    """Fit BNN prior scales and activation parameters to the configured GP.

    ``target_prior`` replaces the GP by another BNN prior as the target (used for
    self-consistency checks). ``train_sigmas`` / ``train_eta`` freeze either
    parameter group. Returns the best checkpoint; ``failed`` is set when every
    attempt was an outlier.
    """
    act = _as_activation(activation, np.random.default_rng(cfg.seed))

    def run(ss):
        return _run_once(cfg, act, width, ss, target_prior, init_prior, train_sigmas, train_eta)

    def make(prior, trace):
        return Checkpoint(
            "prior", cfg, _final(trace, cfg.final_window), trace, cfg.seed, width,
            input_dim=cfg.kernel.input_dim, prior=prior,
        )

    return _with_restarts(cfg, run, make)


def fit_conditional_prior(
    cfg: TrainingConfig,
    activation: Union[str, acts.Activation] = "periodic:5",
    width: int = 128,
    gamma_range: tuple = (0.25, 4.0),
    hidden: tuple = (128, 32, 8),
) -> Checkpoint:
    """Train a hypernetwork giving prior scales and ``eta`` as functions of the lengthscale.

    Each step draws a lengthscale log-uniformly from ``gamma_range``, inputs from
    ``[-3 gamma, 3 gamma]`` and targets from the GP at that lengthscale.
    """
    lo, hi = gamma_range
    if not 0 < lo < hi:
        raise ValueError("gamma_range must be positive with lo < hi")
    act = _as_activation(activation, np.random.default_rng(cfg.seed))

    def run(ss):
        return _run_conditional(cfg, act, width, ss, gamma_range, hidden)

    def make(hn, theta, trace):
        return Checkpoint(
            "conditional", cfg, _final(trace, cfg.final_window), trace, cfg.seed, width,
            input_dim=cfg.kernel.input_dim, hypernet=hn, theta=theta, gamma_range=(float(lo), float(hi)),
        )

    return _with_restarts(cfg, run, make)


def evaluate_prior(
    ckpt: Union[Checkpoint, PriorParams],
    kernel: KernelSpec,
    X: InputSet,
    n: int,
    seed: int,
    gamma: Optional[float] = None,
) -> MetricReport:
    """Metric suite between ``n`` BNN prior draws and ``n`` GP draws on ``X``."""
    if not isinstance(X, InputSet):
        X = InputSet(X)
    if isinstance(ckpt, Checkpoint):
        if ckpt.kind == "conditional" and gamma is None:
            gamma = float(np.max(kernel.lengthscale))
        prior = ckpt.prior_at(gamma)
    else:
        prior = ckpt
    rng = np.random.default_rng(seed)
    bnn = sample_functions(prior, X, n, rng)
    gp = sample_gp(kernel, X, n, rng)
    report = compare(bnn, gp)
    report.meta["seed"] = seed
    if gamma is not None:
        report.meta["gamma"] = gamma
    return report
