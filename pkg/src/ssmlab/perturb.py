"""Perturbation error of trained models: the worst error over a ball of weights.

E(beta) = sup_{|theta~ - theta| <= beta} ||H - H(theta~)|| is estimated by
sampling directions on the sphere of radius beta and keeping the largest
error.  That maximum is a lower bound on the supremum; for linear models
:func:`linear_upper_bound` gives the matching analytic upper bound.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ssmlab import reparam, ssm
from ssmlab.errors import ConfigurationError, DomainError, NumericError
from ssmlab.kernel import (
    ModelKernel,
    QuadratureConfig,
    apply_linear_functional,
    kernel_l1_distance,
    parse_kernel,
)

log = logging.getLogger(__name__)

REPORT_FIELDS = ("m", "beta", "e_hat", "e_hat_raw", "samples", "crossing_flag")
INF = float("inf")

_NAMED_RATIOS = {"sqrt2": math.sqrt(2.0), "2": 2.0, "e": math.e, "10": 10.0}


def parse_beta_grid(text: str) -> list[float]:
    """``geo:<start>:<ratio>:<count>`` (0 prepended) or a comma list of numbers.

    ``geo:1e-3:sqrt2:21`` gives 0, 1e-3, 1e-3*sqrt2, ..., 1e-3*2^10.
    """
    text = (text or "").strip()
    if text.startswith("geo:"):
        parts = text.split(":")
        if len(parts) != 4:
            raise ConfigurationError(f"geometric grid needs geo:<start>:<ratio>:<count>, got {text!r}")
        try:
            start = float(parts[1])
            ratio = _NAMED_RATIOS.get(parts[2].strip())
            if ratio is None:
                ratio = float(parts[2])
            count = int(parts[3])
        except ValueError:
            raise ConfigurationError(f"malformed geometric grid {text!r}") from None
        if not (start > 0 and ratio > 1 and count >= 1):
            raise ConfigurationError("geometric grid needs start > 0, ratio > 1, count >= 1")
        grid = [0.0] + [start * ratio**k for k in range(count)]
    else:
        items = [s for s in re.split(r"[,\s]+", text.strip("[]")) if s]
        if not items:
            raise ConfigurationError("empty beta grid")
        try:
            grid = [float(s) for s in items]
        except ValueError:
            raise ConfigurationError(f"malformed beta list {text!r}") from None
    validate_beta_grid(grid)
    return grid


def validate_beta_grid(grid: Sequence[float]):
    if len(grid) == 0 or grid[0] != 0.0:
        raise ConfigurationError("beta grid must start at 0")
    if any(not math.isfinite(b) for b in grid) or any(b2 <= b1 for b1, b2 in zip(grid[:-1], grid[1:])):
        raise ConfigurationError("beta grid must be finite and strictly increasing")


DEFAULT_BETA_GRID = "geo:1e-3:sqrt2:21"


@dataclass
class PerturbConfig:
    betas: Sequence[float] = field(default_factory=lambda: parse_beta_grid(DEFAULT_BETA_GRID))
    samples_per_beta: int = 30
    perturb_set: str = "recurrent"  # or "all"
    metric: str = "l1-kernel"  # or "sobolev"
    space: str = "w"  # or "lambda"
    seed: int = 0
    probes: int = 64
    probe_length: int = 100
    horizon_only: bool = False

    def __post_init__(self):
        if isinstance(self.betas, str):
            self.betas = parse_beta_grid(self.betas)
        self.betas = [float(b) for b in self.betas]
        validate_beta_grid(self.betas)
        if self.samples_per_beta < 1:
            raise ConfigurationError("samples_per_beta must be at least 1")
        if self.perturb_set not in ("recurrent", "all"):
            raise ConfigurationError("perturb_set must be recurrent or all")
        if self.metric not in ("l1-kernel", "sobolev"):
            raise ConfigurationError("metric must be l1-kernel or sobolev")
        if self.space not in ("w", "lambda"):
            raise ConfigurationError("space must be w or lambda")
        if self.probes < 1 or self.probe_length < 2:
            raise ConfigurationError("need probes >= 1 and probe_length >= 2")


# --- perturbation directions ----------------------------------------------------

def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def sample_directions(params: ssm.SSMParams, config: PerturbConfig, rng) -> list:
    """``samples_per_beta`` unit directions, in antithetic pairs (u, -u).

    Each direction is a dict of per-group unit vectors.  With ``all`` every
    group (lambda or w, U, b, c) is moved by the full radius, which is the
    boundary of the max-of-norms ball.
    """
    n = config.samples_per_beta
    half = (n + 1) // 2
    groups = {"w": (params.m,)}
    if config.perturb_set == "all":
        groups.update(U=params.U.shape, b=(params.m,), c=(params.m,))
    base = []
    for _ in range(half):
        base.append({k: _unit(rng.standard_normal(int(np.prod(s)))).reshape(s) for k, s in groups.items()})
    out = []
    for d in base:
        out.append(d)
        if len(out) < n:
            out.append({k: -v for k, v in d.items()})
    return out[:n]


def direction_hash(direction: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(direction):
        h.update(k.encode())
        h.update(np.ascontiguousarray(direction[k], dtype=np.float64).tobytes())
    return h.hexdigest()[:12]


def perturbed_eigenvalues(params, direction, beta, space="w"):
    if space == "lambda":
        return params.eigenvalues + beta * direction["w"]
    return np.asarray(reparam.apply(params.scheme, params.w + beta * direction["w"]))


def _perturbed_parts(params, direction, beta, space):
    lam = perturbed_eigenvalues(params, direction, beta, space)
    U = params.U + beta * direction["U"] if "U" in direction else params.U
    b = params.b + beta * direction["b"] if "b" in direction else params.b
    c = params.c + beta * direction["c"] if "c" in direction else params.c
    return lam, U, b, c


# --- error metrics --------------------------------------------------------------

def _stable(lam, continuous):
    return bool(np.all(lam < 0)) if continuous else bool(np.all(np.abs(lam) < 1))


class L1KernelMetric:
    """L1 distance between the model's linear kernel and the target kernel."""

    name = "l1-kernel"

    def __init__(self, target, quad: QuadratureConfig | None = None, horizon_only=False):
        self.target = parse_kernel(target) if isinstance(target, str) else target
        self.quad = quad or QuadratureConfig()
        self.horizon_only = horizon_only

    def __call__(self, params, lam, U, b, c) -> float:
        if not _stable(lam, params.scheme.continuous):
            return INF
        k = ModelKernel(c * U[:, 0], lam, params.time_mode)
        return kernel_l1_distance(k, self.target, self.quad, horizon_only=self.horizon_only)


class SobolevMetric:
    """Empirical W^{1,inf}-type error on a fixed probe set.

    max over steps of the input-normalized output error plus the
    input-normalized error of the time derivative (finite differences).
    """

    name = "sobolev"

    def __init__(self, target, probes: int = 64, length: int = 100, seed: int = 0):
        self.target = parse_kernel(target) if isinstance(target, str) else target
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x50B0]))
        x = rng.standard_normal((probes, length))
        self.x = x
        self.norm = np.max(np.abs(x), axis=1, keepdims=True) + 1.0
        self._target_cache = {}

    def _target_out(self, dt):
        if dt not in self._target_cache:
            self._target_cache[dt] = apply_linear_functional(self.target, self.x, dt)
        return self._target_cache[dt]

    def __call__(self, params, lam, U, b, c) -> float:
        if not _stable(lam, params.scheme.continuous):
            return INF
        try:
            model = _params_with_eigenvalues(params, lam, U, b, c)
            y, _ = ssm.forward(model, self.x[..., None] if model.d == 1 else self.x)
        except (DomainError, NumericError):
            return INF
        dt = params.dt if params.scheme.continuous else 1.0
        err = y - self._target_out(dt)
        value = np.max(np.abs(err) / self.norm, axis=0)
        deriv = np.max(np.abs(np.diff(err, axis=1)) / dt / self.norm, axis=0)
        return float(np.max(value[:-1] + deriv))


def _params_with_eigenvalues(params, lam, U, b, c):
    try:
        w = reparam.invert(params.scheme, lam)
    except DomainError:
        # eigenvalues outside the range of f; build the same model on the direct scheme
        scheme = reparam.Scheme(reparam.Family.DIRECT, params.time_mode)
        return params.replace(w=lam, U=U, b=b, c=c, scheme=scheme)
    return params.replace(w=w, U=U, b=b, c=c)


def make_metric(config: PerturbConfig, target, quad=None):
    if config.metric == "l1-kernel":
        return L1KernelMetric(target, quad, config.horizon_only)
    return SobolevMetric(target, config.probes, config.probe_length, config.seed)


# --- estimation -------------------------------------------------------------------

@dataclass
class Estimate:
    beta: float
    value: float
    samples: int
    argmax_hash: str
    values: np.ndarray


def _rng_for(config, params):
    # same directions for every beta of a checkpoint (common random numbers)
    return np.random.default_rng(np.random.SeedSequence([config.seed, params.m, params.d]))


def perturbation_samples(params, target, beta, config: PerturbConfig | None = None,
                         metric=None, directions=None, workers: int = 1) -> Estimate:
    """Errors of all sampled perturbations at radius ``beta``."""
    config = config or PerturbConfig()
    if beta < 0:
        raise DomainError("beta must be nonnegative")
    metric = metric or make_metric(config, target)
    if directions is None:
        directions = sample_directions(params, config, _rng_for(config, params))
    if beta == 0:
        v = metric(params, params.eigenvalues, params.U, params.b, params.c)
        values = np.full(len(directions), v)
    else:
        def one(d):
            return metric(params, *_perturbed_parts(params, d, beta, config.space))

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                values = np.array(list(pool.map(one, directions)))
        else:
            values = np.array([one(d) for d in directions])
    i = int(np.argmax(values))
    return Estimate(beta, float(values[i]), len(values), direction_hash(directions[i]), values)


def estimate_perturbation_error(params, target, beta, config: PerturbConfig | None = None,
                                metric=None, workers: int = 1) -> float:
    """Sampled lower estimate of the perturbation error at radius ``beta``;
    +inf if any sampled model leaves the stable region."""
    return perturbation_samples(params, target, beta, config, metric, workers=workers).value


def linear_upper_bound(params, target, beta, e0: float | None = None, quad=None) -> float:
    """E(0) + sum_i |c_i U_i| / |lambda_i| * g(beta) for recurrent-only perturbations
    of continuous linear models with a stable reparameterization."""
    scheme = params.scheme
    if not scheme.continuous:
        raise ConfigurationError("the linear upper bound is for continuous-time models")
    lam = params.eigenvalues
    weight = float(np.sum(np.abs(params.c * params.U[:, 0]) / np.abs(lam)))
    if e0 is None:
        e0 = L1KernelMetric(target, quad)(params, lam, params.U, params.b, params.c)
    g = reparam.stability_bound_g_uniform(scheme, params.w, beta)
    return e0 + weight * g


# --- sweeps -------------------------------------------------------------------------

@dataclass
class ReportRow:
    m: int
    beta: float
    e_hat: float
    e_hat_raw: float
    samples: int
    crossing_flag: int = 0
    argmax_hash: str = ""


@dataclass
class PerturbationReport:
    rows: list
    crossings: dict  # (m, m') -> beta where the curve of m' reaches the curve of m
    metadata: dict = field(default_factory=dict)
    raw_violations: int = 0

    def curve(self, m):
        rows = [r for r in self.rows if r.m == m]
        return np.array([r.beta for r in rows]), np.array([r.e_hat for r in rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_FIELDS)
            for r in self.rows:
                w.writerow([r.m, repr(r.beta), repr(r.e_hat), repr(r.e_hat_raw), r.samples, r.crossing_flag])


def read_report_csv(path) -> list:
    with open(path, newline="") as fh:
        return [ReportRow(int(r["m"]), float(r["beta"]), float(r["e_hat"]), float(r["e_hat_raw"]),
                          int(r["samples"]), int(r["crossing_flag"])) for r in csv.DictReader(fh)]


def monotone_envelope(values) -> np.ndarray:
    return np.maximum.accumulate(np.asarray(values, dtype=np.float64))


def crossing_beta(betas, e_small, e_large) -> float:
    """First beta where the larger model's error reaches the smaller model's.

    Between grid points the difference is interpolated linearly in log beta;
    an infinite value on either side falls back to the grid point.  Returns
    +inf if the curves never meet on the grid.
    """
    betas = np.asarray(betas, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        diff = np.asarray(e_large, dtype=np.float64) - np.asarray(e_small, dtype=np.float64)
    crossed = (diff >= 0) | (np.isinf(e_large) & np.isinf(e_small))
    if not np.any(crossed):
        return INF
    j = int(np.argmax(crossed))
    if j == 0:
        return float(betas[0])
    d0, d1 = diff[j - 1], diff[j]
    b0, b1 = betas[j - 1], betas[j]
    if not (np.isfinite(d0) and np.isfinite(d1)) or b0 <= 0:
        return float(b1)
    s = d0 / (d0 - d1)
    return float(math.exp(math.log(b0) + s * (math.log(b1) - math.log(b0))))


def sweep(checkpoints: Sequence[ssm.SSMParams], target, config: PerturbConfig | None = None,
          workers: int = 1, quad=None) -> PerturbationReport:
    """(m, beta) table for checkpoints of increasing width, with crossings
    between each adjacent pair of widths."""
    config = config or PerturbConfig()
    ckpts = sorted(checkpoints, key=lambda p: p.m)
    ms = [p.m for p in ckpts]
    if len(set(ms)) != len(ms):
        raise ConfigurationError("checkpoints must have distinct widths")
    schemes = {str(p.scheme) for p in ckpts}
    if len(schemes) > 1:
        raise ConfigurationError(f"checkpoints use different schemes: {sorted(schemes)}")
    metric = make_metric(config, target, quad)
    rows, curves = [], {}
    violations = 0
    for p in ckpts:
        directions = sample_directions(p, config, _rng_for(config, p))
        ests = [perturbation_samples(p, target, b, config, metric, directions, workers) for b in config.betas]
        raw = np.array([e.value for e in ests])
        env = monotone_envelope(raw)
        violations += int(np.sum(env > raw))
        curves[p.m] = env
        for e, v in zip(ests, env):
            rows.append(ReportRow(p.m, e.beta, float(v), e.value, e.samples, 0, e.argmax_hash))
    crossings = {}
    for a, b in zip(ms[:-1], ms[1:]):
        beta_x = crossing_beta(config.betas, curves[a], curves[b])
        crossings[(a, b)] = beta_x
        if math.isfinite(beta_x):
            # flag the first grid row of the smaller model at or beyond the crossing
            for r in rows:
                if r.m == a and r.beta >= beta_x:
                    r.crossing_flag = 1
                    break
    if violations:
        log.info("monotone envelope lifted %d raw values", violations)
    meta = {"metric": config.metric, "seed": config.seed, "perturb_set": config.perturb_set,
            "space": config.space, "samples_per_beta": config.samples_per_beta,
            "checkpoints": [checkpoint_id(p) for p in ckpts]}
    return PerturbationReport(rows, crossings, meta, violations)


def checkpoint_id(params: ssm.SSMParams) -> str:
    h = hashlib.sha256()
    h.update(str(params.scheme).encode())
    for a in (params.w, params.U, params.b, params.c):
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]
