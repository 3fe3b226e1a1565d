"""Synthetic memory task: dataset generation, the optimizer loop and telemetry.

Inputs are i.i.d. standard normal per step; labels are the output of a
target linear functional.  The loop logs, per step, the range of
|dLoss/dw_i| / |w_i| over the recurrent weights, the eigenvalue closest to
the stability boundary and the weight norm.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ssmlab import reparam, ssm
from ssmlab.errors import ConfigurationError, DomainError, NumericError
from ssmlab.kernel import (
    QuadratureConfig,
    apply_linear_functional,
    cell_weights,
    format_kernel,
    kernel_l1_distance,
    parse_kernel,
)
from ssmlab.reparam import Scheme, parse_scheme

log = logging.getLogger(__name__)

TELEMETRY_FIELDS = ("step", "loss", "gow_max", "gow_min", "max_eig", "weight_norm")
EXTENDED_FIELDS = TELEMETRY_FIELDS + ("gow_all_max", "gow_all_min", "excluded", "c_max", "mass", "bound_ratio")

# sequences per gradient chunk; fixed so the reduction order never depends on workers
GRAD_CHUNK = 64
WEIGHT_EPS = 1e-12


@dataclass
class TrainConfig:
    target: str = "poly:1.1"
    m: int = 16
    d: int = 1
    scheme: str = "exp@cont"
    K: int = 100
    N: int = 153600
    batch_size: int = 512
    lr: float = 0.01
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    steps: Optional[int] = None
    seed: int = 0
    loss: str = "mse"
    activation: str = "tanh"
    train_bias: bool = True
    dt: float = 1.0
    init_low: float = 0.01
    init_high: float = 0.99
    # "uniform" in the discrete magnitude r, or "log" (log-uniform in |ln r|)
    init_law: str = "uniform"
    heaviside_probe: bool = False
    # l1-kernel loss window: None fits the K data cells, a number (or inf) a continuous window
    kernel_horizon: Optional[float] = None
    # return the parameters of the lowest-loss step instead of the last
    keep_best: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.N <= 0 or self.batch_size <= 0 or self.N % self.batch_size:
            raise ConfigurationError(f"N={self.N} must be a positive multiple of batch_size={self.batch_size}")
        if not self.lr >= 0:
            raise ConfigurationError("lr must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.loss not in ("mse", "l1-kernel"):
            raise ConfigurationError(f"loss must be mse or l1-kernel, got {self.loss!r}")
        if self.m < 1 or self.d < 1 or self.K < 1 or self.epochs < 1:
            raise ConfigurationError("m, d, K and epochs must be positive")
        if self.steps is not None and self.steps < 0:
            raise ConfigurationError("steps must be nonnegative")
        if not (0 < self.init_low < self.init_high < 1):
            raise ConfigurationError("need 0 < init_low < init_high < 1")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.init_law not in ("uniform", "log"):
            raise ConfigurationError("init_law must be uniform or log")
        ssm.get_activation(self.activation)
        sch = self.scheme_obj
        if not sch.continuous and self.dt != 1.0:
            raise ConfigurationError("discrete schemes run with dt = 1")
        if self.loss == "l1-kernel" and (self.activation != "identity" or self.train_bias or self.d != 1):
            raise ConfigurationError("l1-kernel loss needs activation=identity, train_bias=false and d=1")
        if self.kernel_horizon is not None:
            self.kernel_horizon = float(self.kernel_horizon)
            if not self.kernel_horizon > 0:
                raise ConfigurationError("kernel_horizon must be positive")
            if not sch.continuous:
                raise ConfigurationError("kernel_horizon applies to continuous schemes only")
        self.target_kernel  # parse check

    @property
    def scheme_obj(self) -> Scheme:
        return parse_scheme(self.scheme)

    @property
    def target_kernel(self):
        return parse_kernel(self.target)

    @property
    def total_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * (self.N // self.batch_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict, **overrides) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        merged = {**data, **{k: v for k, v in overrides.items() if v is not None}}
        return cls(**merged)


def config_fields_help(cls) -> str:
    return ", ".join(f"{f.name}" for f in dataclasses.fields(cls))


# --- data -------------------------------------------------------------------

@dataclass
class Dataset:
    x: np.ndarray  # (N, K)
    y: np.ndarray  # (N, K)
    meta: dict = field(default_factory=dict)

    def save(self, directory, force=False):
        directory = Path(directory)
        if directory.exists() and any(directory.iterdir()) and not force:
            raise FileExistsError(f"{directory} exists; pass force to overwrite")
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "x.npy", self.x)
        np.save(directory / "y.npy", self.y)
        (directory / "meta.json").write_text(json.dumps(self.meta, indent=1, sort_keys=True) + "\n")
        return [directory / "x.npy", directory / "y.npy", directory / "meta.json"]

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        return cls(np.load(directory / "x.npy"), np.load(directory / "y.npy"), meta)


def generate_dataset(target, K: int, N: int, dt: float = 1.0, seed=0, heaviside_probe: bool = False) -> Dataset:
    """N input sequences of length K with their labels under ``target``.

    With ``heaviside_probe`` the first sequence is the unit step.
    """
    if isinstance(target, str):
        target = parse_kernel(target)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((N, K))
    if heaviside_probe:
        x[0] = 1.0
    y = apply_linear_functional(target, x, dt)
    meta = {"K": K, "N": N, "dt": dt, "heaviside_probe": heaviside_probe,
            "input": "iid standard normal"}
    try:
        meta["target"] = format_kernel(target)
    except ConfigurationError:
        meta["target"] = repr(target)
    return Dataset(x, y, meta)


def _seeds(seed):
    # independent streams for data, initialization and shuffling
    data, init, shuffle = np.random.SeedSequence(seed).spawn(3)
    return data, init, shuffle


def initial_eigenvalues(config: TrainConfig, rng) -> np.ndarray:
    if config.init_law == "log":
        lo, hi = -math.log(config.init_high), -math.log(config.init_low)
        r = np.exp(-np.exp(rng.uniform(math.log(lo), math.log(hi), config.m)))
    else:
        r = rng.uniform(config.init_low, config.init_high, config.m)
    if config.scheme_obj.continuous:
        return np.log(r) / config.dt
    return r


def invert_scheme(scheme, lam):
    if isinstance(scheme, str):
        scheme = parse_scheme(scheme)
    return reparam.invert(scheme, lam)


def init_model(config: TrainConfig, seed_seq=None) -> ssm.SSMParams:
    """Initial parameters; depends on the scheme only through w = f^-1(lambda0)."""
    if seed_seq is None:
        seed_seq = _seeds(config.seed)[1]
    rng = np.random.default_rng(seed_seq)
    lam0 = initial_eigenvalues(config, rng)
    try:
        return ssm.init_params(config.m, config.d, config.scheme_obj, lam0, rng,
                               activation=config.activation, dt=config.dt)
    except DomainError as exc:
        raise ConfigurationError(f"initial eigenvalues not reachable by {config.scheme}: {exc}") from None


# --- telemetry ----------------------------------------------------------------

@dataclass
class TelemetryRecord:
    step: int
    loss: float
    gow_max: float
    gow_min: float
    max_eig: float
    weight_norm: float
    gow_all_max: float = float("nan")
    gow_all_min: float = float("nan")
    excluded: int = 0
    c_max: float = float("nan")
    mass: float = float("nan")
    # max_i |dLoss/dw_i| / (c_max * mass * G_f(w_i)); <= 1 when the bound holds
    bound_ratio: float = float("nan")

    def row(self, extended=False):
        names = EXTENDED_FIELDS if extended else TELEMETRY_FIELDS
        return [getattr(self, n) for n in names]


def _ratio_range(grad, weight):
    keep = np.abs(weight) > WEIGHT_EPS
    if not np.any(keep):
        return float("nan"), float("nan"), int(keep.size)
    r = np.abs(grad[keep]) / np.abs(weight[keep])
    return float(r.max()), float(r.min()), int(keep.size - keep.sum())


def gradient_bound_ratio(params: ssm.SSMParams, grad_w, c_hat: float) -> float:
    """max_i |g_i| / (c_hat * G_f(w_i)); entries where G_f = 0 need g_i = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        try:
            scale = np.asarray(reparam.gradient_scale(params.scheme, params.w), dtype=np.float64)
        except DomainError:
            return float("nan")
        bound = c_hat * scale
        g = np.abs(grad_w)
        r = np.where(bound > 0, g / np.where(bound > 0, bound, 1.0), np.where(g > 0, np.inf, 0.0))
    return float(np.max(r))


def write_telemetry_csv(path, records, extended=False):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXTENDED_FIELDS if extended else TELEMETRY_FIELDS)
        for rec in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in rec.row(extended)])


def read_telemetry_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        vals = {k: (int(v) if k in ("step", "excluded") else float(v)) for k, v in r.items()}
        out.append(TelemetryRecord(**vals))
    return out


# --- losses -------------------------------------------------------------------

def _batch_gradients(params, x, y, workers):
    """MSE over the batch and its gradients, reduced in fixed chunk order."""
    B, K = y.shape
    scale = 2.0 / (B * K)
    bounds = list(range(0, B, GRAD_CHUNK)) + [B]

    def chunk(i):
        lo, hi = bounds[i], bounds[i + 1]
        yh, H = ssm.forward(params, x[lo:hi])
        r = yh - y[lo:hi]
        dy = scale * r
        g = ssm.backward(params, x[lo:hi], dy, H)
        return float(np.sum(r * r)), g, float(np.sum(np.abs(dy)))

    n = len(bounds) - 1
    if workers > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(chunk, range(n)))
    else:
        parts = [chunk(i) for i in range(n)]
    sse = 0.0
    abs_dy = 0.0
    gsum = None
    for s, g, a in parts:
        sse += s
        abs_dy += a
        gsum = g.flat() if gsum is None else gsum + g.flat()
    # largest drive |U x + b| per channel, for the gradient-bound constant
    vmax = np.abs(np.einsum("bkd,md->bkm", x, params.U) + params.b).max(axis=(0, 1))
    mass = abs_dy * params.act.lipschitz * float(vmax.max())
    return sse / (B * K), gsum, mass


def _kernel_cells(params, K):
    """Model cell weights W_n (n < K) and dW_n/dlambda_i per channel, (K, m) each."""
    lam = params.eigenvalues
    n = np.arange(K, dtype=np.float64)[:, None]
    A, Bc, dA, dB = ssm.transition(params)
    p = np.maximum(n - 1, 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        Ap = np.power(A, p)
        dAp = np.where(p > 0, p * np.power(A, np.maximum(p - 1, 0)), 0.0) * dA
    cell = Ap * Bc
    dcell = dAp * Bc + Ap * dB
    cell[0] = 0.0
    dcell[0] = 0.0
    return cell, dcell


class _LogQuadrature:
    """Simpson nodes uniform in s = log(1 + t) on [0, T] with weights for dt.

    For an infinite window T is ``FAR_T`` and the loss adds the difference of
    the analytic tails beyond it.
    """

    FAR_T = 1e12
    NODES = 4096

    def __init__(self, target, horizon):
        self.infinite = math.isinf(horizon)
        T = self.FAR_T if self.infinite else horizon
        s = np.linspace(0.0, math.log1p(T), self.NODES + 1)
        simpson = np.ones(s.size)
        simpson[1:-1:2] = 4.0
        simpson[2:-1:2] = 2.0
        self.t = np.expm1(s)
        self.weights = simpson * (s[1] - s[0]) / 3.0 * (self.t + 1.0)
        self.T = T
        self.rho = np.asarray(target(self.t), dtype=np.float64)
        self.rho_tail = float(target.tail(T)) if self.infinite else 0.0

    def loss(self, params):
        lam = params.eigenvalues
        if np.any(lam >= 0):
            return float("inf"), np.full(params.flat().size, np.nan)
        g = params.c * params.U[:, 0]
        E = np.exp(np.multiply.outer(self.t, lam))
        r = E @ g - self.rho
        sw = np.sign(r) * self.weights
        loss = float(np.sum(np.abs(r) * self.weights))
        grad_g = sw @ E
        grad_lam = g * (sw @ (E * self.t[:, None]))
        if self.infinite:
            eT = np.exp(lam * self.T)
            model_tail = float(np.sum(g * eT / -lam))
            d = model_tail - self.rho_tail
            loss += abs(d)
            sd = np.sign(d)
            grad_g = grad_g + sd * eT / -lam
            grad_lam = grad_lam + sd * g * (self.T * eT / -lam + eT / lam**2)
        return loss, _kernel_grad_flat(params, grad_g, grad_lam)


def _kernel_grad_flat(params, grad_g, grad_lam):
    grad_w = np.asarray(reparam.derivative(params.scheme, params.w)) * grad_lam
    grad_U = np.zeros_like(params.U)
    grad_U[:, 0] = grad_g * params.c
    grad_c = grad_g * params.U[:, 0]
    return np.concatenate([grad_w, grad_U.ravel(), np.zeros(params.m), grad_c])


def _kernel_loss(params, target_w):
    """L1 distance of cell weights over the training horizon and its gradients."""
    K = target_w.size
    cell, dcell = _kernel_cells(params, K)
    g = params.c * params.U[:, 0]
    W = cell @ g
    r = W - target_w
    s = np.sign(r)
    return float(np.sum(np.abs(r))), _kernel_grad_flat(params, s @ cell, g * (s @ dcell))


# --- optimizers ---------------------------------------------------------------

class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1**self.t)
        vh = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * mh / (np.sqrt(vh) + self.eps)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, theta, grad):
        return theta - self.lr * grad


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
    return SGD(config.lr)


# --- loop -----------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ssm.SSMParams
    initial_params: ssm.SSMParams
    telemetry: list
    status: str = "ok"  # "ok" or "diverged"
    diverged_step: Optional[int] = None
    message: str = ""
    final_params: Optional[ssm.SSMParams] = None
    best_step: Optional[int] = None

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"


def model_distance(params: ssm.SSMParams, target, quad: QuadratureConfig | None = None, horizon_only=False) -> float:
    """L1 distance between the model's linear kernel and the target kernel."""
    if isinstance(target, str):
        target = parse_kernel(target)
    return kernel_l1_distance(ssm.model_kernel(params), target, quad, horizon_only=horizon_only)


def train(config: TrainConfig, dataset: Dataset | None = None, workers: int = 1,
          callback: Callable | None = None) -> TrainResult:
    """Mini-batch training; one telemetry record per optimizer step.

    ``callback(step, params, grad_flat, record)`` sees each step before the update.
    Non-finite loss or hidden states stop the run with status ``diverged``.
    """
    config.validate()
    data_ss, init_ss, shuffle_ss = _seeds(config.seed)
    params = init_model(config, init_ss)
    initial = params.copy()
    target = config.target_kernel
    if config.loss == "mse" and dataset is None:
        dataset = generate_dataset(target, config.K, config.N, config.dt, data_ss, config.heaviside_probe)
    if dataset is not None and dataset.x.shape != (config.N, config.K):
        raise ConfigurationError(f"dataset shape {dataset.x.shape} does not match N={config.N}, K={config.K}")
    kernel_loss = None
    if config.loss == "l1-kernel":
        if config.kernel_horizon is None:
            target_w = cell_weights(target, config.K, config.dt)
            kernel_loss = lambda p: _kernel_loss(p, target_w)
        else:
            kernel_loss = _LogQuadrature(target, config.kernel_horizon).loss

    opt = make_optimizer(config)
    rng = np.random.default_rng(shuffle_ss)
    per_epoch = config.N // config.batch_size
    m, d = config.m, config.d
    w_slice = slice(0, m)
    b_slice = slice(m + m * d, 2 * m + m * d)
    records = []
    order = None
    best = (math.inf, None, None)
    for step in range(config.total_steps):
        j = step % per_epoch
        if j == 0:
            order = rng.permutation(config.N)
        try:
            if config.loss == "mse":
                idx = np.sort(order[j * config.batch_size:(j + 1) * config.batch_size])
                x = dataset.x[idx]
                y = dataset.y[idx]
                loss, grad, mass = _batch_gradients(params, x[..., None] if d == 1 else x, y, workers)
            else:
                loss, grad = kernel_loss(params)
                mass = float("nan")
        except NumericError as exc:
            return TrainResult(params, initial, records, "diverged", step, str(exc))
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            return TrainResult(params, initial, records, "diverged", step, "non-finite loss or gradient")
        if not config.train_bias:
            grad[b_slice] = 0.0

        theta = params.flat()
        g_w = grad[w_slice]
        gmax, gmin, excluded = _ratio_range(g_w, params.w)
        amax, amin, _ = _ratio_range(grad, theta)
        c_max = float(np.max(np.abs(params.c)))
        rec = TelemetryRecord(
            step=step, loss=loss, gow_max=gmax, gow_min=gmin,
            max_eig=ssm.max_eigenvalue(params), weight_norm=ssm.weight_norm(params),
            gow_all_max=amax, gow_all_min=amin, excluded=excluded, c_max=c_max, mass=mass,
            bound_ratio=gradient_bound_ratio(params, g_w, c_max * mass) if math.isfinite(mass) else float("nan"),
        )
        records.append(rec)
        if config.keep_best and loss < best[0]:
            best = (loss, params, step)
        if callback is not None:
            callback(step, params, grad, rec)
        new_theta = opt.step(theta, grad)
        if not np.all(np.isfinite(new_theta)):
            return TrainResult(params, initial, records, "diverged", step, "non-finite parameters after update")
        try:
            params = params.with_flat(new_theta)
        except DomainError as exc:
            return TrainResult(params, initial, records, "diverged", step, str(exc))
        if step % 100 == 0:
            log.debug("step %d loss %.6g max_eig %.6g", step, loss, rec.max_eig)
    if config.keep_best and best[1] is not None:
        return TrainResult(best[1], initial, records, final_params=params, best_step=best[2])
    return TrainResult(params, initial, records, final_params=params)


def evaluate_loss(params: ssm.SSMParams, dataset: Dataset) -> float:
    yh, _ = ssm.forward(params, dataset.x)
    return float(np.mean((yh - dataset.y) ** 2))
