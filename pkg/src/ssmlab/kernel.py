"""Memory kernels and the linear functionals they define.

A causal, time-homogeneous linear functional is a convolution against a
kernel rho on [0, inf):  y_t = int_0^t rho(t - s) x_s ds.  Targets are closed
form (polynomial or exponential decay, or tabulated); models are finite sums
of exponentials (continuous time) or geometric sequences (discrete time).
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate, signal

from ssmlab.errors import ConfigurationError, DomainError
from ssmlab.reparam import TimeMode

# above this length the convolution switches from the lag loop to FFT
DIRECT_CONV_MAX = 4096


class PolyDecay:
    """rho(t) = (t + 1)^(-gamma), gamma > 1."""

    time_mode = TimeMode.CONTINUOUS
    sign_definite = True
    exponential_tail = False

    def __init__(self, gamma: float):
        gamma = float(gamma)
        if not gamma > 1:
            raise DomainError(f"polynomial decay needs gamma > 1 to be integrable, got {gamma}")
        self.gamma = gamma

    def __call__(self, t):
        return np.power(np.asarray(t, dtype=np.float64) + 1.0, -self.gamma)

    def integral(self, a, b):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        p = 1.0 - self.gamma
        # (a+1)^p - (b+1)^p without cancellation for narrow cells
        return np.power(a + 1.0, p) * -np.expm1(p * np.log1p((b - a) / (a + 1.0))) / (self.gamma - 1.0)

    def tail(self, T):
        return (T + 1.0) ** (1.0 - self.gamma) / (self.gamma - 1.0)

    def tail_abs(self, T):
        return self.tail(T)

    def __eq__(self, other):
        return isinstance(other, PolyDecay) and other.gamma == self.gamma

    def __hash__(self):
        return hash(("poly", self.gamma))

    def __repr__(self):
        return f"PolyDecay({self.gamma!r})"


class ExpDecay:
    """rho(t) = exp(-rate t), rate > 0."""

    time_mode = TimeMode.CONTINUOUS
    sign_definite = True
    exponential_tail = True

    def __init__(self, rate: float):
        rate = float(rate)
        if not rate > 0:
            raise DomainError(f"exponential decay needs a positive rate, got {rate}")
        self.rate = rate

    def __call__(self, t):
        return np.exp(-self.rate * np.asarray(t, dtype=np.float64))

    def integral(self, a, b):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        return np.exp(-self.rate * a) * -np.expm1(-self.rate * (b - a)) / self.rate

    def tail(self, T):
        return math.exp(-self.rate * T) / self.rate

    def tail_abs(self, T):
        return self.tail(T)

    def decay_horizon(self, tol):
        return max(0.0, math.log(1.0 / (self.rate * tol)) / self.rate)

    def __eq__(self, other):
        return isinstance(other, ExpDecay) and other.rate == self.rate

    def __hash__(self):
        return hash(("exp", self.rate))

    def __repr__(self):
        return f"ExpDecay({self.rate!r})"


class Tabulated:
    """Piecewise-linear kernel through samples, zero beyond the last sample."""

    time_mode = TimeMode.CONTINUOUS
    sign_definite = True  # zero tail
    exponential_tail = False

    def __init__(self, times, values):
        t = np.asarray(times, dtype=np.float64)
        v = np.asarray(values, dtype=np.float64)
        if t.ndim != 1 or t.shape != v.shape or t.size < 2:
            raise DomainError("tabulated kernel needs two equal-length 1-D arrays with at least 2 samples")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise DomainError("tabulated grid must start at 0 and be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise DomainError("tabulated kernel values must be finite")
        self.times, self.values = t, v
        self._cum = np.concatenate([[0.0], np.cumsum(np.diff(t) * (v[1:] + v[:-1]) / 2.0)])

    @property
    def horizon(self):
        return float(self.times[-1])

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t > self.horizon):
            raise DomainError(f"tabulated kernel evaluated beyond its horizon {self.horizon}")
        return np.interp(t, self.times, self.values)

    def _antiderivative(self, t):
        t = np.clip(np.asarray(t, dtype=np.float64), 0.0, self.horizon)
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2)
        t0, v0 = self.times[i], self.values[i]
        slope = (self.values[i + 1] - v0) / (self.times[i + 1] - t0)
        dt = t - t0
        return self._cum[i] + dt * (v0 + 0.5 * slope * dt)

    def integral(self, a, b):
        return self._antiderivative(b) - self._antiderivative(a)

    def tail(self, T):
        return float(self.integral(T, self.horizon)) if T < self.horizon else 0.0

    def tail_abs(self, T):
        if T >= self.horizon:
            return 0.0
        grid = np.concatenate([[T], self.times[self.times > T]])
        v = np.abs(np.interp(grid, self.times, self.values))
        return float(np.sum(np.diff(grid) * np.maximum(v[1:], v[:-1])))

    def __repr__(self):
        return f"Tabulated(n={self.times.size}, horizon={self.horizon})"


@dataclass(frozen=True, eq=False)
class ModelKernel:
    """Sum of decaying modes.

    Continuous: rho(t) = sum_i c_i exp(lambda_i t), lambda_i < 0.
    Discrete:   rho(k) = sum_i c_i lambda_i^k on integer steps, |lambda_i| < 1.
    """

    coefficients: np.ndarray
    rates: np.ndarray
    time_mode: TimeMode = TimeMode.CONTINUOUS

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.coefficients, dtype=np.float64)).copy()
        lam = np.atleast_1d(np.asarray(self.rates, dtype=np.float64)).copy()
        if c.shape != lam.shape or c.ndim != 1:
            raise DomainError("model kernel coefficients and rates must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(lam))):
            raise DomainError("model kernel entries must be finite")
        c.flags.writeable = False
        lam.flags.writeable = False
        object.__setattr__(self, "coefficients", c)
        object.__setattr__(self, "rates", lam)
        object.__setattr__(self, "time_mode", TimeMode(self.time_mode))

    exponential_tail = True

    @property
    def continuous(self):
        return self.time_mode is TimeMode.CONTINUOUS

    @property
    def _active(self):
        return self.coefficients != 0

    @property
    def integrable(self) -> bool:
        lam = self.rates[self._active]
        return bool(np.all(lam < 0)) if self.continuous else bool(np.all(np.abs(lam) < 1))

    @property
    def sign_definite(self) -> bool:
        c = self.coefficients[self._active]
        if not self.continuous and np.any(self.rates[self._active] < 0):
            return c.size == 0
        return bool(np.all(c >= 0) or np.all(c <= 0))

    def _require_integrable(self):
        if not self.integrable:
            raise DomainError("model kernel has a mode on or beyond the stability boundary (non-integrable)")

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.continuous:
            return np.exp(np.multiply.outer(t, self.rates)) @ self.coefficients
        k = np.rint(t)
        if np.any(np.abs(t - k) > 1e-9):
            raise DomainError("discrete model kernel is only defined on integer steps")
        return np.power(self.rates, k[..., None]) @ self.coefficients

    def integral(self, a, b):
        if not self.continuous:
            raise ConfigurationError("integral of a discrete kernel is not defined; use step sums")
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        lam = self.rates
        z = np.multiply.outer(b - a, lam)
        with np.errstate(divide="ignore", invalid="ignore"):
            phi = np.where(lam == 0, np.multiply.outer(b - a, np.ones_like(lam)), np.expm1(z) / lam)
        return (np.exp(np.multiply.outer(a, lam)) * phi) @ self.coefficients

    def l1_exact(self) -> float:
        """sum_i |c_i| / |lambda_i| (continuous) or sum_i |c_i| / (1 - |lambda_i|) (discrete).

        Equal to the L1 norm when :attr:`sign_definite`, an upper bound otherwise.
        """
        self._require_integrable()
        act = self._active
        if self.continuous:
            return float(np.sum(np.abs(self.coefficients[act]) / np.abs(self.rates[act])))
        return float(np.sum(np.abs(self.coefficients[act]) / (1.0 - np.abs(self.rates[act]))))

    def tail(self, T):
        self._require_integrable()
        act = self._active
        c, lam = self.coefficients[act], self.rates[act]
        if self.continuous:
            return float(np.sum(c * np.exp(lam * T) / -lam))
        n = int(round(T))
        return float(np.sum(c * lam**n / (1.0 - lam)))

    def tail_abs(self, T):
        self._require_integrable()
        act = self._active
        c, lam = np.abs(self.coefficients[act]), self.rates[act]
        if self.continuous:
            return float(np.sum(c * np.exp(lam * T) / -lam))
        n = int(round(T))
        return float(np.sum(c * np.abs(lam) ** n / (1.0 - np.abs(lam))))

    def decay_horizon(self, tol):
        """Time (or step count) beyond which the absolute tail is below ``tol``."""
        self._require_integrable()
        act = self._active
        if not np.any(act):
            return 0.0
        c, lam = np.abs(self.coefficients[act]), self.rates[act]
        m = c.size
        if self.continuous:
            r = -lam
            return float(np.max(np.maximum(np.log(m * c / (r * tol)), 0.0) / r))
        r = 1.0 - np.abs(lam)
        with np.errstate(divide="ignore"):
            steps = np.maximum(np.log(m * c / (r * tol)), 0.0) / -np.log(np.abs(lam))
        steps = np.where(np.abs(lam) == 0, 1.0, steps)
        return float(np.ceil(np.max(steps)))


class _Zero:
    time_mode = TimeMode.CONTINUOUS
    sign_definite = True
    exponential_tail = False

    def __call__(self, t):
        return np.zeros_like(np.asarray(t, dtype=np.float64))

    def integral(self, a, b):
        return np.zeros(np.broadcast(np.asarray(a), np.asarray(b)).shape)

    def tail(self, T):
        return 0.0

    def tail_abs(self, T):
        return 0.0


ZERO = _Zero()


@dataclass(frozen=True)
class QuadratureConfig:
    step: float = 0.01
    horizon: float = 100.0
    tail_tolerance: float = 1e-5
    # far-field Simpson nodes per decade of t
    far_nodes_per_decade: int = 256

    def __post_init__(self):
        if not (self.step > 0 and self.horizon > 0 and self.tail_tolerance > 0):
            raise ConfigurationError("quadrature step, horizon and tail tolerance must be positive")
        n = self.horizon / self.step
        if abs(n - round(n)) > 1e-9 * n:
            raise ConfigurationError(f"horizon/step must be an integer, got {n}")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.step))


def eval_kernel(k, t):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise DomainError("kernels are defined for t >= 0")
    out = k(t_arr)
    return float(out) if np.ndim(out) == 0 else out


def _is_discrete(k):
    return getattr(k, "time_mode", TimeMode.CONTINUOUS) is TimeMode.DISCRETE


def _step_values(k, n0, n1):
    """Per-step values on integer steps [n0, n1): discrete kernels as is,
    continuous kernels as cell integrals over [n, n+1)."""
    steps = np.arange(n0, n1, dtype=np.float64)
    if _is_discrete(k):
        return k(steps)
    return k.integral(steps, steps + 1.0)


def _pair_tail(k1, k2, T):
    """Estimate of int_T^inf |k1 - k2| valid when the difference keeps its sign."""
    return abs(k1.tail(T) - k2.tail(T))


def _sign_definite_difference(k1, k2):
    if k1 is k2 or (type(k1) is type(k2) and k1 == k2 and not isinstance(k1, ModelKernel)):
        return True
    if isinstance(k1, PolyDecay) and isinstance(k2, PolyDecay):
        return True  # (t+1)^-g1 - (t+1)^-g2 keeps its sign for t > 0
    if k1 is ZERO or isinstance(k1, Tabulated):
        return k2.sign_definite
    if k2 is ZERO or isinstance(k2, Tabulated):
        return k1.sign_definite
    return False


def _check_integrable(k):
    if isinstance(k, ModelKernel):
        k._require_integrable()


def _far_horizon(k1, k2, T, tol):
    far = T
    for k in (k1, k2):
        if getattr(k, "exponential_tail", False):
            far = max(far, k.decay_horizon(tol / 4.0))
    return far


def _far_field(k1, k2, T, T_far, per_decade):
    # Simpson in s = log(1 + t); the integrand varies on scale t out here
    s0, s1 = math.log1p(T), math.log1p(T_far)
    n = max(64, int(per_decade * (s1 - s0) / math.log(10.0)))
    n += n % 2
    s = np.linspace(s0, s1, n + 1)
    t = np.expm1(s)
    f = np.abs(k1(t) - k2(t)) * (t + 1.0)
    return float(integrate.simpson(f, x=s))


def kernel_l1_distance(k1, k2, quad: QuadratureConfig | None = None, horizon_only: bool = False) -> float:
    """L1 distance int_0^inf |k1 - k2| dt.

    Continuous kernels: composite trapezoid on [0, T], then a far field that
    runs until every exponential tail is below a quarter of the tail
    tolerance, then the signed tail difference.  If either kernel is
    discrete both are compared step-wise (continuous kernels through their
    unit-cell integrals).  ``horizon_only`` restricts the distance to [0, T].
    """
    quad = quad or QuadratureConfig()
    _check_integrable(k1)
    _check_integrable(k2)
    if k1 is k2:
        return 0.0
    tol = quad.tail_tolerance
    if _is_discrete(k1) or _is_discrete(k2):
        return _discrete_distance(k1, k2, quad, horizon_only)

    T = quad.horizon
    t = np.linspace(0.0, T, quad.n_steps + 1)
    if isinstance(k1, Tabulated) or isinstance(k2, Tabulated):
        hz = max(getattr(k, "horizon", 0.0) for k in (k1, k2))
        if hz > T and not horizon_only:
            T = hz
            t = np.linspace(0.0, T, int(math.ceil(T / quad.step)) + 1)
    f = np.abs(_eval_safe(k1, t) - _eval_safe(k2, t))
    total = float(integrate.trapezoid(f, x=t))
    if horizon_only:
        return total
    if _sign_definite_difference(k1, k2):
        return total + _pair_tail(k1, k2, T)
    T_far = _far_horizon(k1, k2, T, tol)
    if T_far > T:
        total += _far_field(k1, k2, T, T_far, quad.far_nodes_per_decade)
    return total + _pair_tail(k1, k2, T_far)


def _eval_safe(k, t):
    if isinstance(k, Tabulated):
        return np.interp(t, k.times, k.values, right=0.0)
    return k(t)


MAX_DISCRETE_STEPS = 50_000_000


def _discrete_distance(k1, k2, quad, horizon_only):
    for k in (k1, k2):
        if isinstance(k, Tabulated):
            raise ConfigurationError("tabulated kernels cannot be compared step-wise")
    N = int(round(quad.horizon))
    total = float(np.sum(np.abs(_step_values(k1, 0, N) - _step_values(k2, 0, N))))
    if horizon_only:
        return total
    if _sign_definite_difference(k1, k2):
        return total + abs(_step_tail(k1, N) - _step_tail(k2, N))
    far = N
    for k in (k1, k2):
        if getattr(k, "exponential_tail", False):
            far = max(far, int(k.decay_horizon(quad.tail_tolerance / 4.0)))
    if far > MAX_DISCRETE_STEPS:
        raise DomainError(f"discrete kernel decays too slowly for step-wise L1 evaluation ({far} steps)")
    chunk = 1_000_000
    for a in range(N, far, chunk):
        b = min(far, a + chunk)
        total += float(np.sum(np.abs(_step_values(k1, a, b) - _step_values(k2, a, b))))
    return total + abs(_step_tail(k1, far) - _step_tail(k2, far))


def _step_tail(k, n):
    if _is_discrete(k):
        return k.tail(n)
    return k.tail(float(n))


def kernel_l1_norm(k, quad: QuadratureConfig | None = None, exact: bool = True) -> float:
    """L1 norm on [0, inf).  Sign-definite model kernels use sum |c_i|/|lambda_i|
    unless ``exact`` is false; everything else goes through the quadrature."""
    if exact and isinstance(k, ModelKernel) and k.sign_definite:
        return k.l1_exact()
    return kernel_l1_distance(k, ZERO, quad)


def cell_weights(k, n: int, dt: float = 1.0, rule: str = "zoh") -> np.ndarray:
    """Convolution weights w_0..w_{n-1} so that y_t = sum_j w_{t-j} x_j.

    ``zoh``: w_0 = 0 and w_j = int_{(j-1)dt}^{j dt} rho, the exact response to
    an input held constant over each step.  ``left``: w_j = rho(j dt) dt.
    """
    if rule not in ("zoh", "left"):
        raise ConfigurationError(f"unknown discretization rule {rule!r}")
    if _is_discrete(k):
        if dt != 1.0:
            raise ConfigurationError("discrete kernels require dt = 1")
        j = np.arange(n, dtype=np.float64)
        if rule == "left":
            return np.asarray(k(j), dtype=np.float64)
        w = np.zeros(n)
        if n > 1:
            w[1:] = k(j[:-1])
        return w
    j = np.arange(n, dtype=np.float64)
    if rule == "left":
        return np.asarray(_eval_safe(k, j * dt), dtype=np.float64) * dt
    w = np.zeros(n)
    if n > 1:
        if isinstance(k, Tabulated):
            w[1:] = k._antiderivative(j[1:] * dt) - k._antiderivative(j[:-1] * dt)
        else:
            w[1:] = k.integral(j[:-1] * dt, j[1:] * dt)
    return w


def convolve_causal(weights, x):
    """y[..., t] = sum_{j<=t} weights[t-j] x[..., j] along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    K = x.shape[-1]
    w = np.asarray(weights, dtype=np.float64)[:K]
    if K <= DIRECT_CONV_MAX:
        # lag loop: fixed summation order per output, shift-exact
        y = w[0] * x
        for n in range(1, K):
            if w[n] != 0.0:
                y[..., n:] += w[n] * x[..., : K - n]
        return y
    w = w.reshape((1,) * (x.ndim - 1) + (K,))
    return signal.fftconvolve(x, w, axes=-1)[..., :K]


def apply_linear_functional(k, x, dt: float = 1.0, rule: str = "zoh"):
    """Output of the functional with kernel ``k`` on sampled input ``x``.

    ``x`` has time on the last axis and is taken to be zero before its first
    sample.  The output has the same shape.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        raise DomainError("input must have a time axis")
    if not np.all(np.isfinite(x)):
        raise DomainError("input must be finite")
    if not dt > 0:
        raise DomainError("dt must be positive")
    return convolve_causal(cell_weights(k, x.shape[-1], dt, rule), x)


def memory_function(k, t, amplitudes=None):
    """Memory function: sup over Heaviside amplitudes x of |d/dt H_t(u^x)| / (|x| + 1).

    For a linear functional the derivative is x rho(t) and the supremum is
    |rho(t)|.  SSM parameter sets are delegated to :func:`ssmlab.ssm.memory_function`.
    """
    from ssmlab import ssm

    if isinstance(k, ssm.SSMParams):
        return ssm.memory_function(k, t, amplitudes)
    return np.abs(eval_kernel(k, t))


_KERNEL_RE = re.compile(r"^\s*(poly|exp|csv)\s*:\s*(.+?)\s*$")


def parse_kernel(text: str):
    """``poly:<gamma>``, ``exp:<rate>`` or ``csv:<path>``."""
    m = _KERNEL_RE.match(text or "")
    if m is None:
        raise ConfigurationError(f"malformed kernel {text!r}; expected poly:<gamma>, exp:<rate> or csv:<path>")
    kind, arg = m.groups()
    if kind == "csv":
        return read_kernel_csv(arg)
    try:
        value = float(arg)
    except ValueError:
        raise ConfigurationError(f"kernel parameter is not a number: {arg!r}") from None
    try:
        return PolyDecay(value) if kind == "poly" else ExpDecay(value)
    except DomainError as exc:
        raise ConfigurationError(str(exc)) from None


def format_kernel(k) -> str:
    if isinstance(k, PolyDecay):
        return f"poly:{k.gamma!r}"
    if isinstance(k, ExpDecay):
        return f"exp:{k.rate!r}"
    raise ConfigurationError(f"{k!r} has no string form")


def write_kernel_csv(path, k, times=None):
    if times is None:
        if not isinstance(k, Tabulated):
            raise ConfigurationError("sample times are required for non-tabulated kernels")
        times, values = k.times, k.values
    else:
        times = np.asarray(times, dtype=np.float64)
        values = np.asarray(eval_kernel(k, times))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "rho"])
        for t, v in zip(times, values):
            w.writerow([repr(float(t)), repr(float(v))])


def read_kernel_csv(path) -> Tabulated:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["t", "rho"]:
        raise ConfigurationError(f"{path}: expected header 't,rho'")
    try:
        data = np.array([[float(a), float(b)] for a, b in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return Tabulated(data[:, 0], data[:, 1])
