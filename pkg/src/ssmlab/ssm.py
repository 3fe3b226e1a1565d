"""Single-layer diagonal state-space model with reparameterized recurrent weights.

Dynamics per channel i (state read out *before* the input of the step):

    y_k     = c . sigma(h_k)
    h_{k+1} = A_i h_k + B_i (U x_k + b)_i,        h_0 = 0

Discrete mode:   A = lambda,             B = 1.
Continuous mode: A = exp(lambda dt),     B = (exp(lambda dt) - 1) / lambda,
which integrates dh/dt = lambda h + U x + b exactly over a step when the
input is held constant across it.  Here lambda = f(w) for the scheme f.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from ssmlab import reparam
from ssmlab.errors import ConfigurationError, DomainError, NumericError
from ssmlab.kernel import ModelKernel
from ssmlab.reparam import Scheme, TimeMode


@dataclass(frozen=True)
class Activation:
    name: str
    fn: object
    deriv: object
    lipschitz: float


def _softsign(z):
    return z / (1.0 + np.abs(z))


def _softsign_deriv(z):
    return 1.0 / (1.0 + np.abs(z)) ** 2


def _tanh_deriv(z):
    t = np.tanh(z)
    return 1.0 - t * t


def _centered_sigmoid(z):
    # shifted so that sigma(0) = 0
    return expit(z) - 0.5


def _sigmoid_deriv(z):
    s = expit(z)
    return s * (1.0 - s)


ACTIVATIONS = {
    "tanh": Activation("tanh", np.tanh, _tanh_deriv, 1.0),
    "identity": Activation("identity", lambda z: z, np.ones_like, 1.0),
    "sigmoid": Activation("sigmoid", _centered_sigmoid, _sigmoid_deriv, 0.25),
    "softsign": Activation("softsign", _softsign, _softsign_deriv, 1.0),
}


def get_activation(name: str) -> Activation:
    try:
        return ACTIVATIONS[name.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


@dataclass
class SSMParams:
    w: np.ndarray
    U: np.ndarray
    b: np.ndarray
    c: np.ndarray
    scheme: Scheme
    activation: str = "tanh"
    dt: float = 1.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.w = np.array(self.w, dtype=np.float64).reshape(-1)
        m = self.w.size
        self.U = np.array(self.U, dtype=np.float64)
        if self.U.ndim == 1:
            self.U = self.U.reshape(m, -1)
        self.b = np.array(self.b, dtype=np.float64).reshape(-1)
        self.c = np.array(self.c, dtype=np.float64).reshape(-1)
        if isinstance(self.scheme, str):
            self.scheme = reparam.parse_scheme(self.scheme)
        self.activation = get_activation(self.activation).name
        self.dt = float(self.dt)
        if self.U.ndim != 2 or self.U.shape[0] != m or self.b.size != m or self.c.size != m:
            raise ConfigurationError(
                f"inconsistent shapes: w {self.w.shape}, U {self.U.shape}, b {self.b.shape}, c {self.c.shape}")
        for name in ("w", "U", "b", "c"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"parameter {name} has non-finite entries")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")

    @property
    def m(self) -> int:
        return self.w.size

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def time_mode(self) -> TimeMode:
        return self.scheme.time_mode

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.asarray(reparam.apply(self.scheme, self.w))

    @property
    def act(self) -> Activation:
        return ACTIVATIONS[self.activation]

    def is_stable(self) -> bool:
        lam = self.eigenvalues
        if self.scheme.continuous:
            return bool(np.all(lam < 0))
        return bool(np.all(np.abs(lam) <= 1))

    def replace(self, **changes) -> "SSMParams":
        fields = dict(w=self.w, U=self.U, b=self.b, c=self.c, scheme=self.scheme,
                      activation=self.activation, dt=self.dt, meta=dict(self.meta))
        fields.update(changes)
        return SSMParams(**fields)

    def copy(self) -> "SSMParams":
        return self.replace()

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w, self.U.ravel(), self.b, self.c])

    def with_flat(self, theta) -> "SSMParams":
        theta = np.asarray(theta, dtype=np.float64)
        m, d = self.m, self.d
        i = 0
        w = theta[i:i + m]; i += m
        U = theta[i:i + m * d].reshape(m, d); i += m * d
        b = theta[i:i + m]; i += m
        c = theta[i:i + m]
        return self.replace(w=w, U=U, b=b, c=c)

    def to_dict(self) -> dict:
        return {
            "scheme": str(self.scheme),
            "time_mode": self.scheme.time_mode.value,
            "dt": self.dt,
            "activation": self.activation,
            "m": self.m,
            "d": self.d,
            "w": self.w.tolist(),
            "U": self.U.tolist(),
            "b": self.b.tolist(),
            "c": self.c.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SSMParams":
        required = {"scheme", "time_mode", "dt", "w", "U", "b", "c"}
        missing = required - set(data)
        if missing:
            raise ConfigurationError(f"checkpoint is missing keys {sorted(missing)}")
        scheme = reparam.parse_scheme(data["scheme"])
        if scheme.time_mode.value != data["time_mode"]:
            raise ConfigurationError("checkpoint time_mode disagrees with its scheme string")
        p = cls(w=data["w"], U=data["U"], b=data["b"], c=data["c"], scheme=scheme,
                activation=data.get("activation", "tanh"), dt=data["dt"])
        if ("m" in data and data["m"] != p.m) or ("d" in data and data["d"] != p.d):
            raise ConfigurationError("checkpoint dimensions do not match its arrays")
        return p

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "SSMParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _phi(z):
    """(exp(z) - 1)/z and its derivative, with series near 0."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < 1e-2
    zs = np.where(small, z, 0.0)
    zl = np.where(small, 1.0, z)
    phi_s = 1 + zs / 2 + zs**2 / 6 + zs**3 / 24 + zs**4 / 120 + zs**5 / 720
    dphi_s = 0.5 + zs / 3 + zs**2 / 8 + zs**3 / 30 + zs**4 / 144 + zs**5 / 840
    with np.errstate(over="ignore", invalid="ignore"):
        ez = np.exp(zl)
        phi_l = np.expm1(zl) / zl
        dphi_l = (zl * ez - np.expm1(zl)) / (zl * zl)
    return np.where(small, phi_s, phi_l), np.where(small, dphi_s, dphi_l)


def transition(params: SSMParams):
    """Per-channel (A, B, dA/dlambda, dB/dlambda)."""
    lam = params.eigenvalues
    if not params.scheme.continuous:
        one = np.ones_like(lam)
        return lam, one, one, np.zeros_like(lam)
    dt = params.dt
    with np.errstate(over="ignore"):
        A = np.exp(lam * dt)
    phi, dphi = _phi(lam * dt)
    return A, dt * phi, dt * A, dt * dt * dphi


def _as_batch(x, d):
    x = np.asarray(x, dtype=np.float64)
    single = False
    if x.ndim == 1:
        if d != 1:
            raise ConfigurationError(f"1-D input needs d = 1, model has d = {d}")
        x = x[None, :, None]
        single = True
    elif x.ndim == 2:
        if x.shape[1] == d:
            x = x[None]
            single = True
        elif d == 1:
            x = x[..., None]
        else:
            raise ConfigurationError(f"input shape {x.shape} incompatible with d = {d}")
    if x.ndim != 3 or x.shape[2] != d:
        raise ConfigurationError(f"input must have shape (batch, K, {d}), got {x.shape}")
    return x, single


def _drive(params, x):
    # U x_k + b for every step: (B, K, m)
    return np.einsum("bkd,md->bkm", x, params.U) + params.b


def _readout(params, H):
    return np.sum(params.act.fn(H) * params.c, axis=-1)


def _check_finite(H, what):
    bad = ~np.isfinite(H)
    if np.any(bad):
        step = int(np.argmax(np.any(bad.reshape(bad.shape[0], bad.shape[1], -1), axis=(0, 2))))
        raise NumericError(f"non-finite hidden state in {what} at step {step}", step=step)


def forward(params: SSMParams, x):
    """Sequential evaluation.

    ``x``: (K,) / (K, d) / (B, K, d).  Returns ``(y, h)`` where ``y`` has the
    batch/time shape of ``x`` and ``h[..., k, :]`` is the state read at step k.
    """
    x, single = _as_batch(x, params.d)
    A, B, _, _ = transition(params)
    V = _drive(params, x)
    H = np.empty_like(V)
    h = np.zeros((x.shape[0], params.m))
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(x.shape[1]):
            H[:, k] = h
            h = A * h + B * V[:, k]
    _check_finite(H, "forward")
    y = _readout(params, H)
    return (y[0], H[0]) if single else (y, H)


def _blelloch_exclusive(a, u):
    """Exclusive scan along axis 1 with (a1,u1) o (a2,u2) = (a1 a2, a2 u1 + u2).

    ``a`` and ``u`` have a power-of-two length on axis 1 and are modified in place.
    """
    n = a.shape[1]
    levels = n.bit_length() - 1
    for d in range(levels):
        half, stride = 1 << d, 1 << (d + 1)
        li, ri = slice(half - 1, None, stride), slice(stride - 1, None, stride)
        u[:, ri] = a[:, ri] * u[:, li] + u[:, ri]
        a[:, ri] = a[:, li] * a[:, ri]
    a[:, -1] = 1.0
    u[:, -1] = 0.0
    for d in reversed(range(levels)):
        half, stride = 1 << d, 1 << (d + 1)
        li, ri = slice(half - 1, None, stride), slice(stride - 1, None, stride)
        ta, tu = a[:, li].copy(), u[:, li].copy()
        a[:, li], u[:, li] = a[:, ri], u[:, ri]
        # parent prefix first, then the left subtree
        u[:, ri] = ta * u[:, ri] + tu
        a[:, ri] = a[:, ri] * ta
    return a, u


def _scan_states(A, Bv):
    batch, K, m = Bv.shape
    n = 1 << max(0, (K - 1).bit_length())
    a = np.ones((batch, n, m))
    u = np.zeros((batch, n, m))
    a[:, :K] = A
    u[:, :K] = Bv
    with np.errstate(over="ignore", invalid="ignore"):
        _blelloch_exclusive(a, u)
    return u[:, :K]


def forward_scan(params: SSMParams, x, workers: int = 1):
    """Same result as :func:`forward`, computed with a work-efficient prefix scan.

    Channels are split across ``workers`` threads; every channel follows the
    same schedule, so the output is bit-identical for any worker count.
    """
    x, single = _as_batch(x, params.d)
    A, B, _, _ = transition(params)
    Bv = B * _drive(params, x)
    m = params.m
    workers = max(1, min(int(workers), m))
    if workers == 1:
        H = _scan_states(A, Bv)
    else:
        bounds = np.linspace(0, m, workers + 1).astype(int)
        H = np.empty_like(Bv)

        def run(i):
            lo, hi = bounds[i], bounds[i + 1]
            H[..., lo:hi] = _scan_states(A[lo:hi], Bv[..., lo:hi])

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(workers)))
    _check_finite(H, "forward_scan")
    y = _readout(params, H)
    return (y[0], H[0]) if single else (y, H)


@dataclass
class Gradients:
    w: np.ndarray
    U: np.ndarray
    b: np.ndarray
    c: np.ndarray
    lam: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w, self.U.ravel(), self.b, self.c])


def backward(params: SSMParams, x, dy, H=None) -> Gradients:
    """Reverse-mode gradients of a scalar loss given ``dy = dLoss/dy``.

    Adjoint recursion: delta_k = dy_k c * sigma'(h_k) + A * delta_{k+1}
    with delta_K = 0; then dLoss/dlambda collects delta_{k+1} * h_k through A
    and delta_{k+1} * (U x_k + b) through B.
    """
    x, single = _as_batch(x, params.d)
    dy = np.asarray(dy, dtype=np.float64)
    if single:
        dy = dy[None]
    if dy.shape != x.shape[:2]:
        raise ConfigurationError(f"dLoss/dy has shape {dy.shape}, expected {x.shape[:2]}")
    if H is None:
        _, H = forward(params, x)
    elif single:
        H = np.asarray(H)[None]
    A, B, dA, dB = transition(params)
    V = _drive(params, x)
    act = params.act
    batch, K, m = H.shape
    # direct contribution of each state to the loss
    G = dy[..., None] * params.c * act.deriv(H)
    D = np.empty((batch, K, m))  # D[:, k] = delta_{k+1}
    nxt = np.zeros((batch, m))
    for k in range(K - 1, -1, -1):
        D[:, k] = nxt
        nxt = G[:, k] + A * nxt
    grad_A = np.einsum("bkm,bkm->m", D, H)
    grad_B = np.einsum("bkm,bkm->m", D, V)
    dV = B * D
    grad_U = np.einsum("bkm,bkd->md", dV, x)
    grad_b = dV.sum(axis=(0, 1))
    grad_c = np.einsum("bk,bkm->m", dy, act.fn(H))
    grad_lam = grad_A * dA + grad_B * dB
    grad_w = np.asarray(reparam.derivative(params.scheme, params.w)) * grad_lam
    return Gradients(w=grad_w, U=grad_U, b=grad_b, c=grad_c, lam=grad_lam)


def weight_norm(params: SSMParams) -> float:
    """max(|lambda|_2, |U|_2, |b|_2, |c|_2); Euclidean norm of the eigenvalue
    vector, spectral norm of U."""
    return float(max(np.linalg.norm(params.eigenvalues),
                     np.linalg.norm(params.U, 2) if params.U.size else 0.0,
                     np.linalg.norm(params.b),
                     np.linalg.norm(params.c)))


def max_eigenvalue(params: SSMParams) -> float:
    """max lambda_i (continuous) or max |lambda_i| (discrete)."""
    lam = params.eigenvalues
    return float(np.max(lam) if params.scheme.continuous else np.max(np.abs(lam)))


def model_kernel(params: SSMParams, channel: int = 0) -> ModelKernel:
    """Kernel of the linearized layer (identity readout, zero bias) for one input channel.

    Coefficients are c_i U_{i,channel}; rates are the eigenvalues.  With the
    state-before-input readout, forward() equals
    ``kernel.apply_linear_functional(model_kernel(p), x, p.dt)`` exactly.
    """
    return ModelKernel(params.c * params.U[:, channel], params.eigenvalues, params.time_mode)


HEAVISIDE_AMPLITUDES = np.array([s * 2.0**j for j in range(-3, 7) for s in (1.0, -1.0)])


def memory_function(params: SSMParams, t, amplitudes=None):
    """Estimate sup_x |d/dt y_t(u^x)| / (|x| + 1) over a Heaviside amplitude grid.

    Continuous mode differentiates the exact step response; discrete mode
    uses the forward difference y_{k+1} - y_k.  For nonlinear readouts the
    supremum over a finite amplitude grid is a lower estimate.
    """
    amps = HEAVISIDE_AMPLITUDES if amplitudes is None else np.asarray(amplitudes, dtype=np.float64)
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t_arr < 0):
        raise DomainError("memory function is defined for t >= 0")
    lam = params.eigenvalues
    act = params.act
    drive = np.multiply.outer(amps, params.U.sum(axis=1)) + params.b  # (n_amp, m)
    if params.scheme.continuous:
        z = np.multiply.outer(t_arr, lam)  # (n_t, m)
        phi, _ = _phi(z)
        h = (t_arr[:, None] * phi)[None] * drive[:, None, :]
        dh = np.exp(z)[None] * drive[:, None, :]
        dydt = np.sum(params.c * act.deriv(h) * dh, axis=-1)  # (n_amp, n_t)
    else:
        k = np.rint(t_arr).astype(int)
        if np.any(np.abs(k - t_arr) > 1e-9):
            raise DomainError("discrete memory function is defined on integer steps")
        K = int(k.max()) + 2
        x = np.multiply.outer(amps, np.ones((K, params.d)))
        y, _ = forward(params, x)
        dydt = (y[:, 1:] - y[:, :-1])[:, k]
    vals = np.abs(dydt) / (np.abs(amps)[:, None] + 1.0)
    out = vals.max(axis=0)
    return float(out[0]) if np.ndim(t) == 0 else out


def init_params(m, d, scheme, lam0, rng, activation="tanh", dt=1.0, train_bias=True) -> SSMParams:
    """Parameters with prescribed eigenvalues ``lam0`` and Gaussian U, c.

    c is scaled by 1/m so the initial kernel mass sum |c_i U_i| / |lambda_i|
    does not grow with the width.  Draws are made in a fixed order
    independent of the scheme, so two schemes given the same ``lam0`` and
    seed produce the same model.
    """
    U = rng.standard_normal((m, d)) / math.sqrt(d)
    c = rng.standard_normal(m) / math.sqrt(m)
    w = reparam.invert(scheme, np.asarray(lam0, dtype=np.float64))
    return SSMParams(w=w, U=U, b=np.zeros(m), c=c, scheme=scheme, activation=activation, dt=dt)
