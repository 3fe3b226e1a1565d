"""Recurrent-weight reparameterizations lambda = f(w).

Every function here is vectorized over ``w`` and pure.  Continuous-time
schemes map onto the open left half-line (decaying modes ``exp(lambda t)``);
discrete-time schemes map into ``[-1, 1)`` (decaying modes ``lambda**k``).

The gradient scale of a scheme is ``|f'(w)| / f(w)**2`` in continuous time
and ``|f'(w)| / (1 - f(w))**2`` in discrete time.  The denominators are
evaluated through :func:`stability_margin`, which computes ``|f|`` or
``1 - f`` without cancellation.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import expit

from ssmlab.errors import ConfigurationError, DomainError


class Family(str, enum.Enum):
    DIRECT = "direct"
    RELU = "relu"
    EXP = "exp"
    SOFTPLUS = "softplus"
    TANH = "tanh"
    BEST = "best"


class TimeMode(str, enum.Enum):
    CONTINUOUS = "cont"
    DISCRETE = "disc"


# Families with a published gradient-scale closed form, per time mode.
TABULATED_FAMILIES = {
    TimeMode.CONTINUOUS: (Family.RELU, Family.EXP, Family.SOFTPLUS, Family.BEST),
    TimeMode.DISCRETE: (Family.RELU, Family.EXP, Family.SOFTPLUS, Family.TANH, Family.BEST),
}

_DEFAULT_BEST = {TimeMode.CONTINUOUS: (1.0, 1.0), TimeMode.DISCRETE: (1.0, 0.5)}


@dataclass(frozen=True)
class Scheme:
    """A reparameterization family together with its time mode.

    ``a`` and ``b`` are only meaningful for ``Family.BEST``, where
    ``f(w) = -1/(a w^2 + b)`` (continuous) or ``1 - 1/(a w^2 + b)`` (discrete).
    """

    family: Family
    time_mode: TimeMode = TimeMode.CONTINUOUS
    a: float | None = None
    b: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "time_mode", TimeMode(self.time_mode))
        if self.family is Family.BEST:
            a_def, b_def = _DEFAULT_BEST[self.time_mode]
            a = a_def if self.a is None else float(self.a)
            b = b_def if self.b is None else float(self.b)
            object.__setattr__(self, "a", a)
            object.__setattr__(self, "b", b)
            if not (math.isfinite(a) and math.isfinite(b)) or a <= 0:
                raise ConfigurationError(f"best scheme needs finite a > 0, got a={a}, b={b}")
            if self.time_mode is TimeMode.CONTINUOUS and b <= 0:
                raise ConfigurationError(f"continuous best scheme needs b > 0, got b={b}")
            if self.time_mode is TimeMode.DISCRETE and b < 0.5:
                raise ConfigurationError(
                    f"discrete best scheme needs b >= 0.5 so that f stays in [-1, 1), got b={b}"
                )
        elif self.a is not None or self.b is not None:
            raise ConfigurationError(f"parameters a, b only apply to the best family, not {self.family.value}")
        if self.family is Family.TANH and self.time_mode is not TimeMode.DISCRETE:
            raise ConfigurationError("tanh reparameterization is only defined in discrete time")

    @property
    def continuous(self) -> bool:
        return self.time_mode is TimeMode.CONTINUOUS

    def __str__(self):
        return format_scheme(self)


_SCHEME_RE = re.compile(r"^\s*([a-zA-Z]+)\s*(?::\s*([^@]*))?@\s*(cont|disc)\s*$")


def parse_scheme(text: str) -> Scheme:
    """Parse ``family[:a=<float>,b=<float>]@{cont|disc}``.

    >>> parse_scheme("best:a=1,b=0.5@disc")
    Scheme(family=<Family.BEST: 'best'>, time_mode=<TimeMode.DISCRETE: 'disc'>, a=1.0, b=0.5)
    """
    m = _SCHEME_RE.match(text)
    if m is None:
        raise ConfigurationError(f"malformed scheme string {text!r}; expected family[:a=..,b=..]@cont|disc")
    name, params, mode = m.groups()
    try:
        family = Family(name.lower())
    except ValueError:
        raise ConfigurationError(f"unknown reparameterization family {name!r}") from None
    kwargs = {}
    if params is not None and params.strip():
        for item in params.split(","):
            key, sep, value = item.partition("=")
            key = key.strip()
            if not sep or key not in ("a", "b"):
                raise ConfigurationError(f"bad scheme parameter {item!r} in {text!r}")
            try:
                kwargs[key] = float(value)
            except ValueError:
                raise ConfigurationError(f"scheme parameter {key} is not a number: {value!r}") from None
    return Scheme(family, TimeMode(mode), **kwargs)


def format_scheme(scheme: Scheme) -> str:
    head = scheme.family.value
    if scheme.family is Family.BEST:
        head += f":a={scheme.a:g},b={scheme.b:g}"
    return f"{head}@{scheme.time_mode.value}"


def _as_finite(w):
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        bad = w[~np.isfinite(w)].ravel()[0]
        raise DomainError(f"weight must be finite, got {bad}")
    return w


def _out(x, like):
    return float(x) if np.ndim(like) == 0 else x


def _softplus(w):
    return np.logaddexp(0.0, w)


def apply(scheme: Scheme, w):
    """Eigenvalue ``f(w)``."""
    w = _as_finite(w)
    fam, cont = scheme.family, scheme.continuous
    with np.errstate(over="ignore"):
        if fam is Family.DIRECT:
            lam = w.copy()
        elif fam is Family.RELU:
            r = np.maximum(w, 0.0)
            lam = -r if cont else np.exp(-r)
        elif fam is Family.EXP:
            lam = -np.exp(w) if cont else np.exp(-np.exp(w))
        elif fam is Family.SOFTPLUS:
            lam = -_softplus(w) if cont else expit(-w)
        elif fam is Family.TANH:
            lam = np.tanh(w)
        else:
            q = 1.0 / (scheme.a * w * w + scheme.b)
            lam = -q if cont else 1.0 - q
    return _out(lam, w)


def stability_margin(scheme: Scheme, w):
    """Distance of ``f(w)`` to the stability boundary.

    Returns ``-f(w)`` in continuous time and ``1 - f(w)`` in discrete time,
    evaluated in a cancellation-free form.
    """
    w = _as_finite(w)
    fam, cont = scheme.family, scheme.continuous
    with np.errstate(over="ignore"):
        if fam is Family.DIRECT:
            gap = -w if cont else 1.0 - w
        elif fam is Family.RELU:
            r = np.maximum(w, 0.0)
            gap = r if cont else -np.expm1(-r)
        elif fam is Family.EXP:
            gap = np.exp(w) if cont else -np.expm1(-np.exp(w))
        elif fam is Family.SOFTPLUS:
            gap = _softplus(w) if cont else expit(w)
        elif fam is Family.TANH:
            gap = 2.0 * expit(-2.0 * w)
        else:
            gap = 1.0 / (scheme.a * w * w + scheme.b)
    return _out(gap, w)


def derivative(scheme: Scheme, w):
    """Analytic ``f'(w)``; the ReLU kink at 0 takes the left derivative 0."""
    w = _as_finite(w)
    fam, cont = scheme.family, scheme.continuous
    with np.errstate(over="ignore"):
        if fam is Family.DIRECT:
            d = np.ones_like(w)
        elif fam is Family.RELU:
            pos = w > 0
            d = -pos.astype(np.float64) if cont else np.where(pos, -np.exp(-np.maximum(w, 0.0)), 0.0)
        elif fam is Family.EXP:
            d = -np.exp(w) if cont else -np.exp(w - np.exp(w))
        elif fam is Family.SOFTPLUS:
            d = -expit(w) if cont else -expit(w) * expit(-w)
        elif fam is Family.TANH:
            # sech^2 via logistic terms, no overflow for large |w|
            d = 4.0 * expit(2.0 * w) * expit(-2.0 * w)
        else:
            q = scheme.a * w * w + scheme.b
            d = 2.0 * scheme.a * w / (q * q)
    return _out(d, w)


def gradient_scale(scheme: Scheme, w):
    """Parameterization-dependent gradient bound factor.

    ``|f'(w)| / f(w)^2`` (continuous) or ``|f'(w)| / (1 - f(w))^2``
    (discrete).  Points with ``f'(w) = 0`` have scale 0 regardless of the
    denominator, which reproduces the indicator in the ReLU rows.
    """
    w_arr = _as_finite(w)
    num = np.abs(np.asarray(derivative(scheme, w_arr)))
    den = np.asarray(stability_margin(scheme, w_arr))
    singular = (den == 0.0) & (num != 0.0)
    if np.any(singular):
        bad = np.atleast_1d(w_arr)[np.atleast_1d(singular)][0]
        raise DomainError(f"gradient scale of {scheme} is singular at w={bad}: f(w) on the stability boundary")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        g = np.where(num == 0.0, 0.0, num / (den * den))
    return _out(g, w_arr)


def has_published_closed_form(scheme: Scheme) -> bool:
    return scheme.family in TABULATED_FAMILIES[scheme.time_mode]


def closed_form_gradient_scale(scheme: Scheme, w):
    """Simplified gradient-scale expressions, written out per family.

    These are independent of :func:`gradient_scale` and serve as its oracle.
    ``direct`` has no published entry; its hand-derived forms ``1/w^2`` and
    ``1/(1-w)^2`` are returned so that every family can be checked.
    """
    w = _as_finite(w)
    fam, cont = scheme.family, scheme.continuous
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        if fam is Family.DIRECT:
            g = 1.0 / w**2 if cont else 1.0 / (1.0 - w) ** 2
        elif fam is Family.RELU:
            if cont:
                g = np.where(w > 0, 1.0 / w**2, 0.0)
            else:
                g = np.where(w > 0, np.exp(-w) / (1.0 - np.exp(-w)) ** 2, 0.0)
        elif fam is Family.EXP:
            if cont:
                g = np.exp(-w)
            else:
                g = np.exp(w - np.exp(w)) / (1.0 - np.exp(-np.exp(w))) ** 2
        elif fam is Family.SOFTPLUS:
            if cont:
                g = np.exp(w) / ((1.0 + np.exp(w)) * np.log(1.0 + np.exp(w)) ** 2)
            else:
                g = np.exp(-w)
        elif fam is Family.TANH:
            g = np.exp(2.0 * w)
        else:
            g = 2.0 * scheme.a * np.abs(w)
    return _out(g, w)


def _require_continuous(scheme, what):
    if not scheme.continuous:
        raise ConfigurationError(f"{what} is defined for continuous-time schemes only, got {scheme}")


def _ball_candidates(scheme, w, beta):
    # sup over |w~ - w| <= beta of a function of f(w~) that is monotone in f:
    # endpoints, plus w~ = 0 for the even best family when 0 is inside the ball
    cands = [w - beta, w + beta]
    if scheme.family is Family.BEST:
        cands.append(np.where(np.abs(w) <= beta, 0.0, w))
    return np.stack(np.broadcast_arrays(*cands))


def stability_gap(scheme: Scheme, w, beta):
    """``|f(w)| * sup_{|w~-w|<=beta} int_0^inf |exp(f(w~)t) - exp(f(w)t)| dt``.

    The integrand never changes sign, so the integral equals
    ``|1/|f(w~)| - 1/|f(w)||`` and the quantity reduces to
    ``sup | |f(w)|/|f(w~)| - 1 |``.  Returns ``inf`` whenever ``f`` reaches
    the stability boundary inside the ball (divergent integral).
    """
    _require_continuous(scheme, "stability gap")
    if np.any(np.asarray(beta) < 0):
        raise DomainError("beta must be nonnegative")
    w = _as_finite(w)
    beta = np.asarray(beta, dtype=np.float64)
    w_b, beta_b = np.broadcast_arrays(w, beta)
    cands = _ball_candidates(scheme, w_b, beta_b)
    base = np.asarray(stability_margin(scheme, w_b))
    margins = np.asarray(stability_margin(scheme, cands))
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.abs(base / margins - 1.0)
    unstable = (base <= 0) | np.any(margins <= 0, axis=0)
    gap = np.where(unstable, np.inf, np.max(vals, axis=0))
    gap = np.where(beta_b == 0, np.where(base > 0, 0.0, np.inf), gap)
    return _out(gap, w_b)


def stability_gap_profile(scheme: Scheme, w: float, beta: float, n: int = 101):
    """Closed-form gap integrand value at ``n`` evenly spaced points of the ball."""
    _require_continuous(scheme, "stability gap")
    grid = np.linspace(w - beta, w + beta, n)
    base = stability_margin(scheme, w)
    margins = np.asarray(stability_margin(scheme, grid))
    with np.errstate(divide="ignore"):
        vals = np.where(margins > 0, np.abs(base / margins - 1.0), np.inf)
    return grid, vals


def stability_gap_quadrature(scheme: Scheme, w: float, beta: float, n: int = 101) -> float:
    """Numerical oracle for :func:`stability_gap`.

    Scans ``n`` points of the ball and evaluates each integral by adaptive
    quadrature after the substitution ``u = exp(f(w) t)``, which maps
    ``[0, inf)`` onto ``(0, 1]``.
    """
    _require_continuous(scheme, "stability gap")
    lam = apply(scheme, w)
    if lam >= 0:
        return math.inf
    best = 0.0
    for wt in np.linspace(w - beta, w + beta, n):
        lt = apply(scheme, wt)
        if lt >= 0:
            return math.inf
        r = lt / lam
        # |f(w)| * int_0^inf |e^{f~ t} - e^{f t}| dt  ==  int_0^1 |u^(r-1) - 1| du
        val, _ = integrate.quad(lambda u: abs(u ** (r - 1.0) - 1.0), 0.0, 1.0, limit=200,
                                epsabs=1e-14, epsrel=1e-12)
        best = max(best, val)
    return best


def stability_bound_g(scheme: Scheme, w, beta):
    """Certified modulus ``g(beta)`` for the stable families.

    ``exp(beta) - 1`` for exp and softplus; ``a (beta^2 + 2 beta |w|) / b``
    for the continuous best family (which depends on ``w``).
    """
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta < 0):
        raise DomainError("beta must be nonnegative")
    if not scheme.continuous or scheme.family not in (Family.EXP, Family.SOFTPLUS, Family.BEST):
        raise ConfigurationError(f"no stability certificate for {scheme}")
    w = np.asarray(w, dtype=np.float64)
    if scheme.family is Family.BEST:
        g = scheme.a * (beta * beta + 2.0 * beta * np.abs(w)) / scheme.b
    else:
        g = np.broadcast_to(np.expm1(beta), np.broadcast(w, beta).shape).copy()
    return float(g) if g.ndim == 0 else g


def stability_bound_g_uniform(scheme: Scheme, weights, beta) -> float:
    """``g(beta)`` valid for every weight in a bounded set (value at max |w|)."""
    wmax = float(np.max(np.abs(np.asarray(weights, dtype=np.float64))))
    return float(stability_bound_g(scheme, wmax, beta))


def derive_best_scheme(l_over_c: float, b: float, time_mode=TimeMode.DISCRETE) -> Scheme:
    """Build the scheme whose gradient scale equals ``2 a |w|`` with ``a = l_over_c``.

    The construction is verified on a probe grid before returning.
    """
    scheme = Scheme(Family.BEST, TimeMode(time_mode), a=l_over_c, b=b)
    probe = np.linspace(-10.0, 10.0, 201)
    err = np.max(np.abs(gradient_scale(scheme, probe) - 2.0 * scheme.a * np.abs(probe)))
    if err > 1e-9 * max(1.0, 20.0 * scheme.a):
        raise ConfigurationError(f"derived scheme {scheme} fails the gradient-scale identity (err={err:.3g})")
    return scheme


def invert(scheme: Scheme, lam):
    """Pre-image ``w`` with ``f(w) = lam``; the nonnegative root for the even best family."""
    lam = np.asarray(lam, dtype=np.float64)
    if not np.all(np.isfinite(lam)):
        raise DomainError("eigenvalue must be finite")
    fam, cont = scheme.family, scheme.continuous

    def need(ok, rng):
        if not np.all(ok):
            bad = np.atleast_1d(lam)[~np.atleast_1d(ok)][0]
            raise DomainError(f"eigenvalue {bad} outside the range {rng} of {scheme}")

    with np.errstate(divide="ignore"):
        if fam is Family.DIRECT:
            w = lam.copy()
        elif fam is Family.RELU:
            if cont:
                need(lam <= 0, "(-inf, 0]")
                w = -lam
            else:
                need((lam > 0) & (lam <= 1), "(0, 1]")
                w = -np.log(lam)
        elif fam is Family.EXP:
            if cont:
                need(lam < 0, "(-inf, 0)")
                w = np.log(-lam)
            else:
                need((lam > 0) & (lam < 1), "(0, 1)")
                w = np.log(-np.log(lam))
        elif fam is Family.SOFTPLUS:
            if cont:
                need(lam < 0, "(-inf, 0)")
                w = np.log(np.expm1(-lam))
            else:
                need((lam > 0) & (lam < 1), "(0, 1)")
                w = np.log1p(-lam) - np.log(lam)
        elif fam is Family.TANH:
            need(np.abs(lam) < 1, "(-1, 1)")
            w = np.arctanh(lam)
        else:
            if cont:
                need((lam < 0) & (lam >= -1.0 / scheme.b), f"[{-1.0 / scheme.b:g}, 0)")
                q = -1.0 / lam
            else:
                need((lam < 1) & (lam >= 1.0 - 1.0 / scheme.b), f"[{1.0 - 1.0 / scheme.b:g}, 1)")
                q = 1.0 / (1.0 - lam)
            w = np.sqrt(np.maximum(q - scheme.b, 0.0) / scheme.a)
    return _out(w, lam)
