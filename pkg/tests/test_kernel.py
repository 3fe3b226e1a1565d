import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from scipy import integrate, optimize
from hypothesis import strategies as st

from ssmlab.errors import ConfigurationError, DomainError
from ssmlab.kernel import (
    ZERO,
    ExpDecay,
    ModelKernel,
    PolyDecay,
    QuadratureConfig,
    Tabulated,
    apply_linear_functional,
    cell_weights,
    convolve_causal,
    eval_kernel,
    format_kernel,
    kernel_l1_distance,
    kernel_l1_norm,
    memory_function,
    parse_kernel,
    read_kernel_csv,
    write_kernel_csv,
)
from ssmlab.reparam import TimeMode


def random_model(rng, m=3, mode=TimeMode.CONTINUOUS):
    c = rng.standard_normal(m)
    if mode is TimeMode.CONTINUOUS:
        lam = -rng.uniform(0.05, 3.0, m)
    else:
        lam = rng.uniform(-0.95, 0.95, m)
    return ModelKernel(c, lam, mode)


def brute_force_response(rho_cell, x):
    """Oracle: explicit double loop y_t = sum_{j<t} cell(t-j) x_j."""
    K = len(x)
    y = np.zeros(K)
    for t in range(K):
        for j in range(t):
            y[t] += rho_cell(t - j) * x[j]
    return y


# --- evaluation -------------------------------------------------------------

def test_eval_examples():
    assert eval_kernel(PolyDecay(1.1), 0.0) == 1.0
    assert eval_kernel(ModelKernel([1.0], [-1.0]), 0.0) == 1.0
    assert eval_kernel(PolyDecay(1.1), 9.0) == pytest.approx(float(mpmath.mpf(10) ** mpmath.mpf("-1.1")), rel=1e-14)
    assert eval_kernel(PolyDecay(1.1), 9.0) == pytest.approx(0.079433, abs=1e-6)


def test_eval_negative_time_rejected():
    with pytest.raises(DomainError):
        eval_kernel(PolyDecay(1.1), -0.5)
    with pytest.raises(DomainError):
        eval_kernel(ExpDecay(1.0), [0.0, -1.0])


def test_poly_requires_gamma_above_one():
    with pytest.raises(DomainError):
        PolyDecay(1.0)
    with pytest.raises(DomainError):
        ExpDecay(0.0)


def test_discrete_model_evaluates_powers():
    k = ModelKernel([1.0, 2.0], [0.5, -0.25], TimeMode.DISCRETE)
    steps = np.arange(5)
    np.testing.assert_allclose(k(steps), 0.5**steps + 2 * (-0.25) ** steps, rtol=1e-15)


def test_tabulated_interpolates_and_validates():
    k = Tabulated([0.0, 1.0, 3.0], [1.0, 0.0, 2.0])
    np.testing.assert_allclose(eval_kernel(k, [0.5, 2.0, 3.0]), [0.5, 1.0, 2.0])
    with pytest.raises(DomainError):
        Tabulated([0.1, 1.0], [1.0, 2.0])
    with pytest.raises(DomainError):
        Tabulated([0.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(DomainError):
        Tabulated([0.0, 1.0], [1.0, np.nan])


# --- L1 norm and distance ---------------------------------------------------

def test_poly_l1_norm_is_ten():
    q = QuadratureConfig()
    assert abs(kernel_l1_norm(PolyDecay(1.1), q) - 10.0) <= 2 * q.tail_tolerance


@pytest.mark.parametrize("gamma", [1.5, 2.0, 3.0])
def test_poly_l1_norm_other_exponents(gamma):
    q = QuadratureConfig()
    # trapezoid error h^2/12 |rho'(T) - rho'(0)| ~ h^2 gamma / 12, plus the tail budget
    budget = q.step**2 * gamma / 12 + 2 * q.tail_tolerance
    assert abs(kernel_l1_norm(PolyDecay(gamma), q) - 1 / (gamma - 1)) <= budget


def test_model_l1_norm_exact_and_quadrature():
    k = ModelKernel([2.0], [-4.0])
    assert kernel_l1_norm(k) == 0.5
    assert kernel_l1_norm(k, exact=False) == pytest.approx(0.5, abs=1e-4)


def test_mixed_sign_model_norm_against_oracle():
    # 3e^{-t} - 2e^{-2t} changes sign nowhere on t >= 0 but the weights differ in sign
    k = ModelKernel([3.0, -2.0], [-1.0, -2.0])
    oracle = float(mpmath.quad(lambda t: abs(3 * mpmath.e**-t - 2 * mpmath.e ** (-2 * t)), [0, mpmath.inf]))
    assert kernel_l1_norm(k) == pytest.approx(oracle, abs=2e-5)
    k = ModelKernel([1.0, -1.0], [-1.0, -3.0])
    oracle = float(mpmath.quad(lambda t: abs(mpmath.e**-t - mpmath.e ** (-3 * t)), [0, mpmath.inf]))
    assert kernel_l1_norm(k) == pytest.approx(oracle, abs=2e-5)


def test_distance_to_self_is_zero():
    for k in (PolyDecay(1.1), ExpDecay(0.3), ModelKernel([1.0, -0.5], [-0.2, -1.0])):
        assert kernel_l1_distance(k, k) == 0.0
    k = ModelKernel([1.0, -0.5], [-0.2, -1.0])
    assert kernel_l1_distance(k, ModelKernel([1.0, -0.5], [-0.2, -1.0])) == pytest.approx(0.0, abs=1e-15)


def test_distance_poly_vs_exp_against_oracle():
    p, e = PolyDecay(1.5), ExpDecay(1.0)
    f = lambda t: abs((t + 1) ** mpmath.mpf(-1.5) - mpmath.e**-t)
    oracle = float(mpmath.quad(f, [0, 1, 10, 100, mpmath.inf]))
    assert kernel_l1_distance(p, e) == pytest.approx(oracle, abs=1e-4)


def test_distance_model_vs_poly_against_oracle():
    p = PolyDecay(1.1)
    k = ModelKernel([0.6, 0.3], [-0.8, -0.02])
    f = lambda t: (t + 1) ** -1.1 - 0.6 * np.exp(-0.8 * t) - 0.3 * np.exp(-0.02 * t)
    # split adaptive quadrature at the sign changes, closed-form beyond t = 5000
    grid = np.linspace(0, 5000, 500001)
    idx = np.nonzero(np.diff(np.sign(f(grid))))[0]
    pts = [0.0] + [optimize.brentq(f, grid[i], grid[i + 1]) for i in idx] + [5000.0]
    oracle = sum(integrate.quad(lambda s: abs(f(s)), a, b, limit=500, epsabs=1e-13)[0]
                 for a, b in zip(pts[:-1], pts[1:]))
    oracle += 10 * 5001**-0.1 - 0.3 * math.exp(-0.02 * 5000) / 0.02
    assert len(idx) == 2
    assert kernel_l1_distance(p, k) == pytest.approx(oracle, abs=1e-4)


def test_tail_bound_soundness():
    q1 = QuadratureConfig(horizon=100.0)
    q2 = QuadratureConfig(horizon=200.0)
    for k in (PolyDecay(1.1), PolyDecay(2.0), ModelKernel([1.0, -0.4], [-0.05, -0.5])):
        assert abs(kernel_l1_norm(k, q1, exact=False) - kernel_l1_norm(k, q2, exact=False)) < 2 * q1.tail_tolerance


def test_non_integrable_model_rejected():
    with pytest.raises(DomainError):
        kernel_l1_norm(ModelKernel([1.0], [0.0]))
    with pytest.raises(DomainError):
        kernel_l1_distance(ModelKernel([1.0], [0.1]), PolyDecay(1.1))
    with pytest.raises(DomainError):
        kernel_l1_norm(ModelKernel([1.0], [1.0], TimeMode.DISCRETE))


def test_discrete_distance_steps():
    k = ModelKernel([1.0], [0.5], TimeMode.DISCRETE)
    assert kernel_l1_norm(k, exact=False) == pytest.approx(2.0, abs=1e-9)
    assert kernel_l1_distance(k, ZERO) == pytest.approx(2.0, abs=1e-9)
    # continuous kernel enters through its unit-cell integrals
    d = kernel_l1_distance(k, ExpDecay(1.0))
    steps = np.arange(200)
    oracle = np.sum(np.abs(0.5**steps - (np.exp(-steps) - np.exp(-steps - 1.0))))
    assert d == pytest.approx(oracle, abs=1e-9)


def test_horizon_only_is_smaller():
    p = PolyDecay(1.1)
    k = ModelKernel([0.5], [-0.1])
    assert kernel_l1_distance(p, k, horizon_only=True) < kernel_l1_distance(p, k)


def test_quadrature_config_validation():
    with pytest.raises(ConfigurationError):
        QuadratureConfig(step=0.03, horizon=1.0)
    with pytest.raises(ConfigurationError):
        QuadratureConfig(step=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_distance_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    k1, k2, k3 = (random_model(rng, 2) for _ in range(3))
    q = QuadratureConfig(step=0.02, horizon=40.0)
    d12 = kernel_l1_distance(k1, k2, q)
    d21 = kernel_l1_distance(k2, k1, q)
    d13 = kernel_l1_distance(k1, k3, q)
    d23 = kernel_l1_distance(k2, k3, q)
    assert d12 >= 0
    assert d12 == pytest.approx(d21, rel=1e-12, abs=1e-14)
    assert d13 <= d12 + d23 + 1e-9


# --- linear functional ------------------------------------------------------

def test_zero_input_zero_output():
    y = apply_linear_functional(PolyDecay(1.1), np.zeros((3, 20)))
    assert np.all(y == 0)


def test_heaviside_response_closed_form():
    x = np.ones(100)
    y = apply_linear_functional(PolyDecay(1.1), x, dt=1.0)
    for t in (9, 99):
        assert abs(y[t] - 10 * (1 - (t + 1) ** -0.1)) <= 1e-3
    assert y[99] == pytest.approx(10 * (1 - 100**-0.1), abs=1e-12)
    assert y[99] == pytest.approx(3.6904, abs=1e-4)


def test_heaviside_response_approaches_norm():
    y = apply_linear_functional(PolyDecay(2.0), np.ones(5000))
    assert y[-1] == pytest.approx(1.0, abs=1e-3)


def test_heaviside_homogeneity():
    rng = np.random.default_rng(3)
    for k in (PolyDecay(1.1), random_model(rng), random_model(rng, mode=TimeMode.DISCRETE)):
        y1 = apply_linear_functional(k, np.ones(40))
        y2 = apply_linear_functional(k, 2 * np.ones(40))
        np.testing.assert_array_equal(y2, 2 * y1)


def test_zoh_weights_are_cell_integrals():
    k = ModelKernel([1.5, -0.5], [-0.3, -2.0])
    w = cell_weights(k, 30, dt=0.5)
    assert w[0] == 0.0
    for j in range(1, 30):
        lo, hi = (j - 1) * 0.5, j * 0.5
        exact = sum(c * (math.exp(l * hi) - math.exp(l * lo)) / l for c, l in zip([1.5, -0.5], [-0.3, -2.0]))
        assert w[j] == pytest.approx(exact, rel=1e-12, abs=1e-16)


def test_left_riemann_rule():
    k = PolyDecay(1.1)
    w = cell_weights(k, 10, dt=0.5, rule="left")
    np.testing.assert_allclose(w, (np.arange(10) * 0.5 + 1) ** -1.1 * 0.5, rtol=1e-15)
    with pytest.raises(ConfigurationError):
        cell_weights(k, 10, rule="midpoint")


def test_tabulated_weights_match_piecewise_integral():
    k = Tabulated([0.0, 1.0, 2.0, 4.0], [1.0, 0.5, 0.25, 0.0])
    w = cell_weights(k, 6, dt=1.0)
    np.testing.assert_allclose(w, [0.0, 0.75, 0.375, 0.1875, 0.0625, 0.0])


def test_against_brute_force_oracle():
    rng = np.random.default_rng(7)
    for _ in range(10):
        k = random_model(rng, 4)
        x = rng.standard_normal(60)
        cell = lambda n: sum(ci * (math.exp(li * n) - math.exp(li * (n - 1))) / li
                             for ci, li in zip(k.coefficients, k.rates))
        np.testing.assert_allclose(apply_linear_functional(k, x), brute_force_response(cell, x), atol=1e-12)


def test_fft_path_matches_lag_loop():
    rng = np.random.default_rng(11)
    w = rng.standard_normal(5000) * np.exp(-np.arange(5000) / 50)
    x = rng.standard_normal(5000)
    y_fft = convolve_causal(w, x)
    y_ref = convolve_causal(w[:4096], x[:4096])
    np.testing.assert_allclose(y_fft[:4096], y_ref, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    k = random_model(rng, 3)
    x1, x2 = rng.standard_normal((2, 50))
    lhs = apply_linear_functional(k, alpha * x1 + beta * x2)
    rhs = alpha * apply_linear_functional(k, x1) + beta * apply_linear_functional(k, x2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_time_shift_is_exact(seed, shift):
    rng = np.random.default_rng(seed)
    k = PolyDecay(1.1) if seed % 2 else random_model(rng, 3)
    x = rng.standard_normal(60)
    y = apply_linear_functional(k, x)
    xs = np.concatenate([np.zeros(shift), x])
    ys = apply_linear_functional(k, xs)
    np.testing.assert_array_equal(ys[shift:], y)
    assert np.all(ys[:shift] == 0)


def test_input_validation():
    with pytest.raises(DomainError):
        apply_linear_functional(PolyDecay(1.1), np.array([1.0, np.inf]))
    with pytest.raises(DomainError):
        apply_linear_functional(PolyDecay(1.1), 1.0)
    with pytest.raises(DomainError):
        apply_linear_functional(PolyDecay(1.1), np.ones(3), dt=0.0)


# --- memory function --------------------------------------------------------

def test_memory_function_examples():
    assert memory_function(PolyDecay(1.1), 0.0) == 1.0
    assert memory_function(ModelKernel([1.0], [-2.0]), 1.0) == pytest.approx(math.exp(-2.0), rel=1e-15)
    assert memory_function(ModelKernel([1.0], [-2.0]), 1.0) == pytest.approx(0.135335, abs=1e-6)


def test_memory_function_log_affine_for_single_exponential():
    t = np.linspace(0, 10, 21)
    logm = np.log(memory_function(ModelKernel([3.0], [-0.7]), t))
    slope = np.diff(logm) / np.diff(t)
    np.testing.assert_allclose(slope, -0.7, rtol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_decaying_memory_bound(seed):
    rng = np.random.default_rng(seed)
    k = random_model(rng, int(rng.integers(1, 6)))
    t = np.linspace(0, 30, 301)
    bound = np.sum(np.abs(k.coefficients)) * np.exp(np.max(k.rates) * t)
    assert np.all(memory_function(k, t) <= bound * (1 + 1e-12))


# --- kernel strings and files --------------------------------------------------------

def test_kernel_string_round_trip(tmp_path):
    assert parse_kernel("poly:1.1") == PolyDecay(1.1)
    assert parse_kernel(" exp : 0.5 ") == ExpDecay(0.5)
    assert parse_kernel(format_kernel(PolyDecay(2.5))) == PolyDecay(2.5)
    path = tmp_path / "k.csv"
    write_kernel_csv(path, PolyDecay(1.1), np.linspace(0, 5, 11))
    assert path.read_text().splitlines()[0] == "t,rho"
    k = parse_kernel(f"csv:{path}")
    np.testing.assert_array_equal(k.values, PolyDecay(1.1)(np.linspace(0, 5, 11)))
    assert isinstance(read_kernel_csv(path), Tabulated)


@pytest.mark.parametrize("bad", ["", "poly", "poly:abc", "gauss:1", "poly:0.5"])
def test_kernel_string_errors(bad):
    with pytest.raises(ConfigurationError):
        parse_kernel(bad)


def test_kernel_csv_bad_header(tmp_path):
    path = tmp_path / "k.csv"
    path.write_text("time,value\n0,1\n")
    with pytest.raises(ConfigurationError):
        read_kernel_csv(path)
