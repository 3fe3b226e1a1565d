import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmlab.errors import ConfigurationError, DomainError
from ssmlab.reparam import (
    Family,
    Scheme,
    TimeMode,
    apply,
    closed_form_gradient_scale,
    derivative,
    derive_best_scheme,
    format_scheme,
    gradient_scale,
    has_published_closed_form,
    invert,
    parse_scheme,
    stability_bound_g,
    stability_bound_g_uniform,
    stability_gap,
    stability_gap_profile,
    stability_gap_quadrature,
)

CONT, DISC = TimeMode.CONTINUOUS, TimeMode.DISCRETE

ALL_SCHEMES = [
    Scheme(Family.DIRECT, CONT),
    Scheme(Family.RELU, CONT),
    Scheme(Family.EXP, CONT),
    Scheme(Family.SOFTPLUS, CONT),
    Scheme(Family.BEST, CONT, a=1.0, b=1.0),
    Scheme(Family.BEST, CONT, a=2.5, b=0.3),
    Scheme(Family.DIRECT, DISC),
    Scheme(Family.RELU, DISC),
    Scheme(Family.EXP, DISC),
    Scheme(Family.SOFTPLUS, DISC),
    Scheme(Family.TANH, DISC),
    Scheme(Family.BEST, DISC, a=1.0, b=0.5),
    Scheme(Family.BEST, DISC, a=0.7, b=2.0),
]

GRID = np.round(np.arange(-50, 51) * 0.1, 12)


def _ids(schemes):
    return [format_scheme(s) for s in schemes]


class TestSchemeConstruction:
    def test_tanh_requires_discrete(self):
        with pytest.raises(ConfigurationError):
            Scheme(Family.TANH, CONT)

    @pytest.mark.parametrize("a,b,mode", [(0.0, 1.0, CONT), (1.0, 0.0, CONT), (-1.0, 1.0, DISC), (1.0, 0.4, DISC)])
    def test_best_parameter_constraints(self, a, b, mode):
        with pytest.raises(ConfigurationError):
            Scheme(Family.BEST, mode, a=a, b=b)

    def test_params_rejected_for_other_families(self):
        with pytest.raises(ConfigurationError):
            Scheme(Family.EXP, CONT, a=1.0)

    @pytest.mark.parametrize("scheme", ALL_SCHEMES, ids=_ids(ALL_SCHEMES))
    def test_string_roundtrip(self, scheme):
        assert parse_scheme(format_scheme(scheme)) == scheme

    def test_parse_example(self):
        s = parse_scheme("best:a=1,b=0.5@disc")
        assert (s.family, s.time_mode, s.a, s.b) == (Family.BEST, DISC, 1.0, 0.5)

    @pytest.mark.parametrize("text", ["exp", "exp@sometimes", "bogus@cont", "best:c=1@cont", "best:a=x@cont"])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigurationError):
            parse_scheme(text)

    @pytest.mark.parametrize("fam", [Family.EXP, Family.SOFTPLUS])
    def test_continuous_exp_softplus_strictly_negative(self, fam):
        w = np.linspace(-30, 30, 6001)
        assert np.all(apply(Scheme(fam, CONT), w) < 0)


class TestApply:
    def test_examples(self):
        assert apply(Scheme(Family.EXP, CONT), 0.0) == -1.0
        assert apply(Scheme(Family.SOFTPLUS, CONT), 0.0) == pytest.approx(-math.log(2), abs=1e-15)
        assert apply(parse_scheme("best:a=1,b=0.5@disc"), 0.0) == -1.0
        assert apply(Scheme(Family.TANH, DISC), 0.0) == 0.0

    def test_softplus_overflow_safe(self):
        s = Scheme(Family.SOFTPLUS, CONT)
        with np.errstate(all="raise"):
            assert apply(s, 700.0) == pytest.approx(-700.0)
            assert apply(s, -700.0) == pytest.approx(-math.exp(-700.0), rel=1e-12)
            assert apply(Scheme(Family.SOFTPLUS, DISC), 700.0) >= 0.0

    def test_non_finite_weight(self):
        with pytest.raises(DomainError):
            apply(Scheme(Family.EXP, CONT), float("nan"))

    def test_discrete_ranges(self):
        w = np.linspace(-20, 20, 4001)
        for s in ALL_SCHEMES:
            if s.time_mode is DISC and s.family is not Family.DIRECT:
                lam = apply(s, w)
                assert np.all(lam >= -1.0) and np.all(lam <= 1.0), s


class TestDerivative:
    def test_examples(self):
        assert derivative(Scheme(Family.EXP, CONT), 0.0) == -1.0
        # hand derivative of 1 - 1/(w^2 + 0.5) at w = 1: 2/(1.5^2)
        assert derivative(parse_scheme("best:a=1,b=0.5@disc"), 1.0) == pytest.approx(8.0 / 9.0, rel=1e-15)
        assert derivative(Scheme(Family.DIRECT, CONT), 3.7) == 1.0

    def test_relu_kink_left_derivative(self):
        assert derivative(Scheme(Family.RELU, CONT), 0.0) == 0.0
        assert derivative(Scheme(Family.RELU, DISC), 0.0) == 0.0

    @pytest.mark.parametrize("scheme", ALL_SCHEMES, ids=_ids(ALL_SCHEMES))
    def test_matches_central_differences(self, scheme):
        h = 1e-6
        w = GRID if scheme.family is not Family.RELU else GRID[GRID != 0]
        fd = (np.asarray(apply(scheme, w + h)) - np.asarray(apply(scheme, w - h))) / (2 * h)
        np.testing.assert_allclose(derivative(scheme, w), fd, rtol=1e-6, atol=1e-12)


class TestGradientScale:
    def test_examples(self):
        assert gradient_scale(Scheme(Family.BEST, CONT, a=1, b=1), 0.5) == pytest.approx(1.0, abs=1e-15)
        assert gradient_scale(Scheme(Family.EXP, CONT), 0.0) == pytest.approx(1.0, abs=1e-15)
        # exp(w - e^w) / (1 - exp(-e^w))^2 at w = 0, evaluated with mpmath at 40 digits
        assert gradient_scale(Scheme(Family.EXP, DISC), 0.0) == pytest.approx(0.9206735942077923189, rel=1e-14)

    @pytest.mark.parametrize("scheme", ALL_SCHEMES, ids=_ids(ALL_SCHEMES))
    def test_raw_formula(self, scheme):
        lam = np.asarray(apply(scheme, GRID))
        den = -lam if scheme.continuous else 1.0 - lam
        ok = den != 0
        raw = np.abs(np.asarray(derivative(scheme, GRID[ok]))) / den[ok] ** 2
        np.testing.assert_allclose(gradient_scale(scheme, GRID[ok]), raw, rtol=1e-9, atol=0)

    @pytest.mark.parametrize("scheme", ALL_SCHEMES, ids=_ids(ALL_SCHEMES))
    def test_closed_forms(self, scheme):
        w = GRID
        if scheme.family is Family.DIRECT:
            w = w[(w != 0) & (w != 1)]
        np.testing.assert_allclose(gradient_scale(scheme, w), closed_form_gradient_scale(scheme, w),
                                   rtol=1e-10, atol=0)

    def test_published_flags(self):
        assert not has_published_closed_form(Scheme(Family.DIRECT, DISC))
        assert has_published_closed_form(Scheme(Family.TANH, DISC))
        assert has_published_closed_form(Scheme(Family.BEST, CONT))

    def test_singular_point_reports_weight(self):
        with pytest.raises(DomainError, match="w=0"):
            gradient_scale(Scheme(Family.DIRECT, CONT), np.array([1.0, 0.0]))

    def test_relu_zero_branch(self):
        assert gradient_scale(Scheme(Family.RELU, CONT), -2.0) == 0.0
        assert gradient_scale(Scheme(Family.RELU, DISC), -2.0) == 0.0

    def test_best_identity(self):
        for a, b in [(1.0, 1.0), (0.3, 2.0), (4.0, 0.1)]:
            s = Scheme(Family.BEST, CONT, a=a, b=b)
            assert np.max(np.abs(gradient_scale(s, GRID) - 2 * a * np.abs(GRID))) < 1e-12


def _endpoint_oracle(scheme, w, beta):
    # brute force over the closed ball on a fine grid, independent of the endpoint logic
    grid = np.linspace(w - beta, w + beta, 2001)
    lam, lt = apply(scheme, w), np.asarray(apply(scheme, grid))
    if lam >= 0 or np.any(lt >= 0):
        return math.inf
    return float(np.max(np.abs(lam / lt - 1.0)))


class TestStabilityGap:
    def test_exp_closed_form(self):
        s = Scheme(Family.EXP, CONT)
        for w in (-3.0, 0.0, 2.0):
            for beta in (0.01, 0.3, 1.0):
                assert stability_gap(s, w, beta) == pytest.approx(math.expm1(beta), rel=1e-12)

    @pytest.mark.parametrize("scheme", [s for s in ALL_SCHEMES if s.continuous], ids=_ids([s for s in ALL_SCHEMES if s.continuous]))
    def test_zero_beta(self, scheme):
        w = np.array([-1.0, -0.5]) if scheme.family is Family.DIRECT else np.array([0.5, 2.0])
        np.testing.assert_array_equal(stability_gap(scheme, w, 0.0), 0.0)

    def test_direct_example(self):
        assert stability_gap(Scheme(Family.DIRECT, CONT), -0.002, 0.001) == pytest.approx(1.0, rel=1e-9)
        assert stability_gap_quadrature(Scheme(Family.DIRECT, CONT), -0.002, 0.001) == pytest.approx(1.0, rel=1e-8)

    @pytest.mark.parametrize("eps", [1.0, 0.1, 0.01])
    def test_direct_instability(self, eps):
        beta = 0.001
        w = -beta * (1 + eps)
        assert stability_gap(Scheme(Family.DIRECT, CONT), w, beta) == pytest.approx(1.0 / eps, rel=1e-6)

    def test_divergence_sentinel(self):
        assert stability_gap(Scheme(Family.DIRECT, CONT), -0.001, 0.002) == math.inf
        assert stability_gap(Scheme(Family.RELU, CONT), 0.05, 0.1) == math.inf

    @pytest.mark.parametrize("scheme", [Scheme(Family.EXP, CONT), Scheme(Family.SOFTPLUS, CONT),
                                        Scheme(Family.BEST, CONT, a=1, b=1), Scheme(Family.DIRECT, CONT)],
                             ids=["exp", "softplus", "best", "direct"])
    def test_against_brute_force_and_quadrature(self, scheme):
        ws = [-2.0, -0.7] if scheme.family is Family.DIRECT else [-2.0, -0.2, 0.0, 0.3, 1.5]
        for w in ws:
            for beta in (0.05, 0.4):
                closed = stability_gap(scheme, w, beta)
                assert closed == pytest.approx(_endpoint_oracle(scheme, w, beta), rel=1e-12)
                assert closed == pytest.approx(stability_gap_quadrature(scheme, w, beta, n=21), rel=1e-8)

    @pytest.mark.parametrize("scheme", [Scheme(Family.EXP, CONT), Scheme(Family.SOFTPLUS, CONT),
                                        Scheme(Family.BEST, CONT, a=1, b=1)], ids=["exp", "softplus", "best"])
    def test_endpoint_supremum(self, scheme):
        for w in GRID[::5]:
            for beta in (0.01, 0.1, 0.5, 1.0):
                _, vals = stability_gap_profile(scheme, w, beta, n=101)
                assert np.max(vals) <= stability_gap(scheme, w, beta) + 1e-12

    @pytest.mark.parametrize("scheme", [Scheme(Family.EXP, CONT), Scheme(Family.SOFTPLUS, CONT),
                                        Scheme(Family.BEST, CONT, a=1, b=1)], ids=["exp", "softplus", "best"])
    def test_certificate(self, scheme):
        for beta in (0.01, 0.1, 0.5, 1.0):
            gap = stability_gap(scheme, GRID, beta)
            assert np.all(gap <= stability_bound_g(scheme, GRID, beta) + 1e-9)

    def test_discrete_rejected(self):
        with pytest.raises(ConfigurationError):
            stability_gap(Scheme(Family.EXP, DISC), 0.0, 0.1)


class TestBoundG:
    def test_examples(self):
        assert stability_bound_g(Scheme(Family.EXP, CONT), 0.0, 0.1) == pytest.approx(0.10517091807564763, rel=1e-14)
        assert stability_bound_g(Scheme(Family.BEST, CONT, a=1, b=1), 0.0, 0.5) == pytest.approx(0.25)
        assert stability_bound_g(Scheme(Family.SOFTPLUS, CONT), 3.0, 0.0) == 0.0

    def test_unsupported(self):
        with pytest.raises(ConfigurationError):
            stability_bound_g(Scheme(Family.DIRECT, CONT), -1.0, 0.1)
        with pytest.raises(ConfigurationError):
            stability_bound_g(Scheme(Family.TANH, DISC), 0.0, 0.1)

    def test_uniform_over_set(self):
        s = Scheme(Family.BEST, CONT, a=2, b=1)
        W = [-3.0, 0.5, 1.0]
        assert stability_bound_g_uniform(s, W, 0.1) == pytest.approx(2 * (0.01 + 2 * 0.1 * 3.0))
        assert all(stability_bound_g(s, w, 0.1) <= stability_bound_g_uniform(s, W, 0.1) for w in W)


class TestDeriveBest:
    def test_discrete_default(self):
        s = derive_best_scheme(1.0, 0.5, DISC)
        assert s == parse_scheme("best:a=1,b=0.5@disc")
        assert apply(s, 2.0) == pytest.approx(1 - 1 / 4.5)

    def test_continuous(self):
        s = derive_best_scheme(2.0, 1.0, CONT)
        assert gradient_scale(s, 1.0) == pytest.approx(4.0)

    def test_invalid_offset(self):
        with pytest.raises(ConfigurationError):
            derive_best_scheme(1.0, 0.4, DISC)


INVERTIBLE = ALL_SCHEMES


class TestInvert:
    def test_examples(self):
        assert invert(Scheme(Family.EXP, CONT), -1.0) == 0.0
        assert invert(Scheme(Family.SOFTPLUS, CONT), -math.log(2)) == pytest.approx(0.0, abs=1e-15)
        assert invert(parse_scheme("best:a=1,b=0.5@disc"), 0.0) == pytest.approx(math.sqrt(0.5), rel=1e-15)

    @pytest.mark.parametrize("scheme", INVERTIBLE, ids=_ids(INVERTIBLE))
    def test_roundtrip(self, scheme):
        if scheme.continuous:
            lam = -np.geomspace(0.01, 4.6, 50)
            if scheme.family is Family.BEST:
                lam = lam[lam >= -1.0 / scheme.b]
        else:
            lam = np.linspace(0.01, 0.99, 50)
            if scheme.family is Family.BEST:
                lam = lam[lam >= 1.0 - 1.0 / scheme.b]
        w = invert(scheme, lam)
        np.testing.assert_allclose(apply(scheme, w), lam, rtol=0, atol=1e-12)

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            invert(Scheme(Family.EXP, CONT), 0.5)
        with pytest.raises(DomainError):
            invert(parse_scheme("best:a=1,b=1@cont"), -2.0)
        with pytest.raises(DomainError):
            invert(Scheme(Family.TANH, DISC), 1.0)


@settings(max_examples=200, deadline=None)
@given(w=st.floats(-8, 8), beta=st.floats(0, 2))
def test_softplus_gap_certificate_property(w, beta):
    s = Scheme(Family.SOFTPLUS, CONT)
    assert stability_gap(s, w, beta) <= stability_bound_g(s, w, beta) + 1e-9


@settings(max_examples=200, deadline=None)
@given(w=st.floats(-4, 4), beta=st.floats(0, 1), a=st.floats(0.1, 5), b=st.floats(0.1, 5))
def test_best_gap_certificate_property(w, beta, a, b):
    s = Scheme(Family.BEST, CONT, a=a, b=b)
    assert stability_gap(s, w, beta) <= stability_bound_g(s, w, beta) * (1 + 1e-12) + 1e-12
