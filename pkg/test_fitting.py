import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.core_model import TemperatureModel, t1_rate
from src.errors import (
    DomainError,
    FitError,
    InsufficientDataError,
    ShapeError,
    SingularDesignError,
)
from src.fitting import (
    ModelSpec,
    evaluate_model,
    fit_biexp,
    fit_lorentzian,
    fit_monoexp,
    fit_power_law,
    fit_t1_temperature_model,
    format_fit_report,
    levenberg_marquardt,
    model_jacobian,
    weighted_linear_fit,
    weighted_mean_constant,
)

PHONONS = TemperatureModel()
TAUS = np.geomspace(1e-6, 3e-2, 30)


def finite(low, high):
    return st.floats(min_value=low, max_value=high, allow_nan=False, allow_infinity=False)


AMPLITUDE = finite(-2.0, 2.0)
TIME = finite(0.3, 3.0)

JACOBIAN_CASES = {
    "linear": (np.linspace(-2, 2, 9), st.tuples(AMPLITUDE, AMPLITUDE), {}),
    "monoexp": (np.linspace(0, 3, 9), st.tuples(AMPLITUDE, TIME, AMPLITUDE), {}),
    "biexp": (
        np.linspace(0, 3, 9),
        st.tuples(AMPLITUDE, TIME, AMPLITUDE, TIME, AMPLITUDE),
        {},
    ),
    "power_law": (np.linspace(0.5, 3, 9), st.tuples(AMPLITUDE, finite(0.2, 4.0), AMPLITUDE), {}),
    "lorentzian": (
        np.linspace(-2, 2, 9),
        st.tuples(AMPLITUDE, finite(-1.0, 1.0), finite(0.2, 2.0), AMPLITUDE, AMPLITUDE),
        {"x_ref": 0.4},
    ),
    "t1_temperature": (
        np.linspace(250, 400, 7),
        st.tuples(finite(0.0, 2000.0)),
        {"a2": PHONONS.a2, "a3": PHONONS.a3, "delta": PHONONS.delta},
    ),
}


@pytest.mark.parametrize("model_id", sorted(JACOBIAN_CASES))
@settings(max_examples=100, deadline=None)
@given(data=st.data())
def test_jacobian_matches_finite_differences(model_id, data):
    x, strategy, fixed = JACOBIAN_CASES[model_id]
    params = np.array(data.draw(strategy), dtype=float)
    analytic = model_jacobian(model_id, x, params, **fixed)
    numeric = np.empty_like(analytic)
    for i in range(params.size):
        h = 1e-6 * max(1.0, abs(params[i]))
        up, down = params.copy(), params.copy()
        up[i] += h
        down[i] -= h
        numeric[:, i] = (
            evaluate_model(model_id, x, up, **fixed) - evaluate_model(model_id, x, down, **fixed)
        ) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-7)


def test_weighted_linear_fit_matches_normal_equations():
    rng = np.random.default_rng(3)
    x = np.linspace(0.0, 10.0, 15)
    sigma = rng.uniform(0.5, 2.0, x.size)
    y = 2.0 * x + 1.0 + rng.normal(0.0, 0.01, x.size)
    design = np.column_stack([x, np.ones_like(x)])
    w = np.diag(1.0 / sigma**2)
    curvature = design.T @ w @ design
    expected = np.linalg.solve(curvature, design.T @ w @ y)

    result = weighted_linear_fit(x, y, sigma)
    np.testing.assert_allclose(result.params, expected, rtol=1e-10)
    assert result.reduced_chi_squared < 1
    np.testing.assert_allclose(result.covariance, np.linalg.inv(curvature), rtol=1e-10)


def test_weighted_linear_fit_two_points():
    result = weighted_linear_fit([1.0, 3.0], [2.0, 6.0], [0.1, 0.1])
    assert result.value("slope") == pytest.approx(2.0)
    assert result.value("intercept") == pytest.approx(0.0, abs=1e-12)
    assert result.dof == 1
    assert result.chi_squared == pytest.approx(0.0, abs=1e-20)


def test_weighted_linear_fit_needs_distinct_x():
    with pytest.raises(SingularDesignError):
        weighted_linear_fit([2.0, 2.0, 2.0], [1.0, 2.0, 3.0], 1.0)


def test_weighted_mean_constant_inflates_error():
    result = weighted_mean_constant([1.0, 3.0], [1.0, 1.0])
    assert result.value("value") == pytest.approx(2.0)
    assert result.chi_squared == pytest.approx(2.0)
    assert result.error("value") == pytest.approx(1.0)


def test_fit_monoexp_recovers_parameters():
    y = 0.3 * np.exp(-TAUS / 1.2e-3) + 0.05
    result = fit_monoexp(TAUS, y, 1e-3)
    assert result.params == pytest.approx([0.3, 1.2e-3, 0.05], rel=1e-5)
    assert result.converged
    assert "unidentifiable:T" not in result.flags


def test_fit_monoexp_rising_curve():
    y = 1.0 - 0.4 * np.exp(-TAUS / 2e-3)
    result = fit_monoexp(TAUS, y, 1e-3)
    assert result.value("A") == pytest.approx(-0.4, rel=1e-5)
    assert result.value("T") == pytest.approx(2e-3, rel=1e-5)


def test_fit_biexp_recovers_ordered_components():
    y = 0.2 * np.exp(-TAUS / 1e-4) + 0.3 * np.exp(-TAUS / 3e-3) + 0.1
    result = fit_biexp(TAUS, y, 1e-3)
    assert result.value("T_R1") == pytest.approx(1e-4, rel=1e-4)
    assert result.value("T_R2") == pytest.approx(3e-3, rel=1e-4)
    assert result.value("A") == pytest.approx(0.2, rel=1e-4)
    assert result.value("B") == pytest.approx(0.3, rel=1e-4)
    assert "near_degenerate" not in result.flags


def test_fit_biexp_needs_two_decades():
    t = np.linspace(1e-3, 5e-3, 10)
    with pytest.raises(InsufficientDataError):
        fit_biexp(t, np.exp(-t / 1e-3), 0.01)


def test_fit_biexp_flags_missing_second_component():
    t = np.geomspace(1e-6, 1e-2, 40)
    result = fit_biexp(t, 0.5 * np.exp(-t / 1e-4) + 0.2, 1e-3)
    assert {"near_degenerate", "degenerate_component"} & set(result.flags)


def test_fit_monoexp_constant_is_unidentifiable():
    t = np.linspace(0.0, 1e-3, 20)
    result = fit_monoexp(t, np.full(t.size, 0.7), 0.01)
    assert "unidentifiable:T" in result.flags
    assert result.value("A") == pytest.approx(0.0, abs=1e-9)
    assert result.value("y0") == pytest.approx(0.7)


NOISY_DECAY = (
    0.3 * np.exp(-TAUS / 1.2e-3) + 0.05 + np.random.default_rng(12).normal(0.0, 0.01, TAUS.size)
)


@settings(max_examples=25, deadline=None)
@given(scale=st.floats(min_value=0.1, max_value=10.0))
def test_common_sigma_scale_leaves_estimates_unchanged(scale):
    base = fit_monoexp(TAUS, NOISY_DECAY, 0.01)
    scaled = fit_monoexp(TAUS, NOISY_DECAY, 0.01 * scale)
    assert scaled.params == pytest.approx(base.params, rel=1e-6)
    assert scaled.chi_squared == pytest.approx(base.chi_squared / scale**2, rel=1e-6)

    line = weighted_linear_fit(TAUS, NOISY_DECAY, 0.01)
    line_scaled = weighted_linear_fit(TAUS, NOISY_DECAY, 0.01 * scale)
    assert line_scaled.params == pytest.approx(line.params, rel=1e-9)


def test_fit_stopped_at_bound_is_flagged():
    x = np.linspace(1.0, 3.0, 10)
    result = fit_power_law(x, 2 * x**8 + 1, 1e-3)
    assert result.value("n") == 5.0
    assert "at_bound" in result.flags
    assert result.reduced_chi_squared > 1e6


def test_interior_fit_is_not_flagged_at_bound():
    x = np.linspace(0.5, 3.0, 10)
    result = fit_power_law(x, 2 * np.sqrt(x) + 0.3, 1e-3)
    assert result.params == pytest.approx([2.0, 0.5, 0.3], rel=1e-6)
    assert "at_bound" not in result.flags


def test_fit_power_law_identity():
    x = np.linspace(0.5, 3.0, 10)
    result = fit_power_law(x, x, 0.01)
    assert result.value("a") == pytest.approx(1.0, abs=1e-6)
    assert result.value("n") == pytest.approx(1.0, abs=1e-6)
    assert result.value("c") == pytest.approx(0.0, abs=1e-6)


def test_fit_power_law_rejects_non_positive_x():
    with pytest.raises(DomainError):
        fit_power_law([0.0, 1.0, 2.0, 3.0], [0.0, 1.0, 2.0, 3.0], 0.1)


def test_fit_lorentzian():
    x = np.linspace(-3.0, 3.0, 61)
    y = evaluate_model("lorentzian", x, (2.0, 0.3, 0.8, 0.5, 0.1), x_ref=0.0)
    result = fit_lorentzian(x, y, 0.01)
    assert result.value("center") == pytest.approx(0.3, abs=1e-6)
    assert result.value("fwhm") == pytest.approx(0.8, rel=1e-5)
    assert result.value("amplitude") == pytest.approx(2.0, rel=1e-5)


def test_fit_t1_temperature_model_recovers_a1():
    temps = np.array([294.0, 309.0, 325.0, 341.0])
    truth = TemperatureModel(a1=500.0)
    inv_t1 = [t1_rate(truth, t) for t in temps]
    result = fit_t1_temperature_model(temps, inv_t1, 5.0, truth.a2, truth.a3, truth.delta)
    assert result.value("a1") == pytest.approx(500.0)
    assert result.model_id == "t1_temperature"


DECAY = np.exp(-TAUS / 1e-3)


@pytest.mark.parametrize(
    "t, y, sigma, error",
    [
        (TAUS[:3], DECAY[:3], 0.1, InsufficientDataError),
        (TAUS[::-1], DECAY, 0.1, DomainError),
        (TAUS, DECAY, 0.0, DomainError),
        (TAUS[:-1], DECAY, 0.1, ShapeError),
    ],
)
def test_fit_monoexp_validation(t, y, sigma, error):
    with pytest.raises(error):
        fit_monoexp(t, y, sigma)


def test_model_spec_validation():
    with pytest.raises(DomainError):
        ModelSpec("gaussian", (1.0,))
    with pytest.raises(ShapeError):
        ModelSpec("monoexp", (1.0, 1.0))
    with pytest.raises(DomainError):
        ModelSpec("monoexp", (1.0, 1.0, 0.0), lower=(0, 2, 0), upper=(1, 1, 1))


def test_fit_error_reports_iterations():
    y = 0.3 * np.exp(-TAUS / 1.2e-3) + 0.05
    spec = ModelSpec("monoexp", (5.0, 1e-5, -3.0), max_iterations=1)
    with pytest.raises(FitError) as info:
        levenberg_marquardt(spec, TAUS, y, 1e-3)
    assert info.value.n_iterations == 1
    assert "iterations=1" in str(info.value)


def test_format_fit_report():
    result = weighted_mean_constant([1.0, 3.0], [1.0, 1.0])
    text = format_fit_report(result, quantity="inv_t1", unit=float("nan"))
    report = json.loads(text)
    assert report["quantity"] == "inv_t1"
    assert report["unit"] is None
    assert report["params"] == {"value": 2.0}
    assert list(report) == sorted(report)
