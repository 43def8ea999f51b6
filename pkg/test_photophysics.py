import dataclasses
import logging
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid
from scipy.optimize import brentq

from src.core_model import EmissionParams, RechargeParams, t1_rate
from src.errors import DomainError
from src.photophysics import (
    EnsembleState,
    apply_pi_pulse,
    dark_equilibrium,
    emission_rates,
    evolve_dark,
    evolve_laser,
    expected_ratio_increase,
    laser_targets,
    run_sequence,
    steady_state,
    steady_state_fraction,
    window_counts,
)
from src.pulse_sequence import standard_sequence

PARAMS = EmissionParams()
RECHARGE = RechargeParams()
T1 = 1.2e-3

fractions = st.floats(min_value=0.0, max_value=1.0)
polarizations = st.floats(min_value=-1.0, max_value=1.0)
durations = st.floats(min_value=0.0, max_value=5e-3)
powers = st.floats(min_value=0.0, max_value=4e-3)


def states():
    return st.builds(EnsembleState, n_minus=fractions, s_addr=polarizations, s_rest=polarizations)


def assert_states_close(a: EnsembleState, b: EnsembleState, tol=1e-12):
    assert abs(a.n_minus - b.n_minus) <= tol
    assert abs(a.s_addr - b.s_addr) <= tol
    assert abs(a.s_rest - b.s_rest) <= tol


def test_fraction_at_zero_power_is_low_power_limit():
    assert steady_state_fraction(0.0, PARAMS) == PARAMS.f_low


def test_default_fraction_anchors():
    assert steady_state_fraction(8e-6, PARAMS) > 0.60
    assert steady_state_fraction(4e-3, PARAMS) == pytest.approx(0.20, abs=0.03)


def test_fraction_root_finding_oracle():
    def fraction_at_anchor(sat_power):
        params = dataclasses.replace(PARAMS, f_low=0.65, f_high=0.18, sat_power_charge=sat_power)
        return steady_state_fraction(0.56e-3, params) - 0.35

    sat_power = brentq(fraction_at_anchor, 1e-6, 1e-1, xtol=1e-15)
    params = dataclasses.replace(PARAMS, f_low=0.65, f_high=0.18, sat_power_charge=sat_power)
    assert steady_state_fraction(0.56e-3, params) == pytest.approx(0.35, abs=1e-9)


@settings(max_examples=500)
@given(powers, st.floats(min_value=1e-7, max_value=1e-3))
def test_fraction_decreases_with_power(power, step):
    assert steady_state_fraction(power + step, PARAMS) < steady_state_fraction(power, PARAMS)


def test_state_bounds_are_validated():
    with pytest.raises(DomainError):
        EnsembleState(n_minus=1.1)
    with pytest.raises(DomainError):
        EnsembleState(n_minus=0.5, s_addr=-1.5)


def test_dark_zero_duration_is_identity():
    state = EnsembleState(0.4, 0.3, -0.2)
    assert_states_close(evolve_dark(state, 0.0, T1, RECHARGE), state, tol=1e-15)


def test_dark_long_duration_reaches_equilibrium():
    state = evolve_dark(EnsembleState(0.3, -0.9, -0.9), 1e6 * T1, T1, RECHARGE)
    assert state.s_addr == pytest.approx(0.0, abs=1e-9)
    assert state.s_rest == pytest.approx(0.0, abs=1e-9)
    assert state.n_minus == pytest.approx(RECHARGE.n_minus_dark_eq, abs=1e-9)


def test_single_component_recharge_halves_excess():
    recharge = dataclasses.replace(RECHARGE, weight1=1.0)
    start = EnsembleState(0.3)
    end = evolve_dark(start, recharge.t_r1 * math.log(2), T1, recharge)
    n_zero_eq = 1 - recharge.n_minus_dark_eq
    assert end.n_zero - n_zero_eq == pytest.approx((start.n_zero - n_zero_eq) / 2, rel=1e-12)


def test_negative_durations_rejected():
    with pytest.raises(DomainError):
        evolve_dark(EnsembleState(0.5), -1e-6, T1, RECHARGE)
    with pytest.raises(DomainError):
        evolve_laser(EnsembleState(0.5), -1e-6, 1e-3, PARAMS)


@settings(max_examples=10000, deadline=None)
@given(states(), durations, durations)
def test_dark_evolution_is_a_semigroup(state, a, b):
    at_once = evolve_dark(state, a + b, T1, RECHARGE)
    in_steps = evolve_dark(evolve_dark(state, a, T1, RECHARGE), b, T1, RECHARGE)
    assert_states_close(at_once, in_steps)


@settings(max_examples=10000, deadline=None)
@given(states(), st.floats(min_value=0.0, max_value=50e-6),
       st.floats(min_value=0.0, max_value=50e-6), powers)
def test_laser_evolution_is_a_semigroup(state, a, b, power):
    at_once = evolve_laser(state, a + b, power, PARAMS, T1)
    in_steps = evolve_laser(evolve_laser(state, a, power, PARAMS, T1), b, power, PARAMS, T1)
    assert_states_close(at_once, in_steps)


@settings(max_examples=10000)
@given(states())
def test_pi_pulse_is_an_involution(state):
    flipped = apply_pi_pulse(state)
    assert flipped.s_rest == state.s_rest
    assert flipped.n_minus == state.n_minus
    assert apply_pi_pulse(flipped) == state


def test_pi_pulse_flips_addressed_orientation():
    assert apply_pi_pulse(EnsembleState(0.5, 0.8, 0.1)).s_addr == -0.8


@settings(max_examples=10000, deadline=None)
@given(states(), st.lists(st.tuples(st.sampled_from(["dark", "laser", "pi"]), durations, powers),
                          max_size=8))
def test_random_sequences_keep_state_in_bounds(state, steps):
    for kind, duration, power in steps:
        if kind == "dark":
            state = evolve_dark(state, duration, T1, RECHARGE)
        elif kind == "laser":
            state = evolve_laser(state, duration, power, PARAMS, T1)
        else:
            state = apply_pi_pulse(state)
        assert 0.0 <= state.n_minus <= 1.0
        assert -1.0 <= state.s_addr <= 1.0
        assert -1.0 <= state.s_rest <= 1.0


def test_zero_power_laser_is_a_hold():
    state = EnsembleState(0.4, -0.5, 0.2)
    assert_states_close(evolve_laser(state, 1e-3, 0.0, PARAMS), state, tol=1e-15)


def test_polarization_pulse_reaches_targets():
    power = 0.56e-3
    state = evolve_laser(dark_equilibrium(RECHARGE), 200e-6, power, PARAMS, T1)
    targets = laser_targets(power, PARAMS, T1)
    assert state.n_minus == pytest.approx(steady_state_fraction(power, PARAMS), rel=0.01)
    assert state.s_eff == pytest.approx(targets.s_target, rel=0.01)
    assert targets.s_target < -0.99


def test_emission_without_crosstalk():
    params = dataclasses.replace(PARAMS, crosstalk_minus_in_zero=0.0, crosstalk_zero_in_minus=0.0)
    minus, zero = emission_rates(EnsembleState(1.0), 1e-3, params)
    assert minus == pytest.approx(params.brightness_minus * 1e-3)
    assert zero == 0.0


def test_dark_spin_state_lowers_nv_minus_emission():
    params = dataclasses.replace(PARAMS, crosstalk_minus_in_zero=0.0, crosstalk_zero_in_minus=0.0)
    bright, _ = emission_rates(EnsembleState(0.7, 0.0, 0.0), 1e-3, params)
    dark, _ = emission_rates(EnsembleState(0.7, 1.0, 1.0), 1e-3, params)
    assert dark / bright == pytest.approx(1 - params.spin_contrast)


def test_polarization_pulse_ionizes():
    power = 0.56e-3
    before = emission_rates(dark_equilibrium(RECHARGE), power, PARAMS)
    after = emission_rates(evolve_laser(dark_equilibrium(RECHARGE), 200e-6, power, PARAMS, T1),
                           power, PARAMS)
    assert after[1] / after[0] > before[1] / before[0]


def test_window_counts_match_numerical_integration():
    state = EnsembleState(0.62, 0.4, -0.1)
    power, duration = 0.56e-3, 5e-6
    times = np.linspace(0.0, duration, 20001)
    rates = np.array([
        emission_rates(evolve_laser(state, t, power, PARAMS, T1), power, PARAMS) for t in times
    ])
    expected = trapezoid(rates, times, axis=0)
    np.testing.assert_allclose(window_counts(state, power, duration, PARAMS, T1), expected, rtol=1e-7)


def test_steady_state_is_fixed_point_of_laser_evolution():
    power = 1e-4
    state = steady_state(power, PARAMS, T1)
    assert_states_close(evolve_laser(state, 1e-3, power, PARAMS, T1), state)


def test_identical_seeds_give_identical_traces(config):
    seq = standard_sequence(taus=[1e-6, 1e-4, 1e-2], repetitions=500)
    first = run_sequence(seq, config, 300.0, seed=7)
    second = run_sequence(seq, config, 300.0, seed=7)
    pd.testing.assert_frame_equal(first.data, second.data)
    other = run_sequence(seq, config, 300.0, seed=8)
    assert not first.data["mean"].equals(other.data["mean"])


def test_no_dark_time_leaves_signal_equal_to_normalization(config):
    seq = standard_sequence(taus=[1e-9, 1e-6], repetitions=20000, pi_pulse=False)
    trace = run_sequence(seq, config, 294.0, seed=3)
    _, signal, signal_err = trace.cell("without_pi", "signal", "minus")
    _, norm, norm_err = trace.cell("without_pi", "normalization", "minus")
    ratio = signal[0] / norm[0]
    error = ratio * math.hypot(signal_err[0] / signal[0], norm_err[0] / norm[0])
    assert abs(ratio - 1.0) < 4 * error


def test_without_spin_contrast_pi_pulse_is_invisible(config):
    emission = dataclasses.replace(config.emission, spin_contrast=0.0)
    config = dataclasses.replace(config, emission=emission)
    trace = run_sequence(standard_sequence(taus=[1e-6, 1e-4, 1e-2]), config, 294.0, 1, noise=False)
    for window in ("normalization", "signal"):
        for channel in ("minus", "zero"):
            _, with_pi, _ = trace.cell("with_pi", window, channel)
            _, without_pi, _ = trace.cell("without_pi", window, channel)
            np.testing.assert_array_equal(with_pi, without_pi)


def test_frozen_charge_pi_difference_is_monoexponential(frozen_config):
    temperature = 320.0
    taus = np.geomspace(1e-6, 3e-3, 12)
    trace = run_sequence(standard_sequence(taus=taus), frozen_config, temperature, 1, noise=False)
    _, without_pi, _ = trace.cell("without_pi", "signal", "minus")
    _, with_pi, _ = trace.cell("with_pi", "signal", "minus")
    difference = without_pi - with_pi
    t1 = 1.0 / t1_rate(frozen_config.t1_model, temperature)
    np.testing.assert_allclose(
        difference / difference[0], np.exp(-(taus - taus[0]) / t1), rtol=1e-6
    )
    assert difference[0] > 0


def test_expected_ratio_increase_at_recharge_power(config):
    seq = standard_sequence(power=0.56e-3, pi_pulse=False)
    assert expected_ratio_increase(seq, config, 294.0) == pytest.approx(1.8, abs=0.1)


def test_trace_records_seed_entropy(config):
    seq = standard_sequence(taus=[1e-6, 1e-4, 1e-2], repetitions=200)
    first = run_sequence(seq, config, 301.0, np.random.SeedSequence([7, 301000]))
    assert first.seed == (7, 301000)
    again = run_sequence(seq, config, 301.0, np.random.SeedSequence(first.seed))
    pd.testing.assert_frame_equal(first.data, again.data)
    assert run_sequence(seq, config, 301.0, 5).seed == 5


def test_short_pause_against_recharge_is_reported(config, frozen_config, caplog):
    seq = standard_sequence(taus=[1e-6, 1e-4])
    with caplog.at_level(logging.WARNING):
        run_sequence(seq, config, 294.0, 1, noise=False)
    assert "shorter than 3 x T_R2" in caplog.text

    caplog.clear()
    long_pause = dataclasses.replace(seq, pause=10 * config.recharge.t_r2)
    with caplog.at_level(logging.WARNING):
        run_sequence(long_pause, config, 294.0, 1, noise=False)
        run_sequence(seq, frozen_config, 294.0, 1, noise=False)
    assert "T_R2" not in caplog.text
