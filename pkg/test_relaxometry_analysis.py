import logging

import numpy as np
import pandas as pd
import pytest

from src.core_model import PhysicsConfig, t1_rate
from src.detection import correct_trace
from src.errors import (
    CalibrationError,
    CalibrationRangeError,
    DomainError,
    InsufficientDataError,
    StructureError,
)
from src.fitting import fit_biexp, fit_monoexp
from src.photophysics import expected_ratio_increase, run_sequence
from src.pulse_sequence import standard_sequence
from src.relaxometry_analysis import (
    SCAN_COLUMNS,
    all_optical_decay,
    calibrate_charge_ratio_mapping,
    flatness_check,
    mappings_from_pairs,
    nearest_mapping,
    pi_pulse_decay,
    ratio_increase_statistic,
    recharge_decay,
    simulate_calibration_pairs,
    temperature_scan,
    temperature_seed,
)

RECHARGE_POWER = 5.6e-4
SCAN_TEMPERATURES = [float(t) for t in np.linspace(294.0, 348.0, 8)]


def identity_mapping(temperature=None):
    x = np.linspace(0.9, 3.4, 8)
    pairs = np.column_stack([x, np.full(x.size, 0.01)])
    return calibrate_charge_ratio_mapping(pairs, pairs, temperature=temperature)


@pytest.fixture(scope="module")
def calibration():
    config = PhysicsConfig()
    pairs = simulate_calibration_pairs(config, 294.0, np.random.default_rng(31))
    return config, pairs


def test_pi_evaluation_needs_both_halves(config):
    trace = run_sequence(standard_sequence(pi_pulse=False), config, 294.0, 1, noise=False)
    with pytest.raises(StructureError):
        pi_pulse_decay(trace)
    assert all_optical_decay(trace).y.size == 24


def test_recharge_decay_is_biexponential(no_crosstalk_config):
    config = no_crosstalk_config
    trace = run_sequence(standard_sequence(power=RECHARGE_POWER), config, 294.0, 1, noise=False)
    decay = recharge_decay(correct_trace(trace, config.detector))
    assert decay.y[0] > decay.y[-1]
    fit = fit_biexp(*decay)
    assert fit.value("T_R1") == pytest.approx(config.recharge.t_r1, rel=1e-3)
    assert fit.value("T_R2") == pytest.approx(config.recharge.t_r2, rel=1e-3)


def test_frozen_decays_give_t1(frozen_config):
    trace = run_sequence(standard_sequence(), frozen_config, 320.0, 1, noise=False)
    corrected = correct_trace(trace, frozen_config.detector)
    truth = t1_rate(frozen_config.t1_model, 320.0)
    for evaluation in (pi_pulse_decay, all_optical_decay):
        fit = fit_monoexp(*evaluation(corrected))
        assert 1.0 / fit.value("T") == pytest.approx(truth, rel=1e-4)


def test_noise_free_frozen_scan_recovers_a1(frozen_config):
    result = temperature_scan(standard_sequence(), frozen_config, [294.0, 348.0], seed=0, noise=False)
    assert list(result.table.columns) == SCAN_COLUMNS
    assert (result.table["status"] == "ok").all()
    assert not result.partial
    for name in ("pi", "all_optical", "pooled"):
        assert result.temperature_fits[name].value("a1") == pytest.approx(
            frozen_config.t1_model.a1, rel=1e-3
        )
    assert result.table["inv_t_r1"].isna().all()


def test_frozen_scan_methods_agree_and_recover_a1(frozen_config):
    result = temperature_scan(standard_sequence(), frozen_config, SCAN_TEMPERATURES, seed=3)
    table = result.table.set_index("temperature")
    assert (table["status"] == "ok").all()
    for temperature in SCAN_TEMPERATURES:
        row = table.loc[temperature]
        combined = np.hypot(row["inv_t1_pi_err"], row["inv_t1_all_optical_err"])
        assert abs(row["inv_t1_pi"] - row["inv_t1_all_optical"]) < 2 * combined

    fit = result.temperature_fits["pi"]
    assert abs(fit.value("a1") - frozen_config.t1_model.a1) < 2 * fit.error("a1")
    for name in ("pi", "all_optical", "pooled"):
        assert result.temperature_fits[name].error("a1") <= 30.0


def test_recharge_times_are_flat_across_temperature(no_crosstalk_config):
    config = no_crosstalk_config
    sequence = standard_sequence(power=RECHARGE_POWER, pi_pulse=False)
    result = temperature_scan(sequence, config, SCAN_TEMPERATURES, seed=8)
    assert result.table["inv_t_r1"].notna().all()
    for column, truth in (("inv_t_r1", config.recharge.t_r1), ("inv_t_r2", config.recharge.t_r2)):
        check = result.flatness[column]
        assert abs(check.mean - 1.0 / truth) < 2 * check.mean_err
        assert check.reduced_chi_squared < 2


def test_all_optical_decay_rises_under_charge_conversion(config):
    trace = run_sequence(standard_sequence(power=RECHARGE_POWER, pi_pulse=False), config, 294.0, 1,
                         noise=False)
    decay = all_optical_decay(correct_trace(trace, config.detector))
    assert decay.y[-1] > decay.y[0]


def test_scan_rows_follow_temperature_not_order(config):
    sequence = standard_sequence(repetitions=5000)
    forward = temperature_scan(sequence, config, [294.0, 320.0], seed=5).table
    backward = temperature_scan(sequence, config, [320.0, 294.0], seed=5).table
    assert backward["temperature"].tolist() == [320.0, 294.0]
    pd.testing.assert_frame_equal(
        forward.sort_values("temperature").reset_index(drop=True),
        backward.sort_values("temperature").reset_index(drop=True),
    )


def test_temperature_seed_is_order_independent():
    a = np.random.default_rng(temperature_seed(7, 301.0)).integers(2**32, size=4)
    b = np.random.default_rng(temperature_seed(7, 301.0)).integers(2**32, size=4)
    c = np.random.default_rng(temperature_seed(7, 309.0)).integers(2**32, size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize(
    "temps, error",
    [([294.0], InsufficientDataError), ([294.0, 294.0], DomainError), ([0.0, 294.0], DomainError)],
)
def test_scan_validates_temperatures(config, temps, error):
    with pytest.raises(error):
        temperature_scan(standard_sequence(), config, temps, seed=0)


def test_scan_warns_outside_advisory_range(frozen_config, caplog):
    with caplog.at_level(logging.WARNING):
        temperature_scan(standard_sequence(), frozen_config, [200.0, 294.0], seed=0, noise=False)
    assert "advisory" in caplog.text


def test_identity_mapping():
    mapping = identity_mapping()
    assert mapping.a == pytest.approx(1.0, abs=1e-6)
    assert mapping.n == pytest.approx(1.0, abs=1e-6)
    assert mapping.c == pytest.approx(0.0, abs=1e-6)
    value, error = mapping.map(2.0, 0.05)
    assert value == pytest.approx(2.0, abs=1e-6)
    assert error >= 0.05 * 0.999
    with pytest.raises(CalibrationRangeError):
        mapping.map(5.0)


def test_mapping_calibration_errors():
    x = np.linspace(0.9, 3.4, 8)
    rising = np.column_stack([x, np.full(x.size, 0.01)])
    falling = np.column_stack([4.0 - x, np.full(x.size, 0.01)])
    with pytest.raises(CalibrationError):
        calibrate_charge_ratio_mapping(falling, rising)
    with pytest.raises(InsufficientDataError):
        calibrate_charge_ratio_mapping(rising[:3], rising[:3])


def test_nearest_mapping_prefers_lower_on_ties():
    mappings = {294.0: identity_mapping(294.0), 300.0: identity_mapping(300.0)}
    assert nearest_mapping(mappings, 297.0).temperature == 294.0
    assert nearest_mapping(mappings, 299.0).temperature == 300.0
    with pytest.raises(CalibrationError):
        nearest_mapping({}, 294.0)


def test_calibration_pairs(calibration):
    _, pairs = calibration
    assert len(pairs) == 8
    assert pairs["charge_ratio"].is_monotonic_decreasing
    assert pairs["count_ratio"].is_monotonic_decreasing
    mapping = mappings_from_pairs(pairs)[294.0]
    assert mapping.n > 0


def test_ratio_statistic_needs_detector_for_raw_trace(config):
    trace = run_sequence(standard_sequence(power=RECHARGE_POWER), config, 294.0, 1, noise=False)
    with pytest.raises(DomainError):
        ratio_increase_statistic(trace, identity_mapping())


def test_ratio_increase_is_flat_and_matches_model(calibration):
    config, pairs = calibration
    mappings = mappings_from_pairs(pairs)
    sequence = standard_sequence(power=RECHARGE_POWER)
    result = temperature_scan(sequence, config, SCAN_TEMPERATURES, seed=11, mappings=mappings)

    table = result.table.set_index("temperature")
    for temperature in SCAN_TEMPERATURES:
        expected = expected_ratio_increase(sequence, config, temperature)
        assert 1.7 < expected < 1.9
        assert abs(table.loc[temperature, "ratio_increase"] - expected) < 0.1
    check = result.flatness["ratio_increase"]
    assert check.reduced_chi_squared < 2
    assert abs(check.slope) < 2 * check.slope_err


def test_flatness_check():
    check = flatness_check([294.0, 320.0, 348.0], [1.8, 1.8, 1.8], [0.05, 0.05, 0.05])
    assert check.mean == pytest.approx(1.8)
    assert check.reduced_chi_squared == pytest.approx(0.0, abs=1e-20)
    assert check.slope == pytest.approx(0.0, abs=1e-12)
    assert check.slope_err > 0
