"""
Trace evaluations and the temperature-scan orchestration.

Three evaluations turn a RelaxometryTrace into decay curves:

- pi_pulse_decay: NV- signal without pi minus signal with pi (spin only)
- all_optical_decay: NV- signal over normalization, without pi
- recharge_decay: NV0 signal over normalization, without pi

The curves feed the monoexponential (T1) and biexponential (recharge) fits,
and the per-temperature rates feed the phonon-model fit of A1.
"""
import logging
import math
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.core_model import DetectorConfig, FitResult, PhysicsConfig, t1_rate
from src.detection import channel_generators, correct_counts, correct_trace, sample_counts
from src.errors import (
    CalibrationError,
    CalibrationRangeError,
    DegenerateTraceError,
    DomainError,
    InsufficientDataError,
    RelaxometryError,
    ShapeError,
    StructureError,
)
from src.fitting import (
    fit_biexp,
    fit_monoexp,
    fit_power_law,
    fit_t1_temperature_model,
    weighted_linear_fit,
    weighted_mean_constant,
)
from src.photophysics import emission_rates, run_sequence, steady_state
from src.pulse_sequence import PulseSequence
from src.spectra import decompose, nv_minus_fraction
from src.spectrum_model import model_basis, simulate_spectrum
from src.traces import RelaxometryTrace

logger = logging.getLogger("nv-relaxometry")

DecaySeries = namedtuple("DecaySeries", ["tau", "y", "sigma"])
RatioIncrease = namedtuple(
    "RatioIncrease", ["value", "std_error", "ratio_first", "ratio_last"]
)
FlatnessCheck = namedtuple(
    "FlatnessCheck", ["reduced_chi_squared", "mean", "mean_err", "slope", "slope_err"]
)

ADVISORY_TEMPERATURES = (250.0, 400.0)
RECHARGE_POWER_THRESHOLD = 0.1e-3
CALIBRATION_POWERS = tuple(np.geomspace(20e-6, 1e-3, 8))


def _floor_sigma(sigma: np.ndarray) -> np.ndarray:
    positive = sigma[sigma > 0]
    floor = positive.min() if positive.size else 1.0
    return np.where(sigma > 0, sigma, floor)


def _ratio(numerator, num_err, denominator, den_err) -> Tuple[np.ndarray, np.ndarray]:
    if np.any(denominator <= 0):
        raise DegenerateTraceError("normalization counts are zero")
    ratio = numerator / denominator
    error = np.abs(ratio) * np.hypot(
        num_err / np.where(numerator == 0, 1.0, numerator), den_err / denominator
    )
    return ratio, error


def pi_pulse_decay(trace: RelaxometryTrace) -> DecaySeries:
    """Signal-window NV- counts without pi minus with pi."""
    if not (trace.has_half("with_pi") and trace.has_half("without_pi")):
        raise StructureError("pi-pulse evaluation needs both halves of the sequence")
    tau, without, without_err = trace.cell("without_pi", "signal", "minus")
    _, with_pi, with_err = trace.cell("with_pi", "signal", "minus")
    return DecaySeries(tau, without - with_pi, _floor_sigma(np.hypot(without_err, with_err)))


def _window_ratio(trace: RelaxometryTrace, channel: str) -> DecaySeries:
    if not trace.has_half("without_pi"):
        raise StructureError("trace has no half without pi pulse")
    tau, signal, signal_err = trace.cell("without_pi", "signal", channel)
    _, norm, norm_err = trace.cell("without_pi", "normalization", channel)
    ratio, error = _ratio(signal, signal_err, norm, norm_err)
    return DecaySeries(tau, ratio, _floor_sigma(error))


def all_optical_decay(trace: RelaxometryTrace) -> DecaySeries:
    """NV- signal over normalization counts in the half without pi pulse."""
    return _window_ratio(trace, "minus")


def recharge_decay(trace: RelaxometryTrace) -> DecaySeries:
    """NV0 signal over normalization counts; decays as NV0 recharges."""
    return _window_ratio(trace, "zero")


@dataclass(frozen=True)
class ChargeRatioMapping:
    """Power-law map from SPCM count ratio to charge ratio [NV-]/[NV0].

    :param a, n, c: parameters of a x^n + c
    :param x_min, x_max: count-ratio range covered by the calibration
    """

    a: float
    n: float
    c: float
    x_min: float
    x_max: float
    fit: FitResult
    temperature: Optional[float] = None

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise CalibrationError("mapping validity range is empty")
        if not (self.a > 0 and self.n > 0):
            raise CalibrationError(
                f"mapping is not strictly increasing (a = {self.a:.4g}, n = {self.n:.4g})"
            )

    def in_range(self, x: float) -> bool:
        slack = 1e-12 * (self.x_max - self.x_min)
        return self.x_min - slack <= x <= self.x_max + slack

    def map(self, x: float, x_err: float = 0.0) -> Tuple[float, float]:
        """Charge ratio and its error (mapping covariance plus count-ratio error)."""
        if not self.in_range(x):
            raise CalibrationRangeError(
                f"count ratio {x:.6g} outside calibrated range "
                f"[{self.x_min:.6g}, {self.x_max:.6g}]"
            )
        xn = x**self.n
        value = self.a * xn + self.c
        grad = np.array([xn, self.a * xn * math.log(x), 1.0])
        variance = grad @ self.fit.covariance @ grad
        variance += (self.a * self.n * x ** (self.n - 1) * x_err) ** 2
        return float(value), float(math.sqrt(max(variance, 0.0)))


def calibrate_charge_ratio_mapping(
    charge_ratios: Sequence[Tuple[float, float]],
    count_ratios: Sequence[Tuple[float, float]],
    temperature: Optional[float] = None,
) -> ChargeRatioMapping:
    """Fit charge ratio = a (count ratio)^n + c with errors in both variables.

    A first fit uses the charge-ratio errors only; the second adds the
    count-ratio errors through the local slope (effective variance).

    :param charge_ratios: ([NV-]/[NV0], sigma) pairs from the spectra
    :param count_ratios: (ch_minus/ch_zero, sigma) pairs from the SPCMs
    """
    charge = np.asarray(charge_ratios, dtype=float)
    counts = np.asarray(count_ratios, dtype=float)
    if charge.shape != counts.shape or charge.ndim != 2 or charge.shape[1] != 2:
        raise ShapeError("calibration needs paired (value, sigma) rows")
    if charge.shape[0] < 4:
        raise InsufficientDataError("calibration needs at least four pairs")
    order = np.argsort(counts[:, 0])
    x, x_err = counts[order, 0], counts[order, 1]
    y, y_err = charge[order, 0], charge[order, 1]

    fit = fit_power_law(x, y, y_err)
    a, n, _ = fit.params
    slope = a * n * x ** (n - 1)
    fit = fit_power_law(x, y, np.sqrt(y_err**2 + (slope * x_err) ** 2))
    a, n, c = fit.params
    mapping = ChargeRatioMapping(
        a=float(a), n=float(n), c=float(c),
        x_min=float(x.min()), x_max=float(x.max()),
        fit=fit, temperature=temperature,
    )
    logger.debug(
        f"Charge-ratio mapping at {temperature} K: a = {a:.5g}, n = {n:.5g}, c = {c:.5g}"
    )
    return mapping


def _count_ratio(trace: RelaxometryTrace, index: int) -> Tuple[float, float]:
    _, minus, minus_err = trace.cell("without_pi", "signal", "minus")
    _, zero, zero_err = trace.cell("without_pi", "signal", "zero")
    ratio, error = _ratio(minus[index], minus_err[index], zero[index], zero_err[index])
    return float(ratio), float(error)


def ratio_increase_statistic(
    trace: RelaxometryTrace,
    mapping: ChargeRatioMapping,
    detector: Optional[DetectorConfig] = None,
) -> RatioIncrease:
    """Charge ratio at the last tau over the charge ratio at the first tau.

    Count ratios come from the signal window of the half without pi. Raw
    traces are corrected with ``detector`` first, since mappings are
    calibrated on corrected rates.
    """
    if trace.provenance == "raw":
        if detector is None:
            raise DomainError("raw trace needs a detector configuration for correction")
        trace = correct_trace(trace, detector)
    if not trace.has_half("without_pi"):
        raise StructureError("trace has no half without pi pulse")
    first, first_err = mapping.map(*_count_ratio(trace, 0))
    last, last_err = mapping.map(*_count_ratio(trace, -1))
    if not first > 0:
        raise CalibrationError("mapped charge ratio at the first tau is not positive")
    value = last / first
    error = abs(value) * math.hypot(last_err / last, first_err / first)
    return RatioIncrease(value, error, first, last)


def nearest_mapping(
    mappings: Mapping[float, ChargeRatioMapping], temperature: float
) -> ChargeRatioMapping:
    if not mappings:
        raise CalibrationError("no charge-ratio mappings available")
    key = min(mappings, key=lambda t: (abs(t - temperature), t))
    return mappings[key]


def simulate_calibration_pairs(
    config: PhysicsConfig,
    temperature: float,
    rng: np.random.Generator,
    powers: Sequence[float] = CALIBRATION_POWERS,
    duration: float = 1.0,
) -> pd.DataFrame:
    """Spectra-derived charge ratios against SPCM count ratios under CW light.

    Charge ratios come from decomposing simulated spectra with the model
    lineshapes and applying kappa; count ratios from detector counts of the
    steady state, dark-subtracted and transmission-corrected.
    """
    t1 = 1.0 / t1_rate(config.t1_model, temperature, config.boltzmann_k)
    basis = model_basis(config, temperature)
    minus_rng, zero_rng = channel_generators(int(rng.integers(2**32)))
    rows = []
    for power in powers:
        spectrum = simulate_spectrum(config, power, temperature, rng)
        fraction = nv_minus_fraction(decompose(spectrum, basis), config.kappa_lambda)
        charge_ratio = fraction.value / (1.0 - fraction.value)
        charge_err = fraction.std_error / (1.0 - fraction.value) ** 2

        rates = emission_rates(steady_state(power, config.emission, t1), power, config.emission)
        corrected = []
        for channel, rate, channel_rng in zip(("minus", "zero"), rates, (minus_rng, zero_rng)):
            raw = sample_counts(rate, duration, config.detector, channel, channel_rng)
            corrected.append(correct_counts(raw, duration, config.detector, channel))
        count_ratio, count_err = _ratio(
            corrected[0].rate, corrected[0].std_error, corrected[1].rate, corrected[1].std_error
        )
        rows.append({
            "temperature": float(temperature),
            "power": float(power),
            "charge_ratio": charge_ratio,
            "charge_ratio_err": charge_err,
            "count_ratio": float(count_ratio),
            "count_ratio_err": float(count_err),
        })
    return pd.DataFrame(rows)


def mappings_from_pairs(pairs: pd.DataFrame) -> Dict[float, ChargeRatioMapping]:
    """One mapping per temperature of a calibration-pairs table."""
    mappings = {}
    for temperature, group in pairs.groupby("temperature", sort=True):
        mappings[float(temperature)] = calibrate_charge_ratio_mapping(
            group[["charge_ratio", "charge_ratio_err"]].to_numpy(),
            group[["count_ratio", "count_ratio_err"]].to_numpy(),
            temperature=float(temperature),
        )
    return mappings


def flatness_check(temps, values, sigmas) -> FlatnessCheck:
    """Zero-slope and straight-line weighted fits of a quantity against temperature."""
    constant = weighted_mean_constant(values, sigmas)
    line = weighted_linear_fit(temps, values, sigmas)
    return FlatnessCheck(
        reduced_chi_squared=constant.reduced_chi_squared,
        mean=constant.value("value"),
        mean_err=constant.error("value"),
        slope=line.value("slope"),
        slope_err=line.error("slope"),
    )


SCAN_COLUMNS = [
    "temperature",
    "inv_t1_pi", "inv_t1_pi_err",
    "inv_t1_all_optical", "inv_t1_all_optical_err",
    "inv_t_r1", "inv_t_r1_err",
    "inv_t_r2", "inv_t_r2_err",
    "ratio_increase", "ratio_increase_err",
    "status",
]


@dataclass
class ScanResult:
    """Per-temperature rates plus everything needed to report them."""

    table: pd.DataFrame
    traces: Dict[float, RelaxometryTrace] = field(default_factory=dict)
    fits: Dict[float, Dict[str, FitResult]] = field(default_factory=dict)
    temperature_fits: Dict[str, FitResult] = field(default_factory=dict)
    flatness: Dict[str, FlatnessCheck] = field(default_factory=dict)

    @property
    def failed_cells(self) -> int:
        return int((self.table["status"] != "ok").sum())

    @property
    def partial(self) -> bool:
        return self.failed_cells > 0

    @property
    def any_fit(self) -> bool:
        return any(self.fits.values())


def temperature_seed(seed: int, temperature: float) -> np.random.SeedSequence:
    """RNG stream keyed by (seed, temperature), independent of scan order."""
    return np.random.SeedSequence([int(seed), int(round(temperature * 1000))])


def _rate_from_time(fit: FitResult, name: str) -> Tuple[float, float]:
    value, error = fit.value(name), fit.error(name)
    return 1.0 / value, error / value**2


# (column, parameter) pairs each fit contributes to a scan row
_FIT_COLUMNS = {
    "pi": (("inv_t1_pi", "T"),),
    "all_optical": (("inv_t1_all_optical", "T"),),
    "recharge": (("inv_t_r1", "T_R1"), ("inv_t_r2", "T_R2")),
}


def _evaluate_temperature(
    trace: RelaxometryTrace,
    config: PhysicsConfig,
    recharge_analysis: bool,
    mappings: Optional[Mapping[float, ChargeRatioMapping]],
) -> Tuple[Dict, Dict[str, FitResult]]:
    corrected = correct_trace(trace, config.detector)
    row = {"temperature": trace.temperature}
    fits: Dict[str, FitResult] = {}
    failures: List[str] = []

    evaluations = {"all_optical": (fit_monoexp, all_optical_decay)}
    if trace.has_half("with_pi"):
        evaluations["pi"] = (fit_monoexp, pi_pulse_decay)
    if recharge_analysis:
        evaluations["recharge"] = (fit_biexp, recharge_decay)

    for name, (fit_function, evaluation) in evaluations.items():
        try:
            fits[name] = fit_function(*evaluation(corrected))
        except RelaxometryError as e:
            logger.warning(f"{name} fit failed at {trace.temperature} K: {e}")
            failures.append(name)
            continue
        for column, time_name in _FIT_COLUMNS[name]:
            row[column], row[f"{column}_err"] = _rate_from_time(fits[name], time_name)

    if mappings:
        try:
            statistic = ratio_increase_statistic(
                corrected, nearest_mapping(mappings, trace.temperature)
            )
            row["ratio_increase"], row["ratio_increase_err"] = statistic.value, statistic.std_error
        except RelaxometryError as e:
            logger.warning(f"Ratio-increase statistic failed at {trace.temperature} K: {e}")
            failures.append("ratio_increase")

    row["status"] = "ok" if not failures else "failed:" + "+".join(failures)
    return row, fits


def _temperature_model_fit(
    table: pd.DataFrame, columns: Sequence[str], config: PhysicsConfig
) -> Optional[FitResult]:
    temps, rates, errors = [], [], []
    for column in columns:
        valid = table[[column, f"{column}_err"]].notna().all(axis=1) & (table[f"{column}_err"] > 0)
        temps.append(table.loc[valid, "temperature"].to_numpy())
        rates.append(table.loc[valid, column].to_numpy())
        errors.append(table.loc[valid, f"{column}_err"].to_numpy())
    temps = np.concatenate(temps)
    if temps.size < 2:
        return None
    model = config.t1_model
    return fit_t1_temperature_model(
        temps, np.concatenate(rates), np.concatenate(errors),
        a2=model.a2, a3=model.a3, delta=model.delta, boltzmann_k=config.boltzmann_k,
    )


def temperature_scan(
    sequence: PulseSequence,
    config: PhysicsConfig,
    temps: Iterable[float],
    seed: int,
    mappings: Optional[Mapping[float, ChargeRatioMapping]] = None,
    recharge_analysis: Optional[bool] = None,
    noise: bool = True,
) -> ScanResult:
    """Simulate, evaluate and fit the relaxometry sequence at each temperature.

    Failed fits leave NaN cells and a status entry instead of aborting; the
    phonon-model fits use whatever temperatures survive (at least two).

    :param recharge_analysis: biexponential recharge fit; by default on for
        powers of at least 0.1 mW
    :param mappings: per-temperature charge-ratio mappings enabling the
        ratio-increase statistic
    """
    temps = [float(t) for t in temps]
    if len(temps) < 2:
        raise InsufficientDataError("a temperature scan needs at least two temperatures")
    if len(set(temps)) != len(temps):
        raise DomainError("scan temperatures must be distinct")
    low, high = ADVISORY_TEMPERATURES
    for t in temps:
        if not t > 0:
            raise DomainError(f"temperature must be > 0 K, got {t}")
        if not low <= t <= high:
            logger.warning(f"{t} K lies outside the advisory range {low}-{high} K")
    if recharge_analysis is None:
        power = sequence.power if sequence.power is not None else 0.0
        recharge_analysis = power >= RECHARGE_POWER_THRESHOLD

    rows, traces, fits = [], {}, {}
    for temperature in temps:
        logger.info(f"Scanning {temperature} K")
        trace = run_sequence(
            sequence, config, temperature, temperature_seed(seed, temperature), noise=noise
        )
        row, cell_fits = _evaluate_temperature(trace, config, recharge_analysis, mappings)
        rows.append(row)
        traces[temperature] = trace
        fits[temperature] = cell_fits

    table = pd.DataFrame(rows).reindex(columns=SCAN_COLUMNS)
    result = ScanResult(table=table, traces=traces, fits=fits)

    column_sets = {"pi": ["inv_t1_pi"], "all_optical": ["inv_t1_all_optical"]}
    column_sets["pooled"] = column_sets["pi"] + column_sets["all_optical"]
    for name, columns in column_sets.items():
        fit = _temperature_model_fit(table, columns, config)
        if fit is not None:
            result.temperature_fits[name] = fit

    for column in ("inv_t_r1", "inv_t_r2", "ratio_increase"):
        valid = table[[column, f"{column}_err"]].notna().all(axis=1)
        if valid.sum() >= 3:
            result.flatness[column] = flatness_check(
                table.loc[valid, "temperature"], table.loc[valid, column],
                table.loc[valid, f"{column}_err"],
            )
    return result
