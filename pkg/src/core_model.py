"""
Shared physical quantities, configuration containers and dataset types.

All containers are frozen dataclasses validated on construction; numpy arrays
held by them are made read-only so instances can be shared between threads.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from src.errors import DomainError, ShapeError

logger = logging.getLogger("nv-relaxometry")

BOLTZMANN_EV_PER_K = 8.617333262e-5
WAVELENGTH_RANGE_NM = (550.0, 775.0)
ZPL_ZERO_NM = 575.0
ZPL_MINUS_NM = 639.0


def frozen_array(values) -> np.ndarray:
    array = np.array(values, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class TemperatureModel:
    """Phonon model of the longitudinal relaxation rate.

    :param a1: sample-dependent rate (1/s)
    :param a2: Orbach amplitude (1/s)
    :param a3: Raman coefficient (1/(s K^5))
    :param delta: phonon energy (eV)
    """

    # A2, A3 and delta are the bulk-diamond values of Jarmola et al.,
    # Phys. Rev. Lett. 108, 197601 (2012).
    a1: float = 657.0
    a2: float = 2.1e3
    a3: float = 2.2e-11
    delta: float = 0.073

    def __post_init__(self):
        for name in ("a1", "a2", "a3"):
            if getattr(self, name) < 0:
                raise DomainError(f"TemperatureModel.{name} must be >= 0")
        if not self.delta > 0:
            raise DomainError("TemperatureModel.delta must be > 0")


@dataclass(frozen=True)
class RechargeParams:
    """Biexponential NV0 -> NV- recovery in the dark."""

    t_r1: float = 50e-6
    t_r2: float = 2e-3
    weight1: float = 0.6
    n_minus_dark_eq: float = 0.65
    # negative-control hook only; zero keeps recharge temperature independent
    temperature_coefficient: float = 0.0
    reference_temperature: float = 294.0

    def __post_init__(self):
        disabled = math.isinf(self.t_r1) and math.isinf(self.t_r2)
        if not (0 < self.t_r1 < self.t_r2 or disabled):
            raise DomainError("RechargeParams requires 0 < t_r1 < t_r2")
        if not 0.0 <= self.weight1 <= 1.0:
            raise DomainError("RechargeParams.weight1 must lie in [0, 1]")
        if not 0.0 <= self.n_minus_dark_eq <= 1.0:
            raise DomainError("RechargeParams.n_minus_dark_eq must lie in [0, 1]")

    def at_temperature(self, temperature: float) -> "RechargeParams":
        """Recharge times at a temperature (identity unless the hook is set)."""
        if self.temperature_coefficient == 0.0:
            return self
        scale = math.exp(
            -self.temperature_coefficient * (temperature - self.reference_temperature)
        )
        return RechargeParams(
            t_r1=self.t_r1 * scale,
            t_r2=self.t_r2 * scale,
            weight1=self.weight1,
            n_minus_dark_eq=self.n_minus_dark_eq,
        )


@dataclass(frozen=True)
class EmissionParams:
    """Power dependence of charge state, spin pumping and channel emission."""

    brightness_minus: float = 5e10
    brightness_zero: float = 3e10
    spin_contrast: float = 0.3
    sat_power_spin: float = 2e-6
    sat_power_charge: float = 0.3e-3
    f_low: float = 0.66
    f_high: float = 0.18
    crosstalk_minus_in_zero: float = 0.02
    crosstalk_zero_in_minus: float = 0.05
    charge_time_unit: float = 5.6e-6
    spin_time_unit: float = 40e-6
    pump_polarization: float = -1.0

    def __post_init__(self):
        if not (self.brightness_minus > 0 and self.brightness_zero > 0):
            raise DomainError("EmissionParams brightnesses must be > 0")
        if not 0.0 <= self.spin_contrast < 1.0:
            raise DomainError("EmissionParams.spin_contrast must lie in [0, 1)")
        if not (self.sat_power_spin > 0 and self.sat_power_charge > 0):
            raise DomainError("EmissionParams saturation powers must be > 0")
        if not (0 < self.f_high < self.f_low < 1):
            raise DomainError("EmissionParams requires 0 < f_high < f_low < 1")
        for name in ("crosstalk_minus_in_zero", "crosstalk_zero_in_minus"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise DomainError(f"EmissionParams.{name} must lie in [0, 1)")
        if not (self.charge_time_unit > 0 and self.spin_time_unit > 0):
            raise DomainError("EmissionParams time units must be > 0")
        if not -1.0 <= self.pump_polarization <= 1.0:
            raise DomainError("EmissionParams.pump_polarization must lie in [-1, 1]")


@dataclass(frozen=True)
class DetectorConfig:
    """SPCM pair behind the NV- (>665 nm) and NV0 (<600 nm) filters."""

    dark_rate_minus: float = 200.0
    dark_rate_zero: float = 200.0
    nd_transmission_minus: float = 0.8
    nd_transmission_zero: float = 0.9
    saturation_rate: float = 2e7

    def __post_init__(self):
        if self.dark_rate_minus < 0 or self.dark_rate_zero < 0:
            raise DomainError("DetectorConfig dark rates must be >= 0")
        for name in ("nd_transmission_minus", "nd_transmission_zero"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise DomainError(f"DetectorConfig.{name} must lie in (0, 1]")
        if not self.saturation_rate > 0:
            raise DomainError("DetectorConfig.saturation_rate must be > 0")

    def dark_rate(self, channel: str) -> float:
        return self.dark_rate_minus if channel == "minus" else self.dark_rate_zero

    def transmission(self, channel: str) -> float:
        return (
            self.nd_transmission_minus
            if channel == "minus"
            else self.nd_transmission_zero
        )


@dataclass(frozen=True)
class SpectralParams:
    """Synthetic spectrum model: lineshapes, temperature trends, count levels."""

    grid_points: int = 1024
    grid_curvature: float = 0.08
    counts_scale: float = 1e11
    optical_saturation_power: float = 2e-3
    target_counts: float = 2e7
    max_exposure: float = 10.0
    zpl_zero_center: float = ZPL_ZERO_NM
    zpl_minus_center: float = ZPL_MINUS_NM
    zpl_zero_fwhm: float = 1.2
    zpl_minus_fwhm: float = 1.5
    zpl_zero_area: float = 0.05
    zpl_minus_area: float = 0.04
    zpl_shift_per_kelvin: float = 0.01
    zpl_broadening_per_kelvin: float = 0.02
    reference_temperature: float = 294.0

    def __post_init__(self):
        if self.grid_points < 16:
            raise DomainError("SpectralParams.grid_points must be >= 16")
        if not 0.0 <= self.grid_curvature < 1.0:
            raise DomainError("SpectralParams.grid_curvature must lie in [0, 1)")
        for name in (
            "counts_scale",
            "optical_saturation_power",
            "target_counts",
            "max_exposure",
            "zpl_zero_fwhm",
            "zpl_minus_fwhm",
        ):
            if not getattr(self, name) > 0:
                raise DomainError(f"SpectralParams.{name} must be > 0")
        for name in ("zpl_zero_area", "zpl_minus_area"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise DomainError(f"SpectralParams.{name} must lie in (0, 1)")


@dataclass(frozen=True)
class PhysicsConfig:
    """Everything the simulator and the analysis chain are parameterized by."""

    kappa_lambda: float = 1.65
    zfs_ref: float = 2.8697e9
    zfs_ref_temperature: float = 294.0
    zfs_slope: float = -74.2e3
    zfs_slope_err: float = 0.7e3
    t1_model: TemperatureModel = field(default_factory=TemperatureModel)
    recharge: RechargeParams = field(default_factory=RechargeParams)
    emission: EmissionParams = field(default_factory=EmissionParams)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    spectrum: SpectralParams = field(default_factory=SpectralParams)
    boltzmann_k: float = BOLTZMANN_EV_PER_K

    def __post_init__(self):
        if not self.zfs_slope < 0:
            raise DomainError("PhysicsConfig.zfs_slope must be < 0")
        if not self.kappa_lambda > 0:
            raise DomainError("PhysicsConfig.kappa_lambda must be > 0")
        if not self.boltzmann_k > 0:
            raise DomainError("PhysicsConfig.boltzmann_k must be > 0")
        if self.zfs_slope_err < 0:
            raise DomainError("PhysicsConfig.zfs_slope_err must be >= 0")


@dataclass(frozen=True)
class Spectrum:
    """Background-subtracted, exposure-corrected fluorescence spectrum.

    :param wavelengths: nm, strictly ascending
    :param intensities: counts/s per wavelength sample
    :param laser_power: W
    :param temperature: K
    :param exposure: s
    """

    wavelengths: np.ndarray
    intensities: np.ndarray
    laser_power: float
    temperature: float
    exposure: float

    def __post_init__(self):
        wavelengths = frozen_array(self.wavelengths)
        intensities = frozen_array(self.intensities)
        object.__setattr__(self, "wavelengths", wavelengths)
        object.__setattr__(self, "intensities", intensities)
        if wavelengths.ndim != 1 or wavelengths.shape != intensities.shape:
            raise ShapeError("wavelengths and intensities must be 1-D of equal length")
        if wavelengths.size < 2 or np.any(np.diff(wavelengths) <= 0):
            raise DomainError("wavelengths must be strictly ascending")
        low, high = WAVELENGTH_RANGE_NM
        if wavelengths[0] < low - 1e-9 or wavelengths[-1] > high + 1e-9:
            raise DomainError(f"wavelengths must lie within [{low}, {high}] nm")
        if not np.all(np.isfinite(intensities)):
            raise DomainError("intensities must be finite")
        if not self.exposure > 0:
            raise DomainError("exposure must be > 0")
        if self.laser_power < 0:
            raise DomainError("laser_power must be >= 0")

    def with_intensities(self, intensities) -> "Spectrum":
        return Spectrum(
            self.wavelengths,
            intensities,
            self.laser_power,
            self.temperature,
            self.exposure,
        )

    def same_grid(self, other_wavelengths: np.ndarray) -> bool:
        return self.wavelengths.shape == np.shape(other_wavelengths) and np.allclose(
            self.wavelengths, other_wavelengths, rtol=0, atol=1e-9
        )


@dataclass(frozen=True)
class FitResult:
    """Weighted least-squares estimate with its covariance."""

    params: np.ndarray
    std_errors: np.ndarray
    covariance: np.ndarray
    chi_squared: float
    dof: int
    param_names: Tuple[str, ...] = ()
    model_id: str = ""
    converged: bool = True
    n_iterations: int = 0
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        params = frozen_array(self.params)
        covariance = frozen_array(self.covariance).reshape(params.size, params.size)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "covariance", covariance)
        object.__setattr__(self, "std_errors", frozen_array(self.std_errors))
        if not self.param_names:
            object.__setattr__(
                self, "param_names", tuple(f"p{i}" for i in range(params.size))
            )
        if self.dof < 1:
            raise DomainError("FitResult.dof must be >= 1")

    @property
    def reduced_chi_squared(self) -> float:
        return self.chi_squared / self.dof

    def index(self, name: str) -> int:
        return self.param_names.index(name)

    def value(self, name: str) -> float:
        return float(self.params[self.index(name)])

    def error(self, name: str) -> float:
        return float(self.std_errors[self.index(name)])

    def as_dict(self) -> Dict:
        return {
            "model": self.model_id,
            "params": {n: float(v) for n, v in zip(self.param_names, self.params)},
            "std_errors": {
                n: float(v) for n, v in zip(self.param_names, self.std_errors)
            },
            "covariance": [[float(v) for v in row] for row in self.covariance],
            "chi_squared": float(self.chi_squared),
            "dof": int(self.dof),
            "reduced_chi_squared": float(self.reduced_chi_squared),
            "converged": bool(self.converged),
            "iterations": int(self.n_iterations),
            "flags": list(self.flags),
        }


def phonon_rate(
    model: TemperatureModel,
    temperature: float,
    boltzmann_k: float = BOLTZMANN_EV_PER_K,
) -> float:
    """Orbach and Raman contributions to 1/T1 (everything except A1)."""
    if not temperature > 0:
        raise DomainError(f"temperature must be > 0 K, got {temperature}")
    orbach = 0.0
    if model.a2 > 0:
        orbach = model.a2 / math.expm1(model.delta / (boltzmann_k * temperature))
    return orbach + model.a3 * temperature**5


def t1_rate(
    model: TemperatureModel,
    temperature: float,
    boltzmann_k: float = BOLTZMANN_EV_PER_K,
) -> float:
    """Longitudinal relaxation rate 1/T1 (1/s) at a temperature (K)."""
    return model.a1 + phonon_rate(model, temperature, boltzmann_k)


def temperature_from_zfs(
    d_measured: float,
    d_ref: float,
    t_ref: float,
    slope: float,
    d_err: float = 0.0,
    slope_err: float = 0.7e3,
) -> Tuple[float, float]:
    """Temperature from a zero-field splitting measurement.

    :param d_measured: measured splitting (Hz)
    :param d_ref: splitting at t_ref (Hz)
    :param t_ref: reference temperature (K)
    :param slope: dD/dT (Hz/K)
    :param d_err: standard error of d_measured from the resonance fit (Hz)
    :param slope_err: standard error of the slope (Hz/K)
    :return: temperature and its standard error (K)
    """
    if slope == 0:
        raise DomainError("ZFS temperature slope must be non-zero")
    shift = d_measured - d_ref
    temperature = t_ref + shift / slope
    error = math.hypot(d_err / slope, shift * slope_err / slope**2)
    return temperature, error


def zfs_from_temperature(
    temperature: float, d_ref: float, t_ref: float, slope: float
) -> float:
    return d_ref + slope * (temperature - t_ref)


def zfs_from_resonances(
    f_low: float, f_low_err: float, f_high: float, f_high_err: float
) -> Tuple[float, float]:
    """Zero-field splitting from the two field-split resonances."""
    return (f_low + f_high) / 2, math.hypot(f_low_err, f_high_err) / 2


def config_summary(config: PhysicsConfig) -> List[str]:
    """Lines describing a configuration, for output headers."""
    model = config.t1_model
    recharge = config.recharge
    return [
        f"kappa_lambda = {config.kappa_lambda:.10g}",
        f"t1_model = A1 {model.a1:.10g}, A2 {model.a2:.10g}, "
        f"A3 {model.a3:.10g}, delta {model.delta:.10g}",
        f"recharge = T_R1 {recharge.t_r1:.10g}, T_R2 {recharge.t_r2:.10g}, "
        f"w1 {recharge.weight1:.10g}, n_dark {recharge.n_minus_dark_eq:.10g}",
    ]
