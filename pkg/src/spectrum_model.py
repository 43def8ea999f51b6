"""
Synthetic NV- / NV0 fluorescence spectra.

Each charge state emits a unit-area lineshape: Gaussian phonon sidebands plus
a Lorentzian zero-phonon line whose center and width follow linear
temperature trends. Spectra are sampled on a non-uniform grid, like a
spectrometer after wavelength calibration, and carry shot noise from an
exposure chosen to reach a target count.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid

from src.core_model import WAVELENGTH_RANGE_NM, PhysicsConfig, SpectralParams, Spectrum
from src.errors import DomainError
from src.photophysics import steady_state_fraction
from src.spectra import BasisSet

logger = logging.getLogger("nv-relaxometry")

# (center nm, sigma nm, weight) of the phonon-sideband Gaussians
SIDEBAND_ZERO = ((595.0, 10.0, 0.35), (620.0, 15.0, 0.45), (660.0, 22.0, 0.2))
SIDEBAND_MINUS = ((665.0, 12.0, 0.25), (690.0, 18.0, 0.45), (725.0, 22.0, 0.3))

# powers of the basis references, the high-power one NV0-rich
REFERENCE_POWER_ZERO = 4e-3
REFERENCE_POWER_MINUS = 8e-6


def wavelength_grid(params: SpectralParams) -> np.ndarray:
    """Strictly ascending, mildly non-uniform grid spanning 550-775 nm."""
    low, high = WAVELENGTH_RANGE_NM
    u = np.linspace(0.0, 1.0, params.grid_points)
    return low + (high - low) * (u + params.grid_curvature * u * (1.0 - u))


def zpl_center(params: SpectralParams, component: str, temperature: float) -> float:
    nominal = params.zpl_minus_center if component == "minus" else params.zpl_zero_center
    return nominal + params.zpl_shift_per_kelvin * (temperature - params.reference_temperature)


def zpl_fwhm(params: SpectralParams, component: str, temperature: float) -> float:
    nominal = params.zpl_minus_fwhm if component == "minus" else params.zpl_zero_fwhm
    fwhm = nominal + params.zpl_broadening_per_kelvin * (temperature - params.reference_temperature)
    if not fwhm > 0:
        raise DomainError(f"ZPL width at {temperature} K is not positive")
    return fwhm


def _unit_area(grid, values):
    return values / trapezoid(values, grid)


def lineshape(grid: np.ndarray, params: SpectralParams, component: str, temperature: float) -> np.ndarray:
    """Unit-area emission lineshape of one charge state at a temperature."""
    if component not in ("minus", "zero"):
        raise DomainError(f"unknown component {component!r}")
    sidebands = SIDEBAND_MINUS if component == "minus" else SIDEBAND_ZERO
    area = params.zpl_minus_area if component == "minus" else params.zpl_zero_area
    psb = sum(w * np.exp(-0.5 * ((grid - c) / s) ** 2) for c, s, w in sidebands)
    half = zpl_fwhm(params, component, temperature) / 2
    zpl = half**2 / ((grid - zpl_center(params, component, temperature)) ** 2 + half**2)
    return _unit_area(grid, (1 - area) * _unit_area(grid, psb) + area * _unit_area(grid, zpl))


def expected_spectrum(
    config: PhysicsConfig,
    power: float,
    temperature: float,
    n_minus: Optional[float] = None,
    exposure: Optional[float] = None,
) -> Spectrum:
    """Noise-free spectrum (counts/s per nm) at a laser power and temperature.

    :param n_minus: NV- fraction, steady_state_fraction(power) when None
    :param exposure: seconds, chosen to reach the target count when None
    """
    if not power > 0:
        raise DomainError("laser power must be > 0")
    params = config.spectrum
    grid = wavelength_grid(params)
    if n_minus is None:
        n_minus = steady_state_fraction(power, config.emission)
    saturation = 1.0 / (1.0 + power / params.optical_saturation_power)
    scale = params.counts_scale * power * saturation
    weight_minus = scale * config.kappa_lambda * n_minus
    weight_zero = scale * (1.0 - n_minus)
    intensities = (
        weight_minus * lineshape(grid, params, "minus", temperature)
        + weight_zero * lineshape(grid, params, "zero", temperature)
    )
    if exposure is None:
        total_rate = weight_minus + weight_zero
        exposure = min(params.max_exposure, params.target_counts / total_rate)
    return Spectrum(grid, intensities, power, temperature, exposure)


def add_shot_noise(spectrum: Spectrum, rng: np.random.Generator) -> Spectrum:
    """Poisson counts per grid sample over the exposure, converted back to counts/s per nm."""
    bin_width = np.gradient(spectrum.wavelengths)
    scale = bin_width * spectrum.exposure
    counts = rng.poisson(np.clip(spectrum.intensities, 0.0, None) * scale)
    return spectrum.with_intensities(counts / scale)


def simulate_spectrum(
    config: PhysicsConfig,
    power: float,
    temperature: float,
    rng: np.random.Generator,
    n_minus: Optional[float] = None,
) -> Spectrum:
    return add_shot_noise(expected_spectrum(config, power, temperature, n_minus), rng)


def simulate_calibration_series(
    config: PhysicsConfig,
    powers: Sequence[float],
    temperature: float,
    rng: np.random.Generator,
    n_minus: float = 0.5,
) -> List[Tuple[float, Spectrum]]:
    """Low-power spectra with balanced charge populations.

    With equal NV- and NV0 populations the quotient of the component slopes
    equals the per-emitter brightness ratio kappa.
    """
    return [
        (float(p), simulate_spectrum(config, p, temperature, rng, n_minus=n_minus))
        for p in powers
    ]


def reference_pair(
    config: PhysicsConfig, temperature: float, rng: Optional[np.random.Generator] = None
) -> Tuple[Spectrum, Spectrum]:
    """(NV0-rich, NV--rich) basis references at 4 mW and 8 uW."""
    pair = [
        expected_spectrum(config, REFERENCE_POWER_ZERO, temperature),
        expected_spectrum(config, REFERENCE_POWER_MINUS, temperature),
    ]
    if rng is not None:
        pair = [add_shot_noise(s, rng) for s in pair]
    return pair[0], pair[1]


def model_basis(config: PhysicsConfig, temperature: float) -> BasisSet:
    """Basis of the model's own lineshapes (no subtraction needed)."""
    grid = wavelength_grid(config.spectrum)
    return BasisSet(
        basis_minus=lineshape(grid, config.spectrum, "minus", temperature),
        basis_zero=lineshape(grid, config.spectrum, "zero", temperature),
        delta0=0.0,
        delta_minus=0.0,
        wavelength_grid=grid,
        temperature=temperature,
    )
