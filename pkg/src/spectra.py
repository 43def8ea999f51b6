"""
Spectral analysis: NV-/NV0 basis construction, nonnegative decomposition,
kappa estimation, NV- fractions and zero-phonon line fits.
"""
import logging
from collections import namedtuple
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import optimize
from scipy.integrate import trapezoid

from src.core_model import (
    ZPL_MINUS_NM,
    ZPL_ZERO_NM,
    FitResult,
    Spectrum,
    frozen_array,
)
from src.errors import (
    DegenerateBasisError,
    DegenerateCalibrationError,
    DegenerateInputError,
    DomainError,
    InsufficientDataError,
    ShapeError,
)
from src.fitting import fit_lorentzian, weighted_linear_fit

logger = logging.getLogger("nv-relaxometry")

COMPONENTS = ("minus", "zero")
NOMINAL_ZPL = {"zero": ZPL_ZERO_NM, "minus": ZPL_MINUS_NM}
ZPL_WINDOWS = {"zero": (570.0, 580.0), "minus": (634.0, 644.0)}
NV0_WINDOW = (550.0, 600.0)

Fraction = namedtuple("Fraction", ["value", "std_error"])
KappaEstimate = namedtuple("KappaEstimate", ["kappa", "std_error", "fit_minus", "fit_zero"])


def area_normalize(wavelengths: np.ndarray, intensities: np.ndarray) -> np.ndarray:
    """Scale intensities to unit trapezoidal area on their own grid."""
    area = trapezoid(intensities, wavelengths)
    if not area > 0:
        raise DegenerateInputError("spectrum has no positive area")
    return np.asarray(intensities, dtype=float) / area


@dataclass(frozen=True)
class BasisSet:
    """Area-normalized NV- and NV0 basis functions on a shared grid."""

    basis_minus: np.ndarray
    basis_zero: np.ndarray
    delta0: float
    delta_minus: float
    wavelength_grid: np.ndarray
    temperature: Optional[float] = None

    def __post_init__(self):
        for name in ("basis_minus", "basis_zero", "wavelength_grid"):
            object.__setattr__(self, name, frozen_array(getattr(self, name)))
        if not self.basis_minus.shape == self.basis_zero.shape == self.wavelength_grid.shape:
            raise ShapeError("basis functions and grid must share one shape")

    @property
    def design(self) -> np.ndarray:
        return np.column_stack([self.basis_minus, self.basis_zero])


def _check_delta(name: str, value: float):
    if not 0.0 <= value < 1.0:
        raise DomainError(f"{name} must lie in [0, 1), got {value}")


def _subtract_and_normalize(grid, minuend, subtrahend, delta, role: str) -> np.ndarray:
    raw = np.clip(minuend - delta * subtrahend, 0.0, None)
    if not np.any(raw > 0):
        raise DegenerateBasisError(f"{role} basis vanished after subtracting delta = {delta}")
    try:
        return area_normalize(grid, raw)
    except DegenerateInputError:
        raise DegenerateBasisError(f"{role} basis has no positive area") from None


def build_basis(
    i0_pre: Spectrum, i_minus_pre: Spectrum, delta0: float, delta_minus: float
) -> BasisSet:
    """Construct the NV- and NV0 basis functions.

    :param i0_pre: NV0-rich reference (high laser power)
    :param i_minus_pre: NV--rich reference (low laser power)
    :param delta0: weight of the NV0 reference subtracted from the NV- reference
    :param delta_minus: weight of the NV- basis subtracted from the NV0 reference
    """
    if not i_minus_pre.same_grid(i0_pre.wavelengths):
        raise ShapeError("reference spectra are on different wavelength grids")
    _check_delta("delta0", delta0)
    _check_delta("delta_minus", delta_minus)
    grid = i0_pre.wavelengths
    zero_hat = area_normalize(grid, i0_pre.intensities)
    minus_hat = area_normalize(grid, i_minus_pre.intensities)
    basis_minus = _subtract_and_normalize(grid, minus_hat, zero_hat, delta0, "NV-")
    basis_zero = _subtract_and_normalize(grid, zero_hat, basis_minus, delta_minus, "NV0")
    return BasisSet(
        basis_minus=basis_minus,
        basis_zero=basis_zero,
        delta0=delta0,
        delta_minus=delta_minus,
        wavelength_grid=grid,
        temperature=i0_pre.temperature,
    )


def _window(grid, bounds) -> np.ndarray:
    mask = (grid >= bounds[0]) & (grid <= bounds[1])
    if mask.sum() < 4:
        raise InsufficientDataError(f"fewer than 4 samples in {bounds[0]}-{bounds[1]} nm")
    return mask


def _refine_delta(objective, step: float, max_delta: float) -> float:
    grid = np.arange(0.0, max_delta + step / 2, step)
    best = grid[int(np.argmin([objective(d) for d in grid]))]
    lower, upper = max(0.0, best - step), min(max_delta, best + step)
    refined = optimize.minimize_scalar(
        objective, bounds=(lower, upper), method="bounded", options={"xatol": 1e-10}
    )
    return float(refined.x) if objective(refined.x) <= objective(best) else float(best)


def optimize_delta0(
    i0_pre: Spectrum, i_minus_pre: Spectrum, step: float = 0.005, max_delta: float = 0.5
) -> float:
    """delta0 minimizing the NV0-window residual of the NV- basis.

    The residual is the RMS of the unclipped difference between the
    normalized references in 550-600 nm, where only NV0 emits.
    """
    grid = i0_pre.wavelengths
    zero_hat = area_normalize(grid, i0_pre.intensities)
    minus_hat = area_normalize(grid, i_minus_pre.intensities)
    mask = _window(grid, NV0_WINDOW)

    def residual(delta):
        return float(np.sqrt(np.mean((minus_hat[mask] - delta * zero_hat[mask]) ** 2)))

    return _refine_delta(residual, step, max_delta)


def optimize_delta_minus(
    i0_pre: Spectrum,
    basis_minus: np.ndarray,
    step: float = 0.005,
    max_delta: float = 0.5,
) -> float:
    """delta_minus removing the NV- zero-phonon line from the NV0 basis.

    Minimizes the RMS around 639 nm after a local quadratic baseline is
    removed, so the smooth NV0 sideband does not enter the criterion.
    """
    grid = i0_pre.wavelengths
    zero_hat = area_normalize(grid, i0_pre.intensities)
    mask = _window(grid, ZPL_WINDOWS["minus"])
    x = grid[mask] - NOMINAL_ZPL["minus"]

    def residual(delta):
        local = zero_hat[mask] - delta * basis_minus[mask]
        baseline = np.polyval(np.polyfit(x, local, 2), x)
        return float(np.sqrt(np.mean((local - baseline) ** 2)))

    return _refine_delta(residual, step, max_delta)


def optimize_deltas(
    i0_pre: Spectrum, i_minus_pre: Spectrum, step: float = 0.005, max_delta: float = 0.5
) -> Tuple[float, float]:
    """Grid search (then bounded refinement within one step) for delta0 and delta_minus."""
    delta0 = optimize_delta0(i0_pre, i_minus_pre, step, max_delta)
    grid = i0_pre.wavelengths
    basis_minus = _subtract_and_normalize(
        grid,
        area_normalize(grid, i_minus_pre.intensities),
        area_normalize(grid, i0_pre.intensities),
        delta0,
        "NV-",
    )
    return delta0, optimize_delta_minus(i0_pre, basis_minus, step, max_delta)


def build_temperature_bases(
    references: Mapping[float, Tuple[Spectrum, Spectrum]],
    step: float = 0.005,
    max_delta: float = 0.5,
) -> Dict[float, BasisSet]:
    """One basis per temperature with delta0 and delta_minus shared by all.

    delta0 is optimized per temperature and averaged; delta_minus is then
    optimized per temperature against the shared delta0 and averaged too.

    :param references: temperature -> (NV0-rich reference, NV--rich reference)
    """
    if not references:
        raise InsufficientDataError("no reference spectra")
    delta0 = float(np.mean([optimize_delta0(i0, im, step, max_delta) for i0, im in references.values()]))
    minus_deltas = []
    for i0, im in references.values():
        grid = i0.wavelengths
        basis_minus = _subtract_and_normalize(
            grid,
            area_normalize(grid, im.intensities),
            area_normalize(grid, i0.intensities),
            delta0,
            "NV-",
        )
        minus_deltas.append(optimize_delta_minus(i0, basis_minus, step, max_delta))
    delta_minus = float(np.mean(minus_deltas))
    logger.info(f"Shared subtraction weights: delta0 = {delta0:.5f}, delta_minus = {delta_minus:.5f}")
    return {
        temperature: build_basis(i0, im, delta0, delta_minus)
        for temperature, (i0, im) in sorted(references.items())
    }


@dataclass(frozen=True)
class Decomposition:
    """Fractional contributions of the NV- and NV0 basis functions.

    ``fit`` holds the component weights (areas) w_minus, w_zero with their
    covariance; c_minus = w_minus / (w_minus + w_zero).
    """

    c_minus: float
    c_zero: float
    residual_rms: float
    fit: FitResult

    @classmethod
    def from_weights(
        cls,
        w_minus: float,
        w_zero: float,
        covariance: Optional[np.ndarray] = None,
        residual_rms: float = 0.0,
        chi_squared: float = 0.0,
        dof: int = 1,
    ) -> "Decomposition":
        total = w_minus + w_zero
        if not total > 0:
            raise DegenerateInputError("decomposition weights are all zero")
        covariance = np.zeros((2, 2)) if covariance is None else np.asarray(covariance)
        fit = FitResult(
            params=np.array([w_minus, w_zero]),
            std_errors=np.sqrt(np.clip(np.diag(covariance), 0.0, None)),
            covariance=covariance,
            chi_squared=chi_squared,
            dof=dof,
            param_names=("w_minus", "w_zero"),
            model_id="spectral_decomposition",
        )
        return cls(w_minus / total, w_zero / total, residual_rms, fit)

    @property
    def weights(self) -> np.ndarray:
        return self.fit.params

    @property
    def c_covariance(self) -> np.ndarray:
        """Covariance of (c_minus, c_zero) propagated from the weights."""
        w_minus, w_zero = self.weights
        total = w_minus + w_zero
        jac = np.array([[w_zero, -w_minus], [-w_zero, w_minus]]) / total**2
        return jac @ self.fit.covariance @ jac.T

    @property
    def c_minus_err(self) -> float:
        return float(np.sqrt(max(self.c_covariance[0, 0], 0.0)))


def decompose(spectrum: Spectrum, basis: BasisSet) -> Decomposition:
    """Nonnegative least squares of a spectrum against the two basis functions.

    The weight covariance is s^2 (A^T A)^-1 with s^2 the residual variance.
    """
    if not spectrum.same_grid(basis.wavelength_grid):
        raise ShapeError("spectrum is not on the basis wavelength grid")
    intensities = spectrum.intensities
    if not np.any(intensities > 0):
        raise DegenerateInputError("spectrum is all zero")
    design = basis.design
    weights, norm = optimize.nnls(design, intensities)
    if not weights.sum() > 0:
        raise DegenerateInputError("spectrum has no component along either basis function")
    dof = max(intensities.size - 2, 1)
    variance = norm**2 / dof
    try:
        covariance = variance * np.linalg.inv(design.T @ design)
    except np.linalg.LinAlgError:
        raise DegenerateBasisError("basis functions are linearly dependent") from None
    return Decomposition.from_weights(
        weights[0], weights[1], covariance, norm / np.sqrt(intensities.size), norm**2, dof
    )


def nv_minus_fraction(
    dec: Decomposition, kappa: float, kappa_err: float = 0.0
) -> Fraction:
    """[NV-] fraction c_minus / (c_minus + kappa c_zero) with first-order error."""
    if not kappa > 0:
        raise DomainError(f"kappa must be > 0, got {kappa}")
    c_minus, c_zero = dec.c_minus, dec.c_zero
    denominator = c_minus + kappa * c_zero
    if not denominator > 0:
        raise DomainError("c_minus and c_zero are both zero")
    value = c_minus / denominator
    grad = np.array([kappa * c_zero, -kappa * c_minus]) / denominator**2
    variance = grad @ dec.c_covariance @ grad + (c_minus * c_zero / denominator**2 * kappa_err) ** 2
    return Fraction(float(np.clip(value, 0.0, 1.0)), float(np.sqrt(max(variance, 0.0))))


def estimate_kappa(
    series: Iterable[Tuple[float, Spectrum]], basis: BasisSet
) -> KappaEstimate:
    """kappa as the quotient slope_minus / slope_zero of the component
    intensities against laser power.

    :param series: (laser power in W, spectrum) pairs well below saturation
    :param basis: basis on the spectra's grid
    """
    series = list(series)
    powers = np.array([p for p, _ in series], dtype=float)
    if np.unique(powers).size < 3:
        raise InsufficientDataError("kappa estimation needs at least three distinct powers")
    decompositions = [decompose(spectrum, basis) for _, spectrum in series]
    weights = np.array([d.weights for d in decompositions])
    errors = np.array([d.fit.std_errors for d in decompositions])
    floor = 1e-12 * np.max(np.abs(weights))
    sigma = np.maximum(errors, max(floor, np.finfo(float).tiny))

    fit_minus = weighted_linear_fit(powers, weights[:, 0], sigma[:, 0])
    fit_zero = weighted_linear_fit(powers, weights[:, 1], sigma[:, 1])
    slope_minus, slope_zero = fit_minus.value("slope"), fit_zero.value("slope")
    if not slope_zero > 0:
        raise DegenerateCalibrationError(f"NV0 intensity slope is {slope_zero:.3g}, must be > 0")
    kappa = slope_minus / slope_zero
    error = abs(kappa) * np.hypot(
        fit_minus.error("slope") / slope_minus, fit_zero.error("slope") / slope_zero
    )
    return KappaEstimate(float(kappa), float(error), fit_minus, fit_zero)


def fraction_variance(
    fractions: Union[pd.DataFrame, Mapping[float, Mapping[float, float]]]
) -> pd.Series:
    """Population variance of the NV- fraction across temperatures, per power.

    :param fractions: DataFrame with power, temperature and fraction columns,
        or a mapping power -> {temperature: fraction}
    :return: Series of variances indexed by power
    """
    if not isinstance(fractions, pd.DataFrame):
        fractions = pd.DataFrame(
            [
                {"power": power, "temperature": temperature, "fraction": value}
                for power, by_temperature in fractions.items()
                for temperature, value in by_temperature.items()
            ],
            columns=["power", "temperature", "fraction"],
        )
    counts = fractions.groupby("power")["temperature"].nunique()
    if counts.empty or (counts < 2).any():
        raise InsufficientDataError("fraction variance needs at least two temperatures per power")
    variance = fractions.groupby("power")["fraction"].agg(lambda f: float(np.var(f.to_numpy())))
    variance.name = "variance"
    return variance


@dataclass(frozen=True)
class ZplFit:
    center: float
    fwhm: float
    amplitude: float
    baseline: float
    fit: FitResult

    @property
    def center_err(self) -> float:
        return self.fit.error("center")

    @property
    def fwhm_err(self) -> float:
        return self.fit.error("fwhm")


def fit_zpl(
    spectrum: Spectrum,
    window: Optional[Tuple[float, float]] = None,
    component: str = "minus",
) -> ZplFit:
    """Lorentzian-plus-linear-baseline fit of a zero-phonon line.

    Sample errors follow Poisson statistics of the counts collected over the
    exposure, at least one count per sample.
    """
    if component not in NOMINAL_ZPL:
        raise DomainError(f"unknown component {component!r}, expected one of {COMPONENTS}")
    low, high = ZPL_WINDOWS[component] if window is None else window
    nominal = NOMINAL_ZPL[component]
    if not low < nominal < high:
        raise DomainError(f"window {low}-{high} nm does not contain the {nominal} nm line")
    grid = spectrum.wavelengths
    mask = (grid >= low) & (grid <= high)
    if mask.sum() < 8:
        raise InsufficientDataError(f"ZPL window holds {mask.sum()} samples, need 8")
    x, y = grid[mask], spectrum.intensities[mask]
    bin_width = np.gradient(grid)[mask]
    counts = np.clip(y, 0.0, None) * bin_width * spectrum.exposure
    sigma = np.sqrt(np.maximum(counts, 1.0)) / (bin_width * spectrum.exposure)
    fit = fit_lorentzian(x, y, sigma, center=nominal)
    center = fit.value("center")
    if not low <= center <= high:
        raise DomainError(f"fitted ZPL center {center:.3f} nm left the window")
    return ZplFit(
        center=center,
        fwhm=fit.value("fwhm"),
        amplitude=fit.value("amplitude"),
        baseline=fit.value("baseline"),
        fit=fit,
    )


def apply_response_correction(spectrum: Spectrum, table: Sequence[Tuple[float, float]]) -> Spectrum:
    """Multiply by a wavelength-dependent correction table (linear interpolation).

    :param table: (wavelength_nm, factor) rows covering the spectrum's range
    """
    table = np.asarray(table, dtype=float)
    if table.ndim != 2 or table.shape[1] != 2 or table.shape[0] < 2:
        raise ShapeError("correction table needs (wavelength, factor) rows")
    table = table[np.argsort(table[:, 0])]
    if table[0, 0] > spectrum.wavelengths[0] or table[-1, 0] < spectrum.wavelengths[-1]:
        raise DomainError("correction table does not cover the spectrum's wavelength range")
    if np.any(table[:, 1] <= 0):
        raise DomainError("correction factors must be > 0")
    factors = np.interp(spectrum.wavelengths, table[:, 0], table[:, 1])
    return spectrum.with_intensities(spectrum.intensities * factors)
