"""
Weighted least-squares engine and the model fits of the analysis chain.

Nonlinear fits share one Levenberg-Marquardt loop with Fletcher's diagonal
scaling; closed forms are used where the model is linear in its parameters.
"""
import dataclasses
import json
import logging
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core_model import BOLTZMANN_EV_PER_K, FitResult, TemperatureModel, phonon_rate
from src.errors import (
    DomainError,
    FitError,
    InsufficientDataError,
    ShapeError,
    SingularDesignError,
)

logger = logging.getLogger("nv-relaxometry")

Model = namedtuple("Model", ["model_id", "param_names", "function", "jacobian"])


def _linear(x, p):
    return p[0] * x + p[1]


def _linear_jac(x, p):
    return np.column_stack([x, np.ones_like(x)])


def _monoexp(t, p):
    return p[0] * np.exp(-t / p[1]) + p[2]


def _monoexp_jac(t, p):
    e = np.exp(-t / p[1])
    return np.column_stack([e, p[0] * e * t / p[1] ** 2, np.ones_like(t)])


def _biexp(t, p):
    return p[0] * np.exp(-t / p[1]) + p[2] * np.exp(-t / p[3]) + p[4]


def _biexp_jac(t, p):
    e1 = np.exp(-t / p[1])
    e2 = np.exp(-t / p[3])
    return np.column_stack([
        e1, p[0] * e1 * t / p[1] ** 2,
        e2, p[2] * e2 * t / p[3] ** 2,
        np.ones_like(t),
    ])


def _power_law(x, p):
    return p[0] * x ** p[1] + p[2]


def _power_law_jac(x, p):
    xn = x ** p[1]
    return np.column_stack([xn, p[0] * xn * np.log(x), np.ones_like(x)])


def _lorentzian(x, p, x_ref=0.0):
    amplitude, center, fwhm, baseline, slope = p
    half = fwhm / 2
    return amplitude * half**2 / ((x - center) ** 2 + half**2) + baseline + slope * (x - x_ref)


def _lorentzian_jac(x, p, x_ref=0.0):
    amplitude, center, fwhm, _, _ = p
    half = fwhm / 2
    d = x - center
    denom = d**2 + half**2
    return np.column_stack([
        half**2 / denom,
        amplitude * half**2 * 2 * d / denom**2,
        amplitude * half * d**2 / denom**2,
        np.ones_like(x),
        x - x_ref,
    ])


def _phonon_terms(temps, a2, a3, delta, boltzmann_k):
    model = TemperatureModel(a1=0.0, a2=a2, a3=a3, delta=delta)
    return np.array([phonon_rate(model, float(t), boltzmann_k) for t in np.atleast_1d(temps)])


def _t1_temperature(temps, p, a2=0.0, a3=0.0, delta=1.0, boltzmann_k=BOLTZMANN_EV_PER_K):
    return p[0] + _phonon_terms(temps, a2, a3, delta, boltzmann_k)


def _t1_temperature_jac(temps, p, **fixed):
    return np.ones((np.size(temps), 1))


MODELS: Dict[str, Model] = {
    "linear": Model("linear", ("slope", "intercept"), _linear, _linear_jac),
    "monoexp": Model("monoexp", ("A", "T", "y0"), _monoexp, _monoexp_jac),
    "biexp": Model("biexp", ("A", "T_R1", "B", "T_R2", "C"), _biexp, _biexp_jac),
    "power_law": Model("power_law", ("a", "n", "c"), _power_law, _power_law_jac),
    "lorentzian": Model(
        "lorentzian",
        ("amplitude", "center", "fwhm", "baseline", "slope"),
        _lorentzian,
        _lorentzian_jac,
    ),
    "t1_temperature": Model(
        "t1_temperature", ("a1",), _t1_temperature, _t1_temperature_jac
    ),
}


@dataclass(frozen=True)
class ModelSpec:
    """What to fit and how: model, start point, bounds and stopping rules.

    :param model_id: key of MODELS
    :param initial: start parameters
    :param lower: lower bounds, -inf when None
    :param upper: upper bounds, +inf when None
    :param fixed: keyword parameters passed to the model unchanged
    :param xtol: relative step size below which the fit has converged
    :param gtol: gradient infinity norm below which the fit has converged
    :param ftol: relative cost change below which the fit has converged
    """

    model_id: str
    initial: Sequence[float]
    lower: Optional[Sequence[float]] = None
    upper: Optional[Sequence[float]] = None
    fixed: Dict[str, float] = field(default_factory=dict)
    xtol: float = 1e-12
    gtol: float = 1e-10
    ftol: float = 1e-10
    max_iterations: int = 500
    damping: float = 1e-3

    def __post_init__(self):
        if self.model_id not in MODELS:
            raise DomainError(f"unknown model {self.model_id!r}")
        size = len(MODELS[self.model_id].param_names)
        initial = np.asarray(self.initial, dtype=float)
        lower = np.full(size, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        upper = np.full(size, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if not initial.shape == lower.shape == upper.shape == (size,):
            raise ShapeError(f"{self.model_id} takes {size} parameters")
        if np.any(lower > upper):
            raise DomainError("lower bounds must not exceed upper bounds")
        if min(self.xtol, self.gtol, self.ftol, self.damping) <= 0:
            raise DomainError("tolerances and damping must be > 0")
        if self.max_iterations < 1:
            raise DomainError("max_iterations must be >= 1")
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)


def _prepare(x, y, sigma, min_points: int):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), y.shape).astype(float)
    if x.ndim != 1 or x.shape != y.shape:
        raise ShapeError("x and y must be 1-D of equal length")
    if x.size < min_points:
        raise InsufficientDataError(f"need at least {min_points} points, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DomainError("data must be finite")
    if not np.all(sigma > 0) or not np.all(np.isfinite(sigma)):
        raise DomainError("sigma must be finite and > 0")
    return x, y, sigma


def _check_ascending(t):
    if np.any(np.diff(t) <= 0):
        raise DomainError("t must be strictly ascending")


def _covariance(jacobian: np.ndarray) -> Tuple[np.ndarray, bool]:
    curvature = jacobian.T @ jacobian
    try:
        covariance = np.linalg.inv(curvature)
        if np.all(np.isfinite(covariance)):
            return (covariance + covariance.T) / 2, False
    except np.linalg.LinAlgError:
        pass
    covariance = np.linalg.pinv(curvature)
    unconstrained = np.diag(curvature) <= 0
    covariance[unconstrained, :] = 0.0
    covariance[:, unconstrained] = 0.0
    covariance[unconstrained, unconstrained] = np.inf
    return covariance, True


def _finish(
    params, jacobian, chi_squared, dof, model_id, param_names,
    n_iterations=0, flags=(),
) -> FitResult:
    covariance, singular = _covariance(jacobian)
    reduced = chi_squared / dof
    if reduced > 1:
        covariance = covariance * reduced
    flags = tuple(flags) + (("singular_covariance",) if singular else ())
    return FitResult(
        params=params,
        std_errors=np.sqrt(np.clip(np.diag(covariance), 0.0, None)),
        covariance=covariance,
        chi_squared=float(chi_squared),
        dof=int(dof),
        param_names=tuple(param_names),
        model_id=model_id,
        converged=True,
        n_iterations=n_iterations,
        flags=flags,
    )


def levenberg_marquardt(spec: ModelSpec, x, y, sigma) -> FitResult:
    """Minimize the weighted residual sum of squares of a registered model.

    Damping starts at spec.damping, grows tenfold on a rejected step and
    shrinks tenfold on an accepted one. Parameters are projected onto the
    bounds after every step.

    :param spec: model, start point, bounds and tolerances
    :param x: independent variable
    :param y: observations
    :param sigma: standard deviations of y
    :raises FitError: no convergence within spec.max_iterations
    """
    model = MODELS[spec.model_id]
    x, y, sigma = _prepare(x, y, sigma, min_points=1)
    dof = x.size - len(model.param_names)
    if dof < 1:
        raise InsufficientDataError(
            f"{spec.model_id} needs more than {len(model.param_names)} points"
        )

    def residuals(p):
        return (y - model.function(x, p, **spec.fixed)) / sigma

    def jacobian(p):
        return model.jacobian(x, p, **spec.fixed) / sigma[:, None]

    params = np.clip(spec.initial, spec.lower, spec.upper)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        r = residuals(params)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise FitError(f"{spec.model_id}: initial parameters give non-finite residuals")

    damping = spec.damping
    converged = False
    iteration = 0
    active = np.zeros(params.size, dtype=bool)
    for iteration in range(1, spec.max_iterations + 1):
        jac = jacobian(params)
        gradient = jac.T @ r
        # the step moves along +gradient; a pinned parameter stays out of it
        active = ((params <= spec.lower) & (gradient < 0)) | ((params >= spec.upper) & (gradient > 0))
        free = ~active
        if not np.any(free) or np.max(np.abs(gradient[free])) < spec.gtol:
            converged = True
            break
        curvature = jac[:, free].T @ jac[:, free]
        scale = np.diag(curvature).copy()
        scale = np.maximum(scale, np.finfo(float).eps * max(scale.max(), np.finfo(float).tiny))
        step = np.zeros_like(params)
        try:
            step[free] = np.linalg.solve(curvature + damping * np.diag(scale), gradient[free])
        except np.linalg.LinAlgError:
            damping *= 10
            continue
        candidate = np.clip(params + step, spec.lower, spec.upper)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            r_new = residuals(candidate)
        cost_new = float(r_new @ r_new)
        if np.isfinite(cost_new) and cost_new < cost:
            relative = (cost - cost_new) / cost
            moved = np.linalg.norm(candidate - params)
            params, r, cost = candidate, r_new, cost_new
            damping = max(damping / 10, 1e-15)
            if relative < spec.ftol or moved <= spec.xtol * (np.linalg.norm(params) + spec.xtol):
                converged = True
                break
        else:
            damping *= 10
            if damping > 1e16:
                converged = (
                    cost <= _roundoff_cost(y, y - r * sigma, sigma)
                    or _predicted_decrease(jac[:, free], r) <= spec.ftol * cost
                )
                break

    if not converged:
        raise FitError(
            f"{spec.model_id} fit did not converge", n_iterations=iteration, last_cost=cost
        )
    flags = ("at_bound",) if np.any(active) else ()
    if flags:
        pinned = [n for n, a in zip(model.param_names, active) if a]
        logger.warning(f"{spec.model_id} fit stopped at a bound of {', '.join(pinned)}")
    return _finish(
        params, jacobian(params), cost, dof, spec.model_id, model.param_names, iteration, flags
    )


def _predicted_decrease(jac: np.ndarray, r: np.ndarray) -> float:
    """Cost reduction promised by the undamped Gauss-Newton step."""
    step, *_ = np.linalg.lstsq(jac, r, rcond=None)
    reduction = jac @ step
    return float(reduction @ reduction)


def _roundoff_cost(y, model, sigma) -> float:
    """Chi-squared left when residuals sit at sqrt(eps) of the data scale."""
    floor = np.sqrt(np.finfo(float).eps) * (np.abs(y) + np.abs(model)) / sigma
    return float(floor @ floor)


def _weighted_lstsq(columns: np.ndarray, y, sigma) -> Tuple[np.ndarray, float]:
    design = columns / sigma[:, None]
    target = y / sigma
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    residual = target - design @ coef
    return coef, float(residual @ residual)


def weighted_linear_fit(x, y, sigma) -> FitResult:
    """Closed-form inverse-variance weighted straight line y = slope x + intercept.

    With exactly two points the fit interpolates; dof is reported as 1 and
    chi-squared is 0.
    """
    x, y, sigma = _prepare(x, y, sigma, min_points=2)
    w = 1.0 / sigma**2
    total = w.sum()
    x_mean = (w * x).sum() / total
    dx = x - x_mean
    sxx = (w * dx**2).sum()
    if not sxx > 0 or np.ptp(x) == 0:
        raise SingularDesignError("weighted linear fit needs at least two distinct x")
    slope = (w * dx * y).sum() / sxx
    intercept = (w * y).sum() / total - slope * x_mean
    chi_squared = float((w * (y - slope * x - intercept) ** 2).sum())
    covariance = np.array([
        [1.0 / sxx, -x_mean / sxx],
        [-x_mean / sxx, 1.0 / total + x_mean**2 / sxx],
    ])
    dof = max(x.size - 2, 1)
    if chi_squared / dof > 1:
        covariance = covariance * (chi_squared / dof)
    return FitResult(
        params=np.array([slope, intercept]),
        std_errors=np.sqrt(np.diag(covariance)),
        covariance=covariance,
        chi_squared=chi_squared,
        dof=dof,
        param_names=MODELS["linear"].param_names,
        model_id="linear",
    )


def weighted_mean_constant(y, sigma, name: str = "value", model_id: str = "constant") -> FitResult:
    """Zero-slope fit: inverse-variance weighted mean with conservative error."""
    y = np.asarray(y, dtype=float)
    _, y, sigma = _prepare(np.zeros_like(y), y, sigma, min_points=2)
    w = 1.0 / sigma**2
    mean = (w * y).sum() / w.sum()
    chi_squared = float((w * (y - mean) ** 2).sum())
    dof = y.size - 1
    variance = 1.0 / w.sum()
    if chi_squared / dof > 1:
        variance *= chi_squared / dof
    return FitResult(
        params=np.array([mean]),
        std_errors=np.array([np.sqrt(variance)]),
        covariance=np.array([[variance]]),
        chi_squared=chi_squared,
        dof=dof,
        param_names=(name,),
        model_id=model_id,
    )


def _monoexp_initial(t, y, sigma) -> np.ndarray:
    """Log-linear estimate on y - min(y), refined over a grid of time constants.

    For each candidate T the amplitude and offset are solved linearly and the
    candidate with the lowest chi-squared wins.
    """
    decaying = y[0] >= y[-1]
    offset = y.min() if decaying else y.max()
    z = (y - offset) if decaying else (offset - y)
    span = t[-1] - t[0]
    candidates = list(np.geomspace(np.min(np.diff(t)) / 2, 3 * span, 40))
    positive = z > 0
    if positive.sum() >= 2:
        slope, _ = np.polyfit(t[positive], np.log(z[positive]), 1)
        if slope < 0:
            candidates.insert(0, -1.0 / slope)

    best, best_chi = None, np.inf
    ones = np.ones_like(t)
    for tau in candidates:
        columns = np.column_stack([np.exp(-(t - t[0]) / tau), ones])
        coef, chi = _weighted_lstsq(columns, y, sigma)
        if chi < best_chi:
            best, best_chi = (coef[0] * np.exp(t[0] / tau), tau, coef[1]), chi
    return np.array(best)


def _time_lower_bound(t) -> float:
    return (t[-1] - t[0]) * 1e-9


def fit_monoexp(t, y, sigma) -> FitResult:
    """Fit y = A exp(-t/T) + y0.

    :param t: strictly ascending times (s)
    :param y: observations
    :param sigma: standard deviations of y
    :return: FitResult with parameters (A, T, y0); flag ``unidentifiable:T``
        when the relative error of T exceeds 10
    """
    t, y, sigma = _prepare(t, y, sigma, min_points=4)
    _check_ascending(t)
    spec = ModelSpec(
        "monoexp",
        _monoexp_initial(t, y, sigma),
        lower=(-np.inf, _time_lower_bound(t), -np.inf),
        upper=(np.inf, np.inf, np.inf),
    )
    result = levenberg_marquardt(spec, t, y, sigma)
    relative = result.error("T") / result.value("T")
    if not np.isfinite(relative) or relative > 10:
        logger.warning(f"Monoexponential time constant is unidentifiable (sigma_T/T = {relative:.3g})")
        result = dataclasses.replace(result, flags=result.flags + ("unidentifiable:T",))
    return result


def _decades(t) -> float:
    if t[0] > 0:
        return float(np.log10(t[-1] / t[0]))
    return float(np.log10((t[-1] - t[0]) / np.min(np.diff(t))))


def _biexp_initial(t, y, sigma) -> np.ndarray:
    """Start point from the better of a midpoint split and a time-constant grid."""
    candidates: List[np.ndarray] = []
    positive = t[t > 0]
    midpoint = np.sqrt(positive[0] * t[-1]) if positive.size else (t[0] + t[-1]) / 2
    late = t >= midpoint
    if late.sum() >= 4 and (~late).sum() >= 4:
        b, t2, c = _monoexp_initial(t[late], y[late], sigma[late])
        rest = y[~late] - b * np.exp(-t[~late] / t2) - c
        a, t1, c_early = _monoexp_initial(t[~late], rest, sigma[~late])
        candidates.append(np.array([a, t1, b, t2, c + c_early]))

    ones = np.ones_like(t)
    taus = np.geomspace(np.min(np.diff(t)), 3 * (t[-1] - t[0]), 14)
    for i, t1 in enumerate(taus):
        for t2 in taus[i + 1:]:
            columns = np.column_stack([
                np.exp(-(t - t[0]) / t1), np.exp(-(t - t[0]) / t2), ones,
            ])
            coef, _ = _weighted_lstsq(columns, y, sigma)
            candidates.append(np.array([
                coef[0] * np.exp(t[0] / t1), t1, coef[1] * np.exp(t[0] / t2), t2, coef[2],
            ]))

    def chi(p):
        with np.errstate(over="ignore", invalid="ignore"):
            value = np.sum(((y - _biexp(t, p)) / sigma) ** 2)
        return value if np.isfinite(value) else np.inf

    return min(candidates, key=chi)


def fit_biexp(t, y, sigma) -> FitResult:
    """Fit y = A exp(-t/T_R1) + B exp(-t/T_R2) + C, reported with T_R1 < T_R2.

    Flags ``near_degenerate`` when T_R1/T_R2 lies in [0.8, 1.25] and
    ``degenerate_component`` when one component is not resolved.
    """
    t, y, sigma = _prepare(t, y, sigma, min_points=7)
    _check_ascending(t)
    if _decades(t) < 2:
        raise InsufficientDataError("biexponential fit needs t spanning at least two decades")
    floor = _time_lower_bound(t)
    spec = ModelSpec(
        "biexp",
        _biexp_initial(t, y, sigma),
        lower=(-np.inf, floor, -np.inf, floor, -np.inf),
    )
    result = levenberg_marquardt(spec, t, y, sigma)

    if result.value("T_R1") > result.value("T_R2"):
        order = [2, 3, 0, 1, 4]
        result = dataclasses.replace(
            result,
            params=result.params[order],
            std_errors=result.std_errors[order],
            covariance=result.covariance[np.ix_(order, order)],
        )

    flags = list(result.flags)
    ratio = result.value("T_R1") / result.value("T_R2")
    if ratio >= 0.8:
        logger.warning(f"Biexponential fit is near-degenerate (T_R1/T_R2 = {ratio:.3f})")
        flags.append("near_degenerate")
    for amplitude, tau in (("A", "T_R1"), ("B", "T_R2")):
        amp_err, tau_err = result.error(amplitude), result.error(tau)
        if (
            not np.isfinite(amp_err)
            or abs(result.value(amplitude)) < 2 * amp_err
            or not np.isfinite(tau_err)
            or tau_err > 10 * result.value(tau)
        ):
            flags.append("degenerate_component")
            break
    return dataclasses.replace(result, flags=tuple(flags))


def fit_power_law(x, y, sigma) -> FitResult:
    """Fit y = a x^n + c with the exponent bounded to [0.1, 5]."""
    x, y, sigma = _prepare(x, y, sigma, min_points=4)
    if np.any(x <= 0):
        raise DomainError("power-law fit needs x > 0")
    best, best_chi = None, np.inf
    for n in np.linspace(0.1, 5.0, 50):
        coef, chi = _weighted_lstsq(np.column_stack([x**n, np.ones_like(x)]), y, sigma)
        if chi < best_chi:
            best, best_chi = (coef[0], n, coef[1]), chi
    spec = ModelSpec(
        "power_law", best, lower=(-np.inf, 0.1, -np.inf), upper=(np.inf, 5.0, np.inf)
    )
    return levenberg_marquardt(spec, x, y, sigma)


def fit_lorentzian(x, y, sigma, center: Optional[float] = None) -> FitResult:
    """Lorentzian peak on a linear baseline.

    :param center: start value for the peak position; the highest
        baseline-subtracted sample otherwise
    :return: FitResult with (amplitude, center, fwhm, baseline, slope); the
        baseline slope is taken about the window midpoint
    """
    x, y, sigma = _prepare(x, y, sigma, min_points=6)
    _check_ascending(x)
    x_ref = (x[0] + x[-1]) / 2
    edge = max(2, x.size // 10)
    x_lo, y_lo = x[:edge].mean(), y[:edge].mean()
    x_hi, y_hi = x[-edge:].mean(), y[-edge:].mean()
    slope = (y_hi - y_lo) / (x_hi - x_lo)
    baseline = y_lo + slope * (x_ref - x_lo)
    peak = y - baseline - slope * (x - x_ref)
    top = int(np.argmax(peak)) if center is None else int(np.argmin(np.abs(x - center)))
    amplitude = peak[top]
    above = np.flatnonzero(peak > amplitude / 2)
    fwhm = max(x[above[-1]] - x[above[0]], 2 * np.min(np.diff(x))) if above.size else np.ptp(x) / 10
    spec = ModelSpec(
        "lorentzian",
        (amplitude, x[top], fwhm, baseline, slope),
        lower=(-np.inf, x[0], np.min(np.diff(x)) * 1e-3, -np.inf, -np.inf),
        upper=(np.inf, x[-1], np.ptp(x), np.inf, np.inf),
        fixed={"x_ref": x_ref},
    )
    return levenberg_marquardt(spec, x, y, sigma)


def fit_t1_temperature_model(
    temps, inv_t1, sigma, a2: float, a3: float, delta: float,
    boltzmann_k: float = BOLTZMANN_EV_PER_K,
) -> FitResult:
    """Fit the sample-dependent rate A1 with the phonon constants held fixed.

    Closed form: the inverse-variance weighted mean of 1/T1 minus the Orbach
    and Raman terms.
    """
    temps = np.asarray(temps, dtype=float)
    if a2 < 0 or a3 < 0 or not delta > 0:
        raise DomainError("phonon constants must satisfy a2, a3 >= 0 and delta > 0")
    if temps.size < 2:
        raise InsufficientDataError("A1 fit needs at least two temperatures")
    residual = np.asarray(inv_t1, dtype=float) - _phonon_terms(temps, a2, a3, delta, boltzmann_k)
    return weighted_mean_constant(residual, sigma, name="a1", model_id="t1_temperature")


def fit_report(result: FitResult, **context) -> Dict:
    """Structured report of a fit: model id, parameters, errors, covariance,
    chi-squared, dof and convergence status, plus caller context."""
    report = result.as_dict()
    report.update(context)
    return report


def format_fit_report(result: FitResult, **context) -> str:
    return json.dumps(json_safe(fit_report(result, **context)), indent=2, sort_keys=True)


def json_safe(value):
    """Plain JSON types; non-finite floats become null."""
    if isinstance(value, np.ndarray):
        value = value.tolist()
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def evaluate_model(model_id: str, x, params, **fixed) -> np.ndarray:
    return MODELS[model_id].function(np.asarray(x, dtype=float), np.asarray(params, float), **fixed)


def model_jacobian(model_id: str, x, params, **fixed) -> np.ndarray:
    return MODELS[model_id].jacobian(np.asarray(x, dtype=float), np.asarray(params, float), **fixed)
