"""
Piecewise-analytic simulation of the NV ensemble through pulse sequences.

Within a segment every state variable relaxes exponentially toward a
segment-local target, so evolution, window integrals and the observables of
the analysis chain are closed-form.

Sign convention: ``s`` is the population imbalance toward m_S = +-1
(s = +1 fully +-1, dark; s = -1 fully m_S = 0, bright). Optical pumping with
the default ``pump_polarization = -1`` drives s toward -1.
"""
import dataclasses
import logging
import math
from collections import namedtuple
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.core_model import (
    EmissionParams,
    PhysicsConfig,
    RechargeParams,
    t1_rate,
)
from src.detection import CHANNELS, channel_generators, expected_counts
from src.errors import DomainError, SequenceValidationError
from src.pulse_sequence import TAU, Dark, Laser, PiPulse, PulseSequence, ReadWindow
from src.traces import RelaxometryTrace

logger = logging.getLogger("nv-relaxometry")

_TOLERANCE = 1e-12
# pauses shorter than this many slow recharge times leave charge build-up between cycles
PAUSE_RECHARGE_FACTOR = 3.0

LaserTargets = namedtuple(
    "LaserTargets", ["n_target", "charge_rate", "s_target", "spin_rate"]
)
WindowStart = namedtuple("WindowStart", ["state", "power", "duration"])


@dataclass(frozen=True)
class EnsembleState:
    """Charge fraction and spin polarization of the simulated ensemble.

    :param n_minus: NV- fraction [NV-]/([NV-]+[NV0])
    :param s_addr: polarization of the microwave-addressed orientation
    :param s_rest: mean polarization of the other three orientations
    :param fast_excess: share of the NV0 excess held by the fast recharge
        component; set inside dark segments only
    """

    n_minus: float
    s_addr: float = 0.0
    s_rest: float = 0.0
    fast_excess: Optional[float] = None

    def __post_init__(self):
        if not -_TOLERANCE <= self.n_minus <= 1 + _TOLERANCE:
            raise DomainError(f"n_minus must lie in [0, 1], got {self.n_minus}")
        for name in ("s_addr", "s_rest"):
            if not -1 - _TOLERANCE <= getattr(self, name) <= 1 + _TOLERANCE:
                raise DomainError(f"{name} must lie in [-1, 1], got {getattr(self, name)}")
        object.__setattr__(self, "n_minus", min(max(self.n_minus, 0.0), 1.0))
        object.__setattr__(self, "s_addr", min(max(self.s_addr, -1.0), 1.0))
        object.__setattr__(self, "s_rest", min(max(self.s_rest, -1.0), 1.0))

    @property
    def n_zero(self) -> float:
        return 1.0 - self.n_minus

    @property
    def s_eff(self) -> float:
        return (self.s_addr + 3.0 * self.s_rest) / 4.0


def steady_state_fraction(power: float, params: EmissionParams) -> float:
    """NV- fraction under continuous illumination at a laser power (W)."""
    if power < 0:
        raise DomainError("laser power must be >= 0")
    return params.f_high + (params.f_low - params.f_high) / (
        1.0 + power / params.sat_power_charge
    )


def dark_equilibrium(recharge: RechargeParams) -> EnsembleState:
    return EnsembleState(n_minus=recharge.n_minus_dark_eq)


def laser_targets(power: float, params: EmissionParams, t1: float = math.inf) -> LaserTargets:
    """Targets and rates of the charge and spin relaxation under light."""
    charge_rate = power / (params.sat_power_charge * params.charge_time_unit)
    pump_rate = power / (params.sat_power_spin * params.spin_time_unit)
    spin_rate = pump_rate + 1.0 / t1
    s_target = 0.0
    if pump_rate > 0:
        pumped = params.pump_polarization * power / (power + params.sat_power_spin)
        s_target = pump_rate * pumped / spin_rate
    return LaserTargets(
        steady_state_fraction(power, params), charge_rate, s_target, spin_rate
    )


def _check_t1(t1: float):
    if not t1 > 0:
        raise DomainError(f"t1 must be > 0, got {t1}")


def evolve_dark(
    state: EnsembleState, dt: float, t1: float, recharge: RechargeParams
) -> EnsembleState:
    """Spin relaxation and biexponential NV0 -> NV- recharge in the dark.

    The NV0 excess above dark equilibrium is split by weight1 on entry to a
    dark segment; the split is carried in ``fast_excess`` so that evolving in
    pieces equals evolving at once.
    """
    if dt < 0:
        raise DomainError(f"dark duration must be >= 0, got {dt}")
    _check_t1(t1)
    decay = math.exp(-dt / t1)
    n_zero_eq = 1.0 - recharge.n_minus_dark_eq
    excess = state.n_zero - n_zero_eq
    fast = recharge.weight1 * excess if state.fast_excess is None else state.fast_excess
    slow = excess - fast
    fast *= math.exp(-dt / recharge.t_r1)
    slow *= math.exp(-dt / recharge.t_r2)
    return EnsembleState(
        n_minus=1.0 - (n_zero_eq + fast + slow),
        s_addr=state.s_addr * decay,
        s_rest=state.s_rest * decay,
        fast_excess=fast,
    )


def evolve_laser(
    state: EnsembleState,
    dt: float,
    power: float,
    params: EmissionParams,
    t1: float = math.inf,
) -> EnsembleState:
    """Charge conversion toward steady_state_fraction and spin pumping.

    :param t1: spin relaxation acting alongside pumping; the default leaves it
        out, which makes power = 0 a pure hold
    """
    if dt < 0 or power < 0:
        raise DomainError("laser duration and power must be >= 0")
    _check_t1(t1)
    targets = laser_targets(power, params, t1)
    charge_decay = math.exp(-targets.charge_rate * dt)
    spin_decay = math.exp(-targets.spin_rate * dt)
    n_minus = targets.n_target + (state.n_minus - targets.n_target) * charge_decay
    s_addr = targets.s_target + (state.s_addr - targets.s_target) * spin_decay
    s_rest = targets.s_target + (state.s_rest - targets.s_target) * spin_decay
    return EnsembleState(n_minus=n_minus, s_addr=s_addr, s_rest=s_rest)


def apply_pi_pulse(state: EnsembleState) -> EnsembleState:
    return dataclasses.replace(state, s_addr=-state.s_addr)


def _mix_channels(rate_minus, rate_zero, params: EmissionParams):
    channel_minus = rate_minus + params.crosstalk_zero_in_minus * rate_zero
    channel_zero = rate_zero + params.crosstalk_minus_in_zero * rate_minus
    return channel_minus, channel_zero


def emission_rates(
    state: EnsembleState, power: float, params: EmissionParams
) -> Tuple[float, float]:
    """Ideal NV- and NV0 channel rates (counts/s) before the detectors."""
    if power < 0:
        raise DomainError("laser power must be >= 0")
    rate_minus = (
        params.brightness_minus * power * state.n_minus
        * (1.0 - params.spin_contrast * state.s_eff)
    )
    rate_zero = params.brightness_zero * power * state.n_zero
    return _mix_channels(rate_minus, rate_zero, params)


def _decay_integral(rate: float, duration: float) -> float:
    """Integral of exp(-rate t) over [0, duration]."""
    if rate == 0:
        return duration
    return -math.expm1(-rate * duration) / rate


def window_counts(
    state: EnsembleState,
    power: float,
    duration: float,
    params: EmissionParams,
    t1: float = math.inf,
) -> Tuple[float, float]:
    """Emission of both channels integrated over a read window.

    The window starts at the beginning of a laser pulse with the given state;
    the integral of the exponentially relaxing rates is evaluated exactly.
    """
    if not duration > 0:
        raise DomainError("read window duration must be > 0")
    targets = laser_targets(power, params, t1)
    dn = state.n_minus - targets.n_target
    ds = state.s_eff - targets.s_target
    charge_int = _decay_integral(targets.charge_rate, duration)
    spin_int = _decay_integral(targets.spin_rate, duration)
    cross_int = _decay_integral(targets.charge_rate + targets.spin_rate, duration)

    n_int = targets.n_target * duration + dn * charge_int
    ns_int = (
        targets.n_target * targets.s_target * duration
        + targets.n_target * ds * spin_int
        + dn * targets.s_target * charge_int
        + dn * ds * cross_int
    )
    rate_minus = params.brightness_minus * power * (n_int - params.spin_contrast * ns_int)
    rate_zero = params.brightness_zero * power * (duration - n_int)
    return _mix_channels(rate_minus, rate_zero, params)


def mean_window_fraction(start: WindowStart, params: EmissionParams, t1: float = math.inf) -> float:
    """Time-averaged NV- fraction over a read window."""
    targets = laser_targets(start.power, params, t1)
    dn = start.state.n_minus - targets.n_target
    charge_int = _decay_integral(targets.charge_rate, start.duration)
    return targets.n_target + dn * charge_int / start.duration


def steady_state(power: float, params: EmissionParams, t1: float = math.inf) -> EnsembleState:
    """State reached under continuous illumination."""
    targets = laser_targets(power, params, t1)
    return EnsembleState(
        n_minus=targets.n_target, s_addr=targets.s_target, s_rest=targets.s_target
    )


def frozen_charge(config: PhysicsConfig) -> PhysicsConfig:
    """Copy of a configuration without recharge or laser-driven conversion."""
    recharge = dataclasses.replace(config.recharge, t_r1=math.inf, t_r2=math.inf)
    emission = dataclasses.replace(config.emission, charge_time_unit=math.inf)
    return dataclasses.replace(config, recharge=recharge, emission=emission)


def cycle_windows(
    segments: Iterable,
    seq: PulseSequence,
    tau: float,
    params: EmissionParams,
    recharge: RechargeParams,
    t1: float,
) -> Dict[str, WindowStart]:
    """Walk one cycle from dark equilibrium, recording the state at each read window."""
    segments = list(segments)
    state = dark_equilibrium(recharge)
    windows: Dict[str, WindowStart] = {}
    for index, segment in enumerate(segments):
        if isinstance(segment, Laser):
            power = seq.laser_power(segment)
            following = segments[index + 1] if index + 1 < len(segments) else None
            if isinstance(following, ReadWindow):
                windows[following.label] = WindowStart(state, power, following.duration)
            state = evolve_laser(state, segment.duration, power, params, t1)
        elif isinstance(segment, Dark):
            duration = tau if segment.duration == TAU else segment.duration
            state = evolve_dark(state, duration, t1, recharge)
        elif isinstance(segment, PiPulse):
            state = apply_pi_pulse(state)
    return windows


def _half_segments(seq: PulseSequence, half: str) -> List:
    if half == "with_pi":
        return list(seq.segments)
    return [s for s in seq.segments if not isinstance(s, PiPulse)]


def _sequence_power(seq: PulseSequence) -> float:
    if seq.power is not None:
        return float(seq.power)
    lasers = [s for s in seq.segments if isinstance(s, Laser)]
    return float(seq.laser_power(lasers[0])) if lasers else 0.0


def _seed_entropy(seed) -> Optional[Union[int, Tuple[int, ...]]]:
    """Entropy that recreates ``seed`` through numpy.random.SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        if seed.spawn_key:
            return None
        seed = seed.entropy
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    if isinstance(seed, (list, tuple, np.ndarray)):
        return tuple(int(s) for s in seed)
    return None


def run_sequence(
    seq: PulseSequence,
    config: PhysicsConfig,
    temperature: float,
    seed,
    noise: bool = True,
) -> RelaxometryTrace:
    """Simulate a relaxometry sweep and record per-window photon counts.

    Every cycle starts from dark equilibrium; the pause between cycles is
    assumed long against the recharge times. A warning is logged when
    the pause is shorter than PAUSE_RECHARGE_FACTOR slow recharge times.

    :param seq: validated pulse sequence
    :param config: physics configuration
    :param temperature: K, sets T1 through the phonon model
    :param seed: anything numpy.random.SeedSequence accepts
    :param noise: False records expected counts with Poisson standard
        deviations instead of sampled repetitions
    """
    t1 = 1.0 / t1_rate(config.t1_model, temperature, config.boltzmann_k)
    recharge = config.recharge.at_temperature(temperature)
    params = config.emission
    if math.isfinite(recharge.t_r2) and seq.pause < PAUSE_RECHARGE_FACTOR * recharge.t_r2:
        logger.warning(
            f"Pause of {seq.pause * 1e3:.3g} ms is shorter than {PAUSE_RECHARGE_FACTOR:g} x T_R2 "
            f"= {PAUSE_RECHARGE_FACTOR * recharge.t_r2 * 1e3:.3g} ms; cycles are still started "
            f"from dark equilibrium"
        )
    generators = dict(zip(CHANNELS, channel_generators(seed)))
    taus = np.asarray(seq.taus)
    n_samples = seq.repetitions * seq.sweeps
    durations = {w.label: w.duration for w in seq.windows}
    if not durations:
        raise SequenceValidationError("sequence has no READ windows")
    logger.debug(
        f"Simulating {len(taus)} taus at {temperature} K, T1 = {t1 * 1e3:.4g} ms, "
        f"{n_samples} repetitions"
    )

    frames = []
    for half in seq.halves:
        segments = _half_segments(seq, half)
        ideal = {(label, ch): np.empty(len(taus)) for label in durations for ch in CHANNELS}
        for i, tau in enumerate(taus):
            for label, start in cycle_windows(segments, seq, tau, params, recharge, t1).items():
                counts = window_counts(start.state, start.power, start.duration, params, t1)
                for channel, value in zip(CHANNELS, counts):
                    ideal[(label, channel)][i] = value

        for (label, channel), photons in ideal.items():
            duration = durations[label]
            rate = np.clip(photons, 0.0, None) / duration
            mean = expected_counts(rate, duration, config.detector, channel)
            if noise:
                samples = generators[channel].poisson(mean, size=(n_samples, len(taus)))
                mean = samples.mean(axis=0)
                std = samples.std(axis=0, ddof=1) if n_samples > 1 else np.zeros(len(taus))
            else:
                std = np.sqrt(mean)
            frames.append(pd.DataFrame({
                "tau": taus, "half": half, "window": label,
                "channel": channel, "mean": mean, "std": std,
            }))

    return RelaxometryTrace(
        data=pd.concat(frames, ignore_index=True),
        power=_sequence_power(seq),
        temperature=float(temperature),
        repetitions=seq.repetitions,
        sweeps=seq.sweeps,
        window_durations=durations,
        seed=_seed_entropy(seed),
    )


def expected_ratio_increase(
    seq: PulseSequence, config: PhysicsConfig, temperature: float
) -> float:
    """Charge-ratio quotient between the last and first tau of the signal window.

    Uses the window-averaged NV- fraction of the without-pi half, the quantity
    a count-ratio calibration under continuous light maps back to.
    """
    t1 = 1.0 / t1_rate(config.t1_model, temperature, config.boltzmann_k)
    recharge = config.recharge.at_temperature(temperature)
    segments = _half_segments(seq, "without_pi")
    ratios = []
    for tau in (seq.taus[0], seq.taus[-1]):
        start = cycle_windows(segments, seq, tau, config.emission, recharge, t1)["signal"]
        fraction = mean_window_fraction(start, config.emission, t1)
        ratios.append(fraction / (1.0 - fraction))
    return ratios[1] / ratios[0]
