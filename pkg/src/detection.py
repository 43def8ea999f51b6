"""
Photon counting: shot noise, dark counts and neutral-density attenuation, and
the corrections that undo them.
"""
import logging
from collections import namedtuple
from typing import Optional, Tuple

import numpy as np

from src.core_model import DetectorConfig
from src.errors import DomainError
from src.traces import RelaxometryTrace

logger = logging.getLogger("nv-relaxometry")

CHANNELS = ("minus", "zero")

CorrectedRate = namedtuple("CorrectedRate", ["rate", "std_error", "clamped"])


def _check_channel(channel: str):
    if channel not in CHANNELS:
        raise DomainError(f"unknown channel {channel!r}, expected one of {CHANNELS}")


def channel_generators(seed) -> Tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for the NV- and NV0 detectors."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    minus, zero = seed.spawn(2)
    return np.random.default_rng(minus), np.random.default_rng(zero)


def expected_counts(rate, duration: float, config: DetectorConfig, channel: str):
    """Mean detected counts: attenuated signal plus dark counts."""
    _check_channel(channel)
    rate = np.asarray(rate, dtype=float)
    if np.any(rate < 0):
        raise DomainError("emission rate must be >= 0")
    if not duration > 0:
        raise DomainError("counting duration must be > 0")
    detected = rate * config.transmission(channel) + config.dark_rate(channel)
    if np.any(detected > config.saturation_rate):
        logger.warning(
            f"{channel} channel rate {float(np.max(detected)):.3g} counts/s exceeds "
            f"the advisory saturation rate {config.saturation_rate:.3g} counts/s"
        )
    return detected * duration


def sample_counts(
    rate,
    duration: float,
    config: DetectorConfig,
    channel: str,
    rng: np.random.Generator,
    size: Optional[Tuple[int, ...]] = None,
):
    """Poisson-distributed detector counts for an emission rate.

    :param rate: ideal emission rate reaching the filter (counts/s)
    :param duration: counting window (s)
    :param config: detector configuration
    :param channel: "minus" or "zero"
    :param rng: explicit generator; no global state is used
    :param size: output shape, defaults to the shape of rate
    """
    mean = expected_counts(rate, duration, config, channel)
    return rng.poisson(mean, size=size)


def correct_counts(
    raw, duration: float, config: DetectorConfig, channel: str
) -> CorrectedRate:
    """Dark-subtracted, transmission-corrected rate with its Poisson error."""
    _check_channel(channel)
    if not duration > 0:
        raise DomainError("counting duration must be > 0")
    raw = np.asarray(raw, dtype=float)
    transmission = config.transmission(channel)
    rate = (raw / duration - config.dark_rate(channel)) / transmission
    error = np.sqrt(np.clip(raw, 0.0, None)) / duration / transmission
    clamped = rate < 0
    if np.any(clamped):
        logger.warning(f"{int(np.sum(clamped))} negative {channel} rate(s) clamped to 0")
        rate = np.where(clamped, 0.0, rate)
    if rate.ndim == 0:
        return CorrectedRate(float(rate), float(error), bool(clamped))
    return CorrectedRate(rate, error, clamped)


def correct_mean_counts(
    mean_counts, std_counts, n_samples: int, window: float,
    config: DetectorConfig, channel: str,
) -> Tuple[np.ndarray, np.ndarray]:
    """Correct per-repetition window counts to rates.

    The error is the standard error of the per-repetition mean, which also
    covers excess noise beyond Poisson statistics.
    """
    corrected = correct_counts(np.asarray(mean_counts) * n_samples,
                               n_samples * window, config, channel)
    error = np.asarray(std_counts) / np.sqrt(n_samples) / window
    return corrected.rate, error / config.transmission(channel)


def correct_trace(trace: RelaxometryTrace, config: DetectorConfig) -> RelaxometryTrace:
    """Convert a raw trace (counts per window) to corrected rates (counts/s).

    The std column of the result is the standard deviation of the corrected
    per-repetition rate, so RelaxometryTrace.cell keeps returning standard
    errors of the mean.
    """
    if trace.provenance != "raw":
        raise DomainError("trace is already corrected")
    data = trace.data.copy()
    for (window, channel), rows in data.groupby(["window", "channel"]):
        duration = trace.window_durations.get(window)
        if duration is None:
            raise DomainError(f"trace has no duration for read window {window!r}")
        rate, error = correct_mean_counts(
            rows["mean"].to_numpy(), rows["std"].to_numpy(),
            trace.n_samples, duration, config, channel,
        )
        data.loc[rows.index, "mean"] = rate
        data.loc[rows.index, "std"] = error * np.sqrt(trace.n_samples)
    return trace.with_data(data, provenance="corrected")
