"""
RelaxometryTrace: per-tau photon counts of the two read windows, held as a
long-format pandas DataFrame.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.errors import DomainError, StructureError

logger = logging.getLogger("nv-relaxometry")

TRACE_COLUMNS = ["tau", "half", "window", "channel", "mean", "std"]
PROVENANCES = ("raw", "corrected")


@dataclass(frozen=True)
class RelaxometryTrace:
    """Photon counts of a relaxometry sweep.

    :param data: one row per (tau, half, window, channel) with the mean and
        standard deviation over repetitions. Raw traces hold counts per
        window, corrected traces hold counts/s.
    :param power: laser power of the sequence (W)
    :param temperature: K
    :param repetitions: cycles per sweep
    :param sweeps: number of sweeps
    :param window_durations: read window label -> duration (s)
    :param provenance: "raw" or "corrected"
    """

    data: pd.DataFrame
    power: float
    temperature: float
    repetitions: int
    sweeps: int = 1
    window_durations: Dict[str, float] = field(default_factory=dict)
    provenance: str = "raw"
    seed: Optional[Union[int, Tuple[int, ...]]] = None

    def __post_init__(self):
        missing = set(TRACE_COLUMNS) - set(self.data.columns)
        if missing:
            raise StructureError(f"trace table lacks columns {sorted(missing)}")
        if self.provenance not in PROVENANCES:
            raise DomainError(f"unknown trace provenance {self.provenance!r}")
        if self.repetitions < 1 or self.sweeps < 1:
            raise DomainError("repetitions and sweeps must be >= 1")
        data = (
            self.data[TRACE_COLUMNS]
            .sort_values(["half", "window", "channel", "tau"], kind="mergesort")
            .reset_index(drop=True)
        )
        if (data["mean"] < 0).any() or (data["std"] < 0).any():
            raise DomainError("trace counts and standard deviations must be >= 0")
        cells = data.groupby(["half", "window", "channel"]).size()
        n_taus = data["tau"].nunique()
        if (cells != n_taus).any():
            raise StructureError("trace grid is incomplete")
        object.__setattr__(self, "data", data)

    @property
    def n_samples(self) -> int:
        return self.repetitions * self.sweeps

    @property
    def taus(self) -> np.ndarray:
        return np.sort(self.data["tau"].unique())

    @property
    def halves(self) -> Tuple[str, ...]:
        return tuple(sorted(self.data["half"].unique()))

    def has_half(self, half: str) -> bool:
        return half in self.halves

    def cell(self, half: str, window: str, channel: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(tau, mean, standard error of the mean) of one cell, sorted by tau."""
        rows = self.data[
            (self.data["half"] == half)
            & (self.data["window"] == window)
            & (self.data["channel"] == channel)
        ]
        if rows.empty:
            raise StructureError(f"trace has no {half}/{window}/{channel} cell")
        sem = rows["std"].to_numpy() / np.sqrt(self.n_samples)
        return rows["tau"].to_numpy(), rows["mean"].to_numpy(), sem

    def with_data(self, data: pd.DataFrame, provenance: str) -> "RelaxometryTrace":
        return RelaxometryTrace(
            data=data,
            power=self.power,
            temperature=self.temperature,
            repetitions=self.repetitions,
            sweeps=self.sweeps,
            window_durations=dict(self.window_durations),
            provenance=provenance,
            seed=self.seed,
        )

    def metadata(self) -> Dict:
        return {
            "power": self.power,
            "temperature": self.temperature,
            "repetitions": self.repetitions,
            "sweeps": self.sweeps,
            "provenance": self.provenance,
            "seed": self.seed,
            **{f"window_{k}": v for k, v in sorted(self.window_durations.items())},
        }
