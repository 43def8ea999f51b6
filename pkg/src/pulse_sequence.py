"""
Pulse sequences and their line-oriented text format.

Example (the standard relaxometry cycle)::

    REPETITIONS 50000
    PAUSE 1e-3
    POWER 8e-6
    SWEEP log 1e-6 3e-2 24
    LASER P 200e-6
    DARK 1e-6
    LASER P 5e-6
    READ normalization 5e-6
    PI
    DARK tau
    LASER P 5e-6
    READ signal 5e-6

``P`` stands for the sequence power, ``tau`` for the swept dark time. A READ
line binds to the LASER line directly above it and covers the start of that
pulse.
"""
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import SequenceValidationError

logger = logging.getLogger("nv-relaxometry")

TAU = "tau"
WINDOW_LABELS = ("normalization", "signal")
HALVES = ("with_pi", "without_pi")


@dataclass(frozen=True)
class Laser:
    duration: float
    power: Optional[float] = None  # None: use the sequence power


@dataclass(frozen=True)
class Dark:
    duration: Union[float, str]  # seconds or TAU


@dataclass(frozen=True)
class PiPulse:
    target: str = "addressed"


@dataclass(frozen=True)
class ReadWindow:
    label: str
    duration: float


Segment = Union[Laser, Dark, PiPulse, ReadWindow]


@dataclass(frozen=True)
class PulseSequence:
    """One relaxometry cycle plus its sweep and repetition metadata."""

    segments: Tuple[Segment, ...]
    taus: Tuple[float, ...]
    repetitions: int = 50000
    pause: float = 1e-3
    power: Optional[float] = None
    sweeps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "taus", tuple(float(t) for t in self.taus))
        validate_sequence(self)

    @property
    def has_pi(self) -> bool:
        return any(isinstance(s, PiPulse) for s in self.segments)

    @property
    def halves(self) -> Tuple[str, ...]:
        return HALVES if self.has_pi else ("without_pi",)

    @property
    def windows(self) -> List[ReadWindow]:
        return [s for s in self.segments if isinstance(s, ReadWindow)]

    def laser_power(self, segment: Laser) -> float:
        return self.power if segment.power is None else segment.power

    def with_power(self, power: float) -> "PulseSequence":
        """Override the sequence power (used by LASER P segments)."""
        return dataclasses.replace(self, power=power)

    def with_repetitions(self, repetitions: int) -> "PulseSequence":
        return dataclasses.replace(self, repetitions=repetitions)

    def without_pi(self) -> "PulseSequence":
        segments = tuple(s for s in self.segments if not isinstance(s, PiPulse))
        return dataclasses.replace(self, segments=segments)


def validate_sequence(seq: PulseSequence):
    if seq.repetitions < 1:
        raise SequenceValidationError("repetitions must be >= 1")
    if seq.sweeps < 1:
        raise SequenceValidationError("sweeps must be >= 1")
    if seq.pause < 0:
        raise SequenceValidationError("pause must be >= 0")
    taus = np.asarray(seq.taus)
    if taus.size == 0:
        raise SequenceValidationError("tau sweep is empty")
    if np.any(taus < 0) or np.any(np.diff(taus) <= 0):
        raise SequenceValidationError("tau list must be non-negative and strictly ascending")

    previous: Optional[Segment] = None
    labels = []
    for index, segment in enumerate(seq.segments):
        if isinstance(segment, Laser):
            if not segment.duration > 0:
                raise SequenceValidationError(f"segment {index}: laser duration must be > 0")
            power = seq.laser_power(segment)
            if power is None:
                raise SequenceValidationError(
                    f"segment {index}: LASER P needs a sequence POWER"
                )
            if power < 0:
                raise SequenceValidationError(f"segment {index}: laser power must be >= 0")
        elif isinstance(segment, Dark):
            if segment.duration != TAU and not segment.duration >= 0:
                raise SequenceValidationError(f"segment {index}: dark duration must be >= 0")
        elif isinstance(segment, ReadWindow):
            if segment.label not in WINDOW_LABELS:
                raise SequenceValidationError(
                    f"segment {index}: unknown read window {segment.label!r}"
                )
            if not isinstance(previous, Laser):
                raise SequenceValidationError(
                    f"segment {index}: READ {segment.label} is outside a LASER segment"
                )
            if not 0 < segment.duration <= previous.duration:
                raise SequenceValidationError(
                    f"segment {index}: READ {segment.label} is longer than its LASER segment"
                )
            labels.append(segment.label)
        elif not isinstance(segment, PiPulse):
            raise SequenceValidationError(f"segment {index}: unknown segment {segment!r}")
        previous = segment
    if len(set(labels)) != len(labels):
        raise SequenceValidationError("each read window label may appear only once")


def _number(token: str, line_no: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise SequenceValidationError(f"line {line_no}: cannot parse {token!r}") from None


def parse_sequence(text: str) -> PulseSequence:
    """Parse the line-oriented sequence format."""
    segments: List[Segment] = []
    header = {"repetitions": 50000, "pause": 1e-3, "power": None, "sweeps": 1}
    taus: Optional[List[float]] = None

    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = line.split("#", 1)[0].split()
        if not tokens:
            continue
        keyword, args = tokens[0].upper(), tokens[1:]
        if keyword == "REPETITIONS" and len(args) == 1:
            header["repetitions"] = int(_number(args[0], line_no))
        elif keyword == "SWEEPS" and len(args) == 1:
            header["sweeps"] = int(_number(args[0], line_no))
        elif keyword == "PAUSE" and len(args) == 1:
            header["pause"] = _number(args[0], line_no)
        elif keyword == "POWER" and len(args) == 1:
            header["power"] = _number(args[0], line_no)
        elif keyword == "SWEEP" and args and args[0].lower() == "log" and len(args) == 4:
            start, stop = _number(args[1], line_no), _number(args[2], line_no)
            if not 0 < start < stop:
                raise SequenceValidationError(f"line {line_no}: log sweep needs 0 < start < stop")
            count = int(_number(args[3], line_no))
            taus = list(np.geomspace(start, stop, count))
        elif keyword == "SWEEP" and args and args[0].lower() == "list" and len(args) > 1:
            taus = [_number(t, line_no) for t in args[1:]]
        elif keyword == "LASER" and len(args) == 2:
            power = None if args[0].upper() == "P" else _number(args[0], line_no)
            segments.append(Laser(duration=_number(args[1], line_no), power=power))
        elif keyword == "DARK" and len(args) == 1:
            duration = TAU if args[0].lower() == TAU else _number(args[0], line_no)
            segments.append(Dark(duration=duration))
        elif keyword == "PI" and len(args) <= 1:
            segments.append(PiPulse(*args))
        elif keyword == "READ" and len(args) == 2:
            segments.append(ReadWindow(label=args[0].lower(), duration=_number(args[1], line_no)))
        else:
            raise SequenceValidationError(f"line {line_no}: cannot parse {line.strip()!r}")

    if taus is None:
        raise SequenceValidationError("sequence has no SWEEP line")
    return PulseSequence(segments=tuple(segments), taus=tuple(taus), **header)


def format_sequence(seq: PulseSequence) -> str:
    lines = [
        f"REPETITIONS {seq.repetitions}",
        f"SWEEPS {seq.sweeps}",
        f"PAUSE {seq.pause!r}",
    ]
    if seq.power is not None:
        lines.append(f"POWER {seq.power!r}")
    lines.append("SWEEP list " + " ".join(repr(t) for t in seq.taus))
    for segment in seq.segments:
        if isinstance(segment, Laser):
            power = "P" if segment.power is None else repr(segment.power)
            lines.append(f"LASER {power} {segment.duration!r}")
        elif isinstance(segment, Dark):
            duration = TAU if segment.duration == TAU else repr(segment.duration)
            lines.append(f"DARK {duration}")
        elif isinstance(segment, PiPulse):
            lines.append("PI")
        else:
            lines.append(f"READ {segment.label} {segment.duration!r}")
    return "\n".join(lines) + "\n"


def load_sequence(path: Union[str, Path]) -> PulseSequence:
    return parse_sequence(Path(path).read_text())


def standard_sequence(
    power: float = 8e-6,
    taus: Optional[Sequence[float]] = None,
    repetitions: int = 50000,
    pi_pulse: bool = True,
) -> PulseSequence:
    """200 us polarization, 1 us gap, 5 us normalization and signal readouts."""
    if taus is None:
        taus = np.geomspace(1e-6, 3e-2, 24)
    segments: List[Segment] = [
        Laser(200e-6),
        Dark(1e-6),
        Laser(5e-6),
        ReadWindow("normalization", 5e-6),
    ]
    if pi_pulse:
        segments.append(PiPulse())
    segments += [Dark(TAU), Laser(5e-6), ReadWindow("signal", 5e-6)]
    return PulseSequence(
        segments=tuple(segments),
        taus=tuple(taus),
        repetitions=repetitions,
        pause=1e-3,
        power=power,
    )
