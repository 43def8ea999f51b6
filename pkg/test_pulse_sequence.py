from pathlib import Path

import numpy as np
import pytest

from src.errors import SequenceValidationError
from src.pulse_sequence import (
    Dark,
    Laser,
    PiPulse,
    PulseSequence,
    ReadWindow,
    format_sequence,
    load_sequence,
    parse_sequence,
    standard_sequence,
)

STANDARD_FILE = Path(__file__).parent / "sequences" / "standard.seq"


def test_standard_sequence_structure():
    seq = standard_sequence()
    assert seq.has_pi
    assert seq.halves == ("with_pi", "without_pi")
    assert [w.label for w in seq.windows] == ["normalization", "signal"]
    assert len(seq.taus) == 24
    assert seq.taus[0] == pytest.approx(1e-6)
    assert seq.taus[-1] == pytest.approx(3e-2)


def test_shipped_file_is_the_standard_sequence():
    assert load_sequence(STANDARD_FILE) == standard_sequence()


def test_format_parse_round_trip():
    seq = standard_sequence(power=0.56e-3, taus=[1e-6, 1e-5, 1e-4], repetitions=123)
    assert parse_sequence(format_sequence(seq)) == seq


def test_without_pi_drops_pulse_and_half():
    seq = standard_sequence().without_pi()
    assert not seq.has_pi
    assert seq.halves == ("without_pi",)
    assert not any(isinstance(s, PiPulse) for s in seq.segments)


def test_lowercase_power_placeholder_and_comments():
    text = """
    POWER 1e-4   # sequence power
    SWEEP list 1e-6 2e-6
    LASER p 10e-6
    READ signal 5e-6
    DARK tau
    """
    seq = parse_sequence(text)
    assert seq.laser_power(seq.segments[0]) == 1e-4
    assert seq.taus == (1e-6, 2e-6)


def test_explicit_laser_power():
    seq = PulseSequence(
        segments=(Laser(10e-6, power=2e-3), ReadWindow("signal", 5e-6)), taus=(0.0, 1e-6)
    )
    assert seq.laser_power(seq.segments[0]) == 2e-3


def _sequence(segments, taus=(1e-6, 1e-5), power=1e-4):
    return PulseSequence(segments=tuple(segments), taus=taus, power=power)


@pytest.mark.parametrize(
    "segments",
    [
        [Dark(1e-6), ReadWindow("signal", 5e-6)],
        [Laser(2e-6), ReadWindow("signal", 5e-6)],
        [Laser(5e-6), ReadWindow("reference", 5e-6)],
        [Laser(5e-6), ReadWindow("signal", 5e-6), Laser(5e-6), ReadWindow("signal", 5e-6)],
        [Laser(0.0)],
        [Dark(-1e-6)],
    ],
)
def test_invalid_segments(segments):
    with pytest.raises(SequenceValidationError):
        _sequence(segments)


@pytest.mark.parametrize("taus", [(), (1e-5, 1e-6), (-1e-6, 1e-6), (1e-6, 1e-6)])
def test_invalid_taus(taus):
    with pytest.raises(SequenceValidationError):
        _sequence([Laser(5e-6), ReadWindow("signal", 5e-6)], taus=taus)


def test_power_placeholder_needs_sequence_power():
    with pytest.raises(SequenceValidationError):
        _sequence([Laser(5e-6), ReadWindow("signal", 5e-6)], power=None)


def test_zero_repetitions_rejected():
    with pytest.raises(SequenceValidationError):
        standard_sequence(repetitions=0)


def test_parse_errors_name_the_line():
    with pytest.raises(SequenceValidationError, match="line 2"):
        parse_sequence("SWEEP list 1e-6\nLASER P\n")


def test_missing_sweep():
    with pytest.raises(SequenceValidationError):
        parse_sequence("POWER 1e-4\nLASER P 5e-6\n")


def test_log_sweep_is_geometric():
    seq = parse_sequence("POWER 1e-4\nSWEEP log 1e-6 1e-2 5\nLASER P 5e-6\nREAD signal 5e-6\n")
    np.testing.assert_allclose(seq.taus, [1e-6, 1e-5, 1e-4, 1e-3, 1e-2])
