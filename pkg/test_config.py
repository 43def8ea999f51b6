import math
from pathlib import Path

import pytest

from src.config import config_from_mapping, config_to_lines, load_config
from src.core_model import PhysicsConfig
from src.errors import ConfigError

DEFAULT_ENV = Path(__file__).parent / "default.env"


def test_no_file_gives_defaults():
    assert load_config(None) == PhysicsConfig()


def test_shipped_file_matches_defaults():
    assert load_config(DEFAULT_ENV) == PhysicsConfig()


def test_section_keys_override_fields(tmp_path):
    path = tmp_path / "custom.env"
    path.write_text("# warmer sample\nT1_MODEL__A1=700\nRECHARGE__T_R2=3e-3\nKAPPA_LAMBDA=1.5\n")
    config = load_config(path)
    assert config.t1_model.a1 == 700.0
    assert config.recharge.t_r2 == 3e-3
    assert config.kappa_lambda == 1.5
    assert config.t1_model.a2 == PhysicsConfig().t1_model.a2


def test_integer_fields_parse_as_int():
    config = config_from_mapping({"SPECTRUM__GRID_POINTS": "512"})
    assert config.spectrum.grid_points == 512
    assert isinstance(config.spectrum.grid_points, int)


def test_infinite_values_are_accepted():
    config = config_from_mapping({"EMISSION__CHARGE_TIME_UNIT": "inf"})
    assert math.isinf(config.emission.charge_time_unit)


@pytest.mark.parametrize(
    "values, key",
    [
        ({"T1_MODEL__A9": "1"}, "T1_MODEL__A9"),
        ({"NOT_A_KEY": "1"}, "NOT_A_KEY"),
        ({"T1_MODEL__A1": ""}, "T1_MODEL__A1"),
        ({"RECHARGE__T_R1": "fast"}, "RECHARGE__T_R1"),
    ],
)
def test_bad_keys_are_named(values, key):
    with pytest.raises(ConfigError) as info:
        config_from_mapping(values)
    assert info.value.key == key


def test_invalid_section_values_raise_config_error():
    with pytest.raises(ConfigError):
        config_from_mapping({"RECHARGE__WEIGHT1": "2"})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.env")


def test_lines_round_trip(tmp_path):
    config = config_from_mapping({"T1_MODEL__A1": "612.5", "DETECTOR__DARK_RATE_ZERO": "150"})
    path = tmp_path / "round_trip.env"
    path.write_text("\n".join(config_to_lines(config)) + "\n")
    assert load_config(path) == config
