from pathlib import Path

import pytest

from config import HarnessConfig, PerceptionConfig, RunConfig, load_config
from errors import ValidationError

FROZEN = Path(__file__).resolve().parent.parent / "ildvs.ini"


def test_frozen_file_matches_defaults():
    assert load_config(FROZEN) == RunConfig()


def test_partial_file_overrides(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[run]\ntask = mouse\n\n[servo]\nlam = 2.5\n\n[simworld]\nclutter = yes\n"
                    "grid_center = 0.4, 0.1\n\n[imitator]\nhidden = 64, 32\n", encoding="utf-8")
    config = load_config(path)
    assert config.task == "mouse"
    assert config.servo.lam == 2.5
    assert config.servo.eta0 == 0.01
    assert config.simworld.clutter is True
    assert config.simworld.grid_center == (0.4, 0.1)
    assert config.imitator.hidden == (64, 32)


@pytest.mark.parametrize("text, message", [
    ("[servo]\nlambda = 1\n", "unknown \\[servo\\] key"),
    ("[camera]\nf_u = 1\n", "unknown section"),
    ("[harness]\nhorizon = many\n", "horizon"),
    ("[simworld]\nclutter = maybe\n", "not a boolean"),
    ("[run]\nmode = fast\n", "unknown \\[run\\] key"),
    ("[harness]\nr_inner = 0.05\n", "r_inner < r_rim"),
    ("[run]\ntask = plate\n", "task must be one of"),
    ("[simworld]\nstart_speed = 3\n", "start_speed"),
    ("[imitator]\naugment_scale = 0.5\n", "augment_scale"),
])
def test_bad_files(tmp_path, text, message):
    path = tmp_path / "bad.ini"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ValidationError, match=message):
        load_config(path)


def test_missing_file():
    with pytest.raises(ValidationError):
        load_config("/nonexistent/run.ini")


def test_override():
    config = RunConfig()
    assert config.override("harness", seed=None) is config
    assert config.override("harness", seed=9).harness.seed == 9
    with pytest.raises(ValidationError):
        config.override("harness", speed=1)


def test_section_validation():
    with pytest.raises(ValidationError):
        PerceptionConfig(window=0)
    with pytest.raises(ValidationError):
        PerceptionConfig(f_u=-1.0)
    with pytest.raises(ValidationError):
        HarnessConfig(workers=0)
    assert PerceptionConfig().intrinsics.c_u == 320.0
