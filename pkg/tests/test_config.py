import pytest
from hypothesis import given
from hypothesis import strategies as st

from sidemoe.config import HELP, SECTIONS, RunConfig
from sidemoe.errors import ConfigError


def test_defaults_match_reference_setup():
    c = RunConfig()
    assert (c.bits, c.p, c.interval, c.epochs) == (8, 0.10, 10, 50)
    assert (c.n_experts, c.top_k, c.alpha, c.beta) == (6, 1, 1.0, 1e-3)
    assert (c.drift_fraction, c.drift_sigma) == (0.01, 0.1)


def test_every_key_has_a_section_and_help():
    keys = [k for ks in SECTIONS.values() for k in ks]
    assert sorted(keys) == sorted(RunConfig().to_dict())
    assert set(HELP) == set(keys)


def test_ini_roundtrip_is_stable():
    c = RunConfig(seed=3, p=0.05, layer_drop="1,2", rounding="nearest", use_moe=False)
    text = c.to_ini()
    back = RunConfig.from_ini(text)
    assert back == c
    assert back.to_ini() == text


@given(st.integers(0, 2**31), st.floats(0, 1), st.integers(1, 8), st.floats(1e-6, 1.0), st.booleans())
def test_roundtrip_property(seed, p, n, lr, moe):
    c = RunConfig(seed=seed, p=p, n_experts=n, lr=lr, use_moe=moe)
    assert RunConfig.from_ini(c.to_ini()) == c


def test_bundled_config_is_the_default(tmp_path):
    from pathlib import Path
    assert RunConfig.load(Path(__file__).parents[1] / "configs" / "default.ini") == RunConfig()


@pytest.mark.parametrize("text, needle", [
    ("[router]\nn_expert = 6\n", "n_expert"),
    ("[train]\nbits = 4\n", "quantizer"),
    ("[gpu]\nx = 1\n", "gpu"),
    ("[train]\nlr = fast\n", "lr"),
    ("[backbone]\nquantize = maybe\n", "quantize"),
    ("[requant]\np = 1.5\n", "p"),
    ("[router]\ntop_k = 7\n", "top_k"),
    ("[side]\nlayer_drop = a,b\n", "layer_drop"),
    ("no section header\n", "malformed"),
])
def test_bad_configs_name_the_problem(text, needle):
    with pytest.raises(ConfigError, match=needle):
        RunConfig.from_ini(text)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "nope.ini")


def test_from_dict_types():
    assert RunConfig.from_dict({"lr": 1, "seed": "4"}) == RunConfig(lr=1.0, seed=4)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"seed": True})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"sed": 1})
