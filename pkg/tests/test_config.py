import itertools

import pytest

from hydroneuro.config import DEFAULTS, ConfigError, config_from_dict, load_raw, parse_config


def test_defaults_resolve_and_echo():
    cfg = parse_config(None)
    res = cfg.resolved()
    assert res["model"] == DEFAULTS["model"]
    assert res["run"]["substep"] == pytest.approx(cfg.model_spec().default_substep)
    assert cfg.source is None


def test_indivisible_partition_names_both_keys():
    raw = load_raw(None)
    raw["partition"].update(delta=0.3, tau=0.2)
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    msg = str(exc.value)
    assert "delta" in msg and "tau" in msg


def test_all_errors_reported_together():
    raw = load_raw(None)
    raw["run"]["horizon"] = -1.0
    raw["model"]["epsilon"] = 0.3
    raw["audit"]["window"] = 0
    raw["pde"]["extra"] = 1
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.errors == ["pde.extra: unknown key; allowed: born_nodes, delta, levels, obs_level, rgrid, ugrid"]
    del raw["pde"]["extra"]
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    joined = "\n".join(exc.value.errors)
    assert len(exc.value.errors) == 3
    for key in ("run.horizon", "model.epsilon", "audit.window"):
        assert key in joined


def test_sweep_expands_in_fixed_order():
    raw = load_raw(None)
    raw["partition"] = {"delta": [0.2, 0.1], "ell": [0.5, 0.2], "E": 0.05, "tau": [0.05, 0.025]}
    cells = config_from_dict(raw).partition_cells()
    want = list(itertools.product([0.2, 0.1], [0.5, 0.2], [0.05], [0.05, 0.025]))
    assert [(c.delta, c.ell, c.E, c.tau) for c in cells] == want


def test_unknown_preset_lists_choices():
    raw = load_raw(None)
    raw["model"]["phi"] = {"preset": "arctan", "clamp": 2.0}
    with pytest.raises(ConfigError, match="unknown preset 'arctan'; choose one of .*linear"):
        config_from_dict(raw)


def test_missing_clamp_and_model_keys():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"model": {"epsilon": 0.1, "phi": {"preset": "linear", "slope": 1.0}}})
    joined = "\n".join(exc.value.errors)
    assert "model.phi.clamp" in joined and "model.alpha: missing" in joined


def test_unknown_section():
    with pytest.raises(ConfigError, match=r"\[bogus\]: unknown section"):
        config_from_dict({"bogus": {}})


def test_file_round_trip(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(
        """
[model]
epsilon = 0.05
alpha = 0.2
a = { preset = "constant", c = 0.5 }
b = { preset = "gaussian", c = 1.0, sigma = 0.2 }
phi = { preset = "power", coef = 1.0, power = 2.0, clamp = 1.5 }
psi0 = { preset = "linear", R0 = 1.0 }

[run]
horizon = 0.5
replicas = 4
"""
    )
    cfg = parse_config(path)
    assert cfg.source == str(path)
    assert cfg.model_spec().mesh.count == 400
    assert cfg.run["replicas"] == 4 and cfg.run["seed"] == 0
    assert cfg.model_spec().phi.sup_bound == pytest.approx(2.25)


def test_unreadable_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\nepsilon = ")
    with pytest.raises(ConfigError, match="not valid TOML"):
        parse_config(bad)
