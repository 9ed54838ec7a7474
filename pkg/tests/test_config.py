import json

import pytest

from ofm.config import ConfigError, RunConfig, config_from_dict, parse_config, serialize_config

MINIMAL = 'seed = 3\n\n[dataset]\ncount = 100\n'


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_config_fills_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL))
    assert cfg.seed == 3 and cfg.dataset.count == 100
    assert cfg.dataset.kernel.length_scale == 0.3 and cfg.dataset.kernel.smoothness == 1.5
    assert cfg.reference.length_scale == 0.01 and cfg.reference.smoothness == 0.5
    assert cfg.sgld.n_iter == 40_000 and cfg.sgld.lr_init == 5e-3
    assert cfg.solver.atol == 1e-5


def test_round_trip(tmp_path):
    text = MINIMAL + '[sgld]\nn_iter = 500\nburn_in = 100\nmode = "paper_eq17"\n[dataset.kernel]\nlength_scale = 0.2\n'
    cfg = parse_config(write(tmp_path, text))
    assert cfg.dataset.kernel.length_scale == 0.2 and cfg.dataset.kernel.smoothness == 1.5
    again = parse_config(write(tmp_path, serialize_config(cfg), "echo.toml"))
    assert again == cfg
    as_json = parse_config(write(tmp_path, serialize_config(cfg, "json"), "echo.json"))
    assert as_json == cfg


def test_modes_exceed_grid_names_both_values(tmp_path):
    text = 'seed = 1\n[dataset]\npoints = [16]\n[fno]\nmodes = [12]\n'
    with pytest.raises(ConfigError) as err:
        parse_config(write(tmp_path, text))
    msg = str(err.value)
    assert "12" in msg and "16" in msg


def test_every_problem_reported(tmp_path):
    text = 'seed = "x"\nbogus = 1\n[dataset]\ncount = "many"\ncolour = 2\n[sgld]\nthin = 1.5\n'
    with pytest.raises(ConfigError) as err:
        parse_config(write(tmp_path, text))
    probs = err.value.problems
    assert len(probs) >= 5
    joined = "\n".join(probs)
    for needle in ("seed", "bogus", "dataset.count", "dataset.colour", "sgld.thin"):
        assert needle in joined


def test_missing_seed_and_file(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        parse_config(write(tmp_path, "[dataset]\ncount = 5\n"))
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(tmp_path / "nope.toml")
    with pytest.raises(ConfigError):
        parse_config(write(tmp_path, "seed = = 1"))


def test_cross_checks():
    with pytest.raises(ConfigError, match="batch_size"):
        config_from_dict({"seed": 0, "dataset": {"count": 10}})
    with pytest.raises(ConfigError, match="noise_std"):
        config_from_dict({"seed": 0, "regression": {"noise_std": 0.0}})
    with pytest.raises(ConfigError, match="n_obs"):
        config_from_dict({"seed": 0, "regression": {"n_obs": 500}})


def test_section_validation_errors_collected():
    with pytest.raises(ConfigError) as err:
        config_from_dict({"seed": 0, "dataset": {"kind": "weird"}, "sgld": {"mode": "nope"}})
    assert len(err.value.problems) == 2


def test_paths_resolve_relative_to_config(tmp_path):
    sub = tmp_path / "cfgs"
    sub.mkdir()
    cfg = parse_config(write(sub, MINIMAL + '[io]\nout_dir = "../runs/a"\n'))
    assert cfg.io.out_dir == str((tmp_path / "runs" / "a").resolve())
    assert cfg.dataset_path.parent == tmp_path / "runs" / "a"


def test_to_dict_is_json_serializable():
    cfg = config_from_dict({"seed": 0})
    json.dumps(cfg.to_dict())
    assert isinstance(cfg, RunConfig)
