import math
from pathlib import Path

import pytest
import yaml

from dyntx.core.exceptions import ConfigError, ModelValidationError
from dyntx.models.schemas import load_model_file, load_run_config, parse_threshold

YAML_CONFIG = """\
command: identify
model:
  design:
    name: dgp_a
evaluator:
  backend: exact
  quad_order: 4
query:
  regimes: ["11"]
  x: [2, 2]
"""

ONE_PERIOD_MODEL = {
    "horizon": 1,
    "x_grid": [[0.0, 1.0]],
    "latent": {"rho_uv": 0.4},
    "mu": [
        {"t": 1, "y": "", "d": "*", "values": [0.2, 0.4]},
        {"t": 1, "y": "", "d": "1", "values": ["+inf", 0.5]},
    ],
    "pi": [{"t": 1, "y": "", "d": "", "values": [-0.3, 0.5]}],
}


def test_yaml_errors_name_key_and_line(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(YAML_CONFIG)
    with pytest.raises(ConfigError) as info:
        load_run_config(str(path))
    assert info.value.key == "evaluator.quad_order"
    assert info.value.line == 7
    assert info.value.__cause__ is not None


def test_json_syntax_error_has_a_line(tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{\n  "seed": 1,\n  "model": \n}\n')
    with pytest.raises(ConfigError) as info:
        load_run_config(str(path))
    assert info.value.line is not None


def test_top_level_must_be_a_mapping(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_run_config(str(path))


def test_inline_tables_with_wildcards(write_config):
    config = load_run_config(write_config({"model": ONE_PERIOD_MODEL}))
    model = config.structural_model()
    assert model.T == 1
    assert list(model.mu[0][0]) == [0.2, 0.4]
    assert model.mu[0][1][0] == math.inf
    assert model.mu[0][1][1] == 0.5
    assert list(model.pi[0]) == [-0.3, 0.5]


def test_missing_table_entries_are_reported(write_config):
    tables = dict(ONE_PERIOD_MODEL, mu=[{"t": 1, "y": "", "d": "1", "values": [0.1, 0.2]}])
    config = load_run_config(write_config({"model": tables}))
    with pytest.raises(ModelValidationError) as info:
        config.structural_model()
    assert [v.code for v in info.value.violations] == ["mu_table_incomplete"]


def test_entry_shape_errors(write_config):
    tables = dict(ONE_PERIOD_MODEL, mu=[{"t": 1, "y": "", "d": "*", "values": [0.1]}])
    with pytest.raises(ConfigError) as info:
        load_run_config(write_config({"model": tables})).structural_model()
    assert info.value.key == "mu"


def test_bad_pattern_is_a_config_error(write_config):
    tables = dict(ONE_PERIOD_MODEL, pi=[{"t": 1, "y": "", "d": "2", "values": [0.0, 0.1]}])
    with pytest.raises(ConfigError) as info:
        load_run_config(write_config({"model": tables}))
    assert info.value.key == "model.pi.0.d"


def test_thresholds():
    assert parse_threshold("+inf") == math.inf
    assert parse_threshold("-INF") == -math.inf
    assert parse_threshold("0.25") == 0.25
    assert parse_threshold(1) == 1.0


def test_model_file(tmp_path, write_config):
    model_path = tmp_path / "model.yaml"
    model_path.write_text(yaml.safe_dump(ONE_PERIOD_MODEL))
    assert load_model_file(str(model_path)).K(0) == 2
    config = load_run_config(write_config({"model_file": str(model_path)}))
    assert config.structural_model().T == 1


def test_only_one_model_source(write_config):
    payload = {
        "model": {"design": {"name": "dgp_a"}},
        "strata": [{"w0": 0, "share": 1.0, "model": {"design": {"name": "dgp_a"}}}],
    }
    with pytest.raises(ConfigError, match="only one"):
        load_run_config(write_config(payload))


def test_missing_data_file(write_config, tmp_path):
    with pytest.raises(ConfigError, match="file not found"):
        load_run_config(write_config({"data": str(tmp_path / "absent.csv")}))


def test_strata(write_config):
    payload = {
        "strata": [
            {"w0": 0, "share": 0.4, "model": {"design": {"name": "dgp_a"}}},
            {"w0": 1, "share": 0.6, "model": {"design": {"name": "dgp_b"}}},
        ]
    }
    stratified = load_run_config(write_config(payload)).stratified_model()
    assert [s.w0 for s in stratified.strata] == [0, 1]
    assert stratified.strata[1].model.K(1) == 4


def test_digest_is_stable(write_config):
    path = write_config({"model": {"design": {"name": "dgp_a"}}, "seed": 4})
    first = load_run_config(path).digest()
    assert first == load_run_config(path).digest()
    assert first != load_run_config(path, {"seed": 5}).digest()
    assert load_run_config(path, {"evaluator": {"draws": 200000}}).evaluator.backend == "exact"


def test_invalid_regime_string(write_config):
    with pytest.raises(ConfigError) as info:
        load_run_config(write_config({"query": {"regimes": ["1x"]}}))
    assert info.value.key == "query.regimes"


@pytest.mark.parametrize("name", ["dgp_a.yaml", "dgp_b.yaml", "strata.json"])
def test_shipped_configs_load(name):
    path = Path(__file__).resolve().parent.parent / "configs" / name
    config = load_run_config(str(path))
    assert config.command in ("identify", "bounds", "optimize")
    assert config.stratified_model() is not None
