"""CLI stages: config handling, manifest, exit codes, artifacts."""

import json
import os

import numpy as np
import pytest

from conftest import cli_config, write_config
from yarnshell import cli
from yarnshell.errors import ConfigError


def run_cli(*argv):
    return cli.main(list(argv))


def test_load_config_json(tmp_path):
    p = write_config(tmp_path / "run.json", {"output_dir": str(tmp_path)})
    cfg = cli.load_config(p)
    assert cfg["output_dir"] == str(tmp_path)


def test_load_config_toml(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(f'output_dir = "{tmp_path}"\nseed = 3\n\n[sampling]\nn_stretch = 2\n')
    cfg = cli.load_config(str(p))
    assert cfg["seed"] == 3
    assert cfg["sampling"]["n_stretch"] == 2


def test_missing_config_is_config_error(tmp_path):
    assert run_cli("relax", str(tmp_path / "nope.toml")) == 2


def test_malformed_config_is_config_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert run_cli("relax", str(p)) == 2


def test_unknown_section_field_rejected(tmp_path):
    cfg = cli_config(tmp_path / "out")
    cfg["sampling"]["n_wiggles"] = 3
    p = write_config(tmp_path / "run.json", cfg)
    assert run_cli("relax", p) == 2


def test_unknown_builtin_pattern_rejected(tmp_path):
    cfg = cli_config(tmp_path / "out", pattern={"builtin": "brocade"})
    p = write_config(tmp_path / "run.json", cfg)
    assert run_cli("relax", p) == 2


def test_unknown_builtin_material_rejected(tmp_path):
    cfg = cli_config(tmp_path / "out", material={"builtin": "mithril"})
    p = write_config(tmp_path / "run.json", cfg)
    assert run_cli("relax", p) == 2


def test_stage_dependency_exit_code(tmp_path):
    cfg = cli_config(tmp_path / "out")
    p = write_config(tmp_path / "run.json", cfg)
    # fit before homogenize/relax: missing upstream artifact
    assert run_cli("fit", p) == 4


def test_config_hash_stability():
    a = {"b": 1, "a": {"y": 2, "x": 3}}
    b = {"a": {"x": 3, "y": 2}, "b": 1}
    assert cli.config_hash(a) == cli.config_hash(b)
    assert cli.config_hash(a) != cli.config_hash({"b": 2, "a": {"y": 2, "x": 3}})


def test_relaxed_state_roundtrip(tmp_path, straight_rest):
    pat, spec, rest = straight_rest
    p = tmp_path / "state.json"
    cli.write_relaxed_state(rest, 2.5e-5, str(p), config_hash="abc")
    back, radius, h = cli.read_relaxed_state(str(p))
    assert radius == 2.5e-5
    assert h == "abc"
    assert np.allclose(back.points, rest.points)
    assert np.allclose(back.frames, rest.frames)
    assert np.allclose(back.rest_stretch, rest.rest_stretch)


def test_relaxed_state_schema_checked(tmp_path):
    p = tmp_path / "state.json"
    p.write_text(json.dumps({"schema": "something-else/9"}))
    with pytest.raises(ConfigError):
        cli.read_relaxed_state(str(p))


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    """One full CLI pipeline on the fast straight-yarn fixture."""
    out = tmp_path_factory.mktemp("pipeline")
    cfg = cli_config(out / "artifacts")
    p = write_config(out / "run.json", cfg)
    code = run_cli("pipeline", p, "--jobs", "1")
    return code, cfg, p


def test_pipeline_succeeds(pipeline_run):
    code, cfg, p = pipeline_run
    assert code == 0


def test_pipeline_artifacts_exist(pipeline_run):
    code, cfg, p = pipeline_run
    out = cfg["output_dir"]
    for name in ("relaxed.json", "energies.csv", "params.json", "manifest.json",
                 "drape.json", "drape.obj"):
        assert os.path.exists(os.path.join(out, name)), name
    assert os.path.exists(os.path.join(out, "stretch_curves", "cut_0.csv"))
    assert os.path.exists(os.path.join(out, "stretch_curves", "cut_90.csv"))
    assert os.path.exists(os.path.join(out, "export", "energy_density.csv"))
    assert os.path.exists(os.path.join(out, "export", "force_curves.csv"))


def test_manifest_records_stages(pipeline_run):
    code, cfg, p = pipeline_run
    with open(os.path.join(cfg["output_dir"], "manifest.json")) as f:
        man = json.load(f)
    assert man["config_hash"] == cli.config_hash(cfg)
    for stage in ("relax", "homogenize", "fit", "stretch-test", "drape", "export"):
        assert stage in man["artifacts"]


def test_params_json_is_fittable_output(pipeline_run):
    code, cfg, p = pipeline_run
    with open(os.path.join(cfg["output_dir"], "params.json")) as f:
        doc = json.load(f)
    assert doc["config_hash"] == cli.config_hash(cfg)
    assert doc["params"]["h"] > 0
    assert "report" in doc and "gamma" in doc["report"]


def test_hash_mismatch_refused_then_forced(pipeline_run, tmp_path):
    code, cfg, p0 = pipeline_run
    changed = dict(cfg, seed=99)
    p = write_config(tmp_path / "changed.json", changed)
    # downstream stage under a changed config must refuse the stale artifacts
    assert run_cli("fit", p) == 4
    # --force accepts them
    assert run_cli("fit", p, "--force") == 0
