import json
import math
import subprocess
import sys

import jsonschema
import pytest

from oracles import E_INV
from spatial_aloha.cli import ConfigError, load_schema, main, parse_config, run, validate


def run_cli(tmp_path, *args):
    return main([*args, "--out", str(tmp_path)])


def test_parse_spectral_flags():
    cfg = parse_config(["spectral", "--graph", "cycle:4", "--lambda", "0.05"])
    assert cfg.mode == "spectral"
    assert cfg.graph.node_count == 4
    assert cfg.lam == [0.05] * 4


def test_lambda_vector_and_length_check():
    cfg = parse_config(["classify", "--graph", "cycle:4", "--lambda", "0.1,0.1,0.05,0.05"])
    assert cfg.lam == [0.1, 0.1, 0.05, 0.05]
    with pytest.raises(ConfigError, match="lambda"):
        parse_config(["classify", "--graph", "cycle:4", "--lambda", "0.1,0.2"])


def test_zero_lambda_rejected(tmp_path):
    with pytest.raises(ConfigError, match="lambda_i > 0 required"):
        parse_config(["classify", "--graph", "cycle:4", "--lambda", "0"])
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mode": "classify", "graph": "cycle:4", "lambda": 0}))
    assert main(["classify", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_flag_overrides_file_seed(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mode": "simulate", "graph": "cycle:4", "lambda": 0.1, "seed": 3}))
    assert parse_config(["simulate", "--config", str(cfg)]).seed == 3
    assert parse_config(["simulate", "--config", str(cfg), "--seed", "11"]).seed == 11


def test_unknown_key_rejected_with_path(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mode": "spectral", "graph": "cycle:4", "colour": "red"}))
    assert main(["spectral", "--config", str(cfg)]) == 2
    assert "colour" in capsys.readouterr().err
    cfg.write_text(json.dumps({"mode": "spectral", "graph": "cycle:4", "lambda": [0.1, "x"]}))
    with pytest.raises(ConfigError, match=r"lambda"):
        parse_config(["spectral", "--config", str(cfg)])


def test_missing_graph_exit_2(capsys):
    assert main(["spectral", "--lambda", "0.1"]) == 2
    assert "graph" in capsys.readouterr().err


def test_bad_flag_exit_2():
    assert main(["spectral", "--graph", "cycle:4", "--bogus"]) == 2
    assert main(["nonsense"]) == 2


def test_zero_model_mismatch(tmp_path, capsys):
    code = run_cli(tmp_path, "simulate", "--graph", "complete:1", "--lambda", "0.5", "--slots", "10",
                   "--arrivals", "zero")
    assert code == 2
    assert "mismatch" in capsys.readouterr().err


def test_classify_summary(tmp_path, capsys):
    assert run_cli(tmp_path, "classify", "--graph", "cycle:4", "--lambda", "0.001") == 0
    out = capsys.readouterr().out
    assert "fluid_stable=true" in out and "diagonal=unstable" in out
    doc = json.loads((tmp_path / "classify.json").read_text())
    assert math.isclose(doc["result"]["global_threshold"], E_INV / 3)
    assert math.isclose(doc["result"]["local_threshold"], 5 / 27 * E_INV)


def test_stable_points_json(tmp_path):
    assert run_cli(tmp_path, "stable-points", "--graph", "cycle:4", "--lambda", "0.001") == 0
    doc = json.loads((tmp_path / "stable_points.json").read_text())
    assert len(doc["result"]["points"]) == 3


def test_byte_identical_outputs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["simulate", "--graph", "cycle:4", "--lambda", "0.1", "--slots", "500", "--seed", "7"]
    assert main([*args, "--out", str(a)]) == 0
    assert main([*args, "--out", str(b)]) == 0
    for name in ("simulate.json", "simulate.trace.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    meta = json.loads((a / "simulate.meta.json").read_text())
    validate(meta, "metadata")
    assert "started" in meta


@pytest.mark.parametrize("args", [
    ["spectral", "--graph", "torus:3x3"],
    ["classify", "--graph", "cycle:4", "--lambda", "0.11,0.11,0.05,0.05"],
    ["simulate", "--graph", "cycle:4", "--lambda", "0.08", "--slots", "300", "--format", "csv"],
    ["fluid", "--graph", "cycle:4", "--lambda", "0.1", "--format", "csv"],
    ["fluid", "--graph", "cycle:4", "--lambda", "0.2", "--horizon", "20"],
    ["sweep", "--graph", "cycle:4", "--grid", "0.05,0.15", "--slots", "2000", "--reps", "2", "--format", "csv"],
    ["convergence", "--graph", "cycle:4", "--lambda", "0.1", "--scales", "50,200", "--reps", "3",
     "--horizon", "2"],
    ["boundary", "--graph", "cycle:4", "--lambda", "0.1", "--horizon", "2"],
    ["rates", "--graph", "cycle:4", "--lambda", "0.08", "--checkpoints", "20,200", "--reps", "200"],
])
def test_round_trip_all_modes(tmp_path, args):
    assert run_cli(tmp_path, *args) == 0
    stem = args[0].replace("-", "_")
    doc = json.loads((tmp_path / f"{stem}.json").read_text())
    validate(doc, "result")
    assert doc["partial"] is False
    if "--format" in args:
        assert (tmp_path / f"{stem}.csv").exists()
    if args[0] == "simulate":
        schema = load_schema("trace_line")
        for line in (tmp_path / "simulate.trace.jsonl").read_text().splitlines():
            jsonschema.validate(json.loads(line), schema)


def test_runtime_error_exit_1(tmp_path, capsys):
    # the TV probe needs lambda below e^-1/V: a runtime (not config) failure
    code = run_cli(tmp_path, "rates", "--graph", "cycle:4", "--lambda", "0.2", "--reps", "10")
    assert code == 1
    doc = json.loads((tmp_path / "rates.json").read_text())
    assert doc["partial"] is True and "error" in doc
    validate(doc, "result")


def test_run_accepts_parsed_config(tmp_path):
    cfg = parse_config(["spectral", "--graph", "cycle:5", "--out", str(tmp_path)])
    assert run(cfg, argv=[]) == 0


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "spatial_aloha", "spectral", "--graph", "cycle:4", "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "spectral gap" in proc.stdout
