import csv
import io
import json
import os
import subprocess
import sys

import jsonschema
import pytest

from ropelab.cli import main
from ropelab.diagnostics import CSV_HEADER

from test_masks import PLAN_SCHEMA

SMALL = ["--layers", "1", "--heads", "2", "--d-model", "16", "-T", "32", "--num-sequences", "2"]

LAYOUT_SCHEMA = {
    "type": "object",
    "required": ["T", "window", "roles", "doc_ids", "chunk_ids", "within_doc_index"],
    "properties": {
        "T": {"type": "integer"},
        "roles": {"type": "array", "items": {"enum": ["anchor", "tag", "doc"]}},
        "doc_ids": {"type": "array", "items": {"type": "integer"}},
        "chunk_ids": {"type": "array", "items": {"type": "integer"}},
        "within_doc_index": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    },
}


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    assert tuple(header) == CSV_HEADER
    return list(reader)


@pytest.fixture
def layout_file(tmp_path):
    path = tmp_path / "layout.json"
    path.write_text(json.dumps({"window": 7, "docs": [{"id": 0, "len": 3}, {"id": 1, "len": 3}], "scheme": "anchor"}))
    return str(path)


def test_shift_sweep_exact_small(capsys):
    code, out, err = run(capsys, "shift-sweep", "--policy", "exact", "--seed", "7", *SMALL)
    assert code == 0
    data = rows(out)
    assert len(data) == 19
    assert all(float(r[-1]) <= 1e-6 for r in data)
    assert "exact: max D" in err


def test_shift_sweep_is_deterministic(capsys, tmp_path):
    outs = []
    for k in range(2):
        path = tmp_path / f"run{k}.csv"
        assert main(["shift-sweep", "--deltas", "0,4", "--policy", "f32,fa2-bf16", *SMALL, "--out", str(path)]) == 0
        outs.append(path.read_bytes())
    capsys.readouterr()
    assert outs[0] == outs[1]
    assert len(rows(outs[0].decode())) == 4


def test_per_token_sums_to_shift_sweep_D(capsys):
    _, sweep, _ = run(capsys, "shift-sweep", "--deltas", "3", *SMALL)
    _, vec, _ = run(capsys, "per-token", "--delta1", "3", *SMALL)
    D = float(rows(sweep)[0][-1])
    values = [float(r[-1]) for r in rows(vec)]
    assert len(values) == 32
    assert sum(values) == pytest.approx(D, rel=1e-12)


def test_per_token_equal_shifts_zero(capsys):
    code, out, _ = run(capsys, "per-token", "--delta1", "16", *SMALL)
    assert code == 0 and all(float(r[-1]) == 0.0 for r in rows(out))


def test_length_sweep_max_T(capsys):
    code, out, err = run(capsys, "length-sweep", "--max-T", "128", "--policy", "exact",
                         "--layers", "1", "--heads", "2", "--d-model", "16", "--num-sequences", "1")
    assert code == 0
    data = rows(out)
    assert [int(r[2]) for r in data] == [64, 128]
    assert all(float(r[-1]) <= 1e-6 for r in data)
    assert "D_logit" in err


def test_config_file_and_override(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"deltas": [0, 2], "layers": 1, "heads": 2, "d_model": 16, "seq_len": 16,
                               "num_sequences": 1, "policy": "f32"}))
    code, out, _ = run(capsys, "shift-sweep", "--config", str(cfg), "--deltas", "5")
    assert code == 0
    data = rows(out)
    assert [r[0] for r in data] == ["5"] and data[0][3] == "f32" and data[0][2] == "16"


def test_config_unknown_key(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"colour": "blue"}))
    code, _, err = run(capsys, "shift-sweep", "--config", str(cfg))
    assert code == 2 and "unknown config key" in err


def test_mask_output(capsys, layout_file):
    code, out, err = run(capsys, "mask", "--layout", layout_file, "--render")
    assert code == 0
    plans = json.loads(out)
    assert len(plans) == 1
    jsonschema.validate(plans[0], PLAN_SCHEMA)
    assert plans[0]["pair_count"] == 19
    assert plans[0]["position_ids"] == list(range(7))
    assert "#......" in err


def test_mask_render_full_causal(capsys, tmp_path):
    path = tmp_path / "l.json"
    path.write_text(json.dumps({"window": 4, "docs": [{"id": 0, "len": 4}], "scheme": "full_causal"}))
    code, out, err = run(capsys, "mask", "--layout", str(path), "--render")
    assert code == 0
    assert ["#...", "##..", "###.", "####"] == [l for l in err.splitlines() if set(l) <= {"#", "."}]


def test_mask_invalid_scheme(capsys, layout_file):
    code, _, err = run(capsys, "mask", "--layout", layout_file, "--scheme", "sliding_window")
    assert code == 2 and "usage" in err


def test_cost_table(capsys):
    code, out, _ = run(capsys, "cost", "--lengths", "4,4,4,4", "-T", "17")
    assert code == 0
    table = list(csv.DictReader(io.StringIO(out)))
    assert len(table) == 7
    by = {r["scheme"]: r for r in table}
    assert float(by["anchor"]["ratio"]) == 57 / 153
    assert by["full_causal"]["ratio"] == "1.0"
    assert all(0 < float(r["ratio"]) <= 1 for r in table)
    code, out, _ = run(capsys, "cost", "--lengths", "16", "-T", "17", "--schemes", "anchor")
    assert out.splitlines()[1].endswith(",1.0")


def test_pack_and_interleave_schema(capsys):
    code, out, _ = run(capsys, "pack", "--lengths", "10,3", "-T", "7", "--scheme", "anchor_tag")
    assert code == 0
    for obj in json.loads(out):
        jsonschema.validate(obj, LAYOUT_SCHEMA)
    code, out, _ = run(capsys, "interleave", "--lengths", "5,5", "--seed", "3", "--anchor")
    assert code == 0
    obj = json.loads(out)
    jsonschema.validate(obj, LAYOUT_SCHEMA)
    assert obj["roles"][0] == "anchor" and obj["T"] == 11


def test_selftest(capsys):
    code, out, _ = run(capsys, "selftest", "--cases", "20")
    assert code == 0
    assert out.count("PASS") >= 2 and "FAIL" not in out


@pytest.mark.parametrize(
    "argv",
    [
        ["shift-sweep", "--policy", "fp8"],
        ["shift-sweep", "--bogus"],
        ["length-sweep", "--lengths", "a,b"],
        ["pack", "--lengths", "3"],
        ["bogus"],
        [],
    ],
)
def test_usage_errors_exit_2(capsys, argv):
    assert main(argv) == 2


def test_runtime_errors_exit_1(capsys, tmp_path):
    bad = tmp_path / "w.bin"
    bad.write_bytes(b"RPLT")
    assert main(["shift-sweep", "--weights", str(bad), "--deltas", "0"]) == 1
    assert main(["shift-sweep", "--weights", str(tmp_path / "missing.bin")]) == 1
    assert main(["shift-sweep", "--deltas", str(2**53), *SMALL]) == 1
    err = capsys.readouterr().err
    assert "malformed container" in err


def test_weights_container_round_trip_via_cli(capsys, tmp_path):
    from ropelab.attention import init_random, save_weights

    path = tmp_path / "w.bin"
    save_weights(init_random(1, 2, 16, seed=0), path)
    _, from_file, _ = run(capsys, "shift-sweep", "--weights", str(path), "--deltas", "2", *SMALL)
    _, random_init, _ = run(capsys, "shift-sweep", "--deltas", "2", *SMALL)
    assert from_file == random_init


def test_installed_entry_point_exit_codes():
    env = dict(os.environ)
    ok = subprocess.run([sys.executable, "-m", "ropelab", "cost", "--lengths", "3,3", "-T", "7"],
                        capture_output=True, text=True, env=env)
    assert ok.returncode == 0 and ok.stdout.startswith("scheme,")
    bad = subprocess.run([sys.executable, "-m", "ropelab", "mask", "--scheme", "nope"],
                         capture_output=True, text=True, env=env)
    assert bad.returncode == 2 and bad.stderr
