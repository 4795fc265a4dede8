import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from cpplan import cli
from cpplan.errors import InvariantError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def jsonl(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def write_config(tmp_path, data, name="scenario.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


# -- mask -------------------------------------------------------------------------


def test_mask_causal_area(capsys):
    code, out, _ = run(capsys, "mask", "--pattern", "causal", "--seqlen", "8")
    assert code == 0
    rec = jsonl(out)[0]
    assert rec["union_area"] == rec["multiplicity_area"] == 36
    assert len(rec["grid"]) == 8


def test_mask_text_grid(capsys):
    code, out, _ = run(capsys, "mask", "--pattern", "full", "--seqlen", "4", "--format", "text")
    assert code == 0
    assert "union_area: 16" in out
    assert out.rstrip().splitlines()[-4:] == ["####"] * 4


def test_mask_from_config_rejects_bad_slice(tmp_path, capsys):
    cfg = write_config(tmp_path, {"mask": {"seqlen": 4, "slices": [
        {"q": [0, 4], "k": [0, 4], "type": "full"},
        {"q": [2, 9], "k": [0, 4], "type": "causal"},
    ]}})
    code, _, err = run(capsys, "mask", "--config", cfg)
    assert code == 3
    assert "slice 1" in err


def test_mask_needs_input(capsys):
    code, _, err = run(capsys, "mask")
    assert code == 2 and "--pattern" in err


# -- plan -------------------------------------------------------------------------


def test_plan_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "art"
    code, stdout, _ = run(capsys, "plan", "--config", str(CONFIGS / "causal_cp4.yaml"), "--out", str(out))
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == sorted(cli.PLAN_FILES)
    summary = jsonl(stdout)[0]
    assert summary["redundancy"]["redundancy_ratio"] == 0.25
    tables = json.loads((out / "transfer_tables.json").read_text())
    assert tables["group_cast"]["total_token_transfers"] == 18
    assert tables["group_reduce"]["entries"] == tables["group_cast"]["entries"]


def test_plan_text_mode(tmp_path, capsys):
    code, out, _ = run(capsys, "plan", "--config", str(CONFIGS / "varlen_last_global_cp4.yaml"),
                       "--out", str(tmp_path), "--format", "text")
    assert code == 0
    assert "redundancy ratio 0.3333" in out


def test_plan_constraint_violation_exits_3(tmp_path, capsys):
    cfg = write_config(tmp_path, {"mask": {"pattern": "causal", "params": {"seqlen": 10}}, "cp_size": 4,
                                  "dispatch": {"chunk_size": 1}})
    code, _, err = run(capsys, "plan", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == 3
    assert "seqLen % (cp_size × dispatch_chunk_size) = 0" in err


def test_plan_zigzag_shape_violation_exits_3(tmp_path, capsys):
    cfg = write_config(tmp_path, {"mask": {"pattern": "causal", "params": {"seqlen": 12}}, "cp_size": 2,
                                  "dispatch": {"chunk_size": 2, "algorithm": "zigzag"}})
    code, _, err = run(capsys, "plan", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == 3 and "n % (2 × cp_size) = 0" in err


def test_plan_without_config_is_usage_error(capsys):
    code, _, err = run(capsys, "plan")
    assert code == 2 and "--config" in err


# -- simulate ---------------------------------------------------------------------


def test_simulate_from_plan_dir_matches_end_to_end(tmp_path, capsys):
    cfg = str(CONFIGS / "causal_cp4.yaml")
    run(capsys, "plan", "--config", cfg, "--out", str(tmp_path / "art"))
    _, direct, _ = run(capsys, "simulate", "--config", cfg)
    _, reused, _ = run(capsys, "simulate", "--config", cfg, "--plan-dir", str(tmp_path / "art"))
    assert direct == reused
    records = jsonl(direct)
    by = {(r["schedule"], r["pass"]): r["makespan"] for r in records}
    assert by == {("magi", "fwd"): 13, ("magi", "bwd"): 27, ("ring", "fwd"): 14, ("ring", "bwd"): 27}


def test_simulate_missing_plan_dir_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "simulate", "--config", str(CONFIGS / "causal_cp4.yaml"),
                       "--plan-dir", str(tmp_path))
    assert code == 2 and "plan.json" in err


def test_simulate_unknown_schedule(capsys):
    code, _, err = run(capsys, "simulate", "--config", str(CONFIGS / "causal_cp4.yaml"), "--schedule", "tree")
    assert code == 2
    assert "magi, ring, ulysses, cso" in err


def test_simulate_text_table_and_csv(capsys):
    cfg = str(CONFIGS / "causal_cp4.yaml")
    _, text, _ = run(capsys, "simulate", "--config", cfg, "--format", "text", "--schedule", "magi")
    header = text.splitlines()[0].split()
    assert header[:5] == ["schedule", "pass", "cp_size", "seqlen", "makespan"]
    assert "exposed_comm" in header and "tflops_per_gpu" in header
    _, csv_text, _ = run(capsys, "simulate", "--config", cfg, "--format", "csv")
    assert len(csv_text.splitlines()) == 5


def test_simulate_writes_to_out_dir(tmp_path, capsys):
    code, out, err = run(capsys, "simulate", "--config", str(CONFIGS / "causal_cp4.yaml"), "--out", str(tmp_path))
    assert code == 0 and out == ""
    assert len(jsonl((tmp_path / "simulate.jsonl").read_text())) == 4


def test_internal_invariant_exits_4(monkeypatch, capsys):
    def boom(*_a, **_k):
        raise InvariantError("timeline lost a task")

    monkeypatch.setattr(cli, "simulate", boom)
    code, _, err = run(capsys, "simulate", "--config", str(CONFIGS / "causal_cp4.yaml"))
    assert code == 4 and "timeline lost a task" in err


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("mask: {pattern: causal\n")
    code, _, err = run(capsys, "simulate", "--config", str(bad))
    assert code == 2 and "line" in err


def test_argparse_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["sweep", "--jobs", "0", "--config", "x"])
    assert exc.value.code == 2


# -- pack and sweep ---------------------------------------------------------------


def test_pack_ffd_example_from_stdin(monkeypatch, capsys):
    import io

    monkeypatch.setattr(sys, "stdin", io.StringIO("a 6\nb 5\nc 4\nd 3\ne 2\n"))
    code, out, _ = run(capsys, "pack", "--input", "-", "--max-length", "10", "--bins-per-iteration", "2",
                       "--pool-capacity", "8")
    assert code == 0
    records = jsonl(out)
    assert records[0]["bins"] == [["a", "c"], ["b", "d", "e"]]
    assert records[-1]["record"] == "summary" and records[-1]["mean"] == 1.0


def test_pack_empty_stream(tmp_path, capsys):
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    code, out, _ = run(capsys, "pack", "--input", str(empty), "--max-length", "16", "--bins-per-iteration", "2")
    assert code == 0
    (summary,) = jsonl(out)
    assert summary["batches"] == 0 and summary["record"] == "summary"


def test_pack_reports_skipped_samples(tmp_path, capsys):
    data = tmp_path / "s.txt"
    data.write_text("a 4\nhuge 40\nb 4\n")
    code, out, _ = run(capsys, "pack", "--input", str(data), "--max-length", "8", "--bins-per-iteration", "1",
                       "--format", "json")
    records = jsonl(out)
    assert code == 0
    assert [r for r in records if r["record"] == "skipped"][0]["sample"] == "huge"
    assert records[-1]["skipped"] == 1


def test_pack_dp_constraint_exits_3(capsys):
    code, _, err = run(capsys, "pack", "--max-length", "8", "--bins-per-iteration", "3", "--dp-size", "2")
    assert code == 3 and "N % dp_size = 0" in err


def test_pack_bad_input_line_exits_2(tmp_path, capsys):
    data = tmp_path / "s.txt"
    data.write_text("a 4\nb four\n")
    code, _, err = run(capsys, "pack", "--input", str(data), "--max-length", "8", "--bins-per-iteration", "1")
    assert code == 2 and "line 2" in err


def test_sweep_four_points(tmp_path, capsys):
    cfg = write_config(tmp_path, {
        "schedules": ["ring"], "passes": ["fwd"],
        "cost_model": {"ffa_fwd": [0, 1.0e-4], "cast": [0, 0.08]},
        "sweep": {"cp_sizes": [1, 2, 4, 8], "per_rank_seqlen": 4096, "pattern": "varlen_full",
                  "doc_length": 1024, "chunks_per_rank": 8},
    })
    code, out, _ = run(capsys, "sweep", "--config", cfg, "--jobs", "2")
    records = jsonl(out)
    assert code == 0 and [r["cp_size"] for r in records] == [1, 2, 4, 8]
    rates = [r["tflops_per_gpu"] for r in records]
    assert all(b <= a for a, b in zip(rates, rates[1:]))


def test_sweep_without_section_is_usage_error(capsys):
    code, _, err = run(capsys, "sweep", "--config", str(CONFIGS / "causal_cp4.yaml"))
    assert code == 2 and "sweep" in err


# -- determinism and entry point --------------------------------------------------


@pytest.mark.parametrize("argv", [
    ["mask", "--pattern", "varlen_causal", "--lengths", "5,11"],
    ["plan", "--config", str(CONFIGS / "causal_cp4.yaml")],
    ["simulate", "--config", str(CONFIGS / "varlen_last_global_cp4.yaml"), "--seed", "3"],
    ["pack", "--max-length", "1024", "--bins-per-iteration", "4", "--config", str(CONFIGS / "pack_longtail.yaml")],
])
def test_reruns_are_byte_identical(argv, tmp_path, capsys, monkeypatch):
    if argv[0] == "plan":
        argv = argv + ["--out", str(tmp_path / "p")]
    if argv[0] == "pack":
        small = yaml.safe_load((CONFIGS / "pack_longtail.yaml").read_text())
        small["stream"]["count"] = 2000
        small["packing"].update(max_length=8192, bins_per_iteration=4, pool_capacity=64)
        argv = ["pack", "--config", write_config(tmp_path, small)]
    first = run(capsys, *argv)
    second = run(capsys, *argv)
    assert first[0] == 0 and first[1] == second[1]


def test_console_script_runs():
    exe = shutil.which("cpplan")
    cmd = [exe] if exe else [sys.executable, "-m", "cpplan.cli"]
    res = subprocess.run(cmd + ["mask", "--pattern", "causal", "--seqlen", "8"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["union_area"] == 36
