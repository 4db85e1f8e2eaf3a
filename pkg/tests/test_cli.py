from __future__ import annotations

import json

import pytest

from metamachine import __version__
from metamachine.cli import build_parser, main, resolve_config

ONE_PAIR = "0 4 4 0 5 18 18 3 5 18 18 3 5 18 18 3"


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_count_two_module(capsys):
    code, out, _ = run(capsys, "count", "--two-module")
    assert code == 0 and out.strip() == "435"
    assert run(capsys, "count", "--brute")[1].strip() == "435"


def test_sample_is_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(capsys, "sample", "--n", "1000", "--modules", "2..5", "--seed", "7", "--out", str(d))[0] == 0
    assert (a / "designs.jsonl").read_bytes() == (b / "designs.jsonl").read_bytes()
    assert len((a / "designs.jsonl").read_text().splitlines()) == 1000


def test_encode_decode_roundtrip(tmp_path, capsys):
    run(capsys, "sample", "--n", "20", "--seed", "3", "--out", str(tmp_path))
    code, out, _ = run(capsys, "encode", str(tmp_path / "designs.jsonl"))
    seqs = out.splitlines()
    assert code == 0 and len(seqs) == 20
    for seq in seqs:
        code, out, _ = run(capsys, "decode", seq)
        assert code == 0 and "connections" in json.loads(out)


def test_decode_malformed_exit_one(capsys):
    code, out, _ = run(capsys, "decode", "0 4 4")
    assert code == 1
    assert json.loads(out)["error"] == "malformed"
    code, out, _ = run(capsys, "decode", "0 4 4 x")
    assert code == 1 and json.loads(out)["error"] == "malformed"


def test_decode_self_colliding(capsys):
    code, out, _ = run(capsys, "decode", ONE_PAIR.replace("0 4 4 0", "0 4 4 1", 1))
    assert code == 1 and json.loads(out)["error"] == "self-colliding"


def test_usage_errors_exit_two(capsys):
    for argv in (["bogus"], ["count", "--nope"], ["sample"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2
    capsys.readouterr()


def test_environment_overrides_config_file(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"seed": 5, "workers": 2}))
    args = build_parser().parse_args(["count", "--config", str(cfg_file)])
    assert resolve_config(args, {}).seed == 5
    cfg = resolve_config(args, {"METAMACHINE_SEED": "9"})
    assert (cfg.seed, cfg.workers) == (9, 2)
    args = build_parser().parse_args(["count", "--config", str(cfg_file), "--seed", "11"])
    assert resolve_config(args, {"METAMACHINE_SEED": "9"}).seed == 11


def test_bad_config_is_validation_error(tmp_path, capsys):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"colour": "red"}))
    code, out, _ = run(capsys, "count", "--config", str(cfg_file))
    assert code == 1 and json.loads(out)["error"] == "config"


def test_bo_run_log_and_plot_tables(tmp_path, capsys):
    code, _, _ = run(capsys, "bo-run", "--budget", "20", "--workers", "4", "--seed", "1", "--latent-box=-2,2",
                     "--out", str(tmp_path))
    assert code == 0
    lines = (tmp_path / "bo_log.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert header["type"] == "header" and header["version"] == __version__
    assert header["config"]["seed"] == 1 and header["bo"]["box"] == [-2.0, 2.0]
    assert len(lines) == 21
    code, out, _ = run(capsys, "plots", str(tmp_path / "bo_log.jsonl"), "--out", str(tmp_path))
    assert code == 0 and json.loads(out)["tables"]["best_so_far"] == 20
    rows = (tmp_path / "best_so_far.csv").read_text().splitlines()
    assert len(rows) == 21
    best = [float(r.split(",")[-1]) for r in rows[1:]]
    assert best == sorted(best)


def test_bo_run_is_reproducible(tmp_path, capsys):
    for d in ("a", "b"):
        run(capsys, "bo-run", "--budget", "15", "--workers", "2", "--seed", "4", "--out", str(tmp_path / d))
    a, b = ((tmp_path / d / "bo_log.jsonl").read_text().splitlines() for d in ("a", "b"))
    assert a[1:] == b[1:]
    ha, hb = json.loads(a[0]), json.loads(b[0])
    ha["config"].pop("out"), hb["config"].pop("out")
    assert ha == hb


def test_plots_truncated_log_partial(tmp_path, capsys, caplog):
    run(capsys, "bo-run", "--budget", "12", "--seed", "2", "--out", str(tmp_path))
    text = (tmp_path / "bo_log.jsonl").read_text()
    cut = tmp_path / "cut.jsonl"
    cut.write_text(text[: len(text) - 40])
    code, out, _ = run(capsys, "plots", str(cut), "--out", str(tmp_path / "p"))
    rec = json.loads(out)
    assert code == 0 and rec["truncated"] and rec["tables"]["best_so_far"] == 11
    assert "truncated" in caplog.text


def test_plots_empty_log(tmp_path, capsys, caplog):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code, out, _ = run(capsys, "plots", str(empty), "--out", str(tmp_path))
    assert code == 0 and "no records" in caplog.text
    assert all(v == 0 for v in json.loads(out)["tables"].values())
    assert (tmp_path / "best_so_far.csv").read_text().splitlines() == ["report,index,status,fitness,best"]


def test_rollout_com_trace_rows(tmp_path, capsys):
    code, _, _ = run(capsys, "rollout", "--design", ONE_PAIR, "--seconds", "5", "--out", str(tmp_path))
    assert code == 0
    code, out, _ = run(capsys, "plots", str(tmp_path / "rollout_log.jsonl"), "--out", str(tmp_path))
    assert json.loads(out)["tables"]["com_trace"] == 100


def test_amputate_and_test_matrix(tmp_path, capsys):
    code, out, _ = run(capsys, "amputate", "--cuts", "front-right:0.5,back-left:0")
    rec = json.loads(out)
    assert code == 0 and rec["kept"] == [0, 2, 3] and len(rec["stubs"]) == 1
    assert run(capsys, "amputate", "--cuts", "tail:0.5")[0] == 1
    code, out, _ = run(capsys, "test-matrix", "--out", str(tmp_path))
    rec = json.loads(out)
    assert rec["trials"] == 640 and rec["per_class"]["one-limb"] == 200
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["type"] == "header" and len(lines) == 641


def test_pose_opt_small(tmp_path, capsys):
    code, _, _ = run(capsys, "pose-opt", "--design", ONE_PAIR, "--count", "8", "--seed", "3", "--out", str(tmp_path))
    assert code == 0
    rec = json.loads((tmp_path / "pose.json").read_text())
    assert len(rec["scores"]) == 8 and rec["header"]["config"]["seed"] == 3


def test_vae_train_small(tmp_path, capsys):
    code, out, _ = run(capsys, "vae-train", "--samples", "64", "--epochs", "2", "--out", str(tmp_path))
    assert code == 0 and (tmp_path / "vae.bin").exists()
    from metamachine.genome import VAE

    assert VAE.load(tmp_path / "vae.bin").meta["header"]["version"] == __version__
