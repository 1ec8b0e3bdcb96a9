import json
import subprocess
import sys

import pytest

from taskprune.cli import main


def run(*argv):
    return main([str(a) for a in argv])


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as e:
        run("bogus")
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        run("eval", "--task", "x")
    assert e.value.code == 1


def test_help_lists_every_verb():
    out = subprocess.run([sys.executable, "-m", "taskprune", "--help"], capture_output=True, text=True, check=True).stdout
    for verb in ("gen-data", "train", "attribute", "prune", "eval", "sweep", "low-resource", "unsupervised", "unseen", "infer", "plot"):
        assert verb in out


def test_data_errors_exit_two(tmp_path, small_world, capsys):
    assert run("eval", "--checkpoint", tmp_path / "missing.tpck", "--data", small_world["data"], "--task", "parity") == 2
    assert run("eval", "--checkpoint", small_world["checkpoint"], "--data", small_world["data"], "--task", "nope") == 2
    assert "unknown task" in capsys.readouterr().err
    assert run("sweep", "--checkpoint", small_world["checkpoint"], "--data", small_world["data"], "--out", tmp_path, "--rates", "1.5") == 2
    assert run("infer", "--checkpoint", small_world["checkpoint"], "--masks", tmp_path, "--task", "parity", "--text", "x") == 2


def test_contradictory_flags_exit_one(tmp_path, small_world, capsys):
    assert run("prune", "--checkpoint", small_world["checkpoint"], "--random", "--out", tmp_path / "m.json") == 1
    assert run("infer", "--checkpoint", small_world["checkpoint"], "--masks", tmp_path) == 1


def test_gen_data_is_deterministic(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path / "a", "--sizes", 20, 4, 4, "--seed", 3) == 0
    assert run("gen-data", "--out", tmp_path / "b", "--sizes", 20, 4, 4, "--seed", 3) == 0
    for name in ("polarity", "parity", "inference-a", "inference-b"):
        for split in ("train.jsonl", "dev.jsonl", "test.jsonl", "task.json"):
            assert (tmp_path / "a" / name / split).read_bytes() == (tmp_path / "b" / name / split).read_bytes()


def test_train_with_config_and_overrides(tmp_path, small_world, capsys):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"model": {"d_model": 8, "n_heads": 2, "d_head": 2, "d_ff": 4, "n_enc_layers": 1, "n_dec_layers": 1}, "train": {"steps": 50, "batch_size": 4}}))
    out = tmp_path / "m.tpck"
    assert run("train", "--data", small_world["data"], "--out", out, "--config", cfg, "--steps", 2, "--seed", 1, "--log", tmp_path / "log.csv", "--tasks", "parity") == 0
    assert "trained 2 steps" in capsys.readouterr().out
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"width": 3}}))
    assert run("train", "--data", small_world["data"], "--out", out, "--config", bad) == 2


def test_attribute_prune_eval_infer_chain(tmp_path, small_world, capsys):
    ck, data = small_world["checkpoint"], small_world["data"]
    attr = tmp_path / "a.json"
    for method in ("supervised", "unsupervised", "fpp", "rap"):
        assert run("attribute", "--checkpoint", ck, "--data", data, "--task", "parity", "--method", method, "--samples", 8, "--out", attr) == 0
    assert run("attribute", "--checkpoint", ck, "--data", data, "--task", "parity", "--out", attr) == 0
    store = tmp_path / "masks"
    assert run("prune", "--checkpoint", ck, "--attribution", attr, "--enc-rate", 0.25, "--dec-rate", 0.5, "--store", store, "--task", "parity") == 0
    assert run("prune", "--checkpoint", ck, "--random", "--rate", 0.0, "--store", store, "--task", "polarity") == 0
    assert run("prune", "--checkpoint", ck, "--attribution", attr, "--rate", 1.0, "--stack", "decoder", "--group", "ffn", "--out", tmp_path / "g.json") == 0
    assert run("eval", "--checkpoint", ck, "--data", data, "--task", "parity", "--mask", store / "parity.json") == 0
    assert run("eval", "--checkpoint", ck, "--data", data, "--task", "parity", "--svd", 0.5) == 0
    capsys.readouterr()
    req = tmp_path / "req.jsonl"
    req.write_text("".join(json.dumps({"task": t, "input": x}) + "\n" for t, x in [("parity", "parity: axbxc"), ("polarity", "polarity: nice"), ("parity", "parity: xx")]))
    assert run("infer", "--checkpoint", ck, "--masks", store, "--requests", req) == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert [l["task"] for l in lines] == ["parity", "polarity", "parity"]
    assert all(isinstance(l["output"], str) for l in lines)


def test_sweep_config_file_with_flag_overrides(tmp_path, small_world, capsys):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"methods": ["AP", "RP"], "rates": [0.0, 1.0], "tasks": ["parity"], "seeds": [0, 1, 2]}))
    out = tmp_path / "res"
    argv = ["sweep", "--config", cfg, "--checkpoint", small_world["checkpoint"], "--data", small_world["data"], "--out", out, "--stacks", "decoder", "--seed", 7]
    assert run(*argv) == 0
    lines = (out / "module-specific.csv").read_text().splitlines()
    seeds = {l.split(",")[6] for l in lines[1:] if ",RP," in l}
    assert seeds == {"7", "8", "9"}
    assert run("plot", out / "module-specific.csv", "--out", tmp_path / "svg") == 0
    assert list((tmp_path / "svg").glob("*.svg"))
    for verb in ("low-resource", "unsupervised", "unseen"):
        extra = ["--sample-sizes", "8"] if verb == "low-resource" else []
        assert run(verb, "--checkpoint", small_world["checkpoint"], "--data", small_world["data"], "--out", out, "--rates", 0.5, "--seeds", 0, "--stacks", "encoder", *extra) == 0
