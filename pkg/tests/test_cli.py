import json
import subprocess
import sys
import time

import pytest

from dslp.cli import EXIT_ABORT, EXIT_OK, EXIT_USER, main
from dslp.data import git_blob_hash

SMALL = {
    "model": {"num_encoder_layers": 1, "num_decoder_layers": 2, "model_dim": 16, "ffn_dim": 32,
              "num_heads": 2, "max_len": 12},
    "max_steps": 20, "lr": 0.003, "warmup_steps": 5, "max_tokens": 64, "eval_every": 10,
    "dslp": {"mixing_ratio": 0.3},
}
SUBCOMMANDS = ["gen-data", "train", "distill", "translate", "trace", "analyze", "bench", "ablate"]


def run(*argv):
    t0 = time.perf_counter()
    code = main([str(a) for a in argv])
    assert time.perf_counter() - t0 < 60
    return code


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.json").write_text(json.dumps(SMALL))
    assert run("gen-data", "--task", "multimodal", "--n", 60, "--dev-n", 10, "--vocab-size", 6,
               "--len-range", "2,5", "--out", root / "data") == EXIT_OK
    assert run("train", "--config", root / "small.json", "--data", root / "data", "--out", root / "dslp") == EXIT_OK
    assert run("train", "--config", root / "small.json", "--data", root / "data", "--out", root / "teacher",
               "--override", "base=ar_teacher", "--override", "dslp.enable_lp=false",
               "--override", "dslp.enable_ds=false", "--override", "dslp.mixing_ratio=0") == EXIT_OK
    return root


def test_gen_data_outputs(work):
    data = work / "data"
    assert len((data / "train.tsv").read_text().splitlines()) == 61  # provenance line + pairs
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["task"] == "multimodal"
    assert manifest["outputs"][str(data / "train.tsv")] == git_blob_hash(data / "train.tsv")


def test_train_outputs_and_manifest(work):
    out = work / "dslp"
    assert {p.name for p in out.iterdir()} >= {"model.ckpt", "report.csv", "manifest.json"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["dslp"]["mixing_ratio"] == 0.3
    assert manifest["inputs"][str(work / "data" / "train.tsv")] == git_blob_hash(work / "data" / "train.tsv")
    assert manifest["outputs"][str(out / "model.ckpt")] == git_blob_hash(out / "model.ckpt")
    assert (out / "report.csv").read_text().startswith("step,loss,loss_layer1,loss_layer2,dev_bleu")


def test_override_is_recorded(work):
    out = work / "over"
    assert run("train", "--config", work / "small.json", "--data", work / "data", "--out", out,
               "--override", "dslp.mixing_ratio=0.5", "--override", "max_steps=2") == EXIT_OK
    config = json.loads((out / "manifest.json").read_text())["config"]
    assert config["dslp"]["mixing_ratio"] == 0.5 and config["max_steps"] == 2


def test_rerun_from_manifest_is_bitwise(work):
    manifest = json.loads((work / "dslp" / "manifest.json").read_text())
    argv = [a if a != str(work / "dslp") else str(work / "again") for a in manifest["argv"]]
    assert run(*argv) == EXIT_OK
    assert git_blob_hash(work / "again" / "model.ckpt") == git_blob_hash(work / "dslp" / "model.ckpt")


def test_translate(work, capsys):
    assert run("translate", "--checkpoint", work / "dslp" / "model.ckpt", "--input", work / "data" / "dev.tsv") == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 10
    target = work / "hyp.txt"
    assert run("translate", "--checkpoint", work / "dslp" / "model.ckpt", "--input", work / "data" / "dev.tsv",
               "--out", target) == EXIT_OK
    assert target.read_text().splitlines() == lines


def test_distill(work, capsys):
    assert run("distill", "--teacher", work / "teacher" / "model.ckpt", "--data", work / "data",
               "--out", work / "distilled") == EXIT_OK
    assert "register purity" in capsys.readouterr().out
    lines = (work / "distilled" / "train.tsv").read_text().splitlines()
    assert lines[0] == "# provenance: distilled" and len(lines) == 61
    assert (work / "distilled" / "dev.tsv").read_bytes() == (work / "data" / "dev.tsv").read_bytes()


def test_distill_needs_a_teacher(work, capsys):
    assert run("distill", "--teacher", work / "dslp" / "model.ckpt", "--data", work / "data",
               "--out", work / "x") == EXIT_USER
    assert "not an autoregressive teacher" in capsys.readouterr().err


def test_trace_render_and_determinism(work, capsys):
    args = ["trace", "--checkpoint", work / "dslp" / "model.ckpt", "--corpus", work / "data" / "dev.tsv"]
    assert run(*args, "--out", work / "tr1", "--render", "0,3") == EXIT_OK
    shown = capsys.readouterr().out
    assert "# sentence 3" in shown and "Layer 2:" in shown and "Reference:" in shown
    assert run(*args, "--out", work / "tr2") == EXIT_OK
    first = (work / "tr1" / "traces.jsonl").read_bytes()
    assert first == (work / "tr2" / "traces.jsonl").read_bytes()
    assert len(first.decode().splitlines()) == 10


def test_trace_vocab_mismatch_names_both_hashes(work, capsys):
    assert run("gen-data", "--task", "copy", "--n", 5, "--out", work / "other") == EXIT_OK
    assert run("trace", "--checkpoint", work / "dslp" / "model.ckpt", "--corpus", work / "other" / "train.tsv",
               "--vocab", work / "other" / "vocab.txt", "--out", work / "bad") == EXIT_USER
    err = capsys.readouterr().err
    from dslp.data import Vocabulary
    theirs = Vocabulary.load(work / "other" / "vocab.txt").content_hash()
    ours = Vocabulary.load(work / "data" / "vocab.txt").content_hash()
    assert "vocabulary mismatch" in err and theirs in err and ours in err


def test_analyze_idempotent(work):
    run("trace", "--checkpoint", work / "dslp" / "model.ckpt", "--corpus", work / "data" / "dev.tsv",
        "--out", work / "tr3")
    args = ["analyze", "--traces", work / "tr3" / "traces.jsonl", "--model-ids", "dslp"]
    assert run(*args, "--out", work / "an1") == EXIT_OK
    assert run(*args, "--out", work / "an2") == EXIT_OK
    a = (work / "an1" / "metrics.csv").read_text()
    assert a == (work / "an2" / "metrics.csv").read_text()
    lines = a.splitlines()
    assert lines[0] == "model,layer,bleu,repetition_rate,change_rate,latency_ms"
    assert [l.split(",")[1] for l in lines[1:]] == ["1", "2", "final"]


def test_analyze_rejects_bad_inputs(work, capsys):
    (work / "empty.jsonl").write_text("")
    assert run("analyze", "--traces", work / "empty.jsonl", "--out", work / "an3") == EXIT_USER
    assert "empty" in capsys.readouterr().err
    run("trace", "--checkpoint", work / "dslp" / "model.ckpt", "--corpus", work / "data" / "dev.tsv",
        "--out", work / "tr4")
    (work / "refs.txt").write_text("t0a t1a\n")
    assert run("analyze", "--traces", work / "tr4" / "traces.jsonl", "--references", work / "refs.txt",
               "--out", work / "an4") == EXIT_USER
    assert "references" in capsys.readouterr().err


def test_bench(work, capsys):
    assert run("bench", "--checkpoints", work / "dslp" / "model.ckpt", work / "teacher" / "model.ckpt",
               "--corpus", work / "data" / "dev.tsv", "--n", 5, "--warmup", 1, "--baseline", "dslp",
               "--out", work / "bench") == EXIT_OK
    assert "teacher:" in capsys.readouterr().out
    rows = (work / "bench" / "latency.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[1].startswith("dslp,final,,,,")


def test_ablate(work):
    assert run("ablate", "--config", work / "small.json", "--override", "max_steps=2", "--data", work / "data",
               "--layers", "1,2", "--out", work / "abl") == EXIT_OK
    assert len((work / "abl" / "metrics.csv").read_text().splitlines()) == 9


def test_missing_config_names_path(work, capsys):
    assert run("train", "--config", work / "nope.json", "--data", work / "data", "--out", work / "y") == EXIT_USER
    assert "nope.json" in capsys.readouterr().err


def test_unknown_config_key_rejected(work, capsys):
    assert run("train", "--data", work / "data", "--out", work / "y", "--override", "bogus=1") == EXIT_USER
    assert "bogus" in capsys.readouterr().err


def test_numerical_abort_exit_code(work, capsys):
    out = work / "nan"
    code = run("train", "--config", work / "small.json", "--data", work / "data", "--out", out,
               "--override", "lr=1e300", "--override", "warmup_steps=1")
    assert code == EXIT_ABORT
    assert "numerical abort" in capsys.readouterr().err
    dump = json.loads((out / "abort.json").read_text())
    assert dump["step"] >= 1 and dump["src"]


@pytest.mark.parametrize("argv", [["train", "--bogus"], ["frobnicate"], ["gen-data", "--task", "nope", "--out", "x"]])
def test_invalid_usage_exits_nonzero(argv, capsys):
    assert run(*argv) == EXIT_USER
    assert "usage" in capsys.readouterr().err


def test_out_required(capsys):
    assert run("gen-data", "--task", "copy") == EXIT_USER


@pytest.mark.parametrize("command", SUBCOMMANDS)
def test_help_lists_flags(command, capsys):
    assert run(command, "--help") == EXIT_OK
    text = capsys.readouterr().out
    assert "--seed" in text and "--out" in text


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dslp", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert all(c in proc.stdout for c in SUBCOMMANDS)


@pytest.mark.slow
def test_end_to_end_default_model(tmp_path, capsys):
    t0 = time.perf_counter()
    assert main(["gen-data", "--task", "copy", "--n", "300", "--dev-n", "20", "--out", str(tmp_path / "d")]) == 0
    assert main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "m"),
                 "--override", "max_steps=200"]) == 0
    assert main(["translate", "--checkpoint", str(tmp_path / "m" / "model.ckpt"),
                 "--input", str(tmp_path / "d" / "dev.tsv")]) == 0
    assert time.perf_counter() - t0 < 300
    assert len(capsys.readouterr().out.strip().splitlines()) >= 20
