import json
import os

import numpy as np
import pytest

from fastweight.cli import main
from fastweight.corpus import make_entity_corpus


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "train.txt").write_text(make_entity_corpus(24, seed=5))
    (d / "dev.txt").write_text(make_entity_corpus(6, seed=6))
    rc = main([
        "train", "--train", str(d / "train.txt"), "--dev", str(d / "dev.txt"),
        "--out", str(d / "run"), "--tokenizer", "word",
        "--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--d-ff", "32",
        "--d-hidden", "16", "--max-seq-len", "32", "--chunk-size", "16",
        "--total-steps", "8", "--batch-size", "2", "--seq-len", "24",
        "--eval-every", "4", "--seed", "7",
    ])
    assert rc == 0
    return d


def test_train_wrote_checkpoints_and_metrics(workdir):
    assert os.path.exists(workdir / "run" / "final.ckpt")
    assert os.path.exists(workdir / "run" / "best.ckpt")
    lines = open(workdir / "run" / "metrics.jsonl").read().splitlines()
    assert len(lines) == 8
    rec = json.loads(lines[0])
    assert {"step", "loss", "ppl", "grad_norm", "alphas", "wall_ms"} <= set(rec)


def test_score_all_variants(workdir, capsys):
    ckpt = str(workdir / "run" / "final.ckpt")
    for variant, extra in [("baseline", []), ("fwl", []),
                           ("test-time-only", ["--global-step", "0.01"]),
                           ("bias-only", [])]:
        rc = main(["score", "--ckpt", ckpt, "--corpus", str(workdir / "dev.txt"),
                   "--variant", variant] + extra)
        assert rc == 0
        out = json.loads(capsys.readouterr().out.strip())
        assert out["perplexity"] > 0


def test_score_writes_nll_stream(workdir, tmp_path, capsys):
    ckpt = str(workdir / "run" / "final.ckpt")
    out_file = tmp_path / "nll.jsonl"
    rc = main(["score", "--ckpt", ckpt, "--corpus", str(workdir / "dev.txt"),
               "--variant", "fwl", "--nll-out", str(out_file)])
    capsys.readouterr()
    assert rc == 0
    rows = [json.loads(l) for l in open(out_file)]
    assert len(rows) == 6
    assert all(x >= 0 for x in rows[0])


def test_generate_deterministic(workdir, capsys):
    ckpt = str(workdir / "run" / "final.ckpt")
    args = ["generate", "--ckpt", ckpt, "--prompt", "belardan saw",
            "--n-tokens", "8", "--temperature", "0.8", "--seed", "3"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first


def test_dyneval_runs(workdir, capsys):
    ckpt = str(workdir / "run" / "final.ckpt")
    rc = main(["dyneval", "--ckpt", ckpt, "--corpus", str(workdir / "dev.txt"),
               "--step-size", "0.01", "--chunk-len", "16"])
    assert rc == 0
    assert json.loads(capsys.readouterr().out.strip())["perplexity"] > 0


def test_analyze_writes_csv(workdir, tmp_path, capsys):
    ckpt = str(workdir / "run" / "final.ckpt")
    out_csv = tmp_path / "buckets.csv"
    rc = main(["analyze", "--ckpt", ckpt, "--corpus", str(workdir / "dev.txt"),
               "--csv", str(out_csv)])
    capsys.readouterr()
    assert rc == 0
    header = open(out_csv).readline().strip().split(",")
    assert header[0] == "family"


def test_bench_reports(workdir, capsys):
    ckpt = str(workdir / "run" / "final.ckpt")
    rc = main(["bench", "--ckpt", ckpt, "--corpus", str(workdir / "dev.txt"),
               "--max-docs", "2"])
    assert rc == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["flops_per_token"]["fwl_total"] > rep["flops_per_token"]["baseline_total"]


def test_verify_exit_zero(capsys):
    rc = main(["verify", "--instances", "4", "--seed", "1"])
    capsys.readouterr()
    assert rc == 0


def test_missing_corpus_is_io_error(workdir, capsys):
    ckpt = str(workdir / "run" / "final.ckpt")
    rc = main(["score", "--ckpt", ckpt, "--corpus", "/no/such/file.txt"])
    capsys.readouterr()
    assert rc == 2


def test_bad_ckpt_magic_is_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    rc = main(["score", "--ckpt", str(bad), "--corpus", str(bad)])
    capsys.readouterr()
    assert rc == 1


def test_usage_error_exit_one(capsys):
    rc = main(["score"])  # missing required args
    capsys.readouterr()
    assert rc == 1
