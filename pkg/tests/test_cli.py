import json

import pytest

from inkmt.cli import main
from inkmt.data import write_tsv

TINY = ["model.d_model=16", "model.d_ffn=32", "model.n_heads=2", "model.max_len=16", "pretrain.epochs=2",
        "pretrain.warmup_steps=10", "pretrain.peak_lr=0.003", "train.epochs=2", "train.warmup_steps=10",
        "train.peak_lr=0.003", "train.batch_tokens=256", "bench.repetitions=3", "bench.batch_sizes=4,8"]


def sets(extra=()):
    out = []
    for item in TINY + list(extra):
        out += ["--set", item]
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["make-toy", str(d / "toy"), "--general", "120", "--domain-train", "40", "--domain-dev", "12"]) == 0
    toy = d / "toy"
    gen, train, dev = (str(toy / n) for n in ("general.tsv", "domain_train.tsv", "domain_dev.tsv"))
    vocab = str(d / "vocab.tsv")
    model = str(d / "base.ink")
    assert main(["ingest", gen, "--extra", train, dev, "--vocab-out", vocab]) == 0
    assert main(["pretrain", "--train", gen, "--vocab", vocab, "--out", model, *sets()]) == 0
    assert main(["build-datastore", "--model", model, "--vocab", vocab, "--corpus", train, "--out", str(d / "ds.bin"), *sets()]) == 0
    assert main(["train-ink", "--model", model, "--vocab", vocab, "--train", train, "--dev", dev, "--run-dir", str(d / "ink"), *sets()]) == 0
    assert main(["eval", "--model", model, "--vocab", vocab, "--adapters", str(d / "ink" / "adapters.ink"),
                 "--train", train, "--dev", dev, "--out-dir", str(d / "eval"), *sets()]) == 0
    return d, vocab, model, train, dev


def test_pipeline_emits_every_artifact(pipeline):
    d = pipeline[0]
    for rel in ("vocab.tsv", "vocab.tsv.config.txt", "base.ink", "base.ink.config.txt", "ds.bin", "ink/config.txt",
                "ink/epochs.jsonl", "ink/adapters_epoch1.ink", "ink/adapters.ink", "eval/eval.txt", "eval/eval.jsonl", "eval/config.txt"):
        assert (d / rel).exists(), rel
    metrics = {r["metric"] for r in map(json.loads, (d / "eval" / "eval.jsonl").read_text().splitlines())}
    assert {"token_accuracy", "knn_accuracy", "knn_accuracy_bucket", "bleu"} <= metrics
    assert "model.d_model = 16" in (d / "ink" / "config.txt").read_text()


def test_eval_reports_are_reproducible(pipeline):
    d, vocab, model, train, dev = pipeline
    args = ["eval", "--model", model, "--vocab", vocab, "--adapters", str(d / "ink" / "adapters.ink"),
            "--train", train, "--dev", dev, "--out-dir", str(d / "eval2"), *sets()]
    assert main(args) == 0
    assert (d / "eval2" / "eval.jsonl").read_bytes() == (d / "eval" / "eval.jsonl").read_bytes()
    assert (d / "eval2" / "eval.txt").read_bytes() == (d / "eval" / "eval.txt").read_bytes()


def test_translate_writes_one_line_per_source(pipeline, tmp_path, capsys):
    d, vocab, model, train, dev = pipeline
    src = tmp_path / "in.txt"
    src.write_text("s1 s2 s3\nb1 s4\n")
    out = tmp_path / "out.txt"
    assert main(["translate", "--model", model, "--vocab", vocab, "--input", str(src), "--output", str(out), *sets()]) == 0
    assert len(out.read_text().splitlines()) == 2
    assert "decode.beam = 4" in (tmp_path / "out.txt.config.txt").read_text()
    assert main(["translate", "--model", model, "--vocab", vocab, "--input", str(src), "--datastore", str(d / "ds.bin"),
                 "--lambda", "0.3", "--greedy", *sets()]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 2


def test_ablation_switches_reduce_to_the_adapter_baseline(pipeline):
    d, vocab, model, train, dev = pipeline
    run = d / "baseline"
    assert main(["train-ink", "--model", model, "--vocab", vocab, "--train", train, "--run-dir", str(run),
                 "--no-refresh", "--no-li", "--no-lr", *sets()]) == 0
    snap = (run / "config.txt").read_text()
    assert "train.refresh = false" in snap and "train.enable_l_i = false" in snap and "train.enable_l_r = false" in snap
    reports = [json.loads(x) for x in (run / "epochs.jsonl").read_text().splitlines()]
    assert {r["datastore_version"] for r in reports} == {1}
    assert all(r["loss"]["total"] == pytest.approx(r["loss"]["l_a"], rel=1e-6) for r in reports)


def test_bench_and_ablate(pipeline):
    d, vocab, model, train, dev = pipeline
    assert main(["bench", "--model", model, "--vocab", vocab, "--datastore", str(d / "ds.bin"), "--input", dev,
                 "--out-dir", str(d / "bench"), *sets()]) == 0
    lines = (d / "bench" / "bench.jsonl").read_text().splitlines()
    assert len(lines) == 4 + 2
    assert main(["ablate", "--model", model, "--vocab", vocab, "--train", train, "--dev", dev, "--seeds", "0",
                 "--out-dir", str(d / "abl"), *sets(["train.epochs=1"])]) == 0
    assert len((d / "abl" / "ablation.txt").read_text().splitlines()) == 6


def test_exit_codes(pipeline, tmp_path):
    d, vocab, model, train, dev = pipeline
    assert main([]) == 1
    assert main(["pretrain", "--train", str(tmp_path / "missing.tsv"), "--vocab", vocab, "--out", str(tmp_path / "m")]) == 1
    bad = tmp_path / "bad.tsv"
    bad.write_text("hello world\n")
    assert main(["ingest", str(bad), "--vocab-out", str(tmp_path / "v")]) == 1
    assert main(["pretrain", "--train", train, "--vocab", vocab, "--out", str(tmp_path / "m"), "--set", "loss.gamma=1"]) == 1
    other = tmp_path / "other.tsv"
    write_tsv(other, [(["s1"], ["T1"])])
    assert main(["translate", "--model", model, "--vocab", str(tmp_path / "nope"), "--input", str(other)]) == 1
    # a huge learning rate diverges: runtime error
    assert main(["train-ink", "--model", model, "--vocab", vocab, "--train", train, "--run-dir", str(tmp_path / "r"),
                 *sets(["train.peak_lr=1e300", "train.warmup_steps=1"])]) == 2
