"""Command-line entry point: ``inkmt <command> [options]``.

Exit codes: 0 success, 1 input error, 2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import datastore as dstore
from .bench import render_bench, speedups, throughput_bench
from .config import RunConfig
from .data import Vocabulary, ingest, read_tsv, tokenize, write_toy_task
from .decoding import GREEDY, translate
from .metrics import bleu
from .model import load_adapters, load_model, save_model
from .training import ablation_suite, evaluate, pretrain_base, train_ink
from .validation import FormatError, InkError, InputError

log = logging.getLogger("inkmt")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting (repeatable)")
    p.add_argument("--threads", type=int, help="torch thread count (default from config: 1)")


def _model_args(p, adapters=True):
    p.add_argument("--model", required=True, help="base model checkpoint")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    if adapters:
        p.add_argument("--adapters", help="adapter file to load on top of the base model")


def build_parser():
    ap = _Parser(prog="inkmt", description="kNN-guided adapter refinement for neural machine translation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-toy", help="write the synthetic two-domain corpora")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--general", type=int, default=4000)
    p.add_argument("--domain-train", type=int, default=800)
    p.add_argument("--domain-dev", type=int, default=200)

    p = sub.add_parser("ingest", help="build a vocabulary from tab-separated corpora")
    p.add_argument("corpus")
    p.add_argument("--extra", nargs="*", default=[], help="more corpora that contribute to the vocabulary")
    p.add_argument("--vocab-out", required=True)
    _common(p)

    p = sub.add_parser("pretrain", help="train a base model from scratch")
    p.add_argument("--train", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--dev")
    p.add_argument("--out", required=True, help="model checkpoint to write")
    _common(p)

    p = sub.add_parser("build-datastore", help="build a datastore from a corpus")
    _model_args(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("train-ink", help="refine adapters against a refreshed datastore")
    _model_args(p, adapters=False)
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--no-refresh", action="store_true", help="keep the initial datastore for the whole run")
    p.add_argument("--no-li", action="store_true", help="drop the kNN-distribution alignment loss")
    p.add_argument("--no-lr", action="store_true", help="drop the representation alignment loss")
    _common(p)

    p = sub.add_parser("translate", help="decode source sentences")
    _model_args(p)
    p.add_argument("--input", required=True, help="one source per line, or a source<TAB>target file")
    p.add_argument("--output", help="write translations here instead of stdout")
    p.add_argument("--datastore", help="interpolate with this datastore at every step")
    p.add_argument("--lambda", dest="lam", type=float, help="interpolation weight of the kNN distribution")
    p.add_argument("--beam", type=int, help="beam size (default 4)")
    p.add_argument("--lenpen", type=float, help="length penalty (default 0.6)")
    p.add_argument("--greedy", action="store_true")
    _common(p)

    p = sub.add_parser("eval", help="token accuracy, mean kNN accuracy by bucket and BLEU")
    _model_args(p)
    p.add_argument("--train", required=True, help="corpus the evaluation datastore is built from")
    p.add_argument("--dev", required=True)
    p.add_argument("--out-dir", required=True)
    _common(p)

    p = sub.add_parser("bench", help="decode throughput with and without a datastore")
    _model_args(p)
    p.add_argument("--datastore", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    _common(p)

    p = sub.add_parser("ablate", help="run the full system and its ablations over several seeds")
    _model_args(p, adapters=False)
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out-dir", required=True)
    _common(p)
    return ap


# --- helpers ----------------------------------------------------------------------


def _config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.update(getattr(args, "set", []), "--set")
    if getattr(args, "threads", None) is not None:
        cfg.set("threads", args.threads, "--threads")
    torch.set_num_threads(cfg["threads"])
    return cfg


def _need(path, what):
    if not Path(path).exists():
        raise InputError(f"{what} not found: {path}")
    return path


def _vocab(args):
    return Vocabulary.load(_need(args.vocab, "vocabulary"))


def _model(args, vocab):
    model = load_model(_need(args.model, "model checkpoint"), vocab.digest())
    if getattr(args, "adapters", None):
        load_adapters(model, _need(args.adapters, "adapter file"), vocab.digest())
    return model.eval()


def _corpus(path, vocab, cfg):
    return ingest(_need(path, "corpus"), vocab, char_level=cfg["data.char_level"])[0]


def _sources(path, vocab, cfg):
    lines = Path(_need(path, "input")).read_text(encoding="utf-8").splitlines()
    if any("\t" in line for line in lines):
        pairs = read_tsv(path, cfg["data.char_level"])[0]
        return [vocab.encode(s) for s, _ in pairs], [t for _, t in pairs]
    srcs = [vocab.encode(tokenize(line, cfg["data.char_level"])) for line in lines if line.strip()]
    return srcs, None


def _snapshot(cfg, path):
    cfg.write_snapshot(path)
    log.info("config snapshot: %s", path)


def _write_report(out_dir, name, text, records):
    out_dir = Path(out_dir)
    (out_dir / f"{name}.txt").write_text(text + "\n", encoding="utf-8")
    with open(out_dir / f"{name}.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# --- commands -----------------------------------------------------------------------


def cmd_make_toy(args):
    out = write_toy_task(args.out_dir, args.seed, n_general=args.general, n_domain_train=args.domain_train,
                         n_domain_dev=args.domain_dev)
    print(f"wrote toy corpora to {out}")


def cmd_ingest(args):
    cfg = _config(args)
    _snapshot(cfg, f"{args.vocab_out}.config.txt")
    extra = [_need(p, "corpus") for p in args.extra]
    corpus, vocab = ingest(_need(args.corpus, "corpus"), None, cfg["data.min_count"], cfg["data.char_level"], extra)
    vocab.save(args.vocab_out)
    print(f"{len(corpus)} pairs, {len(vocab)} vocabulary entries")


def cmd_pretrain(args):
    cfg = _config(args)
    _snapshot(cfg, f"{args.out}.config.txt")
    vocab = _vocab(args)
    train = _corpus(args.train, vocab, cfg)
    dev = _corpus(args.dev, vocab, cfg) if args.dev else None
    model = pretrain_base(train, cfg.model_config(len(vocab)), cfg.pretrain_config(), dev)
    save_model(model, args.out, vocab.digest())
    print(f"saved base model to {args.out}")


def cmd_build_datastore(args):
    cfg = _config(args)
    _snapshot(cfg, f"{args.out}.config.txt")
    vocab = _vocab(args)
    model = _model(args, vocab)
    ds = dstore.build(model, _corpus(args.corpus, vocab, cfg), **cfg.index_options())
    ds.save(args.out)
    print(f"{len(ds)} entries written to {args.out}")


def cmd_train_ink(args):
    cfg = _config(args)
    for flag, key in ((args.no_refresh, "train.refresh"), (args.no_li, "train.enable_l_i"), (args.no_lr, "train.enable_l_r")):
        if flag:
            cfg.set(key, False, "flag")
    run_dir = Path(args.run_dir)
    _snapshot(cfg, run_dir / "config.txt")
    vocab = _vocab(args)
    model = _model(args, vocab)
    train = _corpus(args.train, vocab, cfg)
    dev = _corpus(args.dev, vocab, cfg) if args.dev else None
    result = train_ink(model, train, cfg.train_config(), dev, run_dir, vocab.digest(), cfg.buckets(len(vocab)), cfg.to_text())
    print(f"{len(result.reports) - 1} epochs; adapters written to {run_dir / 'adapters.ink'}")


def _decode(model, sources, cfg, datastore=None, lam=None, greedy=False):
    strategy = GREEDY if greedy else cfg.beam()
    return translate(model, sources, strategy, cfg["decode.max_len"] or None, cfg["decode.batch_size"], datastore,
                     cfg["inference.knn_k"], cfg["inference.lambda"] if lam is None else lam, cfg.kernel())


def cmd_translate(args):
    cfg = _config(args)
    if args.beam is not None:
        cfg.set("decode.beam", args.beam, "--beam")
    if args.lenpen is not None:
        cfg.set("decode.length_penalty", args.lenpen, "--lenpen")
    if args.lam is not None:
        cfg.set("inference.lambda", args.lam, "--lambda")
    if args.output:
        _snapshot(cfg, f"{args.output}.config.txt")
    vocab = _vocab(args)
    model = _model(args, vocab)
    ds = dstore.Datastore.load(_need(args.datastore, "datastore"), **cfg.index_options()) if args.datastore else None
    sources, _ = _sources(args.input, vocab, cfg)
    lines = [" ".join(vocab.decode(o)) for o in _decode(model, sources, cfg, ds, greedy=args.greedy)]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_eval(args):
    cfg = _config(args)
    out = Path(args.out_dir)
    _snapshot(cfg, out / "config.txt")
    vocab = _vocab(args)
    model = _model(args, vocab)
    train, dev = _corpus(args.train, vocab, cfg), _corpus(args.dev, vocab, cfg)
    with torch.no_grad():
        ds = dstore.build(model, train)
    buckets = cfg.buckets(len(vocab))
    m = evaluate(model, train, dev, cfg["eval.knn_k"], buckets, ds)
    hyps = [" ".join(vocab.decode(o)) for o in _decode(model, dev.sources, cfg)]
    refs = [" ".join(vocab.decode(t)) for t in dev.targets]
    score = bleu(hyps, refs)
    rows = [("token accuracy", f"{m['token_accuracy']:.4f}"), (f"mean kNN accuracy (k={cfg['eval.knn_k']})", f"{m['knn_accuracy']:.2f}")]
    rows += [(f"  bucket {label}", "absent" if v is None else f"{v:.2f}") for label, v in m["knn_buckets"].items()]
    rows.append(("BLEU", f"{score:.2f}"))
    width = max(len(r[0]) for r in rows)
    text = "\n".join(f"{name:<{width}}  {value:>8}" for name, value in rows)
    records = [{"metric": "token_accuracy", "value": m["token_accuracy"]},
               {"metric": "knn_accuracy", "k": cfg["eval.knn_k"], "value": m["knn_accuracy"]}]
    records += [{"metric": "knn_accuracy_bucket", "bucket": label, "value": v} for label, v in m["knn_buckets"].items()]
    records.append({"metric": "bleu", "value": score})
    _write_report(out, "eval", text, records)
    print(text)


def cmd_bench(args):
    cfg = _config(args)
    out = Path(args.out_dir)
    _snapshot(cfg, out / "config.txt")
    vocab = _vocab(args)
    model = _model(args, vocab)
    ds = dstore.Datastore.load(_need(args.datastore, "datastore"), **cfg.index_options())
    sources, _ = _sources(args.input, vocab, cfg)
    results = throughput_bench(model, sources, ds, cfg["bench.batch_sizes"], cfg["bench.repetitions"], cfg.beam(),
                               cfg["inference.knn_k"], cfg["inference.lambda"], cfg.kernel(), cfg["threads"])
    text = render_bench(results)
    records = [json.loads(r.to_json()) for r in results]
    records += [{"speedup": x, "batch_size": b} for b, x in sorted(speedups(results).items())]
    _write_report(out, "bench", text, records)
    print(text)


def cmd_ablate(args):
    cfg = _config(args)
    out = Path(args.out_dir)
    _snapshot(cfg, out / "config.txt")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise InputError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    vocab = _vocab(args)
    model = _model(args, vocab)
    train, dev = _corpus(args.train, vocab, cfg), _corpus(args.dev, vocab, cfg)
    table = ablation_suite(model, train, cfg.train_config(), seeds, dev)
    text = table.render()
    _write_report(out, "ablation", text, table.records() + [{"arm": a, "error": e} for a, e in table.errors.items()])
    print(text)


COMMANDS = {
    "make-toy": cmd_make_toy, "ingest": cmd_ingest, "pretrain": cmd_pretrain, "build-datastore": cmd_build_datastore,
    "train-ink": cmd_train_ink, "translate": cmd_translate, "eval": cmd_eval, "bench": cmd_bench, "ablate": cmd_ablate,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        COMMANDS[args.command](args)
    except (InputError, FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InkError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
