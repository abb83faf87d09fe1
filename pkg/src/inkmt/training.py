"""Base-model pretraining, adapter-only refinement against a refreshed datastore, ablations."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import datastore as dstore
from .losses import LossBreakdown, LossWeights, combine, position_terms
from .metrics import FrequencyBuckets, mean_knn_accuracy, representations, token_accuracy
from .model import ModelConfig, Seq2Seq, save_adapters, teacher_forced_states
from .smoothing import KernelSpec
from .validation import InputError, TrainingError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    knn_k: int = 8
    kernel: KernelSpec = field(default_factory=KernelSpec)
    epochs: int = 30
    warmup_steps: int = 4000
    peak_lr: float = 5e-4
    batch_tokens: int = 1024
    seed: int = 0
    refresh_enabled: bool = True
    enable_l_i: bool = True
    enable_l_r: bool = True
    patience: int = 5
    clamp_eps: float = 1e-12
    per_token_mean: bool = False
    overlap_refresh: bool = False
    eval_knn_k: int = 8
    threads: int = 1

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise InputError("peak_lr must be positive")
        for name in ("knn_k", "warmup_steps", "batch_tokens", "patience", "eval_knn_k", "threads"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")


@dataclass
class EpochReport:
    epoch: int
    loss: LossBreakdown
    datastore_version: int
    datastore_version_end: int
    refresh_seconds: float
    clamp_hits: int
    dev_token_accuracy: float = None
    dev_knn_accuracy: float = None
    dev_knn_buckets: dict = None
    train_seconds: float = 0.0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class InkResult:
    model: Seq2Seq
    reports: list
    datastore: dstore.Datastore

    def adapter_state(self):
        return {n: p.detach().clone() for n, p in self.model.adapter_parameters()}


def inverse_sqrt_lr(step, warmup, peak):
    """Linear warm-up to ``peak`` over ``warmup`` steps, then peak * sqrt(warmup / step)."""
    step = max(step, 1)
    if step <= warmup:
        return peak * step / warmup
    return peak * math.sqrt(warmup / step)


def token_batches(corpus, batch_tokens, rng):
    """Shuffled batches of pair indices holding at most ``batch_tokens`` target positions."""
    lengths = [len(t) + 1 for _, t in corpus]
    if max(lengths) > batch_tokens:
        raise InputError(f"batch_tokens={batch_tokens} is smaller than the longest target ({max(lengths)})")
    order = rng.permutation(len(corpus))
    batch, used = [], 0
    for i in order:
        if used + lengths[i] > batch_tokens and batch:
            yield batch
            batch, used = [], 0
        batch.append(int(i))
        used += lengths[i]
    if batch:
        yield batch


def _make_optimizer(params, config):
    opt = torch.optim.Adam(params, lr=config.peak_lr, betas=(0.9, 0.98), eps=1e-8)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: inverse_sqrt_lr(s + 1, config.warmup_steps, config.peak_lr) / config.peak_lr)
    return opt, sched


def pretrain_base(corpus, model_config, config, dev=None):
    """Train every base parameter with token-level cross-entropy; no adapters."""
    if len(corpus) == 0:
        raise InputError("training corpus is empty")
    torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)
    model = Seq2Seq(model_config)
    if config.epochs == 0:
        return model
    rng = np.random.default_rng(config.seed)
    opt, sched = _make_optimizer(model.parameters(), config)
    last_good = copy.deepcopy(model.state_dict())
    for epoch in range(1, config.epochs + 1):
        total, n = 0.0, 0
        for idx in token_batches(corpus, config.batch_tokens, rng):
            src_pairs = [corpus[i] for i in idx]
            h, gold = teacher_forced_states(model, src_pairs)
            loss = torch.nn.functional.cross_entropy(model.logits(h), gold)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss in pretraining epoch {epoch}", last_good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss.detach()) * len(gold)
            n += len(gold)
        last_good = copy.deepcopy(model.state_dict())
        if dev is not None:
            log.info("pretrain epoch %d loss %.4f dev acc %.4f", epoch, total / n, token_accuracy(model, dev))
        else:
            log.info("pretrain epoch %d loss %.4f", epoch, total / n)
    return model


def _entry_offsets(corpus):
    lengths = np.array([len(t) + 1 for _, t in corpus])
    return np.concatenate([[0], np.cumsum(lengths)[:-1]])


def evaluate(model, train_corpus, dev_corpus, k=8, buckets=None, datastore=None):
    """Dev token accuracy and mean kNN accuracy against a datastore built from the current model."""
    ds = datastore if datastore is not None else dstore.build(model, train_corpus)
    H, gold = representations(model, dev_corpus)
    knn = mean_knn_accuracy(H, gold, ds, k, buckets)
    return {"token_accuracy": token_accuracy(model, dev_corpus), "knn_accuracy": knn["overall"], "knn_buckets": knn["buckets"]}


def _mean_breakdown(parts, weights):
    if not parts:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, weights.alpha, weights.beta)
    m = lambda attr: float(np.mean([getattr(p, attr) for p in parts]))  # noqa: E731
    return LossBreakdown(
        m("l_a"), m("l_i"), m("l_r"), m("total"), weights.alpha, weights.beta,
        sum(p.clamp_hits for p in parts), sum(p.n_positions for p in parts),
    )


def train_ink(base_model, corpus, config, dev=None, run_dir=None, vocab_digest="", buckets=None, config_snapshot=None):
    """Refine adapters on ``corpus`` while the datastore is refreshed at epoch boundaries.

    The base model is left untouched; the returned model is a copy carrying
    the trained adapters. With ``dev`` given, training stops once dev token
    accuracy has not improved for ``patience`` epochs.
    """
    if len(corpus) == 0:
        raise InputError("training corpus is empty")
    torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)
    model = copy.deepcopy(base_model).remove_adapters().freeze_base().add_adapters(seed=config.seed)
    trainable = [p for _, p in model.adapter_parameters()]
    opt, sched = _make_optimizer(trainable, config)
    rng = np.random.default_rng(config.seed)
    uses_knn = config.enable_l_i or config.enable_l_r
    weights = LossWeights(
        config.weights.alpha if config.enable_l_i else 0.0,
        config.weights.beta if config.enable_l_r else 0.0,
    )
    buckets = buckets or FrequencyBuckets.quartiles(model.cfg.vocab_size)
    offsets = _entry_offsets(corpus)

    run_dir = Path(run_dir) if run_dir else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        if config_snapshot is not None:
            (run_dir / "config.txt").write_text(config_snapshot)
        (run_dir / "epochs.jsonl").write_text("")

    t0 = time.perf_counter()
    handle = dstore.ActiveDatastore(dstore.build(model, corpus))
    reports = []

    def record(report):
        reports.append(report)
        if run_dir:
            with open(run_dir / "epochs.jsonl", "a") as fh:
                fh.write(report.to_json() + "\n")

    def dev_metrics(ds=None):
        if dev is None:
            return {}
        return evaluate(model, corpus, dev, config.eval_knn_k, buckets, ds)

    m0 = dev_metrics(handle.current)
    record(EpochReport(0, _mean_breakdown([], weights), 1, 1, time.perf_counter() - t0, 0,
                       m0.get("token_accuracy"), m0.get("knn_accuracy"), m0.get("knn_buckets")))
    best, stale = m0.get("token_accuracy", -1.0), 0
    executor = ThreadPoolExecutor(max_workers=1) if config.overlap_refresh else None
    pending = None

    try:
        for epoch in range(1, config.epochs + 1):
            t_epoch = time.perf_counter()
            start_version = handle.current.version
            parts = []
            for idx in token_batches(corpus, config.batch_tokens, rng):
                if pending is not None and pending.done():
                    handle.publish(pending.result())
                    pending = None
                ds = handle.current
                pairs = [corpus[i] for i in idx]
                H, gold = teacher_forced_states(model, pairs)
                pair_index = torch.cat([torch.full((len(t) + 1,), j) for j, (_, t) in enumerate(pairs)])
                if uses_knn:
                    own = np.concatenate([offsets[i] + np.arange(len(corpus[i][1]) + 1) for i in idx])
                    ids, _ = ds.search(H.detach().double().numpy(), config.knn_k, exclude_ids=own)
                    nb_keys, nb_tokens = ds.gather(ids)
                else:
                    nb_keys = nb_tokens = None
                l_a, l_i, l_r, clamped = position_terms(
                    H, gold, model.emb, nb_keys, nb_tokens, config.kernel,
                    with_li=config.enable_l_i, with_lr=config.enable_l_r, eps=config.clamp_eps,
                )
                total, breakdown = combine(l_a, l_i, l_r, pair_index, weights, config.per_token_mean, clamped)
                if not torch.isfinite(total):
                    raise TrainingError(f"non-finite loss in epoch {epoch}", _adapter_snapshot(model))
                opt.zero_grad()
                total.backward()
                opt.step()
                sched.step()
                parts.append(breakdown)
            train_seconds = time.perf_counter() - t_epoch

            t_refresh = time.perf_counter()
            if pending is not None:
                handle.publish(pending.result())
                pending = None
            if config.refresh_enabled:
                if executor is not None:
                    snapshot = copy.deepcopy(model)
                    pending = executor.submit(dstore.refresh, handle.current, snapshot, corpus)
                else:
                    handle.publish(dstore.refresh(handle.current, model, corpus))
            refresh_seconds = time.perf_counter() - t_refresh

            eval_ds = handle.current if (config.refresh_enabled and pending is None) else None
            m = dev_metrics(eval_ds)
            mean = _mean_breakdown(parts, weights)
            end_version = handle.current.version
            record(EpochReport(epoch, mean, start_version, end_version, refresh_seconds, mean.clamp_hits,
                               m.get("token_accuracy"), m.get("knn_accuracy"), m.get("knn_buckets"), train_seconds))
            log.info("ink epoch %d loss %.4f (a %.4f i %.4f r %.4f) dev acc %s knn %s",
                     epoch, mean.total, mean.l_a, mean.l_i, mean.l_r, m.get("token_accuracy"), m.get("knn_accuracy"))
            if run_dir:
                save_adapters(model, run_dir / f"adapters_epoch{epoch}.ink", vocab_digest)
            if dev is not None:
                if m["token_accuracy"] > best:
                    best, stale = m["token_accuracy"], 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        break
        if pending is not None:
            handle.publish(pending.result())
    finally:
        if executor is not None:
            executor.shutdown(wait=True)

    if run_dir:
        save_adapters(model, run_dir / "adapters.ink", vocab_digest)
    return InkResult(model, reports, handle.current)


def _adapter_snapshot(model):
    return {n: p.detach().clone() for n, p in model.adapter_parameters()}


# --- ablations ---------------------------------------------------------------------

ARMS = {
    "full": {},
    "no-refresh": {"refresh_enabled": False},
    "no-L^i": {"enable_l_i": False},
    "no-L^r": {"enable_l_r": False},
    "L^a-only": {"enable_l_i": False, "enable_l_r": False, "refresh_enabled": False},
}


@dataclass
class AblationTable:
    arms: dict
    errors: dict

    def summary(self, metric):
        out = {}
        for arm, runs in self.arms.items():
            vals = np.array([r[metric] for r in runs])
            out[arm] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
        return out

    def render(self):
        lines = [f"{'arm':<12} {'token acc':>10} {'d':>8} {'kNN acc %':>10} {'d':>8} {'sd':>7}"]
        tok, knn = self.summary("token_accuracy"), self.summary("knn_accuracy")
        ref_t = tok.get("full", (float("nan"), 0))[0]
        ref_k = knn.get("full", (float("nan"), 0))[0]
        for arm in ARMS:
            if arm in self.errors:
                lines.append(f"{arm:<12} failed: {self.errors[arm]}")
            elif arm in tok:
                lines.append(
                    f"{arm:<12} {tok[arm][0]:>10.4f} {tok[arm][0] - ref_t:>+8.4f} "
                    f"{knn[arm][0]:>10.2f} {knn[arm][0] - ref_k:>+8.2f} {knn[arm][1]:>7.2f}"
                )
        return "\n".join(lines)

    def records(self):
        return [{"arm": arm, "seed_index": i, **r} for arm, runs in self.arms.items() for i, r in enumerate(runs)]


def ablation_suite(base_model, corpus, config, seeds, dev, arms=None):
    """Run each ablation arm once per seed and collect final dev metrics."""
    if not seeds:
        raise InputError("at least one seed is required")
    arms = arms or list(ARMS)
    table = AblationTable({}, {})
    for arm in arms:
        runs = []
        try:
            for seed in seeds:
                cfg = replace(config, seed=seed, **ARMS[arm])
                result = train_ink(base_model, corpus, cfg, dev=dev)
                last = result.reports[-1]
                runs.append({"seed": seed, "token_accuracy": last.dev_token_accuracy, "knn_accuracy": last.dev_knn_accuracy,
                             "epochs": last.epoch})
        except Exception as exc:  # one failing arm must not abort the others
            table.errors[arm] = f"{type(exc).__name__}: {exc}"
            continue
        table.arms[arm] = runs
    return table
