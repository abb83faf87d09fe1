"""Evaluation metrics: token accuracy, mean kNN accuracy per frequency bucket, BLEU."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch

from .model import teacher_forced_states
from .validation import InputError


@dataclass(frozen=True)
class FrequencyBuckets:
    """Half-open id ranges [b_i, b_{i+1}); ids are ranked by descending frequency."""

    boundaries: tuple

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        if len(b) < 2 or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])):
            raise InputError("bucket boundaries must start at 0 and strictly increase")
        object.__setattr__(self, "boundaries", b)

    @classmethod
    def quartiles(cls, vocab_size):
        cuts = sorted({0, *(int(round(vocab_size * q)) for q in (0.25, 0.5, 0.75)), vocab_size})
        return cls(tuple(cuts))

    @property
    def labels(self):
        return [f"[{lo}, {hi})" for lo, hi in zip(self.boundaries, self.boundaries[1:])]

    def assign(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.boundaries[-1]):
            raise InputError("token id outside the bucket range")
        return np.searchsorted(self.boundaries, ids, side="right") - 1


def representations(model, corpus, batch_size=64):
    """Teacher-forced (H, gold) for every target position of a corpus, as numpy."""
    hs, golds = [], []
    with torch.no_grad():
        for lo in range(0, len(corpus), batch_size):
            h, g = teacher_forced_states(model, [corpus[i] for i in range(lo, min(lo + batch_size, len(corpus)))])
            hs.append(h.double().numpy())
            golds.append(g.numpy())
    return np.concatenate(hs), np.concatenate(golds)


def token_accuracy(model, corpus, batch_size=64):
    """Share of teacher-forced positions whose arg-max prediction is the gold token."""
    correct = total = 0
    with torch.no_grad():
        for lo in range(0, len(corpus), batch_size):
            h, g = teacher_forced_states(model, [corpus[i] for i in range(lo, min(lo + batch_size, len(corpus)))])
            correct += int((model.logits(h).argmax(-1) == g).sum())
            total += len(g)
    return correct / total


def knn_hit_rates(H, gold, datastore, k):
    ids, _ = datastore.search(H, k)
    valid = ids >= 0
    _, values = datastore.gather(np.where(valid, ids, 0))
    hits = (values == np.asarray(gold)[:, None]) & valid
    return hits.sum(1) / valid.sum(1)


def mean_knn_accuracy(H, gold, datastore, k, buckets=None):
    """Percent of each query's k nearest entries that carry its gold token.

    Returns {"overall": pct, "buckets": {label: pct or None}}; empty buckets
    are reported as None rather than zero.
    """
    gold = np.asarray(gold)
    if len(gold) == 0:
        raise InputError("no dev queries")
    rates = knn_hit_rates(np.asarray(H, dtype=np.float64), gold, datastore, k) * 100.0
    out = {"overall": float(rates.mean()), "buckets": {}}
    if buckets is not None:
        which = buckets.assign(gold)
        for i, label in enumerate(buckets.labels):
            sel = which == i
            out["buckets"][label] = float(rates[sel].mean()) if sel.any() else None
    return out


# --- BLEU ----------------------------------------------------------------------------


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n=4):
    """Corpus BLEU-4 in [0, 100] with add-one smoothing on n >= 2 precisions.

    Sentences are token lists or whitespace-separated strings.
    """
    if len(candidates) != len(references):
        raise InputError(f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        raise InputError("empty corpus")
    split = lambda s: s.split() if isinstance(s, str) else list(s)  # noqa: E731
    matches, totals = [0] * max_n, [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = split(cand), split(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            c, r = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(v, r[g]) for g, v in c.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    log_p += sum(math.log((matches[n] + 1) / (totals[n] + 1)) for n in range(1, max_n))
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_p / max_n)
