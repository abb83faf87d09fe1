"""Probability vectors over the vocabulary or over a token subset."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import InputError


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class VocabDistribution:
    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=np.float64)
        if support.shape != probs.shape or support.ndim != 1:
            raise InputError("support and probs must be 1-D arrays of equal length")
        if len(np.unique(support)) != len(support):
            raise InputError("support ids must be distinct")
        if np.any(probs < 0):
            raise InputError("probabilities must be non-negative")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    def __getitem__(self, token):
        hit = np.flatnonzero(self.support == token)
        return float(self.probs[hit[0]]) if hit.size else 0.0

    def __len__(self):
        return len(self.support)

    def dense(self, vocab_size):
        out = np.zeros(vocab_size)
        out[self.support] = self.probs
        return out

    def as_dict(self):
        return dict(zip(self.support.tolist(), self.probs.tolist()))
