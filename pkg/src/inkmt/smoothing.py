"""Kernels, kernel-density kNN distributions and kNN/NMT interpolation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import VocabDistribution
from .validation import InputError, NumericError, check_probability, check_vector

NEG_EXP_DISTANCE = "neg_exp_distance"
EXP_COSINE = "exp_cosine"


@dataclass(frozen=True)
class KernelSpec:
    kind: str = NEG_EXP_DISTANCE
    T: float = 10.0

    def __post_init__(self):
        if self.kind not in (NEG_EXP_DISTANCE, EXP_COSINE):
            raise InputError(f"unknown kernel kind {self.kind!r}")
        if not (self.T > 0 and np.isfinite(self.T)):
            raise InputError(f"temperature must be positive, got {self.T}")

    @classmethod
    def exp_cosine(cls):
        return cls(EXP_COSINE)

    @classmethod
    def neg_exp_distance(cls, T=10.0):
        return cls(NEG_EXP_DISTANCE, T)


def _cosine(a, b):
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericError("cosine similarity is undefined for a zero vector")
    return np.sum(a * b, axis=-1) / (na * nb)


def log_kernel(spec, h, keys):
    """log kappa(h, key) for each row of ``keys`` (broadcasts over leading axes)."""
    h = np.asarray(h, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if spec.kind == EXP_COSINE:
        return _cosine(h[..., None, :], keys)
    return -np.linalg.norm(keys - h[..., None, :], axis=-1) / spec.T


def kernel_eval(spec, a, b):
    a = check_vector(a, name="a")
    b = check_vector(b, a.shape[0], name="b")
    if spec.kind == EXP_COSINE:
        return float(np.exp(_cosine(a, b)))
    return float(np.exp(-np.linalg.norm(a - b) / spec.T))


def knn_distribution(neighbors, h, spec):
    """Kernel-weighted vote of the retrieved tokens, normalised over their distinct values."""
    if len(neighbors) == 0:
        raise InputError("neighbor set is empty")
    h = check_vector(h, name="h")
    logw = log_kernel(spec, h, neighbors.keys)
    w = np.exp(logw - logw.max())
    support, inverse = np.unique(neighbors.tokens, return_inverse=True)
    mass = np.zeros(len(support))
    np.add.at(mass, inverse, w)
    return VocabDistribution(support, mass / mass.sum())


def knn_probs_dense(spec, H, keys, tokens, vocab_size):
    """Batched kNN distributions as dense (n, |V|) rows.

    H: (n, d), keys: (n, k, d), tokens: (n, k).
    """
    logw = log_kernel(spec, H, keys)
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    out = np.zeros((H.shape[0], vocab_size))
    rows = np.repeat(np.arange(H.shape[0]), tokens.shape[1])
    np.add.at(out, (rows, tokens.reshape(-1)), w.reshape(-1))
    return out


def interpolate(p_nmt, p_knn, lam):
    """lam * p_knn + (1 - lam) * p_nmt over the full vocabulary."""
    lam = check_probability(lam, "lambda")
    vocab_size = len(p_nmt.support)
    if not np.array_equal(p_nmt.support, np.arange(vocab_size)):
        raise InputError("p_nmt must cover the full vocabulary in id order")
    if lam == 0.0:
        return VocabDistribution(p_nmt.support, p_nmt.probs.copy())
    mixed = (1.0 - lam) * p_nmt.probs + lam * p_knn.dense(vocab_size)
    return VocabDistribution(p_nmt.support, mixed)
