"""Estimator wrappers with the fit / predict / transform / score convention.

``X`` is a list of source token-id sequences and ``y`` the matching target
sequences. All three estimators score by corpus BLEU over token ids.
"""
from __future__ import annotations

import copy

import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import datastore as dstore
from .data import ParallelCorpus
from .decoding import Beam, translate
from .losses import LossWeights
from .metrics import bleu, representations
from .model import ModelConfig, Seq2Seq
from .smoothing import KernelSpec
from .training import TrainConfig, pretrain_base, train_ink
from .validation import InputError, check_pair, check_pairs


def _corpus(X, y, vocab_size, max_len):
    pairs = check_pairs(X, y)
    if not pairs:
        raise InputError("no training pairs")
    for s, t in pairs:
        check_pair(s, t, vocab_size, max_len)
    return ParallelCorpus(pairs)


def _ids_as_text(seqs):
    return [" ".join(map(str, s)) for s in seqs]


class _Decoding:
    """Shared predict / transform / score over a fitted ``model_``."""

    def _datastore(self):
        return None

    def predict(self, X):
        check_is_fitted(self, "model_")
        beam = Beam(self.beam, self.length_penalty)
        return translate(self.model_, list(X), beam, datastore=self._datastore(), **self._knn_options())

    def _knn_options(self):
        return {}

    def transform(self, X, y):
        """Teacher-forced decoder representations, one row per target position (eos included)."""
        check_is_fitted(self, "model_")
        corpus = _corpus(X, y, self.model_.cfg.vocab_size, self.model_.cfg.max_len)
        return representations(self.model_, corpus)[0]

    def score(self, X, y):
        return bleu(_ids_as_text(self.predict(X)), _ids_as_text(y))


def _resolve_base(base):
    model = base.model_ if isinstance(base, BaseTranslator) else base
    if not isinstance(model, Seq2Seq):
        raise InputError("base must be a fitted BaseTranslator or a Seq2Seq model")
    return model


class BaseTranslator(_Decoding, BaseEstimator):
    """Small transformer trained from scratch with token-level cross-entropy."""

    def __init__(self, vocab_size=None, d_model=64, n_layers=2, n_heads=4, d_ffn=128, max_len=64,
                 epochs=30, warmup_steps=4000, peak_lr=5e-4, batch_tokens=1024, seed=0,
                 beam=4, length_penalty=0.6):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ffn = d_ffn
        self.max_len = max_len
        self.epochs = epochs
        self.warmup_steps = warmup_steps
        self.peak_lr = peak_lr
        self.batch_tokens = batch_tokens
        self.seed = seed
        self.beam = beam
        self.length_penalty = length_penalty

    def fit(self, X, y):
        pairs = check_pairs(X, y)
        vocab_size = self.vocab_size or max([4] + [max(s + t, default=0) + 1 for s, t in pairs])
        corpus = _corpus(X, y, vocab_size, self.max_len)
        cfg = ModelConfig(vocab_size, d_model=self.d_model, n_enc_layers=self.n_layers, n_dec_layers=self.n_layers,
                          n_heads=self.n_heads, d_ffn=self.d_ffn, max_len=self.max_len)
        train = TrainConfig(epochs=self.epochs, warmup_steps=self.warmup_steps, peak_lr=self.peak_lr,
                            batch_tokens=self.batch_tokens, seed=self.seed)
        self.model_ = pretrain_base(corpus, cfg, train)
        self.n_features_in_ = self.d_model
        return self


class InkRefiner(_Decoding, BaseEstimator):
    """Adapter refinement of a frozen base model against a refreshed kNN datastore.

    After ``fit`` the datastore is dropped for inference: ``predict`` uses the
    adapted model alone.
    """

    def __init__(self, base=None, alpha=0.2, beta=0.2, knn_k=8, kernel="neg_exp_distance", temperature=10.0,
                 epochs=30, warmup_steps=4000, peak_lr=5e-4, batch_tokens=1024, patience=5, refresh=True,
                 use_knn_alignment=True, use_repr_alignment=True, seed=0, beam=4, length_penalty=0.6):
        self.base = base
        self.alpha = alpha
        self.beta = beta
        self.knn_k = knn_k
        self.kernel = kernel
        self.temperature = temperature
        self.epochs = epochs
        self.warmup_steps = warmup_steps
        self.peak_lr = peak_lr
        self.batch_tokens = batch_tokens
        self.patience = patience
        self.refresh = refresh
        self.use_knn_alignment = use_knn_alignment
        self.use_repr_alignment = use_repr_alignment
        self.seed = seed
        self.beam = beam
        self.length_penalty = length_penalty

    def train_config(self):
        return TrainConfig(
            weights=LossWeights(self.alpha, self.beta), knn_k=self.knn_k, kernel=KernelSpec(self.kernel, self.temperature),
            epochs=self.epochs, warmup_steps=self.warmup_steps, peak_lr=self.peak_lr, batch_tokens=self.batch_tokens,
            seed=self.seed, refresh_enabled=self.refresh, enable_l_i=self.use_knn_alignment,
            enable_l_r=self.use_repr_alignment, patience=self.patience,
        )

    def fit(self, X, y, X_dev=None, y_dev=None):
        base = _resolve_base(self.base)
        corpus = _corpus(X, y, base.cfg.vocab_size, base.cfg.max_len)
        dev = None if X_dev is None else _corpus(X_dev, y_dev, base.cfg.vocab_size, base.cfg.max_len)
        result = train_ink(base, corpus, self.train_config(), dev=dev)
        self.model_ = result.model
        self.reports_ = result.reports
        self.n_features_in_ = base.cfg.d_model
        return self


class KnnTranslator(_Decoding, BaseEstimator):
    """Frozen model whose decoding mixes in a kNN distribution from a training-set datastore."""

    def __init__(self, base=None, knn_k=8, lam=0.5, kernel="neg_exp_distance", temperature=10.0,
                 mode="exact", beam=4, length_penalty=0.6):
        self.base = base
        self.knn_k = knn_k
        self.lam = lam
        self.kernel = kernel
        self.temperature = temperature
        self.mode = mode
        self.beam = beam
        self.length_penalty = length_penalty

    def fit(self, X, y):
        base = _resolve_base(self.base)
        corpus = _corpus(X, y, base.cfg.vocab_size, base.cfg.max_len)
        self.model_ = copy.deepcopy(base)
        with torch.no_grad():
            self.datastore_ = dstore.build(self.model_, corpus, mode=self.mode)
        self.n_features_in_ = base.cfg.d_model
        return self

    def _datastore(self):
        return self.datastore_

    def _knn_options(self):
        return {"knn_k": self.knn_k, "lam": self.lam, "kernel": KernelSpec(self.kernel, self.temperature)}


__all__ = ["BaseTranslator", "InkRefiner", "KnnTranslator"]
