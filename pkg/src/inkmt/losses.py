"""Alignment losses between representations, token embeddings and retrieved neighbors.

Each loss has a per-position form that mirrors its definition and a batched
form used by the trainer; tests check that the two agree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .smoothing import knn_distribution, knn_probs_dense
from .validation import InputError, NumericError

DEFAULT_CLAMP_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    beta: float = 0.2

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InputError(f"{name} must be a finite non-negative number, got {v}")


@dataclass
class LossBreakdown:
    l_a: float
    l_i: float
    l_r: float
    total: float
    alpha: float
    beta: float
    clamp_hits: int = 0
    n_positions: int = 0


def _as_tensor(x, dtype=torch.float64):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def _emb(emb):
    return emb.weight if isinstance(emb, torch.nn.Embedding) else _as_tensor(emb)


# --- per-position forms ---------------------------------------------------------


def loss_align_gold_nmt(h, y_gold, emb):
    """-log p_nmt(y_gold | h) with p_nmt the softmax of h against every embedding row."""
    h, E = _as_tensor(h), _emb(emb)
    if not 0 <= int(y_gold) < E.shape[0]:
        raise InputError(f"gold token {y_gold} outside vocabulary")
    return -torch.log_softmax(E @ h, dim=-1)[int(y_gold)]


def loss_align_knn_nmt(h, neighbors, emb, spec):
    """KL(p_knn || p_nmt) summed over the distinct retrieved tokens.

    p_knn is computed from a detached copy of ``h`` and acts as a fixed target.
    """
    if len(neighbors) == 0:
        raise InputError("neighbor set is empty")
    h, E = _as_tensor(h), _emb(emb)
    p = knn_distribution(neighbors, h.detach().cpu().numpy().astype(np.float64), spec)
    p_knn = torch.as_tensor(p.probs, dtype=h.dtype)
    logp_nmt = torch.log_softmax(E @ h, dim=-1)[torch.as_tensor(p.support)]
    return (p_knn * (torch.log(p_knn) - logp_nmt)).sum()


def loss_align_repr(h, neighbors, y_gold, eps=DEFAULT_CLAMP_EPS):
    """-log of the exp-cosine-weighted share of neighbors that carry the gold token."""
    if len(neighbors) == 0:
        raise InputError("neighbor set is empty")
    h = _as_tensor(h)
    keys = torch.as_tensor(np.asarray(neighbors.keys, dtype=np.float64), dtype=h.dtype)
    tokens = torch.as_tensor(np.asarray(neighbors.tokens))
    lr, _ = _repr_terms(h[None], keys[None], tokens[None], torch.as_tensor([int(y_gold)]), eps)
    return lr[0]


# --- batched forms -----------------------------------------------------------------


def _repr_terms(H, keys, tokens, gold, eps):
    hn = H.norm(dim=-1)
    kn = keys.norm(dim=-1)
    if (hn == 0).any() or (kn == 0).any():
        raise NumericError("exp-cosine kernel is undefined for zero vectors")
    cos = torch.einsum("nkd,nd->nk", keys, H) / (kn * hn[:, None])
    match = tokens.eq(gold[:, None])
    has_gold = match.any(dim=1)
    # rows without a gold-sharing neighbor get a finite dummy so autograd stays NaN-free
    safe = torch.where(has_gold[:, None], match, torch.ones_like(match))
    log_ratio = torch.logsumexp(cos.masked_fill(~safe, float("-inf")), dim=1) - torch.logsumexp(cos, dim=1)
    log_eps = torch.full_like(log_ratio, math.log(eps))
    log_ratio = torch.where(has_gold, torch.maximum(log_ratio, log_eps), log_eps)
    clamped = log_ratio <= math.log(eps)
    return -log_ratio, clamped


def position_terms(H, gold, emb, nb_keys=None, nb_tokens=None, spec=None, with_li=True, with_lr=True, eps=DEFAULT_CLAMP_EPS):
    """Per-position (l_a, l_i, l_r, clamped) for a batch of representations.

    H: (n, d) tensor; gold: (n,) long tensor; nb_keys: (n, k, d) array;
    nb_tokens: (n, k) array. Terms that are switched off come back as zeros.
    """
    E = _emb(emb)
    logp = torch.log_softmax(H @ E.T, dim=-1)
    l_a = -logp.gather(1, gold[:, None])[:, 0]
    zeros = torch.zeros_like(l_a)
    l_i, l_r, clamped = zeros, zeros, torch.zeros_like(gold, dtype=torch.bool)
    if with_li:
        target = knn_probs_dense(spec, H.detach().double().cpu().numpy(), nb_keys, nb_tokens, E.shape[0])
        p = torch.as_tensor(target, dtype=H.dtype)
        support = p > 0
        l_i = torch.where(support, p * (torch.log(torch.where(support, p, torch.ones_like(p))) - logp), torch.zeros_like(p)).sum(1)
    if with_lr:
        keys = torch.as_tensor(np.asarray(nb_keys), dtype=H.dtype)
        l_r, clamped = _repr_terms(H, keys, torch.as_tensor(np.asarray(nb_tokens)), gold, eps)
    return l_a, l_i, l_r, clamped


def combine(l_a, l_i, l_r, pair_index, weights, per_token_mean=False, clamped=None):
    """Sum over each pair's positions, mean over pairs (or a flat per-token mean).

    Returns (total tensor for backprop, LossBreakdown with the same reduction).
    """
    if l_a.numel() == 0:
        raise InputError("batch has no positions")
    pair_index = torch.as_tensor(pair_index)
    denom = l_a.numel() if per_token_mean else torch.unique(pair_index).numel()
    per_pos = l_a + weights.alpha * l_i + weights.beta * l_r
    total = per_pos.sum() / denom
    if not torch.isfinite(total):
        raise NumericError("combined loss is not finite")
    red = lambda x: float(x.detach().sum()) / denom  # noqa: E731
    breakdown = LossBreakdown(
        red(l_a), red(l_i), red(l_r), float(total.detach()), weights.alpha, weights.beta,
        int(clamped.sum()) if clamped is not None else 0, l_a.numel(),
    )
    return total, breakdown


def combined_loss(batch, weights, emb, spec, per_token_mean=False, eps=DEFAULT_CLAMP_EPS):
    """Weighted objective over a list of positions.

    ``batch`` items are (pair_id, h, y_gold, neighbors); every neighbor set
    must hold the same number of entries.
    """
    if not batch:
        raise InputError("batch is empty")
    pair_ids = [b[0] for b in batch]
    H = torch.stack([_as_tensor(b[1]) for b in batch])
    gold = torch.as_tensor([int(b[2]) for b in batch])
    if any(len(b[3]) == 0 for b in batch):
        raise InputError("every position needs a non-empty neighbor set")
    keys = np.stack([np.asarray(b[3].keys, dtype=np.float64) for b in batch])
    tokens = np.stack([np.asarray(b[3].tokens) for b in batch])
    l_a, l_i, l_r, clamped = position_terms(H, gold, emb, keys, tokens, spec, eps=eps)
    return combine(l_a, l_i, l_r, pair_ids, weights, per_token_mean, clamped)
