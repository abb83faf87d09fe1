"""Greedy and beam-search decoding, optionally interpolated with a kNN datastore."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import BOS_ID, EOS_ID, PAD_ID
from .smoothing import KernelSpec, knn_probs_dense
from .validation import InputError, check_probability, check_token_ids

DEFAULT_BEAM = 4
DEFAULT_LENGTH_PENALTY = 0.6


@dataclass(frozen=True)
class Beam:
    beam_size: int = DEFAULT_BEAM
    length_penalty: float = DEFAULT_LENGTH_PENALTY

    def __post_init__(self):
        if self.beam_size < 1:
            raise InputError("beam_size must be >= 1")


GREEDY = "greedy"


def normalized_score(logprob, length, length_penalty):
    return logprob / (length**length_penalty)


def beam_search(step_fn, batch_size, max_len, beam_size=DEFAULT_BEAM, length_penalty=DEFAULT_LENGTH_PENALTY, bos=BOS_ID, eos=EOS_ID):
    """Shrinking-beam search.

    ``step_fn(prefixes, owners)`` maps (M, t) prefixes and their batch rows to
    (M, V) log-probabilities of the next token. Each finished hypothesis
    takes one slot out of its item's beam; hypotheses are ranked by
    log-probability / length**length_penalty, with length counting eos.
    """
    if beam_size < 1:
        raise InputError("beam_size must be >= 1")
    tokens = torch.full((batch_size, 1), bos, dtype=torch.long)
    scores = torch.zeros(batch_size, dtype=torch.float64)
    owners = torch.arange(batch_size)
    finished = [[] for _ in range(batch_size)]
    for step in range(1, max_len + 1):
        if len(owners) == 0:
            break
        logp = torch.as_tensor(step_fn(tokens, owners), dtype=torch.float64)
        cand = scores[:, None] + logp
        V = cand.shape[1]
        keep_rows, keep_tok, keep_score = [], [], []
        for b in torch.unique(owners).tolist():
            rows = torch.nonzero(owners == b)[:, 0]
            quota = beam_size - len(finished[b])
            flat = cand[rows].reshape(-1)
            top = torch.topk(flat, min(quota, flat.numel()))
            for val, idx in zip(top.values.tolist(), top.indices.tolist()):
                row, tok = int(rows[idx // V]), idx % V
                if tok == eos:
                    seq = tokens[row, 1:].tolist()
                    finished[b].append((normalized_score(val, step, length_penalty), seq))
                elif step == max_len:
                    seq = tokens[row, 1:].tolist() + [tok]
                    finished[b].append((normalized_score(val, step, length_penalty), seq))
                else:
                    keep_rows.append(row)
                    keep_tok.append(tok)
                    keep_score.append(val)
        if not keep_rows:
            break
        idx = torch.as_tensor(keep_rows)
        tokens = torch.cat([tokens[idx], torch.as_tensor(keep_tok)[:, None]], dim=1)
        scores = torch.as_tensor(keep_score, dtype=torch.float64)
        owners = owners[idx]
    out = []
    for hyps in finished:
        best = max(range(len(hyps)), key=lambda i: (hyps[i][0], -i))
        out.append(hyps[best][1])
    return out


def greedy_search(step_fn, batch_size, max_len, bos=BOS_ID, eos=EOS_ID):
    """Arg-max decoding; stops an item at eos or after ``max_len`` tokens."""
    tokens = torch.full((batch_size, 1), bos, dtype=torch.long)
    done = torch.zeros(batch_size, dtype=torch.bool)
    outs = [[] for _ in range(batch_size)]
    for _ in range(max_len):
        live = torch.nonzero(~done)[:, 0]
        if len(live) == 0:
            break
        logp = torch.as_tensor(step_fn(tokens[live], live))
        nxt = logp.argmax(dim=1)
        step_tokens = torch.full((batch_size,), eos, dtype=torch.long)
        step_tokens[live] = nxt
        for i, tok in zip(live.tolist(), nxt.tolist()):
            if tok == eos:
                done[i] = True
            else:
                outs[i].append(tok)
        tokens = torch.cat([tokens, step_tokens[:, None]], dim=1)
    return outs


class ModelStep:
    """Next-token log-probabilities from a model, optionally mixed with kNN retrieval."""

    def __init__(self, model, src, datastore=None, knn_k=8, lam=0.5, kernel=None):
        self.model = model
        self.mem, self.pad = model.encode(src)
        self.datastore = datastore
        self.knn_k = knn_k if datastore is None else min(knn_k, len(datastore))
        self.lam = check_probability(lam, "lambda")
        self.kernel = kernel or KernelSpec()

    def __call__(self, prefixes, owners):
        h = self.model.decode_states(self.mem[owners], self.pad[owners], prefixes)[:, -1]
        logp = torch.log_softmax(self.model.logits(h), dim=-1)
        if self.datastore is None:
            return logp
        H = h.double().numpy()
        ids, _ = self.datastore.search(H, self.knn_k)
        keys, values = self.datastore.gather(ids)
        p_knn = knn_probs_dense(self.kernel, H, keys, values, logp.shape[1])
        mixed = (1.0 - self.lam) * logp.double().exp().numpy() + self.lam * p_knn
        with np.errstate(divide="ignore"):
            return torch.from_numpy(np.log(mixed))


def pad_sources(sources):
    S = max(len(s) for s in sources)
    src = torch.full((len(sources), S), PAD_ID, dtype=torch.long)
    for i, s in enumerate(sources):
        src[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return src


def translate(model, sources, strategy=None, max_len=None, batch_size=32, datastore=None, knn_k=8, lam=0.5, kernel=None):
    """Decode a list of source id sequences; ``strategy`` is a Beam or GREEDY."""
    strategy = Beam() if strategy is None else strategy
    cfg = model.cfg
    max_len = max_len or cfg.max_len
    sources = [check_token_ids(s, cfg.vocab_size, "source").tolist() for s in sources]
    for s in sources:
        if not s:
            raise InputError("source sequence is empty")
        if len(s) > cfg.max_len:
            raise InputError(f"source length {len(s)} exceeds max_len {cfg.max_len}")
    out = []
    with torch.no_grad():
        for lo in range(0, len(sources), batch_size):
            chunk = sources[lo : lo + batch_size]
            step = ModelStep(model, pad_sources(chunk), datastore, knn_k, lam, kernel)
            if strategy == GREEDY:
                out.extend(greedy_search(step, len(chunk), max_len))
            else:
                out.extend(beam_search(step, len(chunk), max_len, strategy.beam_size, strategy.length_penalty))
    return out


def decode(model, source, strategy=None, **kwargs):
    return translate(model, [source], strategy, **kwargs)[0]
