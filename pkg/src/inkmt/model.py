"""Small pre-norm encoder-decoder translation model with residual adapters."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .distributions import VocabDistribution, softmax
from .validation import FormatError, InputError, NumericError, check_pair, check_vector

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 128
    adapter_inner: int = None
    max_len: int = 64
    adapter_activation: str = "relu"

    def __post_init__(self):
        if self.adapter_inner is None:
            self.adapter_inner = max(1, self.d_model // 2)
        for name in ("vocab_size", "d_model", "n_enc_layers", "n_dec_layers", "n_heads", "d_ffn", "adapter_inner", "max_len"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise InputError("d_model must be divisible by n_heads")
        if self.adapter_activation not in ACTIVATIONS:
            raise InputError(f"unknown adapter activation {self.adapter_activation!r}")


ACTIVATIONS = {"relu": F.relu, "identity": lambda x: x}


def sinusoid_table(max_len, d):
    pos = np.arange(max_len)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    table = np.zeros((max_len, d))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return torch.from_numpy(table)


class MultiHeadAttention(nn.Module):
    def __init__(self, d, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, mem, blocked):
        # blocked: bool (B, Tq, Tk), True where attention is not allowed
        B, Tq, d = x.shape
        Tk = mem.shape[1]
        h, dh = self.n_heads, d // self.n_heads
        q = self.q(x).view(B, Tq, h, dh).transpose(1, 2)
        k = self.k(mem).view(B, Tk, h, dh).transpose(1, 2)
        v = self.v(mem).view(B, Tk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(blocked[:, None], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        return self.o((attn @ v).transpose(1, 2).reshape(B, Tq, d))


class FeedForward(nn.Module):
    def __init__(self, d, d_ffn):
        super().__init__()
        self.fc1 = nn.Linear(d, d_ffn)
        self.fc2 = nn.Linear(d_ffn, d)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.ln_attn = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln_ffn = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn)

    def forward(self, x, blocked):
        y = self.ln_attn(x)
        x = x + self.attn(y, y, blocked)
        return x + self.ffn(self.ln_ffn(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.ln_self = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln_cross = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln_ffn = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn)

    def forward(self, x, mem, self_blocked, cross_blocked):
        y = self.ln_self(x)
        x = x + self.self_attn(y, y, self_blocked)
        x = x + self.cross_attn(self.ln_cross(x), mem, cross_blocked)
        return x + self.ffn(self.ln_ffn(x))


class Adapter(nn.Module):
    """Residual bottleneck: z + up(act(down(layer_norm(z)))).

    The up-projection starts at zero so a fresh adapter is the identity map.
    """

    def __init__(self, d, inner, activation="relu"):
        super().__init__()
        self.ln = nn.LayerNorm(d)
        self.w1 = nn.Linear(d, inner)
        self.w2 = nn.Linear(inner, d)
        self.activation = activation
        nn.init.zeros_(self.w2.weight)
        nn.init.zeros_(self.w2.bias)

    def forward(self, z):
        return z + self.w2(ACTIVATIONS[self.activation](self.w1(self.ln(z))))


def adapter_forward(layer, z):
    """Apply one adapter to a single vector (numpy or tensor)."""
    d = layer.ln.normalized_shape[0]
    dtype = layer.w1.weight.dtype
    if isinstance(z, torch.Tensor):
        if z.shape[-1] != d:
            raise InputError(f"adapter input width {z.shape[-1]} != {d}")
        return layer(z)
    z = check_vector(z, d, "z")
    with torch.no_grad():
        return layer(torch.as_tensor(z, dtype=dtype)).numpy()


class Seq2Seq(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.emb = nn.Embedding(cfg.vocab_size, d)
        nn.init.normal_(self.emb.weight, std=d**-0.5)
        self.register_buffer("pos", sinusoid_table(cfg.max_len + 1, d), persistent=False)
        self.enc = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.enc_norm = nn.LayerNorm(d)
        self.dec = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.dec_norm = nn.LayerNorm(d)
        self.adapters = None

    # --- adapters ---------------------------------------------------------

    def add_adapters(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        cfg = self.cfg
        dtype = self.emb.weight.dtype

        def make():
            a = Adapter(cfg.d_model, cfg.adapter_inner, cfg.adapter_activation).to(dtype)
            bound = 1.0 / math.sqrt(cfg.d_model)
            with torch.no_grad():
                a.w1.weight.uniform_(-bound, bound, generator=g)
                a.w1.bias.uniform_(-bound, bound, generator=g)
            return a

        self.adapters = nn.ModuleDict(
            {
                "enc": nn.ModuleList(make() for _ in range(cfg.n_enc_layers)),
                "dec": nn.ModuleList(make() for _ in range(cfg.n_dec_layers)),
            }
        )
        return self

    def remove_adapters(self):
        self.adapters = None
        return self

    def base_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("adapters.")]

    def adapter_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n.startswith("adapters.")]

    def freeze_base(self):
        for _, p in self.base_parameters():
            p.requires_grad_(False)
        return self

    # --- forward passes ---------------------------------------------------

    def _embed(self, ids):
        x = self.emb(ids) * math.sqrt(self.cfg.d_model)
        return x + self.pos[: ids.shape[1]].to(x.dtype)

    def encode(self, src):
        """src: (B, S) long, right-padded with PAD_ID."""
        pad = src.eq(PAD_ID)
        blocked = pad[:, None, :].expand(-1, src.shape[1], -1)
        x = self._embed(src)
        for i, layer in enumerate(self.enc):
            x = layer(x, blocked)
            if self.adapters is not None:
                x = self.adapters["enc"][i](x)
        return self.enc_norm(x), pad

    def decode_states(self, mem, src_pad, tgt_in):
        """Final decoder representations for every prefix position, (B, T, d)."""
        T = tgt_in.shape[1]
        causal = torch.ones(T, T, dtype=torch.bool, device=tgt_in.device).triu(1)
        self_blocked = causal[None].expand(tgt_in.shape[0], -1, -1)
        cross_blocked = src_pad[:, None, :].expand(-1, T, -1)
        x = self._embed(tgt_in)
        for i, layer in enumerate(self.dec):
            x = layer(x, mem, self_blocked, cross_blocked)
            if self.adapters is not None:
                x = self.adapters["dec"][i](x)
        return self.dec_norm(x)

    def logits(self, h):
        return h @ self.emb.weight.T

    def forward(self, src, tgt_in):
        mem, pad = self.encode(src)
        return self.decode_states(mem, pad, tgt_in)


def collate(pairs, device=None):
    """Pad a list of (src, tgt) id lists.

    Returns (src, tgt_in, tgt_out, tgt_mask) where tgt_in is bos-prefixed,
    tgt_out is eos-suffixed and tgt_mask flags real target positions.
    """
    B = len(pairs)
    S = max(len(s) for s, _ in pairs)
    T = max(len(t) for _, t in pairs) + 1
    src = torch.full((B, S), PAD_ID, dtype=torch.long)
    tgt_in = torch.full((B, T), PAD_ID, dtype=torch.long)
    tgt_out = torch.full((B, T), PAD_ID, dtype=torch.long)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
        tgt_in[i, 0] = BOS_ID
        tgt_in[i, 1 : len(t) + 1] = torch.as_tensor(t, dtype=torch.long)
        tgt_out[i, : len(t)] = torch.as_tensor(t, dtype=torch.long)
        tgt_out[i, len(t)] = EOS_ID
    mask = torch.arange(T)[None, :] < torch.as_tensor([len(t) + 1 for _, t in pairs])[:, None]
    return src, tgt_in, tgt_out, mask


def teacher_forced_states(model, pairs):
    """Flattened representations for all target positions of a batch.

    Returns (H, gold) with H of shape (sum |Y|, d) in pair-then-step order.
    """
    src, tgt_in, tgt_out, mask = collate(pairs)
    states = model(src, tgt_in)
    return states[mask], tgt_out[mask]


def forward_teacher_forced(model, src, tgt):
    """One representation per target position (eos included), as a numpy array."""
    cfg = model.cfg
    src, tgt = check_pair(src, tgt, cfg.vocab_size, cfg.max_len)
    with torch.no_grad():
        h, _ = teacher_forced_states(model, [(src.tolist(), tgt.tolist())])
    return h.numpy()


def output_distribution(h, emb):
    """Softmax of inner products between a representation and every embedding row."""
    emb = emb.detach().numpy() if isinstance(emb, torch.Tensor) else np.asarray(emb, dtype=np.float64)
    h = np.asarray(h.detach().numpy() if isinstance(h, torch.Tensor) else h, dtype=np.float64)
    if h.ndim != 1:
        raise InputError("h must be a single vector")
    if not np.all(np.isfinite(h)):
        raise NumericError("representation has non-finite entries")
    if h.shape[0] != emb.shape[1]:
        raise InputError(f"representation width {h.shape[0]} != embedding width {emb.shape[1]}")
    return VocabDistribution(np.arange(emb.shape[0]), softmax(emb @ h))


def gradient(params, loss_closure):
    """Reverse-mode gradients of a scalar loss w.r.t. named parameters.

    ``params`` is a module or an iterable of (name, tensor) pairs.
    """
    named = list(params.named_parameters() if isinstance(params, nn.Module) else params)
    tensors = [p for _, p in named]
    loss = loss_closure()
    if not torch.isfinite(loss).all():
        raise NumericError(f"loss is not finite: {loss.item()}")
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in named}
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for (n, p), g in zip(named, grads)}


# --- checkpoint container -----------------------------------------------------

CKPT_MAGIC = b"INKM"
CKPT_VERSION = 1


def save_tensors(path, tensors, config, vocab_digest, kind="model"):
    """Header (JSON) then each tensor as little-endian float32, in header order."""
    entries = [{"name": n, "shape": list(t.shape)} for n, t in tensors.items()]
    header = json.dumps(
        {"format_version": CKPT_VERSION, "kind": kind, "config": asdict(config), "vocab_sha256": vocab_digest, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for t in tensors.values():
            fh.write(t.detach().cpu().numpy().astype("<f4").tobytes())


def load_tensors(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    offset = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + 4 * n
        if end > len(blob):
            raise FormatError(f"{path}: truncated tensor data at {entry['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset = end
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return header, tensors


def save_model(model, path, vocab_digest):
    save_tensors(path, dict(model.base_parameters()), model.cfg, vocab_digest, kind="model")


def save_adapters(model, path, vocab_digest):
    if model.adapters is None:
        raise InputError("model has no adapters to save")
    save_tensors(path, dict(model.adapter_parameters()), model.cfg, vocab_digest, kind="adapters")


def _assign(model, tensors, expected, path):
    if set(tensors) != set(expected):
        missing, extra = set(expected) - set(tensors), set(tensors) - set(expected)
        raise FormatError(f"{path}: tensor names mismatch (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    with torch.no_grad():
        for name, p in expected.items():
            if tuple(tensors[name].shape) != tuple(p.shape):
                raise FormatError(f"{path}: {name} has shape {tuple(tensors[name].shape)}, expected {tuple(p.shape)}")
            p.copy_(tensors[name].to(p.dtype))


def load_model(path, vocab_digest=None, dtype=torch.float32):
    header, tensors = load_tensors(path)
    if header.get("kind") != "model":
        raise FormatError(f"{path}: not a model checkpoint")
    if vocab_digest is not None and header["vocab_sha256"] != vocab_digest:
        raise FormatError(f"{path}: checkpoint was trained with a different vocabulary")
    model = Seq2Seq(ModelConfig(**header["config"])).to(dtype)
    _assign(model, tensors, dict(model.base_parameters()), path)
    return model


def load_adapters(model, path, vocab_digest=None):
    header, tensors = load_tensors(path)
    if header.get("kind") != "adapters":
        raise FormatError(f"{path}: not an adapter file")
    if vocab_digest is not None and header["vocab_sha256"] != vocab_digest:
        raise FormatError(f"{path}: adapters were trained with a different vocabulary")
    if ModelConfig(**header["config"]) != model.cfg:
        raise FormatError(f"{path}: adapter file was built for a different model configuration")
    if model.adapters is None:
        model.add_adapters()
    _assign(model, tensors, dict(model.adapter_parameters()), path)
    return model
