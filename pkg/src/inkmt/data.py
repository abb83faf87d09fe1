"""Vocabulary, parallel corpora and the synthetic two-domain toy task."""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import FormatError, InputError

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


@dataclass
class Vocabulary:
    """Dense id <-> token map. Non-special ids are ordered by descending frequency."""

    tokens: list
    frequency: list = None

    def __post_init__(self):
        if self.frequency is None:
            self.frequency = [0] * len(self.tokens)
        if len(self.frequency) != len(self.tokens):
            raise InputError("tokens and frequency lengths differ")
        if len(set(self.tokens)) != len(self.tokens):
            raise InputError("vocabulary tokens must be distinct")
        if list(self.tokens[:4]) != list(SPECIALS):
            raise InputError(f"vocabulary must start with {SPECIALS}")
        if any(f < 0 for f in self.frequency):
            raise InputError("frequencies must be non-negative")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    pad = property(lambda self: 0)
    bos = property(lambda self: 1)
    eos = property(lambda self: 2)
    unk = property(lambda self: 3)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    def index(self, token):
        return self._index.get(token, self.unk)

    def encode(self, words):
        return [self.index(w) for w in words]

    def decode(self, ids, strip_special=True):
        out = []
        for i in ids:
            if strip_special and i == self.eos:
                break
            if strip_special and i < len(SPECIALS):
                continue
            out.append(self.tokens[i])
        return out

    def digest(self):
        """Stable content hash used to pair checkpoints with vocabularies."""
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    @classmethod
    def build(cls, sentences, min_count=1):
        counts = Counter(w for sent in sentences for w in sent)
        for s in SPECIALS:
            counts.pop(s, None)
        kept = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        return cls(list(SPECIALS) + kept, [0] * len(SPECIALS) + [counts[w] for w in kept])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok, freq in zip(self.tokens, self.frequency):
                fh.write(f"{tok}\t{freq}\n")

    @classmethod
    def load(cls, path):
        tokens, freqs = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2 or not parts[0]:
                    raise FormatError(f"{path}:{lineno}: expected 'token<TAB>frequency'")
                try:
                    freqs.append(int(parts[1]))
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: frequency is not an integer") from None
                tokens.append(parts[0])
        return cls(tokens, freqs)


@dataclass
class ParallelCorpus:
    pairs: list
    path: str = None
    line_numbers: list = field(default=None)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @property
    def sources(self):
        return [s for s, _ in self.pairs]

    @property
    def targets(self):
        return [t for _, t in self.pairs]

    def n_target_positions(self):
        # +1 per pair: the eos position is a prediction target too
        return sum(len(t) + 1 for _, t in self.pairs)


def tokenize(text, char_level=False):
    if char_level:
        return [c for c in text if not c.isspace()]
    return text.split()


def read_tsv(path, char_level=False):
    """Read 'source<TAB>target' lines into token lists; errors cite the line number."""
    pairs, lines = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.count("\t") != 1:
                raise InputError(f"{path}: line {lineno}: expected exactly one tab separating source and target")
            src, tgt = (tokenize(side, char_level) for side in line.split("\t"))
            if not src or not tgt:
                raise InputError(f"{path}: line {lineno}: empty source or target side")
            pairs.append((src, tgt))
            lines.append(lineno)
    return pairs, lines


def ingest(path, vocab=None, min_count=1, char_level=False, extra_paths=()):
    """Load a tab-separated corpus, building a shared vocabulary if none is given.

    ``extra_paths`` contribute to the vocabulary counts only.
    """
    raw, lines = read_tsv(path, char_level)
    if vocab is None:
        sentences = [s for pair in raw for s in pair]
        for extra in extra_paths:
            sentences += [s for pair in read_tsv(extra, char_level)[0] for s in pair]
        vocab = Vocabulary.build(sentences, min_count=min_count)
    pairs = [(vocab.encode(s), vocab.encode(t)) for s, t in raw]
    return ParallelCorpus(pairs, str(path), lines), vocab


def write_tsv(path, word_pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in word_pairs:
            fh.write(" ".join(src) + "\t" + " ".join(tgt) + "\n")


# --- synthetic two-domain task -------------------------------------------------


@dataclass
class ToyTaskSpec:
    n_core: int = 60
    n_domain: int = 20
    n_modifiers: int = 12
    n_shifted: int = 10
    n_synonym: int = 8
    synonym_prob: float = 0.3
    min_len: int = 4
    max_len: int = 9
    zipf: float = 1.1
    domain_word_rate: float = 0.35
    label_noise: float = 0.0


def _zipf_weights(n, a):
    w = 1.0 / np.arange(1, n + 1) ** a
    return w / w.sum()


class ToyTask:
    """Word-level translation with a shared core lexicon and two domains.

    Source words map to target words one-to-one, except that modifiers swap
    with the following word, some target words have a random synonym, and in
    the second domain a block of core words takes a different translation.
    Each domain also owns words that never occur in the other.
    """

    def __init__(self, spec=None, seed=0):
        self.spec = spec or ToyTaskSpec()
        sp = self.spec
        rng = np.random.default_rng(seed)
        self.core = [f"s{i}" for i in range(sp.n_core)]
        self.dom = {d: [f"{d}{i}" for i in range(sp.n_domain)] for d in ("a", "b")}
        perm = rng.permutation(sp.n_core)
        self.lex = {w: f"T{perm[i]}" for i, w in enumerate(self.core)}
        for d in ("a", "b"):
            for i, w in enumerate(self.dom[d]):
                self.lex[w] = f"{d.upper()}{i}"
        self.modifiers = set(rng.choice(self.core, sp.n_modifiers, replace=False))
        rest = [w for w in self.core if w not in self.modifiers]
        self.shifted = {w: f"Y{i}" for i, w in enumerate(rng.choice(rest, sp.n_shifted, replace=False))}
        targets = sorted(set(self.lex.values()))
        self.synonyms = {t: t + "x" for t in rng.choice(targets, sp.n_synonym, replace=False)}
        self.core_p = _zipf_weights(sp.n_core, sp.zipf)[rng.permutation(sp.n_core)]
        self.dom_p = _zipf_weights(sp.n_domain, sp.zipf)

    def translate(self, src, domain, rng):
        out = []
        for w in src:
            t = self.shifted.get(w) if domain == "b" else None
            t = t or self.lex[w]
            if t in self.synonyms and rng.random() < self.spec.synonym_prob:
                t = self.synonyms[t]
            out.append(t)
        i = 0
        while i < len(src) - 1:
            if src[i] in self.modifiers and src[i + 1] not in self.modifiers:
                out[i], out[i + 1] = out[i + 1], out[i]
                i += 2
            else:
                i += 1
        return out

    def sample(self, n, domain, seed, noise=0.0):
        """``noise`` is the chance that a target token is swapped for a random one of the domain."""
        rng = np.random.default_rng(seed)
        sp = self.spec
        lexicon = sorted({self.lex[w] for w in self.core + self.dom[domain]})
        pairs = []
        for _ in range(n):
            length = int(rng.integers(sp.min_len, sp.max_len + 1))
            src = []
            for _ in range(length):
                if rng.random() < sp.domain_word_rate:
                    src.append(self.dom[domain][rng.choice(sp.n_domain, p=self.dom_p)])
                else:
                    src.append(self.core[rng.choice(sp.n_core, p=self.core_p)])
            tgt = self.translate(src, domain, rng)
            if noise:
                tgt = [lexicon[rng.integers(len(lexicon))] if rng.random() < noise else t for t in tgt]
            pairs.append((src, tgt))
        return pairs


def make_toy_corpora(seed=0, n_general=4000, n_domain_train=800, n_domain_dev=200, spec=None, general_mix=0.0):
    """Word-level pairs for (general, domain-train, domain-dev).

    ``general_mix`` is the share of general-corpus sentences drawn from the
    second domain, so the base model sees its words only rarely.
    """
    task = ToyTask(spec, seed)
    n_mixed = int(round(general_mix * n_general))
    general = task.sample(n_general - n_mixed, "a", seed + 1) + task.sample(n_mixed, "b", seed + 4)
    order = np.random.default_rng(seed + 5).permutation(len(general))
    return (
        [general[i] for i in order],
        task.sample(n_domain_train, "b", seed + 2, noise=task.spec.label_noise),
        task.sample(n_domain_dev, "b", seed + 3),
    )


def encode_pairs(word_pairs, vocab):
    return ParallelCorpus([(vocab.encode(s), vocab.encode(t)) for s, t in word_pairs])


def load_toy_task(seed=0, **sizes):
    """Encoded toy corpora with one shared vocabulary built over all three splits."""
    general, train, dev = make_toy_corpora(seed, **sizes)
    vocab = Vocabulary.build([s for pairs in (general, train, dev) for p in pairs for s in p])
    return vocab, encode_pairs(general, vocab), encode_pairs(train, vocab), encode_pairs(dev, vocab)


def bundled_toy_dir():
    return Path(__file__).parent / "toydata"


TOY_FILES = ("general.tsv", "domain_train.tsv", "domain_dev.tsv")
TOY_GENERAL_MIX = 0.05


def write_toy_task(directory, seed=0, general_mix=TOY_GENERAL_MIX, **sizes):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, pairs in zip(TOY_FILES, make_toy_corpora(seed, general_mix=general_mix, **sizes)):
        write_tsv(directory / name, pairs)
    return directory


def load_bundled_toy(directory=None):
    """(vocab, general, domain_train, domain_dev) read from the bundled TSV files."""
    directory = Path(directory) if directory else bundled_toy_dir()
    paths = [directory / name for name in TOY_FILES]
    general, vocab = ingest(paths[0], extra_paths=paths[1:])
    train, _ = ingest(paths[1], vocab)
    dev, _ = ingest(paths[2], vocab)
    return vocab, general, train, dev
