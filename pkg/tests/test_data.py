import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inkmt.data import (
    SPECIALS,
    ParallelCorpus,
    ToyTask,
    Vocabulary,
    ingest,
    load_toy_task,
    make_toy_corpora,
    read_tsv,
    tokenize,
    write_tsv,
)
from inkmt.validation import FormatError, InputError


def test_vocabulary_orders_by_frequency_then_token():
    v = Vocabulary.build([["b", "a", "c"], ["a", "c"], ["a"]])
    assert v.tokens == list(SPECIALS) + ["a", "c", "b"]
    assert v.frequency[4:] == [3, 2, 1]
    assert v.index("zzz") == v.unk


def test_vocabulary_min_count():
    v = Vocabulary.build([["a", "a", "b"]], min_count=2)
    assert "b" not in v and v.encode(["b"]) == [v.unk]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.text("abcdefg", min_size=1, max_size=3), min_size=1, max_size=6), min_size=1, max_size=8))
def test_encode_decode_round_trip(sentences):
    v = Vocabulary.build(sentences)
    for s in sentences:
        assert v.decode(v.encode(s)) == s


def test_decode_stops_at_eos_and_drops_specials():
    v = Vocabulary.build([["x", "y"]])
    assert v.decode([1, 4, 3, 5, 2, 4]) == ["x", "y"]
    assert v.decode([4, 2], strip_special=False) == ["x", "</s>"]


def test_vocabulary_file_round_trip(tmp_path):
    v = Vocabulary.build([["a", "b", "a"]])
    v.save(tmp_path / "v.tsv")
    w = Vocabulary.load(tmp_path / "v.tsv")
    assert w.tokens == v.tokens and w.digest() == v.digest()
    (tmp_path / "bad.tsv").write_text("<pad>\t0\n<s>\tx\n")
    with pytest.raises(FormatError, match=":2:"):
        Vocabulary.load(tmp_path / "bad.tsv")


def test_vocabulary_rejects_bad_tables():
    with pytest.raises(InputError):
        Vocabulary(["a", "b"])
    with pytest.raises(InputError):
        Vocabulary(list(SPECIALS) + ["a", "a"])


def test_tokenize():
    assert tokenize(" a  b\tc ") == ["a", "b", "c"]
    assert tokenize("ab c", char_level=True) == ["a", "b", "c"]


def test_read_tsv_reports_line_numbers(tmp_path):
    path = tmp_path / "c.tsv"
    path.write_text("a b\tx y\n\nc\t\n")
    with pytest.raises(InputError, match="line 3"):
        read_tsv(path)
    path.write_text("a b x y\n")
    with pytest.raises(InputError, match="line 1"):
        read_tsv(path)


def test_ingest_shares_vocabulary_across_files(tmp_path):
    write_tsv(tmp_path / "a.tsv", [(["a", "b"], ["X"])])
    write_tsv(tmp_path / "b.tsv", [(["c"], ["Y", "Z"])])
    corpus, vocab = ingest(tmp_path / "a.tsv", extra_paths=[tmp_path / "b.tsv"])
    assert {"a", "b", "c", "X", "Y", "Z"} <= set(vocab.tokens)
    assert corpus.line_numbers == [1]
    other, same = ingest(tmp_path / "b.tsv", vocab=vocab)
    assert same is vocab and other.pairs == [(vocab.encode(["c"]), vocab.encode(["Y", "Z"]))]


def test_target_positions_count_eos():
    assert ParallelCorpus([([4], [5, 6]), ([4], [7])]).n_target_positions() == 5


# --- toy task --------------------------------------------------------------------------


def test_toy_task_rules():
    task = ToyTask(seed=3)
    rng = np.random.default_rng(0)
    plain = next(w for w in task.core if w not in task.modifiers and w not in task.shifted and task.lex[w] not in task.synonyms)
    mod = sorted(task.modifiers)[0]
    assert task.translate([plain], "a", rng) == [task.lex[plain]]
    out = task.translate([mod, plain], "a", rng)
    assert out[0] == task.lex[plain] and out[1] in (task.lex[mod], task.lex[mod] + "x")
    shifted = next(iter(task.shifted))
    assert task.translate([shifted], "b", rng)[0].startswith("Y")
    assert not task.translate([shifted], "a", rng)[0].startswith("Y")


def test_toy_corpora_are_reproducible_and_split_by_domain():
    a = make_toy_corpora(1, n_general=50, n_domain_train=20, n_domain_dev=10)
    b = make_toy_corpora(1, n_general=50, n_domain_train=20, n_domain_dev=10)
    assert a == b
    general, train, dev = a
    assert not any(w.startswith("b") for s, _ in general for w in s)
    assert any(w.startswith("b") for s, _ in train for w in s)
    assert [len(x) for x in a] == [50, 20, 10]


def test_general_mix_adds_second_domain_sentences():
    general, _, _ = make_toy_corpora(0, n_general=200, n_domain_train=5, n_domain_dev=5, general_mix=0.1)
    with_b = sum(any(w.startswith("b") for w in s) for s, _ in general)
    assert 0 < with_b <= 20


def test_load_toy_task_encodes_with_one_vocabulary():
    vocab, general, train, dev = load_toy_task(0, n_general=40, n_domain_train=10, n_domain_dev=5)
    assert all(3 not in s and 3 not in t for corpus in (general, train, dev) for s, t in corpus)
