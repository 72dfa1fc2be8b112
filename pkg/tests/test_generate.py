import itertools
import math

import numpy as np
import pytest
import torch
from torch import nn

from quantrec.data import Modality
from quantrec.generate import (CodeTrie, RankedList, beam_search, beam_search_batch, build_trie, normalize_scores,
                               normalized, read_ranked, rerank, score_items, write_ranked)
from quantrec.quantlang import ItemCodeTable, build_vocabulary
from quantrec.seq2seq import ModelConfig, build_model

from oracles import teacher_forced_scores


def random_code_table(n_items, levels, k, seed=0):
    rng = np.random.default_rng(seed)
    all_codes = list(itertools.product(range(k), repeat=levels))
    codes = {}
    for m in Modality:
        picks = rng.choice(len(all_codes), size=n_items, replace=False)
        codes[m] = {f"i{n}": all_codes[p] for n, p in enumerate(picks)}
    return ItemCodeTable(levels, k, codes)


class FixedLogits(nn.Module):
    """Next-token distribution looked up from the decoder prefix alone."""

    def __init__(self, vocab_size, table):
        super().__init__()
        self.config = ModelConfig(vocab_size=vocab_size)
        self.table = table

    def encode(self, src):
        return torch.zeros(src.shape[0], 1, 1), torch.ones(src.shape[0], 1, 1, 1, dtype=torch.bool)

    def decode(self, dec, memory, allowed):
        out = torch.full((dec.shape[0], dec.shape[1], self.config.vocab_size), -1e9, dtype=torch.float64)
        for b, row in enumerate(dec.tolist()):
            for tok, p in self.table[tuple(row[1:])].items():
                out[b, -1, tok] = math.log(p)
        return out


def test_trie_single_item_and_counts():
    vocab = build_vocabulary(3, 4, 6)
    one = ItemCodeTable(3, 4, {Modality.TEXT: {"x": (1, 2, 3)}})
    trie = build_trie(one, "text", vocab)
    assert len(trie) == 1 and list(trie.leaves()) == [(tuple(vocab.encode_code(Modality.TEXT, (1, 2, 3))), "x")]
    for seed in range(5):
        table = random_code_table(20, 3, 4, seed)
        trie = build_trie(table, "image", vocab)
        assert len(trie) == 20 == len(list(trie.leaves()))
        present = {tuple(vocab.encode_code(Modality.IMAGE, c)) for c in table.codes[Modality.IMAGE].values()}
        for code in itertools.product(range(4), repeat=3):
            ids = tuple(vocab.encode_code(Modality.IMAGE, code))
            assert (ids in trie) == (ids in present)


def test_trie_rejects_shared_codes():
    trie = CodeTrie(2, Modality.TEXT)
    trie.insert([3, 7], "a")
    with pytest.raises(ValueError):
        trie.insert([3, 7], "b")


def test_toy_model_top2_matches_hand_enumeration():
    # tokens 3/4 at level one, 5/6 at level two
    table = {(): {3: 0.6, 4: 0.4}, (3,): {5: 0.55, 6: 0.45}, (4,): {5: 0.9, 6: 0.1}}
    model = FixedLogits(7, table)
    trie = CodeTrie(2, Modality.TEXT)
    for item, path in {"a": (3, 5), "b": (3, 6), "c": (4, 5), "d": (4, 6)}.items():
        trie.insert(path, item)
    trie.finalize()
    top2 = beam_search(model, [3], trie, beam_size=2)
    assert top2.items == ["c", "a"]
    assert top2.scores == pytest.approx([math.log(0.36), math.log(0.33)])
    assert beam_search(model, [3], trie, beam_size=1).items == ["a"]


def test_single_item_trie_always_returned():
    model = build_model(ModelConfig.desk(40, seed=1))
    trie = CodeTrie(2, Modality.TEXT)
    trie.insert([5, 9], "only")
    trie.finalize()
    for src in ([3, 4], [10, 11, 12]):
        assert beam_search(model, src, trie, beam_size=5).items == ["only"]


@pytest.mark.parametrize("seed", [0, 1])
def test_beam_equals_exhaustive_enumeration(seed):
    vocab = build_vocabulary(3, 4, 6)
    table = random_code_table(40, 3, 4, seed)
    trie = build_trie(table, "text", vocab)
    model = build_model(ModelConfig.desk(len(vocab), seed=seed), dtype=torch.float64)
    src = [int(x) for x in np.random.default_rng(seed).integers(3, len(vocab), size=12)]
    beam = beam_search(model, src, trie, beam_size=40)
    paths = dict(trie.leaves())
    oracle = teacher_forced_scores(model, src, list(paths))
    expected = RankedList(list(zip(paths.values(), oracle)))
    assert beam.items == expected.items
    np.testing.assert_allclose(beam.scores, expected.scores, rtol=0, atol=1e-9)
    assert score_items(model, src, trie).items == expected.items


def test_small_beam_outputs_are_valid_items():
    vocab = build_vocabulary(3, 8, 6)
    table = random_code_table(100, 3, 8, seed=3)
    trie = build_trie(table, "image", vocab)
    model = build_model(ModelConfig.desk(len(vocab), seed=3))
    rng = np.random.default_rng(0)
    inputs = [[int(x) for x in rng.integers(3, len(vocab), size=int(rng.integers(4, 20)))] for _ in range(10)]
    items = set(table.codes[Modality.IMAGE])
    lists = beam_search_batch(model, inputs, trie, beam_size=7, batch_size=3)
    for lst in lists:
        assert len(lst) == 7 and set(lst.items) <= items
    # batching does not change results
    assert [l.items for l in lists] == [beam_search(model, x, trie, beam_size=7).items for x in inputs]
    with pytest.raises(ValueError):
        beam_search(model, inputs[0], trie, beam_size=0)


def test_normalize_scores():
    assert normalize_scores([-3.2]).tolist() == [1.0]
    assert normalize_scores([-1.0, -1.0, -1.0]).tolist() == [1.0, 1.0, 1.0]
    rng = np.random.default_rng(0)
    for _ in range(100):
        lp = rng.normal(scale=5, size=20)
        s = normalize_scores(lp)
        assert (np.argsort(-s, kind="stable") == np.argsort(-lp, kind="stable")).all()
        assert s.max() == 1.0 and s.min() >= 0
    with pytest.raises(ValueError):
        normalize_scores([])
    with pytest.raises(ValueError):
        normalize_scores([0.0, -np.inf])


def test_rerank_examples():
    fused = rerank(RankedList([("x", 0.5), ("y", 0.7)]), RankedList([("x", 0.5), ("z", 0.2)]))
    assert dict(fused.entries) == {"x": 1.5, "y": 0.7, "z": 0.2}
    assert fused.items == ["x", "y", "z"]
    with pytest.raises(ValueError):
        rerank(RankedList([("x", -2.0)]), RankedList([("x", 0.1)]))


def test_rerank_is_idempotent_on_fused_items():
    t = normalized(RankedList([("a", -1.0), ("b", -2.0), ("c", -0.5)]))
    v = normalized(RankedList([("b", -0.1), ("d", -3.0)]))
    fused = rerank(t, v)
    singles = RankedList([(i, s) for i, s in fused.entries if s <= 1])
    assert rerank(singles, RankedList([])).entries == singles.entries


def test_ranked_list_order_and_file_roundtrip(tmp_path):
    r = RankedList([("b", 0.5), ("a", 0.5), ("c", 0.9)], tag="NIG_Text")
    assert r.items == ["c", "a", "b"] and r.rank_of("b") == 3 and r.rank_of("zz") is None
    with pytest.raises(ValueError):
        RankedList([("a", 1.0), ("a", 0.5)])
    write_ranked([("u1", r), ("u2", RankedList([("x:y", -1e-17)], tag="fused"))], tmp_path / "r.tsv")
    back = read_ranked(tmp_path / "r.tsv")
    assert back[0][0] == "u1" and back[0][1].entries == r.entries and back[0][1].tag == "NIG_Text"
    assert back[1][1].entries == [("x:y", -1e-17)]
