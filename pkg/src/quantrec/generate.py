"""Trie-constrained beam search over item code tokens, and two-list score fusion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Modality
from .quantlang import ItemCodeTable, Vocabulary
from .seq2seq import BOS_ID, PAD_ID, Seq2SeqModel


class TrieNode:
    __slots__ = ("children", "item", "child_ids")

    def __init__(self):
        self.children: dict[int, TrieNode] = {}
        self.item: str | None = None
        self.child_ids: np.ndarray | None = None


class CodeTrie:
    """Depth-L trie over code-token ids of one modality; leaves carry item ids."""

    def __init__(self, depth: int, modality: Modality):
        self.depth = depth
        self.modality = Modality(modality)
        self.root = TrieNode()
        self.n_items = 0

    def insert(self, token_ids, item: str) -> None:
        if len(token_ids) != self.depth:
            raise ValueError(f"expected {self.depth} tokens, got {len(token_ids)}")
        node = self.root
        for tok in token_ids:
            node = node.children.setdefault(int(tok), TrieNode())
        if node.item is not None:
            raise ValueError(f"items {node.item!r} and {item!r} share a code")
        node.item = item
        self.n_items += 1

    def finalize(self) -> CodeTrie:
        stack = [self.root]
        while stack:
            node = stack.pop()
            node.child_ids = np.array(sorted(node.children), dtype=np.int64)
            stack.extend(node.children.values())
        return self

    def lookup(self, token_ids) -> str | None:
        node = self.root
        for tok in token_ids:
            node = node.children.get(int(tok))
            if node is None:
                return None
        return node.item

    def __contains__(self, token_ids) -> bool:
        return len(token_ids) == self.depth and self.lookup(token_ids) is not None

    def __len__(self) -> int:
        return self.n_items

    def leaves(self):
        stack = [((), self.root)]
        while stack:
            prefix, node = stack.pop()
            if node.item is not None:
                yield prefix, node.item
            for tok, child in node.children.items():
                stack.append((prefix + (tok,), child))


def build_trie(code_table: ItemCodeTable, modality: Modality | str, vocab: Vocabulary,
               items=None) -> CodeTrie:
    modality = Modality(modality)
    table = code_table.codes[modality]
    trie = CodeTrie(code_table.levels, modality)
    for item in (table if items is None else items):
        trie.insert(vocab.encode_code(modality, table[item]), item)
    return trie.finalize()


@dataclass
class RankedList:
    """(item, score) pairs, descending by score with ties broken by item id."""
    entries: list[tuple[str, float]] = field(default_factory=list)
    tag: str = ""

    def __post_init__(self):
        items = [i for i, _ in self.entries]
        if len(set(items)) != len(items):
            raise ValueError("ranked list holds duplicate items")
        self.entries = sorted(((i, float(s)) for i, s in self.entries), key=lambda e: (-e[1], e[0]))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def items(self) -> list[str]:
        return [i for i, _ in self.entries]

    @property
    def scores(self) -> np.ndarray:
        return np.array([s for _, s in self.entries])

    def rank_of(self, item: str) -> int | None:
        for r, (i, _) in enumerate(self.entries, start=1):
            if i == item:
                return r
        return None


@dataclass
class BeamHypothesis:
    tokens: tuple[int, ...]
    logprob: float
    node: TrieNode | None = None

    @property
    def finished(self) -> bool:
        return self.node is not None and self.node.item is not None


@torch.no_grad()
def beam_search_batch(model: Seq2SeqModel, inputs, trie: CodeTrie, beam_size: int = 20,
                      constrained: bool = True, batch_size: int = 128) -> list[RankedList]:
    """Beam search over exactly ``trie.depth`` decoding steps for every input sequence.

    Hypothesis scores are sums of per-token log-softmax values over the full
    vocabulary. In constrained mode a hypothesis may only extend to children of
    its trie node; unconstrained results that are not items are dropped.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if len(trie) == 0:
        raise ValueError("empty trie")
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(inputs), batch_size):
        out.extend(_search_chunk(model, inputs[start:start + batch_size], trie, beam_size, constrained))
    model.train(was_training)
    return out


def _search_chunk(model, inputs, trie, beam_size, constrained):
    n = len(inputs)
    width = max(len(x) for x in inputs)
    src = torch.full((n, width), PAD_ID, dtype=torch.long)
    for i, x in enumerate(inputs):
        src[i, :len(x)] = torch.as_tensor(list(x), dtype=torch.long)
    memory, src_allowed = model.encode(src)
    vocab_ids = np.arange(model.config.vocab_size)
    beams = [[BeamHypothesis((), 0.0, trie.root)] for _ in range(n)]
    for _ in range(trie.depth):
        owners = [b for b, hyps in enumerate(beams) for _ in hyps]
        flat = [h for hyps in beams for h in hyps]
        if not flat:
            break
        dec = torch.tensor([(BOS_ID,) + h.tokens for h in flat], dtype=torch.long)
        idx = torch.tensor(owners)
        logits = model.decode(dec, memory[idx], src_allowed[idx])[:, -1]
        logp = torch.log_softmax(logits.double(), dim=-1).numpy()
        new_beams = [[] for _ in range(n)]
        row = 0
        for b, hyps in enumerate(beams):
            cand_scores, cand_from, cand_tok = [], [], []
            for h in hyps:
                ids = h.node.child_ids if constrained else vocab_ids
                cand_scores.append(h.logprob + logp[row, ids])
                cand_from.append(np.full(len(ids), len(cand_from)))
                cand_tok.append(ids)
                row += 1
            if not cand_scores:
                continue
            scores = np.concatenate(cand_scores)
            frm = np.concatenate(cand_from)
            toks = np.concatenate(cand_tok)
            keep = np.argsort(-scores, kind="stable")[:beam_size]
            for j in keep:
                parent = hyps[frm[j]]
                tok = int(toks[j])
                node = parent.node.children.get(tok) if parent.node is not None else None
                new_beams[b].append(BeamHypothesis(parent.tokens + (tok,), float(scores[j]), node))
        beams = new_beams
    results = []
    for hyps in beams:
        entries = {}
        for h in hyps:
            item = h.node.item if h.node is not None else trie.lookup(h.tokens)
            if item is not None and item not in entries:
                entries[item] = h.logprob
        results.append(RankedList(list(entries.items())))
    return results


def beam_search(model: Seq2SeqModel, input_ids, trie: CodeTrie, beam_size: int = 20,
                constrained: bool = True) -> RankedList:
    return beam_search_batch(model, [input_ids], trie, beam_size, constrained)[0]


@torch.no_grad()
def score_items(model: Seq2SeqModel, input_ids, trie: CodeTrie) -> RankedList:
    """Teacher-forced log-probability of every item in the trie (exhaustive ranking)."""
    model.eval()
    paths = list(trie.leaves())
    src = torch.as_tensor(list(input_ids), dtype=torch.long)[None].repeat(len(paths), 1)
    dec = torch.tensor([(BOS_ID,) + p[:-1] for p, _ in paths], dtype=torch.long)
    logp = torch.log_softmax(model(src, dec).double(), dim=-1)
    tgt = torch.tensor([p for p, _ in paths], dtype=torch.long)
    totals = logp.gather(-1, tgt[..., None]).squeeze(-1).sum(-1).numpy()
    return RankedList([(item, float(s)) for (_, item), s in zip(paths, totals)])


def normalize_scores(logprobs) -> np.ndarray:
    """Softmax over the list, rescaled so the best entry scores exactly 1."""
    lp = np.asarray(logprobs, dtype=np.float64)
    if lp.size == 0:
        raise ValueError("cannot normalise an empty list")
    if not np.isfinite(lp).all():
        raise ValueError("log-probabilities must be finite")
    return np.exp(lp - lp.max())


def normalized(ranked: RankedList) -> RankedList:
    if not len(ranked):
        return RankedList([], ranked.tag)
    return RankedList(list(zip(ranked.items, normalize_scores(ranked.scores))), ranked.tag)


def rerank(text_list: RankedList, image_list: RankedList, tag: str = "fused") -> RankedList:
    """Fuse two normalised lists; items found in both get the mean score plus one."""
    for lst in (text_list, image_list):
        s = lst.scores
        if len(s) and (s.min() < 0 or s.max() > 1):
            raise ValueError("rerank expects scores normalised to [0, 1]")
    s_t = dict(text_list.entries)
    s_v = dict(image_list.entries)
    fused = {}
    for item in s_t.keys() | s_v.keys():
        if item in s_t and item in s_v:
            fused[item] = (s_t[item] + s_v[item]) / 2 + 1
        else:
            fused[item] = s_t[item] if item in s_t else s_v[item]
    return RankedList(list(fused.items()), tag)


def write_ranked(rows, path) -> None:
    """Rows of (user, RankedList) as ``<user>\\t<task>\\t<item>:<score>,...``."""
    with open(path, "w") as f:
        for user, ranked in rows:
            body = ",".join(f"{i}:{s!r}" for i, s in ranked.entries)
            f.write(f"{user}\t{ranked.tag}\t{body}\n")


def read_ranked(path) -> list[tuple[str, RankedList]]:
    rows = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            user, tag, body = line.rstrip("\n").split("\t")
            entries = []
            for part in filter(None, body.split(",")):
                item, _, score = part.rpartition(":")
                entries.append((item, float(score)))
            rows.append((user, RankedList(entries, tag)))
    return rows

