"""
Constrained beam search and list fusion on a toy model
======================================================

Generation is restricted to paths in a prefix tree of valid item codes,
so every beam ends on a real item.  The text and image lists are then
fused: scores are mapped into (0, 1] and an item found by both lists
gets the mean of its two scores plus one.
"""
import math

import torch
from torch import nn

from quantrec.data import Modality
from quantrec.generate import CodeTrie, RankedList, beam_search, normalized, rerank
from quantrec.seq2seq import ModelConfig

###############################################################################
# A stand-in decoder whose next-token probabilities depend only on the
# tokens generated so far.  Tokens 3 and 4 form level one, 5 and 6 level two.
PROBS = {(): {3: 0.6, 4: 0.4}, (3,): {5: 0.55, 6: 0.45}, (4,): {5: 0.9, 6: 0.1}}


class LookupModel(nn.Module):
    def __init__(self):
        super().__init__()
        self.config = ModelConfig(vocab_size=7)

    def encode(self, src):
        return torch.zeros(src.shape[0], 1, 1), torch.ones(src.shape[0], 1, 1, 1, dtype=torch.bool)

    def decode(self, dec, memory, allowed):
        out = torch.full((dec.shape[0], dec.shape[1], 7), -1e9, dtype=torch.float64)
        for b, row in enumerate(dec.tolist()):
            for tok, p in PROBS[tuple(row[1:])].items():
                out[b, -1, tok] = math.log(p)
        return out


trie = CodeTrie(2, Modality.TEXT)
for item, path in {"a": (3, 5), "b": (3, 6), "c": (4, 5), "d": (4, 6)}.items():
    trie.insert(path, item)
trie.finalize()

###############################################################################
# Greedy decoding commits to token 3 and returns "a" (p = 0.33).  A beam of
# two keeps token 4 alive and finds "c" (p = 0.36).
model = LookupModel()
print("beam 1:", beam_search(model, [3], trie, beam_size=1).items)
top = beam_search(model, [3], trie, beam_size=2)
print("beam 2:", top.items, [round(math.exp(s), 3) for s in top.scores])

###############################################################################
# Fusion.  Log-probabilities become exp(score - best), so the top item of
# each list scores exactly 1.  Items in both lists score above 1 and
# therefore outrank every item found by only one list.
text = normalized(RankedList([("x", -0.2), ("y", -0.9), ("z", -1.5)]))
image = normalized(RankedList([("z", -0.4), ("w", -0.5)]))
fused = rerank(text, image)
for item, score in fused.entries:
    print(f"{item}  {score:.3f}")
