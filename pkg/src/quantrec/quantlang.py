"""Shared token vocabulary, code-tuple serialization and collision reallocation."""
from __future__ import annotations

import re
import string
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .data import Modality

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)
PROMPTS_PER_TASK = 4
MAX_LEVELS = 26

_CODE_TOKEN = re.compile(r"<([A-Za-z])_(\d+)>")


class TokenError(ValueError):
    pass


class UnknownToken(TokenError):
    pass


class MixedModality(TokenError):
    pass


class LevelOrderError(TokenError):
    pass


class CapacityExhausted(RuntimeError):
    pass


def level_prefix(modality: Modality, level: int) -> str:
    letter = string.ascii_lowercase[level]
    return letter if Modality(modality) is Modality.TEXT else letter.upper()


def code_token(modality: Modality, level: int, code: int) -> str:
    return f"<{level_prefix(modality, level)}_{code}>"


def parse_code_token(token: str) -> tuple[Modality, int, int]:
    """Recover (modality, level, code) from a single code token."""
    m = _CODE_TOKEN.fullmatch(token)
    if not m:
        raise UnknownToken(f"not a code token: {token!r}")
    letter, code = m.group(1), int(m.group(2))
    modality = Modality.TEXT if letter.islower() else Modality.IMAGE
    return modality, string.ascii_lowercase.index(letter.lower()), code


def prompt_token(index: int) -> str:
    return f"<*_{index}>"


class Vocabulary:
    """Specials, then text code tokens level-major, then image code tokens, then prompts task-major."""

    def __init__(self, levels: int, codebook_size: int, task_count: int):
        if not 1 <= levels <= MAX_LEVELS:
            raise ValueError(f"levels must lie in [1, {MAX_LEVELS}]")
        if codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if task_count < 0:
            raise ValueError("task_count must be >= 0")
        self.levels = levels
        self.codebook_size = codebook_size
        self.task_count = task_count
        tokens = list(SPECIALS)
        for modality in (Modality.TEXT, Modality.IMAGE):
            for level in range(levels):
                tokens.extend(code_token(modality, level, k) for k in range(codebook_size))
        tokens.extend(prompt_token(i) for i in range(task_count * PROMPTS_PER_TASK))
        self.tokens: tuple[str, ...] = tuple(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(tokens)}

    pad_id = 0
    bos_id = 1
    eos_id = 2

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_to_token(self, i: int) -> str:
        return self.tokens[i]

    @property
    def code_tokens(self) -> tuple[str, ...]:
        n = 2 * self.levels * self.codebook_size
        return self.tokens[len(SPECIALS):len(SPECIALS) + n]

    def code_id(self, modality: Modality, level: int, code: int) -> int:
        if not 0 <= code < self.codebook_size:
            raise TokenError(f"code {code} outside [0, {self.codebook_size})")
        offset = 0 if Modality(modality) is Modality.TEXT else self.levels * self.codebook_size
        return len(SPECIALS) + offset + level * self.codebook_size + code

    def level_ids(self, modality: Modality, level: int) -> range:
        start = self.code_id(modality, level, 0)
        return range(start, start + self.codebook_size)

    def prompt_ids(self, task_index: int) -> list[int]:
        if not 0 <= task_index < self.task_count:
            raise ValueError(f"task index {task_index} outside [0, {self.task_count})")
        start = len(SPECIALS) + 2 * self.levels * self.codebook_size + task_index * PROMPTS_PER_TASK
        return list(range(start, start + PROMPTS_PER_TASK))

    def encode_code(self, modality: Modality, code) -> list[int]:
        if len(code) != self.levels:
            raise TokenError(f"expected {self.levels} levels, got {len(code)}")
        return [self.code_id(modality, level, int(c)) for level, c in enumerate(code)]

    def decode_code(self, ids) -> tuple[Modality, tuple[int, ...]]:
        try:
            tokens = [self.tokens[i] for i in ids]
        except IndexError:
            raise UnknownToken(f"id outside vocabulary in {list(ids)}") from None
        modality, code = tokens_to_tuple(tokens)
        if len(code) != self.levels:
            raise TokenError(f"expected {self.levels} code tokens, got {len(code)}")
        return modality, code

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> Vocabulary:
        with open(path) as f:
            tokens = [line.rstrip("\n") for line in f if line.strip()]
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise TokenError(f"{path}: vocabulary must start with {SPECIALS}")
        letters = set()
        max_code = -1
        n_prompts = 0
        for t in tokens[len(SPECIALS):]:
            if t.startswith("<*_"):
                n_prompts += 1
                continue
            _, level, code = parse_code_token(t)
            letters.add(level)
            max_code = max(max_code, code)
        if n_prompts % PROMPTS_PER_TASK:
            raise TokenError(f"{path}: prompt token count {n_prompts} is not a multiple of {PROMPTS_PER_TASK}")
        vocab = cls(len(letters), max_code + 1, n_prompts // PROMPTS_PER_TASK)
        if vocab.tokens != tuple(tokens):
            raise TokenError(f"{path}: token order does not match a canonical vocabulary")
        return vocab


def build_vocabulary(levels: int, codebook_size: int, task_count: int) -> Vocabulary:
    return Vocabulary(levels, codebook_size, task_count)


def tuple_to_tokens(modality: Modality | str, code, codebook_size: int | None = None) -> list[str]:
    modality = Modality(modality)
    if len(code) > MAX_LEVELS:
        raise TokenError(f"at most {MAX_LEVELS} levels are supported")
    out = []
    for level, c in enumerate(code):
        c = int(c)
        if c < 0 or (codebook_size is not None and c >= codebook_size):
            raise TokenError(f"code {c} at level {level} is out of range")
        out.append(code_token(modality, level, c))
    return out


def tokens_to_tuple(tokens) -> tuple[Modality, tuple[int, ...]]:
    """Inverse of ``tuple_to_tokens``; accepts a token list or their concatenation."""
    if isinstance(tokens, str):
        parts = re.findall(r"<[^<>]*>", tokens)
        if "".join(parts) != tokens:
            raise UnknownToken(f"cannot split {tokens!r} into tokens")
        tokens = parts
    if not tokens:
        raise TokenError("empty token sequence")
    parsed = [parse_code_token(t) for t in tokens]
    modality = parsed[0][0]
    code = []
    for expected_level, (mod, level, c) in enumerate(parsed):
        if mod is not modality:
            raise MixedModality(f"{tokens[0]} and {tokens[expected_level]} belong to different modalities")
        if level != expected_level:
            raise LevelOrderError(f"token {tokens[expected_level]} at position {expected_level}")
        code.append(c)
    return modality, tuple(code)


class OccupancyTrie:
    """Set of occupied code tuples with per-prefix leaf counts, for O(L) prefix queries."""

    def __init__(self, levels: int, codebook_size: int):
        self.levels = levels
        self.codebook_size = codebook_size
        self._counts: dict[tuple[int, ...], int] = defaultdict(int)
        self._leaves: set[tuple[int, ...]] = set()

    def __contains__(self, code) -> bool:
        return tuple(code) in self._leaves

    def __len__(self) -> int:
        return len(self._leaves)

    def add(self, code) -> None:
        code = tuple(code)
        if len(code) != self.levels:
            raise ValueError(f"expected a {self.levels}-tuple")
        if code in self._leaves:
            raise ValueError(f"tuple {code} is already occupied")
        self._leaves.add(code)
        for depth in range(self.levels + 1):
            self._counts[code[:depth]] += 1

    def count(self, prefix) -> int:
        return self._counts.get(tuple(prefix), 0)

    def is_full(self, prefix) -> bool:
        return self.count(prefix) >= self.codebook_size ** (self.levels - len(prefix))


@dataclass
class ItemCodeTable:
    levels: int
    codebook_size: int
    codes: dict[Modality, dict[str, tuple[int, ...]]] = field(default_factory=dict)
    # levels (1-based) whose code was changed by collision handling; empty means original
    provenance: dict[Modality, dict[str, frozenset[int]]] = field(default_factory=dict)

    @property
    def modalities(self) -> list[Modality]:
        return list(self.codes)

    def items(self, modality: Modality | None = None) -> list[str]:
        modality = Modality(modality) if modality is not None else self.modalities[0]
        return list(self.codes[modality])

    def lookup(self, item: str) -> dict[Modality, tuple[int, ...]]:
        return {m: table[item] for m, table in self.codes.items()}

    def code(self, item: str, modality: Modality) -> tuple[int, ...]:
        return self.codes[Modality(modality)][item]

    def reverse(self, modality: Modality) -> dict[tuple[int, ...], str]:
        return {c: i for i, c in self.codes[Modality(modality)].items()}

    def is_injective(self, modality: Modality) -> bool:
        table = self.codes[Modality(modality)]
        return len(set(table.values())) == len(table)

    def restrict(self, items) -> ItemCodeTable:
        items = list(items)
        return ItemCodeTable(
            self.levels, self.codebook_size,
            {m: {i: t[i] for i in items} for m, t in self.codes.items()},
            {m: {i: p[i] for i in items if i in p} for m, p in self.provenance.items()},
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            first = self.modalities[0]
            for item in self.codes[first]:
                for modality, table in self.codes.items():
                    f.write(f"{item}\t{modality.value}\t{''.join(tuple_to_tokens(modality, table[item]))}\n")

    @classmethod
    def load(cls, path, codebook_size: int | None = None) -> ItemCodeTable:
        """Read a code table file. Provenance is not part of the file format."""
        codes: dict[Modality, dict[str, tuple[int, ...]]] = {}
        levels = None
        with open(path) as f:
            for n, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise TokenError(f"{path}:{n}: expected '<item>\\t<modality>\\t<tokens>'")
                item, modality, tokens = parts
                mod, code = tokens_to_tuple(tokens)
                if mod is not Modality(modality):
                    raise MixedModality(f"{path}:{n}: tokens are {mod.value}, line says {modality}")
                if levels is None:
                    levels = len(code)
                elif len(code) != levels:
                    raise TokenError(f"{path}:{n}: expected {levels} tokens")
                codes.setdefault(mod, {})[item] = code
        if levels is None:
            raise TokenError(f"{path}: empty code table")
        k = codebook_size or 1 + max(max(c) for t in codes.values() for c in t.values())
        return cls(levels, k, codes, {m: {i: frozenset() for i in t} for m, t in codes.items()})


def _first_free(occupancy: OccupancyTrie, prefix: tuple[int, ...], order: list[np.ndarray]):
    level = len(prefix)
    if level == occupancy.levels:
        return prefix
    for c in order[level]:
        cand = prefix + (int(c),)
        if not occupancy.is_full(cand):
            return _first_free(occupancy, cand, order)
    return None


def reallocate(occupancy: OccupancyTrie, original: tuple[int, ...], distances: np.ndarray):
    """Closest free tuple for one colliding item.

    Starts at the last level under the original prefix; each time a level is
    exhausted the search releases one more level and rescans, always visiting
    codes in ascending distance order.
    """
    order = [np.argsort(row, kind="stable") for row in distances]
    for depth in range(occupancy.levels - 1, -1, -1):
        found = _first_free(occupancy, tuple(original[:depth]), order)
        if found is not None:
            return found
    raise CapacityExhausted("every code tuple is occupied")


def resolve_collisions(results, codebook_size: int, levels: int,
                       modality: Modality | str = Modality.TEXT) -> ItemCodeTable:
    modality = Modality(modality)
    occupancy = OccupancyTrie(levels, codebook_size)
    if len(results) > codebook_size ** levels:
        raise CapacityExhausted(f"{len(results)} items exceed capacity {codebook_size}^{levels}")
    groups: dict[tuple[int, ...], list] = defaultdict(list)
    assigned: dict[str, tuple[int, ...]] = {}
    for item, res in results:
        code = tuple(int(c) for c in res.code)
        if len(code) != levels or not all(0 <= c < codebook_size for c in code):
            raise ValueError(f"item {item!r} has an invalid code {code}")
        if item in assigned:
            raise ValueError(f"item {item!r} appears twice")
        groups[code].append((item, res))
        assigned[item] = code
    for code in groups:
        occupancy.add(code)

    provenance = {item: frozenset() for item in assigned}
    for code in sorted(c for c, g in groups.items() if len(g) > 1):
        members = sorted(groups[code], key=lambda ir: (float(np.min(ir[1].level_distances[-1])), ir[0]))
        for item, res in members[1:]:
            new = reallocate(occupancy, code, np.asarray(res.level_distances))
            occupancy.add(new)
            assigned[item] = new
            provenance[item] = frozenset(l + 1 for l in range(levels) if new[l] != code[l])
    return ItemCodeTable(levels, codebook_size, {modality: assigned}, {modality: provenance})


def merge_modalities(text_table: ItemCodeTable, image_table: ItemCodeTable) -> ItemCodeTable:
    if (text_table.levels, text_table.codebook_size) != (image_table.levels, image_table.codebook_size):
        raise ValueError("tables disagree on levels or codebook size")
    text = text_table.codes[Modality.TEXT]
    image = image_table.codes[Modality.IMAGE]
    if set(text) != set(image):
        diff = sorted(set(text) ^ set(image))
        raise ValueError(f"item id sets differ, e.g. {diff[:5]}")
    return ItemCodeTable(
        text_table.levels, text_table.codebook_size,
        {Modality.TEXT: dict(text), Modality.IMAGE: {i: image[i] for i in text}},
        {Modality.TEXT: dict(text_table.provenance.get(Modality.TEXT, {})),
         Modality.IMAGE: dict(image_table.provenance.get(Modality.IMAGE, {}))},
    )
