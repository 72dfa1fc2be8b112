"""Serialized seq2seq examples for the six generation tasks, with leave-one-out splits."""
from __future__ import annotations

import enum
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import MAX_SEQ_LEN, InteractionDataset, Modality
from .quantlang import ItemCodeTable, Vocabulary

logger = logging.getLogger(__name__)


class TaskKind(str, enum.Enum):
    NIG_TEXT = "NIG_Text"
    NIG_IMAGE = "NIG_Image"
    AIG_TEXT = "AIG_Text"
    AIG_IMAGE = "AIG_Image"
    QLA_TEXT_TO_IMAGE = "QLA_TextToImage"
    QLA_IMAGE_TO_TEXT = "QLA_ImageToText"

    @property
    def index(self) -> int:
        return list(TaskKind).index(self)

    @property
    def source(self) -> Modality:
        return _IO[self][0]

    @property
    def target(self) -> Modality:
        return _IO[self][1]


T, V = Modality.TEXT, Modality.IMAGE
_IO = {
    TaskKind.NIG_TEXT: (T, T),
    TaskKind.NIG_IMAGE: (V, V),
    TaskKind.AIG_TEXT: (V, T),
    TaskKind.AIG_IMAGE: (T, V),
    TaskKind.QLA_TEXT_TO_IMAGE: (T, V),
    TaskKind.QLA_IMAGE_TO_TEXT: (V, T),
}
TASK_COUNT = len(TaskKind)


class Stage(str, enum.Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


STAGE_TASKS = {
    Stage.PRETRAIN: frozenset({TaskKind.NIG_TEXT, TaskKind.NIG_IMAGE}),
    Stage.FINETUNE: frozenset(TaskKind),
}


class StageTaskError(ValueError):
    pass


class MissingCode(KeyError):
    pass


@dataclass(frozen=True)
class TaskExample:
    task: TaskKind
    input_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    user: str
    target_item: str | None = None


@dataclass(frozen=True)
class UserSplit:
    user: str
    train_prefix: tuple[str, ...]
    valid_target: str
    test_target: str

    @property
    def valid_history(self) -> tuple[str, ...]:
        return self.train_prefix

    @property
    def test_history(self) -> tuple[str, ...]:
        return self.train_prefix + (self.valid_target,)


@dataclass
class SplitDataset:
    train: list[TaskExample] = field(default_factory=list)
    valid: list[TaskExample] = field(default_factory=list)
    test: list[TaskExample] = field(default_factory=list)

    def tasks(self) -> set[TaskKind]:
        return {e.task for e in self.train + self.valid + self.test}


def split_leave_one_out(dataset: InteractionDataset) -> list[UserSplit]:
    splits = []
    skipped = 0
    for user, items in dataset.users:
        if len(items) < 3:
            skipped += 1
            continue
        splits.append(UserSplit(user, tuple(items[:-2]), items[-2], items[-1]))
    if skipped:
        logger.warning("excluded %d users with fewer than 3 items from the split", skipped)
    return sorted(splits, key=lambda s: s.user)


def _item_ids(table: ItemCodeTable, vocab: Vocabulary, item: str, modality: Modality) -> list[int]:
    try:
        code = table.codes[modality][item]
    except KeyError:
        raise MissingCode(f"no {modality.value} code for item {item!r}") from None
    return vocab.encode_code(modality, code)


def _example(task, history, target, user, table, vocab, max_history):
    inp = list(vocab.prompt_ids(task.index))
    for item in history[-max_history:]:
        inp += _item_ids(table, vocab, item, task.source)
    tgt = _item_ids(table, vocab, target, task.target) + [vocab.eos_id]
    return TaskExample(task, tuple(inp), tuple(tgt), user, target)


def _build_generation(task, splits, table, vocab, max_history) -> SplitDataset:
    out = SplitDataset()
    leaked = 0
    for s in splits:
        held_out = {s.valid_target, s.test_target}
        for t in range(1, len(s.train_prefix)):
            target = s.train_prefix[t]
            if target in held_out:
                leaked += 1
                continue
            out.train.append(_example(task, s.train_prefix[:t], target, s.user, table, vocab, max_history))
        out.valid.append(_example(task, s.valid_history, s.valid_target, s.user, table, vocab, max_history))
        out.test.append(_example(task, s.test_history, s.test_target, s.user, table, vocab, max_history))
    if leaked:
        logger.warning("%s: skipped %d train positions whose target is a held-out item", task.value, leaked)
    return out


def build_nig(splits, code_table: ItemCodeTable, vocab: Vocabulary, modality: Modality | str,
              max_history: int = MAX_SEQ_LEN) -> SplitDataset:
    task = TaskKind.NIG_TEXT if Modality(modality) is Modality.TEXT else TaskKind.NIG_IMAGE
    return _build_generation(task, splits, code_table, vocab, max_history)


def build_aig(splits, code_table: ItemCodeTable, vocab: Vocabulary, target: Modality | str,
              max_history: int = MAX_SEQ_LEN) -> SplitDataset:
    """Cross-modal next item: ``target`` names the modality being generated."""
    task = TaskKind.AIG_TEXT if Modality(target) is Modality.TEXT else TaskKind.AIG_IMAGE
    return _build_generation(task, splits, code_table, vocab, max_history)


def train_items(splits) -> list[str]:
    seen: dict[str, None] = {}
    for s in splits:
        for item in s.train_prefix:
            seen.setdefault(item)
    return sorted(seen)


def build_qla(items, code_table: ItemCodeTable, vocab: Vocabulary, source: Modality | str) -> SplitDataset:
    task = TaskKind.QLA_TEXT_TO_IMAGE if Modality(source) is Modality.TEXT else TaskKind.QLA_IMAGE_TO_TEXT
    train = [_example(task, [item], item, "", code_table, vocab, 1) for item in items]
    return SplitDataset(train=train)


def build_all_tasks(splits, code_table, vocab, tasks=tuple(TaskKind), max_history=MAX_SEQ_LEN):
    parts = []
    items = None
    for task in tasks:
        task = TaskKind(task)
        if task in (TaskKind.NIG_TEXT, TaskKind.NIG_IMAGE):
            parts.append(build_nig(splits, code_table, vocab, task.target, max_history))
        elif task in (TaskKind.AIG_TEXT, TaskKind.AIG_IMAGE):
            parts.append(build_aig(splits, code_table, vocab, task.target, max_history))
        else:
            items = train_items(splits) if items is None else items
            parts.append(build_qla(items, code_table, vocab, task.source))
    return parts


def assemble_stage(stage: Stage | str, *parts: SplitDataset, seed: int = 0) -> SplitDataset:
    stage = Stage(stage)
    out = SplitDataset()
    for part in parts:
        bad = part.tasks() - STAGE_TASKS[stage]
        if bad:
            raise StageTaskError(f"{stage.value} does not accept {sorted(t.value for t in bad)}")
        out.train += part.train
        out.valid += part.valid
        out.test += part.test
    order = np.random.default_rng(seed).permutation(len(out.train))
    out.train = [out.train[i] for i in order]
    mix = Counter(e.task.value for e in out.train)
    logger.info("%s train mix: %s", stage.value, dict(sorted(mix.items())))
    return out


def write_examples(examples, path) -> None:
    with open(path, "w") as f:
        for e in examples:
            f.write(f"{e.task.value}\t{e.user}\t{' '.join(map(str, e.input_ids))}\t"
                    f"{' '.join(map(str, e.target_ids))}\n")


def read_examples(path, vocab: Vocabulary | None = None,
                  code_table: ItemCodeTable | None = None) -> list[TaskExample]:
    """Inverse of ``write_examples``; target items are recovered when a code table is given."""
    reverse = {}
    if code_table is not None and vocab is not None:
        reverse = {m: code_table.reverse(m) for m in code_table.modalities}
    out = []
    with open(path) as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{n}: expected 4 tab-separated fields")
            task, user, inp, tgt = parts
            target_ids = tuple(int(x) for x in tgt.split())
            item = None
            if reverse:
                modality, code = vocab.decode_code(target_ids[:-1])
                item = reverse[modality].get(code)
            out.append(TaskExample(TaskKind(task), tuple(int(x) for x in inp.split()), target_ids, user, item))
    return out
