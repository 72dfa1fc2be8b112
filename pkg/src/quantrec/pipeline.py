"""In-memory orchestration of the full pipeline, shared by the CLI, demos and tests."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import (TASK_COUNT, SplitDataset, Stage, TaskKind, assemble_stage, build_all_tasks,
                     split_leave_one_out)
from .data import EmbeddingMatrix, InteractionDataset, Modality, SynthConfig, generate_synthetic
from .evaluate import MetricsReport, evaluate_run
from .generate import build_trie
from .quantlang import ItemCodeTable, Vocabulary, build_vocabulary, merge_modalities, resolve_collisions
from .rqvae import QuantTranslator, RqVaeConfig, UsageStats, quantize_all, train_translator
from .seq2seq import ModelConfig, Seq2SeqModel, TrainSchedule, build_model, train

logger = logging.getLogger(__name__)


@dataclass
class Domains:
    """Target domain plus optional pre-training source domains over one item universe."""
    text: EmbeddingMatrix
    image: EmbeddingMatrix
    target: InteractionDataset
    sources: list[InteractionDataset] = field(default_factory=list)

    @property
    def target_items(self) -> list[str]:
        items = self.target.item_set()
        return [i for i in self.text.item_ids if i in items]


def synth_domains(config: SynthConfig, source_domains: int = 0, source_items: int = 500,
                  source_users: int = 1000) -> Domains:
    """Target domain and ``source_domains`` extra domains sharing the target's cluster centers."""
    center_seed = config.seed if config.center_seed is None else config.center_seed
    target = generate_synthetic(dataclasses.replace(config, center_seed=center_seed, id_prefix="t_"))
    text, image = [target.text], [target.image]
    sources = []
    for d in range(source_domains):
        src = generate_synthetic(dataclasses.replace(
            config, n_items=source_items, n_users=source_users, seed=config.seed + 1000 * (d + 1),
            center_seed=center_seed, id_prefix=f"s{d}_"))
        text.append(src.text)
        image.append(src.image)
        sources.append(src.interactions)
    return Domains(_concat(text), _concat(image), target.interactions, sources)


def _concat(matrices: list[EmbeddingMatrix]) -> EmbeddingMatrix:
    ids = tuple(i for m in matrices for i in m.item_ids)
    return EmbeddingMatrix(matrices[0].modality, ids, np.concatenate([m.vectors for m in matrices]))


@dataclass
class Tokenization:
    table: ItemCodeTable
    vocab: Vocabulary
    translators: dict[Modality, QuantTranslator]
    stats: dict[Modality, UsageStats]


def fit_translators(text: EmbeddingMatrix, image: EmbeddingMatrix, text_config: RqVaeConfig,
                    image_config: RqVaeConfig) -> dict[Modality, QuantTranslator]:
    return {Modality.TEXT: train_translator(text, text_config),
            Modality.IMAGE: train_translator(image, image_config)}


def tokenize(translators: dict[Modality, QuantTranslator], text: EmbeddingMatrix,
             image: EmbeddingMatrix) -> Tokenization:
    tables, stats = {}, {}
    for modality, emb in ((Modality.TEXT, text), (Modality.IMAGE, image)):
        tr = translators[modality]
        results, stats[modality] = quantize_all(tr, emb)
        tables[modality] = resolve_collisions(results, tr.config.codebook_size, tr.config.levels, modality)
        logger.info("%s: %d colliding tuples covering %d items reallocated", modality.value,
                    stats[modality].colliding_tuples, stats[modality].colliding_items)
    levels = {tr.config.levels for tr in translators.values()}
    sizes = {tr.config.codebook_size for tr in translators.values()}
    if len(levels) != 1 or len(sizes) != 1:
        raise ValueError("text and image translators must share levels and codebook size")
    vocab = build_vocabulary(levels.pop(), sizes.pop(), TASK_COUNT)
    table = merge_modalities(tables[Modality.TEXT], tables[Modality.IMAGE])
    return Tokenization(table, vocab, translators, stats)


def build_corpora(tok: Tokenization, domains: Domains, tasks, seed: int = 0,
                  pretrain: bool = False) -> tuple[SplitDataset | None, SplitDataset]:
    target_splits = split_leave_one_out(domains.target)
    finetune = assemble_stage(Stage.FINETUNE, *build_all_tasks(target_splits, tok.table, tok.vocab, tasks),
                              seed=seed)
    pre = None
    if pretrain:
        if not domains.sources:
            raise ValueError("pre-training requested but no source domains are available")
        parts = []
        for ds in domains.sources:
            parts += build_all_tasks(split_leave_one_out(ds), tok.table, tok.vocab,
                                     [TaskKind.NIG_TEXT, TaskKind.NIG_IMAGE])
        pre = assemble_stage(Stage.PRETRAIN, *parts, seed=seed)
    return pre, finetune


def target_tries(tok: Tokenization, domains: Domains) -> dict:
    items = domains.target_items
    return {m: build_trie(tok.table, m, tok.vocab, items) for m in Modality}


@dataclass
class RunResult:
    model: Seq2SeqModel
    report: MetricsReport
    seconds: float
    curves: dict[str, list] = field(default_factory=dict)


def train_and_evaluate(tok: Tokenization, domains: Domains, model_config: ModelConfig,
                       finetune_schedule: TrainSchedule, tasks, pretrain_schedule: TrainSchedule | None = None,
                       beam_size: int = 20, eval_tasks=(TaskKind.NIG_TEXT,), rerank: bool = True,
                       seed: int = 0) -> RunResult:
    start = time.time()
    pre, fine = build_corpora(tok, domains, tasks, seed=seed, pretrain=pretrain_schedule is not None)
    model = build_model(model_config)
    curves = {}
    if pre is not None:
        curves["pretrain"] = train(model, pre.train, pretrain_schedule).curve
    curves["finetune"] = train(model, fine.train, finetune_schedule).curve
    report = evaluate_run(model, target_tries(tok, domains), fine.test, tasks=eval_tasks,
                          beam_size=beam_size, rerank=rerank, seed=seed,
                          config={"tasks": [TaskKind(t).value for t in tasks],
                                  "pretrained": pretrain_schedule is not None})
    return RunResult(model, report, time.time() - start, curves)
