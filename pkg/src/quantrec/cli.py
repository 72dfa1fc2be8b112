"""Command-line driver: one subcommand per pipeline stage.

Every stage writes its artifacts into the work directory together with a
``<command>.manifest.json`` recording the config hash, seed, and sha256 of every
input and output. A later stage refuses inputs whose bytes no longer match the
manifest of the stage that produced them.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, PipelineConfig, load_config
from .corpus import Stage, TaskKind, read_examples, write_examples
from .data import (Modality, check_references, load_embeddings, load_interactions, write_embeddings,
                   write_interactions)
from .evaluate import MetricsReport, evaluate_run
from .generate import build_trie, write_ranked
from .pipeline import Domains, build_corpora, fit_translators, synth_domains, tokenize
from .quantlang import ItemCodeTable, Vocabulary
from .rqvae import QuantTranslator
from .seq2seq import build_model, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("quantrec")


class PipelineError(RuntimeError):
    kind = "pipeline_error"


class MissingInput(PipelineError):
    kind = "missing_input"


class HashMismatch(PipelineError):
    kind = "hash_mismatch"


class IncompatibleVocabulary(PipelineError):
    kind = "incompatible_vocabulary"


class MissingPretrainCheckpoint(PipelineError):
    kind = "missing_pretrain_checkpoint"


def _paths(cfg: PipelineConfig) -> dict[str, Path]:
    w = cfg.work_dir
    p = cfg.paths
    sources = p.get("source_interactions") or [
        w / f"source_{d}.tsv" for d in range(cfg.source_domain_sizes()[0])]
    return {
        "text": Path(p.get("text_embeddings") or w / "text.emb"),
        "image": Path(p.get("image_embeddings") or w / "image.emb"),
        "interactions": Path(p.get("interactions") or w / "interactions.tsv"),
        "sources": [Path(s) for s in sources],
        "translator_text": w / "translator_text.npz",
        "translator_image": w / "translator_image.npz",
        "codes": w / "codes.tsv",
        "vocab": w / "vocab.txt",
        "collisions": w / "collisions.json",
        "corpus": w / "corpus",
        "model_pretrain": w / "model_pretrain.npz",
        "model_finetune": w / "model_finetune.npz",
    }


def _verify_inputs(cfg: PipelineConfig, inputs: list[Path]) -> None:
    for p in inputs:
        if not p.exists():
            raise MissingInput(f"required input {p} does not exist; run the producing stage first")
    produced = {}
    for manifest in sorted(cfg.work_dir.glob("*.manifest.json")):
        doc = json.loads(manifest.read_text())
        for name, digest in doc.get("outputs", {}).items():
            produced[str(Path(name).resolve())] = (digest, manifest.name)
    for p in inputs:
        key = str(p.resolve())
        if key in produced:
            digest, source = produced[key]
            if checkpoint.file_sha256(p) != digest:
                raise HashMismatch(f"{p} changed since {source} recorded it; rerun that stage")


def _write_manifest(cfg: PipelineConfig, command: str, inputs: list[Path], outputs: list[Path],
                    **extra) -> Path:
    doc = {
        "command": command,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "profile": cfg.profile,
        "inputs": {str(p): checkpoint.file_sha256(p) for p in inputs},
        "outputs": {str(p): checkpoint.file_sha256(p) for p in outputs},
        **extra,
    }
    path = cfg.work_dir / f"{command}.manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _load_domains(cfg, paths, with_sources: bool) -> Domains:
    text = load_embeddings(paths["text"], Modality.TEXT)
    image = load_embeddings(paths["image"], Modality.IMAGE)
    target = load_interactions(paths["interactions"])
    sources = [load_interactions(p) for p in paths["sources"]] if with_sources else []
    for ds in [target, *sources]:
        check_references(ds, text, image)
    return Domains(text, image, target, sources)


def cmd_synth(cfg: PipelineConfig, args) -> None:
    paths = _paths(cfg)
    cfg.work_dir.mkdir(parents=True, exist_ok=True)
    n_src, src_items, src_users = cfg.source_domain_sizes()
    domains = synth_domains(cfg.synth_config(), n_src, src_items, src_users)
    write_embeddings(domains.text, paths["text"])
    write_embeddings(domains.image, paths["image"])
    write_interactions(domains.target, paths["interactions"])
    for ds, p in zip(domains.sources, paths["sources"]):
        write_interactions(ds, p)
    outputs = [paths["text"], paths["image"], paths["interactions"], *paths["sources"][:n_src]]
    _write_manifest(cfg, "synth", [], outputs)


def cmd_train_translator(cfg: PipelineConfig, args) -> None:
    paths = _paths(cfg)
    inputs = [paths["text"], paths["image"]]
    _verify_inputs(cfg, inputs)
    text = load_embeddings(paths["text"], Modality.TEXT)
    image = load_embeddings(paths["image"], Modality.IMAGE)
    translators = fit_translators(text, image, cfg.rqvae_config("text"), cfg.rqvae_config("image"))
    translators[Modality.TEXT].save(paths["translator_text"])
    translators[Modality.IMAGE].save(paths["translator_image"])
    _write_manifest(cfg, "train-translator", inputs, [paths["translator_text"], paths["translator_image"]])


def cmd_tokenize(cfg: PipelineConfig, args) -> None:
    paths = _paths(cfg)
    inputs = [paths["text"], paths["image"], paths["translator_text"], paths["translator_image"]]
    _verify_inputs(cfg, inputs)
    text = load_embeddings(paths["text"], Modality.TEXT)
    image = load_embeddings(paths["image"], Modality.IMAGE)
    translators = {Modality.TEXT: QuantTranslator.load(paths["translator_text"]),
                   Modality.IMAGE: QuantTranslator.load(paths["translator_image"])}
    tok = tokenize(translators, text, image)
    tok.table.save(paths["codes"])
    tok.vocab.save(paths["vocab"])
    summary = {m.value: {"colliding_tuples": s.colliding_tuples, "colliding_items": s.colliding_items,
                         "level_usage": (s.level_counts > 0).sum(axis=1).tolist()}
               for m, s in tok.stats.items()}
    paths["collisions"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(cfg, "tokenize", inputs, [paths["codes"], paths["vocab"], paths["collisions"]])


def _load_tokens(paths):
    vocab = Vocabulary.load(paths["vocab"])
    table = ItemCodeTable.load(paths["codes"], vocab.codebook_size)
    return vocab, table


def cmd_build_corpus(cfg: PipelineConfig, args) -> None:
    paths = _paths(cfg)
    pretrain = cfg.pretrain_enabled()
    inputs = [paths["text"], paths["image"], paths["interactions"], paths["codes"], paths["vocab"]]
    if pretrain:
        inputs += paths["sources"]
    _verify_inputs(cfg, inputs)
    domains = _load_domains(cfg, paths, with_sources=pretrain)
    vocab, table = _load_tokens(paths)
    from .pipeline import Tokenization
    tok = Tokenization(table, vocab, {}, {})
    pre, fine = build_corpora(tok, domains, cfg.enabled_tasks(Stage.FINETUNE), seed=cfg.seed, pretrain=pretrain)
    paths["corpus"].mkdir(parents=True, exist_ok=True)
    outputs = []
    for split in ("train", "valid", "test"):
        p = paths["corpus"] / f"finetune_{split}.tsv"
        write_examples(getattr(fine, split), p)
        outputs.append(p)
    if pre is not None:
        p = paths["corpus"] / "pretrain_train.tsv"
        write_examples(pre.train, p)
        outputs.append(p)
    _write_manifest(cfg, "build-corpus", inputs, outputs,
                    tasks=[t.value for t in cfg.enabled_tasks(Stage.FINETUNE)])


def cmd_train(cfg: PipelineConfig, args) -> None:
    paths = _paths(cfg)
    stage = Stage(args.stage)
    corpus = paths["corpus"] / f"{stage.value}_train.tsv"
    inputs = [paths["vocab"], corpus]
    if stage is Stage.FINETUNE and cfg.pretrain_enabled():
        if not paths["model_pretrain"].exists():
            raise MissingPretrainCheckpoint(
                f"config enables pre-training but {paths['model_pretrain']} is missing; "
                "run `quantrec train --stage pretrain` first or set [pretrain] enabled = false")
        inputs.append(paths["model_pretrain"])
    if stage is Stage.PRETRAIN and not cfg.pretrain_enabled():
        raise PipelineError("pre-training is disabled in the config ([pretrain] enabled = false)")
    _verify_inputs(cfg, inputs)
    vocab = Vocabulary.load(paths["vocab"])
    vocab_hash = checkpoint.file_sha256(paths["vocab"])
    examples = read_examples(corpus)
    if any(max(e.input_ids + e.target_ids) >= len(vocab) for e in examples):
        raise IncompatibleVocabulary(f"{corpus} holds ids outside the {len(vocab)}-token vocabulary")
    if stage is Stage.FINETUNE and cfg.pretrain_enabled():
        model, meta = load_checkpoint(paths["model_pretrain"])
        if meta.get("vocab_sha256") != vocab_hash:
            raise IncompatibleVocabulary("pre-training checkpoint was built with a different vocabulary")
    else:
        model = build_model(cfg.model_config(len(vocab)))
    out = paths[f"model_{stage.value}"]
    result = train(model, examples, cfg.schedule(stage))
    save_checkpoint(model, out, stage=stage, vocab_sha256=vocab_hash)
    log = cfg.work_dir / f"train_{stage.value}.csv"
    result.write_csv(log)
    _write_manifest(cfg, f"train-{stage.value}", inputs, [out, log])


def cmd_evaluate(cfg: PipelineConfig, args) -> None:
    paths = _paths(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else paths["model_finetune"]
    test = paths["corpus"] / "finetune_test.tsv"
    inputs = [ckpt, paths["vocab"], paths["codes"], test, paths["interactions"]]
    _verify_inputs(cfg, inputs)
    vocab, table = _load_tokens(paths)
    model, meta = load_checkpoint(ckpt)
    if meta.get("vocab_sha256") != checkpoint.file_sha256(paths["vocab"]):
        raise IncompatibleVocabulary(f"{ckpt} was trained against a different vocabulary")
    items = sorted(load_interactions(paths["interactions"]).item_set())
    tries = {m: build_trie(table, m, vocab, items) for m in Modality}
    examples = read_examples(test, vocab, table)
    ranked: list = []
    ev = cfg.eval
    report = evaluate_run(model, tries, examples, tasks=ev.get("tasks", [TaskKind.NIG_TEXT.value]),
                          beam_size=int(ev.get("beam_size", 20)), rerank=bool(ev.get("rerank", True)),
                          ks=tuple(ev.get("ks", (1, 5, 10))), seed=cfg.seed,
                          config={"tasks": [t.value for t in cfg.enabled_tasks(Stage.FINETUNE)],
                                  "pretrained": cfg.pretrain_enabled(), "checkpoint": str(ckpt),
                                  "profile": cfg.profile},
                          ranked_out=ranked)
    out = Path(args.output) if args.output else cfg.work_dir / "report"
    out.parent.mkdir(parents=True, exist_ok=True)
    json_path, tsv_path = out.with_suffix(".json"), out.with_suffix(".tsv")
    ranked_path = out.with_name(out.name + "_ranked.tsv")
    report.write_json(json_path)
    report.write_tsv(tsv_path)
    write_ranked(ranked, ranked_path)
    _write_manifest(cfg, "evaluate", inputs, [json_path, tsv_path, ranked_path])
    print(tsv_path.read_text(), end="")


def aggregate_reports(labelled: list[tuple[str, MetricsReport]], metrics=None) -> list[dict]:
    """Mean and standard deviation per (label, task row) over the given reports."""
    groups: dict[tuple[str, str], list[dict]] = defaultdict(list)
    order = []
    for label, rep in labelled:
        for task, values in rep.per_task.items():
            key = (label, task)
            if key not in groups:
                order.append(key)
            groups[key].append(values)
    rows = []
    for label, task in order:
        runs = groups[(label, task)]
        cols = metrics or list(runs[0])
        row = {"label": label, "task": task, "runs": len(runs)}
        for c in cols:
            vals = np.array([r[c] for r in runs])
            row[c] = float(vals.mean())
            row[c + "_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    return rows


def cmd_report(cfg: PipelineConfig, args) -> None:
    labelled = []
    for spec in args.reports:
        label, sep, path = spec.partition("=")
        if not sep:
            label, path = Path(spec).stem, spec
        if not Path(path).exists():
            raise MissingInput(f"report {path} does not exist")
        labelled.append((label, MetricsReport.read_json(path)))
    if not labelled:
        raise PipelineError("no reports given")
    ks = labelled[0][1].ks
    metrics = [f"{m}@{k}" for m in ("recall", "ndcg") for k in ks]
    rows = aggregate_reports(labelled, metrics)
    header = ["label", "task", "runs"] + [c for m in metrics for c in (m, m + "_std")]
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(str(row[h]) if h in ("label", "task", "runs") else f"{row[h]:.4f}"
                               for h in header))
    text = "\n".join(lines) + "\n"
    out = Path(args.output) if args.output else cfg.work_dir / "ablation.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    print(text, end="")


COMMANDS = {
    "synth": cmd_synth,
    "train-translator": cmd_train_translator,
    "tokenize": cmd_tokenize,
    "build-corpus": cmd_build_corpus,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantrec", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML pipeline config")
    common.add_argument("--seed", type=int)
    common.add_argument("--profile", choices=["paper", "desk"])
    common.add_argument("--work-dir", help="override [paths] work_dir")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "train-translator", "tokenize", "build-corpus"):
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("train", parents=[common])
    p.add_argument("--stage", choices=[s.value for s in Stage], default=Stage.FINETUNE.value)
    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--checkpoint")
    p.add_argument("--output", help="output path stem for report .json/.tsv")
    p = sub.add_parser("report", parents=[common])
    p.add_argument("reports", nargs="+", help="report JSON files, optionally as label=path")
    p.add_argument("--output")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, profile=args.profile, seed=args.seed)
        if args.work_dir:
            cfg.paths["work_dir"] = args.work_dir
        COMMANDS[args.command](cfg, args)
    except (PipelineError, ConfigError, checkpoint.CheckpointError, ValueError, KeyError, OSError) as e:
        kind = getattr(e, "kind", type(e).__name__)
        json.dump({"error": kind, "message": str(e), "command": args.command}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
