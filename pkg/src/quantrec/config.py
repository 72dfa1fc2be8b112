"""Pipeline configuration: a TOML document layered over a ``paper`` or ``desk`` profile.

Sections (all optional; unknown keys are rejected)::

    seed = 0
    [paths]    work_dir, text_embeddings, image_embeddings, interactions, source_interactions
    [synth]    SynthConfig fields plus source_domains, source_items, source_users
    [rqvae]    RqVaeConfig fields shared by both modalities
    [rqvae.text] / [rqvae.image]   per-modality overrides
    [model]    ModelConfig fields except vocab_size
    [pretrain] enabled plus TrainSchedule fields
    [finetune] TrainSchedule fields
    [tasks]    one boolean per task kind, e.g. AIG_Text = false
    [eval]     beam_size, ks, rerank, tasks
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib as tomli
except ImportError:  # Python < 3.11
    import tomli

from .corpus import STAGE_TASKS, Stage, TaskKind
from .data import SynthConfig
from .rqvae import RqVaeConfig
from .seq2seq import ModelConfig, TrainSchedule

PROFILES = ("paper", "desk")


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    profile: str = "desk"
    seed: int = 0
    paths: dict = field(default_factory=lambda: {
        "work_dir": "work", "text_embeddings": None, "image_embeddings": None,
        "interactions": None, "source_interactions": []})
    synth: dict = field(default_factory=dict)
    rqvae: dict = field(default_factory=dict)
    rqvae_text: dict = field(default_factory=dict)
    rqvae_image: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    tasks: dict = field(default_factory=lambda: {t.value: True for t in TaskKind})
    eval: dict = field(default_factory=lambda: {"beam_size": 20, "ks": [1, 5, 10], "rerank": True,
                                                "tasks": [TaskKind.NIG_TEXT.value, TaskKind.NIG_IMAGE.value]})

    @property
    def work_dir(self) -> Path:
        return Path(self.paths["work_dir"])

    def synth_config(self) -> SynthConfig:
        known = {f.name for f in dataclasses.fields(SynthConfig)}
        kw = {k: v for k, v in self.synth.items() if k in known}
        kw.setdefault("seed", self.seed)
        return SynthConfig(**kw)

    def source_domain_sizes(self) -> tuple[int, int, int]:
        return (int(self.synth.get("source_domains", 0)), int(self.synth.get("source_items", 500)),
                int(self.synth.get("source_users", 1000)))

    def rqvae_config(self, modality: str) -> RqVaeConfig:
        base = RqVaeConfig.desk() if self.profile == "desk" else RqVaeConfig()
        kw = {**self.rqvae, **(self.rqvae_text if modality == "text" else self.rqvae_image)}
        kw.setdefault("seed", self.seed)
        return dataclasses.replace(base, **kw)

    def model_config(self, vocab_size: int) -> ModelConfig:
        kw = {"seed": self.seed, **self.model}
        factory = ModelConfig.desk if self.profile == "desk" else ModelConfig.paper
        return factory(vocab_size, **kw)

    def pretrain_enabled(self) -> bool:
        return bool(self.pretrain.get("enabled", False))

    def schedule(self, stage: Stage | str) -> TrainSchedule:
        stage = Stage(stage)
        section = self.pretrain if stage is Stage.PRETRAIN else self.finetune
        kw = {k: v for k, v in section.items() if k != "enabled"}
        kw.setdefault("seed", self.seed)
        if self.profile == "desk":
            desk = dict(batch_size=256, epochs=3, lr=1e-3)
            if stage is Stage.FINETUNE:
                desk["warmup_steps"] = 50
            kw = {**desk, **kw}
        factory = TrainSchedule.pretrain if stage is Stage.PRETRAIN else TrainSchedule.finetune
        return factory(**kw)

    def enabled_tasks(self, stage: Stage | str) -> list[TaskKind]:
        stage = Stage(stage)
        on = [t for t in TaskKind if self.tasks.get(t.value, True)]
        return [t for t in on if t in STAGE_TASKS[stage]]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=str).encode()).hexdigest()

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}")
        for name in self.tasks:
            if name not in {t.value for t in TaskKind}:
                raise ConfigError(f"unknown task toggle {name!r}")
        if not any(self.tasks.get(t.value, True) for t in (TaskKind.NIG_TEXT, TaskKind.NIG_IMAGE)):
            raise ConfigError("at least one next-item task must stay enabled")
        for name in self.eval.get("tasks", []):
            TaskKind(name)
        try:
            self.synth_config().validate()
            for m in ("text", "image"):
                self.rqvae_config(m).validate()
            self.model_config(8).validate()
            self.schedule(Stage.FINETUNE)
            self.schedule(Stage.PRETRAIN)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None


_SECTIONS = {"paths", "synth", "rqvae", "model", "pretrain", "finetune", "tasks", "eval"}


def load_config(path=None, profile: str | None = None, seed: int | None = None) -> PipelineConfig:
    doc: dict = {}
    if path is not None:
        with open(path, "rb") as f:
            try:
                doc = tomli.load(f)
            except tomli.TOMLDecodeError as e:
                raise ConfigError(f"{path}: {e}") from None
    cfg = PipelineConfig()
    unknown = set(doc) - _SECTIONS - {"profile", "seed"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    cfg.profile = profile or doc.get("profile", cfg.profile)
    cfg.seed = seed if seed is not None else doc.get("seed", cfg.seed)
    for section in _SECTIONS:
        value = copy.deepcopy(doc.get(section, {}))
        if section == "rqvae":
            cfg.rqvae_text = value.pop("text", {})
            cfg.rqvae_image = value.pop("image", {})
            cfg.rqvae = value
        elif section in ("paths", "tasks", "eval"):
            getattr(cfg, section).update(value)
        else:
            setattr(cfg, section, value)
    cfg.validate()
    return cfg
