"""Small encoder-decoder transformer trained with token-level negative log-likelihood."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .corpus import Stage, TaskExample

logger = logging.getLogger(__name__)

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2


@dataclass
class ModelConfig:
    vocab_size: int
    enc_layers: int = 4
    dec_layers: int = 4
    heads: int = 6
    head_dim: int = 64
    ffn_dim: int = 1024
    model_dim: int = 128
    dropout: float = 0.1
    max_positions: int = 256
    tie_embeddings: bool = False
    positional: str = "learned"
    seed: int = 0

    @classmethod
    def paper(cls, vocab_size: int, **overrides) -> ModelConfig:
        return cls(vocab_size=vocab_size, **overrides)

    @classmethod
    def desk(cls, vocab_size: int, **overrides) -> ModelConfig:
        base = dict(enc_layers=2, dec_layers=2, heads=4, head_dim=16, ffn_dim=256, model_dim=64, dropout=0.0)
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)

    def validate(self) -> None:
        if self.positional != "learned":
            raise ValueError(f"unsupported positional scheme {self.positional!r}")
        if min(self.enc_layers, self.dec_layers, self.heads, self.head_dim, self.ffn_dim, self.model_dim) < 1:
            raise ValueError("layer counts and widths must be positive")
        if self.vocab_size < 3:
            raise ValueError("vocab_size must cover the special tokens")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        inner = cfg.heads * cfg.head_dim
        self.heads, self.head_dim = cfg.heads, cfg.head_dim
        self.q = nn.Linear(cfg.model_dim, inner)
        self.k = nn.Linear(cfg.model_dim, inner)
        self.v = nn.Linear(cfg.model_dim, inner)
        self.o = nn.Linear(inner, cfg.model_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, memory, allowed):
        # allowed: bool, broadcastable to (B, 1, Tq, Tk)
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~allowed, float("-inf"))
        weights = self.drop(torch.softmax(scores, dim=-1))
        out = (weights @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.o(out)


class FeedForward(nn.Sequential):
    def __init__(self, cfg: ModelConfig):
        super().__init__(nn.Linear(cfg.model_dim, cfg.ffn_dim), nn.ReLU(), nn.Dropout(cfg.dropout),
                         nn.Linear(cfg.ffn_dim, cfg.model_dim))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1, self.attn = nn.LayerNorm(cfg.model_dim), Attention(cfg)
        self.norm2, self.ffn = nn.LayerNorm(cfg.model_dim), FeedForward(cfg)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, src_allowed):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, src_allowed))
        return x + self.drop(self.ffn(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1, self.self_attn = nn.LayerNorm(cfg.model_dim), Attention(cfg)
        self.norm2, self.cross_attn = nn.LayerNorm(cfg.model_dim), Attention(cfg)
        self.norm3, self.ffn = nn.LayerNorm(cfg.model_dim), FeedForward(cfg)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, memory, self_allowed, src_allowed):
        h = self.norm1(y)
        y = y + self.drop(self.self_attn(h, h, self_allowed))
        y = y + self.drop(self.cross_attn(self.norm2(y), memory, src_allowed))
        return y + self.drop(self.ffn(self.norm3(y)))


class Seq2SeqModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.model_dim)
        self.enc_pos = nn.Embedding(cfg.max_positions, cfg.model_dim)
        self.dec_pos = nn.Embedding(cfg.max_positions, cfg.model_dim)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.enc_norm = nn.LayerNorm(cfg.model_dim)
        self.dec_norm = nn.LayerNorm(cfg.model_dim)
        self.drop = nn.Dropout(cfg.dropout)
        self.lm_head = nn.Linear(cfg.model_dim, cfg.vocab_size, bias=False)
        if cfg.tie_embeddings:
            self.lm_head.weight = self.embed.weight
        self.stage: str | None = None

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.weight.dtype

    def encode(self, input_ids: torch.Tensor):
        src_allowed = (input_ids != PAD_ID)[:, None, None, :]
        pos = torch.arange(input_ids.shape[1])
        x = self.drop(self.embed(input_ids) + self.enc_pos(pos))
        for layer in self.encoder:
            x = layer(x, src_allowed)
        return self.enc_norm(x), src_allowed

    def decode(self, decoder_ids: torch.Tensor, memory, src_allowed):
        t = decoder_ids.shape[1]
        causal = torch.ones(t, t, dtype=torch.bool).tril()
        self_allowed = causal[None, None] & (decoder_ids != PAD_ID)[:, None, None, :]
        # a query never loses its own position, so padded rows stay finite
        self_allowed = self_allowed | torch.eye(t, dtype=torch.bool)[None, None]
        y = self.drop(self.embed(decoder_ids) + self.dec_pos(torch.arange(t)))
        for layer in self.decoder:
            y = layer(y, memory, self_allowed, src_allowed)
        return self.lm_head(self.dec_norm(y))

    def forward(self, input_ids: torch.Tensor, decoder_ids: torch.Tensor) -> torch.Tensor:
        memory, src_allowed = self.encode(input_ids)
        return self.decode(decoder_ids, memory, src_allowed)


def build_model(cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> Seq2SeqModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = Seq2SeqModel(cfg)
    return model.to(dtype)


def _check_ids(model: Seq2SeqModel, ids: torch.Tensor, what: str) -> None:
    if ids.numel() and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise ValueError(f"{what} holds ids outside [0, {model.config.vocab_size})")
    if ids.shape[-1] > model.config.max_positions:
        raise ValueError(f"{what} length {ids.shape[-1]} exceeds max_positions {model.config.max_positions}")


def forward(model: Seq2SeqModel, input_ids, decoder_ids) -> torch.Tensor:
    """Logits of shape (B, T_dec, vocab); 1-D inputs are treated as a batch of one."""
    input_ids = torch.as_tensor(input_ids, dtype=torch.long)
    decoder_ids = torch.as_tensor(decoder_ids, dtype=torch.long)
    single = input_ids.ndim == 1
    if single:
        input_ids, decoder_ids = input_ids[None], decoder_ids[None]
    _check_ids(model, input_ids, "input_ids")
    _check_ids(model, decoder_ids, "decoder_ids")
    logits = model(input_ids, decoder_ids)
    return logits[0] if single else logits


def nll_loss(logits: torch.Tensor, target_ids: torch.Tensor, pad_id: int = PAD_ID) -> torch.Tensor:
    target_ids = torch.as_tensor(target_ids, dtype=torch.long)
    if logits.shape[:-1] != target_ids.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match targets {tuple(target_ids.shape)}")
    if not (target_ids != pad_id).any():
        raise ValueError("every target position is padding")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target_ids.reshape(-1), ignore_index=pad_id)


def collate(examples, pad_id: int = PAD_ID):
    """Right-padded (input_ids, decoder_ids, target_ids); the decoder sees BOS + target[:-1]."""
    n = len(examples)
    src_len = max(len(e.input_ids) for e in examples)
    tgt_len = max(len(e.target_ids) for e in examples)
    src = torch.full((n, src_len), pad_id, dtype=torch.long)
    dec = torch.full((n, tgt_len), pad_id, dtype=torch.long)
    tgt = torch.full((n, tgt_len), pad_id, dtype=torch.long)
    for i, e in enumerate(examples):
        src[i, :len(e.input_ids)] = torch.tensor(e.input_ids)
        tgt[i, :len(e.target_ids)] = torch.tensor(e.target_ids)
        dec[i, 0] = BOS_ID
        dec[i, 1:len(e.target_ids)] = torch.tensor(e.target_ids[:-1])
    return src, dec, tgt


@dataclass
class TrainSchedule:
    stage: Stage = Stage.FINETUNE
    lr: float = 5e-4
    batch_size: int = 512
    epochs: int = 10
    weight_decay: float = 0.01
    warmup_steps: int = 0
    scheduler: str = "cosine"
    min_lr: float = 0.0
    checkpoint_every: int | None = None
    seed: int = 0

    @classmethod
    def pretrain(cls, **overrides) -> TrainSchedule:
        base = dict(stage=Stage.PRETRAIN, lr=1e-3, batch_size=4096, scheduler="constant")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def finetune(cls, **overrides) -> TrainSchedule:
        base = dict(stage=Stage.FINETUNE, lr=5e-4, batch_size=512, scheduler="cosine", warmup_steps=100)
        base.update(overrides)
        return cls(**base)

    def __post_init__(self):
        self.stage = Stage(self.stage)

    def total_steps(self, n_examples: int) -> int:
        return self.epochs * math.ceil(n_examples / self.batch_size)

    def validate(self, n_examples: int) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr and batch_size must be positive, epochs non-negative")
        if self.scheduler not in ("constant", "cosine"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        total = self.total_steps(n_examples)
        if total and self.warmup_steps > total:
            raise ValueError(f"warmup_steps {self.warmup_steps} exceeds total steps {total}")


def lr_at(step: int, schedule: TrainSchedule, total_steps: int) -> float:
    """Learning rate for 0-based ``step``: linear warm-up to the peak, then constant or cosine decay."""
    peak = schedule.lr
    if step < schedule.warmup_steps:
        return peak * (step + 1) / schedule.warmup_steps
    if schedule.scheduler == "constant":
        return peak
    span = max(total_steps - schedule.warmup_steps, 1)
    progress = min((step - schedule.warmup_steps) / span, 1.0)
    return schedule.min_lr + 0.5 * (peak - schedule.min_lr) * (1 + math.cos(math.pi * progress))


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: Seq2SeqModel, checkpoint_path=None):
        self.step = step
        self.last_good = last_good
        self.checkpoint_path = checkpoint_path
        super().__init__(f"NaN loss at step {step}")


@dataclass
class TrainResult:
    model: Seq2SeqModel
    curve: list[tuple[int, float, float]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "lr", "loss"])
            w.writerows(self.curve)


def train(model: Seq2SeqModel, examples: list[TaskExample], schedule: TrainSchedule,
          checkpoint_path=None, log_every: int = 0) -> TrainResult:
    schedule.validate(len(examples))
    result = TrainResult(model)
    total = schedule.total_steps(len(examples))
    if total == 0:
        return result
    opt = torch.optim.AdamW(model.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    rng = np.random.default_rng(schedule.seed)
    src_all, dec_all, tgt_all = collate(examples)
    src_lens = (src_all != PAD_ID).sum(1)
    previous = current = {k: v.clone() for k, v in model.state_dict().items()}
    step = 0
    model.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(schedule.seed)
        for epoch in range(schedule.epochs):
            order = torch.from_numpy(rng.permutation(len(examples)))
            for start in range(0, len(examples), schedule.batch_size):
                if step:
                    previous, current = current, {k: v.clone() for k, v in model.state_dict().items()}
                idx = order[start:start + schedule.batch_size]
                width = int(src_lens[idx].max())
                src, dec, tgt = src_all[idx, :width], dec_all[idx], tgt_all[idx]
                lr = lr_at(step, schedule, total)
                for group in opt.param_groups:
                    group["lr"] = lr
                loss = nll_loss(model(src, dec), tgt)
                if not torch.isfinite(loss):
                    # weights entering this step may already be poisoned
                    model.load_state_dict(previous)
                    if checkpoint_path is not None:
                        save_checkpoint(model, checkpoint_path, stage=schedule.stage)
                    raise TrainingDiverged(step, model, checkpoint_path)
                opt.zero_grad()
                loss.backward()
                opt.step()
                result.curve.append((step, lr, loss.item()))
                step += 1
                if schedule.checkpoint_every and step % schedule.checkpoint_every == 0:
                    if checkpoint_path is not None:
                        save_checkpoint(model, checkpoint_path, stage=schedule.stage)
                if log_every and step % log_every == 0:
                    logger.info("step %d lr %.2e loss %.4f", step, lr, loss.item())
    model.eval()
    model.stage = schedule.stage.value
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, stage=schedule.stage)
    return result


def save_checkpoint(model: Seq2SeqModel, path, stage: Stage | str | None = None, **meta) -> None:
    if stage is not None:
        model.stage = Stage(stage).value
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    doc = {"config": asdict(model.config), "stage": model.stage, "dtype": str(model.dtype), **meta}
    checkpoint.save(path, arrays, doc, kind="seq2seq")


def load_checkpoint(path) -> tuple[Seq2SeqModel, dict]:
    arrays, meta = checkpoint.load(path, kind="seq2seq")
    dtype = getattr(torch, meta["dtype"].removeprefix("torch."))
    model = Seq2SeqModel(ModelConfig(**meta["config"])).to(dtype)
    try:
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    except RuntimeError as e:
        raise checkpoint.CorruptCheckpoint(f"{path}: {e}") from None
    model.stage = meta.get("stage")
    model.eval()
    return model, meta
