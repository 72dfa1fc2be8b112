"""Residual-quantized autoencoder that turns item embeddings into code tuples.

One translator is trained per modality. Everything runs in float64.
"""
from __future__ import annotations

import copy
import logging
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .data import EmbeddingMatrix, Modality

logger = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass
class RqVaeConfig:
    levels: int = 4
    codebook_size: int = 256
    code_dim: int = 32
    encoder_hidden: tuple[int, ...] = (512, 256, 128)
    decoder_hidden: tuple[int, ...] = (128, 256, 512)
    beta: float = 0.25
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 1024
    epochs: int = 100
    kmeans_init_iters: int = 20
    kmeans_restarts: int = 3
    seed: int = 0

    @classmethod
    def desk(cls, **overrides) -> RqVaeConfig:
        base = dict(levels=3, codebook_size=16, code_dim=16, encoder_hidden=(64,),
                    decoder_hidden=(64,), batch_size=128, epochs=60)
        base.update(overrides)
        return cls(**base)

    def __post_init__(self):
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)

    def validate(self, n_items: int | None = None) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.code_dim < 1 or self.batch_size < 1 or self.kmeans_restarts < 1:
            raise ValueError("code_dim, batch_size and kmeans_restarts must be positive")
        if self.epochs < 0 or self.kmeans_init_iters < 0:
            raise ValueError("epochs and kmeans_init_iters must be non-negative")
        if n_items is not None and self.codebook_size ** self.levels < n_items:
            raise ValueError(
                f"capacity K^L = {self.codebook_size}^{self.levels} is below the item count {n_items}")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str):
        self.term = term
        super().__init__(f"non-finite value in loss term {term!r}")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_good: QuantTranslator):
        self.epoch = epoch
        self.last_good = last_good
        super().__init__(f"loss became NaN in epoch {epoch}; last good translator attached")


def mlp(sizes: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b, dtype=DTYPE))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class QuantTranslator(nn.Module):
    def __init__(self, modality: Modality | str, input_dim: int, config: RqVaeConfig):
        super().__init__()
        self.modality = Modality(modality)
        self.input_dim = input_dim
        self.config = config
        self.encoder = mlp([input_dim, *config.encoder_hidden, config.code_dim])
        self.decoder = mlp([config.code_dim, *config.decoder_hidden, input_dim])
        self.codebooks = nn.Parameter(
            torch.zeros(config.levels, config.codebook_size, config.code_dim, dtype=DTYPE))
        self.log: list[dict] = []

    @property
    def levels(self) -> int:
        return self.config.levels

    def codebook_array(self) -> np.ndarray:
        return self.codebooks.detach().numpy().copy()

    def save(self, path) -> None:
        arrays = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        meta = {"modality": self.modality.value, "input_dim": self.input_dim,
                "config": asdict(self.config), "log": self.log}
        checkpoint.save(path, arrays, meta, kind="quant_translator")

    @classmethod
    def load(cls, path) -> QuantTranslator:
        arrays, meta = checkpoint.load(path, kind="quant_translator")
        translator = cls(meta["modality"], meta["input_dim"], RqVaeConfig(**meta["config"]))
        try:
            translator.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
        except RuntimeError as e:
            raise checkpoint.CorruptCheckpoint(f"{path}: {e}") from None
        translator.log = meta["log"]
        return translator


def _as_batch(x) -> tuple[torch.Tensor, bool]:
    t = torch.from_numpy(np.array(x, dtype=np.float64))
    return (t.unsqueeze(0), True) if t.ndim == 1 else (t, False)


def _forward(net: nn.Sequential, x, expected: int) -> np.ndarray:
    t, single = _as_batch(x)
    if t.shape[-1] != expected:
        raise ValueError(f"input has dimension {t.shape[-1]}, network expects {expected}")
    with torch.no_grad():
        out = net(t).numpy()
    return out[0] if single else out


def encode(translator: QuantTranslator, h) -> np.ndarray:
    return _forward(translator.encoder, h, translator.input_dim)


def decode(translator: QuantTranslator, z_hat) -> np.ndarray:
    return _forward(translator.decoder, z_hat, translator.config.code_dim)


@dataclass(frozen=True)
class QuantizationResult:
    code: tuple[int, ...]
    residuals: np.ndarray        # (L, D): r_1 = z, r_{i+1} = r_i - v_{c_i}
    z_hat: np.ndarray            # (D,)
    level_distances: np.ndarray  # (L, K) squared distances of r_i to every level-i codeword

    @property
    def z(self) -> np.ndarray:
        return self.residuals[0]

    @property
    def final_residual(self) -> np.ndarray:
        return self.z - self.z_hat


def quantize_batch(codebooks: np.ndarray, z: np.ndarray):
    """Greedy residual quantization of a batch.

    Returns codes (N, L), residuals (N, L, D), z_hat (N, D), distances (N, L, K).
    Ties in the per-level argmin go to the smallest codeword index.
    """
    codebooks = np.asarray(codebooks, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n_levels, k, dim = codebooks.shape
    if z.ndim != 2 or z.shape[1] != dim:
        raise ValueError(f"z must have shape (N, {dim})")
    n = z.shape[0]
    codes = np.empty((n, n_levels), dtype=np.int64)
    residuals = np.empty((n, n_levels, dim))
    dists = np.empty((n, n_levels, k))
    z_hat = np.zeros((n, dim))
    r = z.copy()
    for level in range(n_levels):
        residuals[:, level] = r
        d = ((r[:, None, :] - codebooks[level][None, :, :]) ** 2).sum(-1)
        c = d.argmin(axis=1)
        dists[:, level] = d
        codes[:, level] = c
        v = codebooks[level][c]
        z_hat += v
        r = r - v
    return codes, residuals, z_hat, dists


def quantize(codebooks, z) -> QuantizationResult:
    codes, residuals, z_hat, dists = quantize_batch(codebooks, np.asarray(z, dtype=np.float64)[None, :])
    return QuantizationResult(tuple(int(c) for c in codes[0]), residuals[0], z_hat[0], dists[0])


class LossTerms(NamedTuple):
    recon: torch.Tensor
    rq: torch.Tensor
    total: torch.Tensor


def _loss_terms(translator: QuantTranslator, h: torch.Tensor):
    z = translator.encoder(h)
    codebooks = translator.codebooks
    r = z
    z_hat = torch.zeros_like(z)
    codebook_term = torch.zeros(z.shape[0], dtype=DTYPE)
    commit_term = torch.zeros(z.shape[0], dtype=DTYPE)
    for level in range(codebooks.shape[0]):
        cb = codebooks[level]
        d = ((r.detach()[:, None, :] - cb.detach()[None, :, :]) ** 2).sum(-1)
        v = cb[d.argmin(dim=1)]
        codebook_term = codebook_term + ((r.detach() - v) ** 2).sum(-1)
        commit_term = commit_term + ((r - v.detach()) ** 2).sum(-1)
        z_hat = z_hat + v
        r = r - v.detach()
    # straight-through: decoder sees z_hat, encoder receives the decoder's gradient
    h_hat = translator.decoder(z + (z_hat - z).detach())
    recon = ((h - h_hat) ** 2).sum(-1)
    return recon, codebook_term, commit_term


def compute_loss(translator: QuantTranslator, h, beta: float | None = None) -> LossTerms:
    """Reconstruction and RQ losses, averaged over the batch when ``h`` is 2-D.

    The returned tensors carry gradients: codewords are pulled toward the detached
    residuals, residuals are pulled (scaled by beta) toward the detached codewords.
    """
    beta = translator.config.beta if beta is None else beta
    t = torch.as_tensor(h, dtype=DTYPE)
    if t.ndim == 1:
        t = t.unsqueeze(0)
    if t.shape[-1] != translator.input_dim:
        raise ValueError(f"h has dimension {t.shape[-1]}, translator expects {translator.input_dim}")
    recon, codebook_term, commit_term = _loss_terms(translator, t)
    recon = recon.mean()
    rq = (codebook_term + beta * commit_term).mean()
    total = recon + rq
    for name, value in (("recon", recon), ("rq", rq), ("total", total)):
        if not torch.isfinite(value):
            raise NonFiniteLoss(name)
    return LossTerms(recon, rq, total)


def kmeans(x: np.ndarray, k: int, iters: int, seed: int, restarts: int = 1) -> np.ndarray:
    """k-means++ seeding followed by ``iters`` Lloyd steps, keeping the lowest-inertia
    of ``restarts`` independent runs.

    Rows are put in lexicographic order first, so the result does not depend on
    the order of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    x = x[np.lexsort(x.T[::-1])]
    n_distinct = len(np.unique(x, axis=0))
    if n_distinct < k:
        warnings.warn(f"only {n_distinct} distinct points for {k} centroids; padding with perturbed duplicates")
        rng = np.random.default_rng(seed)
        scale = 1e-3 * (float(x.std()) or 1.0)
        extra = x[rng.integers(len(x), size=k - n_distinct)]
        extra = extra + rng.normal(scale=scale, size=extra.shape)
        x = np.concatenate([x, extra])
        x = x[np.lexsort(x.T[::-1])]
    best, best_inertia = None, np.inf
    for run in range(max(restarts, 1)):
        centers = _lloyd(x, k, iters, np.random.default_rng(seed + 7919 * run))
        inertia = ((x[:, None, :] - centers[None]) ** 2).sum(-1).min(axis=1).sum()
        if inertia < best_inertia:
            best, best_inertia = centers, inertia
    return best


def _lloyd(x, k, iters, rng):
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(len(x))]
    closest = ((x - centers[0]) ** 2).sum(-1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(len(x)))
        else:
            idx = int(rng.choice(len(x), p=closest / total))
        centers[j] = x[idx]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(-1))

    for _ in range(iters):
        assign = ((x[:, None, :] - centers[None]) ** 2).sum(-1).argmin(axis=1)
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers


def init_codebooks(z_batch, config: RqVaeConfig) -> np.ndarray:
    z = np.asarray(z_batch, dtype=np.float64)
    if len(z) < config.codebook_size:
        raise ValueError(f"need at least {config.codebook_size} rows to initialise codebooks, got {len(z)}")
    books = np.empty((config.levels, config.codebook_size, z.shape[1]))
    r = z
    for level in range(config.levels):
        books[level] = kmeans(r, config.codebook_size, config.kmeans_init_iters, config.seed + level,
                              config.kmeans_restarts)
        assign = ((r[:, None, :] - books[level][None]) ** 2).sum(-1).argmin(axis=1)
        r = r - books[level][assign]
    return books


def train_translator(embeddings: EmbeddingMatrix, config: RqVaeConfig) -> QuantTranslator:
    config.validate(len(embeddings))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        translator = QuantTranslator(embeddings.modality, embeddings.dim, config)
    h = torch.from_numpy(embeddings.vectors.copy())
    with torch.no_grad():
        books = init_codebooks(translator.encoder(h).numpy(), config)
        translator.codebooks.copy_(torch.from_numpy(books))
    if config.epochs == 0:
        return translator

    opt = torch.optim.AdamW(translator.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    n = len(h)
    last_good = copy.deepcopy(translator)
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(3)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = h[torch.from_numpy(order[start:start + config.batch_size])]
            try:
                terms = compute_loss(translator, batch)
            except NonFiniteLoss:
                raise TrainingDiverged(epoch, last_good) from None
            opt.zero_grad()
            terms.total.backward()
            opt.step()
            sums += len(batch) * np.array([t.item() for t in terms])
        if not np.isfinite(translator.codebooks.detach().numpy()).all():
            raise TrainingDiverged(epoch, last_good)
        recon, rq, total = sums / n
        translator.log.append({"epoch": epoch, "recon": recon, "rq": rq, "total": total})
        last_good = copy.deepcopy(translator)
        logger.debug("%s translator epoch %d: recon %.4f rq %.4f", embeddings.modality.value, epoch, recon, rq)
    return translator


@dataclass
class UsageStats:
    level_counts: np.ndarray            # (L, K) code frequencies per level
    colliding_tuples: int               # tuples shared by more than one item
    colliding_items: int                # items sitting on such tuples
    groups: dict[tuple[int, ...], list[str]] = field(default_factory=dict)


def quantize_all(translator: QuantTranslator, embeddings: EmbeddingMatrix):
    z = encode(translator, embeddings.vectors)
    codes, residuals, z_hat, dists = quantize_batch(translator.codebook_array(), z)
    results = [
        (item, QuantizationResult(tuple(int(c) for c in codes[i]), residuals[i], z_hat[i], dists[i]))
        for i, item in enumerate(embeddings.item_ids)
    ]
    k = translator.config.codebook_size
    counts = np.stack([np.bincount(codes[:, l], minlength=k) for l in range(codes.shape[1])])
    tally = Counter(r.code for _, r in results)
    groups: dict[tuple[int, ...], list[str]] = {}
    for item, r in results:
        if tally[r.code] > 1:
            groups.setdefault(r.code, []).append(item)
    stats = UsageStats(counts, len(groups), sum(len(g) for g in groups.values()), groups)
    return results, stats
