"""Item embeddings, interaction sequences, and the synthetic dataset generator."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

MAX_SEQ_LEN = 20
MIN_INTERACTIONS = 5


class Modality(str, enum.Enum):
    TEXT = "text"
    IMAGE = "image"


class DataFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DuplicateItem(DataFormatError):
    def __init__(self, item_id: str, line: int):
        self.item_id = item_id
        super().__init__(f"duplicate item id {item_id!r}", line)


class MissingEmbedding(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingMatrix:
    modality: Modality
    item_ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ValueError("vectors must be a 2-D matrix")
        if vectors.shape[0] != len(self.item_ids):
            raise ValueError(f"{vectors.shape[0]} rows but {len(self.item_ids)} item ids")
        if len(set(self.item_ids)) != len(self.item_ids):
            raise ValueError("item ids must be unique")
        if not np.isfinite(vectors).all():
            raise ValueError("embedding matrix contains non-finite values")
        vectors.setflags(write=False)
        object.__setattr__(self, "item_ids", tuple(self.item_ids))
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.item_ids)

    def index(self) -> dict[str, int]:
        return {item: i for i, item in enumerate(self.item_ids)}

    def subset(self, item_ids) -> EmbeddingMatrix:
        idx = self.index()
        rows = [idx[i] for i in item_ids]
        return EmbeddingMatrix(self.modality, tuple(item_ids), self.vectors[rows])


@dataclass
class InteractionDataset:
    users: list[tuple[str, list[str]]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.users)

    def item_set(self) -> set[str]:
        return {item for _, items in self.users for item in items}


def write_embeddings(matrix: EmbeddingMatrix, path) -> None:
    with open(path, "w") as f:
        f.write(f"#emb {matrix.modality.value} {len(matrix)} {matrix.dim}\n")
        for item, row in zip(matrix.item_ids, matrix.vectors):
            # repr() of a float64 round-trips exactly
            f.write(item + "\t" + " ".join(repr(float(x)) for x in row) + "\n")


def load_embeddings(path, modality: Modality | str) -> EmbeddingMatrix:
    """Parse an embedding file, checking the header against the requested modality.

    Every malformed line raises a ``DataFormatError`` that carries its 1-based line number.
    """
    modality = Modality(modality)
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DataFormatError("empty embedding file", 1)
    header = lines[0].split()
    if len(header) != 4 or header[0] != "#emb":
        raise DataFormatError("header must be '#emb <modality> <count> <dim>'", 1)
    try:
        file_modality = Modality(header[1])
        count, dim = int(header[2]), int(header[3])
    except ValueError as e:
        raise DataFormatError(f"bad header: {e}", 1) from None
    if file_modality != modality:
        raise DataFormatError(f"file holds {file_modality.value} embeddings, expected {modality.value}", 1)
    if count < 0 or dim < 1:
        raise DataFormatError("count must be >= 0 and dim >= 1", 1)

    ids: list[str] = []
    seen: set[str] = set()
    rows = np.empty((count, dim), dtype=np.float64)
    body = [(n, line) for n, line in enumerate(lines[1:], start=2) if line.strip()]
    if len(body) != count:
        raise DataFormatError(f"header declares {count} items, found {len(body)}", 1)
    for r, (n, line) in enumerate(body):
        item, sep, values = line.partition("\t")
        if not sep or not item:
            raise DataFormatError("expected '<item_id>\\t<values>'", n)
        if item in seen:
            raise DuplicateItem(item, n)
        try:
            vec = [float(v) for v in values.split()]
        except ValueError as e:
            raise DataFormatError(str(e), n) from None
        if len(vec) != dim:
            raise DataFormatError(f"expected {dim} values, got {len(vec)}", n)
        if not all(math.isfinite(v) for v in vec):
            raise DataFormatError(f"non-finite value for item {item!r}", n)
        seen.add(item)
        ids.append(item)
        rows[r] = vec
    return EmbeddingMatrix(modality, tuple(ids), rows)


def write_interactions(dataset: InteractionDataset, path) -> None:
    with open(path, "w") as f:
        for user, items in dataset.users:
            f.write(f"{user}\t{','.join(items)}\n")


def load_interactions(path, min_interactions: int = MIN_INTERACTIONS,
                      max_len: int = MAX_SEQ_LEN) -> InteractionDataset:
    """Read user sequences; short users are dropped and long ones keep their most recent items."""
    users = []
    dropped = 0
    with open(path) as f:
        for n, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            user, sep, rest = line.partition("\t")
            if not sep or not user or "\t" in rest:
                raise DataFormatError("expected '<user_id>\\t<item>,<item>,...'", n)
            items = [i for i in rest.split(",") if i]
            if not items:
                raise DataFormatError(f"user {user!r} has an empty item list", n)
            if len(items) < min_interactions:
                dropped += 1
                continue
            users.append((user, items[-max_len:]))
    if dropped:
        logger.warning("dropped %d users with fewer than %d interactions", dropped, min_interactions)
    return InteractionDataset(users)


def check_references(dataset: InteractionDataset, *matrices: EmbeddingMatrix) -> None:
    for m in matrices:
        known = set(m.item_ids)
        missing = sorted(dataset.item_set() - known)
        if missing:
            raise MissingEmbedding(
                f"{len(missing)} items lack a {m.modality.value} embedding, e.g. {missing[:5]}")


@dataclass(frozen=True)
class SynthConfig:
    n_items: int = 1000
    n_users: int = 2000
    dim: int = 32
    n_clusters: int = 8
    cross_modal_correlation: float = 0.9
    seed: int = 0
    # domains generated with the same center_seed share one semantic space
    center_seed: int | None = None
    cluster_spread: float = 1.0
    noise: float = 0.5
    min_len: int = 5
    max_len: int = 12
    stay_prob: float = 0.9
    popularity_exponent: float = 0.8
    id_prefix: str = ""

    def validate(self) -> None:
        if self.n_items < 1 or self.n_users < 1 or self.dim < 1:
            raise ValueError("n_items, n_users and dim must be positive")
        if not 1 <= self.n_clusters <= self.n_items:
            raise ValueError("need 1 <= n_clusters <= n_items")
        if not 0.0 <= self.cross_modal_correlation <= 1.0:
            raise ValueError("cross_modal_correlation must lie in [0, 1]")
        if not 0.0 <= self.stay_prob <= 1.0:
            raise ValueError("stay_prob must lie in [0, 1]")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.max_len > self.n_items:
            raise ValueError("max_len cannot exceed n_items (sequences never repeat items)")


@dataclass(frozen=True)
class SynthDataset:
    text: EmbeddingMatrix
    image: EmbeddingMatrix
    interactions: InteractionDataset
    text_labels: np.ndarray
    image_labels: np.ndarray


def generate_synthetic(config: SynthConfig) -> SynthDataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    center_rng = np.random.default_rng(config.seed if config.center_seed is None else config.center_seed)
    k, d = config.n_clusters, config.dim
    text_centers = center_rng.normal(scale=config.cluster_spread, size=(k, d))
    image_centers = center_rng.normal(scale=config.cluster_spread, size=(k, d))

    # balanced labels, then shuffled
    text_labels = rng.permutation(np.arange(config.n_items) % k)
    keep = rng.random(config.n_items) < config.cross_modal_correlation
    image_labels = np.where(keep, text_labels, rng.integers(0, k, size=config.n_items))

    text = text_centers[text_labels] + rng.normal(scale=config.noise, size=(config.n_items, d))
    image = image_centers[image_labels] + rng.normal(scale=config.noise, size=(config.n_items, d))
    ids = tuple(f"{config.id_prefix}i{n}" for n in range(config.n_items))

    popularity = np.empty(config.n_items)
    members = [np.flatnonzero(text_labels == c) for c in range(k)]
    for m in members:
        ranks = rng.permutation(len(m))
        popularity[m] = 1.0 / (ranks + 1.0) ** config.popularity_exponent

    users = []
    for u in range(config.n_users):
        length = int(rng.integers(config.min_len, config.max_len + 1))
        seq = _markov_walk(rng, length, text_labels, members, popularity, config.stay_prob)
        users.append((f"{config.id_prefix}u{u}", [ids[i] for i in seq]))

    return SynthDataset(
        text=EmbeddingMatrix(Modality.TEXT, ids, text),
        image=EmbeddingMatrix(Modality.IMAGE, ids, image),
        interactions=InteractionDataset(users),
        text_labels=text_labels,
        image_labels=image_labels,
    )


def _markov_walk(rng, length, labels, members, popularity, stay_prob):
    n_clusters = len(members)
    used: set[int] = set()
    p = popularity / popularity.sum()
    current = int(rng.choice(len(labels), p=p))
    seq = [current]
    used.add(current)
    while len(seq) < length:
        cluster = labels[current]
        if n_clusters > 1 and rng.random() >= stay_prob:
            cluster = (cluster + rng.integers(1, n_clusters)) % n_clusters
        cands = [i for i in members[cluster] if i not in used]
        if not cands:
            cands = [i for i in range(len(labels)) if i not in used]
        w = popularity[cands]
        current = int(cands[rng.choice(len(cands), p=w / w.sum())])
        seq.append(current)
        used.add(current)
    return seq
