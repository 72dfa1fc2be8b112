"""Full-ranking leave-one-out evaluation: Recall@K and NDCG@K."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import TaskKind, TaskExample
from .generate import CodeTrie, RankedList, beam_search_batch, normalized, rerank as fuse

DEFAULT_KS = (1, 5, 10)
FUSED = "fused"


def _rank(ranked, target) -> int | None:
    items = ranked.items if isinstance(ranked, RankedList) else list(ranked)
    try:
        return items.index(target) + 1
    except ValueError:
        return None


def recall_at_k(ranked, target: str, k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    rank = _rank(ranked, target)
    return int(rank is not None and rank <= k)


def ndcg_at_k(ranked, target: str, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    rank = _rank(ranked, target)
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


def expected_random_recall(n_items: int, k: int) -> float:
    """Recall@k of a ranking drawn uniformly over ``n_items`` candidates."""
    return min(1.0, k / n_items)


@dataclass
class MetricsReport:
    ks: tuple[int, ...] = DEFAULT_KS
    recall: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)
    per_task: dict[str, dict[str, float]] = field(default_factory=dict)
    headline: str = ""
    n_users: int = 0
    config: dict = field(default_factory=dict)
    seed: int = 0

    def check(self) -> None:
        r = [self.recall[k] for k in sorted(self.ks)]
        if any(a > b + 1e-12 for a, b in zip(r, r[1:])):
            raise AssertionError(f"recall is not monotone in K: {r}")
        if any(v > 1 + 1e-12 for v in self.ndcg.values()):
            raise AssertionError("ndcg above 1")
        if 1 in self.ks and abs(self.ndcg[1] - self.recall[1]) > 1e-12:
            raise AssertionError("ndcg@1 must equal recall@1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall"] = {str(k): v for k, v in self.recall.items()}
        d["ndcg"] = {str(k): v for k, v in self.ndcg.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(
            ks=tuple(d["ks"]),
            recall={int(k): v for k, v in d["recall"].items()},
            ndcg={int(k): v for k, v in d["ndcg"].items()},
            per_task=d["per_task"], headline=d["headline"], n_users=d["n_users"],
            config=d.get("config", {}), seed=d.get("seed", 0),
        )

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def read_json(cls, path) -> MetricsReport:
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def columns(self) -> list[str]:
        return [f"{m}@{k}" for m in ("recall", "ndcg") for k in self.ks]

    def write_tsv(self, path) -> None:
        """One row per task (and the fused list when present): ``task`` then recall@K, ndcg@K columns."""
        cols = self.columns()
        with open(path, "w") as f:
            f.write("task\t" + "\t".join(cols) + "\n")
            for task, metrics in self.per_task.items():
                f.write(task + "\t" + "\t".join(f"{metrics[c]:.6f}" for c in cols) + "\n")


def _score(lists: list[RankedList], targets: list[str], ks) -> dict[str, float]:
    out = {}
    for k in ks:
        out[f"recall@{k}"] = float(np.mean([recall_at_k(r, t, k) for r, t in zip(lists, targets)]))
        out[f"ndcg@{k}"] = float(np.mean([ndcg_at_k(r, t, k) for r, t in zip(lists, targets)]))
    return out


def rank_users(model, examples: list[TaskExample], trie: CodeTrie, beam_size: int = 20,
               constrained: bool = True) -> list[RankedList]:
    lists = beam_search_batch(model, [e.input_ids for e in examples], trie, beam_size, constrained)
    for lst, e in zip(lists, examples):
        lst.tag = e.task.value
    return lists


def evaluate_run(model, tries: dict, test_examples: list[TaskExample], tasks=(TaskKind.NIG_TEXT,),
                 beam_size: int = 20, rerank: bool = False, ks=DEFAULT_KS, seed: int = 0,
                 config: dict | None = None, ranked_out: list | None = None) -> MetricsReport:
    """Average per-user metrics for each task; with ``rerank`` the text and image
    next-item lists are fused and scored as an extra ``fused`` row."""
    tasks = [TaskKind(t) for t in tasks]
    if rerank:
        for needed in (TaskKind.NIG_TEXT, TaskKind.NIG_IMAGE):
            if needed not in tasks:
                tasks.append(needed)
    by_task: dict[TaskKind, list[TaskExample]] = {t: [] for t in tasks}
    for e in test_examples:
        if e.task in by_task:
            by_task[e.task].append(e)
    if not any(by_task.values()):
        raise ValueError("no test examples for the requested tasks")

    report = MetricsReport(ks=tuple(ks), n_users=0, config=dict(config or {}), seed=seed)
    lists: dict[TaskKind, dict[str, RankedList]] = {}
    targets: dict[str, str] = {}
    for task in tasks:
        ex = sorted(by_task[task], key=lambda e: e.user)
        if not ex:
            continue
        ranked = rank_users(model, ex, tries[task.target], beam_size)
        lists[task] = {e.user: r for e, r in zip(ex, ranked)}
        report.per_task[task.value] = _score(ranked, [e.target_item for e in ex], ks)
        targets.update({e.user: e.target_item for e in ex})
        if ranked_out is not None:
            ranked_out.extend((e.user, r) for e, r in zip(ex, ranked))

    if rerank:
        users = sorted(lists[TaskKind.NIG_TEXT].keys() & lists[TaskKind.NIG_IMAGE].keys())
        fused = [fuse(normalized(lists[TaskKind.NIG_TEXT][u]), normalized(lists[TaskKind.NIG_IMAGE][u]))
                 for u in users]
        report.per_task[FUSED] = _score(fused, [targets[u] for u in users], ks)
        if ranked_out is not None:
            ranked_out.extend(zip(users, fused))

    report.headline = FUSED if rerank else next(t.value for t in tasks if t.value in report.per_task)
    head = report.per_task[report.headline]
    report.recall = {k: head[f"recall@{k}"] for k in ks}
    report.ndcg = {k: head[f"ndcg@{k}"] for k in ks}
    report.n_users = len({e.user for e in test_examples if e.task in lists})
    report.check()
    return report
