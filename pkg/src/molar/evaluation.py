"""Full-ranking NDCG@K / Recall@K with a single held-out target per user."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from molar.data import SplitDataset
from molar.errors import ConfigError

DEFAULT_KS = (10, 20, 50)


def rank_target(user_scores, target_item: int) -> int:
    """1 + #items scoring strictly higher + #equal-scoring items with a smaller id."""
    scores = np.asarray(user_scores, dtype=np.float64)
    t = scores[target_item]
    higher = int(np.count_nonzero(scores > t))
    ties_before = int(np.count_nonzero(scores[:target_item] == t))
    return 1 + higher + ties_before


def rank_targets(score_matrix: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rank_target` over rows of a [U, N] score matrix."""
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    t = score_matrix[np.arange(len(targets)), targets][:, None]
    before = np.arange(score_matrix.shape[1])[None, :] < targets[:, None]
    return 1 + np.count_nonzero(score_matrix > t, axis=1) + np.count_nonzero((score_matrix == t) & before, axis=1)


def ndcg_at_k(rank: int, k: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def recall_at_k(rank: int, k: int) -> float:
    return 1.0 if rank <= k else 0.0


@dataclass
class RankResult:
    user_id: int
    rank_of_target: int
    k_values: tuple[int, ...]


@dataclass
class MetricsReport:
    ndcg: dict[int, float]
    recall: dict[int, float]
    n_users: int
    config_hash: str = ""
    wall_clock: float = 0.0
    ranks: list[RankResult] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        # wall clock is excluded so identical runs give byte-identical files
        return {
            "config_hash": self.config_hash,
            "n_users": self.n_users,
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
        }

    def rows(self) -> list[tuple]:
        out = []
        for name, values in (("ndcg", self.ndcg), ("recall", self.recall)):
            for k, v in sorted(values.items()):
                out.append((name, k, v, self.n_users, self.config_hash))
        return out

    def write(self, out_dir: str | Path, stem: str = "metrics") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"{stem}.json", "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)
            fh.write("\n")
        with open(out_dir / f"{stem}.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "k", "value", "n_users", "config_hash"])
            for name, k, v, n, h in self.rows():
                w.writerow([name, k, repr(v), n, h])

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        return cls({int(k): v for k, v in obj["ndcg"].items()}, {int(k): v for k, v in obj["recall"].items()},
                   obj["n_users"], obj.get("config_hash", ""))


def report_from_ranks(user_ids, ranks: np.ndarray, k_list, config_hash: str = "") -> MetricsReport:
    ks = tuple(int(k) for k in k_list)
    ranks = np.asarray(ranks)
    ndcg = {k: float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0))) for k in ks}
    recall = {k: float(np.mean(ranks <= k)) for k in ks}
    results = [RankResult(int(u), int(r), ks) for u, r in zip(user_ids, ranks)]
    return MetricsReport(ndcg, recall, len(ranks), config_hash, ranks=results)


class Scorer(Protocol):
    def score(self, user_ids: list[int], sequences: list[list[int]], which: str) -> np.ndarray:
        """[U, num_items] scores for the given users' input sequences."""


class OracleScorer:
    """Scores the held-out target 1 and everything else 0."""

    kind = "oracle"

    def __init__(self, split: SplitDataset, anti: bool = False):
        self.split = split
        self.anti = anti

    def score(self, user_ids, sequences, which):
        out = np.zeros((len(user_ids), self.split.num_items))
        for row, u in enumerate(user_ids):
            out[row, getattr(self.split.users[u], f"{which}_target")] = -1.0 if self.anti else 1.0
        return out


class RandomScorer:
    """i.i.d. uniform scores; a fresh stream per call derived from ``seed``."""

    kind = "random"

    def __init__(self, num_items: int, seed: int = 0):
        self.num_items = num_items
        self.seed = seed

    def score(self, user_ids, sequences, which):
        rng = np.random.default_rng([self.seed, 0 if which == "valid" else 1])
        return rng.random((len(user_ids), self.num_items))


def history_items(split: SplitDataset, user: int, which: str) -> list[int]:
    """Everything the user saw before the ``which`` target, target excluded."""
    rec = split.users[user]
    seen = rec.train if which == "valid" else rec.train + [rec.valid_target]
    target = getattr(rec, f"{which}_target")
    return [i for i in seen if i != target]


def evaluate(model, split: SplitDataset, k_list=DEFAULT_KS, which: str = "test",
             config_hash: str = "", batch_size: int = 512, filter_history: bool = False) -> MetricsReport:
    """Rank each user's held-out target against the whole catalog.

    With ``filter_history`` the items a user already interacted with are
    pushed below every other item before ranking.
    """
    if not k_list or any(int(k) < 1 for k in k_list):
        raise ConfigError(f"invalid k list {k_list!r}")
    start = time.perf_counter()
    uids, seqs, targets = split.inputs(which)
    ranks = np.empty(len(uids), dtype=np.int64)
    for lo in range(0, len(uids), batch_size):
        hi = lo + batch_size
        scores = np.array(model.score(uids[lo:hi], seqs[lo:hi], which), dtype=np.float64)
        if scores.shape != (len(uids[lo:hi]), split.num_items):
            raise ConfigError(f"scorer returned shape {scores.shape}, expected ({hi - lo}, {split.num_items})")
        if not np.all(np.isfinite(scores)):
            raise ConfigError("scorer returned non-finite scores")
        if filter_history:
            for row, u in enumerate(uids[lo:hi]):
                scores[row, history_items(split, u, which)] = -np.inf
        ranks[lo:hi] = rank_targets(scores, targets[lo:hi])
    report = report_from_ranks(uids, ranks, k_list, config_hash)
    report.wall_clock = time.perf_counter() - start
    return report


def parse_k_list(text: str) -> list[int]:
    try:
        ks = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse k list {text!r}; expected e.g. 10,20,50") from exc
    if not ks or any(k < 1 for k in ks):
        raise ConfigError(f"k list {text!r} must contain positive integers")
    return ks
