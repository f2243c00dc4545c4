"""Next-item evaluation under the global temporal split.

Scoring goes through the sequential branch only; user embeddings are never read.
Metrics use one ground-truth item per case, so the ideal DCG is 1 and Recall@K
coincides with HR@K.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np
import torch

from createrec.data import DatasetBundle, Split

DEFAULT_KS = (10, 100)


class EvalCase(NamedTuple):
    user: int
    history: np.ndarray
    target: int


class RankedList(NamedTuple):
    user: int
    items: list[int]
    k: int


def ndcg_at_k(rank: Optional[int], k: int) -> float:
    """``1 / log2(rank + 1)`` when ``rank <= k``; ``rank=None`` is a miss."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


def recall_at_k(rank: Optional[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 if rank is not None and rank <= k else 0.0


hit_rate_at_k = recall_at_k


def coverage_at_k(lists: Iterable[Sequence[int]], k: int, num_items: int) -> float:
    """Fraction of the catalog appearing in at least one top-``k`` list."""
    seen: set[int] = set()
    for items in lists:
        seen.update(int(i) for i in list(items)[:k])
    return len(seen) / num_items


def _first_per_user(split: Split) -> dict[int, list[tuple[int, int]]]:
    order = np.lexsort((split.timestamps, split.users))
    per_user: dict[int, list[tuple[int, int]]] = {}
    for u, i, t in zip(split.users[order].tolist(), split.items[order].tolist(), split.timestamps[order].tolist()):
        per_user.setdefault(u, []).append((t, i))
    return per_user


def evaluation_cases(
    bundle: DatasetBundle, split: str = "test", all_successive: bool = False
) -> tuple[list[EvalCase], int]:
    """Evaluation cases and the number of users skipped for lacking any history.

    Test cases see train + validation as history; validation cases see train only.
    By default each user contributes its first interaction in the split. With
    ``all_successive`` every interaction is a case whose history also includes the
    earlier ones from the same split.
    """
    if split == "test":
        past = bundle.train.concat(bundle.validation) if len(bundle.validation) else bundle.train
        target_split = bundle.test
    elif split == "validation":
        past = bundle.train
        target_split = bundle.validation
    else:
        raise ValueError(f"unknown split {split!r}")
    order = np.lexsort((past.timestamps, past.users))
    pu, pi = past.users[order], past.items[order]
    bounds = np.searchsorted(pu, np.arange(bundle.num_users + 1))

    cases: list[EvalCase] = []
    skipped = 0
    for user, events in sorted(_first_per_user(target_split).items()):
        hist = pi[bounds[user]:bounds[user + 1]]
        if len(hist) == 0:
            skipped += 1
            continue
        if not all_successive:
            cases.append(EvalCase(user, hist, events[0][1]))
            continue
        for _, item in events:
            cases.append(EvalCase(user, hist, item))
            hist = np.append(hist, item)
    return cases, skipped


Scorer = Callable[[Sequence[np.ndarray]], torch.Tensor]


def sequential_scorer(encoder) -> Scorer:
    """Catalog scores from the sequential branch of a trained model."""

    def score(histories: Sequence[np.ndarray]) -> torch.Tensor:
        with torch.no_grad():
            return encoder.score_catalog(encoder.predict_states(histories)).double()

    return score


def rank_cases(
    scorer: Scorer,
    cases: Sequence[EvalCase],
    max_k: int,
    filter_seen: bool = True,
    batch_size: int = 256,
) -> tuple[list[Optional[int]], list[list[int]]]:
    """Target rank (``None`` when filtered out) and top-``max_k`` list per case.

    Ties in score are broken by ascending item id.
    """
    ranks: list[Optional[int]] = []
    lists: list[list[int]] = []
    for start in range(0, len(cases), batch_size):
        chunk = cases[start:start + batch_size]
        scores = scorer([c.history for c in chunk]).clone()
        n = scores.shape[1]
        if filter_seen:
            for r, c in enumerate(chunk):
                scores[r, torch.from_numpy(np.unique(c.history))] = float("-inf")
        ids = torch.arange(n)
        targets = torch.tensor([c.target for c in chunk])
        s_t = scores[torch.arange(len(chunk)), targets]
        above = (scores > s_t[:, None]).sum(1)
        ties = ((scores == s_t[:, None]) & (ids[None, :] < targets[:, None])).sum(1)
        order = torch.sort(scores, dim=1, descending=True, stable=True).indices[:, :max_k]
        for r in range(len(chunk)):
            ranks.append(None if math.isinf(float(s_t[r])) and s_t[r] < 0 else int(above[r] + ties[r]) + 1)
            top = order[r]
            top = top[torch.isfinite(scores[r, top])]
            lists.append(top.tolist())
    return ranks, lists


def recommend(
    encoder, user: int, history: np.ndarray, k: int, filter_seen: bool = True
) -> RankedList:
    if len(history) == 0:
        raise ValueError(f"user {user} has an empty history")
    _, lists = rank_cases(sequential_scorer(encoder), [EvalCase(user, np.asarray(history), 0)], k, filter_seen)
    return RankedList(user, lists[0], k)


@dataclass
class MetricsReport:
    metrics: dict[str, float]
    num_eval_users: int
    num_eval_cases: int
    num_dropped_targets: int
    num_skipped_users: int
    seed: Optional[int] = None
    config_hash: Optional[str] = None
    split: str = "test"
    filter_seen: bool = True
    extra: dict = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        return self.metrics[key]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def metrics_from_ranks(
    ranks: Sequence[Optional[int]], lists: Sequence[Sequence[int]], num_items: int, ks: Sequence[int] = DEFAULT_KS
) -> dict[str, float]:
    if not ranks:
        raise ValueError("no evaluable cases")
    out: dict[str, float] = {}
    for k in ks:
        out[f"NDCG@{k}"] = 100.0 * float(np.mean([ndcg_at_k(r, k) for r in ranks]))
        out[f"Recall@{k}"] = 100.0 * float(np.mean([recall_at_k(r, k) for r in ranks]))
        out[f"Cov@{k}"] = 100.0 * coverage_at_k(lists, k, num_items)
    return out


def evaluate_scorer(
    scorer: Scorer,
    bundle: DatasetBundle,
    ks: Sequence[int] = DEFAULT_KS,
    filter_seen: bool = True,
    split: str = "test",
    all_successive: bool = False,
) -> MetricsReport:
    cases, skipped = evaluation_cases(bundle, split, all_successive)
    if not cases:
        raise ValueError(f"no evaluable users in the {split} split")
    ranks, lists = rank_cases(scorer, cases, max(ks), filter_seen)
    return MetricsReport(
        metrics=metrics_from_ranks(ranks, lists, bundle.num_items, ks),
        num_eval_users=len({c.user for c in cases}),
        num_eval_cases=len(cases),
        num_dropped_targets=bundle.num_dropped_test if split == "test" else 0,
        num_skipped_users=skipped,
        split=split,
        filter_seen=filter_seen,
    )


def evaluate(
    encoder,
    bundle: DatasetBundle,
    ks: Sequence[int] = DEFAULT_KS,
    filter_seen: bool = True,
    split: str = "test",
    all_successive: bool = False,
) -> MetricsReport:
    """Metrics of a trained sequential encoder on the given split."""
    return evaluate_scorer(sequential_scorer(encoder), bundle, ks, filter_seen, split, all_successive)


# -- non-personalized baselines ----------------------------------------------------------

def baseline_random(num_lists: int, num_items: int, k: int, seed: int = 0) -> list[list[int]]:
    """``k`` distinct items drawn uniformly for each list."""
    if k > num_items:
        raise ValueError(f"k={k} exceeds catalog size {num_items}")
    rng = np.random.default_rng(seed)
    return [rng.choice(num_items, size=k, replace=False).tolist() for _ in range(num_lists)]


def baseline_poprnd(num_lists: int, popularity: np.ndarray, k: int, seed: int = 0) -> list[list[int]]:
    """``k`` distinct items drawn with probability proportional to training popularity."""
    popularity = np.asarray(popularity, dtype=np.float64)
    if k > len(popularity):
        raise ValueError(f"k={k} exceeds catalog size {len(popularity)}")
    if (popularity > 0).sum() < k:
        raise ValueError("fewer than k items with non-zero popularity")
    p = popularity / popularity.sum()
    rng = np.random.default_rng(seed)
    return [rng.choice(len(p), size=k, replace=False, p=p).tolist() for _ in range(num_lists)]


def evaluate_lists(
    cases: Sequence[EvalCase], lists: Sequence[Sequence[int]], num_items: int, ks: Sequence[int] = DEFAULT_KS
) -> dict[str, float]:
    """Metrics of precomputed ranked lists, one per case."""
    ranks: list[Optional[int]] = []
    for case, items in zip(cases, lists):
        items = list(items)
        ranks.append(items.index(case.target) + 1 if case.target in items else None)
    return metrics_from_ranks(ranks, lists, num_items, ks)


def evaluate_baseline(
    name: str, bundle: DatasetBundle, ks: Sequence[int] = DEFAULT_KS, seed: int = 0
) -> MetricsReport:
    cases, skipped = evaluation_cases(bundle, "test")
    k = max(ks)
    if name == "random":
        lists = baseline_random(len(cases), bundle.num_items, k, seed)
    elif name == "poprnd":
        lists = baseline_poprnd(len(cases), bundle.item_popularity(), k, seed)
    else:
        raise ValueError(f"unknown baseline {name!r}")
    return MetricsReport(
        metrics=evaluate_lists(cases, lists, bundle.num_items, ks),
        num_eval_users=len({c.user for c in cases}),
        num_eval_cases=len(cases),
        num_dropped_targets=bundle.num_dropped_test,
        num_skipped_users=skipped,
        seed=seed,
        filter_seen=False,
        extra={"baseline": name},
    )


def random_ndcg_expectation(num_items: int, k: int) -> float:
    """Expected single-target NDCG@k of uniform random ranking."""
    return sum(1.0 / num_items / math.log2(r + 1) for r in range(1, k + 1))
