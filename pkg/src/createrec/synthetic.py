"""Synthetic interaction logs for tests and desk-scale experiments."""

from __future__ import annotations

import numpy as np

from createrec.data import InteractionLog


def planted_rule_log(
    num_users: int = 200,
    num_items: int = 40,
    length: int = 20,
    num_rules: int = 3,
    seed: int = 0,
) -> tuple[InteractionLog, int, int]:
    """Random sequences in which item ``B`` is always followed by item ``A``.

    Returns ``(log, A, B)``. Other items are uniform noise; every user sees the
    ``B -> A`` transition ``num_rules`` times, so the pair repeats within a history.
    Users advance in lock-step (position ``k`` of every user shares time slot ``k``,
    offset by user id), so a global temporal split cuts every history at the same depth.
    """
    rng = np.random.default_rng(seed)
    a, b = 0, 1
    users, items, stamps = [], [], []
    for u in range(num_users):
        seq = list(rng.integers(2, num_items, size=length - 2 * num_rules))
        for _ in range(num_rules):
            pos = int(rng.integers(0, len(seq) + 1))
            seq[pos:pos] = [b, a]
        for k, item in enumerate(seq):
            users.append(u)
            items.append(int(item))
            stamps.append(k * num_users + u)
    return InteractionLog(users, items, stamps), a, b


def movielens_like_log(
    num_users: int = 943,
    num_items: int = 1682,
    num_interactions: int = 100_000,
    num_genres: int = 18,
    seed: int = 0,
) -> InteractionLog:
    """A MovieLens-100K-sized log with popularity skew, user tastes and sequential drift.

    * items belong to one genre and have Zipf-like popularity;
    * each user has a sparse Dirichlet taste over genres and a lognormal activity
      level (at least 20 interactions);
    * the next item's genre stays the current one with probability 0.5, otherwise
      it is redrawn from the user's taste; within a genre, items follow a loose
      "franchise" order so consecutive items are predictive of each other;
    * users join at staggered times and stay active for a random span, so a global
      temporal split sees mixed-length histories.

    No user interacts with the same item twice.
    """
    rng = np.random.default_rng(seed)
    genre = rng.integers(0, num_genres, size=num_items)
    pop = 1.0 / np.arange(1, num_items + 1) ** 0.8
    pop = pop[rng.permutation(num_items)]
    by_genre = [np.flatnonzero(genre == g) for g in range(num_genres)]
    # franchise order: within a genre, item k tends to be followed by item k+1..k+3
    rank_in_genre = np.zeros(num_items, dtype=np.int64)
    for members in by_genre:
        rank_in_genre[members] = np.arange(len(members))

    activity = rng.lognormal(mean=0.0, sigma=0.9, size=num_users)
    counts = np.maximum(20, np.round(activity / activity.sum() * num_interactions)).astype(int)
    counts = np.minimum(counts, num_items // 2)

    horizon = 10_000_000
    users, items, stamps = [], [], []
    for u in range(num_users):
        taste = rng.dirichlet(np.full(num_genres, 0.3))
        seen: set[int] = set()
        start = int(rng.integers(0, int(horizon * 0.85)))
        span = int(rng.integers(horizon // 20, horizon - start + 1))
        times = np.sort(rng.integers(start, start + span, size=counts[u]))
        g = int(rng.choice(num_genres, p=taste))
        prev: int | None = None
        for t in times:
            if rng.random() >= 0.5 or prev is None:
                g = int(rng.choice(num_genres, p=taste))
                prev = None
            members = by_genre[g]
            if prev is not None and genre[prev] == g and rng.random() < 0.6:
                nxt = members[(rank_in_genre[prev] + 1 + rng.integers(0, 3)) % len(members)]
                cand = [int(nxt)]
            else:
                w = pop[members]
                cand = rng.choice(members, size=min(8, len(members)), replace=False, p=w / w.sum()).tolist()
            item = next((c for c in cand if c not in seen), None)
            if item is None:
                free = [m for m in members if m not in seen]
                if not free:
                    continue
                item = int(free[int(rng.integers(0, len(free)))])
            seen.add(item)
            users.append(u)
            items.append(item)
            stamps.append(int(t))
            prev = item
    return InteractionLog(users, items, stamps)
