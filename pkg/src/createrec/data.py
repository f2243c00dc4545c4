"""Interaction logs, the global temporal split, sequences and the bipartite graph."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

BUNDLE_FORMAT_VERSION = 1


class DataError(ValueError):
    """Raised for malformed input files and degenerate splits."""


class Interaction(NamedTuple):
    user: int
    item: int
    timestamp: int
    weight: Optional[float] = None


@dataclass
class InteractionLog:
    """Column-oriented interaction records with dense integer ids.

    ``user_ids[k]`` / ``item_ids[k]`` hold the original string label of dense id ``k``.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    weights: Optional[np.ndarray] = None
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        n = len(self.users)
        if len(self.items) != n or len(self.timestamps) != n:
            raise ValueError("users, items and timestamps must have equal length")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
        if not self.user_ids:
            self.user_ids = [str(u) for u in range(int(self.users.max()) + 1 if n else 0)]
        if not self.item_ids:
            self.item_ids = [str(i) for i in range(int(self.items.max()) + 1 if n else 0)]

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[Interaction]:
        w = self.weights
        for k in range(len(self)):
            yield Interaction(
                int(self.users[k]),
                int(self.items[k]),
                int(self.timestamps[k]),
                None if w is None else float(w[k]),
            )


@dataclass
class Split:
    """One slice of the temporal split, in input order."""

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray

    @classmethod
    def empty(cls) -> "Split":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy())

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[Interaction]:
        for u, i, t in zip(self.users.tolist(), self.items.tolist(), self.timestamps.tolist()):
            yield Interaction(u, i, t)

    def concat(self, other: "Split") -> "Split":
        return Split(
            np.concatenate([self.users, other.users]),
            np.concatenate([self.items, other.items]),
            np.concatenate([self.timestamps, other.timestamps]),
        )


def _chronological_histories(split: Split, num_users: int) -> list[np.ndarray]:
    # np.lexsort is stable, so equal timestamps keep input order
    order = np.lexsort((split.timestamps, split.users))
    users = split.users[order]
    items = split.items[order]
    bounds = np.searchsorted(users, np.arange(num_users + 1))
    return [items[bounds[u]:bounds[u + 1]].copy() for u in range(num_users)]


@dataclass
class DatasetBundle:
    train: Split
    validation: Split
    test: Split
    num_users: int
    num_items: int
    split_times: tuple[int, int]
    user_ids: list[str]
    item_ids: list[str]
    num_dropped_test: int = 0
    merged: bool = False
    user_sequences: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.user_sequences:
            self.user_sequences = _chronological_histories(self.train, self.num_users)

    def retrain_bundle(self) -> "DatasetBundle":
        """Bundle for the final fit: train and validation merged, validation emptied."""
        return DatasetBundle(
            train=self.train.concat(self.validation),
            validation=Split.empty(),
            test=self.test,
            num_users=self.num_users,
            num_items=self.num_items,
            split_times=self.split_times,
            user_ids=self.user_ids,
            item_ids=self.item_ids,
            num_dropped_test=self.num_dropped_test,
            merged=True,
        )

    def item_popularity(self) -> np.ndarray:
        return np.bincount(self.train.items, minlength=self.num_items).astype(np.int64)

    def summary(self) -> dict:
        return {
            "num_users": self.num_users,
            "num_items": self.num_items,
            "train": len(self.train),
            "validation": len(self.validation),
            "test": len(self.test),
            "dropped_test": self.num_dropped_test,
            "t_val": int(self.split_times[0]),
            "t_test": int(self.split_times[1]),
            "merged": self.merged,
        }


def ingest(
    path: str | Path,
    format: str = "tsv",
    delimiter: Optional[str] = None,
    header: Optional[bool] = None,
) -> InteractionLog:
    """Parse a ``user, item, timestamp[, rating]`` file.

    ``delimiter`` overrides the one implied by ``format`` (MovieLens-1M's
    ``ratings.dat`` needs ``"::"``). With ``header=None`` the first row is treated
    as a header when its timestamp column is not an integer.
    """
    path = Path(path)
    if format not in ("tsv", "csv"):
        raise ValueError(f"unknown format {format!r}, expected 'tsv' or 'csv'")
    if not path.exists():
        raise FileNotFoundError(f"interaction file not found: {path}")
    if delimiter is None:
        delimiter = "\t" if format == "tsv" else ","

    with open(path, newline="", encoding="utf-8") as fh:
        if len(delimiter) == 1:
            rows = csv.reader(fh, delimiter=delimiter)
        else:
            rows = (line.rstrip("\r\n").split(delimiter) for line in fh)

        user_map: dict[str, int] = {}
        item_map: dict[str, int] = {}
        users: list[int] = []
        items: list[int] = []
        stamps: list[int] = []
        ratings: list[float] = []
        has_rating = True
        for lineno, row in enumerate(rows, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 3:
                raise DataError(f"{path}:{lineno}: expected at least 3 columns, got {len(row)}")
            u, i, t = row[0].strip(), row[1].strip(), row[2].strip()
            try:
                ts = int(t)
            except ValueError:
                if lineno == 1 and header is not False:
                    continue
                raise DataError(f"{path}:{lineno}: timestamp {t!r} is not an integer") from None
            if lineno == 1 and header:
                continue
            if ts < 0:
                raise DataError(f"{path}:{lineno}: negative timestamp {ts}")
            if not u or not i:
                raise DataError(f"{path}:{lineno}: empty user or item id")
            users.append(user_map.setdefault(u, len(user_map)))
            items.append(item_map.setdefault(i, len(item_map)))
            stamps.append(ts)
            if has_rating and len(row) >= 4:
                try:
                    ratings.append(float(row[3]))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: rating {row[3]!r} is not a number") from None
            else:
                has_rating = False

    if not users:
        raise DataError(f"{path}: no interactions")
    return InteractionLog(
        users=np.array(users, dtype=np.int64),
        items=np.array(items, dtype=np.int64),
        timestamps=np.array(stamps, dtype=np.int64),
        weights=np.array(ratings) if has_rating and len(ratings) == len(users) else None,
        user_ids=list(user_map),
        item_ids=list(item_map),
    )


def _quantile_time(sorted_ts: np.ndarray, q: float) -> int:
    n = len(sorted_ts)
    k = min(int(math.floor(q * n + 1e-9)), n - 1)
    return int(sorted_ts[k])


def temporal_split(
    log: InteractionLog, val_quantile: float = 0.8, test_quantile: float = 0.9
) -> DatasetBundle:
    """Global temporal split at the given quantiles of all timestamps.

    Train is ``t < t_val``, validation ``t_val <= t < t_test``, test ``t >= t_test``.
    Items are re-indexed over train + validation; test interactions on other
    items are dropped and counted. The user vocabulary is kept whole.
    """
    if not (0.0 < val_quantile < test_quantile < 1.0):
        raise DataError(
            f"need 0 < val_quantile < test_quantile < 1, got {val_quantile}, {test_quantile}"
        )
    if len(log) == 0:
        raise DataError("cannot split an empty log")
    ts = log.timestamps
    sorted_ts = np.sort(ts, kind="stable")
    t_val = _quantile_time(sorted_ts, val_quantile)
    t_test = _quantile_time(sorted_ts, test_quantile)

    in_train = ts < t_val
    in_val = (ts >= t_val) & (ts < t_test)
    in_test = ts >= t_test
    for name, mask in (("train", in_train), ("validation", in_val), ("test", in_test)):
        if not mask.any():
            raise DataError(f"degenerate split: {name} is empty (t_val={t_val}, t_test={t_test})")

    known = np.zeros(log.num_items, dtype=bool)
    known[log.items[in_train | in_val]] = True
    old_to_new = np.full(log.num_items, -1, dtype=np.int64)
    old_to_new[known] = np.arange(int(known.sum()))
    item_ids = [log.item_ids[k] for k in np.flatnonzero(known)]

    keep_test = in_test & known[log.items]
    dropped = int(in_test.sum() - keep_test.sum())
    if dropped:
        logger.info("dropped %d test interactions on items unseen before t_test", dropped)

    def take(mask: np.ndarray) -> Split:
        return Split(log.users[mask], old_to_new[log.items[mask]], ts[mask])

    test = take(keep_test)
    if len(test) == 0:
        raise DataError("degenerate split: no test interaction on a known item")
    return DatasetBundle(
        train=take(in_train),
        validation=take(in_val),
        test=test,
        num_users=log.num_users,
        num_items=len(item_ids),
        split_times=(t_val, t_test),
        user_ids=list(log.user_ids),
        item_ids=item_ids,
        num_dropped_test=dropped,
    )


def build_sequences(bundle: DatasetBundle, max_len: int) -> list[np.ndarray]:
    """Most recent ``max_len`` training items per user, oldest first."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return [h[-max_len:].copy() for h in bundle.user_sequences]


@dataclass
class BipartiteGraph:
    num_users: int
    num_items: int
    edge_users: np.ndarray
    edge_items: np.ndarray
    user_degree: np.ndarray = field(init=False)
    item_degree: np.ndarray = field(init=False)
    norm_coefficients: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.edge_users = np.asarray(self.edge_users, dtype=np.int64)
        self.edge_items = np.asarray(self.edge_items, dtype=np.int64)
        self.user_degree = np.bincount(self.edge_users, minlength=self.num_users)
        self.item_degree = np.bincount(self.edge_items, minlength=self.num_items)
        deg = self.user_degree[self.edge_users] * self.item_degree[self.edge_items]
        self.norm_coefficients = 1.0 / np.sqrt(deg.astype(np.float64))

    @property
    def num_edges(self) -> int:
        return len(self.edge_users)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.edge_users.tolist(), self.edge_items.tolist()))

    def interaction_matrix(self) -> sp.csr_matrix:
        """Binary ``M x N`` user-item matrix."""
        data = np.ones(self.num_edges, dtype=np.float64)
        return sp.csr_matrix(
            (data, (self.edge_users, self.edge_items)), shape=(self.num_users, self.num_items)
        )

    def normalized_adjacency(self) -> sp.csr_matrix:
        """Symmetric ``D^-1/2 A D^-1/2`` over the stacked ``(M + N)`` node set, users first."""
        m = self.num_users
        rows = np.concatenate([self.edge_users, self.edge_items + m])
        cols = np.concatenate([self.edge_items + m, self.edge_users])
        vals = np.concatenate([self.norm_coefficients, self.norm_coefficients])
        n = m + self.num_items
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def build_graph(bundle: DatasetBundle, fraction: float = 1.0) -> BipartiteGraph:
    """Graph over the ``ceil(fraction * |H_u|)`` most recent training items of each user."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    us: list[np.ndarray] = []
    its: list[np.ndarray] = []
    for u, hist in enumerate(bundle.user_sequences):
        if len(hist) == 0:
            continue
        keep = int(math.ceil(fraction * len(hist) - 1e-9))
        tail = np.unique(hist[len(hist) - keep:])
        us.append(np.full(len(tail), u, dtype=np.int64))
        its.append(tail)
    if not us:
        raise DataError("graph is empty: no training interactions")
    return BipartiteGraph(bundle.num_users, bundle.num_items, np.concatenate(us), np.concatenate(its))


def training_item_sets(bundle: DatasetBundle) -> sp.csr_matrix:
    """Binary ``M x N`` matrix of every (user, item) seen in training."""
    data = np.ones(len(bundle.train), dtype=np.float64)
    mat = sp.csr_matrix(
        (data, (bundle.train.users, bundle.train.items)), shape=(bundle.num_users, bundle.num_items)
    )
    mat.data[:] = 1.0
    return mat


# -- serialization -----------------------------------------------------------------------

def _split_array(s: Split) -> np.ndarray:
    return np.stack([s.users, s.items, s.timestamps], axis=1) if len(s) else np.zeros((0, 3), np.int64)


def save_bundle(bundle: DatasetBundle, directory: str | Path) -> Path:
    """Write ``meta.json`` plus one ``.npy`` array per split (``[user, item, timestamp]`` rows).

    Output is deterministic: rerunning on the same input yields identical bytes.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "validation", "test"):
        np.save(directory / f"{name}.npy", _split_array(getattr(bundle, name)).astype(np.int64))
    meta = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "num_users": bundle.num_users,
        "num_items": bundle.num_items,
        "split_times": [int(t) for t in bundle.split_times],
        "num_dropped_test": bundle.num_dropped_test,
        "merged": bundle.merged,
        "user_ids": bundle.user_ids,
        "item_ids": bundle.item_ids,
        "counts": {"train": len(bundle.train), "validation": len(bundle.validation), "test": len(bundle.test)},
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return directory


def load_bundle(directory: str | Path) -> DatasetBundle:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    if meta.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise DataError(f"unsupported bundle format {meta.get('format_version')!r}")

    def read(name: str) -> Split:
        arr = np.load(directory / f"{name}.npy")
        return Split(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy())

    return DatasetBundle(
        train=read("train"),
        validation=read("validation"),
        test=read("test"),
        num_users=meta["num_users"],
        num_items=meta["num_items"],
        split_times=tuple(meta["split_times"]),
        user_ids=meta["user_ids"],
        item_ids=meta["item_ids"],
        num_dropped_test=meta["num_dropped_test"],
        merged=meta["merged"],
    )


def bundle_from_arrays(
    users: Sequence[int], items: Sequence[int], timestamps: Sequence[int],
    val_quantile: float = 0.8, test_quantile: float = 0.9,
) -> DatasetBundle:
    """Convenience: split an in-memory log."""
    return temporal_split(InteractionLog(users, items, timestamps), val_quantile, test_quantile)
