"""Graph encoders over the user-item bipartite graph: LightGCN + BPR and UltraGCN.

Both read and write the shared :class:`EmbeddingTables`; item ``i`` of the graph
is table row ``i + 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn as nn
import torch.nn.functional as F

from createrec.data import BipartiteGraph
from createrec.embeddings import EmbeddingTables

logger = logging.getLogger(__name__)

GRAPH_MODES = ("lightgcn", "ultragcn")


@dataclass
class GraphEncoderConfig:
    mode: str = "lightgcn"
    num_layers: int = 2
    num_negatives: Optional[int] = None  # None -> 1 for lightgcn, 64 for ultragcn
    lambda_reg: float = 1e-4
    lambda_c: float = 1.0
    gamma_i: float = 1.0
    ii_topk: int = 10
    bpr_on_propagated: bool = True
    align_propagated: bool = True

    @property
    def negatives(self) -> int:
        if self.num_negatives is not None:
            return self.num_negatives
        return 1 if self.mode == "lightgcn" else 64

    def validate(self) -> None:
        if self.mode not in GRAPH_MODES:
            raise ValueError(f"graph mode must be one of {GRAPH_MODES}, got {self.mode!r}")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.negatives < 1 or self.ii_topk < 1:
            raise ValueError("num_negatives and ii_topk must be positive")
        if min(self.lambda_reg, self.lambda_c, self.gamma_i) < 0:
            raise ValueError("loss weights must be non-negative")


class GraphState(NamedTuple):
    user_out: torch.Tensor
    item_out: torch.Tensor


@dataclass
class ItemNeighbors:
    """Top-k item-item neighbours, padded: ``weights == 0`` marks an empty slot."""

    neighbors: np.ndarray  # (N, k) int64
    weights: np.ndarray  # (N, k) float64
    counts: np.ndarray  # (N,) int64

    def of(self, item: int) -> list[tuple[int, float]]:
        n = int(self.counts[item])
        return list(zip(self.neighbors[item, :n].tolist(), self.weights[item, :n].tolist()))

    def save(self, path: str | Path) -> None:
        # npz entries: neighbors (N, k) int64, weights (N, k) float64, counts (N,) int64
        np.savez(path, neighbors=self.neighbors, weights=self.weights, counts=self.counts)

    @classmethod
    def load(cls, path: str | Path) -> "ItemNeighbors":
        blob = np.load(path)
        return cls(blob["neighbors"], blob["weights"], blob["counts"])


def build_ii_graph(graph: BipartiteGraph, topk: int) -> ItemNeighbors:
    """Item-item neighbourhoods from co-occurrence ``G = A^T A``.

    ``w(i, j) = G_ij / (g_i - G_ii) * sqrt(g_i / g_j)`` with ``g`` the row sums of
    ``G``. Self-pairs are excluded; ties in weight go to the smaller item id.
    """
    if topk < 1:
        raise ValueError("topk must be positive")
    a = graph.interaction_matrix()
    g_mat = (a.T @ a).tocsr()
    g_mat.sort_indices()
    g = np.asarray(g_mat.sum(axis=1)).ravel()
    diag = g_mat.diagonal()
    n = graph.num_items
    neighbors = np.zeros((n, topk), dtype=np.int64)
    weights = np.zeros((n, topk), dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    for i in range(n):
        denom = g[i] - diag[i]
        if denom <= 0:
            continue
        lo, hi = g_mat.indptr[i], g_mat.indptr[i + 1]
        cols = g_mat.indices[lo:hi]
        vals = g_mat.data[lo:hi]
        off = cols != i
        cols, vals = cols[off], vals[off]
        w = vals / denom * np.sqrt(g[i] / g[cols])
        order = np.lexsort((cols, -w))[:topk]
        k = len(order)
        neighbors[i, :k] = cols[order]
        weights[i, :k] = w[order]
        counts[i] = k
    return ItemNeighbors(neighbors, weights, counts)


def _sparse_tensor(mat: sp.spmatrix, dtype: torch.dtype) -> torch.Tensor:
    coo = mat.tocoo()
    idx = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
    return torch.sparse_coo_tensor(idx, torch.from_numpy(coo.data).to(dtype), coo.shape, check_invariants=True).coalesce()


class NegativeSampler:
    """Uniform item sampling with rejection against each user's training items."""

    def __init__(self, seen: sp.csr_matrix) -> None:
        seen = seen.tocsr()
        self.num_items = seen.shape[1]
        coo = seen.tocoo()
        self.keys = np.unique(coo.row.astype(np.int64) * self.num_items + coo.col)
        self.seen_counts = np.diff(seen.indptr)

    def has_negatives(self, users: np.ndarray) -> np.ndarray:
        return self.seen_counts[users] < self.num_items

    def _seen(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = users * self.num_items + items
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == keys

    def sample(self, users: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        if not self.has_negatives(users).all():
            raise ValueError("some users have no valid negative item")
        u = np.repeat(users[:, None], n, axis=1)
        out = rng.integers(0, self.num_items, size=u.shape)
        bad = self._seen(u, out)
        while bad.any():
            out[bad] = rng.integers(0, self.num_items, size=int(bad.sum()))
            bad[bad] = self._seen(u[bad], out[bad])
        return out


class GraphEncoder(nn.Module):
    """Produces global user/item representations and the graph loss."""

    def __init__(
        self,
        config: GraphEncoderConfig,
        tables: EmbeddingTables,
        graph: BipartiteGraph,
        seen: Optional[sp.csr_matrix] = None,
    ) -> None:
        super().__init__()
        config.validate()
        if graph.num_users != tables.num_users or graph.num_items != tables.num_items:
            raise ValueError("graph and embedding tables disagree on M or N")
        if graph.num_edges == 0:
            raise ValueError("graph has no edges")
        self.config = config
        self.tables = tables
        self.graph = graph
        dtype = tables.item_table.dtype
        self.adjacency = _sparse_tensor(graph.normalized_adjacency(), dtype)
        self.sampler = NegativeSampler(seen if seen is not None else graph.interaction_matrix())
        self.user_degree = torch.from_numpy(graph.user_degree).to(dtype)
        self.item_degree = torch.from_numpy(graph.item_degree).to(dtype)
        self.ii: Optional[ItemNeighbors] = None
        if config.mode == "ultragcn":
            self.ii = build_ii_graph(graph, config.ii_topk)
            self._ii_neighbors = torch.from_numpy(self.ii.neighbors)
            self._ii_weights = torch.from_numpy(self.ii.weights).to(dtype)

    # -- representations -------------------------------------------------------------

    def propagate(self, num_layers: Optional[int] = None) -> GraphState:
        """Mean over layers ``0..K`` of ``A_hat^k E`` (LightGCN); raw tables in UltraGCN mode."""
        users = self.tables.all_users()
        items = self.tables.item_vectors()
        k = self.config.num_layers if num_layers is None else num_layers
        if self.config.mode == "ultragcn" or k == 0:
            return GraphState(users, items)
        x = torch.cat([users, items])
        total = x
        for _ in range(k):
            x = torch.sparse.mm(self.adjacency, x)
            total = total + x
        total = total / (k + 1)
        return GraphState(total[: self.tables.num_users], total[self.tables.num_users:])

    def global_user_repr(self, state: GraphState, users: torch.Tensor) -> torch.Tensor:
        users = torch.as_tensor(users, dtype=torch.long)
        if users.numel() and (int(users.min()) < 0 or int(users.max()) >= self.tables.num_users):
            raise IndexError("unknown user")
        if self.config.mode == "lightgcn" and not self.config.align_propagated:
            return self.tables.lookup_users(users)
        return state.user_out[users]

    # -- losses ----------------------------------------------------------------------

    def _reg(self, users: torch.Tensor, pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
        u = self.tables.lookup_users(users)
        i = self.tables.lookup_items(pos + 1)
        j = self.tables.lookup_items(neg + 1)
        return (u.pow(2).sum(-1) + i.pow(2).sum(-1) + j.pow(2).sum(-1).mean(-1)).mean()

    def bpr_loss(
        self, state: GraphState, users: torch.Tensor, pos: torch.Tensor, neg: torch.Tensor
    ) -> torch.Tensor:
        """Mean ``-ln sigma(s_ui - s_uj)`` over triples plus ``lambda_reg`` times raw-row L2.

        ``neg`` has shape ``(B, n_neg)``.
        """
        if self.config.bpr_on_propagated:
            u_out, i_out = state.user_out, state.item_out
        else:
            u_out, i_out = self.tables.all_users(), self.tables.item_vectors()
        eu = u_out[users]
        s_pos = (eu * i_out[pos]).sum(-1)
        s_neg = (eu[:, None, :] * i_out[neg]).sum(-1)
        loss = F.softplus(-(s_pos[:, None] - s_neg)).mean()
        if self.config.lambda_reg:
            loss = loss + self.config.lambda_reg * self._reg(users, pos, neg)
        return loss

    def beta(self, users: torch.Tensor, items: torch.Tensor) -> torch.Tensor:
        """Constraint coefficient ``(1 / d_u) * sqrt((d_u + 1) / (d_i + 1))``."""
        du = self.user_degree[users].clamp_min(1.0)
        di = self.item_degree[items]
        return torch.sqrt((du + 1.0) / (di + 1.0)) / du

    def ultragcn_loss(
        self, users: torch.Tensor, pos: torch.Tensor, neg: torch.Tensor, return_parts: bool = False
    ):
        """``L_O + lambda_c * L_C + gamma_i * L_I`` on the raw (propagation-free) tables.

        ``L_O``: unweighted BCE, positives and negatives each averaged then halved.
        ``L_C``: the same with per-pair ``beta`` weights.
        ``L_I``: ``-w(i, j) ln sigma(<e_u, e_j>)`` over each positive's item neighbours.
        """
        eu = self.tables.lookup_users(users)
        ei = self.tables.lookup_items(pos + 1)
        ej = self.tables.lookup_items(neg + 1)
        s_pos = (eu * ei).sum(-1)
        s_neg = (eu[:, None, :] * ej).sum(-1)
        bce_pos = F.softplus(-s_pos)
        bce_neg = F.softplus(s_neg)
        l_o = 0.5 * (bce_pos.mean() + bce_neg.mean())
        b_pos = self.beta(users, pos)
        b_neg = self.beta(users[:, None].expand_as(neg), neg)
        l_c = 0.5 * ((b_pos * bce_pos).mean() + (b_neg * bce_neg).mean())
        nb = self._ii_neighbors[pos]
        w = self._ii_weights[pos]
        if bool((w > 0).any()):
            en = self.tables.lookup_items(nb + 1)
            s_nb = (eu[:, None, :] * en).sum(-1)
            l_i = (w * F.softplus(-s_nb)).sum() / (w > 0).sum()
        else:
            l_i = s_pos.new_zeros(())
        total = l_o + self.config.lambda_c * l_c + self.config.gamma_i * l_i
        if self.config.lambda_reg:
            total = total + self.config.lambda_reg * self._reg(users, pos, neg)
        if return_parts:
            return total, {"L_O": l_o, "L_C": l_c, "L_I": l_i}
        return total

    def loss(
        self, state: GraphState, users: torch.Tensor, pos: torch.Tensor, neg: torch.Tensor
    ) -> torch.Tensor:
        if self.config.mode == "lightgcn":
            return self.bpr_loss(state, users, pos, neg)
        return self.ultragcn_loss(users, pos, neg)

    def sample_batch(
        self, edge_index: np.ndarray, rng: np.random.Generator
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Users, positives and sampled negatives for the given edge positions."""
        users = self.graph.edge_users[edge_index]
        items = self.graph.edge_items[edge_index]
        ok = self.sampler.has_negatives(users)
        if not ok.all():
            users, items = users[ok], items[ok]
        neg = self.sampler.sample(users, self.config.negatives, rng)
        return torch.from_numpy(users), torch.from_numpy(items), torch.from_numpy(neg)
