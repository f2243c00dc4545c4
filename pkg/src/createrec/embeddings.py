"""Learnable user, item and position tables shared by both encoders."""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

PAD = 0
INIT_STD = 0.02


class EmbeddingTables(nn.Module):
    """User table ``M x d``, item table ``(N + 1) x d`` and position table ``c x d``.

    Item row 0 is the padding row and is held at zero; dataset item ``i`` lives in
    row ``i + 1``. Positions count from the right: the most recent slot of a
    window uses the last row of ``position_table``.
    """

    def __init__(
        self,
        num_users: int,
        num_items: int,
        dim: int = 64,
        max_len: int = 50,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        if min(num_users, num_items, dim, max_len) < 1:
            raise ValueError("table sizes must be positive")
        self.num_users = num_users
        self.num_items = num_items
        self.dim = dim
        self.max_len = max_len
        self.item_table = nn.Parameter(torch.empty(num_items + 1, dim, dtype=dtype))
        self.user_table = nn.Parameter(torch.empty(num_users, dim, dtype=dtype))
        self.position_table = nn.Parameter(torch.empty(max_len, dim, dtype=dtype))
        self.mask_vector = nn.Parameter(torch.empty(dim, dtype=dtype))
        # counts user-table reads so inference paths can be audited
        self.user_reads = 0
        self.reset_parameters()

    @property
    def num_item_rows(self) -> int:
        return self.num_items + 1

    def reset_parameters(self) -> None:
        for p in (self.item_table, self.user_table, self.position_table, self.mask_vector):
            nn.init.normal_(p, mean=0.0, std=INIT_STD)
        self.zero_padding_()

    @torch.no_grad()
    def zero_padding_(self) -> None:
        self.item_table[PAD].zero_()

    def lookup_items(self, rows: torch.Tensor) -> torch.Tensor:
        """Gather item rows (``0`` = padding, ``i + 1`` = item ``i``)."""
        rows = torch.as_tensor(rows, dtype=torch.long)
        if rows.numel() and (int(rows.min()) < 0 or int(rows.max()) >= self.num_item_rows):
            raise IndexError(f"item row out of range [0, {self.num_item_rows})")
        return F.embedding(rows, self.item_table, padding_idx=PAD)

    def lookup_users(self, users: torch.Tensor) -> torch.Tensor:
        users = torch.as_tensor(users, dtype=torch.long)
        if users.numel() and (int(users.min()) < 0 or int(users.max()) >= self.num_users):
            raise IndexError(f"user id out of range [0, {self.num_users})")
        self.user_reads += 1
        return F.embedding(users, self.user_table)

    def all_users(self) -> torch.Tensor:
        self.user_reads += 1
        return self.user_table

    def item_vectors(self) -> torch.Tensor:
        """Item rows without the padding row, indexed by dataset item id."""
        return self.item_table[1:]

    def position_aware(self, seq_emb: torch.Tensor) -> torch.Tensor:
        """Add right-aligned positional rows to a ``(..., L, d)`` sequence, ``L <= c``."""
        length = seq_emb.shape[-2]
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.max_len}")
        return seq_emb + self.position_table[self.max_len - length:]

    def save(self, path: str | Path) -> None:
        torch.save(
            {
                "dim": self.dim,
                "num_users": self.num_users,
                "num_item_rows": self.num_item_rows,
                "max_len": self.max_len,
                "item_table": self.item_table.detach().cpu(),
                "user_table": self.user_table.detach().cpu(),
                "position_table": self.position_table.detach().cpu(),
                "mask_vector": self.mask_vector.detach().cpu(),
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTables":
        blob = torch.load(path, map_location="cpu")
        tables = cls(
            blob["num_users"], blob["num_item_rows"] - 1, blob["dim"], blob["max_len"],
            dtype=blob["item_table"].dtype,
        )
        with torch.no_grad():
            for name in ("item_table", "user_table", "position_table", "mask_vector"):
                getattr(tables, name).copy_(blob[name])
        return tables
