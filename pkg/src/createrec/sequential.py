"""Causal (SASRec-style) and masked (BERT4Rec-style) transformer encoders over item sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from createrec.embeddings import PAD, EmbeddingTables

MODES = ("causal", "masked")


@dataclass
class SeqEncoderConfig:
    mode: str = "causal"
    num_layers: int = 2
    num_heads: int = 2
    dim: int = 64
    ffn_dim: int = 256
    dropout: float = 0.2
    max_len: int = 50
    mask_prob: float = 0.2
    tied_output: bool = True

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.num_layers < 1 or self.num_heads < 1 or self.ffn_dim < 1 or self.max_len < 1:
            raise ValueError("num_layers, num_heads, ffn_dim and max_len must be positive")
        if self.dim % self.num_heads:
            raise ValueError(f"dim {self.dim} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError("mask_prob must be in (0, 1)")


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, dropout: float) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor, return_weights: bool = False):
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        logits = logits.masked_fill(~allowed[:, None], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = (self.dropout(weights) @ v).transpose(1, 2).reshape(b, n, d)
        out = self.out(out)
        return (out, weights) if return_weights else out


class Block(nn.Module):
    """Pre-norm transformer block with a GELU feed-forward."""

    def __init__(self, dim: int, num_heads: int, ffn_dim: int, dropout: float) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_dim), nn.GELU(), nn.Dropout(dropout), nn.Linear(ffn_dim, dim)
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor, return_weights: bool = False):
        a = self.attn(self.norm1(x), allowed, return_weights)
        if return_weights:
            a, w = a
        x = x + self.dropout(a)
        x = x + self.dropout(self.ffn(self.norm2(x)))
        return (x, w) if return_weights else x


class SequentialEncoder(nn.Module):
    """Transformer over position-aware item embeddings read from shared tables.

    Batches are left-padded ``(B, L)`` tensors of item *rows* (``0`` = padding).
    In masked mode a boolean ``(B, L)`` tensor marks slots whose input is replaced
    by the learned mask vector.
    """

    def __init__(self, config: SeqEncoderConfig, tables: EmbeddingTables) -> None:
        super().__init__()
        config.validate()
        if config.dim != tables.dim:
            raise ValueError(f"encoder dim {config.dim} != embedding dim {tables.dim}")
        if config.max_len != tables.max_len:
            raise ValueError(f"encoder max_len {config.max_len} != table max_len {tables.max_len}")
        self.config = config
        self.tables = tables
        self.input_dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(
            Block(config.dim, config.num_heads, config.ffn_dim, config.dropout)
            for _ in range(config.num_layers)
        )
        self.final_norm = nn.LayerNorm(config.dim)
        if config.tied_output:
            self.output_table = None
        else:
            self.output_table = nn.Parameter(
                torch.randn(tables.num_items, config.dim, dtype=tables.item_table.dtype) * 0.02
            )
        self.to(tables.item_table.dtype)

    def own_parameters(self) -> list[nn.Parameter]:
        """Parameters of the encoder proper, excluding the shared tables."""
        shared = {id(p) for p in self.tables.parameters()}
        return [p for p in self.parameters() if id(p) not in shared]

    # -- forward ---------------------------------------------------------------------

    def _attention_mask(self, valid: torch.Tensor) -> torch.Tensor:
        n = valid.shape[1]
        eye = torch.eye(n, dtype=torch.bool, device=valid.device)
        allowed = valid[:, None, :].expand(-1, n, -1)
        if self.config.mode == "causal":
            allowed = allowed & torch.ones(n, n, dtype=torch.bool, device=valid.device).tril()
        # padding queries attend to themselves only so no row is fully masked
        return allowed | eye

    def forward(
        self,
        rows: torch.Tensor,
        masked: Optional[torch.Tensor] = None,
        return_weights: bool = False,
    ):
        emb = self.tables.lookup_items(rows)
        valid = rows != PAD
        if masked is not None:
            emb = torch.where(masked[..., None], self.tables.mask_vector.expand_as(emb), emb)
            valid = valid | masked
        x = self.input_dropout(self.tables.position_aware(emb))
        allowed = self._attention_mask(valid)
        weights = []
        for block in self.blocks:
            if return_weights:
                x, w = block(x, allowed, True)
                weights.append(w)
            else:
                x = block(x, allowed)
        x = self.final_norm(x)
        return (x, weights) if return_weights else x

    def encode_causal(self, rows: torch.Tensor) -> torch.Tensor:
        if self.config.mode != "causal":
            raise RuntimeError("encode_causal requires mode='causal'")
        return self(rows)

    def encode_masked(self, rows: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        if self.config.mode != "masked":
            raise RuntimeError("encode_masked requires mode='masked'")
        return self(rows, masked)

    @staticmethod
    def user_state(states: torch.Tensor, lengths: torch.Tensor | Sequence[int]) -> torch.Tensor:
        """Readout at the most recent slot (the appended mask slot in masked mode).

        With left padding that is the last column for every non-empty row.
        """
        lengths = torch.as_tensor(lengths)
        if (lengths < 1).any():
            raise ValueError("user_state is undefined for empty sequences")
        return states[:, -1]

    def output_vectors(self) -> torch.Tensor:
        return self.tables.item_vectors() if self.output_table is None else self.output_table

    def score_catalog(self, h: torch.Tensor) -> torch.Tensor:
        """Dot-product scores against every catalog item (padding row excluded)."""
        w = self.output_vectors()
        if h.shape[-1] != w.shape[-1]:
            raise ValueError(f"state dim {h.shape[-1]} != item dim {w.shape[-1]}")
        return h @ w.T

    def local_loss(self, states: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        """Mean full-catalog cross-entropy over slots whose target row is non-zero."""
        sel = targets != PAD
        if not bool(sel.any()):
            raise ValueError("batch has no contributing positions")
        logits = self.score_catalog(states[sel])
        return F.cross_entropy(logits, targets[sel] - 1)

    # -- batch assembly --------------------------------------------------------------

    def inference_batch(self, histories: Sequence[np.ndarray]) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Rows (and mask flags in masked mode) for scoring the next item after each history."""
        c = self.config.max_len
        if self.config.mode == "causal":
            return left_pad([h[-c:] + 1 for h in histories], c), None
        keep = c - 1
        windows = [np.append(h[-keep:] + 1 if keep else h[:0], PAD) for h in histories]
        rows = left_pad(windows, c)
        masked = torch.zeros_like(rows, dtype=torch.bool)
        masked[:, -1] = True
        return rows, masked

    @torch.no_grad()
    def predict_states(self, histories: Sequence[np.ndarray], batch_size: int = 512) -> torch.Tensor:
        if any(len(h) == 0 for h in histories):
            raise ValueError("cannot encode an empty history")
        was_training = self.training
        self.eval()
        out = []
        for start in range(0, len(histories), batch_size):
            rows, masked = self.inference_batch(histories[start:start + batch_size])
            out.append(self.user_state(self(rows, masked), [1] * len(rows)))
        self.train(was_training)
        return torch.cat(out) if out else torch.zeros(0, self.config.dim)


def left_pad(seqs: Sequence[np.ndarray], length: Optional[int] = None) -> torch.Tensor:
    """Stack integer sequences into a left-padded ``(B, L)`` long tensor."""
    if length is None:
        length = max((len(s) for s in seqs), default=0)
    out = np.zeros((len(seqs), length), dtype=np.int64)
    for r, s in enumerate(seqs):
        s = np.asarray(s)[-length:] if length else np.asarray(s)[:0]
        if len(s):
            out[r, length - len(s):] = s
    return torch.from_numpy(out)


def causal_training_batch(histories: Sequence[np.ndarray], max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Shifted input/target rows: every slot predicts the following item."""
    windows = [h[-(max_len + 1):] + 1 for h in histories]
    inputs = left_pad([w[:-1] for w in windows])
    targets = left_pad([w[1:] for w in windows], inputs.shape[1])
    return inputs, targets


def masked_training_batch(
    histories: Sequence[np.ndarray], max_len: int, mask_prob: float, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Rows, mask flags and targets (original rows at masked slots, 0 elsewhere).

    The mask draw is repeated until at least one slot is masked.
    """
    rows = left_pad([h[-max_len:] + 1 for h in histories])
    valid = rows.numpy() != PAD
    if not valid.any():
        raise ValueError("batch has no items to mask")
    while True:
        flags = (rng.random(rows.shape) < mask_prob) & valid
        if flags.any():
            break
    masked = torch.from_numpy(flags)
    targets = torch.where(masked, rows, torch.zeros_like(rows))
    return rows, masked, targets
