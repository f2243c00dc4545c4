"""Alignment between the sequential (local) and graph (global) user representations."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

KINDS = ("none", "barlow", "contrastive")


@dataclass
class AlignmentConfig:
    kind: str = "barlow"
    lambda_bt: float = 5e-3
    temperature: float = 0.2
    eps: float = 1e-5

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"alignment kind must be one of {KINDS}, got {self.kind!r}")
        if self.lambda_bt <= 0 or self.temperature <= 0 or self.eps <= 0:
            raise ValueError("lambda_bt, temperature and eps must be positive")


def standardize(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Per-column ``(x - mean) / sqrt(var + eps)`` over the batch (biased variance)."""
    if x.shape[0] < 2:
        raise ValueError("standardize needs a batch of at least 2 rows")
    mean = x.mean(dim=0, keepdim=True)
    var = x.var(dim=0, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def cross_correlation(z_loc: torch.Tensor, z_glob: torch.Tensor) -> torch.Tensor:
    if z_loc.shape != z_glob.shape:
        raise ValueError(f"shape mismatch: {tuple(z_loc.shape)} vs {tuple(z_glob.shape)}")
    return z_loc.T @ z_glob / z_loc.shape[0]


def barlow_loss(c: torch.Tensor, lambda_bt: float = 5e-3) -> torch.Tensor:
    diag = torch.diagonal(c)
    on = (1.0 - diag).pow(2).sum()
    off = c.pow(2).sum() - diag.pow(2).sum()
    return on + lambda_bt * off


def barlow_twins(h_loc: torch.Tensor, h_glob: torch.Tensor, lambda_bt: float = 5e-3, eps: float = 1e-5) -> torch.Tensor:
    c = cross_correlation(standardize(h_loc, eps), standardize(h_glob, eps))
    return barlow_loss(c, lambda_bt)


def contrastive_loss(z_loc: torch.Tensor, z_glob: torch.Tensor, temperature: float = 0.2) -> torch.Tensor:
    """Symmetric InfoNCE with in-batch negatives under cosine similarity."""
    if z_loc.shape[0] < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 rows")
    if z_loc.shape != z_glob.shape:
        raise ValueError("shape mismatch")
    logits = F.normalize(z_loc, dim=-1) @ F.normalize(z_glob, dim=-1).T / temperature
    labels = torch.arange(z_loc.shape[0])
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def alignment_loss(config: AlignmentConfig, h_loc: torch.Tensor, h_glob: torch.Tensor) -> torch.Tensor:
    if config.kind == "barlow":
        return barlow_twins(h_loc, h_glob, config.lambda_bt, config.eps)
    if config.kind == "contrastive":
        return contrastive_loss(h_loc, h_glob, config.temperature)
    return h_loc.new_zeros(())
