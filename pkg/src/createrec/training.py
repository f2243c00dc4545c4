"""Two-phase training: graph-only warm-up, then joint optimisation of

    L = L_local + w_global * L_global + w_bt * L_align
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from createrec.alignment import AlignmentConfig, alignment_loss
from createrec.data import BipartiteGraph, DatasetBundle, build_graph, training_item_sets
from createrec.embeddings import EmbeddingTables
from createrec.evaluation import evaluate
from createrec.graph import GraphEncoder, GraphEncoderConfig
from createrec.sequential import (
    SeqEncoderConfig,
    SequentialEncoder,
    causal_training_batch,
    masked_training_batch,
)

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n_warmup: int = 10
    w_global: float = 1.0
    w_bt: float = 0.2
    epochs: int = 100
    batch_size: int = 128
    graph_batch_size: int = 2048
    lr: float = 1e-3
    warmup_lr: Optional[float] = None
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    early_stop_patience: int = 10
    # zero-weight terms are still logged but kept out of the backward pass
    skip_zero_weight_terms: bool = True

    def validate(self) -> None:
        if self.n_warmup < 0 or self.epochs < 1 or self.n_warmup > self.epochs:
            raise ValueError("need 0 <= n_warmup <= epochs and epochs >= 1")
        if self.w_global < 0 or self.w_bt < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1 or self.graph_batch_size < 1 or self.early_stop_patience < 1:
            raise ValueError("batch sizes and patience must be positive")
        if self.lr <= 0 or (self.warmup_lr is not None and self.warmup_lr <= 0):
            raise ValueError("learning rates must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    L_local: Optional[float]
    L_global: Optional[float]
    L_BT: Optional[float]
    total: float
    val_ndcg10: Optional[float]


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_ndcg10: Optional[float] = None
    stopped_early: bool = False
    wall_times: list[float] = field(default_factory=list)

    def to_jsonl(self) -> str:
        """One JSON object per epoch; timings are excluded so reruns compare byte-equal."""
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def timings_jsonl(self) -> str:
        return "".join(
            json.dumps({"epoch": r.epoch, "seconds": t}) + "\n" for r, t in zip(self.records, self.wall_times)
        )

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainLog":
        return cls([EpochRecord(**json.loads(line)) for line in text.splitlines() if line.strip()])


class CreateModel(nn.Module):
    """Shared tables, the sequential encoder and (optionally) the graph encoder."""

    def __init__(
        self,
        tables: EmbeddingTables,
        seq: SequentialEncoder,
        graph: Optional[GraphEncoder] = None,
    ) -> None:
        super().__init__()
        self.tables = tables
        self.seq = seq
        self.graph = graph


def parameter_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    """Fits a model on one bundle. ``graph_config=None`` gives sequential-only training."""

    def __init__(
        self,
        bundle: DatasetBundle,
        seq_config: SeqEncoderConfig,
        graph_config: Optional[GraphEncoderConfig],
        align_config: AlignmentConfig,
        train_config: TrainConfig,
        graph_fraction: float = 1.0,
        dim: Optional[int] = None,
        dtype: torch.dtype = torch.float32,
        eval_filter_seen: bool = True,
        eval_all_successive: bool = False,
    ) -> None:
        train_config.validate()
        align_config.validate()
        seq_config.validate()
        self.bundle = bundle
        self.seq_config = seq_config
        self.graph_config = graph_config
        self.align_config = align_config
        self.config = train_config
        self.eval_filter_seen = eval_filter_seen
        self.eval_all_successive = eval_all_successive
        dim = seq_config.dim if dim is None else dim

        torch.manual_seed(train_config.seed)
        seq_seed, graph_seed, mask_seed = np.random.SeedSequence(train_config.seed).spawn(3)
        self.seq_rng = np.random.default_rng(seq_seed)
        self.graph_rng = np.random.default_rng(graph_seed)
        self.mask_rng = np.random.default_rng(mask_seed)

        tables = EmbeddingTables(bundle.num_users, bundle.num_items, dim, seq_config.max_len, dtype)
        seq = SequentialEncoder(seq_config, tables)
        graph = None
        self.graph_data: Optional[BipartiteGraph] = None
        if graph_config is not None:
            self.graph_data = build_graph(bundle, graph_fraction)
            graph = GraphEncoder(graph_config, tables, self.graph_data, training_item_sets(bundle))
        self.model = CreateModel(tables, seq, graph)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(),
            lr=train_config.lr,
            betas=tuple(train_config.adam_betas),
            weight_decay=train_config.weight_decay,
        )
        min_len = 2 if seq_config.mode == "causal" else 1
        self.train_users = np.array(
            [u for u, h in enumerate(bundle.user_sequences) if len(h) >= min_len], dtype=np.int64
        )
        if len(self.train_users) == 0:
            raise ValueError("no user has enough training history")
        self.log = TrainLog()
        self.epoch = 0

    # -- properties ------------------------------------------------------------------

    @property
    def tables(self) -> EmbeddingTables:
        return self.model.tables

    @property
    def seq(self) -> SequentialEncoder:
        return self.model.seq

    @property
    def graph(self) -> Optional[GraphEncoder]:
        return self.model.graph

    def _set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def _step(self, loss: torch.Tensor) -> None:
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.tables.zero_padding_()

    # -- phases ----------------------------------------------------------------------

    def warmup_epoch(self) -> dict[str, float]:
        """One pass of graph-loss-only updates over the shuffled graph edges."""
        if self.graph is None:
            raise RuntimeError("warm-up needs a graph encoder")
        self.model.train()
        edges = self.graph_rng.permutation(self.graph_data.num_edges)
        losses = []
        for start in range(0, len(edges), self.config.graph_batch_size):
            users, pos, neg = self.graph.sample_batch(edges[start:start + self.config.graph_batch_size], self.graph_rng)
            state = self.graph.propagate()
            loss = self.graph.loss(state, users, pos, neg)
            _check_finite({"L_global": loss})
            self._step(loss)
            losses.append(loss.item())
        mean = float(np.mean(losses))
        return {"L_global": mean, "total": mean}

    def _seq_forward(self, histories) -> tuple[torch.Tensor, torch.Tensor]:
        """Local loss and the per-user readout state of a sequential batch."""
        c = self.seq_config.max_len
        if self.seq_config.mode == "causal":
            rows, targets = causal_training_batch(histories, c)
            states = self.seq(rows)
        else:
            rows, masked, targets = masked_training_batch(histories, c, self.seq_config.mask_prob, self.mask_rng)
            states = self.seq(rows, masked)
        return self.seq.local_loss(states, targets), states[:, -1]

    def joint_step(self, users: np.ndarray, edge_index: Optional[np.ndarray]) -> dict[str, float]:
        """One optimizer step on the weighted sum of the three terms."""
        cfg = self.config
        histories = [self.bundle.user_sequences[u] for u in users]
        l_local, h_loc = self._seq_forward(histories)
        terms = {"L_local": l_local}
        total = l_local
        if self.graph is not None:
            graph_grad = cfg.w_global > 0 or not cfg.skip_zero_weight_terms
            align_on = self.align_config.kind != "none" and len(users) >= 2
            align_grad = align_on and (cfg.w_bt > 0 or not cfg.skip_zero_weight_terms)
            with torch.set_grad_enabled(graph_grad or align_grad):
                state = self.graph.propagate()
            if edge_index is not None and len(edge_index):
                g_users, pos, neg = self.graph.sample_batch(edge_index, self.graph_rng)
                with torch.set_grad_enabled(graph_grad):
                    l_global = self.graph.loss(state, g_users, pos, neg)
                terms["L_global"] = l_global
                if graph_grad:
                    total = total + cfg.w_global * l_global
            if align_on:
                with torch.set_grad_enabled(align_grad):
                    h_glob = self.graph.global_user_repr(state, torch.from_numpy(users))
                    l_bt = alignment_loss(self.align_config, h_loc if align_grad else h_loc.detach(), h_glob)
                terms["L_BT"] = l_bt
                if align_grad:
                    total = total + cfg.w_bt * l_bt
        _check_finite(terms)
        self._step(total)
        out = {k: v.item() for k, v in terms.items()}
        out["total"] = total.item()
        return out

    def joint_epoch(self) -> dict[str, float]:
        self.model.train()
        users = self.seq_rng.permutation(self.train_users)
        batches = [users[s:s + self.config.batch_size] for s in range(0, len(users), self.config.batch_size)]
        edge_chunks: list[Optional[np.ndarray]] = [None] * len(batches)
        if self.graph is not None:
            edges = self.graph_rng.permutation(self.graph_data.num_edges)
            edge_chunks = np.array_split(edges, len(batches))
        sums: dict[str, list[float]] = {}
        for batch, chunk in zip(batches, edge_chunks):
            for k, v in self.joint_step(np.sort(batch), chunk).items():
                sums.setdefault(k, []).append(v)
        return {k: float(np.mean(v)) for k, v in sums.items()}

    def validation_ndcg10(self) -> Optional[float]:
        if len(self.bundle.validation) == 0:
            return None
        report = evaluate(self.seq, self.bundle, ks=(10,), filter_seen=self.eval_filter_seen, split="validation",
                          all_successive=self.eval_all_successive)
        return report.metrics["NDCG@10"]

    # -- driver ----------------------------------------------------------------------

    def fit(self, epochs: Optional[int] = None, validate: bool = True) -> TrainLog:
        """Warm-up then joint epochs, early-stopping on validation NDCG@10.

        With ``validate=False`` (final retrain) exactly ``epochs`` epochs run and the
        last state is kept.
        """
        cfg = self.config
        total_epochs = cfg.epochs if epochs is None else epochs
        n_warmup = cfg.n_warmup if self.graph is not None else 0
        n_warmup = min(n_warmup, total_epochs)
        validate = validate and len(self.bundle.validation) > 0
        best_state = None
        bad = 0
        for epoch in range(1, total_epochs + 1):
            t0 = time.perf_counter()
            self.epoch = epoch
            # dropout draws from torch's global generator; pin it per epoch so a run
            # does not depend on what else consumed that generator in this process
            torch.manual_seed(_epoch_seed(cfg.seed, epoch))
            if epoch <= n_warmup:
                phase = "warmup"
                if cfg.warmup_lr is not None:
                    self._set_lr(cfg.warmup_lr)
                stats = self.warmup_epoch()
            else:
                phase = "joint"
                self._set_lr(cfg.lr)
                stats = self.joint_epoch()
            val = self.validation_ndcg10() if validate else None
            rec = EpochRecord(
                epoch=epoch,
                phase=phase,
                L_local=stats.get("L_local"),
                L_global=stats.get("L_global"),
                L_BT=stats.get("L_BT"),
                total=stats["total"],
                val_ndcg10=val,
            )
            self.log.records.append(rec)
            self.log.wall_times.append(time.perf_counter() - t0)
            logger.info("epoch %d %s total=%.4f val_ndcg10=%s", epoch, phase, rec.total, val)
            if not validate or phase == "warmup":
                continue
            if self.log.best_val_ndcg10 is None or val > self.log.best_val_ndcg10:
                self.log.best_val_ndcg10 = val
                self.log.best_epoch = epoch
                best_state = copy.deepcopy(self.model.state_dict())
                bad = 0
            else:
                bad += 1
                if bad >= cfg.early_stop_patience:
                    self.log.stopped_early = True
                    break
        if best_state is not None:
            self.model.load_state_dict(best_state)
        elif not validate:
            self.log.best_epoch = self.epoch
        return self.log

    def save_checkpoint(self, path: str | Path) -> None:
        torch.save(
            {
                "model": self.model.state_dict(),
                "seq_config": asdict(self.seq_config),
                "graph_config": None if self.graph_config is None else asdict(self.graph_config),
                "align_config": asdict(self.align_config),
                "train_config": asdict(self.config),
                "num_users": self.bundle.num_users,
                "num_items": self.bundle.num_items,
                "dim": self.tables.dim,
                "epoch": self.epoch,
                "best_epoch": self.log.best_epoch,
            },
            path,
        )


def load_sequential(path: str | Path) -> SequentialEncoder:
    """Rebuild the inference path (tables + sequential encoder) from a checkpoint."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    seq_cfg = SeqEncoderConfig(**blob["seq_config"])
    state = blob["model"]
    dtype = state["tables.item_table"].dtype
    tables = EmbeddingTables(blob["num_users"], blob["num_items"], blob["dim"], seq_cfg.max_len, dtype)
    seq = SequentialEncoder(seq_cfg, tables)
    seq_state = {k[len("seq."):]: v for k, v in state.items() if k.startswith("seq.")}
    seq.load_state_dict(seq_state)
    return seq


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _check_finite(terms: dict[str, torch.Tensor]) -> None:
    bad = [k for k, v in terms.items() if not math.isfinite(v.item())]
    if bad:
        raise FloatingPointError(f"non-finite loss term(s): {', '.join(bad)}")


def fit_and_retrain(
    bundle: DatasetBundle,
    seq_config: SeqEncoderConfig,
    graph_config: Optional[GraphEncoderConfig],
    align_config: AlignmentConfig,
    train_config: TrainConfig,
    graph_fraction: float = 1.0,
    eval_filter_seen: bool = True,
    eval_all_successive: bool = False,
) -> tuple[Trainer, TrainLog, Trainer]:
    """Tune the epoch count on validation, then refit on train + validation for that many epochs."""
    tuner = Trainer(bundle, seq_config, graph_config, align_config, train_config, graph_fraction,
                    eval_filter_seen=eval_filter_seen, eval_all_successive=eval_all_successive)
    log = tuner.fit()
    epochs = log.best_epoch or tuner.epoch
    final = Trainer(bundle.retrain_bundle(), seq_config, graph_config, align_config, train_config,
                    graph_fraction, eval_filter_seen=eval_filter_seen)
    final.fit(epochs=epochs, validate=False)
    return tuner, log, final
