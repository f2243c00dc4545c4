"""Config-driven pipeline: prepare a bundle, train seeds, evaluate runs, and build reports.

Layout on disk::

    <data_dir>/<data_hash>/          train.npy validation.npy test.npy meta.json summary.json
    <runs_dir>/<config_hash>/        config.yaml summary.json summary.tsv summary.md
        seed_<s>/                    checkpoint.pt train_log.jsonl retrain_log.jsonl
                                     timings.jsonl done.json metrics.json metrics_unfiltered.json

Every number in a report comes from a ``metrics*.json`` or ``*_log.jsonl`` file.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from createrec.config import ExperimentConfig, from_dict
from createrec.data import DatasetBundle, InteractionLog, ingest, load_bundle, save_bundle, temporal_split
from createrec.evaluation import MetricsReport, evaluate, evaluate_baseline
from createrec.synthetic import movielens_like_log, planted_rule_log
from createrec.training import TrainLog, Trainer, fit_and_retrain, load_sequential

logger = logging.getLogger(__name__)

METRIC_ORDER = ("NDCG@10", "Recall@10", "Cov@10", "NDCG@100", "Recall@100", "Cov@100")


# -- data ---------------------------------------------------------------------------------

def load_log(cfg: ExperimentConfig) -> InteractionLog:
    d = cfg.dataset
    if d.path is not None:
        return ingest(d.path, format=d.format, delimiter=d.delimiter, header=d.header)
    kwargs = dict(d.synthetic)
    generator = kwargs.pop("generator")
    if generator == "movielens_like":
        return movielens_like_log(**kwargs)
    log, _, _ = planted_rule_log(**kwargs)
    return log


def prepare(cfg: ExperimentConfig, data_dir: str | Path) -> tuple[Path, DatasetBundle]:
    """Build (or reuse) the split bundle for ``cfg``'s dataset block."""
    out = Path(data_dir) / cfg.data_hash()
    if (out / "meta.json").exists():
        return out, load_bundle(out)
    bundle = temporal_split(load_log(cfg), cfg.dataset.val_quantile, cfg.dataset.test_quantile)
    save_bundle(bundle, out)
    (out / "summary.json").write_text(json.dumps(bundle.summary(), sort_keys=True, indent=1) + "\n")
    return out, bundle


# -- training -----------------------------------------------------------------------------

def run_dir(cfg: ExperimentConfig, runs_dir: str | Path) -> Path:
    out = Path(runs_dir) / cfg.config_hash()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    return out


def load_run_config(path: str | Path) -> ExperimentConfig:
    return from_dict(yaml.safe_load((Path(path) / "config.yaml").read_text()))


def train_seed(cfg: ExperimentConfig, bundle: DatasetBundle, seed: int, out: Path) -> bool:
    """Train one seed into ``out``; returns False when the seed was already complete."""
    if (out / "done.json").exists():
        return False
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train_config(seed)
    args = (cfg.model.seq, cfg.model.graph, cfg.alignment, tc, cfg.dataset.graph_fraction)
    if cfg.retrain:
        tuner, log, final = fit_and_retrain(bundle, *args, eval_filter_seen=cfg.eval.filter_seen,
                                            eval_all_successive=cfg.eval.all_successive)
        (out / "retrain_log.jsonl").write_text(final.log.to_jsonl())
    else:
        final = Trainer(bundle, *args, eval_filter_seen=cfg.eval.filter_seen,
                        eval_all_successive=cfg.eval.all_successive)
        log = final.fit()
    (out / "train_log.jsonl").write_text(log.to_jsonl())
    (out / "timings.jsonl").write_text(log.timings_jsonl())
    final.save_checkpoint(out / "checkpoint.pt")
    done = {
        "best_epoch": log.best_epoch,
        "best_val_ndcg10": log.best_val_ndcg10,
        "stopped_early": log.stopped_early,
        "epochs_run": len(log.records),
    }
    (out / "done.json").write_text(json.dumps(done, sort_keys=True) + "\n")
    return True


def train(cfg: ExperimentConfig, data_dir: str | Path, runs_dir: str | Path) -> Path:
    _, bundle = prepare(cfg, data_dir)
    rd = run_dir(cfg, runs_dir)
    for seed in cfg.seeds:
        if not train_seed(cfg, bundle, seed, rd / f"seed_{seed}"):
            logger.warning("seed %d in %s is already complete; nothing to do", seed, rd)
    return rd


# -- evaluation ---------------------------------------------------------------------------

def seed_dirs(rd: Path) -> list[tuple[int, Path]]:
    found = []
    for p in rd.glob("seed_*"):
        if (p / "done.json").exists():
            found.append((int(p.name.split("_", 1)[1]), p))
    return sorted(found)


def evaluate_seed(cfg: ExperimentConfig, bundle: DatasetBundle, seed: int, sd: Path) -> MetricsReport:
    encoder = load_sequential(sd / "checkpoint.pt")
    reports = {}
    variants = [("metrics.json", cfg.eval.filter_seen)]
    if cfg.eval.report_unfiltered and cfg.eval.filter_seen:
        variants.append(("metrics_unfiltered.json", False))
    for name, filt in variants:
        rep = evaluate(encoder, bundle, ks=tuple(cfg.eval.ks), filter_seen=filt,
                       all_successive=cfg.eval.all_successive)
        rep.seed = seed
        rep.config_hash = cfg.config_hash()
        rep.extra = {"name": cfg.name, "config": cfg.to_dict()}
        (sd / name).write_text(rep.to_json())
        reports[name] = rep
    return reports["metrics.json"]


def read_reports(rd: Path, name: str = "metrics.json") -> list[MetricsReport]:
    return [MetricsReport.from_json((sd / name).read_text()) for _, sd in seed_dirs(rd) if (sd / name).exists()]


def aggregate(reports: Sequence[MetricsReport]) -> dict[str, dict[str, float]]:
    """Mean and population standard deviation of every metric across seeds."""
    if not reports:
        raise ValueError("no reports to aggregate")
    keys = list(reports[0].metrics)
    out = {}
    for k in keys:
        vals = np.array([r.metrics[k] for r in reports], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": len(vals)}
    return out


@dataclass
class Column:
    label: str
    stats: dict[str, dict[str, float]]


def comparison_table(columns: Sequence[Column], metrics: Sequence[str] = METRIC_ORDER) -> list[list[str]]:
    """Rows of ``Metric | column... | Gain``.

    Gain is the relative change of the last column over the first trained (non-baseline)
    column, so put the reference model first and the proposed one last.
    """
    trained = [c for c in columns if c.label not in _BASELINES]
    gain = len(trained) > 1
    header = ["Metric"] + [c.label for c in columns] + (["Gain"] if gain else [])
    rows = [header]
    for m in metrics:
        if not all(m in c.stats for c in columns):
            continue
        row = [m]
        for c in columns:
            s = c.stats[m]
            # non-personalized baselines are listed without a spread
            row.append(f"{s['mean']:.2f}" if c.label in _BASELINES else f"{s['mean']:.2f} (± {s['std']:.2f})")
        if gain:
            base, last = trained[0].stats[m]["mean"], trained[-1].stats[m]["mean"]
            row.append(f"{(last - base) / base * 100:+.0f}%" if base else "n/a")
        rows.append(row)
    return rows


_BASELINES = ("Random", "PopRnd")


def write_table(rows: list[list[str]], stem: Path) -> None:
    with open(stem.with_suffix(".tsv"), "w", newline="") as fh:
        csv.writer(fh, delimiter="\t", lineterminator="\n").writerows(rows)
    lines = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
    lines += ["| " + " | ".join(r) + " |" for r in rows[1:]]
    stem.with_suffix(".md").write_text("\n".join(lines) + "\n")


def baseline_column(name: str, bundle: DatasetBundle, ks: Sequence[int], seeds: Sequence[int]) -> Column:
    reports = [evaluate_baseline(name.lower(), bundle, ks, seed) for seed in seeds]
    return Column(name, aggregate(reports))


def evaluate_runs(
    run_dirs: Sequence[Path], data_dir: str | Path, baselines: bool = False, out: Optional[Path] = None
) -> list[list[str]]:
    """Evaluate every finished seed of each run; write per-run summaries and a joint table."""
    columns = []
    bundle = None
    cfg = None
    for rd in run_dirs:
        rd = Path(rd)
        cfg = load_run_config(rd)
        _, bundle = prepare(cfg, data_dir)
        seeds = seed_dirs(rd)
        if not seeds:
            raise ValueError(f"{rd} has no finished seeds")
        reports = [evaluate_seed(cfg, bundle, s, sd) for s, sd in seeds]
        stats = aggregate(reports)
        (rd / "summary.json").write_text(json.dumps(stats, sort_keys=True, indent=1) + "\n")
        write_table(comparison_table([Column(cfg.name, stats)]), rd / "summary")
        columns.append(Column(cfg.name, stats))
    if baselines and bundle is not None:
        seeds = cfg.seeds
        columns = [baseline_column(b, bundle, cfg.eval.ks, seeds) for b in _BASELINES] + columns
    rows = comparison_table(columns)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_table(rows, out / "comparison")
    return rows


# -- reports ------------------------------------------------------------------------------

CURVES = {
    "graph_fraction": lambda c: c.dataset.graph_fraction,
    "w_bt": lambda c: c.training.w_bt,
    "n_warmup": lambda c: c.training.n_warmup,
}


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def training_curve_rows(rd: Path) -> list[list]:
    rows = []
    for seed, sd in seed_dirs(rd):
        log = TrainLog.from_jsonl((sd / "train_log.jsonl").read_text())
        for r in log.records:
            rows.append([seed, r.epoch, r.phase, r.total, r.L_local, r.L_global, r.L_BT, r.val_ndcg10])
    return rows


def plot_training(rows: list[list], n_warmup: int, title: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    seed0 = rows[0][0]
    mine = [r for r in rows if r[0] == seed0]
    epochs = [r[1] for r in mine]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, [r[3] for r in mine], color="tab:red", label="training loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss", color="tab:red")
    ax2 = ax.twinx()
    val = [(e, r[7]) for e, r in zip(epochs, mine) if r[7] is not None]
    if val:
        ax2.plot(*zip(*val), color="tab:blue", label="validation NDCG@10")
    ax2.set_ylabel("validation NDCG@10", color="tab:blue")
    if n_warmup > 0:
        ax.axvline(n_warmup + 0.5, color="gray", linestyle="--", label="end of warm-up")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_curve(rows: list[list], key: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    xs = [r[0] for r in rows]
    ax.errorbar(xs, [r[1] for r in rows], yerr=[r[2] for r in rows], marker="o", capsize=3)
    ax.set_xlabel(key)
    ax.set_ylabel("test NDCG@10")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def report(run_dirs: Sequence[Path], out: Path, plots: bool = True) -> dict[str, Path]:
    """Training-dynamics plots, ablation curves and the comparison table for ``run_dirs``."""
    if not run_dirs:
        raise ValueError("report needs at least one run directory")
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    runs = []
    for rd in map(Path, run_dirs):
        cfg = load_run_config(rd)
        reports = read_reports(rd)
        runs.append((rd, cfg, reports))
        rows = training_curve_rows(rd)
        if not rows:
            logger.warning("%s has no finished seeds; skipped", rd)
            continue
        stem = out / f"training_{rd.name}"
        _write_csv(stem.with_suffix(".csv"),
                   ["seed", "epoch", "phase", "total", "L_local", "L_global", "L_BT", "val_ndcg10"], rows)
        written[stem.name] = stem.with_suffix(".csv")
        if plots:
            plot_training(rows, cfg.training.n_warmup, cfg.name, stem.with_suffix(".png"))

    evaluated = [(rd, cfg, reps) for rd, cfg, reps in runs if reps]
    for rd, _, reps in runs:
        if not reps:
            logger.warning("%s has no metrics; run evaluate first", rd)
    for key, get in CURVES.items():
        points: dict[float, list[float]] = {}
        for _, cfg, reps in evaluated:
            points.setdefault(float(get(cfg)), []).extend(r.metrics["NDCG@10"] for r in reps)
        if len(points) < 2:
            logger.warning("curve %s needs runs at two or more values; have %d", key, len(points))
            continue
        rows = [[x, float(np.mean(v)), float(np.std(v)), len(v)] for x, v in sorted(points.items())]
        path = out / f"curve_{key}.csv"
        _write_csv(path, [key, "ndcg10_mean", "ndcg10_std", "n"], rows)
        written[f"curve_{key}"] = path
        if plots:
            plot_curve(rows, key, path.with_suffix(".png"))
    if evaluated:
        table = comparison_table([Column(cfg.name, aggregate(reps)) for _, cfg, reps in evaluated])
        write_table(table, out / "comparison")
        written["comparison"] = out / "comparison.tsv"
    return written

