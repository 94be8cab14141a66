"""Fold-level orchestration of search, training and evaluation runs and their on-disk artifacts."""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import logging
import math
import os
import time
from pathlib import Path
from typing import Callable

import numpy as np

from .cell import Genotype, derive_genotype, export_genotype, genotype_to_dot, import_genotype, alpha_entropy
from .config import RunConfig, from_dict
from .data import Fold, FoldPlan, as_arrays, load_container, make_folds
from .models import (
    BASELINES,
    ModelBundle,
    build_cnn_baseline,
    build_cnn_lstm_baseline,
    build_darts_model,
    build_search_model,
    load_checkpoint,
    save_checkpoint,
)
from .optim import evaluate, run_search, run_training
from .report import summarize_search, summarize_train

log = logging.getLogger("dartser")

METRIC_KEYS = ("loss", "wa", "ua")
EVAL_TOLERANCE = 1e-6

# independent random streams per fold
_STREAM_INIT, _STREAM_BATCHES = 0, 1


class FoldError(RuntimeError):
    def __init__(self, fold: int, cause: BaseException):
        super().__init__(f"fold {fold}: {type(cause).__name__}: {cause}")
        self.fold = fold


def fold_rng(seed: int, fold: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, fold, stream]))


def data_fingerprint(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def fold_plan(records, seed: int, n_folds: int, search_fraction: float) -> FoldPlan:
    return make_folds(records, np.random.default_rng(seed), n_folds, search_fraction)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


class _Jsonl:
    def __init__(self, path: Path):
        self.fh = open(path, "w")

    def write(self, doc: dict) -> None:
        self.fh.write(json.dumps(doc, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _metric_record(epoch: int, phase: str, metrics: dict, lr: float | None) -> dict:
    return {"epoch": epoch, "phase": phase, "loss": metrics["loss"], "wa": metrics["wa"],
            "ua": metrics["ua"], "lr": lr}


def _prepare_run_dir(out_dir: str | os.PathLike, cfg: RunConfig, header: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    _write_json(out / "run.json", header)
    return out


def _run_folds(worker: Callable, args: list[tuple], jobs: int) -> list:
    """Run ``worker(*a)`` per fold, in order or across ``jobs`` processes; errors carry the fold id."""
    results = []
    if jobs <= 1:
        for a in args:
            try:
                results.append(worker(*a))
            except Exception as exc:
                raise FoldError(a[0], exc) from exc
        return results
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(worker, *a) for a in args]
        for a, fut in zip(args, futures):
            try:
                results.append(fut.result())
            except Exception as exc:
                raise FoldError(a[0], exc) from exc
    return results


# -- search ------------------------------------------------------------------
def _search_fold(fold_id: int, cfg_doc: dict, data_path: str, out_dir: str) -> dict:
    cfg = from_dict(cfg_doc)
    records = load_container(data_path)
    fold = fold_plan(records, cfg.seed, cfg.n_folds, cfg.search_fraction).folds[fold_id]
    fold_dir = Path(out_dir) / f"fold_{fold_id}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    search_split = as_arrays(records, fold.search)
    train_split = as_arrays(records, fold.train)
    model = build_search_model(cfg.network, cfg.head, fold_rng(cfg.seed, fold_id, _STREAM_INIT))
    net = model.features
    metrics_log = _Jsonl(fold_dir / "metrics.jsonl")
    alpha_log = _Jsonl(fold_dir / "alphas.jsonl")

    def snapshot(completed: int) -> None:
        tables = {k: net.arch[k].data.astype(np.float64) for k in ("normal", "reduce")}
        alpha_log.write({"epoch": completed,
                         "entropy": {k: alpha_entropy(v) for k, v in tables.items()},
                         **{k: v.tolist() for k, v in tables.items()}})

    def on_epoch(epoch: int, metrics: dict, lr: float) -> None:
        for phase in ("search", "train"):
            metrics_log.write(_metric_record(epoch, phase, metrics[phase], lr))
        snapshot(epoch + 1)
        log.info("search fold %d epoch %d: search loss %.4f, train loss %.4f",
                 fold_id, epoch, metrics["search"]["loss"], metrics["train"]["loss"])

    try:
        snapshot(0)
        run_search(model, search_split, train_split, cfg.sgd(cfg.search_epochs), cfg.alpha_opt, cfg.loop,
                   fold_rng(cfg.seed, fold_id, _STREAM_BATCHES), on_epoch)
    finally:
        metrics_log.close()
        alpha_log.close()
    genotype = derive_genotype(net.arch["normal"].data, net.arch["reduce"].data)
    (fold_dir / "genotype.json").write_bytes(export_genotype(genotype))
    (fold_dir / "genotype.dot").write_text(genotype_to_dot(genotype))
    return {"fold": fold_id, "test_speakers": list(fold.test_speakers),
            "genotype": json.loads(export_genotype(genotype))}


def run_search_experiment(cfg: RunConfig, data_path: str | os.PathLike, out_dir: str | os.PathLike,
                          jobs: int = 1) -> dict:
    """Search one genotype per fold; returns the run header written to run.json."""
    start = time.perf_counter()
    records = load_container(data_path)
    fold_plan(records, cfg.seed, cfg.n_folds, cfg.search_fraction)  # validate before writing anything
    header = {
        "command": "search",
        "config_fingerprint": cfg.fingerprint,
        "data_fingerprint": data_fingerprint(data_path),
        "reduction_indices": list(cfg.network.reduction_indices),
        "folds": cfg.fold_ids,
    }
    out = _prepare_run_dir(out_dir, cfg, header)
    args = [(k, cfg.to_dict(), str(data_path), str(out)) for k in cfg.fold_ids]
    header["results"] = _run_folds(_search_fold, args, jobs)
    header["wall_clock_seconds"] = time.perf_counter() - start
    _write_json(out / "run.json", header)
    summarize_search(out, figures=cfg.figures)
    return header


# -- training ----------------------------------------------------------------
def resolve_genotype(source: str | os.PathLike, fold_id: int) -> Genotype:
    """A genotype JSON file (shared by every fold) or a search run directory (its fold's genotype)."""
    source = Path(source)
    path = source / f"fold_{fold_id}" / "genotype.json" if source.is_dir() else source
    if not path.exists():
        raise FileNotFoundError(f"no genotype for fold {fold_id} at {path}")
    return import_genotype(path.read_bytes())


def build_model(cfg: RunConfig, rng, genotype: Genotype | None = None, baseline: str | None = None) -> ModelBundle:
    if baseline is not None:
        if baseline not in BASELINES:
            raise ValueError(f"unknown baseline {baseline!r}; expected one of {', '.join(BASELINES)}")
        if baseline == "cnn":
            return build_cnn_baseline(rng, cfg.baseline_channels, cfg.baseline_dense_widths, cfg.baseline_dropout)
        return build_cnn_lstm_baseline(rng, baseline == "cnn_lstm_attention", cfg.baseline_channels,
                                       cfg.baseline_lstm_units, cfg.baseline_dense_widths, cfg.baseline_dropout)
    if genotype is None:
        raise ValueError("training needs either a genotype or a baseline")
    return build_darts_model(genotype, cfg.network, cfg.head, rng)


def _train_fold(fold_id: int, cfg_doc: dict, data_path: str, out_dir: str,
                genotype_source: str | None, baseline: str | None) -> dict:
    cfg = from_dict(cfg_doc)
    records = load_container(data_path)
    fold = fold_plan(records, cfg.seed, cfg.n_folds, cfg.search_fraction).folds[fold_id]
    fold_dir = Path(out_dir) / f"fold_{fold_id}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    genotype = resolve_genotype(genotype_source, fold_id) if baseline is None else None
    model = build_model(cfg, fold_rng(cfg.seed, fold_id, _STREAM_INIT), genotype, baseline)
    metrics_log = _Jsonl(fold_dir / "metrics.jsonl")

    def on_epoch(epoch: int, metrics: dict, lr: float) -> None:
        metrics_log.write(_metric_record(epoch, "train", metrics, lr))
        log.info("train fold %d epoch %d: loss %.4f, wa %.3f", fold_id, epoch, metrics["loss"], metrics["wa"])

    try:
        run_training(model, as_arrays(records, fold.train), cfg.sgd(cfg.train_epochs), cfg.train_epochs,
                     fold_rng(cfg.seed, fold_id, _STREAM_BATCHES), cfg.batch_size, cfg.grad_clip, on_epoch)
        test = evaluate(model, as_arrays(records, fold.test), cfg.batch_size)
        metrics_log.write(_metric_record(cfg.train_epochs, "test", test, None))
    finally:
        metrics_log.close()
    extra = {
        "fold": fold_id,
        "seed": cfg.seed,
        "n_folds": cfg.n_folds,
        "search_fraction": cfg.search_fraction,
        "batch_size": cfg.batch_size,
        "data_fingerprint": data_fingerprint(data_path),
        "config_fingerprint": cfg.fingerprint,
        "metrics": test,
    }
    save_checkpoint(model, fold_dir / "checkpoint.bin", extra)
    return {"fold": fold_id, "test_speakers": list(fold.test_speakers), **test,
            "genotype": json.loads(export_genotype(genotype)) if genotype is not None else None,
            "parameters": model.num_parameters()}


def _mean_std(rows: list[dict]) -> tuple[dict, dict]:
    mean = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_KEYS}
    # population std over folds
    std = {k: float(np.std([r[k] for r in rows])) for k in METRIC_KEYS}
    return mean, std


def run_train_experiment(cfg: RunConfig, data_path: str | os.PathLike, out_dir: str | os.PathLike,
                         genotype_source: str | os.PathLike | None = None, baseline: str | None = None,
                         jobs: int = 1) -> dict:
    """Train and test one model per fold; returns the report written to report.json."""
    if (genotype_source is None) == (baseline is None):
        raise ValueError("pass exactly one of a genotype source or a baseline")
    start = time.perf_counter()
    records = load_container(data_path)
    fold_plan(records, cfg.seed, cfg.n_folds, cfg.search_fraction)
    if genotype_source is not None:
        for k in cfg.fold_ids:
            resolve_genotype(genotype_source, k)
    model_name = baseline or "darts"
    header = {
        "command": "train",
        "model": model_name,
        "config_fingerprint": cfg.fingerprint,
        "data_fingerprint": data_fingerprint(data_path),
        "genotype_source": str(genotype_source) if genotype_source is not None else None,
        "reduction_indices": list(cfg.network.reduction_indices),
    }
    out = _prepare_run_dir(out_dir, cfg, header)
    src = str(genotype_source) if genotype_source is not None else None
    args = [(k, cfg.to_dict(), str(data_path), str(out), src, baseline) for k in cfg.fold_ids]
    rows = _run_folds(_train_fold, args, jobs)
    mean, std = _mean_std(rows)
    report = {
        "model": model_name,
        "config_fingerprint": cfg.fingerprint,
        "data_fingerprint": header["data_fingerprint"],
        "folds": rows,
        "mean": mean,
        "std": std,
        "wall_clock_seconds": time.perf_counter() - start,
    }
    _write_json(out / "report.json", report)
    summarize_train(out, figures=cfg.figures)
    return report


# -- evaluation --------------------------------------------------------------
def evaluate_checkpoint(checkpoint: str | os.PathLike, data_path: str | os.PathLike) -> dict:
    """Recompute a checkpoint's test-fold metrics and compare them with the stored ones.

    Returns {"fold", "metrics", "stored", "max_abs_diff", "match"}.
    """
    model, header = load_checkpoint(checkpoint)
    extra = header.get("extra", {})
    needed = {"fold", "seed", "n_folds", "search_fraction", "data_fingerprint", "metrics"}
    missing = needed - set(extra)
    if missing:
        raise ValueError(f"{checkpoint}: checkpoint lacks run metadata {sorted(missing)}")
    found = data_fingerprint(data_path)
    if found != extra["data_fingerprint"]:
        raise ValueError(f"data fingerprint mismatch: checkpoint was trained on {extra['data_fingerprint']}, "
                         f"{data_path} is {found}")
    records = load_container(data_path)
    fold: Fold = fold_plan(records, extra["seed"], extra["n_folds"], extra["search_fraction"]).folds[extra["fold"]]
    metrics = evaluate(model, as_arrays(records, fold.test), extra.get("batch_size", 16))
    stored = dict(extra["metrics"])
    report_path = Path(checkpoint).parent.parent / "report.json"
    if report_path.exists():
        for row in json.loads(report_path.read_text())["folds"]:
            if row["fold"] == extra["fold"]:
                stored = {k: row[k] for k in METRIC_KEYS}
    diff = max(abs(metrics[k] - stored[k]) for k in METRIC_KEYS)
    return {"fold": extra["fold"], "metrics": metrics, "stored": stored, "max_abs_diff": diff,
            "match": bool(math.isfinite(diff) and diff <= EVAL_TOLERANCE)}
