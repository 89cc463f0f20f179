"""Multi-seed training cells, mode ablations and lambda sweeps."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .data_synth import Dataset
from .trainer import TrainConfig, model_for, probe_false_negatives, train

SUMMARY_METRICS = (
    "acc_test_counter",
    "acc_test_iid",
    "acc_overall",
    "false_negative_rate_vanilla",
    "false_negative_rate_graph",
    "mean_component_size",
)
DEFAULT_MODES = ("off", "coarse_triplet", "vanilla", "multi_positive")
DEFAULT_LAMBDAS = (0.0, 0.1, 0.3, 0.5, 0.7, 1.0)


def num_answers_of(datasets: dict[str, Dataset]) -> int:
    top = max(int(ds.answer_id.max()) for ds in datasets.values() if len(ds))
    table = datasets["train"].answer_table
    if table is not None:
        top = max(top, int(table.max()))
    return top + 1


def run_cell(datasets: dict[str, Dataset], config: TrainConfig, probe_batches: int = 0, num_answers: int | None = None) -> dict:
    """Train one model and return its final-epoch metrics as a flat dict.

    ``probe_batches`` > 0 replaces the final false-negative rates with a
    longer probe on the training split.
    """
    k = num_answers or num_answers_of(datasets)
    model, history = train(model_for(datasets["train"], config, k), datasets, config)
    last = history[-1].to_dict()
    if probe_batches and datasets["train"].has_oracle:
        rv, rg, cs = probe_false_negatives(model, datasets["train"], config.batch_size, probe_batches, seed=config.seed)
        last.update(false_negative_rate_vanilla=rv, false_negative_rate_graph=rg, mean_component_size=cs)
    row = {"cl_mode": config.cl_mode, "lambda": config.lam, "seed": config.seed}
    row.update({m: last.get(m) for m in SUMMARY_METRICS})
    row["loss_sup"] = last["loss_sup"]
    row["loss_cl"] = last["loss_cl"]
    return row


def _run_all(datasets, configs, workers, probe_batches):
    k = num_answers_of(datasets)
    if workers <= 1:
        return [run_cell(datasets, c, probe_batches, k) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # map keeps submission order, so merged results stay deterministic
        return list(pool.map(lambda c: run_cell(datasets, c, probe_batches, k), configs))


def summarize(rows: list[dict], key: str) -> list[dict]:
    """Average per-seed rows grouped by ``key`` (first-seen order)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r)
    out = []
    for value, rs in groups.items():
        summary = {"group": key, key: value, "cl_mode": rs[0]["cl_mode"], "lambda": rs[0]["lambda"], "seeds": len(rs)}
        for metric in SUMMARY_METRICS:
            vals = [r[metric] for r in rs if r[metric] is not None]
            summary[f"{metric}_mean"] = float(np.mean(vals)) if vals else None
            summary[f"{metric}_std"] = float(np.std(vals)) if vals else None
        out.append(summary)
    return out


def seed_configs(base: TrainConfig, seeds_per_cell: int, **changes) -> list[TrainConfig]:
    return [base.replace(seed=base.seed + i, **changes) for i in range(seeds_per_cell)]


def ablate_modes(datasets, base: TrainConfig, modes=DEFAULT_MODES, seeds_per_cell: int = 5, workers: int = 1, probe_batches: int = 0):
    """One summary row per contrastive mode, averaged over seeds; returns ``(summary, per_seed_rows)``."""
    configs = [c for mode in modes for c in seed_configs(base, seeds_per_cell, cl_mode=mode)]
    rows = _run_all(datasets, configs, workers, probe_batches)
    return summarize(rows, "cl_mode"), rows


def sweep_lambda(datasets, base: TrainConfig, lambdas=DEFAULT_LAMBDAS, seeds_per_cell: int = 5, workers: int = 1, probe_batches: int = 0):
    """One summary row per lambda (mode taken from ``base``); returns ``(summary, per_seed_rows)``."""
    configs = [c for lam in lambdas for c in seed_configs(base, seeds_per_cell, lam=float(lam))]
    rows = _run_all(datasets, configs, workers, probe_batches)
    return summarize(rows, "lambda"), rows
