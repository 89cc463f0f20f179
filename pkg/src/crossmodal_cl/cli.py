"""Command-line entry point: data generation, training, gradient checks, ablations, graph probes.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure
(divergence or a failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data_synth import SyntheticSpec, load_dataset_dir, write_dataset_dir
from .errors import CrossModalError, DivergenceDetected, InvalidConfig
from .experiments import DEFAULT_LAMBDAS, DEFAULT_MODES, ablate_modes, num_answers_of, sweep_lambda
from .gradcheck import RTOL, run_grad_check
from .graph import build_knn_graph
from .model import ToyModel
from .trainer import CL_MODES, TrainConfig, model_for, probe_false_negatives, train

log = logging.getLogger("crossmodal_cl")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


# -- file helpers -----------------------------------------------------------


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, rows: list[dict]):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def sha256_of(path) -> str | None:
    path = Path(path)
    if not path.exists():
        return None
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_train_config(path, seed=None, batch_size=None) -> TrainConfig:
    """Strict TrainConfig from JSON; a previous run manifest is accepted too."""
    raw = {} if path is None else read_json(path)
    if raw.get("kind") == "run_manifest":
        raw = raw["config"]
    config = TrainConfig.from_dict(raw)
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if batch_size is not None:
        changes["batch_size"] = batch_size
    return config.replace(**changes) if changes else config


def run_manifest(command: str, config: dict, seed: int, data_dir=None) -> dict:
    data_hash = sha256_of(Path(data_dir) / "manifest.json") if data_dir else None
    return {
        "kind": "run_manifest",
        "command": command,
        "tool_version": __version__,
        "numpy_version": np.__version__,
        "seed": seed,
        "config": config,
        "dataset_manifest_sha256": data_hash,
    }


class PhaseTimer:
    """Wall-clock per phase, written next to (not inside) the deterministic outputs."""

    def __init__(self):
        self.phases = {}

    def __call__(self, name):
        timer = self

        class _Phase:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.phases[name] = round(time.perf_counter() - self.t0, 3)

        return _Phase()

    def write(self, out_dir):
        write_json(Path(out_dir) / "timings.json", {"wall_clock_seconds": self.phases})


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    raw = {} if args.config is None else read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = SyntheticSpec.from_dict(raw)
    out = _out_dir(args.out)
    manifest = write_dataset_dir(spec, out)
    counts = {k: v["count"] for k, v in manifest["splits"].items()}
    print(json.dumps({"out": str(out), "counts": counts}))
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_train_config(args.config, args.seed, args.batch_size)
    out = _out_dir(args.out)
    timer = PhaseTimer()
    with timer("load"):
        datasets, _ = load_dataset_dir(args.data)
    model = model_for(datasets["train"], config, num_answers_of(datasets))
    write_json(out / "run_manifest.json", run_manifest("train", config.to_dict(), config.seed, args.data))
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as fh:

        def emit(record):
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
            fh.flush()

        try:
            with timer("train"):
                model, history = train(model, datasets, config, on_epoch=emit)
        except DivergenceDetected as exc:
            if exc.last_good is not None:
                exc.last_good.save(out / "checkpoint_last_good.json")
            timer.write(out)
            raise
    model.save(out / "checkpoint.json")
    rows = [{k: v for k, v in r.to_dict().items() if k != "acc_per_question_type"} for r in history]
    write_csv(out / "summary.csv", rows)
    timer.write(out)
    last = history[-1]
    print(json.dumps({"epochs": len(history), "acc_test_counter": last.acc_test_counter, "acc_test_iid": last.acc_test_iid}))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    rows = run_grad_check(args.seed, args.trials)
    lines = [f"{'objective':<18} {'trials':>6} {'max_rel_error':>14}  result"]
    for r in rows:
        lines.append(f"{r.objective:<18} {r.trials:>6} {r.max_rel_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    lines.append(f"tolerance: relative error <= {RTOL:g} (absolute floor 1e-7), central differences, step 1e-5")
    report = "\n".join(lines)
    print(report)
    if args.out:
        out = _out_dir(args.out)
        (out / "grad_check.txt").write_text(report + "\n")
        write_json(out / "grad_check.json", [{"objective": r.objective, "trials": r.trials, "max_rel_error": r.max_rel_error, "passed": r.passed} for r in rows])
    return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERIC


def _parse_list(text, cast, name):
    try:
        return [cast(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad {name} list {text!r}") from exc


def cmd_ablate(args) -> int:
    config = load_train_config(args.config, args.seed, args.batch_size)
    modes = _parse_list(args.modes, str, "--modes") if args.modes else list(DEFAULT_MODES)
    bad = [m for m in modes if m not in CL_MODES]
    if bad:
        raise UsageError(f"unknown modes {bad}; choose from {CL_MODES}")
    out = _out_dir(args.out)
    timer = PhaseTimer()
    with timer("load"):
        datasets, _ = load_dataset_dir(args.data)
    manifest = run_manifest("ablate", config.to_dict(), config.seed, args.data)
    manifest.update(modes=modes, seeds_per_cell=args.seeds_per_cell, probe_batches=args.probe_batches)
    per_seed = []
    if not args.skip_modes:
        with timer("modes"):
            summary, rows = ablate_modes(datasets, config, modes, args.seeds_per_cell, args.workers, args.probe_batches)
        write_csv(out / "ablation.csv", summary)
        per_seed += rows
        _print_table(summary, "cl_mode")
    if args.sweep_lambda is not None:
        lambdas = _parse_list(args.sweep_lambda, float, "--sweep-lambda") if args.sweep_lambda else list(DEFAULT_LAMBDAS)
        if any(lam < 0 for lam in lambdas):
            raise UsageError("lambda values must be non-negative")
        manifest["sweep_lambda"] = lambdas
        with timer("lambda_sweep"):
            summary, rows = sweep_lambda(datasets, config, lambdas, args.seeds_per_cell, args.workers, args.probe_batches)
        write_csv(out / "lambda_sweep.csv", summary)
        per_seed += rows
        _print_table(summary, "lambda")
    with open(out / "runs.jsonl", "w") as fh:
        for r in per_seed:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    write_json(out / "run_manifest.json", manifest)
    timer.write(out)
    return EXIT_OK


def _print_table(summary, key):
    print(f"{key:>16} {'counter':>8} {'iid':>8} {'train':>8} {'fn_van':>8} {'fn_graph':>8}")
    fmt = lambda v: f"{v:8.4f}" if v is not None else f"{'-':>8}"  # noqa: E731
    for s in summary:
        print(
            f"{str(s[key]):>16} {fmt(s['acc_test_counter_mean'])} {fmt(s['acc_test_iid_mean'])} {fmt(s['acc_overall_mean'])} "
            f"{fmt(s['false_negative_rate_vanilla_mean'])} {fmt(s['false_negative_rate_graph_mean'])}"
        )


def probe_graph_report(model: ToyModel, dataset, batch_size: int, num_batches: int, seed: int) -> tuple[list[dict], dict]:
    """Serialise the graph of each probed batch and summarise oracle agreement."""
    n = len(dataset)
    m = min(batch_size, n)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x960B]))
    graphs = []
    pure = total = split_concepts = 0
    for b in range(num_batches):
        idx = np.sort(rng.choice(n, size=m, replace=False))
        graph = build_knn_graph(model.encode_image(dataset.image[idx]))
        entry = {"batch": b, "sample_indices": idx.tolist(), **graph.to_dict()}
        if dataset.concept is not None:
            concepts = dataset.concept[idx]
            entry["component_concepts"] = [sorted({int(concepts[i]) for i in comp}) for comp in graph.components]
            pure += sum(len(c) == 1 for c in entry["component_concepts"])
            total += len(graph.components)
            for c in np.unique(concepts):
                labels = {graph.component_of[i] for i in np.flatnonzero(concepts == c)}
                split_concepts += len(labels) > 1
        graphs.append(entry)
    report = {"batch_size": m, "num_batches": num_batches, "mean_component_size": float(np.mean([m / len(g["components"]) for g in graphs]))}
    if dataset.concept is not None:
        report["concept_pure_component_fraction"] = pure / total if total else None
        report["concepts_split_across_components"] = int(split_concepts)
    if dataset.has_oracle:
        rv, rg, _ = probe_false_negatives(model, dataset, batch_size, num_batches, seed)
        report["false_negative_rate_vanilla"] = rv
        report["false_negative_rate_graph"] = rg
    return graphs, report


def cmd_probe_graph(args) -> int:
    try:
        model = ToyModel.load(args.checkpoint)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror}") from exc
    datasets, _ = load_dataset_dir(args.data)
    if args.split not in datasets:
        raise UsageError(f"split {args.split!r} not found in {args.data}")
    seed = 0 if args.seed is None else args.seed
    graphs, report = probe_graph_report(model, datasets[args.split], args.batch_size, args.num_batches, seed)
    report["split"] = args.split
    out = _out_dir(args.out)
    with open(out / "graphs.jsonl", "w") as fh:
        for g in graphs:
            fh.write(json.dumps(g) + "\n")
    write_json(out / "probe_report.json", report)
    write_json(out / "run_manifest.json", run_manifest("probe-graph", {"checkpoint_sha256": sha256_of(args.checkpoint), "batch_size": args.batch_size, "num_batches": args.num_batches, "split": args.split}, seed, args.data))
    print(json.dumps(report))
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossmodal-cl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic shortcut-biased dataset")
    g.add_argument("--config", help="SyntheticSpec JSON (defaults when omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="joint supervised + contrastive training")
    t.add_argument("--config", help="TrainConfig JSON or a previous run_manifest.json")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("grad-check", help="finite-difference check of every analytic gradient")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--trials", type=int, default=50)
    c.add_argument("--out")
    c.set_defaults(func=cmd_grad_check)

    a = sub.add_parser("ablate", help="mode ablation and optional lambda sweep")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--batch-size", type=int)
    a.add_argument("--modes", help=f"comma list, default {','.join(DEFAULT_MODES)}")
    a.add_argument("--seeds-per-cell", type=int, default=5)
    a.add_argument("--sweep-lambda", nargs="?", const="", default=None, help="comma list of lambdas (default grid when empty)")
    a.add_argument("--skip-modes", action="store_true", help="run only the lambda sweep")
    a.add_argument("--probe-batches", type=int, default=0, help="extra false-negative probe batches per run")
    a.add_argument("--workers", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    pg = sub.add_parser("probe-graph", help="serialise batch graphs and false-negative rates for a checkpoint")
    pg.add_argument("--checkpoint", required=True)
    pg.add_argument("--data", required=True)
    pg.add_argument("--out", required=True)
    pg.add_argument("--batch-size", type=int, default=256)
    pg.add_argument("--num-batches", type=int, default=10)
    pg.add_argument("--split", default="train")
    pg.add_argument("--seed", type=int)
    pg.set_defaults(func=cmd_probe_graph)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seeds_per_cell", 1) < 1:
        print("error: --seeds-per-cell must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except DivergenceDetected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, InvalidConfig, CrossModalError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
