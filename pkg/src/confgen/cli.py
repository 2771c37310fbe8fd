"""Command-line pipeline driver.

Subcommands: make-data, train, generate, evaluate, estimate. Every command is
deterministic under a fixed --seed and a fixed --threads count; per-task RNG
streams are derived from the root seed and reduced in input order, so the
thread count changes wall time only. Exit codes: 0 success, 1 domain failure,
2 usage or IO error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import cvae, dataio, edg, evalmmd
from .boltzmann import ISConfig, is_estimate, observable_by_name
from .errors import DomainError, UsageError

DEFAULT_SEED = 1729


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confgen",
        description="Sample molecular conformations from graphs via distance geometry.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="generate a synthetic benchmark dataset")
    p.add_argument("spec", help="benchmark spec JSON")
    p.add_argument("out", help="output dataset path")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=_cmd_make_data)

    p = sub.add_parser("train", help="train the distance model")
    p.add_argument("data", help="training dataset")
    p.add_argument("out", help="output checkpoint path")
    p.add_argument("--config", help="JSON file with hyperparameter overrides")
    p.add_argument("--metrics", help="per-epoch metrics JSONL (default: OUT.metrics.jsonl)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--message-passes", type=int)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="sample conformations for every molecule")
    p.add_argument("checkpoint")
    p.add_argument("data", help="dataset naming the molecules to generate for")
    p.add_argument("out", help="output dataset of generated conformations")
    p.add_argument("--n", type=int, default=50, help="samples per molecule (default 50)")
    p.add_argument("--report", help="embedding report JSON (default: OUT.report.json)")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", help="MMD comparison of generated vs ground truth")
    p.add_argument("truth", help="ground-truth dataset")
    p.add_argument("generated", nargs="+",
                   help="generated datasets, each as name=path or a bare path")
    p.add_argument("--out", required=True,
                   help="report prefix; writes PREFIX.tsv, PREFIX.txt, PREFIX.marginals.tsv")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("estimate", help="Boltzmann-weighted property estimate")
    p.add_argument("generated", help="dataset of proposal conformations")
    p.add_argument("--energy-model", required=True,
                   help="energy model JSON (single model, models map, or benchmark spec)")
    p.add_argument("--observable", default="one",
                   help='"one", "rgyr", or "distance:i-j" (default: one)')
    p.add_argument("--temperature", type=float, default=500.0)
    p.add_argument("--out", help="write the report JSON here as well")
    p.set_defaults(func=_cmd_estimate)

    return parser


def _cmd_make_data(args) -> int:
    spec = dataio.load_benchmark_spec(args.spec)
    records = dataio.make_synthetic_benchmark(spec, args.seed)
    dataio.write_dataset(args.out, records)
    molecules = len({r.molecule for r in records})
    print(f"make-data: molecules={molecules} records={len(records)} out={args.out}")
    return 0


def _load_config(args) -> cvae.CvaeConfig:
    values: dict = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UsageError(f"{args.config}: not valid JSON: {e}") from e
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "message_passes": args.message_passes,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cvae.CvaeConfig.from_dict(values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad training config: {e}") from e


def _cmd_train(args) -> int:
    records = dataio.read_dataset(args.data)
    if not records:
        raise UsageError(f"{args.data}: dataset is empty")
    pairs = dataio.training_pairs(records)

    resume_state = None
    config = _load_config(args)
    if args.resume:
        params, resume_state = cvae.load_model(args.resume)
        if resume_state is None:
            raise UsageError(f"{args.resume}: checkpoint has no training state")
        config = params.config
        if args.epochs is not None:
            config.epochs = args.epochs

    metrics_path = args.metrics or f"{args.out}.metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as metrics:
        def log_epoch(entry: dict) -> None:
            metrics.write(json.dumps(entry) + "\n")
            print(
                f"epoch {entry['epoch']}: train_elbo={entry['train_elbo']:.4f} "
                f"val_elbo={entry['val_elbo']:.4f}"
            )

        result = cvae.train(pairs, config, args.seed,
                            resume_state=resume_state, log_fn=log_epoch)

    cvae.save_model(args.out, result.params, train_state=result.state)
    print(
        f"train: best_epoch={result.best_epoch} "
        f"best_val_elbo={result.best_val_elbo:.4f} out={args.out}"
    )
    return 0


def _cmd_generate(args) -> int:
    params, _ = cvae.load_model(args.checkpoint)
    records = dataio.read_dataset(args.data)
    if not records:
        raise UsageError(f"{args.data}: dataset is empty")
    grouped = dataio.group_records(records)
    graphs = dataio.extended_graphs(records)

    tasks = []
    for mol_index, mol in enumerate(sorted(grouped)):
        for k in range(args.n):
            tasks.append((mol_index, mol, k))

    def run_one(task):
        mol_index, mol, k = task
        eg = graphs[mol]
        rng = np.random.default_rng(
            np.random.SeedSequence(args.seed, spawn_key=(mol_index, k))
        )
        ged = cvae.decode(params, eg, rng.standard_normal(eg.n_nodes))
        try:
            result = edg.embed_conformation(eg, ged, rng, tol=args.tol)
        except edg.InconsistentBoundsError:
            return mol, None
        return mol, result

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            outcomes = list(pool.map(run_one, tasks))
    else:
        outcomes = [run_one(t) for t in tasks]

    out_records = []
    per_molecule: dict[str, list] = {mol: [] for mol in grouped}
    for (mol, result) in outcomes:
        per_molecule[mol].append(result)
        if result is not None:
            graph, build_seed, _ = grouped[mol]
            out_records.append(
                dataio.DatasetRecord(mol, graph, build_seed, result.conformation)
            )
    dataio.write_dataset(args.out, out_records)

    embedded = [r for results in per_molecule.values() for r in results if r is not None]
    violations = [r.max_violation for r in embedded]
    report = {
        "molecules": len(grouped),
        "requested_per_molecule": args.n,
        "n_samples": len(tasks),
        "n_smoothing_ok": len(embedded),
        "n_converged": sum(1 for r in embedded if r.converged),
        "smoothing_rate": len(embedded) / len(tasks) if tasks else 0.0,
        "convergence_rate": (
            sum(1 for r in embedded if r.converged) / len(tasks) if tasks else 0.0
        ),
        "mean_max_violation": float(np.mean(violations)) if violations else 0.0,
        "worst_violation": float(np.max(violations)) if violations else 0.0,
        "per_molecule_success": {
            mol: sum(1 for r in results if r is not None and r.converged)
            for mol, results in per_molecule.items()
        },
    }
    report_path = args.report or f"{args.out}.report.json"
    Path(report_path).write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(json.dumps(report))
    if not out_records:
        raise DomainError("no sample passed bound smoothing for any molecule")
    return 0


def _method_name(arg: str) -> tuple[str, str]:
    if "=" in arg:
        name, path = arg.split("=", 1)
        return name, path
    return Path(arg).stem, arg


def _cmd_evaluate(args) -> int:
    truth_records = dataio.read_dataset(args.truth)
    if not truth_records:
        raise UsageError(f"{args.truth}: dataset is empty")
    graphs = dataio.extended_graphs(truth_records)
    truth = dataio.distance_matrix_by_molecule(truth_records)

    methods: dict[str, dict] = {}
    for arg in args.generated:
        name, path = _method_name(arg)
        gen_records = dataio.read_dataset(path)
        methods[name] = dataio.distance_matrix_by_molecule(gen_records)

    report = evalmmd.protocol_report(graphs, truth, methods)
    if not report.rows:
        raise DomainError("no comparison could be computed (all instances "
                          "missing or degenerate)")
    evalmmd.write_report_tsv(report, f"{args.out}.tsv")
    text = evalmmd.format_report(report)
    Path(f"{args.out}.txt").write_text(text, encoding="utf-8")
    evalmmd.write_marginal_histograms(
        f"{args.out}.marginals.tsv", graphs, truth, methods
    )
    print(text, end="")
    return 0


def _load_energy_models(path, molecules) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not valid JSON: {e}") from e
    if "molecules" in doc:  # a benchmark spec
        return {
            entry["name"]: dataio.energy_model_from_dict(entry["energy"])
            for entry in doc["molecules"]
        }
    if "models" in doc:
        return {
            name: dataio.energy_model_from_dict(model)
            for name, model in doc["models"].items()
        }
    # a single bare model applies to every molecule
    model = dataio.energy_model_from_dict(doc)
    return {mol: model for mol in molecules}


def _cmd_estimate(args) -> int:
    records = dataio.read_dataset(args.generated)
    if not records:
        raise UsageError(f"{args.generated}: dataset is empty")
    grouped = dataio.group_records(records)
    models = _load_energy_models(args.energy_model, list(grouped))
    obs = observable_by_name(args.observable)
    cfg = ISConfig(temperature=args.temperature)

    report: dict[str, dict] = {}
    for mol, (_, _, conformations) in grouped.items():
        if mol not in models:
            raise UsageError(f"no energy model for molecule {mol!r}")
        estimate = is_estimate(obs, conformations, models[mol], cfg)
        report[mol] = estimate.as_dict()

    doc = {"observable": obs.name, "temperature": args.temperature,
           "molecules": report}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2), encoding="utf-8")
    print(json.dumps(doc))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, IsADirectoryError, NotADirectoryError,
            PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DomainError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
