"""Command-line pipeline: train / score / batch-score / shapley / bootstrap
/ synth / report.

Every run writes a ``manifest.json`` next to its outputs recording the
command, input and output hashes, seed, and package version, so any artifact
can be reproduced byte for byte. Engine errors exit with status 1 and a
machine-readable JSON object on stderr; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import re
import sys
from typing import Any

import numpy as np

from . import __version__
from .bootstrap import bootstrap_value
from .config import load_config, load_shock, serialize_config
from .errors import DcmError
from .estimator import fit_dcm, load_artifact, save_artifact
from .panel import ingest_panel, write_panel
from .report import aggregate_by_group, combine_tables, normalize_table, table_to_csv
from .scorer import (
    MODE_DETERMINISTIC,
    MODES,
    CounterfactualResult,
    batch_score,
    export_result_csv,
    score_counterfactual,
)
from .shapley import attribute, export_attribution_csv, players_from_dict
from .synthetic import build_config, generate_panel, load_spec


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(
    out_dir: str,
    command: str,
    inputs: dict[str, str],
    outputs: dict[str, str],
    parameters: dict[str, Any],
) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "parameters": parameters,
        "inputs": {
            label: {"path": os.path.basename(path), "sha256": _sha256(path)}
            for label, path in sorted(inputs.items())
        },
        "outputs": {
            label: {"path": os.path.basename(path), "sha256": _sha256(path)}
            for label, path in sorted(outputs.items())
        },
    }
    name = f"manifest_{command.replace('-', '_')}.json"
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _safe_label(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", label)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    panel = ingest_panel(args.panel, config)
    coeffs = fit_dcm(panel, config)
    os.makedirs(args.out_dir, exist_ok=True)
    model_path = os.path.join(args.out_dir, "model.json")
    save_artifact(coeffs, model_path)
    _write_manifest(
        args.out_dir,
        "train",
        {"config": args.config, "panel": args.panel},
        {"model": model_path},
        {},
    )
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    panel = ingest_panel(args.panel, config)
    coeffs = load_artifact(args.model, config)
    shock = load_shock(args.shock, config)
    result = score_counterfactual(coeffs, panel, shock, args.mode)
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "counterfactual.csv")
    export_result_csv(result, out_path)
    _write_manifest(
        args.out_dir,
        "score",
        {
            "config": args.config,
            "panel": args.panel,
            "model": args.model,
            "shock": args.shock,
        },
        {"counterfactual": out_path},
        {"mode": args.mode, "scenario": shock.label},
    )
    return 0


def _cmd_batch_score(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    panel = ingest_panel(args.panel, config)
    coeffs = load_artifact(args.model, config)
    os.makedirs(args.out_dir, exist_ok=True)
    outputs: dict[str, str] = {}
    errors: dict[str, str] = {}
    shocks = []
    for path in args.shock:
        try:
            shocks.append(load_shock(path, config))
        except DcmError as exc:
            errors[os.path.basename(path)] = f"{type(exc).__name__}: {exc}"
    entries = batch_score(coeffs, panel, shocks, args.mode)
    for entry in entries:
        if entry.result is not None:
            path = os.path.join(
                args.out_dir, f"counterfactual_{_safe_label(entry.label)}.csv"
            )
            export_result_csv(entry.result, path)
            outputs[entry.label] = path
        else:
            errors[entry.label] = entry.error or "unknown error"
    _write_manifest(
        args.out_dir,
        "batch-score",
        {
            "config": args.config,
            "panel": args.panel,
            "model": args.model,
            **{f"shock:{i}": path for i, path in enumerate(args.shock)},
        },
        outputs,
        {"mode": args.mode, "errors": errors},
    )
    if errors:
        print(json.dumps({"error": "BatchErrors", "scenarios": errors}), file=sys.stderr)
        return 1
    return 0


def _cmd_shapley(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    panel = ingest_panel(args.panel, config)
    coeffs = load_artifact(args.model, config)
    with open(args.players, "r", encoding="utf-8") as handle:
        players = players_from_dict(json.load(handle), config)
    result = attribute(
        coeffs, panel, players, permutations=args.permutations, seed=args.seed
    )
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "shapley.csv")
    export_attribution_csv(result, out_path)
    _write_manifest(
        args.out_dir,
        "shapley",
        {
            "config": args.config,
            "panel": args.panel,
            "model": args.model,
            "players": args.players,
        },
        {"shapley": out_path},
        {
            "method": result.method,
            "permutations": result.n_permutations,
            "seed": args.seed,
            "efficiency_gap": result.efficiency_gap,
        },
    )
    return 0


def _cmd_bootstrap(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    panel = ingest_panel(args.panel, config)
    shock = load_shock(args.shock, config)
    report = bootstrap_value(
        panel,
        config,
        shock,
        n_replicates=args.replicates,
        level=args.level,
        seed=args.seed,
        n_jobs=args.jobs,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "bootstrap.csv")
    with open(out_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["scenario", "point_estimate", "lower", "upper", "level", "replicates", "seed"]
        )
        writer.writerow(
            [
                shock.label,
                repr(report.point_estimate),
                repr(report.ci[0]),
                repr(report.ci[1]),
                repr(report.level),
                report.n_replicates,
                report.seed,
            ]
        )
    _write_manifest(
        args.out_dir,
        "bootstrap",
        {"config": args.config, "panel": args.panel, "shock": args.shock},
        {"bootstrap": out_path},
        {"replicates": args.replicates, "level": args.level, "seed": args.seed},
    )
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec)
    panel, truth = generate_panel(spec)
    write_panel(panel, args.out)
    outputs = {"panel": args.out}
    if args.truth:
        save_artifact(truth, args.truth)
        outputs["truth"] = args.truth
    if args.config_out:
        with open(args.config_out, "w", encoding="utf-8") as handle:
            handle.write(serialize_config(build_config(spec)))
            handle.write("\n")
        outputs["config"] = args.config_out
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    _write_manifest(out_dir, "synth", {"spec": args.spec}, outputs, {"seed": spec.seed})
    return 0


def _read_result_csv(path: str) -> CounterfactualResult:
    """Rebuild per-outcome aggregates from an exported counterfactual CSV."""
    label = None
    per_outcome: dict[str, dict[int, tuple[float, float, float]]] = {}
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            if row["outcome"] == "":
                continue  # group rollup rows are derivable
            label = row["scenario"]
            cells = per_outcome.setdefault(row["outcome"], {})
            cells[int(row["period"])] = (
                float(row["factual"]),
                float(row["counterfactual"]),
                float(row["delta"]),
            )
    if label is None:
        raise DcmError(f"{path}: no outcome rows found")
    outcome_names = tuple(per_outcome)
    n_periods = max(max(cells) for cells in per_outcome.values()) + 1
    factual = np.zeros((len(outcome_names), n_periods))
    counterfactual = np.zeros_like(factual)
    delta = np.zeros_like(factual)
    for i, name in enumerate(outcome_names):
        for t, (f, c, d) in per_outcome[name].items():
            factual[i, t], counterfactual[i, t], delta[i, t] = f, c, d
    return CounterfactualResult(
        label=label,
        outcome_names=outcome_names,
        factual=factual,
        counterfactual=counterfactual,
        delta=delta,
        group_rollups={},
    )


def _cmd_report(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    results = [_read_result_csv(path) for path in args.scores]
    tables = [aggregate_by_group(r, args.groups, config) for r in results]
    table = combine_tables(tables)
    if args.normalize == "total":
        table = normalize_table(table, float(table.raw.sum()))
    elif args.normalize not in (None, "none"):
        try:
            denominator = float(args.normalize)
        except ValueError:
            raise DcmError(
                f"--normalize must be 'none', 'total', or a number, got {args.normalize!r}"
            ) from None
        table = normalize_table(table, denominator)
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "report.csv")
    table_to_csv(table, out_path)
    _write_manifest(
        args.out_dir,
        "report",
        {
            "config": args.config,
            **{f"score:{i}": path for i, path in enumerate(args.scores)},
        },
        {"report": out_path},
        {"groups": list(args.groups), "normalize": args.normalize},
    )
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcm",
        description="train-and-score engine for dynamic causal models on panels",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="fit the equation system")
    train.add_argument("--config", required=True)
    train.add_argument("--panel", required=True)
    train.add_argument("--out-dir", required=True)
    train.set_defaults(func=_cmd_train)

    score = sub.add_parser("score", help="score one counterfactual scenario")
    score.add_argument("--config", required=True)
    score.add_argument("--panel", required=True)
    score.add_argument("--model", required=True)
    score.add_argument("--shock", required=True)
    score.add_argument("--mode", choices=MODES, default=MODE_DETERMINISTIC)
    score.add_argument("--out-dir", required=True)
    score.set_defaults(func=_cmd_score)

    batch = sub.add_parser("batch-score", help="score several scenarios")
    batch.add_argument("--config", required=True)
    batch.add_argument("--panel", required=True)
    batch.add_argument("--model", required=True)
    batch.add_argument("--shock", required=True, nargs="+")
    batch.add_argument("--mode", choices=MODES, default=MODE_DETERMINISTIC)
    batch.add_argument("--out-dir", required=True)
    batch.set_defaults(func=_cmd_batch_score)

    shap = sub.add_parser("shapley", help="attribute value across players")
    shap.add_argument("--config", required=True)
    shap.add_argument("--panel", required=True)
    shap.add_argument("--model", required=True)
    shap.add_argument("--players", required=True)
    shap.add_argument("--permutations", type=int, default=None)
    shap.add_argument("--seed", type=int, default=0)
    shap.add_argument("--out-dir", required=True)
    shap.set_defaults(func=_cmd_shapley)

    boot = sub.add_parser("bootstrap", help="bootstrap a valuation interval")
    boot.add_argument("--config", required=True)
    boot.add_argument("--panel", required=True)
    boot.add_argument("--shock", required=True)
    boot.add_argument("--replicates", type=int, default=200)
    boot.add_argument("--level", type=float, default=0.95)
    boot.add_argument("--seed", type=int, default=0)
    boot.add_argument("--jobs", type=int, default=1)
    boot.add_argument("--out-dir", required=True)
    boot.set_defaults(func=_cmd_bootstrap)

    synth = sub.add_parser("synth", help="generate a synthetic panel with known truth")
    synth.add_argument("--spec", required=True)
    synth.add_argument("--out", required=True)
    synth.add_argument("--truth", default=None)
    synth.add_argument("--config-out", default=None)
    synth.set_defaults(func=_cmd_synth)

    rep = sub.add_parser("report", help="slice scored scenarios into a table")
    rep.add_argument("scores", nargs="+", help="counterfactual CSVs from `dcm score`")
    rep.add_argument("--config", required=True)
    rep.add_argument("--groups", required=True, nargs="+")
    rep.add_argument("--normalize", default="none", help="'none', 'total', or a number")
    rep.add_argument("--out-dir", required=True)
    rep.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    try:
        return args.func(args)
    except DcmError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1
    except FileNotFoundError as exc:
        print(
            json.dumps({"error": "FileNotFound", "message": str(exc)}), file=sys.stderr
        )
        return 1
    except ValueError as exc:
        print(
            json.dumps({"error": "ValueError", "message": str(exc)}), file=sys.stderr
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
