"""Valuation tables: group slicing and 0-100 normalization.

A table holds one row per group and one column per scenario. Raw values are
always retained next to the normalized view. Rows are only guaranteed to add
up to the total when the groups partition the outcome set and the scenarios
shock disjoint variable sets; otherwise the table is flagged non-additive.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Any, Sequence

import numpy as np

from .config import ModelConfig, ShockSpec
from .errors import UnknownGroup, ZeroDenominator
from .scorer import CounterfactualResult


@dataclass(eq=False)
class ValuationTable:
    group_labels: tuple[str, ...]
    scenario_labels: tuple[str, ...]
    raw: np.ndarray                      # (groups, scenarios)
    normalized: np.ndarray | None = None
    denominator: float | None = None
    non_additive: bool = False
    provenance: dict[str, Any] | None = None

    def cell(self, group: str, scenario: str, normalized: bool = False) -> float:
        values = self.normalized if normalized else self.raw
        if values is None:
            raise ValueError("table has no normalized values yet")
        return float(
            values[self.group_labels.index(group), self.scenario_labels.index(scenario)]
        )


def _groups_partition_outcomes(
    grouping: Sequence[str], config: ModelConfig, outcomes: Sequence[str]
) -> bool:
    covered: list[str] = []
    for name in grouping:
        covered.extend(m for m in config.groups[name] if m in outcomes)
    return sorted(covered) == sorted(outcomes)


def aggregate_by_group(
    result: CounterfactualResult,
    grouping: Sequence[str],
    config: ModelConfig,
    shock: ShockSpec | None = None,
) -> ValuationTable:
    """Sum deltas over each group's outcome members and all periods."""
    values = np.zeros((len(grouping), 1))
    for i, name in enumerate(grouping):
        if name not in config.groups:
            raise UnknownGroup(f"group {name!r} is not declared in the config")
        members = [m for m in config.groups[name] if m in result.outcome_names]
        rows = [result.outcome_names.index(m) for m in members]
        values[i, 0] = result.delta[rows].sum() if rows else 0.0
    provenance: dict[str, Any] = {"scenarios": {result.label: {}}}
    if shock is not None:
        provenance["scenarios"][result.label] = {
            "shocked_variables": sorted(shock.shocked_variables())
        }
    return ValuationTable(
        group_labels=tuple(grouping),
        scenario_labels=(result.label,),
        raw=values,
        non_additive=not _groups_partition_outcomes(
            grouping, config, result.outcome_names
        ),
        provenance=provenance,
    )


def combine_tables(tables: Sequence[ValuationTable]) -> ValuationTable:
    """Merge single-scenario tables into one multi-scenario table.

    The combined table is non-additive if any input is, or if two scenarios
    shock overlapping variable sets (their values double-count shared paths).
    """
    if not tables:
        raise ValueError("no tables to combine")
    group_labels = tables[0].group_labels
    for table in tables:
        if table.group_labels != group_labels:
            raise ValueError("tables disagree on group labels")
    raw = np.hstack([t.raw for t in tables])
    scenario_labels = tuple(l for t in tables for l in t.scenario_labels)

    shocked_sets: list[set[str]] = []
    provenance: dict[str, Any] = {"scenarios": {}}
    for table in tables:
        for label in table.scenario_labels:
            entry = (table.provenance or {}).get("scenarios", {}).get(label, {})
            provenance["scenarios"][label] = entry
            shocked_sets.append(set(entry.get("shocked_variables", [])))
    overlapping = any(
        a & b for i, a in enumerate(shocked_sets) for b in shocked_sets[i + 1 :]
    )
    return ValuationTable(
        group_labels=group_labels,
        scenario_labels=scenario_labels,
        raw=raw,
        non_additive=any(t.non_additive for t in tables) or overlapping,
        provenance=provenance,
    )


def normalize_table(table: ValuationTable, denominator: float) -> ValuationTable:
    """Scale every cell to 100 * cell / denominator; raw values are retained."""
    if denominator == 0.0:
        raise ZeroDenominator("cannot normalize by zero")
    if not math.isfinite(denominator):
        raise ValueError("denominator must be finite")
    return replace(
        table,
        normalized=100.0 * table.raw / denominator,
        denominator=float(denominator),
    )


def denormalize(table: ValuationTable) -> np.ndarray:
    if table.normalized is None or table.denominator is None:
        raise ValueError("table has no normalized values")
    return table.normalized * table.denominator / 100.0


def table_to_csv(table: ValuationTable, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["group", "scenario", "value_raw", "value_normalized", "non_additive"])
        for i, group in enumerate(table.group_labels):
            for j, scenario in enumerate(table.scenario_labels):
                normalized = (
                    repr(float(table.normalized[i, j]))
                    if table.normalized is not None
                    else ""
                )
                writer.writerow(
                    [
                        group,
                        scenario,
                        repr(float(table.raw[i, j])),
                        normalized,
                        str(table.non_additive).lower(),
                    ]
                )
