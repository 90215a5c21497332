"""Recursive trajectory simulation and counterfactual scoring.

Within every period the es_interaction variables are evaluated first, from
lagged values only; shock overrides on them are applied next; outcomes and
non-ES surrogates are then evaluated against lagged values plus the (possibly
overridden) current-period ES values; finally their own overrides apply. The
values that leave a period, overrides included, feed all later periods.

Factual and counterfactual paths are both simulated (the factual path is not
read off the observed data) so their difference isolates the shock under
identical model error. In residual-replay mode each customer's one-step
training residuals are added back, which makes the factual path reproduce the
observed panel exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ModelConfig, ROLE_ES, ShockSpec
from .errors import ConfigMismatch, InvalidShock, NonFiniteValue, OrderViolation
from .estimator import CoefficientSet
from .panel import PanelTensor

MODE_DETERMINISTIC = "deterministic"
MODE_RESIDUAL_REPLAY = "residual-replay"
MODES = (MODE_DETERMINISTIC, MODE_RESIDUAL_REPLAY)


@dataclass(eq=False)
class Trajectory:
    """Simulated values for all dynamic variables, (customers, periods, vars)."""

    label: str
    variable_names: tuple[str, ...]
    values: np.ndarray


@dataclass(eq=False)
class GroupRollup:
    members: tuple[str, ...]
    factual: np.ndarray
    counterfactual: np.ndarray
    delta: np.ndarray


@dataclass(eq=False)
class CounterfactualResult:
    label: str
    outcome_names: tuple[str, ...]
    factual: np.ndarray          # (outcomes, periods), summed over customers
    counterfactual: np.ndarray
    delta: np.ndarray            # factual - counterfactual, exactly
    group_rollups: dict[str, GroupRollup]

    @property
    def total_delta(self) -> float:
        return float(self.delta.sum())

    def outcome_delta(self, name: str) -> np.ndarray:
        return self.delta[self.outcome_names.index(name)]


@dataclass
class BatchEntry:
    label: str
    result: CounterfactualResult | None = None
    error: str | None = None


# ---------------------------------------------------------------------------


def _shock_plan(
    shock: ShockSpec | None, panel: PanelTensor, config: ModelConfig
) -> dict[int, list[tuple[int, str, float]]]:
    """Per-period override list in entry order: (dynamic index, mode, value)."""
    plan: dict[int, list[tuple[int, str, float]]] = {}
    if shock is None:
        return plan
    for entry in shock.entries:
        for name in entry.variables:
            if name not in panel.dynamic_names:
                raise InvalidShock(f"shocked variable {name!r} is not in the panel")
            j = panel.dynamic_index(name)
            for t in entry.periods:
                if not 0 <= t < config.n_periods:
                    raise InvalidShock(f"shock period {t} outside the panel horizon")
                plan.setdefault(t, []).append((j, entry.mode, entry.value))
    return plan


def _apply_overrides(
    state_t: np.ndarray, overrides: list[tuple[int, str, float]], only: np.ndarray
) -> None:
    for j, mode, value in overrides:
        if not only[j]:
            continue
        if mode == "scale":
            state_t[:, j] *= value
        elif mode == "set":
            state_t[:, j] = value
        else:
            state_t[:, j] += value


def _base_terms(coeffs: CoefficientSet, panel: PanelTensor, t: int) -> np.ndarray:
    """Intercept + covariate + policy contribution for every target, (n, T)."""
    base = np.broadcast_to(coeffs.intercept[:, t], (panel.n_customers, len(coeffs.target_names))).copy()
    if coeffs.covariate.shape[2]:
        base += panel.static_values @ coeffs.covariate[:, t, :].T
    if panel.policy is not None:
        base += panel.policy[:, None] * coeffs.policy_coef[:, t][None, :]
    return base


def _lag_terms(
    coeffs: CoefficientSet, history: np.ndarray, surrogate_pos: np.ndarray, t: int
) -> np.ndarray:
    """Lagged contribution for every target, (n, T)."""
    sources = coeffs.config.lag_sources(t)
    if len(sources) == 0:
        return np.zeros((history.shape[0], len(coeffs.target_names)))
    s0, s1 = sources.start, sources.stop
    hist = history[:, s0:s1, :][:, :, surrogate_pos]
    weights = coeffs.lag[:, t, :, s0:s1]
    return np.einsum("nsk,jks->nj", hist, weights)


def _one_step_residuals(
    coeffs: CoefficientSet, panel: PanelTensor, surrogate_pos: np.ndarray, es_pos: np.ndarray
) -> np.ndarray:
    """Observed minus one-step-ahead fitted values on the training panel."""
    n = panel.n_customers
    n_targets = len(coeffs.target_names)
    residuals = np.zeros((n, panel.n_periods, n_targets))
    for t in range(panel.n_periods):
        predicted = _base_terms(coeffs, panel, t)
        predicted += _lag_terms(coeffs, panel.values, surrogate_pos, t)
        if es_pos.size:
            predicted += panel.values[:, t, :][:, es_pos] @ coeffs.same_period[:, t, :].T
        fitted_mask = coeffs.fitted[:, t]
        residuals[:, t, fitted_mask] = (
            panel.values[:, t, fitted_mask] - predicted[:, fitted_mask]
        )
    return residuals


def simulate_path(
    coeffs: CoefficientSet,
    panel: PanelTensor,
    shock: ShockSpec | None = None,
    mode: str = MODE_DETERMINISTIC,
) -> Trajectory:
    """Simulate one trajectory per customer under an optional shock."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    config = coeffs.config
    if not panel.same_structure(config):
        raise ConfigMismatch("panel does not match the artifact's config")

    names = coeffs.target_names
    role_of = {v.name: v.role for v in config.variables}
    es_mask = np.array([role_of[n] == ROLE_ES for n in names])
    rest_mask = ~es_mask
    surrogate_pos = np.array(
        [i for i, n in enumerate(names) if n in config.surrogate_names], dtype=int
    )
    es_pos = np.array([i for i, n in enumerate(names) if es_mask[i]], dtype=int)

    plan = _shock_plan(shock, panel, config)
    replay = mode == MODE_RESIDUAL_REPLAY
    residuals = (
        _one_step_residuals(coeffs, panel, surrogate_pos, es_pos) if replay else None
    )

    n = panel.n_customers
    state = np.full((n, config.n_periods, len(names)), np.nan)
    for t in range(config.n_periods):
        base = _base_terms(coeffs, panel, t)
        base += _lag_terms(coeffs, state[:, :t, :], surrogate_pos, t)
        if replay:
            base += residuals[:, t, :]
        fitted = coeffs.fitted[:, t]
        overrides = plan.get(t, [])

        # (a) es_interaction variables first, from lagged values only
        for j in np.nonzero(es_mask)[0]:
            state[:, t, j] = base[:, j] if fitted[j] else panel.values[:, t, j]
        # (b) overrides on shocked ES variables
        _apply_overrides(state[:, t, :], overrides, es_mask)
        if es_pos.size and not np.isfinite(state[:, t, es_pos]).all():
            raise OrderViolation(
                f"period {t}: es_interaction values read before being computed"
            )
        # (c) outcomes and non-ES surrogates, seeing current ES values
        totals = base
        if es_pos.size:
            totals = base + state[:, t, :][:, es_pos] @ coeffs.same_period[:, t, :].T
        for j in np.nonzero(rest_mask)[0]:
            state[:, t, j] = totals[:, j] if fitted[j] else panel.values[:, t, j]
        # (d) overrides on shocked non-ES variables and outcomes
        _apply_overrides(state[:, t, :], overrides, rest_mask)

    if not np.isfinite(state).all():
        raise NonFiniteValue("simulated trajectory contains non-finite values")
    label = shock.label if shock is not None else "factual"
    return Trajectory(label=label, variable_names=names, values=state)


def score_counterfactual(
    coeffs: CoefficientSet,
    panel: PanelTensor,
    shock: ShockSpec,
    mode: str = MODE_DETERMINISTIC,
) -> CounterfactualResult:
    """Simulate with and without the shock and aggregate outcome deltas."""
    config = coeffs.config
    factual_path = simulate_path(coeffs, panel, None, mode)
    counterfactual_path = simulate_path(coeffs, panel, shock, mode)

    outcome_names = config.outcome_names
    outcome_pos = [coeffs.target_index(n) for n in outcome_names]
    # fixed-order reduction over customers keeps aggregates bit-stable
    factual = factual_path.values[:, :, outcome_pos].sum(axis=0).T
    counterfactual = counterfactual_path.values[:, :, outcome_pos].sum(axis=0).T
    delta = factual - counterfactual

    rollups: dict[str, GroupRollup] = {}
    for group, members in config.groups.items():
        member_outcomes = tuple(m for m in members if m in outcome_names)
        if not member_outcomes:
            continue
        rows = [outcome_names.index(m) for m in member_outcomes]
        rollups[group] = GroupRollup(
            members=member_outcomes,
            factual=factual[rows].sum(axis=0),
            counterfactual=counterfactual[rows].sum(axis=0),
            delta=delta[rows].sum(axis=0),
        )
    return CounterfactualResult(
        label=shock.label,
        outcome_names=outcome_names,
        factual=factual,
        counterfactual=counterfactual,
        delta=delta,
        group_rollups=rollups,
    )


def batch_score(
    coeffs: CoefficientSet,
    panel: PanelTensor,
    shocks: Sequence[ShockSpec],
    mode: str = MODE_DETERMINISTIC,
) -> list[BatchEntry]:
    """Score scenarios independently; one failure does not abort the rest.

    Results are identical to sequential :func:`score_counterfactual` calls.
    Duplicate scenario labels are disambiguated with an occurrence index.
    """
    labels = [s.label for s in shocks]
    counts = {label: labels.count(label) for label in labels}
    seen: dict[str, int] = {}
    entries: list[BatchEntry] = []
    for shock in shocks:
        label = shock.label
        if counts[label] > 1:
            occurrence = seen.get(label, 0)
            seen[label] = occurrence + 1
            label = f"{label}[{occurrence}]"
        try:
            result = score_counterfactual(coeffs, panel, shock, mode)
            result.label = label
            entries.append(BatchEntry(label=label, result=result))
        except Exception as exc:  # noqa: BLE001 - per-scenario error reporting
            entries.append(BatchEntry(label=label, error=f"{type(exc).__name__}: {exc}"))
    return entries


def export_result_csv(result: CounterfactualResult, path: str) -> None:
    """Write per-outcome and per-group rows: one line per period."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["scenario", "outcome", "group", "period", "factual", "counterfactual", "delta"]
        )
        n_periods = result.factual.shape[1]
        for i, outcome in enumerate(result.outcome_names):
            for t in range(n_periods):
                writer.writerow(
                    [
                        result.label,
                        outcome,
                        "",
                        t,
                        repr(float(result.factual[i, t])),
                        repr(float(result.counterfactual[i, t])),
                        repr(float(result.delta[i, t])),
                    ]
                )
        for group in sorted(result.group_rollups):
            rollup = result.group_rollups[group]
            for t in range(n_periods):
                writer.writerow(
                    [
                        result.label,
                        "",
                        group,
                        t,
                        repr(float(rollup.factual[t])),
                        repr(float(rollup.counterfactual[t])),
                        repr(float(rollup.delta[t])),
                    ]
                )
