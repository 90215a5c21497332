"""Synthetic economies with known coefficients, plus a brute-force oracle.

The generator forward-simulates the true equation system customer by
customer, honoring the same within-period order as the scorer (ES variables
first) but sharing no code with it. ``oracle_score`` re-implements scoring as
plain nested Python loops; it is deliberately slow and simple so it can serve
as an independent check on the vectorized engine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .config import (
    ModelConfig,
    ROLE_ES,
    ROLE_OUTCOME,
    ROLE_POLICY,
    ROLE_STATIC,
    ROLE_SURROGATE,
    ShockSpec,
    Variable,
    default_regression_blocks,
)
from .errors import ParseError, UnstableSpec
from .estimator import CoefficientSet, empty_coefficient_set
from .panel import PanelTensor, regression_exists

INITIAL_COVARIATE = "covariate"
INITIAL_EXOGENOUS = "exogenous"


@dataclass
class SynthSpec:
    """Recipe for a synthetic economy.

    The truth is either supplied explicitly or drawn from a seeded random
    recipe whose surrogate dynamics are rescaled to meet ``spectral_cap``
    (the cap bounds, per target period, the summed spectral norms of the
    surrogate-to-surrogate lag blocks; below 1.0 trajectories cannot blow up).
    With ``initial_mode="exogenous"`` the period-0 values are independent
    draws and the truth carries no period-0 equations.
    """

    n_customers: int
    n_periods: int
    n_outcomes: int = 1
    n_surrogates: int = 2
    n_es: int = 1
    n_covariates: int = 1
    include_policy: bool = False
    policy_rate: float = 0.5
    same_period_enabled: bool = True
    lag_window: int | None = None
    noise_sd: dict[str, float] = field(
        default_factory=lambda: {
            ROLE_OUTCOME: 0.5,
            ROLE_SURROGATE: 0.5,
            ROLE_ES: 0.5,
        }
    )
    covariate_mean: float = 1.0
    covariate_sd: float = 0.5
    initial_mode: str = INITIAL_COVARIATE
    initial_mean: float = 1.0
    initial_sd: float = 1.0
    coefficient_scale: float = 0.4
    lag_decay: float = 0.6
    lag_structure: str = "gaussian"  # "orthogonal" keeps transitions well-conditioned
    same_period_scale: float = 0.5
    covariate_weight_scale: float = 0.5
    intercept_scale: float = 0.3
    policy_scale: float = 0.3
    spectral_cap: float | None = 0.9
    positive_dynamics: bool = False
    ridge_lambda: float = 1e-6
    pooling: str = "none"
    groups: dict[str, list[str]] | None = None
    seed: int = 0
    truth: CoefficientSet | None = None

    def validate(self) -> None:
        if self.n_customers < 1 or self.n_periods < 1:
            raise ParseError("n_customers and n_periods must be positive")
        if self.n_outcomes < 1:
            raise ParseError("at least one outcome is required")
        if self.initial_mode not in (INITIAL_COVARIATE, INITIAL_EXOGENOUS):
            raise ParseError(f"unknown initial_mode {self.initial_mode!r}")
        for role, sd in self.noise_sd.items():
            if sd < 0:
                raise ParseError(f"noise_sd[{role}] must be non-negative")
        if self.spectral_cap is not None and not 0 < self.spectral_cap:
            raise ParseError("spectral_cap must be positive or null")
        if self.lag_structure not in ("gaussian", "orthogonal"):
            raise ParseError(f"unknown lag_structure {self.lag_structure!r}")
        if self.initial_mode == INITIAL_COVARIATE and not (
            self.n_covariates or self.include_policy
        ):
            raise ParseError(
                "initial_mode='covariate' needs static covariates or a policy; "
                "use initial_mode='exogenous' otherwise"
            )


_SPEC_JSON_FIELDS = (
    "n_customers", "n_periods", "n_outcomes", "n_surrogates", "n_es",
    "n_covariates", "include_policy", "policy_rate", "same_period_enabled",
    "lag_window", "noise_sd", "covariate_mean", "covariate_sd", "initial_mode",
    "initial_mean", "initial_sd", "coefficient_scale", "lag_decay",
    "lag_structure", "same_period_scale", "covariate_weight_scale",
    "intercept_scale", "policy_scale", "spectral_cap", "positive_dynamics",
    "ridge_lambda", "pooling", "groups", "seed",
)


def spec_from_dict(raw: Mapping[str, Any]) -> SynthSpec:
    unknown = set(raw) - set(_SPEC_JSON_FIELDS)
    if unknown:
        raise ParseError(f"unknown key(s) {sorted(unknown)} in synth spec")
    if "n_customers" not in raw or "n_periods" not in raw:
        raise ParseError("synth spec needs n_customers and n_periods")
    spec = SynthSpec(**{k: raw[k] for k in raw})
    spec.validate()
    return spec


def load_spec(path: str) -> SynthSpec:
    with open(path, "r", encoding="utf-8") as handle:
        try:
            raw = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from None
    return spec_from_dict(raw)


def build_config(spec: SynthSpec) -> ModelConfig:
    """Materialize the ModelConfig implied by a synth spec."""
    variables = (
        [Variable(f"y{i}", ROLE_OUTCOME) for i in range(spec.n_outcomes)]
        + [Variable(f"s{i}", ROLE_SURROGATE) for i in range(spec.n_surrogates)]
        + [Variable(f"e{i}", ROLE_ES) for i in range(spec.n_es)]
        + [Variable(f"x{i}", ROLE_STATIC) for i in range(spec.n_covariates)]
    )
    if spec.include_policy:
        variables.append(Variable("d", ROLE_POLICY))
    variables = tuple(variables)

    if spec.groups is not None:
        groups = {name: tuple(members) for name, members in spec.groups.items()}
    else:
        groups = {f"channel{i}": (f"e{i}",) for i in range(spec.n_es)}
        if spec.n_es:
            groups["es_all"] = tuple(f"e{i}" for i in range(spec.n_es))
        outcomes = [f"y{i}" for i in range(spec.n_outcomes)]
        if len(outcomes) >= 2:
            half = len(outcomes) // 2
            groups["pg0"] = tuple(outcomes[:half])
            groups["pg1"] = tuple(outcomes[half:])
        else:
            groups["pg0"] = tuple(outcomes)

    return ModelConfig(
        variables=variables,
        n_periods=spec.n_periods,
        groups=groups,
        lag_window=spec.lag_window,
        same_period_enabled=spec.same_period_enabled,
        ridge_lambda=spec.ridge_lambda,
        regression_blocks=default_regression_blocks(variables, spec.same_period_enabled),
        pooling=spec.pooling,
    )


# ---------------------------------------------------------------------------
# truth construction


def transition_norm(truth: CoefficientSet) -> float:
    """Max over target periods of the summed spectral norms of the
    surrogate-to-surrogate lag blocks."""
    config = truth.config
    surrogate_targets = [
        truth.target_index(name) for name in config.surrogate_names
    ]
    worst = 0.0
    for t in range(1, config.n_periods):
        total = 0.0
        for s in config.lag_sources(t):
            block = truth.lag[surrogate_targets, t, :, s]
            if np.any(block):
                total += float(np.linalg.norm(block, ord=2))
        worst = max(worst, total)
    return worst


def random_truth(spec: SynthSpec, config: ModelConfig, rng: np.random.Generator) -> CoefficientSet:
    truth = empty_coefficient_set(config)
    role_of = {v.name: v.role for v in config.variables}
    names = config.dynamic_names
    n_sources = len(config.surrogate_names)
    n_cov = len(config.static_names)

    def draw(size=None, scale=1.0):
        sample = rng.normal(0.0, 1.0, size) * scale
        return np.abs(sample) if spec.positive_dynamics else sample

    for j, name in enumerate(names):
        role = role_of[name]
        for t in range(config.n_periods):
            fitted = t >= 1 or (
                spec.initial_mode == INITIAL_COVARIATE
                and regression_exists(config, name, t)
            )
            if not fitted:
                continue
            truth.fitted[j, t] = True
            truth.intercept[j, t] = draw(scale=spec.intercept_scale)
            if n_cov:
                truth.covariate[j, t, :] = draw(n_cov, spec.covariate_weight_scale)
            if spec.include_policy:
                truth.policy_coef[j, t] = draw(scale=spec.policy_scale)
            for s in config.lag_sources(t):
                truth.lag[j, t, :, s] = draw(n_sources, spec.coefficient_scale) * (
                    spec.lag_decay ** (t - 1 - s)
                )
            if (
                config.same_period_enabled
                and role in (ROLE_OUTCOME, ROLE_SURROGATE)
                and config.es_names
            ):
                # friction-reduction mechanism: current-period ES effects
                # are drawn positive
                truth.same_period[j, t, :] = np.abs(
                    rng.normal(0.0, 1.0, len(config.es_names))
                ) * spec.same_period_scale

    if spec.lag_structure == "orthogonal" and n_sources:
        # Replace the adjacent-lag surrogate block with a scaled orthogonal
        # matrix so repeated transitions do not lose rank. Used by the
        # zero-noise recovery economies, where identification relies on the
        # initial randomness surviving every period.
        surrogate_targets = [truth.target_index(n) for n in config.surrogate_names]
        for t in range(1, config.n_periods):
            if t - 1 not in config.lag_sources(t):
                continue
            gaussian = rng.normal(0.0, 1.0, (n_sources, n_sources))
            q, _ = np.linalg.qr(gaussian)
            truth.lag[surrogate_targets, t, :, t - 1] = q * spec.coefficient_scale

    if spec.spectral_cap is not None:
        norm = transition_norm(truth)
        if norm > spec.spectral_cap and norm > 0:
            truth.lag *= spec.spectral_cap / norm
    return truth


def _check_explicit_truth(spec: SynthSpec, truth: CoefficientSet) -> None:
    for name in ("lag", "same_period", "covariate", "policy_coef", "intercept"):
        if not np.isfinite(getattr(truth, name)).all():
            raise UnstableSpec(f"explicit truth has non-finite {name} entries")
    if spec.spectral_cap is not None:
        norm = transition_norm(truth)
        # tolerance: a truth rescaled exactly onto the cap may sit an ulp above
        if norm > spec.spectral_cap * (1.0 + 1e-9):
            raise UnstableSpec(
                f"explicit truth violates spectral cap: {norm:.4f} > {spec.spectral_cap}"
            )


# ---------------------------------------------------------------------------
# forward simulation (per customer; independent of the scorer)


def _customer_path(
    truth: CoefficientSet,
    config: ModelConfig,
    surrogate_pos: np.ndarray,
    es_pos: np.ndarray,
    rest_pos: np.ndarray,
    x_row: np.ndarray,
    policy_value: float,
    initial_row: np.ndarray | None,
    noise: np.ndarray,
) -> np.ndarray:
    n_targets = len(config.dynamic_names)
    values = np.zeros((config.n_periods, n_targets))
    for t in range(config.n_periods):
        base = truth.intercept[:, t].copy()
        if x_row.size:
            base += truth.covariate[:, t, :] @ x_row
        base += policy_value * truth.policy_coef[:, t]
        sources = config.lag_sources(t)
        if len(sources):
            hist = values[sources.start : sources.stop, :][:, surrogate_pos]
            base += np.einsum("jks,sk->j", truth.lag[:, t, :, sources.start : sources.stop], hist)
        base += noise[t]
        fitted = truth.fitted[:, t]
        for j in es_pos:
            values[t, j] = base[j] if fitted[j] else initial_row[j]
        if es_pos.size:
            sp = truth.same_period[:, t, :] @ values[t, es_pos]
        else:
            sp = np.zeros(n_targets)
        for j in rest_pos:
            values[t, j] = base[j] + sp[j] if fitted[j] else initial_row[j]
    return values


def generate_panel(spec: SynthSpec) -> tuple[PanelTensor, CoefficientSet]:
    """Draw a panel from the specified economy; returns the truth alongside."""
    spec.validate()
    config = build_config(spec)
    rng = np.random.default_rng(spec.seed)
    if spec.truth is not None:
        _check_explicit_truth(spec, spec.truth)
        truth = spec.truth
        if truth.config != config:
            raise ParseError("explicit truth was built for a different config")
    else:
        truth = random_truth(spec, config, rng)

    n = spec.n_customers
    names = config.dynamic_names
    role_of = {v.name: v.role for v in config.variables}
    surrogate_pos = np.array(
        [i for i, nm in enumerate(names) if nm in config.surrogate_names], dtype=int
    )
    es_pos = np.array([i for i, nm in enumerate(names) if role_of[nm] == ROLE_ES], dtype=int)
    rest_pos = np.array([i for i, nm in enumerate(names) if role_of[nm] != ROLE_ES], dtype=int)

    x = rng.normal(spec.covariate_mean, spec.covariate_sd, (n, spec.n_covariates))
    policy = (
        (rng.random(n) < spec.policy_rate).astype(float) if spec.include_policy else None
    )
    sigma = np.array([spec.noise_sd.get(role_of[nm], 0.0) for nm in names])
    noise = rng.normal(0.0, 1.0, (n, spec.n_periods, len(names))) * sigma

    initials = None
    if spec.initial_mode == INITIAL_EXOGENOUS:
        initials = rng.normal(spec.initial_mean, spec.initial_sd, (n, len(names)))

    values = np.zeros((n, spec.n_periods, len(names)))
    for i in range(n):
        values[i] = _customer_path(
            truth,
            config,
            surrogate_pos,
            es_pos,
            rest_pos,
            x[i],
            float(policy[i]) if policy is not None else 0.0,
            initials[i] if initials is not None else None,
            noise[i],
        )

    panel = PanelTensor(
        customer_ids=tuple(f"c{i}" for i in range(n)),
        n_periods=spec.n_periods,
        variables=config.variables,
        values=values,
        static_values=x,
        policy=policy,
    )
    return panel, truth


# ---------------------------------------------------------------------------
# brute-force oracle


def _oracle_shock_plan(
    shock: ShockSpec | None, names: list[str]
) -> dict[int, list[tuple[int, str, float]]]:
    plan: dict[int, list[tuple[int, str, float]]] = {}
    if shock is None:
        return plan
    for entry in shock.entries:
        for name in entry.variables:
            j = names.index(name)
            for t in entry.periods:
                plan.setdefault(t, []).append((j, entry.mode, entry.value))
    return plan


def _oracle_customer_path(
    truth: CoefficientSet,
    panel: PanelTensor,
    customer: int,
    plan: dict[int, list[tuple[int, str, float]]],
) -> list[list[float]]:
    config = truth.config
    names = list(config.dynamic_names)
    role_of = {v.name: v.role for v in config.variables}
    surrogate_positions = [names.index(nm) for nm in config.surrogate_names]
    x = [float(v) for v in panel.static_values[customer]]
    d = float(panel.policy[customer]) if panel.policy is not None else 0.0

    def equation(j: int, t: int, values: list[list[float]]) -> float:
        v = float(truth.intercept[j, t])
        for c in range(len(x)):
            v += float(truth.covariate[j, t, c]) * x[c]
        v += d * float(truth.policy_coef[j, t])
        for s in config.lag_sources(t):
            for k, pos in enumerate(surrogate_positions):
                v += float(truth.lag[j, t, k, s]) * values[s][pos]
        return v

    def apply(t: int, values: list[list[float]], es_stage: bool) -> None:
        for j, mode, value in plan.get(t, []):
            is_es = role_of[names[j]] == ROLE_ES
            if is_es != es_stage:
                continue
            if mode == "scale":
                values[t][j] = values[t][j] * value
            elif mode == "set":
                values[t][j] = value
            else:
                values[t][j] = values[t][j] + value

    values: list[list[float]] = [[0.0] * len(names) for _ in range(config.n_periods)]
    for t in range(config.n_periods):
        for j, nm in enumerate(names):
            if role_of[nm] != ROLE_ES:
                continue
            if truth.fitted[j, t]:
                values[t][j] = equation(j, t, values)
            else:
                values[t][j] = float(panel.values[customer, t, j])
        apply(t, values, es_stage=True)
        for j, nm in enumerate(names):
            if role_of[nm] == ROLE_ES:
                continue
            if truth.fitted[j, t]:
                v = equation(j, t, values)
                for e, nm_es in enumerate(config.es_names):
                    v += float(truth.same_period[j, t, e]) * values[t][names.index(nm_es)]
                values[t][j] = v
            else:
                values[t][j] = float(panel.values[customer, t, j])
        apply(t, values, es_stage=False)
    return values


def oracle_score(truth: CoefficientSet, panel: PanelTensor, shock: ShockSpec) -> float:
    """Aggregate outcome delta by straightforward nested-loop recursion.

    Deterministic mode only; shares no simulation code with the scorer.
    """
    config = truth.config
    names = list(config.dynamic_names)
    outcome_positions = [names.index(nm) for nm in config.outcome_names]
    plan = _oracle_shock_plan(shock, names)
    total = 0.0
    for customer in range(panel.n_customers):
        factual = _oracle_customer_path(truth, panel, customer, {})
        counterfactual = _oracle_customer_path(truth, panel, customer, plan)
        for t in range(config.n_periods):
            for j in outcome_positions:
                total += factual[t][j] - counterfactual[t][j]
    return total
