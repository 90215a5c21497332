"""Model configuration: variable roles, groups, regression structure, shocks.

The configuration is a strict JSON document. Unknown keys are rejected
everywhere so a typo cannot silently change the model. Regression structure
is declared per target-role family: every dynamic role (outcome,
surrogate_non_es, es_interaction) is matched by exactly one block that lists
its lagged regressors and, optionally, same-period regressors. Same-period
regressors are only legal when they originate from es_interaction variables
and terminate outside the es_interaction layer, which keeps the within-period
graph acyclic by construction.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .errors import (
    ConstraintViolation,
    GroupReferencesUnknownVariable,
    InvalidShock,
    ParseError,
    ShockOnOutcome,
    UnknownRole,
)

ROLE_OUTCOME = "outcome"
ROLE_SURROGATE = "surrogate_non_es"
ROLE_ES = "es_interaction"
ROLE_STATIC = "static_covariate"
ROLE_POLICY = "policy"

ROLES = (ROLE_OUTCOME, ROLE_SURROGATE, ROLE_ES, ROLE_STATIC, ROLE_POLICY)
DYNAMIC_ROLES = (ROLE_OUTCOME, ROLE_SURROGATE, ROLE_ES)
LAGGABLE_ROLES = (ROLE_SURROGATE, ROLE_ES)

DEFAULT_RIDGE_LAMBDA = 1e-6

SHOCK_MODES = ("scale", "set", "add")


@dataclass(frozen=True)
class Variable:
    name: str
    role: str


@dataclass(frozen=True)
class RegressionBlock:
    """Regressor specification for one family of target roles.

    ``lagged`` and ``same_period`` hold resolved variable names in
    declaration order; selectors are expanded during parsing.
    """

    targets: tuple[str, ...]
    lagged: tuple[str, ...]
    static_covariates: bool
    policy: bool
    same_period: tuple[str, ...]


@dataclass(frozen=True)
class ModelConfig:
    variables: tuple[Variable, ...]
    n_periods: int
    groups: dict[str, tuple[str, ...]] = field(default_factory=dict)
    lag_window: int | None = None
    same_period_enabled: bool = False
    ridge_lambda: float = DEFAULT_RIDGE_LAMBDA
    regression_blocks: tuple[RegressionBlock, ...] = ()
    pooling: str = "none"
    allow_outcome_shock: bool = True

    # -- derived views -------------------------------------------------

    def names_by_role(self, role: str) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if v.role == role)

    @property
    def outcome_names(self) -> tuple[str, ...]:
        return self.names_by_role(ROLE_OUTCOME)

    @property
    def dynamic_names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if v.role in DYNAMIC_ROLES)

    @property
    def surrogate_names(self) -> tuple[str, ...]:
        """All laggable sources: non-ES surrogates and ES interactions."""
        return tuple(v.name for v in self.variables if v.role in LAGGABLE_ROLES)

    @property
    def es_names(self) -> tuple[str, ...]:
        return self.names_by_role(ROLE_ES)

    @property
    def static_names(self) -> tuple[str, ...]:
        return self.names_by_role(ROLE_STATIC)

    @property
    def policy_name(self) -> str | None:
        names = self.names_by_role(ROLE_POLICY)
        return names[0] if names else None

    def role_of(self, name: str) -> str:
        for v in self.variables:
            if v.name == name:
                return v.role
        raise KeyError(name)

    def block_for_role(self, role: str) -> RegressionBlock:
        for block in self.regression_blocks:
            if role in block.targets:
                return block
        raise KeyError(role)

    def resolve_selector(self, selector: str) -> tuple[str, ...]:
        """Expand a role name, group name, or variable name to variable names."""
        if selector in ROLES:
            return self.names_by_role(selector)
        if selector in self.groups:
            return self.groups[selector]
        for v in self.variables:
            if v.name == selector:
                return (v.name,)
        raise KeyError(f"unknown selector {selector!r}")

    def lag_sources(self, t: int) -> range:
        """Source periods feeding a regression at target period ``t``."""
        lo = 0 if self.lag_window is None else max(0, t - self.lag_window)
        return range(lo, t)

    # -- serialization ---------------------------------------------------

    def canonical_dict(self) -> dict[str, Any]:
        return {
            "variables": [{"name": v.name, "role": v.role} for v in self.variables],
            "n_periods": self.n_periods,
            "groups": {k: list(v) for k, v in sorted(self.groups.items())},
            "lag_window": self.lag_window,
            "same_period_enabled": self.same_period_enabled,
            "ridge_lambda": self.ridge_lambda,
            "regression_blocks": [
                {
                    "targets": list(b.targets),
                    "regressors": {
                        "lagged": list(b.lagged),
                        "static_covariates": b.static_covariates,
                        "policy": b.policy,
                        "same_period": list(b.same_period),
                    },
                }
                for b in self.regression_blocks
            ],
            "pooling": self.pooling,
            "allow_outcome_shock": self.allow_outcome_shock,
        }

    def config_hash(self) -> str:
        payload = json.dumps(self.canonical_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ShockEntry:
    variables: tuple[str, ...]
    periods: tuple[int, ...]
    mode: str
    value: float


@dataclass(frozen=True)
class ShockSpec:
    """An intervention: which variables are overridden, when, and how."""

    label: str
    entries: tuple[ShockEntry, ...]

    def shocked_variables(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for entry in self.entries:
            for name in entry.variables:
                seen.setdefault(name)
        return tuple(seen)


# ---------------------------------------------------------------------------
# parsing helpers


def _require_keys(obj: Mapping[str, Any], allowed: Iterable[str], context: str) -> None:
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ParseError(f"unknown key(s) {sorted(unknown)} in {context}")


def _parse_variables(raw: Any) -> tuple[Variable, ...]:
    if not isinstance(raw, list) or not raw:
        raise ParseError("'variables' must be a non-empty list")
    variables = []
    seen = set()
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise ParseError(f"variables[{i}] must be an object")
        _require_keys(item, ("name", "role"), f"variables[{i}]")
        name = item.get("name")
        role = item.get("role")
        if not isinstance(name, str) or not name:
            raise ParseError(f"variables[{i}] needs a non-empty string name")
        if role not in ROLES:
            raise UnknownRole(f"variables[{i}] ({name}): unknown role {role!r}")
        if name in seen:
            raise ParseError(f"duplicate variable name {name!r}")
        if name in ROLES:
            raise ParseError(f"variable name {name!r} collides with a role name")
        seen.add(name)
        variables.append(Variable(name, role))
    if sum(1 for v in variables if v.role == ROLE_POLICY) > 1:
        raise ParseError("at most one policy variable is supported")
    return tuple(variables)


def _parse_groups(raw: Any, variables: tuple[Variable, ...]) -> dict[str, tuple[str, ...]]:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ParseError("'groups' must be an object")
    declared = {v.name for v in variables}
    groups: dict[str, tuple[str, ...]] = {}
    for name, members in raw.items():
        if name in ROLES or name in declared:
            raise ParseError(f"group name {name!r} collides with a role or variable name")
        if not isinstance(members, list) or not members:
            raise ParseError(f"group {name!r} must be a non-empty list of variables")
        for member in members:
            if member not in declared:
                raise GroupReferencesUnknownVariable(
                    f"group {name!r} references unknown variable {member!r}"
                )
        groups[name] = tuple(members)
    return groups


def default_regression_blocks(
    variables: tuple[Variable, ...], same_period_enabled: bool
) -> tuple[RegressionBlock, ...]:
    """Derive the regression structure when the config omits it.

    Without same-period effects every dynamic target shares one lagged-only
    block. With them, outcomes and non-ES surrogates additionally receive the
    current-period ES columns while ES targets stay lagged-only.
    """
    laggable = tuple(v.name for v in variables if v.role in LAGGABLE_ROLES)
    es = tuple(v.name for v in variables if v.role == ROLE_ES)
    has_policy = any(v.role == ROLE_POLICY for v in variables)
    if not same_period_enabled:
        return (
            RegressionBlock(
                targets=DYNAMIC_ROLES,
                lagged=laggable,
                static_covariates=True,
                policy=has_policy,
                same_period=(),
            ),
        )
    return (
        RegressionBlock(
            targets=(ROLE_OUTCOME, ROLE_SURROGATE),
            lagged=laggable,
            static_covariates=True,
            policy=has_policy,
            same_period=es,
        ),
        RegressionBlock(
            targets=(ROLE_ES,),
            lagged=laggable,
            static_covariates=True,
            policy=has_policy,
            same_period=(),
        ),
    )


def _resolve_many(config: ModelConfig, selectors: Sequence[str], context: str) -> tuple[str, ...]:
    resolved: dict[str, None] = {}
    for selector in selectors:
        try:
            names = config.resolve_selector(selector)
        except KeyError:
            raise ParseError(f"{context}: unknown selector {selector!r}") from None
        for name in names:
            resolved.setdefault(name)
    order = {v.name: i for i, v in enumerate(config.variables)}
    return tuple(sorted(resolved, key=order.__getitem__))


def _parse_blocks(raw: Any, skeleton: ModelConfig) -> tuple[RegressionBlock, ...]:
    if not isinstance(raw, list) or not raw:
        raise ParseError("'regression_blocks' must be a non-empty list")
    blocks = []
    for i, item in enumerate(raw):
        ctx = f"regression_blocks[{i}]"
        if not isinstance(item, dict):
            raise ParseError(f"{ctx} must be an object")
        _require_keys(item, ("targets", "regressors"), ctx)
        targets = item.get("targets")
        if not isinstance(targets, list) or not targets:
            raise ParseError(f"{ctx}: 'targets' must be a non-empty list of roles")
        for role in targets:
            if role not in ROLES:
                raise UnknownRole(f"{ctx}: unknown target role {role!r}")
            if role not in DYNAMIC_ROLES:
                raise ParseError(f"{ctx}: role {role!r} cannot be a regression target")
        regressors = item.get("regressors", {})
        if not isinstance(regressors, dict):
            raise ParseError(f"{ctx}: 'regressors' must be an object")
        _require_keys(
            regressors, ("lagged", "static_covariates", "policy", "same_period"), ctx
        )
        lagged_sel = regressors.get("lagged", list(LAGGABLE_ROLES))
        same_period_sel = regressors.get("same_period", [])
        if not isinstance(lagged_sel, list) or not isinstance(same_period_sel, list):
            raise ParseError(f"{ctx}: 'lagged' and 'same_period' must be lists")
        lagged = _resolve_many(skeleton, lagged_sel, ctx)
        for name in lagged:
            role = skeleton.role_of(name)
            if role not in LAGGABLE_ROLES:
                raise ParseError(
                    f"{ctx}: {name!r} ({role}) cannot appear as a lagged regressor"
                )
        same_period = _resolve_many(skeleton, same_period_sel, ctx)
        if same_period and not skeleton.same_period_enabled:
            raise ParseError(
                f"{ctx}: same-period regressors require same_period_enabled"
            )
        blocks.append(
            RegressionBlock(
                targets=tuple(targets),
                lagged=lagged,
                static_covariates=bool(regressors.get("static_covariates", True)),
                policy=bool(regressors.get("policy", skeleton.policy_name is not None)),
                same_period=same_period,
            )
        )
    return tuple(blocks)


def _check_block_coverage(config: ModelConfig) -> None:
    for role in DYNAMIC_ROLES:
        matches = [b for b in config.regression_blocks if role in b.targets]
        if config.names_by_role(role) and len(matches) != 1:
            raise ParseError(
                f"role {role!r} must be covered by exactly one regression block, "
                f"found {len(matches)}"
            )


def validate_within_period_dag(config: ModelConfig) -> tuple[tuple[str, str], ...]:
    """Check the within-period edge set and return it.

    Every same-period edge must originate at an es_interaction variable and
    terminate at an outcome or non-ES surrogate. Any other edge is rejected;
    the surviving edge set is acyclic by construction because all edges leave
    the ES layer and none enter it.
    """
    edges = []
    for block in config.regression_blocks:
        sink_names = [
            v.name
            for v in config.variables
            if v.role in block.targets and v.role in DYNAMIC_ROLES
        ]
        for source in block.same_period:
            source_role = config.role_of(source)
            for sink in sink_names:
                sink_role = config.role_of(sink)
                if source_role != ROLE_ES:
                    raise ConstraintViolation(
                        f"same-period edge {source} -> {sink}: source must be an "
                        f"es_interaction variable, got {source_role}"
                    )
                if sink_role == ROLE_ES:
                    raise ConstraintViolation(
                        f"same-period edge {source} -> {sink}: es_interaction "
                        "variables cannot receive same-period effects"
                    )
                edges.append((source, sink))
    return tuple(edges)


_TOP_LEVEL_KEYS = (
    "variables",
    "n_periods",
    "groups",
    "lag_window",
    "same_period_enabled",
    "ridge_lambda",
    "regression_blocks",
    "pooling",
    "allow_outcome_shock",
)


def parse_config(text: str) -> ModelConfig:
    """Parse and fully validate a JSON configuration document."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ParseError("config document must be a JSON object")
    _require_keys(raw, _TOP_LEVEL_KEYS, "config")

    variables = _parse_variables(raw.get("variables"))
    n_periods = raw.get("n_periods")
    if not isinstance(n_periods, int) or isinstance(n_periods, bool) or n_periods < 1:
        raise ParseError("'n_periods' must be a positive integer")
    groups = _parse_groups(raw.get("groups"), variables)

    lag_window = raw.get("lag_window")
    if lag_window is not None and (
        not isinstance(lag_window, int) or isinstance(lag_window, bool) or lag_window < 1
    ):
        raise ParseError("'lag_window' must be null or a positive integer")

    ridge_lambda = raw.get("ridge_lambda", DEFAULT_RIDGE_LAMBDA)
    if not isinstance(ridge_lambda, (int, float)) or isinstance(ridge_lambda, bool):
        raise ParseError("'ridge_lambda' must be a number")
    ridge_lambda = float(ridge_lambda)
    if not math.isfinite(ridge_lambda) or ridge_lambda < 0:
        raise ParseError("'ridge_lambda' must be finite and non-negative")

    same_period_enabled = raw.get("same_period_enabled", False)
    if not isinstance(same_period_enabled, bool):
        raise ParseError("'same_period_enabled' must be a boolean")
    allow_outcome_shock = raw.get("allow_outcome_shock", True)
    if not isinstance(allow_outcome_shock, bool):
        raise ParseError("'allow_outcome_shock' must be a boolean")
    pooling = raw.get("pooling", "none")
    if pooling not in ("none", "by_lag"):
        raise ParseError("'pooling' must be 'none' or 'by_lag'")

    skeleton = ModelConfig(
        variables=variables,
        n_periods=n_periods,
        groups=groups,
        lag_window=lag_window,
        same_period_enabled=same_period_enabled,
        ridge_lambda=ridge_lambda,
        regression_blocks=(),
        pooling=pooling,
        allow_outcome_shock=allow_outcome_shock,
    )
    if "regression_blocks" in raw:
        blocks = _parse_blocks(raw["regression_blocks"], skeleton)
    else:
        blocks = default_regression_blocks(variables, same_period_enabled)

    config = ModelConfig(
        variables=variables,
        n_periods=n_periods,
        groups=groups,
        lag_window=lag_window,
        same_period_enabled=same_period_enabled,
        ridge_lambda=ridge_lambda,
        regression_blocks=blocks,
        pooling=pooling,
        allow_outcome_shock=allow_outcome_shock,
    )
    _check_block_coverage(config)
    validate_within_period_dag(config)
    return config


def serialize_config(config: ModelConfig) -> str:
    """Render a config back to a document that reparses to an equal config."""
    return json.dumps(config.canonical_dict(), indent=2, sort_keys=True)


def load_config(path: str) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as handle:
        return parse_config(handle.read())


# ---------------------------------------------------------------------------
# shocks


def _parse_periods(raw: Any, n_periods: int, context: str) -> tuple[int, ...]:
    if raw == "all":
        return tuple(range(n_periods))
    if isinstance(raw, int) and not isinstance(raw, bool):
        raw = [raw, raw]
    if (
        not isinstance(raw, list)
        or len(raw) != 2
        or not all(isinstance(p, int) and not isinstance(p, bool) for p in raw)
    ):
        raise InvalidShock(
            f"{context}: 'periods' must be 'all', a period, or [first, last]"
        )
    first, last = raw
    if not (0 <= first <= last < n_periods):
        raise InvalidShock(
            f"{context}: period range [{first}, {last}] outside [0, {n_periods - 1}]"
        )
    return tuple(range(first, last + 1))


def shock_from_dict(raw: Mapping[str, Any], config: ModelConfig) -> ShockSpec:
    """Build and validate a shock against a config."""
    if not isinstance(raw, Mapping):
        raise InvalidShock("shock document must be a JSON object")
    _require_keys(raw, ("label", "entries"), "shock")
    label = raw.get("label")
    if not isinstance(label, str) or not label:
        raise InvalidShock("shock needs a non-empty string 'label'")
    raw_entries = raw.get("entries")
    if not isinstance(raw_entries, list):
        raise InvalidShock("shock 'entries' must be a list")
    entries = []
    for i, item in enumerate(raw_entries):
        ctx = f"shock entry [{i}]"
        if not isinstance(item, Mapping):
            raise InvalidShock(f"{ctx} must be an object")
        _require_keys(item, ("variables", "periods", "mode", "value"), ctx)
        selectors = item.get("variables")
        if isinstance(selectors, str):
            selectors = [selectors]
        if not isinstance(selectors, list) or not selectors:
            raise InvalidShock(f"{ctx}: 'variables' must name at least one variable")
        try:
            names = _resolve_many(config, selectors, ctx)
        except ParseError as exc:
            raise InvalidShock(str(exc)) from None
        for name in names:
            role = config.role_of(name)
            if role == ROLE_OUTCOME and not config.allow_outcome_shock:
                raise ShockOnOutcome(
                    f"{ctx}: outcome {name!r} cannot be shocked under this config"
                )
            if role not in DYNAMIC_ROLES:
                raise InvalidShock(f"{ctx}: {name!r} ({role}) is not shockable")
        periods = _parse_periods(item.get("periods", "all"), config.n_periods, ctx)
        mode = item.get("mode")
        if mode not in SHOCK_MODES:
            raise InvalidShock(f"{ctx}: mode must be one of {SHOCK_MODES}")
        value = item.get("value")
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise InvalidShock(f"{ctx}: 'value' must be a number")
        value = float(value)
        if not math.isfinite(value):
            raise InvalidShock(f"{ctx}: 'value' must be finite")
        entries.append(ShockEntry(names, periods, mode, value))
    return ShockSpec(label=label, entries=tuple(entries))


def parse_shock(text: str, config: ModelConfig) -> ShockSpec:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidShock(f"invalid JSON: {exc}") from None
    return shock_from_dict(raw, config)


def load_shock(path: str, config: ModelConfig) -> ShockSpec:
    with open(path, "r", encoding="utf-8") as handle:
        return parse_shock(handle.read(), config)
