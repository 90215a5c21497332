"""Panel storage and design-matrix construction.

Input is a wide CSV, one row per (customer, period), one column per declared
variable. Activity that is absent from the file is an exact zero, never a
missing value: surrogates are weekly activity aggregates, so no row means no
activity. Static covariates and the policy indicator repeat on every row and
must not vary over time for a customer.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .config import DYNAMIC_ROLES, ROLE_POLICY, ROLE_STATIC, ModelConfig, Variable
from .errors import (
    DuplicateCell,
    EmptyDesign,
    NonFiniteValue,
    PanelFormatError,
    TargetIsRegressor,
    TimeVaryingStatic,
    UnknownVariable,
)


@dataclass(eq=False)
class PanelTensor:
    """Immutable panel of per-customer, per-period values.

    ``values`` covers the dynamic variables (outcomes, non-ES surrogates, ES
    interactions) with shape (n_customers, n_periods, n_dynamic).
    ``static_values`` has shape (n_customers, n_static) and ``policy`` is an
    optional binary vector of length n_customers.
    """

    customer_ids: tuple[str, ...]
    n_periods: int
    variables: tuple[Variable, ...]
    values: np.ndarray
    static_values: np.ndarray
    policy: np.ndarray | None = None
    _dynamic_index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.static_values = np.ascontiguousarray(self.static_values, dtype=np.float64)
        if self.policy is not None:
            self.policy = np.ascontiguousarray(self.policy, dtype=np.float64)
            self.policy.setflags(write=False)
        self.values.setflags(write=False)
        self.static_values.setflags(write=False)
        dynamic = [v.name for v in self.variables if v.role in DYNAMIC_ROLES]
        self._dynamic_index = {name: i for i, name in enumerate(dynamic)}

    @property
    def n_customers(self) -> int:
        return len(self.customer_ids)

    @property
    def dynamic_names(self) -> tuple[str, ...]:
        return tuple(self._dynamic_index)

    def dynamic_index(self, name: str) -> int:
        return self._dynamic_index[name]

    def column(self, name: str, period: int) -> np.ndarray:
        return self.values[:, period, self._dynamic_index[name]]

    def same_structure(self, config: ModelConfig) -> bool:
        return self.variables == config.variables and self.n_periods == config.n_periods


@dataclass(frozen=True)
class ColumnSpec:
    """Descriptor for one design column."""

    kind: str  # "lag" | "static" | "policy" | "same_period" | "intercept"
    variable: str | None = None
    period: int | None = None

    def label(self) -> str:
        if self.kind == "lag":
            return f"lag:{self.variable}@{self.period}"
        if self.kind == "static":
            return f"static:{self.variable}"
        if self.kind == "same_period":
            return f"same_period:{self.variable}"
        return self.kind


@dataclass(eq=False)
class DesignMatrix:
    matrix: np.ndarray
    columns: tuple[ColumnSpec, ...]
    target: tuple[str, int]

    def labels(self) -> tuple[str, ...]:
        return tuple(c.label() for c in self.columns)

    @property
    def intercept_index(self) -> int:
        for i, c in enumerate(self.columns):
            if c.kind == "intercept":
                return i
        raise ValueError("design has no intercept column")


# ---------------------------------------------------------------------------
# ingestion


def ingest_panel(path: str, config: ModelConfig) -> PanelTensor:
    """Load a wide CSV into a dense panel.

    Every column after ``customer_id,period`` must be a declared variable.
    Cells for (customer, period) pairs that never appear are exact zeros.
    NaN/inf cells, duplicate rows, unknown headers, time-varying statics, and
    non-binary policy values abort ingestion with the offending line number.
    """
    declared = {v.name: v.role for v in config.variables}
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelFormatError(f"{path}: empty file") from None
        if header[:2] != ["customer_id", "period"]:
            raise PanelFormatError(
                f"{path}: header must start with customer_id,period"
            )
        var_columns = header[2:]
        for name in var_columns:
            if name not in declared:
                raise UnknownVariable(f"{path}: header column {name!r} is not declared")
        if len(set(var_columns)) != len(var_columns):
            raise PanelFormatError(f"{path}: duplicated header column")

        dynamic_names = [v.name for v in config.variables if v.role in DYNAMIC_ROLES]
        static_names = list(config.static_names)
        policy_name = config.policy_name

        customers: dict[str, int] = {}
        rows: list[tuple[int, int, list[float]]] = []
        statics: list[list[float] | None] = []
        policies: list[float | None] = []
        seen: set[tuple[str, int]] = set()

        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise PanelFormatError(f"{path}:{line_no}: expected {len(header)} fields")
            customer = row[0]
            try:
                period = int(row[1])
            except ValueError:
                raise PanelFormatError(f"{path}:{line_no}: bad period {row[1]!r}") from None
            if not 0 <= period < config.n_periods:
                raise PanelFormatError(
                    f"{path}:{line_no}: period {period} outside [0, {config.n_periods - 1}]"
                )
            key = (customer, period)
            if key in seen:
                raise DuplicateCell(
                    f"{path}:{line_no}: duplicate row for customer "
                    f"{customer!r} period {period}"
                )
            seen.add(key)

            parsed: list[float] = []
            for name, cell in zip(var_columns, row[2:]):
                if cell == "":
                    parsed.append(0.0)
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise PanelFormatError(
                        f"{path}:{line_no}: cannot parse {cell!r} for {name!r}"
                    ) from None
                if not math.isfinite(value):
                    raise NonFiniteValue(
                        f"{path}:{line_no}: non-finite value {cell!r} for {name!r}"
                    )
                parsed.append(value)

            if customer not in customers:
                customers[customer] = len(customers)
                statics.append(None)
                policies.append(None)
            cidx = customers[customer]

            row_map = dict(zip(var_columns, parsed))
            row_static = [row_map.get(name, 0.0) for name in static_names]
            if statics[cidx] is None:
                statics[cidx] = row_static
            elif statics[cidx] != row_static:
                raise TimeVaryingStatic(
                    f"{path}:{line_no}: static covariates changed for customer {customer!r}"
                )
            if policy_name is not None:
                row_policy = row_map.get(policy_name, 0.0)
                if row_policy not in (0.0, 1.0):
                    raise PanelFormatError(
                        f"{path}:{line_no}: policy value must be 0 or 1, got {row_policy}"
                    )
                if policies[cidx] is None:
                    policies[cidx] = row_policy
                elif policies[cidx] != row_policy:
                    raise TimeVaryingStatic(
                        f"{path}:{line_no}: policy changed for customer {customer!r}"
                    )
            rows.append((cidx, period, [row_map.get(name, 0.0) for name in dynamic_names]))

    n = len(customers)
    values = np.zeros((n, config.n_periods, len(dynamic_names)))
    for cidx, period, cells in rows:
        values[cidx, period, :] = cells
    static_values = np.array(
        [s if s is not None else [0.0] * len(static_names) for s in statics]
    ).reshape(n, len(static_names))
    policy = None
    if policy_name is not None:
        policy = np.array([p if p is not None else 0.0 for p in policies])
    return PanelTensor(
        customer_ids=tuple(customers),
        n_periods=config.n_periods,
        variables=config.variables,
        values=values,
        static_values=static_values,
        policy=policy,
    )


def write_panel(panel: PanelTensor, path: str) -> None:
    """Write the dense panel back to the wide CSV format, round-trip exact."""
    dynamic = list(panel.dynamic_names)
    static = [v.name for v in panel.variables if v.role == ROLE_STATIC]
    policy_names = [v.name for v in panel.variables if v.role == ROLE_POLICY]
    header = ["customer_id", "period"] + dynamic + static + policy_names
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for cidx, customer in enumerate(panel.customer_ids):
            for t in range(panel.n_periods):
                row = [customer, t]
                row += [repr(float(v)) for v in panel.values[cidx, t, :]]
                row += [repr(float(v)) for v in panel.static_values[cidx, :]]
                if policy_names:
                    row.append(repr(float(panel.policy[cidx])))
                writer.writerow(row)


# ---------------------------------------------------------------------------
# design construction


def build_design(
    panel: PanelTensor, target: tuple[str, int], config: ModelConfig
) -> DesignMatrix:
    """Assemble the regressor matrix for one (variable, period) target.

    Columns, in order: lagged surrogates sorted by (variable declaration
    index, source period), static covariates, policy, same-period ES columns,
    intercept. The target's own (variable, period) can never appear; lags are
    restricted to the configured window.
    """
    name, t = target
    role = config.role_of(name)
    if role not in DYNAMIC_ROLES:
        raise ValueError(f"{name!r} ({role}) is not a regression target")
    if t < 0 or t >= config.n_periods:
        raise ValueError(f"target period {t} outside [0, {config.n_periods - 1}]")
    block = config.block_for_role(role)

    if name in block.same_period:
        raise TargetIsRegressor(
            f"target {name!r} appears among its own same-period regressors"
        )

    specs: list[ColumnSpec] = []
    arrays: list[np.ndarray] = []
    order = {v: i for i, v in enumerate(config.surrogate_names)}
    for source in sorted(block.lagged, key=order.__getitem__):
        for s in config.lag_sources(t):
            specs.append(ColumnSpec("lag", source, s))
            arrays.append(panel.column(source, s))
    if block.static_covariates:
        for i, cov in enumerate(config.static_names):
            specs.append(ColumnSpec("static", cov))
            arrays.append(panel.static_values[:, i])
    if block.policy and config.policy_name is not None:
        specs.append(ColumnSpec("policy", config.policy_name))
        arrays.append(panel.policy if panel.policy is not None else np.zeros(panel.n_customers))
    for source in block.same_period:
        specs.append(ColumnSpec("same_period", source, t))
        arrays.append(panel.column(source, t))
    if not specs:
        raise EmptyDesign(
            f"target ({name!r}, {t}): no regressors (no lags available and no "
            "static covariates configured)"
        )
    specs.append(ColumnSpec("intercept"))
    arrays.append(np.ones(panel.n_customers))
    return DesignMatrix(
        matrix=np.column_stack(arrays), columns=tuple(specs), target=(name, t)
    )


def regression_exists(config: ModelConfig, name: str, t: int) -> bool:
    """Whether a regression is fitted for (variable, period).

    All periods t >= 1 are fitted. Period 0 has no lags, so it is fitted only
    when the target's block still has regressors there: static covariates,
    a policy column, or same-period ES columns.
    """
    if t >= 1:
        return True
    block = config.block_for_role(config.role_of(name))
    if block.static_covariates and config.static_names:
        return True
    if block.policy and config.policy_name is not None:
        return True
    return bool(block.same_period)


# ---------------------------------------------------------------------------
# validation report


@dataclass
class ValidationReport:
    n_customers: int
    n_periods: int
    constant_columns: tuple[tuple[str, int], ...]
    zero_fraction: float
    variable_ranges: dict[str, tuple[float, float]]


def validate_panel(panel: PanelTensor) -> ValidationReport:
    """Report-only scan: constant columns, zero share, per-variable ranges."""
    constant: list[tuple[str, int]] = []
    ranges: dict[str, tuple[float, float]] = {}
    for j, name in enumerate(panel.dynamic_names):
        block = panel.values[:, :, j]
        ranges[name] = (float(block.min()), float(block.max())) if block.size else (0.0, 0.0)
        for t in range(panel.n_periods):
            col = block[:, t]
            if col.size <= 1 or np.all(col == col[0]):
                constant.append((name, t))
    static_names = [v.name for v in panel.variables if v.role == ROLE_STATIC]
    for i, name in enumerate(static_names):
        col = panel.static_values[:, i]
        ranges[name] = (float(col.min()), float(col.max())) if col.size else (0.0, 0.0)
        if col.size <= 1 or np.all(col == col[0]):
            constant.append((name, -1))
    total = panel.values.size
    zero_fraction = float(np.count_nonzero(panel.values == 0.0)) / total if total else 0.0
    return ValidationReport(
        n_customers=panel.n_customers,
        n_periods=panel.n_periods,
        constant_columns=tuple(constant),
        zero_fraction=zero_fraction,
        variable_ranges=ranges,
    )
