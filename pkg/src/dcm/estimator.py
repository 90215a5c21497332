"""Fitting the full equation system: one linear regression per (target, period).

Each regression solves ridge-regularized least squares via the normal
equations with a symmetric positive-definite factorization, falling back to a
least-squares solve when conditioning is poor. The intercept is never
penalized. Targets sharing a regression block at the same period share one
design and one factorization; coefficients are identical to fitting each
target alone because the solve treats right-hand sides independently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .config import ModelConfig, parse_config
from .errors import ConfigMismatch, InsufficientRows, ParseError, SingularSystem
from .panel import DesignMatrix, PanelTensor, build_design, regression_exists

_RANK_RTOL = 1e-12


@dataclass
class FitResult:
    coefficients: np.ndarray
    standard_errors: np.ndarray
    residual_variance: float
    r_squared: float
    condition: float


@dataclass(eq=False)
class CoefficientSet:
    """Trained artifact: coefficient blocks indexed by target and period.

    Shapes (T = dynamic targets, N = periods, K = surrogate sources,
    E = ES variables, C = static covariates):

    - ``lag``          (T, N, K, N): entry [j, t, k, s] is the weight of
      source k at period s in target j's period-t equation; zero outside the
      lag window and for s >= t.
    - ``same_period``  (T, N, E): current-period ES weights; zero for ES
      targets and whenever same-period effects are disabled.
    - ``covariate``    (T, N, C), ``policy_coef`` (T, N), ``intercept`` (T, N).
    - ``fitted``       (T, N) bool: which regressions exist.

    Structural zeros are never estimated; they are absent from the designs
    and stay exactly 0.0 here.
    """

    config: ModelConfig
    lag: np.ndarray
    same_period: np.ndarray
    covariate: np.ndarray
    policy_coef: np.ndarray
    intercept: np.ndarray
    fitted: np.ndarray
    lag_se: np.ndarray
    same_period_se: np.ndarray
    covariate_se: np.ndarray
    policy_se: np.ndarray
    intercept_se: np.ndarray
    residual_variance: np.ndarray
    r_squared: np.ndarray
    condition: np.ndarray
    pooled: bool = False
    _target_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._target_index = {n: i for i, n in enumerate(self.config.dynamic_names)}

    @property
    def target_names(self) -> tuple[str, ...]:
        return self.config.dynamic_names

    @property
    def source_names(self) -> tuple[str, ...]:
        return self.config.surrogate_names

    def target_index(self, name: str) -> int:
        return self._target_index[name]

    def config_hash(self) -> str:
        return self.config.config_hash()

    def equals(self, other: "CoefficientSet") -> bool:
        return (
            self.config == other.config
            and self.pooled == other.pooled
            and np.array_equal(self.fitted, other.fitted)
            and all(
                np.array_equal(getattr(self, name), getattr(other, name))
                for name in (
                    "lag",
                    "same_period",
                    "covariate",
                    "policy_coef",
                    "intercept",
                    "lag_se",
                    "same_period_se",
                    "covariate_se",
                    "policy_se",
                    "intercept_se",
                )
            )
            and np.array_equal(
                self.residual_variance, other.residual_variance, equal_nan=True
            )
            and np.array_equal(self.r_squared, other.r_squared, equal_nan=True)
            and np.array_equal(self.condition, other.condition, equal_nan=True)
        )


def empty_coefficient_set(config: ModelConfig) -> CoefficientSet:
    t = len(config.dynamic_names)
    n = config.n_periods
    k = len(config.surrogate_names)
    e = len(config.es_names)
    c = len(config.static_names)
    return CoefficientSet(
        config=config,
        lag=np.zeros((t, n, k, n)),
        same_period=np.zeros((t, n, e)),
        covariate=np.zeros((t, n, c)),
        policy_coef=np.zeros((t, n)),
        intercept=np.zeros((t, n)),
        fitted=np.zeros((t, n), dtype=bool),
        lag_se=np.zeros((t, n, k, n)),
        same_period_se=np.zeros((t, n, e)),
        covariate_se=np.zeros((t, n, c)),
        policy_se=np.zeros((t, n)),
        intercept_se=np.zeros((t, n)),
        residual_variance=np.full((t, n), np.nan),
        r_squared=np.full((t, n), np.nan),
        condition=np.full((t, n), np.nan),
    )


# ---------------------------------------------------------------------------
# core solver


def _offending_columns(design: DesignMatrix) -> tuple[str, ...]:
    # Rank-revealing pivoted QR; the trailing pivots past the numerical rank
    # are the columns that cannot be separated from the rest.
    _, r, piv = scipy.linalg.qr(design.matrix, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag[0] * max(design.matrix.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    labels = design.labels()
    return tuple(labels[i] for i in piv[rank:])


def _solve_normal_equations(
    design: DesignMatrix, targets_matrix: np.ndarray, lam: float
) -> tuple[np.ndarray, np.ndarray, float]:
    """Return (coefficients (p, J), inverse normal matrix diag (p,), condition)."""
    x = design.matrix
    n, p = x.shape
    gram = x.T @ x
    penalty = np.full(p, lam)
    penalty[design.intercept_index] = 0.0
    a = gram + np.diag(penalty)

    eigenvalues = np.linalg.eigvalsh(a)
    max_eig = float(eigenvalues[-1])
    min_eig = float(eigenvalues[0])
    condition = np.inf if min_eig <= 0.0 else max_eig / min_eig

    if lam == 0.0 and (min_eig <= 0.0 or min_eig <= max_eig * _RANK_RTOL):
        offenders = _offending_columns(design)
        raise SingularSystem(
            f"target {design.target}: rank-deficient design with lambda=0; "
            f"offending columns: {list(offenders)}",
            offending_columns=offenders,
        )

    b = x.T @ targets_matrix
    try:
        factor = scipy.linalg.cho_factor(a, lower=True)
        coeffs = scipy.linalg.cho_solve(factor, b)
        # one step of iterative refinement: the normal equations square the
        # condition number, refinement claws the lost digits back
        residual = b - a @ coeffs
        coeffs += scipy.linalg.cho_solve(factor, residual)
        a_inv_diag = np.diag(scipy.linalg.cho_solve(factor, np.eye(p)))
    except scipy.linalg.LinAlgError:
        # Poor conditioning despite a positive penalty: rank-revealing path.
        coeffs, *_ = np.linalg.lstsq(a, b, rcond=None)
        a_inv = np.linalg.pinv(a)
        a_inv_diag = np.diag(a_inv)
    return coeffs, np.maximum(a_inv_diag, 0.0), condition


def _per_target_diagnostics(
    x: np.ndarray, y: np.ndarray, w: np.ndarray, a_inv_diag: np.ndarray
) -> tuple[np.ndarray, float, float]:
    n, p = x.shape
    resid = y - x @ w
    ssr = float(resid @ resid)
    dof = max(n - p, 1)
    sigma2 = ssr / dof
    centered = y - y.mean()
    sst = float(centered @ centered)
    if sst == 0.0:
        # constant target: perfect fit up to roundoff, else no fit at all
        r2 = 1.0 if ssr <= n * (1e-12 * (1.0 + abs(float(y.mean())))) ** 2 else 0.0
    else:
        r2 = 1.0 - ssr / sst
    se = np.sqrt(sigma2 * a_inv_diag)
    return se, sigma2, r2


def fit_target(design: DesignMatrix, targets: Sequence[float], lam: float) -> FitResult:
    """Fit one regression; the intercept column is excluded from the penalty."""
    y = np.asarray(targets, dtype=np.float64)
    if design.matrix.shape[0] < 1:
        raise InsufficientRows("design has no rows")
    if y.shape != (design.matrix.shape[0],):
        raise ValueError("target vector length does not match design rows")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    coeffs, a_inv_diag, condition = _solve_normal_equations(design, y[:, None], lam)
    w = coeffs[:, 0]
    se, sigma2, r2 = _per_target_diagnostics(design.matrix, y, w, a_inv_diag)
    return FitResult(
        coefficients=w,
        standard_errors=se,
        residual_variance=sigma2,
        r_squared=r2,
        condition=condition,
    )


# ---------------------------------------------------------------------------
# full-system fit


def _store_solution(
    coeffs: CoefficientSet,
    design: DesignMatrix,
    target_name: str,
    t: int,
    w: np.ndarray,
    se: np.ndarray,
) -> None:
    config = coeffs.config
    j = coeffs.target_index(target_name)
    src_index = {n: i for i, n in enumerate(config.surrogate_names)}
    es_index = {n: i for i, n in enumerate(config.es_names)}
    cov_index = {n: i for i, n in enumerate(config.static_names)}
    for col, weight, err in zip(design.columns, w, se):
        if col.kind == "lag":
            coeffs.lag[j, t, src_index[col.variable], col.period] = weight
            coeffs.lag_se[j, t, src_index[col.variable], col.period] = err
        elif col.kind == "static":
            coeffs.covariate[j, t, cov_index[col.variable]] = weight
            coeffs.covariate_se[j, t, cov_index[col.variable]] = err
        elif col.kind == "policy":
            coeffs.policy_coef[j, t] = weight
            coeffs.policy_se[j, t] = err
        elif col.kind == "same_period":
            coeffs.same_period[j, t, es_index[col.variable]] = weight
            coeffs.same_period_se[j, t, es_index[col.variable]] = err
        else:
            coeffs.intercept[j, t] = weight
            coeffs.intercept_se[j, t] = err
    coeffs.fitted[j, t] = True


def _fit_block_at_period(
    coeffs: CoefficientSet,
    panel: PanelTensor,
    config: ModelConfig,
    target_names: list[str],
    t: int,
) -> None:
    design = build_design(panel, (target_names[0], t), config)
    n, p = design.matrix.shape
    if n <= p:
        raise InsufficientRows(
            f"targets {target_names} at period {t}: {n} customers for {p} columns"
        )
    y = np.column_stack([panel.column(name, t) for name in target_names])
    try:
        w_all, a_inv_diag, condition = _solve_normal_equations(
            design, y, config.ridge_lambda
        )
    except SingularSystem as exc:
        raise SingularSystem(
            f"period {t}, targets {target_names}: {exc}",
            offending_columns=exc.offending_columns,
        ) from None
    for idx, name in enumerate(target_names):
        w = w_all[:, idx]
        se, sigma2, r2 = _per_target_diagnostics(design.matrix, y[:, idx], w, a_inv_diag)
        _store_solution(coeffs, design, name, t, w, se)
        j = coeffs.target_index(name)
        coeffs.residual_variance[j, t] = sigma2
        coeffs.r_squared[j, t] = r2
        coeffs.condition[j, t] = condition


def fit_dcm(panel: PanelTensor, config: ModelConfig) -> CoefficientSet:
    """Fit every (dynamic variable, period) regression.

    Period 0 is fitted only where the design is non-empty without lags (see
    :func:`dcm.panel.regression_exists`). Regressions are independent given
    the panel; any fitting order yields identical coefficients.
    """
    if not panel.same_structure(config):
        raise ConfigMismatch("panel variables/periods do not match the config")
    coeffs = empty_coefficient_set(config)
    if config.pooling == "by_lag":
        _fit_pooled(coeffs, panel, config)
        return coeffs
    role_of = {v.name: v.role for v in config.variables}
    for t in range(config.n_periods):
        for block in config.regression_blocks:
            names = [
                name
                for name in config.dynamic_names
                if role_of[name] in block.targets and regression_exists(config, name, t)
            ]
            if names:
                _fit_block_at_period(coeffs, panel, config, names, t)
    return coeffs


def _fit_pooled(coeffs: CoefficientSet, panel: PanelTensor, config: ModelConfig) -> None:
    """Pooled mode: one regression per target with coefficients tied across t.

    Lagged terms are indexed by lag distance; a distance reaching before
    period 0 contributes zero, consistent with absence-is-zero activity.
    """
    coeffs.pooled = True
    n_periods = config.n_periods
    max_distance = min(
        config.lag_window if config.lag_window is not None else n_periods - 1,
        n_periods - 1,
    )
    role_of = {v.name: v.role for v in config.variables}
    order = {v: i for i, v in enumerate(config.surrogate_names)}
    n = panel.n_customers

    for block in config.regression_blocks:
        names = [n_ for n_ in config.dynamic_names if role_of[n_] in block.targets]
        if not names:
            continue
        sources = sorted(block.lagged, key=order.__getitem__)
        chunks: list[np.ndarray] = []
        y_chunks = {name: [] for name in names}
        for t in range(1, n_periods):
            cols: list[np.ndarray] = []
            for source in sources:
                for d in range(1, max_distance + 1):
                    s = t - d
                    cols.append(panel.column(source, s) if s >= 0 else np.zeros(n))
            if block.static_covariates:
                cols.extend(panel.static_values.T)
            if block.policy and config.policy_name is not None:
                cols.append(panel.policy if panel.policy is not None else np.zeros(n))
            for source in block.same_period:
                cols.append(panel.column(source, t))
            cols.append(np.ones(n))
            chunks.append(np.column_stack(cols))
            for name in names:
                y_chunks[name].append(panel.column(name, t))
        x = np.vstack(chunks)
        rows, p = x.shape
        if rows <= p:
            raise InsufficientRows(
                f"pooled targets {names}: {rows} rows for {p} columns"
            )
        labels: list[tuple[str, str | None, int | None]] = []
        for source in sources:
            for d in range(1, max_distance + 1):
                labels.append(("lag", source, d))
        if block.static_covariates:
            labels.extend(("static", cov, None) for cov in config.static_names)
        if block.policy and config.policy_name is not None:
            labels.append(("policy", config.policy_name, None))
        labels.extend(("same_period", src, None) for src in block.same_period)
        labels.append(("intercept", None, None))
        intercept_idx = len(labels) - 1

        gram = x.T @ x
        penalty = np.full(p, config.ridge_lambda)
        penalty[intercept_idx] = 0.0
        a = gram + np.diag(penalty)
        eigenvalues = np.linalg.eigvalsh(a)
        condition = (
            np.inf if eigenvalues[0] <= 0 else float(eigenvalues[-1] / eigenvalues[0])
        )
        y = np.column_stack([np.concatenate(y_chunks[name]) for name in names])
        b = x.T @ y
        factor = scipy.linalg.cho_factor(a, lower=True)
        w_all = scipy.linalg.cho_solve(factor, b)
        w_all += scipy.linalg.cho_solve(factor, b - a @ w_all)
        a_inv_diag = np.maximum(np.diag(scipy.linalg.cho_solve(factor, np.eye(p))), 0.0)

        src_index = {s: i for i, s in enumerate(config.surrogate_names)}
        es_index = {s: i for i, s in enumerate(config.es_names)}
        cov_index = {s: i for i, s in enumerate(config.static_names)}
        for idx, name in enumerate(names):
            w = w_all[:, idx]
            se, sigma2, r2 = _per_target_diagnostics(x, y[:, idx], w, a_inv_diag)
            j = coeffs.target_index(name)
            for (kind, var, d), weight, err in zip(labels, w, se):
                for t in range(1, n_periods):
                    if kind == "lag":
                        s = t - d
                        if s >= 0 and s in config.lag_sources(t):
                            coeffs.lag[j, t, src_index[var], s] = weight
                            coeffs.lag_se[j, t, src_index[var], s] = err
                    elif kind == "static":
                        coeffs.covariate[j, t, cov_index[var]] = weight
                        coeffs.covariate_se[j, t, cov_index[var]] = err
                    elif kind == "policy":
                        coeffs.policy_coef[j, t] = weight
                        coeffs.policy_se[j, t] = err
                    elif kind == "same_period":
                        coeffs.same_period[j, t, es_index[var]] = weight
                        coeffs.same_period_se[j, t, es_index[var]] = err
                    else:
                        coeffs.intercept[j, t] = weight
                        coeffs.intercept_se[j, t] = err
            coeffs.fitted[j, 1:] = True
            coeffs.residual_variance[j, 1:] = sigma2
            coeffs.r_squared[j, 1:] = r2
            coeffs.condition[j, 1:] = condition

    # Period 0 has no lag structure to pool; fit it per period as usual.
    for block in config.regression_blocks:
        names = [
            name
            for name in config.dynamic_names
            if role_of[name] in block.targets and regression_exists(config, name, 0)
        ]
        if names:
            _fit_block_at_period(coeffs, panel, config, names, 0)


# ---------------------------------------------------------------------------
# artifact persistence


def _block_to_json(coeffs: CoefficientSet, values: str) -> dict:
    config = coeffs.config
    lag = getattr(coeffs, "lag" if values == "coef" else "lag_se")
    same_period = getattr(coeffs, "same_period" if values == "coef" else "same_period_se")
    covariate = getattr(coeffs, "covariate" if values == "coef" else "covariate_se")
    policy = getattr(coeffs, "policy_coef" if values == "coef" else "policy_se")
    intercept = getattr(coeffs, "intercept" if values == "coef" else "intercept_se")
    out: dict = {}
    for j, name in enumerate(config.dynamic_names):
        per_target: dict = {}
        role = config.role_of(name)
        block = config.block_for_role(role)
        for t in range(config.n_periods):
            if not coeffs.fitted[j, t]:
                continue
            entry: dict = {"intercept": float(intercept[j, t])}
            lags: dict = {}
            for k, source in enumerate(config.surrogate_names):
                if source not in block.lagged:
                    continue
                per_source = {
                    str(s): float(lag[j, t, k, s]) for s in config.lag_sources(t)
                }
                if per_source:
                    lags[source] = per_source
            if lags:
                entry["lag"] = lags
            if block.same_period:
                entry["same_period"] = {
                    source: float(same_period[j, t, config.es_names.index(source)])
                    for source in block.same_period
                }
            if block.static_covariates and config.static_names:
                entry["covariates"] = {
                    cov: float(covariate[j, t, c])
                    for c, cov in enumerate(config.static_names)
                }
            if block.policy and config.policy_name is not None:
                entry["policy"] = float(policy[j, t])
            per_target[str(t)] = entry
        out[name] = per_target
    return out


def save_artifact(coeffs: CoefficientSet, path: str) -> None:
    """Write the model as a single human-diffable JSON document."""
    config = coeffs.config
    doc = {
        "format": "dcm-model/1",
        "config": config.canonical_dict(),
        "config_hash": config.config_hash(),
        "pooled": coeffs.pooled,
        "coefficients": _block_to_json(coeffs, "coef"),
        "standard_errors": _block_to_json(coeffs, "se"),
        "diagnostics": {
            name: {
                str(t): {
                    "residual_variance": float(coeffs.residual_variance[j, t]),
                    "r_squared": float(coeffs.r_squared[j, t]),
                    "condition": float(coeffs.condition[j, t]),
                }
                for t in range(config.n_periods)
                if coeffs.fitted[j, t]
            }
            for j, name in enumerate(config.dynamic_names)
        },
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(doc, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _read_block(coeffs: CoefficientSet, raw: dict, values: str) -> None:
    config = coeffs.config
    lag = getattr(coeffs, "lag" if values == "coef" else "lag_se")
    same_period = getattr(coeffs, "same_period" if values == "coef" else "same_period_se")
    covariate = getattr(coeffs, "covariate" if values == "coef" else "covariate_se")
    policy = getattr(coeffs, "policy_coef" if values == "coef" else "policy_se")
    intercept = getattr(coeffs, "intercept" if values == "coef" else "intercept_se")
    src_index = {n: i for i, n in enumerate(config.surrogate_names)}
    es_index = {n: i for i, n in enumerate(config.es_names)}
    cov_index = {n: i for i, n in enumerate(config.static_names)}
    for name, per_target in raw.items():
        j = coeffs.target_index(name)
        for t_str, entry in per_target.items():
            t = int(t_str)
            coeffs.fitted[j, t] = True
            intercept[j, t] = entry["intercept"]
            for source, per_source in entry.get("lag", {}).items():
                for s_str, weight in per_source.items():
                    lag[j, t, src_index[source], int(s_str)] = weight
            for source, weight in entry.get("same_period", {}).items():
                same_period[j, t, es_index[source]] = weight
            for cov, weight in entry.get("covariates", {}).items():
                covariate[j, t, cov_index[cov]] = weight
            if "policy" in entry:
                policy[j, t] = entry["policy"]


def load_artifact(path: str, config: ModelConfig | None = None) -> CoefficientSet:
    """Load a model artifact, optionally verifying it against a config."""
    with open(path, "r", encoding="utf-8") as handle:
        try:
            doc = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from None
    if doc.get("format") != "dcm-model/1":
        raise ParseError(f"{path}: not a model artifact")
    embedded = parse_config(json.dumps(doc["config"]))
    if embedded.config_hash() != doc.get("config_hash"):
        raise ConfigMismatch(f"{path}: embedded config does not match recorded hash")
    if config is not None and config.config_hash() != doc["config_hash"]:
        raise ConfigMismatch(
            f"{path}: artifact was trained under config {doc['config_hash'][:12]}, "
            f"got {config.config_hash()[:12]}"
        )
    coeffs = empty_coefficient_set(embedded)
    coeffs.pooled = bool(doc.get("pooled", False))
    _read_block(coeffs, doc["coefficients"], "coef")
    _read_block(coeffs, doc["standard_errors"], "se")
    for name, per_target in doc.get("diagnostics", {}).items():
        j = coeffs.target_index(name)
        for t_str, entry in per_target.items():
            t = int(t_str)
            coeffs.residual_variance[j, t] = entry["residual_variance"]
            coeffs.r_squared[j, t] = entry["r_squared"]
            coeffs.condition[j, t] = entry["condition"]
    return coeffs
