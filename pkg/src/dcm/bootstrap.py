"""Customer-level bootstrap for valuation uncertainty.

The resampling unit is the whole customer path, never customer-weeks, because
observations within a customer are serially dependent. Each replicate redraws
customers with replacement, refits the full system, rescores the shock, and
records the aggregate delta; the interval is the empirical percentile range.
Replicate seeds derive from the master seed by replicate index, so results do
not depend on execution order or worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from .config import ModelConfig, ShockSpec
from .errors import DcmError
from .estimator import fit_dcm
from .panel import PanelTensor
from .scorer import MODE_DETERMINISTIC, score_counterfactual


@dataclass(eq=False)
class BootstrapReport:
    point_estimate: float
    replicate_values: np.ndarray
    ci: tuple[float, float]
    level: float
    seed: int

    @property
    def n_replicates(self) -> int:
        return len(self.replicate_values)


def resample_panel(panel: PanelTensor, rng: np.random.Generator) -> PanelTensor:
    """Draw customers with replacement (same n); ids are re-labelled."""
    n = panel.n_customers
    idx = rng.integers(0, n, size=n)
    return PanelTensor(
        customer_ids=tuple(f"{panel.customer_ids[i]}:{pos}" for pos, i in enumerate(idx)),
        n_periods=panel.n_periods,
        variables=panel.variables,
        values=panel.values[idx],
        static_values=panel.static_values[idx],
        policy=panel.policy[idx] if panel.policy is not None else None,
    )


def _statistic(panel: PanelTensor, config: ModelConfig, shock: ShockSpec, mode: str) -> float:
    coeffs = fit_dcm(panel, config)
    return score_counterfactual(coeffs, panel, shock, mode).total_delta


def _replicate(
    panel: PanelTensor,
    config: ModelConfig,
    shock: ShockSpec,
    mode: str,
    index: int,
    child_seed: np.random.SeedSequence,
) -> float:
    rng = np.random.default_rng(child_seed)
    try:
        return _statistic(resample_panel(panel, rng), config, shock, mode)
    except DcmError as exc:
        raise type(exc)(f"bootstrap replicate {index}: {exc}") from exc


def bootstrap_value(
    panel: PanelTensor,
    config: ModelConfig,
    shock: ShockSpec,
    n_replicates: int,
    level: float = 0.95,
    seed: int = 0,
    mode: str = MODE_DETERMINISTIC,
    n_jobs: int = 1,
) -> BootstrapReport:
    """Percentile bootstrap interval for the aggregate shock delta."""
    if n_replicates < 2:
        raise ValueError("n_replicates must be >= 2")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie strictly between 0 and 1")

    point = _statistic(panel, config, shock, mode)
    children = np.random.SeedSequence(seed).spawn(n_replicates)
    if n_jobs == 1:
        values = [
            _replicate(panel, config, shock, mode, r, children[r])
            for r in range(n_replicates)
        ]
    else:
        values = Parallel(n_jobs=n_jobs)(
            delayed(_replicate)(panel, config, shock, mode, r, children[r])
            for r in range(n_replicates)
        )
    replicate_values = np.asarray(values, dtype=np.float64)
    alpha = (1.0 - level) / 2.0
    lower, upper = np.quantile(replicate_values, [alpha, 1.0 - alpha])
    return BootstrapReport(
        point_estimate=point,
        replicate_values=replicate_values,
        ci=(float(lower), float(upper)),
        level=level,
        seed=seed,
    )
