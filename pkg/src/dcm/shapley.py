"""Shapley attribution of aggregate value across overlapping businesses.

Players are disjoint variable groups. A coalition holds its members at their
realized (simulated, unshocked) levels while everyone else is forced to a
baseline, by default zero in every period: the business-elimination
counterfactual. The characteristic value of a coalition is the aggregate
outcome of one deterministic simulation, cached by coalition bitmask so exact
attribution costs exactly 2^P scorings.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .config import ModelConfig, ShockSpec, shock_from_dict
from .errors import ParseError, TooManyPlayers
from .estimator import CoefficientSet
from .panel import PanelTensor
from .scorer import MODE_DETERMINISTIC, simulate_path

EXACT_ENUMERATION_LIMIT = 16


@dataclass(frozen=True)
class Player:
    name: str
    variables: tuple[str, ...]
    baseline_mode: str = "set"
    baseline_value: float = 0.0


@dataclass(frozen=True)
class PlayerSet:
    players: tuple[Player, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for player in self.players:
            if not player.variables:
                raise ParseError(f"player {player.name!r} has an empty group")
            overlap = seen.intersection(player.variables)
            if overlap:
                raise ParseError(
                    f"player groups must be disjoint; {sorted(overlap)} repeated"
                )
            seen.update(player.variables)

    def __len__(self) -> int:
        return len(self.players)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.players)


def players_from_dict(raw: Mapping[str, Any], config: ModelConfig) -> PlayerSet:
    """Parse the players file: name, variable selector, optional baseline."""
    if not isinstance(raw, Mapping) or "players" not in raw:
        raise ParseError("players document needs a 'players' list")
    items = raw["players"]
    if not isinstance(items, list) or not items:
        raise ParseError("'players' must be a non-empty list")
    players = []
    for i, item in enumerate(items):
        ctx = f"players[{i}]"
        if not isinstance(item, Mapping):
            raise ParseError(f"{ctx} must be an object")
        unknown = set(item) - {"name", "variables", "baseline"}
        if unknown:
            raise ParseError(f"unknown key(s) {sorted(unknown)} in {ctx}")
        name = item.get("name")
        if not isinstance(name, str) or not name:
            raise ParseError(f"{ctx} needs a non-empty name")
        selectors = item.get("variables", name)
        if isinstance(selectors, str):
            selectors = [selectors]
        resolved: dict[str, None] = {}
        for selector in selectors:
            try:
                for var in config.resolve_selector(selector):
                    resolved.setdefault(var)
            except KeyError:
                raise ParseError(f"{ctx}: unknown selector {selector!r}") from None
        baseline = item.get("baseline", {"mode": "set", "value": 0.0})
        mode = baseline.get("mode", "set")
        value = float(baseline.get("value", 0.0))
        if mode not in ("set", "scale", "add"):
            raise ParseError(f"{ctx}: baseline mode {mode!r} not supported")
        players.append(
            Player(
                name=name,
                variables=tuple(resolved),
                baseline_mode=mode,
                baseline_value=value,
            )
        )
    return PlayerSet(players=tuple(players))


@dataclass
class AttributionResult:
    player_names: tuple[str, ...]
    phi: dict[str, float]
    characteristic_values: dict[int, float]
    efficiency_gap: float
    method: str  # "exact" | "sampled"
    n_permutations: int | None = None
    standard_errors: dict[str, float] | None = None

    @property
    def total(self) -> float:
        full = self.characteristic_values[(1 << len(self.player_names)) - 1]
        empty = self.characteristic_values[0]
        return full - empty

    def shares(self) -> dict[str, float]:
        total = self.total
        if total == 0.0:
            return {name: float("nan") for name in self.player_names}
        return {name: self.phi[name] / total for name in self.player_names}


# ---------------------------------------------------------------------------


def coalition_shock(
    players: PlayerSet, coalition_mask: int, config: ModelConfig
) -> ShockSpec | None:
    """Baseline overrides for every player outside the coalition."""
    entries = []
    for index, player in enumerate(players.players):
        if coalition_mask & (1 << index):
            continue
        entries.append(
            {
                "variables": list(player.variables),
                "periods": "all",
                "mode": player.baseline_mode,
                "value": player.baseline_value,
            }
        )
    if not entries:
        return None
    label = f"coalition:{coalition_mask:0{len(players)}b}"
    return shock_from_dict({"label": label, "entries": entries}, config)


def characteristic_value(
    coeffs: CoefficientSet,
    panel: PanelTensor,
    players: PlayerSet,
    coalition: int | Sequence[int],
) -> float:
    """Aggregate outcome with coalition members on and everyone else at baseline."""
    if not isinstance(coalition, int):
        mask = 0
        for index in coalition:
            mask |= 1 << index
        coalition = mask
    config = coeffs.config
    shock = coalition_shock(players, coalition, config)
    trajectory = simulate_path(coeffs, panel, shock, MODE_DETERMINISTIC)
    outcome_pos = [coeffs.target_index(n) for n in config.outcome_names]
    return float(trajectory.values[:, :, outcome_pos].sum())


def evaluate_characteristic_map(
    coeffs: CoefficientSet, panel: PanelTensor, players: PlayerSet
) -> dict[int, float]:
    """F for every coalition bitmask; 2^P scorer runs, cached by mask."""
    n_players = len(players)
    if n_players > EXACT_ENUMERATION_LIMIT:
        raise TooManyPlayers(
            f"{n_players} players exceeds the enumeration limit "
            f"({EXACT_ENUMERATION_LIMIT}); use shapley_sampled"
        )
    return {
        mask: characteristic_value(coeffs, panel, players, mask)
        for mask in range(1 << n_players)
    }


def shapley_exact(players: PlayerSet, values: Mapping[int, float]) -> AttributionResult:
    """Average marginal contribution over all coalitions.

    phi_k = (1/P) * sum over coalitions C without k of
    [F(C + k) - F(C)] / (number of size-|C| coalitions excluding k).
    """
    n_players = len(players)
    if n_players > EXACT_ENUMERATION_LIMIT:
        raise TooManyPlayers(
            f"{n_players} players exceeds the enumeration limit "
            f"({EXACT_ENUMERATION_LIMIT}); use shapley_sampled"
        )
    full_mask = (1 << n_players) - 1
    missing = [m for m in range(full_mask + 1) if m not in values]
    if missing:
        raise ValueError(f"characteristic map is missing {len(missing)} coalitions")

    phi: dict[str, float] = {}
    for k, player in enumerate(players.players):
        bit = 1 << k
        acc = 0.0
        for mask in range(full_mask + 1):
            if mask & bit:
                continue
            size = bin(mask).count("1")
            weight = 1.0 / (n_players * math.comb(n_players - 1, size))
            acc += weight * (values[mask | bit] - values[mask])
        phi[player.name] = acc

    total = values[full_mask] - values[0]
    gap = abs(sum(phi.values()) - total)
    return AttributionResult(
        player_names=players.names,
        phi=phi,
        characteristic_values=dict(values),
        efficiency_gap=gap,
        method="exact",
    )


def shapley_sampled(
    players: PlayerSet,
    evaluator: Callable[[int], float],
    permutations: int,
    seed: int,
) -> AttributionResult:
    """Unbiased permutation-sampling estimate with per-player standard errors.

    Coalition evaluations are cached across permutations, so small player
    sets cost at most 2^P evaluator calls regardless of the permutation count.
    """
    if permutations < 1:
        raise ValueError("permutations must be >= 1")
    n_players = len(players)
    rng = np.random.default_rng(seed)
    cache: dict[int, float] = {}

    def value(mask: int) -> float:
        if mask not in cache:
            cache[mask] = evaluator(mask)
        return cache[mask]

    marginals = np.zeros((permutations, n_players))
    for m in range(permutations):
        order = rng.permutation(n_players)
        mask = 0
        previous = value(0)
        for index in order:
            mask |= 1 << int(index)
            current = value(mask)
            marginals[m, index] = current - previous
            previous = current
    phi_values = marginals.mean(axis=0)
    if permutations > 1:
        se_values = marginals.std(axis=0, ddof=1) / math.sqrt(permutations)
    else:
        se_values = np.full(n_players, np.nan)

    full_mask = (1 << n_players) - 1
    total = value(full_mask) - value(0)
    gap = abs(float(phi_values.sum()) - total)
    return AttributionResult(
        player_names=players.names,
        phi={p.name: float(phi_values[i]) for i, p in enumerate(players.players)},
        characteristic_values=dict(cache),
        efficiency_gap=gap,
        method="sampled",
        n_permutations=permutations,
        standard_errors={
            p.name: float(se_values[i]) for i, p in enumerate(players.players)
        },
    )


def attribute(
    coeffs: CoefficientSet,
    panel: PanelTensor,
    players: PlayerSet,
    permutations: int | None = None,
    seed: int = 0,
) -> AttributionResult:
    """Exact attribution when feasible, permutation sampling otherwise."""
    if permutations is None and len(players) <= EXACT_ENUMERATION_LIMIT:
        values = evaluate_characteristic_map(coeffs, panel, players)
        return shapley_exact(players, values)
    if permutations is None:
        raise TooManyPlayers(
            f"{len(players)} players requires the sampled method; pass permutations"
        )
    return shapley_sampled(
        players,
        lambda mask: characteristic_value(coeffs, panel, players, mask),
        permutations,
        seed,
    )


def export_attribution_csv(result: AttributionResult, path: str) -> None:
    shares = result.shares()
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["player", "phi", "share_of_total", "method", "se"])
        for name in result.player_names:
            se = ""
            if result.standard_errors is not None:
                se = repr(float(result.standard_errors[name]))
            writer.writerow(
                [
                    name,
                    repr(float(result.phi[name])),
                    repr(float(shares[name])),
                    result.method,
                    se,
                ]
            )
