import pytest

from dcm.config import shock_from_dict
from dcm.errors import ParseError, TooManyPlayers
from dcm.scorer import simulate_path
from dcm.shapley import (
    Player,
    PlayerSet,
    attribute,
    characteristic_value,
    evaluate_characteristic_map,
    players_from_dict,
    shapley_exact,
    shapley_sampled,
)
from dcm.synthetic import build_config, generate_panel

from helpers import small_spec


def channel_players(config, n_channels):
    return PlayerSet(
        players=tuple(
            Player(name=f"channel{i}", variables=(f"e{i}",)) for i in range(n_channels)
        )
    )


def economy_with_channels(seed, n_es, **overrides):
    overrides.setdefault("n_customers", 40)
    spec = small_spec(seed=seed, n_es=n_es, n_surrogates=2, **overrides)
    panel, truth = generate_panel(spec)
    config = build_config(spec)
    return panel, truth, config


def aggregate_outcomes(coeffs, panel, shock=None):
    trajectory = simulate_path(coeffs, panel, shock)
    outcome_pos = [coeffs.target_index(n) for n in coeffs.config.outcome_names]
    return float(trajectory.values[:, :, outcome_pos].sum())


def test_full_coalition_is_unshocked_aggregate():
    panel, truth, config = economy_with_channels(seed=1, n_es=2)
    players = channel_players(config, 2)
    assert characteristic_value(truth, panel, players, 0b11) == aggregate_outcomes(
        truth, panel
    )


def test_empty_coalition_is_all_baseline_aggregate():
    panel, truth, config = economy_with_channels(seed=1, n_es=2)
    players = channel_players(config, 2)
    shock = shock_from_dict(
        {"label": "all-off",
         "entries": [
             {"variables": ["e0", "e1"], "periods": "all", "mode": "set", "value": 0.0}
         ]},
        config,
    )
    assert characteristic_value(truth, panel, players, 0) == pytest.approx(
        aggregate_outcomes(truth, panel, shock), rel=1e-12
    )


def test_two_player_coalitions_match_direct_scoring():
    panel, truth, config = economy_with_channels(seed=2, n_es=2)
    players = channel_players(config, 2)
    values = evaluate_characteristic_map(truth, panel, players)
    assert len(values) == 4
    for mask in range(4):
        off = [f"e{i}" for i in range(2) if not (mask & (1 << i))]
        shock = None
        if off:
            shock = shock_from_dict(
                {"label": "off",
                 "entries": [{"variables": off, "periods": "all", "mode": "set",
                               "value": 0.0}]},
                config,
            )
        assert values[mask] == pytest.approx(
            aggregate_outcomes(truth, panel, shock), rel=1e-12
        )


def test_single_player_phi_is_standalone_delta():
    panel, truth, config = economy_with_channels(seed=3, n_es=1)
    players = channel_players(config, 1)
    values = evaluate_characteristic_map(truth, panel, players)
    result = shapley_exact(players, values)
    assert result.phi["channel0"] == values[1] - values[0]


def test_two_player_closed_form_matches_general_formula_exactly():
    panel, truth, config = economy_with_channels(seed=4, n_es=2)
    players = channel_players(config, 2)
    f = evaluate_characteristic_map(truth, panel, players)
    result = shapley_exact(players, f)

    # closed form: average of the two ways player 1 joins a coalition
    v11 = f[0b11] - f[0b10]
    v12 = f[0b01] - f[0b00]
    v21 = f[0b11] - f[0b01]
    v22 = f[0b10] - f[0b00]
    assert result.phi["channel0"] == 0.5 * (v11 + v12)
    assert result.phi["channel1"] == 0.5 * (v21 + v22)


def test_additive_economy_phi_equals_standalone():
    # ES channels that influence nothing but the outcome directly, and are
    # not influenced by anything: their values add with no interaction
    panel, truth, config = economy_with_channels(seed=5, n_es=2)
    for es in ("e0", "e1"):
        k = config.surrogate_names.index(es)
        j = truth.target_index(es)
        truth.lag[:, :, k, :] = 0.0   # ES drives nothing through lags
        truth.lag[j, :, :, :] = 0.0   # and follows its own exogenous path
    j_s = truth.target_index("s0")
    truth.same_period[j_s, :, :] = 0.0  # no mediated same-period path either
    j_s1 = truth.target_index("s1")
    truth.same_period[j_s1, :, :] = 0.0

    players = channel_players(config, 2)
    values = evaluate_characteristic_map(truth, panel, players)
    result = shapley_exact(players, values)
    for i, name in enumerate(("channel0", "channel1")):
        standalone = values[1 << i] - values[0]
        assert result.phi[name] == pytest.approx(standalone, abs=1e-9)


def test_efficiency_dummy_and_symmetry():
    panel, truth, config = economy_with_channels(seed=6, n_es=3)
    # make channel2 a dummy: no outgoing edges at all
    k = config.surrogate_names.index("e2")
    truth.lag[:, :, k, :] = 0.0
    truth.same_period[:, :, 2] = 0.0
    # make channels 0 and 1 exact clones of each other
    k0, k1 = (config.surrogate_names.index(e) for e in ("e0", "e1"))
    j0, j1 = (truth.target_index(e) for e in ("e0", "e1"))
    truth.lag[j1, :, :, :] = truth.lag[j0, :, :, :]
    truth.lag[:, :, k1, :] = truth.lag[:, :, k0, :]
    truth.same_period[:, :, 1] = truth.same_period[:, :, 0]
    truth.covariate[j1] = truth.covariate[j0]
    truth.intercept[j1] = truth.intercept[j0]

    players = channel_players(config, 3)
    values = evaluate_characteristic_map(truth, panel, players)
    result = shapley_exact(players, values)
    total = values[0b111] - values[0b000]
    assert result.efficiency_gap <= 1e-9 * abs(total)
    assert abs(result.phi["channel2"]) <= 1e-9
    assert abs(result.phi["channel0"] - result.phi["channel1"]) <= 1e-9 * abs(total)


def test_sampled_within_three_se_of_exact():
    panel, truth, config = economy_with_channels(seed=7, n_es=4, n_customers=30)
    players = channel_players(config, 4)
    values = evaluate_characteristic_map(truth, panel, players)
    exact = shapley_exact(players, values)
    sampled = shapley_sampled(players, values.__getitem__, permutations=2000, seed=11)
    for name in players.names:
        se = sampled.standard_errors[name]
        assert abs(sampled.phi[name] - exact.phi[name]) <= 3.0 * max(se, 1e-12)


def test_sampled_is_seed_deterministic():
    panel, truth, config = economy_with_channels(seed=8, n_es=2)
    players = channel_players(config, 2)
    values = evaluate_characteristic_map(truth, panel, players)
    a = shapley_sampled(players, values.__getitem__, permutations=1, seed=5)
    b = shapley_sampled(players, values.__getitem__, permutations=1, seed=5)
    assert a.phi == b.phi


def test_sampled_single_player_exact_for_any_m():
    panel, truth, config = economy_with_channels(seed=9, n_es=1)
    players = channel_players(config, 1)
    values = evaluate_characteristic_map(truth, panel, players)
    for m in (1, 7):
        sampled = shapley_sampled(players, values.__getitem__, permutations=m, seed=3)
        assert sampled.phi["channel0"] == values[1] - values[0]


def test_enumeration_limit():
    players = PlayerSet(
        players=tuple(Player(name=f"p{i}", variables=(f"v{i}",)) for i in range(17))
    )
    with pytest.raises(TooManyPlayers):
        shapley_exact(players, {})


def test_attribute_exact_path():
    panel, truth, config = economy_with_channels(seed=10, n_es=2)
    players = channel_players(config, 2)
    result = attribute(truth, panel, players)
    assert result.method == "exact"
    total = result.total
    assert sum(result.phi.values()) == pytest.approx(total, rel=1e-12)


def test_players_file_parsing_and_disjointness():
    panel, truth, config = economy_with_channels(seed=11, n_es=2)
    players = players_from_dict(
        {"players": [
            {"name": "channel0", "variables": "channel0"},
            {"name": "channel1", "variables": ["e1"],
             "baseline": {"mode": "scale", "value": 0.5}},
        ]},
        config,
    )
    assert players.players[1].baseline_mode == "scale"
    with pytest.raises(ParseError, match="disjoint"):
        PlayerSet(players=(Player("a", ("e0",)), Player("b", ("e0",))))
