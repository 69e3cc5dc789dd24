import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mpcrl.exceptions import ConfigurationError
from mpcrl.plant import step_euler
from mpcrl.qlearn import (
    LookupMiss,
    QConfig,
    QTable,
    RewardConfig,
    StateGrid,
    evaluate_action,
    greedy_index,
    policy,
    sample_initial_states,
    train,
)


@pytest.fixture(scope="module")
def reward_cfg(default_config):
    return default_config.reward_config()


def reward_oracle(x0, gust, u, cfg, p, env):
    x = np.asarray(x0, dtype=float)
    total = 0.0
    for k in range(cfg.rollout_length):
        w = gust[k] if k < len(gust) else 0.0
        x = step_euler(x, u, w, p)
        if np.any(x < env.lo) or np.any(x > env.hi):
            return -np.inf
        total -= x @ cfg.Q_r @ x + cfg.R_r * u * u
    return total


def test_corner_states(envelope):
    grid = StateGrid.from_envelope(envelope, 2)
    X = sample_initial_states(grid, 2)
    assert X.shape == (16, 5)
    assert len({tuple(x) for x in X}) == 16
    assert np.all(np.abs(X[:, :4]) == envelope.hi[:4])
    assert not np.any(X[:, 4])


def test_cell_centre_states(envelope):
    grid = StateGrid.from_envelope(envelope, 7)
    X = sample_initial_states(grid, 7, span=6 / 7)
    np.testing.assert_allclose(grid.cell_center(grid.cell_index(X))[:, :4], X[:, :4], atol=1e-15)
    assert len(np.unique(grid.cell_index(X))) == 7**4


def test_grid_indexing(envelope):
    grid = StateGrid.from_envelope(envelope, 3)
    assert grid.n_cells == 3**5
    assert grid.cell_index(envelope.hi * 5) == grid.n_cells - 1
    assert grid.cell_index(envelope.lo) == 0
    c = grid.cell_center(17)
    assert grid.cell_index(c) == 17
    with pytest.raises(ConfigurationError):
        StateGrid(np.zeros(5), np.zeros(5))


def test_zero_reward_at_equilibrium(params, envelope, reward_cfg):
    assert evaluate_action(np.zeros(5), np.zeros(50), 0.0, reward_cfg, params, envelope) == 0.0


def test_reward_nonincreasing_in_input_magnitude(params, envelope, reward_cfg):
    us = np.linspace(0, 0.3, 7)
    for sign in (1, -1):
        r = [evaluate_action(np.zeros(5), np.zeros(50), sign * u, reward_cfg, params, envelope) for u in us]
        assert np.all(np.diff(r) <= 0)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_reward_matches_oracle(seed):
    from mpcrl.config import load_config

    cfg = load_config()
    p, env, rc = cfg.params(), cfg.envelope(), cfg.reward_config()
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(env.lo, env.hi) * 0.6
    gust = rng.normal(0, 1, 30)
    u = float(rng.uniform(-0.3, 0.3))
    got = evaluate_action(x0, gust, u, rc, p, env)
    ref = reward_oracle(x0, gust, u, rc, p, env)
    if np.isinf(ref):
        assert got == ref
    else:
        assert got == pytest.approx(ref, rel=1e-12, abs=1e-14)


def test_violation_gives_minus_inf(params, envelope, reward_cfg):
    x0 = envelope.hi * np.array([0.99, 0.99, 0.99, 0.99, 0])
    r, _, step = evaluate_action(x0, np.zeros(50), 0.3, reward_cfg, params, envelope, return_end=True)
    assert r == -np.inf and step >= 1


def test_reward_determinism(params, envelope, reward_cfg, rng):
    x0 = rng.uniform(envelope.lo, envelope.hi) * 0.3
    g = rng.normal(size=50)
    assert evaluate_action(x0, g, 0.1, reward_cfg, params, envelope) == evaluate_action(x0, g, 0.1, reward_cfg, params, envelope)


def test_reward_config_validation():
    with pytest.raises(ConfigurationError):
        RewardConfig(-np.ones(5), 0.1)
    with pytest.raises(ConfigurationError):
        RewardConfig(np.ones(5), -0.1)
    with pytest.raises(ConfigurationError):
        QConfig(gamma=1.0)


def test_greedy_tie_break():
    actions = np.array([-0.2, -0.1, 0.0, 0.1])
    assert greedy_index([1.0, 1.0, 0.5, 1.0], actions) == 1
    assert greedy_index([0.0, 2.0, 2.0, 2.0], actions) == 2
    assert greedy_index([-np.inf, -1.0, -np.inf, -np.inf], actions) == 1
    with pytest.raises(LookupMiss):
        greedy_index([-np.inf] * 4, actions)


# -- training ----------------------------------------------------------------


def _pairs(envelope, rng, n=6, scale=0.2):
    X = rng.uniform(envelope.lo, envelope.hi, (n, 5)) * scale
    return [(x, rng.normal(0, 0.5, 50)) for x in X]


def test_gamma_zero_equals_brute_force(params, envelope, reward_cfg, rng):
    grid = StateGrid.from_envelope(envelope, 2)
    pairs = _pairs(envelope, rng)
    bounds = [(-0.2, 0.25)] * len(pairs)
    res = train(pairs, bounds, reward_cfg, QConfig(5, 0.0), params, grid, envelope)
    q = res.qtable
    assert res.sweep_changes == []
    for k, c in enumerate(q.cells):
        members = [i for i, (x, _) in enumerate(pairs) if grid.cell_index(x) == c]
        np.testing.assert_allclose(q.actions[k], np.linspace(-0.2, 0.25, 5))
        ref = np.mean([[reward_oracle(pairs[i][0], pairs[i][1], u, reward_cfg, params, envelope) for u in q.actions[k]] for i in members], axis=0)
        np.testing.assert_allclose(q.values[k], ref, rtol=1e-12)
        assert q.greedy(k)[0] == int(np.argmax(ref))


def test_single_pair_three_actions(params, envelope, reward_cfg):
    grid = StateGrid.from_envelope(envelope, 2)
    x0 = np.array([0.01, 0.02, 0.0, 0.0, 0.0])
    res = train([(x0, np.zeros(50))], [(-0.1, 0.1)], reward_cfg, QConfig(3, 0.0), params, grid, envelope)
    ref = [reward_oracle(x0, np.zeros(50), u, reward_cfg, params, envelope) for u in (-0.1, 0.0, 0.1)]
    np.testing.assert_allclose(res.qtable.values[0], ref, rtol=1e-12)
    assert res.log == [(0, int(np.argmax(ref)), [-0.1, 0.0, 0.1][int(np.argmax(ref))], max(ref))]


def test_sweeps_contract(params, envelope, reward_cfg, rng):
    grid = StateGrid.from_envelope(envelope, 3)
    pairs = _pairs(envelope, rng, 20, 0.8)
    gamma = 0.8
    res = train(pairs, [(-0.3, 0.3)] * 20, reward_cfg, QConfig(5, gamma, 200, 1e-12), params, grid, envelope)
    ch = np.array(res.sweep_changes)
    assert len(ch) > 2
    assert np.all(ch[1:] <= gamma * ch[:-1] + 1e-12)
    assert np.all(np.diff(ch) <= 1e-12)


def test_actions_inside_every_member_interval(params, envelope, reward_cfg):
    grid = StateGrid.from_envelope(envelope, 1)
    x = np.zeros(5)
    pairs = [(x, np.zeros(50))] * 3
    bounds = [(-0.2, 0.1), (-0.1, 0.2), (0.15, 0.55)]
    res = train(pairs, bounds, reward_cfg, QConfig(4, 0.0), params, grid, envelope)
    assert res.dropped == [2]
    acts = res.qtable.actions[0]
    assert acts.min() >= -0.1 and acts.max() <= 0.1


def test_uncertified_pair_rejected(params, envelope, reward_cfg):
    from mpcrl.mpc import SafeBounds

    b = SafeBounds(0.0, -0.1, 0.1, np.zeros((3, 5)), np.zeros((3, 5)), 0.0, verified=False)
    with pytest.raises(ConfigurationError):
        train([(np.zeros(5), np.zeros(50))], [b], reward_cfg, QConfig(), params, StateGrid.from_envelope(envelope, 2), envelope)


def test_train_deterministic(params, envelope, reward_cfg):
    rng = np.random.default_rng(3)
    pairs = _pairs(envelope, rng, 10)
    a = train(pairs, [(-0.3, 0.3)] * 10, reward_cfg, QConfig(5, 0.9), params, StateGrid.from_envelope(envelope, 3), envelope)
    b = train(pairs, [(-0.3, 0.3)] * 10, reward_cfg, QConfig(5, 0.9), params, StateGrid.from_envelope(envelope, 3), envelope)
    assert a.qtable.values.tobytes() == b.qtable.values.tobytes()
    assert a.log == b.log


def test_qtable_json_roundtrip_and_lookup(tmp_path, envelope):
    grid = StateGrid.from_envelope(envelope, 2)
    q = QTable(grid, [0, 5], np.array([[-0.1, 0.1], [0.0, 0.2]]), np.array([[1.0, -np.inf], [0.5, 0.7]]), np.ones((2, 2), int), 0.9)
    path = tmp_path / "q.json"
    q.to_json(path, header="abc")
    r = QTable.from_json(path)
    np.testing.assert_array_equal(r.values, q.values)
    np.testing.assert_array_equal(r.actions, q.actions)
    assert r.gamma == 0.9
    x0 = grid.cell_center(0)
    assert policy(x0, r) == -0.1
    assert policy(grid.cell_center(5), r) == 0.2
    with pytest.raises(LookupMiss):
        policy(grid.cell_center(31), r)
    assert policy(grid.cell_center(1), r, nearest=True) in (-0.1, 0.2)
    np.testing.assert_array_equal(r.nearest_rows(grid.cell_center([0, 5])), [0, 1])


# -- estimator ---------------------------------------------------------------


def test_estimator_api(tiny_config, tiny_policy):
    est = tiny_config.policy()
    assert est.get_params()["bins"] == 2
    assert clone(est).get_params()["n_actions"] == est.n_actions
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 5)))
    X = tiny_config.training_states()
    u = tiny_policy.predict(X)
    env = tiny_config.envelope()
    assert u.shape == (len(X),)
    assert np.all((u >= env.input_lo) & (u <= env.input_hi))
    for b in tiny_policy.bounds_:
        assert b.verified


def test_estimator_deterministic(tiny_config, tiny_policy):
    other = tiny_config.policy().fit(tiny_config.training_states())
    assert other.qtable_.values.tobytes() == tiny_policy.qtable_.values.tobytes()


def test_estimator_rejects_bad_input(tiny_config):
    with pytest.raises(ValueError):
        tiny_config.policy().fit(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        tiny_config.policy().fit(np.full((3, 5), np.nan))
