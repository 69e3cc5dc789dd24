from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from mpcrl.exceptions import ConfigurationError, DomainError, InfeasibleError
from mpcrl.lpv import linearize_model
from mpcrl.mpc import (
    MpcConfig,
    SafeBounds,
    certify_and_shrink,
    certify_bounding,
    read_bounds_jsonl,
    safe_bounds,
    solve_box_qp,
    solve_mpc,
    write_bounds_jsonl,
)
from mpcrl.mpc import _predict2, plant_predictor

DT = 0.1
TOY = SimpleNamespace(A=np.array([[1.0, DT], [0.0, 1.0]]), B=np.array([0.5 * DT**2, DT]))


def toy_cfg(**kw):
    base = dict(horizon=2, block_length=1, Q=[1.0, 0.1], R=0.5, x_lo=[-1.0, -1.0], x_hi=[1.0, 0.95], u_lo=-1.0, u_hi=1.0, tol=1e-10)
    base.update(kw)
    return MpcConfig(**base)


def toy_cost_grid(x0, cfg, n=201):
    """Brute-force cost and feasibility over an n x n input grid."""
    u = np.linspace(cfg.u_lo, cfg.u_hi, n)
    U0, U1 = np.meshgrid(u, u, indexing="ij")
    A, B = TOY.A, TOY.B
    x1 = A @ x0
    X1 = x1[:, None, None] + B[:, None, None] * U0
    X2 = np.einsum("ij,jab->iab", A, X1) + B[:, None, None] * U1
    Q = cfg.Q
    cost = np.einsum("iab,ij,jab->ab", X1, Q, X1) + np.einsum("iab,ij,jab->ab", X2, Q, X2) + cfg.R * (U0**2 + U1**2)
    lo, hi = cfg.x_lo[:, None, None], cfg.x_hi[:, None, None]
    ok = np.all((X1 >= lo) & (X1 <= hi) & (X2 >= lo) & (X2 <= hi), axis=0)
    return np.where(ok, cost, np.inf), u


@pytest.mark.parametrize("x0", [[0.5, 0.9], [-0.2, 0.3], [0.8, 0.9], [-0.9, -0.5], [0.0, 0.0]])
def test_toy_matches_grid_oracle(x0):
    x0 = np.array(x0)
    cfg = toy_cfg()
    res = solve_mpc(x0, np.zeros(2), cfg, TOY)
    cost, u = toy_cost_grid(x0, cfg)
    assert res.feasible
    assert res.kkt_residual <= 1e-8
    i, j = np.unravel_index(np.argmin(cost), cost.shape)
    h = u[1] - u[0]
    assert abs(res.u_blocks[0] - u[i]) <= h and abs(res.u_blocks[1] - u[j]) <= h
    assert res.cost <= cost.min() + 1e-9


@pytest.mark.parametrize("x0", [[0.95, 0.94], [-0.99, -0.99]])
def test_toy_infeasible_state_is_flagged(x0):
    x0 = np.array(x0)
    cost, _ = toy_cost_grid(x0, toy_cfg())
    assert np.all(np.isinf(cost))
    assert not solve_mpc(x0, np.zeros(2), toy_cfg(), TOY).feasible


def test_toy_infeasible_is_flagged():
    cfg = toy_cfg(x_hi=[1.0, 0.95])
    res = solve_mpc(np.array([0.0, 0.95]), np.zeros(2), cfg.replace(u_lo=0.5, u_hi=1.0), TOY)
    cost, _ = toy_cost_grid(np.array([0.0, 0.95]), cfg.replace(u_lo=0.5, u_hi=1.0))
    assert np.all(np.isinf(cost))
    assert not res.feasible


def test_block_expansion_and_prediction(params, envelope, mpc_cfg, rng):
    x0 = rng.uniform(envelope.lo, envelope.hi) * 0.3
    model = linearize_model(x0, params)
    res = solve_mpc(x0, np.zeros(mpc_cfg.n_steps), mpc_cfg, model)
    assert res.u.shape == (mpc_cfg.n_steps,)
    np.testing.assert_array_equal(res.u[: mpc_cfg.block_length], res.u_blocks[0])
    x = x0.copy()
    for k in range(mpc_cfg.n_steps):
        x = model.step(x, res.u[k])
        if (k + 1) % mpc_cfg.block_length == 0:
            np.testing.assert_allclose(x, res.x_pred[(k + 1) // mpc_cfg.block_length - 1], atol=1e-10)


def test_domain_and_gust_errors(mpc_cfg, params):
    model = linearize_model(np.zeros(5), params)
    with pytest.raises(DomainError):
        solve_mpc(mpc_cfg.x_hi * 1.1, np.zeros(mpc_cfg.n_steps), mpc_cfg, model)
    with pytest.raises(DomainError):
        solve_mpc(np.full(5, np.nan), np.zeros(mpc_cfg.n_steps), mpc_cfg, model)
    with pytest.raises(ConfigurationError):
        solve_mpc(np.zeros(5), np.zeros(3), mpc_cfg, model)


@pytest.mark.parametrize("kw", [dict(horizon=1), dict(R=0.0), dict(x_hi=[-1.0, -1.0]), dict(Q=[-1.0, 0.0]), dict(u_hi=-2.0), dict(n_probe=1)])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        toy_cfg(**kw)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_box_qp_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    n, m = 4, 3
    L = rng.standard_normal((n, n))
    H = L @ L.T + 0.1 * np.eye(n)
    g = rng.standard_normal(n)
    G = rng.standard_normal((m, n))
    glo, ghi = -np.abs(rng.standard_normal(m)) - 0.1, np.abs(rng.standard_normal(m)) + 0.1
    U, y, kkt, _, ok = solve_box_qp(H, g, G, glo, ghi, -np.ones(n), np.ones(n), tol=1e-10)
    assert ok
    ref = minimize(
        lambda u: 0.5 * u @ H @ u + g @ u, np.zeros(n), jac=lambda u: H @ u + g,
        bounds=[(-1, 1)] * n, method="SLSQP", tol=1e-14,
        constraints=[{"type": "ineq", "fun": lambda u: G @ u - glo}, {"type": "ineq", "fun": lambda u: ghi - G @ u}],
    )
    f = lambda u: 0.5 * u @ H @ u + g @ u  # noqa: E731
    assert f(U) <= f(ref.x) + 1e-7
    np.testing.assert_allclose(U, ref.x, atol=1e-4)
    assert np.all(G @ U >= glo - 1e-9) and np.all(G @ U <= ghi + 1e-9)


def test_box_qp_unconstrained_closed_form():
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    g = np.array([-1.0, 0.3])
    U, *_ = solve_box_qp(H, g, tol=1e-12)
    np.testing.assert_allclose(U, np.linalg.solve(H, -g), atol=1e-10)


# -- safe bounds -------------------------------------------------------------


def _bounds_at(x0, params, mpc_cfg, d=0.0):
    return safe_bounds(x0, np.full(mpc_cfg.n_steps, d), mpc_cfg, params)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_safe_bounds_properties(seed):
    from mpcrl.config import load_config

    cfg = load_config()
    p, env, mc = cfg.params(), cfg.envelope(), cfg.mpc_config()
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(env.lo, env.hi) * 0.5
    d = float(rng.uniform(-1, 1))
    try:
        b = _bounds_at(x0, p, mc, d)
    except InfeasibleError:
        return
    assert mc.u_lo <= b.u_min <= b.u_star <= b.u_max <= mc.u_hi
    np.testing.assert_array_equal(b.x_traj_min[0], x0)
    assert np.all(b.x_traj_min <= b.x_traj_max)
    lo, hi = mc.x_lo + mc.margin, mc.x_hi - mc.margin
    scale = mc.half_width
    for u in np.linspace(b.u_min, b.u_max, 9):
        traj = _predict2(x0, u, d, p.packed, scale)
        assert np.all(traj[1:] >= lo - 1e-12) and np.all(traj[1:] <= hi + 1e-12)
    # maximality: stepping past a non-saturated end leaves the safe box
    step = 1e-6
    if b.u_max < mc.u_hi - step:
        traj = _predict2(x0, b.u_max + step, d, p.packed, scale)
        assert np.any(traj[1:] < lo) or np.any(traj[1:] > hi)
    if b.u_min > mc.u_lo + step:
        traj = _predict2(x0, b.u_min - step, d, p.packed, scale)
        assert np.any(traj[1:] < lo) or np.any(traj[1:] > hi)
    v = certify_and_shrink(x0, b, d, p, scale=scale)
    assert v.verified
    assert v.u_min <= v.u_star <= v.u_max


def test_certify_detects_bad_bounds(params, mpc_cfg):
    x0 = np.zeros(5)
    b = _bounds_at(x0, params, mpc_cfg)
    assert certify_bounding(x0, b, 0.0, params, scale=mpc_cfg.half_width)
    bad = SafeBounds(b.u_star, b.u_min, b.u_max, b.x_traj_min, b.x_traj_min.copy(), 0.0)
    bad.x_traj_max[2, 4] -= 1e-3
    assert not certify_bounding(x0, bad, 0.0, params, scale=mpc_cfg.half_width)
    flipped = SafeBounds(b.u_star, 0.1, -0.1, b.x_traj_min, b.x_traj_max, 0.0)
    assert not certify_bounding(x0, flipped, 0.0, params)


def test_certify_with_custom_predictor():
    """Quadratic-in-u predictor: endpoint bounding misses the interior minimum."""

    def predict(x0, u, d):
        return np.array([x0, x0 + u, x0 + u**2])

    x0 = np.zeros(1)
    tmin = np.minimum(predict(x0, -1, 0), predict(x0, 1, 0))
    tmax = np.maximum(predict(x0, -1, 0), predict(x0, 1, 0))
    b = SafeBounds(0.0, -1.0, 1.0, tmin, tmax, 0.0)
    assert not certify_bounding(x0, b, 0.0, predictor=predict)
    out = certify_and_shrink(x0, b, 0.0, predictor=predict)
    assert out.verified and out.u_min <= 0.0 <= out.u_max
    assert out.width < 1e-5


def test_infeasible_near_boundary(params, mpc_cfg):
    x0 = np.array([0.0, mpc_cfg.x_hi[1] * 0.999, 0.0, mpc_cfg.x_hi[3], 0.0])
    with pytest.raises(InfeasibleError):
        safe_bounds(x0, np.zeros(mpc_cfg.n_steps), mpc_cfg, params, u_star=0.0)


def test_predictor_shape(params):
    traj = plant_predictor(params)(np.zeros(5), 0.1, 0.0)
    assert traj.shape == (3, 5)


def test_jsonl_roundtrip(tmp_path, params, mpc_cfg):
    b = _bounds_at(np.zeros(5), params, mpc_cfg)
    b.pair_id, b.gust_seed = 3, 99
    path = tmp_path / "b.jsonl"
    write_bounds_jsonl(path, [b, b], header="config_hash=x")
    out = read_bounds_jsonl(path)
    assert len(out) == 2
    assert out[0].to_record() == b.to_record()


def test_equilibrium_gives_zero_inputs(params, mpc_cfg):
    res = solve_mpc(np.zeros(5), np.zeros(mpc_cfg.n_steps), mpc_cfg, linearize_model(np.zeros(5), params))
    assert res.feasible
    assert np.all(np.abs(res.u_blocks) <= 1e-12)


@pytest.mark.parametrize("x0", [[0.5, 0.9], [-0.2, 0.3], [0.8, -0.5]])
def test_heavier_input_weight_never_increases_first_input(x0):
    x0 = np.array(x0)
    u1 = solve_mpc(x0, np.zeros(2), toy_cfg(x_hi=[5.0, 5.0], x_lo=[-5.0, -5.0]), TOY).u0
    u2 = solve_mpc(x0, np.zeros(2), toy_cfg(x_hi=[5.0, 5.0], x_lo=[-5.0, -5.0], R=5.0), TOY).u0
    assert abs(u2) <= abs(u1) + 1e-12


def test_wide_box_admits_whole_actuator_range(params, mpc_cfg):
    wide = mpc_cfg.replace(x_lo=10 * mpc_cfg.x_lo, x_hi=10 * mpc_cfg.x_hi)
    b = safe_bounds(np.zeros(5), np.zeros(wide.n_steps), wide, params)
    assert (b.u_min, b.u_max) == (wide.u_lo, wide.u_hi)


def test_tube_box_pins_interval_to_centre(params, mpc_cfg):
    x0 = np.array([0.01, 0.02, 0.05, 0.3, 0.05])
    u_star, eps = 0.1, 1e-12
    traj = _predict2(x0, u_star, 0.0, params.packed, mpc_cfg.half_width)[1:]
    lo, hi = traj.min(axis=0) - eps, traj.max(axis=0) + eps
    tube = mpc_cfg.replace(x_lo=lo, x_hi=hi, margin_fraction=0.0)
    b = safe_bounds(x0, np.zeros(tube.n_steps), tube, params, u_star=u_star)
    assert b.u_min <= u_star <= b.u_max
    assert b.width < 1e-8


def test_shrinking_box_never_widens_interval(params, mpc_cfg, rng):
    for _ in range(10):
        x0 = rng.uniform(mpc_cfg.x_lo, mpc_cfg.x_hi) * 0.5
        try:
            wide = safe_bounds(x0, np.zeros(mpc_cfg.n_steps), mpc_cfg, params, u_star=0.0)
            tight = safe_bounds(x0, np.zeros(mpc_cfg.n_steps), mpc_cfg.replace(margin_fraction=0.2), params, u_star=0.0)
        except InfeasibleError:
            continue
        assert wide.u_min <= tight.u_min + 1e-9 and tight.u_max <= wide.u_max + 1e-9


def test_degenerate_interval_certifies(params, mpc_cfg):
    x0 = np.array([0.01, 0.0, 0.1, 0.0, 0.0])
    pred = plant_predictor(params, mpc_cfg.half_width)
    t = pred(x0, 0.05, 0.3)
    b = SafeBounds(0.05, 0.05, 0.05, t, t, 0.3)
    assert certify_bounding(x0, b, 0.3, params, scale=mpc_cfg.half_width)


def test_frozen_linear_plant_certifies_any_interval(params, rng):
    model = linearize_model(np.zeros(5), params)

    def predict(x0, u, d):
        x1 = model.step(x0, u)
        return np.array([x0, x1, model.step(x1, u)])

    for _ in range(10):
        x0 = rng.uniform(-0.02, 0.02, 5)
        a, c = np.sort(rng.uniform(-0.3, 0.3, 2))
        tmin = np.minimum(predict(x0, a, 0), predict(x0, c, 0))
        tmax = np.maximum(predict(x0, a, 0), predict(x0, c, 0))
        assert certify_bounding(x0, SafeBounds(a, a, c, tmin, tmax, 0.0), 0.0, predictor=predict)


def test_non_monotone_dynamics_fail_wide_intervals():
    def predict(x0, u, d):
        return np.array([x0, x0 + np.sin(10 * u), x0 + 2 * np.sin(10 * u)])

    x0 = np.zeros(1)
    for a, c in [(-0.3, 0.3), (0.0, 0.3), (-0.5, 0.0)]:
        tmin = np.minimum(predict(x0, a, 0), predict(x0, c, 0))
        tmax = np.maximum(predict(x0, a, 0), predict(x0, c, 0))
        assert not certify_bounding(x0, SafeBounds(a, a, c, tmin, tmax, 0.0), 0.0, predictor=predict)
    tmin = np.minimum(predict(x0, 0.0, 0), predict(x0, 0.1, 0))
    tmax = np.maximum(predict(x0, 0.0, 0), predict(x0, 0.1, 0))
    assert certify_bounding(x0, SafeBounds(0.0, 0.0, 0.1, tmin, tmax, 0.0), 0.0, predictor=predict)


def test_certified_bounds_ordered_inside_and_envelope_acceleration(params, mpc_cfg, rng):
    from mpcrl.plant import deriv, step_euler

    n = 0
    for _ in range(15):
        x0 = rng.uniform(mpc_cfg.x_lo, mpc_cfg.x_hi) * 0.5
        d = float(rng.uniform(-1, 1))
        try:
            b = certify_and_shrink(x0, _bounds_at(x0, params, mpc_cfg, d), d, params, scale=mpc_cfg.half_width)
        except InfeasibleError:
            continue
        n += 1
        assert np.all(b.x_traj_min <= b.x_traj_max)
        assert np.all(b.x_traj_min[1:] >= mpc_cfg.x_lo) and np.all(b.x_traj_max[1:] <= mpc_cfg.x_hi)
        acc = lambda u: deriv(step_euler(x0, u, d, params), u, d, params)[2:4]  # noqa: E731
        a_lo, a_hi = np.minimum(acc(b.u_min), acc(b.u_max)), np.maximum(acc(b.u_min), acc(b.u_max))
        for u in np.linspace(b.u_min, b.u_max, 9):
            a = acc(u)
            assert np.all(a >= a_lo - 1e-9) and np.all(a <= a_hi + 1e-9)
    assert n >= 5
