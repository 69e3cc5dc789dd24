"""Tabular Q-learning over certified safe action intervals.

Each training pair is an initial state and a disturbance realization.  The
environment is deterministic, so every action of a pair is evaluated once
by an explicit rollout; long-term value is bootstrapped from the greedy
value of the nearest visited cell of the rollout's end state.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_state, check_states
from .exceptions import ConfigurationError, DomainError, InfeasibleError, ScheduleError
from .plant import _step_euler as _euler

__all__ = [
    "LookupMiss",
    "QConfig",
    "QLearningPolicy",
    "QTable",
    "RewardConfig",
    "StateGrid",
    "evaluate_action",
    "greedy_index",
    "policy",
    "sample_initial_states",
    "train",
]

NEG_INF = -np.inf


class LookupMiss(KeyError):
    """State falls in a cell that holds no Q row."""


class StateGrid:
    """Uniform per-dimension binning of the state box.

    Parameters
    ----------
    lo, hi : array_like (5,)
        Box covered exactly by the bins.
    bins : int or sequence of int
        Bins per dimension.
    """

    def __init__(self, lo, hi, bins=7):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if self.lo.shape != (5,) or self.hi.shape != (5,) or np.any(self.hi <= self.lo):
            raise ConfigurationError("grid box must be 5-dimensional and non-degenerate")
        self.bins = np.broadcast_to(np.asarray(bins, dtype=int), (5,)).copy()
        if np.any(self.bins < 1):
            raise ConfigurationError("bins must be >= 1")
        self.width = (self.hi - self.lo) / self.bins
        self.edges = [np.linspace(l, h, b + 1) for l, h, b in zip(self.lo, self.hi, self.bins)]

    @classmethod
    def from_envelope(cls, envelope, bins=7):
        return cls(envelope.lo, envelope.hi, bins)

    @property
    def n_cells(self):
        return int(np.prod(self.bins))

    def multi_index(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.floor((x - self.lo) / self.width).astype(int)
        return np.clip(idx, 0, self.bins - 1)

    def cell_index(self, x):
        """Flat (C-order) cell index; states outside the box map to the edge cell."""
        mi = self.multi_index(x)
        return np.ravel_multi_index(tuple(np.moveaxis(mi, -1, 0)), tuple(self.bins))

    def cell_center(self, index):
        mi = np.stack(np.unravel_index(np.asarray(index), tuple(self.bins)), axis=-1)
        return self.lo + (mi + 0.5) * self.width

    def half_diagonal(self, weights=None):
        """Cell half-diagonal under ``||v||_W = sqrt(sum w_i v_i**2)``."""
        w = np.ones(5) if weights is None else np.asarray(weights, dtype=float)
        return float(np.sqrt(np.sum(w * (0.5 * self.width) ** 2)))

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "bins": self.bins.tolist()}


@dataclass(frozen=True)
class RewardConfig:
    """Quadratic reward ``-sum_k (x_k' Q_r x_k + R_r u**2)`` over a rollout.

    ``Q_r`` may be given as a diagonal (5,) or a full (5, 5) PSD matrix.
    """

    Q_r: np.ndarray
    R_r: float
    rollout_length: int = 50

    def __post_init__(self):
        Q = np.asarray(self.Q_r, dtype=float)
        if Q.ndim == 1:
            Q = np.diag(Q)
        if Q.shape != (5, 5) or not np.allclose(Q, Q.T):
            raise ConfigurationError("Q_r must be a symmetric 5x5 matrix")
        if np.linalg.eigvalsh(Q).min() < -1e-12 * max(1.0, np.abs(Q).max()):
            raise ConfigurationError("Q_r must be positive semidefinite")
        if not (np.isfinite(self.R_r) and self.R_r >= 0):
            raise ConfigurationError("R_r must be >= 0")
        if self.rollout_length < 1:
            raise ConfigurationError("rollout_length must be >= 1")
        Q = np.ascontiguousarray(Q)
        Q.setflags(write=False)
        object.__setattr__(self, "Q_r", Q)
        object.__setattr__(self, "R_r", float(self.R_r))

    @classmethod
    def from_envelope(cls, envelope, input_weight=0.1, rollout_length=50):
        """Weights normalised by the box half-widths."""
        cu = 0.5 * (envelope.input_hi - envelope.input_lo)
        return cls(envelope.weights, input_weight / cu**2, rollout_length)


@dataclass(frozen=True)
class QConfig:
    n_actions: int = 15
    gamma: float = 0.9
    n_sweeps: int = 400
    tol: float = 1e-9

    def __post_init__(self):
        if self.n_actions < 1:
            raise ConfigurationError("n_actions must be >= 1")
        if not 0 <= self.gamma < 1:
            raise ConfigurationError("gamma must lie in [0, 1)")
        if self.n_sweeps < 1:
            raise ConfigurationError("n_sweeps must be >= 1")


def sample_initial_states(grid: StateGrid, n_per_dim, span=1.0):
    """Tensor-product grid over ``(h, theta, v_h, v_theta)`` with ``beta_f = 0``.

    Parameters
    ----------
    grid : StateGrid
    n_per_dim : int
        Points per dimension (>= 2); ``span = 1`` puts the extremes on the
        box faces, ``span = (n - 1) / n`` on the centres of an ``n``-bin grid.
    span : float
        Fraction of each half-width covered.

    Returns
    -------
    ndarray (n_per_dim**4, 5)
        C-ordered (last dimension fastest).
    """
    if n_per_dim < 2:
        raise ConfigurationError("n_per_dim must be >= 2")
    if not 0 < span <= 1:
        raise ConfigurationError("span must lie in (0, 1]")
    c = 0.5 * (grid.lo + grid.hi)
    hw = 0.5 * (grid.hi - grid.lo) * span
    axes = [np.linspace(c[i] - hw[i], c[i] + hw[i], n_per_dim) for i in range(4)]
    pts = np.array(list(itertools.product(*axes)), dtype=float)
    beta = np.zeros((pts.shape[0], 1)) if grid.lo[4] <= 0 <= grid.hi[4] else np.full((pts.shape[0], 1), c[4])
    return np.hstack([pts, beta])


# --------------------------------------------------------------------------
# deterministic micro-environment
# --------------------------------------------------------------------------


@njit(cache=True)
def _rollout_reward_impl(x0, u, gust, L, pv, Q, R, lo, hi):
    x = x0.copy()
    total = 0.0
    for k in range(L):
        w = gust[k] if k < gust.shape[0] else 0.0
        x = _euler(x, u, w, pv)
        for i in range(5):
            if x[i] < lo[i] or x[i] > hi[i]:
                return NEG_INF, x, k + 1
        q = 0.0
        for i in range(5):
            for j in range(5):
                q += x[i] * Q[i, j] * x[j]
        total -= q + R * u * u
    return total, x, 0


@njit(cache=True)
def _evaluate_grid(x0, actions, gust, L, pv, Q, R, lo, hi):
    n = actions.shape[0]
    rewards = np.empty(n)
    ends = np.empty((n, 5))
    viol = np.zeros(n, dtype=np.int64)
    for a in range(n):
        r, xe, v = _rollout_reward_impl(x0, actions[a], gust, L, pv, Q, R, lo, hi)
        rewards[a] = r
        ends[a] = xe
        viol[a] = v
    return rewards, ends, viol


def _box(envelope):
    if envelope is None:
        return np.full(5, -np.inf), np.full(5, np.inf)
    return envelope.lo, envelope.hi


def evaluate_action(x0, gust, u, reward_cfg: RewardConfig, p, envelope=None, return_end=False):
    """Reward of holding the commanded input ``u`` from ``x0``.

    Parameters
    ----------
    x0 : array_like (5,)
    gust : array_like or GustProfile
        Disturbance samples for the rollout (zero past its end).
    u : float
    reward_cfg : RewardConfig
    p : PlantParams
    envelope : Envelope, optional
        State box; leaving it ends the rollout with reward ``-inf``.
    return_end : bool
        Also return the final state and the step of the first violation
        (0 when none).

    Returns
    -------
    float or (float, ndarray, int)
    """
    x0 = check_state(x0, "x0")
    g = np.ascontiguousarray(np.asarray(getattr(gust, "samples", gust), dtype=float))
    lo, hi = _box(envelope)
    p.check_actuator()
    r, xe, v = _rollout_reward_impl(
        x0, float(u), g, reward_cfg.rollout_length, p.packed, reward_cfg.Q_r, reward_cfg.R_r, lo, hi
    )
    return (float(r), xe, int(v)) if return_end else float(r)


def evaluate_actions(x0, gust, actions, reward_cfg, p, envelope=None):
    """Vectorised :func:`evaluate_action` over an action grid."""
    g = np.ascontiguousarray(np.asarray(getattr(gust, "samples", gust), dtype=float))
    lo, hi = _box(envelope)
    return _evaluate_grid(
        np.asarray(x0, dtype=float), np.ascontiguousarray(actions, dtype=float), g,
        reward_cfg.rollout_length, p.packed, reward_cfg.Q_r, reward_cfg.R_r, lo, hi,
    )


# --------------------------------------------------------------------------
# Q-table
# --------------------------------------------------------------------------


def greedy_index(values, actions):
    """Argmax with ties broken toward the smallest ``|u|`` (then lowest index)."""
    values = np.asarray(values, dtype=float)
    best = np.max(values)
    if not np.isfinite(best):
        raise LookupMiss("no admissible action in this row")
    ties = np.flatnonzero(values == best)
    return int(ties[np.argmin(np.abs(np.asarray(actions)[ties]))])


@dataclass
class QTable:
    """Q rows for visited cells.

    Attributes
    ----------
    grid : StateGrid
    cells : ndarray (n,)
        Flat cell indices with a row.
    actions : ndarray (n, n_a)
        Per-cell action grid inside the certified bounds of every pair that
        contributed to the row.
    values : ndarray (n, n_a)
    visits : ndarray (n, n_a)
        Number of pair evaluations folded into each entry.
    """

    grid: StateGrid
    cells: np.ndarray
    actions: np.ndarray
    values: np.ndarray
    visits: np.ndarray
    gamma: float = 0.0
    _row: dict = field(default=None, init=False, repr=False)
    _tree: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int64)
        self._row = {int(c): i for i, c in enumerate(self.cells)}
        if len(self.cells):
            centers = self.grid.cell_center(self.cells)
            self._tree = cKDTree((centers - self.grid.lo) / self.grid.width)

    def __len__(self):
        return len(self.cells)

    def __contains__(self, cell):
        return int(cell) in self._row

    def row(self, cell):
        try:
            return self._row[int(cell)]
        except KeyError:
            raise LookupMiss(f"cell {int(cell)} was never visited") from None

    def nearest_row(self, x):
        """Row of the visited cell whose centre is nearest in grid units."""
        if self._tree is None:
            raise LookupMiss("empty Q-table")
        cell = int(self.grid.cell_index(x))
        if cell in self._row:
            return self._row[cell]
        z = (np.asarray(x, dtype=float) - self.grid.lo) / self.grid.width
        return int(self._tree.query(z)[1])

    def nearest_rows(self, X):
        """Vectorised :meth:`nearest_row`."""
        if self._tree is None:
            raise LookupMiss("empty Q-table")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cells = self.grid.cell_index(X)
        pos = np.searchsorted(self.cells, cells)
        pos_c = np.minimum(pos, len(self.cells) - 1)
        hit = self.cells[pos_c] == cells if np.all(np.diff(self.cells) > 0) else np.zeros(len(cells), bool)
        out = np.empty(len(cells), dtype=np.int64)
        out[hit] = pos_c[hit]
        if not hit.all():
            z = (X[~hit] - self.grid.lo) / self.grid.width
            out[~hit] = self._tree.query(z)[1]
        return out

    def greedy(self, row):
        a = greedy_index(self.values[row], self.actions[row])
        return a, float(self.actions[row, a])

    def value(self, row):
        v = self.values[row]
        fin = v[np.isfinite(v)]
        return float(fin.max()) if fin.size else NEG_INF

    def to_json(self, path, header=None):
        doc = {
            "grid": self.grid.to_dict(),
            "gamma": self.gamma,
            "cells": self.cells.tolist(),
            "actions": self.actions.tolist(),
            "values": [[v if np.isfinite(v) else None for v in row] for row in self.values.tolist()],
            "visits": self.visits.tolist(),
        }
        if header:
            doc = {"config_hash": header, **doc}
        with open(path, "w") as fh:
            json.dump(doc, fh)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        g = doc["grid"]
        vals = np.array([[NEG_INF if v is None else v for v in row] for row in doc["values"]], dtype=float)
        n_a = vals.shape[1] if vals.size else 0
        return cls(
            StateGrid(g["lo"], g["hi"], g["bins"]),
            np.array(doc["cells"], dtype=np.int64),
            np.array(doc["actions"], dtype=float).reshape(-1, n_a),
            vals.reshape(-1, n_a),
            np.array(doc["visits"], dtype=np.int64).reshape(-1, n_a),
            doc.get("gamma", 0.0),
        )


def policy(x, qtable: QTable, bounds_db=None, nearest=False):
    """Greedy action of the cell containing ``x``.

    Parameters
    ----------
    x : array_like (5,)
    qtable : QTable
    bounds_db : unused
        Accepted for interface symmetry; the action grids stored in the
        table already lie inside the certified bounds.
    nearest : bool
        Fall back to the nearest visited cell instead of raising.

    Raises
    ------
    LookupMiss
        When the cell was never visited and ``nearest`` is false.
    """
    x = check_state(x)
    row = qtable.nearest_row(x) if nearest else qtable.row(qtable.grid.cell_index(x))
    return qtable.greedy(row)[1]


@dataclass
class TrainingResult:
    qtable: QTable
    log: list
    sweep_changes: list
    dropped: list
    rollout_violations: int
    pair_actions: dict


def _intersect(intervals):
    """Largest compatible subset of intervals (greedy) and its intersection."""
    order = sorted(range(len(intervals)), key=lambda i: intervals[i][1] - intervals[i][0])
    lo, hi = -np.inf, np.inf
    kept, dropped = [], []
    for i in order:
        a, b = intervals[i]
        if max(lo, a) <= min(hi, b):
            lo, hi = max(lo, a), min(hi, b)
            kept.append(i)
        else:
            dropped.append(i)
    return lo, hi, sorted(kept), dropped


def train(pairs, bounds, reward_cfg: RewardConfig, qcfg: QConfig, p, grid: StateGrid, envelope=None):
    """Constrained tabular Q-learning over certified training pairs.

    Parameters
    ----------
    pairs : sequence of (x0, gust)
        Initial states and disturbance realizations.
    bounds : sequence of SafeBounds or (u_min, u_max)
        Certified control interval of each pair.
    reward_cfg : RewardConfig
    qcfg : QConfig
    p : PlantParams
    grid : StateGrid
    envelope : Envelope, optional
        State box enforced during reward rollouts.

    Returns
    -------
    TrainingResult
        ``qtable``; ``log`` rows ``(pair_id, best_index, best_action,
        best_reward)``; ``sweep_changes`` max |dQ| per sweep; pairs dropped
        because their interval did not intersect the rest of their cell.

    Notes
    -----
    Pairs are grouped by the cell of their initial state.  A cell's action
    grid spans the intersection of its pairs' intervals with
    ``n_actions`` levels, so every stored action is certified for every
    contributing pair.  The update is a synchronous sweep::

        Q(c, a) <- mean_pairs [ r(pair, a) + gamma * V(next(pair, a)) ]

    i.e. learning rate one applied to the pair average, with ``V`` the
    greedy value of the nearest visited cell of the rollout end state.
    """
    if len(pairs) != len(bounds):
        raise ConfigurationError("pairs and bounds differ in length")
    intervals = []
    for b in bounds:
        if hasattr(b, "u_min"):
            if getattr(b, "verified", True) is False:
                raise ConfigurationError("every training pair must be certified")
            intervals.append((float(b.u_min), float(b.u_max)))
        else:
            intervals.append((float(b[0]), float(b[1])))
    states = check_states([np.asarray(x0, dtype=float) for x0, _ in pairs], "pair states")
    cells_of_pair = grid.cell_index(states)
    groups = {}
    for i, c in enumerate(cells_of_pair.tolist()):
        groups.setdefault(c, []).append(i)
    n_a = qcfg.n_actions
    cell_ids = sorted(groups)
    actions = {}
    members = {}
    dropped = []
    for c in cell_ids:
        idx = groups[c]
        lo, hi, kept, drop = _intersect([intervals[i] for i in idx])
        dropped.extend(idx[j] for j in drop)
        members[c] = [idx[j] for j in kept]
        actions[c] = np.linspace(lo, hi, n_a) if n_a > 1 else np.array([0.5 * (lo + hi)])
    rewards = {}
    ends = {}
    n_viol = 0
    for c in cell_ids:
        for i in members[c]:
            r, e, v = evaluate_actions(states[i], pairs[i][1], actions[c], reward_cfg, p, envelope)
            rewards[i], ends[i] = r, e
            n_viol += int(np.count_nonzero(v))
    # rows whose every action violates the box during the rollout are unusable
    row_cells = []
    for c in cell_ids:
        imm = np.mean([rewards[i] for i in members[c]], axis=0)
        if np.any(np.isfinite(imm)):
            row_cells.append(c)
    row_cells = np.array(row_cells, dtype=np.int64)
    n_rows = len(row_cells)
    row_of = {int(c): k for k, c in enumerate(row_cells)}
    act = np.array([actions[c] for c in row_cells]).reshape(n_rows, n_a)
    visits = np.zeros((n_rows, n_a), dtype=np.int64)
    imm = np.zeros((n_rows, n_a))
    for k, c in enumerate(row_cells):
        imm[k] = np.mean([rewards[i] for i in members[c]], axis=0)
        visits[k] = len(members[c])
    q = QTable(grid, row_cells, act, imm.copy(), visits, qcfg.gamma)
    # successor rows for bootstrapping: (row, pair, action) -> row
    nxt = {}
    for k, c in enumerate(row_cells):
        for i in members[c]:
            nxt[(k, i)] = q.nearest_rows(ends[i])
    changes = []
    values = imm.copy()
    if qcfg.gamma > 0 and n_rows:
        for _ in range(qcfg.n_sweeps):
            V = np.array([_finite_max(values[k]) for k in range(n_rows)])
            new = np.empty_like(values)
            for k, c in enumerate(row_cells):
                acc = np.zeros(n_a)
                for i in members[c]:
                    acc += rewards[i] + qcfg.gamma * V[nxt[(k, i)]]
                new[k] = acc / len(members[c])
            fin = np.isfinite(new) & np.isfinite(values)
            delta = float(np.max(np.abs(new[fin] - values[fin]))) if fin.any() else 0.0
            values = new
            changes.append(delta)
            if delta < qcfg.tol:
                break
    q.values = values
    log = []
    pair_actions = {}
    for k, c in enumerate(row_cells):
        a_best, u_best = q.greedy(k)
        for i in members[c]:
            log.append((i, a_best, u_best, float(rewards[i][a_best])))
            pair_actions[i] = (a_best, u_best)
    log.sort()
    return TrainingResult(q, log, changes, sorted(dropped), n_viol, pair_actions)


def _finite_max(v):
    fin = v[np.isfinite(v)]
    return fin.max() if fin.size else NEG_INF


def write_train_log(path, log, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["pair_id", "best_index", "best_action", "best_reward"])
        for pid, a, u, r in log:
            w.writerow([pid, a, repr(u), repr(r)])


# --------------------------------------------------------------------------
# estimator facade
# --------------------------------------------------------------------------


class QLearningPolicy(BaseEstimator):
    """Safe tabular Q-learning policy, sklearn style.

    ``fit`` runs the full offline pipeline on a set of initial states:
    representative gust ensembles, MPC safe bounds with certification (or
    the whole actuator box when ``use_mpc_bounds`` is false) and
    constrained Q-learning.  ``predict`` returns greedy actions.

    Parameters
    ----------
    params : PlantParams
    envelope : Envelope
    mpc_config : MpcConfig, optional
        Defaults to :meth:`MpcConfig.from_envelope`.
    reward_config : RewardConfig, optional
    gust_config : GustConfig, optional
    bins : int
        Grid bins per dimension.
    n_actions, gamma, n_sweeps, tol
        See :class:`QConfig`.
    use_mpc_bounds : bool
    nearest : bool
        ``predict`` falls back to the nearest visited cell.
    base_seed : int
        Mixed into every gust seed.
    """

    def __init__(
        self,
        params=None,
        envelope=None,
        mpc_config=None,
        reward_config=None,
        gust_config=None,
        bins=7,
        n_actions=15,
        gamma=0.9,
        n_sweeps=400,
        tol=1e-9,
        use_mpc_bounds=True,
        nearest=True,
        base_seed=0,
    ):
        self.params = params
        self.envelope = envelope
        self.mpc_config = mpc_config
        self.reward_config = reward_config
        self.gust_config = gust_config
        self.bins = bins
        self.n_actions = n_actions
        self.gamma = gamma
        self.n_sweeps = n_sweeps
        self.tol = tol
        self.use_mpc_bounds = use_mpc_bounds
        self.nearest = nearest
        self.base_seed = base_seed

    def _configs(self):
        from .gust import GustConfig
        from .mpc import MpcConfig

        if self.params is None or self.envelope is None:
            raise ConfigurationError("params and envelope are required")
        mpc_cfg = self.mpc_config or MpcConfig.from_envelope(self.envelope)
        rew = self.reward_config or RewardConfig.from_envelope(self.envelope)
        gcfg = self.gust_config or GustConfig()
        qcfg = QConfig(self.n_actions, self.gamma, self.n_sweeps, self.tol)
        return mpc_cfg, rew, gcfg, qcfg

    def fit(self, X, y=None):
        """Train on initial states ``X`` of shape (n, 5)."""
        X = check_states(X)
        mpc_cfg, rew, gcfg, qcfg = self._configs()
        self.grid_ = StateGrid.from_envelope(self.envelope, self.bins)
        pairs, bounds, excluded = build_pairs(
            X, self.params, self.envelope, mpc_cfg, gcfg, rew, self.use_mpc_bounds, self.base_seed
        )
        self.pairs_ = pairs
        self.bounds_ = bounds
        self.excluded_ = excluded
        if not pairs:
            raise InfeasibleError("no certified training pair")
        res = train(pairs, bounds, rew, qcfg, self.params, self.grid_, self.envelope)
        self.qtable_ = res.qtable
        self.training_ = res
        return self

    def predict(self, X):
        check_is_fitted(self, "qtable_")
        X = check_states(np.atleast_2d(X))
        return np.array([policy(x, self.qtable_, nearest=self.nearest) for x in X])


def pair_gust_duration(mpc_cfg, reward_cfg, T):
    return max(mpc_cfg.n_steps, reward_cfg.rollout_length) * T


def build_pairs(X, p, envelope, mpc_cfg, gust_cfg, reward_cfg, use_mpc_bounds=True, base_seed=0, n_realizations=None):
    """Gust ensembles, safe bounds and certification for each initial state.

    Returns
    -------
    pairs : list of (x0, GustProfile)
    bounds : list of SafeBounds
    excluded : list of (state_index, realization_index, reason)
    """
    from .gust import training_ensemble
    from .lpv import linearize_model
    from .mpc import SafeBounds, certify_and_shrink, plant_predictor, safe_bounds, solve_mpc

    n_real = gust_cfg.n_realizations if n_realizations is None else n_realizations
    duration = pair_gust_duration(mpc_cfg, reward_cfg, p.sample_time)
    pairs, bounds, excluded = [], [], []
    scale = mpc_cfg.half_width
    predict = plant_predictor(p, scale)
    for s, x0 in enumerate(X):
        ens = training_ensemble(x0, n_real, gust_cfg, p.airspeed, p.sample_time, duration, base_seed)
        model = linearize_model(x0, p) if use_mpc_bounds else None
        for r, g in enumerate(ens):
            try:
                if use_mpc_bounds:
                    res = solve_mpc(x0, g.samples, mpc_cfg, model)
                    b = safe_bounds(x0, g, mpc_cfg, p, mpc_result=res)
                    b = certify_and_shrink(x0, b, g, p, n_probe=mpc_cfg.n_probe, scale=scale)
                else:
                    lo_u, hi_u = mpc_cfg.u_lo, mpc_cfg.u_hi
                    d = float(g.samples[0])
                    t1, t2 = predict(x0, lo_u, d), predict(x0, hi_u, d)
                    b = SafeBounds(0.0, lo_u, hi_u, np.minimum(t1, t2), np.maximum(t1, t2), d, True, x0.copy(), g.seed)
            except (InfeasibleError, DomainError, ScheduleError) as exc:
                excluded.append((s, r, str(exc)))
                continue
            b.pair_id = len(pairs)
            b.gust_seed = g.seed
            pairs.append((x0, g))
            bounds.append(b)
    return pairs, bounds, excluded
