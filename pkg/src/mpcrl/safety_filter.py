"""Deployment-time Lipschitz safety filter.

For the current state the filter looks up verified transitions
``(x_bar, u_bar, x_plus)`` nearby, interpolates a candidate input by
inverse-distance weighting, bounds the deviation of the next state from
each neighbour's verified successor with local Lipschitz constants and
accepts the input only when every deviation fits inside the neighbour's
margin to the merged safe set.  Otherwise it falls back to holding the
actuator or to local retraining.

Deviation bound
---------------
With ``dx = x - x_bar``, ``du = u - u_bar``, ``c_i`` the normalisation
constants (``W = diag(1 / c_i**2)``), ``T' = n_bar T`` and ``dw`` a bound on
the gust mismatch ``|w - d_bar|``, the default *coupled* bound is::

    delta_i = |dx_i| + T' c_i (sum_j Lx_j |dx_j| + Lu |du| + Lw dw)

It follows from ``x_i(k+1) - x_plus_i = dx_i + T (f_i(x, u, w) - f_i(x_bar, u_bar, d_bar))``
and ``|v_i| <= c_i ||v||_W``.  The *componentwise* mode keeps only the
``i``-th state difference and no gust term::

    delta_i = (1 + T' Lx_i) |dx_i| + T' Lu |du|

which coincides with the coupled bound when only component ``i`` differs,
``W = I`` and the gust is matched, but is not a valid bound in general.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_state
from .exceptions import ConfigurationError, DomainError, InfeasibleError, ScheduleError
from .plant import _deriv, _step_euler

__all__ = [
    "FallbackContext",
    "FilterConfig",
    "LipschitzEstimates",
    "SafetyFilter",
    "Transition",
    "TransitionDb",
    "certify",
    "deviation_bound",
    "estimate_lipschitz",
    "fallback",
    "interpolate",
    "query_neighbors",
]

VERDICT_SAFE = "safe"
VERDICT_UNSAFE = "unsafe"
VERDICT_NO_NEIGHBORS = "no_neighbors"


@dataclass(frozen=True)
class FilterConfig:
    """Filter settings.

    Parameters
    ----------
    k : int
        Maximum number of neighbours.
    r_max : float
        Neighbourhood radius under the weighted norm.
    epsilon : float
        Regulariser of the inverse-distance weights.
    h_u, h_x : float
        Lipschitz probe sizes; ``h_x`` is relative to ``c_i``.
    mode : {"coupled", "componentwise"}
    delay_steps : int
        ``n_bar``; the sample time in the bound is multiplied by it.
    retrain : bool
        Enable local retraining as the second fallback tier.
    """

    k: int = 4
    r_max: float = 0.16
    epsilon: float = 1e-9
    h_u: float = 1e-4
    h_x: float = 1e-4
    mode: str = "coupled"
    delay_steps: int = 1
    retrain: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if not self.r_max > 0:
            raise ConfigurationError("r_max must be positive")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if self.mode not in ("coupled", "componentwise"):
            raise ConfigurationError(f"unknown bound mode {self.mode!r}")
        if self.delay_steps < 1:
            raise ConfigurationError("delay_steps must be >= 1")
        if not (self.h_u > 0 and self.h_x > 0):
            raise ConfigurationError("probe sizes must be positive")


@dataclass(frozen=True)
class Transition:
    """Verified transition ``(x_bar, u_bar, x_plus)`` with margins ``delta_bar``."""

    x_bar: np.ndarray
    u_bar: float
    x_plus: np.ndarray
    margin_bar: np.ndarray
    d_bar: float = 0.0
    gust_seed: int | None = None
    pair_id: int | None = None

    def to_record(self):
        return {
            "x_bar": np.asarray(self.x_bar).tolist(),
            "u_bar": float(self.u_bar),
            "x_plus": np.asarray(self.x_plus).tolist(),
            "margin_bar": np.asarray(self.margin_bar).tolist(),
            "d_bar": float(self.d_bar),
            "gust_seed": self.gust_seed,
            "pair_id": self.pair_id,
        }


def margins_to_box(x_plus, lo, hi):
    """Per-component distance of ``x_plus`` to the faces of ``[lo, hi]``."""
    x_plus = np.asarray(x_plus, dtype=float)
    return np.minimum(x_plus - lo, hi - x_plus)


class TransitionDb:
    """Transition database with a weighted-norm spatial index.

    Parameters
    ----------
    weights : array_like (5,)
        Diagonal of ``W``.
    safe_lo, safe_hi : array_like (5,)
        Merged safe set (a box).
    k, r_max : neighbourhood rule: at most ``k`` nearest, none beyond ``r_max``.

    Notes
    -----
    Transitions given at construction form an immutable base indexed by a
    k-d tree; :meth:`insert` appends to an overlay that is scanned linearly.
    :meth:`fork` returns a database sharing the base with an empty overlay,
    so concurrent episodes never see each other's insertions.
    """

    def __init__(self, transitions, weights, safe_lo, safe_hi, k=4, r_max=np.inf):
        self.weights = np.asarray(weights, dtype=float)
        if self.weights.shape != (5,) or np.any(self.weights <= 0):
            raise ConfigurationError("weights must be 5 positive numbers")
        self.sqrt_w = np.sqrt(self.weights)
        self.safe_lo = np.asarray(safe_lo, dtype=float)
        self.safe_hi = np.asarray(safe_hi, dtype=float)
        self.k = int(k)
        self.r_max = float(r_max)
        self._base = _pack(transitions)
        self._tree = cKDTree(self._base["x_bar"] * self.sqrt_w) if len(self._base["u_bar"]) else None
        self._over = _pack([])
        self._rows = _float_rows(self._base)

    def __len__(self):
        return self._rows.shape[0]

    @property
    def n_base(self):
        return len(self._base["u_bar"])

    @property
    def n_overlay(self):
        return len(self._over["u_bar"])

    def fork(self):
        new = object.__new__(TransitionDb)
        new.__dict__.update(self.__dict__)
        new._over = _pack([])
        new._rows = _float_rows(self._base)
        return new

    def field(self, name, idx):
        idx = np.asarray(idx, dtype=np.int64)
        if name in _COLS:
            return self._rows[idx, _COLS[name]]
        nb = self.n_base
        out = np.empty(len(idx), dtype=object)
        for j, i in enumerate(idx):
            out[j] = self._base[name][i] if i < nb else self._over[name][i - nb]
        return out

    def transition(self, i):
        nb = self.n_base
        src, j = (self._base, i) if i < nb else (self._over, i - nb)
        return Transition(
            src["x_bar"][j].copy(), float(src["u_bar"][j]), src["x_plus"][j].copy(),
            src["margin"][j].copy(), float(src["d_bar"][j]), src["seed"][j], src["pair"][j],
        )

    def insert(self, transitions):
        add = _pack(transitions)
        for key in self._over:
            self._over[key] = np.concatenate([self._over[key], add[key]])
        self._rows = np.vstack([self._rows, _float_rows(add)])

    @staticmethod
    def _kseq(kk):
        # a list of ranks always returns arrays, also for a single neighbour
        return list(range(1, kk + 1))

    def query(self, x, k=None, r_max=None):
        """Indices and weighted distances of the neighbourhood of ``x``.

        Returns at most ``k`` transitions, nearest first, all within
        ``r_max``; ties are ordered by index.
        """
        k = self.k if k is None else k
        r = self.r_max if r_max is None else r_max
        x = np.asarray(x, dtype=float)
        cand = []
        if self._tree is not None:
            kk = min(k, self.n_base)
            ub = r * (1 + 1e-9) if r < np.inf else np.inf
            d, i = self._tree.query(x * self.sqrt_w, k=self._kseq(kk), distance_upper_bound=ub)
            i = np.asarray(i).ravel()
            cand.append(i[i < self.n_base])
        if self.n_overlay:
            cand.append(np.arange(self.n_base, len(self)))
        if not cand:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        idx = cand[0] if len(cand) == 1 else np.concatenate(cand)
        return _rank(idx.astype(np.int64), self._rows, x, self.weights, float(r), int(k))

    def to_jsonl(self, path, header=None):
        with open(path, "w") as fh:
            if header:
                fh.write(f"# {header}\n")
            meta = {
                "meta": {
                    "weights": self.weights.tolist(), "safe_lo": self.safe_lo.tolist(),
                    "safe_hi": self.safe_hi.tolist(), "k": self.k, "r_max": self.r_max,
                }
            }
            fh.write(json.dumps(meta) + "\n")
            for i in range(len(self)):
                fh.write(json.dumps(self.transition(i).to_record()) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        meta = None
        trans = []
        with open(path) as fh:
            for line in fh:
                if line.startswith("#") or not line.strip():
                    continue
                rec = json.loads(line)
                if "meta" in rec:
                    meta = rec["meta"]
                    continue
                trans.append(Transition(
                    np.array(rec["x_bar"]), rec["u_bar"], np.array(rec["x_plus"]),
                    np.array(rec["margin_bar"]), rec["d_bar"], rec["gust_seed"], rec["pair_id"],
                ))
        if meta is None:
            raise ConfigurationError(f"{path}: missing metadata record")
        return cls(trans, meta["weights"], meta["safe_lo"], meta["safe_hi"], meta["k"], meta["r_max"])


@njit(cache=True)
def _rank(idx, rows, x, w, r, k):
    # exact distances give an order independent of the tree internals
    m = idx.shape[0]
    dist = np.empty(m)
    for j in range(m):
        s = 0.0
        for q in range(x.shape[0]):
            d = rows[idx[j], q] - x[q]
            s += w[q] * d * d
        dist[j] = np.sqrt(s)
    keep = np.zeros(m, dtype=np.bool_)
    for j in range(m):
        keep[j] = dist[j] <= r
    idx = idx[keep]
    dist = dist[keep]
    # stable sort by distance after sorting by index breaks ties by index
    o1 = np.argsort(idx, kind="mergesort")
    idx = idx[o1]
    dist = dist[o1]
    o2 = np.argsort(dist, kind="mergesort")[:k]
    return idx[o2], dist[o2]


_COLS = {"x_bar": slice(0, 5), "u_bar": 5, "x_plus": slice(6, 11), "margin": slice(11, 16), "d_bar": 16}


def _float_rows(packed):
    return np.hstack([
        packed["x_bar"], packed["u_bar"][:, None], packed["x_plus"], packed["margin"], packed["d_bar"][:, None],
    ])


def _pack(transitions):
    transitions = list(transitions)
    n = len(transitions)
    return {
        "x_bar": np.array([t.x_bar for t in transitions], dtype=float).reshape(n, 5),
        "u_bar": np.array([t.u_bar for t in transitions], dtype=float),
        "x_plus": np.array([t.x_plus for t in transitions], dtype=float).reshape(n, 5),
        "margin": np.array([t.margin_bar for t in transitions], dtype=float).reshape(n, 5),
        "d_bar": np.array([t.d_bar for t in transitions], dtype=float),
        "seed": np.array([t.gust_seed for t in transitions], dtype=object),
        "pair": np.array([t.pair_id for t in transitions], dtype=object),
    }


def query_neighbors(x, db: TransitionDb):
    """Neighbour transitions of ``x`` with their weighted distances.

    Returns
    -------
    list of (Transition, float)
        Nearest first; empty when nothing lies within ``r_max``.
    """
    x = check_state(x)
    idx, dist = db.query(x)
    return [(db.transition(int(i)), float(d)) for i, d in zip(idx, dist)]


def idw_weights(distances, epsilon=1e-9):
    """Normalised weights ``w_j = (1 / (d_j + eps)) / sum_l 1 / (d_l + eps)``."""
    d = np.asarray(distances, dtype=float)
    if d.size == 0:
        raise ValueError("no neighbours to interpolate")
    if not epsilon > 0:
        raise ConfigurationError("epsilon must be positive")
    inv = 1.0 / (d + epsilon)
    return inv / inv.sum()


def interpolate(x, neighbors, epsilon=1e-9, input_box=None, weights=None):
    """Inverse-distance interpolation of the neighbours' inputs.

    Parameters
    ----------
    x : array_like (5,)
    neighbors : list of (Transition, distance) or list of Transition
        Distances are recomputed under ``weights`` when missing.
    epsilon : float
    input_box : (float, float), optional
        Clip range for the result.
    weights : array_like (5,), optional
        ``W`` diagonal for recomputing distances (identity by default).

    Returns
    -------
    u_star : float
    w : ndarray
        Interpolation weights.
    """
    if len(neighbors) == 0:
        raise ValueError("no neighbours to interpolate")
    if isinstance(neighbors[0], tuple):
        trans = [t for t, _ in neighbors]
        dist = np.array([d for _, d in neighbors])
    else:
        trans = list(neighbors)
        W = np.ones(5) if weights is None else np.asarray(weights, dtype=float)
        x = np.asarray(x, dtype=float)
        dist = np.array([np.sqrt(np.sum(W * (x - t.x_bar) ** 2)) for t in trans])
    w = idw_weights(dist, epsilon)
    u = float(np.dot(w, [t.u_bar for t in trans]))
    if input_box is not None:
        u = float(np.clip(u, input_box[0], input_box[1]))
    return u, w


@dataclass(frozen=True)
class LipschitzEstimates:
    """Local sensitivity constants under ``||v||_W``.

    ``L_u`` per input unit, ``L_x[i]`` per unit of state component ``i``,
    ``L_w`` per unit of gust velocity.
    """

    L_u: float
    L_x: np.ndarray
    W: np.ndarray
    L_w: float = 0.0

    def __post_init__(self):
        vals = np.concatenate([[self.L_u, self.L_w], np.ravel(self.L_x)])
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise DomainError("Lipschitz estimates must be finite and non-negative")


@njit(cache=True)
def _wnorm(v, w):
    s = 0.0
    for i in range(v.shape[0]):
        s += w[i] * v[i] * v[i]
    return np.sqrt(s)


@njit(cache=True)
def _lipschitz_plant(x, u, pv, w, scale, d_probe, h_u, h_x, h_w):
    Lu = 0.0
    Lw = 0.0
    Lx = np.zeros(5)
    xp = x.copy()
    for d in d_probe:
        f0 = _deriv(x, u, d, pv)
        for sgn in (-1.0, 1.0):
            Lu = max(Lu, _wnorm(_deriv(x, u + sgn * h_u, d, pv) - f0, w) / h_u)
            Lw = max(Lw, _wnorm(_deriv(x, u, d + sgn * h_w, pv) - f0, w) / h_w)
            for i in range(5):
                h = h_x * scale[i]
                xp[i] = x[i] + sgn * h
                Lx[i] = max(Lx[i], _wnorm(_deriv(xp, u, d, pv) - f0, w) / h)
                xp[i] = x[i]
    return Lu, Lx, Lw


def estimate_lipschitz(x, u_star, p, W, w_max=0.0, h_u=1e-4, h_x=1e-4, h_w=1e-4, dynamics=None):
    """Finite-difference Lipschitz constants of the dynamics at ``(x, u_star)``.

    Parameters
    ----------
    x : array_like (n,)
    u_star : float
    p : PlantParams or None
        Plant used when ``dynamics`` is not given.
    W : array_like (n,) or (n, n)
        Diagonal weight matrix or its diagonal.
    w_max : float
        Disturbance probes are ``{-w_max, 0, w_max}`` and the maximum is taken.
    h_u, h_x, h_w : float
        Probe sizes; the state probe in component ``i`` is ``h_x * c_i`` with
        ``c_i = 1 / sqrt(W_ii)``.
    dynamics : callable ``(x, u, d) -> f``, optional

    Returns
    -------
    LipschitzEstimates
    """
    x = np.asarray(x, dtype=float)
    Wd = np.asarray(W, dtype=float)
    if Wd.ndim == 2:
        Wd = np.diag(Wd).copy()
    if Wd.shape != x.shape or np.any(Wd <= 0):
        raise ConfigurationError("W must be a positive diagonal")
    if not (np.all(np.isfinite(x)) and np.isfinite(u_star)):
        raise DomainError("non-finite state or input")
    scale = 1.0 / np.sqrt(Wd)
    probes = np.array([-w_max, 0.0, w_max]) if w_max > 0 else np.array([0.0])
    if dynamics is None:
        Lu, Lx, Lw = _lipschitz_plant(x, float(u_star), p.packed, Wd, scale, probes, h_u, h_x, h_w)
    else:
        Lu, Lw, Lx = 0.0, 0.0, np.zeros(x.shape[0])
        for d in probes:
            f0 = np.asarray(dynamics(x, u_star, d), dtype=float)
            for sgn in (-1.0, 1.0):
                Lu = max(Lu, _wnorm(np.asarray(dynamics(x, u_star + sgn * h_u, d)) - f0, Wd) / h_u)
                Lw = max(Lw, _wnorm(np.asarray(dynamics(x, u_star, d + sgn * h_w)) - f0, Wd) / h_w)
                for i in range(x.shape[0]):
                    xp = x.copy()
                    xp[i] += sgn * h_x * scale[i]
                    Lx[i] = max(Lx[i], _wnorm(np.asarray(dynamics(xp, u_star, d)) - f0, Wd) / (h_x * scale[i]))
    if not (np.isfinite(Lu) and np.all(np.isfinite(Lx)) and np.isfinite(Lw)):
        raise DomainError("non-finite dynamics at a Lipschitz probe")
    return LipschitzEstimates(float(Lu), np.asarray(Lx, dtype=float), Wd, float(Lw))


def deviation_bound(x, u_star, neighbor, L: LipschitzEstimates, T, mode="coupled", delay_steps=1, gust_mismatch=0.0):
    """Bound on ``|x_i(k+1) - x_plus_i|`` for one neighbour.

    Parameters
    ----------
    x : array_like (5,)
    u_star : float
    neighbor : Transition
    L : LipschitzEstimates
    T : float
        Sample time.
    mode : {"coupled", "componentwise"}
        See the module docstring.
    delay_steps : int
        ``n_bar``; ``T`` is replaced by ``n_bar * T``.
    gust_mismatch : float
        Upper bound on ``|w(k) - d_bar|`` (coupled mode only).

    Returns
    -------
    ndarray (5,)
    """
    x = np.asarray(x, dtype=float)
    dx = np.abs(x - np.asarray(neighbor.x_bar, dtype=float))
    du = abs(float(u_star) - float(neighbor.u_bar))
    Te = delay_steps * T
    Lx = np.asarray(L.L_x, dtype=float)
    if mode == "componentwise":
        return (1.0 + Te * Lx) * dx + Te * L.L_u * du
    if mode != "coupled":
        raise ConfigurationError(f"unknown bound mode {mode!r}")
    c = 1.0 / np.sqrt(np.asarray(L.W, dtype=float))
    return dx + Te * c * (float(Lx @ dx) + L.L_u * du + L.L_w * gust_mismatch)


def certify(x, u_star, neighbors, L, T, mode="coupled", delay_steps=1, w_max=0.0, return_detail=False):
    """Safety verdict: ``delta_i <= delta_bar_i`` for every component and neighbour.

    Parameters
    ----------
    neighbors : list of Transition or (Transition, distance)
    w_max : float
        Gust bound; the gust mismatch used for neighbour ``j`` is
        ``w_max + |d_bar_j|``.

    Returns
    -------
    bool, or (bool, float, list of ndarray) with the largest ratio
    ``delta_i / delta_bar_i`` and the per-neighbour bounds when
    ``return_detail`` is true.
    """
    if len(neighbors) == 0:
        raise ValueError("certify needs at least one neighbour")
    trans = [nb[0] if isinstance(nb, tuple) else nb for nb in neighbors]
    XB = np.array([t.x_bar for t in trans], dtype=float)
    UB = np.array([t.u_bar for t in trans], dtype=float)
    DB = np.array([t.d_bar for t in trans], dtype=float)
    MB = np.array([t.margin_bar for t in trans], dtype=float)
    safe, worst, deltas = _certify_arrays(x, u_star, XB, UB, DB, MB, L, T, mode, delay_steps, w_max)
    return (safe, worst, list(deltas)) if return_detail else safe


@njit(cache=True)
def _bounds_kernel(x, u, XB, UB, DB, Lx, Lu, Lw, c, Te, coupled, w_max):
    m, n = XB.shape
    out = np.empty((m, n))
    for j in range(m):
        du = abs(u - UB[j])
        s = Lu * du + Lw * (w_max + abs(DB[j]))
        for q in range(n):
            out[j, q] = abs(x[q] - XB[j, q])
            s += Lx[q] * out[j, q]
        for q in range(n):
            if coupled:
                out[j, q] += Te * c[q] * s
            else:
                out[j, q] += Te * (Lx[q] * out[j, q] + Lu * du)
    return out


@njit(cache=True)
def _certify_kernel(deltas, MB):
    safe = True
    worst = 0.0
    for j in range(deltas.shape[0]):
        for q in range(deltas.shape[1]):
            d, mb = deltas[j, q], MB[j, q]
            if not d <= mb:
                safe = False
            if mb > 0:
                ratio = d / mb
            else:
                ratio = np.inf if d > 0 else 0.0
            if ratio > worst or np.isnan(ratio):
                worst = ratio
    return safe, worst


def _mode_flag(mode):
    if mode not in ("coupled", "componentwise"):
        raise ConfigurationError(f"unknown bound mode {mode!r}")
    return mode == "coupled"


def _bounds_batch(x, u_star, XB, UB, DB, L, T, mode, delay_steps, w_max):
    """Row-wise :func:`deviation_bound` for stacked neighbours."""
    coupled = _mode_flag(mode)
    c = 1.0 / np.sqrt(np.asarray(L.W, dtype=float))
    return _bounds_kernel(
        np.asarray(x, dtype=float), float(u_star), np.ascontiguousarray(XB, dtype=float),
        np.asarray(UB, dtype=float), np.asarray(DB, dtype=float), np.asarray(L.L_x, dtype=float),
        float(L.L_u), float(L.L_w), c, delay_steps * T, coupled, float(w_max),
    )


def _certify_arrays(x, u_star, XB, UB, DB, MB, L, T, mode, delay_steps, w_max):
    deltas = _bounds_batch(x, u_star, XB, UB, DB, L, T, mode, delay_steps, w_max)
    safe, worst = _certify_kernel(deltas, np.ascontiguousarray(MB, dtype=float))
    return bool(safe), float(worst), deltas


# --------------------------------------------------------------------------
# fallback
# --------------------------------------------------------------------------


@dataclass
class FallbackContext:
    """Everything local retraining needs.

    ``qtable`` supplies the bootstrapped long-term values; ``base_seed`` is
    mixed into the fresh gust ensemble seeds.
    """

    params: object
    envelope: object
    mpc_config: object
    reward_config: object
    gust_config: object
    qtable: object = None
    gamma: float = 0.0
    n_actions: int = 15
    n_realizations: int = 3
    base_seed: int = 0


@dataclass
class FallbackResult:
    u: float
    tier: int
    inserted: list = field(default_factory=list)
    envelope_exit: bool = False


def local_transitions(x, ctx: FallbackContext):
    """Safe bounds, exhaustive action evaluation and transitions at ``x``.

    Raises
    ------
    InfeasibleError
        When no realization of the fresh ensemble yields certified bounds.
    """
    from .gust import training_ensemble
    from .lpv import linearize_model
    from .mpc import certify_and_shrink, safe_bounds, solve_mpc
    from .qlearn import _intersect, evaluate_actions, greedy_index, pair_gust_duration

    p, env, mcfg = ctx.params, ctx.envelope, ctx.mpc_config
    x = np.asarray(x, dtype=float)
    if not env.contains(x):
        raise InfeasibleError("state outside the admissible box")
    duration = pair_gust_duration(mcfg, ctx.reward_config, p.sample_time)
    ens = training_ensemble(x, ctx.n_realizations, ctx.gust_config, p.airspeed, p.sample_time, duration, ctx.base_seed)
    model = linearize_model(x, p)
    pairs, bounds = [], []
    for g in ens:
        try:
            res = solve_mpc(x, g.samples, mcfg, model)
            b = safe_bounds(x, g, mcfg, p, mpc_result=res)
            b = certify_and_shrink(x, b, g, p, n_probe=mcfg.n_probe, scale=mcfg.half_width)
        except (InfeasibleError, DomainError, ScheduleError):
            continue
        pairs.append(g)
        bounds.append(b)
    if not pairs:
        raise InfeasibleError("local retraining found no certified pair")
    lo, hi, kept, _ = _intersect([(b.u_min, b.u_max) for b in bounds])
    pairs = [pairs[i] for i in kept]
    bounds = [bounds[i] for i in kept]
    actions = np.linspace(lo, hi, ctx.n_actions) if ctx.n_actions > 1 else np.array([0.5 * (lo + hi)])
    q = np.zeros(len(actions))
    for g in pairs:
        r, ends, _ = evaluate_actions(x, g, actions, ctx.reward_config, p, env)
        if ctx.gamma > 0 and ctx.qtable is not None and len(ctx.qtable):
            rows = ctx.qtable.nearest_rows(ends)
            V = np.array([ctx.qtable.value(rw) for rw in rows])
            r = r + ctx.gamma * V
        q += r
    q /= len(pairs)
    if not np.any(np.isfinite(q)):
        raise InfeasibleError("every local action leaves the box during the rollout")
    u_bar = float(actions[greedy_index(q, actions)])
    safe_lo, safe_hi = merged_safe_box(env, mcfg)
    out = []
    for g, b in zip(pairs, bounds):
        x_plus = _step_euler(x, u_bar, float(g.samples[0]), p.packed)
        m = margins_to_box(x_plus, safe_lo, safe_hi)
        if np.all(m > 0):
            out.append(Transition(x.copy(), u_bar, x_plus, m, float(g.samples[0]), g.seed, None))
    if not out:
        raise InfeasibleError("no local successor strictly inside the merged safe set")
    return out


def merged_safe_box(envelope, mpc_config):
    """State box shrunk by the bound-search margin.

    Every training disturbance realization certifies its successors inside
    this box, so it is contained in the intersection over the ensemble of
    the per-disturbance safe sets.
    """
    m = mpc_config.margin
    return envelope.lo + m, envelope.hi - m


def fallback(x, db: TransitionDb, policy_ctx: FallbackContext | None = None):
    """Conservative input when certification fails.

    Tier 1 holds the actuator (``u = beta_f``).  Tier 2 (only with a
    retraining context and a non-empty database) computes local transitions
    at ``x`` and inserts them into ``db``; the caller then retries
    certification once.

    Returns
    -------
    FallbackResult
        ``u`` is the tier-1 input; after tier 2 the caller recomputes it.
    """
    x = check_state(x)
    hold = float(x[4])
    if policy_ctx is None or len(db) == 0:
        return FallbackResult(hold, 1)
    try:
        trans = local_transitions(x, policy_ctx)
    except InfeasibleError:
        return FallbackResult(hold, 1, [], True)
    db.insert(trans)
    return FallbackResult(hold, 2, trans)


# --------------------------------------------------------------------------
# per-step filter and estimator facade
# --------------------------------------------------------------------------


@dataclass
class StepDecision:
    k: int
    u: float
    verdict: str
    n_neighbors: int
    max_ratio: float
    fallback_tier: int
    x_plus: np.ndarray = None
    delta: np.ndarray = None
    envelope_exit: bool = False


class SafetyFilter(BaseEstimator):
    """Lipschitz safety filter over a transition database.

    ``fit`` takes a :class:`TransitionDb`; ``predict`` maps states to
    filtered inputs.  :meth:`step` exposes the per-step decision record.

    Parameters
    ----------
    params : PlantParams
    envelope : Envelope
    k, r_max, epsilon, h_u, h_x, mode, delay_steps, retrain
        See :class:`FilterConfig`.
    w_max : float
        Gust bound used for the Lipschitz probes and the mismatch term.
    fallback_context : FallbackContext, optional
        Enables tier-2 retraining.
    """

    def __init__(
        self,
        params=None,
        envelope=None,
        k=4,
        r_max=0.16,
        epsilon=1e-9,
        h_u=1e-4,
        h_x=1e-4,
        mode="coupled",
        delay_steps=1,
        retrain=True,
        w_max=3.0,
        fallback_context=None,
    ):
        self.params = params
        self.envelope = envelope
        self.k = k
        self.r_max = r_max
        self.epsilon = epsilon
        self.h_u = h_u
        self.h_x = h_x
        self.mode = mode
        self.delay_steps = delay_steps
        self.retrain = retrain
        self.w_max = w_max
        self.fallback_context = fallback_context

    def fit(self, db, y=None):
        self.config_ = FilterConfig(self.k, self.r_max, self.epsilon, self.h_u, self.h_x, self.mode, self.delay_steps, self.retrain)
        if self.params is None or self.envelope is None:
            raise ConfigurationError("params and envelope are required")
        self.db_ = db.fork() if isinstance(db, TransitionDb) else db
        self.db_.k = self.k
        self.db_.r_max = self.r_max
        self.counts_ = {"fallback": 0, "tier1": 0, "tier2": 0}
        # per-step constants of the Lipschitz probes and the bound
        Wd = np.asarray(self.envelope.weights, dtype=float)
        self._wd = Wd
        self._scale = 1.0 / np.sqrt(Wd)
        self._probes = np.array([-self.w_max, 0.0, self.w_max]) if self.w_max > 0 else np.array([0.0])
        self._coupled = _mode_flag(self.mode)
        return self

    def _certified_input(self, x):
        # same computation as query_neighbors / interpolate / estimate_lipschitz /
        # certify, without their per-call validation
        db = self.db_
        idx, dist = db.query(x)
        if len(idx) == 0:
            return None
        env = self.envelope
        rows = db._rows[idx]
        w = idw_weights(dist, self.epsilon)
        UB = rows[:, _COLS["u_bar"]]
        u = float(np.clip(np.dot(w, UB), env.input_lo, env.input_hi))
        if not np.all(np.isfinite(x)):
            raise DomainError("non-finite state or input")
        Lu, Lx, Lw = _lipschitz_plant(x, u, self.params.packed, self._wd, self._scale, self._probes, self.h_u, self.h_x, 1e-4)
        if not (np.isfinite(Lu) and np.isfinite(Lw) and np.all(np.isfinite(Lx))):
            raise DomainError("non-finite dynamics at a Lipschitz probe")
        deltas = _bounds_kernel(
            x, u, np.ascontiguousarray(rows[:, _COLS["x_bar"]]), UB, rows[:, _COLS["d_bar"]], Lx, Lu, Lw,
            self._scale, self.delay_steps * self.params.sample_time, self._coupled, float(self.w_max),
        )
        safe, ratio = _certify_kernel(deltas, np.ascontiguousarray(rows[:, _COLS["margin"]]))
        return u, bool(safe), float(ratio), rows[:, _COLS["x_plus"]], deltas

    def step(self, k, x):
        """Filtered input and decision record for state ``x`` at step ``k``."""
        if "db_" not in self.__dict__:
            check_is_fitted(self, "db_")
        x = np.asarray(x, dtype=float)
        try:
            res = self._certified_input(x)
        except DomainError:
            res = None
        if res is not None and res[1]:
            u, _, ratio, x_plus, deltas = res
            return StepDecision(k, u, VERDICT_SAFE, len(x_plus), ratio, 0, x_plus, deltas)
        verdict = VERDICT_NO_NEIGHBORS if res is None else VERDICT_UNSAFE
        n_nb = 0 if res is None else len(res[3])
        ratio = np.inf if res is None else res[2]
        self.counts_["fallback"] += 1
        ctx = self.fallback_context if self.retrain else None
        fb = fallback(x, self.db_, ctx)
        if fb.tier == 2:
            res2 = self._certified_input(x)
            if res2 is not None and res2[1]:
                self.counts_["tier2"] += 1
                u, _, _, x_plus, deltas = res2
                return StepDecision(k, u, verdict, n_nb, ratio, 2, x_plus, deltas)
        self.counts_["tier1"] += 1
        return StepDecision(k, fb.u, verdict, n_nb, ratio, 1, envelope_exit=fb.envelope_exit)

    def predict(self, X):
        check_is_fitted(self, "db_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.array([self.step(i, x).u for i, x in enumerate(X)])


def write_decision_log(path, decisions, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["k", "verdict", "n_neighbors", "max_ratio", "fallback_tier"])
        for d in decisions:
            w.writerow([d.k, d.verdict, d.n_neighbors, repr(float(d.max_ratio)), d.fallback_tier])
