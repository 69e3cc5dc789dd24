"""Closed-loop episodes, baseline controllers and the Monte Carlo campaign."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from .gust import episode_gust
from .lpv import _linearize
from .mpc import solve_mpc_blocks
from .plant import alpha_eff, simulate, write_timeseries_csv
from .qlearn import LookupMiss, policy

__all__ = [
    "EpisodeConfig",
    "EpisodeMetrics",
    "LpvMpcController",
    "MpcRlController",
    "RlController",
    "ZeroController",
    "baseline_lpv_controller",
    "baseline_rl_controller",
    "compute_metrics",
    "episode_inputs",
    "median_du_pct",
    "monte_carlo",
    "mpcrl_controller",
    "run_episode",
    "settle_time",
]


@dataclass(frozen=True)
class EpisodeConfig:
    """Episode shape and metric settings.

    Parameters
    ----------
    gust_duration, recovery_duration : float
        Turbulence phase followed by calm recovery (s).
    settle_fraction : float
        Settling band as a fraction of the admissible half-width.
    excursion_fraction : float
        Excursion threshold as a fraction of the open-loop peak response.
    max_step : float
        Per-step actuator change treated as 100 % (rad).
    init_fraction : float
        Initial states are uniform over this central fraction of each box
        dimension.
    """

    gust_duration: float = 5.0
    recovery_duration: float = 5.0
    settle_fraction: float = 0.05
    excursion_fraction: float = 0.2
    max_step: float = 0.05
    init_fraction: float = 0.5

    @property
    def duration(self):
        return self.gust_duration + self.recovery_duration


@dataclass
class EpisodeMetrics:
    """Per-episode metrics.

    Lengths in m, angles in deg for ``max_alpha_eff`` and rad elsewhere,
    times in s.  ``certified_steps`` and ``bound_violations`` are only
    nonzero for the filtered controller: the number of certified steps and
    how many of them broke the deviation bound or left the merged safe set.
    """

    max_overshoot_h: float = 0.0
    settle_h: float = 0.0
    max_alpha_eff: float = 0.0
    settle_alpha: float = 0.0
    rms_vh_full: float = 0.0
    rms_vh_post: float = 0.0
    rms_vtheta_full: float = 0.0
    rms_vtheta_post: float = 0.0
    excursions_h: int = 0
    excursions_alpha: int = 0
    median_du_pct: float = 0.0
    fallback_count: int = 0
    violation_count: int = 0
    certified_steps: int = 0
    bound_violations: int = 0
    aborted: int = 0

    @classmethod
    def names(cls):
        return [f.name for f in fields(cls)]


# --------------------------------------------------------------------------
# metric primitives
# --------------------------------------------------------------------------


def settle_time(signal, T, band, start_index=0):
    """Time after ``start_index`` from which ``|signal| <= band`` holds to the end.

    Returns 0 when the signal already stays inside, and the remaining
    duration when it never settles.
    """
    s = np.abs(np.asarray(signal, dtype=float))[start_index:]
    if s.size == 0:
        return 0.0
    outside = np.flatnonzero(s > band)
    if outside.size == 0:
        return 0.0
    return float((outside[-1] + 1) * T)


def count_excursions(signal, threshold):
    """Number of entries of ``|signal|`` into ``(threshold, inf)``."""
    a = np.abs(np.asarray(signal, dtype=float)) > threshold
    if a.size == 0:
        return 0
    return int(a[0]) + int(np.count_nonzero(a[1:] & ~a[:-1]))


def median_du_pct(inputs, max_step, u_prev=None):
    """Median per-step ``|du|`` as a percentage of ``max_step`` (clipped at 100)."""
    u = np.asarray(inputs, dtype=float)
    if u_prev is not None:
        u = np.concatenate([[u_prev], u])
    if u.size < 2:
        return 0.0
    du = np.minimum(np.abs(np.diff(u)), max_step)
    return float(100.0 * np.median(du) / max_step)


def rms(x):
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def compute_metrics(states, inputs, gust, T, envelope, cfg: EpisodeConfig, p, open_loop_peaks=None, u_prev=None):
    """Metrics of one recorded episode.

    Parameters
    ----------
    states : ndarray (K + 1, 5)
    inputs, gust : ndarray (K,)
    open_loop_peaks : (float, float), optional
        Peak ``|h|`` and ``|alpha_eff|`` (rad) of the zero-input response to
        the same gust and initial state; excursion counts are zero without it.
    u_prev : float, optional
        Input before the first step, used for the first increment; the
        first increment is skipped when omitted.
    """
    K = len(inputs)
    g_full = np.concatenate([gust, [gust[-1] if len(gust) else 0.0]])
    h = states[:, 0]
    alpha = alpha_eff(states, g_full[: states.shape[0]], p)
    k_end = min(int(round(cfg.gust_duration / T)), states.shape[0] - 1)
    hw = envelope.half_width
    m = EpisodeMetrics()
    m.max_overshoot_h = float(np.max(np.abs(h)))
    m.max_alpha_eff = float(np.degrees(np.max(np.abs(alpha))))
    m.settle_h = settle_time(h, T, cfg.settle_fraction * hw[0], k_end)
    m.settle_alpha = settle_time(alpha, T, cfg.settle_fraction * hw[1], k_end)
    m.rms_vh_full = rms(states[:, 2])
    m.rms_vh_post = rms(states[k_end:, 2])
    m.rms_vtheta_full = rms(states[:, 3])
    m.rms_vtheta_post = rms(states[k_end:, 3])
    if open_loop_peaks is not None:
        m.excursions_h = count_excursions(h, cfg.excursion_fraction * open_loop_peaks[0])
        m.excursions_alpha = count_excursions(alpha, cfg.excursion_fraction * open_loop_peaks[1])
    m.median_du_pct = median_du_pct(inputs[:K], cfg.max_step, u_prev)
    m.violation_count = int(np.count_nonzero(~envelope.contains(states[1:])))
    return m


# --------------------------------------------------------------------------
# controllers
# --------------------------------------------------------------------------


class ZeroController:
    name = "zero"

    def reset(self):
        pass

    def step(self, k, x):
        return 0.0

    __call__ = step


class LpvMpcController:
    """Receding-horizon MPC on the LPV model re-linearised every step.

    Assumes zero future gust.  On infeasibility (or a state outside the box)
    the previous input is held and the step is flagged.
    """

    name = "LPV"

    def __init__(self, params, mpc_config):
        self.params = params
        self.cfg = mpc_config
        self._ones = np.ones(5)
        self._zeros = np.zeros(mpc_config.n_steps)
        self.reset()

    def reset(self):
        self.u_prev = 0.0
        self.warm = None
        self.flags = 0
        self.history = []

    def step(self, k, x):
        cfg = self.cfg
        x = np.asarray(x, dtype=float)
        ok = bool(np.all(np.isfinite(x)) and np.all(x >= cfg.x_lo) and np.all(x <= cfg.x_hi))
        if ok:
            # linearize_model + solve_mpc on an already validated state
            A, B, E, c = _linearize(x, self.params.packed, self._ones)
            warm = np.zeros(cfg.horizon) if self.warm is None else self.warm
            U, ok = solve_mpc_blocks(A, B, E, c, x, self._zeros, cfg, warm)
        if not ok:
            self.flags += 1
            self.history.append(None)
            return self.u_prev
        self.warm = np.concatenate([U[1:], U[-1:]]) if cfg.block_length == 1 else U
        u0 = float(U[0])
        self.u_prev = u0
        self.history.append(u0)
        return u0

    __call__ = step


class RlController:
    """Greedy tabular policy; unvisited cells use the nearest visited one."""

    name = "RL"

    def __init__(self, qtable, input_box):
        self.qtable = qtable
        self.lo, self.hi = input_box
        bins = qtable.grid.bins
        self._strides = np.array([int(np.prod(bins[i + 1:])) for i in range(len(bins))], dtype=np.int64)
        # the table is fixed, so a visited cell always yields the same input
        self._cache = {}

    def reset(self):
        pass

    def _cell(self, x):
        g = self.qtable.grid
        mi = np.minimum(np.maximum(np.floor((x - g.lo) / g.width), 0), g.bins - 1).astype(np.int64)
        return int(mi @ self._strides)

    def step(self, k, x):
        x = np.asarray(x, dtype=float)
        cell = self._cell(x) if np.all(np.isfinite(x)) else None
        u = self._cache.get(cell)
        if u is not None:
            return u
        try:
            u = policy(x, self.qtable, nearest=True)
        except LookupMiss:
            u = 0.0
        u = float(np.clip(u, self.lo, self.hi))
        if cell is not None and cell in self.qtable:
            self._cache[cell] = u
        return u

    __call__ = step


class MpcRlController:
    """Safety-filtered interpolation of verified transitions.

    Each episode works on a private fork of the transition database so that
    fallback insertions never leak between runs.
    """

    name = "MPC-RL"

    def __init__(self, safety_filter, db):
        self.filter = safety_filter
        self.db = db
        self.reset()

    def reset(self):
        self.filter.fit(self.db)
        self.decisions = []

    def step(self, k, x):
        d = self.filter.step(k, x)
        self.decisions.append(d)
        return d.u

    __call__ = step


def baseline_lpv_controller(params, mpc_config):
    return LpvMpcController(params, mpc_config)


def baseline_rl_controller(qtable, input_box):
    return RlController(qtable, input_box)


def mpcrl_controller(safety_filter, db):
    return MpcRlController(safety_filter, db)


# --------------------------------------------------------------------------
# episodes and campaigns
# --------------------------------------------------------------------------


@dataclass
class EpisodeResult:
    metrics: EpisodeMetrics
    sim: object
    decisions: list = None


def open_loop_peaks(x0, gust, cfg: EpisodeConfig, p, envelope):
    sim = simulate(x0, ZeroController(), gust, cfg.duration, p)
    alpha = alpha_eff(sim.states[:-1], sim.gust, p)
    return float(np.max(np.abs(sim.states[:, 0]))), float(np.max(np.abs(alpha)))


def soundness_check(states, decisions, safe_lo, safe_hi, atol=0.0):
    """Count certified steps and those violating the bound or the safe set."""
    cert = [d for d in decisions if d.x_plus is not None and d.k + 1 < states.shape[0]]
    if not cert:
        return 0, 0
    steps = np.array([d.k for d in cert])
    x1 = states[steps + 1]
    outside = np.any(x1 < safe_lo, axis=1) | np.any(x1 > safe_hi, axis=1)
    sizes = np.array([len(d.x_plus) for d in cert])
    owner = np.repeat(np.arange(len(cert)), sizes)
    dev = np.abs(x1[owner] - np.concatenate([d.x_plus for d in cert]))
    over = np.any(dev > np.concatenate([d.delta for d in cert]) + atol, axis=1)
    bad = outside | (np.bincount(owner[over], minlength=len(cert)) > 0)
    return len(cert), int(np.count_nonzero(bad))


def run_episode(controller, gust, x0, cfg: EpisodeConfig, p, envelope, peaks=None, safe_box=None):
    """Simulate one episode and compute its metrics.

    Parameters
    ----------
    controller : object with ``step(k, x)`` and ``reset()``
    gust : array_like
        At least ``duration / T`` samples.
    x0 : array_like (5,)
    peaks : (float, float), optional
        Open-loop peaks for the excursion threshold; computed when omitted.
    safe_box : (lo, hi), optional
        Merged safe set for the soundness check of filtered controllers.
    """
    gust = np.asarray(getattr(gust, "samples", gust), dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if hasattr(controller, "reset"):
        controller.reset()
    if peaks is None:
        peaks = open_loop_peaks(x0, gust, cfg, p, envelope)
    sim = simulate(x0, controller.step, gust, cfg.duration, p, (envelope.input_lo, envelope.input_hi))
    m = compute_metrics(sim.states, sim.inputs, sim.gust, p.sample_time, envelope, cfg, p, peaks, u_prev=float(x0[4]))
    m.aborted = int(sim.aborted_at is not None)
    decisions = getattr(controller, "decisions", None)
    if decisions is not None:
        m.fallback_count = int(sum(1 for d in decisions if d.fallback_tier > 0))
        if safe_box is not None:
            m.certified_steps, m.bound_violations = soundness_check(sim.states, decisions, *safe_box)
    elif hasattr(controller, "flags"):
        m.fallback_count = int(controller.flags)
    return EpisodeResult(m, sim, decisions)


def run_seeds(seed0, n_runs):
    """Per-run ``(gust_seed, init_seed)`` pairs derived from ``seed0``."""
    ss = np.random.SeedSequence(seed0)
    out = []
    for child in ss.spawn(n_runs):
        a, b = child.generate_state(2, dtype=np.uint64)
        out.append((int(a >> np.uint64(1)), int(b >> np.uint64(1))))
    return out


def initial_state(seed, envelope, fraction):
    lo, hi = envelope.inner(fraction)
    return np.random.default_rng(seed).uniform(lo, hi)


def episode_inputs(g_seed, x_seed, gust_cfg, ep_cfg, p, envelope):
    """Gust profile and initial state of one episode from its two seeds."""
    gust_cfg_ep = replace(gust_cfg, gust_duration=ep_cfg.gust_duration, recovery_duration=ep_cfg.recovery_duration)
    gust = episode_gust(g_seed, gust_cfg_ep, p.airspeed, p.sample_time)
    x0 = initial_state(x_seed, envelope, ep_cfg.init_fraction)
    return gust, x0


def campaign_inputs(run, seed0, n_runs, gust_cfg, ep_cfg, p, envelope):
    g_seed, x_seed = run_seeds(seed0, n_runs)[run]
    gust, x0 = episode_inputs(g_seed, x_seed, gust_cfg, ep_cfg, p, envelope)
    return gust, x0, g_seed, x_seed


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def monte_carlo(controllers, n_runs, seed0, gust_cfg, ep_cfg, p, envelope, out_dir=None, safe_box=None,
                timeseries=False, header=None, runs=None, progress=None, write=True):
    """Paired Monte Carlo campaign.

    Parameters
    ----------
    controllers : dict name -> controller
        Every controller sees the same gust and initial state in each run.
    n_runs : int
    seed0 : int
    out_dir : path, optional
        Writes ``metrics_runs.csv``, ``metrics_summary.csv`` and optionally
        ``timeseries/<run>_<controller>.csv``.
    runs : iterable of int, optional
        Subset of run indices (used for sharding across workers).

    Returns
    -------
    summary : dict name -> dict metric -> mean
    per_run : list of (run, name, EpisodeMetrics, gust_seed, init_seed)
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    per_run = []
    run_ids = range(n_runs) if runs is None else runs
    for run in run_ids:
        gust, x0, g_seed, x_seed = campaign_inputs(run, seed0, n_runs, gust_cfg, ep_cfg, p, envelope)
        peaks = open_loop_peaks(x0, gust.samples, ep_cfg, p, envelope)
        for name, ctrl in controllers.items():
            res = run_episode(ctrl, gust.samples, x0, ep_cfg, p, envelope, peaks, safe_box)
            per_run.append((run, name, res.metrics, g_seed, x_seed))
            if out_dir is not None and timeseries:
                ts = os.path.join(out_dir, "timeseries")
                os.makedirs(ts, exist_ok=True)
                write_timeseries_csv(os.path.join(ts, f"{run}_{name}.csv"), p.sample_time, res.sim.states,
                                     res.sim.inputs, res.sim.gust, header)
        if progress:
            progress(run)
    summary = summarize(per_run, list(controllers))
    if out_dir is not None and write:
        write_campaign(out_dir, summary, per_run, header)
    return summary, per_run


def summarize(per_run, names):
    summary = {}
    for name in names:
        rows = [m for _, n, m, *_ in per_run if n == name]
        summary[name] = {k: float(np.mean([getattr(m, k) for m in rows])) for k in EpisodeMetrics.names()}
    return summary


def write_campaign(out_dir, summary, per_run, header=None):
    os.makedirs(out_dir, exist_ok=True)
    names = EpisodeMetrics.names()
    with open(os.path.join(out_dir, "metrics_runs.csv"), "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["run", "controller", "gust_seed", "init_seed", *names])
        for run, name, m, gs, xs in sorted(per_run, key=lambda r: (r[0], r[1])):
            w.writerow([run, name, gs, xs, *(_fmt(getattr(m, k)) for k in names)])
    with open(os.path.join(out_dir, "metrics_summary.csv"), "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["controller", *names])
        for name, row in summary.items():
            w.writerow([name, *(repr(row[k]) for k in names)])


def ordering_holds(summary, mpcrl="MPC-RL", lpv="LPV", rl="RL"):
    """Qualitative ordering of the comparison tables."""
    s = summary
    checks = {
        "overshoot_mpcrl_le_lpv": s[mpcrl]["max_overshoot_h"] <= s[lpv]["max_overshoot_h"],
        "overshoot_mpcrl_le_rl": s[mpcrl]["max_overshoot_h"] <= s[rl]["max_overshoot_h"],
        "rl_du_ge_90": s[rl]["median_du_pct"] >= 90.0,
        "mpcrl_du_le_20": s[mpcrl]["median_du_pct"] <= 20.0,
    }
    return all(checks.values()), checks
