"""End-to-end pipeline: training artifacts, evaluation, model validation, replay.

Artifacts (all carry the config hash in a header):

``bounds.jsonl``
    Certified safe bounds, one training pair per line.
``transitions.jsonl``
    Verified transitions of the online filter (first line: metadata).
``qtable.json`` / ``qtable_rl.json``
    Q-tables trained inside the MPC bounds and over the full actuator box.
``train_log.csv``
    ``pair_id, best_index, best_action, best_reward`` per training pair.
``train_summary.json``
    Pair counts, exclusions, rollout violations and the audit result.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .exceptions import ConfigurationError
from .harness import (
    LpvMpcController,
    MpcRlController,
    RlController,
    episode_inputs,
    monte_carlo,
    open_loop_peaks,
    ordering_holds,
    run_episode,
    run_seeds,
    summarize,
    write_campaign,
)
from .mpc import certify_bounding, read_bounds_jsonl, write_bounds_jsonl
from .plant import step_euler, taylor_fidelity, write_timeseries_csv
from .qlearn import QTable, write_train_log
from .safety_filter import (
    FallbackContext,
    SafetyFilter,
    Transition,
    TransitionDb,
    margins_to_box,
    merged_safe_box,
    write_decision_log,
)

__all__ = [
    "CONTROLLERS",
    "audit_bounds",
    "build_transition_db",
    "evaluate",
    "fallback_context",
    "load_artifacts",
    "make_controllers",
    "replay",
    "train_artifacts",
    "validate_model",
]

CONTROLLERS = ("MPC-RL", "LPV", "RL")
ARTIFACTS = ("bounds.jsonl", "transitions.jsonl", "qtable.json", "qtable_rl.json", "train_log.csv")


def build_transition_db(estimator, k=4, r_max=np.inf):
    """Verified transitions of a fitted :class:`QLearningPolicy`.

    Each training pair contributes ``(x0, u_bar, x_plus)`` with ``u_bar``
    the greedy action of its cell and ``x_plus`` the one-step successor
    under the pair's first gust sample.  Pairs whose successor is not
    strictly inside the merged safe set are skipped.
    """
    p, env = estimator.params, estimator.envelope
    mpc_cfg = estimator._configs()[0]
    lo, hi = merged_safe_box(env, mpc_cfg)
    trans = []
    res = estimator.training_
    for i in sorted(res.pair_actions):
        x0, g = estimator.pairs_[i]
        u_bar = float(res.pair_actions[i][1])
        d = float(g.samples[0])
        x_plus = step_euler(x0, u_bar, d, p)
        m = margins_to_box(x_plus, lo, hi)
        if np.all(m > 0):
            trans.append(Transition(np.array(x0, dtype=float), u_bar, x_plus, m, d, g.seed, i))
    return TransitionDb(trans, env.weights, lo, hi, k, r_max)


def fallback_context(estimator, n_realizations=None, base_seed=None):
    """Tier-2 retraining context matching a fitted estimator."""
    mpc_cfg, rew, gcfg, qcfg = estimator._configs()
    return FallbackContext(
        estimator.params, estimator.envelope, mpc_cfg, rew, gcfg, estimator.qtable_, qcfg.gamma,
        qcfg.n_actions, gcfg.n_realizations if n_realizations is None else n_realizations,
        estimator.base_seed if base_seed is None else base_seed,
    )


def context_from_config(cfg, qtable):
    q = cfg.q_config()
    g = cfg.gust_config()
    return FallbackContext(
        cfg.params(), cfg.envelope(), cfg.mpc_config(), cfg.reward_config(), g, qtable, q.gamma,
        q.n_actions, g.n_realizations, int(cfg["seeds"]["train"]),
    )


def audit_bounds(estimator):
    """Independent re-check of every stored pair.

    Returns the number of failures: bounds that do not re-certify, or a
    stored greedy action outside its pair's certified interval.
    """
    p = estimator.params
    mpc_cfg = estimator._configs()[0]
    failures = 0
    for i, ((x0, g), b) in enumerate(zip(estimator.pairs_, estimator.bounds_)):
        ok = b.verified and certify_bounding(x0, b, g, p, n_probe=mpc_cfg.n_probe, scale=mpc_cfg.half_width)
        if i in estimator.training_.pair_actions:
            u = estimator.training_.pair_actions[i][1]
            ok = ok and b.u_min <= u <= b.u_max
        failures += int(not ok)
    return failures


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def train_artifacts(cfg, out_dir):
    """Fit both Q-tables and write every training artifact.

    Returns
    -------
    dict
        Training summary; ``certification_failures`` is the audit count.
    """
    os.makedirs(out_dir, exist_ok=True)
    header = cfg.header()
    X = cfg.training_states()
    est = cfg.policy(use_mpc_bounds=True).fit(X)
    rl = cfg.policy(use_mpc_bounds=False).fit(X)
    fcfg = cfg.filter_config()
    db = build_transition_db(est, fcfg.k, fcfg.r_max)
    write_bounds_jsonl(os.path.join(out_dir, "bounds.jsonl"), est.bounds_, header)
    db.to_jsonl(os.path.join(out_dir, "transitions.jsonl"), header)
    est.qtable_.to_json(os.path.join(out_dir, "qtable.json"), header)
    rl.qtable_.to_json(os.path.join(out_dir, "qtable_rl.json"), header)
    write_train_log(os.path.join(out_dir, "train_log.csv"), est.training_.log, header)
    failures = audit_bounds(est)
    summary = {
        "config_hash": cfg.config_hash(),
        "n_states": int(X.shape[0]),
        "n_pairs": len(est.pairs_),
        "n_excluded": len(est.excluded_),
        "n_dropped_incompatible": len(est.training_.dropped),
        "rollout_violations": int(est.training_.rollout_violations),
        "q_rows": len(est.qtable_),
        "q_rows_rl": len(rl.qtable_),
        "n_transitions": len(db),
        "sweeps": len(est.training_.sweep_changes),
        "certification_failures": int(failures),
    }
    with open(os.path.join(out_dir, "train_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return summary


def load_artifacts(out_dir):
    """``(qtable, qtable_rl, db)`` from a training directory."""
    missing = [a for a in ARTIFACTS if not os.path.exists(os.path.join(out_dir, a))]
    if missing:
        raise ConfigurationError(f"missing training artifacts in {out_dir}: {', '.join(missing)}; run 'train' first")
    q = QTable.from_json(os.path.join(out_dir, "qtable.json"))
    q_rl = QTable.from_json(os.path.join(out_dir, "qtable_rl.json"))
    db = TransitionDb.from_jsonl(os.path.join(out_dir, "transitions.jsonl"))
    return q, q_rl, db


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------


def make_controllers(cfg, artifacts, names=CONTROLLERS):
    q, q_rl, db = artifacts
    p, env = cfg.params(), cfg.envelope()
    f = cfg.filter_config()
    out = {}
    for name in names:
        if name == "MPC-RL":
            sf = SafetyFilter(
                p, env, f.k, f.r_max, f.epsilon, f.h_u, f.h_x, f.mode, f.delay_steps, f.retrain,
                cfg.gust_config().w_max, context_from_config(cfg, q),
            )
            out[name] = MpcRlController(sf, db)
        elif name == "LPV":
            out[name] = LpvMpcController(p, cfg.mpc_config())
        elif name == "RL":
            out[name] = RlController(q_rl, (env.input_lo, env.input_hi))
        else:
            raise ConfigurationError(f"unknown controller {name!r}")
    return out


def _shard(args):
    cfg, art_dir, seed, n_runs, runs, out_dir, timeseries = args
    controllers = make_controllers(cfg, load_artifacts(art_dir))
    env = cfg.envelope()
    _, per_run = monte_carlo(
        controllers, n_runs, seed, cfg.gust_config(), cfg.episode_config(), cfg.params(), env,
        out_dir=out_dir if timeseries else None, safe_box=merged_safe_box(env, cfg.mpc_config()),
        timeseries=timeseries, header=cfg.header(), runs=runs, write=False,
    )
    return per_run


def evaluate(cfg, art_dir, out_dir=None, seed=None, jobs=1, n_runs=None, timeseries=None):
    """Paired three-controller campaign from stored artifacts.

    Returns
    -------
    summary : dict controller -> metric means
    per_run : list
    ordering : (bool, dict)
    """
    out_dir = art_dir if out_dir is None else out_dir
    seed = int(cfg["seeds"]["evaluate"]) if seed is None else int(seed)
    n_runs = int(cfg["evaluation"]["n_runs"]) if n_runs is None else int(n_runs)
    timeseries = bool(cfg["evaluation"]["timeseries"]) if timeseries is None else timeseries
    load_artifacts(art_dir)
    os.makedirs(out_dir, exist_ok=True)
    jobs = max(1, min(int(jobs), n_runs))
    shards = [list(range(j, n_runs, jobs)) for j in range(jobs)]
    tasks = [(cfg, art_dir, seed, n_runs, s, out_dir, timeseries) for s in shards]
    if jobs == 1:
        parts = [_shard(tasks[0])]
    else:
        with ProcessPoolExecutor(jobs) as ex:
            parts = list(ex.map(_shard, tasks))
    per_run = sorted((r for part in parts for r in part), key=lambda r: (r[0], CONTROLLERS.index(r[1])))
    summary = summarize(per_run, list(CONTROLLERS))
    write_campaign(out_dir, summary, per_run, cfg.header())
    return summary, per_run, ordering_holds(summary)


# --------------------------------------------------------------------------
# validate-model
# --------------------------------------------------------------------------


def validate_model(cfg, seed=None):
    """Taylor two-step fidelity and LPV validity checks.

    Returns
    -------
    dict
        Report with a ``passed`` flag per check and overall.
    """
    from .lpv import validate as lpv_validate

    v = cfg["validation"]
    p, env = cfg.params(), cfg.envelope()
    seed = int(cfg["seeds"]["validate"]) if seed is None else int(seed)
    rng = np.random.default_rng(seed)
    n = int(v["taylor_samples"])
    w_max = cfg.gust_config().w_max
    X = rng.uniform(env.lo, env.hi, (n, 5))
    U = rng.uniform(env.input_lo, env.input_hi, n)
    Wd = rng.uniform(-w_max, w_max, n)
    with np.errstate(all="ignore"):
        err = taylor_fidelity(X, U, Wd, p, env.half_width, int(v["taylor_substeps"]))
    taylor_max = float(np.max(err)) if np.all(np.isfinite(err)) else float("inf")
    report = {
        "taylor": {
            "n_samples": n,
            "max_rel_error": taylor_max,
            "per_component": [float(e) if np.isfinite(e) else None for e in err],
            "threshold": float(v["taylor_threshold"]),
            "passed": bool(taylor_max < float(v["taylor_threshold"])),
        }
    }
    convex = p.sample_time * p.actuator_gain < 1.0
    band = [float(b) for b in v["mode_band"]]
    if convex:
        S = rng.uniform(env.lo, env.hi, (int(v["lpv_samples"]), 5))
        r = lpv_validate(S, int(v["lpv_horizon"]), p, env)
        r.pop("per_sample")
        r["threshold"] = float(v["lpv_threshold"])
        r["mode_band_hz"] = band
        r["passed"] = bool(r["max_rel_traj_error"] < r["threshold"] and band[0] <= r["dominant_mode_hz"] <= band[1])
        report["lpv"] = r
    else:
        report["lpv"] = {"passed": False, "reason": "sample_time * actuator_gain >= 1"}
    report["passed"] = bool(report["taylor"]["passed"] and report["lpv"]["passed"])
    return report


# --------------------------------------------------------------------------
# replay
# --------------------------------------------------------------------------


def read_run_table(path):
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    return rows


def replay(cfg, art_dir, run, controller="MPC-RL", out_dir=None, runs_csv=None):
    """Re-run one stored episode from its persisted seeds.

    Writes ``replay_<run>_<controller>.csv`` (time series) and, for the
    filtered controller, ``decisions_<run>.csv``.

    Returns
    -------
    EpisodeResult
    """
    out_dir = art_dir if out_dir is None else out_dir
    runs_csv = os.path.join(out_dir, "metrics_runs.csv") if runs_csv is None else runs_csv
    if not os.path.exists(runs_csv):
        raise ConfigurationError(f"{runs_csv} not found; run 'evaluate' first")
    rows = [r for r in read_run_table(runs_csv) if r["run"] == str(run) and r["controller"] == controller]
    if not rows:
        raise KeyError(f"no stored episode for run {run!r} and controller {controller!r}")
    g_seed, x_seed = int(rows[0]["gust_seed"]), int(rows[0]["init_seed"])
    p, env = cfg.params(), cfg.envelope()
    ep = cfg.episode_config()
    gust, x0 = episode_inputs(g_seed, x_seed, cfg.gust_config(), ep, p, env)
    ctrl = make_controllers(cfg, load_artifacts(art_dir), (controller,))[controller]
    peaks = open_loop_peaks(x0, gust.samples, ep, p, env)
    res = run_episode(ctrl, gust.samples, x0, ep, p, env, peaks, merged_safe_box(env, cfg.mpc_config()))
    header = cfg.header()
    write_timeseries_csv(os.path.join(out_dir, f"replay_{run}_{controller}.csv"), p.sample_time,
                         res.sim.states, res.sim.inputs, res.sim.gust, header)
    if res.decisions is not None:
        write_decision_log(os.path.join(out_dir, f"decisions_{run}.csv"), res.decisions, header)
    return res


__all__ += ["context_from_config", "read_run_table", "run_seeds"]
