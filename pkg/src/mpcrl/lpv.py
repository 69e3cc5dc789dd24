"""State-scheduled discrete-time linearization of the wing plant.

``x(k+1) = A(h, theta) x(k) + B u(k) + E w(k) + c`` where ``A``, ``B``, ``E`` are
finite-difference Jacobians of the Euler step at the scheduling point and the
affine offset ``c`` makes the model exact there.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numba import njit

from ._validation import check_state, check_states
from .exceptions import ScheduleError
from .plant import FD_REL_STEP, _rk4, _step_euler

__all__ = ["LpvModel", "dominant_mode_hz", "linearize", "modal_frequencies", "validate"]


@dataclass(frozen=True)
class LpvModel:
    """Frozen LPV model at one scheduling point.

    Attributes
    ----------
    A : ndarray (5, 5)
    B : ndarray (5,)
        Input column; only the flap row is nonzero.
    E : ndarray (5,)
        Gust column.
    c : ndarray (5,)
        Affine offset.
    x_ref : ndarray (5,)
        Linearization state.
    T : float
    """

    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    c: np.ndarray
    x_ref: np.ndarray
    T: float

    def step(self, x, u, w=0.0):
        return self.A @ x + self.B * u + self.E * w + self.c


@njit(cache=True)
def _linearize(x, pv, scale):
    u0 = x[4]
    A = np.empty((5, 5))
    xp = x.copy()
    for j in range(5):
        hj = FD_REL_STEP * scale[j]
        xp[j] = x[j] + hj
        fp = _step_euler(xp, u0, 0.0, pv)
        xp[j] = x[j] - hj
        fm = _step_euler(xp, u0, 0.0, pv)
        xp[j] = x[j]
        for i in range(5):
            A[i, j] = (fp[i] - fm[i]) / (2.0 * hj)
    hu = FD_REL_STEP
    B = (_step_euler(x, u0 + hu, 0.0, pv) - _step_euler(x, u0 - hu, 0.0, pv)) / (2.0 * hu)
    E = (_step_euler(x, u0, hu, pv) - _step_euler(x, u0, -hu, pv)) / (2.0 * hu)
    x1 = _step_euler(x, u0, 0.0, pv)
    c = x1 - A @ x - B * u0
    return A, B, E, c


def _scale_of(envelope):
    return np.ones(5) if envelope is None else envelope.half_width


def linearize(x, p, envelope=None):
    """Linearize the Euler step at ``(x, u = beta_f, w = 0)``.

    Parameters
    ----------
    x : array_like (5,)
        Scheduling state; only ``h`` and ``theta`` enter ``A`` nonlinearly.
    p : PlantParams
    envelope : Envelope, optional
        When given, ``x`` must lie inside it and the finite-difference
        perturbations are scaled by its half-widths.

    Returns
    -------
    A, B, c : ndarray
        State matrix, input column and affine offset.  Use
        :func:`linearize_model` for the gust column as well.
    """
    m = linearize_model(x, p, envelope)
    return m.A, m.B, m.c


def linearize_model(x, p, envelope=None):
    x = check_state(x)
    if x.ndim != 1:
        raise ScheduleError("linearize expects a single state")
    if envelope is not None and not envelope.contains(x):
        raise ScheduleError(f"scheduling state {x.tolist()} outside the admissible envelope")
    p.check_actuator()
    A, B, E, c = _linearize(x, p.packed, _scale_of(envelope))
    return LpvModel(A, B, E, c, x.copy(), p.sample_time)


def modal_frequencies(A, T):
    """Continuous-time natural frequencies (Hz) and damping ratios of ``A``.

    Discrete eigenvalues ``z`` map to ``s = log(z) / T``; only oscillatory
    pairs (positive imaginary part) are returned, sorted by frequency.
    """
    z = np.linalg.eigvals(A)
    s = np.log(z.astype(complex)) / T
    osc = s[s.imag > 1e-9]
    wn = np.abs(osc)
    order = np.argsort(wn)
    return wn[order] / (2 * np.pi), -osc.real[order] / wn[order]


def dominant_mode_hz(A, T):
    """Frequency of the least damped oscillatory mode (Hz)."""
    z = np.linalg.eigvals(A)
    s = np.log(z.astype(complex)) / T
    osc = s[s.imag > 1e-9]
    if osc.size == 0:
        return float("nan")
    k = np.argmax(osc.real)
    return float(abs(osc[k]) / (2 * np.pi))


@njit(cache=True)
def _rollout_pair(x0, inputs, pv, scale, n_sub):
    """Re-scheduled LPV rollout and RK4 oracle rollout from ``x0``."""
    K = inputs.shape[0]
    T = pv[16]
    xl = np.empty((K + 1, 5))
    xt = np.empty((K + 1, 5))
    xl[0] = x0
    xt[0] = x0
    for k in range(K):
        A, B, E, c = _linearize(xl[k], pv, scale)
        xl[k + 1] = A @ xl[k] + B * inputs[k] + c
        xt[k + 1] = _rk4(xt[k], inputs[k], 0.0, pv, T / n_sub, n_sub)
    return xl, xt


def validate(samples, horizon, p, envelope=None, inputs=None, substeps=10, schedule_grid=None):
    """Compare the re-scheduled LPV model against the RK4 oracle.

    Parameters
    ----------
    samples : array_like (n, 5)
        Initial states.
    horizon : int
        Steps per rollout.
    p : PlantParams
    envelope : Envelope, optional
        Supplies the weights ``W = diag(1/c**2)``; identity otherwise.
    inputs : array_like (n, horizon), optional
        Commanded inputs per sample.  By default each sample holds its
        initial flap deflection, the input at which the model is linearised.
    schedule_grid : array_like (m, 5), optional
        Points used for the matrix-entry spread; defaults to ``samples``.

    Returns
    -------
    dict
        ``max_rel_traj_error`` is the largest over samples of
        ``sqrt(sum_k ||e_k||_W^2) / sqrt(sum_k ||x_k||_W^2)`` with ``e_k`` the
        LPV minus oracle state; ``max_matrix_deviation`` is
        ``max |A_ij(x) - A_ij(0)| / max |A_ij(0)|`` over the schedule points;
        ``dominant_mode_hz`` and ``modal_hz`` come from ``A`` at equilibrium;
        ``per_sample`` lists the individual errors.
    """
    X = check_states(samples, "samples")
    horizon = int(horizon)
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    U = np.repeat(X[:, 4:5], horizon, axis=1) if inputs is None else np.asarray(inputs, dtype=float)
    if U.shape != (X.shape[0], horizon):
        raise ValueError("inputs must have shape (n_samples, horizon)")
    p.check_actuator()
    scale = _scale_of(envelope)
    wts = np.ones(5) if envelope is None else envelope.weights
    pv = p.packed
    errors = []
    for x0, u in zip(X, U):
        xl, xt = _rollout_pair(x0, np.ascontiguousarray(u), pv, scale, substeps)
        num = np.sqrt(np.sum(wts * (xl - xt) ** 2))
        den = np.sqrt(np.sum(wts * xt**2))
        errors.append(0.0 if num == 0 else float(num / den) if den > 0 else float("inf"))
    A0 = _linearize(np.zeros(5), pv, scale)[0]
    grid = X if schedule_grid is None else check_states(schedule_grid, "schedule_grid")
    dev = 0.0
    for xs in grid:
        A = _linearize(xs, pv, scale)[0]
        dev = max(dev, float(np.max(np.abs(A - A0)) / np.max(np.abs(A0))))
    modal, _ = modal_frequencies(A0, p.sample_time)
    return {
        "max_rel_traj_error": max(errors),
        "max_matrix_deviation": dev,
        "dominant_mode_hz": dominant_mode_hz(A0, p.sample_time),
        "modal_hz": modal.tolist(),
        "horizon": horizon,
        "n_samples": int(X.shape[0]),
        "per_sample": errors,
    }


def write_report(path, report, header=None):
    doc = dict(report)
    if header:
        doc = {"config_hash": header, **doc}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")
