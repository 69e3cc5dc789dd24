"""Nonlinear aeroelastic typical section with a first-order flap actuator.

State ``x = [h, theta, v_h, v_theta, beta_f]`` (plunge positive down), scalar
commanded flap deflection ``u`` and scalar vertical gust ``w``.  Structural
equations of the 2-DOF section::

    [m  S] [h'' ]   [-c_h v_h - k_h h - L            ]
    [S  I] [th''] = [-c_th v_th - k_th(th) th + M     ]

with quasi-steady aerodynamics linear in the effective angle of attack and
in the flap angle, ``k_th(th) = sum_j k_j th**j`` and actuator lag
``beta' = lambda (u - beta)``.

The hot kernels are compiled with numba; the public functions validate
their inputs and dispatch to them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from numba import njit

from ._validation import check_scalar_finite, check_state
from .exceptions import ConfigurationError, DomainError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = [
    "PlantParams",
    "SimulationResult",
    "actuator_step",
    "alpha_eff",
    "default_params",
    "deriv",
    "jacobians",
    "rk4_step",
    "simulate",
    "step_euler",
    "step_taylor2",
    "taylor_fidelity",
]

DEFAULT_PLANT_FILE = Path(__file__).parent / "data" / "plant.toml"
TIMESERIES_HEADER = ["k", "t", "h", "theta", "v_h", "v_theta", "beta_f", "u", "w"]

# Finite-difference perturbation, relative to the per-component scale.
FD_REL_STEP = 1e-6

# Layout of the packed parameter vector used by the compiled kernels.
_I_MASS, _I_S, _I_INERTIA, _I_CH, _I_CTH, _I_KH = 0, 1, 2, 3, 4, 5
_I_RHO, _I_V, _I_B, _I_SPAN, _I_AOFF = 6, 7, 8, 9, 10
_I_CLA, _I_CMA, _I_CLB, _I_CMB, _I_LAM, _I_T = 11, 12, 13, 14, 15, 16
_N_FIXED = 17


@dataclass(frozen=True)
class PlantParams:
    """Physical parameters of the typical section.

    Units are SI; angles in radians.  ``pitch_stiffness`` holds polynomial
    coefficients ``[k0, k1, k2, ...]`` of ``k_theta(theta)``.
    """

    mass: float
    static_unbalance: float
    pitch_inertia: float
    plunge_damping: float
    pitch_damping: float
    plunge_stiffness: float
    pitch_stiffness: tuple
    air_density: float
    airspeed: float
    semichord: float
    span: float
    a_offset: float
    cl_alpha: float
    cm_alpha: float
    cl_beta: float
    cm_beta: float
    actuator_gain: float
    sample_time: float
    _packed: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "pitch_stiffness", tuple(float(c) for c in self.pitch_stiffness))
        for f in fields(self):
            if f.name in ("pitch_stiffness", "_packed"):
                continue
            value = getattr(self, f.name)
            if not np.isfinite(value):
                raise ConfigurationError(f"{f.name} must be finite")
        if not self.pitch_stiffness:
            raise ConfigurationError("pitch_stiffness needs at least one coefficient")
        if self.sample_time <= 0:
            raise ConfigurationError("sample_time must be positive")
        if self.actuator_gain <= 0:
            raise ConfigurationError("actuator_gain must be positive")
        if self.airspeed <= 0 or self.semichord <= 0:
            raise ConfigurationError("airspeed and semichord must be positive")
        det = self.mass * self.pitch_inertia - self.static_unbalance**2
        if self.mass <= 0 or self.pitch_inertia <= 0 or det <= 1e-12 * self.mass * self.pitch_inertia:
            raise ConfigurationError("structural mass matrix is singular or indefinite")
        packed = np.array(
            [
                self.mass, self.static_unbalance, self.pitch_inertia,
                self.plunge_damping, self.pitch_damping, self.plunge_stiffness,
                self.air_density, self.airspeed, self.semichord, self.span,
                self.a_offset, self.cl_alpha, self.cm_alpha, self.cl_beta,
                self.cm_beta, self.actuator_gain, self.sample_time,
                *self.pitch_stiffness,
            ],
            dtype=np.float64,
        )
        packed.setflags(write=False)
        object.__setattr__(self, "_packed", packed)

    @property
    def packed(self):
        return self._packed

    @property
    def T(self):
        return self.sample_time

    @property
    def lam(self):
        return self.actuator_gain

    def check_actuator(self):
        """Raise unless ``T * lambda < 1`` (convex actuator update)."""
        if self.sample_time * self.actuator_gain >= 1.0:
            raise ConfigurationError(
                f"T*lambda = {self.sample_time * self.actuator_gain:g} >= 1; "
                "the discrete actuator update is no longer a convex combination"
            )

    def replace(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return PlantParams(**data)

    def to_dict(self):
        data = asdict(self)
        data.pop("_packed")
        data["pitch_stiffness"] = list(self.pitch_stiffness)
        return data

    @classmethod
    def from_toml(cls, path=DEFAULT_PLANT_FILE):
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        table = doc.get("plant", doc)
        names = {f.name for f in fields(cls) if f.init}
        unknown = set(table) - names
        missing = names - set(table)
        if unknown or missing:
            raise ConfigurationError(
                f"{path}: unknown keys {sorted(unknown)}, missing keys {sorted(missing)}"
            )
        return cls(**table)


def default_params():
    """Parameters from the bundled ``plant.toml``."""
    return PlantParams.from_toml(DEFAULT_PLANT_FILE)


# --------------------------------------------------------------------------
# compiled kernels
# --------------------------------------------------------------------------


@njit(cache=True)
def _alpha_eff(theta, v_h, v_theta, w, pv):
    V = pv[_I_V]
    return (
        math.atan((V * math.sin(theta) - w) / (V * math.cos(theta)))
        + v_h / V
        + pv[_I_AOFF] * pv[_I_B] * v_theta / V
    )


@njit(cache=True)
def _deriv_into(x, u, w, pv, out):
    h, th, vh, vt, be = x[0], x[1], x[2], x[3], x[4]
    V = pv[_I_V]
    b = pv[_I_B]
    ae = _alpha_eff(th, vh, vt, w, pv)
    q = pv[_I_RHO] * V * V * b * pv[_I_SPAN]
    lift = q * (pv[_I_CLA] * ae + pv[_I_CLB] * be)
    moment = q * b * (pv[_I_CMA] * ae + pv[_I_CMB] * be)
    k_th = 0.0
    p = 1.0
    for j in range(_N_FIXED, pv.shape[0]):
        k_th += pv[j] * p
        p *= th
    fh = -pv[_I_CH] * vh - pv[_I_KH] * h - lift
    ft = -pv[_I_CTH] * vt - k_th * th + moment
    m, S, I = pv[_I_MASS], pv[_I_S], pv[_I_INERTIA]
    det = m * I - S * S
    out[0] = vh
    out[1] = vt
    out[2] = (I * fh - S * ft) / det
    out[3] = (-S * fh + m * ft) / det
    out[4] = pv[_I_LAM] * (u - be)


@njit(cache=True)
def _deriv(x, u, w, pv):
    out = np.empty(5)
    _deriv_into(x, u, w, pv, out)
    return out


@njit(cache=True)
def _deriv_batch(X, U, Wd, pv):
    out = np.empty_like(X)
    for n in range(X.shape[0]):
        _deriv_into(X[n], U[n], Wd[n], pv, out[n])
    return out


@njit(cache=True)
def _actuator(beta, u, pv):
    tl = pv[_I_T] * pv[_I_LAM]
    return (1.0 - tl) * beta + tl * u


@njit(cache=True)
def _step_euler(x, u, w, pv):
    f = _deriv(x, u, w, pv)
    T = pv[_I_T]
    out = np.empty(5)
    for i in range(4):
        out[i] = x[i] + T * f[i]
    out[4] = _actuator(x[4], u, pv)
    return out


@njit(cache=True)
def _step_euler_batch(X, U, Wd, pv):
    out = np.empty_like(X)
    for n in range(X.shape[0]):
        out[n] = _step_euler(X[n], U[n], Wd[n], pv)
    return out


@njit(cache=True)
def _jac_x(x, u, w, pv, scale):
    J = np.empty((5, 5))
    xp = x.copy()
    fp = np.empty(5)
    fm = np.empty(5)
    for j in range(5):
        hj = FD_REL_STEP * scale[j]
        xp[j] = x[j] + hj
        _deriv_into(xp, u, w, pv, fp)
        xp[j] = x[j] - hj
        _deriv_into(xp, u, w, pv, fm)
        xp[j] = x[j]
        for i in range(5):
            J[i, j] = (fp[i] - fm[i]) / (2.0 * hj)
    return J


@njit(cache=True)
def _jac_uw(x, u, w, pv, h_u, h_w):
    fp = _deriv(x, u + h_u, w, pv)
    fm = _deriv(x, u - h_u, w, pv)
    gp = _deriv(x, u, w + h_w, pv)
    gm = _deriv(x, u, w - h_w, pv)
    return (fp - fm) / (2.0 * h_u), (gp - gm) / (2.0 * h_w)


@njit(cache=True)
def _step_taylor2(x, u, w, pv, scale):
    T = pv[_I_T]
    f = _deriv(x, u, w, pv)
    J = _jac_x(x, u, w, pv, scale)
    out = np.empty(5)
    for i in range(5):
        jf = 0.0
        for j in range(5):
            jf += J[i, j] * f[j]
        out[i] = x[i] + 2.0 * T * f[i] + 2.0 * T * T * jf
    return out


@njit(cache=True)
def _step_taylor2_batch(X, U, Wd, pv, scale):
    out = np.empty_like(X)
    for n in range(X.shape[0]):
        out[n] = _step_taylor2(X[n], U[n], Wd[n], pv, scale)
    return out


@njit(cache=True)
def _rk4(x, u, w, pv, dt, n_sub):
    y = x.copy()
    k1 = np.empty(5)
    k2 = np.empty(5)
    k3 = np.empty(5)
    k4 = np.empty(5)
    tmp = np.empty(5)
    for _ in range(n_sub):
        _deriv_into(y, u, w, pv, k1)
        for i in range(5):
            tmp[i] = y[i] + 0.5 * dt * k1[i]
        _deriv_into(tmp, u, w, pv, k2)
        for i in range(5):
            tmp[i] = y[i] + 0.5 * dt * k2[i]
        _deriv_into(tmp, u, w, pv, k3)
        for i in range(5):
            tmp[i] = y[i] + dt * k3[i]
        _deriv_into(tmp, u, w, pv, k4)
        for i in range(5):
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return y


@njit(cache=True)
def _rollout_const(x0, u, gust, pv):
    """Euler rollout holding the commanded input; returns states (K+1, 5)."""
    K = gust.shape[0]
    traj = np.empty((K + 1, 5))
    traj[0] = x0
    for k in range(K):
        traj[k + 1] = _step_euler(traj[k], u, gust[k], pv)
    return traj


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------


def _prep(x, u, w):
    x = check_state(x)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(w))):
        raise DomainError("input or disturbance is non-finite")
    return x, u, w


def _dispatch(kernel, batch_kernel, x, u, w, p, *extra):
    x, u, w = _prep(x, u, w)
    pv = p.packed
    if x.ndim == 1:
        return kernel(x, float(u), float(w), pv, *extra)
    n = x.shape[0]
    U = np.broadcast_to(u, (n,)).astype(float)
    Wd = np.broadcast_to(w, (n,)).astype(float)
    return batch_kernel(np.ascontiguousarray(x), U, Wd, pv, *extra)


def alpha_eff(x, w, p):
    """Effective aeroelastic angle of attack (rad).

    ``atan((V sin(theta) - w) / (V cos(theta))) + v_h / V + a_offset b v_theta / V``;
    vectorised over leading axes of ``x`` and ``w``.
    """
    x = check_state(x)
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)):
        raise DomainError("gust is non-finite")
    th, vh, vt = x[..., 1], x[..., 2], x[..., 3]
    if np.any(np.abs(th) >= np.pi / 2):
        raise DomainError("|theta| must stay below pi/2")
    V, b = p.airspeed, p.semichord
    return (
        np.arctan((V * np.sin(th) - w) / (V * np.cos(th)))
        + vh / V
        + p.a_offset * b * vt / V
    )


def deriv(x, u, w, p):
    """Continuous-time state derivative ``f(x, u, w)``."""
    return _dispatch(_deriv, _deriv_batch, x, u, w, p)


def actuator_step(beta, u, p):
    """Discrete first-order actuator: ``(1 - T lam) beta + T lam u``."""
    p.check_actuator()
    tl = p.sample_time * p.actuator_gain
    return (1.0 - tl) * np.asarray(beta, dtype=float) + tl * np.asarray(u, dtype=float)


def step_euler(x, u, w, p):
    """One forward-Euler step; the flap channel uses :func:`actuator_step`."""
    p.check_actuator()
    return _dispatch(_step_euler, _step_euler_batch, x, u, w, p)


def _scale(scale):
    if scale is None:
        return np.ones(5)
    scale = np.asarray(scale, dtype=float)
    if scale.shape != (5,) or np.any(scale <= 0):
        raise ConfigurationError("scale must be 5 positive numbers")
    return scale


def step_taylor2(x, u, w, p, scale=None):
    """Second-order Taylor prediction two samples ahead.

    ``x + 2T f + 2T**2 (df/dx) f`` with input and disturbance held over the
    two samples, so the input and disturbance feedback Jacobians vanish.
    ``df/dx`` is a central finite difference with perturbation
    ``1e-6 * scale[j]`` in component ``j``.
    """
    return _dispatch(_step_taylor2, _step_taylor2_batch, x, u, w, p, _scale(scale))


def jacobians(x, u, w, p, scale=None):
    """Finite-difference Jacobians ``(df/dx, df/du, df/dw)`` at one point."""
    x, u, w = _prep(x, u, w)
    scale = _scale(scale)
    pv = p.packed
    Jx = _jac_x(x, float(u), float(w), pv, scale)
    Ju, Jw = _jac_uw(x, float(u), float(w), pv, FD_REL_STEP, FD_REL_STEP)
    return Jx, Ju, Jw


def rk4_step(x, u, w, p, dt=None, substeps=10):
    """Reference integration of the continuous dynamics over ``dt``.

    Classical RK4 with ``substeps`` equal sub-steps and ``u``, ``w`` held;
    ``dt`` defaults to the sample time.
    """
    x, u, w = _prep(x, u, w)
    dt = p.sample_time if dt is None else float(dt)
    h = dt / substeps
    if x.ndim == 1:
        return _rk4(x, float(u), float(w), p.packed, h, substeps)
    U = np.broadcast_to(u, (x.shape[0],))
    Wd = np.broadcast_to(w, (x.shape[0],))
    return np.stack([_rk4(xi, float(ui), float(wi), p.packed, h, substeps) for xi, ui, wi in zip(x, U, Wd)])


# --------------------------------------------------------------------------
# closed-loop simulation
# --------------------------------------------------------------------------


def taylor_fidelity(X, U, Wd, p, scale, substeps=20):
    """Two-step Taylor update against the RK4 oracle over ``2T``.

    Parameters
    ----------
    X : array_like (n, 5)
    U, Wd : array_like (n,)
        Held input and gust per sample.
    scale : array_like (5,)
        Normalisation constants ``c_i``; also the Jacobian probe scale.
    substeps : int
        RK4 substeps over the two samples.

    Returns
    -------
    ndarray (5,)
        Per component ``max_n |x_taylor - x_rk4| / c_i``.
    """
    X = check_state(X)
    X = np.atleast_2d(X)
    U = np.broadcast_to(np.asarray(U, dtype=float), X.shape[:1])
    Wd = np.broadcast_to(np.asarray(Wd, dtype=float), X.shape[:1])
    scale = np.asarray(scale, dtype=float)
    ta = np.atleast_2d(step_taylor2(X, U, Wd, p, scale))
    rk = np.stack([rk4_step(x, u, w, p, dt=2 * p.sample_time, substeps=substeps) for x, u, w in zip(X, U, Wd)])
    return np.max(np.abs(ta - rk) / scale, axis=0)


@dataclass
class SimulationResult:
    """Fixed-step closed-loop rollout.

    ``states`` has ``K + 1`` rows (including the final state); ``inputs``
    and ``gust`` have ``K`` rows.  ``aborted_at`` is the step index where the
    controller returned an inadmissible input, else ``None``.
    """

    T: float
    states: np.ndarray
    inputs: np.ndarray
    gust: np.ndarray
    aborted_at: int | None = None
    abort_reason: str = ""

    @property
    def t(self):
        return self.T * np.arange(self.states.shape[0])

    @property
    def n_steps(self):
        return self.inputs.shape[0]

    def to_csv(self, path, header_comment=None):
        write_timeseries_csv(path, self.T, self.states, self.inputs, self.gust, header_comment)


def write_timeseries_csv(path, T, states, inputs, gust, header_comment=None):
    K = len(inputs)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(TIMESERIES_HEADER)
        for k in range(K):
            writer.writerow([k, repr(k * T), *map(repr, states[k].tolist()), repr(float(inputs[k])), repr(float(gust[k]))])


def read_timeseries_csv(path):
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    if header != TIMESERIES_HEADER:
        raise ValueError(f"unexpected header {header}")
    for row in reader:
        rows.append([float(v) for v in row])
    return np.array(rows)


def simulate(x0, controller, gust, duration, p, input_box=None):
    """Closed-loop rollout at the sample rate ``1/T``.

    Parameters
    ----------
    x0 : array_like of shape (5,)
    controller : callable ``(k, x) -> u``
    gust : array_like
        Gust samples; at least ``duration / T`` of them.
    duration : float
        Must be an integer multiple of ``T``.
    input_box : (float, float), optional
        Admissible commanded-input interval; a non-finite or out-of-box
        command aborts the episode and is recorded.
    """
    p.check_actuator()
    x0 = check_state(x0, "x0")
    if x0.ndim != 1:
        raise DomainError("x0 must be a single state")
    n_float = float(duration) / p.sample_time
    K = int(round(n_float))
    if K < 0 or abs(n_float - K) > 1e-9 * max(1.0, n_float):
        raise ConfigurationError("duration must be a non-negative multiple of the sample time")
    gust = np.asarray(gust, dtype=float)
    if gust.shape[0] < K:
        raise ConfigurationError(f"gust has {gust.shape[0]} samples, need {K}")
    lo, hi = (-np.inf, np.inf) if input_box is None else input_box
    pv = p.packed
    states = np.empty((K + 1, 5))
    inputs = np.empty(K)
    states[0] = x0
    for k in range(K):
        u = controller(k, states[k].copy())
        u = check_scalar_finite(u, "u") if np.isfinite(u) else u
        if not np.isfinite(u) or u < lo or u > hi:
            reason = f"controller returned u={u!r} at k={k}"
            return SimulationResult(p.sample_time, states[: k + 1], inputs[:k], gust[:k], k, reason)
        inputs[k] = u
        states[k + 1] = _step_euler(states[k], u, gust[k], pv)
    return SimulationResult(p.sample_time, states, inputs, gust[:K].copy())
