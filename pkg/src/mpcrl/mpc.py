"""Training-time MPC and certified safe control intervals.

The MPC is a condensed, move-blocked quadratic program over an LPV
prediction model frozen at the initial state::

    min   sum_j x_j' Q_j x_j + R_j u_j**2
    s.t.  x_lo <= x_j <= x_hi,   u_lo <= u_j <= u_hi

where ``x_j`` is the state at the end of block ``j`` (``block_length`` plant
samples with ``u_j`` held).  It is solved by an augmented Lagrangian on the
state box with an inner projected Newton method on the input box.

Safe intervals ``[u_min, u_max]`` are grown by bisection outward from the
first MPC input until the one-step (Euler) or two-step (Taylor) prediction
leaves the state box shrunk by a margin, then certified by probing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ._validation import check_state
from .exceptions import ConfigurationError, DomainError, InfeasibleError
from .plant import _step_euler, _step_taylor2

__all__ = [
    "MpcConfig",
    "MpcResult",
    "SafeBounds",
    "certify_bounding",
    "certify_and_shrink",
    "read_bounds_jsonl",
    "safe_bounds",
    "solve_mpc",
    "solve_box_qp",
    "write_bounds_jsonl",
]

DELAY_STEPS = 2


@dataclass(frozen=True)
class MpcConfig:
    """Finite-horizon MPC settings.

    Parameters
    ----------
    horizon : int
        Number of input blocks ``N``; must be at least the delay horizon (2).
    block_length : int
        Plant samples per input block ``M``.  The prediction covers ``N * M``
        samples; cost and state constraints are imposed at block ends.
    Q : array_like (n,) or (n, n)
        Stage weight per plant sample (PSD).
    R : float
        Input weight per plant sample (> 0).
    Qf : array_like, optional
        Terminal weight, defaults to ``Q``.
    x_lo, x_hi : array_like (n,)
        State box.
    u_lo, u_hi : float
        Input box.
    tol : float
        Tolerance on the KKT residual (state residuals normalised by the box
        half-widths).
    max_iter : int
        Augmented-Lagrangian outer iterations.
    margin_fraction : float
        Safety margin inside the state box used by :func:`safe_bounds`, as a
        fraction of each half-width.
    n_probe : int
        Probe inputs per interval in :func:`certify_bounding`.
    """

    horizon: int = 25
    block_length: int = 20
    Q: np.ndarray = None
    R: float = 1.0
    Qf: np.ndarray = None
    x_lo: np.ndarray = None
    x_hi: np.ndarray = None
    u_lo: float = -1.0
    u_hi: float = 1.0
    tol: float = 1e-8
    max_iter: int = 60
    margin_fraction: float = 0.02
    n_probe: int = 17
    bisect_tol: float = 1e-9

    def __post_init__(self):
        if self.x_lo is None or self.x_hi is None:
            raise ConfigurationError("state box is required")
        lo = np.asarray(self.x_lo, dtype=float)
        hi = np.asarray(self.x_hi, dtype=float)
        n = lo.shape[0]
        if lo.shape != (n,) or hi.shape != (n,) or np.any(hi <= lo):
            raise ConfigurationError("degenerate state box")
        Q = np.eye(n) if self.Q is None else np.asarray(self.Q, dtype=float)
        if Q.ndim == 1:
            Q = np.diag(Q)
        Qf = Q if self.Qf is None else np.asarray(self.Qf, dtype=float)
        if Qf.ndim == 1:
            Qf = np.diag(Qf)
        for name, M in (("Q", Q), ("Qf", Qf)):
            if M.shape != (n, n) or not np.allclose(M, M.T):
                raise ConfigurationError(f"{name} must be a symmetric {n}x{n} matrix")
            if np.linalg.eigvalsh(M).min() < -1e-12 * max(1.0, np.abs(M).max()):
                raise ConfigurationError(f"{name} must be positive semidefinite")
        if not self.R > 0:
            raise ConfigurationError("R must be positive")
        if self.horizon < DELAY_STEPS:
            raise ConfigurationError(f"horizon must be >= {DELAY_STEPS}")
        if self.block_length < 1:
            raise ConfigurationError("block_length must be >= 1")
        if not self.u_hi > self.u_lo:
            raise ConfigurationError("degenerate input box")
        if not 0 <= self.margin_fraction < 0.5:
            raise ConfigurationError("margin_fraction must lie in [0, 0.5)")
        if self.n_probe < 2:
            raise ConfigurationError("n_probe must be >= 2")
        for k, v in (("x_lo", lo), ("x_hi", hi), ("Q", Q), ("Qf", Qf)):
            v = np.ascontiguousarray(v)
            v.setflags(write=False)
            object.__setattr__(self, k, v)
        object.__setattr__(self, "u_lo", float(self.u_lo))
        object.__setattr__(self, "u_hi", float(self.u_hi))
        object.__setattr__(self, "R", float(self.R))

    @classmethod
    def from_envelope(cls, envelope, **kw):
        kw.setdefault("Q", envelope.weights)
        return cls(
            x_lo=envelope.lo, x_hi=envelope.hi, u_lo=envelope.input_lo, u_hi=envelope.input_hi, **kw
        )

    @property
    def n_steps(self):
        return self.horizon * self.block_length

    @property
    def half_width(self):
        return 0.5 * (self.x_hi - self.x_lo)

    @property
    def margin(self):
        return self.margin_fraction * self.half_width

    def replace(self, **kw):
        data = {k: getattr(self, k) for k in self.__dataclass_fields__}
        data.update(kw)
        return MpcConfig(**data)


@dataclass
class MpcResult:
    """Solution of one MPC problem.

    ``u_blocks`` holds the ``N`` block inputs and ``u`` their expansion to
    plant samples; ``feasible`` is ``False`` when no admissible input keeps
    the predicted block-end states in the box (the infeasibility marker).
    """

    u_blocks: np.ndarray
    u: np.ndarray
    feasible: bool
    kkt_residual: float
    iterations: int
    cost: float
    x_pred: np.ndarray = field(repr=False, default=None)
    multipliers: np.ndarray = field(repr=False, default=None)

    @property
    def u0(self):
        return float(self.u_blocks[0])


# --------------------------------------------------------------------------
# condensing
# --------------------------------------------------------------------------


@njit(cache=True)
def _condense_parts(A, B, E, c, x0, gust, N, M):
    """Block-end free response ``r`` and the impulse columns of ``Gamma``.

    ``cols[d]`` is the effect of one block input on the state ``d`` block
    ends later, so ``Gamma[j, i] = cols[j - i]`` for ``i <= j``.
    """
    n = A.shape[0]
    AM = np.eye(n)
    Bb = np.zeros(n)
    tmp = np.empty(n)
    tmpm = np.empty((n, n))
    for _ in range(M):
        for i in range(n):
            acc = B[i]
            for k in range(n):
                acc += A[i, k] * Bb[k]
            tmp[i] = acc
        Bb[:] = tmp
        for i in range(n):
            for q in range(n):
                acc = 0.0
                for k in range(n):
                    acc += A[i, k] * AM[k, q]
                tmpm[i, q] = acc
        AM[:, :] = tmpm
    r = np.empty(N * n)
    x = x0.copy()
    y = np.empty(n)
    for j in range(N):
        for s in range(M):
            w = gust[j * M + s]
            for i in range(n):
                acc = E[i] * w + c[i]
                for k in range(n):
                    acc += A[i, k] * x[k]
                y[i] = acc
            x, y = y, x
        for i in range(n):
            r[j * n + i] = x[i]
    cols = np.empty((N, n))
    col = Bb.copy()
    for d in range(N):
        cols[d] = col
        for i in range(n):
            acc = 0.0
            for k in range(n):
                acc += AM[i, k] * col[k]
            tmp[i] = acc
        col[:] = tmp
    return cols, r


@njit(cache=True)
def _condense(A, B, E, c, x0, gust, N, M):
    """Block-end prediction ``X = Gamma U + r`` of the frozen affine model."""
    n = A.shape[0]
    cols, r = _condense_parts(A, B, E, c, x0, gust, N, M)
    Gam = np.zeros((N * n, N))
    for j in range(N):
        for i in range(j + 1):
            for q in range(n):
                Gam[j * n + q, i] = cols[j - i, q]
    return Gam, r


@njit(cache=True)
def _build_qp(A, B, E, c, x0, gust, N, M, Q, Qf, R, x_lo, x_hi):
    n = A.shape[0]
    cols, r = _condense_parts(A, B, E, c, x0, gust, N, M)
    # weighted columns: WC[j, d] = W_j cols[d], W_j = Qf at the last block end
    WC = np.empty((N, n))
    WCf = np.empty((N, n))
    for d in range(N):
        for i in range(n):
            a1 = 0.0
            a2 = 0.0
            for k in range(n):
                a1 += Q[i, k] * cols[d, k]
                a2 += Qf[i, k] * cols[d, k]
            WC[d, i] = a1
            WCf[d, i] = a2
    Wr = np.empty(N * n)
    for j in range(N):
        for i in range(n):
            acc = 0.0
            for k in range(n):
                W_ik = Qf[i, k] if j == N - 1 else Q[i, k]
                acc += W_ik * r[j * n + k]
            Wr[j * n + i] = acc
    H = np.zeros((N, N))
    g = np.zeros(N)
    last = N - 1
    for a in range(N):
        for b in range(a + 1):
            acc = 0.0
            for j in range(a, last):
                for q in range(n):
                    acc += cols[j - a, q] * WC[j - b, q]
            for q in range(n):
                acc += cols[last - a, q] * WCf[last - b, q]
            H[a, b] = M * acc
            H[b, a] = M * acc
        acc = 0.0
        for j in range(a, N):
            for q in range(n):
                acc += cols[j - a, q] * Wr[j * n + q]
        g[a] = M * acc
    for i in range(N):
        H[i, i] += M * R
    const = M * (r @ Wr)
    Gam = np.zeros((N * n, N))
    G = np.zeros((N * n, N))
    glo = np.empty(N * n)
    ghi = np.empty(N * n)
    for j in range(N):
        for q in range(n):
            sc = 2.0 / (x_hi[q] - x_lo[q])
            row = j * n + q
            for i in range(j + 1):
                v = cols[j - i, q]
                Gam[row, i] = v
                G[row, i] = v * sc
            glo[row] = (x_lo[q] - r[row]) * sc
            ghi[row] = (x_hi[q] - r[row]) * sc
    return H, g, G, glo, ghi, Gam, r, const


# --------------------------------------------------------------------------
# box-constrained QP with two-sided linear constraints
# --------------------------------------------------------------------------


@njit(cache=True)
def _al_terms(G, U, y, rho, glo, ghi):
    z = G @ U + y / rho
    p = np.minimum(np.maximum(z, glo), ghi)
    return z, p


@njit(cache=True)
def _phi(H, g, G, U, y, rho, glo, ghi):
    z, p = _al_terms(G, U, y, rho, glo, ghi)
    e = z - p
    return 0.5 * U @ (H @ U) + g @ U + 0.5 * rho * (e @ e)


@njit(cache=True)
def _inner(H, g, G, U, y, rho, glo, ghi, lo, hi, tol, max_inner):
    n = U.shape[0]
    it = 0
    pgn = np.inf
    for it in range(max_inner):
        z, p = _al_terms(G, U, y, rho, glo, ghi)
        e = z - p
        grad = H @ U + g + rho * (G.T @ e)
        pg = U - np.minimum(np.maximum(U - grad, lo), hi)
        pgn = np.max(np.abs(pg))
        if pgn <= tol:
            break
        eps = min(pgn, 1e-6)
        active = np.zeros(n, dtype=np.bool_)
        for j in range(n):
            if (U[j] <= lo[j] + eps and grad[j] > 0) or (U[j] >= hi[j] - eps and grad[j] < 0):
                active[j] = True
        outside = np.abs(e) > 0.0
        Hg = H.copy()
        for i in range(G.shape[0]):
            if outside[i]:
                gi = G[i]
                Hg += rho * np.outer(gi, gi)
        free = np.where(~active)[0]
        d = np.zeros(n)
        for j in range(n):
            if active[j]:
                d[j] = -grad[j] / max(Hg[j, j], 1e-300)
        if free.size > 0:
            Hff = np.empty((free.size, free.size))
            gf = np.empty(free.size)
            for a in range(free.size):
                gf[a] = grad[free[a]]
                for b in range(free.size):
                    Hff[a, b] = Hg[free[a], free[b]]
            for a in range(free.size):
                Hff[a, a] += 1e-14 * (1.0 + abs(Hff[a, a]))
            df = np.linalg.solve(Hff, -gf)
            for a in range(free.size):
                d[free[a]] = df[a]
        f0 = _phi(H, g, G, U, y, rho, glo, ghi)
        alpha = 1.0
        accepted = False
        for _ls in range(40):
            Un = np.minimum(np.maximum(U + alpha * d, lo), hi)
            fn = _phi(H, g, G, Un, y, rho, glo, ghi)
            if fn <= f0 + 1e-4 * (grad @ (Un - U)) + 1e-15 * abs(f0):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # fall back to a projected-gradient step with the Lipschitz step size
            L = 0.0
            for j in range(n):
                L += abs(Hg[j, j])
            Un = np.minimum(np.maximum(U - grad / max(L, 1e-300), lo), hi)
        if np.max(np.abs(Un - U)) == 0.0:
            break
        U = Un
    return U, pgn, it + 1


@njit(cache=True)
def _solve_qp(H, g, G, glo, ghi, lo, hi, U0, y0, tol, max_outer, max_inner):
    U = np.minimum(np.maximum(U0.copy(), lo), hi)
    y = y0.copy()
    m = G.shape[0]
    hdiag = 0.0
    for j in range(H.shape[0]):
        hdiag = max(hdiag, H[j, j])
    gnorm = 0.0
    for i in range(m):
        gnorm = max(gnorm, G[i] @ G[i])
    rho = 10.0 * max(hdiag, 1e-12) / max(gnorm, 1e-300) if m > 0 else 1.0
    prev_viol = np.inf
    total = 0
    viol = 0.0
    kkt = np.inf
    for outer in range(max_outer):
        U, pgn, it = _inner(H, g, G, U, y, rho, glo, ghi, lo, hi, 0.1 * tol, max_inner)
        total += it
        s = G @ U
        viol = 0.0
        for i in range(m):
            viol = max(viol, glo[i] - s[i], s[i] - ghi[i])
        z = s + y / rho
        y = rho * (z - np.minimum(np.maximum(z, glo), ghi))
        grad_l = H @ U + g + G.T @ y
        stat = np.max(np.abs(U - np.minimum(np.maximum(U - grad_l, lo), hi))) if U.shape[0] > 0 else 0.0
        kkt = max(stat, viol)
        if kkt <= tol:
            return U, y, kkt, total, True
        if viol > 0.25 * prev_viol:
            rho *= 10.0
        prev_viol = viol
        if rho > 1e14:
            break
    return U, y, kkt, total, viol <= tol


def solve_box_qp(H, g, G=None, g_lo=None, g_hi=None, lo=None, hi=None, x0=None, y0=None, tol=1e-8, max_iter=60, max_inner=200):
    """Minimise ``0.5 U'HU + g'U`` s.t. ``lo <= U <= hi`` and ``g_lo <= G U <= g_hi``.

    Returns ``(U, y, kkt_residual, iterations, converged)`` where ``y`` are
    the multipliers of the general constraints.
    """
    H = np.ascontiguousarray(H, dtype=float)
    g = np.ascontiguousarray(g, dtype=float)
    n = g.shape[0]
    G = np.zeros((0, n)) if G is None else np.ascontiguousarray(G, dtype=float)
    m = G.shape[0]
    g_lo = np.full(m, -np.inf) if g_lo is None else np.asarray(g_lo, dtype=float)
    g_hi = np.full(m, np.inf) if g_hi is None else np.asarray(g_hi, dtype=float)
    lo = np.full(n, -np.inf) if lo is None else np.broadcast_to(np.asarray(lo, dtype=float), (n,)).copy()
    hi = np.full(n, np.inf) if hi is None else np.broadcast_to(np.asarray(hi, dtype=float), (n,)).copy()
    U0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    y0 = np.zeros(m) if y0 is None else np.asarray(y0, dtype=float)
    return _solve_qp(H, g, G, g_lo, g_hi, lo, hi, U0, y0, tol, max_iter, max_inner)


def _qp_matrices(model, x0, gust, cfg):
    A = np.ascontiguousarray(model.A, dtype=float)
    n = A.shape[0]

    def vec(v):
        return np.zeros(n) if v is None else np.ascontiguousarray(np.reshape(v, n), dtype=float)

    return _build_qp(
        A, vec(model.B), vec(getattr(model, "E", None)), vec(getattr(model, "c", None)),
        x0, gust, cfg.horizon, cfg.block_length, cfg.Q, cfg.Qf, cfg.R, cfg.x_lo, cfg.x_hi,
    )


def solve_mpc_blocks(A, B, E, c, x0, gust, cfg: MpcConfig, warm_start):
    """Block inputs and feasibility flag for an affine model, unchecked.

    Same computation as :func:`solve_mpc` for a validated ``x0`` inside the
    box and contiguous float arrays; meant for receding-horizon loops.
    """
    H, g, G, glo, ghi, _, _, _ = _build_qp(
        A, B, E, c, x0, gust, cfg.horizon, cfg.block_length, cfg.Q, cfg.Qf, cfg.R, cfg.x_lo, cfg.x_hi,
    )
    N = cfg.horizon
    U, _, _, _, ok = _solve_qp(
        H, g, G, glo, ghi, np.full(N, cfg.u_lo), np.full(N, cfg.u_hi), warm_start,
        np.zeros(G.shape[0]), cfg.tol, cfg.max_iter, 200,
    )
    return U, bool(ok)


def solve_mpc(x0, gust, cfg: MpcConfig, model, warm_start=None, multipliers=None):
    """Solve the move-blocked MPC problem from ``x0``.

    Parameters
    ----------
    x0 : array_like (n,)
        Initial state; must lie in the state box.
    gust : array_like
        Known disturbance samples, at least ``horizon * block_length``.
    cfg : MpcConfig
    model : object with attributes ``A``, ``B`` and optionally ``E``, ``c``
        Frozen (LPV) prediction model, e.g. :class:`~mpcrl.lpv.LpvModel`.
    warm_start : array_like (N,), optional
        Initial block inputs.

    Returns
    -------
    MpcResult
    """
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise DomainError("x0 contains non-finite values")
    if x0.shape != cfg.x_lo.shape:
        raise DomainError(f"x0 must have shape {cfg.x_lo.shape}")
    if np.any(x0 < cfg.x_lo) or np.any(x0 > cfg.x_hi):
        raise DomainError("x0 outside the state box")
    gust = np.asarray(gust, dtype=float)
    if gust.shape[0] < cfg.n_steps:
        raise ConfigurationError(f"gust segment needs {cfg.n_steps} samples, got {gust.shape[0]}")
    gust = np.ascontiguousarray(gust[: cfg.n_steps])
    H, g, G, glo, ghi, Gam, r, const = _qp_matrices(model, x0, gust, cfg)
    N = cfg.horizon
    lo = np.full(N, cfg.u_lo)
    hi = np.full(N, cfg.u_hi)
    U0 = np.zeros(N) if warm_start is None else np.asarray(warm_start, dtype=float)
    y0 = np.zeros(G.shape[0]) if multipliers is None else np.asarray(multipliers, dtype=float)
    U, y, kkt, iters, ok = _solve_qp(H, g, G, glo, ghi, lo, hi, U0, y0, cfg.tol, cfg.max_iter, 200)
    cost = float(0.5 * U @ H @ U + g @ U) * 2.0 + const
    x_pred = (Gam @ U + r).reshape(N, -1)
    return MpcResult(
        u_blocks=U,
        u=np.repeat(U, cfg.block_length),
        feasible=bool(ok),
        kkt_residual=float(kkt),
        iterations=int(iters),
        cost=cost,
        x_pred=x_pred,
        multipliers=y,
    )


# --------------------------------------------------------------------------
# safe control intervals
# --------------------------------------------------------------------------


@dataclass
class SafeBounds:
    """Certified control interval for one (state, disturbance) pair.

    ``x_traj_min`` / ``x_traj_max`` have shape ``(3, 5)``: the state at
    ``k``, ``k+1`` and ``k+2``, element-wise min / max of the trajectories
    under ``u_min`` and ``u_max``.
    """

    u_star: float
    u_min: float
    u_max: float
    x_traj_min: np.ndarray
    x_traj_max: np.ndarray
    d: float
    verified: bool = False
    x0: np.ndarray = None
    gust_seed: int | None = None
    pair_id: int | None = None

    @property
    def width(self):
        return self.u_max - self.u_min

    def to_record(self):
        return {
            "pair_id": self.pair_id,
            "x0": np.asarray(self.x0).tolist(),
            "gust_seed": self.gust_seed,
            "d": self.d,
            "u_star": self.u_star,
            "u_min": self.u_min,
            "u_max": self.u_max,
            "x_traj_min": np.asarray(self.x_traj_min).tolist(),
            "x_traj_max": np.asarray(self.x_traj_max).tolist(),
            "verified": self.verified,
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            u_star=rec["u_star"],
            u_min=rec["u_min"],
            u_max=rec["u_max"],
            x_traj_min=np.array(rec["x_traj_min"]),
            x_traj_max=np.array(rec["x_traj_max"]),
            d=rec["d"],
            verified=rec["verified"],
            x0=np.array(rec["x0"]),
            gust_seed=rec["gust_seed"],
            pair_id=rec["pair_id"],
        )


@njit(cache=True)
def _predict2(x0, u, d, pv, scale):
    out = np.empty((3, 5))
    out[0] = x0
    out[1] = _step_euler(x0, u, d, pv)
    out[2] = _step_taylor2(x0, u, d, pv, scale)
    return out


@njit(cache=True)
def _inside(traj, lo, hi):
    for k in range(1, traj.shape[0]):
        for i in range(traj.shape[1]):
            if traj[k, i] < lo[i] or traj[k, i] > hi[i]:
                return False
    return True


@njit(cache=True)
def _grow(x0, u_star, u_edge, d, pv, scale, lo, hi, tol):
    """Largest safe input between ``u_star`` (safe) and ``u_edge``."""
    if _inside(_predict2(x0, u_edge, d, pv, scale), lo, hi):
        return u_edge
    a = u_star
    b = u_edge
    while abs(b - a) > tol:
        m = 0.5 * (a + b)
        if _inside(_predict2(x0, m, d, pv, scale), lo, hi):
            a = m
        else:
            b = m
    return a


def plant_predictor(p, scale=None):
    """``(x0, u, d) -> (3, 5)`` trajectory: ``x0``, Euler ``k+1``, Taylor ``k+2``."""
    scale = np.ones(5) if scale is None else np.asarray(scale, dtype=float)
    pv = p.packed

    def predict(x0, u, d):
        return _predict2(np.asarray(x0, dtype=float), float(u), float(d), pv, scale)

    return predict


def _bounding(predict, x0, d, u_min, u_max):
    t1 = predict(x0, u_min, d)
    t2 = predict(x0, u_max, d)
    return np.minimum(t1, t2), np.maximum(t1, t2)


def safe_bounds(x0, gust, cfg: MpcConfig, p, model=None, u_star=None, mpc_result=None):
    """Safe control interval around the MPC optimum.

    Parameters
    ----------
    x0 : array_like (5,)
    gust : array_like or GustProfile
        Disturbance realization; its first sample is held over the two-step
        prediction and the whole segment feeds the MPC.
    cfg : MpcConfig
        Supplies the state/input boxes and the margin.
    p : PlantParams
    model : LpvModel, optional
        Prediction model for the MPC; linearised at ``x0`` if omitted.
    u_star : float, optional
        Centre input; skips the MPC solve when given.

    Returns
    -------
    SafeBounds
        Not yet verified; see :func:`certify_bounding`.

    Raises
    ------
    InfeasibleError
        When the MPC is infeasible or the prediction under ``u_star`` already
        leaves the margin-shrunk box.
    """
    from .lpv import linearize_model

    x0 = check_state(x0, "x0")
    samples = np.asarray(getattr(gust, "samples", gust), dtype=float)
    seed = getattr(gust, "seed", None)
    if u_star is None:
        if mpc_result is None:
            if model is None:
                model = linearize_model(x0, p)
            mpc_result = solve_mpc(x0, samples, cfg, model)
        if not mpc_result.feasible:
            raise InfeasibleError("MPC infeasible at this state and disturbance")
        u_star = mpc_result.u0
    u_star = float(np.clip(u_star, cfg.u_lo, cfg.u_hi))
    d = float(samples[0])
    pv = p.packed
    scale = cfg.half_width
    lo = cfg.x_lo + cfg.margin
    hi = cfg.x_hi - cfg.margin
    if not _inside(_predict2(x0, u_star, d, pv, scale), lo, hi):
        raise InfeasibleError("prediction under the MPC input leaves the safe box")
    tol = cfg.bisect_tol * (cfg.u_hi - cfg.u_lo)
    u_max = _grow(x0, u_star, cfg.u_hi, d, pv, scale, lo, hi, tol)
    u_min = _grow(x0, u_star, cfg.u_lo, d, pv, scale, lo, hi, tol)
    tmin, tmax = _bounding(plant_predictor(p, scale), x0, d, u_min, u_max)
    return SafeBounds(u_star, u_min, u_max, tmin, tmax, d, False, x0.copy(), seed)


def certify_bounding(x0, bounds: SafeBounds, gust, p=None, n_probe=17, predictor=None, scale=None, rtol=1e-12):
    """Probe the interval and check the bounding inequality at ``k+1``, ``k+2``.

    Parameters
    ----------
    x0 : array_like
    bounds : SafeBounds
    gust : float or array_like
        Held disturbance (its first sample if a sequence).
    p : PlantParams, optional
        Used to build the default plant predictor.
    n_probe : int
        Equally spaced probe inputs in ``[u_min, u_max]`` (endpoints included).
    predictor : callable ``(x0, u, d) -> (3, n)``, optional
        Trajectory model; overrides ``p``.
    scale : array_like (5,), optional
        Finite-difference scale of the default plant predictor; must match
        the one used to build ``bounds``.
    rtol : float
        Round-off allowance relative to the local state magnitude.

    Returns
    -------
    bool
        ``True`` iff ``x_traj_min <= x(kappa) <= x_traj_max`` element-wise
        for every probe.
    """
    d = float(np.ravel(np.asarray(getattr(gust, "samples", gust), dtype=float))[0])
    x0 = np.asarray(x0, dtype=float)
    if bounds.u_min > bounds.u_max:
        return False
    if predictor is None:
        if p is None:
            raise ConfigurationError("either p or predictor is required")
        scale = np.ones(5) if scale is None else np.asarray(scale, dtype=float)
        return bool(_certify_plant(
            x0, float(bounds.u_min), float(bounds.u_max), d, p.packed, scale,
            np.asarray(bounds.x_traj_min, dtype=float), np.asarray(bounds.x_traj_max, dtype=float),
            int(n_probe), rtol,
        ))
    slack = rtol * (1.0 + np.maximum(np.abs(bounds.x_traj_min), np.abs(bounds.x_traj_max)))
    for u in np.linspace(bounds.u_min, bounds.u_max, n_probe):
        traj = np.asarray(predictor(x0, u, d))
        if np.any(traj[1:] < bounds.x_traj_min[1:] - slack[1:]) or np.any(traj[1:] > bounds.x_traj_max[1:] + slack[1:]):
            return False
    return True


@njit(cache=True)
def _certify_plant(x0, u_min, u_max, d, pv, scale, tmin, tmax, n_probe, rtol):
    for q in range(n_probe):
        u = u_min + (u_max - u_min) * q / (n_probe - 1) if n_probe > 1 else u_min
        if q == n_probe - 1:
            u = u_max
        traj = _predict2(x0, u, d, pv, scale)
        for k in range(1, 3):
            for i in range(5):
                slack = rtol * (1.0 + max(abs(tmin[k, i]), abs(tmax[k, i])))
                if traj[k, i] < tmin[k, i] - slack or traj[k, i] > tmax[k, i] + slack:
                    return False
    return True


def certify_and_shrink(x0, bounds: SafeBounds, gust, p=None, n_probe=17, predictor=None, max_shrink=40, scale=None):
    """Certify, halving the interval toward ``u_star`` on failure.

    Returns the verified bounds or raises :class:`InfeasibleError` when even
    the degenerate interval ``[u_star, u_star]`` fails.
    """
    kw = {"p": p, "scale": scale} if predictor is None else {"predictor": predictor}
    if predictor is None:
        predictor = plant_predictor(p, scale)
    d = float(np.ravel(np.asarray(getattr(gust, "samples", gust), dtype=float))[0])
    b = bounds
    for _ in range(max_shrink + 1):
        if certify_bounding(x0, b, d, n_probe=n_probe, **kw):
            b.verified = True
            return b
        u_min = b.u_star - 0.5 * (b.u_star - b.u_min)
        u_max = b.u_star + 0.5 * (b.u_max - b.u_star)
        tmin, tmax = _bounding(predictor, np.asarray(x0, dtype=float), d, u_min, u_max)
        b = SafeBounds(b.u_star, u_min, u_max, tmin, tmax, b.d, False, b.x0, b.gust_seed, b.pair_id)
    b = SafeBounds(b.u_star, b.u_star, b.u_star, *_bounding(predictor, np.asarray(x0, dtype=float), d, b.u_star, b.u_star), b.d, False, b.x0, b.gust_seed, b.pair_id)
    if certify_bounding(x0, b, d, n_probe=n_probe, **kw):
        b.verified = True
        return b
    raise InfeasibleError("bounding trajectories cannot be certified")


def write_bounds_jsonl(path, bounds_list, header=None):
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for b in bounds_list:
            fh.write(json.dumps(b.to_record()) + "\n")


def read_bounds_jsonl(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            out.append(SafeBounds.from_record(json.loads(line)))
    return out
