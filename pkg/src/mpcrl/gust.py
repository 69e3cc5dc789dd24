"""Bounded Dryden vertical turbulence.

The first-order Dryden vertical-gust shaping filter ``sigma sqrt(2V/(pi L)) / (s + V/L)``
driven by unit white noise is sampled exactly at the plant rate, which
gives the stationary AR(1) recursion::

    w[k+1] = a w[k] + sigma sqrt(1 - a**2) n[k],    a = exp(-V T / L)

with ``n[k] ~ N(0, 1)``.  Samples are hard-clipped to ``[-w_max, w_max]``.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .exceptions import ConfigurationError

__all__ = [
    "GustConfig",
    "GustProfile",
    "dryden_generate",
    "dryden_raw",
    "episode_gust",
    "read_gust_csv",
    "training_ensemble",
    "write_gust_csv",
]


@dataclass(frozen=True)
class GustConfig:
    """Turbulence settings.

    Parameters
    ----------
    sigma : float
        Turbulence intensity ``sigma_w`` (m/s) used for evaluation gusts.
    length_scale : float
        Dryden scale length ``L_w`` (m).
    w_max : float, optional
        Clipping bound; defaults to ``3 * sigma``.
    sigma_max : float, optional
        Upper end of the stratified intensity range of training ensembles;
        defaults to ``sigma``.
    gust_duration, recovery_duration : float
        Episode shape: turbulence phase followed by calm recovery (s).
    n_realizations : int
        Training ensemble size per initial state.
    """

    sigma: float = 1.0
    length_scale: float = 50.0
    w_max: float | None = None
    sigma_max: float | None = None
    gust_duration: float = 5.0
    recovery_duration: float = 5.0
    n_realizations: int = 3

    def __post_init__(self):
        if self.w_max is None:
            object.__setattr__(self, "w_max", 3.0 * self.sigma)
        if self.sigma_max is None:
            object.__setattr__(self, "sigma_max", self.sigma)
        if self.sigma < 0 or self.sigma_max < 0:
            raise ConfigurationError("gust intensities must be non-negative")
        if self.length_scale <= 0 or self.w_max <= 0:
            raise ConfigurationError("length_scale and w_max must be positive")
        if self.gust_duration < 0 or self.recovery_duration < 0:
            raise ConfigurationError("durations must be non-negative")
        if self.n_realizations < 1:
            raise ConfigurationError("n_realizations must be >= 1")


@dataclass(frozen=True)
class GustProfile:
    samples: np.ndarray
    seed: int
    scale: float
    length_scale: float
    w_max: float

    def __len__(self):
        return len(self.samples)


def _check_positive(**kw):
    for name, value in kw.items():
        if not np.isfinite(value) or value <= 0:
            raise ConfigurationError(f"{name} must be positive, got {value}")


def dryden_raw(seed, n, V, sigma_w, L_w, T):
    """Unclipped Dryden samples, ``w[0]`` drawn from the stationary law."""
    rng = np.random.default_rng(seed)
    a = np.exp(-V * T / L_w)
    gain = sigma_w * np.sqrt(1.0 - a * a)
    drive = rng.standard_normal(n)
    drive[:1] *= sigma_w
    drive[1:] *= gain
    return lfilter([1.0], [1.0, -a], drive)


def dryden_generate(seed, duration, V, sigma_w, L_w, T, w_max=None):
    """Clipped Dryden gust profile of ``round(duration / T)`` samples.

    Parameters
    ----------
    seed : int
        Seed of the white-noise generator; equal seeds give identical output.
    duration, V, L_w, T : float
        Positive duration (s), airspeed (m/s), scale length (m), sample time (s).
    sigma_w : float
        Intensity (m/s); zero yields an all-zero profile.
    w_max : float, optional
        Clipping bound, ``3 * sigma_w`` by default.

    Returns
    -------
    GustProfile
    """
    _check_positive(duration=duration, V=V, L_w=L_w, T=T)
    if not np.isfinite(sigma_w) or sigma_w < 0:
        raise ConfigurationError("sigma_w must be non-negative")
    if w_max is None:
        w_max = 3.0 * sigma_w
    n = int(round(duration / T))
    if sigma_w == 0:
        samples = np.zeros(n)
    else:
        samples = np.clip(dryden_raw(seed, n, V, sigma_w, L_w, T), -w_max, w_max)
    return GustProfile(samples, int(seed), float(sigma_w), float(L_w), float(w_max))


def episode_gust(seed, cfg: GustConfig, V, T, sigma=None):
    """Turbulence phase followed by a zero-gust recovery phase."""
    sigma = cfg.sigma if sigma is None else sigma
    n_gust = int(round(cfg.gust_duration / T))
    n_rec = int(round(cfg.recovery_duration / T))
    if n_gust:
        g = dryden_generate(seed, cfg.gust_duration, V, sigma, cfg.length_scale, T, cfg.w_max).samples
    else:
        g = np.zeros(0)
    samples = np.concatenate([g, np.zeros(n_rec)])
    return GustProfile(samples, int(seed), float(sigma), cfg.length_scale, cfg.w_max)


def state_seed(x0, index, base_seed=0):
    """Deterministic 63-bit seed from the bytes of ``x0`` and an index."""
    x0 = np.ascontiguousarray(np.asarray(x0, dtype=np.float64))
    digest = hashlib.sha256(x0.tobytes() + int(index).to_bytes(8, "little") + int(base_seed).to_bytes(8, "little", signed=True)).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def ensemble_sigmas(n, sigma_max):
    """Midpoints of ``n`` equal intensity bands covering ``[0, sigma_max]``."""
    edges = np.linspace(0.0, sigma_max, n + 1)
    return 0.5 * (edges[:-1] + edges[1:]), edges


def training_ensemble(x0, n_realizations, cfg: GustConfig, V, T, duration, base_seed=0):
    """Representative gust realizations for one initial state.

    Intensities are stratified: realization ``i`` uses the midpoint of the
    ``i``-th of ``n`` equal bands of ``[0, sigma_max]``; seeds are derived
    from the bytes of ``x0`` and ``i``.
    """
    if n_realizations < 1:
        raise ConfigurationError("n_realizations must be >= 1")
    sigmas, _ = ensemble_sigmas(n_realizations, cfg.sigma_max)
    out = []
    for i, s in enumerate(sigmas):
        seed = state_seed(x0, i, base_seed)
        out.append(dryden_generate(seed, duration, V, float(s), cfg.length_scale, T, cfg.w_max))
    return out


def write_gust_csv(path, profile, header_comment=None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["k", "w"])
        for k, w in enumerate(np.asarray(getattr(profile, "samples", profile)).tolist()):
            writer.writerow([k, repr(w)])


def read_gust_csv(path):
    with open(path, newline="") as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(rows)
    header = next(reader)
    if header != ["k", "w"]:
        raise ValueError(f"unexpected header {header}")
    return np.array([float(r[1]) for r in reader])
