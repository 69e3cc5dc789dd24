"""Admissible state and input boxes."""

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError

STATE_NAMES = ("h", "theta", "v_h", "v_theta", "beta_f")


@dataclass(frozen=True)
class Envelope:
    """Box constraints ``X`` on the state and ``U`` on the commanded input.

    Parameters
    ----------
    state_lo, state_hi : array_like of shape (5,)
        Element-wise bounds on ``[h, theta, v_h, v_theta, beta_f]``.
    input_lo, input_hi : float
        Actuator box for the commanded flap deflection (rad).
    """

    state_lo: tuple
    state_hi: tuple
    input_lo: float
    input_hi: float

    def __post_init__(self):
        lo = np.asarray(self.state_lo, dtype=float)
        hi = np.asarray(self.state_hi, dtype=float)
        if lo.shape != (5,) or hi.shape != (5,):
            raise ConfigurationError("state bounds must have 5 entries")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ConfigurationError("state bounds must be finite")
        if np.any(hi <= lo):
            raise ConfigurationError("degenerate state box: every upper bound must exceed its lower bound")
        if not self.input_hi > self.input_lo:
            raise ConfigurationError("degenerate input box")
        object.__setattr__(self, "state_lo", tuple(lo.tolist()))
        object.__setattr__(self, "state_hi", tuple(hi.tolist()))
        object.__setattr__(self, "input_lo", float(self.input_lo))
        object.__setattr__(self, "input_hi", float(self.input_hi))

    @property
    def lo(self):
        return np.array(self.state_lo)

    @property
    def hi(self):
        return np.array(self.state_hi)

    @property
    def half_width(self):
        """Box half-widths; also the normalisation constants ``c_i``."""
        return 0.5 * (self.hi - self.lo)

    @property
    def center(self):
        return 0.5 * (self.hi + self.lo)

    @property
    def weights(self):
        """Diagonal of ``W = diag(1 / c_i**2)``."""
        return 1.0 / self.half_width**2

    def contains(self, x, margin=0.0):
        """Element-wise box membership; ``margin`` shrinks the box (state units)."""
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo + margin) & (x <= self.hi - margin), axis=-1)

    def shrink(self, fraction):
        """Box shrunk by ``fraction`` of each half-width on every side."""
        m = fraction * self.half_width
        return Envelope(self.lo + m, self.hi - m, self.input_lo, self.input_hi)

    def clip_input(self, u):
        return np.clip(u, self.input_lo, self.input_hi)

    def inner(self, fraction):
        """Concentric box covering ``fraction`` of each dimension."""
        c, hw = self.center, self.half_width * fraction
        return c - hw, c + hw

    def to_dict(self):
        return {
            "state_lo": list(self.state_lo),
            "state_hi": list(self.state_hi),
            "input_lo": self.input_lo,
            "input_hi": self.input_hi,
        }
