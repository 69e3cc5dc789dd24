"""Run configuration: one TOML file, validated up front, with a stable hash."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .envelope import Envelope
from .exceptions import ConfigurationError
from .plant import DEFAULT_PLANT_FILE, PlantParams

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

__all__ = ["DEFAULT_CONFIG_FILE", "RunConfig", "load_config"]

DEFAULT_CONFIG_FILE = Path(__file__).parent / "data" / "config.toml"

SECTIONS = (
    "plant", "envelope", "grid", "mpc", "reward", "qlearn", "filter",
    "gust", "evaluation", "validation", "seeds", "output",
)


def _defaults():
    with open(DEFAULT_CONFIG_FILE, "rb") as fh:
        return tomllib.load(fh)


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigurationError(f"unknown configuration key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"{where!r} must be a table")
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def parse_override(text):
    """``section.key=value`` with ``value`` parsed as a TOML value."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigurationError(f"override {text!r} is not of the form section.key=value")
    lhs, rhs = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {rhs.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()
    return {section: {key: value}}


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration.

    ``data`` holds every section of the TOML file after defaults and
    overrides are merged; ``base_dir`` anchors relative paths.
    """

    data: dict
    base_dir: Path

    def __post_init__(self):
        self.validate()

    # -- access ------------------------------------------------------------

    def __getitem__(self, section):
        return self.data[section]

    def with_overrides(self, *overrides):
        data = self.data
        for ov in overrides:
            data = _merge(data, ov)
        return RunConfig(data, self.base_dir)

    @property
    def plant_path(self):
        raw = self.data["plant"]["path"]
        if not raw:
            return DEFAULT_PLANT_FILE
        path = Path(raw)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def output_dir(self):
        path = Path(self.data["output"]["dir"])
        return path if path.is_absolute() else Path.cwd() / path

    def config_hash(self):
        """SHA-256 of the canonical resolved config and plant parameters."""
        doc = {"config": self.data, "plant": self.params().to_dict()}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def header(self):
        return f"config_hash={self.config_hash()}"

    # -- validation ----------------------------------------------------------

    def validate(self):
        d = self.data
        missing = [s for s in SECTIONS if s not in d]
        if missing:
            raise ConfigurationError(f"missing sections {missing}")
        if not self.plant_path.exists():
            raise ConfigurationError(f"plant file {self.plant_path} does not exist")
        self.params()
        self.envelope()
        g = d["grid"]
        if int(g["bins"]) < 1 or int(g["n_per_dim"]) < 2:
            raise ConfigurationError("grid.bins must be >= 1 and grid.n_per_dim >= 2")
        if int(d["evaluation"]["n_runs"]) < 1:
            raise ConfigurationError("evaluation.n_runs must be >= 1")
        if not 0 < float(d["evaluation"]["init_fraction"]) <= 1:
            raise ConfigurationError("evaluation.init_fraction must lie in (0, 1]")
        if float(d["evaluation"]["max_step"]) <= 0:
            raise ConfigurationError("evaluation.max_step must be positive")
        if float(d["filter"]["r_max_factor"]) <= 0:
            raise ConfigurationError("filter.r_max_factor must be positive")
        # constructing the component configs runs their own checks
        self.mpc_config()
        self.reward_config()
        self.q_config()
        self.gust_config()
        self.filter_config()
        self.episode_config()

    def check_simulable(self):
        """Raise unless the discrete actuator update is a convex combination.

        Kept out of :meth:`validate` so that model validation can still
        report on a deliberately coarse sample time.
        """
        self.params().check_actuator()

    # -- component builders ----------------------------------------------

    def params(self):
        return PlantParams.from_toml(self.plant_path)

    def envelope(self):
        e = self.data["envelope"]
        return Envelope(e["state_lo"], e["state_hi"], e["input_lo"], e["input_hi"])

    def mpc_config(self):
        from .mpc import MpcConfig

        m = self.data["mpc"]
        env = self.envelope()
        cu = 0.5 * (env.input_hi - env.input_lo)
        return MpcConfig.from_envelope(
            env, horizon=int(m["horizon"]), block_length=int(m["block_length"]),
            R=float(m["input_weight"]) / cu**2, tol=float(m["tol"]), max_iter=int(m["max_iter"]),
            margin_fraction=float(m["margin_fraction"]), n_probe=int(m["n_probe"]),
        )

    def reward_config(self):
        from .qlearn import RewardConfig

        r = self.data["reward"]
        return RewardConfig.from_envelope(self.envelope(), float(r["input_weight"]), int(r["rollout_length"]))

    def q_config(self):
        from .qlearn import QConfig

        q = self.data["qlearn"]
        return QConfig(int(q["n_actions"]), float(q["gamma"]), int(q["n_sweeps"]), float(q["tol"]))

    def gust_config(self):
        from .gust import GustConfig

        g = self.data["gust"]
        ev = self.data["evaluation"]
        return GustConfig(
            sigma=float(g["sigma"]), length_scale=float(g["length_scale"]), w_max=float(g["w_max"]),
            sigma_max=float(g["sigma_max"]), gust_duration=float(ev["gust_duration"]),
            recovery_duration=float(ev["recovery_duration"]), n_realizations=int(g["n_realizations"]),
        )

    def grid(self):
        from .qlearn import StateGrid

        return StateGrid.from_envelope(self.envelope(), int(self.data["grid"]["bins"]))

    def r_max(self):
        env = self.envelope()
        return float(self.data["filter"]["r_max_factor"]) * self.grid().half_diagonal(env.weights)

    def filter_config(self):
        from .safety_filter import FilterConfig

        f = self.data["filter"]
        return FilterConfig(
            int(f["k"]), self.r_max(), float(f["epsilon"]), float(f["h_u"]), float(f["h_x"]),
            str(f["mode"]), int(f["delay_steps"]), bool(f["retrain"]),
        )

    def episode_config(self):
        from .harness import EpisodeConfig

        ev = self.data["evaluation"]
        return EpisodeConfig(
            float(ev["gust_duration"]), float(ev["recovery_duration"]), float(ev["settle_fraction"]),
            float(ev["excursion_fraction"]), float(ev["max_step"]), float(ev["init_fraction"]),
        )

    def training_states(self):
        from .qlearn import sample_initial_states

        n = int(self.data["grid"]["n_per_dim"])
        return sample_initial_states(self.grid(), n, span=(n - 1) / n)

    def policy(self, use_mpc_bounds=True):
        """Unfitted :class:`QLearningPolicy` for this configuration."""
        from .qlearn import QLearningPolicy

        q = self.q_config()
        return QLearningPolicy(
            self.params(), self.envelope(), self.mpc_config(), self.reward_config(), self.gust_config(),
            bins=int(self.data["grid"]["bins"]), n_actions=q.n_actions, gamma=q.gamma,
            n_sweeps=q.n_sweeps, tol=q.tol, use_mpc_bounds=use_mpc_bounds,
            base_seed=int(self.data["seeds"]["train"]),
        )


def load_config(path=None, overrides=()):
    """Load ``path`` (or the packaged defaults) and apply ``overrides``.

    Parameters
    ----------
    path : path-like, optional
        TOML file; keys not present fall back to the defaults.
    overrides : iterable of dict
        Nested ``{section: {key: value}}`` patches applied in order.
    """
    data = _defaults()
    base = DEFAULT_CONFIG_FILE.parent
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            with open(path, "rb") as fh:
                user = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        data = _merge(data, user)
        base = path.resolve().parent
        if not user.get("plant", {}).get("path"):
            data["plant"]["path"] = ""
    for ov in overrides:
        data = _merge(data, ov)
    try:
        return RunConfig(data, base)
    except (TypeError, KeyError) as exc:
        raise ConfigurationError(str(exc)) from exc

