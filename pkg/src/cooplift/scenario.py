"""Scenario configuration: defaults, strict TOML parsing, and builders.

One ScenarioConfig drives everything: team construction, gains, the
reference trajectory, the seeded disturbance fields, and the GP settings.
Unknown keys in a config file are rejected so runs stay reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as tomllib

from .agent import AgentParams, ArmParams
from .control import AgentGains, PayloadGains, RefSample
from .coupled import PayloadParams, PayloadState, TeamParams
from .gp import KernelParams


class ConfigError(ValueError):
    pass


# (section, key) -> (attribute, type tag)
_SCHEMA = {
    "scenario": {"seed": ("seed", "int"), "horizon": ("horizon", "float")},
    "integrator": {
        "h": ("h", "float"),
        "alpha": ("alpha", "float"),
        "log_hz": ("log_hz", "float"),
        "control_hz": ("control_hz", "float"),
    },
    "payload": {
        "mass": ("payload_mass", "float"),
        "inertia": ("payload_inertia", "vec3"),
    },
    "team": {
        "n_agents": ("n_agents", "int"),
        "contacts_per_agent": ("contacts_per_agent", "int"),
        "attachments": ("attachments", "mat3"),
    },
    "agent": {
        "base_mass": ("base_mass", "float"),
        "base_inertia": ("base_inertia", "vec3"),
        "arm_mounts": ("arm_mounts", "mat3"),
        "arm_axis": ("arm_axis", "vec3"),
        "arm_rest_dir": ("arm_rest_dir", "vec3"),
        "arm_length": ("arm_length", "float"),
        "arm_mass": ("arm_mass", "float"),
    },
    "gains": {
        "kp": ("kp", "float"),
        "kv": ("kv", "float"),
        "kR_scale": ("kR_scale", "float"),
        "kom_scale": ("kom_scale", "float"),
        "agent_kR": ("agent_kR", "float"),
        "agent_kom": ("agent_kom", "float"),
        "agent_kp_r": ("agent_kp_r", "float"),
        "agent_kd_r": ("agent_kd_r", "float"),
    },
    "allocation": {
        "leaders": ("leaders", "ivec"),
        "internal_basis": ("internal_basis", "str"),
        "cond_limit": ("cond_limit", "float"),
    },
    "reference": {
        "amplitude_x": ("amplitude_x", "float"),
        "amplitude_y": ("amplitude_y", "float"),
        "period": ("period", "float"),
        "altitude": ("altitude", "float"),
        "yaw": ("yaw", "float"),
    },
    "disturbance": {
        "preset": ("preset", "str"),
        "payload_force": ("payload_force", "float"),
        "payload_torque": ("payload_torque", "float"),
        "agent_force": ("agent_force", "float"),
        "agent_torque": ("agent_torque", "float"),
        "agent_joint": ("agent_joint", "float"),
        "wavenumber": ("wavenumber", "float"),
        "mass_mismatch": ("mass_mismatch", "float"),
        "inertia_mismatch": ("inertia_mismatch", "float"),
    },
    "gp": {
        "update_times": ("update_times", "fvec"),
        "budget": ("budget", "int"),
        "delta": ("delta", "float"),
        "noise_std": ("noise_std", "float"),
        "prior_signal": ("prior_signal", "float"),
        "prior_noise": ("prior_noise", "float"),
        "prior_lengthscale": ("prior_lengthscale", "float"),
        "rkhs_bound": ("rkhs_bound", "float"),
        "restarts": ("restarts", "int"),
        "maxiter": ("maxiter", "int"),
        "lengthscale_upper": ("lengthscale_upper", "float"),
    },
    "eta": {
        "profile": ("eta_profile", "str"),
        "amplitude": ("eta_amplitude", "float"),
        "frequency": ("eta_frequency", "float"),
        "direction": ("eta_direction", "fvec"),
    },
}


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 12345
    horizon: float = 20.0
    h: float = 1e-3
    alpha: float = 20.0
    log_hz: float = 100.0
    control_hz: float = 100.0
    payload_mass: float = 1.5
    payload_inertia: tuple = (0.0125, 0.0325, 0.0425)
    n_agents: int = 2
    contacts_per_agent: int = 2
    attachments: tuple = (
        (0.25, 0.15, 0.0), (0.25, -0.15, 0.0),
        (-0.25, 0.15, 0.0), (-0.25, -0.15, 0.0),
    )
    base_mass: float = 1.1
    base_inertia: tuple = (0.015, 0.015, 0.02)
    arm_mounts: tuple = ((0.0, 0.10, 0.0), (0.0, -0.10, 0.0))
    arm_axis: tuple = (1.0, 0.0, 0.0)
    arm_rest_dir: tuple = (0.0, 0.0, -1.0)
    arm_length: float = 0.12
    arm_mass: float = 0.05
    kp: float = 4.0
    kv: float = 4.0
    kR_scale: float = 8.0
    kom_scale: float = 2.5
    agent_kR: float = 6.0
    agent_kom: float = 0.6
    agent_kp_r: float = 400.0
    agent_kd_r: float = 36.0
    leaders: tuple = (0, 1, 2)
    internal_basis: str = "follower"
    cond_limit: float = 1e8
    amplitude_x: float = 0.6
    amplitude_y: float = 0.35
    period: float = 10.0
    altitude: float = 1.0
    yaw: float = 0.0
    preset: str = "default"
    payload_force: float = 0.6
    payload_torque: float = 0.03
    agent_force: float = 0.12
    agent_torque: float = 0.02
    agent_joint: float = 0.015
    wavenumber: float = 3.0
    mass_mismatch: float = 0.0
    inertia_mismatch: float = 0.0
    update_times: tuple = (2.0, 6.0, 10.0)
    budget: int = 200
    delta: float = 0.9
    noise_std: float = 1e-3
    prior_signal: float = 1.0
    prior_noise: float = 1e-4
    prior_lengthscale: float = 1.0
    rkhs_bound: float = 1.0
    restarts: int = 4
    maxiter: int = 40
    lengthscale_upper: float = 1e3
    eta_profile: str = "zero"
    eta_amplitude: float = 0.0
    eta_frequency: float = 0.5
    eta_direction: tuple = (1.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def default_config() -> ScenarioConfig:
    return validate_config(ScenarioConfig())


def _coerce(section: str, key: str, kind: str, value):
    path = f"{section}.{key}"
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    if kind in ("vec3", "fvec", "ivec"):
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list")
        if kind == "vec3" and len(value) != 3:
            raise ConfigError(f"{path} must have 3 entries")
        out = []
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{path} entries must be numbers")
            if kind == "ivec" and not isinstance(v, int):
                raise ConfigError(f"{path} entries must be integers")
            out.append(v if kind == "ivec" else float(v))
        return tuple(out)
    if kind == "mat3":
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list of 3-vectors")
        rows = []
        for row in value:
            if not isinstance(row, list) or len(row) != 3:
                raise ConfigError(f"{path} rows must have 3 entries")
            if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in row):
                raise ConfigError(f"{path} entries must be numbers")
            rows.append(tuple(float(v) for v in row))
        return tuple(rows)
    raise AssertionError(kind)


def load_config(path) -> ScenarioConfig:
    """Parse a TOML scenario file, rejecting unknown sections and keys."""
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    overrides = {}
    for section, table in doc.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in table.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            attr, kind = _SCHEMA[section][key]
            overrides[attr] = _coerce(section, key, kind, value)
    return validate_config(replace(ScenarioConfig(), **overrides))


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def validate_config(cfg: ScenarioConfig) -> ScenarioConfig:
    _require(cfg.seed >= 0, "scenario.seed must be nonnegative")
    for name in ("horizon", "h", "alpha", "log_hz", "control_hz", "payload_mass",
                 "base_mass", "arm_length", "arm_mass", "period", "cond_limit",
                 "prior_signal", "prior_noise", "prior_lengthscale", "lengthscale_upper"):
        _require(getattr(cfg, name) > 0.0, f"{name} must be positive")
    for name in ("payload_force", "payload_torque", "agent_force", "agent_torque",
                 "agent_joint", "noise_std", "rkhs_bound", "eta_amplitude",
                 "amplitude_x", "amplitude_y"):
        _require(getattr(cfg, name) >= 0.0, f"{name} must be nonnegative")
    _require(all(v > 0.0 for v in cfg.payload_inertia), "payload.inertia must be positive")
    _require(all(v > 0.0 for v in cfg.base_inertia), "agent.base_inertia must be positive")
    _require(cfg.n_agents >= 1, "team.n_agents must be at least 1")
    _require(cfg.contacts_per_agent >= 1, "team.contacts_per_agent must be at least 1")
    _require(len(cfg.attachments) == cfg.n_agents * cfg.contacts_per_agent,
             "team.attachments must list n_agents * contacts_per_agent points")
    _require(len(cfg.arm_mounts) == cfg.contacts_per_agent,
             "agent.arm_mounts must list one mount per contact")
    _require(float(np.linalg.norm(cfg.arm_axis)) > 0.0, "agent.arm_axis must be nonzero")
    _require(cfg.wavenumber > 0.0, "disturbance.wavenumber must be positive")
    _require(cfg.mass_mismatch > -1.0, "disturbance.mass_mismatch must exceed -1")
    _require(cfg.inertia_mismatch > -1.0, "disturbance.inertia_mismatch must exceed -1")
    _require(cfg.preset in ("none", "default"), "disturbance.preset must be none or default")
    _require(cfg.internal_basis in ("follower", "full"),
             "allocation.internal_basis must be follower or full")
    n_c = cfg.n_agents * cfg.contacts_per_agent
    _require(len(set(cfg.leaders)) == len(cfg.leaders), "allocation.leaders must be distinct")
    _require(all(isinstance(l, int) and 0 <= l < n_c for l in cfg.leaders),
             "allocation.leaders must index contacts")
    _require(0.0 < cfg.delta < 1.0, "gp.delta must lie in (0, 1)")
    _require(cfg.budget >= 1, "gp.budget must be at least 1")
    _require(cfg.restarts >= 0, "gp.restarts must be nonnegative")
    _require(cfg.maxiter >= 1, "gp.maxiter must be at least 1")
    _require(list(cfg.update_times) == sorted(cfg.update_times)
             and all(t > 0 for t in cfg.update_times),
             "gp.update_times must be positive and sorted")
    _require(cfg.eta_profile in ("zero", "constant", "sine"),
             "eta.profile must be zero, constant, or sine")
    _require(len(cfg.eta_direction) >= 1, "eta.direction must be nonempty")
    for hz_name in ("control_hz", "log_hz"):
        per = 1.0 / (getattr(cfg, hz_name) * cfg.h)
        _require(abs(per - round(per)) < 1e-6 and round(per) >= 1,
                 f"integrator.{hz_name} must divide the step rate")
    return cfg


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        raise AssertionError
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v + '"'
    return "[" + ", ".join(_fmt_value(x) for x in v) + "]"


def config_toml(cfg: ScenarioConfig) -> str:
    """Render the full configuration; parsing it back reproduces cfg."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (attr, _) in keys.items():
            lines.append(f"{key} = {_fmt_value(getattr(cfg, attr))}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# builders


def build_team(cfg: ScenarioConfig, plant: bool = False) -> TeamParams:
    """Team parameters; plant=True applies the configured model mismatch."""
    arms = tuple(
        ArmParams(mount=np.asarray(m, dtype=float),
                  axis=np.asarray(cfg.arm_axis, dtype=float),
                  rest_dir=np.asarray(cfg.arm_rest_dir, dtype=float),
                  length=cfg.arm_length, mass=cfg.arm_mass)
        for m in cfg.arm_mounts
    )
    agent = AgentParams(base_mass=cfg.base_mass,
                        base_inertia=np.diag(cfg.base_inertia),
                        arms=arms)
    m_scale = 1.0 + (cfg.mass_mismatch if plant else 0.0)
    j_scale = 1.0 + (cfg.inertia_mismatch if plant else 0.0)
    payload = PayloadParams(mass=cfg.payload_mass * m_scale,
                            inertia=np.diag(cfg.payload_inertia) * j_scale)
    n = cfg.contacts_per_agent
    att = tuple(
        np.asarray(cfg.attachments[j * n:(j + 1) * n], dtype=float)
        for j in range(cfg.n_agents)
    )
    return TeamParams(payload=payload, agents=(agent,) * cfg.n_agents, attachments=att)


def build_payload_gains(cfg: ScenarioConfig) -> PayloadGains:
    tr = float(sum(cfg.payload_inertia))
    return PayloadGains(Kp=np.full(3, cfg.kp), Kv=np.full(3, cfg.kv),
                        KR=np.full(3, cfg.kR_scale * tr),
                        Kom=np.full(3, cfg.kom_scale * tr))


def build_agent_gains(cfg: ScenarioConfig) -> AgentGains:
    return AgentGains(kR=cfg.agent_kR, kom=cfg.agent_kom,
                      kp_r=cfg.agent_kp_r, kd_r=cfg.agent_kd_r)


class FigureEight:
    """Smooth figure-eight position reference at constant altitude and
    constant desired attitude."""

    def __init__(self, cfg: ScenarioConfig):
        self.ax = cfg.amplitude_x
        self.ay = cfg.amplitude_y
        self.period = cfg.period
        self.w = 2.0 * math.pi / cfg.period
        self.altitude = cfg.altitude
        self.R_d = np.eye(3)

    def sample(self, t: float) -> RefSample:
        w, ax, ay = self.w, self.ax, self.ay
        p = np.array([ax * math.sin(w * t), ay * math.sin(2 * w * t), self.altitude])
        v = np.array([ax * w * math.cos(w * t), 2 * ay * w * math.cos(2 * w * t), 0.0])
        a = np.array([-ax * w * w * math.sin(w * t),
                      -4 * ay * w * w * math.sin(2 * w * t), 0.0])
        return RefSample(p=p, v=v, a=a, R=self.R_d,
                         omega=np.zeros(3), omega_dot=np.zeros(3))


def build_reference(cfg: ScenarioConfig) -> FigureEight:
    return FigureEight(cfg)


def initial_payload_state(cfg: ScenarioConfig) -> PayloadState:
    ref = build_reference(cfg).sample(0.0)
    return PayloadState(p=ref.p.copy(), v=ref.v.copy(), R=ref.R.copy(), omega=np.zeros(3))


def build_eta(cfg: ScenarioConfig):
    """eta(t) callable, or None when the internal-force input is zero."""
    if cfg.eta_profile == "zero" or cfg.eta_amplitude == 0.0:
        return None
    d = np.asarray(cfg.eta_direction, dtype=float)
    d = d / np.linalg.norm(d)
    amp = cfg.eta_amplitude
    if cfg.eta_profile == "constant":
        return lambda t: amp * d
    w = 2.0 * math.pi * cfg.eta_frequency
    return lambda t: amp * math.sin(w * t) * d


class _Field:
    """amp * (0.4 bias + 0.6 sin(K x + phase)): smooth, bounded by amp."""

    def __init__(self, rng, amp: float, dim_out: int, dim_in: int, wavenumber: float):
        self.amp = amp
        self.bias = rng.uniform(-1.0, 1.0, dim_out)
        signs = np.where(rng.uniform(size=(dim_out, dim_in)) < 0.5, -1.0, 1.0)
        self.K = rng.uniform(0.3 * wavenumber, wavenumber, (dim_out, dim_in)) * signs
        self.phase = rng.uniform(0.0, 2.0 * math.pi, dim_out)

    def __call__(self, x) -> np.ndarray:
        return self.amp * (0.4 * self.bias + 0.6 * np.sin(self.K @ x + self.phase))


class DisturbanceField:
    """State-dependent disturbance fields, coefficients drawn once per seed.

    Every channel is a smooth function of the respective body's state, so
    the same realization acts in every case and the GPs can learn it from
    state features alone.
    """

    def __init__(self, cfg: ScenarioConfig, rng):
        k = cfg.wavenumber
        n_r = cfg.contacts_per_agent
        self.payload_force = _Field(rng, cfg.payload_force, 3, 3, k)
        self.payload_torque = _Field(rng, cfg.payload_torque, 3, 3, k)
        self.agent_force = []
        self.agent_torque = []
        self.agent_joint = []
        for _ in range(cfg.n_agents):
            self.agent_force.append(_Field(rng, cfg.agent_force, 3, 3, k))
            self.agent_torque.append(_Field(rng, cfg.agent_torque, 3, 3, k))
            self.agent_joint.append(_Field(rng, cfg.agent_joint, n_r, 3 + n_r, k))

    def payload(self, state, t: float):
        return self.payload_force(state.p), self.payload_torque(state.p)

    def agent(self, j: int, state, t: float):
        xr = np.concatenate([state.x, state.r])
        return (self.agent_force[j](state.x),
                self.agent_torque[j](state.x),
                self.agent_joint[j](xr))


def build_disturbance(cfg: ScenarioConfig, rng):
    if cfg.preset == "none":
        return None
    return DisturbanceField(cfg, rng)


def rng_streams(cfg: ScenarioConfig) -> dict:
    """Named generators derived from the master seed.

    Streams are keyed by source, never by case, so C1/C2/C3 consume
    identical disturbance and noise realizations. Fit streams hold one
    generator per scheduled update.
    """
    names = ["disturbance", "labels_payload"]
    names += [f"labels_agent_{j}" for j in range(cfg.n_agents)]
    names += ["fit_payload"]
    names += [f"fit_agent_{j}" for j in range(cfg.n_agents)]
    names += ["validate"]
    root = np.random.SeedSequence(cfg.seed)
    kids = root.spawn(len(names))
    n_up = max(len(cfg.update_times), 1)
    streams = {}
    for name, kid in zip(names, kids):
        if name.startswith("fit"):
            streams[name] = [np.random.default_rng(s) for s in kid.spawn(n_up)]
        else:
            streams[name] = np.random.default_rng(kid)
    return streams


def prior_kernels(cfg: ScenarioConfig, dim: int, channels: int):
    p = KernelParams(signal_var=cfg.prior_signal,
                     lengthscales=np.full(dim, cfg.prior_lengthscale),
                     noise_var=cfg.prior_noise)
    return [p] * channels


def agent_feature_dim(cfg: ScenarioConfig) -> int:
    return 18 + 2 * cfg.contacts_per_agent


PAYLOAD_FEATURE_DIM = 21
