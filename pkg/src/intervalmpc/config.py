"""Experiment configuration read from TOML.

Every section is a table; matrices are row-major nested lists. Unknown keys
and missing required fields raise :class:`ConfigError` naming the field.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from .errors import ConfigError, IntervalMPCError
from .model import Box, ConstraintBoxes, Envelope, ParametricLinearSystem, SignalBounds

_MISSING = object()


class _Section:
    """Typed access to one table that records which keys were consumed."""

    def __init__(self, name: str, table):
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        self.name = name
        self.table = table
        self.used = set()

    def _get(self, key, default):
        self.used.add(key)
        if key not in self.table:
            if default is _MISSING:
                raise ConfigError(f"{self.name}.{key}: required field is missing")
            return default
        return self.table[key]

    def number(self, key, default=_MISSING, positive=False, integer=False):
        v = self._get(key, default)
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{self.name}.{key}: expected a number, got {v!r}")
        if integer and not isinstance(v, int):
            raise ConfigError(f"{self.name}.{key}: expected an integer, got {v!r}")
        if positive and not v > 0:
            raise ConfigError(f"{self.name}.{key}: must be positive, got {v!r}")
        return v

    def string(self, key, default=_MISSING, choices=None):
        v = self._get(key, default)
        if v is None:
            return None
        if not isinstance(v, str):
            raise ConfigError(f"{self.name}.{key}: expected a string, got {v!r}")
        if choices and v not in choices:
            raise ConfigError(f"{self.name}.{key}: must be one of {', '.join(choices)}, got {v!r}")
        return v

    def boolean(self, key, default=_MISSING):
        v = self._get(key, default)
        if not isinstance(v, bool):
            raise ConfigError(f"{self.name}.{key}: expected true or false, got {v!r}")
        return v

    def array(self, key, default=_MISSING, ndim=None, length=None):
        v = self._get(key, default)
        if v is None:
            return None
        try:
            a = np.array(v, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(f"{self.name}.{key}: expected a (nested) list of numbers") from None
        if a.dtype == object or (ndim is not None and a.ndim != ndim):
            raise ConfigError(f"{self.name}.{key}: expected {ndim}-dimensional numeric data, got shape {a.shape}")
        if length is not None and a.shape[0] != length:
            raise ConfigError(f"{self.name}.{key}: expected length {length}, got {a.shape[0]}")
        if not np.all(np.isfinite(a)):
            raise ConfigError(f"{self.name}.{key}: entries must be finite")
        return a

    def finish(self):
        extra = sorted(set(self.table) - self.used)
        if extra:
            raise ConfigError(f"[{self.name}]: unknown field(s) {', '.join(extra)}")


@dataclass
class PlantConfig:
    sys: ParametricLinearSystem
    theta: np.ndarray
    K_pre: np.ndarray | None
    step: float


@dataclass
class EstimationConfig:
    ell: float = 1.0
    vartheta: float | None = None
    eta_bar: float | None = None
    x_bound: float | None = None
    bound: str = "pe"
    duration: float = 10.0
    update_every: float = 0.1
    amplitude: float = 1.0
    frequencies: tuple = (1.0, 2.3)


@dataclass
class PredictorConfig:
    mode: str = "auto"
    horizon: float = 10.0


@dataclass
class StabilizationConfig:
    method: str = "sdp"
    margin: float = 1e-6
    restarts: int = 2
    iterations: int = 2000
    certificate: str | None = None
    level_scale: float = 1.0


@dataclass
class MpcConfig:
    horizon: float = 3.0
    tau: float = 0.5
    segments: int = 6
    candidates: int = 1000
    points: int = 30
    duration: float = 10.0
    W1: np.ndarray | None = None
    W2: np.ndarray | None = None
    W3: np.ndarray | None = None


@dataclass
class ScenarioConfig:
    kind: str = "generic"
    x0: np.ndarray | None = None
    lane: dict = field(default_factory=dict)


@dataclass
class OutputConfig:
    directory: str = "out"
    plot: bool = False


@dataclass
class ExperimentConfig:
    plant: PlantConfig | None
    bounds: SignalBounds | None
    constraints: ConstraintBoxes | None
    estimation: EstimationConfig
    predictor: PredictorConfig
    stabilization: StabilizationConfig
    mpc: MpcConfig
    scenario: ScenarioConfig
    output: OutputConfig
    seed: int = 0
    base: Path = Path(".")


SECTIONS = ("plant", "bounds", "constraints", "estimation", "predictor", "stabilization", "mpc", "scenario",
            "output")
LANE_KEYS = {"m", "I_z", "a", "b", "v_x", "theta", "theta_lo", "theta_hi", "x_half", "u_half", "p_y0", "poles",
             "noise", "noise_hold", "ell", "error_bound", "duration", "amplitude", "t_change", "rate",
             "omega_bound"}


def _parse_plant(s: _Section) -> PlantConfig:
    A = s.array("A", ndim=2)
    phi = s.array("phi", ndim=3)
    B = s.array("B", ndim=2)
    D = s.array("D", ndim=2)
    lo = s.array("theta_lo", ndim=1)
    hi = s.array("theta_hi", ndim=1)
    theta = s.array("theta", ndim=1)
    K_pre = s.array("K_pre", None, ndim=2)
    step = s.number("step", 1e-3, positive=True)
    try:
        sys = ParametricLinearSystem(A, phi, B, D, Box(lo, hi))
    except IntervalMPCError as exc:
        raise ConfigError(f"[plant]: {exc}") from None
    if theta.shape != lo.shape or not sys.theta_box.contains(theta):
        raise ConfigError("plant.theta: must lie inside [theta_lo, theta_hi]")
    if K_pre is not None and K_pre.shape != (sys.q, sys.p):
        raise ConfigError(f"plant.K_pre: expected shape {(sys.q, sys.p)}, got {K_pre.shape}")
    return PlantConfig(sys, theta, K_pre, step)


def _parse_bounds(s: _Section, p: int, r: int) -> SignalBounds:
    w_lo = s.array("omega_lo", length=r, ndim=1)
    w_hi = s.array("omega_hi", length=r, ndim=1)
    nu = s.array("nu", np.zeros(2 * p))
    if nu.ndim == 0 or nu.size == 1:
        nu = np.full(2 * p, float(nu.ravel()[0]))
    if nu.ndim != 1 or nu.size != 2 * p or np.any(nu < 0):
        raise ConfigError(f"bounds.nu: expected one or {2 * p} nonnegative magnitudes")
    x0_lo = s.array("x0_lo", length=p, ndim=1)
    x0_hi = s.array("x0_hi", length=p, ndim=1)
    try:
        return SignalBounds(Envelope.constant(w_lo, w_hi), Envelope.symmetric(nu), x0_lo, x0_hi)
    except IntervalMPCError as exc:
        raise ConfigError(f"[bounds]: {exc}") from None


def _parse_constraints(s: _Section, p: int, q: int) -> ConstraintBoxes:
    try:
        X = Box(s.array("X_lo", length=p, ndim=1), s.array("X_hi", length=p, ndim=1))
        U = Box(s.array("U_lo", length=q, ndim=1), s.array("U_hi", length=q, ndim=1))
    except IntervalMPCError as exc:
        raise ConfigError(f"[constraints]: {exc}") from None
    return ConstraintBoxes(X, U)


def parse_config(text: str, base=".", seed: int | None = None) -> ExperimentConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML: {exc}") from None
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    sec = {name: _Section(name, doc.get(name, {})) for name in SECTIONS}

    sc = sec["scenario"]
    kind = sc.string("kind", "generic", choices=("generic", "lane_keeping"))
    lane = {}
    x0 = None
    seed_cfg = sc.number("seed", None, integer=True)
    if kind == "lane_keeping":
        for key in list(sc.table):
            if key in LANE_KEYS:
                sc.used.add(key)
                lane[key] = sc.table[key]
    plant = bounds = constraints = None
    if kind == "generic" or "plant" in doc:
        plant = _parse_plant(sec["plant"])
        p, q, r = plant.sys.p, plant.sys.q, plant.sys.r
        seed_cfg = sec["plant"].number("seed", seed_cfg if seed_cfg is not None else 0, integer=True)
        bounds = _parse_bounds(sec["bounds"], p, r)
        if "constraints" in doc:
            constraints = _parse_constraints(sec["constraints"], p, q)
        x0 = sc.array("x0", None, ndim=1, length=p)
    e = sec["estimation"]
    est = EstimationConfig(
        ell=e.number("ell", 1.0, positive=True),
        vartheta=e.number("vartheta", None, positive=True),
        eta_bar=e.number("eta_bar", None),
        x_bound=e.number("x_bound", None, positive=True),
        bound=e.string("bound", "pe", choices=("pe", "data")),
        duration=e.number("duration", 10.0, positive=True),
        update_every=e.number("update_every", 0.1, positive=True),
        amplitude=e.number("amplitude", 1.0),
        frequencies=tuple(e.array("frequencies", np.array([1.0, 2.3]), ndim=1)),
    )
    if est.eta_bar is not None and est.eta_bar < 0:
        raise ConfigError("estimation.eta_bar: must be nonnegative")
    pr = sec["predictor"]
    pred = PredictorConfig(pr.string("mode", "auto", choices=("auto", "naive", "enhanced")),
                           pr.number("horizon", 10.0, positive=True))
    st = sec["stabilization"]
    stab = StabilizationConfig(st.string("method", "sdp", choices=("sdp", "cem")),
                               st.number("margin", 1e-6, positive=True),
                               st.number("restarts", 2, positive=True, integer=True),
                               st.number("iterations", 2000, positive=True, integer=True),
                               st.string("certificate", None), st.number("level_scale", 1.0))
    if not stab.level_scale >= 1.0:
        raise ConfigError(f"stabilization.level_scale: must be >= 1, got {stab.level_scale!r}")
    m = sec["mpc"]
    mpc = MpcConfig(m.number("horizon", 3.0, positive=True), m.number("tau", 0.5, positive=True),
                    m.number("segments", 6, positive=True, integer=True),
                    m.number("candidates", 1000, positive=True, integer=True),
                    m.number("points", 30, positive=True, integer=True), m.number("duration", 10.0, positive=True),
                    m.array("W1", None, ndim=2), m.array("W2", None, ndim=2), m.array("W3", None, ndim=2))
    o = sec["output"]
    out = OutputConfig(o.string("directory", "out"), o.boolean("plot", False))
    for s in sec.values():
        s.finish()
    final_seed = seed if seed is not None else (seed_cfg or 0)
    if not 0 <= final_seed < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return ExperimentConfig(plant, bounds, constraints, est, pred, stab, mpc, ScenarioConfig(kind, x0, lane), out,
                            int(final_seed), Path(base))


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(text, path.parent, seed)
