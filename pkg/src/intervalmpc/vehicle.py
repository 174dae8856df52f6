"""Lane keeping with a dynamic bicycle model and unknown tire cornering stiffness.

The state is ``(p_y, psi, v_y, r)`` and the tracked coordinate is
``x~ = x - (y_r, 0, 0, 0)``. Because the first column of ``A`` is zero,
``x~`` obeys the same dynamics with the disturbance ``-e_1 dy_r/dt``,
which is known to the controller. Default parameters are normalized
(unit mass, speed 2) so that a 10 % friction prior keeps the interval
predictor contracting.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import place_poles

from .errors import DomainError, StructuralError
from .estimation import SetMembershipEstimator, eta_bound
from .model import Box, ConstraintBoxes, Envelope, ParametricLinearSystem, SignalBounds, assemble_A
from .mpc import (Experiment, HeldSignal, OcpSpec, PredictionModel, design_terminal, run_receding_horizon,
                  split_noise)
from .stabilization import SynthesisConfig


@dataclass
class BicycleParams:
    m: float = 1.0
    I_z: float = 0.5
    a: float = 0.5
    b: float = 1.5
    v_x: float = 2.0
    theta: tuple = (0.96, 1.04)
    theta_lo: tuple = (0.9, 0.9)
    theta_hi: tuple = (1.1, 1.1)

    def __post_init__(self):
        if self.v_x == 0:
            raise DomainError("v_x must be nonzero: the tire model divides by it")
        for name in ("m", "I_z", "a", "b", "v_x"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if np.any(np.asarray(self.theta_lo) <= 0):
            raise DomainError("cornering stiffness prior must be positive")
        if not Box(self.theta_lo, self.theta_hi).contains(self.theta):
            raise DomainError("true friction lies outside the prior box")

    @property
    def theta_box(self) -> Box:
        return Box(self.theta_lo, self.theta_hi)


def build_bicycle_model(params: BicycleParams) -> ParametricLinearSystem:
    """Linear lateral dynamics ``A + theta_f phi_1 + theta_r phi_2`` with input the steering angle."""
    m, Iz, a, b, vx = params.m, params.I_z, params.a, params.b, params.v_x
    if vx == 0:
        raise DomainError("v_x must be nonzero")
    A = np.array([[0.0, vx, 1.0, 0.0],
                  [0.0, 0.0, 0.0, 1.0],
                  [0.0, 0.0, 0.0, -vx],
                  [0.0, 0.0, 0.0, 0.0]])
    B = np.array([[0.0], [0.0], [2.0 / m], [a / Iz]])
    c = -2.0 / (m * vx * Iz)
    phi1 = c * np.array([[0, 0, 0, 0], [0, 0, 0, 0], [0, 0, Iz, a * Iz], [0, 0, a * m, a * a * m]], dtype=float)
    phi2 = c * np.array([[0, 0, 0, 0], [0, 0, 0, 0], [0, 0, Iz, -b * Iz], [0, 0, -b * m, b * b * m]], dtype=float)
    D = np.array([[-1.0], [0.0], [0.0], [0.0]])
    return ParametricLinearSystem(A, np.stack([phi1, phi2]), B, D, params.theta_box)


@dataclass
class LaneReference:
    """Sigmoid lane change of ``amplitude`` metres centred at ``t_change``."""

    amplitude: float = 1.0
    t_change: float = 8.0
    rate: float = 1.0
    omega_bound: float = 0.25

    def __post_init__(self):
        if self.rate <= 0:
            raise DomainError("rate must be positive")
        if self.peak_rate > self.omega_bound * (1 + 1e-12):
            raise DomainError(f"reference slope {self.peak_rate:g} exceeds the envelope {self.omega_bound:g}")

    @property
    def peak_rate(self) -> float:
        return abs(self.amplitude) * self.rate / 4.0

    def y(self, t):
        return self.amplitude / (1.0 + np.exp(-self.rate * (np.asarray(t) - self.t_change)))

    def dy(self, t):
        s = 1.0 / (1.0 + np.exp(-self.rate * (np.asarray(t) - self.t_change)))
        return self.amplitude * self.rate * s * (1.0 - s)

    def omega(self, t) -> np.ndarray:
        return np.array([float(self.dy(t))])

    def envelope(self) -> Envelope:
        return Envelope.symmetric([self.omega_bound])


def preliminary_gain(sys: ParametricLinearSystem, poles, theta=None) -> np.ndarray:
    """``K`` with ``A(theta) + B K`` having the given real distinct poles (prior center by default)."""
    poles = np.asarray(poles, dtype=float)
    if poles.size != sys.p or np.any(poles >= 0) or np.unique(poles).size != poles.size:
        raise DomainError("need p distinct negative real poles")
    theta = sys.theta_box.center if theta is None else theta
    return -place_poles(assemble_A(sys, theta), sys.B, poles).gain_matrix


@dataclass
class LaneKeepingConfig:
    params: BicycleParams = field(default_factory=BicycleParams)
    reference: LaneReference = field(default_factory=LaneReference)
    x_half: tuple = (3.0, 2.0, 6.0, 6.0)
    u_half: float = 10.0
    p_y0: float = 2.0
    poles: tuple = (-0.5, -1.5, -5.0, -20.0)
    noise: float = 2e-4
    noise_hold: float = 0.05
    ell: float = 1.0
    error_bound: str = "data"
    duration: float = 10.0
    step: float = 1e-3
    seed: int = 0

    @property
    def constraints(self) -> ConstraintBoxes:
        return ConstraintBoxes(Box.symmetric(self.x_half), Box.symmetric([self.u_half]))


def lane_config_from_dict(d: dict, seed: int = 0) -> LaneKeepingConfig:
    """Scenario config from flat keys (vehicle, reference and run settings)."""
    d = dict(d)
    pkeys = ("m", "I_z", "a", "b", "v_x", "theta", "theta_lo", "theta_hi")
    rkeys = ("amplitude", "t_change", "rate", "omega_bound")
    params = BicycleParams(**{k: (tuple(d.pop(k)) if isinstance(d[k], list) else d.pop(k))
                              for k in pkeys if k in d})
    ref = LaneReference(**{k: d.pop(k) for k in rkeys if k in d})
    for k in ("x_half", "poles"):
        if k in d:
            d[k] = tuple(d[k])
    return LaneKeepingConfig(params=params, reference=ref, seed=seed, **d)


@dataclass
class LaneKeepingSetup:
    experiment: Experiment
    model: PredictionModel
    law: object
    synthesis: object
    admissibility: object
    estimator: SetMembershipEstimator


def setup_lane_keeping(cfg: LaneKeepingConfig, synth: SynthesisConfig | None = None) -> LaneKeepingSetup:
    sys = build_bicycle_model(cfg.params)
    p = sys.p
    K_pre = preliminary_gain(sys, cfg.poles)
    nu_env = Envelope.symmetric([cfg.noise] * (2 * p))
    nu1_env = Envelope.symmetric([cfg.noise] * p)
    x0 = np.array([cfg.p_y0 - float(cfg.reference.y(0.0)), 0.0, 0.0, 0.0])
    bounds = SignalBounds(cfg.reference.envelope(), nu_env, x0, x0)
    constraints = cfg.constraints
    if not constraints.X_box.contains(x0):
        raise DomainError("initial state outside the state box")
    model = PredictionModel.build(sys, cfg.reference.envelope(), nu1_env, K_pre)
    law, res, report = design_terminal(model, constraints, synth)
    rng = np.random.default_rng(cfg.seed)
    noise = HeldSignal(nu_env, cfg.duration + 1.0, cfg.noise_hold, rng)
    exp = Experiment(sys, np.asarray(cfg.params.theta, dtype=float), bounds, constraints,
                     cfg.reference.omega, split_noise(noise, p), x0, K_pre, omega_known=True)
    # the reference term is removed before estimation, so only the noise enters eta
    quiet = SignalBounds(Envelope.zero(1), nu_env, x0, x0)
    est = SetMembershipEstimator(sys, cfg.ell, eta_bound(sys, quiet), cfg.noise, observed_x=True,
                                 bound=cfg.error_bound)
    return LaneKeepingSetup(exp, model, law, res, report, est)


def lane_keeping_scenario(cfg: LaneKeepingConfig | None = None, spec: OcpSpec | None = None,
                          synth: SynthesisConfig | None = None):
    """Run the scenario; returns ``(log, summary, setup)``."""
    cfg = cfg or LaneKeepingConfig()
    spec = spec or OcpSpec(seed=cfg.seed)
    setup = setup_lane_keeping(cfg, synth)
    if not setup.admissibility.ok:
        raise StructuralError(f"terminal set is not admissible ({setup.admissibility.verdict})")
    log = run_receding_horizon(setup.experiment, setup.model, setup.law, spec, setup.estimator,
                               cfg.duration, cfg.step)
    summary = log.summary(cfg.constraints)
    summary["terminal_level"] = setup.law.terminal.level
    summary["admissibility"] = setup.admissibility.verdict
    return log, summary, setup
