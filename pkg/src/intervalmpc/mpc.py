"""Sampling-based dual MPC with interval predictions and a certified terminal feedback.

Outside the terminal set ``X_f`` a piecewise-constant plan is chosen by
random shooting on the enhanced predictor; inside it the nonlinear interval
feedback takes over. The closed-loop runner refreshes the confidence box at
every replanning instant and re-anchors the predictor on the measurements.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ControllerFault, DomainError, StructuralError
from .estimation import SetMembershipEstimator
from .model import (DIVERGENCE_THRESHOLD, Box, ConstraintBoxes, Envelope, ParametricLinearSystem,
                    SignalBounds, assemble_A, rk4_step)
from .prediction import (ExtendedSystem, assemble_extended, find_metzler_transform, map_interval,
                         metzler_shift, polytopic_vertices, transform_system)
from .stabilization import FeedbackGains, TerminalSet, feedback_control, lyapunov_value


@dataclass
class OcpSpec:
    """Open-loop problem settings; ``None`` weights default to ``10 I``, ``I`` and ``0.1 I``."""

    horizon: float = 3.0
    tau: float = 0.5
    segments: int = 6
    candidates: int = 1000
    points: int = 30
    seed: int = 0
    W1: np.ndarray | None = None
    W2: np.ndarray | None = None
    W3: np.ndarray | None = None

    def __post_init__(self):
        if not 0 < self.tau < self.horizon:
            raise DomainError("need 0 < tau < horizon")
        if self.segments < 1 or self.candidates < 1 or self.points < 1:
            raise DomainError("segments, candidates and points must be at least one")
        ratio = self.tau / self.segment_length
        if abs(ratio - round(ratio)) > 1e-9:
            raise DomainError("tau must be a whole number of segments")
        for name in ("W1", "W2", "W3"):
            W = getattr(self, name)
            if W is None:
                continue
            W = np.asarray(W, dtype=float)
            if W.ndim != 2 or W.shape[0] != W.shape[1] or not np.allclose(W, W.T):
                raise DomainError(f"{name} must be a symmetric matrix")
            if np.linalg.eigvalsh(W)[0] < -1e-12:
                raise DomainError(f"{name} must be positive semidefinite")
            setattr(self, name, W)

    @property
    def segment_length(self) -> float:
        return self.horizon / self.segments

    @property
    def shift(self) -> int:
        return int(round(self.tau / self.segment_length))

    def weights(self, n: int, q: int):
        W1 = 10.0 * np.eye(n) if self.W1 is None else self.W1
        W2 = np.eye(n) if self.W2 is None else self.W2
        W3 = 0.1 * np.eye(q) if self.W3 is None else self.W3
        if W1.shape != (n, n) or W2.shape != (n, n) or W3.shape != (q, q):
            raise StructuralError("weight dimensions do not match the extended system")
        return W1, W2, W3


@dataclass
class ControlPlan:
    """Piecewise-constant plan; segments flagged in ``feedback`` use the terminal feedback."""

    t0: float
    breakpoints: np.ndarray
    values: np.ndarray
    feedback: np.ndarray
    cost: float = np.inf
    feasible: bool = False
    terminal: np.ndarray | None = None
    terminal_value: float = np.inf
    margin: float = np.inf
    diverged: bool = False

    def control(self, t: float) -> np.ndarray:
        k = int(np.searchsorted(self.breakpoints, t + 1e-12, side="right")) - 1
        return self.values[min(max(k, 0), len(self.values) - 1)]

    def shifted(self, m: int, t0: float) -> "ControlPlan":
        """Drop the first ``m`` segments and append ``m`` feedback segments."""
        L = self.breakpoints[1] - self.breakpoints[0]
        K = len(self.values)
        values = np.concatenate([self.values[m:], np.zeros((m, self.values.shape[1]))])
        fb = np.concatenate([self.feedback[m:], np.ones(m, dtype=bool)])
        return ControlPlan(t0, t0 + L * np.arange(K + 1), values, fb)


@dataclass
class TerminalLaw:
    """Terminal ingredients: the certified model, its gains and ``X_f``."""

    ext: ExtendedSystem
    gains: FeedbackGains
    terminal: TerminalSet

    def control(self, xi, delta):
        return feedback_control(self.gains, xi, delta)


@dataclass
class PlanEvaluation:
    cost: np.ndarray
    feasible: np.ndarray
    terminal: np.ndarray
    terminal_value: np.ndarray
    margin: np.ndarray
    diverged: np.ndarray


def _box_violation(lo, hi, box: Box):
    """Largest excursion outside ``box`` along the last axis (<= 0 inside)."""
    return np.maximum(np.max(hi - box.hi, axis=-1), np.max(box.lo - lo, axis=-1))


def evaluate_plans(values, feedback, xi0, t0: float, ext: ExtendedSystem, spec: OcpSpec,
                   constraints: ConstraintBoxes, law: TerminalLaw, state_map=None) -> PlanEvaluation:
    """Integrate the extended predictor under a batch of plans.

    ``values`` has shape ``(N, K, q)`` and ``feedback`` ``(N, K)``. The cost
    is the terminal weight plus the trapezoid rule of the running cost on the
    grid of ``spec.points`` steps per segment. A plan is feasible when its
    inputs stay in the control box, the mapped interval ``state_map [lo, hi]``
    stays in the state box at every grid point, and the terminal ``xi`` lies
    in ``X_f``.
    """
    values = np.asarray(values, dtype=float)
    feedback = np.asarray(feedback, dtype=bool)
    N, K, q = values.shape
    n, p = ext.n, ext.p
    state_map = np.eye(p) if state_map is None else np.asarray(state_map, dtype=float)
    W1, W2, W3 = spec.weights(n, q)
    h = spec.segment_length / spec.points
    X, U = constraints.X_box, constraints.U_box
    xi = np.broadcast_to(np.asarray(xi0, dtype=float), (N, n)).copy()
    lo, hi = map_interval(state_map, xi[:, :p], xi[:, p:])
    margin = _box_violation(lo, hi, X) / np.max(X.width)
    cost = np.zeros(N)
    diverged = np.zeros(N, dtype=bool)
    running = lambda z, u: np.einsum("bi,ij,bj->b", z, W2, z) + np.einsum("bi,ij,bj->b", u, W3, u)
    t = t0
    for k in range(K):
        u_seg = values[:, k, :]
        fb = feedback[:, k]
        for _ in range(spec.points):
            delta = ext.delta(t)
            if fb.any():
                def f(z):
                    u = np.where(fb[:, None], law.control(z, delta), u_seg)
                    return ext.rhs(z, u, delta)
                u_now = np.where(fb[:, None], law.control(xi, delta), u_seg)
            else:
                f = lambda z: ext.rhs(z, u_seg, delta)
                u_now = u_seg
            nxt = rk4_step(f, xi, h)
            bad = ~np.all(np.isfinite(nxt), axis=1) | (np.max(np.abs(np.nan_to_num(nxt, nan=np.inf)), axis=1)
                                                        > DIVERGENCE_THRESHOLD)
            if bad.any():
                diverged |= bad
                nxt[bad] = 0.0
            u_v = _box_violation(u_now, u_now, U) / np.max(U.width)
            cost += 0.5 * h * (running(xi, u_now) + running(nxt, u_now))
            xi = nxt
            t += h
            lo, hi = map_interval(state_map, xi[:, :p], xi[:, p:])
            margin = np.maximum(margin, np.maximum(_box_violation(lo, hi, X) / np.max(X.width), u_v))
    cost += np.einsum("bi,ij,bj->b", xi, W1, xi)
    term = law.terminal
    vT = lyapunov_value(term.cert, xi)
    tv = (vT - term.level) / max(term.level, 1e-300)
    margin = np.maximum(margin, tv)
    margin[diverged] = np.inf
    cost[diverged] = np.inf
    feasible = (margin <= 0) & ~diverged
    return PlanEvaluation(cost, feasible, xi, vT, margin, diverged)


def evaluate_plan(plan: ControlPlan, xi0, ext: ExtendedSystem, spec: OcpSpec, constraints: ConstraintBoxes,
                  law: TerminalLaw, state_map=None) -> ControlPlan:
    """Fill in cost, feasibility and terminal state of a single plan."""
    ev = evaluate_plans(plan.values[None], plan.feedback[None], xi0, plan.t0, ext, spec, constraints, law,
                        state_map)
    plan.cost, plan.feasible = float(ev.cost[0]), bool(ev.feasible[0])
    plan.terminal, plan.terminal_value = ev.terminal[0], float(ev.terminal_value[0])
    plan.margin, plan.diverged = float(ev.margin[0]), bool(ev.diverged[0])
    return plan


def candidate_plans(spec: OcpSpec, U: Box, q: int, rng, warm: ControlPlan | None = None):
    """Zero plan, optional warm start, then uniform draws over the control box.

    Every second random draw hands over to the terminal feedback after a
    random number of segments, the shape a warm start takes after shifting.
    """
    K = spec.segments
    values = [np.zeros((1, K, q))]
    fb = [np.zeros((1, K), dtype=bool)]
    if warm is not None and spec.candidates > 1:
        values.append(warm.values[None])
        fb.append(warm.feedback[None])
    rest = spec.candidates - sum(v.shape[0] for v in values)
    if rest > 0:
        values.append(rng.uniform(U.lo, U.hi, size=(rest, K, q)))
        start = rng.integers(1, K + 1, size=rest)
        start[::2] = K
        tail = np.arange(K)[None, :] >= start[:, None]
        values[-1][tail] = 0.0
        fb.append(tail)
    return np.concatenate(values)[: spec.candidates], np.concatenate(fb)[: spec.candidates]


def solve_ocp(xi0, t0: float, ext: ExtendedSystem, spec: OcpSpec, constraints: ConstraintBoxes,
              law: TerminalLaw, state_map=None, warm: ControlPlan | None = None, rng=None) -> ControlPlan:
    """Cheapest feasible candidate, or the least infeasible one flagged ``feasible=False``."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    q = ext.B.shape[1]
    values, fb = candidate_plans(spec, constraints.U_box, q, rng, warm)
    ev = evaluate_plans(values, fb, xi0, t0, ext, spec, constraints, law, state_map)
    if ev.feasible.any():
        cost = np.where(ev.feasible, ev.cost, np.inf)
        i = int(np.argmin(cost))  # first index on ties
    else:
        i = int(np.argmin(ev.margin))
    L = spec.segment_length
    return ControlPlan(t0, t0 + L * np.arange(spec.segments + 1), values[i], fb[i], float(ev.cost[i]),
                       bool(ev.feasible[i]), ev.terminal[i], float(ev.terminal_value[i]), float(ev.margin[i]),
                       bool(ev.diverged[i]))


@dataclass
class ControlLaw:
    """Control over one application interval: ``branch`` is ``"plan"`` or ``"feedback"``."""

    branch: str
    plan: ControlPlan | None
    law: TerminalLaw

    def __call__(self, t: float, xi, delta):
        if self.branch == "feedback":
            return self.law.control(xi, delta)
        k = int(np.searchsorted(self.plan.breakpoints, t + 1e-12, side="right")) - 1
        k = min(max(k, 0), len(self.plan.values) - 1)
        if self.plan.feedback[k]:
            return self.law.control(xi, delta)
        return self.plan.values[k]


def switching_control(xi, law: TerminalLaw, plan: ControlPlan | None) -> ControlLaw:
    """Feedback when ``V(xi) <= level`` (ties included), else the plan."""
    if law.terminal.contains(xi):
        return ControlLaw("feedback", None, law)
    if plan is None:
        raise ControllerFault("state outside X_f and no plan available", log=None)
    return ControlLaw("plan", plan, law)


# --------------------------------------------------------------------------
# closed loop

@dataclass
class PredictionModel:
    """Predictor in coordinates ``z = Z^-1 x`` for a plant with preliminary feedback.

    ``sys`` is the plant written with ``A + B K_pre`` and the extra
    disturbance ``B K_pre nu1``; ``omega`` bounds the stacked disturbance.
    """

    sys: ParametricLinearSystem
    omega: Envelope
    Z: np.ndarray
    K_pre: np.ndarray

    @classmethod
    def build(cls, plant: ParametricLinearSystem, omega: Envelope, nu1: Envelope | None = None,
              K_pre=None, region=None) -> "PredictionModel":
        K_pre = np.zeros((plant.q, plant.p)) if K_pre is None else np.asarray(K_pre, dtype=float)
        if K_pre.shape != (plant.q, plant.p):
            raise StructuralError("K_pre must be q x p")
        BK = plant.B @ K_pre
        if np.any(K_pre != 0):
            if nu1 is None:
                raise StructuralError("a preliminary feedback needs the nu1 envelope")
            D = np.hstack([plant.D, BK])
            omega = _stack_envelopes(omega, nu1)
        else:
            D = plant.D
        cl = ParametricLinearSystem(plant.A + BK, plant.phi, plant.B, D, plant.theta_box)
        box = plant.theta_box if region is None else region
        Z = find_metzler_transform(assemble_A(cl, box.center, check=False))
        # metzler_shift covers the case without a real simple spectrum
        Z = np.eye(plant.p) if Z is None else Z
        return cls(cl, omega, Z, K_pre)

    @property
    def Zinv(self) -> np.ndarray:
        return np.linalg.inv(self.Z)

    def extended(self, region) -> ExtendedSystem:
        zsys = transform_system(self.sys, self.Z)
        poly = metzler_shift(polytopic_vertices(zsys, region))
        return assemble_extended("enhanced", poly, zsys.B, zsys.D, self.omega)

    def to_z(self, lo, hi):
        return map_interval(self.Zinv, lo, hi)

    def to_x(self, lo, hi):
        return map_interval(self.Z, lo, hi)


def _stack_envelopes(a: Envelope, b: Envelope) -> Envelope:
    times = np.union1d(a.times, b.times)
    lo = [np.concatenate([a(t)[0], b(t)[0]]) for t in times]
    hi = [np.concatenate([a(t)[1], b(t)[1]]) for t in times]
    return Envelope(np.array(lo), np.array(hi), times)


@dataclass
class Experiment:
    """A closed-loop run: plant, true signals and their bounds.

    ``omega_fn(t)`` and ``noise_fn(t) -> (nu1, nu2)`` are realized signals
    held over each integration step; ``omega_known`` removes ``D omega``
    from the derivative measurement before estimation.
    """

    sys: ParametricLinearSystem
    theta: np.ndarray
    bounds: SignalBounds
    constraints: ConstraintBoxes
    omega_fn: Callable
    noise_fn: Callable
    x0: np.ndarray
    K_pre: np.ndarray | None = None
    omega_known: bool = False


@dataclass
class ExperimentLog:
    """One row per integration instant plus one event per replanning instant."""

    p: int
    q: int
    d: int
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    x_lo: list = field(default_factory=list)
    x_hi: list = field(default_factory=list)
    u: list = field(default_factory=list)
    V: list = field(default_factory=list)
    level: list = field(default_factory=list)
    branch: list = field(default_factory=list)
    feasible: list = field(default_factory=list)
    theta_hat: list = field(default_factory=list)
    box_lo: list = field(default_factory=list)
    box_hi: list = field(default_factory=list)
    events: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def columns(self) -> list:
        p, q, d = self.p, self.q, self.d
        return (["t"] + [f"x{i}" for i in range(p)] + [f"x_lo{i}" for i in range(p)]
                + [f"x_hi{i}" for i in range(p)] + [f"u{i}" for i in range(q)] + ["V", "level", "branch", "feasible"]
                + [f"theta_hat{i}" for i in range(d)] + [f"theta_box_lo{i}" for i in range(d)]
                + [f"theta_box_hi{i}" for i in range(d)])

    def arrays(self) -> dict:
        return {k: np.asarray(getattr(self, k)) for k in
                ("t", "x", "x_lo", "x_hi", "u", "V", "level", "feasible", "theta_hat", "box_lo", "box_hi")}

    def to_csv(self, fh=None) -> str:
        out = io.StringIO() if fh is None else fh
        w = csv.writer(out, lineterminator="\n")
        w.writerow(self.columns())
        num = lambda v: repr(float(v))
        for k in range(len(self.t)):
            row = [num(self.t[k])]
            for name in ("x", "x_lo", "x_hi", "u"):
                row += [num(v) for v in getattr(self, name)[k]]
            row += [num(self.V[k]), num(self.level[k]), self.branch[k], str(int(self.feasible[k]))]
            for name in ("theta_hat", "box_lo", "box_hi"):
                row += [num(v) for v in getattr(self, name)[k]]
            w.writerow(row)
        return out.getvalue() if fh is None else ""

    # monitors

    def state_violations(self, X: Box, tol: float = 0.0) -> int:
        x = np.asarray(self.x)
        return int(np.sum(np.any((x < X.lo - tol) | (x > X.hi + tol), axis=1)))

    def input_violations(self, U: Box, tol: float = 0.0) -> int:
        u = np.asarray(self.u)
        return int(np.sum(np.any((u < U.lo - tol) | (u > U.hi + tol), axis=1)))

    def inclusion_violations(self, tol: float = 1e-9) -> int:
        x, lo, hi = np.asarray(self.x), np.asarray(self.x_lo), np.asarray(self.x_hi)
        return int(np.sum(np.any((x < lo - tol) | (x > hi + tol), axis=1)))

    def time_to_terminal(self):
        for e in self.events:
            if e["branch"] == "feedback":
                return e["t"]
        return None

    def switch_count(self) -> int:
        br = [e["branch"] for e in self.events]
        return sum(1 for a, b in zip(br, br[1:]) if a != b)

    def summary(self, constraints: ConstraintBoxes) -> dict:
        x = np.asarray(self.x)
        return {
            "time_to_Xf": self.time_to_terminal(),
            "switch_count": self.switch_count(),
            "state_violations": self.state_violations(constraints.X_box),
            "input_violations": self.input_violations(constraints.U_box),
            "violations": self.state_violations(constraints.X_box) + self.input_violations(constraints.U_box),
            "inclusion_violations": self.inclusion_violations(),
            "max_abs_x": np.max(np.abs(x), axis=0).tolist(),
            "replans": len(self.events),
            "infeasible_replans": sum(1 for e in self.events if e["branch"] == "plan" and not e["feasible"]),
            "final_box_lo": list(map(float, self.box_lo[-1])),
            "final_box_hi": list(map(float, self.box_hi[-1])),
            "warnings": list(self.warnings),
        }


def run_receding_horizon(exp: Experiment, model: PredictionModel, law: TerminalLaw, spec: OcpSpec,
                         estimator: SetMembershipEstimator, duration: float, step: float = 1e-3) -> ExperimentLog:
    """Closed-loop dual MPC on the true plant.

    At every ``t_i = i tau``: refresh the confidence box from data up to
    ``t_i``, rebuild the predictor for it, intersect the propagated interval
    with the one implied by ``y1`` (keeping whichever of the two has the
    smaller ``V``), then apply the feedback if ``V <= level`` or the OCP plan
    otherwise. An infeasible OCP falls back on the shifted previous plan.
    The feedback branch propagates the certified model.
    """
    sys, p, q = exp.sys, exp.sys.p, exp.sys.q
    A = assemble_A(sys, exp.theta)
    K_pre = model.K_pre
    X = exp.constraints.X_box
    log = ExperimentLog(p, q, sys.d)
    if not model.omega.is_nonincreasing():
        msg = "disturbance envelope is not non-increasing"
        warnings.warn(msg)
        log.warnings.append(msg)
    n_tau = int(round(spec.tau / step))
    if abs(n_tau * step - spec.tau) > 1e-9:
        raise DomainError("tau must be a whole number of steps")
    n_total = int(round(duration / step))
    mag = exp.bounds.nu1_magnitude()
    Acl = A + sys.B @ K_pre
    term = law.terminal
    x = np.asarray(exp.x0, dtype=float).copy()
    xi = None
    plan = None
    i = 0
    k = 0
    while k < n_total:
        t_i = k * step
        # data strictly before t_i
        region = estimator.update(t_i)
        nu1, _ = exp.noise_fn(t_i)
        a_lo, a_hi = model.to_z(x + nu1 - mag, x + nu1 + mag)
        anchor = np.concatenate([a_lo, a_hi])
        if xi is None:
            xi = anchor
        else:
            inter = np.concatenate([np.maximum(xi[:p], a_lo), np.minimum(xi[p:], a_hi)])
            if np.all(inter[:p] <= inter[p:]) and term.value(inter) <= term.value(xi):
                xi = inter
        V = float(term.value(xi))
        event = {"t": t_i, "V": V, "level": term.level}
        if V <= term.level:
            ctrl = ControlLaw("feedback", None, law)
            ext_run = law.ext
            feasible = True
            event.update(branch="feedback", feasible=True)
        else:
            ext_hat = model.extended(region.box)
            warm = plan.shifted(spec.shift, t_i) if plan is not None else None
            rng = np.random.default_rng([spec.seed, i])
            new = solve_ocp(xi, t_i, ext_hat, spec, exp.constraints, law, model.Z, warm, rng)
            if new.feasible:
                plan = new
            elif warm is not None:
                plan = evaluate_plan(warm, xi, ext_hat, spec, exp.constraints, law, model.Z)
            else:
                raise ControllerFault(f"no feasible plan at t={t_i:g} and no warm start", log=log)
            ctrl = ControlLaw("plan", plan, law)
            ext_run = ext_hat
            feasible = bool(new.feasible)
            event.update(branch="plan", feasible=feasible, cost=plan.cost, terminal_value=plan.terminal_value,
                         margin=new.margin)
        log.events.append(event)
        for _ in range(min(n_tau, n_total - k)):
            t = k * step
            nu1, nu2 = exp.noise_fn(t)
            y1 = x + nu1
            w = np.asarray(exp.omega_fn(t), dtype=float)
            delta = ext_run.delta(t)
            u = np.asarray(ctrl(t, xi, delta), dtype=float).reshape(q)
            u_tot = u + K_pre @ y1
            y2 = A @ x + sys.B @ u_tot + sys.D @ w + nu2
            estimator.add(t, y1, y2 - sys.D @ w if exp.omega_known else y2, u_tot)
            x_lo, x_hi = model.to_x(xi[:p], xi[p:])
            log.t.append(t)
            log.x.append(x.copy())
            log.x_lo.append(x_lo)
            log.x_hi.append(x_hi)
            log.u.append(u)
            log.V.append(float(term.value(xi)))
            log.level.append(term.level)
            log.branch.append(ctrl.branch)
            log.feasible.append(feasible)
            log.theta_hat.append(region.theta_hat.copy())
            log.box_lo.append(region.lo.copy())
            log.box_hi.append(region.hi.copy())
            # the preliminary feedback acts on x + nu1 with the noise held over the step
            drive = sys.B @ (u + K_pre @ nu1) + sys.D @ w
            x = rk4_step(lambda z: Acl @ z + drive, x, step)
            if ctrl.branch == "feedback" or ctrl.plan.feedback[_segment(ctrl.plan, t)]:
                f = lambda z: ext_run.rhs(z, law.control(z, delta), delta)
            else:
                f = lambda z: ext_run.rhs(z, u, delta)
            xi = rk4_step(f, xi, step)
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_THRESHOLD:
                raise ControllerFault(f"plant diverged after t={t:g}", log=log)
            k += 1
        i += 1
    return log


def _segment(plan: ControlPlan, t: float) -> int:
    k = int(np.searchsorted(plan.breakpoints, t + 1e-12, side="right")) - 1
    return min(max(k, 0), len(plan.values) - 1)


class HeldSignal:
    """Seeded random signal inside an envelope, redrawn every ``hold`` seconds."""

    def __init__(self, envelope: Envelope, duration: float, hold: float, rng):
        if hold <= 0:
            raise DomainError("hold must be positive")
        self.envelope = envelope
        self.hold = float(hold)
        n = int(np.ceil(duration / hold)) + 2
        self.fractions = rng.uniform(size=(n, envelope.dim))

    def __call__(self, t: float) -> np.ndarray:
        k = int(np.floor(t / self.hold + 1e-9))
        r = self.fractions[min(max(k, 0), len(self.fractions) - 1)]
        lo, hi = self.envelope(t)
        return lo + r * (hi - lo)


def split_noise(nu: HeldSignal, p: int):
    """``t -> (nu1, nu2)`` from a held signal of dimension ``2p``."""
    return lambda t: (nu(t)[:p], nu(t)[p:])


def design_terminal(model: PredictionModel, constraints: ConstraintBoxes, config=None, level_scale: float = 1.0):
    """Certified terminal ingredients for the prior box.

    The synthesis normalizes the certificate to the largest uniform box in
    predictor coordinates whose image stays in the state box, so a level
    below one keeps the outer box of ``X_f`` admissible. Returns the law,
    the synthesis result and the admissibility report.
    """
    from .stabilization import ConstraintMap, check_terminal_admissible, delta_tilde_box, synthesize, terminal_set

    ext = model.extended(model.sys.theta_box)
    X = constraints.X_box
    half = np.minimum(np.abs(X.lo), np.abs(X.hi))
    scale = float(np.min(half / (np.abs(model.Z) @ np.ones(model.sys.p)))) * np.ones(model.sys.p)
    res = synthesize(ext, config, scale=scale)
    term = terminal_set(res.cert, delta_tilde_box(ext, res.gains), level_scale)
    cmap = ConstraintMap(model.Z, np.zeros((model.sys.q, model.sys.p)), np.zeros(model.sys.p))
    report = check_terminal_admissible(term, res.gains, ext, X, constraints.U_box, cmap)
    return TerminalLaw(ext, res.gains, term), res, report
