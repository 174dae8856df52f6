"""Interval predictors for the uncertain plant.

Two predictors are provided. The naive one bounds ``A(theta) x`` by interval
matrix arithmetic and is valid for any plant. The enhanced one keeps the
nominal flow ``A0 x`` exact and only bounds the polytopic deviation, which
needs ``A0`` to be Metzler. Both fit the extended form

    dxi/dt = A0e xi + A1e xi^+ + A2e xi^- + Be u + delta(t),  xi = (x_lo, x_hi).

All right-hand sides accept batched states of shape ``(..., p)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, DivergenceError, DomainError, StructuralError
from .model import (Box, Envelope, ParametricLinearSystem, assemble_A, check_finite, grid,
                    rk4_step)

METZLER_TOL = 1e-12
MAX_VERTEX_DIM = 20


def split_matrix(M):
    """Elementwise positive and negative parts, ``M = M_plus - M_minus``."""
    M = np.asarray(M, dtype=float)
    plus = np.maximum(M, 0.0)
    return plus, plus - M


def pos(x):
    return np.maximum(x, 0.0)


def neg(x):
    return np.maximum(-x, 0.0)


def _box_of(region) -> Box:
    if isinstance(region, Box):
        return region
    return Box(region.lo, region.hi)


@dataclass(frozen=True)
class IntervalMatrix:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(self.lo > self.hi + 1e-15):
            raise DomainError("interval matrix lower bound exceeds upper bound")

    def contains(self, M, tol: float = 0.0) -> bool:
        return bool(np.all(M >= self.lo - tol) and np.all(M <= self.hi + tol))


def interval_hull(sys: ParametricLinearSystem, region) -> IntervalMatrix:
    """Elementwise bounds of ``A(theta)`` over the box ``region``."""
    box = _box_of(region)
    lo_terms = box.lo[:, None, None] * sys.phi
    hi_terms = box.hi[:, None, None] * sys.phi
    lo = sys.A + np.minimum(lo_terms, hi_terms).sum(axis=0)
    hi = sys.A + np.maximum(lo_terms, hi_terms).sum(axis=0)
    return IntervalMatrix(lo, hi)


@dataclass(frozen=True)
class PolytopicModel:
    """``A(theta)`` lies in ``A0 + conv{deviations[k]}``."""

    A0: np.ndarray
    deviations: np.ndarray
    dA_plus: np.ndarray
    dA_minus: np.ndarray

    @classmethod
    def from_deviations(cls, A0, deviations) -> "PolytopicModel":
        deviations = np.asarray(deviations, dtype=float)
        plus, minus = split_matrix(deviations)
        return cls(np.asarray(A0, dtype=float), deviations, plus.sum(axis=0), minus.sum(axis=0))

    @property
    def vertices(self) -> np.ndarray:
        return self.A0[None] + self.deviations


def _sign_patterns(d: int) -> np.ndarray:
    # rows enumerate {-1, +1}^d, first coordinate slowest
    idx = np.arange(2 ** d)[:, None]
    bits = (idx >> np.arange(d - 1, -1, -1)[None, :]) & 1
    return 2.0 * bits - 1.0


def polytopic_vertices(sys: ParametricLinearSystem, region) -> PolytopicModel:
    """Center matrix and the ``2**d`` signed deviations of a box region."""
    box = _box_of(region)
    if sys.d > MAX_VERTEX_DIM:
        raise DomainError(f"d={sys.d} would need 2**{sys.d} vertices (limit {MAX_VERTEX_DIM})")
    A0 = assemble_A(sys, box.center, check=False)
    h = _sign_patterns(sys.d) * box.radius[None, :]
    deviations = np.tensordot(h, sys.phi, axes=1)
    return PolytopicModel.from_deviations(A0, deviations)


def metzler_shift(poly: PolytopicModel) -> PolytopicModel:
    """Move negative off-diagonal entries of ``A0`` into every deviation.

    ``A0 + sum a_k dA_k = (A0 + N) + sum a_k (dA_k - N)`` for convex weights,
    so the represented set is unchanged while the new center is Metzler.
    """
    off = poly.A0 - np.diag(np.diag(poly.A0))
    N = neg(off)
    if not np.any(N > 0):
        return poly
    return PolytopicModel.from_deviations(poly.A0 + N, poly.deviations - N[None])


def metzler_check(A0, tol: float = METZLER_TOL) -> bool:
    A0 = np.asarray(A0, dtype=float)
    if A0.ndim != 2 or A0.shape[0] != A0.shape[1]:
        raise StructuralError("metzler_check needs a square matrix")
    off = A0 - np.diag(np.diag(A0))
    return bool(np.all(off >= -tol))


def find_metzler_transform(A0, rtol: float = 1e-9):
    """Similarity ``Z`` with ``Z^-1 A0 Z`` Metzler, or ``None``.

    Returns the identity for Metzler input and the eigenvector basis when the
    spectrum is real and simple; complex or repeated eigenvalues give
    ``None``. Columns are unit-norm with their largest-magnitude entry
    positive, ordered by decreasing eigenvalue.
    """
    A0 = np.asarray(A0, dtype=float)
    p = A0.shape[0]
    if metzler_check(A0):
        return np.eye(p)
    lam, V = np.linalg.eig(A0)
    scale = max(1.0, float(np.max(np.abs(lam))))
    if np.max(np.abs(lam.imag)) > rtol * scale:
        return None
    lam = lam.real
    V = V.real
    order = np.argsort(-lam, kind="stable")
    lam, V = lam[order], V[:, order]
    if p > 1 and np.min(np.diff(-lam)) <= rtol * scale:
        return None
    V = V / np.linalg.norm(V, axis=0)
    idx = np.argmax(np.abs(V), axis=0)
    V = V * np.sign(V[idx, np.arange(p)])
    if np.linalg.cond(V) > 1e10:
        return None
    return V


def transform_system(sys: ParametricLinearSystem, Z) -> ParametricLinearSystem:
    """The plant written in coordinates ``z = Z^-1 x``."""
    Zi = np.linalg.inv(Z)
    phi = np.einsum("ij,djk,kl->dil", Zi, sys.phi, Z)
    return ParametricLinearSystem(Zi @ sys.A @ Z, phi, Zi @ sys.B, Zi @ sys.D, sys.theta_box)


def map_interval(M, lo, hi):
    """Tightest box image of ``[lo, hi]`` under ``x -> M x``; batched over leading axes."""
    Mp, Mm = split_matrix(M)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return lo @ Mp.T - hi @ Mm.T, hi @ Mp.T - lo @ Mm.T


@dataclass
class IntervalState:
    lo: np.ndarray
    hi: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)

    @property
    def xi(self) -> np.ndarray:
        return np.concatenate([self.lo, self.hi], axis=-1)

    @classmethod
    def from_xi(cls, xi, t: float = 0.0) -> "IntervalState":
        xi = np.asarray(xi, dtype=float)
        p = xi.shape[-1] // 2
        return cls(xi[..., :p], xi[..., p:], t)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def is_ordered(self, tol: float = 0.0) -> bool:
        return bool(np.all(self.lo <= self.hi + tol))

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x)
        return bool(np.all(self.lo - tol <= x) and np.all(x <= self.hi + tol))


def anchor_from_measurement(y1, nu1_lo, nu1_hi, t: float = 0.0) -> IntervalState:
    """Initial interval consistent with ``y1 = x + nu1`` for any admissible noise.

    The widest reading ``y1 -/+ max(|nu_lo|, |nu_hi|)`` is used, so the
    sign convention of the envelope does not matter.
    """
    mag = np.maximum(np.abs(nu1_lo), np.abs(nu1_hi))
    y1 = np.asarray(y1, dtype=float)
    return IntervalState(y1 - mag, y1 + mag, t)


def disturbance_drive(D, w_lo, w_hi):
    """Lower and upper bounds of ``D w`` for ``w_lo <= w <= w_hi``."""
    Dp, Dm = split_matrix(D)
    w_lo = np.asarray(w_lo, dtype=float)
    w_hi = np.asarray(w_hi, dtype=float)
    return w_lo @ Dp.T - w_hi @ Dm.T, w_hi @ Dp.T - w_lo @ Dm.T


class NaivePredictor:
    """Interval-arithmetic predictor built on an interval matrix hull."""

    kind = "naive"

    def __init__(self, interval: IntervalMatrix, B, D):
        self.interval = interval
        self.B = np.asarray(B, dtype=float)
        self.D = np.asarray(D, dtype=float)
        self._lo_p, self._lo_m = split_matrix(interval.lo)
        self._hi_p, self._hi_m = split_matrix(interval.hi)

    def rhs(self, lo, hi, u, w_lo, w_hi):
        Lp, Lm, Hp, Hm = self._lo_p, self._lo_m, self._hi_p, self._hi_m
        bu = np.asarray(u, dtype=float) @ self.B.T
        d_lo, d_hi = disturbance_drive(self.D, w_lo, w_hi)
        lop, lom, hip, him = pos(lo), neg(lo), pos(hi), neg(hi)
        dlo = lop @ Lp.T - lom @ Hp.T - hip @ Lm.T + him @ Hm.T + bu + d_lo
        dhi = hip @ Hp.T - him @ Lp.T - lop @ Hm.T + lom @ Lm.T + bu + d_hi
        return dlo, dhi

    def step(self, state: IntervalState, u, w_lo, w_hi, h: float) -> IntervalState:
        return _rk4_interval(self, state, u, w_lo, w_hi, h)


class EnhancedPredictor:
    """Predictor exploiting a polytopic model with Metzler center."""

    kind = "enhanced"

    def __init__(self, poly: PolytopicModel, B, D, check: bool = True):
        if check and not metzler_check(poly.A0):
            raise ContractError("enhanced predictor needs a Metzler center matrix A0")
        self.poly = poly
        self.B = np.asarray(B, dtype=float)
        self.D = np.asarray(D, dtype=float)

    def rhs(self, lo, hi, u, w_lo, w_hi):
        A0, Pp, Pm = self.poly.A0, self.poly.dA_plus, self.poly.dA_minus
        bu = np.asarray(u, dtype=float) @ self.B.T
        d_lo, d_hi = disturbance_drive(self.D, w_lo, w_hi)
        dlo = lo @ A0.T - neg(lo) @ Pp.T - pos(hi) @ Pm.T + bu + d_lo
        dhi = hi @ A0.T + pos(hi) @ Pp.T + neg(lo) @ Pm.T + bu + d_hi
        return dlo, dhi

    def step(self, state: IntervalState, u, w_lo, w_hi, h: float) -> IntervalState:
        return _rk4_interval(self, state, u, w_lo, w_hi, h)


def _rk4_interval(pred, state: IntervalState, u, w_lo, w_hi, h):
    p = state.lo.shape[-1]

    def f(xi):
        dlo, dhi = pred.rhs(xi[..., :p], xi[..., p:], u, w_lo, w_hi)
        return np.concatenate([dlo, dhi], axis=-1)

    xi = rk4_step(f, state.xi, h)
    check_finite(xi, state.t + h)
    return IntervalState(xi[..., :p], xi[..., p:], state.t + h)


def step_naive(interval: IntervalMatrix, state: IntervalState, u, omega_lo, omega_hi, B, D, step: float):
    return NaivePredictor(interval, B, D).step(state, u, omega_lo, omega_hi, step)


def step_enhanced(poly: PolytopicModel, state: IntervalState, u, omega_lo, omega_hi, B, D, step: float):
    return EnhancedPredictor(poly, B, D).step(state, u, omega_lo, omega_hi, step)


@dataclass
class ExtendedSystem:
    """Matrices of the extended predictor form and its known input ``delta``."""

    kind: str
    A0: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    B: np.ndarray
    D: np.ndarray
    omega: Envelope

    @property
    def n(self) -> int:
        return self.A0.shape[0]

    @property
    def p(self) -> int:
        return self.n // 2

    def delta_matrix(self) -> np.ndarray:
        Dp, Dm = split_matrix(self.D)
        return np.block([[Dp, -Dm], [-Dm, Dp]])

    def delta(self, t) -> np.ndarray:
        w_lo, w_hi = self.omega(t)
        return self.delta_matrix() @ np.concatenate([w_lo, w_hi])

    def delta_pieces(self) -> np.ndarray:
        """``delta`` for every piece of the disturbance envelope, one per row."""
        return np.concatenate([self.omega.lo, self.omega.hi], axis=1) @ self.delta_matrix().T

    def rhs(self, xi, u, delta):
        return (xi @ self.A0.T + pos(xi) @ self.A1.T + neg(xi) @ self.A2.T
                + np.asarray(u, dtype=float) @ self.B.T + delta)

    def step(self, xi, u, delta, h: float):
        return rk4_step(lambda z: self.rhs(z, u, delta), xi, h)


def assemble_extended(which: str, model, B, D, omega: Envelope) -> ExtendedSystem:
    """Extended-form matrices for ``which`` in {"naive", "enhanced"}."""
    B = np.asarray(B, dtype=float)
    D = np.asarray(D, dtype=float)
    if which == "naive":
        if not isinstance(model, IntervalMatrix):
            raise StructuralError("naive form needs an IntervalMatrix")
        Lp, Lm = split_matrix(model.lo)
        Hp, Hm = split_matrix(model.hi)
        p = Lp.shape[0]
        A0 = np.zeros((2 * p, 2 * p))
        A1 = np.block([[Lp, -Lm], [-Hm, Hp]])
        A2 = np.block([[-Hp, Hm], [Lm, -Lp]])
    elif which == "enhanced":
        if not isinstance(model, PolytopicModel):
            raise StructuralError("enhanced form needs a PolytopicModel")
        p = model.A0.shape[0]
        Z = np.zeros((p, p))
        A0 = np.block([[model.A0, Z], [Z, model.A0]])
        A1 = np.block([[Z, -model.dA_minus], [Z, model.dA_plus]])
        A2 = np.block([[-model.dA_plus, Z], [model.dA_minus, Z]])
    else:
        raise DomainError(f"unknown predictor kind {which!r}")
    if B.shape[0] != p or D.shape[0] != p:
        raise StructuralError("B and D must have p rows")
    return ExtendedSystem(which, A0, A1, A2, np.vstack([B, B]), D, omega)


@dataclass
class PredictorChoice:
    """Result of the predictor selection rule.

    ``Z`` maps predictor coordinates back to plant coordinates
    (``x = Z z``); it is the identity when no transform was needed.
    """

    kind: str
    Z: np.ndarray
    system: ParametricLinearSystem


def choose_predictor(sys: ParametricLinearSystem, region, mode: str = "auto") -> PredictorChoice:
    """Prefer the enhanced predictor, fall back to the naive one."""
    if mode not in ("auto", "naive", "enhanced"):
        raise DomainError(f"unknown predictor mode {mode!r}")
    eye = np.eye(sys.p)
    if mode == "naive":
        return PredictorChoice("naive", eye, sys)
    poly = polytopic_vertices(sys, region)
    Z = find_metzler_transform(poly.A0)
    if Z is None:
        if mode == "enhanced":
            raise ContractError("no Metzler transform exists for the center matrix")
        return PredictorChoice("naive", eye, sys)
    zsys = sys if np.array_equal(Z, eye) else transform_system(sys, Z)
    return PredictorChoice("enhanced", Z, zsys)


def build_predictor(kind: str, sys: ParametricLinearSystem, region, shift: bool = True):
    """Predictor object for ``sys`` (already in its final coordinates)."""
    if kind == "naive":
        return NaivePredictor(interval_hull(sys, region), sys.B, sys.D)
    poly = polytopic_vertices(sys, region)
    if shift:
        poly = metzler_shift(poly)
    return EnhancedPredictor(poly, sys.B, sys.D)


@dataclass
class IntervalTrajectory:
    t: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    diverged_at: float | None = None

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo


def predict(sys: ParametricLinearSystem, region, x0_lo, x0_hi, omega: Envelope, horizon: float,
            step: float, control: Callable | None = None, mode: str = "auto",
            allow_divergence: bool = False) -> IntervalTrajectory:
    """Run a predictor from ``[x0_lo, x0_hi]`` and return bounds in plant coordinates.

    When the selected predictor needs a coordinate change the initial box is
    mapped into the new coordinates and the bounds are mapped back at every
    grid point. With ``allow_divergence`` a diverging run returns the
    truncated trajectory instead of raising.
    """
    choice = choose_predictor(sys, region, mode)
    pred = build_predictor(choice.kind, choice.system, region)
    Z = choice.Z
    Zi = np.linalg.inv(Z)
    lo, hi = map_interval(Zi, x0_lo, x0_hi)
    ts = grid(horizon, step)
    h = ts[1] - ts[0]
    control = control or (lambda t: np.zeros(sys.q))
    out_lo, out_hi = [np.asarray(x0_lo, float)], [np.asarray(x0_hi, float)]
    state = IntervalState(lo, hi, 0.0)
    diverged = None
    for t in ts[:-1]:
        w_lo, w_hi = omega(t)
        try:
            state = pred.step(state, control(t), w_lo, w_hi, h)
        except DivergenceError:
            if not allow_divergence:
                raise
            diverged = float(t)
            break
        a, b = map_interval(Z, state.lo, state.hi)
        out_lo.append(a)
        out_hi.append(b)
    n = len(out_lo)
    return IntervalTrajectory(ts[:n], np.array(out_lo), np.array(out_hi), diverged)
