"""Uncertain linear plant, its signal bounds, and a fixed-step simulator.

The plant is

    dx/dt = A(theta) x + B u + D w,   A(theta) = A + sum_i theta_i phi_i,

observed through ``y1 = x + nu1`` and ``y2 = dx/dt + nu2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Callable

import numpy as np

from .errors import DivergenceError, DomainError, StructuralError

DIVERGENCE_THRESHOLD = 1e9
DEFAULT_STEP = 1e-3


def _vec(a, name="vector") -> np.ndarray:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if a.ndim != 1:
        raise StructuralError(f"{name} must be one-dimensional, got shape {a.shape}")
    return a


def _mat(a, shape=None, name="matrix") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1 and shape is not None and shape[1] == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise StructuralError(f"{name} must be two-dimensional, got shape {a.shape}")
    if shape is not None and a.shape != tuple(shape):
        raise StructuralError(f"{name} must have shape {tuple(shape)}, got {a.shape}")
    return a


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``{v : lo <= v <= hi}``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo, hi = _vec(self.lo, "box lo"), _vec(self.hi, "box hi")
        if lo.shape != hi.shape:
            raise StructuralError("box bounds have different lengths")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise DomainError("box must be bounded")
        if np.any(lo > hi):
            raise DomainError(f"empty box: lo={lo}, hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def symmetric(cls, radius) -> "Box":
        r = _vec(radius)
        return cls(-r, r)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def radius(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, v, tol: float = 0.0) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lo - tol) and np.all(v <= self.hi + tol))

    def contains_box(self, other: "Box", tol: float = 0.0) -> bool:
        return bool(np.all(other.lo >= self.lo - tol) and np.all(other.hi <= self.hi + tol))

    def vertices(self) -> np.ndarray:
        """All ``2**dim`` corners, one per row."""
        return np.array(list(product(*zip(self.lo, self.hi))), dtype=float)


@dataclass(frozen=True)
class ParametricLinearSystem:
    """Plant matrices with affine dependence on an unknown parameter vector.

    ``phi`` is stacked as an array of shape ``(d, p, p)``.
    """

    A: np.ndarray
    phi: np.ndarray
    B: np.ndarray
    D: np.ndarray
    theta_box: Box

    def __post_init__(self):
        A = _mat(self.A, name="A")
        p = A.shape[0]
        if A.shape != (p, p):
            raise StructuralError(f"A must be square, got {A.shape}")
        phi = np.asarray(self.phi, dtype=float)
        if phi.ndim == 2:
            phi = phi[None]
        if phi.ndim != 3 or phi.shape[1:] != (p, p):
            raise StructuralError(f"phi must have shape (d, {p}, {p}), got {phi.shape}")
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(p, -1)
        B = _mat(B, name="B")
        D = np.asarray(self.D, dtype=float)
        if D.ndim == 1:
            D = D.reshape(p, -1)
        D = _mat(D, name="D")
        if B.shape[0] != p or D.shape[0] != p:
            raise StructuralError("B and D must have p rows")
        box = self.theta_box if isinstance(self.theta_box, Box) else Box(*self.theta_box)
        if box.dim != phi.shape[0]:
            raise StructuralError(f"Theta has dimension {box.dim}, phi has {phi.shape[0]} matrices")
        for name, val in (("A", A), ("phi", phi), ("B", B), ("D", D)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "theta_box", box)

    @property
    def p(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.B.shape[1]

    @property
    def r(self) -> int:
        return self.D.shape[1]

    @property
    def d(self) -> int:
        return self.phi.shape[0]

    def with_theta_box(self, box: Box) -> "ParametricLinearSystem":
        return ParametricLinearSystem(self.A, self.phi, self.B, self.D, box)


def assemble_A(sys: ParametricLinearSystem, theta, check: bool = True, tol: float = 1e-12) -> np.ndarray:
    """Return ``A + sum_i theta_i phi_i``."""
    theta = _vec(theta, "theta")
    if theta.size != sys.d:
        raise StructuralError(f"theta has length {theta.size}, expected {sys.d}")
    if check and not sys.theta_box.contains(theta, tol=tol):
        raise DomainError(f"theta={theta} is outside Theta=[{sys.theta_box.lo}, {sys.theta_box.hi}]")
    return sys.A + np.tensordot(theta, sys.phi, axes=1)


class Envelope:
    """Piecewise-constant lower/upper bounds on a vector signal.

    Piece ``k`` holds on ``[times[k], times[k+1])``; the last piece extends to
    infinity and the first one also covers any time before ``times[0]``.
    """

    def __init__(self, lo, hi, times=None):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if lo.ndim <= 1:
            lo = np.atleast_1d(lo)[None]
            hi = np.atleast_1d(hi)[None]
        if lo.shape != hi.shape or lo.ndim != 2:
            raise StructuralError("envelope bounds must have matching shape (pieces, dim)")
        if np.any(lo > hi):
            raise DomainError("envelope lower bound exceeds upper bound")
        times = np.zeros(1) if times is None else np.asarray(times, dtype=float)
        if times.shape != (lo.shape[0],):
            raise StructuralError("one breakpoint per envelope piece is required")
        if np.any(np.diff(times) <= 0):
            raise DomainError("envelope breakpoints must be strictly increasing")
        self.lo, self.hi, self.times = lo, hi, times

    @classmethod
    def constant(cls, lo, hi) -> "Envelope":
        return cls(lo, hi)

    @classmethod
    def symmetric(cls, radius) -> "Envelope":
        r = np.atleast_1d(np.asarray(radius, dtype=float))
        return cls(-r, r)

    @classmethod
    def zero(cls, dim: int) -> "Envelope":
        return cls(np.zeros(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.lo.shape[1]

    def _index(self, t):
        return np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1)

    def __call__(self, t):
        k = self._index(t)
        return self.lo[k], self.hi[k]

    def box(self) -> Box:
        """Smallest box containing every piece."""
        return Box(self.lo.min(axis=0), self.hi.max(axis=0))

    def magnitude(self) -> np.ndarray:
        """Componentwise ``max(|lo|, |hi|)`` over all pieces."""
        return np.maximum(np.abs(self.lo), np.abs(self.hi)).max(axis=0)

    def is_nonincreasing(self) -> bool:
        """True when both ``hi`` and ``hi - lo`` never increase."""
        dh = np.diff(self.hi, axis=0)
        dw = np.diff(self.hi - self.lo, axis=0)
        return bool(np.all(dh <= 0) and np.all(dw <= 0))

    def contains(self, t, value, tol: float = 0.0) -> bool:
        lo, hi = self(t)
        value = np.asarray(value)
        return bool(np.all(value >= lo - tol) and np.all(value <= hi + tol))


@dataclass
class SignalBounds:
    """Envelopes for the disturbance, the measurement noise and the initial state.

    ``nu`` bounds the stacked noise ``(nu1, nu2)`` of length ``2p``.
    """

    omega: Envelope
    nu: Envelope
    x0_lo: np.ndarray
    x0_hi: np.ndarray

    def __post_init__(self):
        self.x0_lo = _vec(self.x0_lo, "x0_lo")
        self.x0_hi = _vec(self.x0_hi, "x0_hi")
        if self.x0_lo.shape != self.x0_hi.shape:
            raise StructuralError("x0 bounds have different lengths")
        if np.any(self.x0_lo > self.x0_hi):
            raise DomainError("x0_lo exceeds x0_hi")
        if self.nu.dim != 2 * self.x0_lo.size:
            raise StructuralError(f"noise envelope must have dimension 2p={2 * self.x0_lo.size}")

    @property
    def p(self) -> int:
        return self.x0_lo.size

    def nu1(self, t):
        lo, hi = self.nu(t)
        return lo[: self.p], hi[: self.p]

    def nu2(self, t):
        lo, hi = self.nu(t)
        return lo[self.p:], hi[self.p:]

    def nu1_magnitude(self) -> np.ndarray:
        return self.nu.magnitude()[: self.p]

    def nu2_magnitude(self) -> np.ndarray:
        return self.nu.magnitude()[self.p:]


@dataclass(frozen=True)
class ConstraintBoxes:
    """State box and control box."""

    X_box: Box
    U_box: Box

    def admits_initial(self, bounds: SignalBounds) -> bool:
        return self.X_box.contains_box(Box(bounds.x0_lo, bounds.x0_hi))


@dataclass
class PlantTrace:
    """Sampled trajectory on a uniform grid; inputs are held over each step."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    omega: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    nu1: np.ndarray = field(default=None)
    nu2: np.ndarray = field(default=None)

    @property
    def step(self) -> float:
        return float(self.t[1] - self.t[0]) if self.t.size > 1 else 0.0

    def __len__(self):
        return self.t.size


def rk4_step(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> np.ndarray:
    """One classical Runge-Kutta step of an autonomous right-hand side."""
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def check_finite(x, t: float, threshold: float = DIVERGENCE_THRESHOLD) -> None:
    if not np.all(np.isfinite(x)) or np.max(np.abs(x), initial=0.0) > threshold:
        raise DivergenceError(f"state diverged after t={t:g}", last_time=t)


def grid(horizon: float, step: float) -> np.ndarray:
    if step <= 0:
        raise DomainError("step must be positive")
    if horizon < step * (1 - 1e-12):
        raise DomainError("horizon must be at least one step")
    n = int(round(horizon / step))
    return np.arange(n + 1) * step


def _zero_fn(dim):
    z = np.zeros(dim)
    return lambda t: z


def simulate_plant(sys: ParametricLinearSystem, theta, disturbance=None, control=None, x0=None,
                   horizon: float = 1.0, step: float = DEFAULT_STEP, noise=None) -> PlantTrace:
    """Integrate the plant with fixed-step RK4 and record noisy measurements.

    ``disturbance``, ``control`` and ``noise`` are functions of time; they are
    sampled at the start of each step and held over it. ``noise(t)`` returns
    ``(nu1, nu2)``.
    """
    A = assemble_A(sys, theta)
    disturbance = disturbance or _zero_fn(sys.r)
    control = control or _zero_fn(sys.q)
    x0 = np.zeros(sys.p) if x0 is None else _vec(x0, "x0")
    if x0.size != sys.p:
        raise StructuralError("x0 has the wrong length")
    ts = grid(horizon, step)
    h = ts[1] - ts[0]
    n = ts.size
    xs = np.empty((n, sys.p))
    us = np.empty((n, sys.q))
    ws = np.empty((n, sys.r))
    n1 = np.zeros((n, sys.p))
    n2 = np.zeros((n, sys.p))
    x = x0.copy()
    for k, t in enumerate(ts):
        u = np.asarray(control(t), dtype=float).reshape(sys.q)
        w = np.asarray(disturbance(t), dtype=float).reshape(sys.r)
        xs[k], us[k], ws[k] = x, u, w
        if noise is not None:
            a, b = noise(t)
            n1[k], n2[k] = a, b
        if k == n - 1:
            break
        drive = sys.B @ u + sys.D @ w
        try:
            x = rk4_step(lambda z: A @ z + drive, x, h)
            check_finite(x, t + h)
        except DivergenceError as exc:
            raise DivergenceError(str(exc), last_time=float(t)) from None
    xdot = xs @ A.T + us @ sys.B.T + ws @ sys.D.T
    return PlantTrace(t=ts, x=xs, u=us, omega=ws, y1=xs + n1, y2=xdot + n2, nu1=n1, nu2=n2)


def measure(sys: ParametricLinearSystem, theta, x, u, omega, nu1, nu2):
    """Noisy measurements ``(y1, y2)`` of the state and its derivative."""
    x = np.asarray(x, dtype=float)
    xdot = assemble_A(sys, theta) @ x + sys.B @ np.atleast_1d(u) + sys.D @ np.atleast_1d(omega)
    return x + np.asarray(nu1, dtype=float), xdot + np.asarray(nu2, dtype=float)
