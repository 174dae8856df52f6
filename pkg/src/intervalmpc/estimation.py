"""Least-squares parameter estimation with a guaranteed confidence box.

Data enter through the linear regression ``y = Phi theta + eta`` with
``y = y2 - A y1 - B u`` and ``Phi = [phi_1 y1, ..., phi_d y1]``. The
estimator integrates ``Phi^T Phi`` and ``Phi^T y`` by the trapezoid rule and
intersects the prior box with a box of radius ``dtheta`` around each new
estimate, so the confidence region can only shrink.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DomainError, ExcitationError, PEFailure, StructuralError
from .model import Box, ParametricLinearSystem, SignalBounds, assemble_A

PE_TOL = 1e-12
COND_LIMIT = 1e12
ROUNDOFF_FACTOR = 64.0


def build_regression(sys: ParametricLinearSystem, y1, y2, u):
    """Regression target and regressor for one sample or a batch of samples.

    With ``y1`` of shape ``(..., p)`` returns ``y`` of shape ``(..., p)`` and
    ``Phi`` of shape ``(..., p, d)``.
    """
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    u = np.asarray(u, dtype=float)
    if y1.shape[-1] != sys.p or y2.shape != y1.shape or u.shape[-1] != sys.q:
        raise StructuralError("measurement or control dimensions do not match the plant")
    y = y2 - y1 @ sys.A.T - u @ sys.B.T
    # Phi[..., :, i] = phi_i @ y1
    Phi = np.einsum("ijk,...k->...ji", sys.phi, y1)
    return y, Phi


class RegressorStream:
    """Running trapezoid integrals of ``Phi^T Phi``, ``Phi^T y`` and ``|Phi|_2``."""

    def __init__(self, d: int):
        self.d = d
        self.times: list[float] = []
        self._gram_cum: list[np.ndarray] = []
        self._moment_cum: list[np.ndarray] = []
        self._norm_cum: list[float] = []
        self._last = None

    def append(self, t: float, y, Phi) -> None:
        y = np.asarray(y, dtype=float)
        Phi = np.asarray(Phi, dtype=float)
        gram = Phi.T @ Phi
        mom = Phi.T @ y
        nrm = float(np.linalg.norm(Phi, 2))
        if self._last is None:
            G, m, c = np.zeros((self.d, self.d)), np.zeros(self.d), 0.0
        else:
            t0, g0, m0, n0 = self._last
            if t <= t0:
                raise DomainError("stream samples must have increasing times")
            h = t - t0
            G = self._gram_cum[-1] + 0.5 * h * (g0 + gram)
            m = self._moment_cum[-1] + 0.5 * h * (m0 + mom)
            c = self._norm_cum[-1] + 0.5 * h * (n0 + nrm)
        self.times.append(float(t))
        self._gram_cum.append(G)
        self._moment_cum.append(m)
        self._norm_cum.append(c)
        self._last = (float(t), gram, mom, nrm)

    def extend(self, ts, ys, Phis) -> None:
        for t, y, P in zip(ts, ys, Phis):
            self.append(t, y, P)

    def __len__(self):
        return len(self.times)

    def _index_at(self, t: float) -> int:
        k = int(np.searchsorted(self.times, t + 1e-12, side="right")) - 1
        if k < 0:
            raise DomainError(f"no samples at or before t={t}")
        return k

    def gramian(self, t: float | None = None) -> np.ndarray:
        """``int_0^t Phi^T Phi ds`` up to the last sample not after ``t``."""
        k = len(self.times) - 1 if t is None else self._index_at(t)
        return self._gram_cum[k]

    def moment(self, t: float | None = None) -> np.ndarray:
        k = len(self.times) - 1 if t is None else self._index_at(t)
        return self._moment_cum[k]

    def norm_integral(self, t: float | None = None) -> float:
        """``int_0^t |Phi|_2 ds`` by the same trapezoid rule."""
        k = len(self.times) - 1 if t is None else self._index_at(t)
        return self._norm_cum[k]

    def window_gramian(self, i: int, j: int) -> np.ndarray:
        return self._gram_cum[j] - self._gram_cum[i]


@dataclass(frozen=True)
class NoiseBudget:
    """Bounds entering the estimation error: ``|eta| <= eta_bar``, ``|x| <= X``."""

    eta_bar: float
    x_inf_bound: float
    nu1_inf_bound: float

    def __post_init__(self):
        if min(self.eta_bar, self.x_inf_bound, self.nu1_inf_bound) < 0:
            raise DomainError("noise budget entries must be nonnegative")


@dataclass(frozen=True)
class PeWitness:
    ell: float
    vartheta: float
    verified_on: tuple


def check_pe(stream: RegressorStream, ell: float, stride: int | None = None,
             until: float | None = None) -> PeWitness:
    """Largest ``vartheta`` with ``lambda_min(int_t^{t+ell} Phi^T Phi) >= vartheta``.

    Windows start every ``stride`` samples (default: back-to-back windows of
    length ``ell``) and must end no later than ``until``. Raises
    :class:`PEFailure` on the first window whose smallest eigenvalue is below
    ``1e-12``.
    """
    if ell <= 0:
        raise DomainError("ell must be positive")
    ts = np.asarray(stream.times)
    if ts.size < 2:
        raise DomainError("stream is too short for a PE check")
    h = ts[1] - ts[0]
    n = max(1, int(round(ell / h)))
    stride = n if stride is None else int(stride)
    if stride < 1:
        raise DomainError("stride must be at least one sample")
    last = ts.size - 1 if until is None else stream._index_at(until)
    if last < n:
        raise DomainError(f"stream covers {ts[last] - ts[0]:g}s, shorter than ell={ell:g}")
    vartheta = np.inf
    for i in range(0, last - n + 1, stride):
        lam = np.linalg.eigvalsh(stream.window_gramian(i, i + n))[0]
        if lam < PE_TOL:
            raise PEFailure(f"lambda_min={lam:.3g} on window [{ts[i]:g}, {ts[i + n]:g}]",
                            window=(float(ts[i]), float(ts[i + n])))
        vartheta = min(vartheta, lam)
    return PeWitness(ell=float(ell), vartheta=float(vartheta), verified_on=(float(ts[0]), float(ts[last])))


def least_squares(stream: RegressorStream, t: float, theta0, ell: float) -> np.ndarray:
    """Batch least-squares estimate; ``theta0`` before enough data has arrived."""
    theta0 = np.asarray(theta0, dtype=float)
    if t < 0:
        raise DomainError("t must be nonnegative")
    if t < ell:
        return theta0.copy()
    G = stream.gramian(t)
    m = stream.moment(t)
    if not np.all(np.isfinite(G)) or np.linalg.cond(G) > COND_LIMIT:
        raise ExcitationError(f"Gramian is singular at t={t:g} (cond > {COND_LIMIT:g})")
    try:
        return cho_solve(cho_factor(G), m)
    except np.linalg.LinAlgError as exc:
        raise ExcitationError(f"Gramian is not positive definite at t={t:g}") from exc


def error_bound(budget: NoiseBudget, witness: PeWitness, sys: ParametricLinearSystem) -> float:
    """Estimation error radius ``(2 ell / vartheta) max_i |phi_i|_2 (X + nu) eta_bar``."""
    phi_norm = max(np.linalg.norm(ph, 2) for ph in sys.phi)
    return float(2.0 * witness.ell / witness.vartheta * phi_norm
                 * (budget.x_inf_bound + budget.nu1_inf_bound) * budget.eta_bar)


def data_error_bound(stream: RegressorStream, t: float, eta_bar: float) -> float:
    """Error radius ``eta_bar int |Phi|_2 / lambda_min(G)`` from the recorded data.

    The trapezoid sums are linear in the data, so
    ``theta_hat - theta = G^-1 sum Phi^T eta`` holds exactly for the
    discrete estimate and its norm is at most this radius.
    """
    G = stream.gramian(t)
    lam = np.linalg.eigvalsh(G)[0]
    if lam < PE_TOL:
        raise ExcitationError(f"Gramian is singular at t={t:g}")
    return float(eta_bar * stream.norm_integral(t) / lam)


def eta_bound(sys: ParametricLinearSystem, bounds: SignalBounds) -> float:
    """Worst-case Euclidean norm of ``eta = D w - A(theta) nu1 + nu2`` over Theta."""
    w = bounds.omega.magnitude()
    dw = np.linalg.norm(np.abs(sys.D) @ w)
    a_norm = max(np.linalg.norm(assemble_A(sys, v, check=False), 2) for v in sys.theta_box.vertices())
    return float(dw + a_norm * np.linalg.norm(bounds.nu1_magnitude()) + np.linalg.norm(bounds.nu2_magnitude()))


@dataclass(frozen=True)
class ConfidenceRegion:
    """Confidence box with its update history.

    ``inconsistent`` is set when the most recent update produced an empty
    intersection and was therefore rejected.
    """

    lo: np.ndarray
    hi: np.ndarray
    theta_hat: np.ndarray
    history: tuple = field(default=())
    inconsistent: bool = False

    @classmethod
    def from_prior(cls, box: Box, theta0=None, t: float = 0.0) -> "ConfidenceRegion":
        theta0 = box.center if theta0 is None else np.asarray(theta0, dtype=float)
        return cls(box.lo.copy(), box.hi.copy(), theta0.copy(), ((float(t), box.lo.copy(), box.hi.copy()),))

    @property
    def box(self) -> Box:
        return Box(self.lo, self.hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def radius(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    def contains(self, theta, tol: float = 0.0) -> bool:
        return self.box.contains(theta, tol)


def update_confidence(region: ConfidenceRegion, theta_hat, dtheta: float, t: float | None = None) -> ConfidenceRegion:
    """Intersect ``region`` with the box of radius ``dtheta`` around ``theta_hat``."""
    if dtheta < 0:
        raise DomainError("dtheta must be nonnegative")
    theta_hat = np.asarray(theta_hat, dtype=float)
    lo = np.maximum(region.lo, theta_hat - dtheta)
    hi = np.minimum(region.hi, theta_hat + dtheta)
    if np.any(lo > hi):
        return replace(region, inconsistent=True)
    stamp = region.history[-1][0] if (t is None and region.history) else (0.0 if t is None else float(t))
    return ConfidenceRegion(lo, hi, np.clip(theta_hat, lo, hi), region.history + ((stamp, lo, hi),), False)


class SetMembershipEstimator:
    """Streaming driver tying the regression, PE check, bound and box update together.

    With ``observed_x=True`` the state bound ``X`` is replaced by the running
    maximum of ``|y1|`` plus the noise bound instead of the configured worst
    case ``x_bound``. ``bound="data"`` replaces the excitation-based radius
    by :func:`data_error_bound`, which needs no PE witness.
    """

    def __init__(self, sys: ParametricLinearSystem, ell: float, eta_bar: float, nu1_bound: float,
                 x_bound: float | None = None, theta0=None, observed_x: bool = False,
                 vartheta: float | None = None, bound: str = "pe"):
        if bound not in ("pe", "data"):
            raise DomainError(f"unknown error bound {bound!r}")
        if x_bound is None and not observed_x and bound == "pe":
            raise DomainError("either x_bound or observed_x=True is required")
        self.sys = sys
        self.ell = float(ell)
        self.eta_bar = float(eta_bar)
        self.nu1_bound = float(nu1_bound)
        self.x_bound = x_bound
        self.observed_x = observed_x
        self.vartheta_override = vartheta
        self.bound = bound
        self.stream = RegressorStream(sys.d)
        self.region = ConfidenceRegion.from_prior(sys.theta_box, theta0)
        self.theta0 = self.region.theta_hat.copy()
        self._y1_max = 0.0
        self.last_error = None
        self.last_dtheta = None
        self.inconsistent_count = 0

    def add(self, t: float, y1, y2, u) -> None:
        y, Phi = build_regression(self.sys, y1, y2, u)
        self.stream.append(t, y, Phi)
        self._y1_max = max(self._y1_max, float(np.linalg.norm(y1)))

    def budget(self) -> NoiseBudget:
        if self.observed_x:
            x_bound = self._y1_max + self.nu1_bound
        else:
            x_bound = float(self.x_bound)
        return NoiseBudget(self.eta_bar, x_bound, self.nu1_bound)

    def witness(self, t: float) -> PeWitness:
        if self.vartheta_override is not None:
            return PeWitness(self.ell, float(self.vartheta_override), (0.0, float(t)))
        return check_pe(self.stream, self.ell, until=t)

    def estimate(self, t: float) -> np.ndarray:
        return least_squares(self.stream, t, self.theta0, self.ell)

    def update(self, t: float) -> ConfidenceRegion:
        """Refresh the confidence box with data up to ``t``.

        Before ``ell`` or when the data are not exciting the region is left
        unchanged and ``last_error`` records why.
        """
        self.last_error = None
        if len(self.stream) < 2 or t < self.ell:
            return self.region
        covered = min(t, self.stream.times[-1]) - self.stream.times[0]
        if covered < self.ell * (1 - 1e-9):
            return self.region
        try:
            theta_hat = self.estimate(t)
            if self.bound == "data":
                dtheta = data_error_bound(self.stream, t, self.eta_bar)
            else:
                dtheta = error_bound(self.budget(), self.witness(t), self.sys)
        except (PEFailure, ExcitationError) as exc:
            self.last_error = exc
            return self.region
        # floating-point slack of the solve, so an exact bound cannot empty the box
        cond = float(np.linalg.cond(self.stream.gramian(t)))
        dtheta += ROUNDOFF_FACTOR * np.finfo(float).eps * cond * max(1.0, float(np.max(np.abs(theta_hat))))
        self.last_dtheta = dtheta
        new = update_confidence(self.region, theta_hat, dtheta, t)
        if new.inconsistent:
            self.inconsistent_count += 1
        self.region = new
        return new
