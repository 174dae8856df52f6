"""ISS feedback for the extended predictor and its diagonal Lyapunov certificate.

The feedback is ``u = K0 xi + K1 xi^+ + K2 xi^- + S delta`` and the
certificate is a set of diagonal matrices for which a symmetric block matrix
``Upsilon`` is negative semidefinite. Certificates are checked exactly with a
symmetric eigensolver. Gains are synthesized by a seeded derivative-free
search over the congruence-transformed variables, and every candidate the
search returns is re-verified on ``Upsilon`` itself.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import DomainError, StructuralError, SynthesisFailure
from .prediction import ExtendedSystem, map_interval, neg, pos

UPSILON_TOL = 1e-9

DIAG_FIELDS = ("P", "Q", "Q_plus", "Q_minus", "Z_plus", "Z_minus", "Psi_plus", "Psi_minus", "Psi", "Gamma")


@dataclass
class FeedbackGains:
    K0: np.ndarray
    K1: np.ndarray
    K2: np.ndarray
    S: np.ndarray

    @classmethod
    def zeros(cls, q: int, n: int) -> "FeedbackGains":
        z = np.zeros((q, n))
        return cls(z, z.copy(), z.copy(), z.copy())

    def __post_init__(self):
        for name in ("K0", "K1", "K2", "S"):
            val = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(val)):
                raise StructuralError(f"gain {name} has non-finite entries")
            setattr(self, name, val)


@dataclass
class LyapunovCertificate:
    """Diagonal certificate matrices, stored as their diagonals."""

    P: np.ndarray
    Q: np.ndarray
    Q_plus: np.ndarray
    Q_minus: np.ndarray
    Z_plus: np.ndarray
    Z_minus: np.ndarray
    Psi_plus: np.ndarray
    Psi_minus: np.ndarray
    Psi: np.ndarray
    Gamma: np.ndarray
    alpha: float | None = None

    def __post_init__(self):
        n = None
        for name in DIAG_FIELDS:
            val = np.asarray(getattr(self, name), dtype=float)
            if val.ndim == 2:
                if np.any(val - np.diag(np.diag(val))):
                    raise StructuralError(f"certificate matrix {name} must be diagonal")
                val = np.diag(val).copy()
            val = np.atleast_1d(val)
            n = val.size if n is None else n
            if val.size != n:
                raise StructuralError("certificate matrices have inconsistent sizes")
            setattr(self, name, val)

    @property
    def n(self) -> int:
        return self.P.size

    @property
    def omega(self) -> np.ndarray:
        return self.Q + np.minimum(self.Q_plus, self.Q_minus) + 2.0 * np.minimum(self.Psi_plus, self.Psi_minus)

    @property
    def lower_weight(self) -> np.ndarray:
        """Diagonal of ``P + min{Z+, Z-}``: ``V(xi) >= xi^T diag(.) xi``."""
        return self.P + np.minimum(self.Z_plus, self.Z_minus)

    @property
    def upper_weight(self) -> np.ndarray:
        """Diagonal of ``P + Z+^+ + Z-^+``: ``V(xi) <= xi^T diag(.) xi``."""
        return self.P + pos(self.Z_plus) + pos(self.Z_minus)

    def decay_rate(self) -> float:
        return float(np.min(self.omega / self.upper_weight))


def feedback_control(gains: FeedbackGains, xi, delta):
    """``K0 xi + K1 xi^+ + K2 xi^- + S delta``; batched over leading axes."""
    xi = np.asarray(xi, dtype=float)
    delta = np.asarray(delta, dtype=float)
    return xi @ gains.K0.T + pos(xi) @ gains.K1.T + neg(xi) @ gains.K2.T + delta @ gains.S.T


def select_S(B_ext) -> np.ndarray:
    """Least-squares minimizer of ``|B_ext S + I|_F``."""
    return -np.linalg.pinv(np.asarray(B_ext, dtype=float))


def closed_loop_matrices(ext: ExtendedSystem, gains: FeedbackGains):
    return (ext.A0 + ext.B @ gains.K0, ext.A1 + ext.B @ gains.K1, ext.A2 + ext.B @ gains.K2)


def build_upsilon(ext: ExtendedSystem, gains: FeedbackGains, cert: LyapunovCertificate) -> np.ndarray:
    n = ext.n
    if cert.n != n:
        raise StructuralError(f"certificate has size {cert.n}, extended system has {n}")
    for name in ("K0", "K1", "K2"):
        if getattr(gains, name).shape != (ext.B.shape[1], n):
            raise StructuralError(f"gain {name} must have shape {(ext.B.shape[1], n)}")
    D0, D1, D2 = closed_loop_matrices(ext, gains)
    P, Zp, Zm = np.diag(cert.P), np.diag(cert.Z_plus), np.diag(cert.Z_minus)
    U11 = D0.T @ P + P @ D0 + np.diag(cert.Q)
    U12 = D0.T @ Zp + P @ D1 + np.diag(cert.Psi_plus)
    U13 = P @ D2 - D0.T @ Zm - np.diag(cert.Psi_minus)
    U22 = Zp @ D1 + D1.T @ Zp + np.diag(cert.Q_plus)
    U23 = Zp @ D2 - D1.T @ Zm + np.diag(cert.Psi)
    U33 = -Zm @ D2 - D2.T @ Zm + np.diag(cert.Q_minus)
    G = np.diag(cert.Gamma)
    return np.block([
        [U11, U12, U13, P],
        [U12.T, U22, U23, Zp],
        [U13.T, U23.T, U33, -Zm],
        [P, Zp, -Zm, -G],
    ])


@dataclass
class Verdict:
    valid: bool
    reasons: list = field(default_factory=list)
    lambda_max: float = float("nan")
    alpha: float | None = None

    def __bool__(self):
        return self.valid


def verify_certificate(ext: ExtendedSystem, gains: FeedbackGains, cert: LyapunovCertificate,
                       tol: float = UPSILON_TOL) -> Verdict:
    """Check every side condition and ``lambda_max(Upsilon) <= tol``.

    On success the decay rate is stored on ``cert.alpha``.
    """
    reasons = []
    if not np.all(cert.lower_weight > 0):
        reasons.append("P+min(Z+,Z-)")
    if not np.all(cert.Gamma > 0):
        reasons.append("Gamma")
    if not np.all(cert.omega > 0):
        reasons.append("Omega")
    ups = build_upsilon(ext, gains, cert)
    lam = float(np.linalg.eigvalsh(0.5 * (ups + ups.T))[-1])
    if not lam <= tol:
        reasons.append("Upsilon")
    if reasons:
        return Verdict(False, reasons, lam)
    cert.alpha = cert.decay_rate()
    return Verdict(True, [], lam, cert.alpha)


def lyapunov_value(cert: LyapunovCertificate, xi):
    """``xi^T P xi + xi^T Z+ xi^+ - xi^T Z- xi^-``; batched over leading axes."""
    xi = np.asarray(xi, dtype=float)
    return (xi ** 2 @ cert.P + (xi * pos(xi)) @ cert.Z_plus - (xi * neg(xi)) @ cert.Z_minus)


def delta_tilde_box(ext: ExtendedSystem, gains: FeedbackGains):
    """Box containing ``(B S + I) delta(t)`` over every envelope piece."""
    M = ext.B @ gains.S + np.eye(ext.n)
    vals = ext.delta_pieces() @ M.T
    return vals.min(axis=0), vals.max(axis=0)


@dataclass
class TerminalSet:
    """Sublevel set ``{xi : V(xi) <= level}`` of a valid certificate."""

    cert: LyapunovCertificate
    level: float

    def value(self, xi):
        return lyapunov_value(self.cert, xi)

    def contains(self, xi) -> bool:
        # ties belong to the set
        return bool(self.value(xi) <= self.level)

    def outer_radius(self) -> np.ndarray:
        """Half-widths of the box enclosing the set, from ``V >= xi^T (P+min Z) xi``."""
        return np.sqrt(self.level / self.cert.lower_weight)


def terminal_set(cert: LyapunovCertificate, delta_tilde_bound, level_scale: float = 1.0) -> TerminalSet:
    """Terminal set with level ``sup |dt^T Gamma dt| / alpha`` over a box of ``delta_tilde``.

    ``delta_tilde_bound`` is either ``(lo, hi)`` or a vector of magnitudes.
    Gamma is diagonal, so the supremum sits at a vertex: componentwise
    ``max(lo^2, hi^2)``. ``level_scale >= 1`` enlarges the level; every such
    sublevel set stays invariant because ``dV/dt < 0`` wherever ``V`` exceeds
    the unscaled level.
    """
    if cert.alpha is None or not cert.alpha > 0:
        raise StructuralError("certificate must be verified (alpha > 0) before building X_f")
    if not level_scale >= 1.0 or not np.isfinite(level_scale):
        raise DomainError(f"level_scale must be a finite number >= 1, got {level_scale!r}")
    if isinstance(delta_tilde_bound, tuple):
        lo, hi = (np.asarray(v, dtype=float) for v in delta_tilde_bound)
        sq = np.maximum(lo ** 2, hi ** 2)
    else:
        sq = np.asarray(delta_tilde_bound, dtype=float) ** 2
    level = float(np.abs(cert.Gamma) @ sq) / cert.alpha * level_scale
    return TerminalSet(cert, level)


# --------------------------------------------------------------------------
# synthesis

@dataclass
class SynthesisConfig:
    """Search settings.

    ``method="sdp"`` solves, for fixed gains, the convex certificate problem
    at each trial decay rate in ``alphas`` and keeps the smallest terminal
    level. ``method="cem"`` runs a seeded cross-entropy search over the
    certificate entries (and the gains when ``search_gains`` is set),
    minimizing ``max(lambda_max(Upsilon) + margin, Omega violation)``.
    """

    method: str = "sdp"
    seed: int = 0
    margin: float = 1e-6
    alphas: tuple = (1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.2, 0.3, 0.5, 0.8, 1.2, 2.0)
    bound: float = 1e4
    population: int = 400
    iterations: int = 2000
    elite: float = 0.1
    restarts: int = 2
    search_gains: bool = False

    def __post_init__(self):
        if self.method not in ("sdp", "cem"):
            raise ValueError(f"unknown synthesis method {self.method!r}")


@dataclass
class SynthesisResult:
    gains: FeedbackGains
    cert: LyapunovCertificate
    level: float
    method: str
    attempts: list = field(default_factory=list)


def _upsilon_batch(ext: ExtendedSystem, K, c) -> np.ndarray:
    """``Upsilon`` for a batch: ``K`` is ``(3, b, q, n)``, ``c`` maps names to ``(b, n)``."""
    A = (ext.A0, ext.A1, ext.A2)
    D0, D1, D2 = (A[i][None] + np.einsum("ij,bjk->bik", ext.B, K[i]) for i in range(3))
    T = lambda M: np.swapaxes(M, 1, 2)
    dg = lambda v: v[:, :, None] * np.eye(v.shape[1])[None]
    P, Zp, Zm = dg(c["P"]), dg(c["Z_plus"]), dg(c["Z_minus"])
    U11 = T(D0) @ P + P @ D0 + dg(c["Q"])
    U12 = T(D0) @ Zp + P @ D1 + dg(c["Psi_plus"])
    U13 = P @ D2 - T(D0) @ Zm - dg(c["Psi_minus"])
    U22 = Zp @ D1 + T(D1) @ Zp + dg(c["Q_plus"])
    U23 = Zp @ D2 - T(D1) @ Zm + dg(c["Psi"])
    U33 = -Zm @ D2 - T(D2) @ Zm + dg(c["Q_minus"])
    G = dg(c["Gamma"])
    rows = [
        [U11, U12, U13, P],
        [T(U12), U22, U23, Zp],
        [T(U13), T(U23), U33, -Zm],
        [P, Zp, -Zm, -G],
    ]
    return np.concatenate([np.concatenate(r, axis=2) for r in rows], axis=1)


def _cem_search(ext: ExtendedSystem, config: SynthesisConfig, rng):
    n, q = ext.n, ext.B.shape[1]
    S = select_S(ext.B)
    nk = 3 * q * n if config.search_gains else 0
    dim = 10 * n + nk
    # the first four blocks (P, Z+, Z-, Gamma) are log-parametrized
    names = ("P", "Z_plus", "Z_minus", "Gamma", "Q", "Q_plus", "Q_minus", "Psi_plus", "Psi_minus", "Psi")

    def decode(X):
        c = {name: X[:, i * n:(i + 1) * n] for i, name in enumerate(names)}
        for name in names[:4]:
            c[name] = np.exp(np.clip(c[name], -12.0, 12.0))
        if nk:
            K = X[:, 10 * n:].reshape(-1, 3, q, n).transpose(1, 0, 2, 3)
        else:
            K = np.zeros((3, X.shape[0], q, n))
        return c, K

    def score(X):
        c, K = decode(X)
        ups = _upsilon_batch(ext, K, c)
        ub = c["P"] + c["Z_plus"] + c["Z_minus"]
        lam = np.linalg.eigvalsh(ups)[:, -1] / ub.max(axis=1)
        om = c["Q"] + np.minimum(c["Q_plus"], c["Q_minus"]) + 2.0 * np.minimum(c["Psi_plus"], c["Psi_minus"])
        rel = np.min(om / ub, axis=1)
        return np.maximum(lam + config.margin, 10.0 * (config.margin - rel))

    def package(x):
        c, K = decode(x[None])
        cert = LyapunovCertificate(**{k: v[0] for k, v in c.items()})
        return FeedbackGains(K[0, 0], K[1, 0], K[2, 0], S), cert

    n_elite = max(2, int(config.elite * config.population))
    attempts = []
    for restart in range(config.restarts):
        mu = np.zeros(dim)
        sd = np.ones(dim)
        best_f, best_x = np.inf, None
        for it in range(config.iterations):
            X = mu + sd * rng.standard_normal((config.population, dim))
            f = score(X)
            # stable sort keeps ties in candidate order
            idx = np.argsort(f, kind="stable")[:n_elite]
            if f[idx[0]] < best_f:
                best_f, best_x = float(f[idx[0]]), X[idx[0]].copy()
            if best_f <= 0:
                gains, cert = package(best_x)
                if verify_certificate(ext, gains, cert):
                    attempts.append(("cem", restart, it, best_f))
                    return gains, cert, attempts
                best_f = np.inf
            mu = 0.7 * X[idx].mean(axis=0) + 0.3 * mu
            sd = 0.7 * X[idx].std(axis=0) + 0.3 * sd + 1e-6
        attempts.append(("cem", restart, config.iterations, best_f))
    return None, None, attempts


def _dsq(ext: ExtendedSystem, gains: FeedbackGains) -> np.ndarray:
    lo, hi = delta_tilde_box(ext, gains)
    return np.maximum(lo ** 2, hi ** 2)


def _certificate_sdp(ext: ExtendedSystem, gains: FeedbackGains, alpha0: float, scale, config: SynthesisConfig):
    """Certificate for fixed gains with decay rate at least ``alpha0`` and minimal terminal level.

    The lower Lyapunov weight is normalized to ``P + min(Z+, Z-) >= 1/scale^2``
    so that the terminal-set outer box has half-widths ``sqrt(level) * scale``.
    """
    import cvxpy as cp

    n = ext.n
    D0, D1, D2 = closed_loop_matrices(ext, gains)
    var = {name: cp.Variable(n) for name in DIAG_FIELDS}
    d = cp.diag
    P, Zp, Zm = d(var["P"]), d(var["Z_plus"]), d(var["Z_minus"])
    U11 = D0.T @ P + P @ D0 + d(var["Q"])
    U12 = D0.T @ Zp + P @ D1 + d(var["Psi_plus"])
    U13 = P @ D2 - D0.T @ Zm - d(var["Psi_minus"])
    U22 = Zp @ D1 + D1.T @ Zp + d(var["Q_plus"])
    U23 = Zp @ D2 - D1.T @ Zm + d(var["Psi"])
    U33 = -Zm @ D2 - D2.T @ Zm + d(var["Q_minus"])
    ups = cp.bmat([[U11, U12, U13, P], [U12.T, U22, U23, Zp], [U13.T, U23.T, U33, -Zm],
                   [P, Zp, -Zm, -d(var["Gamma"])]])
    omega = var["Q"] + cp.minimum(var["Q_plus"], var["Q_minus"]) + 2 * cp.minimum(var["Psi_plus"], var["Psi_minus"])
    upper = var["P"] + var["Z_plus"] + var["Z_minus"]
    s2 = np.concatenate([scale, scale]) ** 2
    cons = [
        0.5 * (ups + ups.T) << -config.margin * np.eye(4 * n),
        omega >= alpha0 * upper,
        var["P"] + cp.minimum(var["Z_plus"], var["Z_minus"]) >= 1.0 / s2,
        var["Z_plus"] >= 0, var["Z_minus"] >= 0,
        var["Gamma"] >= config.margin,
    ]
    cons += [cp.abs(v) <= config.bound for v in var.values()]
    dsq = _dsq(ext, gains)
    objective = cp.Minimize(dsq @ var["Gamma"] + 1e-9 * cp.sum(var["Gamma"]))
    prob = cp.Problem(objective, cons)
    try:
        prob.solve(solver=cp.CLARABEL)
    except cp.error.SolverError:
        return None, "solver error"
    if prob.status not in ("optimal", "optimal_inaccurate"):
        return None, prob.status
    cert = LyapunovCertificate(**{k: np.asarray(v.value, dtype=float) for k, v in var.items()})
    return cert, prob.status


def _structured_gains(ext: ExtendedSystem, config: SynthesisConfig):
    """Gains from the transformed inequality ``Pi <= 0`` (Omega is handled afterwards)."""
    import cvxpy as cp

    n, q = ext.n, ext.B.shape[1]
    d = cp.diag
    x = {k: cp.Variable(n) for k in ("X", "Yp", "Ym", "G", "Qt", "Qtp", "Qtm", "Pst", "Pstp", "Pstm")}
    U = [cp.Variable((q, n)) for _ in range(3)]
    T0 = ext.A0 @ d(x["X"]) + ext.B @ U[0]
    T1 = ext.A1 @ d(x["Yp"]) + ext.B @ U[1]
    T2 = ext.A2 @ d(x["Ym"]) + ext.B @ U[2]
    I = np.eye(n)
    P12 = T1 + T0.T + d(x["Pstp"])
    P13 = T2 - T0.T - d(x["Pstm"])
    P23 = T2 - T1.T + d(x["Pst"])
    Pi = cp.bmat([[T0 + T0.T + d(x["Qt"]), P12, P13, I],
                  [P12.T, T1 + T1.T + d(x["Qtp"]), P23, I],
                  [P13.T, P23.T, d(x["Qtm"]) - T2 - T2.T, -I],
                  [I, I, -I, -d(x["G"])]])
    t = cp.Variable()
    cons = [0.5 * (Pi + Pi.T) << -t * np.eye(4 * n), t <= 1.0, x["Qt"] >= 0]
    cons += [x[k] >= 1e-3 for k in ("X", "Yp", "Ym", "G")]
    cons += [cp.abs(v) <= config.bound for v in x.values()] + [cp.abs(u) <= config.bound for u in U]
    prob = cp.Problem(cp.Maximize(t), cons)
    try:
        prob.solve(solver=cp.CLARABEL)
    except cp.error.SolverError:
        return None
    if prob.status not in ("optimal", "optimal_inaccurate") or t.value is None or t.value <= 0:
        return None
    P, Zp, Zm = 1.0 / x["X"].value, 1.0 / x["Yp"].value, 1.0 / x["Ym"].value
    return FeedbackGains(U[0].value * P[None], U[1].value * Zp[None], U[2].value * Zm[None], select_S(ext.B))


def synthesize(ext: ExtendedSystem, config: SynthesisConfig | None = None, scale=None) -> SynthesisResult:
    """Gains, certificate and terminal level; raise :class:`SynthesisFailure` if none is found.

    ``scale`` (length ``p``) sets the per-coordinate half-widths used to
    normalize the terminal set: with the ``sdp`` method the returned level is
    then the squared ratio of the terminal outer box to ``scale``. Zero
    gains are tried first; a congruence-transformed LMI supplies gains only when
    the open-loop extended system admits no certificate.
    """
    config = config or SynthesisConfig()
    n, q = ext.n, ext.B.shape[1]
    scale = np.ones(ext.p) if scale is None else np.asarray(scale, dtype=float)
    rng = np.random.default_rng(config.seed)
    attempts = []
    if config.method == "cem":
        gains, cert, attempts = _cem_search(ext, config, rng)
        if gains is None:
            raise SynthesisFailure(f"cross-entropy search found no certificate ({attempts})", best=attempts)
        level = terminal_set(cert, delta_tilde_box(ext, gains)).level
        return SynthesisResult(gains, cert, level, "cem", attempts)

    zero = FeedbackGains.zeros(q, n)
    zero.S = select_S(ext.B)
    candidates = [("zero", zero)]
    best = None
    for label, gains in candidates:
        for alpha0 in config.alphas:
            cert, status = _certificate_sdp(ext, gains, alpha0, scale, config)
            entry = [label, alpha0, status, None]
            if cert is not None and verify_certificate(ext, gains, cert):
                level = terminal_set(cert, delta_tilde_box(ext, gains)).level
                entry[3] = level
                if best is None or level < best.level:
                    best = SynthesisResult(gains, cert, level, "sdp", attempts)
            attempts.append(tuple(entry))
        if best is None and label == "zero":
            K = _structured_gains(ext, config)
            if K is not None:
                candidates.append(("structured", K))
    if best is None:
        raise SynthesisFailure("no certificate found for any trial decay rate", best=attempts)
    return best


def synthesize_gains(ext: ExtendedSystem, config: SynthesisConfig | None = None, scale=None):
    """``(gains, certificate)`` from :func:`synthesize`."""
    res = synthesize(ext, config, scale)
    return res.gains, res.cert


# --------------------------------------------------------------------------
# terminal-set admissibility

@dataclass
class AdmissibilityReport:
    inside_state: bool
    inside_input: bool
    conclusive: bool
    state_bound: np.ndarray
    input_bound: tuple

    @property
    def ok(self) -> bool:
        return self.inside_state and self.inside_input

    @property
    def verdict(self) -> str:
        if not self.ok:
            return "violated"
        return "certified" if self.conclusive else "probabilistic"


def _gain_range(gains: FeedbackGains, radius):
    """Range of ``K0 xi + K1 xi^+ + K2 xi^-`` over the box ``|xi| <= radius``."""
    up = (gains.K0 + gains.K1) * radius[None, :]
    dn = -(gains.K0 - gains.K2) * radius[None, :]
    hi = np.maximum(np.maximum(up, dn), 0.0).sum(axis=1)
    lo = np.minimum(np.minimum(up, dn), 0.0).sum(axis=1)
    return lo, hi


@dataclass
class ConstraintMap:
    """How predictor coordinates relate to the constrained signals.

    The plant state is ``state_map @ z`` and the applied input is the
    predictor input plus ``input_gain @ y1`` with ``|y1 - x| <= nu1_mag``
    (a preliminary output feedback expressed in predictor coordinates).
    """

    state_map: np.ndarray
    input_gain: np.ndarray
    nu1_mag: np.ndarray

    @classmethod
    def identity(cls, p: int, q: int) -> "ConstraintMap":
        return cls(np.eye(p), np.zeros((q, p)), np.zeros(p))

    def state_range(self, z_lo, z_hi):
        return map_interval(self.state_map, z_lo, z_hi)

    def input_offset(self, z_lo, z_hi):
        """Range of the preliminary feedback for ``z`` in ``[z_lo, z_hi]``."""
        return map_interval(self.input_gain, np.asarray(z_lo) - self.nu1_mag, np.asarray(z_hi) + self.nu1_mag)


def _outer_bounds(term: TerminalSet, gains: FeedbackGains, ext: ExtendedSystem, cmap: ConstraintMap):
    p = ext.p
    r = term.outer_radius()
    z_lo = -np.maximum(r[:p], r[p:])
    z_hi = np.maximum(r[:p], r[p:])
    x_lo, x_hi = cmap.state_range(z_lo, z_hi)
    sdel = ext.delta_pieces() @ gains.S.T
    u_lo, u_hi = _gain_range(gains, r)
    g_lo, g_hi = cmap.input_offset(z_lo, z_hi)
    return x_lo, x_hi, u_lo + sdel.min(axis=0) + g_lo, u_hi + sdel.max(axis=0) + g_hi


def _box_excess(lo, hi, box) -> float:
    """Largest excursion of ``[lo, hi]`` outside ``box``, relative to its width (<= 0 inside)."""
    w = np.maximum(box.hi - box.lo, 1e-300)
    return float(max(np.max((hi - box.hi) / w), np.max((box.lo - lo) / w)))


def terminal_side_condition(ext: ExtendedSystem, X_box, U_box, cmap: ConstraintMap | None = None):
    """Synthesis side condition: the outer box of ``X_f`` respects the constraints."""
    cmap = cmap or ConstraintMap.identity(ext.p, ext.B.shape[1])

    def side(gains, cert):
        if not cert.alpha or cert.alpha <= 0:
            return np.inf
        term = terminal_set(cert, delta_tilde_box(ext, gains))
        x_lo, x_hi, u_lo, u_hi = _outer_bounds(term, gains, ext, cmap)
        return max(_box_excess(x_lo, x_hi, X_box), _box_excess(u_lo, u_hi, U_box))

    return side


def check_terminal_admissible(term: TerminalSet, gains: FeedbackGains, ext: ExtendedSystem, X_box, U_box,
                              cmap: ConstraintMap | None = None, samples: int = 10_000,
                              seed: int = 0) -> AdmissibilityReport:
    """Check ``X_f`` inside the doubled state box and the feedback inside the input box.

    The outer box of ``X_f`` (from the quadratic lower bound of ``V``) gives
    a sufficient test. If it fails, points on the level set are sampled and
    the verdict is only probabilistic.
    """
    cmap = cmap or ConstraintMap.identity(ext.p, ext.B.shape[1])
    p = ext.p
    x_lo, x_hi, u_lo, u_hi = _outer_bounds(term, gains, ext, cmap)
    state_ok = _box_excess(x_lo, x_hi, X_box) <= 0
    input_ok = _box_excess(u_lo, u_hi, U_box) <= 0
    if state_ok and input_ok:
        return AdmissibilityReport(True, True, True, np.maximum(np.abs(x_lo), np.abs(x_hi)), (u_lo, u_hi))
    # rescale random directions onto the level set V = level
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(samples, ext.n))
    vals = lyapunov_value(term.cert, dirs)
    pts = dirs * np.sqrt(term.level / vals)[:, None]
    lo = np.minimum(pts[:, :p], pts[:, p:])
    hi = np.maximum(pts[:, :p], pts[:, p:])
    xl, xh = cmap.state_range(lo, hi)
    u = feedback_control(gains, pts[:, None, :], ext.delta_pieces()[None, :, :])
    gl, gh = cmap.input_offset(lo, hi)
    ul = (u.min(axis=1) + gl).min(axis=0)
    uh = (u.max(axis=1) + gh).max(axis=0)
    s_ok = _box_excess(xl.min(axis=0), xh.max(axis=0), X_box) <= 0
    i_ok = _box_excess(ul, uh, U_box) <= 0
    return AdmissibilityReport(s_ok, i_ok, False, np.maximum(np.abs(xl), np.abs(xh)).max(axis=0), (ul, uh))


# --------------------------------------------------------------------------
# serialization

def _fmt(a):
    return np.asarray(a, dtype=float).tolist()


def certificate_document(gains: FeedbackGains, cert: LyapunovCertificate, extra: dict | None = None) -> str:
    """Text document mapping matrix names to row-major number lists."""
    doc = {"gains": {k: _fmt(getattr(gains, k)) for k in ("K0", "K1", "K2", "S")},
           "certificate": {k: _fmt(np.diag(getattr(cert, k))) for k in DIAG_FIELDS},
           "alpha": cert.alpha}
    if extra:
        doc["extra"] = extra
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save_certificate(path, gains, cert, extra=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(certificate_document(gains, cert, extra))


def load_certificate(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    gains = FeedbackGains(**{k: np.array(v, dtype=float) for k, v in doc["gains"].items()})
    cert = LyapunovCertificate(**{k: np.array(v, dtype=float) for k, v in doc["certificate"].items()},
                               alpha=doc.get("alpha"))
    return gains, cert, doc.get("extra", {})
