import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linprog

from intervalmpc.errors import ContractError, DivergenceError, DomainError
from intervalmpc.model import Box, Envelope, ParametricLinearSystem, assemble_A, simulate_plant
from intervalmpc.prediction import (EnhancedPredictor, IntervalState, NaivePredictor, PolytopicModel,
                                    assemble_extended, choose_predictor, find_metzler_transform, interval_hull,
                                    map_interval, metzler_check, metzler_shift, polytopic_vertices, predict,
                                    split_matrix, step_enhanced, step_naive)

OMEGA = Envelope.constant([-0.05], [0.05])


def test_split_examples():
    Mp, Mm = split_matrix([[1, -2], [0, 3]])
    assert np.array_equal(Mp, [[1, 0], [0, 3]]) and np.array_equal(Mm, [[0, 2], [0, 0]])
    Mp, Mm = split_matrix(np.zeros((2, 2)))
    assert not Mp.any() and not Mm.any()
    Mp, Mm = split_matrix(-np.eye(2))
    assert not Mp.any() and np.array_equal(Mm, np.eye(2))


@given(arrays(float, (3, 3), elements=st.floats(-1e6, 1e6)))
def test_split_property(M):
    Mp, Mm = split_matrix(M)
    assert np.all(Mp >= 0) and np.all(Mm >= 0)
    assert np.array_equal(Mp - Mm, M)


def test_interval_hull_examples(scalar_sys):
    hull = interval_hull(scalar_sys, Box([1.3], [1.3]))
    assert hull.lo == pytest.approx(hull.hi) and hull.lo[0, 0] == pytest.approx(-1.3)
    hull = interval_hull(scalar_sys, Box([1.0], [2.0]))
    assert (hull.lo[0, 0], hull.hi[0, 0]) == (-2.0, -1.0)


@given(st.integers(0, 10_000))
def test_interval_hull_contains_vertices_and_grows(seed):
    rng = np.random.default_rng(seed)
    phi = rng.normal(size=(2, 3, 3))
    sys = ParametricLinearSystem(rng.normal(size=(3, 3)), phi, np.zeros((3, 1)), np.zeros((3, 1)),
                                 Box([-1.0, -1.0], [1.0, 1.0]))
    inner = Box([-0.3, 0.1], [0.2, 0.5])
    small, big = interval_hull(sys, inner), interval_hull(sys, sys.theta_box)
    # brute force over the vertices of the box
    for v in inner.vertices():
        assert small.contains(assemble_A(sys, v), tol=1e-12)
    assert np.all(big.lo <= small.lo + 1e-12) and np.all(big.hi >= small.hi - 1e-12)


def test_polytope_examples(scalar_sys):
    poly = polytopic_vertices(scalar_sys, Box([1.5], [1.5]))
    assert not poly.deviations.any() and not poly.dA_plus.any() and not poly.dA_minus.any()
    poly = polytopic_vertices(scalar_sys, Box([1.0], [2.0]))
    assert poly.A0[0, 0] == -1.5
    assert sorted(poly.deviations[:, 0, 0]) == [-0.5, 0.5]
    assert poly.dA_plus[0, 0] == 0.5 and poly.dA_minus[0, 0] == 0.5


def test_polytope_hull_membership_by_lp():
    rng = np.random.default_rng(1)
    phi = rng.normal(size=(2, 2, 2))
    box = Box([0.9, -0.2], [1.1, 0.2])
    sys = ParametricLinearSystem(rng.normal(size=(2, 2)), phi, np.zeros((2, 1)), np.zeros((2, 1)), box)
    poly = polytopic_vertices(sys, box)
    assert poly.deviations.shape[0] == 4
    V = poly.vertices.reshape(4, -1).T
    for _ in range(1000):
        theta = box.lo + rng.uniform(size=2) * box.width
        # put theta on the boundary along a random axis
        ax = rng.integers(2)
        theta[ax] = box.lo[ax] if rng.uniform() < 0.5 else box.hi[ax]
        target = assemble_A(sys, theta).ravel()
        res = linprog(np.zeros(4), A_eq=np.vstack([V, np.ones((1, 4))]), b_eq=np.append(target, 1.0),
                      bounds=[(0, None)] * 4, method="highs")
        assert res.status == 0


def test_polytope_dimension_limit():
    sys = ParametricLinearSystem([[0.0]], np.ones((21, 1, 1)), [[1.0]], [[1.0]], Box(np.zeros(21), np.ones(21)))
    with pytest.raises(DomainError):
        polytopic_vertices(sys, sys.theta_box)


def test_metzler_check_examples():
    assert metzler_check([[-1, 0.5], [0.2, -2]])
    assert not metzler_check([[-1, -0.1], [0, -1]])
    assert metzler_check(np.diag([3.0, -4.0, 1.0]))


def test_metzler_transform_examples():
    A = np.array([[-1, 0.5], [0.2, -2]])
    assert np.array_equal(find_metzler_transform(A), np.eye(2))
    A = np.array([[0.0, 1.0], [2.0, 0.0]])
    # already Metzler; force the eigenvector route with a negative coupling
    B = np.array([[0.0, -1.0], [-2.0, 0.0]])
    Z = find_metzler_transform(B)
    D = np.linalg.solve(Z, B @ Z)
    assert np.allclose(D, np.diag([np.sqrt(2), -np.sqrt(2)]), atol=1e-12)
    assert np.allclose(np.linalg.norm(Z, axis=0), 1.0)
    assert find_metzler_transform(np.array([[0.0, -1.0], [1.0, 0.0]])) is None
    assert metzler_check(A)


def test_metzler_shift_preserves_vertices():
    poly = PolytopicModel.from_deviations(np.array([[-2.0, -0.3], [0.1, -1.0]]),
                                          np.array([[[0.1, 0.0], [0.0, 0.2]], [[-0.1, 0.0], [0.0, -0.2]]]))
    sh = metzler_shift(poly)
    assert metzler_check(sh.A0)
    assert np.allclose(sh.vertices, poly.vertices)


def test_naive_rhs_example(scalar_sys):
    pred = NaivePredictor(interval_hull(scalar_sys, scalar_sys.theta_box), scalar_sys.B, scalar_sys.D)
    lo, hi = pred.rhs(np.array([1.0]), np.array([1.0]), np.zeros(1), [-0.05], [0.05])
    assert lo[0] == pytest.approx(-2.05) and hi[0] == pytest.approx(-0.95)


def test_enhanced_rhs_example(scalar_sys):
    pred = EnhancedPredictor(polytopic_vertices(scalar_sys, scalar_sys.theta_box), scalar_sys.B, scalar_sys.D)
    lo, hi = pred.rhs(np.array([1.0]), np.array([1.0]), np.zeros(1), [-0.05], [0.05])
    assert lo[0] == pytest.approx(-2.05) and hi[0] == pytest.approx(-0.95)


def test_enhanced_requires_metzler():
    poly = PolytopicModel.from_deviations(np.array([[-1.0, -0.1], [0.0, -1.0]]), np.zeros((1, 2, 2)))
    with pytest.raises(ContractError):
        EnhancedPredictor(poly, np.zeros((2, 1)), np.zeros((2, 1)))


def test_steppers_zero_system_unchanged():
    hull_sys = ParametricLinearSystem(np.zeros((2, 2)), np.zeros((1, 2, 2)), np.zeros((2, 1)), np.zeros((2, 1)),
                                      Box([0.0], [1.0]))
    st0 = IntervalState(np.array([-1.0, 0.5]), np.array([1.0, 2.0]))
    a = step_naive(interval_hull(hull_sys, hull_sys.theta_box), st0, [0.0], [0.0], [0.0], hull_sys.B, hull_sys.D, 0.1)
    b = step_enhanced(polytopic_vertices(hull_sys, hull_sys.theta_box), st0, [0.0], [0.0], [0.0], hull_sys.B,
                      hull_sys.D, 0.1)
    for s in (a, b):
        assert np.array_equal(s.lo, st0.lo) and np.array_equal(s.hi, st0.hi)


def test_point_interval_follows_truth(scalar_sys):
    region = Box([1.4], [1.4])
    truth = simulate_plant(scalar_sys, [1.4], x0=[0.8], horizon=2.0, step=1e-3)
    for mode in ("naive", "enhanced"):
        tr = predict(scalar_sys, region, [0.8], [0.8], Envelope.zero(1), 2.0, 1e-3, mode=mode)
        if mode == "enhanced":
            assert np.allclose(tr.lo, truth.x, atol=1e-12) and np.allclose(tr.hi, truth.x, atol=1e-12)
        else:
            assert np.all(tr.lo <= truth.x + 1e-12) and np.all(truth.x <= tr.hi + 1e-12)


def test_enhanced_width_closed_form(scalar_sys):
    # with x_lo < 0 < x_hi the width obeys dw/dt = -0.5 w + 0.1
    tr = predict(scalar_sys, scalar_sys.theta_box, [-0.5], [0.5], OMEGA, 5.0, 1e-3, mode="enhanced")
    assert np.all(tr.lo < 0) and np.all(tr.hi > 0)
    exact = 0.2 + 0.8 * np.exp(-0.5 * tr.t)
    assert np.max(np.abs(tr.width[:, 0] - exact)) < 1e-10


def test_assemble_extended_examples(scalar_sys):
    ext_n = assemble_extended("naive", interval_hull(scalar_sys, scalar_sys.theta_box), scalar_sys.B,
                              scalar_sys.D, OMEGA)
    assert not ext_n.A0.any()
    poly = polytopic_vertices(scalar_sys, scalar_sys.theta_box)
    ext_e = assemble_extended("enhanced", poly, scalar_sys.B, scalar_sys.D, OMEGA)
    assert np.array_equal(ext_e.A0, np.diag([-1.5, -1.5]))
    assert ext_e.delta(0.0) == pytest.approx([-0.05, 0.05])
    assert np.array_equal(ext_e.B, [[1.0], [1.0]])


def test_ordering_preserved(scalar_sys):
    for mode in ("naive", "enhanced"):
        tr = predict(scalar_sys, scalar_sys.theta_box, [-0.1], [0.1], OMEGA, 3.0, 1e-3, mode=mode)
        assert np.all(tr.lo <= tr.hi)


def test_naive_divergence_truncates(scalar_sys):
    tr = predict(scalar_sys, scalar_sys.theta_box, [-0.1], [0.1], OMEGA, 20.0, 1e-2, mode="naive",
                 allow_divergence=True)
    assert tr.diverged_at is not None and tr.t[-1] < 20.0
    with pytest.raises(DivergenceError):
        predict(scalar_sys, scalar_sys.theta_box, [-0.1], [0.1], OMEGA, 20.0, 1e-2, mode="naive")


def test_choose_predictor_rules():
    rot = ParametricLinearSystem([[0.0, -1.0], [1.0, 0.0]], np.zeros((1, 2, 2)), np.zeros((2, 1)),
                                 np.zeros((2, 1)), Box([0.0], [1.0]))
    assert choose_predictor(rot, rot.theta_box).kind == "naive"
    with pytest.raises(ContractError):
        choose_predictor(rot, rot.theta_box, mode="enhanced")
    real = ParametricLinearSystem([[-1.0, -1.0], [0.0, -3.0]], np.zeros((1, 2, 2)), np.zeros((2, 1)),
                                  np.zeros((2, 1)), Box([0.0], [1.0]))
    ch = choose_predictor(real, real.theta_box)
    assert ch.kind == "enhanced" and not np.allclose(ch.Z, np.eye(2))
    with pytest.raises(DomainError):
        choose_predictor(real, real.theta_box, mode="zonotope")


@given(arrays(float, (2, 2), elements=st.floats(-3, 3)), arrays(float, 2, elements=st.floats(-1, 1)),
       arrays(float, 2, elements=st.floats(0, 1)))
def test_map_interval_encloses_image(M, c, r):
    lo, hi = map_interval(M, c - r, c + r)
    rng = np.random.default_rng(0)
    pts = c + r * rng.uniform(-1, 1, size=(50, 2))
    img = pts @ M.T
    assert np.all(img >= lo - 1e-12) and np.all(img <= hi + 1e-12)
