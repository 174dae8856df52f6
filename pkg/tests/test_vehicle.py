import numpy as np
import pytest

from intervalmpc.errors import DomainError
from intervalmpc.model import assemble_A
from intervalmpc.prediction import find_metzler_transform, metzler_check
from intervalmpc.vehicle import (BicycleParams, LaneKeepingConfig, LaneReference, build_bicycle_model,
                                 lane_config_from_dict, lane_keeping_scenario, preliminary_gain)


@pytest.fixture(scope="module")
def default_run():
    return lane_keeping_scenario()


def test_matrix_entries():
    p = BicycleParams()
    sys = build_bicycle_model(p)
    assert sys.A[0, 1] == p.v_x and sys.A[2, 3] == -p.v_x
    assert np.array_equal(sys.B[:, 0], [0.0, 0.0, 2.0 / p.m, p.a / p.I_z])
    assert sys.phi[1, 2, 3] == pytest.approx(2 * p.b / (p.m * p.v_x))
    assert sys.phi[0, 2, 2] == pytest.approx(-2.0 / (p.m * p.v_x))
    assert np.array_equal(assemble_A(sys, [0.0, 0.0], check=False), sys.A)


def test_sedan_scale_entries():
    p = BicycleParams(m=1500.0, I_z=2500.0, a=1.2, b=1.4, v_x=10.0, theta=(5e4, 5e4), theta_lo=(3e4, 3e4),
                      theta_hi=(8e4, 8e4))
    sys = build_bicycle_model(p)
    assert sys.phi[1, 2, 3] == pytest.approx(2 * 1.4 / (1500.0 * 10.0))
    assert sys.phi[1, 3, 3] == pytest.approx(-2 * 1.4 ** 2 / (2500.0 * 10.0))


def test_parameter_validation():
    with pytest.raises(DomainError):
        BicycleParams(v_x=0.0)
    with pytest.raises(DomainError):
        BicycleParams(m=-1.0)
    with pytest.raises(DomainError):
        BicycleParams(theta=(1.2, 1.0))
    with pytest.raises(DomainError):
        LaneReference(amplitude=2.0, rate=1.0, omega_bound=0.25)


def test_reference_rate_inside_envelope():
    ref = LaneReference()
    ts = np.linspace(0, 20, 2001)
    assert np.max(np.abs(ref.dy(ts))) <= ref.omega_bound
    assert ref.y(100.0) == pytest.approx(ref.amplitude)
    # derivative check against a central difference
    assert ref.dy(7.5) == pytest.approx((ref.y(7.5 + 1e-6) - ref.y(7.5 - 1e-6)) / 2e-6, rel=1e-6)


def test_preliminary_feedback_is_metzler_transformable():
    sys = build_bicycle_model(BicycleParams())
    poles = (-0.5, -1.5, -5.0, -20.0)
    K = preliminary_gain(sys, poles)
    Acl = assemble_A(sys, sys.theta_box.center) + sys.B @ K
    assert np.allclose(np.sort(np.linalg.eigvals(Acl).real), np.sort(poles))
    Z = find_metzler_transform(Acl)
    assert Z is not None and metzler_check(np.linalg.solve(Z, Acl @ Z), tol=1e-9)
    with pytest.raises(DomainError):
        preliminary_gain(sys, (-1.0, -1.0, -2.0, -3.0))


def test_config_from_dict():
    cfg = lane_config_from_dict({"v_x": 3.0, "theta": [1.0, 1.0], "amplitude": 0.5, "p_y0": 1.0,
                                 "x_half": [3, 2, 6, 6]}, seed=4)
    assert cfg.params.v_x == 3.0 and cfg.reference.amplitude == 0.5 and cfg.seed == 4
    assert cfg.constraints.U_box.hi[0] == 10.0


def test_default_run_monitors(default_run):
    log, summary, setup = default_run
    assert summary["violations"] == 0 and summary["inclusion_violations"] == 0
    assert summary["admissibility"] in ("certified", "probabilistic")
    first = next(e["t"] for e in log.events if e["branch"] == "plan" and e["feasible"])
    assert summary["time_to_Xf"] is not None and summary["time_to_Xf"] - first <= 3.0
    assert summary["switch_count"] == 1


def test_default_run_confidence_box(default_run):
    log, summary, setup = default_run
    lo, hi = np.asarray(log.box_lo), np.asarray(log.box_hi)
    theta = np.asarray(setup.experiment.theta)
    assert np.all(lo <= theta) and np.all(hi >= theta)
    assert np.all(np.diff(hi - lo, axis=0) <= 1e-15)
    assert np.all((hi - lo)[-1] < (hi - lo)[0])


def test_zero_reference_stays_near_origin():
    cfg = LaneKeepingConfig(reference=LaneReference(amplitude=0.0), p_y0=0.0, duration=3.0)
    log, summary, _ = lane_keeping_scenario(cfg)
    assert all(e["branch"] == "feedback" for e in log.events)
    assert max(summary["max_abs_x"]) < 0.05
