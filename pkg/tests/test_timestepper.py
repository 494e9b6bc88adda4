import numpy as np
import pytest

from fpsi.assembly import PhysicalParams, ProblemData, assemble_loads, assemble_system
from fpsi.expressions import parse_expression
from fpsi.fem import interpolate_vector
from fpsi.timestepper import (
    SchemeConfig,
    StepError,
    make_initial_state,
    run,
    step,
)


def _blocks(nx=6, ny=6, convection=True, **params):
    from fpsi.mesh import build_rect_two_domain
    m = build_rect_two_domain(nx, ny, 0.5)
    return assemble_system(m, PhysicalParams(**params), convection=convection)


def _driven_data():
    return ProblemData(
        P_in=parse_expression("cos(2*t)"),
        f_f=(parse_expression("0.3*sin(pi*x)*cos(t)"), parse_expression("0.1*y")),
        f_s=(parse_expression("0.2*x*y"), parse_expression("-0.1*cos(t)")),
        f_p=parse_expression("0.4*sin(pi*x)*sin(t)"),
    )


def test_scheme_config_validation():
    with pytest.raises(ValueError):
        SchemeConfig(scheme="leapfrog")
    with pytest.raises(ValueError):
        SchemeConfig(dt=0.0)
    with pytest.raises(ValueError):
        SchemeConfig(newton_max=0)
    with pytest.raises(ValueError):
        SchemeConfig(dt=0.3, t_final=1.0).n_steps()
    assert SchemeConfig(dt=0.25, t_final=1.0).n_steps() == 4


def test_linear_problem_converges_in_one_newton_iteration():
    blocks = _blocks(convection=False)
    cfg = SchemeConfig(scheme="euler", dt=0.05, t_final=0.2)
    traj = run(blocks, _driven_data(), cfg)
    assert len(traj) == 5
    for diag in traj.diagnostics:
        assert diag.iterations == 1
        assert diag.residual_norms[-1] <= cfg.newton_tol


def test_newton_handles_convection_and_reports_iterations():
    blocks = _blocks(convection=True)
    cfg = SchemeConfig(scheme="euler", dt=0.1, t_final=0.2)
    traj = run(blocks, _driven_data(), cfg)
    for diag in traj.diagnostics:
        assert diag.converged
        assert diag.iterations >= 2
        assert diag.residual_norms[-1] <= cfg.newton_tol


def test_zero_data_from_rest_stays_at_rest():
    blocks = _blocks(convection=True)
    cfg = SchemeConfig(scheme="midpoint", dt=0.1, t_final=0.3)
    traj = run(blocks, ProblemData(), cfg)
    final = traj.states[-1]
    for arr in (final.alpha, final.beta, final.gamma, final.theta, final.pi):
        assert np.abs(arr).max() < 1e-12
    for diag in traj.diagnostics:
        assert diag.iterations == 0


def _energetic_initial_state(blocks):
    dm = blocks.dm
    state = make_initial_state(blocks)
    u = interpolate_vector(
        dm.velocity,
        (lambda x, y, t: np.sin(np.pi * x) * (1.0 - y) * (y - 0.5),
         lambda x, y, t: 0.0 * x))
    state.alpha = u[dm.velocity.free]
    d = interpolate_vector(
        dm.displacement,
        (lambda x, y, t: 0.2 * np.sin(np.pi * y) * np.cos(np.pi * x),
         lambda x, y, t: 0.1 * np.sin(np.pi * x) * y))
    state.beta = 0.5 * d[dm.displacement.free]
    state.theta = -0.25 * d[dm.displacement.free]
    rng = np.random.default_rng(4)
    state.gamma = 0.1 * rng.standard_normal(blocks.n_gamma)
    return state


def test_zero_data_energy_decays_monotonically():
    blocks = _blocks(convection=False)
    cfg = SchemeConfig(scheme="euler", dt=0.02, t_final=0.4)
    state = _energetic_initial_state(blocks)
    traj = run(blocks, ProblemData(), cfg, initial_state=state)
    energies = np.array([blocks.energy(s) for s in traj.states])
    assert energies[0] > 0.0
    drops = np.diff(energies)
    assert np.all(drops <= 1e-10 * energies[0])


def test_constraint_enforced_at_every_accepted_state():
    blocks = _blocks(convection=True)
    cfg = SchemeConfig(scheme="midpoint", dt=0.05, t_final=0.2)
    traj = run(blocks, _driven_data(), cfg)
    scale = abs(blocks.Gdiv).max()
    for s in traj.states[1:]:
        assert np.abs(blocks.Gdiv @ s.alpha).max() <= 10 * cfg.newton_tol * scale


def test_kinematic_relation_is_exact():
    for scheme in ("euler", "midpoint"):
        blocks = _blocks(convection=False)
        cfg = SchemeConfig(scheme=scheme, dt=0.05, t_final=0.1)
        traj = run(blocks, _driven_data(), cfg)
        for s0, s1 in zip(traj.states, traj.states[1:]):
            rate = (s1.beta - s0.beta) / cfg.dt
            target = s1.theta if scheme == "euler" else 0.5 * (s0.theta + s1.theta)
            np.testing.assert_allclose(rate, target, atol=1e-8)


def _jump_energy(blocks, s0, s1):
    da = s1.alpha - s0.alpha
    db = s1.beta - s0.beta
    dg = s1.gamma - s0.gamma
    dth = s1.theta - s0.theta
    return 0.5 * (da @ (blocks.Af @ da) + dth @ (blocks.As @ dth)
                  + dg @ (blocks.Ap @ dg) + db @ (blocks.Bs @ db))


def test_backward_euler_energy_identity():
    blocks = _blocks(convection=True)
    data = _driven_data()
    cfg = SchemeConfig(scheme="euler", dt=0.05, t_final=0.25, newton_tol=1e-12)
    traj = run(blocks, data, cfg)
    for s0, s1 in zip(traj.states, traj.states[1:]):
        loads = assemble_loads(s1.t, data, blocks.dm)
        nl, _ = blocks.convection(s1.alpha)
        lhs = ((blocks.energy(s1) - blocks.energy(s0)
                + _jump_energy(blocks, s0, s1)) / cfg.dt
               + blocks.dissipation(s1) + s1.alpha @ nl)
        rhs = blocks.work(loads, s1)
        scale = max(1.0, abs(lhs), abs(rhs))
        assert abs(lhs - rhs) < 1e-8 * scale


def test_midpoint_energy_identity_has_no_jump_term():
    from fpsi.assembly import StateVector
    blocks = _blocks(convection=True)
    data = _driven_data()
    cfg = SchemeConfig(scheme="midpoint", dt=0.05, t_final=0.25,
                       newton_tol=1e-12)
    traj = run(blocks, data, cfg)
    for s0, s1 in zip(traj.states, traj.states[1:]):
        t_star = s0.t + 0.5 * cfg.dt
        loads = assemble_loads(t_star, data, blocks.dm)
        stage = StateVector(
            t_star,
            0.5 * (s0.alpha + s1.alpha), 0.5 * (s0.beta + s1.beta),
            0.5 * (s0.gamma + s1.gamma), 0.5 * (s0.theta + s1.theta),
            s1.pi)
        nl, _ = blocks.convection(stage.alpha)
        lhs = ((blocks.energy(s1) - blocks.energy(s0)) / cfg.dt
               + blocks.dissipation(stage) + stage.alpha @ nl)
        rhs = blocks.work(loads, stage)
        scale = max(1.0, abs(lhs), abs(rhs))
        assert abs(lhs - rhs) < 1e-8 * scale


def test_step_error_reports_failure():
    blocks = _blocks(convection=True)
    cfg = SchemeConfig(scheme="euler", dt=0.1, t_final=0.1,
                       newton_tol=1e-30, newton_max=2)
    with pytest.raises(StepError) as err:
        run(blocks, _driven_data(), cfg)
    assert err.value.iterations == 2
    assert err.value.residual_norm > 0.0


def test_on_step_callback_sees_every_state():
    blocks = _blocks(convection=False)
    cfg = SchemeConfig(scheme="euler", dt=0.1, t_final=0.3)
    seen = []
    run(blocks, _driven_data(), cfg, on_step=lambda s, d: seen.append(s.t))
    np.testing.assert_allclose(seen, [0.1, 0.2, 0.3], atol=1e-12)
