"""Manufactured-solution verification of the coupled solver.

Each manufactured case prescribes smooth exact fields (velocity from a
stream function, so it is exactly solenoidal; fluid pressure; displacement;
pore pressure) that satisfy every *essential* boundary condition of the
production spaces exactly.  Volume forcings are derived symbolically from
the strong equations, and every natural or interface condition the fields
do not satisfy is added back as an explicit boundary defect load, so the
exact fields solve the modified weak problem.  With ``n`` the unit normal
pointing out of the fluid and ``tau`` the interface tangent, the interface
defect integrands are

- momentum row:   ``sigma_f n + w n + beta ((u - eta_t) . tau) tau``
- structure row:  ``-sigma_tot n - w n - beta ((u - eta_t) . tau) tau``
- Darcy row:      ``(eta_t - K grad w - u) . n``

plus the tangential inlet traction, the full outlet traction, the total
stress tensor on the outer poroelastic sides (normal-normal component) and
the Darcy flux on the bottom.  The ``interface-compatible`` case is
constructed so that all four interface conditions hold identically and the
three interface defects vanish.

The module also provides error norms against the exact fields, a mesh
refinement study whose per-level records feed the acceptance checks,
direct interface-residual norms of a discrete state, and a null-space
oracle that re-solves one time step on the explicitly constructed
divergence-free subspace and recovers the pressure multiplier by least
squares, independently of the production Newton loop.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from . import mesh as meshmod
from .assembly import (
    ExtraLoads,
    PhysicalParams,
    ProblemData,
    StateVector,
    _facet_frame,
    _geometry,
    _local_dofs,
    _phys_grads,
    _quad_points,
    _trace_points,
    assemble_loads,
    assemble_system,
)
from .expressions import Cos, PI, Sin, T, X, Y, div, dt, sym_grad
from .fem import (
    basis_eval,
    interpolate_scalar,
    interpolate_vector,
    interval_rule,
    triangle_rule,
)
from .timestepper import (SchemeConfig, StepError, _jacobian, _pack,
                          _residual_rows, run, step)

CASE_IDS = ("smooth-polynomial", "smooth-trig", "interface-compatible-trig")

ERROR_KEYS = ("vel_l2", "vel_h1", "pf_l2", "disp_h1", "pore_l2", "pore_h1")

# asymptotic lower targets per error norm (superconvergence is not a failure)
EXPECTED_RATES = {
    "vel_l2": 3.0,
    "vel_h1": 2.0,
    "pf_l2": 2.0,
    "disp_h1": 2.0,
    "pore_l2": 2.0,
    "pore_h1": 2.0,
}

RESIDUAL_KEYS = ("mass", "normal_stress", "bjs", "stress_continuity")


# ---------------------------------------------------------------------------
# symbolic tensor calculus on 2x2 nests of expressions
# ---------------------------------------------------------------------------

def _tensor_div(S):
    """Row-wise divergence of a 2x2 expression nest."""
    return (S[0][0].diff("x") + S[0][1].diff("y"),
            S[1][0].diff("x") + S[1][1].diff("y"))


def _mat_vec(S, n):
    return (S[0][0] * n[0] + S[0][1] * n[1],
            S[1][0] * n[0] + S[1][1] * n[1])


def fluid_stress(u, pf, mu_f):
    """sigma_f = 2 mu_f D(u) - p_f I as a 2x2 expression nest."""
    d = sym_grad(u)
    return ((2.0 * mu_f * d[0][0] - pf, 2.0 * mu_f * d[0][1]),
            (2.0 * mu_f * d[1][0], 2.0 * mu_f * d[1][1] - pf))


def total_stress(eta, w, params):
    """sigma_tot = 2 mu_s D(eta) + lambda_s (div eta) I - alpha w I."""
    d = sym_grad(eta)
    dv = div(eta)
    ms, ls, ab = params.mu_s, params.lambda_s, params.alpha_bw
    diag = ls * dv - ab * w
    return ((2.0 * ms * d[0][0] + diag, 2.0 * ms * d[0][1]),
            (2.0 * ms * d[1][0], 2.0 * ms * d[1][1] + diag))


# ---------------------------------------------------------------------------
# manufactured cases
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManufacturedCase:
    """Exact fields of one manufactured problem plus the matching data."""

    case_id: str
    params: PhysicalParams
    split: float
    amplitude: float
    velocity: tuple
    pressure_f: object
    displacement: tuple
    displacement_dt: tuple
    pressure_p: object
    data: ProblemData


def _fields_smooth_trig(amplitude):
    g = amplitude * Cos(T)
    psi = g * Sin(PI * X) * Sin(PI * Y) ** 2
    u = (psi.diff("y"), -psi.diff("x"))
    pf = g * Cos(PI * X) * Cos(PI * Y)
    eta = (0.2 * g * Sin(PI * Y) * Cos(PI * X),
           0.2 * g * Sin(PI * X) * Sin(PI * Y))
    w = g * Sin(PI * X) * Cos(PI * Y)
    return u, pf, eta, w


def _fields_smooth_polynomial(amplitude):
    g = amplitude * (1.0 + 0.5 * T ** 2)
    psi = g * X * (1.0 - X) * (1.0 - Y) ** 2
    u = (psi.diff("y"), -psi.diff("x"))
    pf = g * (X ** 2 + Y)
    eta = (0.2 * g * X * Y, 0.2 * g * X * (1.0 - X) * Y)
    w = g * X * (1.0 - X) * (Y - 0.5)
    return u, pf, eta, w


def _fields_interface_compatible(params, amplitude, split):
    """Fields that satisfy all four interface conditions identically.

    The velocity comes from psi = g cos(pi x) h(y) with a cubic profile
    h(y) = a (1-y)^2 + b (1-y)^3; the coefficient ``b`` enforces the slip
    condition, the pore-pressure slope matches the Darcy flux, the fluid
    pressure offset matches the normal stress, and the displacement shears
    balance the tangential and normal total stress.  The construction pins
    the interface at y = 1/2 and requires a diagonal permeability.
    """
    if abs(split - 0.5) > 1e-12:
        raise ValueError(
            "the interface-compatible-trig case requires split = 1/2")
    K = params.K
    if abs(K[0, 1]) > 1e-14 * max(1.0, abs(K).max()):
        raise ValueError(
            "the interface-compatible-trig case requires a diagonal "
            "permeability")
    mu, beta = params.mu_f, params.beta_slip
    pi2 = math.pi ** 2
    a = 1.0
    b = -(mu * (2.0 + pi2 / 4.0) + beta) / (
        3.0 * mu + mu * pi2 / 8.0 + 0.75 * beta)
    h_half = a / 4.0 + b / 8.0
    hp_half = -a - 0.75 * b
    c2 = -math.pi * h_half / K[1, 1]
    q_half = 1.0 + 2.0 * mu * math.pi * hp_half
    s1 = beta * hp_half / params.mu_s
    s2 = (params.alpha_bw - 1.0) / (2.0 * params.mu_s + params.lambda_s)

    g = amplitude * Cos(T)
    h = a * (1.0 - Y) ** 2 + b * (1.0 - Y) ** 3
    psi = g * Cos(PI * X) * h
    u = (psi.diff("y"), -psi.diff("x"))
    pf = g * Sin(PI * X) * (q_half + (Y - 0.5))
    w = g * Sin(PI * X) * (1.0 + c2 * (Y - 0.5))
    eta = (2.0 * s1 * g * Cos(PI * X) * Y * (Y - 0.5),
           2.0 * s2 * g * Sin(PI * X) * Y * (Y - 0.5))
    return u, pf, eta, w


def _problem_data(u, pf, eta, w, params):
    """Volume forcings and boundary defect loads for the given exact fields."""
    rf, mu = params.rho_f, params.mu_f
    rs, ab = params.rho_s, params.alpha_bw
    beta = params.beta_slip
    K = params.K
    etadot = dt(eta)

    # volume forcings from the strong equations
    d_u = sym_grad(u)
    visc = ((2.0 * mu * d_u[0][0], 2.0 * mu * d_u[0][1]),
            (2.0 * mu * d_u[1][0], 2.0 * mu * d_u[1][1]))
    vdiv = _tensor_div(visc)
    conv = (u[0] * u[0].diff("x") + u[1] * u[0].diff("y"),
            u[0] * u[1].diff("x") + u[1] * u[1].diff("y"))
    f_f = (rf * dt(u[0]) + rf * conv[0] - vdiv[0] + pf.diff("x"),
           rf * dt(u[1]) + rf * conv[1] - vdiv[1] + pf.diff("y"))

    d_e = sym_grad(eta)
    dve = div(eta)
    elast = ((2.0 * params.mu_s * d_e[0][0] + params.lambda_s * dve,
              2.0 * params.mu_s * d_e[0][1]),
             (2.0 * params.mu_s * d_e[1][0],
              2.0 * params.mu_s * d_e[1][1] + params.lambda_s * dve))
    ediv = _tensor_div(elast)
    f_s = (rs * dt(dt(eta[0])) - ediv[0] + ab * w.diff("x"),
           rs * dt(dt(eta[1])) - ediv[1] + ab * w.diff("y"))

    kdiv = (K[0, 0] * w.diff("x").diff("x") + K[0, 1] * w.diff("x").diff("y")
            + K[1, 0] * w.diff("y").diff("x") + K[1, 1] * w.diff("y").diff("y"))
    f_p = params.s0 * dt(w) + ab * div(etadot) - kdiv

    P_in = pf - 2.0 * mu * u[0].diff("x")

    # boundary and interface defect loads
    sig_f = fluid_stress(u, pf, mu)
    sig_t = total_stress(eta, w, params)
    kgw = (K[0, 0] * w.diff("x") + K[0, 1] * w.diff("y"),
           K[1, 0] * w.diff("x") + K[1, 1] * w.diff("y"))

    n = (0.0, -1.0)           # interface normal, out of the fluid
    tau = (1.0, 0.0)
    slip = ((u[0] - etadot[0]) * tau[0] + (u[1] - etadot[1]) * tau[1])
    sfn = _mat_vec(sig_f, n)
    stn = _mat_vec(sig_t, n)
    g_mom = (sfn[0] + w * n[0] + beta * slip * tau[0],
             sfn[1] + w * n[1] + beta * slip * tau[1])
    g_str = (-stn[0] - w * n[0] - beta * slip * tau[0],
             -stn[1] - w * n[1] - beta * slip * tau[1])
    g_darcy = ((etadot[0] - kgw[0] - u[0]) * n[0]
               + (etadot[1] - kgw[1] - u[1]) * n[1])

    n_in = (-1.0, 0.0)
    full_in = _mat_vec(sig_f, n_in)
    normal_in = full_in[0] * n_in[0] + full_in[1] * n_in[1]
    t_in = (full_in[0] - normal_in * n_in[0], full_in[1] - normal_in * n_in[1])
    t_out = _mat_vec(sig_f, (1.0, 0.0))

    extra = ExtraLoads(
        inlet_traction=t_in,
        outlet_traction=t_out,
        iface_mom=g_mom,
        iface_str=g_str,
        iface_darcy=g_darcy,
        poroext_stress=sig_t,
        poros_flux=kgw,
    )
    return ProblemData(f_f=f_f, f_s=f_s, f_p=f_p, P_in=P_in, extra=extra)


def manufactured_case(case_id, params=None, amplitude=1.0, split=0.5):
    """Build one of the manufactured cases in :data:`CASE_IDS`."""
    if case_id not in CASE_IDS:
        raise ValueError("unknown case %r; expected one of %s"
                         % (case_id, ", ".join(CASE_IDS)))
    params = PhysicalParams() if params is None else params
    if case_id == "smooth-polynomial":
        u, pf, eta, w = _fields_smooth_polynomial(amplitude)
    elif case_id == "smooth-trig":
        u, pf, eta, w = _fields_smooth_trig(amplitude)
    else:
        u, pf, eta, w = _fields_interface_compatible(params, amplitude, split)
    return ManufacturedCase(
        case_id=case_id,
        params=params,
        split=split,
        amplitude=amplitude,
        velocity=u,
        pressure_f=pf,
        displacement=eta,
        displacement_dt=dt(eta),
        pressure_p=w,
        data=_problem_data(u, pf, eta, w, params),
    )


def _dofmap_of(obj):
    return getattr(obj, "dm", obj)


def initial_state(case, system, t=0.0):
    """Nodal interpolant of the exact fields as a free-dof state.

    ``system`` may be an assembled block system or a bare dof map.
    """
    dm = _dofmap_of(system)
    return StateVector(
        t=t,
        alpha=interpolate_vector(dm.velocity, case.velocity, t)[
            dm.velocity.free],
        beta=interpolate_vector(dm.displacement, case.displacement, t)[
            dm.displacement.free],
        gamma=interpolate_scalar(dm.pressure_p, case.pressure_p, t)[
            dm.pressure_p.free],
        theta=interpolate_vector(dm.displacement, case.displacement_dt, t)[
            dm.displacement.free],
        pi=interpolate_scalar(dm.pressure_f, case.pressure_f, t)[
            dm.pressure_f.free],
    )


# ---------------------------------------------------------------------------
# error norms
# ---------------------------------------------------------------------------

def _full(space, free_values):
    out = np.zeros(space.ndof)
    out[space.free] = free_values
    return out


def _error_sq(space, coeffs, expr, t, rule):
    """(L2^2, H1-seminorm^2) of (discrete - expr) on a scalar space."""
    mesh = space.mesh
    _, jinv, det = _geometry(mesh, space.tri_ids)
    vals, _ = basis_eval(space.kind, rule.points)
    gphys = _phys_grads(space, jinv, rule)
    x = _quad_points(mesh, space.tri_ids, rule)
    co = coeffs[space.cell_dofs]
    uh = np.einsum("qi,ci->cq", vals, co, optimize=True)
    guh = np.einsum("cqid,ci->cqd", gphys, co, optimize=True)
    xs, ys = x[..., 0], x[..., 1]
    ue = np.broadcast_to(np.asarray(expr(xs, ys, t), dtype=float), uh.shape)
    ge = np.stack([
        np.broadcast_to(np.asarray(expr.diff("x")(xs, ys, t), dtype=float),
                        uh.shape),
        np.broadcast_to(np.asarray(expr.diff("y")(xs, ys, t), dtype=float),
                        uh.shape),
    ], axis=-1)
    wdet = rule.weights[None, :] * det[:, None]
    l2 = float(np.sum(wdet * (uh - ue) ** 2))
    h1 = float(np.sum(wdet * np.sum((guh - ge) ** 2, axis=-1)))
    return l2, h1


def _scalar_error(space, coeffs, expr, t, rule):
    l2, h1 = _error_sq(space, coeffs, expr, t, rule)
    return math.sqrt(l2), math.sqrt(h1)


def _vector_error(space, coeffs, exprs, t, rule):
    sc = space.scalar
    l2 = h1 = 0.0
    for comp in (0, 1):
        part = coeffs[comp * sc.ndof:(comp + 1) * sc.ndof]
        a, b = _error_sq(sc, part, exprs[comp], t, rule)
        l2 += a
        h1 += b
    return math.sqrt(l2), math.sqrt(h1)


def compute_errors(case, system, state, order=10):
    """L2 norms and H1 seminorms of the error against the exact fields.

    Keys: ``vel_l2``, ``vel_h1``, ``pf_l2``, ``disp_h1``, ``pore_l2``,
    ``pore_h1``; the ``_h1`` entries are seminorms; all evaluated at the
    state's own time.  ``system`` may be a block system or a dof map.
    """
    dm = _dofmap_of(system)
    rule = triangle_rule(order)
    t = state.t
    vel_l2, vel_h1 = _vector_error(
        dm.velocity, _full(dm.velocity, state.alpha), case.velocity, t, rule)
    _, disp_h1 = _vector_error(
        dm.displacement, _full(dm.displacement, state.beta),
        case.displacement, t, rule)
    pf_l2, _ = _scalar_error(
        dm.pressure_f, _full(dm.pressure_f, state.pi), case.pressure_f, t,
        rule)
    pore_l2, pore_h1 = _scalar_error(
        dm.pressure_p, _full(dm.pressure_p, state.gamma), case.pressure_p, t,
        rule)
    return {
        "vel_l2": vel_l2,
        "vel_h1": vel_h1,
        "pf_l2": pf_l2,
        "disp_h1": disp_h1,
        "pore_l2": pore_l2,
        "pore_h1": pore_h1,
    }


# ---------------------------------------------------------------------------
# interface residuals of a discrete state
# ---------------------------------------------------------------------------

def _eval_scalar_on(space, coeffs, triangle, refpts):
    vals, grads = basis_eval(space.kind, refpts)
    _, jinv, _ = _geometry(space.mesh, np.array([triangle]))
    gphys = np.einsum("qik,kj->qij", grads, jinv[0], optimize=True)
    co = coeffs[_local_dofs(space, triangle)]
    return vals @ co, np.einsum("qij,i->qj", gphys, co, optimize=True)


def _eval_vector_on(space, coeffs, triangle, refpts):
    sc = space.scalar
    vals, grads = basis_eval(sc.kind, refpts)
    _, jinv, _ = _geometry(sc.mesh, np.array([triangle]))
    gphys = np.einsum("qik,kj->qij", grads, jinv[0], optimize=True)
    co = coeffs[_local_dofs(space, triangle)]
    nloc = vals.shape[1]
    parts = (co[:nloc], co[nloc:])
    u = np.stack([vals @ p for p in parts], axis=1)
    gu = np.stack([np.einsum("qij,i->qj", gphys, p, optimize=True)
                   for p in parts], axis=1)
    return u, gu  # (nq, 2), (nq, 2, 2) with gu[q, comp, deriv]


def interface_residuals(blocks, state, order=8):
    """Facet-L2 norms of the four interface conditions for a discrete state.

    ``mass``: (u - eta_t + K grad w) . n, ``normal_stress``: n.sigma_f n + w,
    ``bjs``: tau.sigma_f n + beta (u - eta_t).tau, ``stress_continuity``:
    sigma_f n - sigma_tot n; the structure velocity theta stands in for
    eta_t.
    """
    dm = blocks.dm
    mesh = dm.mesh
    p = blocks.params
    s, wq = interval_rule(order)
    eye = np.eye(2)

    u_full = _full(dm.velocity, state.alpha)
    eta_full = _full(dm.displacement, state.beta)
    th_full = _full(dm.displacement, state.theta)
    pf_full = _full(dm.pressure_f, state.pi)
    w_full = _full(dm.pressure_p, state.gamma)

    acc = dict.fromkeys(RESIDUAL_KEYS, 0.0)
    for k, f in enumerate(mesh.interface_facets):
        tf = int(mesh.interface_fluid_tri[k])
        tp = int(mesh.interface_poro_tri[k])
        n = mesh.interface_normals[k]
        tau = np.array([-n[1], n[0]])
        _, _, length = _facet_frame(mesh, f)

        ref_f, _ = _trace_points(mesh, f, tf, s)
        u, gu = _eval_vector_on(dm.velocity, u_full, tf, ref_f)
        pf, _ = _eval_scalar_on(dm.pressure_f, pf_full, tf, ref_f)

        ref_p, _ = _trace_points(mesh, f, tp, s)
        etad, _ = _eval_vector_on(dm.displacement, th_full, tp, ref_p)
        _, geta = _eval_vector_on(dm.displacement, eta_full, tp, ref_p)
        w, gw = _eval_scalar_on(dm.pressure_p, w_full, tp, ref_p)

        du = 0.5 * (gu + gu.transpose(0, 2, 1))
        sig_f = 2.0 * p.mu_f * du - pf[:, None, None] * eye
        de = 0.5 * (geta + geta.transpose(0, 2, 1))
        tre = geta[:, 0, 0] + geta[:, 1, 1]
        sig_t = (2.0 * p.mu_s * de
                 + (p.lambda_s * tre - p.alpha_bw * w)[:, None, None] * eye)
        sfn = sig_f @ n
        stn = sig_t @ n
        kgw = gw @ p.K.T

        r_mass = (u - etad + kgw) @ n
        r_nstr = sfn @ n + w
        r_bjs = sfn @ tau + p.beta_slip * ((u - etad) @ tau)
        r_cont = sfn - stn

        wl = wq * length
        acc["mass"] += float(wl @ r_mass ** 2)
        acc["normal_stress"] += float(wl @ r_nstr ** 2)
        acc["bjs"] += float(wl @ r_bjs ** 2)
        acc["stress_continuity"] += float(wl @ np.sum(r_cont ** 2, axis=1))
    return {key: math.sqrt(val) for key, val in acc.items()}


# ---------------------------------------------------------------------------
# refinement study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevelRun:
    """One refinement level: mesh size, step size, errors and residuals."""

    n: int
    h: float
    dt: float
    n_steps: int
    newton_iterations: int
    errors: dict
    residuals: dict
    dofs: dict


@dataclass(frozen=True)
class ConvergenceTable:
    """Refinement-study results with observed convergence rates."""

    case_id: str
    scheme: str
    t_final: float
    runs: list

    def rates(self):
        """Observed rate per error norm between consecutive levels."""
        out = {}
        for key in ERROR_KEYS:
            seq = []
            for prev, cur in zip(self.runs, self.runs[1:]):
                ratio = math.log(prev.errors[key] / cur.errors[key])
                seq.append(ratio / math.log(cur.n / prev.n))
            out[key] = seq
        return out

    def rate_flags(self, expected=None, tol=0.3):
        """True per norm when the last observed rate reaches the target.

        The check is one-sided: a rate above the target (superconvergence)
        is not a failure.  An under-integrated or otherwise inconsistent
        run shows up here as a False flag.
        """
        expected = EXPECTED_RATES if expected is None else expected
        rates = self.rates()
        return {key: bool(rates[key]) and rates[key][-1] >= expected[key] - tol
                for key in expected}


class StudyError(RuntimeError):
    """A refinement level failed; ``partial`` holds the completed levels."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


def convergence_study(case_id, levels=(8, 16, 32), scheme="midpoint",
                      t_final=0.1, steps_coarsest=8, params=None,
                      amplitude=1.0, split=0.5, newton_tol=1e-10,
                      newton_max=25, convection=True, error_order=10,
                      volume_order=None, load_order=None):
    """Solve a manufactured case on a hierarchy of meshes.

    The number of time steps grows like h^(-3/2) for the midpoint rule and
    h^(-2) for implicit Euler (rounded to an integer), so the O(dt^2) and
    O(dt) time errors stay below the expected O(h^3)/O(h^2) space errors.
    ``volume_order`` and ``load_order`` override the assembly quadrature
    (used by the under-integration negative control).  A solver failure at
    any level raises :class:`StudyError` carrying the completed levels.
    """
    case = manufactured_case(case_id, params=params, amplitude=amplitude,
                             split=split)
    exponent = 1.5 if scheme == "midpoint" else 2.0
    assemble_kw = {} if volume_order is None else {"volume_order": volume_order}
    scheme_kw = {} if load_order is None else {"load_order": load_order}
    runs = []
    n0 = levels[0]
    for n in levels:
        n_steps = int(round(steps_coarsest * (n / n0) ** exponent))
        dt_n = t_final / n_steps
        mesh = meshmod.build_rect_two_domain(n, n, split)
        blocks = assemble_system(mesh, case.params, convection=convection,
                                 **assemble_kw)
        cfg = SchemeConfig(scheme=scheme, dt=dt_n, t_final=t_final,
                           newton_tol=newton_tol, newton_max=newton_max,
                           **scheme_kw)
        try:
            traj = run(blocks, case.data, cfg,
                       initial_state=initial_state(case, blocks))
        except StepError as exc:
            partial = ConvergenceTable(case_id=case_id, scheme=scheme,
                                       t_final=t_final, runs=runs)
            raise StudyError(
                "level n = %d failed: %s" % (n, exc), partial) from exc
        state = traj.states[-1]
        runs.append(LevelRun(
            n=n,
            h=1.0 / n,
            dt=dt_n,
            n_steps=n_steps,
            newton_iterations=sum(d.iterations for d in traj.diagnostics),
            errors=compute_errors(case, blocks, state, order=error_order),
            residuals=interface_residuals(blocks, state),
            dofs={name: free for name, (_, free) in blocks.dm.counts().items()},
        ))
    return ConvergenceTable(case_id=case_id, scheme=scheme, t_final=t_final,
                            runs=runs)


# ---------------------------------------------------------------------------
# null-space oracle
# ---------------------------------------------------------------------------

def _oracle_data():
    return ProblemData(
        f_f=(1.0, X * Y),
        f_s=(Y, X),
        f_p=Cos(PI * X),
        P_in=Sin(PI * Y),
    )


def kernel_oracle(nx=2, ny=2, split=0.5, params=None, dt=0.05, data=None,
                  newton_tol=1e-13, newton_max=50):
    """One implicit-Euler step re-solved on the divergence-free subspace.

    Builds an orthonormal basis Z of the null space of the discrete
    divergence, runs a dense Newton iteration for the constrained unknowns
    with the velocity parametrised as alpha = Z c (no multiplier), recovers
    the multiplier from the momentum defect by least squares, and compares
    everything against the production saddle-point step.  Returns a dict of
    diagnostics; the relative differences should sit at solver tolerance.
    """
    params = PhysicalParams() if params is None else params
    mesh = meshmod.build_rect_two_domain(nx, ny, split)
    blocks = assemble_system(mesh, params, convection=True)
    if blocks.n_alpha > 400:
        raise ValueError("kernel oracle needs a tiny mesh "
                         "(velocity space has %d free dofs)" % blocks.n_alpha)
    if data is None:
        data = _oracle_data()

    cfg = SchemeConfig(scheme="euler", dt=dt, t_final=dt,
                       newton_tol=newton_tol, newton_max=newton_max)
    state0 = blocks.zero_state()
    state1, diag = step(blocks, data, state0, cfg)

    G = blocks.Gdiv.toarray()
    Z = la.null_space(G)
    null_dim = Z.shape[1]
    rank = int(np.linalg.matrix_rank(G))
    if rank < blocks.n_pi:
        raise RuntimeError(
            "divergence operator is rank deficient: rank %d of %d pressure "
            "dofs" % (rank, blocks.n_pi))

    na, nb, ng = blocks.n_alpha, blocks.n_beta, blocks.n_gamma
    npi = blocks.n_pi
    loads = assemble_loads(dt, data, blocks.dm)

    def make_state(y):
        c, rest = y[:null_dim], y[null_dim:]
        b, g, th = (rest[:nb], rest[nb:nb + ng], rest[nb + ng:])
        return StateVector(dt, Z @ c, b, g, th, np.zeros(npi))

    def reduced_residual(y):
        rows, stage = _residual_rows(blocks, "euler", state0,
                                     _pack(make_state(y)), dt, loads)
        r_mom, r_kin, r_dar, r_str, _ = rows
        return np.concatenate([Z.T @ r_mom, r_kin, r_dar, r_str]), stage

    proj = la.block_diag(Z, np.eye(nb), np.eye(ng), np.eye(nb))
    y = np.zeros(null_dim + 2 * nb + ng)
    r, stage = reduced_residual(y)
    scale = max(1.0, float(np.abs(r).max()))
    iterations = 0
    while np.abs(r).max() > newton_tol * scale:
        if iterations >= newton_max:
            raise RuntimeError("reduced Newton iteration did not converge")
        full_jac = _jacobian(blocks, "euler", dt, stage.alpha).toarray()
        head = na + 2 * nb + ng
        jac = proj.T @ full_jac[:head, :head] @ proj
        y = y - la.solve(jac, r)
        iterations += 1
        r, stage = reduced_residual(y)
    reduced = make_state(y)

    # multiplier from the momentum defect: G^T pi = r_mom(z, pi = 0)
    rows, _ = _residual_rows(blocks, "euler", state0, _pack(reduced), dt,
                             loads)
    pi_hat, *_ = np.linalg.lstsq(G.T, rows[0], rcond=None)

    rows_prod, _ = _residual_rows(
        blocks, "euler", state0,
        _pack(StateVector(dt, state1.alpha, state1.beta, state1.gamma,
                          state1.theta, np.zeros(npi))),
        dt, loads)
    defect = rows_prod[0]

    def rel(ours, reference):
        denom = max(float(la.norm(reference)), 1e-14)
        return float(la.norm(ours - reference)) / denom

    state_diff = max(
        rel(reduced.alpha, state1.alpha),
        rel(reduced.beta, state1.beta),
        rel(reduced.gamma, state1.gamma),
        rel(reduced.theta, state1.theta),
    )
    return {
        "null_dim": null_dim,
        "n_alpha": na,
        "n_pi": npi,
        "full_rank": rank == npi,
        "state_diff": state_diff,
        "pi_diff": rel(pi_hat, state1.pi),
        "multiplier_residual": (float(la.norm(G.T @ state1.pi - defect))
                                / max(float(la.norm(defect)), 1e-14)),
        "constraint_norm": float(la.norm(G @ state1.alpha)),
        "newton_iterations": iterations,
        "production_iterations": diag.iterations,
    }
