"""Finite-element operator and load assembly for the coupled flow problem.

The unknowns are the fluid velocity ``u`` (vector P2 on the fluid
subdomain), the fluid pressure ``p_f`` (P1, fluid), the solid displacement
``eta`` and its velocity (vector P2, poroelastic subdomain), and the pore
pressure ``w`` (P2, poroelastic subdomain).  In coefficient vectors these are
``alpha`` (velocity), ``pi`` (fluid pressure), ``beta`` (displacement),
``theta`` (structure velocity), ``gamma`` (pore pressure).

The semi-discrete block system reads::

    Af alpha' + Bf alpha + N(alpha) + D gamma - E theta - Gdiv^T pi = a
    beta' - theta                                                   = 0
    Ap gamma' + Bp gamma + C^T theta - D^T alpha                    = c
    As theta' + Bs beta - C gamma - E^T alpha + F theta             = b
    Gdiv alpha                                                      = 0

with ``Af = rho_f M_u``, ``Bf = 2 mu_f (D(u), D(v)) + beta (slip)``,
``As = rho_s M_d``, ``Bs = 2 mu_s (D(.), D(.)) + lambda_s (div, div)``,
``Ap = s0 M_p``, ``Bp = (K grad w, grad r)``, ``C = alpha_bw (r, div xi)
+ <r n, xi>_I``, ``D = <r n, v>_I``, ``E = beta <(v.t)(xi.t)>_I`` and
``F = beta <(xi.t)(zeta.t)>_I``, where ``n`` is the interface normal
pointing out of the fluid subdomain and ``t`` the interface tangent.

All operators are assembled over full space dofs and then restricted
symmetrically to the unconstrained dofs of their test/trial spaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import mesh as meshmod
from .expressions import Expr, Const, ZERO
from .fem import (
    VectorSpace,
    basis_eval,
    build_dofmaps,
    interval_rule,
    triangle_rule,
)

DEFAULT_VOLUME_ORDER = 6
DEFAULT_FACET_ORDER = 6
DEFAULT_LOAD_ORDER = 8


# ---------------------------------------------------------------------------
# physical parameters and data
# ---------------------------------------------------------------------------

class ParameterError(ValueError):
    """Raised for inadmissible physical parameters."""


@dataclass(frozen=True)
class PhysicalParams:
    """Material and coupling coefficients.

    ``K`` is the (symmetric positive definite) permeability tensor; a scalar
    is promoted to ``K * I``.  ``beta_slip`` is the tangential interface
    friction coefficient and ``alpha_bw`` the pressure/stress coupling
    coefficient.
    """

    rho_f: float = 1.0
    mu_f: float = 1.0
    rho_s: float = 1.0
    mu_s: float = 1.0
    lambda_s: float = 1.0
    s0: float = 1.0
    alpha_bw: float = 1.0
    beta_slip: float = 1.0
    K: np.ndarray = field(default_factory=lambda: np.eye(2))

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.ndim == 0:
            K = float(K) * np.eye(2)
        if K.shape != (2, 2):
            raise ParameterError("K must be a scalar or a 2x2 tensor")
        if not np.allclose(K, K.T, rtol=0.0, atol=1e-14 * max(1.0, abs(K).max())):
            raise ParameterError("K must be symmetric")
        if np.linalg.eigvalsh(K)[0] <= 0.0:
            raise ParameterError("K must be positive definite")
        K = K.copy()
        K.setflags(write=False)
        object.__setattr__(self, "K", K)
        for name in ("rho_f", "mu_f", "rho_s", "mu_s", "s0", "beta_slip"):
            if getattr(self, name) <= 0.0:
                raise ParameterError("%s must be positive" % name)
        if self.lambda_s < 0.0:
            raise ParameterError("lambda_s must be nonnegative")
        if self.alpha_bw < 0.0:
            raise ParameterError("alpha_bw must be nonnegative")

    @property
    def k_min(self):
        return float(np.linalg.eigvalsh(self.K)[0])

    @property
    def k_max(self):
        return float(np.linalg.eigvalsh(self.K)[1])


def _as_expr(value):
    if value is None:
        return ZERO
    if isinstance(value, Expr):
        return value
    return Const(float(value))


def _as_pair(value):
    if value is None:
        return (ZERO, ZERO)
    a, b = value
    return (_as_expr(a), _as_expr(b))


@dataclass(frozen=True)
class ExtraLoads:
    """Additional consistency loads used by manufactured-solution runs.

    Each entry, when set, contributes a boundary integral to the right-hand
    side so that a chosen smooth field solves the discrete problem exactly up
    to quadrature:

    - ``inlet_traction``: vector integrand on the inlet, ``<g, v>``
    - ``outlet_traction``: vector integrand on the outlet, ``<g, v>``
    - ``iface_mom``: vector integrand on the interface (momentum row)
    - ``iface_str``: vector integrand on the interface (structure row)
    - ``iface_darcy``: scalar integrand on the interface (Darcy row)
    - ``poroext_stress``: 2x2 stress tensor on the outer poroelastic sides;
      only its normal-normal component acts on the constrained test space,
      contributing ``<(n.S n)(n.xi)>``
    - ``poros_flux``: vector field whose normal component is the prescribed
      flux on the bottom boundary, contributing ``<g.n, r>``
    """

    inlet_traction: tuple = None
    outlet_traction: tuple = None
    iface_mom: tuple = None
    iface_str: tuple = None
    iface_darcy: Expr = None
    poroext_stress: tuple = None
    poros_flux: tuple = None

    def scaled(self, factor):
        """Every load multiplied by a constant factor."""
        def one(e):
            return None if e is None else factor * e

        def pair(p):
            return None if p is None else (one(p[0]), one(p[1]))

        stress = self.poroext_stress
        if stress is not None:
            stress = tuple(tuple(one(e) for e in row) for row in stress)
        return ExtraLoads(
            inlet_traction=pair(self.inlet_traction),
            outlet_traction=pair(self.outlet_traction),
            iface_mom=pair(self.iface_mom),
            iface_str=pair(self.iface_str),
            iface_darcy=one(self.iface_darcy),
            poroext_stress=stress,
            poros_flux=pair(self.poros_flux),
        )


@dataclass(frozen=True)
class ProblemData:
    """Right-hand-side data: volume forces, sources and inlet pressure."""

    f_f: tuple = None
    f_s: tuple = None
    f_p: Expr = None
    P_in: Expr = None
    extra: ExtraLoads = None

    def __post_init__(self):
        object.__setattr__(self, "f_f", _as_pair(self.f_f))
        object.__setattr__(self, "f_s", _as_pair(self.f_s))
        object.__setattr__(self, "f_p", _as_expr(self.f_p))
        object.__setattr__(self, "P_in", _as_expr(self.P_in))

    def time_derivative(self):
        """Data with every field replaced by its exact time derivative."""
        return ProblemData(
            f_f=(self.f_f[0].diff("t"), self.f_f[1].diff("t")),
            f_s=(self.f_s[0].diff("t"), self.f_s[1].diff("t")),
            f_p=self.f_p.diff("t"),
            P_in=self.P_in.diff("t"),
        )

    def scaled(self, factor):
        """Data (including any extra loads) multiplied by a constant."""
        return ProblemData(
            f_f=(factor * self.f_f[0], factor * self.f_f[1]),
            f_s=(factor * self.f_s[0], factor * self.f_s[1]),
            f_p=factor * self.f_p,
            P_in=factor * self.P_in,
            extra=None if self.extra is None else self.extra.scaled(factor),
        )


@dataclass
class StateVector:
    """Coefficients of all unknowns (free dofs only) at one time."""

    t: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    theta: np.ndarray
    pi: np.ndarray

    def copy(self):
        return StateVector(self.t, self.alpha.copy(), self.beta.copy(),
                           self.gamma.copy(), self.theta.copy(), self.pi.copy())


# ---------------------------------------------------------------------------
# volume assembly
# ---------------------------------------------------------------------------

def _geometry(mesh, tri_ids):
    """Affine map data per triangle: inverse Jacobian and |det J|."""
    tri = mesh.triangles[tri_ids]
    v0 = mesh.vertices[tri[:, 0]]
    e1 = mesh.vertices[tri[:, 1]] - v0
    e2 = mesh.vertices[tri[:, 2]] - v0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    jinv = np.empty((len(tri_ids), 2, 2))
    jinv[:, 0, 0] = e2[:, 1] / det
    jinv[:, 0, 1] = -e2[:, 0] / det
    jinv[:, 1, 0] = -e1[:, 1] / det
    jinv[:, 1, 1] = e1[:, 0] / det
    return v0, jinv, np.abs(det)


def _scalar_space_of(space):
    return space.scalar if isinstance(space, VectorSpace) else space


def _check_same_cells(test_space, trial_space):
    if not np.array_equal(test_space.tri_ids, trial_space.tri_ids):
        raise ValueError("test and trial spaces must share the same triangles")


def _scatter(cells_test, cells_trial, values, shape):
    nt, ns = values.shape[1:]
    rows = np.repeat(cells_test[:, :, None], ns, axis=2)
    cols = np.repeat(cells_trial[:, None, :], nt, axis=1)
    mat = sp.coo_matrix((values.ravel(), (rows.ravel(), cols.ravel())),
                        shape=shape)
    return mat.tocsr()


def _quad_points(mesh, tri_ids, rule):
    """Physical coordinates of the rule's points on every triangle."""
    v0, _, _ = _geometry(mesh, tri_ids)
    tri = mesh.triangles[tri_ids]
    e1 = mesh.vertices[tri[:, 1]] - v0
    e2 = mesh.vertices[tri[:, 2]] - v0
    x = (v0[:, None, :] + rule.points[None, :, 0, None] * e1[:, None, :]
         + rule.points[None, :, 1, None] * e2[:, None, :])
    return x  # (nc, nq, 2)


def scalar_mass(test_space, trial_space, order=DEFAULT_VOLUME_ORDER, coeff=None):
    """(c u, v) over the common subdomain of two scalar spaces.

    ``coeff``, when given, is an expression evaluated at quadrature points.
    """
    _check_same_cells(test_space, trial_space)
    mesh = test_space.mesh
    rule = triangle_rule(order)
    _, _, det = _geometry(mesh, test_space.tri_ids)
    vt, _ = basis_eval(test_space.kind, rule.points)
    vs, _ = basis_eval(trial_space.kind, rule.points)
    if coeff is None:
        cells = np.einsum("q,c,qi,qj->cij", rule.weights, det, vt, vs,
                          optimize=True)
    else:
        x = _quad_points(mesh, test_space.tri_ids, rule)
        cvals = np.asarray(coeff(x[..., 0], x[..., 1], 0.0))
        cells = np.einsum("q,c,cq,qi,qj->cij", rule.weights, det, cvals,
                          vt, vs, optimize=True)
    return _scatter(test_space.cell_dofs, trial_space.cell_dofs, cells,
                    (test_space.ndof, trial_space.ndof))


def _phys_grads(space, jinv, rule):
    """Physical basis gradients, shape (nc, nq, ndof_local, 2)."""
    _, grads = basis_eval(space.kind, rule.points)
    return np.einsum("qik,ckj->cqij", grads, jinv, optimize=True)


def scalar_grad_products(test_space, trial_space, order=DEFAULT_VOLUME_ORDER):
    """The four matrices ``G[a][b]`` with entries (d_a u_i, d_b v_j).

    Index convention: ``G[a][b][i, j] = int (d x_a N_i)(d x_b N_j)`` with the
    test function first.
    """
    _check_same_cells(test_space, trial_space)
    mesh = test_space.mesh
    rule = triangle_rule(order)
    _, jinv, det = _geometry(mesh, test_space.tri_ids)
    gt = _phys_grads(test_space, jinv, rule)
    gs = gt if trial_space is test_space else _phys_grads(trial_space, jinv, rule)
    cells = np.einsum("q,c,cqia,cqjb->abcij", rule.weights, det, gt, gs,
                      optimize=True)
    shape = (test_space.ndof, trial_space.ndof)
    return [[_scatter(test_space.cell_dofs, trial_space.cell_dofs,
                      cells[a, b], shape) for b in range(2)] for a in range(2)]


def vector_mass(space, order=DEFAULT_VOLUME_ORDER):
    """(u, v) on a component-blocked vector space."""
    m = scalar_mass(space.scalar, space.scalar, order)
    return sp.block_diag([m, m]).tocsr()


def vector_symgrad(space, order=DEFAULT_VOLUME_ORDER):
    """(D(u), D(v)) with D the symmetric gradient."""
    g = scalar_grad_products(space.scalar, space.scalar, order)
    return sp.bmat([
        [g[0][0] + 0.5 * g[1][1], 0.5 * g[1][0]],
        [0.5 * g[0][1], g[1][1] + 0.5 * g[0][0]],
    ]).tocsr()


def vector_divdiv(space, order=DEFAULT_VOLUME_ORDER):
    """(div u, div v)."""
    g = scalar_grad_products(space.scalar, space.scalar, order)
    return sp.bmat([[g[0][0], g[0][1]], [g[1][0], g[1][1]]]).tocsr()


def vector_stiffness(space, order=DEFAULT_VOLUME_ORDER):
    """(grad u, grad v), the componentwise H1 seminorm product."""
    g = scalar_grad_products(space.scalar, space.scalar, order)
    lap = (g[0][0] + g[1][1]).tocsr()
    return sp.block_diag([lap, lap]).tocsr()


def scalar_kgrad(space, K, order=DEFAULT_VOLUME_ORDER):
    """(K grad u, grad v) for a constant 2x2 tensor K."""
    g = scalar_grad_products(space, space, order)
    K = np.asarray(K, dtype=float)
    # test gradient contracted against K times trial gradient:
    # sum_ab K[a, b] (d_a v, d_b u) -- K symmetric, so order is immaterial.
    out = None
    for a in range(2):
        for b in range(2):
            term = K[a, b] * g[a][b]
            out = term if out is None else out + term
    return out.tocsr()


def scalar_stiffness(space, order=DEFAULT_VOLUME_ORDER):
    g = scalar_grad_products(space, space, order)
    return (g[0][0] + g[1][1]).tocsr()


def mixed_div(scalar_space, vector_space, order=DEFAULT_VOLUME_ORDER):
    """(q_i, div v_j): scalar test rows, vector trial columns."""
    _check_same_cells(scalar_space, vector_space.scalar)
    mesh = scalar_space.mesh
    rule = triangle_rule(order)
    _, jinv, det = _geometry(mesh, scalar_space.tri_ids)
    vt, _ = basis_eval(scalar_space.kind, rule.points)
    gs = _phys_grads(vector_space.scalar, jinv, rule)
    shape = (scalar_space.ndof, vector_space.scalar.ndof)
    blocks = []
    for d in range(2):
        cells = np.einsum("q,c,qi,cqj->cij", rule.weights, det, vt,
                          gs[..., d], optimize=True)
        blocks.append(_scatter(scalar_space.cell_dofs,
                               vector_space.scalar.cell_dofs, cells, shape))
    return sp.hstack(blocks).tocsr()


def div_pressure(vector_space, scalar_space, order=DEFAULT_VOLUME_ORDER):
    """(r_j, div xi_i): vector test rows, scalar trial columns."""
    return mixed_div(scalar_space, vector_space, order).T.tocsr()


# ---------------------------------------------------------------------------
# facet (trace) assembly
# ---------------------------------------------------------------------------

def _facet_frame(mesh, facet):
    a, b = mesh.facets[facet]
    pa, pb = mesh.vertices[a], mesh.vertices[b]
    length = float(np.hypot(*(pb - pa)))
    return pa, pb, length


def _trace_points(mesh, facet, triangle, svals):
    """Reference coordinates inside ``triangle`` of facet points x(s)."""
    pa, pb, _ = _facet_frame(mesh, facet)
    x = pa[None, :] + svals[:, None] * (pb - pa)[None, :]
    tri = mesh.triangles[triangle]
    v0 = mesh.vertices[tri[0]]
    e1 = mesh.vertices[tri[1]] - v0
    e2 = mesh.vertices[tri[2]] - v0
    det = e1[0] * e2[1] - e1[1] * e2[0]
    d = x - v0[None, :]
    xi = (e2[1] * d[:, 0] - e2[0] * d[:, 1]) / det
    eta = (-e1[1] * d[:, 0] + e1[0] * d[:, 1]) / det
    return np.column_stack([xi, eta]), x


def _local_dofs(space, triangle):
    sc = _scalar_space_of(space)
    pos = np.searchsorted(sc.tri_ids, triangle)
    if pos >= len(sc.tri_ids) or sc.tri_ids[pos] != triangle:
        raise ValueError("triangle %d is not in the space's subdomain" % triangle)
    dofs = sc.cell_dofs[pos]
    if isinstance(space, VectorSpace):
        return np.concatenate([dofs, dofs + sc.ndof])
    return dofs


def facet_vector_vector(test_space, trial_space, facets, test_tris, trial_tris,
                        directions, order=DEFAULT_FACET_ORDER):
    """sum_f int_f (phi_i . d_f)(psi_j . d_f) ds over the given facets."""
    mesh = test_space.mesh
    s, w = interval_rule(order)
    rows, cols, vals = [], [], []
    for f, tt, ts, d in zip(facets, test_tris, trial_tris, directions):
        _, _, length = _facet_frame(mesh, f)
        ref_t, _ = _trace_points(mesh, f, tt, s)
        ref_s, _ = _trace_points(mesh, f, ts, s)
        vt, _ = basis_eval(test_space.kind, ref_t)
        vs, _ = basis_eval(trial_space.kind, ref_s)
        pt = vt @ d  # (nq, nloc)
        ps = vs @ d
        local = np.einsum("q,qi,qj->ij", w * length, pt, ps)
        dt = _local_dofs(test_space, tt)
        ds = _local_dofs(trial_space, ts)
        rows.append(np.repeat(dt, len(ds)))
        cols.append(np.tile(ds, len(dt)))
        vals.append(local.ravel())
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(test_space.ndof, trial_space.ndof))
    return mat.tocsr()


def facet_vector_scalar(test_space, trial_space, facets, test_tris, trial_tris,
                        directions, order=DEFAULT_FACET_ORDER):
    """sum_f int_f (phi_i . d_f) psi_j ds, vector test x scalar trial."""
    mesh = test_space.mesh
    s, w = interval_rule(order)
    rows, cols, vals = [], [], []
    for f, tt, ts, d in zip(facets, test_tris, trial_tris, directions):
        _, _, length = _facet_frame(mesh, f)
        ref_t, _ = _trace_points(mesh, f, tt, s)
        ref_s, _ = _trace_points(mesh, f, ts, s)
        vt, _ = basis_eval(test_space.kind, ref_t)
        vs, _ = basis_eval(trial_space.kind, ref_s)
        pt = vt @ d
        local = np.einsum("q,qi,qj->ij", w * length, pt, vs)
        dt = _local_dofs(test_space, tt)
        ds = _local_dofs(trial_space, ts)
        rows.append(np.repeat(dt, len(ds)))
        cols.append(np.tile(ds, len(dt)))
        vals.append(local.ravel())
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(test_space.ndof, trial_space.ndof))
    return mat.tocsr()


def facet_scalar_scalar(test_space, trial_space, facets, test_tris, trial_tris,
                        order=DEFAULT_FACET_ORDER):
    """sum_f int_f phi_i psi_j ds for two scalar spaces."""
    mesh = test_space.mesh
    s, w = interval_rule(order)
    rows, cols, vals = [], [], []
    for f, tt, ts in zip(facets, test_tris, trial_tris):
        _, _, length = _facet_frame(mesh, f)
        ref_t, _ = _trace_points(mesh, f, tt, s)
        ref_s, _ = _trace_points(mesh, f, ts, s)
        vt, _ = basis_eval(test_space.kind, ref_t)
        vs, _ = basis_eval(trial_space.kind, ref_s)
        local = np.einsum("q,qi,qj->ij", w * length, vt, vs)
        dt = _local_dofs(test_space, tt)
        ds = _local_dofs(trial_space, ts)
        rows.append(np.repeat(dt, len(ds)))
        cols.append(np.tile(ds, len(dt)))
        vals.append(local.ravel())
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(test_space.ndof, trial_space.ndof))
    return mat.tocsr()


def interface_tangents(normals):
    """Unit tangents obtained by rotating the normals a quarter turn."""
    t = np.column_stack([-normals[:, 1], normals[:, 0]])
    return t


# ---------------------------------------------------------------------------
# load vectors
# ---------------------------------------------------------------------------

def _eval_pair(exprs, x, y, t):
    fx = np.asarray(exprs[0](x, y, t), dtype=float)
    fy = np.asarray(exprs[1](x, y, t), dtype=float)
    fx = np.broadcast_to(fx, x.shape)
    fy = np.broadcast_to(fy, x.shape)
    return fx, fy


def load_volume_vector(space, exprs, t, order=DEFAULT_LOAD_ORDER):
    """(f, v) for a vector expression pair over a vector space."""
    mesh = space.mesh
    rule = triangle_rule(order)
    _, _, det = _geometry(mesh, space.tri_ids)
    x = _quad_points(mesh, space.tri_ids, rule)
    fx, fy = _eval_pair(exprs, x[..., 0], x[..., 1], t)
    vt, _ = basis_eval(space.scalar.kind, rule.points)
    out = np.zeros(space.ndof)
    cx = np.einsum("q,c,cq,qi->ci", rule.weights, det, fx, vt, optimize=True)
    cy = np.einsum("q,c,cq,qi->ci", rule.weights, det, fy, vt, optimize=True)
    np.add.at(out, space.scalar.cell_dofs, cx)
    np.add.at(out, space.scalar.cell_dofs + space.scalar.ndof, cy)
    return out


def load_volume_scalar(space, expr, t, order=DEFAULT_LOAD_ORDER):
    """(f, r) for a scalar expression over a scalar space."""
    mesh = space.mesh
    rule = triangle_rule(order)
    _, _, det = _geometry(mesh, space.tri_ids)
    x = _quad_points(mesh, space.tri_ids, rule)
    fv = np.broadcast_to(np.asarray(expr(x[..., 0], x[..., 1], t), dtype=float),
                         x.shape[:2])
    vt, _ = basis_eval(space.kind, rule.points)
    out = np.zeros(space.ndof)
    cells = np.einsum("q,c,cq,qi->ci", rule.weights, det, fv, vt, optimize=True)
    np.add.at(out, space.cell_dofs, cells)
    return out


def _facet_loop(space, facets, tris, order):
    """Yield per-facet trace data: facet, tri, ref pts, phys pts, weights."""
    mesh = space.mesh
    s, w = interval_rule(order)
    for f, tri in zip(facets, tris):
        _, _, length = _facet_frame(mesh, f)
        ref, x = _trace_points(mesh, f, tri, s)
        yield f, tri, ref, x, w * length


def load_facet_vector(space, facets, tris, exprs, t, order=DEFAULT_LOAD_ORDER):
    """<g, v> over facets for a vector test space."""
    out = np.zeros(space.ndof)
    for f, tri, ref, x, wts in _facet_loop(space, facets, tris, order):
        gx, gy = _eval_pair(exprs, x[:, 0], x[:, 1], t)
        vals, _ = basis_eval(space.kind, ref)
        g = np.column_stack([gx, gy])
        local = np.einsum("q,qik,qk->i", wts, vals, g)
        np.add.at(out, _local_dofs(space, tri), local)
    return out


def load_facet_scalar(space, facets, tris, expr, t, order=DEFAULT_LOAD_ORDER):
    """<g, r> over facets for a scalar test space."""
    out = np.zeros(space.ndof)
    for f, tri, ref, x, wts in _facet_loop(space, facets, tris, order):
        g = np.broadcast_to(np.asarray(expr(x[:, 0], x[:, 1], t), dtype=float),
                            x[:, 0].shape)
        vals, _ = basis_eval(space.kind, ref)
        local = np.einsum("q,qi,q->i", wts, vals, g)
        np.add.at(out, _local_dofs(space, tri), local)
    return out


def load_facet_pressure_normal(space, facets, tris, expr, t,
                               order=DEFAULT_LOAD_ORDER, normals=None):
    """<P n, v> with n the outward normal seen from each facet's triangle."""
    mesh = space.mesh
    out = np.zeros(space.ndof)
    for k, (f, tri, ref, x, wts) in enumerate(
            _facet_loop(space, facets, tris, order)):
        n = normals[k] if normals is not None else mesh.facet_normal(f, tri)
        p = np.broadcast_to(np.asarray(expr(x[:, 0], x[:, 1], t), dtype=float),
                            x[:, 0].shape)
        vals, _ = basis_eval(space.kind, ref)
        local = np.einsum("q,qik,k->i", wts * p, vals, n)
        np.add.at(out, _local_dofs(space, tri), local)
    return out


def load_facet_normal_stress(space, facets, tris, tensor, t,
                             order=DEFAULT_LOAD_ORDER):
    """<(n.S n)(n.v)> with S a 2x2 expression tensor, n outward per facet."""
    mesh = space.mesh
    out = np.zeros(space.ndof)
    for f, tri, ref, x, wts in _facet_loop(space, facets, tris, order):
        n = mesh.facet_normal(f, tri)
        snn = np.zeros(len(x))
        for a in range(2):
            for b in range(2):
                snn += n[a] * n[b] * np.broadcast_to(
                    np.asarray(tensor[a][b](x[:, 0], x[:, 1], t), dtype=float),
                    snn.shape)
        vals, _ = basis_eval(space.kind, ref)
        local = np.einsum("q,qik,k->i", wts * snn, vals, n)
        np.add.at(out, _local_dofs(space, tri), local)
    return out


def load_facet_flux(space, facets, tris, exprs, t, order=DEFAULT_LOAD_ORDER):
    """<g.n, r> with n the outward normal, scalar test space."""
    mesh = space.mesh
    out = np.zeros(space.ndof)
    for f, tri, ref, x, wts in _facet_loop(space, facets, tris, order):
        n = mesh.facet_normal(f, tri)
        gx, gy = _eval_pair(exprs, x[:, 0], x[:, 1], t)
        gn = gx * n[0] + gy * n[1]
        vals, _ = basis_eval(space.kind, ref)
        local = np.einsum("q,qi->i", wts * gn, vals)
        np.add.at(out, _local_dofs(space, tri), local)
    return out


# ---------------------------------------------------------------------------
# block system
# ---------------------------------------------------------------------------

def restrict(matrix, test_space, trial_space):
    """Slice a full-dof operator to free rows/columns."""
    return matrix[test_space.free][:, trial_space.free].tocsr()


def _boundary_facet_tris(mesh, facet_ids):
    """The unique adjacent triangle of each boundary facet."""
    tris = mesh.facet_tris[facet_ids]
    out = np.where(tris[:, 0] >= 0, tris[:, 0], tris[:, 1])
    if np.any(out < 0) or np.any(tris.min(axis=1) >= 0):
        raise ValueError("facets are not boundary facets")
    return out


class _Convection:
    """Precomputed data for the fluid convection term and its Jacobian."""

    def __init__(self, space, rho_f, order, skew):
        self.space = space
        self.rho_f = rho_f
        self.skew = skew
        mesh = space.mesh
        rule = triangle_rule(order)
        sc = space.scalar
        _, jinv, det = _geometry(mesh, sc.tri_ids)
        vals, _ = basis_eval(sc.kind, rule.points)
        self.vals = vals                                # (nq, nloc)
        self.gphys = _phys_grads(sc, jinv, rule)        # (nc, nq, nloc, 2)
        self.wdet = rule.weights[None, :] * det[:, None]  # (nc, nq)
        self.cell_dofs = sc.cell_dofs                   # (nc, nloc)
        self.ns = sc.ndof
        free_lookup = np.full(space.ndof, -1, dtype=int)
        free_lookup[space.free] = np.arange(space.n_free)
        self.free_lookup = free_lookup

    def _full(self, alpha):
        u = np.zeros(self.space.ndof)
        u[self.space.free] = alpha
        return u

    def __call__(self, alpha, jac=False):
        """Return (N(alpha), J) restricted to free dofs; J is None if not asked."""
        u = self._full(alpha)
        ux = u[self.cell_dofs]                 # (nc, nloc)
        uy = u[self.cell_dofs + self.ns]
        ucof = np.stack([ux, uy], axis=2)      # (nc, nloc, 2)
        # u and grad u at quadrature points
        uq = np.einsum("qd,cdk->cqk", self.vals, ucof, optimize=True)
        gq = np.einsum("cqdm,cdk->cqkm", self.gphys, ucof, optimize=True)
        conv = np.einsum("cqm,cqkm->cqk", uq, gq, optimize=True)
        if self.skew:
            divu = gq[:, :, 0, 0] + gq[:, :, 1, 1]
            conv = conv + 0.5 * divu[:, :, None] * uq
        cells = self.rho_f * np.einsum("cq,qi,cqk->cik", self.wdet,
                                       self.vals, conv, optimize=True)
        # cells[c, i, k]: load on scalar dof i of component k
        full = np.zeros(self.space.ndof)
        np.add.at(full, self.cell_dofs, cells[:, :, 0])
        np.add.at(full, self.cell_dofs + self.ns, cells[:, :, 1])
        residual = full[self.space.free]
        if not jac:
            return residual, None

        # d/du_j of (u . grad) u, component-blocked: with phi_j = e_d N_j,
        #   (phi_j . grad) u = N_j d_d u     -> N_i N_j (d_d u)_k
        #   (u . grad) phi_j = e_d (u . grad N_j) -> delta_kd N_i (u . grad N_j)
        nloc = self.vals.shape[1]
        t1 = np.einsum("cq,qi,qj,cqkd->cikjd", self.wdet, self.vals,
                       self.vals, gq, optimize=True)
        ugradn = np.einsum("cqm,cqjm->cqj", uq, self.gphys, optimize=True)
        t2d = np.einsum("cq,qi,cqj->cij", self.wdet, self.vals, ugradn,
                        optimize=True)
        if self.skew:
            divu = gq[:, :, 0, 0] + gq[:, :, 1, 1]
            # 0.5 [(div phi_j) u_k + (div u) delta_kd N_j] N_i
            t1 = t1 + 0.5 * np.einsum("cq,qi,cqjd,cqk->cikjd", self.wdet,
                                      self.vals, self.gphys, uq, optimize=True)
            t2d = t2d + 0.5 * np.einsum("cq,cq,qi,qj->cij", self.wdet, divu,
                                        self.vals, self.vals, optimize=True)
        nc = len(self.cell_dofs)
        local = np.zeros((nc, 2 * nloc, 2 * nloc))
        for k in range(2):
            for d in range(2):
                block = t1[:, :, k, :, d]
                if k == d:
                    block = block + t2d
                local[:, k * nloc:(k + 1) * nloc, d * nloc:(d + 1) * nloc] = block
        local *= self.rho_f
        vdofs = np.concatenate([self.cell_dofs, self.cell_dofs + self.ns],
                               axis=1)
        fdofs = self.free_lookup[vdofs]        # (nc, 2*nloc); -1 marks fixed
        rows = np.repeat(fdofs[:, :, None], 2 * nloc, axis=2)
        cols = np.repeat(fdofs[:, None, :], 2 * nloc, axis=1)
        keep = (rows >= 0) & (cols >= 0)
        jmat = sp.coo_matrix(
            (local[keep], (rows[keep], cols[keep])),
            shape=(self.space.n_free, self.space.n_free)).tocsr()
        return residual, jmat


@dataclass
class BlockSystem:
    """All assembled operators of the coupled problem, restricted to free dofs."""

    dm: object
    params: PhysicalParams
    convection_enabled: bool
    skew: bool
    raw: dict
    Af: sp.csr_matrix
    Bf: sp.csr_matrix
    As: sp.csr_matrix
    Bs: sp.csr_matrix
    Ap: sp.csr_matrix
    Bp: sp.csr_matrix
    C: sp.csr_matrix
    D: sp.csr_matrix
    E: sp.csr_matrix
    F: sp.csr_matrix
    Gdiv: sp.csr_matrix
    visc2: sp.csr_matrix
    slip_uu_beta: sp.csr_matrix
    mass_u: sp.csr_matrix
    mass_d: sp.csr_matrix
    mass_p: sp.csr_matrix
    h1_u: sp.csr_matrix
    h1_d: sp.csr_matrix
    h1_p: sp.csr_matrix
    _convection: object = None

    @property
    def n_alpha(self):
        return self.Af.shape[0]

    @property
    def n_beta(self):
        return self.As.shape[0]

    @property
    def n_gamma(self):
        return self.Ap.shape[0]

    @property
    def n_pi(self):
        return self.Gdiv.shape[0]

    def convection(self, alpha, jac=False):
        """(N(alpha), J(alpha)) on free dofs; zero when convection is off."""
        if not self.convection_enabled:
            z = np.zeros_like(alpha)
            if jac:
                n = len(alpha)
                return z, sp.csr_matrix((n, n))
            return z, None
        return self._convection(alpha, jac)

    def zero_state(self, t=0.0):
        return StateVector(
            t=t,
            alpha=np.zeros(self.n_alpha),
            beta=np.zeros(self.n_beta),
            gamma=np.zeros(self.n_gamma),
            theta=np.zeros(self.n_beta),
            pi=np.zeros(self.n_pi),
        )

    def energy(self, state):
        """E = (alpha'Af alpha + theta'As theta + gamma'Ap gamma + beta'Bs beta)/2."""
        return 0.5 * (state.alpha @ (self.Af @ state.alpha)
                      + state.theta @ (self.As @ state.theta)
                      + state.gamma @ (self.Ap @ state.gamma)
                      + state.beta @ (self.Bs @ state.beta))

    def dissipation(self, state):
        """2 mu_f |D(u)|^2 + beta |(u - eta_t).t|^2_I + |K^1/2 grad w|^2."""
        a, th, g = state.alpha, state.theta, state.gamma
        visc = a @ (self.visc2 @ a)
        slip = (a @ (self.slip_uu_beta @ a) - 2.0 * (a @ (self.E @ th))
                + th @ (self.F @ th))
        darcy = g @ (self.Bp @ g)
        return visc + slip + darcy

    def work(self, loads, state):
        a, b, c = loads
        return a @ state.alpha + b @ state.theta + c @ state.gamma


def assemble_system(mesh, params, convection=True, skew=False,
                    volume_order=DEFAULT_VOLUME_ORDER,
                    facet_order=DEFAULT_FACET_ORDER, dm=None):
    """Assemble every operator of the coupled problem on ``mesh``."""
    if dm is None:
        dm = build_dofmaps(mesh)
    V, Q = dm.velocity, dm.pressure_f
    W, R = dm.displacement, dm.pressure_p

    mass_u = vector_mass(V, volume_order)
    visc_u = vector_symgrad(V, volume_order)
    stiff_u = vector_stiffness(V, volume_order)
    gdiv = mixed_div(Q, V, volume_order)
    mass_q = scalar_mass(Q, Q, volume_order)

    mass_d = vector_mass(W, volume_order)
    symgrad_d = vector_symgrad(W, volume_order)
    divdiv_d = vector_divdiv(W, volume_order)
    stiff_d = vector_stiffness(W, volume_order)

    mass_p = scalar_mass(R, R, volume_order)
    kgrad_p = scalar_kgrad(R, params.K, volume_order)
    stiff_p = scalar_stiffness(R, volume_order)

    ifacets = mesh.interface_facets
    iftri = mesh.interface_fluid_tri
    iptri = mesh.interface_poro_tri
    normals = mesh.interface_normals
    tangents = interface_tangents(normals)

    slip_uu = facet_vector_vector(V, V, ifacets, iftri, iftri, tangents,
                                  facet_order)
    slip_ud = facet_vector_vector(V, W, ifacets, iftri, iptri, tangents,
                                  facet_order)
    slip_dd = facet_vector_vector(W, W, ifacets, iptri, iptri, tangents,
                                  facet_order)
    dface = facet_vector_scalar(V, R, ifacets, iftri, iptri, normals,
                                facet_order)
    cface = facet_vector_scalar(W, R, ifacets, iptri, iptri, normals,
                                facet_order)
    cvol = div_pressure(W, R, volume_order)

    raw = {
        "mass_u": mass_u, "visc_u": visc_u, "stiff_u": stiff_u,
        "gdiv": gdiv, "mass_q": mass_q,
        "mass_d": mass_d, "symgrad_d": symgrad_d, "divdiv_d": divdiv_d,
        "stiff_d": stiff_d,
        "mass_p": mass_p, "kgrad_p": kgrad_p, "stiff_p": stiff_p,
        "slip_uu": slip_uu, "slip_ud": slip_ud, "slip_dd": slip_dd,
        "dface": dface, "cface": cface, "cvol": cvol,
    }

    p = params
    Af = restrict(p.rho_f * mass_u, V, V)
    visc2 = restrict(2.0 * p.mu_f * visc_u, V, V)
    slip_uu_beta = restrict(p.beta_slip * slip_uu, V, V)
    Bf = (visc2 + slip_uu_beta).tocsr()
    As = restrict(p.rho_s * mass_d, W, W)
    Bs = restrict(2.0 * p.mu_s * symgrad_d + p.lambda_s * divdiv_d, W, W)
    Ap = restrict(p.s0 * mass_p, R, R)
    Bp = restrict(kgrad_p, R, R)
    C = restrict(p.alpha_bw * cvol + cface, W, R)
    D = restrict(dface, V, R)
    E = restrict(p.beta_slip * slip_ud, V, W)
    F = restrict(p.beta_slip * slip_dd, W, W)
    Gdiv = restrict(gdiv, Q, V)

    blocks = BlockSystem(
        dm=dm, params=params, convection_enabled=convection, skew=skew,
        raw=raw,
        Af=Af, Bf=Bf, As=As, Bs=Bs, Ap=Ap, Bp=Bp,
        C=C, D=D, E=E, F=F, Gdiv=Gdiv,
        visc2=visc2, slip_uu_beta=slip_uu_beta,
        mass_u=restrict(mass_u, V, V),
        mass_d=restrict(mass_d, W, W),
        mass_p=restrict(mass_p, R, R),
        h1_u=restrict(mass_u + stiff_u, V, V),
        h1_d=restrict(mass_d + stiff_d, W, W),
        h1_p=restrict(mass_p + stiff_p, R, R),
    )
    if convection:
        blocks._convection = _Convection(V, p.rho_f, volume_order, skew)
    return blocks


def assemble_loads(t, data, dm, load_order=DEFAULT_LOAD_ORDER):
    """Assemble the free-dof right-hand sides (a, b, c) at time ``t``."""
    mesh = dm.mesh
    V, W, R = dm.velocity, dm.displacement, dm.pressure_p

    a = load_volume_vector(V, data.f_f, t, load_order)
    inlet = mesh.facets_with_tag(meshmod.FLUID_INLET)
    if len(inlet):
        tris = _boundary_facet_tris(mesh, inlet)
        a -= load_facet_pressure_normal(V, inlet, tris, data.P_in, t, load_order)

    b = load_volume_vector(W, data.f_s, t, load_order)
    c = load_volume_scalar(R, data.f_p, t, load_order)

    extra = data.extra
    if extra is not None:
        ifacets = mesh.interface_facets
        iftri = mesh.interface_fluid_tri
        iptri = mesh.interface_poro_tri
        if extra.inlet_traction is not None and len(inlet):
            tris = _boundary_facet_tris(mesh, inlet)
            a += load_facet_vector(V, inlet, tris, extra.inlet_traction, t,
                                   load_order)
        outlet = mesh.facets_with_tag(meshmod.FLUID_OUTLET)
        if extra.outlet_traction is not None and len(outlet):
            tris = _boundary_facet_tris(mesh, outlet)
            a += load_facet_vector(V, outlet, tris, extra.outlet_traction, t,
                                   load_order)
        if extra.iface_mom is not None:
            a += load_facet_vector(V, ifacets, iftri, extra.iface_mom, t,
                                   load_order)
        if extra.iface_str is not None:
            b += load_facet_vector(W, ifacets, iptri, extra.iface_str, t,
                                   load_order)
        if extra.iface_darcy is not None:
            c += load_facet_scalar(R, ifacets, iptri, extra.iface_darcy, t,
                                   load_order)
        if extra.poroext_stress is not None:
            pext = mesh.facets_with_tag(meshmod.PORO_EXTERNAL)
            if len(pext):
                tris = _boundary_facet_tris(mesh, pext)
                b += load_facet_normal_stress(W, pext, tris,
                                              extra.poroext_stress, t,
                                              load_order)
        if extra.poros_flux is not None:
            psol = mesh.facets_with_tag(meshmod.PORO_SOLID)
            if len(psol):
                tris = _boundary_facet_tris(mesh, psol)
                c += load_facet_flux(R, psol, tris, extra.poros_flux, t,
                                     load_order)

    return a[V.free], b[W.free], c[R.free]


def residual(blocks, state, state_dot, loads):
    """The five block residual rows at one time instant.

    ``state`` carries the values entering the stiffness-type terms,
    ``state_dot`` the discrete time derivatives, and ``loads`` the triple
    (a, b, c).  Rows: momentum, kinematic, Darcy, structure, constraint.
    """
    a, b, c = loads
    nl, _ = blocks.convection(state.alpha)
    r_mom = (blocks.Af @ state_dot.alpha + blocks.Bf @ state.alpha + nl
             + blocks.D @ state.gamma - blocks.E @ state.theta
             - blocks.Gdiv.T @ state.pi - a)
    r_kin = state_dot.beta - state.theta
    r_dar = (blocks.Ap @ state_dot.gamma + blocks.Bp @ state.gamma
             + blocks.C.T @ state.theta - blocks.D.T @ state.alpha - c)
    r_str = (blocks.As @ state_dot.theta + blocks.Bs @ state.beta
             - blocks.C @ state.gamma - blocks.E.T @ state.alpha
             + blocks.F @ state.theta - b)
    r_con = blocks.Gdiv @ state.alpha
    return r_mom, r_kin, r_dar, r_str, r_con
