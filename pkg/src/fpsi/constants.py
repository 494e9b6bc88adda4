"""Numerical estimation of the stability constants used by the certificates.

Every constant is realised as the square root of an extremal generalised
eigenvalue ``A x = lambda B x`` over a discrete space, except ``Sf`` (a
quartic/quadratic quotient maximised by projected gradient ascent) and the
two lifted trace norms (``Cj``, ``T3``) which involve a Schur complement.

========  ==================================================================
kind      quotient (constant = sqrt of extremal value)
========  ==================================================================
T1        velocity interface trace:   |v|_{L2(I)}^2   / |v|_{H1(F)}^2
T2        velocity inlet trace:       |v|_{L2(in)}^2  / |v|_{H1(F)}^2
T3        pore-pressure interface trace against the interface-trace energy
          (Schur complement of the pore stiffness), 1 + max eig
T4        pore-pressure interface trace: |r|_{L2(I)}^2 / |r|_{H1(P)}^2
T5        displacement interface trace: |xi|_{L2(I)}^2 / |xi|_{H1(P)}^2
P1c       velocity Poincare:          |v|_{L2}^2 / |grad v|_{L2}^2
P2c       displacement Poincare:      |xi|_{L2}^2 / |grad xi|_{L2}^2
P3c       pore-pressure Poincare:     |r|_{L2}^2 / |grad r|_{L2}^2
Sf        L4 Sobolev embedding:       max |v|_{L4} / |grad v|_{L2}
Kf        Korn-type:                  |grad v|_{L2}^2 / |D(v)|_{L2}^2
Kappa     inf-sup of the divergence coupling (minimal eigenvalue of the
          pressure Schur complement against the pressure mass)
Cj        inlet lifting: harmonic zero-extension of inlet traces,
          1 + max eig of lifted mass against lifted stiffness
========  ==================================================================

All quotients are taken over the constrained (free) degrees of freedom of
the production spaces, so each value is a certified constant for the
discrete spaces actually used by the solver.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import mesh as meshmod
from .assembly import (
    DEFAULT_FACET_ORDER,
    PhysicalParams,
    _boundary_facet_tris,
    _geometry,
    assemble_system,
    facet_scalar_scalar,
    facet_vector_vector,
    restrict,
    scalar_mass,
    scalar_stiffness,
)
from .fem import ElementKind, basis_eval, make_scalar_space, triangle_rule

CONSTANT_KINDS = ("T1", "T2", "T3", "T4", "T5",
                  "P1c", "P2c", "P3c", "Sf", "Kf", "Kappa", "Cj")

KIND_DESCRIPTIONS = {
    "T1": "velocity trace on the interface vs full H1 norm",
    "T2": "velocity trace on the inlet vs full H1 norm",
    "T3": "pore pressure interface trace vs trace energy (lifted)",
    "T4": "pore pressure trace on the interface vs full H1 norm",
    "T5": "displacement trace on the interface vs full H1 norm",
    "P1c": "velocity Poincare constant (L2 vs H1 seminorm)",
    "P2c": "displacement Poincare constant (L2 vs H1 seminorm)",
    "P3c": "pore pressure Poincare constant (L2 vs H1 seminorm)",
    "Sf": "L4 embedding constant (L4 vs H1 seminorm)",
    "Kf": "Korn constant (full gradient vs symmetric gradient)",
    "Kappa": "inf-sup constant of the divergence coupling",
    "Cj": "inlet lifting constant (H1 of extension vs trace energy)",
}

DENSE_EIG_LIMIT = 1500


class ConstantError(RuntimeError):
    """Raised when an estimator cannot produce a trustworthy value."""


@dataclass(frozen=True)
class ConstantEstimate:
    """One estimated constant on one mesh."""

    kind: str
    value: float
    mesh_level: int
    dofs: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CONSTANT_KINDS:
            raise ValueError(f"unknown constant kind {self.kind!r}")


def quotient_max(A, B, dense_limit=DENSE_EIG_LIMIT):
    """Largest lambda of A x = lambda B x (A sym PSD, B sym PD).

    Dense pencils are solved exactly; larger ones with a Lanczos
    iteration started from the constant vector so the result is
    deterministic.
    """
    n = B.shape[0]
    if A.shape != B.shape:
        raise ValueError("pencil matrices must have matching shapes")
    if n <= dense_limit:
        Ad = A.toarray() if sp.issparse(A) else np.asarray(A)
        Bd = B.toarray() if sp.issparse(B) else np.asarray(B)
        ev = la.eigh(Ad, Bd, eigvals_only=True)
        return float(ev[-1])
    vals = spla.eigsh(A.tocsc(), k=1, M=B.tocsc(), which="LA",
                      v0=np.ones(n), return_eigenvectors=False)
    return float(vals[0])


def quotient_min(A, B, zero_tol=1e-12):
    """Smallest lambda of the dense pencil A x = lambda B x.

    Raises ConstantError when the pencil has a (numerically) zero mode,
    since the corresponding inf-sup constant would then be meaningless.
    """
    Ad = A.toarray() if sp.issparse(A) else np.asarray(A)
    Bd = B.toarray() if sp.issparse(B) else np.asarray(B)
    ev = la.eigh(Ad, Bd, eigvals_only=True)
    if ev[-1] <= 0.0 or ev[0] <= zero_tol * ev[-1]:
        raise ConstantError(
            f"pencil has a numerically zero mode (min {ev[0]:.3e}, "
            f"max {ev[-1]:.3e})")
    return float(ev[0])


def _facet_vector_mass(space, facets, tris, order=DEFAULT_FACET_ORDER):
    """Full (both components) facet mass matrix for a vector space."""
    ex = np.tile(np.array([1.0, 0.0]), (len(facets), 1))
    ey = np.tile(np.array([0.0, 1.0]), (len(facets), 1))
    mx = facet_vector_vector(space, space, facets, tris, tris, ex, order)
    my = facet_vector_vector(space, space, facets, tris, tris, ey, order)
    return (mx + my).tocsr()


def _interface_trace_positions(space):
    """Positions (within ``space.free``) of the free interface dofs."""
    trace = space.facet_dofs(space.mesh.interface_facets)
    trace = trace[np.isin(trace, space.free)]
    if len(trace) == 0:
        raise ConstantError("no free interface dofs on this space")
    pos = np.searchsorted(space.free, trace)
    return trace, pos


def _schur_onto(K, pos):
    """Dense Schur complement of csr matrix ``K`` onto index set ``pos``.

    ``S = K_tt - K_ti K_ii^-1 K_it`` for the partition t = ``pos``,
    i = the remaining indices.
    """
    n = K.shape[0]
    mask = np.zeros(n, dtype=bool)
    mask[pos] = True
    rest = np.flatnonzero(~mask)
    Ktt = K[pos][:, pos].toarray()
    Kti = K[pos][:, rest].tocsr()
    Kit = K[rest][:, pos].toarray()
    Kii = K[rest][:, rest].tocsc()
    X = spla.splu(Kii).solve(Kit)
    S = Ktt - Kti @ X
    return 0.5 * (S + S.T)


class InletLifting:
    """Harmonic zero-extension of inlet traces on the fluid subdomain.

    A scalar trace ``g`` on the inlet is extended by zero on the rest of
    the fluid boundary and harmonically (stiffness-minimising) into the
    interior.  ``S00`` is the resulting trace energy, which realises a
    squared trace norm vanishing at the inlet endpoints; ``cj`` bounds the
    full H1 norm of the extension by that trace norm.
    """

    def __init__(self, mesh):
        space = make_scalar_space(mesh, ElementKind.P2,
                                  subdomain=meshmod.FLUID)
        other_tags = (meshmod.FLUID_OUTLET, meshmod.FLUID_EXTERNAL,
                      meshmod.INTERFACE)
        ofacets = np.concatenate(
            [mesh.facets_with_tag(tag) for tag in other_tags])
        odofs = space.facet_dofs(ofacets)
        inlet_all = space.facet_dofs(mesh.facets_with_tag(meshmod.FLUID_INLET))
        # the inlet endpoints belong to the zeroed part of the boundary, so
        # the lifted trace norm vanishes at them
        inlet = np.setdiff1d(inlet_all, odofs)
        bdofs = np.union1d(inlet_all, odofs)
        interior = np.setdiff1d(np.arange(space.ndof), bdofs)

        K = scalar_stiffness(space)
        M = scalar_mass(space, space)

        Kii = K[interior][:, interior].tocsc()
        Kin = K[interior][:, inlet].toarray()
        Xi = -spla.splu(Kii).solve(Kin)

        Z = np.zeros((space.ndof, len(inlet)))
        Z[inlet, np.arange(len(inlet))] = 1.0
        Z[interior] = Xi

        S00 = Z.T @ (K @ Z)
        M00 = Z.T @ (M @ Z)
        self.space = space
        self.inlet_dofs = inlet
        self.inlet_coords = space.dof_coords[inlet]
        self.S00 = 0.5 * (S00 + S00.T)
        self._M00 = 0.5 * (M00 + M00.T)
        self.cj = float(np.sqrt(1.0 + quotient_max(self._M00, self.S00)))

    def norm00(self, values):
        """Trace norm of inlet values given at ``inlet_coords``."""
        g = np.asarray(values, dtype=float)
        if g.shape != (len(self.inlet_dofs),):
            raise ValueError("values must match the inlet dof layout")
        return float(np.sqrt(g @ (self.S00 @ g)))

    def norm00_of(self, expr, t=0.0):
        """Trace norm of a scalar expression evaluated on the inlet."""
        coords = self.inlet_coords
        g = np.asarray(expr(coords[:, 0], coords[:, 1], t), dtype=float)
        g = np.broadcast_to(g, (len(self.inlet_dofs),))
        return self.norm00(np.array(g))


class _QuarticForm:
    """Integral of |v|^4 over the cells of a vector space, with gradient."""

    def __init__(self, space, order=8):
        mesh = space.mesh
        rule = triangle_rule(order)
        vals, _ = basis_eval(space.kind, rule.points)
        _, _, det = _geometry(mesh, space.tri_ids)
        self.vals = vals
        self.wdet = rule.weights[None, :] * det[:, None]
        self.cell_dofs = space.cell_dofs_vector()
        self.ndof = space.ndof
        self.free = space.free

    def value_and_grad(self, z_free):
        full = np.zeros(self.ndof)
        full[self.free] = z_free
        coeffs = full[self.cell_dofs]
        u = np.einsum("qkd,ck->cqd", self.vals, coeffs)
        s = np.einsum("cqd,cqd->cq", u, u)
        value = float(np.einsum("cq,cq->", self.wdet, s * s))
        gcell = 4.0 * np.einsum("cq,cq,cqd,qkd->ck", self.wdet, s, u,
                                self.vals)
        gfull = np.zeros(self.ndof)
        np.add.at(gfull, self.cell_dofs.ravel(), gcell.ravel())
        return value, gfull[self.free]


def sobolev_l4_constant(blocks, seed=0, starts=20, maxit=400, order=8):
    """max |v|_{L4} / |grad v|_{L2} over the discrete velocity space.

    The quartic functional Q(z) = |v|_{L4}^4 is convex, so the
    conditional-gradient step on the unit stiffness sphere -- move to the
    maximiser ``K^-1 grad Q / |.|_K`` of its linearisation -- is a
    guaranteed monotone ascent: Q(w) >= Q(z) + g.(w - z) and w maximises
    g.w over the sphere.  One deterministic smooth start (the constant-load
    stiffness solve) is always used, plus ``starts`` seeded random states;
    the best value gives ``Sf = Q^(1/4)``, a certified lower bound of the
    discrete supremum.
    """
    V = blocks.dm.velocity
    K = restrict(blocks.raw["stiff_u"], V, V)
    lu = spla.splu(K.tocsc())
    form = _QuarticForm(V, order)
    rng = np.random.default_rng(seed)
    n = V.n_free

    def normalize(z):
        return z / np.sqrt(z @ (K @ z))

    initial = [lu.solve(blocks.mass_u @ np.ones(n))]
    initial.extend(rng.standard_normal(n) for _ in range(starts))

    best = 0.0
    best_iters = 0
    for z0 in initial:
        z = normalize(z0)
        q, g = form.value_and_grad(z)
        it = 0
        for it in range(1, maxit + 1):
            z_new = normalize(lu.solve(g))
            q_new, g_new = form.value_and_grad(z_new)
            if q_new < q:
                break
            gain = q_new - q
            z, q, g = z_new, q_new, g_new
            if gain <= 1e-13 * q:
                break
        if q > best:
            best = q
            best_iters = it
    if best <= 0.0:
        raise ConstantError("ascent failed to find a positive quartic value")
    return float(best ** 0.25), best_iters


def pore_trace_constant(blocks, facet_order=DEFAULT_FACET_ORDER):
    """Lifted interface trace constant of the pore pressure space (T3)."""
    mesh = blocks.dm.mesh
    R = blocks.dm.pressure_p
    Kfree = restrict(blocks.raw["stiff_p"], R, R)
    trace, pos = _interface_trace_positions(R)
    S = _schur_onto(Kfree, pos)
    mg = facet_scalar_scalar(R, R, mesh.interface_facets,
                             mesh.interface_poro_tri,
                             mesh.interface_poro_tri, facet_order)
    Mfree = restrict(mg, R, R)
    Mtt = Mfree[pos][:, pos].toarray()
    value = float(np.sqrt(1.0 + quotient_max(Mtt, S)))
    return value, len(trace)


def infsup_constant(blocks):
    """Smallest eigenvalue sqrt of the pressure Schur complement pencil.

    The Schur complement ``G H^-1 G^T`` of the divergence coupling against
    the full H1 velocity matrix is formed densely (the pressure space is
    small) and compared with the pressure mass matrix.
    """
    Q, V = blocks.dm.pressure_f, blocks.dm.velocity
    G = blocks.Gdiv
    H = blocks.h1_u.tocsc()
    X = spla.splu(H).solve(G.T.toarray())
    S = G @ X
    S = 0.5 * (S + S.T)
    Mq = restrict(blocks.raw["mass_q"], Q, Q)
    lam = quotient_min(S, Mq)
    return float(np.sqrt(lam))


def _trace_pencils(blocks):
    """Matrices (A, B) of the simple trace/Poincare/Korn quotients."""
    dm = blocks.dm
    mesh = dm.mesh
    V, W, R = dm.velocity, dm.displacement, dm.pressure_p
    out = {}

    ifacets = mesh.interface_facets
    mi_u = _facet_vector_mass(V, ifacets, mesh.interface_fluid_tri)
    out["T1"] = (restrict(mi_u, V, V), blocks.h1_u)

    inlet = mesh.facets_with_tag(meshmod.FLUID_INLET)
    itris = _boundary_facet_tris(mesh, inlet)
    min_u = _facet_vector_mass(V, inlet, itris)
    out["T2"] = (restrict(min_u, V, V), blocks.h1_u)

    mi_r = facet_scalar_scalar(R, R, ifacets, mesh.interface_poro_tri,
                               mesh.interface_poro_tri)
    out["T4"] = (restrict(mi_r, R, R), blocks.h1_p)

    mi_d = _facet_vector_mass(W, ifacets, mesh.interface_poro_tri)
    out["T5"] = (restrict(mi_d, W, W), blocks.h1_d)

    out["P1c"] = (blocks.mass_u, restrict(blocks.raw["stiff_u"], V, V))
    out["P2c"] = (blocks.mass_d, restrict(blocks.raw["stiff_d"], W, W))
    out["P3c"] = (blocks.mass_p, restrict(blocks.raw["stiff_p"], R, R))
    out["Kf"] = (restrict(blocks.raw["stiff_u"], V, V),
                 restrict(blocks.raw["visc_u"], V, V))
    return out


def estimate(kind, blocks, level=0, seed=0, sf_starts=20, sf_maxit=400):
    """Estimate one constant on an assembled system."""
    if kind not in CONSTANT_KINDS:
        raise ValueError(f"unknown constant kind {kind!r}")
    dm = blocks.dm
    meta = {"description": KIND_DESCRIPTIONS[kind]}
    if kind == "Sf":
        value, iters = sobolev_l4_constant(blocks, seed=seed,
                                           starts=sf_starts, maxit=sf_maxit)
        meta.update(starts=sf_starts, best_iterations=iters)
        return ConstantEstimate(kind, value, level, dm.velocity.n_free, meta)
    if kind == "Kappa":
        value = infsup_constant(blocks)
        return ConstantEstimate(kind, value, level, dm.pressure_f.n_free,
                                meta)
    if kind == "Cj":
        lifting = InletLifting(dm.mesh)
        meta.update(inlet_dofs=len(lifting.inlet_dofs))
        return ConstantEstimate(kind, lifting.cj, level,
                                len(lifting.inlet_dofs), meta)
    if kind == "T3":
        value, ntrace = pore_trace_constant(blocks)
        meta.update(trace_dofs=ntrace)
        return ConstantEstimate(kind, value, level, ntrace, meta)
    pencils = _trace_pencils(blocks)
    if kind not in pencils:
        raise ValueError(f"unknown constant kind {kind!r}")
    A, B = pencils[kind]
    value = float(np.sqrt(quotient_max(A, B)))
    return ConstantEstimate(kind, value, level, B.shape[0], meta)


def estimate_all(blocks, level=0, kinds=CONSTANT_KINDS, seed=0,
                 sf_starts=20, sf_maxit=400):
    """Estimate several constants on one assembled system."""
    return [estimate(kind, blocks, level=level, seed=seed,
                     sf_starts=sf_starts, sf_maxit=sf_maxit)
            for kind in kinds]


def report(levels, split=0.5, params=None, kinds=CONSTANT_KINDS, seed=0,
           sf_starts=20, sf_maxit=400):
    """Estimate all requested constants on a sequence of n x n meshes.

    Returns a flat list of estimates ordered level-major so successive
    values of the same kind can be compared across refinements.
    """
    if params is None:
        params = PhysicalParams()
    out = []
    for n in levels:
        mesh = meshmod.build_rect_two_domain(n, n, split)
        blocks = assemble_system(mesh, params, convection=False)
        out.extend(estimate_all(blocks, level=n, kinds=kinds, seed=seed,
                                sf_starts=sf_starts, sf_maxit=sf_maxit))
    return out


def dirichlet_poincare_square(n):
    """Poincare constant of the unit square with full Dirichlet boundary.

    Computed from the piecewise-linear eigenvalue quotient on an n x n
    mesh; converges from below to 1/sqrt(2 pi^2) at second order in h,
    which makes it a convenient calibration target for the estimators.
    """
    mesh = meshmod.build_rect_two_domain(n, n, 0.5)
    tags = (meshmod.FLUID_INLET, meshmod.FLUID_OUTLET,
            meshmod.FLUID_EXTERNAL, meshmod.PORO_SOLID,
            meshmod.PORO_EXTERNAL)
    space = make_scalar_space(mesh, ElementKind.P1, dirichlet_tags=tags)
    M = restrict(scalar_mass(space, space), space, space)
    K = restrict(scalar_stiffness(space), space, space)
    return float(np.sqrt(quotient_max(M, K)))


def richardson(coarse, fine, rate=2):
    """Extrapolate two values computed at h and h/2 assuming O(h^rate)."""
    w = 2.0 ** rate
    return (w * fine - coarse) / (w - 1.0)
