"""Result serialization: CSV tables, legacy VTK output and run manifests.

Every writer is deterministic: fixed column orders, shortest round-trip
float formatting, newline-terminated lines, no timestamps.  Re-emitting the
same object produces byte-identical files.
"""

import csv
import hashlib
import json
from dataclasses import fields as dataclass_fields

from .constants import KIND_DESCRIPTIONS, ConstantEstimate
from .fem import build_dofmaps
from .monitor import CertificateRow
from .verify import ERROR_KEYS, RESIDUAL_KEYS

# convergence-table CSV columns per error norm, in table order
ERROR_COLUMNS = {
    "vel_l2": "e_uL2",
    "vel_h1": "e_uH1",
    "pf_l2": "e_pfL2",
    "disp_h1": "e_etaH1",
    "pore_l2": "e_ppL2",
    "pore_h1": "e_ppH1",
}

RESIDUAL_COLUMNS = {
    "mass": "res_mass",
    "normal_stress": "res_normal_stress",
    "bjs": "res_bjs",
    "stress_continuity": "res_stress_continuity",
}


def _fmt(value):
    """Deterministic cell formatting with exact float round-trip."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    if hasattr(value, "item"):  # numpy scalar
        return _fmt(value.item())
    return str(value)


def _parse_cell(text):
    if text == "":
        return None
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


# ---------------------------------------------------------------------------
# constants table
# ---------------------------------------------------------------------------

def write_constants(path, estimates):
    """Write a list of :class:`ConstantEstimate` as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kind", "value", "mesh_level", "dofs", "description"])
        for est in estimates:
            writer.writerow([est.kind, _fmt(float(est.value)),
                             est.mesh_level, est.dofs,
                             KIND_DESCRIPTIONS[est.kind]])


def read_constants(path):
    """Read a constants CSV back into :class:`ConstantEstimate` objects."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["kind", "value", "mesh_level", "dofs"]:
            raise ValueError("%s: not a constants table" % path)
        for row in reader:
            out.append(ConstantEstimate(
                kind=row[0], value=float(row[1]),
                mesh_level=int(row[2]), dofs=int(row[3])))
    return out


# ---------------------------------------------------------------------------
# convergence table
# ---------------------------------------------------------------------------

def write_convergence(path, table):
    """Write a :class:`fpsi.verify.ConvergenceTable` as CSV.

    Columns: level, h, dt, n_steps, one error column per norm, the observed
    rate columns (empty on the first level) and the interface residual
    norms.
    """
    rates = table.rates()
    header = (["level", "h", "dt", "n_steps"]
              + [ERROR_COLUMNS[k] for k in ERROR_KEYS]
              + ["rate_" + ERROR_COLUMNS[k][2:] for k in ERROR_KEYS]
              + [RESIDUAL_COLUMNS[k] for k in RESIDUAL_KEYS])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, run in enumerate(table.runs):
            row = [run.n, _fmt(run.h), _fmt(run.dt), run.n_steps]
            row += [_fmt(run.errors[k]) for k in ERROR_KEYS]
            row += ["" if i == 0 else _fmt(rates[k][i - 1])
                    for k in ERROR_KEYS]
            row += [_fmt(run.residuals[k]) for k in RESIDUAL_KEYS]
            writer.writerow(row)


def read_convergence(path):
    """Read a convergence CSV into a list of per-level dicts."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return [dict(zip(header, map(_parse_cell, row))) for row in reader]


def format_convergence(table):
    """Human-readable summary of a convergence table."""
    lines = ["case %s, scheme %s, T = %s" % (table.case_id, table.scheme,
                                             _fmt(table.t_final))]
    rates = table.rates()
    for i, run in enumerate(table.runs):
        lines.append("  n = %3d  dt = %-10.4g  " % (run.n, run.dt)
                     + "  ".join("%s = %-10.3e" % (ERROR_COLUMNS[k],
                                                   run.errors[k])
                                 for k in ERROR_KEYS))
        if i > 0:
            lines.append("           rates:      "
                         + "  ".join("%s -> %-8.2f" % (ERROR_COLUMNS[k],
                                                       rates[k][i - 1])
                                     for k in ERROR_KEYS))
    flags = table.rate_flags()
    lines.append("  rate targets met: "
                 + ", ".join("%s=%s" % (ERROR_COLUMNS[k], flags[k])
                             for k in ERROR_KEYS))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# certificate table
# ---------------------------------------------------------------------------

_CERT_FIELDS = tuple(f.name for f in dataclass_fields(CertificateRow))


def write_certificate(path, report):
    """Write the per-step rows of a certificate report as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_CERT_FIELDS)
        for row in report.rows:
            writer.writerow([_fmt(getattr(row, name))
                             for name in _CERT_FIELDS])


def read_certificate(path):
    """Read a certificate CSV into a list of per-step dicts."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return [dict(zip(header, map(_parse_cell, row))) for row in reader]


def write_summary(path, summary):
    """Write a summary dict as deterministic JSON."""
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# legacy VTK output
# ---------------------------------------------------------------------------

def emit_vtk(state, mesh, path):
    """Write the state's fields as a legacy ASCII unstructured-grid file.

    Point data arrays: ``velocity`` (zero outside the fluid), then
    ``fluid_pressure``, ``displacement`` (zero outside the poroelastic
    layer) and ``pore_pressure``.  Quadratic fields are downsampled to
    vertex values; edge-midpoint dofs are dropped, as noted in the file
    title line.  Output is byte-deterministic for a fixed state.
    """
    dm = build_dofmaps(mesh)
    counts = {
        "velocity": (state.alpha, dm.velocity),
        "displacement": (state.beta, dm.displacement),
        "pore_pressure": (state.gamma, dm.pressure_p),
        "fluid_pressure": (state.pi, dm.pressure_f),
    }
    for name, (vec, space) in counts.items():
        if len(vec) != space.n_free:
            raise ValueError(
                "state does not match mesh: %s has %d free dofs, state "
                "carries %d" % (name, space.n_free, len(vec)))

    def vertex_scalar(space, free_vals):
        full = _full_values(space, free_vals)
        out = []
        for v in range(mesh.num_vertices):
            d = space.vertex_dof[v]
            out.append(full[d] if d >= 0 else 0.0)
        return out

    def vertex_vector(space, free_vals):
        full = _full_values(space, free_vals)
        sc = space.scalar
        out = []
        for v in range(mesh.num_vertices):
            d = sc.vertex_dof[v]
            if d >= 0:
                out.append((full[d], full[d + sc.ndof]))
            else:
                out.append((0.0, 0.0))
        return out

    vel = vertex_vector(dm.velocity, state.alpha)
    pf = vertex_scalar(dm.pressure_f, state.pi)
    disp = vertex_vector(dm.displacement, state.beta)
    pp = vertex_scalar(dm.pressure_p, state.gamma)

    lines = [
        "# vtk DataFile Version 2.0",
        "coupled flow/poroelastic fields; quadratic dofs downsampled to "
        "vertices (edge midpoints dropped)",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        "POINTS %d double" % mesh.num_vertices,
    ]
    lines += ["%s %s 0" % (_fmt(float(x)), _fmt(float(y)))
              for x, y in mesh.vertices]
    lines.append("CELLS %d %d" % (mesh.num_triangles, 4 * mesh.num_triangles))
    lines += ["3 %d %d %d" % tuple(tri) for tri in mesh.triangles]
    lines.append("CELL_TYPES %d" % mesh.num_triangles)
    lines += ["5"] * mesh.num_triangles
    lines.append("POINT_DATA %d" % mesh.num_vertices)
    lines.append("VECTORS velocity double")
    lines += ["%s %s 0" % (_fmt(a), _fmt(b)) for a, b in vel]
    lines.append("SCALARS fluid_pressure double 1")
    lines.append("LOOKUP_TABLE default")
    lines += [_fmt(v) for v in pf]
    lines.append("VECTORS displacement double")
    lines += ["%s %s 0" % (_fmt(a), _fmt(b)) for a, b in disp]
    lines.append("SCALARS pore_pressure double 1")
    lines.append("LOOKUP_TABLE default")
    lines += [_fmt(v) for v in pp]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _full_values(space, free_vals):
    out = [0.0] * space.ndof
    for i, d in enumerate(space.free):
        out[int(d)] = float(free_vals[i])
    return out


# ---------------------------------------------------------------------------
# digests and manifest
# ---------------------------------------------------------------------------

def mesh_digest(mesh):
    """SHA-256 over the mesh's defining arrays."""
    h = hashlib.sha256()
    for arr in (mesh.vertices, mesh.triangles, mesh.tri_tags,
                mesh.facets, mesh.facet_tags):
        h.update(arr.tobytes())
    return h.hexdigest()


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def write_manifest(path, entries):
    """Write the run manifest (hashes, provenance, versions) as JSON."""
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")
