"""Two-subdomain triangle meshes of the unit square.

The geometry is fixed: a free-flow region occupies the strip above
``y = split`` and a poroelastic region the strip below it.  Meshes carry a
tag per triangle (Fluid / Poro) and a tag per facet; the facet list
enumerates *every* edge of the triangulation exactly once, interior edges
included, so quadratic midpoint dofs can be keyed directly to it.

Boundary tag layout (outward boundary of the unit square):

* ``FluidInlet``    -- x = 0, above the interface
* ``FluidOutlet``   -- x = 1, above the interface
* ``FluidExternal`` -- y = 1
* ``Interface``     -- y = split (shared by one Fluid and one Poro triangle)
* ``PoroSolid``     -- y = 0
* ``PoroExternal``  -- x = 0 or x = 1, below the interface

Interface normals point from the Fluid triangle into the Poro one and are
recomputed on construction (the file format does not store them).
"""

from __future__ import annotations

import numpy as np

MESH_FORMAT_HEADER = "fsimesh 1"

TRIANGLE_TAG_NAMES = ("Fluid", "Poro")
FLUID, PORO = 0, 1

FACET_TAG_NAMES = (
    "FluidInlet",
    "FluidOutlet",
    "FluidExternal",
    "Interface",
    "PoroSolid",
    "PoroExternal",
    "InteriorFluid",
    "InteriorPoro",
)
(FLUID_INLET, FLUID_OUTLET, FLUID_EXTERNAL, INTERFACE,
 PORO_SOLID, PORO_EXTERNAL, INTERIOR_FLUID, INTERIOR_PORO) = range(8)

BOUNDARY_TAGS_FLUID = (FLUID_INLET, FLUID_OUTLET, FLUID_EXTERNAL)
BOUNDARY_TAGS_PORO = (PORO_SOLID, PORO_EXTERNAL)
ALL_BOUNDARY_TAGS = BOUNDARY_TAGS_FLUID + BOUNDARY_TAGS_PORO

_TRI_TAG_CODE = {name: code for code, name in enumerate(TRIANGLE_TAG_NAMES)}
_FACET_TAG_CODE = {name: code for code, name in enumerate(FACET_TAG_NAMES)}

_LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))


class MeshFormatError(ValueError):
    """Raised when a mesh file does not follow the ASCII format."""


class Mesh:
    """Immutable triangle mesh with subdomain and facet tags.

    Parameters
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array
        Vertex indices; valid meshes orient every triangle counterclockwise.
    tri_tags : (nt,) int array
        ``FLUID`` or ``PORO`` per triangle.
    facets : (ne, 2) int array
        Vertex index pairs; must enumerate every triangulation edge once.
    facet_tags : (ne,) int array

    Derived connectivity (triangle -> facet map, facet -> triangle map,
    interface orientation) is computed here; semantic problems are tolerated
    so :func:`validate` can report them.
    """

    def __init__(self, vertices, triangles, tri_tags, facets, facet_tags):
        self.vertices = np.array(vertices, dtype=float)
        self.triangles = np.array(triangles, dtype=int)
        self.tri_tags = np.array(tri_tags, dtype=int)
        self.facets = np.array(facets, dtype=int)
        self.facet_tags = np.array(facet_tags, dtype=int)

        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ValueError("vertices must be an (nv, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError("triangles must be an (nt, 3) array")
        if self.facets.ndim != 2 or self.facets.shape[1] != 2:
            raise ValueError("facets must be an (ne, 2) array")
        if self.tri_tags.shape != (self.triangles.shape[0],):
            raise ValueError("tri_tags length mismatch")
        if self.facet_tags.shape != (self.facets.shape[0],):
            raise ValueError("facet_tags length mismatch")
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle vertex index out of range")
        if self.facets.size and (self.facets.min() < 0
                                 or self.facets.max() >= len(self.vertices)):
            raise ValueError("facet vertex index out of range")

        self._build_connectivity()
        for arr in (self.vertices, self.triangles, self.tri_tags, self.facets,
                    self.facet_tags, self.tri_facets, self.facet_tris):
            arr.setflags(write=False)

    # -- construction of derived connectivity -------------------------------

    def _build_connectivity(self):
        edge_index = {}
        self.duplicate_facets = []
        for f, (a, b) in enumerate(self.facets):
            key = (min(a, b), max(a, b))
            if key in edge_index:
                self.duplicate_facets.append(f)
            else:
                edge_index[key] = f

        nt = len(self.triangles)
        ne = len(self.facets)
        self.tri_facets = np.full((nt, 3), -1, dtype=int)
        self.facet_tris = np.full((ne, 2), -1, dtype=int)
        self.extra_adjacency = []
        for c, tri in enumerate(self.triangles):
            for loc, (i, j) in enumerate(_LOCAL_EDGES):
                a, b = tri[i], tri[j]
                key = (min(a, b), max(a, b))
                f = edge_index.get(key, -1)
                self.tri_facets[c, loc] = f
                if f >= 0:
                    if self.facet_tris[f, 0] < 0:
                        self.facet_tris[f, 0] = c
                    elif self.facet_tris[f, 1] < 0:
                        self.facet_tris[f, 1] = c
                    else:
                        self.extra_adjacency.append((f, c))

        iface = np.flatnonzero(self.facet_tags == INTERFACE)
        self.interface_facets = iface
        self.interface_fluid_tri = np.full(len(iface), -1, dtype=int)
        self.interface_poro_tri = np.full(len(iface), -1, dtype=int)
        self.interface_normals = np.full((len(iface), 2), np.nan)
        for k, f in enumerate(iface):
            for c in self.facet_tris[f]:
                if c < 0:
                    continue
                if self.tri_tags[c] == FLUID and self.interface_fluid_tri[k] < 0:
                    self.interface_fluid_tri[k] = c
                elif self.tri_tags[c] == PORO and self.interface_poro_tri[k] < 0:
                    self.interface_poro_tri[k] = c
            tf = self.interface_fluid_tri[k]
            if tf >= 0:
                self.interface_normals[k] = self.facet_normal(f, tf)
        self.interface_normals.setflags(write=False)

    # -- basic queries -------------------------------------------------------

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    @property
    def num_facets(self):
        return len(self.facets)

    def triangles_with_tag(self, tag):
        return np.flatnonzero(self.tri_tags == tag)

    def facets_with_tag(self, tag):
        return np.flatnonzero(self.facet_tags == tag)

    def signed_areas(self):
        p = self.vertices[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    def facet_lengths(self, facet_ids=None):
        ids = np.arange(self.num_facets) if facet_ids is None else np.asarray(facet_ids)
        d = self.vertices[self.facets[ids, 1]] - self.vertices[self.facets[ids, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def facet_normal(self, facet, triangle):
        """Unit normal of ``facet`` pointing out of ``triangle``."""
        a, b = self.facets[facet]
        e = self.vertices[b] - self.vertices[a]
        n = np.array([e[1], -e[0]])
        n /= np.hypot(n[0], n[1])
        centroid = self.vertices[self.triangles[triangle]].mean(axis=0)
        mid = 0.5 * (self.vertices[a] + self.vertices[b])
        if np.dot(n, mid - centroid) < 0.0:
            n = -n
        return n

    def boundary_normals(self, facet_ids):
        """Outward normals for boundary facets (single adjacent triangle)."""
        out = np.empty((len(facet_ids), 2))
        for k, f in enumerate(facet_ids):
            tri = self.facet_tris[f, 0]
            out[k] = self.facet_normal(f, tri)
        return out


def build_rect_two_domain(nx, ny, split):
    """Structured mesh of the unit square with the interface at ``y = split``.

    Each of the ``nx * ny`` grid cells is cut along its lower-left to
    upper-right diagonal into two counterclockwise triangles.  ``split * ny``
    must be an integer so the interface coincides with a grid line.

    Parameters
    ----------
    nx, ny : int
        Cells per direction; ``nx >= 1`` and ``ny >= 2``.
    split : float
        Interface height in (0, 1).

    Returns
    -------
    Mesh
    """
    nx, ny = int(nx), int(ny)
    if nx < 1 or ny < 2:
        raise ValueError("need nx >= 1 and ny >= 2")
    if not (0.0 < split < 1.0):
        raise ValueError("split must lie strictly inside (0, 1)")
    j_if = int(round(split * ny))
    if abs(split * ny - j_if) > 1e-9 or not (1 <= j_if <= ny - 1):
        raise ValueError("split * ny must be an integer interior row, got %r * %d"
                         % (split, ny))

    def vid(i, j):
        return j * (nx + 1) + i

    xs = np.arange(nx + 1) / nx
    ys = np.arange(ny + 1) / ny
    xv, yv = np.meshgrid(xs, ys)
    vertices = np.column_stack([xv.ravel(), yv.ravel()])

    triangles, tri_tags = [], []
    for j in range(ny):
        tag = PORO if j < j_if else FLUID
        for i in range(nx):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            triangles.append((a, b, c))
            triangles.append((a, c, d))
            tri_tags.extend((tag, tag))

    facets, facet_tags = [], []
    for j in range(ny + 1):
        if j == 0:
            tag = PORO_SOLID
        elif j == ny:
            tag = FLUID_EXTERNAL
        elif j == j_if:
            tag = INTERFACE
        else:
            tag = INTERIOR_PORO if j < j_if else INTERIOR_FLUID
        for i in range(nx):
            facets.append((vid(i, j), vid(i + 1, j)))
            facet_tags.append(tag)
    for i in range(nx + 1):
        for j in range(ny):
            below = j < j_if
            if i == 0:
                tag = PORO_EXTERNAL if below else FLUID_INLET
            elif i == nx:
                tag = PORO_EXTERNAL if below else FLUID_OUTLET
            else:
                tag = INTERIOR_PORO if below else INTERIOR_FLUID
            facets.append((vid(i, j), vid(i, j + 1)))
            facet_tags.append(tag)
    for j in range(ny):
        tag = INTERIOR_PORO if j < j_if else INTERIOR_FLUID
        for i in range(nx):
            facets.append((vid(i, j), vid(i + 1, j + 1)))
            facet_tags.append(tag)

    return Mesh(vertices, triangles, tri_tags, facets, facet_tags)


def validate(mesh):
    """Check the structural invariants; return a list of violation strings.

    An empty list means the mesh is valid: positive triangle orientation,
    every edge listed exactly once with a tag consistent with its adjacency
    (interior / boundary / interface), interface facets shared by exactly one
    Fluid and one Poro triangle, and interface normals pointing out of the
    Fluid side.
    """
    problems = []

    if not np.all(np.isfinite(mesh.vertices)):
        problems.append("non-finite vertex coordinates")

    areas = mesh.signed_areas()
    for c in np.flatnonzero(areas <= 0.0):
        problems.append("triangle %d has non-positive area %g" % (c, areas[c]))

    used = np.zeros(mesh.num_vertices, dtype=bool)
    used[mesh.triangles.ravel()] = True
    for v in np.flatnonzero(~used):
        problems.append("vertex %d belongs to no triangle" % v)

    for f in mesh.duplicate_facets:
        problems.append("facet %d duplicates an earlier facet" % f)
    for f, c in mesh.extra_adjacency:
        problems.append("facet %d touches more than two triangles (e.g. triangle %d)"
                        % (f, c))

    missing = np.flatnonzero(mesh.tri_facets.min(axis=1) < 0)
    for c in missing:
        problems.append("triangle %d has an edge missing from the facet list" % c)

    for f in range(mesh.num_facets):
        tag = mesh.facet_tags[f]
        adj = [c for c in mesh.facet_tris[f] if c >= 0]
        if not adj:
            problems.append("facet %d is not an edge of any triangle" % f)
            continue
        if len(adj) == 1:
            sub = mesh.tri_tags[adj[0]]
            allowed = BOUNDARY_TAGS_FLUID if sub == FLUID else BOUNDARY_TAGS_PORO
            if tag not in allowed:
                problems.append(
                    "boundary facet %d of a %s triangle carries tag %s"
                    % (f, TRIANGLE_TAG_NAMES[sub], FACET_TAG_NAMES[tag]))
        else:
            subs = sorted(mesh.tri_tags[c] for c in adj)
            if subs == [FLUID, PORO]:
                if tag != INTERFACE:
                    problems.append(
                        "facet %d separates Fluid from Poro but carries tag %s"
                        % (f, FACET_TAG_NAMES[tag]))
            else:
                expected = INTERIOR_FLUID if subs[0] == FLUID else INTERIOR_PORO
                if tag != expected:
                    if tag == INTERFACE:
                        problems.append(
                            "interface facet %d is not shared by one Fluid and "
                            "one Poro triangle" % f)
                    else:
                        problems.append(
                            "interior facet %d carries tag %s, expected %s"
                            % (f, FACET_TAG_NAMES[tag], FACET_TAG_NAMES[expected]))

    for k, f in enumerate(mesh.interface_facets):
        tf = mesh.interface_fluid_tri[k]
        tp = mesh.interface_poro_tri[k]
        if tf < 0 or tp < 0:
            continue  # already reported above
        n = mesh.facet_normal(f, tf)
        if not np.allclose(n, mesh.interface_normals[k], atol=1e-12):
            problems.append("interface facet %d has an inconsistent orientation" % f)

    return problems


# ---------------------------------------------------------------------------
# ASCII file format
# ---------------------------------------------------------------------------

def write_mesh(mesh, path):
    """Write ``mesh`` in the ASCII format (full-precision coordinates)."""
    with open(path, "w") as fh:
        fh.write(MESH_FORMAT_HEADER + "\n")
        fh.write("vertices %d\n" % mesh.num_vertices)
        for x, y in mesh.vertices:
            fh.write("%s %s\n" % (repr(float(x)), repr(float(y))))
        fh.write("triangles %d\n" % mesh.num_triangles)
        for tri, tag in zip(mesh.triangles, mesh.tri_tags):
            fh.write("%d %d %d %s\n" % (tri[0], tri[1], tri[2], TRIANGLE_TAG_NAMES[tag]))
        fh.write("facets %d\n" % mesh.num_facets)
        for (a, b), tag in zip(mesh.facets, mesh.facet_tags):
            fh.write("%d %d %s\n" % (a, b, FACET_TAG_NAMES[tag]))


class _LineReader:
    def __init__(self, path):
        with open(path) as fh:
            self.raw = fh.readlines()
        self.pos = 0

    def next_content(self):
        while self.pos < len(self.raw):
            lineno = self.pos + 1
            line = self.raw[self.pos].split("#", 1)[0].strip()
            self.pos += 1
            if line:
                return lineno, line
        return None, None


def read_mesh(path):
    """Read a mesh written by :func:`write_mesh`.

    Raises
    ------
    MeshFormatError
        With the offending line number for any malformed content.
    """
    reader = _LineReader(path)

    lineno, line = reader.next_content()
    if line is None or line != MESH_FORMAT_HEADER:
        raise MeshFormatError("line %s: expected header %r, found %r"
                              % (lineno or 1, MESH_FORMAT_HEADER, line))

    def section(name):
        lineno, line = reader.next_content()
        if line is None:
            raise MeshFormatError("unexpected end of file, expected %r section" % name)
        parts = line.split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshFormatError("line %d: expected %r section header, found %r"
                                  % (lineno, name, line))
        try:
            count = int(parts[1])
        except ValueError:
            raise MeshFormatError("line %d: bad count %r" % (lineno, parts[1])) from None
        if count < 0:
            raise MeshFormatError("line %d: negative count" % lineno)
        return count

    nv = section("vertices")
    vertices = np.empty((nv, 2))
    for k in range(nv):
        lineno, line = reader.next_content()
        if line is None:
            raise MeshFormatError("unexpected end of file inside vertices")
        parts = line.split()
        if len(parts) != 2:
            raise MeshFormatError("line %d: expected two coordinates" % lineno)
        try:
            vertices[k] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise MeshFormatError("line %d: bad coordinate in %r" % (lineno, line)) from None

    nt = section("triangles")
    triangles = np.empty((nt, 3), dtype=int)
    tri_tags = np.empty(nt, dtype=int)
    for k in range(nt):
        lineno, line = reader.next_content()
        if line is None:
            raise MeshFormatError("unexpected end of file inside triangles")
        parts = line.split()
        if len(parts) != 4:
            raise MeshFormatError("line %d: expected 'i j k subdomain'" % lineno)
        try:
            triangles[k] = [int(parts[0]), int(parts[1]), int(parts[2])]
        except ValueError:
            raise MeshFormatError("line %d: bad vertex index in %r" % (lineno, line)) from None
        if parts[3] not in _TRI_TAG_CODE:
            raise MeshFormatError("line %d: unknown subdomain tag %r" % (lineno, parts[3]))
        tri_tags[k] = _TRI_TAG_CODE[parts[3]]

    ne = section("facets")
    facets = np.empty((ne, 2), dtype=int)
    facet_tags = np.empty(ne, dtype=int)
    for k in range(ne):
        lineno, line = reader.next_content()
        if line is None:
            raise MeshFormatError("unexpected end of file inside facets")
        parts = line.split()
        if len(parts) != 3:
            raise MeshFormatError("line %d: expected 'i j tag'" % lineno)
        try:
            facets[k] = [int(parts[0]), int(parts[1])]
        except ValueError:
            raise MeshFormatError("line %d: bad vertex index in %r" % (lineno, line)) from None
        if parts[2] not in _FACET_TAG_CODE:
            raise MeshFormatError("line %d: unknown facet tag %r" % (lineno, parts[2]))
        facet_tags[k] = _FACET_TAG_CODE[parts[2]]

    lineno, line = reader.next_content()
    if line is not None:
        raise MeshFormatError("line %d: unexpected trailing content %r" % (lineno, line))

    try:
        return Mesh(vertices, triangles, tri_tags, facets, facet_tags)
    except ValueError as exc:
        raise MeshFormatError(str(exc)) from None
