import numpy as np
import pytest

from fpsi import mesh as meshmod
from fpsi.mesh import (
    FLUID,
    FLUID_EXTERNAL,
    FLUID_INLET,
    FLUID_OUTLET,
    INTERFACE,
    PORO,
    PORO_EXTERNAL,
    PORO_SOLID,
    Mesh,
    MeshFormatError,
    build_rect_two_domain,
    read_mesh,
    validate,
    write_mesh,
)


def test_structured_mesh_counts():
    for nx, ny in [(1, 2), (4, 4), (5, 8), (8, 6)]:
        m = build_rect_two_domain(nx, ny, 0.5 if ny % 2 == 0 else 1.0 / ny)
        assert m.num_vertices == (nx + 1) * (ny + 1)
        assert m.num_triangles == 2 * nx * ny
        assert m.num_facets == (ny + 1) * nx + (nx + 1) * ny + nx * ny
        assert validate(m) == []


def test_subdomains_split_at_interface_height():
    m = build_rect_two_domain(4, 8, 0.25)
    centroids = m.vertices[m.triangles].mean(axis=1)
    fluid = m.triangles_with_tag(FLUID)
    poro = m.triangles_with_tag(PORO)
    assert np.all(centroids[fluid, 1] > 0.25)
    assert np.all(centroids[poro, 1] < 0.25)
    assert len(fluid) == 2 * 4 * 6
    assert len(poro) == 2 * 4 * 2


def test_boundary_tags_lie_on_their_boundaries():
    m = build_rect_two_domain(3, 4, 0.5)
    mids = 0.5 * (m.vertices[m.facets[:, 0]] + m.vertices[m.facets[:, 1]])
    checks = [
        (FLUID_INLET, lambda p: p[0] == 0.0 and p[1] > 0.5),
        (FLUID_OUTLET, lambda p: p[0] == 1.0 and p[1] > 0.5),
        (FLUID_EXTERNAL, lambda p: p[1] == 1.0),
        (PORO_SOLID, lambda p: p[1] == 0.0),
        (PORO_EXTERNAL, lambda p: p[0] in (0.0, 1.0) and p[1] < 0.5),
        (INTERFACE, lambda p: p[1] == 0.5),
    ]
    for tag, ok in checks:
        ids = m.facets_with_tag(tag)
        assert len(ids) > 0
        assert all(ok(mids[f]) for f in ids)
    assert len(m.facets_with_tag(INTERFACE)) == 3


def test_areas_and_orientation():
    m = build_rect_two_domain(5, 6, 0.5)
    areas = m.signed_areas()
    assert np.all(areas > 0.0)
    assert areas.sum() == pytest.approx(1.0, rel=1e-14)


def test_facet_normals_unit_and_outward():
    m = build_rect_two_domain(3, 4, 0.5)
    rng = np.random.default_rng(0)
    for f in rng.choice(m.num_facets, size=20, replace=False):
        tri = m.facet_tris[f, 0]
        n = m.facet_normal(f, tri)
        assert np.hypot(*n) == pytest.approx(1.0)
        mid = 0.5 * (m.vertices[m.facets[f, 0]] + m.vertices[m.facets[f, 1]])
        centroid = m.vertices[m.triangles[tri]].mean(axis=0)
        assert np.dot(n, mid - centroid) > 0.0


def test_interface_orientation_points_into_poro_side():
    m = build_rect_two_domain(4, 4, 0.5)
    assert len(m.interface_facets) == 4
    assert np.all(m.interface_fluid_tri >= 0)
    assert np.all(m.interface_poro_tri >= 0)
    np.testing.assert_allclose(m.interface_normals,
                               np.tile([0.0, -1.0], (4, 1)), atol=1e-14)
    assert np.all(m.tri_tags[m.interface_fluid_tri] == FLUID)
    assert np.all(m.tri_tags[m.interface_poro_tri] == PORO)


@pytest.mark.parametrize("nx,ny,split", [
    (0, 4, 0.5),
    (4, 1, 0.5),
    (4, 4, 0.3),
    (4, 4, 0.0),
    (4, 4, 1.0),
    (4, 2, 0.95),
])
def test_builder_rejects_bad_arguments(nx, ny, split):
    with pytest.raises(ValueError):
        build_rect_two_domain(nx, ny, split)


def test_validate_flags_constructed_defects():
    m = build_rect_two_domain(2, 2, 0.5)

    # duplicate facet
    facets = np.vstack([m.facets, m.facets[0]])
    tags = np.append(m.facet_tags, m.facet_tags[0])
    bad = Mesh(m.vertices, m.triangles, m.tri_tags, facets, tags)
    assert any("duplicates" in p for p in validate(bad))

    # a boundary facet with a tag from the wrong subdomain group
    tags = m.facet_tags.copy()
    f = m.facets_with_tag(PORO_SOLID)[0]
    tags[f] = FLUID_EXTERNAL
    bad = Mesh(m.vertices, m.triangles, m.tri_tags, m.facets, tags)
    assert any("boundary facet" in p for p in validate(bad))

    # interface tag on an interior fluid facet
    tags = m.facet_tags.copy()
    f = m.facets_with_tag(meshmod.INTERIOR_FLUID)[0]
    tags[f] = INTERFACE
    bad = Mesh(m.vertices, m.triangles, m.tri_tags, m.facets, tags)
    assert any("not shared by one Fluid and one Poro" in p for p in validate(bad))

    # flipped triangle
    tris = m.triangles.copy()
    tris[0] = tris[0][::-1]
    bad = Mesh(m.vertices, tris, m.tri_tags, m.facets, m.facet_tags)
    assert any("non-positive area" in p for p in validate(bad))

    # missing facet
    keep = np.arange(1, m.num_facets)
    bad = Mesh(m.vertices, m.triangles, m.tri_tags, m.facets[keep],
               m.facet_tags[keep])
    assert any("missing from the facet list" in p for p in validate(bad))


def test_constructor_rejects_malformed_arrays():
    m = build_rect_two_domain(2, 2, 0.5)
    with pytest.raises(ValueError):
        Mesh(m.vertices[:, :1], m.triangles, m.tri_tags, m.facets, m.facet_tags)
    with pytest.raises(ValueError):
        Mesh(m.vertices, m.triangles[:, :2], m.tri_tags, m.facets, m.facet_tags)
    with pytest.raises(ValueError):
        Mesh(m.vertices, m.triangles + 100, m.tri_tags, m.facets, m.facet_tags)
    with pytest.raises(ValueError):
        Mesh(m.vertices, m.triangles, m.tri_tags[:-1], m.facets, m.facet_tags)


def test_roundtrip_preserves_everything(tmp_path):
    m = build_rect_two_domain(3, 6, 1.0 / 3.0)
    path = tmp_path / "mesh.txt"
    write_mesh(m, path)
    m2 = read_mesh(path)
    np.testing.assert_array_equal(m.vertices, m2.vertices)
    np.testing.assert_array_equal(m.triangles, m2.triangles)
    np.testing.assert_array_equal(m.tri_tags, m2.tri_tags)
    np.testing.assert_array_equal(m.facets, m2.facets)
    np.testing.assert_array_equal(m.facet_tags, m2.facet_tags)
    assert validate(m2) == []


def test_read_accepts_comments_and_blank_lines(tmp_path):
    m = build_rect_two_domain(2, 2, 0.5)
    path = tmp_path / "mesh.txt"
    write_mesh(m, path)
    text = path.read_text().splitlines()
    text.insert(1, "# a comment")
    text.insert(3, "")
    path.write_text("\n".join(text) + "\n")
    m2 = read_mesh(path)
    np.testing.assert_array_equal(m.triangles, m2.triangles)


@pytest.mark.parametrize("mutate,needle", [
    (lambda lines: ["bogus 9"] + lines[1:], "header"),
    (lambda lines: lines[:3], "end of file"),
    (lambda lines: [lines[0], "vertices x"] + lines[2:], "bad count"),
    (lambda lines: [lines[0], lines[1], "0.0"] + lines[3:], "two coordinates"),
    (lambda lines: [lines[0], lines[1], "0.0 nope"] + lines[3:], "bad coordinate"),
])
def test_read_reports_malformed_files(tmp_path, mutate, needle):
    m = build_rect_two_domain(2, 2, 0.5)
    path = tmp_path / "mesh.txt"
    write_mesh(m, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(mutate(lines)) + "\n")
    with pytest.raises(MeshFormatError) as err:
        read_mesh(path)
    assert needle in str(err.value)


def test_read_reports_unknown_tags(tmp_path):
    m = build_rect_two_domain(2, 2, 0.5)
    path = tmp_path / "mesh.txt"
    write_mesh(m, path)
    text = path.read_text().replace("PoroSolid", "Bedrock", 1)
    path.write_text(text)
    with pytest.raises(MeshFormatError) as err:
        read_mesh(path)
    assert "Bedrock" in str(err.value)


def test_read_rejects_trailing_content(tmp_path):
    m = build_rect_two_domain(2, 2, 0.5)
    path = tmp_path / "mesh.txt"
    write_mesh(m, path)
    with open(path, "a") as fh:
        fh.write("extra stuff\n")
    with pytest.raises(MeshFormatError):
        read_mesh(path)
