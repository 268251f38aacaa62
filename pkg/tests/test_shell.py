"""Discrete shell kinematics: fundamental forms, constraints, energy, meshes."""

import numpy as np
import pytest

from yarnshell.errors import DegenerateElementError, InvalidInputError, InvalidModuliError
from yarnshell.shell import (
    ShellParams,
    TriangleShellMesh,
    cylinder_mesh,
    first_forms,
    flat_swatch_mesh,
    grid_triangles,
    load_mesh,
    moduli_from_stiffness,
    save_mesh,
    second_forms,
    shell_energy,
    sphere_band_mesh,
    stiffness_from_moduli,
)

RNG = np.random.default_rng(11)


def default_params(**over):
    base = dict(s00=2e5, s01=3e4, s11=1.5e5, s22=2e4,
                b00=5e3, b11=4e3, b22=1e3, h=5e-4)
    base.update(over)
    return ShellParams(**base)


def random_rotation(rng):
    A = rng.normal(size=(3, 3))
    Q, _ = np.linalg.qr(A)
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


# ---------------------------------------------------------------------------
# rest state and invariances


def test_flat_rest_forms():
    mesh = flat_swatch_mesh(0.1, 0.08, 6, 5)
    I = first_forms(mesh, mesh.vertices)
    assert np.allclose(I, np.broadcast_to(np.eye(2), I.shape), atol=1e-12)
    II = second_forms(mesh, mesh.vertices)
    assert np.allclose(II, 0.0, atol=1e-12)


def test_cut_angle_rest_identity():
    """A rotated material frame still sees the flat swatch as rest."""
    mesh = flat_swatch_mesh(0.1, 0.08, 6, 5, cut_angle=np.deg2rad(45.0))
    I = first_forms(mesh, mesh.vertices)
    assert np.allclose(I, np.broadcast_to(np.eye(2), I.shape), atol=1e-12)


def test_rigid_motion_invariance():
    mesh = flat_swatch_mesh(0.1, 0.08, 5, 4)
    x = mesh.vertices + 0.01 * RNG.normal(size=mesh.vertices.shape)
    R = random_rotation(RNG)
    t = np.array([0.3, -0.2, 0.7])
    moved = x @ R.T + t
    assert np.allclose(first_forms(mesh, x), first_forms(mesh, moved), atol=1e-12)
    assert np.allclose(second_forms(mesh, x), second_forms(mesh, moved), atol=1e-9)
    p = default_params()
    assert shell_energy(mesh, x, p) == pytest.approx(
        shell_energy(mesh, moved, p), rel=1e-10)


def test_uniform_scale_first_form():
    mesh = flat_swatch_mesh(0.1, 0.08, 4, 4)
    I = first_forms(mesh, 2.0 * mesh.vertices)
    assert np.allclose(I, 4.0 * np.broadcast_to(np.eye(2), I.shape), atol=1e-12)


def test_energy_linear_in_stiffness():
    mesh = flat_swatch_mesh(0.1, 0.08, 5, 4)
    x = mesh.vertices + 0.005 * RNG.normal(size=mesh.vertices.shape)
    p1 = default_params()
    p2 = default_params(s00=4e5, s01=6e4, s11=3e5, s22=4e4,
                        b00=1e4, b11=8e3, b22=2e3)
    e1 = shell_energy(mesh, x, p1)
    e2 = shell_energy(mesh, x, p2)
    assert e2 == pytest.approx(2.0 * e1, rel=1e-12)
    assert e1 > 0.0


def test_energy_zero_at_rest():
    mesh = flat_swatch_mesh(0.1, 0.08, 5, 4)
    assert shell_energy(mesh, mesh.vertices, default_params()) == 0.0


# ---------------------------------------------------------------------------
# curvature on analytic surfaces


def interior_triangles(mesh):
    """Triangles whose edges all have a neighboring triangle."""
    inner = []
    for t, nbrs in enumerate(mesh.neighbors):
        if all(n >= 0 for n in nbrs):
            inner.append(t)
    return np.array(inner)


def test_cylinder_second_form():
    R = 0.05
    mesh = cylinder_mesh(R, 0.05, 32, 8)
    II = second_forms(mesh, mesh.vertices)
    target = np.diag([1.0 / R, 0.0])
    inner = interior_triangles(mesh)
    err = np.abs(II[inner] - target).max() / (1.0 / R)
    assert err < 0.01


def test_sphere_band_mean_curvature():
    R = 0.05
    mesh = sphere_band_mesh(R, 32)
    II = second_forms(mesh, mesh.vertices)
    I = first_forms(mesh, mesh.vertices)
    inner = interior_triangles(mesh)
    # mean curvature H = 1/2 tr(I^-1 II) = 1/R on the sphere
    H = np.array([
        0.5 * np.trace(np.linalg.solve(I[t], II[t])) for t in inner
    ])
    assert np.abs(H * R - 1.0).max() < 0.06


# ---------------------------------------------------------------------------
# parameters and stiffness conversions


def test_shellparams_validation():
    with pytest.raises(InvalidInputError):
        default_params(s01=1e6)  # breaks s00*s11 > s01^2
    with pytest.raises(InvalidInputError):
        default_params(h=0.0)
    with pytest.raises(InvalidInputError):
        default_params(b00=-1.0)


def test_shellparams_dict_roundtrip():
    p = default_params(b01=123.0)
    q = ShellParams.from_dict(p.as_dict())
    assert q == p


def test_moduli_roundtrip():
    S = stiffness_from_moduli(2e5, 1.5e5, 0.3, 0.3 * 1.5e5 / 2e5, 3e4)
    Et, Ep, nu_tp, nu_pt, mu = moduli_from_stiffness(S)
    S2 = stiffness_from_moduli(Et, Ep, nu_tp, nu_pt, mu)
    assert np.allclose(S, S2, rtol=1e-12)


def test_moduli_reciprocity_enforced():
    with pytest.raises(InvalidModuliError):
        stiffness_from_moduli(2e5, 1.5e5, 0.3, 0.1, 3e4)


# ---------------------------------------------------------------------------
# meshes


def test_grid_triangle_count_and_orientation():
    nx, ny = 5, 3
    tris = grid_triangles(nx, ny)
    assert len(tris) == 2 * nx * ny
    mesh = flat_swatch_mesh(0.1, 0.06, nx, ny)
    # consistent orientation: all normals point the same way on a flat sheet
    v = mesh.vertices
    n = np.cross(v[mesh.triangles[:, 1]] - v[mesh.triangles[:, 0]],
                 v[mesh.triangles[:, 2]] - v[mesh.triangles[:, 0]])
    assert np.all(n[:, 2] > 0) or np.all(n[:, 2] < 0)


def test_degenerate_triangle_rejected():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])  # collinear
    verts = np.column_stack([coords, np.zeros(3)])
    with pytest.raises(DegenerateElementError):
        TriangleShellMesh.from_material_coords(verts, np.array([[0, 1, 2]]), coords)


def test_mesh_save_load_roundtrip(tmp_path):
    mesh = flat_swatch_mesh(0.1, 0.08, 4, 3, cut_angle=0.3)
    deformed = mesh.vertices + 0.01 * RNG.normal(size=mesh.vertices.shape)
    p = tmp_path / "swatch.obj"
    save_mesh(mesh, str(p), deformed=deformed)
    back, back_deformed = load_mesh(str(p))
    assert np.allclose(back.vertices, mesh.vertices, atol=1e-12)
    assert np.allclose(back_deformed, deformed, atol=1e-9)
    assert np.array_equal(back.triangles, mesh.triangles)
    # rest forms survive the round trip, so energies agree
    params = default_params()
    assert shell_energy(back, back_deformed, params) == pytest.approx(
        shell_energy(mesh, deformed, params), rel=1e-8)


def test_cylinder_mesh_material_chord_factor():
    """Discrete cylinder first form: chords shorten arcs by sinc(dtheta/2)^2."""
    n_theta = 24
    mesh = cylinder_mesh(0.05, 0.05, n_theta, 6)
    I = first_forms(mesh, mesh.vertices)
    half = 0.5 * np.pi / n_theta
    chord = (np.sin(half) / half) ** 2
    expected = np.diag([chord, 1.0])
    assert np.allclose(I, np.broadcast_to(expected, I.shape), atol=1e-6)
