"""Discrete Kirchhoff-Love shell quantities on triangle meshes.

Each triangle carries a 2x2 material edge matrix ``dm`` mapping its local
2-D material coordinates to the two rest edge vectors; the deformation
Jacobian of a triangle is J = Ds dm^-1 with Ds the deformed 3x2 edge
matrix.  The first fundamental form is J^T J.  The second fundamental form
uses mid-edge averaged normals: the normal field is interpolated linearly
from the three edge midpoints, whose material positions relative to the
first midpoint are exactly -dm/2, giving the closed form
G = -2 [n1-n0, n2-n0] dm^-1 and II = sym(J^T G).

All experiments assume a flat rest shape, so the rest second form is zero
and, for meshes built from an isometric material parametrization, the rest
first form is the identity.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateElementError,
    InvalidInputError,
    InvalidModuliError,
)

_DEGENERATE_REL = 1e-12


@dataclass
class ShellParams:
    """Fitted orthotropic thin-shell stiffness.

    Membrane entries (Pa) form the matrix [[s00, s01, 0], [s01, s11, 0],
    [0, 0, s22]]; bending entries are stored without the h^3 factor, which
    is applied at assembly.  ``b01`` is the optional warp-weft bending
    coupling (zero for the diagonal bending model).
    """

    s00: float
    s01: float
    s11: float
    s22: float
    b00: float
    b11: float
    b22: float
    h: float
    b01: float = 0.0

    def __post_init__(self):
        if not (self.s00 > 0.0 and self.s11 > 0.0 and self.s22 > 0.0):
            raise InvalidInputError("membrane diagonal entries must be positive")
        if self.s00 * self.s11 - self.s01**2 <= 0.0:
            raise InvalidInputError("membrane block must be SPD: s00*s11 - s01^2 > 0")
        if min(self.b00, self.b11, self.b22) < 0.0:
            raise InvalidInputError("bending entries must be non-negative")
        if self.b00 * self.b11 - self.b01**2 < 0.0:
            raise InvalidInputError("bending block must be PSD: b00*b11 - b01^2 >= 0")
        if not self.h > 0.0:
            raise InvalidInputError("thickness h must be positive")

    @property
    def membrane_matrix(self):
        return np.array(
            [
                [self.s00, self.s01, 0.0],
                [self.s01, self.s11, 0.0],
                [0.0, 0.0, self.s22],
            ]
        )

    @property
    def bending_matrix(self):
        return np.array(
            [
                [self.b00, self.b01, 0.0],
                [self.b01, self.b11, 0.0],
                [0.0, 0.0, self.b22],
            ]
        )

    def as_dict(self):
        return {
            "s00": self.s00,
            "s01": self.s01,
            "s11": self.s11,
            "s22": self.s22,
            "b00": self.b00,
            "b01": self.b01,
            "b11": self.b11,
            "b22": self.b22,
            "h": self.h,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            s00=d["s00"], s01=d["s01"], s11=d["s11"], s22=d["s22"],
            b00=d["b00"], b11=d["b11"], b22=d["b22"], h=d["h"],
            b01=d.get("b01", 0.0),
        )


def _triangle_dm(material_coords, triangles):
    X = material_coords
    t = triangles
    return np.stack(
        [X[t[:, 1]] - X[t[:, 0]], X[t[:, 2]] - X[t[:, 0]]], axis=-1
    )


def _local_flatten(vertices, triangles):
    """Per-triangle material edge matrix from a local isometric flattening."""
    e1 = vertices[triangles[:, 1]] - vertices[triangles[:, 0]]
    e2 = vertices[triangles[:, 2]] - vertices[triangles[:, 0]]
    l1 = np.linalg.norm(e1, axis=1)
    if np.any(l1 <= 0.0):
        raise DegenerateElementError("zero-length triangle edge")
    u = e1 / l1[:, None]
    a = np.einsum("ij,ij->i", e2, u)
    perp = e2 - a[:, None] * u
    b = np.linalg.norm(perp, axis=1)
    dm = np.zeros((len(triangles), 2, 2))
    dm[:, 0, 0] = l1
    dm[:, 0, 1] = a
    dm[:, 1, 1] = b
    return dm


def _edge_neighbors(triangles):
    """For each triangle, the index of the triangle across each edge (-1 on
    the boundary).  Edge i is the edge opposite local vertex i."""
    owners = {}
    for ti, (a, b, c) in enumerate(triangles):
        for li, (p, q) in enumerate(((b, c), (c, a), (a, b))):
            key = (min(p, q), max(p, q))
            owners.setdefault(key, []).append((ti, li))
    for key, lst in owners.items():
        if len(lst) > 2:
            raise InvalidInputError(
                f"non-manifold edge {key}: shared by {len(lst)} triangles"
            )
    neighbors = -np.ones((len(triangles), 3), dtype=int)
    for lst in owners.values():
        if len(lst) == 2:
            (t0, l0), (t1, l1) = lst
            neighbors[t0, l0] = t1
            neighbors[t1, l1] = t0
    return neighbors


@dataclass
class TriangleShellMesh:
    """Triangle mesh with per-triangle rest material data.

    ``dm`` holds the material edge matrix per triangle; ``rest_forms`` are
    the rest first fundamental forms (identity when the rest shape is an
    isometric embedding of the material domain).  The rest second form is
    zero (flat rest shape).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    dm: np.ndarray
    rest_forms: np.ndarray = None
    material_coords: np.ndarray = None
    neighbors: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=int)
        self.dm = np.asarray(self.dm, dtype=float)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise InvalidInputError("vertices must be (n, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise InvalidInputError("triangles must be (m, 3)")
        det = np.linalg.det(self.dm)
        scale = np.abs(self.dm).max()
        if np.any(np.abs(det) <= _DEGENERATE_REL * scale**2):
            raise DegenerateElementError("degenerate material triangle (zero area)")
        self.dm_inv = np.linalg.inv(self.dm)
        self.rest_areas = 0.5 * np.abs(det)
        if self.rest_forms is None:
            self.rest_forms = first_forms(self, self.vertices)
        else:
            self.rest_forms = np.asarray(self.rest_forms, dtype=float)
        rdet = np.linalg.det(self.rest_forms)
        if np.any(rdet <= 0.0) or np.any(self.rest_forms[:, 0, 0] <= 0.0):
            raise DegenerateElementError("rest first forms must be SPD")
        self.rest_form_inv = np.linalg.inv(self.rest_forms)
        if self.neighbors is None:
            self.neighbors = _edge_neighbors(self.triangles)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @classmethod
    def from_material_coords(cls, vertices, triangles, material_coords):
        """Mesh whose material domain is a shared 2-D parametrization."""
        material_coords = np.asarray(material_coords, dtype=float)
        triangles = np.asarray(triangles, dtype=int)
        dm = _triangle_dm(material_coords, triangles)
        return cls(
            vertices=vertices,
            triangles=triangles,
            dm=dm,
            material_coords=material_coords,
        )

    @classmethod
    def from_surface(cls, vertices, triangles):
        """Mesh whose material coordinates are a per-triangle isometric
        flattening of the rest geometry (rest first form = identity)."""
        triangles = np.asarray(triangles, dtype=int)
        dm = _local_flatten(np.asarray(vertices, dtype=float), triangles)
        return cls(vertices=vertices, triangles=triangles, dm=dm)

    def copy(self):
        return TriangleShellMesh(
            vertices=self.vertices.copy(),
            triangles=self.triangles.copy(),
            dm=self.dm.copy(),
            rest_forms=self.rest_forms.copy(),
            material_coords=(
                None if self.material_coords is None else self.material_coords.copy()
            ),
            neighbors=self.neighbors.copy(),
        )


# ---------------------------------------------------------------------------
# Fundamental forms


def _deformed_jacobians(mesh, deformed):
    t = mesh.triangles
    ds = np.stack(
        [deformed[t[:, 1]] - deformed[t[:, 0]], deformed[t[:, 2]] - deformed[t[:, 0]]],
        axis=-1,
    )
    return ds @ mesh.dm_inv


def first_forms(mesh, deformed):
    """First fundamental form J^T J per triangle, (m, 2, 2)."""
    J = _deformed_jacobians(mesh, np.asarray(deformed, dtype=float))
    I = np.einsum("tik,til->tkl", J, J)
    det = np.linalg.det(I)
    scale = np.abs(I).max()
    if scale == 0.0 or np.any(det <= _DEGENERATE_REL * scale**2):
        raise DegenerateElementError("degenerate deformed triangle (zero area)")
    return I


def first_form(x0, x1, x2, dm):
    """Single-triangle first fundamental form."""
    ds = np.stack([np.subtract(x1, x0), np.subtract(x2, x0)], axis=-1)
    J = ds @ np.linalg.inv(dm)
    I = J.T @ J
    if np.linalg.det(I) <= _DEGENERATE_REL * max(np.abs(I).max(), 1e-300) ** 2:
        raise DegenerateElementError("degenerate deformed triangle (zero area)")
    return I


def triangle_normals(mesh, deformed):
    t = mesh.triangles
    e1 = deformed[t[:, 1]] - deformed[t[:, 0]]
    e2 = deformed[t[:, 2]] - deformed[t[:, 0]]
    n = np.cross(e1, e2)
    norm = np.linalg.norm(n, axis=1)
    if np.any(norm <= 0.0):
        raise DegenerateElementError("degenerate deformed triangle (zero normal)")
    return n / norm[:, None]


def _mid_edge_normals(mesh, tri_normals):
    """Averaged unit normal at each edge midpoint, (m, 3 edges, 3).

    Edge i of a triangle is the edge opposite local vertex i; boundary
    edges use the element's own normal (free boundary)."""
    nb = mesh.neighbors
    own = np.repeat(tri_normals[:, None, :], 3, axis=1)
    other = np.where(
        (nb >= 0)[:, :, None], tri_normals[np.clip(nb, 0, None)], own
    )
    avg = own + other
    norm = np.linalg.norm(avg, axis=2)
    return avg / norm[:, :, None]


def second_forms(mesh, deformed):
    """Discrete second fundamental form per triangle via mid-edge averaged
    normals, (m, 2, 2).  Zero for any planar configuration."""
    deformed = np.asarray(deformed, dtype=float)
    J = _deformed_jacobians(mesh, deformed)
    nmid = _mid_edge_normals(mesh, triangle_normals(mesh, deformed))
    # midpoint material offsets are -dm/2, so the linear normal field has
    # gradient G = -2 [n1-n0, n2-n0] dm^-1
    dn = np.stack([nmid[:, 1] - nmid[:, 0], nmid[:, 2] - nmid[:, 0]], axis=-1)
    G = -2.0 * dn @ mesh.dm_inv
    JtG = np.einsum("tik,til->tkl", J, G)
    return 0.5 * (JtG + np.transpose(JtG, (0, 2, 1)))


def second_form(mesh, deformed, tri):
    """Single-triangle discrete second fundamental form."""
    return second_forms(mesh, deformed)[tri]


# ---------------------------------------------------------------------------
# Strain constraints and stiffness


def _relative_strain(form, rest_form, rest_form_inv):
    return rest_form_inv @ (form - rest_form)


def membrane_constraint(I, I_rest, area):
    """sqrt(A) * (Itt, Ipp, Itp) of the relative strain I_rest^-1 (I - I_rest)."""
    I_rest = np.asarray(I_rest, dtype=float)
    if abs(np.linalg.det(I_rest)) <= _DEGENERATE_REL * max(np.abs(I_rest).max(), 1e-300) ** 2:
        raise DegenerateElementError("singular rest first form")
    S = np.linalg.inv(I_rest) @ (np.asarray(I, dtype=float) - I_rest)
    return np.sqrt(area) * np.array([S[0, 0], S[1, 1], S[0, 1]])


def bending_constraint(II, I_rest, area):
    """Same pattern for the second form; the rest second form is zero."""
    I_rest = np.asarray(I_rest, dtype=float)
    if abs(np.linalg.det(I_rest)) <= _DEGENERATE_REL * max(np.abs(I_rest).max(), 1e-300) ** 2:
        raise DegenerateElementError("singular rest first form")
    S = np.linalg.inv(I_rest) @ np.asarray(II, dtype=float)
    return np.sqrt(area) * np.array([S[0, 0], S[1, 1], S[0, 1]])


def stiffness_from_moduli(E_t, E_p, nu_tp, nu_pt, mu):
    """Membrane stiffness from orthotropic engineering moduli."""
    if not 1.0 - nu_tp * nu_pt > 0.0:
        raise InvalidInputError("requires 1 - nu_tp*nu_pt > 0")
    ref = max(abs(nu_pt * E_t), abs(nu_tp * E_p), 1e-300)
    if abs(nu_pt * E_t - nu_tp * E_p) > 1e-9 * ref:
        raise InvalidModuliError(
            "reciprocity violated: nu_pt*E_t != nu_tp*E_p "
            f"({nu_pt * E_t!r} vs {nu_tp * E_p!r})"
        )
    d = 1.0 / (1.0 - nu_tp * nu_pt)
    return np.array(
        [
            [d * E_t, d * nu_pt * E_t, 0.0],
            [d * nu_tp * E_p, d * E_p, 0.0],
            [0.0, 0.0, mu],
        ]
    )


def moduli_from_stiffness(S):
    """Inverse of stiffness_from_moduli: (E_t, E_p, nu_tp, nu_pt, mu)."""
    S = np.asarray(S, dtype=float)
    nu_pt = S[0, 1] / S[0, 0]
    nu_tp = S[1, 0] / S[1, 1]
    d = 1.0 - nu_tp * nu_pt
    return S[0, 0] * d, S[1, 1] * d, nu_tp, nu_pt, S[2, 2]


# ---------------------------------------------------------------------------
# Energy


def shell_constraints(mesh, deformed):
    """Batched membrane and bending constraint vectors, each (m, 3)."""
    I = first_forms(mesh, deformed)
    II = second_forms(mesh, deformed)
    rel_m = mesh.rest_form_inv @ (I - mesh.rest_forms)
    rel_b = mesh.rest_form_inv @ II
    sq = np.sqrt(mesh.rest_areas)[:, None]
    Cs = sq * np.stack([rel_m[:, 0, 0], rel_m[:, 1, 1], rel_m[:, 0, 1]], axis=1)
    Cb = sq * np.stack([rel_b[:, 0, 0], rel_b[:, 1, 1], rel_b[:, 0, 1]], axis=1)
    return Cs, Cb


def shell_energy(mesh, deformed, params):
    """Total shell energy sum of 0.5 Cs^T (h S) Cs + 0.5 Cb^T (h^3 B) Cb."""
    Cs, Cb = shell_constraints(mesh, deformed)
    S = params.h * params.membrane_matrix
    B = params.h**3 * params.bending_matrix
    return float(
        0.5 * np.einsum("ti,ij,tj->", Cs, S, Cs)
        + 0.5 * np.einsum("ti,ij,tj->", Cb, B, Cb)
    )


# ---------------------------------------------------------------------------
# Mesh generators


def grid_triangles(nx, ny):
    """Triangulated (nx x ny)-cell grid over (nx+1)(ny+1) vertices, with
    alternating diagonals for symmetry."""
    tris = []
    w = nx + 1
    for j in range(ny):
        for i in range(nx):
            a = j * w + i
            b = a + 1
            c = a + w
            d = c + 1
            if (i + j) % 2 == 0:
                tris.append((a, b, d))
                tris.append((a, d, c))
            else:
                tris.append((a, b, c))
                tris.append((b, d, c))
    return np.array(tris, dtype=int)


def flat_swatch_mesh(width, height, nx, ny, cut_angle=0.0):
    """Flat rectangular swatch in the xy-plane.

    ``cut_angle`` (radians) rotates the material frame relative to the
    swatch axes: material coordinates are R(-cut_angle) applied to the
    spatial (x, y), so at 45 degrees the warp/weft directions run along
    the swatch diagonals.
    """
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    c, s = np.cos(cut_angle), np.sin(cut_angle)
    R = np.array([[c, s], [-s, c]])
    material = vertices[:, :2] @ R.T
    return TriangleShellMesh.from_material_coords(
        vertices, grid_triangles(nx, ny), material
    )


def cylinder_mesh(radius, length, n_theta, n_axial, arc=np.pi):
    """Open cylindrical strip of the given arc, axis along y.

    The first material axis runs along the circumferential direction (arc
    length), so the analytic second form is diag(1/radius, 0).  Triangles
    are wound so normals point outward (away from the axis)."""
    thetas = np.linspace(-arc / 2.0, arc / 2.0, n_theta + 1)
    ys = np.linspace(0.0, length, n_axial + 1)
    T, Y = np.meshgrid(thetas, ys)
    vertices = np.stack(
        [radius * np.sin(T.ravel()), Y.ravel(), radius * np.cos(T.ravel())], axis=1
    )
    material = np.stack([radius * T.ravel(), Y.ravel()], axis=1)
    return TriangleShellMesh.from_material_coords(
        vertices, grid_triangles(n_theta, n_axial), material
    )


def sphere_band_mesh(radius, n, polar_center=np.pi / 4, extent=0.35):
    """Patch of a sphere sampled on a regular polar-angle grid.

    Material coordinates come from a per-triangle local flattening, so the
    rest first form is the identity and the analytic second form is
    (1/radius) * I.  A smooth structured parametrization keeps the mid-edge
    normal estimator pointwise convergent; subdivision meshes with
    irregular vertices do not converge pointwise under one-ring
    estimators."""
    phis = np.linspace(polar_center - extent, polar_center + extent, n + 1)
    ths = np.linspace(-extent, extent, n + 1)
    P, T = np.meshgrid(phis, ths)
    vertices = radius * np.stack(
        [
            np.sin(P.ravel()) * np.cos(T.ravel()),
            np.sin(P.ravel()) * np.sin(T.ravel()),
            np.cos(P.ravel()),
        ],
        axis=1,
    )
    tris = grid_triangles(n, n)
    e1 = vertices[tris[:, 1]] - vertices[tris[:, 0]]
    e2 = vertices[tris[:, 2]] - vertices[tris[:, 0]]
    outward = np.einsum("ij,ij->i", np.cross(e1, e2), vertices[tris[:, 0]])
    flip = outward < 0.0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return TriangleShellMesh.from_surface(vertices, tris)


# ---------------------------------------------------------------------------
# Mesh I/O: OBJ positions plus a JSON sidecar for the rest material data


def save_mesh(mesh, obj_path, deformed=None):
    pts = mesh.vertices if deformed is None else np.asarray(deformed)
    with open(obj_path, "w") as f:
        for p in pts:
            f.write(f"v {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    sidecar = {
        "rest_vertices": mesh.vertices.tolist(),
        "dm": mesh.dm.tolist(),
        "rest_forms": mesh.rest_forms.tolist(),
        "material_coords": (
            None if mesh.material_coords is None else mesh.material_coords.tolist()
        ),
    }
    with open(str(obj_path) + ".json", "w") as f:
        json.dump(sidecar, f)


def load_mesh(obj_path):
    verts = []
    tris = []
    with open(obj_path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    deformed = np.array(verts)
    with open(str(obj_path) + ".json") as f:
        sidecar = json.load(f)
    mesh = TriangleShellMesh(
        vertices=np.array(sidecar["rest_vertices"]),
        triangles=np.array(tris, dtype=int),
        dm=np.array(sidecar["dm"]),
        rest_forms=np.array(sidecar["rest_forms"]),
        material_coords=(
            None
            if sidecar.get("material_coords") is None
            else np.array(sidecar["material_coords"])
        ),
    )
    return mesh, deformed
