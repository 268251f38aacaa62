"""Discrete Cosserat rod model for yarns.

A yarn is a polyline of points with one orientation quaternion per edge.
Stretch/shear couples an edge to its frame's third director; bend/twist
couples adjacent frames through the modified Darboux vector.  Energies are
quadratic forms over these constraint vectors.
"""

from dataclasses import dataclass, field

import numpy as np

from . import quaternion as quat
from .errors import InvalidInputError, SingularConfigurationError

UNIT_NORM_TOL = 1e-6
DARBOUX_SINGULAR_TOL = 1e-6


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class RodStiffness:
    """Diagonal stiffness blocks of a single rod edge/joint.

    stretch_shear holds diag(EA, EA, EA) * l0, bend_twist holds
    diag(E*I1, E*I2, G*I3) * l0 with I1 = I2 = pi r^4 / 4 and I3 = pi r^4 / 2.
    """

    stretch_shear: np.ndarray
    bend_twist: np.ndarray

    def __post_init__(self):
        for name in ("stretch_shear", "bend_twist"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (3, 3):
                raise InvalidInputError(f"{name} must be 3x3")
            if np.any(np.diag(m) <= 0):
                raise InvalidInputError(f"{name} diagonal must be strictly positive")
            if np.any(m - np.diag(np.diag(m)) != 0):
                raise InvalidInputError(f"{name} must be diagonal")
            object.__setattr__(self, name, m)


@dataclass
class RodState:
    """Discretized yarns: point positions, per-edge frames, rest quantities.

    yarn_points lists, per yarn, the indices of its points in order.  Edges
    and interior joints are derived from it.  rest_darboux has one row per
    interior joint (edge count - 1 per yarn).  rest_stretch is the per-edge
    rest value of the stretch-shear constraint (nonzero after relaxation:
    frames tilt against the centerline where yarns bend around each other,
    and that equilibrium shear belongs to the stress-free state).
    """

    points: np.ndarray
    frames: np.ndarray
    rest_lengths: np.ndarray
    rest_darboux: np.ndarray
    yarn_points: list = field(default_factory=list)
    rest_stretch: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.frames = np.asarray(self.frames, dtype=float).reshape(-1, 4)
        self.rest_lengths = np.asarray(self.rest_lengths, dtype=float).reshape(-1)
        self.rest_darboux = np.asarray(self.rest_darboux, dtype=float).reshape(-1, 3)
        if self.rest_stretch is None:
            self.rest_stretch = np.zeros((self.frames.shape[0], 3))
        self.rest_stretch = np.asarray(self.rest_stretch, dtype=float).reshape(-1, 3)
        if self.rest_stretch.shape[0] != self.frames.shape[0]:
            raise InvalidInputError("rest_stretch count != edge count")
        self.yarn_points = [np.asarray(y, dtype=int) for y in self.yarn_points]
        n_edges = sum(len(y) - 1 for y in self.yarn_points)
        n_joints = sum(len(y) - 2 for y in self.yarn_points)
        if self.frames.shape[0] != n_edges:
            raise InvalidInputError(
                f"frame count {self.frames.shape[0]} != edge count {n_edges}"
            )
        if self.rest_lengths.shape[0] != n_edges:
            raise InvalidInputError("rest_lengths count != edge count")
        if self.rest_darboux.shape[0] != n_joints:
            raise InvalidInputError("rest_darboux count != interior joint count")
        if np.any(self.rest_lengths <= 0):
            raise InvalidInputError("rest_lengths must be strictly positive")

    # -- derived topology ---------------------------------------------------

    @property
    def n_points(self):
        return self.points.shape[0]

    @property
    def n_edges(self):
        return self.frames.shape[0]

    @property
    def edges(self):
        """(m, 2) array of point indices per edge."""
        rows = []
        for y in self.yarn_points:
            rows.append(np.stack([y[:-1], y[1:]], axis=1))
        return np.concatenate(rows) if rows else np.empty((0, 2), dtype=int)

    @property
    def joints(self):
        """(k, 2) array of adjacent edge indices per interior joint."""
        rows = []
        base = 0
        for y in self.yarn_points:
            ne = len(y) - 1
            idx = base + np.arange(ne - 1)
            rows.append(np.stack([idx, idx + 1], axis=1))
            base += ne
        return np.concatenate(rows) if rows else np.empty((0, 2), dtype=int)

    @property
    def edge_yarn(self):
        out = []
        for i, y in enumerate(self.yarn_points):
            out.extend([i] * (len(y) - 1))
        return np.asarray(out, dtype=int)

    def yarn_edges(self, yarn):
        """Edge indices belonging to one yarn, in order."""
        base = 0
        for i, y in enumerate(self.yarn_points):
            ne = len(y) - 1
            if i == yarn:
                return base + np.arange(ne)
            base += ne
        raise InvalidInputError(f"no yarn {yarn}")

    def total_rest_length(self):
        return float(np.sum(self.rest_lengths))

    def copy(self):
        return RodState(
            self.points.copy(),
            self.frames.copy(),
            self.rest_lengths.copy(),
            self.rest_darboux.copy(),
            [y.copy() for y in self.yarn_points],
            rest_stretch=self.rest_stretch.copy(),
        )


# ---------------------------------------------------------------------------
# Elementary operations


def rotation_from_quaternion(q):
    """Rotation matrix of a unit quaternion; columns are the directors."""
    q = np.asarray(q, dtype=float)
    if abs(np.linalg.norm(q) - 1.0) > UNIT_NORM_TOL:
        raise InvalidInputError("quaternion is not unit norm")
    return quat.rotation_matrix_unchecked(q)


def stretch_shear_constraint(p_i, p_next, q, l0):
    """(p_next - p_i)/l0 - R(q) e3; zero at rest length along the director."""
    if l0 <= 0:
        raise InvalidInputError("l0 must be positive")
    R = rotation_from_quaternion(q)
    return (np.asarray(p_next, dtype=float) - np.asarray(p_i, dtype=float)) / l0 - R[:, 2]


def darboux_vector(q_i, q_next, l0):
    """Modified Darboux vector (2/l0) Im(conj(q_i) q_next) / Re(...)."""
    u = quat.multiply(quat.conjugate(q_i), q_next)
    if abs(u[0]) < DARBOUX_SINGULAR_TOL:
        raise SingularConfigurationError("adjacent frames are nearly opposite")
    return (2.0 / l0) * u[1:] / u[0]


def bend_twist_constraint(q_i, q_next, l0, rest_darboux):
    """Darboux deviation from rest; components 0,1 bend, component 2 twist."""
    for q in (q_i, q_next):
        if abs(np.linalg.norm(q) - 1.0) > UNIT_NORM_TOL:
            raise InvalidInputError("quaternion is not unit norm")
    return darboux_vector(q_i, q_next, l0) - np.asarray(rest_darboux, dtype=float)


def rod_stiffness(E, G, r, l0):
    """Stiffness blocks of a circular cross-section edge.

    Uses I1 = I2 = pi r^4 / 4 and I3 = pi r^4 / 2 (fourth power; the
    dimensionally consistent second area moments).
    """
    if min(E, G, r, l0) <= 0:
        raise InvalidInputError("E, G, r, l0 must be positive")
    A = np.pi * r * r
    I1 = 0.25 * np.pi * r**4
    I3 = 0.5 * np.pi * r**4
    return RodStiffness(
        stretch_shear=np.diag([E * A, E * A, E * A]) * l0,
        bend_twist=np.diag([E * I1, E * I1, G * I3]) * l0,
    )


def biphasic_modulus(strain, k1, k2):
    """Strain-dependent effective Young's modulus.

    k1 governs the compressive branch, k2 the tensile branch; the modulus
    vanishes at zero strain, making the axial force quadratic in strain.
    """
    strain = np.asarray(strain, dtype=float)
    out = np.where(strain < 0, k1 * strain, k2 * strain)
    if out.ndim == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# Patch-level stiffness


@dataclass
class PatchStiffness:
    """Per-edge and per-joint diagonal stiffness entries.

    stretch is (m, 3) holding EA*l0 per edge; bend is (k, 3) holding
    (E I1, E I2, G I3)*l0 per interior joint.
    """

    stretch: np.ndarray
    bend: np.ndarray

    def __post_init__(self):
        self.stretch = np.asarray(self.stretch, dtype=float).reshape(-1, 3)
        self.bend = np.asarray(self.bend, dtype=float).reshape(-1, 3)


def uniform_patch_stiffness(state, E, G, r):
    """PatchStiffness with one modulus for every edge of the patch."""
    A = np.pi * r * r
    I1 = 0.25 * np.pi * r**4
    I3 = 0.5 * np.pi * r**4
    l0 = state.rest_lengths
    stretch = np.outer(l0, [E * A, E * A, E * A])
    joints = state.joints
    lj = l0[joints[:, 0]] if len(joints) else np.empty(0)
    bend = np.outer(lj, [E * I1, E * I1, G * I3])
    return PatchStiffness(stretch, bend)


def biphasic_edge_moduli(state, k1, k2, floor_fraction=1e-3):
    """Per-edge effective modulus magnitude at current strains, floored."""
    eps = edge_strains(state)
    E = np.abs(biphasic_modulus(eps, k1, k2))
    return np.maximum(E, floor_fraction * k2)


def biphasic_patch_stiffness(state, k1, k2, nu, r, floor_fraction=1e-3):
    """PatchStiffness from the biphasic modulus at current edge strains.

    The effective modulus magnitude |k * strain| is floored at
    floor_fraction * k2 so the rest state keeps a well-posed stiffness.
    """
    E = biphasic_edge_moduli(state, k1, k2, floor_fraction)
    G = E / (2.0 * (1.0 + nu))
    A = np.pi * r * r
    I1 = 0.25 * np.pi * r**4
    I3 = 0.5 * np.pi * r**4
    l0 = state.rest_lengths
    stretch = (E * A * l0)[:, None] * np.ones(3)
    joints = state.joints
    if len(joints):
        Ej = 0.5 * (E[joints[:, 0]] + E[joints[:, 1]])
        Gj = Ej / (2.0 * (1.0 + nu))
        lj = l0[joints[:, 0]]
        bend = np.stack([Ej * I1 * lj, Ej * I1 * lj, Gj * I3 * lj], axis=1)
    else:
        bend = np.empty((0, 3))
    return PatchStiffness(stretch, bend)


# ---------------------------------------------------------------------------
# Vectorized constraint evaluation (used by energies and the solver)


def _normalized_frames(frames):
    n = np.linalg.norm(frames, axis=1)
    return frames / n[:, None], n


def edge_constraints(state, frames_normalized=None):
    """Stretch-shear constraint vectors for all edges, shape (m, 3)."""
    qn = _normalized_frames(state.frames)[0] if frames_normalized is None else frames_normalized
    e = state.edges
    dp = state.points[e[:, 1]] - state.points[e[:, 0]]
    return dp / state.rest_lengths[:, None] - quat.d3(qn) - state.rest_stretch


def joint_constraints(state, frames_normalized=None):
    """Bend-twist constraint vectors for all interior joints, shape (k, 3)."""
    qn = _normalized_frames(state.frames)[0] if frames_normalized is None else frames_normalized
    j = state.joints
    if len(j) == 0:
        return np.empty((0, 3))
    u = quat.multiply(quat.conjugate(qn[j[:, 0]]), qn[j[:, 1]])
    if np.any(np.abs(u[:, 0]) < DARBOUX_SINGULAR_TOL):
        raise SingularConfigurationError("adjacent frames are nearly opposite")
    l0 = state.rest_lengths[j[:, 0]]
    return (2.0 / l0)[:, None] * u[:, 1:] / u[:, :1] - state.rest_darboux


def edge_strains(state):
    """Axial strain per edge: d3 . (p_next - p_i)/l0 - 1."""
    qn = _normalized_frames(state.frames)[0]
    e = state.edges
    dp = state.points[e[:, 1]] - state.points[e[:, 0]]
    return np.einsum("ij,ij->i", quat.d3(qn), dp / state.rest_lengths[:, None]) - 1.0


def yarn_energy(state, stiffness):
    """Total elastic energy of all yarns (stretch/shear + bend/twist)."""
    qn = _normalized_frames(state.frames)[0]
    cs = edge_constraints(state, qn)
    cb = joint_constraints(state, qn)
    e_s = 0.5 * np.sum(stiffness.stretch * cs * cs)
    e_b = 0.5 * np.sum(stiffness.bend * cb * cb)
    return float(e_s + e_b)


def yarn_energy_gradient(state, stiffness):
    """Analytic gradient of yarn_energy.

    Returns (grad_points (n,3), grad_frames (m,4)).  The frame gradient is
    the gradient with respect to the raw 4-vector components of frames whose
    energy is evaluated on normalized quaternions, hence it is automatically
    tangent to the unit sphere at unit-norm frames.
    """
    qn, nrm = _normalized_frames(state.frames)
    e = state.edges
    j = state.joints
    m = state.n_edges

    grad_p = np.zeros_like(state.points)
    grad_qn = np.zeros((m, 4))

    # stretch/shear
    cs = edge_constraints(state, qn)
    ws = stiffness.stretch * cs  # (m,3)
    inv_l0 = 1.0 / state.rest_lengths
    np.add.at(grad_p, e[:, 0], -ws * inv_l0[:, None])
    np.add.at(grad_p, e[:, 1], ws * inv_l0[:, None])
    J3 = quat.d3_jacobian(qn)  # (m,3,4)
    grad_qn -= np.einsum("mij,mi->mj", J3, ws)

    # bend/twist
    if len(j):
        qa, qb = qn[j[:, 0]], qn[j[:, 1]]
        u = quat.multiply(quat.conjugate(qa), qb)
        l0 = state.rest_lengths[j[:, 0]]
        cb = (2.0 / l0)[:, None] * u[:, 1:] / u[:, :1] - state.rest_darboux
        wb = stiffness.bend * cb  # (k,3)
        # dU/du for u = conj(qa) qb
        du = np.empty((len(j), 4))
        du[:, 0] = -(2.0 / l0) * np.einsum("ki,ki->k", wb, u[:, 1:]) / u[:, 0] ** 2
        du[:, 1:] = (2.0 / l0)[:, None] * wb / u[:, :1]
        # u = L(conj(qa)) qb  and  u = R(qb) C qa with C = diag(1,-1,-1,-1)
        La = _batch_left_conj(qa)  # (k,4,4): L(conj(qa))
        Rb = _batch_right(qb)  # (k,4,4)
        g_qb = np.einsum("kij,ki->kj", La, du)
        g_qa = np.einsum("kij,ki->kj", Rb, du)
        g_qa[:, 1:] *= -1.0
        np.add.at(grad_qn, j[:, 0], g_qa)
        np.add.at(grad_qn, j[:, 1], g_qb)

    # chain through normalization: d(q/|q|)/dq = (I - qn qn^T)/|q|
    dot = np.einsum("mi,mi->m", grad_qn, qn)
    grad_q = (grad_qn - dot[:, None] * qn) / nrm[:, None]
    return grad_p, grad_q


def _batch_left_conj(q):
    """L(conj(q)) for a batch of quaternions, shape (k,4,4)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    k = len(q)
    L = np.empty((k, 4, 4))
    L[:, 0] = np.stack([w, x, y, z], axis=1)
    L[:, 1] = np.stack([-x, w, z, -y], axis=1)
    L[:, 2] = np.stack([-y, -z, w, x], axis=1)
    L[:, 3] = np.stack([-z, y, -x, w], axis=1)
    return L


def _batch_right(q):
    """R(q) such that R(q) a = a*q, for a batch, shape (k,4,4)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    k = len(q)
    R = np.empty((k, 4, 4))
    R[:, 0] = np.stack([w, -x, -y, -z], axis=1)
    R[:, 1] = np.stack([x, w, z, -y], axis=1)
    R[:, 2] = np.stack([y, -z, w, x], axis=1)
    R[:, 3] = np.stack([z, y, -x, w], axis=1)
    return R
