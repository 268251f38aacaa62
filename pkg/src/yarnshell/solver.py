"""Quasi-static yarn patch solver.

Minimizes total yarn energy subject to hard homogenization constraints,
periodic seam couplings, and unilateral contacts.  The elastic energy is a
sum of weighted squared constraint vectors, so each inner solve is a
Gauss-Newton least-squares problem; hard constraints enter through an
augmented-Lagrangian outer loop, with position-linear rows (RVE sums, seam
couplings, centroid pinning) eliminated exactly through a null-space
parameterization.
"""

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import least_squares
from scipy.spatial import cKDTree

from . import quaternion as quat
from . import rod
from .errors import ContactError, ConvergenceError, InvalidInputError
from .pattern import estimate_yarn_radius
from .rod import PatchStiffness, RodState

CONTACT_MARGIN_FACTOR = 0.5  # broadphase margin as a fraction of the radius
TOPOLOGICAL_EXCLUSION = 2  # neighbor edges along a yarn never collide


# ---------------------------------------------------------------------------
# Configuration and constraint containers


@dataclass
class SolverConfig:
    max_outer_iters: int = 500
    max_inner_iters: int = 50
    position_tol: float = 1e-6
    constraint_tol: float = 1e-8  # relative to the characteristic length
    contact_thickness: float = 0.0  # minimal separation (2 * yarn radius)
    friction: float = 0.2
    damping: float = 1.0  # proximal step damping; 0 disables
    seed: int = 0
    al_rounds: int = 10

    def __post_init__(self):
        if self.position_tol <= 0 or self.constraint_tol <= 0:
            raise InvalidInputError("tolerances must be positive")
        if self.max_outer_iters <= 0 or self.max_inner_iters <= 0:
            raise InvalidInputError("iteration caps must be positive")


@dataclass
class LinearConstraints:
    """Hard rows A x = b over flattened point coordinates."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)

    @staticmethod
    def stack(items):
        items = [i for i in items if i is not None and len(i.b)]
        if not items:
            return None
        return LinearConstraints(
            np.concatenate([i.A for i in items]), np.concatenate([i.b for i in items])
        )


@dataclass
class TwistConstraint:
    """Hard row: sum of coeff * joint twist over the listed interior joints."""

    joint_edges: np.ndarray  # (r, 2) global edge indices
    coeffs: np.ndarray  # (r,)
    label: str = ""

    def __post_init__(self):
        self.joint_edges = np.asarray(self.joint_edges, dtype=int).reshape(-1, 2)
        self.coeffs = np.asarray(self.coeffs, dtype=float).reshape(-1)


@dataclass
class SeamBend:
    """Compliant bend-twist coupling across a periodic seam."""

    edge_a: int  # last edge of the source yarn
    edge_b: int  # first edge of the target yarn (lives one ghost tile over)
    rot: np.ndarray  # quaternion pre-rotating edge_b's frame into this tile's frame
    l0: float
    rest_darboux: np.ndarray
    stiffness: np.ndarray  # (3,) diagonal entries


@dataclass
class ConstraintSet:
    """All hard couplings and contact settings of one quasi-static solve."""

    linear: LinearConstraints = None
    twists: list = field(default_factory=list)
    seam_bends: list = field(default_factory=list)
    ghost_transforms: dict = field(default_factory=dict)  # offset -> (R, t)
    contact_radius: float = 0.0
    friction: float = 0.0
    exclusions: set = field(default_factory=set)  # frozenset edge pairs, same tile


# ---------------------------------------------------------------------------
# Geometry: segment-segment closest points


def segment_closest_points(p0, p1, q0, q1):
    """Closest-point parameters and offset between two segment batches.

    Returns (s, t, diff) with diff = (p0 + s d1) - (q0 + t d2); all inputs
    broadcast as (..., 3).
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = np.einsum("...i,...i->...", d1, d1)
    e = np.einsum("...i,...i->...", d2, d2)
    f = np.einsum("...i,...i->...", d2, r)
    c = np.einsum("...i,...i->...", d1, r)
    b = np.einsum("...i,...i->...", d1, d2)
    denom = a * e - b * b
    tiny = 1e-30
    s = np.where(denom > tiny, np.clip((b * f - c * e) / np.where(denom > tiny, denom, 1.0), 0, 1), 0.0)
    t_raw = np.where(e > tiny, (b * s + f) / np.where(e > tiny, e, 1.0), 0.0)
    t = np.clip(t_raw, 0.0, 1.0)
    s = np.where(
        t != t_raw,
        np.clip((b * t - c) / np.where(a > tiny, a, 1.0), 0.0, 1.0),
        s,
    )
    s = np.where(a > tiny, s, 0.0)
    diff = p0 + s[..., None] * d1 - (q0 + t[..., None] * d2)
    return s, t, diff


# ---------------------------------------------------------------------------
# Contacts


@dataclass(frozen=True)
class Contact:
    edge_a: int
    edge_b: int
    offset: tuple  # ghost tile offset applied to edge_b
    distance: float = 0.0
    normal: tuple = (0.0, 0.0, 0.0)
    depth: float = 0.0

    @property
    def key(self):
        return (self.edge_a, self.edge_b, self.offset)


_HALF_SPACE_OFFSETS = ((1, 0), (0, 1), (1, 1), (1, -1))


def contact_exclusion_hops(threshold, edge_length):
    """Index distance along a yarn inside which contacts are topological."""
    if edge_length <= 0:
        return TOPOLOGICAL_EXCLUSION
    return int(np.ceil(threshold / edge_length))


def _edge_endpoints(state):
    e = state.edges
    return state.points[e[:, 0]], state.points[e[:, 1]]


def detect_contacts(state, radius, ghost_transforms=None, exclusions=None, margin=None):
    """Edge-edge pairs closer than 2*radius + margin.

    Candidate pairs come from a KD-tree over edge midpoints (real edges plus
    ghost-tile copies); topological neighbors along a yarn and listed
    exclusions are skipped.  Exclusions are (edge_a, edge_b, offset) triples
    matching the representative orientation produced here (edge_a real,
    edge_b ghosted by offset).
    """
    if margin is None:
        margin = CONTACT_MARGIN_FACTOR * radius
    threshold = 2.0 * radius + margin
    a0, a1 = _edge_endpoints(state)
    m = len(a0)
    edge_yarn = state.edge_yarn
    # neighbors along the same yarn closer in arc length than the contact
    # threshold can never separate; exclude them topologically
    median_len = float(np.median(np.linalg.norm(a1 - a0, axis=1)))
    hop_excl = max(TOPOLOGICAL_EXCLUSION, contact_exclusion_hops(threshold, median_len))

    copies = [(np.zeros((m, 3)), (0, 0), np.eye(3))]
    transforms = dict(ghost_transforms or {})
    for off in _HALF_SPACE_OFFSETS:
        if off in transforms:
            R, t = transforms[off]
            copies.append((None, off, (R, t)))

    seg_p0 = [a0]
    seg_p1 = [a1]
    seg_off = [np.zeros(m, dtype=int)]
    offsets_list = [(0, 0)]
    for item in copies[1:]:
        off = item[1]
        R, t = item[2]
        seg_p0.append(a0 @ R.T + t)
        seg_p1.append(a1 @ R.T + t)
        seg_off.append(np.full(m, len(offsets_list), dtype=int))
        offsets_list.append(off)
    P0 = np.concatenate(seg_p0)
    P1 = np.concatenate(seg_p1)
    which = np.concatenate(seg_off)
    mids = 0.5 * (P0 + P1)
    half_len = 0.5 * np.linalg.norm(P1 - P0, axis=1)
    search = threshold + half_len.max() + half_len.max()

    tree = cKDTree(mids[:m])  # real edges only on the query side
    tree_all = cKDTree(mids)
    pairs = tree.query_ball_tree(tree_all, search)

    exclusions = exclusions or set()
    out = []
    for ia in range(m):
        for jb in pairs[ia]:
            off_idx = which[jb]
            eb = jb % m
            off = offsets_list[off_idx]
            if off == (0, 0):
                if eb <= ia:
                    continue
                if edge_yarn[ia] == edge_yarn[eb] and abs(ia - eb) <= hop_excl:
                    continue
                if (ia, eb, off) in exclusions or (eb, ia, off) in exclusions:
                    continue
            elif (ia, eb, off) in exclusions:
                continue
            s, t, diff = segment_closest_points(a0[ia], a1[ia], P0[jb], P1[jb])
            d = float(np.linalg.norm(diff))
            if d < threshold:
                n = diff / d if d > 0 else np.array([0.0, 0.0, 1.0])
                out.append(
                    Contact(
                        edge_a=ia,
                        edge_b=eb,
                        offset=off,
                        distance=d,
                        normal=tuple(n),
                        depth=max(0.0, 2.0 * radius - d),
                    )
                )
    out.sort(key=lambda c: c.key)
    return out


def resolve_contact(contact, state, radius, friction=0.0, slide=None):
    """Position corrections separating one contact to 2*radius.

    Returns (point_indices, corrections).  The normal correction projects
    the closest points apart; an optional imposed tangential slide is
    clamped to friction times the normal correction magnitude.
    """
    e = state.edges
    a0i, a1i = e[contact.edge_a]
    b0i, b1i = e[contact.edge_b]
    pa0, pa1 = state.points[a0i], state.points[a1i]
    pb0, pb1 = state.points[b0i], state.points[b1i]
    if contact.offset != (0, 0):
        raise InvalidInputError("resolve_contact only handles same-tile pairs")
    s, t, diff = segment_closest_points(pa0, pa1, pb0, pb1)
    d = float(np.linalg.norm(diff))
    if d == 0.0:
        # degenerate overlap: separate along z through the midpoints
        n = np.array([0.0, 0.0, 1.0])
    else:
        n = diff / d
    gap = 2.0 * radius - d
    if gap <= 0.0:
        return (np.array([a0i, a1i, b0i, b1i]), np.zeros((4, 3)))
    # split the push between the two segments, distributed by closest-point
    # barycentric weights
    half = 0.5 * gap
    corr = np.zeros((4, 3))
    corr[0] = (1.0 - s) * half * n
    corr[1] = s * half * n
    corr[2] = -(1.0 - t) * half * n
    corr[3] = -t * half * n
    if friction > 0.0 and slide is not None:
        slide = np.asarray(slide, dtype=float)
        tangential = slide - (slide @ n) * n
        mag = np.linalg.norm(tangential)
        if mag > 0.0:
            allowed = min(mag, friction * gap)
            tcorr = tangential / mag * allowed
            corr[0] -= (1.0 - s) * 0.5 * tcorr
            corr[1] -= s * 0.5 * tcorr
            corr[2] += (1.0 - t) * 0.5 * tcorr
            corr[3] += t * 0.5 * tcorr
    return (np.array([a0i, a1i, b0i, b1i]), corr)


# ---------------------------------------------------------------------------
# Core minimizer


class PatchMinimizer:
    """One quasi-static solve over a patch with fixed topology."""

    def __init__(self, state, cset, config, stiffness_provider, log=None):
        self.state = state.copy()
        self.cset = cset
        self.config = config
        self.stiffness_provider = stiffness_provider
        self.log = log
        self.n = state.n_points
        self.m = state.n_edges
        self.edges = state.edges
        self.joints = state.joints
        self.char_length = max(
            float(np.ptp(state.points, axis=0).max()), float(state.rest_lengths.mean())
        )
        self._setup_linear()
        self._setup_bends()
        self.diagnostics = {"outer": [], "energy": [], "max_hard_residual": []}

    # -- setup --------------------------------------------------------------

    def _setup_linear(self):
        lin = self.cset.linear
        x0 = self.state.points.ravel().copy()
        if lin is None or len(lin.b) == 0:
            self.Z = None
            self.x0 = x0
            self.dof_p = 3 * self.n
            return
        A, b = lin.A, lin.b
        resid = A @ x0 - b
        if np.linalg.norm(resid) > 1e-9 * max(1.0, np.linalg.norm(b)):
            # project the initial point onto the affine constraint set
            x0 = x0 - A.T @ np.linalg.solve(A @ A.T, resid)
        self.Z = scipy.linalg.null_space(A)
        self.x0 = x0
        self.dof_p = self.Z.shape[1]

    def _setup_bends(self):
        """Merge interior joints and seam bends into one batched structure."""
        j = self.joints
        k = len(j)
        seams = self.cset.seam_bends
        ns = len(seams)
        self.k_interior = k
        self.bend_a = np.concatenate([j[:, 0], [s.edge_a for s in seams]]).astype(int) \
            if k + ns else np.empty(0, dtype=int)
        self.bend_b = np.concatenate([j[:, 1], [s.edge_b for s in seams]]).astype(int) \
            if k + ns else np.empty(0, dtype=int)
        rot = np.tile(quat.IDENTITY, (k, 1))
        if ns:
            rot = np.concatenate([rot, np.stack([s.rot for s in seams])])
        self.bend_rot = rot
        l0 = self.state.rest_lengths
        self.bend_l0 = np.concatenate(
            [l0[j[:, 0]], [s.l0 for s in seams]]
        ) if k + ns else np.empty(0)
        rest = self.state.rest_darboux
        if ns:
            rest = np.concatenate([rest, np.stack([s.rest_darboux for s in seams])])
        self.bend_rest = rest

    def _bend_stiffness_rows(self, stiffness):
        rows = stiffness.bend
        seams = self.cset.seam_bends
        if seams:
            rows = np.concatenate([rows, np.stack([s.stiffness for s in seams])])
        return rows

    # -- pack / unpack ------------------------------------------------------

    def pack(self, state):
        if self.Z is None:
            y = state.points.ravel() - self.x0
        else:
            y = self.Z.T @ (state.points.ravel() - self.x0)
        return np.concatenate([y, state.frames.ravel()])

    def unpack(self, w):
        y = w[: self.dof_p]
        q = w[self.dof_p:].reshape(self.m, 4)
        if self.Z is None:
            x = (self.x0 + y).reshape(self.n, 3)
        else:
            x = (self.x0 + self.Z @ y).reshape(self.n, 3)
        return x, q

    # -- residuals ----------------------------------------------------------

    def _core_quantities(self, x, q):
        nrm = np.linalg.norm(q, axis=1)
        qn = q / nrm[:, None]
        e = self.edges
        dp = x[e[:, 1]] - x[e[:, 0]]
        cs = dp / self.state.rest_lengths[:, None] - quat.d3(qn) - self.state.rest_stretch
        if len(self.bend_a):
            qa = qn[self.bend_a]
            qb = quat.multiply(self.bend_rot, qn[self.bend_b])
            u = quat.multiply(quat.conjugate(qa), qb)
            cb = (2.0 / self.bend_l0)[:, None] * u[:, 1:] / u[:, :1] - self.bend_rest
        else:
            u = np.empty((0, 4))
            cb = np.empty((0, 3))
        return qn, nrm, cs, u, cb

    def elastic_energy(self, x, q, stiffness):
        _, _, cs, _, cb = self._core_quantities(x, q)
        kb = self._bend_stiffness_rows(stiffness)
        return float(0.5 * np.sum(stiffness.stretch * cs * cs) + 0.5 * np.sum(kb * cb * cb))

    def _twist_values(self, u):
        """Per-row twist constraint values from interior-joint quotients."""
        tau = u[: self.k_interior, 3] / u[: self.k_interior, 0]
        vals = []
        for tc in self.cset.twists:
            rows = self._joint_rows(tc)
            vals.append(float(np.dot(tc.coeffs, tau[rows])))
        return np.asarray(vals)

    def _joint_rows(self, tc):
        key = id(tc)
        cache = getattr(self, "_joint_row_cache", None)
        if cache is None:
            cache = self._joint_row_cache = {}
        if key not in cache:
            lookup = {tuple(j): idx for idx, j in enumerate(self.joints)}
            cache[key] = np.array([lookup[tuple(j)] for j in tc.joint_edges], dtype=int)
        return cache[key]

    def _contact_arrays(self, contacts):
        if getattr(self, "_ca_key", None) == id(contacts):
            return self._ca
        e = self.edges
        ia = np.array([c.edge_a for c in contacts], dtype=int)
        ib = np.array([c.edge_b for c in contacts], dtype=int)
        R = np.empty((len(contacts), 3, 3))
        t = np.empty((len(contacts), 3))
        for i, c in enumerate(contacts):
            if c.offset == (0, 0):
                R[i] = np.eye(3)
                t[i] = 0.0
            else:
                Ro, to = self.cset.ghost_transforms[c.offset]
                R[i] = Ro
                t[i] = to
        self._ca = {
            "a0": e[ia, 0], "a1": e[ia, 1], "b0": e[ib, 0], "b1": e[ib, 1],
            "R": R, "t": t,
        }
        self._ca_key = id(contacts)
        return self._ca

    def _contact_gaps(self, x, contacts):
        """Gaps (2r - distance) and closest-point geometry, batched."""
        if not contacts:
            return np.empty(0), None
        arr = self._contact_arrays(contacts)
        sep = self.cset.contact_radius * 2.0
        A0, A1 = x[arr["a0"]], x[arr["a1"]]
        B0 = np.einsum("kij,kj->ki", arr["R"], x[arr["b0"]]) + arr["t"]
        B1 = np.einsum("kij,kj->ki", arr["R"], x[arr["b1"]]) + arr["t"]
        s, t_, diff = segment_closest_points(A0, A1, B0, B1)
        d = np.linalg.norm(diff, axis=1)
        safe = np.where(d > 0, d, 1.0)
        n = diff / safe[:, None]
        n[d == 0] = [0.0, 0.0, 1.0]
        return sep - d, (s, t_, n)

    def build_residual(self, stiffness, al):
        """Residual and Jacobian closures for the current AL state."""
        sqrt_ks = np.sqrt(stiffness.stretch)
        kb_rows = self._bend_stiffness_rows(stiffness)
        sqrt_kb = np.sqrt(kb_rows)
        w_gauge = max(np.sqrt(kb_rows.max()), 1e-12) if kb_rows.size else 1.0
        contacts = al["contacts"]
        mu_t, lam_t = al["mu_twist"], al["lam_twist"]
        mu_c, lam_c = al["mu_contact"], al["lam_contact"]
        e = self.edges
        l0 = self.state.rest_lengths
        n3 = 3 * self.n
        nt = len(self.cset.twists)
        nc = len(contacts)
        n_bend = len(self.bend_a)
        w_damp = al.get("w_damp", 0.0)
        x_ref = al.get("x_ref")
        nd = n3 if w_damp > 0.0 else 0
        rows_total = 3 * self.m + 3 * n_bend + self.m + nt + nc + nd

        def fun(w):
            x, q = self.unpack(w)
            qn, nrm, cs, u, cb = self._core_quantities(x, q)
            parts = [
                (sqrt_ks * cs).ravel(),
                (sqrt_kb * cb).ravel(),
                w_gauge * (nrm * nrm - 1.0),
            ]
            if nt:
                ct = self._twist_values(u)
                parts.append(np.sqrt(mu_t) * (ct + lam_t / mu_t))
            if nc:
                gaps, _ = self._contact_gaps(x, contacts)
                parts.append(np.sqrt(mu_c) * np.maximum(0.0, gaps + lam_c / mu_c))
            if nd:
                parts.append(w_damp * (x - x_ref).ravel())
            return np.concatenate(parts)

        def jac(w):
            x, q = self.unpack(w)
            nrm = np.linalg.norm(q, axis=1)
            qn = q / nrm[:, None]
            Jx = np.zeros((rows_total, n3))
            Jqn = np.zeros((rows_total, 4 * self.m))

            # stretch rows
            inv_l0 = 1.0 / l0
            r_idx = np.arange(3 * self.m).reshape(self.m, 3)
            for d in range(3):
                Jx[r_idx[:, d], 3 * e[:, 0] + d] = -sqrt_ks[:, d] * inv_l0
                Jx[r_idx[:, d], 3 * e[:, 1] + d] = sqrt_ks[:, d] * inv_l0
            J3 = quat.d3_jacobian(qn)  # (m,3,4)
            for d in range(3):
                for c in range(4):
                    Jqn[r_idx[:, d], 4 * np.arange(self.m) + c] = (
                        -sqrt_ks[:, d] * J3[:, d, c]
                    )

            # bend rows (interior + seam)
            base = 3 * self.m
            if n_bend:
                qa = qn[self.bend_a]
                qbr = quat.multiply(self.bend_rot, qn[self.bend_b])
                u = quat.multiply(quat.conjugate(qa), qbr)
                dcb_du = np.zeros((n_bend, 3, 4))
                two_l0 = 2.0 / self.bend_l0
                dcb_du[:, :, 0] = -(two_l0[:, None]) * u[:, 1:] / (u[:, :1] ** 2)
                for d in range(3):
                    dcb_du[:, d, 1 + d] = two_l0 / u[:, 0]
                La = rod._batch_left_conj(qa)
                du_dqb = np.einsum("kij,kjl->kil", La, _batch_left(self.bend_rot))
                Rb = rod._batch_right(qbr)
                du_dqa = Rb.copy()
                du_dqa[:, :, 1:] *= -1.0
                Ja = np.einsum("kdi,kij->kdj", dcb_du, du_dqa) * sqrt_kb[:, :, None]
                Jb = np.einsum("kdi,kij->kdj", dcb_du, du_dqb) * sqrt_kb[:, :, None]
                for d in range(3):
                    for c in range(4):
                        np.add.at(
                            Jqn,
                            (base + 3 * np.arange(n_bend) + d, 4 * self.bend_a + c),
                            Ja[:, d, c],
                        )
                        np.add.at(
                            Jqn,
                            (base + 3 * np.arange(n_bend) + d, 4 * self.bend_b + c),
                            Jb[:, d, c],
                        )
            base += 3 * n_bend

            # gauge rows act on raw q, handled after the normalization chain
            gauge_rows = base + np.arange(self.m)
            base += self.m

            # twist rows
            if nt:
                qa = qn[self.joints[:, 0]]
                qb = qn[self.joints[:, 1]]
                u_j = quat.multiply(quat.conjugate(qa), qb)
                dtau_du = np.zeros((self.k_interior, 4))
                dtau_du[:, 0] = -u_j[:, 3] / u_j[:, 0] ** 2
                dtau_du[:, 3] = 1.0 / u_j[:, 0]
                La = rod._batch_left_conj(qa)
                Rb = rod._batch_right(qb)
                dtau_dqb = np.einsum("ki,kij->kj", dtau_du, La)
                dtau_dqa = np.einsum("ki,kij->kj", dtau_du, Rb)
                dtau_dqa[:, 1:] *= -1.0
                for ti, tc in enumerate(self.cset.twists):
                    rows = self._joint_rows(tc)
                    for rj, coeff in zip(rows, tc.coeffs):
                        ea, eb = self.joints[rj]
                        Jqn[base + ti, 4 * ea: 4 * ea + 4] += (
                            np.sqrt(mu_t) * coeff * dtau_dqa[rj]
                        )
                        Jqn[base + ti, 4 * eb: 4 * eb + 4] += (
                            np.sqrt(mu_t) * coeff * dtau_dqb[rj]
                        )
                base += nt

            # contact rows
            if nc:
                gaps, (cs_, ct_, cn) = self._contact_gaps(x, contacts)
                arr = self._contact_arrays(contacts)
                active = np.nonzero(gaps + lam_c / mu_c > 0.0)[0]
                scale = np.sqrt(mu_c)
                # gap = sep - d; dd/d(endpoint) via closest-point weights
                nb = np.einsum("ki,kij->kj", cn, arr["R"])
                for ci in active:
                    Jx[base + ci, 3 * arr["a0"][ci]: 3 * arr["a0"][ci] + 3] += (
                        -scale * (1 - cs_[ci]) * cn[ci]
                    )
                    Jx[base + ci, 3 * arr["a1"][ci]: 3 * arr["a1"][ci] + 3] += (
                        -scale * cs_[ci] * cn[ci]
                    )
                    Jx[base + ci, 3 * arr["b0"][ci]: 3 * arr["b0"][ci] + 3] += (
                        scale * (1 - ct_[ci]) * nb[ci]
                    )
                    Jx[base + ci, 3 * arr["b1"][ci]: 3 * arr["b1"][ci] + 3] += (
                        scale * ct_[ci] * nb[ci]
                    )
            base += nc

            if nd:
                Jx[base: base + n3, :] += w_damp * np.eye(n3)

            # chain normalization for quaternion columns, then add gauge rows
            P = (np.eye(4)[None] - qn[:, :, None] * qn[:, None, :]) / nrm[:, None, None]
            J_q = np.einsum("rfi,fij->rfj", Jqn.reshape(rows_total, self.m, 4), P)
            J_q = J_q.reshape(rows_total, 4 * self.m)
            J_q[gauge_rows, :] = 0.0
            fidx = np.arange(self.m)
            for c in range(4):
                J_q[gauge_rows, 4 * fidx + c] = 2.0 * w_gauge * q[:, c]

            Jp = Jx if self.Z is None else Jx @ self.Z
            return np.concatenate([Jp, J_q], axis=1)

        return fun, jac

    # -- outer loop ---------------------------------------------------------

    def solve(self):
        cfg = self.config
        cset = self.cset
        state = self.state
        w = self.pack(state)
        kb_scale = None
        al = {
            "mu_twist": 1.0,
            "lam_twist": np.zeros(len(cset.twists)),
            "mu_contact": 1.0,
            "lam_contact": np.empty(0),
            "contacts": [],
        }
        contact_multipliers = {}
        ctol = cfg.constraint_tol * self.char_length
        prev_points = state.points.copy()
        converged = False
        last_energy = np.inf
        stall_count = 0

        for outer in range(cfg.max_outer_iters):
            stiffness = self._blended_stiffness(state)
            if kb_scale is None:
                kb_scale = max(float(stiffness.stretch.max()), 1e-30)
                self._mu_twist0 = 1e8 * max(
                    float(self._bend_stiffness_rows(stiffness).max()), 1e-30
                )
                self._mu_contact0 = 1e2 * kb_scale / max(
                    float(self.state.rest_lengths.mean()) ** 2, 1e-30
                )
            # penalties restart every outer iteration; the multipliers carry
            # the converged constraint forces between iterations
            al["mu_twist"] = self._mu_twist0
            al["mu_contact"] = self._mu_contact0
            if cfg.damping > 0.0:
                l0_mean = max(float(self.state.rest_lengths.mean()), 1e-30)
                al["w_damp"] = np.sqrt(cfg.damping * kb_scale) / l0_mean
                al["x_ref"] = state.points.copy()
            if cset.contact_radius > 0.0:
                contacts = detect_contacts(
                    state,
                    cset.contact_radius,
                    ghost_transforms=cset.ghost_transforms,
                    exclusions=cset.exclusions,
                )
            else:
                contacts = []
            al["contacts"] = contacts
            al["lam_contact"] = np.array(
                [contact_multipliers.get(c.key, 0.0) for c in contacts]
            )

            pen_tol = 1e-3 * max(cset.contact_radius, 1e-30)
            max_resid = 0.0
            for rnd in range(cfg.al_rounds):
                fun, jac = self.build_residual(stiffness, al)
                res = least_squares(
                    fun,
                    w,
                    jac=jac,
                    method="trf",
                    max_nfev=cfg.max_inner_iters,
                    xtol=1e-14,
                    ftol=1e-14,
                    gtol=1e-12,
                    x_scale="jac",
                )
                w = res.x
                x, q = self.unpack(w)
                qn_all, _, cs, u, cb = self._core_quantities(x, q)
                twist_ok = True
                contact_ok = True
                max_resid = 0.0
                if len(cset.twists):
                    ct = self._twist_values(u)
                    al["lam_twist"] = al["lam_twist"] + al["mu_twist"] * ct
                    twist_viol = float(np.abs(ct).max())
                    twist_ok = twist_viol < cfg.constraint_tol
                    max_resid = max(max_resid, twist_viol)
                if contacts:
                    gaps, _ = self._contact_gaps(x, contacts)
                    al["lam_contact"] = np.maximum(
                        0.0, al["lam_contact"] + al["mu_contact"] * gaps
                    )
                    pen = float(np.maximum(gaps, 0.0).max()) if len(gaps) else 0.0
                    contact_ok = pen < pen_tol
                    max_resid = max(max_resid, pen / self.char_length)
                import os as _os  # TEMP DEBUG
                if _os.environ.get("YS_DEBUG_AL"):
                    tv = float(np.abs(ct).max()) if len(cset.twists) else 0.0
                    pv = pen if contacts else 0.0
                    print(f"  outer {outer} rnd {rnd} twist {tv:.2e} pen {pv:.2e} "
                          f"mu_c {al['mu_contact']:.1e} nfev {res.nfev} cost {res.cost:.3e}",
                          flush=True)
                if twist_ok and contact_ok:
                    break
                if not twist_ok:
                    al["mu_twist"] *= 10.0
                if not contact_ok:
                    al["mu_contact"] *= 10.0
            for c, lam in zip(contacts, al["lam_contact"]):
                contact_multipliers[c.key] = lam

            # write back state
            state.points = x
            state.frames = q / np.linalg.norm(q, axis=1)[:, None]
            energy = self.elastic_energy(state.points, state.frames, stiffness)
            disp = float(np.linalg.norm(state.points - prev_points, axis=1).max())
            prev_points = state.points.copy()
            self.diagnostics["outer"].append(outer)
            self.diagnostics["energy"].append(energy)
            self.diagnostics["max_hard_residual"].append(max_resid)
            if self.log is not None:
                self.log.write(
                    f"{outer},{energy:.12e},{max_resid:.3e},{len(contacts)},{disp:.3e}\n"
                )
            # the biphasic stiffness iterates toward its own fixed point;
            # require the energy to have settled as well before stopping
            energy_stable = abs(energy - last_energy) <= 1e-3 * max(abs(energy), 1e-30)
            if disp < cfg.position_tol and twist_ok and contact_ok and energy_stable:
                stall_count += 1
            else:
                stall_count = 0
            if stall_count >= 3 and self._verify_contacts(state):
                converged = True
                break
            last_energy = energy

        if not converged:
            raise ConvergenceError(
                "quasi-static solve did not converge",
                diagnostics={
                    "outer_iters": len(self.diagnostics["outer"]),
                    "last_energy": self.diagnostics["energy"][-1:],
                    "last_residual": self.diagnostics["max_hard_residual"][-1:],
                },
            )
        return state, self.elastic_energy(state.points, state.frames, stiffness)

    def _blended_stiffness(self, state):
        """Stiffness provider output, under-relaxed across outer iterations.

        Strain-dependent stiffness makes the outer loop a fixed-point
        iteration; averaging with the previous iterate damps the period-two
        oscillation that a full update can sustain.
        """
        ps = self.stiffness_provider(state)
        seam_rows = (
            np.stack([sb.stiffness for sb in self.cset.seam_bends])
            if self.cset.seam_bends
            else None
        )
        prev = getattr(self, "_prev_stiffness", None)
        if prev is not None:
            ps = PatchStiffness(
                0.5 * (ps.stretch + prev[0]), 0.5 * (ps.bend + prev[1])
            )
            if seam_rows is not None:
                seam_rows = 0.5 * (seam_rows + prev[2])
                for sb, row in zip(self.cset.seam_bends, seam_rows):
                    sb.stiffness = row
        self._prev_stiffness = (ps.stretch.copy(), ps.bend.copy(), seam_rows)
        return ps

    def _verify_contacts(self, state):
        if self.cset.contact_radius <= 0.0:
            return True
        contacts = detect_contacts(
            state,
            self.cset.contact_radius,
            ghost_transforms=self.cset.ghost_transforms,
            exclusions=self.cset.exclusions,
        )
        r = self.cset.contact_radius
        for c in contacts:
            if c.distance < 2.0 * r - 1e-3 * r:
                return False
        return True


def _batch_left(q):
    """L(q) for a batch, shape (k,4,4): L(q) b = q*b."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    k = len(q)
    L = np.empty((k, 4, 4))
    L[:, 0] = np.stack([w, -x, -y, -z], axis=1)
    L[:, 1] = np.stack([x, w, -z, y], axis=1)
    L[:, 2] = np.stack([y, z, w, -x], axis=1)
    L[:, 3] = np.stack([z, -y, x, w], axis=1)
    return L


# ---------------------------------------------------------------------------
# State construction and relaxation


def shortest_arc_quaternion(a, b):
    """Unit quaternion rotating unit vector a onto unit vector b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = float(a @ b)
    if d < -1.0 + 1e-12:
        # antiparallel: rotate 180 degrees about any perpendicular axis
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-8:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        return np.concatenate([[0.0], axis])
    v = np.cross(a, b)
    q = np.concatenate([[1.0 + d], v])
    return q / np.linalg.norm(q)


def state_from_pattern(pat):
    """Initial RodState: pattern geometry, tangent-aligned frames, straight rest."""
    points = pat.all_points()
    offs = pat.point_offsets()
    yarn_points = [np.arange(offs[i], offs[i + 1]) for i in range(len(pat.yarns))]
    frames = []
    rest_lengths = []
    e3 = np.array([0.0, 0.0, 1.0])
    for y in pat.yarns:
        d = np.diff(y, axis=0)
        lens = np.linalg.norm(d, axis=1)
        t = d / lens[:, None]
        for ti in t:
            frames.append(shortest_arc_quaternion(e3, ti))
        rest_lengths.extend(lens)
    n_joints = sum(len(y) - 2 for y in pat.yarns)
    return RodState(
        points=points,
        frames=np.asarray(frames),
        rest_lengths=np.asarray(rest_lengths),
        rest_darboux=np.zeros((n_joints, 3)),
        yarn_points=yarn_points,
    )


def _seam_records(pat, state):
    """Per-seam index bundle used to build couplings."""
    offs = pat.point_offsets()
    out = []
    for c in pat.seams():
        i, k = c.yarn_i, c.yarn_k
        pi_last = offs[i] + len(pat.yarns[i]) - 1
        pk_first = offs[k]
        edge_a = state.yarn_edges(i)[-1]
        edge_b = state.yarn_edges(k)[0]
        out.append(
            {
                "conn": c,
                "point_i": pi_last,
                "point_k": pk_first,
                "prev_point_i": offs[i] + len(pat.yarns[i]) - 2,
                "next_point_k": offs[k] + 1,
                "edge_a": int(edge_a),
                "edge_b": int(edge_b),
                "offset": c.offset,
            }
        )
    return out


def seam_exclusions(pat, state, hops=None, radius=None):
    """Edge pairs that are topological neighbors across seams.

    Keys are (edge_a, edge_b, offset) in the representative orientation of
    detect_contacts: edge_a in the home tile, edge_b ghosted by offset.
    """
    if hops is None:
        if radius is not None:
            thr = 2.0 * radius + CONTACT_MARGIN_FACTOR * radius
            hops = contact_exclusion_hops(thr, float(np.median(state.rest_lengths)))
        else:
            hops = TOPOLOGICAL_EXCLUSION
    excl = set()
    for rec in _seam_records(pat, state):
        i, k = rec["conn"].yarn_i, rec["conn"].yarn_k
        off = rec["offset"]
        tail = state.yarn_edges(i)[-hops - 1:]
        head = state.yarn_edges(k)[: hops + 1]
        for a in tail:
            for b in head:
                excl.add((int(a), int(b), off))
                excl.add((int(b), int(a), (-off[0], -off[1])))
    return excl


def flat_ghost_transforms(period):
    px, py = period
    out = {}
    for off in _HALF_SPACE_OFFSETS + tuple((-o[0], -o[1]) for o in _HALF_SPACE_OFFSETS):
        out[off] = (np.eye(3), np.array([off[0] * px, off[1] * py, 0.0]))
    return out


def embedded_ghost_transforms(embedding, period):
    out = {}
    for off in _HALF_SPACE_OFFSETS + tuple((-o[0], -o[1]) for o in _HALF_SPACE_OFFSETS):
        out[off] = embedding.ghost_transform(off, period=period)
    return out


def _seam_equality_rows(pat, state, seam_recs, ghost_transforms):
    """Hard rows x_i - (R x_k + t) = 0 for every seam pair."""
    n = state.n_points
    rows = []
    rhs = []
    for rec in seam_recs:
        R, t = ghost_transforms[rec["offset"]]
        A = np.zeros((3, 3 * n))
        pi, pk = rec["point_i"], rec["point_k"]
        A[:, 3 * pi: 3 * pi + 3] = np.eye(3)
        A[:, 3 * pk: 3 * pk + 3] = -R
        rows.append(A)
        rhs.append(t)
    if not rows:
        return None
    return LinearConstraints(np.concatenate(rows), np.concatenate(rhs))


def _centroid_rows(state):
    n = state.n_points
    A = np.zeros((3, 3 * n))
    for d in range(3):
        A[d, d::3] = 1.0
    b = A @ state.points.ravel()
    return LinearConstraints(A, b)


def relax_patch(pat, spec, config=None, radius=None, log=None, return_energy=False):
    """Phase-one relaxation: shrink rest lengths, zero natural curvature,
    periodic seams and contacts, patch period held fixed.

    Returns the relaxed RodState with rest lengths and rest Darboux vectors
    recomputed from the relaxed geometry (the new rest state).  With
    return_energy=True, returns (state, energy) where energy is the
    minimized elastic energy of the shrunk configuration before the rest
    quantities are recomputed (useful for comparing patches of different
    size: it scales with the amount of material).
    """
    config = config or SolverConfig()
    if radius is None:
        radius = estimate_yarn_radius(pat, spec)
    r_s = spec.shrink_for(pat.pattern_class)
    state = state_from_pattern(pat)
    state.rest_lengths = state.rest_lengths * r_s
    state.rest_darboux = np.zeros_like(state.rest_darboux)

    seam_recs = _seam_records(pat, state)
    ghosts = flat_ghost_transforms(pat.period)
    linear = LinearConstraints.stack(
        [_seam_equality_rows(pat, state, seam_recs, ghosts), _centroid_rows(state)]
    )
    seam_bends = []
    for rec in seam_recs:
        seam_bends.append(
            SeamBend(
                edge_a=rec["edge_a"],
                edge_b=rec["edge_b"],
                rot=quat.IDENTITY.copy(),
                l0=float(state.rest_lengths[rec["edge_a"]]),
                rest_darboux=np.zeros(3),
                stiffness=np.zeros(3),  # filled from stiffness provider below
            )
        )

    def stiffness_provider(st):
        ps = rod.biphasic_patch_stiffness(st, spec.k1, spec.k2, spec.poisson, radius)
        if seam_bends:
            mean_bend = ps.bend.mean(axis=0) if len(ps.bend) else np.full(3, 1e-12)
            for sb in seam_bends:
                sb.stiffness = mean_bend
        return ps

    # zero-twist is enforced during relaxation too, so the recomputed rest
    # state satisfies the phase-two twist constraints at zero deformation
    from .homogenize import zero_twist_constraints

    cset = ConstraintSet(
        linear=linear,
        twists=zero_twist_constraints(state),
        seam_bends=seam_bends,
        ghost_transforms=ghosts,
        contact_radius=radius,
        friction=spec.friction,
        exclusions=seam_exclusions(pat, state, radius=radius),
    )
    mini = PatchMinimizer(state, cset, config, stiffness_provider, log=log)
    relaxed, energy = mini.solve()
    final = finalize_rest_state(relaxed, pat, seam_recs, ghosts)
    if return_energy:
        return final, energy
    return final


def finalize_rest_state(state, pat, seam_recs=None, ghost_transforms=None):
    """Recompute rest quantities from the current geometry.

    Rest lengths come from the deformed segment lengths, rest Darboux from
    the frame increments, and rest stretch-shear from the residual frame
    tilt, so the relaxed state is exactly stress-free afterwards.
    """
    out = state.copy()
    e = out.edges
    dp = out.points[e[:, 1]] - out.points[e[:, 0]]
    out.rest_lengths = np.linalg.norm(dp, axis=1)
    out.rest_stretch = dp / out.rest_lengths[:, None] - quat.d3(out.frames)
    j = out.joints
    if len(j):
        qa, qb = out.frames[j[:, 0]], out.frames[j[:, 1]]
        u = quat.multiply(quat.conjugate(qa), qb)
        l0 = out.rest_lengths[j[:, 0]]
        out.rest_darboux = (2.0 / l0)[:, None] * u[:, 1:] / u[:, :1]
    return out


def minimize_with_homogenization(rest, cset, config=None, stiffness_provider=None, log=None):
    """Phase-two minimization with installed hard constraints.

    Returns (minimizing state, minimized yarn energy in joules).
    """
    config = config or SolverConfig()
    if stiffness_provider is None:
        raise InvalidInputError("a stiffness provider is required")
    mini = PatchMinimizer(rest, cset, config, stiffness_provider, log=log)
    return mini.solve()
