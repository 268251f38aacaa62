"""Patch homogenization over a grid of macroscopic deformation samples.

Each sample embeds the relaxed patch onto a deformed mid-surface, then
minimizes the yarn energy while homogenization constraints pin the
zero-fluctuation average per yarn, couple seam fluctuations across the
periodic boundary, and suppress net twist.  The minimized energy divided by
the patch area is the recorded energy density for the stiffness fit.
"""

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import quaternion as quat
from . import rod
from .embedding import DeformationSample, embed_surface
from .errors import ConvergenceError, InvalidInputError
from .pattern import estimate_yarn_radius
from .solver import (
    ConstraintSet,
    LinearConstraints,
    PatchMinimizer,
    SolverConfig,
    TwistConstraint,
    SeamBend,
    _seam_records,
    detect_contacts,
    embedded_ghost_transforms,
    seam_exclusions,
)


def max_penetration(state, radius, ghost_transforms=None, exclusions=None):
    """Deepest contact overlap beyond the 2r separation, in meters.

    Uses the solver's default detection margin so the topological-neighbor
    exclusion radius matches the solve; contacts within the margin but not
    overlapping carry depth 0.
    """
    contacts = detect_contacts(
        state, radius, ghost_transforms=ghost_transforms, exclusions=exclusions,
    )
    if not contacts:
        return 0.0
    return max(c.depth for c in contacts)

CSV_FIELDS = (
    "I11",
    "I22",
    "I12",
    "II11",
    "II22",
    "II12",
    "category",
    "energy_density",
    "converged",
    "residual",
)


@dataclass
class EnergyRecord:
    sample: DeformationSample
    energy_density: float
    converged: bool
    residual: float
    iterations: int = 0
    penetration: float = 0.0  # max contact overlap beyond 2r, meters


def _material_coords(rest):
    """Material (x, y) plus out-of-plane offset from the relaxed flat patch."""
    XY = rest.points[:, :2].copy()
    h = rest.points[:, 2] - rest.points[:, 2].mean()
    return XY, h


def tile_on_surface(rest, embedding):
    """Embed the relaxed patch onto the deformed mid-surface.

    Points follow phi(X) + h n(X); each frame is pre-rotated by the surface
    rotation at its edge midpoint so bending targets carry no artificial
    frame strain.
    """
    XY, h = _material_coords(rest)
    out = rest.copy()
    out.points = embedding.map_points(XY, h)
    e = rest.edges
    mids = 0.5 * (XY[e[:, 0]] + XY[e[:, 1]])
    frames = np.empty_like(rest.frames)
    rest_stretch = np.empty_like(rest.rest_stretch)
    for i in range(len(frames)):
        R = embedding.rotation(mids[i])
        qR = quat.from_rotation_matrix(R)
        frames[i] = quat.multiply(qR, rest.frames[i])
        # the rest stretch-shear offset is a world vector; carry it along
        rest_stretch[i] = R @ rest.rest_stretch[i]
    out.frames = frames
    out.rest_stretch = rest_stretch
    return out


def rve_constraints(rest, tiled, embedding, pat):
    """Hard linear rows of the homogenized patch.

    Per yarn, the fluctuation (displacement from the embedded target) sums
    to zero.  Per seam, the fluctuations of the paired endpoints agree after
    rotating each into its local surface frame.
    """
    n = rest.n_points
    XY, _ = _material_coords(rest)
    t = tiled.points
    rows = []
    rhs = []
    for yp in rest.yarn_points:
        A = np.zeros((3, 3 * n))
        for d in range(3):
            A[d, (3 * yp + d)] = 1.0
        rows.append(A)
        rhs.append(t[yp].sum(axis=0))
    for rec in _seam_records(pat, rest):
        pa, pb = rec["point_i"], rec["point_k"]
        Ra = embedding.rotation(XY[pa])
        Rb = embedding.rotation(XY[pb])
        A = np.zeros((3, 3 * n))
        A[:, 3 * pa: 3 * pa + 3] = Ra.T
        A[:, 3 * pb: 3 * pb + 3] = -Rb.T
        rows.append(A)
        rhs.append(Ra.T @ t[pa] - Rb.T @ t[pb])
    return LinearConstraints(np.concatenate(rows), np.concatenate(rhs))


def zero_twist_constraints(state):
    """Per yarn: total interior twist zero, and first twist = last twist."""
    out = []
    joints = state.joints
    edge_yarn = state.edge_yarn
    for yarn in range(len(state.yarn_points)):
        mask = edge_yarn[joints[:, 0]] == yarn
        jy = joints[mask]
        if len(jy) == 0:
            continue
        out.append(TwistConstraint(jy, np.ones(len(jy)), label=f"sum:{yarn}"))
        if len(jy) >= 2:
            out.append(
                TwistConstraint(
                    np.stack([jy[0], jy[-1]]), np.array([1.0, -1.0]),
                    label=f"ends:{yarn}",
                )
            )
    return out


def _seam_bends(rest, pat, embedding, moduli, radius, nu):
    """Seam bend couplings with rest Darboux taken from the flat rest state."""
    I1 = 0.25 * np.pi * radius**4
    I3 = 0.5 * np.pi * radius**4
    out = []
    for rec in _seam_records(pat, rest):
        ea, eb = rec["edge_a"], rec["edge_b"]
        qa, qb = rest.frames[ea], rest.frames[eb]
        u = quat.multiply(quat.conjugate(qa), qb)
        l0 = float(rest.rest_lengths[ea])
        rest_db = (2.0 / l0) * u[1:] / u[0]
        if embedding is None:
            R_off = np.eye(3)
        else:
            R_off, _ = embedding.ghost_transform(rec["offset"])
        E = 0.5 * (moduli[ea] + moduli[eb])
        G = E / (2.0 * (1.0 + nu))
        out.append(
            SeamBend(
                edge_a=ea,
                edge_b=eb,
                rot=quat.from_rotation_matrix(R_off),
                l0=l0,
                rest_darboux=rest_db,
                stiffness=np.array([E * I1 * l0, E * I1 * l0, G * I3 * l0]),
            )
        )
    return out


def _transfer_fluctuation(rest, prev_state, emb_prev, emb_new, tiled_new):
    """Carry a solved fluctuation field from one embedding to another.

    The fluctuation (solved minus embedded target) is rotated into the local
    surface frame of the old embedding and re-applied in the local frame of
    the new one; frames carry their relative rotation the same way.  Used to
    warm-start nearby deformation samples (incremental loading).
    """
    XY, h = _material_coords(rest)
    tile_prev = emb_prev.map_points(XY, h)
    out = tiled_new.copy()
    pts = out.points.copy()
    for i in range(rest.n_points):
        Rp = emb_prev.rotation(XY[i])
        Rn = emb_new.rotation(XY[i])
        pts[i] = tiled_new.points[i] + Rn @ (
            Rp.T @ (prev_state.points[i] - tile_prev[i])
        )
    e = rest.edges
    mids = 0.5 * (XY[e[:, 0]] + XY[e[:, 1]])
    frames = out.frames.copy()
    for i in range(rest.n_edges):
        qp = quat.from_rotation_matrix(emb_prev.rotation(mids[i]))
        qn = quat.from_rotation_matrix(emb_new.rotation(mids[i]))
        fluct = quat.multiply(quat.conjugate(qp), prev_state.frames[i])
        frames[i] = quat.multiply(qn, fluct)
    out.points = pts
    out.frames = frames
    return out


def homogenize_sample(rest, pat, spec, sample, config=None, radius=None,
                      warm_start=None, return_state=False):
    """Solve one deformation sample; returns an EnergyRecord.

    warm_start, if given, is a (sample, solved_state) pair from a nearby
    deformation; its fluctuation field seeds the minimization.  With
    return_state the solved RodState is returned alongside the record
    (None when the solve fails).
    """
    config = config or SolverConfig()
    if radius is None:
        radius = estimate_yarn_radius(pat, spec)
    embedding = embed_surface(sample, period=pat.period)
    tiled = tile_on_surface(rest, embedding)
    init = tiled
    if warm_start is not None:
        prev_sample, prev_state = warm_start
        emb_prev = embed_surface(prev_sample, period=pat.period)
        init = _transfer_fluctuation(rest, prev_state, emb_prev, embedding, tiled)
    linear = rve_constraints(rest, tiled, embedding, pat)
    twists = zero_twist_constraints(rest)
    ghosts = embedded_ghost_transforms(embedding, pat.period)

    def stiffness_provider(st):
        ps = rod.biphasic_patch_stiffness(st, spec.k1, spec.k2, spec.poisson, radius)
        moduli = rod.biphasic_edge_moduli(st, spec.k1, spec.k2)
        seam_bends = _seam_bends(rest, pat, embedding, moduli, radius, spec.poisson)
        for sb, new in zip(cset.seam_bends, seam_bends):
            sb.stiffness = new.stiffness
        return ps

    moduli0 = rod.biphasic_edge_moduli(init, spec.k1, spec.k2)
    cset = ConstraintSet(
        linear=linear,
        twists=twists,
        seam_bends=_seam_bends(rest, pat, embedding, moduli0, radius, spec.poisson),
        ghost_transforms=ghosts,
        contact_radius=radius,
        friction=spec.friction,
        exclusions=seam_exclusions(pat, rest, radius=radius),
    )
    area = pat.period[0] * pat.period[1]
    mini = PatchMinimizer(init, cset, config, stiffness_provider)
    try:
        solved, energy = mini.solve()
    except ConvergenceError as err:
        resid = mini.diagnostics["max_hard_residual"][-1] if mini.diagnostics[
            "max_hard_residual"
        ] else np.inf
        energy = mini.diagnostics["energy"][-1] if mini.diagnostics["energy"] else np.nan
        rec = EnergyRecord(
            sample=sample,
            energy_density=energy / area,
            converged=False,
            residual=float(resid),
            iterations=len(mini.diagnostics["outer"]),
        )
        return (rec, None) if return_state else rec
    resid = mini.diagnostics["max_hard_residual"][-1]
    rec = EnergyRecord(
        sample=sample,
        energy_density=energy / area,
        converged=True,
        residual=float(resid),
        iterations=len(mini.diagnostics["outer"]),
        penetration=max_penetration(
            solved, radius, ghost_transforms=ghosts, exclusions=cset.exclusions
        ),
    )
    return (rec, solved) if return_state else rec


def _worker(args):
    return homogenize_sample(*args)


def run_homogenization(rest, pat, spec, samples, config=None, radius=None, jobs=1):
    """Homogenize every sample; failed solves are kept with converged=False.

    The serial path (jobs == 1) applies incremental loading: samples are
    solved outward from the identity, each warm-started from the nearest
    already-solved sample of its category when that is closer than the rest
    state.  Records come back in the order of `samples` either way.
    """
    config = config or SolverConfig()
    if radius is None:
        radius = estimate_yarn_radius(pat, spec)
    if jobs > 1:
        tasks = [(rest, pat, spec, s, config, radius) for s in samples]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_worker, tasks))

    length = float(np.sqrt(pat.period[0] * pat.period[1]))

    def dist(sa, sb=None):
        Ib = np.eye(2) if sb is None else sb.first_form
        IIb = np.zeros((2, 2)) if sb is None else sb.second_form
        return float(
            np.linalg.norm(sa.first_form - Ib)
            + length * np.linalg.norm(sa.second_form - IIb)
        )

    order = sorted(range(len(samples)), key=lambda i: dist(samples[i]))
    records = [None] * len(samples)
    solved = []
    for i in order:
        s = samples[i]
        best, best_d = None, dist(s)  # cold start == rest state at identity
        for prev_sample, prev_state in solved:
            if prev_sample.category != s.category:
                continue
            d = dist(s, prev_sample)
            if d < best_d:
                best_d, best = d, (prev_sample, prev_state)
        rec, st = homogenize_sample(
            rest, pat, spec, s, config, radius,
            warm_start=best, return_state=True,
        )
        records[i] = rec
        if rec.converged and st is not None:
            solved.append((s, st))
    return records


# ---------------------------------------------------------------------------
# CSV I/O


def write_energy_records(records, path_or_file):
    close = False
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        f = open(path_or_file, "w", newline="")
        close = True
    else:
        f = path_or_file
    try:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in records:
            I, II = r.sample.first_form, r.sample.second_form
            w.writerow(
                {
                    "I11": repr(float(I[0, 0])),
                    "I22": repr(float(I[1, 1])),
                    "I12": repr(float(I[0, 1])),
                    "II11": repr(float(II[0, 0])),
                    "II22": repr(float(II[1, 1])),
                    "II12": repr(float(II[0, 1])),
                    "category": r.sample.category,
                    "energy_density": repr(float(r.energy_density)),
                    "converged": int(r.converged),
                    "residual": repr(float(r.residual)),
                }
            )
    finally:
        if close:
            f.close()


def read_energy_records(path_or_file):
    close = False
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        f = open(path_or_file, "r", newline="")
        close = True
    else:
        f = path_or_file
    try:
        out = []
        for row in csv.DictReader(f):
            I = np.array(
                [
                    [float(row["I11"]), float(row["I12"])],
                    [float(row["I12"]), float(row["I22"])],
                ]
            )
            II = np.array(
                [
                    [float(row["II11"]), float(row["II12"])],
                    [float(row["II12"]), float(row["II22"])],
                ]
            )
            sample = DeformationSample(I, II, row["category"])
            out.append(
                EnergyRecord(
                    sample=sample,
                    energy_density=float(row["energy_density"]),
                    converged=bool(int(row["converged"])),
                    residual=float(row["residual"]),
                )
            )
        return out
    finally:
        if close:
            f.close()
