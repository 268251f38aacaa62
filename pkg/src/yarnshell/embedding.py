"""Macroscopic deformation samples and deformed mid-surface embeddings.

Membrane samples map material coordinates affinely through the principal
square root of the target first fundamental form.  Bending samples wrap the
patch isometrically onto a cylinder whose curvature direction is the
dominant eigenvector of the target second fundamental form, which therefore
must be rank one (a developable surface; bias bending included).
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import InvalidInputError, InvalidSampleError

CATEGORIES = (
    "stretch_weft",
    "stretch_warp",
    "biaxial",
    "shear",
    "bend_weft",
    "bend_warp",
    "bend_bias",
)

_FORM_TOL = 1e-12


@dataclass(frozen=True)
class DeformationSample:
    """Target first/second fundamental forms plus a category tag.

    Membrane and bending are never combined: whichever form deviates from
    rest, the other stays at its rest value.
    """

    first_form: np.ndarray
    second_form: np.ndarray
    category: str

    def __post_init__(self):
        I = np.asarray(self.first_form, dtype=float).reshape(2, 2)
        II = np.asarray(self.second_form, dtype=float).reshape(2, 2)
        object.__setattr__(self, "first_form", I)
        object.__setattr__(self, "second_form", II)
        if self.category not in CATEGORIES:
            raise InvalidInputError(f"unknown category {self.category!r}")
        if abs(I[0, 1] - I[1, 0]) > _FORM_TOL or abs(II[0, 1] - II[1, 0]) > _FORM_TOL:
            raise InvalidInputError("fundamental forms must be symmetric")
        membrane_active = not np.allclose(I, np.eye(2), atol=_FORM_TOL)
        bending_active = not np.allclose(II, 0.0, atol=_FORM_TOL)
        if membrane_active and bending_active:
            raise InvalidInputError("membrane and bending may not be sampled jointly")
        if self.category == "shear":
            if abs(I[0, 0] - 1.0) > _FORM_TOL or abs(I[1, 1] - 1.0) > _FORM_TOL:
                raise InvalidInputError("shear samples must keep unit diagonal")
        if self.category in ("stretch_weft", "stretch_warp", "biaxial"):
            if abs(I[0, 1]) > _FORM_TOL:
                raise InvalidInputError("stretch samples must have zero I12")
        if self.category == "bend_bias" and bending_active:
            mags = np.abs([II[0, 0], II[1, 1], II[0, 1]])
            if np.ptp(mags) > 1e-9 * max(mags.max(), 1.0) or mags.max() == 0.0:
                raise InvalidInputError("bias bending needs |II11| = |II22| = |II12| != 0")

    @property
    def is_bending(self):
        return not np.allclose(self.second_form, 0.0, atol=_FORM_TOL)

    @property
    def is_identity(self):
        return np.allclose(self.first_form, np.eye(2), atol=_FORM_TOL) and not self.is_bending

    def strain_norm(self):
        """Frobenius norm of the active strain (I - I_rest or II)."""
        if self.is_bending:
            return float(np.linalg.norm(self.second_form))
        return float(np.linalg.norm(self.first_form - np.eye(2)))

    def key(self):
        I, II = self.first_form, self.second_form
        return (
            self.category,
            round(I[0, 0], 12),
            round(I[1, 1], 12),
            round(I[0, 1], 12),
            round(II[0, 0], 12),
            round(II[1, 1], 12),
            round(II[0, 1], 12),
        )


def membrane_sample(I, category):
    return DeformationSample(np.asarray(I, dtype=float), np.zeros((2, 2)), category)


def bending_sample(II, category):
    return DeformationSample(np.eye(2), np.asarray(II, dtype=float), category)


def identity_sample():
    return DeformationSample(np.eye(2), np.zeros((2, 2)), "biaxial")


# ---------------------------------------------------------------------------
# Sampling grid


@dataclass
class SamplingConfig:
    stretch_min: float = 0.90
    stretch_max: float = 1.30
    n_stretch: int = 11
    n_biaxial: int = 5
    shear_max: float = 0.30
    n_shear: int = 11
    curvature_max: float = 200.0
    n_bend: int = 11

    def __post_init__(self):
        if self.stretch_min <= 0 or self.stretch_max <= self.stretch_min:
            raise InvalidInputError("invalid stretch range")
        if self.n_stretch < 2 or self.n_biaxial < 2 or self.n_shear < 2 or self.n_bend < 2:
            raise InvalidInputError("sample counts must be >= 2")
        if self.shear_max <= 0 or self.curvature_max <= 0:
            raise InvalidInputError("invalid shear/curvature range")


def sample_deformation_grid(config=None):
    """Deformation samples on the configured grid, identity included once."""
    cfg = config or SamplingConfig()
    out = [identity_sample()]
    seen = {out[0].key()[1:]}  # dedupe on form values regardless of category

    def push(sample):
        if sample.key()[1:] not in seen:
            seen.add(sample.key()[1:])
            out.append(sample)

    stretches = np.linspace(cfg.stretch_min, cfg.stretch_max, cfg.n_stretch)
    for lam in stretches:
        push(membrane_sample(np.diag([lam * lam, 1.0]), "stretch_weft"))
    for lam in stretches:
        push(membrane_sample(np.diag([1.0, lam * lam]), "stretch_warp"))
    biax = np.linspace(cfg.stretch_min, cfg.stretch_max, cfg.n_biaxial)
    for l1 in biax:
        for l2 in biax:
            push(membrane_sample(np.diag([l1 * l1, l2 * l2]), "biaxial"))
    for s in np.linspace(-cfg.shear_max, cfg.shear_max, cfg.n_shear):
        push(membrane_sample(np.array([[1.0, s], [s, 1.0]]), "shear"))
    kappas = np.linspace(-cfg.curvature_max, cfg.curvature_max, cfg.n_bend)
    for k in kappas:
        if k != 0.0:
            push(bending_sample(np.diag([k, 0.0]), "bend_weft"))
    for k in kappas:
        if k != 0.0:
            push(bending_sample(np.diag([0.0, k]), "bend_warp"))
    for k in kappas:
        if k != 0.0:
            push(bending_sample(np.array([[k, k], [k, k]]), "bend_bias"))
    return out


# ---------------------------------------------------------------------------
# Embeddings


@dataclass
class SurfaceEmbedding:
    """Mid-surface map phi(X) with per-point rotation field R(X).

    Affine membrane maps use kind="membrane" with F the in-plane linear map;
    bending maps use kind="cylinder" with unit direction u (in-plane), axis
    direction v = perp(u), and cylinder curvature kappa.
    """

    kind: str
    F: np.ndarray = None
    u: np.ndarray = None
    kappa: float = 0.0
    sample: DeformationSample = None
    period: tuple = None

    @property
    def v(self):
        return np.array([-self.u[1], self.u[0]])

    def map_point(self, X, h=0.0):
        """phi(X) + h * n(X) for material coordinate X (2-vector)."""
        X = np.asarray(X, dtype=float)
        if self.kind == "membrane":
            xy = self.F @ X
            return np.array([xy[0], xy[1], h])
        s = float(self.u @ X)
        t = float(self.v @ X)
        k = self.kappa
        U = np.array([self.u[0], self.u[1], 0.0])
        V = np.array([self.v[0], self.v[1], 0.0])
        Z = np.array([0.0, 0.0, 1.0])
        phi = (np.sin(k * s) / k) * U + t * V + ((1.0 - np.cos(k * s)) / k) * Z
        n = -np.sin(k * s) * U + np.cos(k * s) * Z
        return phi + h * n

    def map_points(self, XY, h):
        """Vectorized map_point over rows of XY (n,2) with offsets h (n,)."""
        XY = np.asarray(XY, dtype=float)
        h = np.asarray(h, dtype=float)
        if self.kind == "membrane":
            xy = XY @ self.F.T
            return np.column_stack([xy, h])
        s = XY @ self.u
        t = XY @ self.v
        k = self.kappa
        U = np.array([self.u[0], self.u[1], 0.0])
        V = np.array([self.v[0], self.v[1], 0.0])
        Z = np.array([0.0, 0.0, 1.0])
        phi = (
            (np.sin(k * s) / k)[:, None] * U
            + t[:, None] * V
            + ((1.0 - np.cos(k * s)) / k)[:, None] * Z
        )
        n = -np.sin(k * s)[:, None] * U + np.cos(k * s)[:, None] * Z
        return phi + h[:, None] * n

    def rotation(self, X):
        """Rotation of the local surface frame at X (3x3)."""
        if self.kind == "membrane":
            return np.eye(3)
        s = float(np.asarray(X, dtype=float) @ self.u)
        return self._rotation_for_arc(self.kappa * s)

    def _rotation_for_arc(self, angle):
        U = np.array([self.u[0], self.u[1], 0.0])
        V = np.array([self.v[0], self.v[1], 0.0])
        Z = np.array([0.0, 0.0, 1.0])
        rs = np.cos(angle) * U + np.sin(angle) * Z
        n = -np.sin(angle) * U + np.cos(angle) * Z
        return np.outer(rs, U) + np.outer(V, V) + np.outer(n, Z)

    def ghost_transform(self, offset, period=None):
        """Affine map (R_off, t_off) moving a deformed point one tile over.

        Requires the pattern period; x_ghost = R_off @ x + t_off.
        """
        period = period if period is not None else self.period
        if period is None:
            raise InvalidInputError("ghost_transform needs the pattern period")
        delta = np.array([offset[0] * period[0], offset[1] * period[1]])
        if self.kind == "membrane":
            t = self.F @ delta
            return np.eye(3), np.array([t[0], t[1], 0.0])
        angle = self.kappa * float(self.u @ delta)
        R_off = self._rotation_for_arc(angle)
        t_off = self.map_point(delta, 0.0) - R_off @ self.map_point(np.zeros(2), 0.0)
        return R_off, t_off

    def numeric_fundamental_forms(self, X, step=1e-6):
        """Finite-difference first/second forms of the embedded surface at X."""
        X = np.asarray(X, dtype=float)

        def phi(p):
            return self.map_point(p, 0.0)

        e0, e1 = np.eye(2)
        g0 = (phi(X + step * e0) - phi(X - step * e0)) / (2 * step)
        g1 = (phi(X + step * e1) - phi(X - step * e1)) / (2 * step)
        J = np.stack([g0, g1], axis=1)
        I = J.T @ J
        n = np.cross(g0, g1)
        n = n / np.linalg.norm(n)
        h00 = (phi(X + step * e0) - 2 * phi(X) + phi(X - step * e0)) / step**2
        h11 = (phi(X + step * e1) - 2 * phi(X) + phi(X - step * e1)) / step**2
        h01 = (
            phi(X + step * (e0 + e1))
            - phi(X + step * (e0 - e1))
            - phi(X - step * (e0 - e1))
            + phi(X - step * (e0 + e1))
        ) / (4 * step**2)
        II = np.array([[h00 @ n, h01 @ n], [h01 @ n, h11 @ n]])
        return I, II


def embed_surface(sample, period=None):
    """Construct the mid-surface embedding realizing a deformation sample."""
    if sample.is_bending:
        II = sample.second_form
        evals, evecs = np.linalg.eigh(II)
        idx = int(np.argmax(np.abs(evals)))
        other = 1 - idx
        if abs(evals[other]) > 1e-9 * abs(evals[idx]):
            raise InvalidSampleError(
                "second fundamental form is not rank one (non-developable)"
            )
        kappa = float(evals[idx])
        u = evecs[:, idx]
        # canonical orientation for determinism
        if u[0] < 0 or (u[0] == 0 and u[1] < 0):
            u = -u
        if period is not None:
            extent = abs(u[0]) * period[0] + abs(u[1]) * period[1]
            if abs(kappa) * extent >= 2.0 * np.pi:
                raise InvalidSampleError(
                    "curvature too large: the period exceeds the cylinder circumference"
                )
        return SurfaceEmbedding(kind="cylinder", u=u, kappa=kappa, sample=sample, period=period)
    F = scipy.linalg.sqrtm(sample.first_form).real
    return SurfaceEmbedding(kind="membrane", F=F, sample=sample, period=period)
