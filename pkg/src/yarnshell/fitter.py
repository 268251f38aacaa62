"""Gaussian-weighted least-squares fit of shell stiffness to energy records.

The shell energy density is linear in the stiffness coefficients
gamma = (s00, s01, s11, s22, b00, b11, b22[, b01]), so each deformation
sample contributes one linear design row and the fit is a weighted linear
solve.  Membrane and bending rows decouple structurally (no sample mixes
the two strain types), so the two blocks are solved separately for
conditioning.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .errors import InvalidInputError, UnderdeterminedFitError
from .shell import ShellParams

MEMBRANE_COEFFS = ("s00", "s01", "s11", "s22")
BENDING_COEFFS = ("b00", "b11", "b22")
BENDING_COEFFS_B01 = ("b00", "b11", "b22", "b01")

_ZERO_COL_REL = 1e-12
_RANK_REL = 1e-10


@dataclass
class FitConfig:
    """Weighting and mode switches for the stiffness fit.

    Sigmas are the widths of the zero-centered Gaussian sample weights
    (strain units for membrane, 1/m for bending); small deformations are
    more common in wear, so they dominate the fit.
    """

    sigma_membrane: float = 0.15
    sigma_bending: float = 100.0
    include_b01: bool = False
    nonneg: bool = False

    def __post_init__(self):
        if not (self.sigma_membrane > 0.0 and self.sigma_bending > 0.0):
            raise InvalidInputError("fit sigmas must be positive")


def coefficient_names(config):
    return MEMBRANE_COEFFS + (
        BENDING_COEFFS_B01 if config.include_b01 else BENDING_COEFFS
    )


def _strains(sample):
    I = sample.first_form
    e = I - np.eye(2)
    membrane = np.array([e[0, 0], e[1, 1], e[0, 1]])
    II = sample.second_form
    bending = np.array([II[0, 0], II[1, 1], II[0, 1]])
    return membrane, bending


def design_row(sample, h, include_b01=False):
    """Linear coefficients of the shell energy density in gamma.

    The macroscopic element has unit material area and rest first form I,
    so the density is 1/2 h e^T S e + 1/2 h^3 k^T B k with
    e = (Itt-1, Ipp-1, Itp) and k the second-form entries.
    """
    e, k = _strains(sample)
    row = [
        0.5 * h * e[0] ** 2,
        h * e[0] * e[1],
        0.5 * h * e[1] ** 2,
        0.5 * h * e[2] ** 2,
        0.5 * h**3 * k[0] ** 2,
        0.5 * h**3 * k[1] ** 2,
        0.5 * h**3 * k[2] ** 2,
    ]
    if include_b01:
        row.append(h**3 * k[0] * k[1])
    return np.array(row)


def sample_weight(sample, config):
    """Gaussian weight centered at zero strain."""
    e, k = _strains(sample)
    return float(
        np.exp(
            -(e @ e) / (2.0 * config.sigma_membrane**2)
            - (k @ k) / (2.0 * config.sigma_bending**2)
        )
    )


def estimate_thickness(rest_state, radius):
    """Shell thickness convention: relaxed-patch bounding thickness.

    h = (crimp amplitude of the yarn centerlines) + one diameter, i.e. the
    z-extent of the relaxed material.  Energies only constrain h*S and
    h^3*B, so the products are reported alongside gamma.
    """
    return float(np.ptp(rest_state.points[:, 2]) + 2.0 * radius)


def _solve_block(A, rhs, w, names, nonneg):
    """Weighted least squares on one decoupled block, with rank analysis."""
    sw = np.sqrt(w)
    Aw = A * sw[:, None]
    bw = rhs * sw
    col_norms = np.linalg.norm(Aw, axis=0)
    scale = col_norms.max() if len(col_norms) else 0.0
    dead = col_norms <= _ZERO_COL_REL * max(scale, 1e-300)
    if np.any(dead):
        missing = [n for n, d in zip(names, dead) if d]
        raise UnderdeterminedFitError(
            "no sample constrains coefficient(s): " + ", ".join(missing),
            unidentifiable=missing,
        )
    U, s, Vt = np.linalg.svd(Aw, full_matrices=False)
    rank = int(np.sum(s > _RANK_REL * s[0]))
    collinear = []
    if rank < len(names):
        null = Vt[rank:]
        involved = np.any(np.abs(null) > 1e-8, axis=0)
        collinear = [n for n, inv in zip(names, involved) if inv]
    if nonneg:
        x, _ = nnls(Aw, bw)
    else:
        # minimum-norm solution; exact on full-rank noiseless systems
        sinv = np.where(s > _RANK_REL * s[0], 1.0 / np.where(s > 0, s, 1.0), 0.0)
        x = Vt.T @ (sinv * (U.T @ bw))
    resid = Aw @ x - bw
    rss = float(resid @ resid)
    dof = max(len(rhs) - rank, 1)
    sigma2 = rss / dof
    # per-coefficient standard errors from the pseudo-inverse covariance
    sinv = np.where(s > _RANK_REL * s[0], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    cov = (Vt.T * sinv**2) @ Vt
    std_errors = np.sqrt(sigma2 * np.clip(np.diag(cov), 0.0, None))
    cond = float((s[0] / s[rank - 1]) ** 2) if rank > 0 else np.inf
    return x, {
        "residual_norm": float(np.sqrt(rss)),
        "std_errors": dict(zip(names, std_errors.tolist())),
        "condition_number": cond,
        "rank": rank,
        "collinear": collinear,
    }


def fit(records, config=None, h=None):
    """Fit ShellParams to homogenized energy records.

    Returns (params, report).  Only converged records enter the fit.  The
    membrane and bending systems are solved independently; exact
    collinearity between nonzero columns (e.g. b01 vs b22 on purely
    developable bending samples) resolves to the minimum-norm solution and
    is flagged in the report, while coefficients with no constraining
    sample at all raise UnderdeterminedFitError.
    """
    config = config or FitConfig()
    if h is None or not h > 0.0:
        raise InvalidInputError("thickness h must be positive")
    used = [r for r in records if r.converged]
    if not used:
        raise InvalidInputError("no converged records to fit")
    names = coefficient_names(config)
    n_b = len(names) - 4
    rows = np.array(
        [design_row(r.sample, h, config.include_b01) for r in used]
    )
    rhs = np.array([r.energy_density for r in used])
    w = np.array([sample_weight(r.sample, config) for r in used])
    is_bend = np.array(
        [np.any(np.abs(_strains(r.sample)[1]) > 0.0) for r in used]
    )
    mem_rows = ~is_bend & np.any(np.abs(rows[:, :4]) > 0.0, axis=1)
    x_m, rep_m = _solve_block(
        rows[mem_rows, :4], rhs[mem_rows], w[mem_rows], MEMBRANE_COEFFS, config.nonneg
    )
    x_b, rep_b = _solve_block(
        rows[is_bend, 4:], rhs[is_bend], w[is_bend], names[4:], config.nonneg
    )
    gamma = dict(zip(MEMBRANE_COEFFS, x_m.tolist()))
    gamma.update(dict(zip(names[4:], x_b.tolist())))
    gamma.setdefault("b01", 0.0)

    flags = []
    if rep_m["collinear"] or rep_b["collinear"]:
        flags.append("collinear: " + ", ".join(rep_m["collinear"] + rep_b["collinear"]))
    spd_ok = (
        gamma["s00"] > 0.0
        and gamma["s11"] > 0.0
        and gamma["s22"] > 0.0
        and gamma["s00"] * gamma["s11"] - gamma["s01"] ** 2 > 0.0
    )
    fitted = dict(gamma)
    if not spd_ok:
        warnings.warn("fitted membrane block is not SPD; projecting", stacklevel=2)
        flags.append("membrane_not_spd")
        fitted["s00"] = max(fitted["s00"], 1e-12)
        fitted["s11"] = max(fitted["s11"], 1e-12)
        fitted["s22"] = max(fitted["s22"], 1e-12)
        cap = 0.999 * np.sqrt(fitted["s00"] * fitted["s11"])
        fitted["s01"] = float(np.clip(fitted["s01"], -cap, cap))
    bend_psd = all(fitted[k] >= 0.0 for k in ("b00", "b11", "b22")) and (
        fitted["b00"] * fitted["b11"] - fitted["b01"] ** 2 >= 0.0
    )
    if not bend_psd:
        warnings.warn("fitted bending block is not PSD; projecting", stacklevel=2)
        flags.append("bending_not_psd")
        for k in ("b00", "b11", "b22"):
            fitted[k] = max(fitted[k], 0.0)
        cap = np.sqrt(fitted["b00"] * fitted["b11"])
        fitted["b01"] = float(np.clip(fitted["b01"], -cap, cap))
    params = ShellParams(
        s00=fitted["s00"], s01=fitted["s01"], s11=fitted["s11"], s22=fitted["s22"],
        b00=fitted["b00"], b11=fitted["b11"], b22=fitted["b22"], h=h,
        b01=fitted["b01"],
    )
    counts = {}
    for r in used:
        counts[r.sample.category] = counts.get(r.sample.category, 0) + 1
    report = {
        "gamma": gamma,
        "h": h,
        "membrane_matrix_times_h": (h * params.membrane_matrix).tolist(),
        "bending_matrix_times_h3": (h**3 * params.bending_matrix).tolist(),
        "membrane": rep_m,
        "bending": rep_b,
        "residual_norm": float(
            np.hypot(rep_m["residual_norm"], rep_b["residual_norm"])
        ),
        "spd_ok": bool(spd_ok),
        "flags": flags,
        "sample_counts": counts,
        "n_records": len(records),
        "n_converged": len(used),
    }
    return params, report
