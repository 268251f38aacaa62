"""Stiffness fit: design rows, weights, recovery, rank diagnostics."""

import numpy as np
import pytest

from yarnshell.embedding import bending_sample, identity_sample, membrane_sample
from yarnshell.errors import InvalidInputError, UnderdeterminedFitError
from yarnshell.fitter import (
    FitConfig,
    design_row,
    estimate_thickness,
    fit,
    sample_weight,
)
from yarnshell.homogenize import EnergyRecord

GAMMA = {
    "s00": 2.4e5, "s01": 3.1e4, "s11": 1.7e5, "s22": 2.2e4,
    "b00": 6.3e3, "b11": 4.1e3, "b22": 9.7e2, "b01": 5.5e2,
}
H = 5e-4


def synth_records(samples, gamma=GAMMA, h=H):
    """Energy records synthesized exactly from the linear model."""
    out = []
    for s in samples:
        row = design_row(s, h, include_b01=True)
        g = np.array([gamma[k] for k in
                      ("s00", "s01", "s11", "s22", "b00", "b11", "b22", "b01")])
        out.append(EnergyRecord(sample=s, energy_density=float(row @ g),
                                converged=True, residual=0.0))
    return out


def full_battery():
    return [
        identity_sample(),
        membrane_sample(np.diag([1.21, 1.0]), "stretch_weft"),
        membrane_sample(np.diag([0.81, 1.0]), "stretch_weft"),
        membrane_sample(np.diag([1.0, 1.21]), "stretch_warp"),
        membrane_sample(np.diag([1.0, 0.81]), "stretch_warp"),
        membrane_sample(np.diag([1.1, 1.2]), "biaxial"),
        membrane_sample(np.diag([1.25, 0.9]), "biaxial"),
        membrane_sample(np.array([[1.0, 0.2], [0.2, 1.0]]), "shear"),
        membrane_sample(np.array([[1.0, -0.15], [-0.15, 1.0]]), "shear"),
        bending_sample(np.diag([150.0, 0.0]), "bend_weft"),
        bending_sample(np.diag([-90.0, 0.0]), "bend_weft"),
        bending_sample(np.diag([0.0, 120.0]), "bend_warp"),
        bending_sample(np.full((2, 2), 100.0), "bend_bias"),
        # one non-developable row separates b01 from b22 (k0 k1 != k2^2)
        bending_sample(np.diag([80.0, 60.0]), "bend_warp"),
    ]


def test_design_row_formula():
    row = design_row(membrane_sample(np.diag([1.21, 0.9]), "biaxial"), h=2e-3)
    e0, e1 = 0.21, -0.1
    h = 2e-3
    assert np.allclose(row[:4], [0.5 * h * e0**2, h * e0 * e1,
                                 0.5 * h * e1**2, 0.0])
    assert np.allclose(row[4:], 0.0)
    brow = design_row(bending_sample(np.full((2, 2), 50.0), "bend_bias"),
                      h=h, include_b01=True)
    assert np.allclose(brow[:4], 0.0)
    k = 50.0
    assert np.allclose(
        brow[4:],
        [0.5 * h**3 * k**2, 0.5 * h**3 * k**2, 0.5 * h**3 * k**2, h**3 * k**2],
    )


def test_weight_decreases_with_strain():
    cfg = FitConfig()
    w0 = sample_weight(identity_sample(), cfg)
    w1 = sample_weight(membrane_sample(np.diag([1.21, 1.0]), "stretch_weft"), cfg)
    w2 = sample_weight(membrane_sample(np.diag([1.69, 1.0]), "stretch_weft"), cfg)
    assert w0 == 1.0
    assert w0 > w1 > w2 > 0.0


def test_recovery_with_b01():
    recs = synth_records(full_battery())
    params, report = fit(recs, FitConfig(include_b01=True), h=H)
    for k, v in GAMMA.items():
        assert getattr(params, k) == pytest.approx(v, rel=1e-9)
    assert report["spd_ok"]
    assert report["flags"] == []


def test_recovery_without_b01_on_b01_free_truth():
    gamma = dict(GAMMA, b01=0.0)
    recs = synth_records(full_battery(), gamma=gamma)
    params, report = fit(recs, FitConfig(include_b01=False), h=H)
    for k in ("s00", "s01", "s11", "s22", "b00", "b11", "b22"):
        assert getattr(params, k) == pytest.approx(gamma[k], rel=1e-9)
    assert params.b01 == 0.0


def test_collinear_flag_on_developable_only_bending():
    """Developable bending (k0 k1 = k2^2 on every row) cannot split b01/b22."""
    samples = [s for s in full_battery()
               if not np.allclose(s.second_form, np.diag([80.0, 60.0]))]
    recs = synth_records(samples)
    params, report = fit(recs, FitConfig(include_b01=True), h=H)
    assert set(report["bending"]["collinear"]) == {"b22", "b01"}
    assert any(f.startswith("collinear") for f in report["flags"])


def test_underdetermined_without_bias_bending():
    samples = [s for s in full_battery()
               if s.category not in ("bend_bias",)
               and not np.allclose(s.second_form, np.diag([80.0, 60.0]))]
    recs = synth_records(samples)
    with pytest.raises(UnderdeterminedFitError) as err:
        fit(recs, FitConfig(include_b01=True), h=H)
    assert set(err.value.unidentifiable) == {"b22", "b01"}


def test_membrane_only_records_raise():
    samples = [s for s in full_battery() if not s.is_bending]
    recs = synth_records(samples)
    with pytest.raises((UnderdeterminedFitError, InvalidInputError)):
        fit(recs, FitConfig(), h=H)


def test_weight_scale_invariance():
    """Scaling both sigmas leaves an exactly-consistent fit unchanged."""
    recs = synth_records(full_battery())
    p1, _ = fit(recs, FitConfig(include_b01=True), h=H)
    p2, _ = fit(recs, FitConfig(sigma_membrane=0.45, sigma_bending=300.0,
                                include_b01=True), h=H)
    for k in GAMMA:
        assert getattr(p1, k) == pytest.approx(getattr(p2, k), rel=1e-9)


def test_unconverged_records_excluded():
    recs = synth_records(full_battery())
    poisoned = [
        EnergyRecord(sample=r.sample, energy_density=1e9, converged=False,
                     residual=np.inf)
        for r in recs
    ]
    params, report = fit(recs + poisoned, FitConfig(include_b01=True), h=H)
    for k, v in GAMMA.items():
        assert getattr(params, k) == pytest.approx(v, rel=1e-9)
    assert report["n_converged"] == len(recs)


def test_spd_projection_flagged():
    gamma = dict(GAMMA, s22=-5e3)  # unstable shear response
    recs = synth_records(full_battery(), gamma=gamma)
    with pytest.warns(UserWarning, match="not SPD"):
        params, report = fit(recs, FitConfig(include_b01=True), h=H)
    assert "membrane_not_spd" in report["flags"]
    assert params.s22 > 0.0  # projected
    # the raw (unprojected) estimate is still reported
    assert report["gamma"]["s22"] == pytest.approx(-5e3, rel=1e-9)


def test_thickness_estimate():
    class Dummy:
        points = np.array([[0.0, 0.0, -2e-4], [0.0, 0.0, 3e-4]])

    assert estimate_thickness(Dummy(), 1e-4) == pytest.approx(5e-4 + 2e-4)


def test_fit_requires_positive_h():
    recs = synth_records(full_battery())
    with pytest.raises(InvalidInputError):
        fit(recs, FitConfig(), h=0.0)


def test_nonneg_mode_matches_on_consistent_data():
    recs = synth_records(full_battery())
    p, _ = fit(recs, FitConfig(include_b01=True, nonneg=True), h=H)
    for k in ("s00", "s11", "s22", "b00", "b11", "b22"):
        assert getattr(p, k) == pytest.approx(GAMMA[k], rel=1e-6)
