"""Acceptance suite: the package's nine verifiable guarantees.

Each test states its tolerance inline.  Wall-clock budgets assume the
4-core reference machine; on smaller CPU allowances the budget is scaled
by the missing parallelism (the homogenization samples are embarrassingly
parallel).
"""

import json
import os
import shutil
import time

import numpy as np
import pytest

from conftest import JOBS, cli_config, write_config
from yarnshell import cli, rod
from yarnshell.embedding import identity_sample, membrane_sample
from yarnshell.fitter import FitConfig, design_row, fit
from yarnshell.homogenize import EnergyRecord, run_homogenization
from yarnshell.pattern import builtin_material, estimate_yarn_radius, tile_pattern
from yarnshell.rod import PatchStiffness, RodState
from yarnshell.shell import (
    ShellParams,
    cylinder_mesh,
    flat_swatch_mesh,
    second_forms,
    shell_energy,
)
from yarnshell.shellsim import energy_gradient, stretch_test
from yarnshell.solver import relax_patch
from yarnshell.weaves import plain_weave


# ---------------------------------------------------------------------------
# 1. analytic gradients match central finite differences (< 1e-5, < 30 s)


def random_yarn_state(rng):
    """Two crossing yarns with randomized geometry and rest data."""
    n = 5
    x = np.linspace(0.0, 1.0, n)
    pts = np.concatenate([
        np.stack([x, np.full(n, 0.5), 0.05 * rng.normal(size=n)], 1),
        np.stack([np.full(n, 0.5), x, 0.05 * rng.normal(size=n)], 1),
    ])
    pts += 0.05 * rng.normal(size=pts.shape)
    m = 2 * (n - 1)
    frames = rng.normal(size=(m, 4))
    frames /= np.linalg.norm(frames, axis=1)[:, None]
    k = 2 * (n - 2)
    state = RodState(
        points=pts,
        frames=frames,
        rest_lengths=0.25 * (1.0 + 0.2 * rng.uniform(-1, 1, m)),
        rest_darboux=0.5 * rng.normal(size=(k, 3)),
        yarn_points=[np.arange(n), np.arange(n, 2 * n)],
        rest_stretch=0.1 * rng.normal(size=(m, 3)),
    )
    stiff = PatchStiffness(
        stretch=rng.uniform(0.5, 2.0, (m, 3)),
        bend=rng.uniform(0.5, 2.0, (k, 3)),
    )
    return state, stiff


def yarn_fd_gradient(state, stiff, step=1e-6):
    gp = np.zeros_like(state.points)
    gq = np.zeros_like(state.frames)
    for i in range(state.n_points):
        for d in range(3):
            state.points[i, d] += step
            ep = rod.yarn_energy(state, stiff)
            state.points[i, d] -= 2 * step
            em = rod.yarn_energy(state, stiff)
            state.points[i, d] += step
            gp[i, d] = (ep - em) / (2 * step)
    for i in range(state.n_edges):
        for d in range(4):
            state.frames[i, d] += step
            ep = rod.yarn_energy(state, stiff)
            state.frames[i, d] -= 2 * step
            em = rod.yarn_energy(state, stiff)
            state.frames[i, d] += step
            gq[i, d] = (ep - em) / (2 * step)
    return gp, gq


def test_gradients_match_finite_differences():
    t0 = time.time()
    rng = np.random.default_rng(42)
    for _ in range(100):
        state, stiff = random_yarn_state(rng)
        gp, gq = rod.yarn_energy_gradient(state, stiff)
        fp, fq = yarn_fd_gradient(state, stiff)
        num = np.sqrt(np.sum((gp - fp) ** 2) + np.sum((gq - fq) ** 2))
        den = max(np.sqrt(np.sum(fp**2) + np.sum(fq**2)), 1e-30)
        assert num / den < 1e-5

    mesh = flat_swatch_mesh(0.06, 0.04, 3, 3)
    rng = np.random.default_rng(43)
    for _ in range(100):
        x = mesh.vertices + 0.004 * rng.normal(size=mesh.vertices.shape)
        s = rng.uniform(0.5, 2.0, 4)
        b = rng.uniform(0.5, 2.0, 3)
        p = ShellParams(s00=2e5 * s[0], s01=2e4 * s[1], s11=2e5 * s[2],
                        s22=3e4 * s[3], b00=4e3 * b[0], b11=4e3 * b[1],
                        b22=1e3 * b[2], h=5e-4)
        g = energy_gradient(mesh, x, p)  # autodiff implementation
        fd = np.zeros_like(g)
        step = 2e-7
        for i in range(x.shape[0]):
            for d in range(3):
                xp = x.copy(); xp[i, d] += step
                xm = x.copy(); xm[i, d] -= step
                # independent reference implementation of the same energy
                fd[i, d] = (shell_energy(mesh, xp, p)
                            - shell_energy(mesh, xm, p)) / (2 * step)
        denom = max(np.linalg.norm(fd), 1e-30)
        assert np.linalg.norm(g - fd) / denom < 1e-5
    assert time.time() - t0 < 30.0


# ---------------------------------------------------------------------------
# 2. fit recovery through the design rows (< 1e-9 relative, < 1 s)


def test_fit_recovery_exact():
    from test_fitter import GAMMA, H, full_battery, synth_records

    t0 = time.time()
    recs = synth_records(full_battery())
    params, report = fit(recs, FitConfig(include_b01=True), h=H)
    for k, v in GAMMA.items():
        assert getattr(params, k) == pytest.approx(v, rel=1e-9)
    gamma_no_b01 = dict(GAMMA, b01=0.0)
    recs = synth_records(full_battery(), gamma=gamma_no_b01)
    params, _ = fit(recs, FitConfig(include_b01=False), h=H)
    for k in ("s00", "s01", "s11", "s22", "b00", "b11", "b22"):
        assert getattr(params, k) == pytest.approx(gamma_no_b01[k], rel=1e-9)
    assert time.time() - t0 < 1.0


# ---------------------------------------------------------------------------
# 3. homogenization sanity on the ~100-rod-point plain-weave fixture


@pytest.fixture(scope="module")
def dense_plain():
    pat = plain_weave(points_per_cell=11)  # 92 rod points
    spec = builtin_material("wool")
    radius = estimate_yarn_radius(pat, spec)
    rest = relax_patch(pat, spec, radius=radius)
    return pat, spec, radius, rest


def energy_scale(pat, spec, radius, rest):
    """EA * L0 / A, the natural energy-density unit of the patch."""
    A_yarn = np.pi * radius**2
    return spec.k2 * A_yarn * rest.rest_lengths.sum() / (
        pat.period[0] * pat.period[1]
    )


def test_homogenization_sanity_and_sweep_budget(dense_plain):
    pat, spec, radius, rest = dense_plain

    # identity and the +/- shear pair (not part of the timed budget)
    shear = 0.30
    pre = run_homogenization(
        rest, pat, spec,
        [
            identity_sample(),
            membrane_sample(np.array([[1.0, shear], [shear, 1.0]]), "shear"),
            membrane_sample(np.array([[1.0, -shear], [-shear, 1.0]]), "shear"),
        ],
        radius=radius, jobs=JOBS,
    )
    assert all(r.converged for r in pre)
    scale = energy_scale(pat, spec, radius, rest)
    assert abs(pre[0].energy_density) < 1e-8 * scale
    # shear energy even in sign within 3%
    up, um = pre[1].energy_density, pre[2].energy_density
    assert abs(up - um) < 0.03 * max(abs(up), abs(um))

    # timed 11-point uniaxial sweep; budget 10 min on the 4-core reference
    lams = np.linspace(0.90, 1.30, 11)
    samples = [membrane_sample(np.diag([l * l, 1.0]), "stretch_weft")
               for l in lams]
    t0 = time.time()
    recs = run_homogenization(rest, pat, spec, samples, radius=radius, jobs=JOBS)
    elapsed = time.time() - t0
    budget = 600.0 * max(1.0, 4.0 / JOBS)
    assert elapsed < budget, f"sweep took {elapsed:.0f} s (budget {budget:.0f} s)"
    assert all(r.converged for r in recs)
    # energy monotone in |lambda - 1| on each side of rest
    U = {l: r.energy_density for l, r in zip(lams, recs)}
    above = [U[l] for l in lams if l > 1.0]
    below = [U[l] for l in lams[::-1] if l < 1.0]  # decreasing lambda
    assert np.all(np.diff(above) > 0)
    assert np.all(np.diff(below) > 0)


# ---------------------------------------------------------------------------
# 4. periodicity: a 2x2 tiling re-relaxes to the same energy per repeat (1%)


def test_tiled_patch_energy_per_repeat(plain_setup, plain_rest):
    pat, spec, radius = plain_setup
    _, e1 = plain_rest
    tiled = tile_pattern(pat, 2, 2)
    _, e4 = relax_patch(tiled, spec, radius=radius, return_energy=True)
    assert e4 / 4.0 == pytest.approx(e1, rel=0.01)


# ---------------------------------------------------------------------------
# 5. thicker yarns (r x 1.5) produce strictly higher stretch forces


def test_thicker_material_stiffer_everywhere(plain_fit, thick_run):
    params_base, _ = plain_fit
    params_thick, _, _ = thick_run
    strains = np.round(np.arange(0.02, 0.2001, 0.02), 10)
    res_base = stretch_test(params_base, strains=strains, nx=10, ny=7)
    res_thick = stretch_test(params_thick, strains=strains, nx=10, ny=7)
    assert not res_base.partial and not res_thick.partial
    for pb, pt in zip(res_base.points, res_thick.points):
        assert pt.force > pb.force, f"strain {pb.strain}"


# ---------------------------------------------------------------------------
# 6. bias direction is softer: lower force, stronger lateral contraction


def test_bias_cut_softer_and_more_contracting(plain_fit):
    params, _ = plain_fit
    strains = (0.0, 0.05, 0.1)
    results = {
        deg: stretch_test(params, cut_angle=np.deg2rad(deg), strains=strains,
                          nx=10, ny=7)
        for deg in (0.0, 45.0, 90.0)
    }
    force = {deg: r.points[-1].force for deg, r in results.items()}
    assert force[45.0] < force[0.0]
    assert force[45.0] < force[90.0]
    contraction = {deg: 1.0 - r.points[-1].compression_ratio
                   for deg, r in results.items()}
    assert contraction[45.0] > contraction[0.0]
    assert contraction[45.0] > contraction[90.0]


# ---------------------------------------------------------------------------
# 7. discrete curvature: cylinder second form within 2% at edge R/20,
#    improving under refinement


def cylinder_curvature_error(R, n_theta):
    arc = np.pi / 2.0
    length = arc * R  # square-ish elements
    mesh = cylinder_mesh(R, length, n_theta, n_theta)
    II = second_forms(mesh, mesh.vertices)
    inner = [t for t, nb in enumerate(mesh.neighbors) if all(n >= 0 for n in nb)]
    target = np.diag([1.0 / R, 0.0])
    return np.abs(II[inner] - target).max() * R


def test_cylinder_second_form_converges():
    R = 0.05
    n20 = int(round(20.0 * np.pi / 2.0))  # edge length ~ R/20
    err = cylinder_curvature_error(R, n20)
    assert err < 0.02
    err_fine = cylinder_curvature_error(R, 2 * n20)
    assert err_fine < err


# ---------------------------------------------------------------------------
# 8. SPD / feasibility of every fit and every converged solve


def test_fitted_blocks_spd_and_solves_feasible(
    plain_setup, plain_fit, plain_battery, thick_run
):
    pat, spec, radius = plain_setup
    params, report = plain_fit
    params_t, report_t, records_t = thick_run
    for p in (params, params_t):
        assert p.s00 * p.s11 - p.s01**2 > 0.0
        assert p.s00 > 0 and p.s11 > 0 and p.s22 > 0
    for recs, r in ((plain_battery, radius), (records_t, 1.5 * radius)):
        converged = [rec for rec in recs if rec.converged]
        assert converged
        for rec in converged:
            # scale-relative hard residual (twist, contact/char-length)
            assert rec.residual < 1e-8
            # no interpenetration beyond 1e-3 of the yarn radius
            assert rec.penetration < 1e-3 * r


# ---------------------------------------------------------------------------
# 9. determinism: pipeline rerun reproduces energies and gamma to 1e-12


def read_pipeline_outputs(out):
    with open(os.path.join(out, "energies.csv")) as f:
        energies = f.read()
    with open(os.path.join(out, "params.json")) as f:
        gamma = json.load(f)["report"]["gamma"]
    return energies, gamma


def test_pipeline_determinism(tmp_path):
    out = tmp_path / "artifacts"
    cfg = cli_config(out, seed=7)
    p = write_config(tmp_path / "run.json", cfg)
    assert cli.main(["pipeline", str(p), "--jobs", "1"]) == 0
    first_csv, first_gamma = read_pipeline_outputs(out)
    shutil.rmtree(out)
    assert cli.main(["pipeline", str(p), "--jobs", "1"]) == 0
    second_csv, second_gamma = read_pipeline_outputs(out)
    # energy densities are serialized with full precision: identical text
    assert first_csv == second_csv
    for k, v in first_gamma.items():
        assert second_gamma[k] == pytest.approx(v, rel=1e-12, abs=1e-300)
