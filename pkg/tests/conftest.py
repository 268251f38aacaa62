"""Shared fixtures: relaxed patches, homogenization batteries, fitted params.

The plain-weave battery and its fit are expensive (minutes); they are
session-scoped and lazily built, so quick unit-test runs never pay for
them.  JOBS respects the sandbox CPU allowance.
"""

import json
import os

import numpy as np
import pytest

from yarnshell.embedding import SamplingConfig, sample_deformation_grid
from yarnshell.fitter import FitConfig, estimate_thickness, fit
from yarnshell.homogenize import run_homogenization
from yarnshell.pattern import MaterialSpec, builtin_material, estimate_yarn_radius
from yarnshell.solver import relax_patch
from yarnshell.weaves import plain_weave, straight_yarn_pattern

JOBS = max(1, min(4, len(os.sched_getaffinity(0))))

# small but category-complete deformation battery for the fits
BATTERY_CONFIG = SamplingConfig(n_stretch=3, n_biaxial=2, n_shear=3, n_bend=2)


def straight_material(shrink=1.0):
    """Non-shrinking test material for straight-yarn oracles."""
    return MaterialSpec(
        name="test",
        k1=5e7,
        k2=2e9,
        poisson=0.3,
        rho_yarn=1310.0,
        rho_shell=0.30,
        shrink_factor=shrink,
    )


@pytest.fixture(scope="session")
def plain_setup():
    pat = plain_weave()
    spec = builtin_material("wool")
    radius = estimate_yarn_radius(pat, spec)
    return pat, spec, radius


@pytest.fixture(scope="session")
def plain_rest(plain_setup):
    pat, spec, radius = plain_setup
    rest, energy = relax_patch(pat, spec, radius=radius, return_energy=True)
    return rest, energy


@pytest.fixture(scope="session")
def plain_battery(plain_setup, plain_rest):
    pat, spec, radius = plain_setup
    rest, _ = plain_rest
    samples = sample_deformation_grid(BATTERY_CONFIG)
    return run_homogenization(rest, pat, spec, samples, radius=radius, jobs=JOBS)


@pytest.fixture(scope="session")
def plain_fit(plain_setup, plain_rest, plain_battery):
    pat, spec, radius = plain_setup
    rest, _ = plain_rest
    h = estimate_thickness(rest, radius)
    params, report = fit(plain_battery, FitConfig(), h=h)
    return params, report


@pytest.fixture(scope="session")
def thick_run(plain_setup):
    """Same pipeline with the yarn radius scaled by 1.5 (thicker material)."""
    pat, spec, radius = plain_setup
    r = 1.5 * radius
    rest = relax_patch(pat, spec, radius=r)
    samples = sample_deformation_grid(BATTERY_CONFIG)
    records = run_homogenization(rest, pat, spec, samples, radius=r, jobs=JOBS)
    h = estimate_thickness(rest, r)
    params, report = fit(records, FitConfig(), h=h)
    return params, report, records


@pytest.fixture(scope="session")
def straight_rest():
    pat = straight_yarn_pattern(n_points=11)
    spec = straight_material()
    rest = relax_patch(pat, spec)
    return pat, spec, rest


def cli_config(output_dir, seed=0, **overrides):
    """Fast straight-yarn run config for CLI tests."""
    cfg = {
        "output_dir": str(output_dir),
        "seed": seed,
        "pattern": {"builtin": "straight", "n_points": 11},
        "material": {
            "name": "test",
            "k1": 5e7,
            "k2": 2e9,
            "poisson": 0.3,
            "rho_yarn": 1310.0,
            "rho_shell": 0.30,
            "shrink_factor": 1.0,
        },
        "sampling": {"n_stretch": 2, "n_biaxial": 2, "n_shear": 2, "n_bend": 2},
        "stretch": {"nx": 8, "ny": 6, "strains": [0.0, 0.05, 0.1], "cut_angles": [0, 90]},
        "drape": {"nx": 10, "ny": 10},
    }
    cfg.update(overrides)
    return cfg


def write_config(path, cfg):
    with open(path, "w") as f:
        json.dump(cfg, f)
    return str(path)
