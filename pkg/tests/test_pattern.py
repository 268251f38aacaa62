"""Pattern containers, builtin weaves, materials, tiling."""

import numpy as np
import pytest

from yarnshell.errors import PatternLoadError, YarnShellError
from yarnshell.pattern import (
    MaterialSpec,
    builtin_material,
    estimate_yarn_radius,
    load_material,
    load_pattern,
    save_material,
    save_pattern,
    tile_pattern,
)
from yarnshell.weaves import BUILTIN_PATTERNS, plain_weave, satin, straight_yarn_pattern, twill


def test_builtin_patterns_registry():
    assert set(BUILTIN_PATTERNS) == {"straight", "plain", "twill", "satin"}
    for name, fn in BUILTIN_PATTERNS.items():
        pat = fn()
        assert pat.period[0] > 0 and pat.period[1] > 0
        assert len(pat.yarns) >= 1


def test_plain_weave_alternation():
    """Adjacent crossings along a weft yarn alternate over/under."""
    pat = plain_weave()
    yarn = pat.yarns[0]
    # sign of the height at each cell-center crossing alternates
    n_cells = 2
    centers = (np.arange(n_cells) + 0.5) / n_cells * pat.period[0]
    idx = [np.argmin(np.abs(yarn[:, 0] - c)) for c in centers]
    signs = np.sign(yarn[idx, 2])
    assert np.all(signs != 0)
    assert np.all(signs[:-1] * signs[1:] < 0)


def test_pattern_roundtrip(tmp_path):
    pat = twill()
    p = tmp_path / "twill.json"
    save_pattern(pat, p)
    back = load_pattern(str(p))
    assert back.period == pat.period
    assert len(back.yarns) == len(pat.yarns)
    for a, b in zip(back.yarns, pat.yarns):
        assert np.allclose(a, b)
    assert back.pattern_class == pat.pattern_class


def test_pattern_class_validation():
    pat = plain_weave()
    pat.pattern_class = "lace"
    with pytest.raises(PatternLoadError):
        pat.validate()


def test_material_roundtrip(tmp_path):
    spec = MaterialSpec(
        name="m", k1=1e7, k2=1e9, poisson=0.25, rho_yarn=1000.0, rho_shell=0.2,
        shrink_factor=0.95,
    )
    p = tmp_path / "m.json"
    save_material(spec, p)
    back = load_material(str(p))
    assert back.k1 == spec.k1 and back.k2 == spec.k2
    assert back.shrink_factor == spec.shrink_factor


def test_builtin_materials():
    for name in ("wool", "cotton", "polyester"):
        spec = builtin_material(name)
        assert spec.k2 > spec.k1 > 0
        assert 0.0 <= spec.poisson < 0.5
        assert spec.rho_yarn > 0 and spec.rho_shell > 0
    with pytest.raises(YarnShellError):
        builtin_material("unobtainium")


def test_material_validation():
    with pytest.raises(YarnShellError):
        MaterialSpec(name="bad", k1=-1.0, k2=1e9, poisson=0.3,
                     rho_yarn=1000.0, rho_shell=0.2)
    with pytest.raises(YarnShellError):
        MaterialSpec(name="bad", k1=1e7, k2=1e9, poisson=0.3,
                     rho_yarn=1000.0, rho_shell=0.2, shrink_factor=1.5)


def test_shrink_for_pattern_class():
    spec = MaterialSpec(name="m", k1=1e7, k2=1e9, poisson=0.3,
                        rho_yarn=1000.0, rho_shell=0.2)
    # default woven shrink < 1 (yarns lengthen into crimp when relaxed flat)
    assert 0.0 < spec.shrink_for("woven") <= 1.0


def test_estimate_yarn_radius():
    pat = plain_weave()
    spec = builtin_material("wool")
    r = estimate_yarn_radius(pat, spec)
    assert r > 0
    # yarns must fit between neighboring parallel centerlines
    spacing = pat.period[0] / 2.0
    assert 2.0 * r <= spacing


def test_tile_pattern_scaling():
    pat = plain_weave()
    t = tile_pattern(pat, 2, 2)
    assert t.period[0] == pytest.approx(2.0 * pat.period[0])
    assert t.period[1] == pytest.approx(2.0 * pat.period[1])
    assert t.total_length() == pytest.approx(4.0 * pat.total_length(), rel=1e-9)
    t.validate()


def test_straight_pattern_minimal():
    pat = straight_yarn_pattern(n_points=7)
    assert len(pat.yarns) == 1
    assert pat.yarns[0].shape == (7, 3)
    assert np.allclose(pat.yarns[0][:, 2], 0.0)


def test_satin_has_floats():
    """Satin floats: consecutive same-side crossings exist along a yarn."""
    pat = satin()
    yarn = pat.yarns[0]
    n_cells = int(round(pat.period[0] / 5e-4))
    centers = (np.arange(n_cells) + 0.5) / n_cells * pat.period[0]
    idx = [np.argmin(np.abs(yarn[:, 0] - c)) for c in centers]
    signs = np.sign(yarn[idx, 2])
    assert np.any(signs[:-1] * signs[1:] > 0)
