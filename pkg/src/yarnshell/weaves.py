"""Built-in periodic pattern fixtures.

Woven patterns are generated from an interlacement matrix T where
T[a, b] = +1 means weft yarn a passes over warp yarn b at their crossing.
Weft yarns run along x, warp yarns along y.
"""

import numpy as np

from .errors import InvalidInputError
from .pattern import Connection, YarnPattern

PLAIN_WEAVE = np.array([[1, -1], [-1, 1]])
TWILL_2x2 = np.array(
    [
        [1, 1, -1, -1],
        [-1, 1, 1, -1],
        [-1, -1, 1, 1],
        [1, -1, -1, 1],
    ]
)
SATIN_5 = np.array(
    [
        [-1, -1, 1, -1, -1],
        [1, -1, -1, -1, -1],
        [-1, -1, -1, 1, -1],
        [-1, 1, -1, -1, -1],
        [-1, -1, -1, -1, 1],
    ]
)


def straight_yarn_pattern(n_points=11, period_x=1e-3, period_y=1e-3):
    """Single straight yarn spanning the period in x (minimal fixture)."""
    x = np.linspace(0.0, period_x, n_points)
    pts = np.stack([x, np.full(n_points, 0.5 * period_y), np.zeros(n_points)], axis=1)
    pat = YarnPattern(
        yarns=[pts],
        period=(period_x, period_y),
        connections=[Connection(0, n_points - 1, 0, 0, 1, 0)],
        pattern_class="woven",
    )
    pat.complete_connections()
    return pat.validate()


def _crossing_profile(signs, n_cells, points_per_cell, amplitude):
    """Smooth periodic z-profile through per-crossing signs.

    Crossing b sits at cell center (b + 0.5)/n_cells of the period; between
    crossings the profile blends with a half-cosine.  Returns samples at
    n_cells*points_per_cell + 1 uniformly spaced parameters in [0, 1].
    """
    n = n_cells * points_per_cell + 1
    t = np.linspace(0.0, 1.0, n)
    centers = (np.arange(n_cells) + 0.5) / n_cells
    z = np.empty(n)
    for i, ti in enumerate(t):
        # segment between crossing b and b+1 (periodic)
        b = int(np.floor(ti * n_cells - 0.5))
        c0 = (b + 0.5) / n_cells
        s0 = signs[b % n_cells]
        s1 = signs[(b + 1) % n_cells]
        u = (ti - c0) * n_cells  # in [0, 1] between the two crossings
        z[i] = s0 + (s1 - s0) * 0.5 * (1.0 - np.cos(np.pi * np.clip(u, 0.0, 1.0)))
    del centers
    return amplitude * z


def weave_pattern(interlacement, spacing=5e-4, points_per_cell=5, amplitude=1e-4):
    """Periodic woven pattern from an interlacement matrix.

    One repeat holds len(T) weft yarns and T.shape[1] warp yarns on a square
    grid with the given yarn spacing.  The out-of-plane amplitude should be
    about one yarn radius so crossings start near contact.
    """
    T = np.asarray(interlacement, dtype=int)
    if T.ndim != 2 or not np.all(np.abs(T) == 1):
        raise InvalidInputError("interlacement must be a +-1 matrix")
    n_weft, n_warp = T.shape
    # every warp and weft must interlace at least once, else the weave falls apart
    if np.any(np.all(T == T[0:1, :], axis=0)) and n_weft > 1:
        pass  # satin-like columns are fine; contacts hold the structure
    px, py = n_warp * spacing, n_weft * spacing
    yarns = []
    for a in range(n_weft):
        z = _crossing_profile(T[a], n_warp, points_per_cell, amplitude)
        x = np.linspace(0.0, px, len(z))
        y = np.full(len(z), (a + 0.5) * spacing)
        yarns.append(np.stack([x, y, z], axis=1))
    for b in range(n_warp):
        z = _crossing_profile(-T[:, b], n_weft, points_per_cell, amplitude)
        y = np.linspace(0.0, py, len(z))
        x = np.full(len(z), (b + 0.5) * spacing)
        yarns.append(np.stack([x, y, z], axis=1))
    conns = []
    for a in range(n_weft):
        n = len(yarns[a])
        conns.append(Connection(a, n - 1, a, 0, 1, 0))
    for b in range(n_warp):
        i = n_weft + b
        n = len(yarns[i])
        conns.append(Connection(i, n - 1, i, 0, 0, 1))
    pat = YarnPattern(yarns=yarns, period=(px, py), connections=conns, pattern_class="woven")
    pat.complete_connections()
    return pat.validate()


def plain_weave(spacing=5e-4, points_per_cell=5, amplitude=1e-4):
    return weave_pattern(PLAIN_WEAVE, spacing, points_per_cell, amplitude)


def twill(spacing=5e-4, points_per_cell=4, amplitude=1e-4):
    return weave_pattern(TWILL_2x2, spacing, points_per_cell, amplitude)


def satin(spacing=5e-4, points_per_cell=4, amplitude=1e-4):
    return weave_pattern(SATIN_5, spacing, points_per_cell, amplitude)


BUILTIN_PATTERNS = {
    "straight": straight_yarn_pattern,
    "plain": plain_weave,
    "twill": twill,
    "satin": satin,
}
