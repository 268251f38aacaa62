"""Periodic yarn pattern loading, validation, and derived yarn parameters.

A pattern stores one periodic repeat: yarn polylines (with the endpoint on
the far period boundary duplicated), the repeat dimensions, and a directed
connection table describing how yarn ends continue into adjacent ghost
tiles.  Connections are stored per source endpoint; the reverse direction is
implied and completed on load.
"""

import json
from dataclasses import dataclass, field, asdict
from importlib import resources

import numpy as np

from .errors import InvalidInputError, PatternLoadError

ALLOWED_OFFSETS = {(1, 0), (-1, 0), (0, 1), (0, -1)}
DEFAULT_SHRINK = {"knit": 0.8, "woven": 0.9}


@dataclass(frozen=True)
class Connection:
    """Directed periodic continuation: point (yarn_i, point_j) continues as
    the ghost of (yarn_k, point_l) in the tile at (x_off, y_off)."""

    yarn_i: int
    point_j: int
    yarn_k: int
    point_l: int
    x_off: int
    y_off: int

    @property
    def offset(self):
        return (self.x_off, self.y_off)

    def reversed(self):
        return Connection(
            self.yarn_k, self.point_l, self.yarn_i, self.point_j, -self.x_off, -self.y_off
        )


@dataclass
class YarnPattern:
    yarns: list  # list of (Ni, 3) float arrays
    period: tuple  # (p_x, p_y)
    connections: list  # list of Connection
    pattern_class: str  # "knit" | "woven"

    def __post_init__(self):
        self.yarns = [np.asarray(y, dtype=float).reshape(-1, 3) for y in self.yarns]
        self.period = (float(self.period[0]), float(self.period[1]))
        self.connections = list(self.connections)

    # -- validation ---------------------------------------------------------

    def validate(self):
        if self.pattern_class not in ("knit", "woven"):
            raise PatternLoadError(f"unknown pattern class {self.pattern_class!r}")
        if self.period[0] <= 0 or self.period[1] <= 0:
            raise PatternLoadError("period dimensions must be positive")
        for i, y in enumerate(self.yarns):
            if len(y) < 3:
                raise PatternLoadError(f"yarn {i} needs at least 3 points")
        slack = 0.25 * min(self.period)
        for i, y in enumerate(self.yarns):
            if (
                np.any(y[:, 0] < -slack)
                or np.any(y[:, 0] > self.period[0] + slack)
                or np.any(y[:, 1] < -slack)
                or np.any(y[:, 1] > self.period[1] + slack)
            ):
                raise PatternLoadError(f"yarn {i} leaves the period box by more than the slack")
        seen_sources = set()
        for c in self.connections:
            if c.offset not in ALLOWED_OFFSETS:
                raise PatternLoadError(
                    f"invalid ghost offset {c.offset} in connection {c}"
                )
            for yarn, point in ((c.yarn_i, c.point_j), (c.yarn_k, c.point_l)):
                if not 0 <= yarn < len(self.yarns):
                    raise PatternLoadError(f"connection {c} references missing yarn {yarn}")
                n = len(self.yarns[yarn])
                if point not in (0, n - 1):
                    raise PatternLoadError(
                        f"connection {c} references non-endpoint {point} of yarn {yarn}"
                    )
            key = (c.yarn_i, c.point_j)
            if key in seen_sources:
                raise PatternLoadError(f"endpoint {key} is the source of multiple connections")
            seen_sources.add(key)
        endpoints = {
            (i, p) for i, y in enumerate(self.yarns) for p in (0, len(y) - 1)
        }
        missing = endpoints - seen_sources
        if missing:
            raise PatternLoadError(f"endpoints without a connection: {sorted(missing)}")
        return self

    def complete_connections(self):
        """Add implied reverse connections for any one-sided entries."""
        sources = {(c.yarn_i, c.point_j) for c in self.connections}
        for c in list(self.connections):
            r = c.reversed()
            if (r.yarn_i, r.point_j) not in sources:
                self.connections.append(r)
                sources.add((r.yarn_i, r.point_j))
        return self

    # -- derived quantities -------------------------------------------------

    def seams(self):
        """Undirected seam list: connections whose source is a yarn END
        (last point) continuing into the partner yarn's START."""
        out = []
        for c in self.connections:
            if c.point_j == len(self.yarns[c.yarn_i]) - 1:
                if c.point_l != 0:
                    raise PatternLoadError(
                        f"connection {c}: yarn end must continue into a yarn start"
                    )
                out.append(c)
        return out

    def total_length(self):
        """Summed segment lengths of the initialized geometry."""
        return float(
            sum(np.sum(np.linalg.norm(np.diff(y, axis=0), axis=1)) for y in self.yarns)
        )

    def point_offsets(self):
        """Index of the first point of each yarn in the flattened point array."""
        offs = np.cumsum([0] + [len(y) for y in self.yarns])
        return offs

    def all_points(self):
        return np.concatenate(self.yarns, axis=0)


@dataclass
class MaterialSpec:
    """Yarn material parameters derived from fabric measurements.

    k1/k2 are the compressive/tensile slopes of the strain-dependent Young's
    modulus (Pa per unit strain); rho_shell is the measured areal fabric
    density (kg/m^2, swatch mass divided by repeat count and repeat area).
    """

    name: str
    k1: float
    k2: float
    poisson: float
    rho_yarn: float
    rho_shell: float
    friction: float = 0.2
    shrink_factor: float = None
    placeholder: bool = False

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise InvalidInputError("modulus slopes must be positive")
        if not 0.0 <= self.poisson < 0.5:
            raise InvalidInputError("poisson must be in [0, 0.5)")
        if self.rho_yarn <= 0 or self.rho_shell <= 0:
            raise InvalidInputError("densities must be positive")
        if self.shrink_factor is not None and not 0.0 < self.shrink_factor <= 1.0:
            raise InvalidInputError("shrink_factor must be in (0, 1]")

    def shrink_for(self, pattern_class):
        if self.shrink_factor is not None:
            return self.shrink_factor
        return DEFAULT_SHRINK[pattern_class]


# ---------------------------------------------------------------------------
# I/O


def pattern_to_dict(pattern):
    return {
        "class": pattern.pattern_class,
        "period": list(pattern.period),
        "yarns": [y.tolist() for y in pattern.yarns],
        "connections": [
            [c.yarn_i, c.point_j, c.yarn_k, c.point_l, c.x_off, c.y_off]
            for c in pattern.connections
        ],
    }


def pattern_from_dict(doc):
    try:
        conns = [Connection(*map(int, row)) for row in doc["connections"]]
        pattern = YarnPattern(
            yarns=doc["yarns"],
            period=tuple(doc["period"]),
            connections=conns,
            pattern_class=doc["class"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise PatternLoadError(f"malformed pattern document: {exc}") from exc
    pattern.complete_connections()
    pattern.validate()
    return pattern


def load_pattern(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise PatternLoadError(f"cannot read pattern {path}: {exc}") from exc
    return pattern_from_dict(doc)


def save_pattern(pattern, path):
    with open(path, "w") as fh:
        json.dump(pattern_to_dict(pattern), fh, indent=1)


def load_material(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise PatternLoadError(f"cannot read material {path}: {exc}") from exc
    try:
        return MaterialSpec(**doc)
    except TypeError as exc:
        raise PatternLoadError(f"malformed material document: {exc}") from exc


def save_material(spec, path):
    with open(path, "w") as fh:
        json.dump(asdict(spec), fh, indent=1)


def builtin_material(name, rho_shell=None):
    """Material defaults shipped with the package (placeholder slopes)."""
    with resources.files("yarnshell.data").joinpath("materials.json").open() as fh:
        table = json.load(fh)
    if name not in table:
        raise InvalidInputError(f"no builtin material {name!r}; have {sorted(table)}")
    doc = dict(table[name])
    if rho_shell is not None:
        doc["rho_shell"] = rho_shell
    return MaterialSpec(name=name, **doc)


# ---------------------------------------------------------------------------
# Derived parameters


def estimate_yarn_radius(pattern, spec):
    """Yarn radius matching the measured areal density.

    r = sqrt(rho_shell * p_x * p_y / (rho_yarn * L0 * pi)) with L0 the total
    initialized yarn length of one repeat.
    """
    L0 = pattern.total_length()
    if L0 <= 0:
        raise InvalidInputError("pattern has zero total yarn length")
    px, py = pattern.period
    return float(np.sqrt(spec.rho_shell * px * py / (spec.rho_yarn * L0 * np.pi)))


def ghost_point(pattern, yarn_k, point_l, offset, positions=None, embedding=None):
    """Position of a connected point translated into the ghost tile.

    In the flat phase the translation is (x_off*p_x, y_off*p_y, 0); with an
    embedding the offset is applied through the deformed surface map.
    """
    if tuple(offset) not in ALLOWED_OFFSETS:
        raise InvalidInputError(f"offset {offset} not in allowed set")
    p = (
        np.asarray(positions[yarn_k][point_l], dtype=float)
        if positions is not None
        else pattern.yarns[yarn_k][point_l]
    )
    if embedding is None:
        px, py = pattern.period
        return p + np.array([offset[0] * px, offset[1] * py, 0.0])
    R_off, t_off = embedding.ghost_transform(offset)
    return R_off @ p + t_off


# ---------------------------------------------------------------------------
# Tiling


def tile_pattern(pattern, nx, ny):
    """Duplicate the repeat into an nx-by-ny patch.

    Interior seams are merged into longer yarn polylines; seams crossing the
    enlarged boundary become connections with the enlarged period.
    """
    if nx < 1 or ny < 1:
        raise InvalidInputError("tiling counts must be >= 1")
    px, py = pattern.period
    seams = pattern.seams()
    succ = {}  # (yarn, tile) -> ((next yarn, next tile), crossed)
    tiles = [(tx, ty) for ty in range(ny) for tx in range(nx)]
    cont = {c.yarn_i: c for c in seams}
    for i in range(len(pattern.yarns)):
        if i not in cont:
            raise PatternLoadError(f"yarn {i} has no end-continuation seam")
    for tx, ty in tiles:
        for i, c in cont.items():
            ntx, nty = tx + c.x_off, ty + c.y_off
            wrapped = (ntx % nx, nty % ny)
            crossed = (ntx // nx, nty // ny)
            succ[(i, (tx, ty))] = ((c.yarn_k, wrapped), crossed)

    pred = {v[0]: k for k, v in succ.items() if v[1] == (0, 0)}
    starts = [node for node in succ if node not in pred]
    # pure cycles within the block (possible when a yarn chain closes without
    # crossing the boundary) are not representable as open periodic yarns
    visited = set()
    chains = []
    for start in starts:
        chain = [start]
        visited.add(start)
        node = start
        while succ[node][1] == (0, 0):
            node = succ[node][0]
            chain.append(node)
            visited.add(node)
        chains.append(chain)
    if len(visited) != len(succ):
        raise PatternLoadError("tiling produced a closed yarn loop inside the block")

    new_yarns = []
    node_to_chain = {}
    for ci, chain in enumerate(chains):
        pieces = []
        for si, (yarn, (tx, ty)) in enumerate(chain):
            pts = pattern.yarns[yarn] + np.array([tx * px, ty * py, 0.0])
            if si > 0:
                pts = pts[1:]  # drop duplicated seam point
            pieces.append(pts)
            node_to_chain[(yarn, (tx, ty))] = ci
        new_yarns.append(np.concatenate(pieces, axis=0))

    new_conns = []
    for ci, chain in enumerate(chains):
        last = chain[-1]
        (nyarn, ntile), crossed = succ[last]
        cj = node_to_chain[(nyarn, ntile)]
        new_conns.append(
            Connection(ci, len(new_yarns[ci]) - 1, cj, 0, crossed[0], crossed[1])
        )
    tiled = YarnPattern(
        yarns=new_yarns,
        period=(nx * px, ny * py),
        connections=new_conns,
        pattern_class=pattern.pattern_class,
    )
    tiled.complete_connections()
    tiled.validate()
    return tiled
