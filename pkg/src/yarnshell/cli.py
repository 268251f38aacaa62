"""Command-line pipeline: relax, homogenize, fit, validate, export.

Each stage reads one run config (TOML or JSON), writes its artifacts into
the configured output directory, and records them in a manifest keyed by
the config hash and seed.  Downstream stages refuse artifacts produced
under a different config hash unless --force is given.

Exit codes: 0 success, 2 config error, 3 convergence failure, 4 missing
upstream artifact.  Set YARNSHELL_LOG=DEBUG|INFO|WARNING for verbosity.
"""

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import fitter, homogenize, shellsim
from .embedding import SamplingConfig, sample_deformation_grid
from .errors import (
    ConfigError,
    ConvergenceError,
    StageDependencyError,
    YarnShellError,
)
from .pattern import (
    MaterialSpec,
    builtin_material,
    estimate_yarn_radius,
    load_material,
    load_pattern,
)
from .rod import RodState
from .shell import ShellParams, save_mesh
from .solver import SolverConfig, relax_patch
from .weaves import BUILTIN_PATTERNS

log = logging.getLogger("yarnshell")

STATE_SCHEMA = "yarnshell-relaxed-state/1"

ARTIFACTS = {
    "relax": "relaxed.json",
    "homogenize": "energies.csv",
    "fit": "params.json",
    "stretch-test": "stretch_curves",
    "drape": "drape.json",
}


# ---------------------------------------------------------------------------
# Config handling


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.endswith(".toml"):
            try:
                import tomllib
            except ImportError:  # python < 3.11
                import tomli as tomllib
            with open(path, "rb") as f:
                return tomllib.load(f)
        with open(path) as f:
            return json.load(f)
    except (ValueError, OSError) as err:
        raise ConfigError(f"failed to parse config {path}: {err}") from err


def _section(cfg, name, cls, **extra):
    raw = dict(cfg.get(name, {}))
    raw.update(extra)
    allowed = set(cls.__dataclass_fields__)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(
            f"[{name}] unknown field(s): {', '.join(sorted(unknown))}; "
            f"allowed: {', '.join(sorted(allowed))}"
        )
    try:
        return cls(**raw)
    except YarnShellError as err:
        raise ConfigError(f"[{name}] {err}") from err


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class Run:
    """A run config resolved into pipeline inputs."""

    def __init__(self, cfg, force=False, jobs=None):
        if "output_dir" not in cfg:
            raise ConfigError("missing required field: output_dir")
        self.cfg = cfg
        self.force = force
        self.out = cfg["output_dir"]
        self.seed = int(cfg.get("seed", 0))
        self.jobs = int(jobs if jobs is not None else cfg.get("jobs", 1))
        self.hash = config_hash(cfg)
        self.radius_scale = float(cfg.get("radius_scale", 1.0))
        os.makedirs(self.out, exist_ok=True)
        self.pattern = self._load_pattern(cfg.get("pattern", {"builtin": "plain"}))
        self.material = self._load_material(cfg.get("material", {"builtin": "wool"}))
        self.solver = _section(
            cfg, "solver", SolverConfig, seed=self.seed
        )
        self.sampling = _section(cfg, "sampling", SamplingConfig)
        self.fit = _section(cfg, "fit", fitter.FitConfig)

    def _load_pattern(self, sec):
        if "path" in sec:
            return load_pattern(sec["path"])
        name = sec.get("builtin", "plain")
        if name not in BUILTIN_PATTERNS:
            raise ConfigError(
                f"[pattern] unknown builtin {name!r}; "
                f"choose from {sorted(BUILTIN_PATTERNS)} or give a path"
            )
        kwargs = {k: v for k, v in sec.items() if k != "builtin"}
        try:
            return BUILTIN_PATTERNS[name](**kwargs)
        except (TypeError, YarnShellError) as err:
            raise ConfigError(f"[pattern] {err}") from err

    def _load_material(self, sec):
        try:
            if "path" in sec:
                return load_material(sec["path"])
            if "builtin" in sec:
                return builtin_material(sec["builtin"])
            return MaterialSpec(**sec)
        except (TypeError, YarnShellError) as err:
            raise ConfigError(f"[material] {err}") from err

    @property
    def radius(self):
        return self.radius_scale * estimate_yarn_radius(self.pattern, self.material)

    def path(self, name):
        return os.path.join(self.out, name)

    # -- manifest -----------------------------------------------------------

    def manifest(self):
        p = self.path("manifest.json")
        if os.path.exists(p):
            with open(p) as f:
                return json.load(f)
        return {"config_hash": self.hash, "seed": self.seed, "artifacts": {}}

    def record_artifact(self, stage, filename):
        man = self.manifest()
        if man.get("config_hash") != self.hash:
            if not self.force:
                raise StageDependencyError(
                    "manifest was produced under a different config "
                    f"({man.get('config_hash')} != {self.hash}); rerun upstream "
                    "stages or pass --force"
                )
            man = {"config_hash": self.hash, "seed": self.seed, "artifacts": {}}
        man["artifacts"][stage] = filename
        with open(self.path("manifest.json"), "w") as f:
            json.dump(man, f, indent=2)

    def require_artifact(self, stage):
        man = self.manifest()
        name = man["artifacts"].get(stage)
        if name is None or not os.path.exists(self.path(name)):
            raise StageDependencyError(
                f"stage '{stage}' has not produced its artifact yet; "
                f"run `yarnshell {stage} <config>` first"
            )
        if man.get("config_hash") != self.hash and not self.force:
            raise StageDependencyError(
                f"artifact for stage '{stage}' was produced under config hash "
                f"{man.get('config_hash')}, current is {self.hash}; "
                "rerun it or pass --force"
            )
        return self.path(name)


# ---------------------------------------------------------------------------
# Relaxed-state serialization (versioned schema)


def write_relaxed_state(state, radius, path, config_hash=""):
    doc = {
        "schema": STATE_SCHEMA,
        "config_hash": config_hash,
        "radius": radius,
        "points": state.points.tolist(),
        "frames": state.frames.tolist(),
        "rest_lengths": state.rest_lengths.tolist(),
        "rest_darboux": state.rest_darboux.tolist(),
        "rest_stretch": state.rest_stretch.tolist(),
        "yarn_points": [y.tolist() for y in state.yarn_points],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def read_relaxed_state(path):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema") != STATE_SCHEMA:
        raise ConfigError(
            f"unsupported relaxed-state schema {doc.get('schema')!r} in {path}"
        )
    state = RodState(
        points=np.array(doc["points"]),
        frames=np.array(doc["frames"]),
        rest_lengths=np.array(doc["rest_lengths"]),
        rest_darboux=np.array(doc["rest_darboux"]),
        rest_stretch=np.array(doc["rest_stretch"]),
        yarn_points=[np.array(y, dtype=int) for y in doc["yarn_points"]],
    )
    return state, float(doc["radius"]), doc.get("config_hash", "")


# ---------------------------------------------------------------------------
# Stages


def stage_relax(run):
    log.info("relaxing %s patch", run.material.name)
    rest = relax_patch(
        run.pattern, run.material, config=run.solver, radius=run.radius
    )
    out = ARTIFACTS["relax"]
    write_relaxed_state(rest, run.radius, run.path(out), config_hash=run.hash)
    run.record_artifact("relax", out)
    log.info("wrote %s", run.path(out))
    return rest


def stage_homogenize(run):
    state_path = run.require_artifact("relax")
    rest, radius, _ = read_relaxed_state(state_path)
    samples = sample_deformation_grid(run.sampling)
    log.info("homogenizing %d samples with %d job(s)", len(samples), run.jobs)
    records = homogenize.run_homogenization(
        rest,
        run.pattern,
        run.material,
        samples,
        config=run.solver,
        radius=radius,
        jobs=run.jobs,
    )
    out = ARTIFACTS["homogenize"]
    homogenize.write_energy_records(records, run.path(out))
    run.record_artifact("homogenize", out)
    n_ok = sum(r.converged for r in records)
    log.info("%d/%d samples converged", n_ok, len(records))
    if n_ok == 0:
        raise ConvergenceError("no homogenization sample converged")
    return records


def stage_fit(run):
    csv_path = run.require_artifact("homogenize")
    state_path = run.require_artifact("relax")
    rest, radius, _ = read_relaxed_state(state_path)
    records = homogenize.read_energy_records(csv_path)
    h = fitter.estimate_thickness(rest, radius)
    params, report = fitter.fit(records, run.fit, h=h)
    out = ARTIFACTS["fit"]
    with open(run.path(out), "w") as f:
        json.dump(
            {"config_hash": run.hash, "params": params.as_dict(), "report": report},
            f,
            indent=2,
        )
    run.record_artifact("fit", out)
    log.info("fitted params written to %s", run.path(out))
    return params, report


def _load_params(run):
    with open(run.require_artifact("fit")) as f:
        doc = json.load(f)
    return ShellParams.from_dict(doc["params"])


def stage_stretch(run):
    params = _load_params(run)
    sec = dict(run.cfg.get("stretch", {}))
    angles = sec.pop("cut_angles", [0.0, 45.0, 90.0])
    strains = sec.pop("strains", [0.0, 0.02, 0.05, 0.1, 0.15, 0.2])
    os.makedirs(run.path(ARTIFACTS["stretch-test"]), exist_ok=True)
    partial = False
    for deg in angles:
        res = shellsim.stretch_test(
            params, cut_angle=np.deg2rad(deg), strains=strains, **sec
        )
        name = os.path.join(ARTIFACTS["stretch-test"], f"cut_{int(round(deg))}.csv")
        shellsim.write_stretch_curve(res, run.path(name))
        partial = partial or res.partial
        log.info("stretch cut %g deg -> %s%s", deg, name, " (partial)" if res.partial else "")
    run.record_artifact("stretch-test", ARTIFACTS["stretch-test"])
    if partial:
        raise ConvergenceError("stretch test curve is partial")


def stage_drape(run):
    params = _load_params(run)
    sec = dict(run.cfg.get("drape", {}))
    res = shellsim.drape_test(
        params,
        rho_shell=run.material.rho_shell,
        seed=self_seed(run, sec),
        **sec,
    )
    save_mesh(res.mesh, run.path("drape.obj"), deformed=res.vertices)
    doc = {
        "config_hash": run.hash,
        "drape_height": res.drape_height,
        "silhouette_radius": res.silhouette_radius,
        "fold_count": res.fold_count,
        "fold_count_x": res.fold_count_x,
        "fold_count_y": res.fold_count_y,
        "converged": res.converged,
        "mesh": "drape.obj",
    }
    with open(run.path(ARTIFACTS["drape"]), "w") as f:
        json.dump(doc, f, indent=2)
    run.record_artifact("drape", ARTIFACTS["drape"])
    if not res.converged:
        raise ConvergenceError("drape solve did not converge")


def self_seed(run, sec):
    return int(sec.pop("seed", run.seed))


def stage_export(run):
    """Plot-ready CSV bundle of the energies and force curves."""
    export_dir = run.path("export")
    os.makedirs(export_dir, exist_ok=True)
    csv_path = run.require_artifact("homogenize")
    records = homogenize.read_energy_records(csv_path)
    with open(os.path.join(export_dir, "energy_density.csv"), "w") as f:
        f.write("category,strain_norm,energy_density,converged\n")
        for r in records:
            f.write(
                f"{r.sample.category},{r.sample.strain_norm()!r},"
                f"{r.energy_density!r},{int(r.converged)}\n"
            )
    curves_dir = run.require_artifact("stretch-test")
    with open(os.path.join(export_dir, "force_curves.csv"), "w") as f:
        f.write("cut_deg,strain,force_N,compression_ratio\n")
        for name in sorted(os.listdir(curves_dir)):
            if not name.endswith(".csv"):
                continue
            deg = name[len("cut_"):-len(".csv")]
            with open(os.path.join(curves_dir, name)) as g:
                next(g)
                for line in g:
                    f.write(f"{deg},{line}")
    run.record_artifact("export", "export")
    log.info("export bundle in %s", export_dir)


def stage_pipeline(run):
    stage_relax(run)
    stage_homogenize(run)
    stage_fit(run)
    stage_stretch(run)
    stage_drape(run)
    stage_export(run)


STAGES = {
    "relax": stage_relax,
    "homogenize": stage_homogenize,
    "fit": stage_fit,
    "stretch-test": stage_stretch,
    "drape": stage_drape,
    "pipeline": stage_pipeline,
    "export": stage_export,
}


# ---------------------------------------------------------------------------
# Entry point


def build_parser():
    p = argparse.ArgumentParser(
        prog="yarnshell",
        description="Yarn-to-shell homogenization pipeline",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sp = sub.add_parser(name, help=f"run the {name} stage")
        sp.add_argument("config", help="run config file (.toml or .json)")
        sp.add_argument(
            "--force",
            action="store_true",
            help="accept upstream artifacts with mismatched config hash",
        )
        sp.add_argument(
            "--jobs",
            type=int,
            default=None,
            help="worker processes for homogenization (default: config or 1)",
        )
    return p


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("YARNSHELL_LOG", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        run = Run(cfg, force=args.force, jobs=args.jobs)
        STAGES[args.command](run)
    except ConfigError as err:
        log.error("config error: %s", err)
        return 2
    except ConvergenceError as err:
        log.error("convergence failure: %s", err)
        return 3
    except StageDependencyError as err:
        log.error("stage dependency: %s", err)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
