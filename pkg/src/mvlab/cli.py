"""Command line entry point.

    mvlab run <config.yaml>
    mvlab dist <a.csv> <b.csv> --eta 0.5 --m 1 --method exact|sinkhorn|dual
    mvlab selftest

Exit status: 0 all declared criteria hold, 1 error (bad config, bad input,
runtime failure), 2 a criterion failed.
"""

import argparse
import hashlib
import json
import os
import sys

import jsonschema
import numpy as np
import yaml

from . import __version__, _backend, chaos
from .kernels import CATALOG, check_assumptions, make_builtin
from .noise import initial_rng
from .simulate import GaussianLaw, SimConfig, run_interacting, solve_meanfield_flow

EXPERIMENTS = (
    "assumptions", "simulate", "meanfield", "strong-error", "poc-rate", "fluctuation",
    "gradient-scan", "flow-deviation", "transport-selftest", "moment-sanity",
)

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_numlist = {"type": "array", "items": _num, "minItems": 1}
_intlist = {"type": "array", "items": _posint, "minItems": 2}
_band = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_vec = {"oneOf": [_num, {"type": "array", "items": _num, "minItems": 1}]}
_probes = {"type": "array", "minItems": 1, "items": {"oneOf": [_num, {"type": "array", "items": _num}]}}
_flow = {"flow_M": _posint, "picard_tol": _pos, "max_iter": _posint}


def _obj(props, required=()):
    return {"type": "object", "additionalProperties": False, "properties": props,
            "required": list(required)}


CONFIG_SCHEMA = _obj({
    "experiment": {"type": "string"},
    "seed": {"type": "integer", "minimum": 0},
    "output_dir": {"type": "string"},
    "model": _obj({"name": {"type": "string"}, "params": {"type": "object"}}, ["name"]),
    "sim": _obj({"N": _posint, "dt": _pos, "T": _pos, "snapshot_stride": _posint,
                 "interaction": {"enum": ["auto", "factorized", "pairwise"]}}),
    "init": _obj({"mean": _vec, "std": _vec}),
    "params": {"type": "object"},
}, ["experiment", "seed", "output_dir"])

PARAM_SCHEMAS = {
    "assumptions": _obj({"probe_count": _posint, "box_radius": _pos, "fd_step": _pos}),
    "simulate": _obj({"write_paths": {"type": "boolean"}}),
    "meanfield": _obj({"M": _posint, "picard_tol": _pos, "max_iter": _posint,
                       "write_flow": {"type": "boolean"}, "flow_stride": _posint}),
    "strong-error": _obj({"N_grid": _intlist, "reps": _posint, **_flow,
                          "slope_band": _band, "r2_min": _num}, ["N_grid", "reps"]),
    "poc-rate": _obj({"k": _posint, "N_grid": _intlist, "eta": _pos, "t": _pos,
                      "init_mode": {"enum": list(chaos.INIT_MODES)}, "outer_samples": _posint,
                      "batches": _posint, **_flow, "shift_scale": _num, "slope_max": _num,
                      "check_jensen": {"type": "boolean"}, "min_outer_samples": _posint},
                     ["k", "N_grid", "eta", "t"]),
    "fluctuation": _obj({"h": {"enum": list(chaos.H_CATALOG)}, "N_grid": _intlist, "reps": _posint,
                         "ref_samples": _posint, "slope_band": _band, "r2_min": _num},
                        ["h", "N_grid", "reps"]),
    "gradient-scan": _obj({"eta": _pos, "j": {"enum": [1, 2]},
                           "direction_class": {"enum": ["full", "position", "velocity", "anisotropy"]},
                           "s": {"type": "number", "minimum": 0}, "t_grid": _numlist, "x_probes": _probes,
                           "fd_step": _pos, "samples": _posint, **_flow,
                           "family": _obj({"kind": {"enum": ["waves", "cones", "constant"]},
                                           "k_values": _numlist, "coords": {"type": "array", "items": {"type": "integer"}},
                                           "centers": _probes}),
                           "slack": _num, "max_rel_stderr": _pos,
                           "expected_difference": _num, "tolerance": _pos},
                          ["eta", "t_grid", "x_probes", "fd_step", "samples"]),
    "flow-deviation": _obj({"s": {"type": "number", "minimum": 0}, "t_grid": _numlist,
                            "x_probes": _probes, "samples": _posint, **_flow,
                            "slope_band": _band, "r2_min": _num},
                           ["t_grid", "x_probes", "samples"]),
    "transport-selftest": _obj({"instances": _posint, "max_size": {"type": "integer", "minimum": 1, "maximum": 8}}),
    "moment-sanity": _obj({**_flow, "budget": _pos}),
}

NEEDS_MODEL = set(EXPERIMENTS) - {"transport-selftest", "fluctuation"}


class ConfigError(ValueError):
    pass


def _where(err):
    path = "/".join(str(p) for p in err.absolute_path)
    return path or "<top level>"


def load_config(path):
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return validate_config(cfg)


def validate_config(cfg):
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    exp = cfg.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {exp!r}; valid names: {', '.join(EXPERIMENTS)}")
    for schema, obj, prefix in ((CONFIG_SCHEMA, cfg, ""), (PARAM_SCHEMAS[exp], cfg.get("params", {}), "params/")):
        errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(obj), key=lambda e: list(e.path))
        if errors:
            e = errors[0]
            raise ConfigError(f"{prefix}{_where(e)}: {e.message}")
    if exp in NEEDS_MODEL and "model" not in cfg:
        raise ConfigError(f"experiment {exp!r} needs a 'model' section")
    if "model" in cfg and cfg["model"]["name"] not in CATALOG:
        raise ConfigError(f"model/name: unknown model {cfg['model']['name']!r}; "
                          f"valid names: {', '.join(CATALOG)}")
    return cfg


def artifact_version():
    """Version string plus a content hash of the package sources."""
    root = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha1()
    for name in sorted(os.listdir(root)):
        if name.endswith((".py", ".pyx")):
            with open(os.path.join(root, name), "rb") as fh:
                data = fh.read()
            h.update(f"blob {len(data)}\0".encode() + data)
    return f"{__version__}+{h.hexdigest()[:12]}"


def _build(cfg):
    spec = make_builtin(cfg["model"]["name"], cfg["model"].get("params", {})) if "model" in cfg else None
    sim = dict(cfg.get("sim", {}))
    sim_cfg = None
    if spec is not None:
        sim_cfg = SimConfig(N=sim.get("N", 8), d=spec.d, n=spec.n, kind=spec.kind,
                            dt=sim.get("dt", 1e-3), T=sim.get("T", 1.0), seed=cfg["seed"],
                            snapshot_stride=sim.get("snapshot_stride", 1),
                            interaction=sim.get("interaction", "auto"))
    init = cfg.get("init", {})
    q = spec.q if spec is not None else int(np.size(init.get("mean", 0.0)))
    law = GaussianLaw(init.get("mean", 1.0 if spec is not None else 0.0),
                      init.get("std", 0.5 if spec is not None else 1.0), q)
    return spec, sim_cfg, law


def _probes(raw, q):
    arr = np.array([[p] if np.isscalar(p) else p for p in raw], dtype=np.float64)
    if arr.shape[1] != q:
        raise ConfigError(f"params/x_probes: each probe needs {q} coordinates")
    return arr


def _family(p, spec, eta):
    fam = p.get("family", {})
    kind = fam.get("kind", "waves")
    if kind == "constant":
        return [chaos.Constant()]
    if kind == "cones":
        centers = _probes(fam.get("centers", [[0.0] * spec.q]), spec.q)
        return [chaos.HolderCone(c, eta) for c in centers]
    coords = fam.get("coords", list(range(spec.q)))
    k_values = fam.get("k_values", [2.0 ** i for i in range(7)])
    return chaos.holder_wave_family(eta, spec.q, coords, k_values)


def run_experiment(cfg):
    """Execute a validated config; returns (report, extra files written later)."""
    exp, p, seed = cfg["experiment"], cfg.get("params", {}), cfg["seed"]
    spec, sim, law = _build(cfg)
    extras = {}
    flow_kw = {k: p[k] for k in ("picard_tol", "max_iter") if k in p}
    if exp == "assumptions":
        rep = check_assumptions(spec, p.get("probe_count", 1000), p.get("box_radius", 5.0),
                                p.get("fd_step", 1e-3), seed)
        report = chaos.ChaosReport("assumptions", config={"model": spec.describe(), **p},
                                   checks=dict(rep.passed), measurements=rep.to_dict(),
                                   provenance={"seed": seed})
    elif exp == "simulate":
        x0 = law(initial_rng(seed, "simulate-init"), sim.N)
        bundle = run_interacting(sim, spec, x0)
        m2 = np.mean(np.sum(bundle.states ** 2, axis=-1), axis=1)
        report = chaos.ChaosReport("simulate", config={"sim": sim.to_dict(), "model": spec.describe(),
                                                       "init_law": law.to_dict()},
                                   measurements={"terminal_mean": bundle.terminal.mean(axis=0),
                                                 "max_second_moment": float(m2.max())},
                                   provenance={"seed": seed, "dt": sim.dt})
        if p.get("write_paths", True):
            extras["paths.csv"] = ("bundle", bundle)
    elif exp == "meanfield":
        flow = solve_meanfield_flow(sim, spec, law, p.get("M", 2000), p.get("picard_tol", 0.05),
                                    p.get("max_iter", 10))
        report = chaos.ChaosReport("meanfield", config={"sim": sim.to_dict(), "model": spec.describe(),
                                                        "init_law": law.to_dict(), **p},
                                   checks={"converged": flow.converged},
                                   measurements={"terminal_mean": flow.support[-1].mean(axis=0),
                                                 "terminal_second_moment": float(np.mean(np.sum(flow.support[-1] ** 2, -1)))},
                                   provenance={"seed": seed, "dt": sim.dt, "M": flow.M,
                                               "picard_iterations": flow.iterations, "picard_gaps": flow.history})
        if p.get("write_flow", True):
            extras["flow.csv"] = ("flow", (flow, p.get("flow_stride", 1)))
    elif exp == "strong-error":
        report = chaos.strong_error_experiment(
            p["N_grid"], sim, spec, p.get("flow_M", 4000), p["reps"], init_law=law, **flow_kw,
            **{k: tuple(p[k]) if k == "slope_band" else p[k] for k in ("slope_band", "r2_min") if k in p})
    elif exp == "poc-rate":
        kw = {k: p[k] for k in ("init_mode", "outer_samples", "batches", "flow_M", "shift_scale",
                                "slope_max", "check_jensen", "min_outer_samples") if k in p}
        report = chaos.poc_wasserstein_experiment(p["k"], p["N_grid"], p["eta"], p["t"], sim, spec,
                                                  init_law=law, **flow_kw, **kw)
    elif exp == "fluctuation":
        report = chaos.fluctuation_check(
            p["h"], law, p["N_grid"], p["reps"], seed, spec=spec,
            ref_samples=p.get("ref_samples", 10 ** 6),
            **{k: tuple(p[k]) if k == "slope_band" else p[k] for k in ("slope_band", "r2_min") if k in p})
    elif exp == "gradient-scan":
        flow = chaos._ensure_flow(sim, spec, law, p.get("flow_M", 4000), p.get("picard_tol", 0.05),
                                  p.get("max_iter", 10), None)
        probes = _probes(p["x_probes"], spec.q)
        fam = _family(p, spec, p["eta"])
        dc = p.get("direction_class", "full")
        common = (p.get("s", 0.0), p["t_grid"], probes, p["fd_step"], p["samples"], seed)
        if dc == "anisotropy":
            report = chaos.kinetic_anisotropy_scan(
                spec, flow, fam, p["eta"], *common,
                **{k: p[k] for k in ("expected_difference", "tolerance") if k in p})
        else:
            report = chaos.gradient_scaling_scan(
                spec, flow, fam, p["eta"], p.get("j", 1), dc, *common,
                **{k: p[k] for k in ("slack", "max_rel_stderr") if k in p})
    elif exp == "flow-deviation":
        flow = chaos._ensure_flow(sim, spec, law, p.get("flow_M", 4000), p.get("picard_tol", 0.05),
                                  p.get("max_iter", 10), None)
        report = chaos.flow_deviation_check(
            spec, flow, _probes(p["x_probes"], spec.q), p.get("s", 0.0), p["t_grid"], p["samples"], seed,
            **{k: tuple(p[k]) if k == "slope_band" else p[k] for k in ("slope_band", "r2_min") if k in p})
    elif exp == "transport-selftest":
        from .selftest import transport_battery

        report = transport_battery(p.get("instances", 1000), p.get("max_size", 7), seed)
    elif exp == "moment-sanity":
        report = chaos.moment_sanity(sim, spec, p.get("flow_M", 2000), init_law=law,
                                     budget=p.get("budget", 1e3), **flow_kw)
    return report, extras


def write_outputs(cfg, report, extras):
    from . import io

    out = cfg["output_dir"]
    paths = report.write(out)
    for name, (kind, obj) in extras.items():
        path = os.path.join(out, name)
        if kind == "bundle":
            io.write_bundle(path, obj)
        else:
            io.write_flow(path, obj[0], obj[1])
        paths.append(path)
    manifest = {
        "config": cfg,
        "seeds": {"experiment": cfg["seed"]},
        "artifact_version": artifact_version(),
        "backend": _backend.BACKEND,
        "passed": report.passed,
        "files": sorted(os.path.basename(p) for p in paths),
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(chaos._plain(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_run(args):
    try:
        cfg = load_config(args.config)
        report, extras = run_experiment(cfg)
        write_outputs(cfg, report, extras)
    except (ConfigError, ValueError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for name, ok in sorted(report.checks.items()):
        print(f"{'PASS' if ok else 'FAIL'} {report.experiment}:{name}")
    print(f"report written to {os.path.join(cfg['output_dir'], 'report.json')}")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_dist(args):
    from .io import read_point_cloud
    from .transport import (CostSpec, EmpiricalMeasure, dual_lower_bound, exact_wasserstein_eta,
                            sinkhorn_wasserstein_eta)

    try:
        a = read_point_cloud(args.a, args.time)
        b = read_point_cloud(args.b, args.time)
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"dimension mismatch: {args.a} has {a.shape[1]} coordinates, "
                             f"{args.b} has {b.shape[1]}")
        mu, nu = EmpiricalMeasure(a, m=args.m), EmpiricalMeasure(b, m=args.m)
        cost = CostSpec(args.eta, args.m, mu.d)
        if args.method == "exact":
            res = exact_wasserstein_eta(mu, nu, cost)
            print(f"exact {res.value!r}")
        elif args.method == "sinkhorn":
            res = sinkhorn_wasserstein_eta(mu, nu, cost, reg=args.reg)
            flag = "" if res.converged else " (not converged)"
            print(f"sinkhorn {res.value!r} iterations={res.iterations}{flag}")
        else:
            lb = dual_lower_bound(mu, nu, cost, args.family_size, args.seed)
            print(f"dual {lb!r}")
            if mu.size * nu.size <= 4_000_000:
                ex = exact_wasserstein_eta(mu, nu, cost).value
                print(f"gap {ex - lb!r} (exact {ex!r})")
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import core_battery, transport_battery

    ok = True
    for rep in (core_battery(args.seed), transport_battery(args.instances, 7, args.seed)):
        for name, passed in sorted(rep.checks.items()):
            print(f"{'PASS' if passed else 'FAIL'} {rep.experiment}:{name}")
        ok &= rep.passed
    print(f"backend: {_backend.BACKEND}")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser():
    ap = argparse.ArgumentParser(prog="mvlab", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"mvlab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment from a YAML config")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)
    d = sub.add_parser("dist", help="distance between two point-cloud files")
    d.add_argument("a")
    d.add_argument("b")
    d.add_argument("--eta", type=float, default=1.0)
    d.add_argument("--m", type=int, default=1, help="number of blocks per point")
    d.add_argument("--method", choices=["exact", "sinkhorn", "dual"], default="exact")
    d.add_argument("--time", type=float, default=None, help="snapshot time (default: last)")
    d.add_argument("--reg", type=float, default=None, help="Sinkhorn regularisation")
    d.add_argument("--family-size", type=int, default=256)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_dist)
    s = sub.add_parser("selftest", help="oracle batteries for noise, backends and transport")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=1000)
    s.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
