"""Command-line workflows: meshgen, forward, synth, invert, bench.

Configuration is an INI file (``--config``) with sections ``[mesh]``,
``[physics]``, ``[material]``, ``[synth]``, ``[solver]``, ``[inverse]``,
``[bench]`` and ``[output]``; any key can be overridden with
``--section.key=value``. Events are written as JSON lines to stdout and to
``<output.dir>/log.jsonl``.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 optimization (line-search) failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .ddm import FactorizationError
from .fem import MaterialField, PhysicsParams
from .forward import ForwardModel, SolverConfig, SolverError, merge_stats
from .inverse import (InverseConfig, InverseProblem, reconstruct, reconstruct_by_rings,
                      write_history_csv)
from .mesh import ChamberSpec, MeshError, generate_chamber_mesh, load_mesh, write_mesh
from .phantom import (Ellipsoid, PhantomSpec, add_noise, build_phantom, empty_reference,
                      eps_fields, read_nodal_csv, write_nodal_csv, write_vtk)
from .scattering import ScatteringError, read_smatrix_csv, write_smatrix_csv

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_OPTIM = 0, 2, 3, 4

DEFAULTS = {
    "mesh": {"file": "", "radius": "0.06", "height": "0.08", "n_rings": "1",
             "antennas_per_ring": "8", "h": "0.006"},
    "physics": {"frequency": "1e9", "eps_ceramic": "59", "port_width": "0.03",
                "port_height": "0.015", "amplitude": "1"},
    "material": {"source": "uniform", "value": "44-20j", "csv": "", "background": "44-20j",
                 "head_center": "", "head_axes": "", "head_angles": "0,0,0", "head_eps": "",
                 "stroke_center": "", "stroke_axes": "", "stroke_angles": "0,0,0",
                 "stroke_rule": "mean-with-blood", "stroke_eps": "", "blood_eps": "68-44j"},
    "synth": {"noise_level": "0.1", "seed": "0"},
    "solver": {"n_subdomains": "1", "delta": "1", "variant": "ORAS", "tol": "1e-8",
               "max_iter": "500", "restart": "", "threads": "", "solver_groups": "1",
               "partition": "coordinate-bisection"},
    "inverse": {"alpha": "1e-6", "normalize": "true", "memory": "10", "max_iter": "30",
                "rel_tol": "1e-2", "absolute": "false", "rings": "", "initial_step": "1.0",
                "initial": "44-20j", "measured": "", "empty": ""},
    "bench": {"subdomains": "1,2,4,8", "threads": "1,2,4,8"},
    "output": {"dir": "out", "cache_dir": ""},
}


class ConfigError(ValueError):
    pass


class RunConfig:
    """Typed view of the merged INI configuration."""

    def __init__(self, parser: configparser.ConfigParser, seed=None, threads=None):
        self.p = parser
        self.seed_override = seed
        self.threads_override = threads

    def get(self, section, key):
        return self.p.get(section, key).strip()

    def _conv(self, section, key, fn, what):
        raw = self.get(section, key)
        try:
            return fn(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not {what}") from exc

    def float(self, s, k):
        return self._conv(s, k, float, "a number")

    def int(self, s, k):
        return self._conv(s, k, int, "an integer")

    def complex(self, s, k):
        return self._conv(s, k, lambda v: complex(v.replace(" ", "").replace("i", "j")),
                          "a complex number")

    def bool(self, s, k):
        try:
            return self.p.getboolean(s, k)
        except ValueError as exc:
            raise ConfigError(f"[{s}] {k} is not a boolean") from exc

    def vector(self, s, k, n=3):
        raw = self.get(s, k)
        try:
            v = tuple(float(t) for t in raw.split(","))
        except ValueError as exc:
            raise ConfigError(f"[{s}] {k} = {raw!r} is not a list of numbers") from exc
        if len(v) != n:
            raise ConfigError(f"[{s}] {k} needs {n} comma-separated values")
        return v

    def int_list(self, s, k):
        raw = self.get(s, k)
        try:
            return [int(t) for t in raw.split(",") if t.strip()]
        except ValueError as exc:
            raise ConfigError(f"[{s}] {k} = {raw!r} is not a list of integers") from exc

    def path(self, s, k, must_exist=True):
        raw = self.get(s, k)
        if not raw:
            return None
        if must_exist and not Path(raw).exists():
            raise ConfigError(f"[{s}] {k}: file {raw} does not exist")
        return Path(raw)

    # -- sections ---------------------------------------------------------------

    @property
    def seed(self):
        return self.seed_override if self.seed_override is not None else self.int("synth", "seed")

    @property
    def threads(self):
        if self.threads_override is not None:
            t = self.threads_override
        elif os.environ.get("MAXTOMO_THREADS"):
            try:
                t = int(os.environ["MAXTOMO_THREADS"])
            except ValueError as exc:
                raise ConfigError("MAXTOMO_THREADS is not an integer") from exc
        elif self.get("solver", "threads"):
            t = self.int("solver", "threads")
        else:
            t = 1
        if t < 1:
            raise ConfigError(f"threads must be >= 1, got {t}")
        return t

    def physics(self):
        return PhysicsParams(self.float("physics", "frequency"),
                             self.complex("physics", "eps_ceramic"),
                             self.float("physics", "port_width"),
                             self.float("physics", "port_height"),
                             self.float("physics", "amplitude"))

    def chamber(self):
        pp = self.physics()
        return ChamberSpec(self.float("mesh", "radius"), self.float("mesh", "height"),
                           self.int("mesh", "n_rings"), self.int("mesh", "antennas_per_ring"),
                           pp.port_width, pp.port_height, self.float("mesh", "h"))

    def mesh(self):
        path = self.path("mesh", "file")
        if path is not None:
            return load_mesh(path)
        return generate_chamber_mesh(self.chamber())

    def solver(self, **changes):
        restart = self.get("solver", "restart")
        cfg = SolverConfig(self.int("solver", "n_subdomains"), self.int("solver", "delta"),
                           self.get("solver", "variant").upper(), self.float("solver", "tol"),
                           self.int("solver", "max_iter"),
                           int(restart) if restart else None, self.threads,
                           self.get("solver", "partition"), self.int("solver", "solver_groups"))
        cfg = replace(cfg, **changes)
        try:
            cfg.check()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def _ellipsoid(self, prefix):
        if not self.get("material", f"{prefix}_center"):
            return None
        return Ellipsoid(self.vector("material", f"{prefix}_center"),
                         self.vector("material", f"{prefix}_axes"),
                         self.vector("material", f"{prefix}_angles"))

    def material(self, mesh):
        src = self.get("material", "source")
        if src == "uniform":
            return MaterialField.uniform(mesh, self.complex("material", "value"))
        if src == "csv":
            path = self.path("material", "csv")
            if path is None:
                raise ConfigError("[material] csv is required for source = csv")
            return read_nodal_csv(path, mesh.n_nodes, self.complex("material", "background"))
        if src == "phantom":
            head_eps = self.complex("material", "head_eps") \
                if self.get("material", "head_eps") else None
            stroke_eps = self.complex("material", "stroke_eps") \
                if self.get("material", "stroke_eps") else None
            spec = PhantomSpec(self.complex("material", "background"), self._ellipsoid("head"),
                               head_eps, self._ellipsoid("stroke"),
                               self.get("material", "stroke_rule"), stroke_eps,
                               self.complex("material", "blood_eps"))
            return build_phantom(spec, mesh)
        raise ConfigError(f"[material] source must be uniform, csv or phantom, got {src!r}")

    def inverse(self):
        cfg = InverseConfig(self.float("inverse", "alpha"), self.bool("inverse", "normalize"),
                            self.int("inverse", "memory"), self.int("inverse", "max_iter"),
                            self.float("inverse", "rel_tol"), self.bool("inverse", "absolute"),
                            initial_step=self.float("inverse", "initial_step"))
        try:
            cfg.check()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @property
    def out(self):
        d = Path(self.get("output", "dir"))
        d.mkdir(parents=True, exist_ok=True)
        return d

    @property
    def cache_dir(self):
        c = self.get("output", "cache_dir")
        return Path(c) if c else self.out / "cache"


class EventLog:
    """JSON-lines event writer (stdout and a log file)."""

    def __init__(self, path=None, stream=None):
        self.stream = stream if stream is not None else sys.stdout
        self.fh = open(path, "a") if path else None

    def __call__(self, event, **fields):
        rec = json.dumps({"event": event, **fields}, default=_jsonable)
        print(rec, file=self.stream, flush=True)
        if self.fh:
            self.fh.write(rec + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, complex):
        return [v.real, v.imag]
    return str(v)


def load_config(path=None, overrides=()):
    p = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), comment_prefixes=("#", ";"))
    p.read_dict(DEFAULTS)
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            with open(path) as fh:
                p.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for ov in overrides:
        key, sep, value = ov.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {ov!r} must look like --section.key=value")
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if name not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {name!r} in [{section}]")
        p.set(section, name, value)
    for section in p.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        for name in p[section]:
            if name not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {name!r} in [{section}]")
    return p


# ---------------------------------------------------------------------------
# commands


def _log_stats(log, model, stats, transmitters):
    st = merge_stats(stats)
    for col, j in enumerate(transmitters):
        log("solve", transmitter=model.ports[j], iterations=int(st.iterations[col]),
            residual=float(st.residuals[col]), converged=bool(st.converged[col]))
    return st


def cmd_meshgen(cfg: RunConfig, log):
    mesh = cfg.mesh()
    path = cfg.out / "mesh.msh"
    write_mesh(mesh, path)
    log("meshgen", path=str(path), nodes=mesh.n_nodes, tets=mesh.n_tets, ports=mesh.port_tags)
    return EXIT_OK


def cmd_forward(cfg: RunConfig, log):
    mesh = cfg.mesh()
    model = ForwardModel(mesh, cfg.physics(), cfg.solver())
    mat = cfg.material(mesh)
    res = model.forward(mat)
    _log_stats(log, model, res.stats, model.transmitters)
    path = cfg.out / "s_matrix.csv"
    write_smatrix_csv(res.smatrix, path)
    log("forward", path=str(path), dofs=res.operator.system.n,
        setup_time=res.operator.setup_time, solve_time=res.solve_time)
    return EXIT_OK


def cmd_synth(cfg: RunConfig, log):
    mesh = cfg.mesh()
    model = ForwardModel(mesh, cfg.physics(), cfg.solver())
    truth = cfg.material(mesh)
    res = model.forward(truth)
    _log_stats(log, model, res.stats, model.transmitters)
    level = cfg.float("synth", "noise_level")
    noisy = add_noise(res.smatrix, level, cfg.seed)
    empty = empty_reference(model, cfg.complex("material", "background"), cfg.cache_dir)
    out = cfg.out
    write_smatrix_csv(noisy, out / "s_measured.csv")
    write_smatrix_csv(empty, out / "s_empty.csv")
    write_vtk(mesh, out / "truth.vtk", eps_fields(truth.eps))
    write_nodal_csv(truth, out / "truth_eps.csv")
    log("synth", noise_level=level, seed=cfg.seed, dir=str(out))
    return EXIT_OK


def cmd_invert(cfg: RunConfig, log, measured=None, empty=None):
    icfg = cfg.inverse()
    mpath = Path(measured) if measured else cfg.path("inverse", "measured")
    if mpath is None or not mpath.exists():
        raise ConfigError(f"measured S-matrix file {mpath} not found")
    epath = Path(empty) if empty else cfg.path("inverse", "empty")
    if icfg.normalize and (epath is None or not epath.exists()):
        raise ConfigError("normalized cost needs the empty-chamber S-matrix (--empty)")
    mesh = cfg.mesh()
    pp = cfg.physics()
    ports = mesh.port_tags
    try:
        S_mes = read_smatrix_csv(mpath, len(ports), "measured", pp.frequency, ports)
        S_emp = read_smatrix_csv(epath, len(ports), "empty-reference", pp.frequency, ports) \
            if epath is not None else None
    except ScatteringError as exc:
        raise ConfigError(str(exc)) from exc
    init = MaterialField.uniform(mesh, cfg.complex("inverse", "initial"))
    rings = cfg.get("inverse", "rings")

    def progress(h):
        log("iteration", **h)

    if rings:
        ring_ids = None if rings == "all" else cfg.int_list("inverse", "rings")
        field, results = reconstruct_by_rings(mesh, pp, cfg.solver(), S_mes, S_emp, init, icfg,
                                              ring_ids, callback=progress)
        history = [dict(h, iter=k) for k, h in enumerate(
            h for r in results for h in r.history)]
        status = "line-search-failure" if any(r.status == "line-search-failure"
                                              for r in results) else results[-1].status
    else:
        model = ForwardModel(mesh, pp, cfg.solver())
        prob = InverseProblem(model, S_mes, S_emp, init, icfg)
        field, res = reconstruct(prob, callback=progress)
        history, status = res.history, res.status
    out = cfg.out
    write_history_csv(history, out / "history.csv")
    write_vtk(mesh, out / "reconstruction.vtk", eps_fields(field.eps))
    write_nodal_csv(field, out / "reconstruction_eps.csv")
    log("invert", status=status, iterations=history[-1]["iter"], cost=history[-1]["cost"],
        initial_cost=history[0]["cost"], dir=str(out))
    if status == "line-search-failure":
        raise LineSearchFailure("line search failed; last iterate written")
    return EXIT_OK


class LineSearchFailure(RuntimeError):
    pass


def cmd_bench(cfg: RunConfig, log):
    mesh = cfg.mesh()
    pp = cfg.physics()
    mat = cfg.material(mesh)
    rows = []
    for ns in cfg.int_list("bench", "subdomains"):
        for th in cfg.int_list("bench", "threads"):
            model = ForwardModel(mesh, pp, cfg.solver(n_subdomains=ns, threads=th))
            t0 = time.perf_counter()
            res = model.forward(mat)
            total = time.perf_counter() - t0
            st = merge_stats(res.stats)
            row = dict(n_subdomains=ns, threads=th, dofs=res.operator.system.n,
                       setup_time=max(res.operator.precond.setup_times),
                       assembly_time=res.operator.setup_time, solve_time=res.solve_time,
                       total_time=total, iterations_max=int(st.iterations.max()),
                       iterations_mean=float(st.iterations.mean()))
            rows.append(row)
            log("bench", **row)
    path = cfg.out / "bench.csv"
    keys = list(rows[0]) if rows else []
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k])
                              for k in keys) + "\n")
    log("bench_report", path=str(path), rows=len(rows))
    return EXIT_OK


COMMANDS = {"meshgen": cmd_meshgen, "forward": cmd_forward, "synth": cmd_synth,
            "invert": cmd_invert, "bench": cmd_bench}


def build_parser():
    ap = argparse.ArgumentParser(prog="maxtomo", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="INI configuration file")
    ap.add_argument("--seed", type=int, help="noise seed (unsigned 64-bit)")
    ap.add_argument("--threads", type=int, help="worker threads (default: MAXTOMO_THREADS)")
    ap.add_argument("--measured", help="measured S-matrix CSV (invert)")
    ap.add_argument("--empty", help="empty-chamber S-matrix CSV (invert)")
    return ap


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    overrides = [a[2:] for a in argv if a.startswith("--") and "." in a.split("=")[0]]
    rest = [a for a in argv if not (a.startswith("--") and "." in a.split("=")[0])]
    ap = build_parser()
    try:
        args = ap.parse_args(rest)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    log = None
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = RunConfig(load_config(args.config, overrides), args.seed, args.threads)
        cfg.threads  # validate early
        log = EventLog(cfg.out / "log.jsonl")
        log("start", command=args.command, config=args.config, threads=cfg.threads)
        fn = COMMANDS[args.command]
        if args.command == "invert":
            code = fn(cfg, log, args.measured, args.empty)
        else:
            code = fn(cfg, log)
        log("done", command=args.command, code=code)
        return code
    except (ConfigError, MeshError, ValueError, OSError) as exc:
        return _fail(log, EXIT_CONFIG, "config", exc)
    except (SolverError, FactorizationError) as exc:
        return _fail(log, EXIT_SOLVER, "solver", exc)
    except LineSearchFailure as exc:
        return _fail(log, EXIT_OPTIM, "optimization", exc)
    finally:
        if log is not None:
            log.close()


def _fail(log, code, kind, exc):
    msg = json.dumps({"event": "error", "kind": kind, "code": code, "message": str(exc)})
    print(msg, file=sys.stderr, flush=True)
    if log is not None and log.fh:
        log.fh.write(msg + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
