"""Command-line front end for the certified N-body action experiments.

Every command reads an INI-style config (one section per command), lets
flags override it, writes machine-readable artifacts into ``--out`` and
exits with 0 when every check passes, 1 when a check fails and 2 on a
usage or configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .geometry import DomainError, ProblemSpec

log = logging.getLogger("weakkam_nbody")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
COMMANDS = ("connect", "phi", "holder", "weakkam", "central", "parabolic")


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    command: str
    n_bodies: int = 2
    dim: int = 1
    masses: tuple = ()
    kappa: float = 0.5
    seed: int = 0
    seeds: int = 1
    T: float = 1.0
    R: float = 1.0
    nodes: int = 64
    h: float = 0.2
    t_step: float = 0.25
    tol: float | None = None
    x: tuple = ()
    y: tuple = ()
    mode: str = "oracle"
    out: str = "out"
    workers: int = 1

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        self.masses = tuple(float(m) for m in self.masses) or (1.0,) * self.n_bodies
        self.x = tuple(float(v) for v in self.x)
        self.y = tuple(float(v) for v in self.y)
        try:
            self.spec()
        except DomainError as exc:
            raise UsageError(str(exc)) from exc
        if self.T <= 0 or self.R <= 0 or self.h <= 0 or self.t_step <= 0:
            raise UsageError("T, R, h and t_step must be positive")
        if self.nodes < 8 or self.seeds < 1 or self.workers < 1:
            raise UsageError("nodes ≥ 8, seeds ≥ 1 and workers ≥ 1 required")
        if self.tol is not None and self.tol <= 0:
            raise UsageError("tol must be positive")
        for v in (self.x, self.y):
            if v and len(v) != self.n_bodies * self.dim:
                raise UsageError("x and y need n_bodies*dim coordinates")

    def spec(self) -> ProblemSpec:
        return ProblemSpec(self.n_bodies, self.dim, self.masses, self.kappa)

    def to_ini(self) -> str:
        cp = _parser()
        sec = {}
        for f in fields(self):
            if f.name == "command":
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                sec[f.name] = " ".join(repr(float(t)) for t in v)
            elif v is None:
                sec[f.name] = ""
            else:
                sec[f.name] = repr(v) if isinstance(v, float) else str(v)
        cp[self.command] = sec
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, command: str | None = None) -> "ExperimentConfig":
        cp = _parser()
        cp.read_string(text)
        sections = cp.sections()
        if command is None:
            if len(sections) != 1:
                raise UsageError("config must hold exactly one section or name the command")
            command = sections[0]
        data = dict(cp[command]) if cp.has_section(command) else {}
        return cls.from_mapping(command, data)

    @classmethod
    def from_mapping(cls, command: str, data: dict) -> "ExperimentConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in data.items():
            if key not in types or key == "command":
                raise UsageError(f"unknown config key {key!r}")
            if raw is None:
                continue
            t = str(types[key])
            try:
                if isinstance(raw, (list, tuple)):
                    kw[key] = tuple(raw)
                elif "tuple" in t:
                    kw[key] = tuple(float(v) for v in str(raw).replace(",", " ").split())
                elif key == "tol":
                    kw[key] = float(raw) if str(raw).strip() else None
                elif "int" in t:
                    kw[key] = int(raw)
                elif "float" in t:
                    kw[key] = float(raw)
                else:
                    kw[key] = str(raw)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {raw!r}") from exc
        return cls(command, **kw)


# -- helpers -----------------------------------------------------------------

def _parser():
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys such as T and R are case sensitive
    return cp

def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))


def _jsonl(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True, default=_json_default) + "\n")


def _check(name, ok, margin, **extra):
    return dict(name=name, ok=bool(ok), margin=float(margin), **extra)


def _finish(cfg, checks, summary):
    summary = dict(summary, config=asdict(cfg), checks=checks, version=__version__,
                   passed=all(c["ok"] for c in checks))
    _dump(os.path.join(cfg.out, f"{cfg.command}_summary.json"), summary)
    for c in checks:
        print(f"{'PASS' if c['ok'] else 'FAIL'} {c['name']} margin={c['margin']:.6g}")
    return EXIT_OK if summary["passed"] else EXIT_FAIL


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _random_in_ball(rng, n, d, R):
    v = rng.standard_normal((n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = R * rng.random(n) ** (1.0 / d)
    return v * r[:, None]


# -- commands ----------------------------------------------------------------

def _connect_one(args):
    cfg, seed = args
    from .paths import connect
    spec = cfg.spec()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed]))
    x = _random_in_ball(rng, cfg.n_bodies, cfg.dim, cfg.R)
    y = _random_in_ball(rng, cfg.n_bodies, cfg.dim, cfg.R)
    path, cert = connect(spec, x, y, cfg.T, np.zeros(cfg.dim), cfg.R)
    return seed, path.to_csv(), json.loads(cert.to_json())


def cmd_connect(cfg: ExperimentConfig) -> int:
    rows = _map(_connect_one, [(cfg, s) for s in range(cfg.seeds)], cfg.workers)
    for seed, csv_text, _ in rows[:5]:
        with open(os.path.join(cfg.out, f"connect_path_{seed}.csv"), "w") as fh:
            fh.write(csv_text)
    certs = [dict(seed=s, **c) for s, _, c in rows]
    _jsonl(os.path.join(cfg.out, "connect_certificates.jsonl"), certs)
    worst = max(c["action_computed"] / c["bound_value"] for c in certs)
    n_ok = sum(c["satisfied"] for c in certs)
    checks = [_check("connector_bound", n_ok == len(certs), 1 - worst,
                     satisfied=n_ok, total=len(certs))]
    return _finish(cfg, checks, dict(worst_ratio=worst))


def cmd_phi(cfg: ExperimentConfig, batch: str | None = None) -> int:
    from .action_potential import batch_jsonl, free_phi, holder_constant, minimize_action
    if batch:
        with open(batch) as fh:
            text = batch_jsonl(fh.read(), cfg.nodes)
        with open(os.path.join(cfg.out, "phi_batch.jsonl"), "w") as fh:
            fh.write(text)
        rows = [json.loads(line) for line in text.splitlines()]
        ok = all(r["lower_bound"] <= r["value"] <= r["upper_bound"] for r in rows if r["converged"])
        return _finish(cfg, [_check("sandwich", ok, 0.0, queries=len(rows))], {})
    spec = cfg.spec()
    rng = np.random.default_rng(cfg.seed)
    x = np.array(cfg.x).reshape(cfg.n_bodies, cfg.dim) if cfg.x else rng.standard_normal(
        (cfg.n_bodies, cfg.dim))
    y = np.array(cfg.y).reshape(cfg.n_bodies, cfg.dim) if cfg.y else rng.standard_normal(
        (cfg.n_bodies, cfg.dim))
    checks = []
    fixed = minimize_action(spec, x, y, cfg.T, cfg.nodes, seed=cfg.seed)
    checks.append(_check("sandwich_lower", fixed.value >= fixed.lower_bound,
                         fixed.value - fixed.lower_bound))
    checks.append(_check("sandwich_upper", fixed.value <= fixed.upper_bound,
                         fixed.upper_bound - fixed.value))
    est = free_phi(spec, x, y, cfg.nodes, seed=cfg.seed)
    from .geometry import max_norm
    hb = holder_constant(spec) * max_norm(x - y) ** (1 - spec.kappa)
    checks.append(_check("holder_bound", est.value <= hb, hb - est.value))
    rows = [dict(kind="fixed_T", **fixed.to_dict()), dict(kind="free_time", **est.to_dict())]
    _jsonl(os.path.join(cfg.out, "phi.jsonl"), rows)
    with open(os.path.join(cfg.out, "phi_path.csv"), "w") as fh:
        fh.write(est.path.to_csv())
    return _finish(cfg, checks, dict(phi_T=fixed.value, phi=est.value, T_opt=est.T))


def _holder_one(args):
    cfg, s = args
    from .action_potential import free_phi
    spec = cfg.spec()
    x, d = _holder_base(cfg)
    return free_phi(spec, x, x + s * d, cfg.nodes, seed=cfg.seed).value


def _holder_base(cfg):
    if cfg.x and cfg.y:
        x = np.array(cfg.x).reshape(cfg.n_bodies, cfg.dim)
        d = np.array(cfg.y).reshape(cfg.n_bodies, cfg.dim) - x
    else:
        # total collision, where the scaling is exact
        x = np.zeros((cfg.n_bodies, cfg.dim))
        rng = np.random.default_rng(cfg.seed)
        d = rng.standard_normal((cfg.n_bodies, cfg.dim))
        d -= np.asarray(cfg.masses) @ d / sum(cfg.masses)
    return x, d


def cmd_holder(cfg: ExperimentConfig) -> int:
    scales = 2.0 ** np.arange(-4, 5)
    vals = _map(_holder_one, [(cfg, float(s)) for s in scales], cfg.workers)
    slope = float(np.polyfit(np.log(scales), np.log(vals), 1)[0])
    tol = 0.05 if cfg.tol is None else cfg.tol
    target = 1 - cfg.kappa
    with open(os.path.join(cfg.out, "holder.csv"), "w") as fh:
        fh.write("s,phi\n")
        for s, v in zip(scales, vals):
            fh.write(f"{s:.17g},{v:.17g}\n")
    checks = [_check("holder_exponent", abs(slope - target) <= tol, tol - abs(slope - target),
                     slope=slope, target=target)]
    return _finish(cfg, checks, dict(slope=slope))


def cmd_weakkam(cfg: ExperimentConfig) -> int:
    from .weak_kam import (Grid, GridFunction, ReducedProblem, fixed_point_defect,
                           grid_tolerance, iterate_to_fixed_point, kepler_oracle)
    prob = ReducedProblem.collinear(cfg.kappa)
    t = cfg.t_step
    checks = []
    summary = {}
    if cfg.mode == "oracle":
        defects = []
        for h in (cfg.h, cfg.h / 2):
            g = Grid.for_problem(prob, h)
            u = GridFunction.from_callable(g, lambda p: kepler_oracle("u_minus", p[0]),
                                           g.nearest([2.0]))
            defects.append(fixed_point_defect(prob, u, t))
            with open(os.path.join(cfg.out, f"weakkam_u_minus_h{h:g}.csv"), "w") as fh:
                fh.write(u.to_csv())
        ratio = defects[0] / defects[1]
        checks.append(_check("defect_ratio", ratio >= 1.8, ratio - 1.8, ratio=ratio))
        summary.update(defects=defects, ratio=ratio)
    elif cfg.mode == "iterate":
        tol = 1e-4 if cfg.tol is None else cfg.tol
        drifts = []
        for h in (cfg.h, cfg.h / 2):
            g = Grid.for_problem(prob, h)
            u0 = GridFunction.constant(g, 0.0, g.nearest([2.0]))
            u, rep = iterate_to_fixed_point(prob, u0, t, tol, domination_pairs=40, seed=cfg.seed)
            with open(os.path.join(cfg.out, f"weakkam_fixed_h{h:g}.csv"), "w") as fh:
                fh.write(u.to_csv())
            with open(os.path.join(cfg.out, f"weakkam_fixed_h{h:g}.dat"), "w") as fh:
                fh.write(u.to_gnuplot_matrix())
            with open(os.path.join(cfg.out, f"weakkam_report_h{h:g}.json"), "w") as fh:
                fh.write(rep.to_json() + "\n")
            checks.append(_check(f"converged_h{h:g}", rep.converged, tol - rep.sup_change))
            tl = grid_tolerance(h)
            checks.append(_check(f"dominated_h{h:g}", rep.dominated_violation <= tl,
                                 tl - rep.dominated_violation))
            drifts.append(rep.drift_c)
        # the drift should shrink under refinement towards c = 0
        shrink = abs(drifts[1]) <= 0.5 * abs(drifts[0])
        checks.append(_check("drift_to_zero", shrink, 0.5 * abs(drifts[0]) - abs(drifts[1]),
                             drifts=drifts))
        summary.update(drifts=drifts)
    else:
        raise UsageError("weakkam mode must be 'oracle' or 'iterate'")
    return _finish(cfg, checks, summary)


def cmd_central(cfg: ExperimentConfig) -> int:
    from .dynamics import find_central_configuration, sphere_residual
    spec = cfg.spec()
    cc = find_central_configuration(spec, seed=cfg.seed)
    tol = 1e-8 if cfg.tol is None else cfg.tol
    res = sphere_residual(spec, cc.config)
    _dump(os.path.join(cfg.out, "central.json"),
          dict(config=cc.config, u0=cc.u0, is_minimal=cc.is_minimal, residual=res,
               restart_values=cc.restart_values))
    checks = [_check("sphere_residual", res <= tol, tol - res)]
    return _finish(cfg, checks, dict(u0=cc.u0, is_minimal=cc.is_minimal))


def cmd_parabolic(cfg: ExperimentConfig) -> int:
    from .dynamics import (find_central_configuration, parabolic_action_parts,
                           parabolic_discrete_path, parabolic_quadrature)
    from .paths import action_parts
    spec = cfg.spec()
    cc = find_central_configuration(spec, seed=cfg.seed)
    nodes = max(cfg.nodes, 8)
    kin_c, pot_c = parabolic_action_parts(cc, spec, cfg.T)
    closed = kin_c + pot_c
    path = parabolic_discrete_path(cc, spec, cfg.T, nodes)
    kin_d, pot_d = action_parts(spec, path)
    rel_pl = abs(kin_d + pot_d - closed) / closed
    kin_q, pot_q = parabolic_quadrature(cc, spec, cfg.T, nodes)
    rel_q = abs(kin_q + pot_q - closed) / closed
    equi = abs(kin_q - pot_q) / pot_q
    with open(os.path.join(cfg.out, "parabolic_path.csv"), "w") as fh:
        fh.write(path.to_csv())
    checks = [_check("discrete_action", rel_pl < 1e-3, 1e-3 - rel_pl, rel=rel_pl),
              _check("quadrature_action", rel_q < 1e-3, 1e-3 - rel_q, rel=rel_q),
              _check("equipartition", equi < 1e-6, 1e-6 - equi, rel=equi)]
    return _finish(cfg, checks, dict(closed_form=closed, u0=cc.u0,
                                     discrete=[kin_d, pot_d], quadrature=[kin_q, pot_q]))


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weakkam-nbody", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI file; the section named after the command is used")
    p.add_argument("--seed", type=int, help="base seed (default 0)")
    p.add_argument("--workers", type=int, help="worker processes (default: logical CPUs)")
    p.add_argument("--out", help="output directory (default ./out)")
    p.add_argument("--tol", type=float, help="override the command's check tolerance")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set kappa=0.3 --set masses='1 2'")
    p.add_argument("--batch", help="phi only: JSON list of {x, y, T?, kappa, masses}")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING)
    try:
        data = {}
        if ns.config:
            cp = _parser()
            if not cp.read(ns.config):
                raise UsageError(f"cannot read config {ns.config}")
            if cp.has_section(ns.command):
                data.update(cp[ns.command])
        for item in ns.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            data[k.strip()] = v.strip()
        for key in ("seed", "workers", "out", "tol"):
            if getattr(ns, key) is not None:
                data[key] = str(getattr(ns, key))
        data.setdefault("workers", str(os.cpu_count() or 1))
        cfg = ExperimentConfig.from_mapping(ns.command, data)
        os.makedirs(cfg.out, exist_ok=True)
        with open(os.path.join(cfg.out, f"{cfg.command}_config.ini"), "w") as fh:
            fh.write(cfg.to_ini())
        if ns.command == "phi":
            return cmd_phi(cfg, ns.batch)
        return globals()[f"cmd_{ns.command}"](cfg)
    except (UsageError, DomainError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
