"""Command-line front end: config parsing, command dispatch and report export.

Configs are TOML.  All states, inputs and disturbances handed to the
controller are in normalized coordinates; the ``[system]`` scaling map
``physical = offset + gain * normalized`` converts physical state bounds,
references and reported statistics.
"""

import argparse
import json
import os
import sys as _sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import tomli

from . import simlab
from .ambiguity import AmbiguitySpec, identify_support, read_samples_csv
from .controller import DADR, TUBE, Controller, MpcConfig, solve_step, terminal_ingredients
from .errors import (ConfigError, ControllerFault, EmptySetError, InvalidInputError,
                     NotFinitelyDeterminedError)
from .linsys import CostSpec, LinearSystem
from .polytope import Polytope

COMMANDS = ("identify-support", "terminal-set", "solve", "simulate", "compare", "feasible-set")
REQUIRED = ("system.A", "system.B", "cost.Q", "cost.R", "constraints", "disturbance",
            "ambiguity.epsilon", "ambiguity.alpha", "controller.N_h")


@dataclass
class RunConfig:
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    offset: np.ndarray
    gain: np.ndarray
    state_names: list
    F: np.ndarray
    f: np.ndarray
    G: np.ndarray = None
    g: np.ndarray = None
    state_bounds: list = None
    Q: np.ndarray = None
    R: np.ndarray = None
    K_f: np.ndarray = None
    epsilon: float = 0.0
    alpha: float = 0.1
    N: int = 10
    samples_path: str = None
    samples_per_step: bool = False
    sample_seed: int = 0
    N_h: int = 1
    mode: str = DADR
    recursive_feasibility: bool = True
    cvar_grouping: str = "per_step"
    tail_samples: str = "leading"
    sample_refresh: int = 0
    support: dict = field(default_factory=dict)
    generator: dict = field(default_factory=dict)
    T: int = 50
    runs: int = 1
    seed: int = 0
    x0: np.ndarray = None
    transient: int = 0
    tracked: list = None
    levels: np.ndarray = None
    period: int = 0
    grid: dict = None
    source: str = ""

    @property
    def n_x(self):
        return self.A.shape[0]

    def to_normalized(self, idx, values):
        idx = list(idx)
        return (np.asarray(values, dtype=float) - self.offset[idx]) / self.gain[idx]


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _get(tree, path):
    node = tree
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


class _Collector:
    """Reads typed values from the TOML tree, recording every problem."""

    def __init__(self, tree):
        self.tree = tree
        self.problems = []

    def fail(self, key, msg):
        self.problems.append(f"{key}: {msg}")

    def matrix(self, key, required=True, ndim=2):
        raw = _get(self.tree, key)
        if raw is None:
            if required:
                self.fail(key, "missing required key")
            return None
        try:
            arr = np.array(raw, dtype=float)
        except (TypeError, ValueError):
            self.fail(key, "not a numeric array literal")
            return None
        if arr.ndim != ndim or not np.all(np.isfinite(arr)):
            self.fail(key, f"expected a finite {'matrix' if ndim == 2 else 'vector'}, "
                           f"got shape {arr.shape}")
            return None
        return arr

    def number(self, key, default=None, kind=float, check=None, desc=""):
        raw = _get(self.tree, key)
        if raw is None:
            if default is None:
                self.fail(key, "missing required key")
            return default
        if isinstance(raw, bool) or not isinstance(raw, (int, float)) or \
                (kind is int and int(raw) != raw):
            self.fail(key, f"expected {'an integer' if kind is int else 'a number'}, got {raw!r}")
            return default
        val = kind(raw)
        if check is not None and not check(val):
            self.fail(key, f"must be {desc}, got {raw!r}")
            return default
        return val

    def choice(self, key, options, default):
        raw = _get(self.tree, key)
        if raw is None:
            return default
        if raw not in options:
            self.fail(key, f"must be one of {', '.join(map(str, options))}, got {raw!r}")
            return default
        return raw


def _resolve(base, path):
    p = Path(path)
    return p if p.is_absolute() else Path(base).parent / p


def parse_config(path):
    """Parse and validate a TOML run configuration.

    Every problem found is collected and raised together as one
    ``ConfigError`` so that nothing half-validated reaches a builder.
    """
    path = str(path)
    try:
        with open(path, "rb") as fh:
            tree = tomli.load(fh)
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read config ({exc.strerror})"])
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: not valid TOML ({exc})"])
    return config_from_tree(tree, source=path)


def config_from_tree(tree, source=""):
    col = _Collector(tree)
    missing = [k for k in REQUIRED if _get(tree, k) is None]
    if len(missing) == len(REQUIRED):
        raise ConfigError([f"{k}: missing required key" for k in REQUIRED])

    A = col.matrix("system.A")
    B = col.matrix("system.B")
    n_x = n_u = None
    if A is not None:
        if A.shape[0] != A.shape[1]:
            col.fail("system.A", f"must be square, got {A.shape}")
        else:
            n_x = A.shape[0]
    if B is not None:
        n_u = B.shape[1]
        if n_x is not None and B.shape[0] != n_x:
            col.fail("system.B", f"has {B.shape[0]} rows but system.A is {n_x}x{n_x}")
    D = col.matrix("system.D", required=False)
    if D is None and n_x is not None:
        D = np.eye(n_x)
    if D is not None and n_x is not None and D.shape[0] != n_x:
        col.fail("system.D", f"has {D.shape[0]} rows but system.A is {n_x}x{n_x}")
    n_w = None if D is None else D.shape[1]

    offset = col.matrix("system.offset", required=False, ndim=1)
    gain = col.matrix("system.gain", required=False, ndim=1)
    if n_x is not None:
        offset = np.zeros(n_x) if offset is None else offset
        gain = np.ones(n_x) if gain is None else gain
        for key, vec in (("system.offset", offset), ("system.gain", gain)):
            if vec.shape != (n_x,):
                col.fail(key, f"needs {n_x} entries, got {vec.size}")
        if gain.shape == (n_x,) and np.any(gain == 0):
            col.fail("system.gain", "scaling map must be invertible (nonzero gains)")
    names = _get(tree, "system.names") or ([f"x{i + 1}" for i in range(n_x)] if n_x else [])

    Q = col.matrix("cost.Q")
    R = col.matrix("cost.R")
    if Q is not None and n_x is not None and Q.shape != (n_x, n_x):
        col.fail("cost.Q", f"must be {n_x}x{n_x}, got {Q.shape}")
    if R is not None and n_u is not None and R.shape != (n_u, n_u):
        col.fail("cost.R", f"must be {n_u}x{n_u}, got {R.shape}")

    # constraints: physical box or normalized halfspaces
    F = f = G = g = None
    bounds = None
    cons = _get(tree, "constraints")
    if cons is not None and n_x is not None:
        if "state_lower" in cons or "state_upper" in cons:
            lo = col.matrix("constraints.state_lower", ndim=1)
            hi = col.matrix("constraints.state_upper", ndim=1)
            if lo is not None and hi is not None:
                if lo.shape != (n_x,) or hi.shape != (n_x,):
                    col.fail("constraints.state_lower", f"state bounds need {n_x} entries")
                elif np.any(lo >= hi):
                    col.fail("constraints.state_lower", "lower bounds must be below upper bounds")
                elif offset is not None and gain is not None and offset.shape == (n_x,) \
                        and gain.shape == (n_x,):
                    a, b = (lo - offset) / gain, (hi - offset) / gain
                    F = np.vstack([np.eye(n_x), -np.eye(n_x)])
                    f = np.concatenate([np.maximum(a, b), -np.minimum(a, b)])
                    bounds = [(float(x), float(y)) for x, y in zip(lo, hi)]
        else:
            F = col.matrix("constraints.F")
            f = col.matrix("constraints.f", ndim=1)
            if F is not None and F.shape[1] != n_x:
                col.fail("constraints.F", f"needs {n_x} columns, got {F.shape[1]}")
            if F is not None and f is not None and f.size != F.shape[0]:
                col.fail("constraints.f", f"has {f.size} entries but constraints.F has {F.shape[0]} rows")
        if "input_lower" in cons or "input_upper" in cons:
            lo = col.matrix("constraints.input_lower", ndim=1)
            hi = col.matrix("constraints.input_upper", ndim=1)
            if lo is not None and hi is not None and n_u is not None:
                if lo.shape != (n_u,) or hi.shape != (n_u,) or np.any(lo >= hi):
                    col.fail("constraints.input_lower", f"input bounds need {n_u} ordered entries")
                else:
                    G = np.vstack([np.eye(n_u), -np.eye(n_u)])
                    g = np.concatenate([hi, -lo])
        elif "G" in cons:
            G = col.matrix("constraints.G")
            g = col.matrix("constraints.g", ndim=1)
            if G is not None and n_u is not None and G.shape[1] != n_u:
                col.fail("constraints.G", f"needs {n_u} columns, got {G.shape[1]}")
            if G is not None and g is not None and g.size != G.shape[0]:
                col.fail("constraints.g", f"has {g.size} entries but constraints.G has {G.shape[0]} rows")
    K_f = col.matrix("terminal.K_f", required=False)
    if K_f is not None and n_x is not None and n_u is not None and K_f.shape != (n_u, n_x):
        col.fail("terminal.K_f", f"must be {n_u}x{n_x}, got {K_f.shape}")

    # disturbance support and generator
    support, generator = {}, {}
    dist = _get(tree, "disturbance")
    if dist is not None:
        if "support_file" in dist:
            p = _resolve(source, dist["support_file"])
            if not p.exists():
                col.fail("disturbance.support_file", f"file {p} does not exist")
            support = {"file": str(p)}
        elif "support_lower" in dist:
            lo = col.matrix("disturbance.support_lower", ndim=1)
            hi = col.matrix("disturbance.support_upper", ndim=1)
            if lo is not None and hi is not None:
                if n_w is not None and (lo.shape != (n_w,) or hi.shape != (n_w,)):
                    col.fail("disturbance.support_lower", f"support bounds need {n_w} entries")
                elif np.any(lo > hi):
                    col.fail("disturbance.support_lower", "lower bounds exceed upper bounds")
                else:
                    support = {"box": (lo, hi)}
        elif "H" in dist:
            H = col.matrix("disturbance.H")
            h = col.matrix("disturbance.h", ndim=1)
            if H is not None and h is not None:
                if n_w is not None and H.shape[1] != n_w:
                    col.fail("disturbance.H", f"needs {n_w} columns")
                elif h.size != H.shape[0]:
                    col.fail("disturbance.h", "row count does not match disturbance.H")
                else:
                    support = {"H": H, "h": h}
        else:
            margin = col.number("disturbance.margin", 0.05, float, lambda v: v >= 0, "nonnegative")
            if "support_samples" in dist:
                p = _resolve(source, dist["support_samples"])
                if not p.exists():
                    col.fail("disturbance.support_samples", f"file {p} does not exist")
                support = {"samples": str(p), "margin": margin}
            else:
                support = {"identify": col.number("disturbance.identify_draws", 1000, int,
                                                  lambda v: v > 1, "at least 2"),
                           "seed": col.number("disturbance.identify_seed", 0, int,
                                              lambda v: v >= 0, "nonnegative"),
                           "margin": margin}
        kind = col.choice("disturbance.kind", ("truncated_gaussian", "uniform", "mixture"), None)
        if kind is None and _get(tree, "disturbance.kind") is None:
            col.fail("disturbance.kind", "missing required key")
        generator = {"kind": kind, "params": {}}
        if kind == "mixture":
            comps = dist.get("components")
            if not comps:
                col.fail("disturbance.components", "mixture needs at least one component")
            else:
                generator["params"] = {"weights": dist.get("weights", [1.0] * len(comps)),
                                       "components": [dict(c) for c in comps]}
        elif kind == "truncated_gaussian":
            mean = col.matrix("disturbance.mean", ndim=1)
            cov = col.matrix("disturbance.cov")
            generator["params"] = {"mean": mean, "cov": cov}
        if "proposal_lower" in dist:
            lo = col.matrix("disturbance.proposal_lower", ndim=1)
            hi = col.matrix("disturbance.proposal_upper", ndim=1)
            generator["proposal"] = (lo, hi)
        elif "identify" in support:
            col.fail("disturbance.proposal_lower",
                     "identifying the support from generator draws needs a proposal box")

    eps = col.number("ambiguity.epsilon", None, float, lambda v: v >= 0, "nonnegative")
    alpha = col.number("ambiguity.alpha", None, float, lambda v: 0 < v < 1, "in (0, 1)")
    N = col.number("ambiguity.N", 10, int, lambda v: v >= 1, "positive")
    samples_path = _get(tree, "ambiguity.samples")
    if samples_path is not None:
        p = _resolve(source, samples_path)
        if not p.exists():
            col.fail("ambiguity.samples", f"file {p} does not exist")
        samples_path = str(p)
    N_h = col.number("controller.N_h", None, int, lambda v: v >= 1, "positive")

    ref = _get(tree, "reference")
    tracked = levels = None
    period = 0
    if ref is not None:
        tracked = ref.get("states")
        if not isinstance(tracked, list) or not all(isinstance(i, int) for i in tracked) or \
                (n_x is not None and any(not 0 <= i < n_x for i in tracked)):
            col.fail("reference.states", "must be a list of state indices")
            tracked = None
        levels = col.matrix("reference.levels")
        if levels is not None and tracked is not None and levels.shape[1] != len(tracked):
            col.fail("reference.levels", f"each level needs {len(tracked)} entries")
        period = col.number("reference.period", 0, int, lambda v: v >= 0, "nonnegative")

    x0 = col.matrix("simulation.x0", required=False, ndim=1)
    if x0 is None and n_x is not None:
        x0 = np.zeros(n_x)
    if x0 is not None and n_x is not None and x0.shape != (n_x,):
        col.fail("simulation.x0", f"needs {n_x} entries")

    grid = _get(tree, "feasible_set")
    if grid is not None:
        lo = col.matrix("feasible_set.lower", ndim=1)
        hi = col.matrix("feasible_set.upper", ndim=1)
        per = col.number("feasible_set.per_axis", 10, int, lambda v: v >= 2, "at least 2")
        grid = {"lower": lo, "upper": hi, "per_axis": per}

    cfg = RunConfig(
        A=A, B=B, D=D, offset=offset, gain=gain, state_names=list(names), F=F, f=f, G=G, g=g,
        state_bounds=bounds, Q=Q, R=R, K_f=K_f, epsilon=eps, alpha=alpha, N=N,
        samples_path=samples_path,
        samples_per_step=bool(_get(tree, "ambiguity.per_step") or False),
        sample_seed=col.number("ambiguity.sample_seed", 0, int, lambda v: v >= 0, "nonnegative"),
        N_h=N_h, mode=col.choice("controller.mode", (DADR, TUBE), DADR),
        recursive_feasibility=bool(_get(tree, "controller.recursive_feasibility") is not False),
        cvar_grouping=col.choice("controller.cvar_grouping", ("per_step", "joint"), "per_step"),
        tail_samples=col.choice("controller.tail_samples", ("leading", "trailing"), "leading"),
        sample_refresh=col.number("controller.sample_refresh", 0, int, lambda v: v >= 0,
                                  "nonnegative"),
        support=support, generator=generator,
        T=col.number("simulation.T", 50, int, lambda v: v >= 1, "positive"),
        runs=col.number("simulation.runs", 1, int, lambda v: v >= 1, "positive"),
        seed=col.number("simulation.seed", 0, int, lambda v: v >= 0, "nonnegative"),
        x0=x0,
        transient=col.number("simulation.transient", 0, int, lambda v: v >= 0, "nonnegative"),
        tracked=tracked, levels=levels, period=period, grid=grid, source=source)
    if col.problems:
        raise ConfigError(col.problems)
    return cfg


def bundled_config_path(name="gcai.cfg"):
    return Path(str(resources.files("dadr_mpc") / "data" / name))


# ---------------------------------------------------------------------------
# building the objects a config describes
# ---------------------------------------------------------------------------


@dataclass
class Setup:
    cfg: RunConfig
    sys: LinearSystem
    cost: CostSpec
    W: Polytope
    X: Polytope
    U: Polytope
    generator: simlab.DisturbanceGenerator
    spec: AmbiguitySpec = None
    terminal: object = None

    def mpc(self, mode=None):
        if self.terminal is None:
            self.terminal = terminal_ingredients(self.sys, self.cost, self.W, self.X, self.U,
                                                 K_f=self.cfg.K_f)
        return MpcConfig(self.sys, self.cost, self.spec, self.cfg.N_h, self.X, self.terminal,
                         self.U, mode=mode or self.cfg.mode,
                         recursive_feasibility=self.cfg.recursive_feasibility,
                         cvar_grouping=self.cfg.cvar_grouping, tail_samples=self.cfg.tail_samples)

    @property
    def selector(self):
        if self.cfg.tracked is None:
            return None
        return np.eye(self.cfg.n_x)[self.cfg.tracked]

    def reference(self):
        """Schedule in normalized coordinates, or ``None`` for regulation."""
        cfg = self.cfg
        if cfg.tracked is None:
            return None
        levels = np.array([cfg.to_normalized(cfg.tracked, lv) for lv in cfg.levels])
        period = cfg.period

        def ref(k):
            return levels[(k // period) % len(levels)] if period else levels[0]
        return ref

    @property
    def scale(self):
        return (self.cfg.offset, self.cfg.gain)

    def bounds(self):
        return self.cfg.state_bounds or [(None, None)] * self.cfg.n_x


def polytope_to_dict(poly):
    return {"M": poly.M.tolist(), "m": poly.m.tolist()}


def polytope_from_dict(d):
    return Polytope(np.array(d["M"], dtype=float), np.array(d["m"], dtype=float))


def _raw_generator(cfg, support):
    g = cfg.generator
    return simlab.DisturbanceGenerator(g["kind"], support, g["params"])


def identify(cfg, raw=None):
    """Disturbance support: explicit, from a file, or identified from data."""
    s = cfg.support
    if "box" in s:
        return Polytope.box(*s["box"])
    if "H" in s:
        return Polytope(s["H"], s["h"])
    if "file" in s:
        with open(s["file"]) as fh:
            return polytope_from_dict(json.load(fh))
    if raw is None:
        if "samples" in s:
            raw = read_samples_csv(s["samples"], cfg.D.shape[1], 1)
        else:
            proposal = Polytope.box(*cfg.generator["proposal"])
            rng = np.random.default_rng(s["seed"])
            raw = _raw_generator(cfg, proposal).sample(rng, s["identify"])
    return identify_support(raw, s.get("margin", 0.05))


def build_setup(cfg):
    sys = LinearSystem(cfg.A, cfg.B, cfg.D)
    cost = CostSpec(cfg.Q, cfg.R)
    W = identify(cfg)
    X = Polytope(cfg.F, cfg.f)
    U = None if cfg.G is None else Polytope(cfg.G, cfg.g)
    gen = _raw_generator(cfg, W)
    n_w = sys.n_w
    if cfg.samples_path:
        samples = read_samples_csv(cfg.samples_path, n_w, cfg.N_h, per_step=cfg.samples_per_step)
    else:
        samples = gen.sample(np.random.default_rng(cfg.sample_seed),
                             cfg.N * cfg.N_h).reshape(cfg.N, cfg.N_h * n_w)
    spec = AmbiguitySpec.from_step_support(samples, cfg.epsilon, cfg.alpha, W)
    return Setup(cfg, sys, cost, W, X, U, gen, spec)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def simulate_mode(setup, mode, runs, seed, T, x0, check_candidate=False):
    mpc = setup.mpc(mode)
    ctl = Controller(mpc, selector=setup.selector, check_candidate=check_candidate,
                     sample_refresh=setup.cfg.sample_refresh)
    ref = setup.reference()
    traces = []
    for r in range(runs):
        traces.append(simlab.run_closed_loop(ctl, x0, T, setup.generator, seed + r, ref))
    report = simlab.metrics_summary(traces, setup.bounds(), setup.cost, mpc.terminal.P,
                                    sys=setup.sys, selector=setup.selector, scale=setup.scale,
                                    transient=setup.cfg.transient)
    return traces, report


def comparison_report(rep_da, rep_tube):
    p = None
    if rep_da.per_run_mse and rep_tube.per_run_mse:
        p = simlab.wilcoxon_rank_sum(rep_da.per_run_mse, rep_tube.per_run_mse)
    rep_da.wilcoxon_p = rep_tube.wilcoxon_p = p
    return {"dadr": rep_da.to_dict(), "tube": rep_tube.to_dict(), "wilcoxon_p": p}


def comparison_table(comp, state=0, name=None, bounds=None):
    """Aligned text table, one row per controller."""
    name = name or f"x{state + 1}"
    lo, hi = bounds if bounds else (None, None)
    up_lbl = f"{name} > {hi:g}" if hi is not None else "upper viol."
    lo_lbl = f"{name} < {lo:g}" if lo is not None else "lower viol."
    head = f"{'Controller':<12}{'Variance':>12}{up_lbl:>16}{lo_lbl:>16}"
    lines = [f"Statistics of {name}", head, "-" * len(head)]
    for key, label in (("dadr", "DA-DR"), ("tube", "Tube")):
        r = comp[key]
        lines.append(f"{label:<12}{r['variance'][state]:>12.4f}"
                     f"{100 * r['violation_upper'][state]:>15.2f}%"
                     f"{100 * r['violation_lower'][state]:>15.2f}%")
    p = comp.get("wilcoxon_p")
    lines.append("")
    lines.append("Wilcoxon rank-sum p (per-run tracking MSE): "
                 + ("n/a" if p is None else f"{p:.4g}"))
    return "\n".join(lines) + "\n"


def export_report(report, path, format="json"):
    """Write a report as JSON (``MetricsReport`` or plain dict) or as text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "json":
        data = report.to_dict() if hasattr(report, "to_dict") else report
        path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n")
    elif format == "text":
        path.write_text(report if isinstance(report, str) else comparison_table(report))
    else:
        raise InvalidInputError(f"unknown report format {format!r}")
    return path


def load_report(path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _vector(text, n):
    try:
        vals = json.loads(text) if text.strip().startswith("[") else \
            [float(t) for t in text.replace(",", " ").split()]
        v = np.asarray(vals, dtype=float).ravel()
    except (ValueError, TypeError):
        raise InvalidInputError(f"cannot read vector literal {text!r}")
    if v.size != n:
        raise InvalidInputError(f"vector literal needs {n} entries, got {v.size}")
    return v


def _cmd_identify_support(setup_cfg, args, out):
    raw = None
    if args.samples:
        raw = read_samples_csv(args.samples, setup_cfg.D.shape[1], 1)
    W = identify(setup_cfg, raw)
    path = out / "support.json"
    path.write_text(json.dumps(polytope_to_dict(W), indent=2) + "\n")
    print(f"support with {W.n_rows} rows written to {path}")


def _cmd_terminal_set(setup, args, out):
    mpc = setup.mpc()
    t = mpc.terminal
    data = {"K_f": t.K_f.tolist(), "P": t.P.tolist(), "X_f": polytope_to_dict(t.X_f)}
    path = out / "terminal.json"
    path.write_text(json.dumps(data, indent=2) + "\n")
    print(f"terminal set with {t.X_f.n_rows} rows written to {path}")


def _cmd_solve(setup, args, out):
    x0 = _vector(args.x0, setup.cfg.n_x) if args.x0 else setup.cfg.x0
    res = solve_step(setup.mpc(args.mode), x0)
    np.set_printoptions(precision=6, suppress=True)
    print(f"status: {res.status}")
    print(f"objective: {res.objective:.10g}")
    print(f"u_0: {res.u_0}")
    print(f"feedforward c: {res.policy.c}")
    print(f"feedback K:\n{res.policy.K}")


def _write_traces(traces, out, tag):
    for k, tr in enumerate(traces):
        simlab.write_trace_csv(out / f"trace_{tag}_{k:03d}.csv", tr)


def _cmd_simulate(setup, args, out):
    mode = args.mode or setup.cfg.mode
    traces, rep = simulate_mode(setup, mode, args.runs, args.seed, setup.cfg.T, _x0(setup, args))
    _write_traces(traces, out, mode)
    export_report(rep, out / f"report_{mode}.json")
    print(f"{rep.n_runs} runs, {rep.faults} faults; variance {np.round(rep.variance, 4).tolist()}")
    if rep.faults:
        raise ControllerFault(f"{rep.faults} run(s) ended with a solver fault")


def _x0(setup, args):
    return _vector(args.x0, setup.cfg.n_x) if args.x0 else setup.cfg.x0


def _cmd_compare(setup, args, out):
    x0 = _x0(setup, args)
    tr_da, rep_da = simulate_mode(setup, DADR, args.runs, args.seed, setup.cfg.T, x0)
    tr_tube, rep_tube = simulate_mode(setup, TUBE, args.runs, args.seed, setup.cfg.T, x0)
    _write_traces(tr_da, out, DADR)
    _write_traces(tr_tube, out, TUBE)
    comp = comparison_report(rep_da, rep_tube)
    export_report(comp, out / "compare.json")
    state = setup.cfg.tracked[0] if setup.cfg.tracked else 0
    bounds = setup.cfg.state_bounds[state] if setup.cfg.state_bounds else None
    table = comparison_table(comp, state, setup.cfg.state_names[state], bounds)
    export_report(table, out / "compare.txt", format="text")
    print(table, end="")
    if rep_da.faults or rep_tube.faults:
        raise ControllerFault("solver fault during comparison runs")


def _cmd_feasible_set(setup, args, out):
    if setup.cfg.grid is None:
        raise ConfigError(["feasible_set: section required by the feasible-set command"])
    rep = simlab.feasible_set_grid(setup.mpc(DADR), setup.mpc(TUBE), setup.cfg.grid)
    d = rep.to_dict()
    export_report(d, out / "feasible_set.json")
    print(json.dumps(d, indent=2))
    if rep.violations:
        raise ControllerFault(f"{rep.violations} tube-feasible states are infeasible for DA-DR")


_HANDLERS = {"terminal-set": _cmd_terminal_set, "solve": _cmd_solve,
             "simulate": _cmd_simulate, "compare": _cmd_compare,
             "feasible-set": _cmd_feasible_set}


def make_parser():
    p = argparse.ArgumentParser(prog="dadr-mpc", description="Distributionally robust "
                                "disturbance-affine MPC: solve, simulate and compare.")
    p.add_argument("command", help="one of: " + ", ".join(COMMANDS))
    p.add_argument("--config", help="TOML run configuration (default: bundled GCAI example)")
    p.add_argument("--seed", type=int, help="base seed for simulation runs")
    p.add_argument("--out", help="output directory (env DADR_OUT, default ./dadr_out)")
    p.add_argument("--runs", type=int, help="number of closed-loop runs")
    p.add_argument("--mode", choices=(DADR, TUBE), help="controller mode")
    p.add_argument("--x0", help="initial state literal, e.g. '[0.1, 0, 0]' (normalized)")
    p.add_argument("--samples", help="raw disturbance CSV for identify-support")
    return p


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    if args.command not in COMMANDS:
        parser.print_usage(_sys.stderr)
        print(f"unknown command {args.command!r}; expected one of: {', '.join(COMMANDS)}",
              file=_sys.stderr)
        return 2
    out = Path(args.out or os.environ.get("DADR_OUT") or "dadr_out")
    try:
        cfg = parse_config(args.config or bundled_config_path())
        args.seed = cfg.seed if args.seed is None else args.seed
        args.runs = cfg.runs if args.runs is None else args.runs
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "identify-support":
            _cmd_identify_support(cfg, args, out)
        else:
            _HANDLERS[args.command](build_setup(cfg), args, out)
    except ConfigError as exc:
        print(f"configuration error ({len(exc.problems)} problem(s)):", file=_sys.stderr)
        for prob in exc.problems:
            print(f"  {prob}", file=_sys.stderr)
        return 1
    except EmptySetError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 1
    except (ControllerFault, InvalidInputError, NotFinitelyDeterminedError, OSError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
