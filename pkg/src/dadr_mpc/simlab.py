"""Closed-loop Monte Carlo runs, disturbance generators, metrics and tests."""

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from . import opt_core
from .controller import Controller, build_parametric, solve_step
from .errors import ConfigError, ControllerFault, InvalidInputError
from .polytope import Polytope

VIOLATION_TOL = 1e-9
TRANSIENT = 10
MIN_ACCEPTANCE = 1e-3
_BATCH = 4096

# ---------------------------------------------------------------------------
# disturbance generators
# ---------------------------------------------------------------------------


@dataclass
class DisturbanceGenerator:
    """Random disturbances restricted to ``support`` by rejection.

    kinds: ``"truncated_gaussian"`` (params ``mean``, ``cov``), ``"uniform"``
    (uniform over the support, proposals from its bounding box) and
    ``"mixture"`` (params ``weights`` and ``components``, a list of
    ``{"mean", "cov"}`` dicts; the mixture as a whole is truncated).
    """

    kind: str
    support: Polytope
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.support.dim
        p = self.params
        if self.kind == "truncated_gaussian":
            self._comps = [(np.asarray(p.get("mean", np.zeros(d)), dtype=float),
                            np.atleast_2d(np.asarray(p["cov"], dtype=float)))]
            self._weights = np.ones(1)
        elif self.kind == "mixture":
            comps = p["components"]
            self._comps = [(np.asarray(c["mean"], dtype=float),
                            np.atleast_2d(np.asarray(c["cov"], dtype=float))) for c in comps]
            w = np.asarray(p.get("weights", np.ones(len(comps))), dtype=float)
            if w.size != len(comps) or np.any(w < 0) or w.sum() <= 0:
                raise ConfigError("mixture weights must be nonnegative and match the components")
            self._weights = w / w.sum()
        elif self.kind == "uniform":
            self._lo, self._hi = self.support.bounding_box()
        else:
            raise ConfigError(f"unknown disturbance generator kind {self.kind!r}")
        if self.kind != "uniform":
            for mean, cov in self._comps:
                if mean.shape != (d,) or cov.shape != (d, d):
                    raise ConfigError("generator mean/covariance do not match the support dimension")
                if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < -1e-12:
                    raise ConfigError("generator covariance must be positive semidefinite")

    def _propose(self, rng, n):
        if self.kind == "uniform":
            return self._lo + (self._hi - self._lo) * rng.random((n, self.support.dim))
        which = rng.choice(len(self._comps), size=n, p=self._weights)
        out = np.empty((n, self.support.dim))
        for k, (mean, cov) in enumerate(self._comps):
            idx = np.flatnonzero(which == k)
            if idx.size:
                out[idx] = rng.multivariate_normal(mean, cov, size=idx.size, method="eigh")
        return out

    def sample(self, rng, n):
        """``n`` draws inside the support (rows)."""
        out = []
        got = tried = 0
        while got < n:
            prop = self._propose(rng, _BATCH)
            ok = np.all(prop @ self.support.M.T <= self.support.m, axis=1)
            tried += _BATCH
            out.append(prop[ok])
            got += int(ok.sum())
            if tried >= 20 * _BATCH and got / tried < MIN_ACCEPTANCE:
                raise ConfigError(f"generator acceptance rate {got / tried:.2e} is below "
                                  f"{MIN_ACCEPTANCE:g}; the support and generator disagree")
        return np.vstack(out)[:n]

    def stream(self, seed):
        rng = np.random.default_rng(seed)
        while True:
            yield from self.sample(rng, 256)


def disturbance_generator(kind, params, support, seed=None):
    """Generator object, or an infinite stream when ``seed`` is given."""
    gen = DisturbanceGenerator(kind, support, dict(params))
    return gen if seed is None else gen.stream(seed)


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------


@dataclass
class ClosedLoopTrace:
    """States ``x_0..x_T`` and the inputs/disturbances ``u_k, w_k`` between them."""

    states: np.ndarray
    inputs: np.ndarray
    disturbances: np.ndarray
    statuses: list
    references: np.ndarray
    seed: int = None
    faulted: bool = False
    fault: str = ""
    candidate_violations: np.ndarray = None
    objectives: np.ndarray = None

    @property
    def T(self):
        return self.inputs.shape[0]

    def replay_residual(self, sys):
        if self.T == 0:
            return 0.0
        pred = (self.states[:-1] @ sys.A.T + self.inputs @ sys.B.T + self.disturbances @ sys.D.T)
        return float(np.max(np.abs(pred - self.states[1:])))


def _reference_at(reference, k):
    if reference is None:
        return None
    if callable(reference):
        return np.atleast_1d(np.asarray(reference(k), dtype=float))
    R = np.atleast_2d(np.asarray(reference, dtype=float))
    return R[min(k, R.shape[0] - 1)]


def run_closed_loop(controller, x_0, T, generator, seed, reference=None):
    """measure -> solve -> apply ``u_0`` -> draw ``w`` -> propagate, ``T`` times.

    A fault at the initial state raises; later faults truncate the trace.
    """
    if not isinstance(controller, Controller):
        controller = Controller(controller)
    sys = controller.cfg.sys
    rng = np.random.default_rng(seed)
    controller.reset()
    x = np.asarray(x_0, dtype=float).copy()
    xs, us, ws, sts, refs, cands, objs = [x.copy()], [], [], [], [], [], []
    faulted, fault = False, ""
    for k in range(T):
        r = _reference_at(reference, k)
        try:
            res = controller.step(x, r)
        except ControllerFault as exc:
            if k == 0:
                raise ControllerFault(f"initial state infeasible: x_0={np.array2string(x)}: {exc}",
                                      status=exc.status, x=x) from exc
            faulted, fault = True, f"step {k}: {exc}"
            sts.append(exc.status or "Fault")
            break
        w = generator.sample(rng, 1)[0]
        controller.observe(w)
        x = sys.step(x, res.u_0, w)
        xs.append(x.copy())
        us.append(res.u_0.copy())
        ws.append(w)
        sts.append(res.status)
        refs.append(np.zeros(0) if r is None else r)
        cands.append(np.nan if res.candidate_violation is None else res.candidate_violation)
        objs.append(res.objective)
    n_r = max((len(r) for r in refs), default=0)
    return ClosedLoopTrace(np.array(xs), np.array(us).reshape(-1, sys.n_u),
                           np.array(ws).reshape(-1, sys.n_w), sts,
                           np.array([np.resize(r, n_r) for r in refs]).reshape(len(refs), n_r),
                           seed, faulted, fault, np.array(cands), np.array(objs))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Pooled statistics over traces; state quantities in reporting units."""

    variance: list
    per_run_variance: list
    violation_upper: list
    violation_lower: list
    mean_trajectory: list
    mean_abs_tracking_error: list
    per_run_mse: list
    avg_stage_cost: float
    sigma_w: list
    bound: float
    n_runs: int
    n_points: int
    faults: int
    wilcoxon_p: float = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _to_units(states, scale):
    if scale is None:
        return states
    offset, gain = scale
    return np.asarray(offset) + states * np.asarray(gain)


def metrics_summary(traces, bounds, cost, P, sys=None, selector=None, scale=None, transient=0):
    """Aggregate closed-loop statistics.

    ``bounds`` is a sequence of ``(lower, upper)`` per state in reporting
    units (``None`` entries skip a side).  ``scale=(offset, gain)`` maps
    normalized states to reporting units.  Time points are ``x_1..x_T``;
    the first ``transient`` of them are dropped.  Violations count strict
    exceedances beyond ``VIOLATION_TOL``.
    """
    if not traces:
        raise InvalidInputError("metrics need at least one trace")
    P = np.asarray(P, dtype=float)
    per_run, pooled, costs, ws, mse, abs_err = [], [], [], [], [], []
    for tr in traces:
        X = _to_units(tr.states[1:], scale)[transient:]
        pooled.append(X)
        per_run.append(X.var(axis=0).tolist() if len(X) else [0.0] * tr.states.shape[1])
        xs, us = tr.states[:-1][transient:], tr.inputs[transient:]
        costs.append(np.einsum("ki,ij,kj->k", xs, cost.Q, xs) + np.einsum("ki,ij,kj->k", us, cost.R, us))
        ws.append(tr.disturbances)
        if selector is not None and tr.references.size:
            err = tr.states[1:] @ np.atleast_2d(selector).T - tr.references
            err = err[transient:]
            mse.append(float(np.mean(np.sum(err ** 2, axis=1))) if len(err) else 0.0)
            abs_err.append(np.abs(err))
    Xall = np.vstack(pooled)
    n_pts = Xall.shape[0]
    upper, lower = [], []
    for i, (lo, hi) in enumerate(bounds):
        col = Xall[:, i] if n_pts else np.zeros(0)
        upper.append(float(np.mean(col > hi + VIOLATION_TOL)) if hi is not None and n_pts else 0.0)
        lower.append(float(np.mean(col < lo - VIOLATION_TOL)) if lo is not None and n_pts else 0.0)
    L = min(len(p) for p in pooled)
    mean_traj = np.mean([p[:L] for p in pooled], axis=0) if L else np.zeros((0, Xall.shape[1]))
    Wall = np.vstack(ws) if ws else np.zeros((0, 1))
    if Wall.shape[0] > 1:
        sigma = np.atleast_2d(np.cov(Wall, rowvar=False))
    else:
        sigma = np.zeros((Wall.shape[1], Wall.shape[1]))
    D = sys.D if sys is not None else np.eye(sigma.shape[0])
    bound = float(np.trace(D @ sigma @ D.T @ P)) if D.shape[0] == P.shape[0] else float("nan")
    cost_all = np.concatenate(costs) if costs else np.zeros(0)
    mae = (np.mean(np.vstack(abs_err), axis=0).tolist() if abs_err else [])
    return MetricsReport(
        variance=(Xall.var(axis=0).tolist() if n_pts else [0.0] * Xall.shape[1]),
        per_run_variance=per_run, violation_upper=upper, violation_lower=lower,
        mean_trajectory=mean_traj.tolist(), mean_abs_tracking_error=mae, per_run_mse=mse,
        avg_stage_cost=float(cost_all.mean()) if cost_all.size else 0.0,
        sigma_w=sigma.tolist(), bound=bound, n_runs=len(traces), n_points=int(n_pts),
        faults=int(sum(tr.faulted for tr in traces)))


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def _midranks(values):
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_v = np.asarray(values)[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def wilcoxon_rank_sum(group_a, group_b):
    """Two-sided rank-sum p-value.

    Exact (enumerating every split of the pooled midranks) when the pooled
    size is at most 12, otherwise the normal approximation with tie and
    continuity corrections.
    """
    a = np.asarray(group_a, dtype=float).ravel()
    b = np.asarray(group_b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise InvalidInputError("both groups must be nonempty")
    n_a, n_b = a.size, b.size
    n = n_a + n_b
    ranks = _midranks(np.concatenate([a, b]))
    w_obs = ranks[:n_a].sum()
    mu = n_a * (n + 1) / 2.0
    dev = abs(w_obs - mu)
    if n <= 12:
        hits = total = 0
        for combo in itertools.combinations(range(n), n_a):
            total += 1
            if abs(ranks[list(combo)].sum() - mu) >= dev - 1e-9:
                hits += 1
        return hits / total
    _, counts = np.unique(ranks, return_counts=True)
    tie = np.sum(counts ** 3 - counts)
    var = n_a * n_b / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        return 1.0
    z = max(dev - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(z)))


def stability_bound_check(traces, cost, P, sys=None, transient=TRANSIENT, tolerance=0.10):
    """Time-averaged stage cost against ``tr(D Sigma_w D' P)``."""
    rep = metrics_summary(traces, [(None, None)] * traces[0].states.shape[1], cost, P,
                          sys=sys, transient=transient)
    return {"avg_cost": rep.avg_stage_cost, "bound": rep.bound,
            "satisfied": bool(rep.avg_stage_cost <= rep.bound * (1.0 + tolerance) + 1e-12)}


# ---------------------------------------------------------------------------
# feasible sets
# ---------------------------------------------------------------------------


@dataclass
class InclusionReport:
    points: np.ndarray
    feasible_da: np.ndarray
    feasible_tube: np.ndarray
    objective_da: np.ndarray
    objective_tube: np.ndarray

    @property
    def count_da(self):
        return int(self.feasible_da.sum())

    @property
    def count_tube(self):
        return int(self.feasible_tube.sum())

    @property
    def violations(self):
        return int(np.sum(self.feasible_tube & ~self.feasible_da))

    @property
    def volume_ratio(self):
        return self.count_da / self.count_tube if self.count_tube else float("inf")

    def objective_gap(self):
        both = self.feasible_da & self.feasible_tube
        return self.objective_da[both] - self.objective_tube[both]

    def to_dict(self):
        gap = self.objective_gap()
        return {"n_points": int(len(self.points)), "feasible_da": self.count_da,
                "feasible_tube": self.count_tube, "inclusion_violations": self.violations,
                "volume_ratio": self.volume_ratio,
                "max_objective_gap": float(gap.max()) if gap.size else None}


def grid_points(lower, upper, per_axis):
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(lower, upper)]
    return np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)


def _feasible(cfg, param, x):
    try:
        res = solve_step(cfg, x, param=param)
        return True, res.objective
    except ControllerFault as exc:
        if exc.status == opt_core.INFEASIBLE:
            return False, np.nan
    # inconclusive QP status: settle feasibility with an LP on the same rows
    prob = param.at(x)
    sol = opt_core.solve_lp(opt_core.QpProblem(prob.n_vars, A_ineq=prob.A_ineq, b_ineq=prob.b_ineq,
                                               A_eq=prob.A_eq, b_eq=prob.b_eq, lb=prob.lb,
                                               ub=prob.ub))
    return sol.ok, np.nan


def feasible_set_grid(cfg_da, cfg_tube, grid):
    """Feasibility and optimal value of both modes at every grid state.

    ``grid`` is an array of states or a dict with ``lower``, ``upper`` and
    ``per_axis``.
    """
    pts = grid_points(grid["lower"], grid["upper"], grid["per_axis"]) if isinstance(grid, dict) \
        else np.atleast_2d(np.asarray(grid, dtype=float))
    p_da, p_tube = build_parametric(cfg_da), build_parametric(cfg_tube)
    fd = np.zeros(len(pts), dtype=bool)
    ft = np.zeros(len(pts), dtype=bool)
    od = np.full(len(pts), np.nan)
    ot = np.full(len(pts), np.nan)
    for k, x in enumerate(pts):
        fd[k], od[k] = _feasible(cfg_da, p_da, x)
        ft[k], ot[k] = _feasible(cfg_tube, p_tube, x)
    return InclusionReport(pts, fd, ft, od, ot)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_trace_csv(path, trace):
    n_x = trace.states.shape[1]
    n_u = trace.inputs.shape[1]
    n_w = trace.disturbances.shape[1]
    n_r = trace.references.shape[1] if trace.references.ndim == 2 else 0
    header = (["time"] + [f"x_{i + 1}" for i in range(n_x)] + [f"u_{i + 1}" for i in range(n_u)]
              + [f"w_{i + 1}" for i in range(n_w)] + ["status"] + [f"ref_{i + 1}" for i in range(n_r)])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for k in range(trace.states.shape[0]):
            row = [k] + [repr(float(v)) for v in trace.states[k]]
            if k < trace.T:
                row += [repr(float(v)) for v in trace.inputs[k]]
                row += [repr(float(v)) for v in trace.disturbances[k]]
                row += [trace.statuses[k]]
                row += [repr(float(v)) for v in trace.references[k]] if n_r else []
            else:
                row += [""] * (n_u + n_w + 1 + n_r)
            wr.writerow(row)


def read_trace_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n_x = sum(h.startswith("x_") for h in header)
    n_u = sum(h.startswith("u_") for h in header)
    n_w = sum(h.startswith("w_") for h in header)
    n_r = sum(h.startswith("ref_") for h in header)
    states = np.array([[float(v) for v in r[1:1 + n_x]] for r in body])
    full = [r for r in body if r[1 + n_x] != ""]
    a = 1 + n_x
    inputs = np.array([[float(v) for v in r[a:a + n_u]] for r in full]).reshape(-1, n_u)
    dist = np.array([[float(v) for v in r[a + n_u:a + n_u + n_w]] for r in full]).reshape(-1, n_w)
    st = [r[a + n_u + n_w] for r in full]
    refs = np.array([[float(v) for v in r[a + n_u + n_w + 1:]] for r in full]).reshape(len(full), n_r)
    return ClosedLoopTrace(states, inputs, dist, st, refs)
