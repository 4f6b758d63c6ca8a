"""LP / convex QP solving behind one status contract.

Every problem is

    minimize    1/2 z'Hz + f'z
    subject to  A_ineq z <= b_ineq,  A_eq z = b_eq,  lb <= z <= ub

and every backend returns a :class:`Solution` whose multipliers follow the
sign convention ``Hz + f + A_ineq' y_ineq + A_eq' y_eq - y_lb + y_ub = 0``
with ``y_ineq, y_lb, y_ub >= 0``.

Backends: ``"ipm"`` is a primal-dual Mehrotra predictor-corrector method
written here; ``"clarabel"`` (QP) and ``"highs"`` (LP) call the compiled
solvers of the same names.
"""

import contextlib
import io
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidInputError

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"
MAX_ITER = "MaxIter"

LP_TOL = 1e-8
QP_TOL = 1e-7

_DENSE_LIMIT = 400
# Clarabel's own stopping tolerances sit below the KKT target by this factor
_CLARABEL_MARGIN = 0.01

_LOGS = []


@contextlib.contextmanager
def solve_log():
    """Collect ``(backend, status, kkt_max, tol)`` for every solve inside the block."""
    entries = []
    _LOGS.append(entries)
    try:
        yield entries
    finally:
        _LOGS.remove(entries)


def _csc(M, shape):
    if M is None:
        return sp.csc_matrix(shape)
    M = sp.csc_matrix(M, dtype=float)
    if M.shape != shape:
        raise InvalidInputError(f"matrix has shape {M.shape}, expected {shape}")
    return M


def _nrows(M):
    return M.shape[0] if sp.issparse(M) else np.atleast_2d(np.asarray(M, dtype=float)).shape[0]


def _vec(x, n, fill=0.0):
    if x is None:
        return np.full(n, fill)
    x = np.asarray(x, dtype=float).ravel()
    if x.size != n:
        raise InvalidInputError(f"vector has length {x.size}, expected {n}")
    return x


@dataclass
class QpProblem:
    n_vars: int
    Hq: object = None
    fq: object = None
    A_ineq: object = None
    b_ineq: object = None
    A_eq: object = None
    b_eq: object = None
    lb: object = None
    ub: object = None
    # problems sharing matrices (parametric families) may share this dict
    cache: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = int(self.n_vars)
        self.n_vars = n
        self.Hq = _csc(self.Hq, (n, n))
        if self.Hq.nnz and abs(self.Hq - self.Hq.T).max() > 1e-9 * max(1.0, abs(self.Hq).max()):
            raise InvalidInputError("Hq must be symmetric")
        self.fq = _vec(self.fq, n)
        m_in = 0 if self.A_ineq is None else _nrows(self.A_ineq)
        m_eq = 0 if self.A_eq is None else _nrows(self.A_eq)
        self.A_ineq = _csc(self.A_ineq, (m_in, n))
        self.b_ineq = _vec(self.b_ineq, m_in)
        self.A_eq = _csc(self.A_eq, (m_eq, n))
        self.b_eq = _vec(self.b_eq, m_eq)
        self.lb = _vec(self.lb, n, -np.inf)
        self.ub = _vec(self.ub, n, np.inf)
        if np.any(np.isnan(self.lb)) or np.any(np.isnan(self.ub)):
            raise InvalidInputError("bounds must not be NaN")

    @property
    def is_lp(self):
        return self.Hq.nnz == 0

    def objective(self, z):
        return float(0.5 * z @ (self.Hq @ z) + self.fq @ z)

    def stacked_inequalities(self):
        """All inequalities, bounds included, as ``G z <= h``.

        Returns ``(G, h, lb_idx, ub_idx)`` where the index arrays tell which
        variables own the trailing bound rows.
        """
        n = self.n_vars
        lb_idx = np.flatnonzero(np.isfinite(self.lb))
        ub_idx = np.flatnonzero(np.isfinite(self.ub))
        h = np.concatenate([self.b_ineq, -self.lb[lb_idx], self.ub[ub_idx]])
        key = ("G", lb_idx.tobytes(), ub_idx.tobytes())
        if self.cache is not None and key in self.cache:
            return self.cache[key], h, lb_idx, ub_idx
        eye = sp.identity(n, format="csr")
        G = sp.vstack([self.A_ineq, -eye[lb_idx], eye[ub_idx]], format="csc")
        if self.cache is not None:
            self.cache[key] = G
        return G, h, lb_idx, ub_idx


@dataclass
class KktReport:
    primal: float
    dual: float
    complementarity: float
    primal_abs: float
    dual_abs: float

    def max(self):
        return max(self.primal, self.dual, self.complementarity)


@dataclass
class Solution:
    z: np.ndarray
    status: str
    objective: float
    kkt: KktReport = None
    y_ineq: np.ndarray = None
    y_eq: np.ndarray = None
    y_lb: np.ndarray = None
    y_ub: np.ndarray = None
    iterations: int = 0
    solve_time: float = 0.0
    backend: str = ""
    info: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.status == OPTIMAL


def check_kkt(problem, z, y_ineq=None, y_eq=None, y_lb=None, y_ub=None):
    """Residuals of the KKT conditions at ``z`` (and multipliers, if given).

    When multipliers are omitted they are fitted by nonnegative least squares
    on the stationarity equation, restricted to the constraints active at ``z``.
    Residuals are relative: each norm is divided by ``1 +`` the largest term it
    is built from.
    """
    p = problem
    z = _vec(z, p.n_vars)
    G, h, lb_idx, ub_idx = p.stacked_inequalities()
    Gz = G @ z
    Aez = p.A_eq @ z
    viol_in = np.maximum(Gz - h, 0.0)
    viol_eq = Aez - p.b_eq
    primal_abs = max(_inf(viol_in), _inf(viol_eq))
    primal_scale = 1.0 + max(_inf(h), _inf(p.b_eq), _inf(Gz), _inf(Aez))

    Hz = p.Hq @ z
    grad = Hz + p.fq
    if y_ineq is None and y_eq is None and y_lb is None and y_ub is None:
        y, nu = _fit_multipliers(G, h, Gz, p.A_eq, grad)
    else:
        y = np.concatenate([
            _vec(y_ineq, p.A_ineq.shape[0]),
            _vec(y_lb, p.n_vars)[lb_idx],
            _vec(y_ub, p.n_vars)[ub_idx],
        ])
        nu = _vec(y_eq, p.A_eq.shape[0])
    Gty = G.T @ y
    Atnu = p.A_eq.T @ nu
    stat = grad + Gty + Atnu
    dual_abs = max(_inf(stat), _inf(np.minimum(y, 0.0)))
    dual_scale = 1.0 + max(_inf(p.fq), _inf(Hz), _inf(Gty), _inf(Atnu))

    slack = h - Gz
    comp = np.abs(np.maximum(y, 0.0) * slack)
    comp_abs = max(_inf(comp), abs(float(y @ slack)))
    comp_scale = 1.0 + abs(p.objective(z))
    return KktReport(primal_abs / primal_scale, dual_abs / dual_scale,
                     comp_abs / comp_scale, primal_abs, dual_abs)


def _inf(x):
    return float(np.max(np.abs(x))) if np.size(x) else 0.0


def _fit_multipliers(G, h, Gz, A_eq, grad, active_tol=1e-7):
    import scipy.optimize

    scale = 1.0 + np.maximum(np.abs(h), np.abs(Gz))
    active = np.flatnonzero(h - Gz <= active_tol * scale)
    Ga = G[active].toarray().T if active.size else np.zeros((G.shape[1], 0))
    Ae = A_eq.toarray().T
    # nu is free: split into +/- parts to use NNLS
    M = np.hstack([Ga, Ae, -Ae])
    if M.shape[1] == 0:
        return np.zeros(G.shape[0]), np.zeros(A_eq.shape[0])
    coef, _ = scipy.optimize.nnls(M, -grad, maxiter=50 * M.shape[1])
    y = np.zeros(G.shape[0])
    y[active] = coef[:active.size]
    m_eq = A_eq.shape[0]
    nu = coef[active.size:active.size + m_eq] - coef[active.size + m_eq:]
    return y, nu


def _finish(problem, z, status, backend, t0, iterations=0, y_ineq=None, y_eq=None,
            y_lb=None, y_ub=None, info=None):
    n = problem.n_vars
    z = np.asarray(z, dtype=float) if z is not None else np.full(n, np.nan)
    if status == OPTIMAL:
        kkt = check_kkt(problem, z, y_ineq, y_eq, y_lb, y_ub)
        obj = problem.objective(z)
    else:
        kkt = None
        obj = np.nan
    return Solution(z=z, status=status, objective=obj, kkt=kkt, y_ineq=y_ineq, y_eq=y_eq,
                    y_lb=y_lb, y_ub=y_ub, iterations=iterations,
                    solve_time=time.perf_counter() - t0, backend=backend, info=info or {})


def _split_stacked(problem, y_all, lb_idx, ub_idx):
    m_in = problem.A_ineq.shape[0]
    n = problem.n_vars
    y_in = y_all[:m_in].copy()
    y_lb = np.zeros(n)
    y_ub = np.zeros(n)
    y_lb[lb_idx] = y_all[m_in:m_in + lb_idx.size]
    y_ub[ub_idx] = y_all[m_in + lb_idx.size:]
    return y_in, y_lb, y_ub


# ---------------------------------------------------------------------------
# Mehrotra predictor-corrector interior point method
# ---------------------------------------------------------------------------

def _ipm(problem, tol, max_iter=200):
    t0 = time.perf_counter()
    p = problem
    n = p.n_vars
    G, h, lb_idx, ub_idx = p.stacked_inequalities()
    A, b = p.A_eq, p.b_eq
    H = p.Hq
    m, me = G.shape[0], A.shape[0]
    dense = n + me <= _DENSE_LIMIT
    if dense:
        H, G, A = H.toarray(), G.toarray(), A.toarray()
    q = p.fq
    reg = 1e-10

    def kkt_solve(Wdiag, r1, r2):
        if dense:
            K11 = H + (G.T * Wdiag) @ G + reg * np.eye(n)
            K = np.block([[K11, A.T], [A, -reg * np.eye(me)]])
            sol = np.linalg.solve(K, np.concatenate([r1, r2]))
            # one step of iterative refinement against the unregularized system
            K0 = np.block([[H + (G.T * Wdiag) @ G, A.T], [A, np.zeros((me, me))]])
            res = np.concatenate([r1, r2]) - K0 @ sol
            sol = sol + np.linalg.solve(K, res)
        else:
            K11 = H + G.T @ sp.diags(Wdiag) @ G + reg * sp.identity(n)
            K = sp.bmat([[K11, A.T], [A, -reg * sp.identity(me)]], format="csc")
            lu = spla.splu(K, permc_spec="COLAMD")
            rhs = np.concatenate([r1, r2])
            sol = lu.solve(rhs)
            K0 = sp.bmat([[K11 - reg * sp.identity(n), A.T], [A, None]], format="csc")
            sol = sol + lu.solve(rhs - K0 @ sol)
        return sol[:n], sol[n:]

    # initial point: solve the equality-constrained QP with unit slacks
    z, nu = kkt_solve(np.ones(m), -q + G.T @ h, b)
    s = h - G @ z
    y = np.ones(m)
    alpha_p = -np.min(s) if m else 0.0
    s = s + max(alpha_p, 0.0) + 1.0 if m else s
    y = np.ones(m)

    hnorm = 1.0 + max(_inf(h), _inf(b))
    qnorm = 1.0 + _inf(q)
    status = MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        Hz = H @ z
        r_d = Hz + q + G.T @ y + A.T @ nu
        r_eq = A @ z - b
        r_in = G @ z + s - h
        mu = float(s @ y) / m if m else 0.0
        obj = 0.5 * z @ Hz + q @ z
        pres = max(_inf(r_eq), _inf(r_in)) / hnorm
        dres = _inf(r_d) / (qnorm + _inf(Hz))
        gap = abs(float(s @ y)) / (1.0 + abs(obj))
        if pres <= tol * 0.1 and dres <= tol * 0.1 and gap <= tol * 0.1:
            status = OPTIMAL
            break
        # infeasibility certificates (normalized dual / primal directions)
        cert = -(h @ y + b @ nu)
        if m and cert > 0:
            scale = max(_inf(y), _inf(nu))
            if scale > 1e6 and _inf(G.T @ y + A.T @ nu) / cert <= 1e-7 * hnorm:
                status = INFEASIBLE
                break
        zn = _inf(z)
        if zn > 1e8 * (1.0 + _inf(h)):
            d = z / zn
            descent = -(q @ d)
            if descent > 0 and _inf(H @ d) <= 1e-7 * descent * qnorm and \
                    _inf(np.maximum(G @ d, 0)) <= 1e-7 * descent and _inf(A @ d) <= 1e-7 * descent:
                status = UNBOUNDED
                break

        W = y / s
        # predictor
        r_c = s * y

        def direction(r_c):
            rhs1 = -r_d - G.T @ ((y * r_in - r_c) / s)
            dz, dnu = kkt_solve(W, rhs1, -r_eq)
            ds = -r_in - G @ dz
            dy = (-r_c - y * ds) / s
            return dz, ds, dy, dnu

        dz, ds, dy, dnu = direction(r_c)
        a_p = min(1.0, _step_to_boundary(s, ds))
        a_d = min(1.0, _step_to_boundary(y, dy))
        mu_aff = float((s + a_p * ds) @ (y + a_d * dy)) / m if m else 0.0
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        r_c = s * y + ds * dy - sigma * mu
        dz, ds, dy, dnu = direction(r_c)
        a_p = min(1.0, 0.99 * _step_to_boundary(s, ds))
        a_d = min(1.0, 0.99 * _step_to_boundary(y, dy))
        a = min(a_p, a_d)
        z = z + a * dz
        s = s + a * ds
        y = y + a * dy
        nu = nu + a * dnu

    if status == OPTIMAL:
        y_in, y_lb, y_ub = _split_stacked(p, y, lb_idx, ub_idx)
        return _finish(p, z, status, "ipm", t0, it, y_in, nu, y_lb, y_ub)
    return _finish(p, z if status != INFEASIBLE else None, status, "ipm", t0, it)


def _step_to_boundary(x, dx):
    neg = dx < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-x[neg] / dx[neg]))


# ---------------------------------------------------------------------------
# compiled backends
# ---------------------------------------------------------------------------

def _highs(problem, tol):
    import scipy.optimize

    t0 = time.perf_counter()
    p = problem
    bounds = np.column_stack([p.lb, p.ub])
    res = scipy.optimize.linprog(
        p.fq,
        A_ub=p.A_ineq if p.A_ineq.shape[0] else None,
        b_ub=p.b_ineq if p.A_ineq.shape[0] else None,
        A_eq=p.A_eq if p.A_eq.shape[0] else None,
        b_eq=p.b_eq if p.A_eq.shape[0] else None,
        bounds=bounds,
        method="highs",
        options={"primal_feasibility_tolerance": max(tol * 0.1, 1e-10),
                 "dual_feasibility_tolerance": max(tol * 0.1, 1e-10),
                 "presolve": True},
    )
    if res.status == 0:
        y_in = -res.ineqlin.marginals if p.A_ineq.shape[0] else np.zeros(0)
        y_eq = -res.eqlin.marginals if p.A_eq.shape[0] else np.zeros(0)
        y_lb = np.maximum(res.lower.marginals, 0.0)
        y_ub = np.maximum(-res.upper.marginals, 0.0)
        return _finish(p, res.x, OPTIMAL, "highs", t0, res.nit, y_in, y_eq, y_lb, y_ub)
    status = {2: INFEASIBLE, 3: UNBOUNDED}.get(res.status, MAX_ITER)
    return _finish(p, None, status, "highs", t0, getattr(res, "nit", 0),
                   info={"message": res.message})


def _clarabel(problem, tol, refine=False):
    """Conic interior point solve.  Iterative refinement is off on the first
    attempt; the solve is repeated with it on when the KKT check fails."""
    import clarabel

    t0 = time.perf_counter()
    p = problem
    G, h, lb_idx, ub_idx = p.stacked_inequalities()
    me, m = p.A_eq.shape[0], G.shape[0]
    key = ("clarabel", G.shape)
    if p.cache is not None and key in p.cache:
        A, P = p.cache[key]
    else:
        A = sp.vstack([p.A_eq, G], format="csc")
        P = sp.triu(p.Hq, format="csc")
        if p.cache is not None:
            p.cache[key] = (A, P)
    b = np.concatenate([p.b_eq, h])
    cones = []
    if me:
        cones.append(clarabel.ZeroConeT(me))
    if m:
        cones.append(clarabel.NonnegativeConeT(m))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = tol * _CLARABEL_MARGIN
    settings.tol_gap_rel = tol * _CLARABEL_MARGIN
    settings.tol_feas = tol * _CLARABEL_MARGIN
    settings.max_iter = 200
    settings.iterative_refinement_enable = refine
    solver = clarabel.DefaultSolver(P, p.fq, A, b, cones, settings)
    res = solver.solve()
    name = str(res.status)
    if name in ("Solved", "AlmostSolved"):
        zd = np.asarray(res.z)
        y_in, y_lb, y_ub = _split_stacked(p, zd[me:], lb_idx, ub_idx)
        sol = _finish(p, np.asarray(res.x), OPTIMAL, "clarabel", t0, res.iterations,
                      y_in, zd[:me], y_lb, y_ub, info={"raw_status": name})
        if sol.kkt.max() > tol:
            if not refine:
                return _clarabel(problem, tol, refine=True)
            sol.status = MAX_ITER
        return sol
    if not refine:
        return _clarabel(problem, tol, refine=True)
    if "PrimalInfeasible" in name:
        status = INFEASIBLE
    elif "DualInfeasible" in name:
        status = UNBOUNDED
    else:
        status = MAX_ITER
    return _finish(p, None, status, "clarabel", t0, res.iterations, info={"raw_status": name})


def _logged(sol, tol):
    for log in _LOGS:
        log.append((sol.backend, sol.status, sol.kkt.max() if sol.kkt is not None else np.nan, tol))
    return sol


def solve_lp(problem, backend="highs", tol=LP_TOL):
    if not problem.is_lp:
        raise InvalidInputError("solve_lp called on a problem with a quadratic term")
    if backend == "highs":
        return _logged(_highs(problem, tol), tol)
    if backend == "ipm":
        return _logged(_ipm(problem, tol), tol)
    if backend == "clarabel":
        return _logged(_clarabel(problem, tol), tol)
    raise InvalidInputError(f"unknown LP backend {backend!r}")


def solve_qp(problem, backend="clarabel", tol=QP_TOL):
    if backend == "clarabel":
        return _logged(_clarabel(problem, tol), tol)
    if backend == "ipm":
        return _logged(_ipm(problem, tol), tol)
    if backend == "highs" and problem.is_lp:
        return _logged(_highs(problem, tol), tol)
    raise InvalidInputError(f"unknown QP backend {backend!r}")


# ---------------------------------------------------------------------------
# plain-text dump
# ---------------------------------------------------------------------------

def dump_problem(problem, path):
    """Write ``problem`` as key-value header lines plus Matrix Market blocks.

    Layout::

        n_vars = <int>
        m_ineq = <int>
        m_eq = <int>
        [Hq] / [A_ineq] / [A_eq]      coordinate Matrix Market text
        [fq] / [b_ineq] / [b_eq] / [lb] / [ub]   one value per line
    """
    p = problem
    out = [f"n_vars = {p.n_vars}", f"m_ineq = {p.A_ineq.shape[0]}", f"m_eq = {p.A_eq.shape[0]}"]
    for name in ("Hq", "A_ineq", "A_eq"):
        buf = io.BytesIO()
        scipy.io.mmwrite(buf, sp.coo_matrix(getattr(p, name)), precision=17)
        out.append(f"[{name}]")
        out.append(buf.getvalue().decode().rstrip("\n"))
        out.append(f"[/{name}]")
    for name in ("fq", "b_ineq", "b_eq", "lb", "ub"):
        out.append(f"[{name}]")
        out.extend(repr(float(x)) for x in getattr(p, name))
        out.append(f"[/{name}]")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def load_problem(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    header, blocks, i = {}, {}, 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("[") and not line.startswith("[/"):
            name = line[1:-1]
            j = lines.index(f"[/{name}]", i)
            blocks[name] = lines[i + 1:j]
            i = j + 1
            continue
        if "=" in line:
            key, val = (s.strip() for s in line.split("=", 1))
            header[key] = int(val)
        i += 1
    n = header["n_vars"]
    mats = {}
    for name, shape in (("Hq", (n, n)), ("A_ineq", (header["m_ineq"], n)),
                        ("A_eq", (header["m_eq"], n))):
        text = "\n".join(blocks[name]) + "\n"
        M = scipy.io.mmread(io.BytesIO(text.encode()))
        mats[name] = sp.csc_matrix(M).reshape(shape)
    vecs = {name: np.array([float(x) for x in blocks[name]])
            for name in ("fq", "b_ineq", "b_eq", "lb", "ub")}
    return QpProblem(n, mats["Hq"], vecs["fq"], mats["A_ineq"], vecs["b_ineq"],
                     mats["A_eq"], vecs["b_eq"], vecs["lb"], vecs["ub"])
