"""Linear constraint blocks and the quadratic objective of the horizon problem.

Every constraint is affine in the stacked decision vector and in the measured
state ``x``; blocks store ``A z <= b0 + Bx x`` so that a problem is built once
and re-parametrized cheaply at each step.

Uncertain rows are written as

    e_j(w) = ax_j x + lc_j c + (V_j v + beta_j)' w + const_j,

with ``w`` the stacked disturbance over the horizon.  The disturbance support
is a power ``W^{N_h}``, so worst cases and transport duals split per step and
steps with a structurally zero coefficient drop out exactly.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import opt_core
from .errors import InvalidInputError
from .linsys import _policy_index, policy_dim, policy_map
from .polytope import support_value

GROUPINGS = ("per_step", "joint")
TAIL_MODES = ("leading", "trailing")


class VarIndex:
    """Named, contiguous column ranges of the stacked decision vector."""

    def __init__(self):
        self._slices = {}
        self._lb = []
        self._ub = []
        self.n = 0

    def add(self, name, size, lb=-np.inf, ub=np.inf):
        if name in self._slices:
            raise InvalidInputError(f"variable group {name!r} registered twice")
        s = slice(self.n, self.n + int(size))
        self._slices[name] = s
        self._lb.append(np.full(int(size), lb, dtype=float))
        self._ub.append(np.full(int(size), ub, dtype=float))
        self.n += int(size)
        return s

    def __getitem__(self, name):
        return self._slices[name]

    def __contains__(self, name):
        return name in self._slices

    def names(self):
        return list(self._slices)

    def bounds(self):
        if not self._lb:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(self._lb), np.concatenate(self._ub)


class _Rows:
    """Sparse row accumulator for ``A z <= b0 + Bx x`` (or equalities)."""

    def __init__(self, n_x):
        self.n_x = n_x
        self.cols, self.vals, self.rows = [], [], []
        self.b0, self.bx = [], []

    def add(self, cols, vals, rhs=0.0, rhs_x=None):
        r = len(self.b0)
        cols = np.asarray(cols, dtype=int).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        keep = vals != 0
        self.cols.append(cols[keep])
        self.vals.append(vals[keep])
        self.rows.append(np.full(int(keep.sum()), r, dtype=int))
        self.b0.append(float(rhs))
        self.bx.append(np.zeros(self.n_x) if rhs_x is None else np.asarray(rhs_x, dtype=float))
        return r

    def __len__(self):
        return len(self.b0)

    def finish(self, n_cols):
        m = len(self.b0)
        if m == 0:
            return sp.csr_matrix((0, n_cols)), np.zeros(0), np.zeros((0, self.n_x))
        A = sp.csr_matrix((np.concatenate(self.vals), (np.concatenate(self.rows),
                                                         np.concatenate(self.cols))),
                          shape=(m, n_cols))
        return A, np.array(self.b0), np.vstack(self.bx)


@dataclass
class ConstraintBlock:
    """Rows ``A_ineq z <= b_ineq + Bx_ineq x`` and ``A_eq z = b_eq``."""

    name: str
    A_ineq: sp.csr_matrix
    b_ineq: np.ndarray
    Bx_ineq: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    var_names: list = field(default_factory=list)

    @property
    def n_ineq(self):
        return self.A_ineq.shape[0]

    @property
    def n_eq(self):
        return self.A_eq.shape[0]


def _block(name, index, ineq, eq, names_before):
    A_in, b_in, Bx_in = ineq.finish(index.n)
    A_eq, b_eq, _ = eq.finish(index.n)
    return ConstraintBlock(name, A_in, b_in, Bx_in, A_eq, b_eq,
                           [n for n in index.names() if n not in names_before])


# ---------------------------------------------------------------------------
# uncertain rows
# ---------------------------------------------------------------------------

@dataclass
class UncertainRows:
    ax: np.ndarray       # (J, n_x)
    lc: np.ndarray       # (J, n_u N_h)
    const: np.ndarray    # (J,)
    V: np.ndarray        # (J, n_w N_h, n_v)
    beta: np.ndarray     # (J, n_w N_h)
    step: np.ndarray     # (J,) prediction step each row belongs to
    n_w: int
    N_h: int

    def __len__(self):
        return self.const.size

    def select(self, mask):
        mask = np.asarray(mask)
        return UncertainRows(self.ax[mask], self.lc[mask], self.const[mask], self.V[mask],
                             self.beta[mask], self.step[mask], self.n_w, self.N_h)

    def coeff(self, j, p):
        """``(V_p, beta_p)`` of row ``j`` for the disturbance at step ``p``."""
        blk = slice(p * self.n_w, (p + 1) * self.n_w)
        return self.V[j, blk, :], self.beta[j, blk]

    def is_zero(self, j, p):
        Vp, bp = self.coeff(j, p)
        return not (np.any(Vp) or np.any(bp))

    def evaluate(self, x, c, v, w):
        """Row values for concrete data; ``w`` may be a matrix of samples (rows)."""
        W = np.atleast_2d(w)
        slope = np.einsum("jkn,n->jk", self.V, v) + self.beta
        base = self.ax @ x + self.lc @ c + self.const
        return base[None, :] + W @ slope.T


def _clean(M, tol=1e-13):
    M = np.array(M, dtype=float)
    M[np.abs(M) <= tol * max(1.0, np.max(np.abs(M), initial=0.0))] = 0.0
    return M


def state_rows(pred, F, f, steps=None):
    """``F x_s <= f`` for each prediction step ``s`` in ``steps`` (1-based)."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    f = np.asarray(f, dtype=float).ravel()
    if F.shape[1] != pred.n_x:
        raise InvalidInputError("state constraint matrix has the wrong number of columns")
    steps = list(range(1, pred.N_h)) if steps is None else list(steps)
    phi, step, const = [], [], []
    for s in steps:
        if not 1 <= s <= pred.N_h:
            raise InvalidInputError(f"prediction step {s} outside 1..{pred.N_h}")
        for r in range(F.shape[0]):
            row = np.zeros(pred.n_x * pred.N_h)
            row[pred.rows(s)] = F[r]
            phi.append(row)
            step.append(s)
            const.append(-f[r])
    if not phi:
        return _empty_rows(pred)
    Phi = np.array(phi)
    lc = _clean(Phi @ pred.Lu)
    return UncertainRows(_clean(Phi @ pred.Lx), lc, np.array(const),
                         policy_map(lc, pred.N_h, pred.n_u, pred.n_w),
                         _clean(Phi @ pred.Lw), np.array(step), pred.n_w, pred.N_h)


def input_rows(pred, G, g):
    """``G u_s <= g`` for every input step ``s = 0..N_h-1``."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    g = np.asarray(g, dtype=float).ravel()
    if G.shape[1] != pred.n_u:
        raise InvalidInputError("input constraint matrix has the wrong number of columns")
    n_c = pred.n_u * pred.N_h
    rho, step, const = [], [], []
    for s in range(pred.N_h):
        for r in range(G.shape[0]):
            row = np.zeros(n_c)
            row[s * pred.n_u:(s + 1) * pred.n_u] = G[r]
            rho.append(row)
            step.append(s)
            const.append(-g[r])
    R = np.array(rho)
    J = R.shape[0]
    return UncertainRows(np.zeros((J, pred.n_x)), R, np.array(const),
                         policy_map(R, pred.N_h, pred.n_u, pred.n_w),
                         np.zeros((J, pred.n_w * pred.N_h)), np.array(step), pred.n_w, pred.N_h)


def _empty_rows(pred):
    n_wN = pred.n_w * pred.N_h
    return UncertainRows(np.zeros((0, pred.n_x)), np.zeros((0, pred.n_u * pred.N_h)), np.zeros(0),
                         np.zeros((0, n_wN, policy_dim(pred.N_h, pred.n_u, pred.n_w))),
                         np.zeros((0, n_wN)), np.zeros(0, dtype=int), pred.n_w, pred.N_h)


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------

class _SupportCache:
    def __init__(self, W):
        self.W = W
        self._cache = {}

    def __call__(self, d):
        key = tuple(np.round(d, 15))
        if key not in self._cache:
            self._cache[key] = support_value(self.W, d)
        return self._cache[key]


def _require_cv(index, pred):
    n_c = pred.n_u * pred.N_h
    n_v = policy_dim(pred.N_h, pred.n_u, pred.n_w)
    if "c" not in index:
        index.add("c", n_c)
    if "v" not in index:
        index.add("v", n_v)
    return index["c"], index["v"]


def _robust_terms(index, eq, rows, j, positions, W, supp, tag, c_sl, v_sl):
    """Worst case of row ``j`` over the disturbances at ``positions``.

    Returns ``(cols, vals, const)`` to be added to the row: dual variables
    ``z >= 0`` with ``H' z = V_p v + beta_p`` charge ``h' z``; positions with a
    constant coefficient contribute their support value directly.
    """
    H, h = W.M, W.m
    cols, vals, const = [], [], 0.0
    for p in positions:
        Vp, bp = rows.coeff(j, p)
        if not np.any(Vp):
            if np.any(bp):
                const += supp(bp)
            continue
        z = index.add(f"{tag}/z[j={j},p={p}]", H.shape[0], lb=0.0)
        zc = np.arange(z.start, z.stop)
        for k in range(rows.n_w):
            vk = np.flatnonzero(Vp[k])
            eq.add(np.concatenate([zc, v_sl.start + vk]), np.concatenate([H[:, k], -Vp[k, vk]]),
                   bp[k])
        cols.append(zc)
        vals.append(h)
    return cols, vals, const


def robust_rows_block(index, pred, rows, W, tag="robust"):
    """``e_j(w) <= 0`` for every ``w`` in ``W^{N_h}``, dualized per step."""
    before = set(index.names())
    c_sl, v_sl = _require_cv(index, pred)
    ineq, eq = _Rows(pred.n_x), _Rows(pred.n_x)
    supp = _SupportCache(W)
    for j in range(len(rows)):
        cols, vals, const = _robust_terms(index, eq, rows, j, range(pred.N_h), W, supp, tag,
                                          c_sl, v_sl)
        lc = rows.lc[j]
        nz = np.flatnonzero(lc)
        ineq.add(np.concatenate([c_sl.start + nz] + cols), np.concatenate([lc[nz]] + vals),
                 -(rows.const[j] + const), -rows.ax[j])
    return _block(tag, index, ineq, eq, before)


def robust_input_block(index, pred, G, g, W):
    return robust_rows_block(index, pred, input_rows(pred, G, g), W, tag="input")


def robust_terminal_block(index, pred, X_f, W):
    if X_f.is_empty():
        raise InvalidInputError("terminal set is empty")
    return robust_rows_block(index, pred, state_rows(pred, X_f.M, X_f.m, [pred.N_h]), W,
                             tag="terminal")


def _groups(rows, grouping):
    if grouping not in GROUPINGS:
        raise InvalidInputError(f"unknown CVaR grouping {grouping!r}")
    if grouping == "joint":
        return [("all", np.arange(len(rows)))] if len(rows) else []
    return [(f"step{s}", np.flatnonzero(rows.step == s)) for s in np.unique(rows.step)]


def dr_cvar_block(index, pred, rows, spec, n_robust=0, tail="leading", grouping="per_step",
                  tag="cvar"):
    """Worst-case CVaR constraints over the Wasserstein ball.

    For each group of rows (one prediction step by default) the block asks
    ``sup_P CVaR_alpha(max_j e_j(w)) <= 0``.  The first ``n_robust`` steps of
    the disturbance are handled in the worst case; the remaining steps are
    the uncertain part, with empirical samples taken from ``spec``.

    With ``tail="leading"`` the sample values for the uncertain steps are
    the first ``N_h - n_robust`` steps of each sample; ``"trailing"`` uses
    the samples' own steps at the same positions.
    """
    if spec.step_support is None:
        raise InvalidInputError("ambiguity spec needs a per-step support")
    if spec.n_steps < pred.N_h - n_robust:
        raise InvalidInputError("samples are shorter than the uncertain part of the horizon")
    if not 0 <= n_robust < pred.N_h:
        raise InvalidInputError(f"number of robust steps {n_robust} outside 0..{pred.N_h - 1}")
    if tail not in TAIL_MODES:
        raise InvalidInputError(f"unknown tail sample mode {tail!r}")
    if not 0 < spec.alpha < 1:
        raise InvalidInputError("alpha must lie in (0, 1)")
    W = spec.step_support
    H, h = W.M, W.m
    n_w, N_h = pred.n_w, pred.N_h
    N = spec.N
    chance = list(range(n_robust, N_h))
    # sample value at every chance position, zeros at robust positions
    S = np.zeros((N, n_w * N_h))
    for p in chance:
        q = p - n_robust if tail == "leading" else p
        S[:, p * n_w:(p + 1) * n_w] = spec.samples[:, q * n_w:(q + 1) * n_w]
    slack_h = {p: h[None, :] - S[:, p * n_w:(p + 1) * n_w] @ H.T for p in chance}

    before = set(index.names())
    c_sl, v_sl = _require_cv(index, pred)
    ineq, eq = _Rows(pred.n_x), _Rows(pred.n_x)
    supp = _SupportCache(W)
    for gname, members in _groups(rows, grouping):
        gtag = f"{tag}/{gname}"
        t = index.add(f"{gtag}/t", 1).start
        lam = index.add(f"{gtag}/lambda", 1, lb=0.0).start
        s = index.add(f"{gtag}/s", N, lb=0.0)
        # lambda*eps + mean(s) - alpha*t <= 0
        ineq.add([lam, t] + list(range(s.start, s.stop)),
                 [spec.epsilon, -spec.alpha] + [1.0 / N] * N)
        for j in members:
            rcols, rvals, rconst = _robust_terms(index, eq, rows, j, range(n_robust), W, supp,
                                                 gtag, c_sl, v_sl)
            nz_pos = [p for p in chance if not rows.is_zero(j, p)]
            lc = rows.lc[j]
            nzc = np.flatnonzero(lc)
            sample_v = S @ rows.V[j]            # (N, n_v)
            sample_b = S @ rows.beta[j]         # (N,)
            for i in range(N):
                n_sl = index.add(f"{gtag}/n[j={j},i={i}]", len(nz_pos) * H.shape[0], lb=0.0)
                cols = [c_sl.start + nzc, np.arange(v_sl.start, v_sl.stop), [t, s.start + i]]
                vals = [lc[nzc], sample_v[i], [1.0, -1.0]]
                for q, p in enumerate(nz_pos):
                    nc = n_sl.start + q * H.shape[0] + np.arange(H.shape[0])
                    cols.append(nc)
                    vals.append(slack_h[p][i])
                    Vp, bp = rows.coeff(j, p)
                    # |V_p v + beta_p - H' n| <= lambda, both sides
                    for k in range(n_w):
                        vk = np.flatnonzero(Vp[k])
                        base_c = np.concatenate([v_sl.start + vk, nc, [lam]])
                        ineq.add(base_c, np.concatenate([Vp[k, vk], -H[:, k], [-1.0]]), -bp[k])
                        ineq.add(base_c, np.concatenate([-Vp[k, vk], H[:, k], [-1.0]]), bp[k])
                cols += rcols
                vals += rvals
                ineq.add(np.concatenate(cols), np.concatenate(vals),
                         -(rows.const[j] + sample_b[i] + rconst), -rows.ax[j])
    return _block(tag, index, ineq, eq, before)


def chance_rows(pred, F, f):
    """State rows subject to chance constraints: steps ``1..N_h-1``."""
    return state_rows(pred, F, f, range(1, pred.N_h))


def t_step_block(index, t, pred, F, f, spec, tail="leading", grouping="per_step"):
    """Constraints that keep the chance rows satisfiable ``t`` steps ahead.

    Rows of steps ``t+1..N_h-1`` are robustified over the first ``t``
    disturbances (LP duals ``y``) and the remainder is treated as a chance
    constraint with tail samples.
    """
    if not 1 <= t <= pred.N_h - 1:
        raise InvalidInputError(f"t={t} outside 1..{pred.N_h - 1}")
    steps = range(t + 1, pred.N_h)
    rows = state_rows(pred, F, f, steps) if len(steps) else _empty_rows(pred)
    return dr_cvar_block(index, pred, rows, spec, n_robust=t, tail=tail, grouping=grouping,
                         tag=f"ahead{t}")


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def disturbance_input_map(w, N_h, n_u, n_w):
    """Matrix ``M(w)`` with ``K w = M(w) v`` for ``K = devec(v)``."""
    rows, cols = _policy_index(N_h, n_u, n_w)
    M = np.zeros((n_u * N_h, rows.size))
    M[rows, np.arange(rows.size)] = np.asarray(w, dtype=float)[cols]
    return M


@dataclass
class ObjectiveQuad:
    """``0.5 z'Hq z + (fq0 + Fx x)'z + x'Cxx x + fw'x + c0`` over ``z = (c, v)``."""

    Hq: np.ndarray
    fq0: np.ndarray
    Fx: np.ndarray
    Cxx: np.ndarray
    cx: np.ndarray
    c0: float

    def fq(self, x):
        return self.fq0 + self.Fx @ x

    def const(self, x):
        return float(x @ self.Cxx @ x + self.cx @ x + self.c0)

    def value(self, z, x):
        return float(0.5 * z @ self.Hq @ z + self.fq(x) @ z + self.const(x))


def assemble_objective(pred, cost, P, samples):
    """Sample mean of ``sum_i |x_i|_Q^2 + |u_i|_R^2 + |x_N|_P^2`` as a quadratic."""
    S = np.atleast_2d(np.asarray(samples, dtype=float))
    N_h, n_x, n_u, n_w = pred.N_h, pred.n_x, pred.n_u, pred.n_w
    if S.shape[1] != n_w * N_h:
        raise InvalidInputError(f"samples have length {S.shape[1]}, expected {n_w * N_h}")
    P = np.asarray(P, dtype=float)
    Qbar = np.zeros((n_x * N_h, n_x * N_h))
    for s in range(1, N_h):
        Qbar[pred.rows(s), pred.rows(s)] = cost.Q
    Qbar[pred.rows(N_h), pred.rows(N_h)] = P
    Rbar = np.kron(np.eye(N_h), cost.R)
    n_c = n_u * N_h
    n_z = n_c + policy_dim(N_h, n_u, n_w)
    H = np.zeros((n_z, n_z))
    f0 = np.zeros(n_z)
    Fx = np.zeros((n_z, n_x))
    Cxx = cost.Q + pred.Lx.T @ Qbar @ pred.Lx
    cx = np.zeros(n_x)
    c0 = 0.0
    for w in S:
        E = np.hstack([np.eye(n_c), disturbance_input_map(w, N_h, n_u, n_w)])
        LE = pred.Lu @ E
        H += E.T @ Rbar @ E + LE.T @ Qbar @ LE
        off = pred.Lw @ w
        f0 += LE.T @ Qbar @ off
        Fx += LE.T @ Qbar @ pred.Lx
        cx += 2.0 * pred.Lx.T @ Qbar @ off
        c0 += off @ Qbar @ off
    N = S.shape[0]
    H = 2.0 * H / N
    H = 0.5 * (H + H.T)
    lo = np.linalg.eigvalsh(H).min()
    if lo < -1e-9 * max(1.0, np.abs(H).max()):
        raise InvalidInputError(f"objective Hessian is indefinite (min eigenvalue {lo:.3g})")
    if lo < 0:
        vals, vecs = np.linalg.eigh(H)
        H = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
        H = 0.5 * (H + H.T)
    return ObjectiveQuad(H, 2.0 * f0 / N, 2.0 * Fx / N, Cxx, cx / N, c0 / N)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

@dataclass
class ParametricQp:
    """Problem data affine in the measured state; ``at(x)`` yields a QpProblem."""

    index: VarIndex
    A_ineq: sp.csr_matrix
    b0: np.ndarray
    Bx: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    objective: ObjectiveQuad
    blocks: list
    cache: dict = field(default_factory=dict, repr=False)
    _H: object = field(default=None, repr=False)

    @property
    def n_vars(self):
        return self.index.n

    def b_ineq(self, x):
        return self.b0 + self.Bx @ np.asarray(x, dtype=float)

    def at(self, x):
        x = np.asarray(x, dtype=float)
        n = self.index.n
        n_z = self.objective.Hq.shape[0]
        if self._H is None:
            H = sp.lil_matrix((n, n))
            H[:n_z, :n_z] = self.objective.Hq
            self._H = H.tocsc()
            self.A_ineq = self.A_ineq.tocsc()
            self.A_eq = self.A_eq.tocsc()
        f = np.zeros(n)
        f[:n_z] = self.objective.fq(x)
        return opt_core.QpProblem(n, Hq=self._H, fq=f, A_ineq=self.A_ineq, b_ineq=self.b_ineq(x),
                                  A_eq=self.A_eq, b_eq=self.b_eq, lb=self.lb, ub=self.ub,
                                  cache=self.cache)

    def objective_value(self, z, x):
        n_z = self.objective.Hq.shape[0]
        return self.objective.value(np.asarray(z)[:n_z], np.asarray(x, dtype=float))


def _pad(A, n):
    A = sp.csr_matrix(A)
    if A.shape[1] == n:
        return A
    A = A.copy()
    A.resize((A.shape[0], n))
    return A


def assemble(index, blocks, objective, extra_eq=None):
    """Stack blocks (column-padded to the final width) with the objective.

    ``extra_eq`` is an optional ``(A, b)`` pair over the leading ``(c, v)``
    columns, used to pin the policy in the tube baseline.
    """
    n = index.n
    n_z = objective.Hq.shape[0]
    if list(index.names()[:2]) != ["c", "v"] or index["v"].stop != n_z:
        raise InvalidInputError("decision vector must start with the (c, v) groups")
    A_in = sp.vstack([_pad(b.A_ineq, n) for b in blocks], format="csr")
    b0 = np.concatenate([b.b_ineq for b in blocks])
    Bx = np.vstack([b.Bx_ineq for b in blocks])
    eqs = [_pad(b.A_eq, n) for b in blocks]
    beqs = [b.b_eq for b in blocks]
    if extra_eq is not None:
        eqs.append(_pad(extra_eq[0], n))
        beqs.append(np.asarray(extra_eq[1], dtype=float))
    A_eq = sp.vstack(eqs, format="csr")
    b_eq = np.concatenate(beqs)
    lb, ub = index.bounds()
    return ParametricQp(index, A_in, b0, Bx, A_eq, b_eq, lb, ub, objective, list(blocks))
