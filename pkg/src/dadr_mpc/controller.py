"""Receding-horizon controller: problem assembly, solve, candidate shift, tube baseline."""

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import opt_core
from .ambiguity import AmbiguitySpec
from .errors import ControllerFault, InvalidInputError
from .linsys import (AffinePolicy, CostSpec, LinearSystem, build_prediction_matrices,
                     policy_dim, solve_dare, solve_lyapunov, spectral_radius,
                     steady_state_target, vectorize_policy)
from .polytope import Polytope, max_rpi_set
from .reformulation import (GROUPINGS, TAIL_MODES, VarIndex, assemble, assemble_objective,
                            chance_rows, dr_cvar_block, robust_input_block,
                            robust_terminal_block, t_step_block)

DADR = "dadr"
TUBE = "tube"
SHIFT_FORMS = ("exact", "nominal")


@dataclass(frozen=True)
class TerminalIngredients:
    K_f: np.ndarray
    P: np.ndarray
    X_f: Polytope


def terminal_ingredients(sys, cost, W, X, U=None, K_f=None, max_iter=200):
    """LQR gain (unless given), its Lyapunov cost-to-go and the maximal RPI set."""
    if K_f is None:
        K_f, _ = solve_dare(sys, cost)
    K_f = np.atleast_2d(np.asarray(K_f, dtype=float))
    A_cl = sys.A + sys.B @ K_f
    P = solve_lyapunov(A_cl, cost.Q + K_f.T @ cost.R @ K_f)
    X_f = max_rpi_set(A_cl, sys.D, W, X, U, K_f if U is not None else None, max_iter=max_iter)
    return TerminalIngredients(K_f, P, X_f)


@dataclass
class MpcConfig:
    """Everything the horizon problem depends on, in origin-centred coordinates."""

    sys: LinearSystem
    cost: CostSpec
    spec: AmbiguitySpec
    N_h: int
    X: Polytope
    terminal: TerminalIngredients
    U: Polytope = None
    mode: str = DADR
    recursive_feasibility: bool = True
    cvar_grouping: str = "per_step"
    tail_samples: str = "leading"
    backend: str = "clarabel"
    tol: float = opt_core.QP_TOL

    def __post_init__(self):
        if int(self.N_h) != self.N_h or self.N_h < 1:
            raise InvalidInputError(f"horizon must be a positive integer, got {self.N_h}")
        self.N_h = int(self.N_h)
        if self.mode not in (DADR, TUBE):
            raise InvalidInputError(f"unknown mode {self.mode!r}")
        if self.cvar_grouping not in GROUPINGS:
            raise InvalidInputError(f"unknown CVaR grouping {self.cvar_grouping!r}")
        if self.tail_samples not in TAIL_MODES:
            raise InvalidInputError(f"unknown tail sample mode {self.tail_samples!r}")
        if self.spec.step_support is None or self.spec.step_support.dim != self.sys.n_w:
            raise InvalidInputError("ambiguity spec needs a per-step support of dimension n_w")
        if self.spec.n_steps != self.N_h:
            raise InvalidInputError(
                f"samples cover {self.spec.n_steps} steps, horizon is {self.N_h}")
        if self.X.dim != self.sys.n_x:
            raise InvalidInputError("state constraint set has the wrong dimension")
        if self.U is not None and self.U.dim != self.sys.n_u:
            raise InvalidInputError("input constraint set has the wrong dimension")
        if self.terminal.K_f.shape != (self.sys.n_u, self.sys.n_x):
            raise InvalidInputError("terminal gain has the wrong shape")

    @property
    def W(self):
        return self.spec.step_support


def tube_policy_vector(sys, K_f, N_h):
    """Disturbance-feedback image of the error feedback ``u_e = K_f e``.

    Block ``(j, i)`` with ``j > i`` is ``K_f (A + B K_f)^{j-i-1} D``.
    """
    K_f = np.atleast_2d(np.asarray(K_f, dtype=float))
    A_cl = sys.A + sys.B @ K_f
    n_u, n_w = sys.n_u, sys.n_w
    K = np.zeros((n_u * N_h, n_w * N_h))
    blocks = [K_f @ sys.D]
    for _ in range(N_h - 2):
        blocks.append(K_f @ np.linalg.matrix_power(A_cl, len(blocks)) @ sys.D)
    for j in range(1, N_h):
        for i in range(j):
            K[j * n_u:(j + 1) * n_u, i * n_w:(i + 1) * n_w] = blocks[j - i - 1]
    return vectorize_policy(K, N_h, n_u, n_w)


def build_parametric(cfg):
    """All constraint blocks and the objective, affine in the measured state."""
    pred = build_prediction_matrices(cfg.sys, cfg.N_h)
    index = VarIndex()
    F, f = cfg.X.M, cfg.X.m
    blocks = [dr_cvar_block(index, pred, chance_rows(pred, F, f), cfg.spec,
                            grouping=cfg.cvar_grouping, tag="cvar")]
    if cfg.U is not None:
        blocks.append(robust_input_block(index, pred, cfg.U.M, cfg.U.m, cfg.W))
    blocks.append(robust_terminal_block(index, pred, cfg.terminal.X_f, cfg.W))
    if cfg.recursive_feasibility:
        for t in range(1, cfg.N_h):
            blocks.append(t_step_block(index, t, pred, F, f, cfg.spec, tail=cfg.tail_samples,
                                       grouping=cfg.cvar_grouping))
    obj = assemble_objective(pred, cfg.cost, cfg.terminal.P, cfg.spec.samples)
    extra = None
    if cfg.mode == TUBE:
        n_v = policy_dim(cfg.N_h, cfg.sys.n_u, cfg.sys.n_w)
        sl = index["v"]
        A = sp.csr_matrix((np.ones(n_v), (np.arange(n_v), np.arange(sl.start, sl.stop))),
                          shape=(n_v, sl.stop))
        extra = (A, tube_policy_vector(cfg.sys, cfg.terminal.K_f, cfg.N_h))
    param = assemble(index, blocks, obj, extra)
    param.pred = pred
    return param


def build_problem(cfg, x_k, param=None):
    param = build_parametric(cfg) if param is None else param
    return param.at(np.asarray(x_k, dtype=float))


@dataclass
class StepResult:
    u_0: np.ndarray
    policy: AffinePolicy
    status: str
    objective: float
    solve_time: float
    z: np.ndarray = None
    kkt: float = float("nan")
    candidate_violation: float = None
    info: dict = field(default_factory=dict)


def _split(cfg, z):
    n_c = cfg.sys.n_u * cfg.N_h
    n_v = policy_dim(cfg.N_h, cfg.sys.n_u, cfg.sys.n_w)
    return z[:n_c], z[n_c:n_c + n_v]


def solve_step(cfg, x_k, warm=None, param=None):
    """Solve the horizon problem at ``x_k``; infeasibility raises ``ControllerFault``.

    ``warm`` is accepted for interface symmetry; the default conic backend
    does not take a starting point.
    """
    x_k = np.asarray(x_k, dtype=float)
    param = build_parametric(cfg) if param is None else param
    problem = param.at(x_k)
    t0 = time.perf_counter()
    sol = opt_core.solve_qp(problem, backend=cfg.backend, tol=cfg.tol)
    elapsed = time.perf_counter() - t0
    if not sol.ok:
        raise ControllerFault(f"horizon problem not solved at x={np.array2string(x_k, precision=4)}"
                              f" (status {sol.status})", status=sol.status, x=x_k)
    c, v = _split(cfg, sol.z)
    policy = AffinePolicy.from_vector(c, v, cfg.N_h, cfg.sys.n_u, cfg.sys.n_w)
    return StepResult(c[:cfg.sys.n_u].copy(), policy, sol.status,
                      sol.objective + param.objective.const(x_k), elapsed, sol.z,
                      sol.kkt.max() if sol.kkt is not None else float("nan"))


def candidate_shift(prev, w_applied, cfg, x_prev, form="exact"):
    """Shift the previous optimal policy one step and append terminal feedback.

    The first ``N_h - 1`` input blocks reuse the previous policy with the
    realized disturbance folded into the feedforward.  The final input is
    ``K_f`` applied to the previous prediction of ``x_{N_h}``: with
    ``form="exact"`` that prediction includes the previous disturbance
    feedback, with ``"nominal"`` it propagates only the feedforward inputs.
    """
    if form not in SHIFT_FORMS:
        raise InvalidInputError(f"unknown candidate form {form!r}")
    sys, N_h = cfg.sys, cfg.N_h
    n_u, n_w, n_x = sys.n_u, sys.n_w, sys.n_x
    w_applied = np.asarray(w_applied, dtype=float).ravel()
    x_prev = np.asarray(x_prev, dtype=float).ravel()
    if w_applied.size != n_w or x_prev.size != n_x:
        raise InvalidInputError("disturbance or state has the wrong dimension")
    K, c = prev.K, prev.c
    if K.shape != (n_u * N_h, n_w * N_h):
        raise InvalidInputError("previous policy does not match the configuration")
    pred = build_prediction_matrices(sys, N_h)
    K_f = cfg.terminal.K_f
    Kn = np.zeros_like(K)
    cn = np.zeros_like(c)
    for j in range(N_h - 1):
        rows_old = slice((j + 1) * n_u, (j + 2) * n_u)
        rows_new = slice(j * n_u, (j + 1) * n_u)
        cn[rows_new] = c[rows_old] + K[rows_old, :n_w] @ w_applied
        Kn[rows_new, :n_w * (N_h - 1)] = K[rows_old, n_w:]
    last = pred.rows(N_h)
    T = pred.Lw[last].copy()
    if form == "exact":
        T = T + pred.Lu[last] @ K
    x_nom = pred.Lx[last] @ x_prev + pred.Lu[last] @ c + T[:, :n_w] @ w_applied
    cn[(N_h - 1) * n_u:] = K_f @ x_nom
    Kn[(N_h - 1) * n_u:, :n_w * (N_h - 1)] = K_f @ T[:, n_w:]
    return AffinePolicy(Kn, cn, N_h, n_u, n_w)


def candidate_violation(param, x, policy):
    """Smallest uniform constraint violation achievable with ``(c, v)`` fixed.

    The auxiliary variables are re-optimized by an LP; a value ``<= 0`` up to
    tolerance means the policy is feasible for the problem at ``x``.
    """
    x = np.asarray(x, dtype=float)
    n = param.n_vars
    n_z = param.objective.Hq.shape[0]
    zcv = np.concatenate([policy.c, policy.v])
    A = param.A_ineq.tocsc()
    E = param.A_eq.tocsc()
    A_aux, E_aux = A[:, n_z:], E[:, n_z:]
    rhs = param.b_ineq(x) - A[:, :n_z] @ zcv
    rhs_eq = param.b_eq - E[:, :n_z] @ zcv
    m, me = A.shape[0], E.shape[0]
    n_aux = n - n_z
    sig = sp.csc_matrix(-np.ones((m + 2 * me, 1)))
    G = sp.hstack([sp.vstack([A_aux, E_aux, -E_aux]), sig], format="csc")
    h = np.concatenate([rhs, rhs_eq, -rhs_eq])
    f = np.zeros(n_aux + 1)
    f[-1] = 1.0
    lb = np.concatenate([param.lb[n_z:], [-np.inf]])
    ub = np.concatenate([param.ub[n_z:], [np.inf]])
    # fixed (c, v) may violate its own bounds only if they are finite; none are
    sol = opt_core.solve_lp(opt_core.QpProblem(n_aux + 1, fq=f, A_ineq=G, b_ineq=h, lb=lb, ub=ub),
                            tol=1e-9)
    if not sol.ok:
        raise ControllerFault(f"candidate check LP failed ({sol.status})", status=sol.status, x=x)
    return float(sol.z[-1])


class Controller:
    """Stateful loop wrapper: reference shifting, problem caching, warm candidates.

    ``selector`` picks the tracked state components; references are given in
    the same (normalized) coordinates as the state.  With ``sample_refresh=k``
    the ambiguity samples are replaced every ``k`` observed steps by the most
    recent ``N * N_h`` disturbances, stacked into ``N`` trajectories.
    """

    def __init__(self, cfg, selector=None, check_candidate=False, shift_form="exact",
                 sample_refresh=0):
        if sample_refresh < 0:
            raise InvalidInputError("sample_refresh must be nonnegative")
        self.base_cfg = cfg
        self.selector = selector
        self.check_candidate = check_candidate
        self.shift_form = shift_form
        self.sample_refresh = int(sample_refresh)
        self.candidate_time = 0.0
        self.reset()

    def reset(self):
        if getattr(self, "cfg", None) is not self.base_cfg or not hasattr(self, "_cache"):
            self.cfg = self.base_cfg
            self._cache = {}
        self._prev = None
        self._history = []

    def _refresh_samples(self):
        cfg = self.cfg
        need = cfg.spec.N * cfg.N_h
        if len(self._history) < need:
            return
        recent = np.array(self._history[-need:]).reshape(cfg.spec.N, cfg.N_h * cfg.sys.n_w)
        spec = AmbiguitySpec.from_step_support(recent, cfg.spec.epsilon, cfg.spec.alpha, cfg.W)
        self.cfg = replace(cfg, spec=spec)
        self._cache = {}

    def _shifted(self, reference):
        key = None if reference is None else tuple(np.round(np.atleast_1d(reference), 12))
        if key not in self._cache:
            cfg = self.cfg
            if key is None or not np.any(key):
                x_s, u_s = np.zeros(cfg.sys.n_x), np.zeros(cfg.sys.n_u)
                scfg = cfg
            else:
                if self.selector is None:
                    raise InvalidInputError("tracking a reference needs an output selector")
                ss = steady_state_target(cfg.sys, self.selector, np.array(key))
                x_s, u_s = ss.x_s, ss.u_s
                X = Polytope(cfg.X.M, cfg.X.m - cfg.X.M @ x_s)
                U = None if cfg.U is None else Polytope(cfg.U.M, cfg.U.m - cfg.U.M @ u_s)
                term = terminal_ingredients(cfg.sys, cfg.cost, cfg.W, X, U, K_f=cfg.terminal.K_f)
                scfg = replace(cfg, X=X, U=U, terminal=term)
            self._cache[key] = (scfg, build_parametric(scfg), x_s, u_s)
        return self._cache[key]

    def prepare(self, reference=None):
        """Build (and cache) the problem for ``reference`` ahead of time."""
        self._shifted(reference)

    def step(self, x, reference=None):
        """Return the step result; ``u_0`` is in absolute (unshifted) coordinates."""
        x = np.asarray(x, dtype=float)
        scfg, param, x_s, u_s = self._shifted(reference)
        dx = x - x_s
        violation = None
        if self.check_candidate and self._prev is not None and self._prev[0] is param:
            _, prev_res, prev_x, w_prev = self._prev
            if w_prev is not None:
                t0 = time.perf_counter()
                cand = candidate_shift(prev_res.policy, w_prev, scfg, prev_x, form=self.shift_form)
                violation = candidate_violation(param, dx, cand)
                self.candidate_time += time.perf_counter() - t0
        res = solve_step(scfg, dx, param=param)
        res.candidate_violation = violation
        res.u_0 = res.u_0 + u_s
        self._prev = [param, res, dx, None]
        return res

    def observe(self, w):
        """Record the disturbance that acted after the last applied input."""
        w = np.asarray(w, dtype=float).copy()
        if self._prev is not None:
            self._prev[3] = w
        if self.sample_refresh:
            self._history.append(w)
            if len(self._history) % self.sample_refresh == 0:
                self._refresh_samples()
