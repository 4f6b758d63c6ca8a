"""Shared fixtures-as-functions for the test suite."""

import numpy as np
import scipy.sparse as sp

from dadr_mpc import opt_core
from dadr_mpc.cli import build_setup, bundled_config_path, parse_config
from dadr_mpc.ambiguity import AmbiguitySpec
from dadr_mpc.controller import MpcConfig, terminal_ingredients
from dadr_mpc.linsys import CostSpec, LinearSystem, policy_dim
from dadr_mpc.polytope import Polytope
from dadr_mpc.reformulation import ObjectiveQuad, VarIndex, assemble

GCAI_A = np.array([[0.15, 0.84, -0.57], [0.20, 0.23, 0.16], [-0.01, -0.15, 0.35]])
GCAI_B = np.array([[-0.14, 0.40, -1.27], [0.65, -0.08, 0.17], [1.14, -0.23, 0.91]])
GCAI_D = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
GCAI_COST = CostSpec(np.diag([10.0, 10.0, 1.0]), np.eye(3))


def gcai_system():
    return LinearSystem(GCAI_A, GCAI_B, GCAI_D)


_SETUP = {}


def gcai_setup():
    """Bundled example, built once per session (support identification is the slow part)."""
    if "gcai" not in _SETUP:
        _SETUP["gcai"] = build_setup(parse_config(bundled_config_path()))
    return _SETUP["gcai"]


def zero_objective(pred):
    n_z = pred.n_u * pred.N_h + policy_dim(pred.N_h, pred.n_u, pred.n_w)
    return ObjectiveQuad(np.zeros((n_z, n_z)), np.zeros(n_z), np.zeros((n_z, pred.n_x)),
                         np.zeros((pred.n_x, pred.n_x)), np.zeros(pred.n_x), 0.0)


def parametric(index, blocks, pred):
    return assemble(index, blocks, zero_objective(pred))


def _fixed_cv_lp(index, blocks, pred, x, c, v, extra_col=None):
    """LP data over the auxiliary columns with ``(c, v)`` substituted."""
    param = parametric(index, blocks, pred)
    n = param.n_vars
    n_z = param.objective.Hq.shape[0]
    zcv = np.concatenate([c, v])
    A = param.A_ineq.tocsc()
    E = param.A_eq.tocsc()
    rhs = param.b_ineq(np.asarray(x, dtype=float)) - A[:, :n_z] @ zcv
    rhs_eq = param.b_eq - E[:, :n_z] @ zcv
    return param, A[:, n_z:], rhs, E[:, n_z:], rhs_eq, param.lb[n_z:], param.ub[n_z:], n - n_z


def min_violation(index, blocks, pred, x, c, v):
    """Smallest uniform slack violation over the auxiliaries (``<= 0`` means feasible)."""
    _, A, rhs, E, rhs_eq, lb, ub, n_aux = _fixed_cv_lp(index, blocks, pred, x, c, v)
    m, me = A.shape[0], E.shape[0]
    G = sp.hstack([sp.vstack([A, E, -E]), sp.csc_matrix(-np.ones((m + 2 * me, 1)))], format="csc")
    f = np.zeros(n_aux + 1)
    f[-1] = 1.0
    sol = opt_core.solve_lp(opt_core.QpProblem(
        n_aux + 1, fq=f, A_ineq=G, b_ineq=np.concatenate([rhs, rhs_eq, -rhs_eq]),
        lb=np.concatenate([lb, [-np.inf]]), ub=np.concatenate([ub, [np.inf]])), tol=1e-10)
    assert sol.ok, sol.status
    return float(sol.z[-1])


def is_feasible(index, blocks, pred, x, c, v, tol=1e-9):
    return min_violation(index, blocks, pred, x, c, v) <= tol


def cvar_value(index, block, pred, x, c, v):
    """Smallest ``kappa`` such that the block holds with every loss shifted by ``-kappa``.

    The loss rows are the ones carrying a ``-1`` on a per-sample ``s`` variable;
    since CVaR is translation equivariant, ``kappa`` is the worst-case CVaR of
    the block's loss at ``(x, c, v)``.
    """
    s_cols = np.concatenate([np.arange(index[nm].start, index[nm].stop)
                             for nm in index.names() if nm.endswith("/s")])
    _, A, rhs, E, rhs_eq, lb, ub, n_aux = _fixed_cv_lp(index, [block], pred, x, c, v)
    n_z = index.n - n_aux
    As = block.A_ineq.tocsc()[:, s_cols]
    loss_rows = np.asarray((As < 0).sum(axis=1)).ravel() > 0
    kap = sp.csc_matrix(-loss_rows.astype(float).reshape(-1, 1))
    G = sp.hstack([A, kap], format="csc")
    Eg = sp.hstack([E, sp.csc_matrix((E.shape[0], 1))], format="csc")
    f = np.zeros(n_aux + 1)
    f[-1] = 1.0
    sol = opt_core.solve_lp(opt_core.QpProblem(
        n_aux + 1, fq=f, A_ineq=G, b_ineq=rhs, A_eq=Eg, b_eq=rhs_eq,
        lb=np.concatenate([lb, [-np.inf]]), ub=np.concatenate([ub, [np.inf]])), tol=1e-10)
    assert sol.ok, sol.status
    assert n_z == pred.n_u * pred.N_h + policy_dim(pred.N_h, pred.n_u, pred.n_w)
    return float(sol.z[-1])


def fresh_index():
    return VarIndex()


def scalar_cfg(a=0.9, b=1.0, d=1.0, w=0.2, N_h=3, eps=0.05, mode="dadr", samples=None,
               x_box=3.0, u_box=1.5, K_f=None, rf=True):
    sys = LinearSystem([[a]], [[b]], [[d]])
    cost = CostSpec([[1.0]], [[1.0]])
    W = Polytope.box([-w], [w])
    X = Polytope.box([-x_box], [x_box])
    U = Polytope.box([-u_box], [u_box])
    if samples is None:
        samples = np.random.default_rng(0).uniform(-w, w, size=(5, N_h))
    spec = AmbiguitySpec.from_step_support(samples, eps, 0.2, W)
    term = terminal_ingredients(sys, cost, W, X, U, K_f=K_f)
    return MpcConfig(sys, cost, spec, N_h, X, term, U, mode=mode, recursive_feasibility=rf)
