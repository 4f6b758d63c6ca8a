"""Halfspace polytopes ``{z : M z <= m}``, support functions, and the maximal
robust positively invariant set under a fixed linear feedback."""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import opt_core
from .errors import (EmptySetError, InvalidInputError, NotFinitelyDeterminedError,
                     UnboundedError)

REDUNDANCY_TOL = 1e-9


@dataclass(frozen=True)
class Polytope:
    M: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        m = np.atleast_1d(np.asarray(self.m, dtype=float)).ravel()
        if M.shape[0] == 0:
            raise InvalidInputError("polytope needs at least one row")
        if M.shape[0] != m.size:
            raise InvalidInputError(f"M has {M.shape[0]} rows but m has {m.size} entries")
        if not (np.all(np.isfinite(M)) and np.all(np.isfinite(m))):
            raise InvalidInputError("polytope data must be finite")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "m", m)

    @classmethod
    def box(cls, lower, upper):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        n = lower.size
        return cls(np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([upper, -lower]))

    @property
    def dim(self):
        return self.M.shape[1]

    @property
    def n_rows(self):
        return self.M.shape[0]

    def contains(self, z, tol=1e-9):
        return bool(np.all(self.M @ np.asarray(z, dtype=float) <= self.m + tol))

    def intersect(self, other):
        return Polytope(np.vstack([self.M, other.M]), np.concatenate([self.m, other.m]))

    def is_empty(self):
        sol = opt_core.solve_lp(opt_core.QpProblem(self.dim, A_ineq=self.M, b_ineq=self.m))
        return sol.status == opt_core.INFEASIBLE

    def support(self, direction):
        return support_value(self, direction)

    def bounding_box(self):
        eye = np.eye(self.dim)
        hi = np.array([support_value(self, e) for e in eye])
        lo = -np.array([support_value(self, -e) for e in eye])
        return lo, hi


def support_value(poly, direction):
    """``max_{z in poly} direction' z``."""
    d = np.asarray(direction, dtype=float).ravel()
    if d.size != poly.dim:
        raise InvalidInputError(f"direction has length {d.size}, polytope dimension is {poly.dim}")
    if not np.any(d):
        if poly.is_empty():
            raise EmptySetError("support of an empty polytope")
        return 0.0
    sol = opt_core.solve_lp(opt_core.QpProblem(poly.dim, fq=-d, A_ineq=poly.M, b_ineq=poly.m))
    if sol.status == opt_core.INFEASIBLE:
        raise EmptySetError("support of an empty polytope")
    if sol.status == opt_core.UNBOUNDED:
        raise UnboundedError("polytope is unbounded in the requested direction")
    if not sol.ok:
        raise RuntimeError(f"support LP failed with status {sol.status}")
    return float(d @ sol.z)


def support_values(poly, directions):
    return np.array([support_value(poly, d) for d in np.atleast_2d(directions)])


def power_support(poly, copies):
    """Cartesian power ``poly x ... x poly`` with block-diagonal rows."""
    if int(copies) != copies or copies < 1:
        raise InvalidInputError(f"copies must be a positive integer, got {copies}")
    copies = int(copies)
    return Polytope(scipy.linalg.block_diag(*([poly.M] * copies)), np.tile(poly.m, copies))


def reduce_polytope(poly, tol=REDUNDANCY_TOL):
    """Drop rows implied by the remaining ones; the set itself is unchanged."""
    if poly.is_empty():
        raise EmptySetError("cannot reduce an empty polytope")
    norms = np.linalg.norm(poly.M, axis=1)
    zero = norms == 0
    # 0 <= m rows are vacuous; 0 <= negative would have made the set empty
    M = poly.M[~zero] / norms[~zero, None]
    m = poly.m[~zero] / norms[~zero]
    if M.shape[0] == 0:
        return Polytope(np.zeros((1, poly.dim)), np.zeros(1))
    # exact duplicates first, keeping the tightest bound
    order = np.lexsort((m,) + tuple(M.T[::-1]))
    keep_mask = np.ones(M.shape[0], dtype=bool)
    for a, b in zip(order[:-1], order[1:]):
        if np.allclose(M[a], M[b], atol=1e-12, rtol=0.0):
            keep_mask[b] = False
    keep = list(np.flatnonzero(keep_mask))
    i = 0
    while i < len(keep):
        row = keep[i]
        rest = [k for k in keep if k != row]
        if not rest:
            break
        sol = opt_core.solve_lp(opt_core.QpProblem(
            poly.dim, fq=-M[row], A_ineq=M[rest], b_ineq=m[rest]))
        if sol.ok and M[row] @ sol.z <= m[row] + tol:
            keep.remove(row)
        else:
            i += 1
    return Polytope(M[keep], m[keep])


def max_rpi_set(A_cl, D, W, X, U=None, K_f=None, max_iter=200, tol=REDUNDANCY_TOL):
    """Maximal RPI set of ``x+ = A_cl x + D w`` inside ``X`` and ``K_f x in U``.

    Rows are propagated one step at a time and tightened by the support of
    ``D W``; the recursion stops once every freshly generated row is implied
    by the current set.
    """
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    n = A_cl.shape[0]
    if X.dim != n:
        raise InvalidInputError("state constraint dimension does not match A_cl")
    rho = np.max(np.abs(np.linalg.eigvals(A_cl)))
    if rho >= 1.0:
        raise InvalidInputError(f"closed loop is not Schur stable (spectral radius {rho:.4g})")
    M0, m0 = X.M, X.m
    if U is not None:
        if K_f is None:
            raise InvalidInputError("input constraints require the feedback gain K_f")
        K_f = np.atleast_2d(np.asarray(K_f, dtype=float))
        M0 = np.vstack([M0, U.M @ K_f])
        m0 = np.concatenate([m0, U.m])
    omega = Polytope(M0, m0)
    if omega.is_empty():
        raise EmptySetError("empty terminal set: constraint set itself is empty")

    rows, bounds = M0, m0.copy()
    for _ in range(max_iter):
        tighten = np.array([support_value(W, r @ D) for r in rows])
        rows = rows @ A_cl
        bounds = bounds - tighten
        fresh = []
        for r, b in zip(rows, bounds):
            if not np.any(np.abs(r) > 1e-14):
                if b < -tol:
                    raise EmptySetError("empty terminal set: disturbance exceeds the constraints")
                continue
            sol = opt_core.solve_lp(opt_core.QpProblem(n, fq=-r, A_ineq=omega.M, b_ineq=omega.m))
            if sol.status == opt_core.INFEASIBLE:
                raise EmptySetError("empty terminal set")
            if not sol.ok or r @ sol.z > b + tol:
                fresh.append((r, b))
        if not fresh:
            return reduce_polytope(omega)
        omega = Polytope(np.vstack([omega.M] + [r for r, _ in fresh]),
                         np.concatenate([omega.m, [b for _, b in fresh]]))
        if omega.is_empty():
            raise EmptySetError("empty terminal set: minimal RPI set does not fit inside the constraints")
    raise NotFinitelyDeterminedError(f"RPI recursion did not terminate within {max_iter} iterations")
