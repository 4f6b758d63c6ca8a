"""Linear-system algebra: prediction matrices, policy vectorization, Riccati and
Lyapunov solves, steady-state targets.

Policy convention: the input stack over the horizon is ``u = K w + c`` where
``K`` is strictly lower block-triangular.  Block ``K_{i,j}`` (``n_u x n_w``)
sits in block-row ``j`` (input time) and block-column ``i`` (disturbance time),
and is nonzero only for ``i < j``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

from .errors import InvalidInputError, NumericalError


def _as_matrix(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise InvalidInputError(f"{name} must be a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return M


@dataclass(frozen=True)
class LinearSystem:
    """Plant ``x+ = A x + B u + D w``."""

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        D = _as_matrix(self.D, "D")
        if A.shape[0] != A.shape[1]:
            raise InvalidInputError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise InvalidInputError(f"B has {B.shape[0]} rows, A has {A.shape[0]}")
        if D.shape[0] != A.shape[0]:
            raise InvalidInputError(f"D has {D.shape[0]} rows, A has {A.shape[0]}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "D", D)

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    @property
    def n_w(self):
        return self.D.shape[1]

    def step(self, x, u, w):
        return self.A @ x + self.B @ u + self.D @ w


@dataclass(frozen=True)
class CostSpec:
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = _as_matrix(self.Q, "Q")
        R = _as_matrix(self.R, "R")
        for name, M, floor in (("Q", Q, -1e-12), ("R", R, 1e-9)):
            if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12):
                raise InvalidInputError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(M).min() < floor:
                kind = "positive semidefinite" if name == "Q" else "positive definite"
                raise InvalidInputError(f"{name} must be {kind}")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    def stage(self, x, u):
        return float(x @ self.Q @ x + u @ self.R @ u)


@dataclass(frozen=True)
class PredictionMatrices:
    """Stacked predictions ``x_{1..N} = Lx x0 + Lu u + Lw w``."""

    Lx: np.ndarray
    Lu: np.ndarray
    Lw: np.ndarray
    N_h: int
    n_x: int
    n_u: int
    n_w: int

    def rows(self, step):
        """Row slice of the stacked state belonging to ``x_{step}`` (1-based)."""
        return slice((step - 1) * self.n_x, step * self.n_x)


def build_prediction_matrices(sys, N_h):
    if int(N_h) != N_h or N_h < 1:
        raise InvalidInputError(f"horizon must be a positive integer, got {N_h}")
    N_h = int(N_h)
    A, B, D = sys.A, sys.B, sys.D
    n_x, n_u, n_w = sys.n_x, sys.n_u, sys.n_w
    powers = [np.eye(n_x)]
    for _ in range(N_h):
        powers.append(A @ powers[-1])
    Lx = np.vstack(powers[1:])
    Lu = np.zeros((n_x * N_h, n_u * N_h))
    Lw = np.zeros((n_x * N_h, n_w * N_h))
    for i in range(N_h):
        for j in range(i + 1):
            Lu[i * n_x:(i + 1) * n_x, j * n_u:(j + 1) * n_u] = powers[i - j] @ B
            Lw[i * n_x:(i + 1) * n_x, j * n_w:(j + 1) * n_w] = powers[i - j] @ D
    return PredictionMatrices(Lx, Lu, Lw, N_h, n_x, n_u, n_w)


def policy_dim(N_h, n_u, n_w):
    return n_w * n_u * N_h * (N_h - 1) // 2


@lru_cache(maxsize=None)
def _policy_index(N_h, n_u, n_w):
    # for each entry of v: (row of K, column of K)
    rows, cols = [], []
    for j in range(1, N_h):
        for i in range(j):
            for a in range(n_u):
                for b in range(n_w):
                    rows.append(j * n_u + a)
                    cols.append(i * n_w + b)
    rows = np.array(rows, dtype=int)
    cols = np.array(cols, dtype=int)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def _strict_lower_mask(N_h, n_u, n_w):
    mask = np.zeros((n_u * N_h, n_w * N_h), dtype=bool)
    rows, cols = _policy_index(N_h, n_u, n_w)
    mask[rows, cols] = True
    return mask


def vectorize_policy(K, N_h, n_u, n_w, atol=0.0):
    """Flatten the free blocks of ``K`` into ``v``.

    Blocks are visited block-row by block-row (``j = 1..N_h-1``), and within a
    block-row by block-column (``i = 0..j-1``); each block is flattened row-major.
    """
    K = np.asarray(K, dtype=float)
    if K.shape != (n_u * N_h, n_w * N_h):
        raise InvalidInputError(f"K has shape {K.shape}, expected {(n_u * N_h, n_w * N_h)}")
    mask = _strict_lower_mask(N_h, n_u, n_w)
    if np.any(np.abs(K[~mask]) > atol):
        raise InvalidInputError("K has nonzero entries outside the strictly lower block triangle")
    rows, cols = _policy_index(N_h, n_u, n_w)
    return K[rows, cols].copy()


def devectorize_policy(v, N_h, n_u, n_w):
    v = np.asarray(v, dtype=float).ravel()
    n_v = policy_dim(N_h, n_u, n_w)
    if v.size != n_v:
        raise InvalidInputError(f"v has length {v.size}, expected {n_v}")
    K = np.zeros((n_u * N_h, n_w * N_h))
    rows, cols = _policy_index(N_h, n_u, n_w)
    K[rows, cols] = v
    return K


@dataclass(frozen=True)
class AffinePolicy:
    """``u = K w + c`` over the horizon, with ``v`` the dense image of ``K``."""

    K: np.ndarray
    c: np.ndarray
    N_h: int
    n_u: int
    n_w: int

    @classmethod
    def from_vector(cls, c, v, N_h, n_u, n_w):
        return cls(devectorize_policy(v, N_h, n_u, n_w), np.asarray(c, dtype=float).copy(),
                   N_h, n_u, n_w)

    @property
    def v(self):
        return vectorize_policy(self.K, self.N_h, self.n_u, self.n_w, atol=1e-12)

    def inputs(self, w):
        return self.K @ w + self.c


def policy_map(rows_u, N_h, n_u, n_w):
    """Maps ``V`` with ``(V[j] @ v) @ w == rows_u[j] @ K @ w`` for ``K = devec(v)``.

    ``rows_u`` are row vectors over the stacked input (length ``n_u*N_h``).
    Returns an array of shape ``(len(rows_u), n_w*N_h, n_v)``.
    """
    R = np.atleast_2d(np.asarray(rows_u, dtype=float))
    if R.shape[1] != n_u * N_h:
        raise InvalidInputError(f"rows have length {R.shape[1]}, expected {n_u * N_h}")
    rows, cols = _policy_index(N_h, n_u, n_w)
    V = np.zeros((R.shape[0], n_w * N_h, rows.size))
    V[:, cols, np.arange(rows.size)] = R[:, rows]
    return V


def build_policy_maps(pred, F_rows):
    """One ``V_j`` per state-space row ``F_j`` (length ``n_x*N_h``)."""
    F_rows = np.atleast_2d(np.asarray(F_rows, dtype=float))
    if F_rows.shape[1] != pred.Lu.shape[0]:
        raise InvalidInputError(
            f"state rows have length {F_rows.shape[1]}, expected {pred.Lu.shape[0]}")
    return policy_map(F_rows @ pred.Lu, pred.N_h, pred.n_u, pred.n_w)


def spectral_radius(M):
    return float(np.max(np.abs(np.linalg.eigvals(M)))) if np.size(M) else 0.0


def solve_dare(sys, cost, tol=1e-10, max_iter=10_000):
    """Infinite-horizon LQR gain ``K_f`` (``u = K_f x``) by Riccati iteration.

    Returns ``(K_f, P)`` with ``P`` the Riccati fixed point.
    """
    A, B = sys.A, sys.B
    Q, R = cost.Q, cost.R
    if Q.shape != A.shape or R.shape != (sys.n_u, sys.n_u):
        raise InvalidInputError("cost matrices do not match the system dimensions")
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        K = -np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A + A.T @ P @ B @ K
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) <= tol * max(1.0, np.max(np.abs(P_next))):
            P = P_next
            break
        P = P_next
    else:
        raise NumericalError("Riccati iteration did not converge",
                             residual=float(riccati_residual(sys, cost, P)))
    BtP = B.T @ P
    K = -np.linalg.solve(R + BtP @ B, BtP @ A)
    if spectral_radius(A + B @ K) >= 1.0:
        raise NumericalError("Riccati fixed point is not stabilizing (is (A, B) stabilizable?)",
                             residual=float(riccati_residual(sys, cost, P)))
    return K, P


def riccati_residual(sys, cost, P):
    A, B, Q, R = sys.A, sys.B, cost.Q, cost.R
    BtPA = B.T @ P @ A
    res = A.T @ P @ A - P + Q - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)
    return np.linalg.norm(res, "fro")


def solve_lyapunov(A_cl, Q_tilde):
    """``P`` with ``A_cl^T P A_cl - P = -Q_tilde`` via the Kronecker linear system."""
    A_cl = _as_matrix(A_cl, "A_cl")
    Q_tilde = _as_matrix(Q_tilde, "Q_tilde")
    if spectral_radius(A_cl) >= 1.0:
        raise InvalidInputError("closed-loop matrix is not Schur stable")
    n = A_cl.shape[0]
    lhs = np.eye(n * n) - np.kron(A_cl.T, A_cl.T)
    # column-major vec: vec(A^T P A) = (A^T kron A^T) vec(P)
    P = np.linalg.solve(lhs, Q_tilde.reshape(-1, order="F")).reshape((n, n), order="F")
    return 0.5 * (P + P.T)


@dataclass(frozen=True)
class SteadyState:
    x_s: np.ndarray
    u_s: np.ndarray
    residual: float


def steady_state_target(sys, selector, reference):
    """Shift origin so the tracked outputs ``selector @ x_s`` equal ``reference``.

    Minimizes ``||(A - I) x_s + B u_s||`` over the affine set of admissible
    targets; among minimizers the least-norm one is returned.
    """
    C = np.atleast_2d(np.asarray(selector, dtype=float))
    r = np.atleast_1d(np.asarray(reference, dtype=float))
    n_x, n_u = sys.n_x, sys.n_u
    if C.shape != (r.size, n_x):
        raise InvalidInputError(f"selector shape {C.shape} does not match reference size {r.size}")
    if not np.any(r):
        return SteadyState(np.zeros(n_x), np.zeros(n_u), 0.0)
    M = np.hstack([sys.A - np.eye(n_x), sys.B])
    E = np.hstack([C, np.zeros((C.shape[0], n_u))])
    z_p = np.linalg.lstsq(E, r, rcond=None)[0]
    N = scipy.linalg.null_space(E)
    y = np.linalg.lstsq(M @ N, -M @ z_p, rcond=None)[0]
    z = z_p + N @ y
    return SteadyState(z[:n_x].copy(), z[n_x:].copy(), float(np.linalg.norm(M @ z)))
