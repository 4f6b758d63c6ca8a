"""Empirical distributions and the 1-Wasserstein ball around them.

Transport cost is the L1 distance throughout, so the dual-norm bound on the
transport multiplier is an L-infinity bound.
"""

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import opt_core
from .errors import InvalidInputError, UnboundedError
from .polytope import Polytope, power_support

DEFAULT_MARGIN = 0.05


@dataclass(frozen=True)
class AmbiguitySpec:
    """Wasserstein ball of radius ``epsilon`` around the empirical samples.

    ``step_support`` is the per-step set ``W`` when ``support`` is the power
    ``W^k``; builders use it to exploit the product structure.
    """

    samples: np.ndarray
    epsilon: float
    alpha: float
    support: Polytope
    step_support: Polytope = None

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.samples, dtype=float))
        object.__setattr__(self, "samples", S)
        if S.shape[0] < 1:
            raise InvalidInputError("ambiguity set needs at least one sample")
        if S.shape[1] != self.support.dim:
            raise InvalidInputError(
                f"samples have dimension {S.shape[1]}, support has dimension {self.support.dim}")
        if not self.epsilon >= 0:
            raise InvalidInputError(f"radius must be nonnegative, got {self.epsilon}")
        if not 0 < self.alpha < 1:
            raise InvalidInputError(f"alpha must lie in (0, 1), got {self.alpha}")
        slack = S @ self.support.M.T - self.support.m
        if np.max(slack) > 1e-9:
            bad = int(np.argmax(np.max(slack, axis=1)))
            raise InvalidInputError(f"sample {bad} lies outside the support (by {np.max(slack):.3g})")

    @classmethod
    def from_step_support(cls, samples, epsilon, alpha, W):
        S = np.atleast_2d(np.asarray(samples, dtype=float))
        if S.shape[1] % W.dim:
            raise InvalidInputError("sample length is not a multiple of the step dimension")
        return cls(S, float(epsilon), float(alpha), power_support(W, S.shape[1] // W.dim), W)

    @property
    def N(self):
        return self.samples.shape[0]

    @property
    def n_steps(self):
        if self.step_support is None:
            return 1
        return self.support.dim // self.step_support.dim

    def leading(self, n_steps):
        """Same ball restricted to the first ``n_steps`` steps of every sample."""
        W = self._require_steps()
        return AmbiguitySpec.from_step_support(self.samples[:, :n_steps * W.dim],
                                               self.epsilon, self.alpha, W)

    def trailing(self, n_steps):
        W = self._require_steps()
        return AmbiguitySpec.from_step_support(self.samples[:, self.support.dim - n_steps * W.dim:],
                                               self.epsilon, self.alpha, W)

    def _require_steps(self):
        if self.step_support is None:
            raise InvalidInputError("operation needs a per-step support")
        return self.step_support


def empirical_cvar(losses, alpha):
    """``inf_t [mean((loss + t)_+) / alpha - t]`` evaluated exactly.

    The objective is piecewise linear in ``t`` with kinks at the negated
    losses, so the infimum is attained at one of them.
    """
    x = np.sort(np.asarray(losses, dtype=float).ravel())[::-1]
    if x.size == 0:
        raise InvalidInputError("empirical CVaR of an empty sample")
    if not 0 < alpha < 1:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    n = x.size
    csum = np.cumsum(x)
    k = np.arange(1, n + 1)
    # t = -x[k-1]: the k largest losses exceed the threshold (ties contribute zero)
    vals = (csum - k * x) / (n * alpha) + x
    return float(np.min(vals))


def _pieces(h_pieces, dim):
    a = np.atleast_2d(np.asarray([p[0] for p in h_pieces], dtype=float))
    b = np.asarray([p[1] for p in h_pieces], dtype=float).ravel()
    if a.shape != (b.size, dim):
        raise InvalidInputError(f"affine pieces have slope shape {a.shape}, expected (*, {dim})")
    return a, b


def dual_worstcase_value(h_pieces, spec):
    """Worst-case expectation of ``h(w) = max_k a_k'w + b_k`` over the ball.

    Solves the dual program: minimize ``lam*eps + mean(s_i)`` where, per
    sample ``i`` and piece ``k``, the inner supremum over the support is
    replaced by its LP dual with multipliers ``n_ik >= 0``.

    ``h_pieces`` is a sequence of ``(slope, offset)`` pairs.
    """
    S = spec.samples
    Ms, ms = spec.support.M, spec.support.m
    N, d = S.shape
    a, b = _pieces(h_pieces, d)
    K = a.shape[0]
    r = Ms.shape[0]
    # variables: lam, s (N), n_ik (N*K*r)
    n_vars = 1 + N + N * K * r
    rows, cols, vals, rhs = [], [], [], []
    row = 0

    def n_col(i, k):
        return 1 + N + (i * K + k) * r

    for i in range(N):
        for k in range(K):
            c0 = n_col(i, k)
            # a_k'w_i - w_i'Ms'n + ms'n + b_k <= s_i
            coef_n = ms - Ms @ S[i]
            rows += [row] * (r + 1)
            cols += list(range(c0, c0 + r)) + [1 + i]
            vals += list(coef_n) + [-1.0]
            rhs.append(-(a[k] @ S[i] + b[k]))
            row += 1
            # |a_k - Ms'n| <= lam, both sides
            for sign in (1.0, -1.0):
                for coord in range(d):
                    rows += [row] * (r + 1)
                    cols += list(range(c0, c0 + r)) + [0]
                    vals += list(-sign * Ms[:, coord]) + [-1.0]
                    rhs.append(-sign * a[k, coord])
                    row += 1
    A = sp.csr_matrix((vals, (rows, cols)), shape=(row, n_vars))
    f = np.zeros(n_vars)
    f[0] = spec.epsilon
    f[1:1 + N] = 1.0 / N
    lb = np.zeros(n_vars)
    lb[1:1 + N] = -np.inf
    sol = opt_core.solve_lp(opt_core.QpProblem(n_vars, fq=f, A_ineq=A, b_ineq=np.array(rhs), lb=lb))
    if sol.status == opt_core.UNBOUNDED:
        raise UnboundedError("worst-case expectation is unbounded")
    if not sol.ok:
        raise RuntimeError(f"dual LP failed with status {sol.status}")
    return float(sol.objective)


def _grid(support, resolution):
    d = support.dim
    if d > 2:
        raise InvalidInputError("transport oracle supports at most two dimensions")
    if resolution < 50:
        raise InvalidInputError("grid resolution must be at least 50 points per axis")
    lo, hi = support.bounding_box()
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(d)]
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    inside = np.all(pts @ support.M.T <= support.m + 1e-12, axis=1)
    spacing = max((hi[k] - lo[k]) / (resolution - 1) for k in range(d))
    return pts[inside], spacing


def transport_lp_oracle(h, spec, grid_resolution=201):
    """Primal worst-case expectation over a grid discretization of the support.

    Each sample is snapped to its nearest grid point; the LP chooses how much
    of each sample's ``1/N`` mass to ship to every grid point under the L1
    transport budget ``epsilon``.  ``h`` is a callable on points (rows) or a
    sequence of affine pieces.
    """
    pts, _ = _grid(spec.support, grid_resolution)
    if callable(h):
        hv = np.asarray(h(pts), dtype=float).ravel()
    else:
        a, b = _pieces(h, spec.support.dim)
        hv = np.max(pts @ a.T + b, axis=1)
    S = spec.samples
    N = S.shape[0]
    G = pts.shape[0]
    snapped = pts[np.argmin(np.abs(S[:, None, :] - pts[None, :, :]).sum(axis=2), axis=1)]
    cost = np.abs(snapped[:, None, :] - pts[None, :, :]).sum(axis=2)
    n_vars = N * G
    A_eq = sp.kron(sp.identity(N), np.ones((1, G)), format="csr")
    b_eq = np.full(N, 1.0 / N)
    A_in = sp.csr_matrix(cost.reshape(1, -1))
    f = -np.tile(hv, N)
    sol = opt_core.solve_lp(opt_core.QpProblem(n_vars, fq=f, A_ineq=A_in, b_ineq=[spec.epsilon],
                                               A_eq=A_eq, b_eq=b_eq, lb=np.zeros(n_vars)))
    if not sol.ok:
        raise RuntimeError(f"transport LP failed with status {sol.status}")
    return float(-sol.objective)


def grid_spacing(support, grid_resolution):
    return _grid(support, grid_resolution)[1]


def identify_support(raw_samples, margin=DEFAULT_MARGIN):
    """Rotated bounding box of the data along its principal axes.

    Bounds in principal coordinates are widened by ``margin`` times the axis
    width on each side.  An axis with zero spread gets half-width
    ``margin * (largest axis width)``.
    """
    X = np.atleast_2d(np.asarray(raw_samples, dtype=float))
    n, d = X.shape
    if n < d + 1:
        raise InvalidInputError(f"need at least {d + 1} samples, got {n}")
    if margin < 0:
        raise InvalidInputError("margin must be nonnegative")
    center = X.mean(axis=0)
    Xc = X - center
    _, vecs = np.linalg.eigh(Xc.T @ Xc / max(n - 1, 1))
    vecs = vecs[:, ::-1]
    # deterministic orientation: largest-magnitude component positive
    flip = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(d)])
    vecs = vecs * np.where(flip == 0, 1.0, flip)
    proj = Xc @ vecs
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    width = hi - lo
    widest = width.max()
    scale_tol = 1e-12 * max(widest, 1.0)
    lo_out = lo - margin * width
    hi_out = hi + margin * width
    flat = width <= scale_tol
    mid = 0.5 * (lo + hi)
    lo_out[flat] = mid[flat] - margin * widest
    hi_out[flat] = mid[flat] + margin * widest
    M = np.vstack([vecs.T, -vecs.T])
    m = np.concatenate([hi_out + vecs.T @ center, -(lo_out + vecs.T @ center)])
    return Polytope(M, m)


def read_samples_csv(path, n_w, N_h, per_step=False):
    """Disturbance trajectories from CSV; a non-numeric first row is a header.

    Default layout is one trajectory per row (``n_w*N_h`` columns).  With
    ``per_step`` each row is one step (``n_w`` columns) and consecutive
    blocks of ``N_h`` rows form a trajectory.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(cell.strip() for cell in r)]
    if rows:
        try:
            [float(x) for x in rows[0]]
        except ValueError:
            rows = rows[1:]
    data = np.array([[float(x) for x in r] for r in rows], dtype=float)
    if per_step:
        if data.ndim != 2 or data.shape[1] != n_w or data.shape[0] % N_h:
            raise InvalidInputError(
                f"per-step sample file must have {n_w} columns and a multiple of {N_h} rows")
        return data.reshape(-1, N_h * n_w)
    if data.ndim != 2 or data.shape[1] != n_w * N_h:
        raise InvalidInputError(f"trajectory sample file must have {n_w * N_h} columns")
    return data


def write_samples_csv(path, samples, n_w, per_step=False):
    S = np.atleast_2d(samples)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if per_step:
            writer.writerow([f"w{k + 1}" for k in range(n_w)])
            for traj in S:
                for step in traj.reshape(-1, n_w):
                    writer.writerow([repr(float(x)) for x in step])
        else:
            writer.writerow([f"w{k + 1}_{j}" for j in range(S.shape[1] // n_w) for k in range(n_w)])
            for traj in S:
                writer.writerow([repr(float(x)) for x in traj])
