import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from dadr_mpc.ambiguity import (AmbiguitySpec, dual_worstcase_value, empirical_cvar,
                                grid_spacing, identify_support, read_samples_csv,
                                transport_lp_oracle, write_samples_csv)
from dadr_mpc.errors import InvalidInputError
from dadr_mpc.polytope import Polytope, support_value

UNIT = Polytope.box([-1.0], [1.0])


def spec1(samples, eps, support=UNIT, alpha=0.1):
    return AmbiguitySpec(np.reshape(samples, (-1, support.dim)), eps, alpha, support)


# --- empirical CVaR --------------------------------------------------------

def test_cvar_constant():
    assert empirical_cvar([2.5] * 7, 0.2) == pytest.approx(2.5)


def test_cvar_worst_half():
    assert empirical_cvar([1, 2, 3, 4], 0.5) == pytest.approx(3.5)
    # direct 1-D minimization of the defining objective
    obj = lambda t: np.mean(np.maximum(np.array([1, 2, 3, 4]) + t, 0)) / 0.5 - t
    assert minimize_scalar(obj, bounds=(-10, 10), method="bounded").fun == pytest.approx(3.5, abs=1e-6)


def test_cvar_near_one_is_the_mean():
    assert empirical_cvar([0, 10], 0.999) == pytest.approx(5.005, abs=1e-2)


@settings(max_examples=100, deadline=None)
@given(losses=st.lists(st.floats(-100, 100), min_size=1, max_size=30),
       alpha=st.floats(0.001, 0.999))
def test_cvar_bounds_and_minimization_oracle(losses, alpha):
    x = np.array(losses)
    v = empirical_cvar(x, alpha)
    assert x.mean() - 1e-9 * (1 + abs(x.mean())) <= v <= x.max() + 1e-9 * (1 + abs(x.max()))
    if alpha < 1.0 / len(x):
        assert v == pytest.approx(x.max())
    # the defining objective is piecewise linear; evaluate it on a dense set of candidates
    ts = np.concatenate([-x, np.linspace(-x.max() - 1, -x.min() + 1, 50)])
    direct = min(np.mean(np.maximum(x + t, 0)) / alpha - t for t in ts)
    assert v == pytest.approx(direct, abs=1e-9 * (1 + abs(direct)))


def test_cvar_errors():
    with pytest.raises(InvalidInputError):
        empirical_cvar([], 0.5)
    with pytest.raises(InvalidInputError):
        empirical_cvar([1.0], 1.0)


# --- ambiguity spec ---------------------------------------------------------

def test_spec_validation():
    with pytest.raises(InvalidInputError):
        spec1([2.0], 0.1)                          # outside the support
    with pytest.raises(InvalidInputError):
        spec1([0.0], -0.1)
    with pytest.raises(InvalidInputError):
        spec1([0.0], 0.1, alpha=0.0)


def test_spec_step_views():
    W = Polytope.box([-1, -1], [1, 1])
    S = np.arange(12).reshape(2, 6) / 20.0
    spec = AmbiguitySpec.from_step_support(S, 0.1, 0.2, W)
    assert spec.n_steps == 3 and spec.N == 2
    assert np.array_equal(spec.leading(2).samples, S[:, :4])
    assert np.array_equal(spec.trailing(1).samples, S[:, 4:])


# --- dual worst-case value ---------------------------------------------------

def test_dual_zero_radius_is_sample_average():
    rng = np.random.default_rng(0)
    W = Polytope.box([-1, -2], [2, 1])
    S = rng.uniform([-1, -2], [2, 1], size=(6, 2))
    pieces = [(rng.normal(size=2), rng.normal()) for _ in range(3)]
    h = lambda w: max(a @ w + b for a, b in pieces)
    val = dual_worstcase_value(pieces, AmbiguitySpec(S, 0.0, 0.1, W))
    assert val == pytest.approx(np.mean([h(s) for s in S]), abs=1e-8)


def test_dual_centered_sample():
    assert dual_worstcase_value([(np.array([1.0]), 0.0)], spec1([0.0], 0.3)) == pytest.approx(0.3, abs=1e-8)
    assert transport_lp_oracle([(np.array([1.0]), 0.0)], spec1([0.0], 0.3)) == pytest.approx(0.3, abs=1e-8)


def test_dual_sample_near_boundary_uses_oracle_value():
    # moving the whole unit mass from 0.9 to the boundary costs only 0.1 < 0.3
    spec = spec1([0.9], 0.3)
    oracle = transport_lp_oracle([(np.array([1.0]), 0.0)], spec)
    assert oracle == pytest.approx(1.0, abs=1e-8)
    assert dual_worstcase_value([(np.array([1.0]), 0.0)], spec) == pytest.approx(oracle, abs=1e-8)


def test_oracle_zero_radius_snaps_samples():
    spec = spec1([0.123, -0.5], 0.0)
    snapped = np.round((np.array([0.123, -0.5]) + 1) / 0.01) * 0.01 - 1
    val = transport_lp_oracle(lambda z: z[:, 0] ** 2, spec)
    assert val == pytest.approx(np.mean(snapped ** 2), abs=1e-12)


def test_oracle_constant_function():
    for eps in (0.0, 0.1, 5.0):
        assert transport_lp_oracle(lambda z: np.full(len(z), 1.7), spec1([0.2, -0.4], eps)) == \
            pytest.approx(1.7)


def test_oracle_dimension_limits():
    W3 = Polytope.box(-np.ones(3), np.ones(3))
    with pytest.raises(InvalidInputError):
        transport_lp_oracle(lambda z: z[:, 0], AmbiguitySpec(np.zeros((1, 3)), 0.1, 0.1, W3))
    with pytest.raises(InvalidInputError):
        transport_lp_oracle(lambda z: z[:, 0], spec1([0.0], 0.1), grid_resolution=20)


def _random_1d(rng):
    lo = -rng.uniform(0.5, 2.0)
    hi = rng.uniform(0.5, 2.0)
    W = Polytope.box([lo], [hi])
    N = int(rng.integers(1, 4))
    S = rng.uniform(lo, hi, size=(N, 1))
    pieces = [(np.array([rng.normal() * 2]), rng.normal()) for _ in range(int(rng.integers(1, 4)))]
    return AmbiguitySpec(S, float(rng.uniform(0, 0.5)), 0.1, W), pieces


@pytest.mark.parametrize("seed", range(6))
def test_oracle_refinement_study(seed):
    spec, pieces = _random_1d(np.random.default_rng(100 + seed))
    dual = dual_worstcase_value(pieces, spec)
    lip = max(abs(a[0]) for a, _ in pieces)
    for res in (51, 101, 201):
        gap = abs(transport_lp_oracle(pieces, spec, res) - dual)
        assert gap <= 2 * grid_spacing(spec.support, res) * lip + 1e-8


def test_oracle_agreement_two_dimensional():
    rng = np.random.default_rng(9)
    W = Polytope([[1, 1], [-1, 0], [0, -1]], [1.0, 0.5, 0.5])
    S = np.array([[0.0, 0.0], [0.3, -0.2]])
    spec = AmbiguitySpec(S, 0.15, 0.1, W)
    pieces = [(rng.normal(size=2), 0.1), (rng.normal(size=2), -0.2)]
    dual = dual_worstcase_value(pieces, spec)
    lip = max(np.abs(a).max() for a, _ in pieces)
    gap = abs(transport_lp_oracle(pieces, spec, 61) - dual)
    assert gap <= 2 * grid_spacing(W, 61) * lip + 1e-8


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_dual_monotone_in_radius_and_above_average(seed):
    spec, pieces = _random_1d(np.random.default_rng(seed))
    h = lambda w: max(a @ w + b for a, b in pieces)
    avg = np.mean([h(s) for s in spec.samples])
    prev = -np.inf
    for eps in (0.0, 0.05, 0.2, 0.8, 3.0):
        val = dual_worstcase_value(pieces, AmbiguitySpec(spec.samples, eps, 0.1, spec.support))
        assert val >= avg - 1e-8
        assert val >= prev - 1e-8
        prev = val
    # a large radius reaches the worst case over the support
    worst = max(h(np.array([v])) for v in spec.support.bounding_box())
    assert prev <= worst + 1e-8


# --- support identification ------------------------------------------------

def test_identify_axis_aligned_cloud():
    rng = np.random.default_rng(0)
    X = rng.uniform([-1, -0.3], [1, 0.3], size=(4000, 2))
    P = identify_support(X)
    assert np.all(X @ P.M.T <= P.m + 1e-12)
    normals = P.M / np.linalg.norm(P.M, axis=1, keepdims=True)
    for n in normals:
        assert max(abs(n[0]), abs(n[1])) == pytest.approx(1.0, abs=0.05)


def test_identify_rotated_cloud():
    rng = np.random.default_rng(1)
    base = rng.uniform([-2, -0.3], [2, 0.3], size=(3000, 2))
    th = np.pi / 4
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    X = base @ R.T + [0.5, -0.2]
    P = identify_support(X)
    assert np.all(X @ P.M.T <= P.m + 1e-12)
    targets = np.array([[1, 1], [1, -1]]) / np.sqrt(2)
    for n in P.M / np.linalg.norm(P.M, axis=1, keepdims=True):
        cosines = np.abs(targets @ n)
        assert np.degrees(np.arccos(min(1.0, cosines.max()))) <= 5.0


def test_identify_zero_margin_touches_extremes():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(200, 2)) @ [[1.0, 0.4], [0.0, 0.5]]
    P = identify_support(X, margin=0.0)
    slack = P.m[None, :] - X @ P.M.T
    assert np.allclose(slack.min(axis=0), 0.0, atol=1e-12)


def test_identify_flat_axis_gets_margin_width():
    X = np.column_stack([np.linspace(-1, 1, 50), np.zeros(50)])
    P = identify_support(X, margin=0.05)
    assert support_value(P, [0, 1]) - (-support_value(P, [0, -1])) == pytest.approx(0.2, abs=1e-9)


def test_identify_needs_enough_samples():
    with pytest.raises(InvalidInputError):
        identify_support(np.zeros((2, 2)))


# --- sample files ----------------------------------------------------------------

def test_sample_csv_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    S = rng.normal(size=(5, 6))
    for per_step in (False, True):
        p = tmp_path / f"s{per_step}.csv"
        write_samples_csv(p, S, 2, per_step=per_step)
        assert np.array_equal(read_samples_csv(p, 2, 3, per_step=per_step), S)


def test_sample_csv_without_header_and_bad_shape(tmp_path):
    p = tmp_path / "raw.csv"
    p.write_text("0.1,0.2\n0.3,0.4\n")
    assert np.array_equal(read_samples_csv(p, 1, 2), [[0.1, 0.2], [0.3, 0.4]])
    with pytest.raises(InvalidInputError):
        read_samples_csv(p, 1, 3)
