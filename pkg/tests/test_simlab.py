import numpy as np
import pytest
from scipy.stats import mannwhitneyu

from dadr_mpc.controller import Controller
from dadr_mpc.errors import ConfigError, ControllerFault
from dadr_mpc.linsys import CostSpec, LinearSystem
from dadr_mpc.polytope import Polytope
from dadr_mpc.simlab import (ClosedLoopTrace, DisturbanceGenerator, feasible_set_grid,
                             metrics_summary, read_trace_csv, run_closed_loop,
                             stability_bound_check, wilcoxon_rank_sum, write_trace_csv)

from helpers import scalar_cfg

BOX = Polytope.box([0.0, -1.0], [1.0, 1.0])


# --- generators ---------------------------------------------------------------------

def test_generator_is_deterministic_per_seed():
    gen = DisturbanceGenerator("truncated_gaussian", BOX, {"mean": [0.5, 0.0], "cov": np.eye(2) * 0.1})
    a = gen.sample(np.random.default_rng(3), 50)
    b = gen.sample(np.random.default_rng(3), 50)
    c = gen.sample(np.random.default_rng(4), 50)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.all(a @ BOX.M.T <= BOX.m)


def test_vanishing_covariance_concentrates_at_mean():
    gen = DisturbanceGenerator("truncated_gaussian", BOX, {"mean": [0.3, 0.2], "cov": np.eye(2) * 1e-14})
    draws = gen.sample(np.random.default_rng(0), 20)
    assert np.allclose(draws, [0.3, 0.2], atol=1e-5)


def test_uniform_generator_mean():
    gen = DisturbanceGenerator("uniform", BOX)
    draws = gen.sample(np.random.default_rng(1), 10000)
    assert np.allclose(draws.mean(axis=0), [0.5, 0.0], atol=0.02)


def test_mixture_generator_stays_in_support():
    params = {"weights": [0.7, 0.3], "components": [{"mean": [0.2, 0.0], "cov": np.eye(2) * 0.05},
                                                    {"mean": [0.8, 0.5], "cov": np.eye(2) * 0.01}]}
    draws = DisturbanceGenerator("mixture", BOX, params).sample(np.random.default_rng(2), 2000)
    assert np.all(draws @ BOX.M.T <= BOX.m)
    # the second component sits near (0.8, 0.5)
    assert np.mean(np.linalg.norm(draws - [0.8, 0.5], axis=1) < 0.3) > 0.2


def test_generator_rejects_bad_configuration():
    with pytest.raises(ConfigError):
        DisturbanceGenerator("laplace", BOX)
    with pytest.raises(ConfigError):
        DisturbanceGenerator("truncated_gaussian", BOX, {"mean": [0.0], "cov": [[1.0]]})
    far = DisturbanceGenerator("truncated_gaussian", BOX, {"mean": [50.0, 50.0], "cov": np.eye(2) * 0.01})
    with pytest.raises(ConfigError, match="acceptance"):
        far.sample(np.random.default_rng(0), 5)


# --- closed loop -------------------------------------------------------------------

def test_zero_disturbance_loop_converges():
    cfg = scalar_cfg(w=0.0, samples=np.zeros((2, 3)), eps=0.0)
    gen = DisturbanceGenerator("uniform", cfg.W)
    tr = run_closed_loop(Controller(cfg), [1.5], 40, gen, seed=0)
    assert not tr.faulted
    assert abs(tr.states[-1, 0]) <= 1e-6
    assert tr.replay_residual(cfg.sys) <= 1e-12


def test_trace_replays_bit_for_bit():
    cfg = scalar_cfg(w=0.2)
    gen = DisturbanceGenerator("uniform", cfg.W)
    a = run_closed_loop(Controller(cfg), [0.5], 15, gen, seed=7)
    b = run_closed_loop(Controller(cfg), [0.5], 15, gen, seed=7)
    assert a.replay_residual(cfg.sys) <= 1e-12
    assert np.array_equal(a.states, b.states) and np.array_equal(a.inputs, b.inputs)


def test_infeasible_initial_state_raises():
    cfg = scalar_cfg()
    with pytest.raises(ControllerFault, match="initial state"):
        run_closed_loop(Controller(cfg), [40.0], 5, DisturbanceGenerator("uniform", cfg.W), seed=0)


def test_candidate_violations_recorded():
    cfg = scalar_cfg(w=0.2)
    gen = DisturbanceGenerator("uniform", cfg.W)
    tr = run_closed_loop(Controller(cfg, check_candidate=True), [1.0], 8, gen, seed=3)
    assert np.isnan(tr.candidate_violations[0])
    assert np.nanmax(tr.candidate_violations) <= 1e-6


# --- metrics -----------------------------------------------------------------------

def _trace(states):
    states = np.asarray(states, dtype=float).reshape(len(states), -1)
    T = len(states) - 1
    return ClosedLoopTrace(states, np.zeros((T, 1)), np.zeros((T, 1)), ["Optimal"] * T,
                           np.zeros((T, 0)))


def test_values_on_the_bounds_are_not_violations():
    tr = _trace([7.0, 4.0, 11.0, 4.0, 11.0])
    rep = metrics_summary([tr], [(4.0, 11.0)], CostSpec([[1.0]], [[1.0]]), [[1.0]])
    assert rep.violation_upper == [0.0] and rep.violation_lower == [0.0]


def test_violation_frequency_counts_points():
    states = np.full(101, 7.0)
    states[1:8] = 11.5
    rep = metrics_summary([_trace(states)], [(4.0, 11.0)], CostSpec([[1.0]], [[1.0]]), [[1.0]])
    assert rep.violation_upper == [pytest.approx(0.07)]
    assert rep.n_points == 100


def test_metrics_units_and_transient():
    tr = _trace([0.0, 1.0, -1.0, 1.0, -1.0])
    rep = metrics_summary([tr], [(None, None)], CostSpec([[1.0]], [[1.0]]), [[1.0]],
                          scale=([7.0], [2.0]), transient=1)
    # x_2..x_4 in units: 5, 9, 5
    assert rep.variance[0] == pytest.approx(np.var([5.0, 9.0, 5.0]))
    assert rep.n_points == 3


# --- rank-sum test ------------------------------------------------------------------

def test_wilcoxon_identical_groups():
    assert wilcoxon_rank_sum([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)


def test_wilcoxon_exact_small_case():
    assert wilcoxon_rank_sum([1, 2], [3, 4]) == pytest.approx(1.0 / 3.0)


def test_wilcoxon_shifted_normals():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=60), rng.normal(size=60) + 1.0
    p = wilcoxon_rank_sum(a, b)
    assert p < 0.01
    assert p == pytest.approx(mannwhitneyu(a, b, alternative="two-sided", method="asymptotic").pvalue,
                              rel=1e-6)


# --- stability bound ----------------------------------------------------------------

def test_stability_bound_zero_disturbance():
    tr = _trace(np.zeros(30))
    out = stability_bound_check([tr], CostSpec([[1.0]], [[1.0]]), [[1.0]],
                                sys=LinearSystem([[0.5]], [[1.0]], [[1.0]]))
    assert out["avg_cost"] == 0.0 and out["satisfied"]


def test_stability_bound_scalar_autoregression():
    # x+ = a x + w with u = 0: the stationary cost E x^2 equals sigma^2 p, p = 1 / (1 - a^2)
    a, sigma = 0.8, 0.3
    rng = np.random.default_rng(5)
    T = 200000
    w = rng.normal(scale=sigma, size=T)
    x = np.zeros(T + 1)
    for k in range(T):
        x[k + 1] = a * x[k] + w[k]
    tr = ClosedLoopTrace(x[:, None], np.zeros((T, 1)), w[:, None], ["Optimal"] * T, np.zeros((T, 0)))
    p = 1.0 / (1.0 - a * a)
    out = stability_bound_check([tr], CostSpec([[1.0]], [[1e-6]]), [[p]],
                                sys=LinearSystem([[a]], [[1.0]], [[1.0]]))
    assert out["bound"] == pytest.approx(sigma ** 2 * p, rel=0.02)
    assert out["avg_cost"] == pytest.approx(out["bound"], rel=0.05)


# --- feasible sets ------------------------------------------------------------------

def test_feasible_sets_coincide_without_disturbance():
    kw = dict(w=0.0, samples=np.zeros((2, 3)), eps=0.0)
    rep = feasible_set_grid(scalar_cfg(**kw), scalar_cfg(mode="tube", **kw),
                            {"lower": [-5.0], "upper": [5.0], "per_axis": 41})
    assert np.array_equal(rep.feasible_da, rep.feasible_tube)
    assert np.allclose(rep.objective_gap(), 0.0, atol=1e-6)


def test_detuned_gain_gives_strictly_larger_set():
    # an over-correcting terminal gain makes the fixed tube feedback waste input headroom
    kw = dict(a=1.3, w=0.1, x_box=5.0, u_box=1.0, K_f=[[-2.0]], N_h=3, eps=0.02)
    rep = feasible_set_grid(scalar_cfg(**kw), scalar_cfg(mode="tube", **kw),
                            {"lower": [-4.0], "upper": [4.0], "per_axis": 201})
    assert rep.violations == 0
    assert rep.count_da > rep.count_tube
    assert np.all(rep.objective_gap() <= 1e-6)


# --- export -------------------------------------------------------------------------

def test_trace_csv_round_trip(tmp_path):
    cfg = scalar_cfg(w=0.2)
    tr = run_closed_loop(Controller(cfg), [0.5], 6, DisturbanceGenerator("uniform", cfg.W), seed=1)
    path = tmp_path / "trace.csv"
    write_trace_csv(path, tr)
    back = read_trace_csv(path)
    assert np.array_equal(back.states, tr.states)
    assert np.array_equal(back.inputs, tr.inputs)
    assert np.array_equal(back.disturbances, tr.disturbances)
    assert back.statuses == tr.statuses
    assert back.replay_residual(cfg.sys) <= 1e-12
