import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hjbmlp import hamnet as hn
from hjbmlp import oracle as orc
from hjbmlp import problem as pb
from hjbmlp.mlp import (
    IndexPath,
    MlpError,
    MlpParams,
    count_draws,
    count_indices,
    freeze_to_net,
    gaussian_maxnorm_check,
    label_stream,
    mlp_estimate,
    sample_gaussian,
    sample_tau,
)


def enumerate_index_set(N, M):
    """Level-tagged members of the index set, built by explicit set construction."""
    members = [(0, ())]
    for k in range(1, N + 1):
        new = [(k, path + ((l, i),))
               for _, path in members
               for l in range(-k + 1, k)
               for i in range(-(M**k), M**k + 1)]
        members = members + new
    return members


def test_count_indices_examples():
    assert count_indices(0, 5) == 1
    assert count_indices(1, 1) == 4
    assert count_indices(2, 2) == 168


@pytest.mark.parametrize("N, M", [(1, 1), (1, 3), (2, 1), (2, 2), (3, 1), (3, 2)])
def test_count_indices_matches_enumeration(N, M):
    assert count_indices(N, M) == len(enumerate_index_set(N, M))


def test_count_indices_product_form():
    for N in range(5):
        for M in range(1, 5):
            assert count_indices(N, M) == math.prod(1 + (2 * k - 1) * (2 * M**k + 1) for k in range(1, N + 1))


def test_n0_returns_zero():
    prob = pb.p1_problem()
    est = mlp_estimate(prob, 1.0, MlpParams(0, 3), 0.0, [0.3, -0.2])
    assert est.value == 0.0 and np.array_equal(est.gradient, [0.0, 0.0])


@pytest.mark.parametrize("N, M", [(1, 1), (2, 2), (3, 2), (2, 3), (4, 1)])
def test_draw_counter_matches_closed_form(N, M):
    prob = pb.heat_problem(2, [1.0, 0.0])
    est = mlp_estimate(prob, 1.0, MlpParams(N, M, seed=1), 0.0, [0.0, 0.0])
    assert (est.meta["gaussians"], est.meta["taus"]) == count_draws(N, M)


def test_count_draws_small_cases():
    # level 1: M terminal gaussians plus M level-0 pairs
    assert count_draws(1, 3) == (6, 3)
    # level 2, M=1: 1 terminal; (l=0): 1 pair; (l=1): 1 pair + level-1 subtree (2, 1) + nothing below
    assert count_draws(2, 1) == (1 + 1 + 1 + 2, 2 + 1)


def test_determinism_across_threads():
    prob = pb.cole_hopf_problem(4)
    X = np.random.default_rng(0).uniform(-1, 1, (8, 4))
    params = MlpParams(3, 3, seed=42)
    runs = [mlp_estimate(prob, prob.R_override, params, 0.0, X, threads=k) for k in (1, 2, 8)]
    for r in runs[1:]:
        assert np.array_equal(r.value, runs[0].value)
        assert np.array_equal(r.gradient, runs[0].gradient)


def test_batch_equals_pointwise():
    prob = pb.cole_hopf_problem(3)
    X = np.random.default_rng(1).uniform(-1, 1, (5, 3))
    params = MlpParams(2, 2, seed=9)
    batch = mlp_estimate(prob, prob.R_override, params, 0.2, X)
    for k in range(5):
        one = mlp_estimate(prob, prob.R_override, params, 0.2, X[k])
        assert one.value == pytest.approx(batch.value[k], rel=1e-13, abs=1e-15)


def test_label_streams_are_distinct_and_stable():
    a = label_stream(1, IndexPath().child(0, 1)).standard_normal(4)
    b = label_stream(1, IndexPath().child(0, -1)).standard_normal(4)
    c = label_stream(2, IndexPath().child(0, 1)).standard_normal(4)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.array_equal(a, label_stream(1, IndexPath().child(0, 1)).standard_normal(4))
    assert str(IndexPath().child(1, 2).child(-1, 3)) == "0,(1,2),(-1,3)"


@pytest.mark.parametrize("alpha", [0.25, 0.5, 0.9, 1.0])
def test_tau_law(alpha):
    rng = np.random.default_rng(11)
    n = 1_000_000
    tau = sample_tau(rng, alpha, n)
    assert tau.min() > 0 and tau.max() < 1
    se = tau.std() / math.sqrt(n)
    assert abs(tau.mean() - alpha / (alpha + 1)) <= 3 * se
    ks = stats.kstest(tau, lambda b: np.clip(b, 0, 1) ** alpha)
    assert ks.statistic < 1.63 / math.sqrt(n)


def test_tau_cdf_point():
    tau = sample_tau(np.random.default_rng(5), 0.5, 1_000_000)
    f = np.mean(tau <= 0.25)
    assert abs(f - 0.5) <= 3 * math.sqrt(0.25 / 1_000_000)


def test_gaussian_moments():
    n, d = 1_000_000, 3
    Z = sample_gaussian(np.random.default_rng(3), d, n)
    assert np.all(np.abs(Z.mean(axis=0)) <= 3 / math.sqrt(n))
    cov = np.cov(Z.T)
    # var of a sample covariance entry is about 1/n (2/n on the diagonal)
    assert np.all(np.abs(cov - np.eye(d)) <= 3 * math.sqrt(2 / n))


def test_maxnorm_examples():
    r1 = gaussian_maxnorm_check(1, 1.0, 100_000, seed=1)
    assert r1.mean == pytest.approx(math.sqrt(2 / math.pi), abs=3 * r1.mean_se)
    assert r1.mean_bound == pytest.approx(1.1774, abs=1e-4) and r1.passed
    r10 = gaussian_maxnorm_check(10, 1.0, 100_000, seed=2)
    assert r10.mean_bound == pytest.approx(2.4477, abs=1e-4) and r10.passed
    r20 = gaussian_maxnorm_check(10, 2.0, 100_000, seed=2)
    assert r20.mean == pytest.approx(2 * r10.mean, abs=1e-12)


def test_heat_case_unbiased():
    d = 4
    g = np.array([1.0, -0.5, 0.0, 2.0])
    prob = pb.heat_problem(d, g)
    x = np.array([0.3, -1.0, 2.0, 0.5])
    ests = [mlp_estimate(prob, 1.0, MlpParams(2, 2, seed=s), 0.0, x) for s in range(200)]
    vals = np.array([e.value for e in ests])
    grads = np.array([e.gradient for e in ests])
    assert abs(vals.mean() - g @ x) <= 3 * vals.std(ddof=1) / math.sqrt(200)
    se = grads.std(axis=0, ddof=1) / math.sqrt(200)
    assert np.all(np.abs(grads.mean(axis=0) - g) <= 3 * se + 1e-14)


def test_heat_case_matches_heat_oracle_for_bspline():
    prob = pb.ControlProblem.from_components(
        d=2, dbar=1, gamma=0.5, a=[-1.0], b=[1.0], t_f=1.0, f1={}, f2={}, lbar={},
        psi={"kind": "bspline", "params": {"scale": 1.0}})
    x = np.array([0.2, -0.4])
    ref = orc.heat_value(prob, 0.0, x, 200_000, seed=3)
    vals = np.array([mlp_estimate(prob, 1.0, MlpParams(2, 2, seed=s), 0.0, x).value for s in range(400)])
    se = math.hypot(vals.std(ddof=1) / math.sqrt(len(vals)), ref.stderr)
    assert abs(vals.mean() - ref.value) <= 3 * se


def test_freeze_matches_estimator():
    prob = pb.p1_problem(d=3)
    pn = hn.build_problem_nets(prob)
    R = pb.default_truncation(prob)
    H = hn.build_hamiltonian_net(pn, prob, R, 1e-1)
    params = MlpParams(2, 2, seed=3, h_mode="network")
    net = freeze_to_net(prob, (H, pn.net_psi), params, 0.1)
    X = np.random.default_rng(0).uniform(-2, 2, (100, 3))
    est = mlp_estimate(prob, (H, pn.net_psi), params, 0.1, X)
    ref = np.column_stack([est.value, est.gradient])
    dev = np.abs(net(X) - ref).max(axis=1)
    assert np.all(dev <= 1e-9 * np.abs(ref).max(axis=1))
    assert net.in_dim == 3 and net.out_dim == 4


def test_freeze_n0_is_zero_net():
    prob = pb.p1_problem(d=2)
    pn = hn.build_problem_nets(prob)
    net = freeze_to_net(prob, (None, pn.net_psi), MlpParams(0, 2, h_mode="network"), 0.0)
    assert net.size == 0
    assert np.array_equal(net(np.ones((3, 2))), np.zeros((3, 3)))


def test_freeze_requires_network_mode():
    prob = pb.p1_problem()
    with pytest.raises(pb.ProblemError, match="network"):
        freeze_to_net(prob, 1.0, MlpParams(1, 1), 0.0)


def test_rejects_terminal_time_and_bad_params():
    prob = pb.p1_problem()
    with pytest.raises(pb.ProblemError):
        mlp_estimate(prob, 1.0, MlpParams(1, 1), 1.0, [0.0, 0.0])
    with pytest.raises(ValueError):
        MlpParams(1, 0)
    with pytest.raises(ValueError):
        MlpParams(1, 1, alpha_time=0.0)
    with pytest.raises(ValueError):
        MlpParams(1, 1, h_mode="other")


def test_non_finite_reports_index_path():
    prob = pb.ControlProblem(d=1, dbar=1, gamma=0.5, box_lo=[-1.0], box_hi=[1.0], t_f=1.0,
                             f1=lambda t, x: np.zeros((len(x), 1)),
                             f2=lambda t, x: np.ones((len(x), 1, 1)),
                             lbar=lambda t, x: np.where(np.asarray(t) > -1, np.nan, 0.0),
                             psi=lambda x: np.zeros(len(np.atleast_2d(x))))
    with pytest.raises(MlpError) as info:
        mlp_estimate(prob, 1.0, MlpParams(2, 1, seed=0), 0.0, [0.0])
    assert info.value.path.startswith("0")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(1, 3), st.integers(1, 3))
def test_estimator_is_a_pure_function_of_seed(seed, N, M):
    prob = pb.cole_hopf_problem(2)
    p = MlpParams(N, M, seed=seed)
    a = mlp_estimate(prob, prob.R_override, p, 0.0, [0.1, 0.2])
    b = mlp_estimate(prob, prob.R_override, p, 0.0, [0.1, 0.2])
    assert a.value == b.value and np.array_equal(a.gradient, b.gradient)
    assert np.isfinite(a.value)
