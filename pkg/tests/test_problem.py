import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hjbmlp import problem as pb
from hjbmlp.problem import (
    BoundConstants,
    ConstantsRequiredError,
    ProblemError,
    TruncationLevel,
    brute_force_hamiltonian,
    clip,
    hamiltonian,
    optimal_control,
    truncated_hamiltonian,
)

P1 = pb.p1_problem()
finite = st.floats(-50, 50, allow_nan=False)


def test_optimal_control_p1_examples():
    assert np.array_equal(optimal_control(P1, 0.0, [0, 0], [0, 0]), [0.0, 0.0])
    assert np.array_equal(optimal_control(P1, 0.0, [0, 0], [1, 0]), [-1.0, 0.0])
    assert np.array_equal(optimal_control(P1, 0.0, [0, 0], [4, 0]), [-1.0, 0.0])


@pytest.mark.parametrize("p, expected", [((0, 0), 0.0), ((1, 0), -0.5), ((4, 0), -3.5)])
def test_hamiltonian_p1_examples(p, expected):
    assert hamiltonian(P1, 0.0, [0, 0], p) == pytest.approx(expected, abs=1e-15)
    assert brute_force_hamiltonian(P1, 0.0, [0, 0], p) == pytest.approx(expected, abs=1e-4)


def test_clip_examples():
    R = TruncationLevel(2.0)
    assert clip(3.0, R) == 2.0
    assert clip(-5.0, R) == -2.0
    assert clip(1.0, R) == 1.0


def test_truncated_hamiltonian_examples():
    assert truncated_hamiltonian(P1, 2.0, 0.0, [0, 0], [1, 0]) == pytest.approx(-0.5)
    assert truncated_hamiltonian(P1, 2.0, 0.0, [0, 0], [4, 0]) == pytest.approx(-1.5)
    for R in (0.1, 1.0, 100.0):
        assert truncated_hamiltonian(P1, R, 0.3, [1, 2], [0, 0]) == hamiltonian(P1, 0.3, [1, 2], [0, 0])


def test_brute_force_corner_grid():
    # grid_n = 2 only sees the corners of [-1, 1]^2
    assert brute_force_hamiltonian(P1, 0.0, [0, 0], [0, 0], grid_n=2) == pytest.approx(1.0)


def test_brute_force_rejects_tiny_grid():
    with pytest.raises(ProblemError):
        brute_force_hamiltonian(P1, 0.0, [0, 0], [0, 0], grid_n=1)


def test_gradient_bound_formula_example():
    bc = BoundConstants(sup_f1=0, sup_f2=0, lip_f1=0, lip_f2=0, sup_grad_psi=1.0,
                        sup_abs_lbar=0, sup_grad_lbar=0)
    R = pb.gradient_bound_formula(bc, gamma=0.5, t_f=1.0, ab2=0.0, abinf=0.0)
    assert R == pytest.approx(math.exp(0.25), rel=1e-14)
    assert R == pytest.approx(1.2840, abs=1e-4)


def test_gradient_bound_short_horizon_limit():
    prob = pb.builtin_families()["clipped_affine"]
    bc = prob.bound_constants
    R = pb.gradient_bound_formula(bc, prob.gamma, 1e-12, 3.0, 2.0)
    assert R == pytest.approx(bc.sup_grad_psi, rel=1e-9)


def test_gradient_bound_p1_against_hand_formula():
    d = 2
    g0 = 2.0 / (3 * math.sqrt(d))  # sup |grad psi| for the mean of B-splines
    ab2, abinf, gam, tf = math.sqrt(2.0), 1.0, 0.5, 1.0
    c1 = 0.25 + 0 + 1.0 * abinf + 0
    vb = (2 / 3) + tf * gam * ab2**2
    hand = math.exp(c1 * tf) * (g0 + tf * vb * 1.0 + tf * gam * ab2**2 * abinf)
    R = pb.gradient_bound(P1)
    assert R.source == "gradient_bound"
    assert R.R == pytest.approx(hand, rel=1e-13)


def test_missing_constants_fail_loudly():
    with pytest.raises(ConstantsRequiredError, match="constants required"):
        pb.gradient_bound_formula(BoundConstants(sup_f1=0.0), 0.5, 1.0, 1.0, 1.0)
    with pytest.raises(ConstantsRequiredError):
        pb.hamiltonian_lipschitz_estimate(
            pb.ControlProblem(d=1, dbar=1, gamma=1.0, box_lo=[-1], box_hi=[1], t_f=1.0,
                              f1=lambda t, x: x, f2=lambda t, x: x[:, :, None], lbar=lambda t, x: 0 * t,
                              psi=lambda x: x[:, 0]),
            1.0)


def test_lipschitz_p_only_drift_when_no_gain():
    prob = pb.builtin_families()["no_gain"]
    _, Cp = pb.hamiltonian_lipschitz_estimate(prob, 1.0)
    assert Cp == pytest.approx(prob.bound_constants.sup_f1_l1)


@pytest.mark.parametrize("name", list(pb.builtin_families()))
def test_lipschitz_estimates_dominate_sampled_ratios(name):
    prob = pb.builtin_families()[name]
    R = 2.0
    Cx, Cp = pb.hamiltonian_lipschitz_estimate(prob, R)
    rng = np.random.default_rng(4)
    n = 10_000
    t = rng.uniform(0, prob.t_f, n)
    x = rng.uniform(-3, 3, (n, prob.d))
    p = rng.uniform(-2 * R, 2 * R, (n, prob.d))
    p2 = rng.uniform(-2 * R, 2 * R, (n, prob.d))
    dp = np.abs(truncated_hamiltonian(prob, R, t, x, p) - truncated_hamiltonian(prob, R, t, x, p2))
    assert np.all(dp <= Cp * np.abs(p - p2).max(axis=1) + 1e-12)
    x2 = x + rng.normal(0, 0.5, x.shape)
    q = rng.uniform(-R, R, (n, prob.d))
    dx = np.abs(truncated_hamiltonian(prob, R, t, x, q) - truncated_hamiltonian(prob, R, t, x2, q))
    assert np.all(dx <= Cx * np.abs(x - x2).sum(axis=1) + 1e-12)


@pytest.mark.parametrize("name", list(pb.builtin_families()))
def test_closed_form_matches_grid_and_minimises(name):
    prob = pb.builtin_families()[name]
    rng = np.random.default_rng(1)
    n = 300
    t = rng.uniform(0, prob.t_f, n)
    x = rng.uniform(-3, 3, (n, prob.d))
    p = rng.uniform(-3, 3, (n, prob.d))
    H = hamiltonian(prob, t, x, p)
    assert np.max(np.abs(H - brute_force_hamiltonian(prob, t, x, p))) <= 1e-4
    # no feasible control does better
    for _ in range(20):
        v = rng.uniform(prob.box_lo, prob.box_hi, (n, prob.dbar))
        F1, F2 = prob.f1(t, x), prob.f2(t, x)
        cost = ((p * (F1 + np.einsum("nij,nj->ni", F2, v))).sum(axis=1)
                + prob.lbar(t, x) + prob.gamma * (v * v).sum(axis=1))
        assert np.all(H <= cost + 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=2, max_size=2), st.lists(finite, min_size=2, max_size=2),
       st.floats(0, 1))
def test_optimal_control_inside_box(x, p, t):
    u = optimal_control(P1, t, x, p)
    assert np.all(u >= P1.box_lo) and np.all(u <= P1.box_hi)


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=1, max_size=6), st.lists(finite, min_size=1, max_size=6),
       st.floats(1e-3, 100))
def test_clip_idempotent_and_nonexpansive(a, b, R):
    n = min(len(a), len(b))
    a, b = np.array(a[:n]), np.array(b[:n])
    ca = clip(a, R)
    assert np.array_equal(clip(ca, R), ca)
    assert np.all(np.abs(ca - clip(b, R)) <= np.abs(a - b))


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=2, max_size=2), st.floats(0.1, 10))
def test_truncation_is_clip_then_hamiltonian(p, R):
    assert truncated_hamiltonian(P1, R, 0.5, [0.1, 0.2], p) == hamiltonian(P1, 0.5, [0.1, 0.2], clip(p, R))


def test_invalid_inputs_are_rejected():
    with pytest.raises(ProblemError):
        hamiltonian(P1, 0.0, [0, 0, 0], [0, 0])
    with pytest.raises(ProblemError):
        hamiltonian(P1, 0.0, [np.nan, 0], [0, 0])
    with pytest.raises(ProblemError):
        hamiltonian(P1, 2.0, [0, 0], [0, 0])
    with pytest.raises(ProblemError):
        clip([1.0], 0.0)
    with pytest.raises(ProblemError):
        TruncationLevel(float("inf"))


def test_problem_invariants_enforced():
    with pytest.raises(ProblemError):
        pb.ControlProblem.from_components(d=1, dbar=1, gamma=0.5, a=[1.0], b=[0.0], t_f=1.0,
                                          f1={}, f2={}, lbar={}, psi={"kind": "zero"})
    with pytest.raises(ProblemError):
        pb.ControlProblem.from_components(d=1, dbar=1, gamma=0.0, a=[-1.0], b=[1.0], t_f=1.0,
                                          f1={}, f2={}, lbar={}, psi={"kind": "zero"})


@pytest.mark.parametrize("name", list(pb.builtin_families()))
def test_problem_file_round_trip(tmp_path, name):
    prob = pb.builtin_families()[name]
    path = tmp_path / "prob.json"
    pb.save_problem(prob, path)
    back = pb.load_problem(path)
    assert back.to_dict() == prob.to_dict()
    assert back.bound_constants == prob.bound_constants
    rng = np.random.default_rng(0)
    x, p = rng.normal(size=(20, prob.d)), rng.normal(size=(20, prob.d))
    assert np.array_equal(hamiltonian(back, 0.1, x, p), hamiltonian(prob, 0.1, x, p))


def test_bspline_terminal_cost_constants():
    d = 5
    prob = pb.p1_problem(d=d, psi={"kind": "bspline", "params": {"scale": 3.0}})
    x = np.linspace(-3, 3, 20001)
    X = np.repeat(x[:, None], d, axis=1)
    assert np.max(prob.psi(X)) == pytest.approx(prob.bound_constants.sup_psi, rel=1e-9)
    grad = prob.psi_grad(X)
    assert np.max(np.linalg.norm(grad, axis=1)) == pytest.approx(prob.bound_constants.sup_grad_psi, rel=1e-6)


def test_bspline_gradient_matches_finite_differences():
    prob = pb.cole_hopf_problem(4)
    rng = np.random.default_rng(2)
    X = rng.uniform(-2.5, 2.5, (50, 4))
    h = 1e-6
    fd = np.stack([(prob.psi(X + h * e) - prob.psi(X - h * e)) / (2 * h) for e in np.eye(4)], axis=1)
    assert np.max(np.abs(fd - prob.psi_grad(X))) < 1e-8
