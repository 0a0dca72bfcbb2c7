"""Hamiltonian and policy networks assembled from the problem's component networks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from hjbmlp import netcalc as nc
from hjbmlp.netcalc import NeuralNet
from hjbmlp.problem import (
    BoundConstants,
    ControlProblem,
    ProblemError,
    TruncationLevel,
    _R,
    truncated_hamiltonian,
)

__all__ = [
    "LipschitzReport",
    "ProblemNets",
    "build_hamiltonian_net",
    "build_policy_net",
    "build_problem_nets",
    "hamiltonian_net_lipschitz_bound",
    "hamiltonian_net_report",
    "psi_net",
    "validate_net_lipschitz",
    "write_report_csv",
]


@dataclass(frozen=True)
class ProblemNets:
    """Exact or approximate networks for f1, f2 (row-major), lbar and psi.

    ``deltas`` are the certified approximation tolerances; ``lipschitz`` the
    x-Lipschitz constants (1-norm in x, max-norm of the output) and ``sups``
    the max-norm suprema of the component nets over all inputs.
    """

    net_f1: NeuralNet
    net_f2: NeuralNet
    net_lbar: NeuralNet
    net_psi: NeuralNet
    d: int
    dbar: int
    deltas: dict = field(default_factory=lambda: {"f1": 0.0, "f2": 0.0, "lbar": 0.0, "psi": 0.0})
    lipschitz: dict = field(default_factory=dict)
    sups: dict = field(default_factory=dict)

    def __post_init__(self):
        d, db = self.d, self.dbar
        want = {"net_f1": (1 + d, d), "net_f2": (1 + d, d * db), "net_lbar": (1 + d, 1),
                "net_psi": (d, 1)}
        for name, (i, o) in want.items():
            net = getattr(self, name)
            if (net.in_dim, net.out_dim) != (i, o):
                raise ProblemError(f"{name} maps {net.in_dim} -> {net.out_dim}, expected {i} -> {o}")
        if any(self.net_psi.pattern) and set(self.net_psi.pattern) != {"recu"}:
            raise ProblemError("net_psi hidden layers must all be ReCU")
        if any(v < 0 for v in self.deltas.values()):
            raise ProblemError("approximation tolerances must be nonnegative")

    @property
    def exact(self) -> bool:
        return all(v == 0 for v in self.deltas.values())


def psi_net(prob: ControlProblem) -> NeuralNet:
    """ReCU network for the built-in terminal costs.

    B(y) = (1/6) sum_k c_k relu(y - k)^3 over k = -2..2 with c = (1, -4, 6, -4, 1).
    """
    comp = prob.components["psi"]
    d = prob.d
    if comp.kind == "zero":
        return nc.zero_net(d, 1)
    if comp.kind == "constant":
        return nc.affine_net(np.zeros((1, d)), [float(comp.params["c"])])
    if comp.kind == "linear":
        return nc.affine_net(np.asarray(comp.params["g"], dtype=float)[None, :],
                             [float(comp.params.get("c0", 0.0))])
    scale = float(comp.params.get("scale", 1.0))
    knots = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    coef = np.array([1.0, -4.0, 6.0, -4.0, 1.0]) / 6.0
    A = sp.kron(sp.identity(d), np.ones((5, 1)), format="csr")
    b = np.tile(-knots, d)
    out = np.tile(coef, d)[None, :] * scale / d
    return NeuralNet([nc.Layer(A, b, "recu"), nc.Layer(out, [0.0], "linear")], {"kind": "psi"})


def _tx_clip_linear(d, c, A, r):
    """(t, x) -> c + A clip_r(x)."""
    sel = nc.select_net(1 + d, range(1, 1 + d))
    inner = nc.compose(nc.clip_net(r, d), sel)
    return nc.compose(nc.affine_net(A, c), inner)


def build_problem_nets(prob: ControlProblem) -> ProblemNets:
    """Exact component networks for the built-in kinds (all tolerances zero)."""
    comps = prob.components
    if comps is None:
        raise ProblemError("component networks exist only for built-in kinds")
    d, db = prob.d, prob.dbar
    bc = prob.bound_constants or BoundConstants()
    zero_tx = np.zeros((1, 1 + d))

    f1 = comps["f1"]
    if f1.kind == "zero":
        n1, l1 = nc.zero_net(1 + d, d), 0.0
    elif f1.kind == "constant":
        n1, l1 = nc.affine_net(np.zeros((d, 1 + d)), f1.params["c"]), 0.0
    elif f1.kind == "clipped_linear":
        A = np.asarray(f1.params["A"], dtype=float)
        n1, l1 = _tx_clip_linear(d, f1.params["c"], A, float(f1.params["r"])), float(np.abs(A).max())
    else:
        A = np.asarray(f1.params["A"], dtype=float)
        n1 = nc.affine_net(np.hstack([np.zeros((d, 1)), A]), f1.params["c"])
        l1 = float(np.abs(A).max())

    f2 = comps["f2"]
    if f2.kind == "zero":
        B = np.zeros((d, db))
    elif f2.kind == "identity":
        B = np.eye(d)
    else:
        B = np.asarray(f2.params["B"], dtype=float)
    n2 = nc.affine_net(np.zeros((d * db, 1 + d)), B.reshape(-1))

    lb = comps["lbar"]
    if lb.kind == "zero":
        nl, ll = nc.zero_net(1 + d, 1), 0.0
    elif lb.kind == "constant":
        nl, ll = nc.affine_net(zero_tx, [float(lb.params["c"])]), 0.0
    else:
        w = np.asarray(lb.params["w"], dtype=float)[None, :]
        c = [float(lb.params["c"])]
        if lb.kind == "clipped_linear":
            nl = _tx_clip_linear(d, c, w, float(lb.params["r"]))
        else:
            nl = nc.affine_net(np.hstack([np.zeros((1, 1)), w]), c)
        ll = float(np.abs(w).max())

    sups = {
        "f1": bc.sup_f1_inf,
        "f2": bc.sup_f2_inf,
        "f2_rowsum": bc.sup_f2_rowsum,
        "f2_l1": bc.sup_f2_l1,
        "lbar": bc.sup_abs_lbar,
    }
    lips = {"f1": l1, "f2": 0.0, "lbar": ll, "psi": bc.lip_psi_l1}
    return ProblemNets(n1, n2, nl, psi_net(prob), d, db, lipschitz=lips, sups=sups)


def _need(pnets: ProblemNets, *keys):
    vals = [pnets.sups.get(k) for k in keys]
    missing = [k for k, v in zip(keys, vals) if v is None]
    if missing:
        raise ProblemError(f"component nets lack sup bounds: {missing}")
    return [float(v) for v in vals]


@dataclass(frozen=True)
class _Budget:
    M: float
    delta_prod: float
    eps_sq: float
    m_sq: int


def _budget(pnets: ProblemNets, prob: ControlProblem, R: float, delta: float) -> _Budget:
    d, db, g = prob.d, prob.dbar, prob.gamma
    s1, s2, row2, l1_2 = _need(pnets, "f1", "f2", "f2_rowsum", "f2_l1")
    c = np.maximum(np.abs(prob.box_lo), np.abs(prob.box_hi))
    # error <= delta_prod * K + gamma * eps_sq * sum(c^2), each half of delta
    K = d + R * l1_2 * d / (2 * g) + R * d * db + d * c.sum()
    dp = min(delta / (2.0 * K), 0.5)
    eps = delta / (2.0 * g * float((c**2).sum()))
    m_sq = nc.sq_depth(eps)
    M = max(R, s2, float(c.max()), s1 + row2 * float(c.max()) + db * dp)
    return _Budget(M=float(M), delta_prod=float(dp), eps_sq=float(eps), m_sq=m_sq)


def build_hamiltonian_net(pnets: ProblemNets, prob: ControlProblem, R, delta: float) -> NeuralNet:
    """Network on (t, x, p) approximating the truncated Hamiltonian within delta.

    Blocks: clip p; w ~ f2^T clip(p); u = clamp(-w / 2 gamma) to the box;
    y ~ f1 + f2 u; output ~ clip(p).y + lbar + gamma sum_i c_i^2 sq(|u_i| / c_i)
    with c_i = max(|a_i|, |b_i|).
    """
    if not 0 < delta < 1:
        raise ProblemError("delta must lie in (0, 1)")
    if (pnets.d, pnets.dbar) != (prob.d, prob.dbar):
        raise ProblemError("component nets and problem disagree on dimensions")
    R = _R(R)
    d, db, g = prob.d, prob.dbar, prob.gamma
    bud = _budget(pnets, prob, R, delta)
    M, dp = bud.M, bud.delta_prod
    n_in = 1 + 2 * d

    sel_tx = nc.select_net(n_in, range(0, 1 + d))
    cp = nc.compose(nc.clip_net(R, d), nc.select_net(n_in, range(1 + d, n_in)))
    F2 = nc.compose(pnets.net_f2, sel_tx)
    # row-major transpose of the d x db gain matrix
    perm = [i * db + j for j in range(db) for i in range(d)]
    F2T = nc.compose(nc.select_net(d * db, perm), F2)
    w = nc.compose(nc.matvec_net(db, d, M, dp), nc.fanout([F2T, cp]))
    u = nc.compose(nc.clamp_net(prob.box_lo, prob.box_hi),
                   nc.compose(nc.affine_net(-np.eye(db) / (2 * g)), w))
    f2u = nc.compose(nc.matvec_net(d, db, M, dp), nc.fanout([F2, u]))
    F1 = nc.compose(pnets.net_f1, sel_tx)
    y = nc.weighted_sum([F1, f2u], [1.0, 1.0])
    term_p = nc.compose(nc.matvec_net(1, d, M, dp), nc.fanout([cp, y]))

    c = np.maximum(np.abs(prob.box_lo), np.abs(prob.box_hi))
    absu = nc.NeuralNet([
        nc.Layer(np.vstack([np.eye(db), -np.eye(db)]), np.zeros(2 * db), "relu"),
        nc.Layer(np.hstack([np.diag(1 / c), np.diag(1 / c)]), np.zeros(db), "linear"),
    ])
    sqs = nc.parallelize([nc.sq_net(bud.m_sq)] * db)
    term_u = nc.compose(nc.affine_net((g * c**2)[None, :]), nc.compose(sqs, nc.compose(absu, u)))
    term_l = nc.compose(pnets.net_lbar, sel_tx)

    net = nc.weighted_sum([term_p, term_l, term_u], [1.0, 1.0, 1.0])
    meta = {"kind": "hamiltonian", "R": R, "delta": delta, "M": bud.M,
            "delta_prod": bud.delta_prod, "eps_sq": bud.eps_sq, "m_sq": bud.m_sq,
            "certified": pnets.exact}
    return NeuralNet(net.layers, meta)


def build_policy_net(pnets: ProblemNets, prob: ControlProblem, grad_net: NeuralNet,
                     eps0: float, grad_bound=None) -> NeuralNet:
    """x -> clamp(-(f2(0, x)^T g(x)) / 2 gamma) to the box, g the gradient surrogate.

    ``grad_bound`` sets the product range for the surrogate (defaults to the
    problem's truncation level); larger surrogate entries are clamped.
    """
    d, db = prob.d, prob.dbar
    if grad_net.in_dim != d or grad_net.out_dim != d:
        raise ProblemError(f"grad_net must map R^{d} -> R^{d}")
    if grad_bound is None:
        from hjbmlp.problem import default_truncation

        grad_bound = default_truncation(prob).R
    (s2,) = _need(pnets, "f2")
    M = max(float(_R(grad_bound)), s2, 1e-12)
    at0 = nc.affine_net(np.vstack([np.zeros((1, d)), np.eye(d)]))
    F2 = nc.compose(pnets.net_f2, at0)
    perm = [i * db + j for j in range(db) for i in range(d)]
    F2T = nc.compose(nc.select_net(d * db, perm), F2)
    w = nc.compose(nc.matvec_net(db, d, M, eps0), nc.fanout([F2T, grad_net]))
    scaled = nc.compose(nc.affine_net(-np.eye(db) / (2 * prob.gamma)), w)
    net = nc.compose(nc.clamp_net(prob.box_lo, prob.box_hi), scaled)
    return NeuralNet(net.layers, {"kind": "policy", "M": M, "eps0": eps0})


# ---------------------------------------------------------------------------
# validation


def hamiltonian_net_lipschitz_bound(pnets: ProblemNets, prob: ControlProblem, net: NeuralNet):
    """(Cx, Cp) for the constructed Hamiltonian net, 1-norms in x and in p.

    Chains the 4M product Lipschitz constant through each block of the
    construction; same dependence on d, dbar, R as the general estimate.
    """
    M = float(net.meta["M"])
    d, db, g = prob.d, prob.dbar, prob.gamma
    cmax = float(np.maximum(np.abs(prob.box_lo), np.abs(prob.box_hi)).max())
    L1, L2, LL = (float(pnets.lipschitz.get(k, 0.0) or 0.0) for k in ("f1", "f2", "lbar"))
    # p-direction
    du = 4 * M / (2 * g)
    dy = 4 * M * db * du
    Cp = 4 * M * (1 + d * dy) + 2 * g * cmax * db * du
    # x-direction
    dw = 4 * M * d * L2
    du_x = dw / (2 * g)
    dy_x = L1 + 4 * M * db * (L2 + du_x)
    Cx = 4 * M * d * dy_x + 2 * g * cmax * db * du_x + LL
    return Cx, Cp


@dataclass(frozen=True)
class LipschitzReport:
    max_ratio_x: float
    max_ratio_p: float
    bound_x: float
    bound_p: float
    samples: int

    @property
    def passed(self) -> bool:
        return self.max_ratio_x <= self.bound_x and self.max_ratio_p <= self.bound_p


def validate_net_lipschitz(net: NeuralNet, Cx_bound: float, Cp_bound: float, samples: int,
                           x_idx=None, p_idx=None, lo=-1.0, hi=1.0, seed=0,
                           chunks: int = 1) -> LipschitzReport:
    """Empirical difference ratios over random pairs, moving x or p only.

    Ratios use the 1-norm of the input difference.  Inputs outside ``x_idx``
    and ``p_idx`` stay fixed within a pair.  Each chunk draws from its own
    child seed, so the result is fixed by (seed, samples, chunks).
    """
    n = net.in_dim
    x_idx = np.arange(n) if x_idx is None else np.asarray(x_idx)
    p_idx = np.array([], dtype=int) if p_idx is None else np.asarray(p_idx)
    seqs = np.random.SeedSequence(seed).spawn(chunks)
    per = -(-samples // chunks)
    rx = rp = 0.0
    for k, ss in enumerate(seqs):
        m = min(per, samples - k * per)
        if m <= 0:
            break
        rng = np.random.default_rng(ss)
        for idx, which in ((x_idx, "x"), (p_idx, "p")):
            if idx.size == 0:
                continue
            Z = rng.uniform(lo, hi, (m, n))
            Z2 = Z.copy()
            Z2[:, idx] = rng.uniform(lo, hi, (m, idx.size))
            num = np.abs(net(Z) - net(Z2)).reshape(m, -1).max(axis=1)
            den = np.abs(Z - Z2).sum(axis=1)
            ratio = float(np.max(num / np.maximum(den, 1e-300)))
            if which == "x":
                rx = max(rx, ratio)
            else:
                rp = max(rp, ratio)
    return LipschitzReport(rx, rp, float(Cx_bound), float(Cp_bound), samples)


def hamiltonian_net_report(net: NeuralNet, prob: ControlProblem, R, delta: float, points):
    """Rows (point_id, value_exact, value_net, envelope, pass) on (t, x, p) rows."""
    Z = np.atleast_2d(np.asarray(points, dtype=float))
    d = prob.d
    t, X, P = Z[:, 0], Z[:, 1 : 1 + d], Z[:, 1 + d :]
    exact = truncated_hamiltonian(prob, R, t, X, P)
    approx = net(Z).ravel()
    env = delta * (1.0 + np.linalg.norm(X, axis=1) ** prob.growth_q)
    ok = np.abs(exact - approx) <= env
    return [(i, float(e), float(a), float(v), bool(o))
            for i, (e, a, v, o) in enumerate(zip(exact, approx, env, ok))]


def write_report_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point_id", "value_exact", "value_net", "envelope", "pass"])
        for r in rows:
            w.writerow([r[0], repr(r[1]), repr(r[2]), repr(r[3]), "PASS" if r[4] else "FAIL"])
