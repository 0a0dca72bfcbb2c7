"""Independent reference values for the testable special cases.

* ``cole_hopf_value``: no drift, identity gain and no running cost.  When the
  control clamp never activates, H(p) = -|p|^2 / (4 gamma) and the log
  transform turns the HJB equation into the heat equation.
* ``heat_value``: H = 0; plain Feynman-Kac expectation.
* ``fd_solve_1d``: a one-dimensional finite-difference solve that uses the
  closed-form Hamiltonian, clamp included.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from hjbmlp.problem import Component, ControlProblem, ProblemError, _R, default_truncation, hamiltonian

__all__ = [
    "FdSolution",
    "OracleError",
    "OracleResult",
    "cole_hopf_eligible",
    "cole_hopf_value",
    "fd_convergence_order",
    "fd_solve_1d",
    "heat_eligible",
    "heat_value",
    "oracle_validity_check",
]

CHUNK = 4096


class OracleError(ProblemError):
    pass


@dataclass
class OracleResult:
    value: np.ndarray
    gradient: np.ndarray
    stderr: np.ndarray
    grad_stderr: np.ndarray
    valid: bool = True
    reason: str = "ok"
    meta: dict = field(default_factory=dict)


def _kind(comp) -> Optional[str]:
    return comp.kind if isinstance(comp, Component) else None


def _is_identity_gain(prob: ControlProblem) -> bool:
    k = _kind(prob.f2)
    if k == "identity":
        return True
    if k == "constant" and prob.d == prob.dbar:
        return np.array_equal(np.asarray(prob.f2.params["B"], dtype=float), np.eye(prob.d))
    return False


def cole_hopf_eligible(prob: ControlProblem) -> tuple[bool, str]:
    if _kind(prob.f1) != "zero":
        return False, "drift_not_zero"
    if _kind(prob.lbar) != "zero":
        return False, "running_cost_not_zero"
    if not _is_identity_gain(prob):
        return False, "gain_not_identity"
    if prob.psi_grad is None:
        return False, "terminal_gradient_unavailable"
    return True, "ok"


def heat_eligible(prob: ControlProblem) -> tuple[bool, str]:
    for role in ("f1", "f2", "lbar"):
        if _kind(getattr(prob, role)) != "zero":
            return False, f"{role}_not_zero"
    return True, "ok"


def oracle_validity_check(prob: ControlProblem, R=None) -> tuple[bool, str]:
    """Does the box contain every unclamped minimiser for clipped gradients?

    With p clipped to [-R, R]^d, |(f2^T p)_i| <= R * (column sum of |f2|)_i,
    so the clamp is idle when that radius over 2 gamma fits inside every
    [a_i, b_i] around 0.
    """
    if _kind(prob.f2) == "zero":
        return True, "ok"
    R = _R(default_truncation(prob) if R is None else R)
    bc = prob.bound_constants
    colsum = None if bc is None else bc.sup_f2_colsum
    if colsum is None:
        return False, "gain_bound_unavailable"
    radius = R * colsum / (2 * prob.gamma)
    room = np.minimum(-prob.box_lo, prob.box_hi)
    if np.all(room >= radius):
        return True, "ok"
    return False, f"box_too_small:radius={radius!r},room={float(room.min())!r}"


def _batch_x(prob, x):
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    if X.shape[1] != prob.d or not np.all(np.isfinite(X)):
        raise OracleError("x must be finite with d coordinates")
    return X, x.ndim == 1


def _chunks(seed, samples):
    """Deterministic per-chunk generators; chunk layout depends only on samples."""
    n_chunks = -(-samples // CHUNK)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    for k, ss in enumerate(children):
        yield np.random.default_rng(ss), min(CHUNK, samples - k * CHUNK)


def _finish(res: OracleResult, single: bool) -> OracleResult:
    if single:
        res.value = res.value[0]
        res.gradient = res.gradient[0]
        res.stderr = res.stderr[0]
        res.grad_stderr = res.grad_stderr[0]
    return res


def _check_time(prob, t):
    if not 0 <= t <= prob.t_f:
        raise OracleError(f"need 0 <= t <= t_f, got t={t}")


def cole_hopf_value(prob: ControlProblem, t: float, x, mc_samples: int = 100_000,
                    seed: int = 0, R=None) -> OracleResult:
    """V = -2 gamma log E exp(-psi(x + W)/(2 gamma)) and its score-form gradient.

    All query points share the draws.  Standard errors come from the
    delta method applied to the per-draw sums (batch size one).
    """
    ok, why = cole_hopf_eligible(prob)
    if not ok:
        raise OracleError(f"not a Cole-Hopf instance: {why}")
    ok, why = oracle_validity_check(prob, R)
    if not ok:
        raise OracleError(f"oracle validity check failed: {why}")
    _check_time(prob, t)
    X, single = _batch_x(prob, x)
    n, d = X.shape
    g2 = 2 * prob.gamma
    s = prob.t_f - t
    psi0 = prob.psi(X)
    if s == 0:
        z = np.zeros((n, d))
        return _finish(OracleResult(psi0, prob.psi_grad(X), np.zeros(n), z, meta={"samples": 0}), single)

    S0 = np.zeros(n)
    S00 = np.zeros(n)
    G = np.zeros((n, d))
    GG = np.zeros((n, d))
    G0 = np.zeros((n, d))
    for rng, m in _chunks(seed, mc_samples):
        W = math.sqrt(s) * rng.standard_normal((m, d))
        Y = (X[:, None, :] + W[None, :, :]).reshape(-1, d)
        # shift by psi(x) so the weights stay O(1)
        w = np.exp(-(prob.psi(Y).reshape(n, m) - psi0[:, None]) / g2)
        wg = w[:, :, None] * prob.psi_grad(Y).reshape(n, m, d)
        S0 += w.sum(axis=1)
        S00 += (w * w).sum(axis=1)
        G += wg.sum(axis=1)
        GG += (wg * wg).sum(axis=1)
        G0 += (wg * w[:, :, None]).sum(axis=1)
    N = mc_samples
    wbar = S0 / N
    value = psi0 - g2 * np.log(wbar)
    var_w = np.maximum(S00 / N - wbar**2, 0.0)
    stderr = g2 * np.sqrt(var_w / N) / wbar
    grad = G / S0[:, None]
    # residual (w g - grad w) / wbar has mean zero
    var_r = np.maximum(GG / N - 2 * grad * G0 / N + grad**2 * (S00 / N)[:, None], 0.0)
    grad_se = np.sqrt(var_r / N) / wbar[:, None]
    return _finish(OracleResult(value, grad, stderr, grad_se, meta={"samples": N}), single)


def heat_value(prob: ControlProblem, t: float, x, mc_samples: int = 100_000,
               seed: int = 0) -> OracleResult:
    """E psi(x + W) with gradient E[(psi(x + W) - psi(x)) W] / (t_f - t)."""
    ok, why = heat_eligible(prob)
    if not ok:
        raise OracleError(f"Hamiltonian is not identically zero: {why}")
    _check_time(prob, t)
    X, single = _batch_x(prob, x)
    n, d = X.shape
    s = prob.t_f - t
    if s == 0:
        z = np.zeros((n, d))
        grad = prob.psi_grad(X) if prob.psi_grad is not None else np.full((n, d), np.nan)
        return _finish(OracleResult(prob.psi(X), grad, np.zeros(n), z, meta={"samples": 0}), single)
    S = np.zeros(n)
    SS = np.zeros(n)
    G = np.zeros((n, d))
    GG = np.zeros((n, d))
    base = prob.psi(X)
    for rng, m in _chunks(seed, mc_samples):
        W = math.sqrt(s) * rng.standard_normal((m, d))
        v = prob.psi((X[:, None, :] + W[None, :, :]).reshape(-1, d)).reshape(n, m)
        vw = (v - base[:, None])[:, :, None] * (W / s)[None, :, :]
        S += v.sum(axis=1)
        SS += (v * v).sum(axis=1)
        G += vw.sum(axis=1)
        GG += (vw * vw).sum(axis=1)
    N = mc_samples
    value = S / N
    grad = G / N
    stderr = np.sqrt(np.maximum(SS / N - value**2, 0.0) / N)
    grad_se = np.sqrt(np.maximum(GG / N - grad**2, 0.0) / N)
    return _finish(OracleResult(value, grad, stderr, grad_se, meta={"samples": N}), single)


# ---------------------------------------------------------------------------
# one-dimensional finite differences


def _heat_1d_gh(psi, x, s, nodes=80):
    """E psi(x + sqrt(s) Z) by Gauss-Hermite quadrature."""
    z, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if s <= 0:
        return psi(x[:, None]).ravel()
    vals = psi((x[:, None] + math.sqrt(s) * z[None, :]).reshape(-1, 1)).reshape(len(x), -1)
    return vals @ w


def _fd_raw(prob: ControlProblem, nx: int, nt: int, lo: float, hi: float):
    """Backward solve on a uniform grid; returns (x grid, t grid, V[t, x])."""
    h = (hi - lo) / (nx - 1)
    k = prob.t_f / nt
    xs = np.linspace(lo, hi, nx)
    ts = prob.t_f - k * np.arange(nt + 1)
    inner = xs[1:-1]
    m = nx - 2
    # (I - k/2 D) with D = (1/2) second difference / h^2
    r = k / (2 * h * h)
    ab = np.zeros((3, m))
    ab[0, 1:] = -r / 2
    ab[1, :] = 1 + r
    ab[2, :-1] = -r / 2

    def ham(tk, V):
        p = (V[2:] - V[:-2]) / (2 * h)
        return hamiltonian(prob, np.full(m, tk), inner[:, None], p[:, None])

    def boundary(tk):
        return _heat_1d_gh(prob.psi, [lo, hi], prob.t_f - tk)

    V = np.empty((nt + 1, nx))
    V[0] = prob.psi(xs[:, None])
    H_prev = None
    for n in range(nt):
        cur = V[n]
        H_now = ham(ts[n], cur)
        explicit = H_now if H_prev is None else 1.5 * H_now - 0.5 * H_prev
        rhs = cur[1:-1] + (r / 2) * (cur[2:] - 2 * cur[1:-1] + cur[:-2]) + k * explicit
        bl, br = boundary(ts[n + 1])
        rhs[0] += (r / 2) * bl
        rhs[-1] += (r / 2) * br
        V[n + 1, 1:-1] = solve_banded((1, 1), ab, rhs)
        V[n + 1, 0], V[n + 1, -1] = bl, br
        H_prev = H_now
    return xs, ts, V


def _explicit_speed(prob: ControlProblem) -> float:
    bc = prob.bound_constants
    f1 = (bc.sup_f1 or 0.0) if bc else 0.0
    f2 = (bc.sup_f2 or 0.0) if bc else 0.0
    ab = float(np.max(np.maximum(np.abs(prob.box_lo), np.abs(prob.box_hi))))
    return f1 + f2 * ab


@dataclass
class FdSolution:
    """Callable (t, x) -> OracleResult backed by a fine and a half-resolution solve."""

    prob: ControlProblem
    x_range: tuple
    margin: float
    fine: tuple
    coarse: Optional[tuple]
    order: float = 2.0

    @staticmethod
    def _interp(sol, t, x):
        xs, ts, V = sol
        tau = (ts[0] - t) / (ts[0] - ts[-1]) * (len(ts) - 1)
        j = min(int(math.floor(tau)), len(ts) - 2)
        f = tau - j
        row = (1 - f) * V[j] + f * V[j + 1]
        spline = CubicSpline(xs, row)
        return spline(x), spline(x, 1)

    def __call__(self, t: float, x) -> OracleResult:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 0 or (x.ndim == 1 and x.shape == (1,))
        xq = np.atleast_1d(x).ravel()
        lo, hi = self.x_range
        if not 0 <= t <= self.prob.t_f:
            raise OracleError(f"need 0 <= t <= t_f, got t={t}")
        if np.any(xq < lo + self.margin) or np.any(xq > hi - self.margin):
            raise OracleError("query outside the safe interior of the grid")
        v, g = self._interp(self.fine, t, xq)
        if self.coarse is not None:
            vc, gc = self._interp(self.coarse, t, xq)
            scale = 2.0**self.order - 1
            se, gse = np.abs(v - vc) / scale, np.abs(g - gc) / scale
        else:
            se, gse = np.full_like(v, np.nan), np.full_like(g, np.nan)
        res = OracleResult(v, g[:, None], se, gse[:, None])
        return _finish(res, single) if single else res


def fd_solve_1d(prob: ControlProblem, nx: int = 2001, nt: Optional[int] = None,
                x_range: Optional[tuple] = None, budget: float = 0.25,
                richardson: bool = True) -> FdSolution:
    """Crank-Nicolson diffusion with second-order explicit (Adams-Bashforth) Hamiltonian.

    Far-field Dirichlet values are the H = 0 heat solution.  ``nt`` defaults
    to the smallest even step count with k * |dH/dp| / h <= budget.
    """
    if prob.d != 1 or prob.dbar != 1:
        raise OracleError("fd_solve_1d needs d = dbar = 1")
    if nx < 5 or nx % 2 == 0:
        raise OracleError("nx must be odd and >= 5 so the half grid is nested")
    margin = 4 * math.sqrt(prob.t_f)
    if x_range is None:
        x_range = (-(margin + 6.0), margin + 6.0)
    lo, hi = map(float, x_range)
    if hi - lo <= 2 * margin:
        raise OracleError("x_range too narrow for the required margin")
    h = (hi - lo) / (nx - 1)
    speed = _explicit_speed(prob)
    if nt is None:
        nt = max(2, math.ceil(prob.t_f * speed / (budget * h)))
        nt += nt % 2
    cfl = prob.t_f / nt * speed / h
    if cfl > budget:
        warnings.warn(f"explicit Hamiltonian term at {cfl:.3g} of the grid ratio exceeds the "
                      f"stability budget {budget}", RuntimeWarning, stacklevel=2)
    fine = _fd_raw(prob, nx, nt, lo, hi)
    coarse = _fd_raw(prob, (nx - 1) // 2 + 1, max(1, nt // 2), lo, hi) if richardson else None
    return FdSolution(prob, (lo, hi), margin, fine, coarse)


def fd_convergence_order(prob: ControlProblem, nx: int = 401, x_points=None,
                         t: float = 0.0, x_range=None, budget: float = 0.25) -> float:
    """Observed order from three nested resolutions (nx, 2nx-1, 4nx-3)."""
    if x_points is None:
        x_points = np.linspace(-2.0, 2.0, 21)
    margin = 4 * math.sqrt(prob.t_f)
    if x_range is None:
        x_range = (-(margin + 6.0), margin + 6.0)
    h = (x_range[1] - x_range[0]) / (nx - 1)
    nt = max(2, math.ceil(prob.t_f * _explicit_speed(prob) / (budget * h)))
    vals = []
    for k in range(3):
        sol = fd_solve_1d(prob, nx=(nx - 1) * 2**k + 1, nt=nt * 2**k, x_range=x_range,
                          budget=budget, richardson=False)
        vals.append(sol(t, x_points).value)
    e1 = np.max(np.abs(vals[0] - vals[1]))
    e2 = np.max(np.abs(vals[1] - vals[2]))
    return float(math.log2(e1 / e2))
