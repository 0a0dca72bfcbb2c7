"""Multilevel Picard estimation of (V, grad V) and freezing one sample into a network.

Randomness is addressed, not streamed: every sample label (an index path in
the recursion tree) owns a Philox stream keyed by the master seed and a
64-bit hash of the path.  Results therefore do not depend on evaluation
order or on how sibling subtrees are spread over threads.

A single estimator draw is evaluated at a whole batch of query points with
the same randomness, so one call realizes the random function
``x -> (v(t, x), v_grad(t, x))``; this is the object that gets frozen.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from hjbmlp import netcalc as nc
from hjbmlp.netcalc import NeuralNet
from hjbmlp.problem import ControlProblem, ProblemError, _R, truncated_hamiltonian

__all__ = [
    "DrawCounter",
    "IndexPath",
    "MlpError",
    "MlpEstimate",
    "MlpParams",
    "MaxNormReport",
    "count_draws",
    "count_indices",
    "freeze_to_net",
    "gaussian_maxnorm_check",
    "label_stream",
    "mlp_estimate",
    "sample_gaussian",
    "sample_tau",
]

H_MODES = ("exact_HR", "network")


class MlpError(RuntimeError):
    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{message} at index path {path}")
        self.path = path


@dataclass(frozen=True)
class MlpParams:
    N: int
    M: int
    alpha_time: float = 0.5
    seed: int = 0
    h_mode: str = "exact_HR"

    def __post_init__(self):
        if self.N < 0 or self.M < 1:
            raise ValueError("need N >= 0 and M >= 1")
        if not 0 < self.alpha_time <= 1:
            raise ValueError("alpha_time must lie in (0, 1]")
        if self.h_mode not in H_MODES:
            raise ValueError(f"h_mode must be one of {H_MODES}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class IndexPath:
    """Label of a node in the recursion tree: the root is the empty path."""

    path: tuple = ()

    def child(self, l: int, i: int) -> "IndexPath":
        return IndexPath(self.path + ((int(l), int(i)),))

    def hash64(self) -> int:
        raw = b"".join(struct.pack("<qq", l, i) for l, i in self.path)
        return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")

    def __str__(self):
        return "0" + "".join(f",({l},{i})" for l, i in self.path)


def count_indices(N: int, M: int) -> int:
    """Size of the index set, counted level by level with multiplicity."""
    n = 1
    for k in range(1, N + 1):
        n *= 1 + (2 * k - 1) * (2 * M**k + 1)
    return n


def count_draws(n: int, M: int) -> tuple[int, int]:
    """(gaussian vectors, tau draws) consumed by one level-n estimate."""
    if n <= 0:
        return 0, 0
    z, t = [0], [0]
    for k in range(1, n + 1):
        zk, tk = M**k, 0
        for l in range(k):
            reps = M ** (k - l)
            zk += reps * (1 + z[l] + (z[l - 1] if l >= 1 else 0))
            tk += reps * (1 + t[l] + (t[l - 1] if l >= 1 else 0))
        z.append(zk)
        t.append(tk)
    return z[n], t[n]


class DrawCounter:
    """Thread-safe tally of consumed gaussian vectors and tau draws."""

    def __init__(self):
        self._lock = threading.Lock()
        self.gaussians = 0
        self.taus = 0

    def add(self, gaussians=0, taus=0):
        with self._lock:
            self.gaussians += gaussians
            self.taus += taus


def label_stream(seed: int, path: IndexPath) -> np.random.Generator:
    """Counter-based stream for one label: Philox keyed by (seed, path hash)."""
    key = (int(seed) << 64) | path.hash64()
    return np.random.Generator(np.random.Philox(key=key))


def _open_uniform(rng: np.random.Generator, size=None):
    # midpoints of a 2^53 grid: never 0, never 1
    k = rng.integers(0, 2**53, size=size, dtype=np.int64)
    return (k + 0.5) / 2.0**53


def sample_tau(rng: np.random.Generator, alpha_time: float, size=None):
    """Draw from the law with distribution function b -> b^alpha on (0, 1)."""
    return _open_uniform(rng, size) ** (1.0 / alpha_time)


def sample_gaussian(rng: np.random.Generator, d: int, size=None):
    shape = (d,) if size is None else (size, d)
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# the estimator


@dataclass
class MlpEstimate:
    value: np.ndarray
    gradient: np.ndarray
    meta: dict = field(default_factory=dict)


class _Model:
    """psi and H evaluators for the chosen Hamiltonian mode."""

    def __init__(self, prob: ControlProblem, hsrc, h_mode: str):
        self.prob = prob
        self.h_mode = h_mode
        if h_mode == "exact_HR":
            R = _R(hsrc)
            self.psi = lambda X: prob.psi(X)
            self.H = lambda t, X, P: truncated_hamiltonian(prob, R, np.full(len(X), t), X, P)
            self.R = R
        else:
            try:
                self.h_net, self.psi_net = hsrc
            except (TypeError, ValueError):
                raise ProblemError("network mode needs (hamiltonian_net, psi_net)") from None
            self.psi = lambda X: self.psi_net(X).ravel()
            self.H = self._h_network

    def _h_network(self, t, X, P):
        Z = np.column_stack([np.full(len(X), t), X, P])
        return self.h_net(Z).ravel()


class _Recursion:
    def __init__(self, model: _Model, params: MlpParams, counter: DrawCounter):
        self.model = model
        self.p = params
        self.counter = counter
        self.d = model.prob.d
        self.tf = model.prob.t_f

    def terminal_draws(self, theta: IndexPath, n: int):
        K = self.p.M**n
        Z = np.empty((K, self.d))
        for i in range(1, K + 1):
            Z[i - 1] = sample_gaussian(label_stream(self.p.seed, theta.child(0, -i)), self.d)
        self.counter.add(gaussians=K)
        return Z

    def level_draw(self, label: IndexPath):
        rng = label_stream(self.p.seed, label)
        Z = sample_gaussian(rng, self.d)
        tau = float(sample_tau(rng, self.p.alpha_time))
        self.counter.add(gaussians=1, taus=1)
        return Z, tau

    def level_terms(self, n: int):
        return [(l, i) for l in range(n) for i in range(1, self.p.M ** (n - l) + 1)]

    def level_term(self, n, theta, t, X, l, i):
        """Contribution of sample (l, i) at node theta, shape (batch, 1 + d)."""
        a = self.p.alpha_time
        s = self.tf - t
        label = theta.child(l, i)
        Z, tau = self.level_draw(label)
        tp = t + s * tau
        Xp = X + math.sqrt(s * tau) * Z
        h = self.model.H(tp, Xp, self.v(l, label, tp, Xp)[:, 1:])
        if l >= 1:
            low = theta.child(-l, i)
            h = h - self.model.H(tp, Xp, self.v(l - 1, low, tp, Xp)[:, 1:])
        K = self.p.M ** (n - l)
        w = s * tau ** (1.0 - a) / (a * K)
        out = np.empty((len(X), 1 + self.d))
        out[:, 0] = w * h
        out[:, 1:] = (w * h)[:, None] * (Z / math.sqrt(s * tau))[None, :]
        return out

    def terminal_block(self, n, theta, t, X):
        s = self.tf - t
        Z = self.terminal_draws(theta, n)
        K = len(Z)
        psi0 = self.model.psi(X)
        Y = (X[:, None, :] + math.sqrt(s) * Z[None, :, :]).reshape(-1, self.d)
        diff = self.model.psi(Y).reshape(len(X), K) - psi0[:, None]
        out = np.empty((len(X), 1 + self.d))
        out[:, 0] = psi0 + diff.mean(axis=1)
        out[:, 1:] = diff @ Z / (K * math.sqrt(s))
        return out

    def v(self, n, theta, t, X):
        if n <= 0:
            return np.zeros((len(X), 1 + self.d))
        out = self.terminal_block(n, theta, t, X)
        for l, i in self.level_terms(n):
            out += self.level_term(n, theta, t, X, l, i)
        if not np.all(np.isfinite(out)):
            raise MlpError("non-finite estimator value", str(theta))
        return out


def default_threads() -> int:
    return max(1, int(os.environ.get("HJBMLP_THREADS", "1")))


def mlp_estimate(prob: ControlProblem, hsrc, params: MlpParams, t: float, x,
                 threads: Optional[int] = None) -> MlpEstimate:
    """One multilevel Picard sample of (V(t, x), grad V(t, x)).

    ``hsrc`` is the truncation level R for ``exact_HR`` mode, or the pair
    ``(hamiltonian_net, psi_net)`` for ``network`` mode.  ``x`` may be a batch
    of points; all points share the same randomness.  Top-level level terms
    run on ``threads`` workers and are summed in a fixed order.
    """
    if not 0 <= t < prob.t_f:
        raise ProblemError(f"need 0 <= t < t_f, got t={t}")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != prob.d or not np.all(np.isfinite(X)):
        raise ProblemError("x must be finite with d coordinates")
    threads = default_threads() if threads is None else max(1, int(threads))

    started = time.perf_counter()
    counter = DrawCounter()
    rec = _Recursion(_Model(prob, hsrc, params.h_mode), params, counter)
    root = IndexPath()
    n = params.N
    if n == 0:
        out = np.zeros((len(X), 1 + prob.d))
    else:
        out = rec.terminal_block(n, root, t, X)
        terms = rec.level_terms(n)
        job = lambda li: rec.level_term(n, root, t, X, *li)
        if threads > 1 and len(terms) > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                parts = list(ex.map(job, terms))
        else:
            parts = [job(li) for li in terms]
        for part in parts:
            out += part
        if not np.all(np.isfinite(out)):
            raise MlpError("non-finite estimator value", str(root))
    meta = {"N": params.N, "M": params.M, "alpha": params.alpha_time, "seed": params.seed,
            "gaussians": counter.gaussians, "taus": counter.taus,
            "samples": counter.gaussians + counter.taus,
            "wall_ms": 1000.0 * (time.perf_counter() - started)}
    if single:
        return MlpEstimate(out[0, 0], out[0, 1:], meta)
    return MlpEstimate(out[:, 0], out[:, 1:], meta)


# ---------------------------------------------------------------------------
# freezing


def freeze_to_net(prob: ControlProblem, hsrc, params: MlpParams, t: float) -> NeuralNet:
    """One estimator sample, as a single network x -> (value, gradient).

    ``hsrc`` is ``(hamiltonian_net, psi_net)``; shifts x -> x + c Z are
    affine, so the whole recursion is composition, fan-out and weighted sums.
    """
    if params.h_mode != "network":
        raise ProblemError("freezing needs h_mode='network': an exact Hamiltonian is not a network")
    if not 0 <= t < prob.t_f:
        raise ProblemError(f"need 0 <= t < t_f, got t={t}")
    h_net, psi_net = hsrc
    d, tf, a = prob.d, prob.t_f, params.alpha_time
    counter = DrawCounter()
    rec = _Recursion(_Model(prob, hsrc, "network"), params, counter)
    I = sp.identity(d, format="csr")
    grad_sel = nc.select_net(1 + d, range(1, 1 + d))

    def h_after(sub: NeuralNet, tp: float, shift: np.ndarray) -> NeuralNet:
        # x -> H(tp, x + shift, grad sub(x + shift))
        parts = [nc.affine_net(sp.csr_matrix((1, d)), [tp]), nc.affine_net(I),
                 nc.compose(grad_sel, sub)]
        return nc.affine_precompose(nc.compose(h_net, nc.fanout(parts)), I, shift)

    def build(n: int, theta: IndexPath, t: float) -> NeuralNet:
        if n <= 0:
            return nc.zero_net(d, 1 + d)
        s = tf - t
        Z = rec.terminal_draws(theta, n)
        K = len(Z)
        nets, cols = [psi_net], []
        base = np.zeros(1 + d)
        base[1:] -= Z.sum(axis=0) / (K * math.sqrt(s))
        cols.append(base)
        for z in Z:
            nets.append(nc.affine_precompose(psi_net, I, math.sqrt(s) * z))
            cols.append(np.concatenate([[1.0 / K], z / (K * math.sqrt(s))]))
        for l, i in rec.level_terms(n):
            label = theta.child(l, i)
            z, tau = rec.level_draw(label)
            tp = t + s * tau
            shift = math.sqrt(s * tau) * z
            w = s * tau ** (1.0 - a) / (a * M_of(n - l))
            vec = w * np.concatenate([[1.0], z / math.sqrt(s * tau)])
            nets.append(h_after(build(l, label, tp), tp, shift))
            cols.append(vec)
            if l >= 1:
                nets.append(h_after(build(l - 1, theta.child(-l, i), tp), tp, shift))
                cols.append(-vec)
        W = np.column_stack(cols)
        return nc.compose(nc.affine_net(W), nc.fanout(nets))

    M_of = lambda k: params.M**k
    net = build(params.N, IndexPath(), t)
    meta = {"kind": "frozen_mlp", "N": params.N, "M": params.M, "alpha": a,
            "seed": params.seed, "t": t, "gaussians": counter.gaussians, "taus": counter.taus}
    return NeuralNet(net.layers, meta)


# ---------------------------------------------------------------------------
# gaussian max-norm concentration


@dataclass(frozen=True)
class MaxNormReport:
    n: int
    sigma: float
    samples: int
    mean: float
    mean_se: float
    mean_bound: float
    tails: tuple  # (alpha, frequency, se, bound)

    @property
    def passed(self) -> bool:
        ok = self.mean <= self.mean_bound + 3 * self.mean_se
        return ok and all(f <= b + 3 * se for _, f, se, b in self.tails)


def gaussian_maxnorm_check(n: int, sigma: float, samples: int, seed: int = 0,
                           alphas=(0.5, 1.0), chunk: int = 20000) -> MaxNormReport:
    """Empirical mean and deviation tails of the max-norm of N(0, sigma^2 I_n)."""
    rng = np.random.default_rng(seed)
    norms = np.empty(samples)
    for start in range(0, samples, chunk):
        m = min(chunk, samples - start)
        norms[start : start + m] = np.abs(sigma * rng.standard_normal((m, n))).max(axis=1)
    mean = float(norms.mean())
    se = float(norms.std(ddof=1) / math.sqrt(samples))
    tails = []
    for al in alphas:
        f = float(np.mean(norms >= mean + al * sigma))
        tails.append((al * sigma, f, math.sqrt(max(f * (1 - f), 1e-300) / samples),
                      math.exp(-(al * sigma) ** 2 / (2 * sigma**2))))
    return MaxNormReport(n, sigma, samples, mean, se, sigma * math.sqrt(2 * math.log(2 * n)),
                         tuple(tails))
