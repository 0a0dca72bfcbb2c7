"""Explicit-weight ReLU/ReCU networks and their construction calculus.

A network is a list of layers ``(A, b, act)``; each layer maps ``h`` to
``act(A h + b)`` and the last layer is linear.  Hidden layers carry a single
activation, ``relu`` or ``recu``.  Networks with different activation
patterns are combined by inserting exact identity blocks
(``x = relu(x) - relu(-x)`` and the cubic ``24x`` identity) until the
patterns agree, so every constructed network stays in the same class.

Weight matrices are stored as scipy CSR matrices: the networks produced by
freezing a Monte Carlo estimator are large but very sparse.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Layer",
    "NetworkError",
    "NeuralNet",
    "RECU_ENVELOPE",
    "add",
    "affine_net",
    "affine_precompose",
    "clamp_net",
    "clip_net",
    "compose",
    "fanout",
    "identity_net",
    "load_net",
    "matvec_net",
    "parallelize",
    "prod_depth",
    "prod_net",
    "realize",
    "save_net",
    "select_net",
    "sq_net",
    "weighted_sum",
    "zero_net",
]

ACTIVATIONS = ("relu", "recu", "linear")
# largest |pre-activation| a ReCU layer accepts before cubing
RECU_ENVELOPE = 1.0e4
# dense storage in network files up to this many matrix entries
_DENSE_FILE_LIMIT = 65536


class NetworkError(ValueError):
    pass


def _csr(A) -> sp.csr_matrix:
    if sp.issparse(A):
        M = sp.csr_matrix(A, dtype=float)
    else:
        M = sp.csr_matrix(np.atleast_2d(np.asarray(A, dtype=float)))
    M.eliminate_zeros()
    M.sort_indices()
    return M


@dataclass(frozen=True)
class Layer:
    A: sp.csr_matrix
    b: np.ndarray
    act: str

    def __post_init__(self):
        if self.act not in ACTIVATIONS:
            raise NetworkError(f"unknown activation {self.act!r}")
        A = _csr(self.A)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if b.shape[0] != A.shape[0]:
            raise NetworkError(f"bias length {b.shape[0]} does not match {A.shape[0]} rows")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def shape(self):
        return self.A.shape


class NeuralNet:
    """Immutable layered network.  Hidden linear layers are folded on construction."""

    __slots__ = ("layers", "meta")

    def __init__(self, layers: Sequence[Layer], meta: dict | None = None):
        layers = [l if isinstance(l, Layer) else Layer(*l) for l in layers]
        if not layers:
            raise NetworkError("a network needs at least one layer")
        if layers[-1].act != "linear":
            raise NetworkError("the output layer must be linear")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.A.shape[1] != prev.A.shape[0]:
                raise NetworkError(
                    f"layer shapes do not chain: {prev.A.shape} then {nxt.A.shape}"
                )
        folded = [layers[0]]
        for layer in layers[1:]:
            if folded[-1].act == "linear":
                top = folded.pop()
                layer = Layer(layer.A @ top.A, layer.A @ top.b + layer.b, layer.act)
            folded.append(layer)
        self.layers = tuple(folded)
        self.meta = dict(meta or {})

    # -- accounting ------------------------------------------------------
    @property
    def in_dim(self) -> int:
        return self.layers[0].A.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].A.shape[0]

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def width(self) -> int:
        return max([self.in_dim] + [l.A.shape[0] for l in self.layers])

    @property
    def size(self) -> int:
        return int(sum(l.A.nnz + np.count_nonzero(l.b) for l in self.layers))

    @property
    def pattern(self) -> tuple:
        return tuple(l.act for l in self.layers[:-1])

    def __call__(self, x):
        return realize(self, x)

    def __repr__(self):
        return (f"NeuralNet(in={self.in_dim}, out={self.out_dim}, depth={self.depth}, "
                f"width={self.width}, size={self.size})")

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        out = []
        for l in self.layers:
            rows, cols = l.A.shape
            if rows * cols <= _DENSE_FILE_LIMIT:
                A = l.A.toarray().tolist()
            else:
                coo = l.A.tocoo()
                A = {"shape": [rows, cols], "row": coo.row.tolist(),
                     "col": coo.col.tolist(), "val": coo.data.tolist()}
            out.append({"act": l.act, "A": A, "b": l.b.tolist()})
        d = {"layers": out}
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "NeuralNet":
        layers = []
        for l in data["layers"]:
            A = l["A"]
            if isinstance(A, dict):
                A = sp.coo_matrix((A["val"], (A["row"], A["col"])), shape=tuple(A["shape"]))
            else:
                A = np.asarray(A, dtype=float).reshape(len(l["b"]), -1)
            layers.append(Layer(A, l["b"], l["act"]))
        return cls(layers, data.get("meta"))


def save_net(net: NeuralNet, path) -> None:
    # json writes floats with the shortest repr that round-trips exactly
    Path(path).write_text(json.dumps(net.to_dict()))


def load_net(path) -> NeuralNet:
    return NeuralNet.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# realization


def realize(net: NeuralNet, x):
    """Forward evaluation; ``x`` is one input vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != net.in_dim:
        raise NetworkError(f"input has length {X.shape[1]}, network expects {net.in_dim}")
    H = X.T
    for layer in net.layers:
        Z = layer.A @ H + layer.b[:, None]
        if layer.act == "relu":
            H = np.maximum(Z, 0.0)
        elif layer.act == "recu":
            if Z.size and np.abs(Z).max() > RECU_ENVELOPE:
                raise NetworkError(
                    f"ReCU pre-activation {np.abs(Z).max():.3g} outside the envelope {RECU_ENVELOPE:g}"
                )
            H = np.maximum(Z, 0.0) ** 3
        else:
            H = Z
    out = np.asarray(H).T
    return out[0] if single else out


# ---------------------------------------------------------------------------
# elementary networks


def affine_net(A, b=None) -> NeuralNet:
    A = _csr(A)
    b = np.zeros(A.shape[0]) if b is None else b
    return NeuralNet([Layer(A, b, "linear")])


def zero_net(in_dim: int, out_dim: int) -> NeuralNet:
    return affine_net(sp.csr_matrix((out_dim, in_dim)), np.zeros(out_dim))


def select_net(in_dim: int, indices) -> NeuralNet:
    """Linear net picking ``x[indices]``."""
    idx = np.asarray(indices, dtype=int)
    A = sp.csr_matrix((np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), in_dim))
    return affine_net(A)


def _identity_blocks(act: str, n: int):
    """(E_A, E_b, D_A) with y = D_A act(E_A y + E_b) exactly."""
    I = sp.identity(n, format="csr")
    if act == "relu":
        E = sp.vstack([I, -I])
        return _csr(E), np.zeros(2 * n), _csr(sp.hstack([I, -I]))
    if act == "recu":
        E = sp.vstack([I, -I, I, -I, I, -I])
        Eb = np.concatenate([np.full(n, 2.0), np.full(n, -2.0), np.zeros(2 * n),
                             np.full(n, -2.0), np.full(n, 2.0)])
        D = sp.hstack([I, -I, -2 * I, 2 * I, I, -I]) / 24.0
        return _csr(E), Eb, _csr(D)
    raise NetworkError(f"no identity block for activation {act!r}")


_BLOCK_FACTOR = {"relu": 2, "recu": 6}


def identity_net(n: int, act: str = "relu") -> NeuralNet:
    """Two-layer net realizing the identity on R^n through one ``act`` layer."""
    E, Eb, D = _identity_blocks(act, n)
    return NeuralNet([Layer(E, Eb, act), Layer(D, np.zeros(n), "linear")])


# ---------------------------------------------------------------------------
# composition and alignment


def compose(f: NeuralNet, g: NeuralNet) -> NeuralNet:
    """Network realizing ``f(g(x))``; g's output layer is merged into f's input layer."""
    if f.in_dim != g.out_dim:
        raise NetworkError(f"cannot compose: f takes {f.in_dim} inputs, g gives {g.out_dim}")
    last, first = g.layers[-1], f.layers[0]
    merged = Layer(first.A @ last.A, first.A @ last.b + first.b, first.act)
    return NeuralNet(list(g.layers[:-1]) + [merged] + list(f.layers[1:]))


def affine_precompose(net: NeuralNet, A, b=None) -> NeuralNet:
    """Network realizing ``net(A x + b)``."""
    return compose(net, affine_net(A, b))


def _gap_widths(net: NeuralNet, gap: int):
    """Widths of the vector before and after the affine map at ``gap``."""
    layer = net.layers[gap]
    return layer.A.shape[1], layer.A.shape[0]


def _insert_identity(net: NeuralNet, gap: int, act: str) -> NeuralNet:
    """Insert an identity ``act`` layer so it becomes hidden activation number ``gap``."""
    layers = list(net.layers)
    pre, post = _gap_widths(net, gap)
    target = layers[gap]
    if pre <= post:
        E, Eb, D = _identity_blocks(act, pre)
        new = [Layer(E, Eb, act), Layer(target.A @ D, target.b, target.act)]
    else:
        E, Eb, D = _identity_blocks(act, post)
        new = [Layer(E @ target.A, E @ target.b + Eb, act), Layer(D, np.zeros(post), target.act)]
    return NeuralNet(layers[:gap] + new + layers[gap + 1 :], net.meta)


def _scs(a: tuple, b: tuple) -> tuple:
    """A shortest common supersequence of two activation patterns."""
    n, m = len(a), len(b)
    L = np.zeros((n + 1, m + 1), dtype=int)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            L[i, j] = L[i + 1, j + 1] + 1 if a[i] == b[j] else max(L[i + 1, j], L[i, j + 1])
    out, i, j = [], 0, 0
    while i < n and j < m:
        if a[i] == b[j]:
            out.append(a[i]); i += 1; j += 1
        elif L[i + 1, j] >= L[i, j + 1]:
            out.append(a[i]); i += 1
        else:
            out.append(b[j]); j += 1
    out.extend(a[i:]); out.extend(b[j:])
    return tuple(out)


def _embedding(net: NeuralNet, target: tuple) -> list:
    """Target positions that need inserted identities, chosen to minimise added width."""
    s = net.pattern
    k, K = len(s), len(target)
    cost = [min(_gap_widths(net, g)) for g in range(k + 1)]
    INF = float("inf")
    D = np.full((k + 1, K + 1), INF)
    D[0, 0] = 0.0
    for j in range(K):
        for i in range(min(j, k) + 1):
            if D[i, j] == INF:
                continue
            ins = D[i, j] + _BLOCK_FACTOR[target[j]] * cost[i]
            if ins < D[i, j + 1]:
                D[i, j + 1] = ins
            if i < k and s[i] == target[j] and D[i, j] < D[i + 1, j + 1]:
                D[i + 1, j + 1] = D[i, j]
    if D[k, K] == INF:
        raise NetworkError(f"pattern {s} is not a subsequence of {target}")
    inserts, i, j = [], k, K
    while j > 0:
        if i > 0 and s[i - 1] == target[j - 1] and D[i - 1, j - 1] == D[i, j]:
            i -= 1
        else:
            inserts.append(j - 1)
        j -= 1
    return sorted(inserts)


def align(net: NeuralNet, target: tuple) -> NeuralNet:
    """Pad ``net`` with identity layers until its activation pattern equals ``target``."""
    target = tuple(target)
    if net.pattern == target:
        return net
    for pos in _embedding(net, target):
        net = _insert_identity(net, pos, target[pos])
    assert net.pattern == target
    return net


def parallelize(nets: Sequence[NeuralNet]) -> NeuralNet:
    """Stacked inputs to stacked outputs: ``(x_1, .., x_k) -> (f_1(x_1), .., f_k(x_k))``."""
    nets = list(nets)
    if not nets:
        raise NetworkError("nothing to parallelize")
    if len(nets) == 1:
        return nets[0]
    target = nets[0].pattern
    for n in nets[1:]:
        target = _scs(target, n.pattern)
    aligned = [align(n, target) for n in nets]
    layers = []
    for parts in zip(*(n.layers for n in aligned)):
        A = sp.block_diag([p.A for p in parts], format="csr")
        layers.append(Layer(A, np.concatenate([p.b for p in parts]), parts[0].act))
    return NeuralNet(layers)


def fanout(nets: Sequence[NeuralNet]) -> NeuralNet:
    """All nets read the same input: ``x -> (f_1(x), .., f_k(x))``."""
    nets = list(nets)
    n = nets[0].in_dim
    if any(f.in_dim != n for f in nets):
        raise NetworkError("fanout needs equal input dimensions")
    if len(nets) == 1:
        return nets[0]
    copy = sp.vstack([sp.identity(n, format="csr")] * len(nets))
    return affine_precompose(parallelize(nets), copy)


def weighted_sum(nets: Sequence[NeuralNet], weights) -> NeuralNet:
    """``x -> sum_k w_k f_k(x)`` for nets sharing input and output dimensions."""
    nets = list(nets)
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(nets):
        raise NetworkError("one weight per network")
    m = nets[0].out_dim
    if any(f.out_dim != m for f in nets):
        raise NetworkError("weighted_sum needs equal output dimensions")
    I = sp.identity(m, format="csr")
    W = sp.hstack([w * I for w in weights])
    return compose(affine_net(W), fanout(nets))


def add(f: NeuralNet, g: NeuralNet, weights=(1.0, 1.0)) -> NeuralNet:
    return weighted_sum([f, g], weights)


# ---------------------------------------------------------------------------
# clipping and clamping


def clamp_net(a, b) -> NeuralNet:
    """Coordinatewise ``min(max(y, a), b)`` as ``a + relu((b - a) - relu(b - y))``.

    Once a bound is active the second hidden layer holds exactly 0 or
    ``b - a``, so every later layer sees identical values for y and its clamp.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape or np.any(a > b):
        raise NetworkError("clamp bounds need a <= b with equal shapes")
    I = sp.identity(a.size, format="csr")
    return NeuralNet([Layer(-I, b, "relu"), Layer(-I, b - a, "relu"), Layer(I, a, "linear")])


def clip_net(R: float, n: int = 1) -> NeuralNet:
    """Coordinatewise truncation to [-R, R]; weight count does not depend on R."""
    if not R > 0:
        raise NetworkError("R must be positive")
    return clamp_net(np.full(n, -float(R)), np.full(n, float(R)))


# ---------------------------------------------------------------------------
# square, product, matrix-vector


def sq_net(m: int) -> NeuralNet:
    """Sawtooth network equal to the piecewise-linear interpolant of x^2 on k 2^-m.

    Valid on [0, 1], where the error is at most 2^(-2m-2).  Hidden layer s
    holds ``relu`` of (running sum, g, g - 1/2, g - 1) with g the (s-1)-fold
    hat function; all carried quantities are nonnegative on [0, 1].
    """
    if m < 1:
        raise NetworkError("refinement depth m must be >= 1")
    # hidden unit layout: [acc, g, g - 1/2, g - 1]
    hat = np.array([0.0, 2.0, -4.0, 2.0])
    layers = [Layer(np.ones((4, 1)), [0.0, 0.0, -0.5, -1.0], "relu")]
    for s in range(1, m + 1):
        # acc_s = acc_{s-1} - g_s / 4^s, g_s = hat(g_{s-1})
        acc_row = np.array([1.0, 0.0, 0.0, 0.0]) - hat / 4.0**s
        if s == m:
            layers.append(Layer(acc_row[None, :], [0.0], "linear"))
        else:
            A = np.vstack([acc_row, hat, hat, hat])
            layers.append(Layer(A, [0.0, 0.0, -0.5, -1.0], "relu"))
    return NeuralNet(layers, {"kind": "sq", "m": m})


def sq_depth(eps: float) -> int:
    """Smallest m >= 1 with 2^(-2m-2) <= eps."""
    if not 0 < eps:
        raise NetworkError("eps must be positive")
    return max(1, math.ceil((math.log2(1.0 / eps) - 2.0) / 2.0))


def prod_depth(M: float, delta: float) -> int:
    """Square-net depth for a product net with error <= delta on [-M, M]^2.

    The three interpolation errors lie in [0, eps], so their signed
    combination spans [-2 eps, eps]; hence 4 M^2 eps <= delta.
    """
    return sq_depth(delta / (4.0 * M * M))


def prod_net(M: float, delta: float) -> NeuralNet:
    """Approximate product (x, y) -> xy with inputs clamped to [-M, M].

    xy = 2M^2 [ sq(|x+y|/2M) - sq(|x|/2M) - sq(|y|/2M) ].
    """
    if not M > 0:
        raise NetworkError("M must be positive")
    if not 0 < delta < 1:
        raise NetworkError("delta must lie in (0, 1)")
    m = prod_depth(M, delta)
    clamp = clamp_net([-M, -M], [M, M])
    # |z| = relu(z) + relu(-z) for z in (x+y, x, y), scaled by 1/2M
    S = np.array([[1.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    absl = NeuralNet([
        Layer(np.vstack([S, -S]), np.zeros(6), "relu"),
        Layer(np.hstack([np.eye(3), np.eye(3)]) / (2.0 * M), np.zeros(3), "linear"),
    ])
    sq3 = parallelize([sq_net(m)] * 3)
    out = affine_net(2.0 * M * M * np.array([[1.0, -1.0, -1.0]]))
    net = compose(out, compose(sq3, compose(absl, clamp)))
    return NeuralNet(net.layers, {"kind": "prod", "M": M, "delta": delta, "m": m})


def matvec_net(m: int, n: int, M: float, delta: float) -> NeuralNet:
    """Approximate A b with A (m x n, row-major) then b (n) as inputs; output length m."""
    if m < 1 or n < 1:
        raise NetworkError("dimensions must be positive")
    P = prod_net(M, delta)
    pairs = parallelize([P] * (m * n))
    rows, cols = [], []
    for i in range(m):
        for j in range(n):
            k = i * n + j
            rows += [2 * k, 2 * k + 1]
            cols += [k, m * n + j]
    route = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(2 * m * n, m * n + n))
    summ = sp.kron(sp.identity(m), np.ones((1, n)), format="csr")
    net = compose(affine_net(summ), affine_precompose(pairs, route))
    return NeuralNet(net.layers, {"kind": "matvec", "m": m, "n": n, "M": M, "delta": delta})
