"""HJB problem instances with control-affine dynamics and quadratic control cost.

The Hamiltonian of such a problem is available in closed form: the control
objective separates across control coordinates, so the minimiser is the
unconstrained stationary point clamped to the box.  Everything here is
vectorised over a leading batch axis; single points are accepted too.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

__all__ = [
    "BoundConstants",
    "Component",
    "ConstantsRequiredError",
    "ControlProblem",
    "ProblemError",
    "TruncationLevel",
    "bspline",
    "bspline_deriv",
    "brute_force_hamiltonian",
    "builtin_families",
    "clip",
    "cole_hopf_problem",
    "default_truncation",
    "gradient_bound",
    "hamiltonian",
    "hamiltonian_lipschitz_estimate",
    "heat_problem",
    "load_problem",
    "optimal_control",
    "p1_problem",
    "save_problem",
    "truncated_hamiltonian",
]


class ProblemError(ValueError):
    """Contract violation on problem data or evaluation arguments."""


class ConstantsRequiredError(ProblemError):
    """A bound needs suprema/Lipschitz constants that were not supplied."""


# ---------------------------------------------------------------------------
# cubic B-spline used by the built-in terminal costs


def bspline(x):
    """Centered cubic B-spline, supported on [-2, 2], maximum 2/3 at 0."""
    ax = np.abs(np.asarray(x, dtype=float))
    inner = 2.0 / 3.0 - ax**2 + 0.5 * ax**3
    outer = (2.0 - ax) ** 3 / 6.0
    return np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))


def bspline_deriv(x):
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    inner = -2.0 * x + 1.5 * x * ax
    outer = -np.sign(x) * (2.0 - ax) ** 2 / 2.0
    return np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))


# ---------------------------------------------------------------------------
# component functions


def _as_batch(t, x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[-1] != d:
        raise ProblemError(f"state has length {X.shape[-1]}, expected d={d}")
    T = np.broadcast_to(np.asarray(t, dtype=float), (X.shape[0],))
    return T, X, single


@dataclass(frozen=True)
class Component:
    """One of f1, f2, lbar or psi, described by a kind and its parameters.

    role is one of ``"f1"``, ``"f2"``, ``"lbar"``, ``"psi"``; dims are (d, dbar).
    Calling the component evaluates it on a batch: ``f1(t, X) -> (n, d)``,
    ``f2(t, X) -> (n, d, dbar)``, ``lbar(t, X) -> (n,)``, ``psi(X) -> (n,)``.
    """

    role: str
    kind: str
    params: dict
    d: int
    dbar: int

    _KINDS = {
        "f1": ("zero", "constant", "clipped_linear", "affine"),
        "f2": ("zero", "constant", "identity"),
        "lbar": ("zero", "constant", "clipped_linear", "affine"),
        "psi": ("zero", "constant", "linear", "bspline"),
    }

    def __post_init__(self):
        if self.role not in self._KINDS:
            raise ProblemError(f"unknown component role {self.role!r}")
        if self.kind not in self._KINDS[self.role]:
            raise ProblemError(
                f"{self.role}: unknown kind {self.kind!r}; choose from {self._KINDS[self.role]}"
            )
        if self.role == "f2" and self.kind == "identity" and self.d != self.dbar:
            raise ProblemError("f2 kind 'identity' needs d == dbar")
        self._check_shapes()

    def _arr(self, key, shape=None):
        a = np.asarray(self.params[key], dtype=float)
        if shape is not None and a.shape != shape:
            raise ProblemError(f"{self.role}.{key} has shape {a.shape}, expected {shape}")
        return a

    def _check_shapes(self):
        d, db = self.d, self.dbar
        k, r = self.kind, self.role
        if r == "f1":
            if k in ("constant", "clipped_linear", "affine"):
                self._arr("c", (d,))
            if k in ("clipped_linear", "affine"):
                self._arr("A", (d, d))
        elif r == "f2" and k == "constant":
            self._arr("B", (d, db))
        elif r == "lbar":
            if k in ("constant", "clipped_linear", "affine"):
                self._arr("c", ())
            if k in ("clipped_linear", "affine"):
                self._arr("w", (d,))
        elif r == "psi":
            if k == "linear":
                self._arr("g", (d,))
            if k == "constant":
                self._arr("c", ())
        if k == "clipped_linear" and float(self.params["r"]) <= 0:
            raise ProblemError(f"{r}.r must be positive")

    def __call__(self, *args):
        if self.role == "psi":
            (x,) = args
            return self._eval_psi(np.atleast_2d(np.asarray(x, dtype=float)))
        t, x = args
        T, X, _ = _as_batch(t, x, self.d)
        n = X.shape[0]
        k = self.kind
        if self.role == "f1":
            if k == "zero":
                return np.zeros((n, self.d))
            c = self._arr("c")
            if k == "constant":
                return np.broadcast_to(c, (n, self.d)).copy()
            A = self._arr("A")
            y = np.clip(X, -self.params["r"], self.params["r"]) if k == "clipped_linear" else X
            return c + y @ A.T
        if self.role == "f2":
            if k == "zero":
                return np.zeros((n, self.d, self.dbar))
            B = np.eye(self.d) if k == "identity" else self._arr("B")
            return np.broadcast_to(B, (n, self.d, self.dbar)).copy()
        # lbar
        if k == "zero":
            return np.zeros(n)
        c = float(self.params["c"])
        if k == "constant":
            return np.full(n, c)
        w = self._arr("w")
        y = np.clip(X, -self.params["r"], self.params["r"]) if k == "clipped_linear" else X
        return c + y @ w

    def _eval_psi(self, X):
        if X.shape[-1] != self.d:
            raise ProblemError(f"state has length {X.shape[-1]}, expected d={self.d}")
        k = self.kind
        if k == "zero":
            return np.zeros(X.shape[0])
        if k == "constant":
            return np.full(X.shape[0], float(self.params["c"]))
        if k == "linear":
            return X @ self._arr("g") + float(self.params.get("c0", 0.0))
        scale = float(self.params.get("scale", 1.0))
        return scale / self.d * bspline(X).sum(axis=1)

    def grad(self, x):
        """Gradient of psi on a batch, shape (n, d)."""
        if self.role != "psi":
            raise ProblemError("grad is only defined for psi")
        X = np.atleast_2d(np.asarray(x, dtype=float))
        k = self.kind
        if k in ("zero", "constant"):
            return np.zeros_like(X)
        if k == "linear":
            return np.broadcast_to(self._arr("g"), X.shape).copy()
        return float(self.params.get("scale", 1.0)) / self.d * bspline_deriv(X)

    def to_dict(self):
        return {"kind": self.kind, "params": _jsonable(self.params)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# bound constants


@dataclass(frozen=True)
class BoundConstants:
    """Suprema and Lipschitz constants of the problem data.

    Norm conventions: ``_l1``/``_inf`` suffixes name the vector norm used,
    unsuffixed state-space quantities are Euclidean.  Matrix ``sup_f2`` is the
    spectral norm; ``sup_f2_l1`` is the entrywise 1-norm, ``sup_f2_colsum``
    the largest column 1-norm and ``sup_f2_inf`` the largest entry.
    """

    sup_psi: Optional[float] = None
    sup_grad_psi: Optional[float] = None
    lip_psi_l1: Optional[float] = None
    sup_f1: Optional[float] = None
    sup_f1_l1: Optional[float] = None
    sup_f1_inf: Optional[float] = None
    lip_f1: Optional[float] = None
    sup_dx_f1: Optional[float] = None
    sup_f2: Optional[float] = None
    sup_f2_l1: Optional[float] = None
    sup_f2_inf: Optional[float] = None
    sup_f2_colsum: Optional[float] = None
    sup_f2_rowsum: Optional[float] = None
    lip_f2: Optional[float] = None
    sup_dx_f2: Optional[float] = None
    sup_lbar: Optional[float] = None
    sup_abs_lbar: Optional[float] = None
    sup_grad_lbar: Optional[float] = None
    sup_grad_lbar_inf: Optional[float] = None

    def require(self, *names):
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ConstantsRequiredError("constants required: " + ", ".join(missing))
        return [float(getattr(self, n)) for n in names]

    def merged(self, overrides):
        known = {f.name for f in fields(self)}
        bad = set(overrides) - known
        if bad:
            raise ProblemError(f"unknown bound constants: {sorted(bad)}")
        vals = asdict(self)
        vals.update({k: (None if v is None else float(v)) for k, v in overrides.items()})
        return BoundConstants(**vals)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def _derive_constants(f1, f2, lbar, psi) -> BoundConstants:
    """Constants for built-in component kinds; unbounded kinds leave gaps."""
    c = {}
    d = f1.d
    if f1.kind == "zero":
        c.update(sup_f1=0.0, sup_f1_l1=0.0, sup_f1_inf=0.0, lip_f1=0.0, sup_dx_f1=0.0)
    elif f1.kind == "constant":
        v = f1._arr("c")
        c.update(sup_f1=float(np.linalg.norm(v)), sup_f1_l1=float(np.abs(v).sum()),
                 sup_f1_inf=float(np.abs(v).max()), lip_f1=0.0, sup_dx_f1=0.0)
    else:
        v, A = f1._arr("c"), f1._arr("A")
        c.update(lip_f1=float(np.linalg.norm(A, 2)),
                 sup_dx_f1=float(np.linalg.norm(A, axis=0).max()))
        if f1.kind == "clipped_linear":
            r = float(f1.params["r"])
            c.update(sup_f1=float(np.linalg.norm(v) + r * np.linalg.norm(A, axis=0).sum()),
                     sup_f1_l1=float(np.abs(v).sum() + r * np.abs(A).sum()),
                     sup_f1_inf=float((np.abs(v) + r * np.abs(A).sum(axis=1)).max()))

    if f2.kind == "zero":
        B = np.zeros((d, f2.dbar))
    elif f2.kind == "identity":
        B = np.eye(d)
    else:
        B = f2._arr("B")
    c.update(sup_f2=float(np.linalg.norm(B, 2)) if B.size else 0.0,
             sup_f2_l1=float(np.abs(B).sum()), sup_f2_inf=float(np.abs(B).max(initial=0.0)),
             sup_f2_colsum=float(np.abs(B).sum(axis=0).max(initial=0.0)),
             sup_f2_rowsum=float(np.abs(B).sum(axis=1).max(initial=0.0)),
             lip_f2=0.0, sup_dx_f2=0.0)

    if lbar.kind == "zero":
        c.update(sup_lbar=0.0, sup_abs_lbar=0.0, sup_grad_lbar=0.0, sup_grad_lbar_inf=0.0)
    elif lbar.kind == "constant":
        v = float(lbar.params["c"])
        c.update(sup_lbar=v, sup_abs_lbar=abs(v), sup_grad_lbar=0.0, sup_grad_lbar_inf=0.0)
    else:
        v, w = float(lbar.params["c"]), lbar._arr("w")
        c.update(sup_grad_lbar=float(np.linalg.norm(w)), sup_grad_lbar_inf=float(np.abs(w).max()))
        if lbar.kind == "clipped_linear":
            r = float(lbar.params["r"])
            c.update(sup_lbar=v + r * float(np.abs(w).sum()),
                     sup_abs_lbar=abs(v) + r * float(np.abs(w).sum()))

    if psi.kind == "zero":
        c.update(sup_psi=0.0, sup_grad_psi=0.0, lip_psi_l1=0.0)
    elif psi.kind == "constant":
        c.update(sup_psi=abs(float(psi.params["c"])), sup_grad_psi=0.0, lip_psi_l1=0.0)
    elif psi.kind == "linear":
        g = psi._arr("g")
        c.update(sup_grad_psi=float(np.linalg.norm(g)), lip_psi_l1=float(np.abs(g).max()))
    else:
        s = abs(float(psi.params.get("scale", 1.0)))
        # max |B| = 2/3 at 0, max |B'| = 2/3 at |x| = 2/3
        c.update(sup_psi=s * 2.0 / 3.0, sup_grad_psi=2.0 * s / (3.0 * math.sqrt(d)),
                 lip_psi_l1=2.0 * s / (3.0 * d))
    return BoundConstants(**c)


# ---------------------------------------------------------------------------
# the problem


@dataclass(frozen=True)
class TruncationLevel:
    R: float
    source: str = "user"

    def __post_init__(self):
        if not (self.R > 0 and math.isfinite(self.R)):
            raise ProblemError(f"truncation level must be positive and finite, got {self.R}")


def _R(R) -> float:
    return float(R.R) if isinstance(R, TruncationLevel) else float(R)


@dataclass(frozen=True)
class ControlProblem:
    d: int
    dbar: int
    gamma: float
    box_lo: np.ndarray
    box_hi: np.ndarray
    t_f: float
    f1: Callable
    f2: Callable
    lbar: Callable
    psi: Callable
    growth_q: float = 1.0
    bound_constants: Optional[BoundConstants] = None
    psi_grad: Optional[Callable] = None
    R_override: Optional[float] = None
    family: str = "custom"

    def __post_init__(self):
        lo = np.asarray(self.box_lo, dtype=float).reshape(-1)
        hi = np.asarray(self.box_hi, dtype=float).reshape(-1)
        object.__setattr__(self, "box_lo", lo)
        object.__setattr__(self, "box_hi", hi)
        if self.d < 1 or self.dbar < 1:
            raise ProblemError("d and dbar must be positive")
        if lo.shape != (self.dbar,) or hi.shape != (self.dbar,):
            raise ProblemError(f"box bounds must have length dbar={self.dbar}")
        if not np.all(lo < hi):
            raise ProblemError("box needs a_i < b_i for every coordinate")
        if not (self.gamma > 0 and self.t_f > 0):
            raise ProblemError("gamma and t_f must be positive")
        if self.growth_q < 1:
            raise ProblemError("growth exponent q must be >= 1")
        if self.psi_grad is None and isinstance(self.psi, Component):
            object.__setattr__(self, "psi_grad", self.psi.grad)

    @property
    def components(self) -> Optional[dict]:
        parts = {"f1": self.f1, "f2": self.f2, "lbar": self.lbar, "psi": self.psi}
        if all(isinstance(v, Component) for v in parts.values()):
            return parts
        return None

    @classmethod
    def from_components(cls, *, d, dbar, gamma, a, b, t_f, f1, f2, lbar, psi, q=1.0,
                        R_override=None, bound_constants=None, family="custom"):
        """Build a problem from ``{kind, params}`` records of the built-in kinds."""
        comps = {
            role: Component(role, spec.get("kind", "zero"), dict(spec.get("params", {})), d, dbar)
            for role, spec in (("f1", f1), ("f2", f2), ("lbar", lbar), ("psi", psi))
        }
        consts = _derive_constants(comps["f1"], comps["f2"], comps["lbar"], comps["psi"])
        if bound_constants:
            consts = consts.merged(bound_constants)
        return cls(d=d, dbar=dbar, gamma=float(gamma), box_lo=a, box_hi=b, t_f=float(t_f),
                   growth_q=float(q), bound_constants=consts, R_override=R_override,
                   family=family, **comps)

    def to_dict(self) -> dict:
        comps = self.components
        if comps is None:
            raise ProblemError("only problems built from component records can be serialized")
        out = {
            "family": self.family,
            "d": self.d,
            "dbar": self.dbar,
            "gamma": self.gamma,
            "a": self.box_lo.tolist(),
            "b": self.box_hi.tolist(),
            "t_f": self.t_f,
            "q": self.growth_q,
        }
        for role in ("psi", "f1", "f2", "lbar"):
            out[role] = comps[role].to_dict()
        if self.R_override is not None:
            out["R_override"] = self.R_override
        derived = _derive_constants(comps["f1"], comps["f2"], comps["lbar"], comps["psi"])
        extra = {k: v for k, v in (self.bound_constants or BoundConstants()).to_dict().items()
                 if getattr(derived, k) != v}
        if extra:
            out["bound_constants"] = extra
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ControlProblem":
        required = ("d", "dbar", "gamma", "a", "b", "t_f", "psi")
        missing = [k for k in required if k not in data]
        if missing:
            raise ProblemError(f"problem file lacks fields: {missing}")
        zero = {"kind": "zero", "params": {}}
        return cls.from_components(
            d=int(data["d"]), dbar=int(data["dbar"]), gamma=data["gamma"],
            a=data["a"], b=data["b"], t_f=data["t_f"], q=data.get("q", 1.0),
            f1=data.get("f1", zero), f2=data.get("f2", zero), lbar=data.get("lbar", zero),
            psi=data["psi"], R_override=data.get("R_override"),
            bound_constants=data.get("bound_constants"), family=data.get("family", "custom"),
        )


def load_problem(path) -> ControlProblem:
    return ControlProblem.from_dict(json.loads(Path(path).read_text()))


def save_problem(prob: ControlProblem, path) -> None:
    Path(path).write_text(json.dumps(prob.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# closed-form evaluation


def _prepare(prob, t, x, p):
    T, X, single = _as_batch(t, x, prob.d)
    P = np.atleast_2d(np.asarray(p, dtype=float))
    if P.shape[-1] != prob.d:
        raise ProblemError(f"costate has length {P.shape[-1]}, expected d={prob.d}")
    if P.shape[0] != X.shape[0]:
        if X.shape[0] == 1:
            X = np.broadcast_to(X, P.shape)
            T = np.broadcast_to(T[:1], (P.shape[0],))
        elif P.shape[0] == 1:
            P = np.broadcast_to(P, X.shape)
        else:
            raise ProblemError("batch sizes of x and p differ")
    single = single and np.asarray(p).ndim == 1
    for name, arr in (("t", T), ("x", X), ("p", P)):
        if not np.all(np.isfinite(arr)):
            raise ProblemError(f"non-finite entries in {name}")
    if np.any(T < 0) or np.any(T > prob.t_f):
        raise ProblemError(f"time outside [0, {prob.t_f}]")
    return T, X, P, single


def _control(prob, F2, P):
    w = np.einsum("nij,ni->nj", F2, P)
    return w, np.clip(-w / (2.0 * prob.gamma), prob.box_lo, prob.box_hi)


def optimal_control(prob: ControlProblem, t, x, p):
    """Pointwise minimiser of p.f(t,x,v) + L(t,x,v) over the box."""
    T, X, P, single = _prepare(prob, t, x, p)
    _, u = _control(prob, prob.f2(T, X), P)
    return u[0] if single else u


def hamiltonian(prob: ControlProblem, t, x, p):
    T, X, P, single = _prepare(prob, t, x, p)
    F1, F2 = prob.f1(T, X), prob.f2(T, X)
    w, u = _control(prob, F2, P)
    H = (P * F1).sum(axis=1) + (w * u).sum(axis=1) + prob.lbar(T, X) + prob.gamma * (u * u).sum(axis=1)
    return float(H[0]) if single else H


def clip(p, R):
    """Componentwise truncation of p to [-R, R]."""
    R = _R(R)
    if R <= 0:
        raise ProblemError("R must be positive")
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ProblemError("non-finite entries in p")
    return np.clip(p, -R, R)


def truncated_hamiltonian(prob: ControlProblem, R, t, x, p):
    return hamiltonian(prob, t, x, clip(p, R))


def brute_force_hamiltonian(prob: ControlProblem, t, x, p, grid_n: int = 10_000):
    """Grid minimisation of the control objective, one coordinate at a time."""
    if grid_n < 2:
        raise ProblemError("grid_n must be at least 2")
    T, X, P, single = _prepare(prob, t, x, p)
    F1, F2 = prob.f1(T, X), prob.f2(T, X)
    w = np.einsum("nij,ni->nj", F2, P)
    base = (P * F1).sum(axis=1) + prob.lbar(T, X)
    total = base.copy()
    for j in range(prob.dbar):
        v = np.linspace(prob.box_lo[j], prob.box_hi[j], grid_n)
        obj = w[:, j : j + 1] * v[None, :] + prob.gamma * v[None, :] ** 2
        total += obj.min(axis=1)
    return float(total[0]) if single else total


# ---------------------------------------------------------------------------
# a-priori bounds


def _box_norms(prob):
    a, b = prob.box_lo, prob.box_hi
    ab2 = max(np.linalg.norm(a), np.linalg.norm(b))
    abinf = max(np.abs(a).max(), np.abs(b).max())
    return float(ab2), float(abinf)


def value_bound_formula(bc: BoundConstants, gamma, t_f, ab2) -> float:
    c0, sup_psi, sup_lbar = bc.require("sup_f1", "sup_psi", "sup_lbar")
    return math.exp(c0 * t_f) * (sup_psi + t_f * (sup_lbar + gamma * ab2**2))


def gradient_bound_formula(bc: BoundConstants, gamma, t_f, ab2, abinf) -> float:
    """sup ||grad V||_2 bound from raw constants and box norms.

    The |V| bound enters only through the f2 coupling term, so its
    constants are demanded only when that term is nonzero.
    """
    sup_f1, sup_f2, lip_f1, lip_f2, g0, sup_abs_lbar, sup_grad_lbar = bc.require(
        "sup_f1", "sup_f2", "lip_f1", "lip_f2", "sup_grad_psi", "sup_abs_lbar", "sup_grad_lbar"
    )
    c1 = 0.25 + sup_f1 + sup_f2 * abinf + lip_f1
    coupling = sup_f2 + lip_f2
    v_term = t_f * value_bound_formula(bc, gamma, t_f, ab2) * coupling if coupling > 0 else 0.0
    inner = g0 + v_term + t_f * (sup_abs_lbar + sup_grad_lbar) + t_f * gamma * ab2**2 * abinf
    return math.exp(c1 * t_f) * inner


def value_bound(prob: ControlProblem) -> float:
    """Upper bound on sup |V| over [0, t_f] x R^d."""
    ab2, _ = _box_norms(prob)
    return value_bound_formula(prob.bound_constants or BoundConstants(), prob.gamma, prob.t_f, ab2)


def gradient_bound(prob: ControlProblem) -> TruncationLevel:
    """Truncation level from the a-priori bound on sup ||grad V||_2."""
    ab2, abinf = _box_norms(prob)
    R = gradient_bound_formula(prob.bound_constants or BoundConstants(), prob.gamma, prob.t_f, ab2, abinf)
    return TruncationLevel(R, source="gradient_bound")


def default_truncation(prob: ControlProblem) -> TruncationLevel:
    if prob.R_override is not None:
        return TruncationLevel(float(prob.R_override), source="override")
    return gradient_bound(prob)


def hamiltonian_lipschitz_estimate(prob: ControlProblem, R) -> tuple[float, float]:
    """(Cx, Cp): Lipschitz bounds of H_R in x (1-norm) and p (max-norm)."""
    R = _R(R)
    bc = prob.bound_constants or BoundConstants()
    dx_f1, dx_f2, sup_f2, grad_l_inf, f1_l1, f2_l1 = bc.require(
        "sup_dx_f1", "sup_dx_f2", "sup_f2", "sup_grad_lbar_inf", "sup_f1_l1", "sup_f2_l1"
    )
    ab2, abinf = _box_norms(prob)
    g = prob.gamma
    pn = math.sqrt(prob.d) * R
    Cx = (pn * (dx_f1 + dx_f2 * (ab2 + sup_f2 * pn / (2 * g)))
          + grad_l_inf + dx_f2 * pn / (2 * g) * ab2)
    Cp = f1_l1 + f2_l1 * abinf * (1.0 + 1.0 / (2 * g) + 0.5)
    return float(Cx), float(Cp)


# ---------------------------------------------------------------------------
# built-in families


def p1_problem(lbar=None, box=1.0, psi=None, d=2) -> ControlProblem:
    """f1 = 0, f2 = I, gamma = 1/2, box [-box, box]^d."""
    return ControlProblem.from_components(
        d=d, dbar=d, gamma=0.5, a=[-box] * d, b=[box] * d, t_f=1.0,
        f1={"kind": "zero"}, f2={"kind": "identity"},
        lbar=lbar or {"kind": "zero"},
        psi=psi or {"kind": "bspline", "params": {"scale": 1.0}},
        family="p1",
    )


def heat_problem(d: int, g, t_f=1.0) -> ControlProblem:
    """H = 0: no drift, no gain, no running cost, box containing 0; psi(x) = g.x."""
    return ControlProblem.from_components(
        d=d, dbar=1, gamma=0.5, a=[-1.0], b=[1.0], t_f=t_f,
        f1={"kind": "zero"}, f2={"kind": "zero"}, lbar={"kind": "zero"},
        psi={"kind": "linear", "params": {"g": list(np.asarray(g, dtype=float))}},
        family="heat",
    )


def cole_hopf_problem(d: int, gamma=0.5, box=4.0, scale=1.0, t_f=1.0) -> ControlProblem:
    """f1 = 0, f2 = I, lbar = 0, B-spline psi.

    R is set to sup ||grad psi||_2: the value gradient is an average of
    terminal gradients whenever the clamp never activates, which the
    oracle validity check confirms.
    """
    prob = ControlProblem.from_components(
        d=d, dbar=d, gamma=gamma, a=[-box] * d, b=[box] * d, t_f=t_f,
        f1={"kind": "zero"}, f2={"kind": "identity"}, lbar={"kind": "zero"},
        psi={"kind": "bspline", "params": {"scale": scale}}, family="cole_hopf",
    )
    R = prob.bound_constants.sup_grad_psi
    return ControlProblem.from_dict({**prob.to_dict(), "R_override": R})


def builtin_families() -> dict[str, ControlProblem]:
    """Five fixed instances covering every component kind used by the checks."""
    rng = np.random.default_rng(20240601)
    d3 = 3
    return {
        "p1": p1_problem(),
        "drift_const": ControlProblem.from_components(
            d=d3, dbar=2, gamma=0.8, a=[-1.0, 0.5], b=[2.0, 1.5], t_f=1.0,
            f1={"kind": "constant", "params": {"c": [0.3, -0.2, 0.1]}},
            f2={"kind": "constant", "params": {"B": rng.uniform(-1, 1, (d3, 2)).round(3).tolist()}},
            lbar={"kind": "constant", "params": {"c": 0.25}},
            psi={"kind": "bspline", "params": {"scale": 2.0}}, family="drift_const",
        ),
        "clipped_affine": ControlProblem.from_components(
            d=d3, dbar=3, gamma=0.3, a=[-0.5, -2.0, 0.1], b=[0.5, 1.0, 0.9], t_f=0.5,
            f1={"kind": "clipped_linear",
                "params": {"c": [0.1, 0.0, -0.1], "A": rng.uniform(-0.5, 0.5, (d3, d3)).round(3).tolist(), "r": 2.0}},
            f2={"kind": "constant", "params": {"B": rng.uniform(-1, 1, (d3, 3)).round(3).tolist()}},
            lbar={"kind": "clipped_linear", "params": {"c": 0.5, "w": [0.2, -0.1, 0.3], "r": 1.5}},
            psi={"kind": "bspline", "params": {"scale": 1.0}}, family="clipped_affine",
        ),
        "no_gain": ControlProblem.from_components(
            d=2, dbar=2, gamma=1.0, a=[-1.0, -1.0], b=[1.0, 1.0], t_f=1.0,
            f1={"kind": "constant", "params": {"c": [0.5, -0.5]}}, f2={"kind": "zero"},
            lbar={"kind": "zero"}, psi={"kind": "bspline", "params": {"scale": 1.0}},
            family="no_gain",
        ),
        "cole_hopf": cole_hopf_problem(4),
    }
