"""Batch command line: verification suites and experiments, all reported as CSV.

Every command reads a JSON experiment config, writes ``<command>.csv`` (plus
side files) into ``--out`` and exits with status 1 when any row FAILs.

Examples::

    hjbmlp hamiltonian-check --out runs/
    hjbmlp solve --config solve.json --seed 7 --threads 2 --out runs/
    HJBMLP_THREADS=4 hjbmlp freeze --config freeze.json --out runs/

A config is a JSON object with any of the ``ExperimentConfig`` fields; the
problem is a path to a problem file or ``builtin:<name>`` with ``name`` in
p1, heat, cole_hopf, drift_const, clipped_affine, no_gain.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from hjbmlp import hamnet as hn
from hjbmlp import netcalc as nc
from hjbmlp import oracle as orc
from hjbmlp import problem as pb
from hjbmlp.mlp import MlpParams, count_indices, default_threads, freeze_to_net, mlp_estimate

COMMANDS = ("hamiltonian-check", "blocks-check", "solve", "freeze", "scaling", "convergence")
ORACLES = ("none", "cole_hopf", "heat")


class ConfigError(ValueError):
    pass


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(u) for u in v)
    return v


def _listify(v):
    if isinstance(v, tuple):
        return [_listify(u) for u in v]
    return v


@dataclass(frozen=True)
class ExperimentConfig:
    command: str = "solve"
    problem: str = "builtin:p1"
    d: Optional[int] = None
    t: float = 0.0
    points: Optional[tuple] = None
    Q: Optional[tuple] = None  # (lo, hi, n): uniform sample of [lo, hi]^d
    N: int = 2
    M: int = 2
    alpha_time: float = 0.5
    seed: int = 0
    h_mode: str = "exact_HR"
    delta: float = 1e-2
    oracle: str = "none"
    oracle_samples: int = 100_000
    tol: Optional[float] = None
    seeds: int = 20
    N_list: tuple = (1, 2, 3, 4)
    M_list: Optional[tuple] = None
    d_list: tuple = (1, 2, 4, 8, 16)
    families: tuple = ()
    samples: int = 1000
    grid_n: int = 10_000
    corrupt_gamma: float = 1.0
    max_slope: float = 3.0
    timing: bool = False

    def to_dict(self) -> dict:
        return {k: _listify(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**{k: _tuplify(v) for k, v in data.items()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def validate(self, base: Path = Path(".")) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"command must be one of {COMMANDS}")
        if not self.problem.startswith("builtin:") and not (base / self.problem).is_file():
            raise ConfigError(f"problem file not found: {self.problem}")
        if self.Q is not None:
            lo, hi, n = self.Q
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi and int(n) > 0):
                raise ConfigError("Q must be (lo, hi, n) with finite lo < hi and n > 0")
        if self.oracle not in ORACLES:
            raise ConfigError(f"oracle must be one of {ORACLES}")
        if self.M_list is not None and len(self.M_list) != len(self.N_list):
            raise ConfigError("M_list must match N_list in length")

    def mlp_params(self, N=None, M=None, seed=None, h_mode=None) -> MlpParams:
        return MlpParams(self.N if N is None else N, self.M if M is None else M,
                         self.alpha_time, self.seed if seed is None else seed,
                         self.h_mode if h_mode is None else h_mode)


# ---------------------------------------------------------------------------
# helpers


def resolve_problem(cfg: ExperimentConfig, base: Path = Path("."), d: Optional[int] = None):
    d = cfg.d if d is None else d
    if not cfg.problem.startswith("builtin:"):
        return pb.load_problem(base / cfg.problem)
    name = cfg.problem.split(":", 1)[1]
    if name == "p1":
        return pb.p1_problem(d=d or 2)
    if name == "cole_hopf":
        return pb.cole_hopf_problem(d or 10)
    if name == "heat":
        dd = d or 10
        return pb.heat_problem(dd, np.eye(dd)[0])
    fams = pb.builtin_families()
    if name not in fams:
        raise ConfigError(f"unknown builtin problem {name!r}")
    if d is not None and d != fams[name].d:
        raise ConfigError(f"builtin {name!r} has fixed dimension {fams[name].d}")
    return fams[name]


def query_points(cfg: ExperimentConfig, d: int) -> np.ndarray:
    if cfg.points is not None:
        X = np.asarray(cfg.points, dtype=float)
        if X.ndim != 2 or X.shape[1] != d:
            raise ConfigError(f"points must be rows of length d={d}")
        return X
    lo, hi, n = cfg.Q if cfg.Q is not None else (-1.0, 1.0, 16)
    # Q sampling stream is separate from the estimator streams
    rng = np.random.default_rng([cfg.seed, 0x5151])
    return rng.uniform(lo, hi, (int(n), d))


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "PASS" if v else "FAIL"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def _ms(cfg, start):
    return 1000.0 * (time.perf_counter() - start) if cfg.timing else None


def _status(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def _oracle_values(cfg, prob, X):
    if cfg.oracle == "cole_hopf":
        return orc.cole_hopf_value(prob, cfg.t, X, cfg.oracle_samples, seed=cfg.seed + 1)
    if cfg.oracle == "heat":
        return orc.heat_value(prob, cfg.t, X, cfg.oracle_samples, seed=cfg.seed + 1)
    return None


def l2_over_q(err, ref):
    """MC estimate of the L2(Q) error, its relative form and a 95% half-width."""
    n = len(err)
    e2 = np.asarray(err) ** 2
    l2 = math.sqrt(e2.mean())
    hw = 1.96 * e2.std(ddof=1) / (2 * max(l2, 1e-300) * math.sqrt(n)) if n > 1 else float("nan")
    rel = l2 / math.sqrt(np.mean(np.asarray(ref) ** 2))
    return l2, rel, hw


def _hsrc(cfg, prob, R):
    if cfg.h_mode == "exact_HR":
        return R
    pn = hn.build_problem_nets(prob)
    return hn.build_hamiltonian_net(pn, prob, R, cfg.delta), pn.net_psi


# ---------------------------------------------------------------------------
# commands; each returns True when every row passed


def cmd_hamiltonian_check(cfg: ExperimentConfig, out: Path, base=Path("."), threads=1) -> bool:
    fams = pb.builtin_families()
    names = cfg.families or tuple(fams)
    if cfg.problem != "builtin:p1" and not cfg.families:
        fams = {"config": resolve_problem(cfg, base)}
        names = ("config",)
    tol = 1e-4 if cfg.tol is None else cfg.tol
    rows = []
    for name in names:
        prob = fams[name]
        rng = np.random.default_rng([cfg.seed, len(rows)])
        n = cfg.samples
        t = rng.uniform(0, prob.t_f, n)
        X = rng.uniform(-3, 3, (n, prob.d))
        P = rng.uniform(-3, 3, (n, prob.d))
        test = replace(prob, gamma=prob.gamma * cfg.corrupt_gamma) if cfg.corrupt_gamma != 1 else prob
        closed = pb.hamiltonian(test, t, X, P)
        brute = pb.brute_force_hamiltonian(prob, t, X, P, grid_n=cfg.grid_n)
        err = np.abs(closed - brute)
        rows.append((name, n, float(err.max()), tol, _status(bool(err.max() <= tol))))
    write_csv(out / "hamiltonian-check.csv", ["family", "points", "max_abs_err", "tol", "status"], rows)
    return all(r[-1] == "PASS" for r in rows)


def _lipschitz_ratio(net, M, pairs, rng):
    a = rng.uniform(-M, M, (pairs, 2))
    b = a + rng.normal(0, 0.05 * M, (pairs, 2))
    b = np.clip(b, -M, M)
    num = np.abs(net(a).ravel() - net(b).ravel())
    den = np.abs(a - b).sum(axis=1)
    keep = den > 0
    return float(np.max(num[keep] / den[keep]))


def cmd_blocks_check(cfg: ExperimentConfig, out: Path, base=Path("."), threads=1) -> bool:
    rng = np.random.default_rng(cfg.seed)
    rows = []
    # dyadic grid: every intermediate value of the sawtooth net is exact in floating point
    x = np.arange(2**17 + 1) / 2.0**17
    for m in range(1, 9):
        net = nc.sq_net(m)
        err = np.abs(net(x[:, None]).ravel() - x**2)
        bound = 2.0 ** (-2 * m - 2)
        mid = 2.0 ** (-m - 1)
        tight = float(net([[mid]])[0, 0] - mid * mid)
        rows.append(("sq_net", f"m={m}", float(err.max()), bound, _status(bool(err.max() <= bound))))
        rows.append(("sq_net_tightness", f"m={m}", tight, 0.9 * bound, _status(tight >= 0.9 * bound)))
    M, delta = 4.0, cfg.delta if cfg.delta < 1 else 1e-3
    for dl in sorted({1e-3, delta}):
        P = nc.prod_net(M, dl)
        Z = rng.uniform(-M, M, (10_000, 2))
        err = float(np.abs(P(Z).ravel() - Z[:, 0] * Z[:, 1]).max())
        rows.append(("prod_net", f"M={M!r};delta={dl!r}", err, dl, _status(err <= dl)))
        lip = _lipschitz_ratio(P, M, 10_000, rng)
        rows.append(("prod_net_lipschitz", f"M={M!r};delta={dl!r}", lip, 4 * M, _status(lip <= 4 * M)))
    for m, n in ((2, 3), (4, 4)):
        dl = 1e-3
        V = nc.matvec_net(m, n, M, dl)
        Z = rng.uniform(-M, M, (2000, m * n + n))
        ref = np.einsum("kij,kj->ki", Z[:, : m * n].reshape(-1, m, n), Z[:, m * n :])
        err = float(np.abs(V(Z) - ref).max())
        bound = dl * math.sqrt(m) * n
        rows.append(("matvec_net", f"m={m};n={n};delta={dl!r}", err, bound, _status(err <= bound)))
    y = rng.uniform(-10, 10, (10_000, 3))
    C = nc.clip_net(2.5, 3)
    err = float(np.abs(C(y) - np.clip(y, -2.5, 2.5)).max())
    rows.append(("clip_net", "R=2.5", err, 1e-12, _status(err <= 1e-12)))
    lo, hi = np.array([-1.0, 0.5, -3.0]), np.array([1.0, 2.0, -1.0])
    err = float(np.abs(nc.clamp_net(lo, hi)(y) - np.clip(y, lo, hi)).max())
    rows.append(("clamp_net", "box", err, 1e-12, _status(err <= 1e-12)))
    write_csv(out / "blocks-check.csv", ["block", "params", "measured", "bound", "status"], rows)
    return all(r[-1] == "PASS" for r in rows)


def cmd_solve(cfg: ExperimentConfig, out: Path, base=Path("."), threads=1) -> bool:
    prob = resolve_problem(cfg, base)
    X = query_points(cfg, prob.d)
    R = pb.default_truncation(prob)
    hsrc = _hsrc(cfg, prob, R)
    params = cfg.mlp_params()
    start = time.perf_counter()
    est = mlp_estimate(prob, hsrc, params, cfg.t, X, threads=threads)
    wall = _ms(cfg, start)
    ref = _oracle_values(cfg, prob, X)
    d = prob.d
    header = (["t"] + [f"x{i + 1}" for i in range(d)] + ["value"] + [f"grad{i + 1}" for i in range(d)]
              + ["N", "M", "alpha", "seed", "samples", "wall_ms"])
    if ref is not None:
        header += ["oracle", "oracle_value", "oracle_stderr", "abs_err"]
    rows = []
    for k in range(len(X)):
        r = [cfg.t, *X[k], est.value[k], *est.gradient[k], params.N, params.M, params.alpha_time,
             params.seed, est.meta["samples"], wall]
        if ref is not None:
            r += [cfg.oracle, ref.value[k], ref.stderr[k], abs(est.value[k] - ref.value[k])]
        rows.append(r)
    write_csv(out / "solve.csv", header, rows)
    ok = True
    if ref is not None:
        l2, rel, hw = l2_over_q(est.value - ref.value, ref.value)
        ok = cfg.tol is None or rel <= cfg.tol
        write_csv(out / "solve-summary.csv", ["oracle", "points", "l2_err", "l2_halfwidth", "rel_l2_err",
                                             "tol", "status"],
                  [(cfg.oracle, len(X), l2, hw, rel, cfg.tol, _status(ok))])
    return ok


def frozen_size_accounting(net: nc.NeuralNet) -> int:
    """Weight count recomputed from the serialized form."""
    total = 0
    for layer in net.to_dict()["layers"]:
        A = layer["A"]
        if isinstance(A, dict):
            total += int(np.count_nonzero(A["val"]))
        else:
            total += int(np.count_nonzero(np.asarray(A, dtype=float)))
        total += int(np.count_nonzero(layer["b"]))
    return total


def cmd_freeze(cfg: ExperimentConfig, out: Path, base=Path("."), threads=1) -> bool:
    prob = resolve_problem(cfg, base)
    cfg = replace(cfg, h_mode="network")
    R = pb.default_truncation(prob)
    h_net, psi_net = _hsrc(cfg, prob, R)
    params = cfg.mlp_params()
    net = freeze_to_net(prob, (h_net, psi_net), params, cfg.t)
    nc.save_net(net, out / "frozen_net.json")
    X = query_points(cfg, prob.d)
    est = mlp_estimate(prob, (h_net, psi_net), params, cfg.t, X, threads=threads)
    ref = np.column_stack([est.value, est.gradient])
    got = net(X)
    tol = 1e-9 if cfg.tol is None else cfg.tol
    rows = []
    for k in range(len(X)):
        dev = float(np.max(np.abs(got[k] - ref[k])))
        scale = float(np.max(np.abs(ref[k])))
        rel = dev / scale if scale > 0 else dev
        rows.append(("equivalence", k, dev, rel, tol, _status(rel <= tol)))
    recount = frozen_size_accounting(nc.load_net(out / "frozen_net.json"))
    rows.append(("size", net.size, recount, "", "", _status(recount == net.size)))
    budget = count_indices(params.N, params.M) * (h_net.size + psi_net.size)
    rows.append(("size_vs_index_budget", net.size, budget, net.size / budget if budget else "", "", "PASS"))
    write_csv(out / "freeze.csv", ["check", "item", "measured", "reference", "tol", "status"], rows)
    return all(r[-1] == "PASS" for r in rows)


def cmd_scaling(cfg: ExperimentConfig, out: Path, base=Path("."), threads=1) -> bool:
    rows = []
    params = cfg.mlp_params(h_mode="network")
    for d in cfg.d_list:
        prob = resolve_problem(cfg, base, d=d)
        R = pb.default_truncation(prob)
        pn = hn.build_problem_nets(prob)
        h_net = hn.build_hamiltonian_net(pn, prob, R, cfg.delta)
        start = time.perf_counter()
        net = freeze_to_net(prob, (h_net, pn.net_psi), params, cfg.t)
        wall = _ms(cfg, start)
        # network error: frozen sample against the exact-Hamiltonian sample on the same draws
        X = query_points(replace(cfg, Q=cfg.Q or (-1.0, 1.0, 32)), d)
        exact = mlp_estimate(prob, R, replace(params, h_mode="exact_HR"), cfg.t, X, threads=threads)
        err = float(np.max(np.abs(net(X)[:, 0] - exact.value)))
        rows.append([d, h_net.size, pn.net_psi.size, net.size, net.depth, err, wall])
    ds = np.log([r[0] for r in rows])
    sizes = np.log([r[3] for r in rows])
    slope = float(np.polyfit(ds, sizes, 1)[0]) if len(rows) > 1 else float("nan")
    ok = math.isfinite(slope) and slope <= cfg.max_slope
    write_csv(out / "scaling.csv", ["d", "hamiltonian_size", "psi_size", "frozen_size", "frozen_depth",
                                     "value_err_vs_exact", "wall_ms"], rows)
    write_csv(out / "scaling-fit.csv", ["loglog_slope", "max_slope", "status"],
              [(slope, cfg.max_slope, _status(ok))])
    return ok


def cmd_convergence(cfg: ExperimentConfig, out: Path, base=Path("."), threads=1) -> bool:
    prob = resolve_problem(cfg, base)
    if cfg.oracle == "none":
        raise ConfigError("convergence needs an oracle")
    X = query_points(cfg, prob.d)
    ref = _oracle_values(cfg, prob, X)
    R = pb.default_truncation(prob)
    hsrc = _hsrc(cfg, prob, R)
    Ms = cfg.M_list or tuple(max(1, math.floor(N**cfg.alpha_time)) for N in cfg.N_list)
    rows = []
    for N, M in zip(cfg.N_list, Ms):
        errs = []
        for s in range(cfg.seeds):
            est = mlp_estimate(prob, hsrc, cfg.mlp_params(N=N, M=M, seed=cfg.seed + s), cfg.t, X,
                               threads=threads)
            errs.append(float(np.mean(np.abs(est.value - ref.value))))
        errs = np.asarray(errs)
        se = float(errs.std(ddof=1) / math.sqrt(len(errs))) if len(errs) > 1 else float("nan")
        rows.append([N, M, cfg.seeds, float(errs.mean()), se])
    means = [r[3] for r in rows]
    Ns = list(cfg.N_list)
    first = Ns.index(2) if 2 in Ns else 0
    ok = bool(means[-1] <= means[first])
    trend = all(b <= a for a, b in zip(means, means[1:]))
    for r in rows:
        r.append("")
    summary = [["monotone_trend", "", "", "", "", "INFO" if trend else "INFO:non-monotone"],
               [f"N{Ns[-1]}_vs_N{Ns[first]}", "", "", means[-1] - means[first], "", _status(ok)]]
    write_csv(out / "convergence.csv", ["N", "M", "seeds", "mean_abs_err", "stderr", "status"],
              rows + summary)
    return ok


RUNNERS = {
    "hamiltonian-check": cmd_hamiltonian_check,
    "blocks-check": cmd_blocks_check,
    "solve": cmd_solve,
    "freeze": cmd_freeze,
    "scaling": cmd_scaling,
    "convergence": cmd_convergence,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hjbmlp", description=__doc__.split("\n\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter,
                                 epilog=__doc__.split("\n\n", 1)[1])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path, help="JSON experiment config")
    ap.add_argument("--seed", type=int, help="master seed (unsigned 64-bit), overrides the config")
    ap.add_argument("--out", type=Path, default=Path("."), help="output directory")
    ap.add_argument("--threads", type=int, default=None,
                    help="worker threads (default: $HJBMLP_THREADS or 1)")
    ap.add_argument("--timing", action="store_true", help="fill wall_ms columns (breaks byte determinism)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    base = Path(".")
    if args.config is not None:
        cfg = ExperimentConfig.from_json(args.config.read_text())
        base = args.config.parent
    else:
        cfg = ExperimentConfig()
    cfg = replace(cfg, command=args.command)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.timing:
        cfg = replace(cfg, timing=True)
    threads = default_threads() if args.threads is None else max(1, args.threads)
    try:
        cfg.validate(base)
        args.out.mkdir(parents=True, exist_ok=True)
        ok = RUNNERS[cfg.command](cfg, args.out, base, threads)
    except (ConfigError, pb.ProblemError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{cfg.command}: {'PASS' if ok else 'FAIL'} ({args.out / (cfg.command + '.csv')})")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
