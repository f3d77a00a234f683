"""Feedforward network specification, structural checks, routing algebra,
asymptotic rate ratios, relabeling and equivalence classes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .gp_models import RVIndexError, VarianceFunction, estimate_rv_index

_ROW_TOL = 1e-12


@dataclass(frozen=True)
class RateSpec:
    coeff: float
    exponent: float

    def __post_init__(self):
        if not self.coeff > 0:
            raise ValueError("rate coefficient must be positive")

    def __call__(self, u):
        return self.coeff * np.power(u, self.exponent)


@dataclass(frozen=True)
class NetworkSpec:
    P: np.ndarray
    rates: tuple[RateSpec, ...]
    regime: str = "light"

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("P must be a square matrix")
        if len(self.rates) != P.shape[0]:
            raise ValueError("one rate per node required")
        if self.regime not in ("light", "heavy"):
            raise ValueError(f"unknown regime {self.regime!r}")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "rates", tuple(self.rates))

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def r(self, u: float) -> np.ndarray:
        return np.array([rs(u) for rs in self.rates], dtype=float)

    @classmethod
    def from_triplets(cls, n: int, triplets, rates, regime: str = "light") -> "NetworkSpec":
        """Build from 1-based (i, j, p) triplets and (coeff, exponent) pairs."""
        P = np.zeros((n, n))
        for i, j, p in triplets:
            P[int(i) - 1, int(j) - 1] = float(p)
        return cls(P, tuple(RateSpec(float(c), float(e)) for c, e in rates), regime)


def validate_topology(P) -> list[str]:
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        return ["routing matrix is not square"]
    n = P.shape[0]
    out = []
    lower = np.tril(P)
    if np.any(lower != 0):
        i, j = np.argwhere(lower != 0)[0]
        out.append(f"not strictly upper-triangular: p[{i + 1},{j + 1}]={P[i, j]:g}")
    if np.any((P < 0) | (P > 1)) or not np.all(np.isfinite(P)):
        out.append("entries outside [0, 1]")
    for j in range(1, n):
        npos = int(np.sum(P[:, j] > 0))
        if npos != 1:
            out.append(f"column {j + 1} has {npos} positive entries (exactly one required)")
    rs = P.sum(axis=1)
    for i in np.nonzero(rs > 1 + _ROW_TOL)[0]:
        out.append(f"row {i + 1} sums to {rs[i]:g} > 1")
    return out


def compute_C(P) -> np.ndarray:
    """First column of (I - P^T)^{-1} by forward substitution."""
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    C = np.zeros(n)
    C[0] = 1.0
    for i in range(1, n):
        C[i] = P[:i, i] @ C[:i]
    return C


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class AssumptionReport:
    checks: list[Check] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    rv_indices: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append(Check(name, bool(passed), detail))

    def lines(self) -> list[str]:
        out = [f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}" for c in self.checks]
        out += [f"[WARN] {w}" for w in self.warnings]
        return out

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
            "warnings": list(self.warnings),
            "rv_indices": dict(self.rv_indices),
        }


@dataclass(frozen=True)
class RLimits:
    r: np.ndarray

    @property
    def n(self) -> int:
        return self.r.shape[0]


class RelabelRequired(ValueError):
    pass


def compute_r_limits(spec: NetworkSpec) -> RLimits:
    n = spec.n
    r = np.zeros((n, n))
    for i in range(n):
        ri = spec.rates[i]
        for j in range(i, n):
            rj = spec.rates[j]
            if rj.exponent < ri.exponent:
                v = 0.0
            elif rj.exponent == ri.exponent:
                v = rj.coeff / ri.coeff
            else:
                v = np.inf
            if v > 1.0:
                raise RelabelRequired(
                    f"r-limit for nodes ({i + 1},{j + 1}) is {v:g} > 1; relabel the nodes by decreasing rate")
            r[i, j] = v
    return RLimits(r)


def _n1_asymptotic(p: float, ri: RateSpec, rj: RateSpec) -> bool:
    if ri.exponent != rj.exponent:
        return ri.exponent > rj.exponent
    return p * ri.coeff > rj.coeff


def check_assumptions(spec: NetworkSpec, vf: VarianceFunction | None = None,
                      u_probe: Sequence[float] = (10.0, 100.0, 1000.0)) -> AssumptionReport:
    rep = AssumptionReport()
    viol = validate_topology(spec.P)
    rep.add("topology", not viol, "; ".join(viol) if viol else "feedforward, one upstream node per column")

    sign_ok = all((r.exponent > 0) if spec.regime == "light" else (r.exponent < 0) for r in spec.rates)
    rep.add("regime", sign_ok,
            f"rate exponents {'positive' if spec.regime == 'light' else 'negative'} "
            f"as required by {spec.regime} traffic"
            if sign_ok else f"rate exponent signs inconsistent with {spec.regime} traffic")

    n1_fail = []
    for i, j in np.argwhere(spec.P > 0):
        p = spec.P[i, j]
        ri, rj = spec.rates[i], spec.rates[j]
        if not _n1_asymptotic(p, ri, rj):
            n1_fail.append(f"p[{i + 1},{j + 1}] r_{i + 1}(u) <= r_{j + 1}(u) asymptotically")
        for u in u_probe:
            if not p * ri(u) > rj(u):
                n1_fail.append(f"p[{i + 1},{j + 1}] r_{i + 1}({u:g}) <= r_{j + 1}({u:g})")
    rep.add("N1", not n1_fail, "; ".join(n1_fail) if n1_fail else "every served node drains faster than its inflow")
    rep.add("N2", all(r.coeff > 0 for r in spec.rates), "rates positive, centered input")
    try:
        compute_r_limits(spec)
        rep.add("N3", True, "rate-ratio limits exist in [0,1]")
    except RelabelRequired as exc:
        rep.add("N3", False, str(exc))

    if vf is not None:
        _check_sigma(rep, vf, spec.regime)
    return rep


def _check_sigma(rep: AssumptionReport, vf: VarianceFunction, regime: str) -> None:
    est = {}
    for end in ("zero", "infinity"):
        try:
            est[end] = estimate_rv_index(vf, end)
        except RVIndexError as exc:
            est[end] = float("nan")
            rep.warnings.append(f"index at {end} not settled: {exc}")
    rep.rv_indices.update(est)
    lam, alpha = est["zero"], est["infinity"]
    if regime == "light":
        ok1 = 0.0 < lam < 1.0 - 1e-6
        rep.add("L1", ok1, f"index at 0 estimated {lam:.6g}, must lie in (0,1)")
        beta = vf.power_bound("light").beta
        rep.add("L2", 0.0 < beta < 1.0 and alpha < 1.0 - 1e-6,
                f"sigma(t) <= C t^beta for large t with beta={beta:g}")
        if not lam < 1.0 - 1e-6:
            rep.warnings.append(
                f"degenerate limit: index at 0 is {lam:.4g} >= 1, "
                "the light-traffic scaling leads to a degenerate limit")
    else:
        ok1 = 0.0 < alpha < 1.0 - 1e-6
        rep.add("H1", ok1, f"index at infinity estimated {alpha:.6g}, must lie in (0,1)")
        beta = vf.power_bound("heavy").beta
        rep.add("H2", 0.0 < beta <= 1.0 and lam > 0.0, f"sigma(t) <= C t^beta for small t with beta={beta:g}")


def relabel(spec: NetworkSpec) -> tuple[np.ndarray, NetworkSpec]:
    """Sort nodes by decreasing asymptotic rate; stable on the original index."""
    n = spec.n
    perm = np.array(sorted(range(n), key=lambda i: (-spec.rates[i].exponent, -spec.rates[i].coeff, i)), dtype=int)
    P2 = spec.P[np.ix_(perm, perm)]
    if np.any(np.tril(P2) != 0):
        raise RuntimeError("relabeled routing matrix is not strictly upper-triangular (N1 violated)")
    return perm, NetworkSpec(P2, tuple(spec.rates[i] for i in perm), spec.regime)


@dataclass(frozen=True)
class ClassPartition:
    classes: tuple[tuple[int, ...], ...]
    f: tuple[int, ...]
    l: tuple[int, ...]
    k: tuple[int, ...]


def partition_classes(rl: RLimits) -> ClassPartition:
    n = rl.n
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if rl.r[i, j] > 0:
                a, b = find(i), find(j)
                if a != b:
                    parent[max(a, b)] = min(a, b)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    classes = tuple(sorted((tuple(sorted(g)) for g in groups.values()), key=lambda g: g[0]))
    f = [0] * n
    for c, members in enumerate(classes):
        for i in members:
            f[i] = c
    l = tuple(members[0] for members in classes)
    k = tuple(l[f[i]] for i in range(n))
    return ClassPartition(classes, tuple(f), l, k)
