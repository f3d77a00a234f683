"""Limit objects: covariance function Sigma, limit routing weights P*, the
class-wise fBm construction of B, and the limit workloads X and Q."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gp_models import VarianceFunction
from .gp_sampler import draw_readings, plan_multiscale, snap_ratio
from .network import (ClassPartition, NetworkSpec, RLimits, compute_C, compute_r_limits,
                      partition_classes)
from .workload import (PITERBARG_C, TruncationPlan, WorkloadSample, ancestors_of, assemble_Q, default_fit,
                       plan_nodes, simulate_scaled)


def pstar_exponent(index: float, regime: str) -> float:
    """Exponent e in p* = p r^e.

    Light: kappa*lambda. Heavy: -xi*alpha, the limit of the pre-limit ratio
    sigma(delta_i)/sigma(delta_j); both equal index/(1-index).
    """
    if regime == "light":
        return index / (1.0 - index)
    xi = 1.0 / (index - 1.0)
    return -xi * index


def time_exponent(index: float, regime: str) -> float:
    """Exponent tau of the time change r^tau: -kappa (light) or xi (heavy)."""
    return -1.0 / (1.0 - index) if regime == "light" else 1.0 / (index - 1.0)


def build_pstar(P, rlimits: RLimits, index: float, regime: str) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    e = pstar_exponent(index, regime)
    if e <= 0 and np.any((rlimits.r == 0) & (P > 0)):
        raise ValueError("zero rate ratio raised to a nonpositive power")
    r = np.where(np.triu(np.ones_like(P), 1) > 0, rlimits.r, 0.0)
    with np.errstate(divide="ignore"):
        w = np.where(r > 0, np.power(np.where(r > 0, r, 1.0), e), 0.0)
    return P * w


@dataclass(frozen=True)
class LimitLawSpec:
    regime: str
    index: float
    kappa_or_xi: float
    rlimits: RLimits
    partition: ClassPartition
    C: np.ndarray
    Pstar: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        if self.regime == "light" and not self.kappa_or_xi > 1:
            raise ValueError("kappa must exceed 1")
        if self.regime == "heavy" and not self.kappa_or_xi < 0:
            raise ValueError("xi must be negative")
        if np.any(np.tril(self.Pstar) != 0):
            raise ValueError("P* must be strictly upper-triangular")

    @property
    def n(self) -> int:
        return self.C.size

    @property
    def tau(self) -> float:
        return time_exponent(self.index, self.regime)

    @classmethod
    def from_network(cls, spec: NetworkSpec, vf: VarianceFunction) -> "LimitLawSpec":
        rho = vf.index(spec.regime)
        if not 0 < rho < 1:
            raise ValueError(f"index {rho} outside (0,1): no non-degenerate {spec.regime}-traffic limit")
        rl = compute_r_limits(spec)
        k = 1.0 / (1.0 - rho) if spec.regime == "light" else 1.0 / (rho - 1.0)
        return cls(spec.regime, rho, k, rl, partition_classes(rl), compute_C(spec.P),
                   build_pstar(spec.P, rl, rho, spec.regime), np.asarray(spec.P, dtype=float))


def build_sigma_matrix(lls: LimitLawSpec, t: float, s: float) -> np.ndarray:
    n = lls.n
    h = 2.0 * lls.index
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            a, b = (i, j) if i <= j else (j, i)
            ta, sb = (t, s) if i <= j else (s, t)
            r = lls.rlimits.r[a, b]
            if r > 0:
                c = r**lls.tau
                out[i, j] = (abs(ta) ** h + abs(c * sb) ** h - abs(ta - c * sb) ** h) / (2.0 * c**lls.index)
    return out


def class_time_changes(lls: LimitLawSpec, snap: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per node (scale, divisor) with B_i(t) = B'_{f(i)}(scale*t)/divisor.

    With ``snap`` the scale is replaced by the lattice value used for sampling,
    and the divisor follows it so each node stays an exact fBm.
    """
    part = lls.partition
    scale = np.ones(lls.n)
    for i in range(lls.n):
        r = lls.rlimits.r[part.k[i], i]
        if not r > 0:
            raise AssertionError("class representative must have a positive rate ratio")
        scale[i] = r**lls.tau
    if snap:
        for members in part.classes:
            smin = min(scale[i] for i in members)
            for i in members:
                scale[i] = smin * float(snap_ratio(scale[i] / smin))
    return scale, scale**lls.index


def implied_covariance(lls: LimitLawSpec, i: int, j: int, t: float, s: float) -> float:
    """Cov(B_i(t), B_j(s)) implied by the class construction."""
    part = lls.partition
    if part.f[i] != part.f[j]:
        return 0.0
    sc, dv = class_time_changes(lls)
    h = 2.0 * lls.index
    a, b = sc[i] * t, sc[j] * s
    return (abs(a) ** h + abs(b) ** h - abs(a - b) ** h) / (2.0 * dv[i] * dv[j])


def sample_B(lls: LimitLawSpec, T_past, T: float, dt: float, seeds, ratio_cap: float = 1e4,
             method: str = "auto") -> list[np.ndarray]:
    """Per node rows of B_i on t = -T_past_i, ..., T (step dt)."""
    n = lls.n
    past = [float(T_past)] * n if np.isscalar(T_past) else [float(x) for x in T_past]
    fbm = VarianceFunction.power(lls.index)
    scale, _ = class_time_changes(lls)
    out: list = [None] * n
    for c, members in enumerate(lls.partition.classes):
        layout = plan_multiscale([scale[i] for i in members], [(past[i], T) for i in members], dt, ratio_cap)
        rd = draw_readings(fbm, layout, list(seeds), method, stream=c)
        for pos, i in enumerate(members):
            out[i] = rd[pos] / layout.effective_scales[pos] ** lls.index
    return out


def sample_limit_workload(lls: LimitLawSpec, T: float, dt: float, seed: int, replicates=1,
                          trunc=None, target_prob: float = 1e-4, piterbarg_c: float = PITERBARG_C,
                          doubling_replicates: int | None = None, ratio_cap: float = 1e4,
                          method: str = "auto", threads: int = 1, nested_sup: bool = False) -> WorkloadSample:
    """Limit workloads X (drift 1, gain C_i) and Q = (I-P*)^T X on [0, T].

    ``nested_sup`` extends each node's past minimum by the grids of its
    same-class upstream nodes, as in the pre-limit pipeline.
    """
    fbm = VarianceFunction.power(lls.index)
    if trunc is None:
        plans = plan_nodes(default_fit(fbm, lls.regime), lls.C, target_prob, piterbarg_c)
    elif isinstance(trunc, TruncationPlan):
        plans = [trunc] * lls.n
    else:
        plans = list(trunc)
    scale, _ = class_time_changes(lls)
    eff = np.empty(lls.n)
    for members in lls.partition.classes:
        lay = plan_multiscale([scale[i] for i in members], (0.0, T), dt, ratio_cap)
        for pos, i in enumerate(members):
            eff[i] = lay.effective_scales[pos]
    space = eff**lls.index
    groups = [list(m) for m in lls.partition.classes]
    anc = ancestors_of(lls.Pstar) if nested_sup else None
    xb, fr, plans = simulate_scaled(fbm, list(scale), space, np.ones(lls.n), lls.C, plans, T, dt, seed,
                                    replicates, list(range(len(groups))), doubling_replicates, ratio_cap,
                                    method, threads, groups=groups, ancestors=anc)
    q = assemble_Q(xb, lls.Pstar, np.ones(lls.n))
    rep = np.arange(replicates) if isinstance(replicates, int) else np.asarray(list(replicates))
    return WorkloadSample(None, np.arange(xb.shape[2]) * dt, xb, q, fr, tuple(plans), rep)
