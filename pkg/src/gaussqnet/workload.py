"""Truncated stationary workloads, network workload vectors and the scaled
pre-limit pipeline."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import gammaincc, gammaln

from .gp_models import UniformBoundFit, VarianceFunction, fit_uniform_bound
from .gp_sampler import SamplePath, SeedSpec, draw_readings, plan_multiscale
from .network import NetworkSpec, compute_C
from .scaling import DeltaMemo, scale_factors

PITERBARG_C = 10.0
MAX_T_PAST = 10**6
CHUNK_ELEMENTS = 8_000_000


@dataclass(frozen=True)
class TruncationPlan:
    T_past: float
    tail_bound: float
    doubling_gap: float | None = None

    def to_dict(self) -> dict:
        return {"T_past": self.T_past, "tail_bound": self.tail_bound, "doubling_gap": self.doubling_gap}


def reflect_rows(J: np.ndarray, zero: int, dt: float, drift: float, gain: float,
                 past_steps: int | None = None, floor: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Running-minimum reflection of rows of J on a uniform grid.

    Returns (xbar, m) on the grid points t >= 0, where m = gain*J - drift*t.
    ``floor`` (one value per row) joins the minimum over the past, e.g. the
    free process evaluated at extra past times off this grid.
    """
    J = np.atleast_2d(J)
    start = 0 if past_steps is None else zero - int(past_steps)
    if start < 0:
        raise ValueError("path does not reach back to the truncation horizon")
    k = np.arange(start - zero, J.shape[1] - zero, dtype=float)
    M = J[:, start:] * gain
    M -= (drift * dt) * k
    z = zero - start
    past_min = M[:, : z + 1].min(axis=1)
    if floor is not None:
        np.minimum(past_min, floor, out=past_min)
    fut = M[:, z:]
    run = np.minimum.accumulate(fut, axis=1)
    np.minimum(run, past_min[:, None], out=run)
    return fut - run, fut


def reflect_truncated(free: SamplePath, drift: float, gain: float, t_past: float | None = None) -> SamplePath:
    """X(t) = M(t) - min_{-T <= s <= t} M(s) for t >= 0, with M = gain*J - drift*t."""
    zero = free.zero_index
    if not 0 <= zero < free.values.size:
        raise ValueError("the free path grid does not contain 0")
    past = None if t_past is None else int(round(t_past / free.dt))
    xbar, _ = reflect_rows(free.values[None, :], zero, free.dt, drift, gain, past)
    if xbar.shape[1] < 2:
        raise ValueError("the free path must extend past t = 0")
    return SamplePath(0.0, free.dt, xbar[0])


def _tail_integral(T: float, ubf: UniformBoundFit, gain: float, C: float, t: float = 0.0) -> float:
    """Integral of psi over [T-1, inf), in closed form via the incomplete gamma function."""
    g = ubf.gamma_inf
    cc = ubf.frakC
    A = 4.0 * C * cc * gain / math.sqrt(2.0 * math.pi)
    K = 32.0 * cc**2 * gain**2
    a = g / (2.0 * (1.0 - g))
    lo = max(T - 1.0, 0.0) + t
    y0 = lo ** (2.0 - 2.0 * g) / K
    # substituting y = x^(2-2g)/K turns the integral into A K^a Gamma(a, y0) / (2(1-g))
    q = gammaincc(a, y0)
    if q == 0.0:
        return 0.0
    # logs keep K**a from overflowing when gamma_inf is close to 1
    lg = math.log(A) + a * math.log(K) - math.log(2.0 * (1.0 - g)) + gammaln(a) + math.log(q)
    return math.exp(lg) if lg < 700.0 else math.inf


def psi(x, ubf: UniformBoundFit, gain: float, C: float = PITERBARG_C, t: float = 0.0):
    x = np.asarray(x, dtype=float) + t
    g, cc = ubf.gamma_inf, ubf.frakC
    return (4.0 * C * cc * gain / math.sqrt(2.0 * math.pi)) * x ** (g - 1.0) * np.exp(
        -(x ** (2.0 - 2.0 * g)) / (32.0 * cc**2 * gain**2))


def plan_truncation(ubf: UniformBoundFit, gain: float, target_prob: float, piterbarg_c: float = PITERBARG_C,
                    t: float = 0.0) -> TruncationPlan:
    """Smallest integer T with the psi tail integral over [T-1, inf) below target_prob."""
    if not 0.0 < target_prob < 1.0:
        raise ValueError("target_prob must lie in (0, 1)")
    if not gain > 0:
        raise ValueError("gain must be positive")
    if not 0.0 < ubf.gamma_inf < 1.0:
        raise ValueError("gamma_inf must lie in (0, 1)")
    f = lambda T: _tail_integral(T, ubf, gain, piterbarg_c, t)
    if f(MAX_T_PAST) >= target_prob:
        raise ValueError(f"tail bound stays above {target_prob:g} up to T={MAX_T_PAST}; "
                         "use a larger drift or a smaller gain")
    lo, hi = 1, 1
    while f(hi) >= target_prob:
        lo, hi = hi, min(2 * hi, MAX_T_PAST)
    if f(lo) < target_prob:
        hi = lo
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if f(mid) < target_prob:
            hi = mid
        else:
            lo = mid
    return TruncationPlan(float(hi), float(f(hi)))


def compute_Q(xbar: Sequence[SamplePath], P) -> list[SamplePath]:
    P = np.asarray(P, dtype=float)
    if len(xbar) != P.shape[0]:
        raise ValueError("one path per node required")
    ref = xbar[0]
    for p in xbar[1:]:
        if p.t0 != ref.t0 or p.dt != ref.dt or p.values.size != ref.values.size:
            raise ValueError("workload paths do not share a common grid")
    X = np.stack([p.values for p in xbar])
    Q = (np.eye(P.shape[0]) - P.T) @ X
    return [SamplePath(ref.t0, ref.dt, q) for q in Q]


@dataclass
class WorkloadSample:
    """Scaled workloads on t = 0, dt, ..., T; arrays are (replicates, nodes, times)."""

    u: float | None
    t: np.ndarray
    xbar: np.ndarray
    q: np.ndarray
    free: np.ndarray | None
    plans: tuple[TruncationPlan, ...]
    replicates: np.ndarray

    @property
    def n(self) -> int:
        return self.xbar.shape[1]

    def index_of(self, t: float) -> int:
        dt = self.t[1] - self.t[0] if self.t.size > 1 else 1.0
        k = int(round(t / dt))
        if not (0 <= k < self.t.size) or abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the output grid")
        return k

    def q_at(self, t: float) -> np.ndarray:
        return self.q[:, :, self.index_of(t)]

    def xbar_at(self, t: float) -> np.ndarray:
        return self.xbar[:, :, self.index_of(t)]


def _chunks(n_items: int, per_item: int, limit: int = CHUNK_ELEMENTS) -> list[tuple[int, int]]:
    size = max(1, min(256, limit // max(per_item, 1)))
    return [(a, min(a + size, n_items)) for a in range(0, n_items, size)]


def run_replicates(fn, seeds: list[SeedSpec], per_item: int, threads: int = 1) -> list:
    """Apply fn to fixed-size chunks of seeds; chunking does not depend on threads."""
    parts = [seeds[a:b] for a, b in _chunks(len(seeds), per_item)]
    if threads <= 1 or len(parts) == 1:
        return [fn(p) for p in parts]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, parts))


def plan_nodes(fit: UniformBoundFit, gains, target_prob: float, piterbarg_c: float = PITERBARG_C,
               t_past: float | None = None) -> list[TruncationPlan]:
    if t_past is not None:
        return [TruncationPlan(float(t_past), float("nan")) for _ in gains]
    return [plan_truncation(fit, float(g), target_prob, piterbarg_c) for g in gains]


def default_fit(vf: VarianceFunction, regime: str, basis: str = "input") -> UniformBoundFit:
    """Uniform bound used to size truncation horizons."""
    rho = vf.index(regime)
    if basis == "limit":
        vf = VarianceFunction.power(rho)
    elif basis != "input":
        raise ValueError("basis must be 'input' or 'limit'")
    t = np.geomspace(1e-4, 1e4, 81)
    x = np.geomspace(1e-8, 1e-1, 29) if regime == "light" else np.geomspace(1e1, 1e8, 29)
    return fit_uniform_bound(vf, regime, x, t)


def _ancestor_floor(readings, zero_steps, past_steps, eff, j, anc, dt, drift, g):
    """min over the past grids of the ancestors of node j of node j's free process."""
    out = None
    for i in anc:
        k = np.arange(-past_steps[i], 1, dtype=float)
        vals = readings[i][:, zero_steps[i] - past_steps[i]: zero_steps[i] + 1] * g
        vals -= (drift * dt * eff[i] / eff[j]) * k
        m = vals.min(axis=1)
        out = m if out is None else np.minimum(out, m)
    return out


def _reflect_nodes(readings, layout, zero_steps, drifts, gains, space, T_steps, past_steps, ancestors=None):
    """Scaled reflection per node; returns xbar, free (R, n, K).

    Node j's past minimum also runs over the past grids of ``ancestors[j]``
    (nodes driven by the same path), so the discrete sup sets are nested
    along each route exactly as the continuous ones are.
    """
    R = readings[0].shape[0]
    n = len(readings)
    eff = layout.effective_scales
    xb = np.empty((R, n, T_steps + 1))
    fr = np.empty((R, n, T_steps + 1))
    for i in range(n):
        g = gains[i] / space[i]
        anc = ancestors[i] if ancestors else ()
        floor = _ancestor_floor(readings, zero_steps, past_steps, eff, i, anc, layout.base_dt, drifts[i], g) \
            if anc else None
        x, m = reflect_rows(readings[i], zero_steps[i], layout.base_dt, drifts[i], g, past_steps[i], floor)
        xb[:, i, :] = x[:, : T_steps + 1]
        fr[:, i, :] = m[:, : T_steps + 1]
    return xb, fr


def ancestors_of(P) -> list[list[int]]:
    """Upstream chain of every node of a routing matrix with one parent per column."""
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    parent = [int(np.argmax(P[:, j] > 0)) if np.any(P[:, j] > 0) else None for j in range(n)]
    out = []
    for j in range(n):
        chain, k = [], parent[j]
        while k is not None and k not in chain:
            chain.append(k)
            k = parent[k]
        out.append(chain)
    return out


def simulate_scaled(vf: VarianceFunction, scales, space, drifts, gains, plans, T: float, dt: float,
                    master_seed: int, replicates, stream_of, doubling_replicates: int | None = None,
                    ratio_cap: float = 1e4, method: str = "auto", threads: int = 1,
                    groups=None, ancestors=None) -> tuple[np.ndarray, np.ndarray, list[TruncationPlan]]:
    """Shared Monte-Carlo core for pre-limit and limit workloads.

    ``groups`` lists node groups driven by one path each (one group for the
    pre-limit, one per class for the limit); ``stream_of[g]`` is the RNG stream
    of group g. ``ancestors[j]`` lists the upstream nodes of j; those in the
    same group extend j's past minimum. Returns scaled (xbar, free) of shape
    (R, n, K) and plans with the doubling gap attached.
    """
    n = len(scales)
    groups = groups or [list(range(n))]
    rep_idx = list(range(replicates)) if isinstance(replicates, int) else list(replicates)
    R = len(rep_idx)
    K = int(round(T / dt))
    n_check = min(R, 1000) if doubling_replicates is None else min(R, int(doubling_replicates))
    past = [int(math.ceil(p.T_past / dt - 1e-9)) for p in plans]
    xb = np.empty((R, n, K + 1))
    fr = np.empty((R, n, K + 1))
    gap_sum = np.zeros(n)

    for g, members in enumerate(groups):
        sc = [scales[i] for i in members]
        local = {i: pos for pos, i in enumerate(members)}
        anc = [[local[a] for a in ancestors[i] if a in local] for i in members] if ancestors else None
        for factor, lo_r, hi_r in ((2, 0, n_check), (1, n_check, R)):
            if hi_r <= lo_r:
                continue
            hz = [(factor * plans[i].T_past, T) for i in members]
            layout = plan_multiscale(sc, hz, dt, ratio_cap)
            seeds = [SeedSpec(master_seed, rep_idx[r]) for r in range(lo_r, hi_r)]
            zero = layout.past_steps
            per_item = layout.n_lattice if not (method == "auto" and vf.independent_increments) else sum(
                p + f + 1 for p, f in zip(layout.past_steps, layout.future_steps))

            def work(chunk, layout=layout, members=members, zero=zero, factor=factor, anc=anc):
                rd = draw_readings(vf, layout, chunk, method, stream_of[g])
                sp = [space[i] for i in members]
                dr = [drifts[i] for i in members]
                gn = [gains[i] for i in members]
                ps = [past[i] for i in members]
                x1, f1 = _reflect_nodes(rd, layout, zero, dr, gn, sp, K, ps, anc)
                if factor == 2:
                    x2, _ = _reflect_nodes(rd, layout, zero, dr, gn, sp, K, [2 * p for p in ps], anc)
                    gap = (x2[:, :, 0] - x1[:, :, 0]).sum(axis=0)
                else:
                    gap = np.zeros(len(members))
                return x1, f1, gap

            outs = run_replicates(work, seeds, per_item, threads)
            pos = lo_r
            for x1, f1, gap in outs:
                m = x1.shape[0]
                xb[pos: pos + m][:, members, :] = x1
                fr[pos: pos + m][:, members, :] = f1
                gap_sum[members] += gap
                pos += m
    new_plans = [replace(p, doubling_gap=float(gap_sum[i] / n_check) if n_check else None)
                 for i, p in enumerate(plans)]
    return xb, fr, new_plans


def assemble_Q(xbar_scaled: np.ndarray, P: np.ndarray, space: np.ndarray, check_tol: float = 1e-10) -> np.ndarray:
    """Q^delta = D^{-1}(I-P^T)D X^delta, computed in both orders and compared."""
    n = P.shape[0]
    A = np.eye(n) - P.T
    conj = (A * space[None, :]) / space[:, None]
    q1 = np.einsum("ij,rjk->rik", conj, xbar_scaled)
    phys = xbar_scaled * space[None, :, None]
    q2 = np.einsum("ij,rjk->rik", A, phys) / space[None, :, None]
    scale = np.maximum(1.0, np.abs(q1))
    if np.any(np.abs(q1 - q2) > check_tol * scale):
        raise AssertionError("the two assembly orders of Q^delta disagree")
    return q1


def compute_Q_scaled(spec: NetworkSpec, vf: VarianceFunction, u: float, T: float, dt: float, seed: int,
                     replicates=1, target_prob: float = 1e-4, piterbarg_c: float = PITERBARG_C,
                     basis: str = "input", t_past: float | None = None, doubling_replicates: int | None = None,
                     ratio_cap: float = 1e4, method: str = "auto", threads: int = 1,
                     memo: DeltaMemo | None = None, stream: int = 0, nested_sup: bool = False) -> WorkloadSample:
    """Scaled pre-limit workloads X^delta_u and Q^delta_u on [0, T].

    By default every node's supremum runs over its own scaled grid, the same
    discretization the limit sampler uses. ``nested_sup`` adds the past grids
    of upstream nodes, which keeps Q^delta(0) >= 0 exactly on the grid.
    """
    sf = scale_factors(spec, vf, u, memo)
    C = compute_C(spec.P)
    fit = default_fit(vf, spec.regime, basis) if t_past is None else None
    plans = plan_nodes(fit, C, target_prob, piterbarg_c, t_past)
    layout = plan_multiscale(sf.time_scale, [(p.T_past, T) for p in plans], dt, ratio_cap)
    eff = np.array(layout.effective_scales)
    # scaled drift of node i: r_i * delta'_i / sigma(delta_i)
    drifts = sf.rates * eff / sf.space_scale
    xb, fr, plans = simulate_scaled(vf, list(sf.time_scale), sf.space_scale, drifts, C, plans, T, dt, seed,
                                    replicates, [stream], doubling_replicates, ratio_cap, method, threads,
                                    ancestors=ancestors_of(spec.P) if nested_sup else None)
    q = assemble_Q(xb, spec.P, sf.space_scale)
    rep = np.arange(replicates) if isinstance(replicates, int) else np.asarray(list(replicates))
    return WorkloadSample(float(u), np.arange(xb.shape[2]) * dt, xb, q, fr, tuple(plans), rep)
