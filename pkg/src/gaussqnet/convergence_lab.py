"""Checks that scaled pre-limit objects approach their limits: exact covariance
and routing-weight gaps, Monte-Carlo distances, dependence summaries and
path-oscillation diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d
from scipy.stats import ks_2samp, rankdata, wasserstein_distance

from .gp_models import VarianceFunction
from .limit_laws import LimitLawSpec, build_sigma_matrix, sample_limit_workload
from .network import ClassPartition, NetworkSpec
from .scaling import DeltaMemo, pstar_prelimit, scale_factors
from .workload import PITERBARG_C, WorkloadSample, compute_Q_scaled

N_BOOT = 200
MIN_REPLICATES = 1000
# spawn-key tags keeping bootstrap streams apart from the sampler streams
_BOOT_TAG = 0xB007


def _boot_rng(seed: int, tag: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.SFC64(np.random.SeedSequence(int(seed), spawn_key=(_BOOT_TAG, int(tag)))))


# deterministic gaps

def exact_prelimit_covariance(vf: VarianceFunction, spec: NetworkSpec, u: float, i: int, j: int, t: float, s: float,
                              memo: DeltaMemo | None = None) -> float:
    """Cov(J_i^delta(t), J_j^delta(s)) from sigma alone (nodes are 0-based)."""
    sf = scale_factors(spec, vf, u, memo)
    a = sf.time_scale[i] * t
    b = sf.time_scale[j] * s
    num = vf.sigma2(abs(a)) + vf.sigma2(abs(b)) - vf.sigma2(abs(a - b))
    return float(num / (2.0 * sf.space_scale[i] * sf.space_scale[j]))


def prelimit_cov_matrix(vf: VarianceFunction, spec: NetworkSpec, u: float, t: float, s: float,
                        memo: DeltaMemo | None = None) -> np.ndarray:
    sf = scale_factors(spec, vf, u, memo)
    a = sf.time_scale[:, None] * t
    b = sf.time_scale[None, :] * s
    num = vf.sigma2(np.abs(a)) + vf.sigma2(np.abs(b)) - vf.sigma2(np.abs(a - b))
    return num / (2.0 * np.outer(sf.space_scale, sf.space_scale))


def deterministic_gaps(spec: NetworkSpec, vf: VarianceFunction, u: float, sigma_pairs: Sequence[tuple[float, float]],
                       lls: LimitLawSpec | None = None, memo: DeltaMemo | None = None) -> dict:
    """Max absolute entry gaps of the covariance (over sigma_pairs) and of P*."""
    lls = lls or LimitLawSpec.from_network(spec, vf)
    cov_gap = 0.0
    for t, s in sigma_pairs:
        d = prelimit_cov_matrix(vf, spec, u, t, s, memo) - build_sigma_matrix(lls, t, s)
        cov_gap = max(cov_gap, float(np.max(np.abs(d))))
    pstar_gap = float(np.max(np.abs(pstar_prelimit(spec, vf, u, memo) - lls.Pstar)))
    return {"u": float(u), "cov_gap": cov_gap, "pstar_gap": pstar_gap}


# Monte-Carlo distances

def _as3d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[:, None, None]
    if x.ndim == 2:
        return x[:, :, None]
    return x


def spearman_matrix(x: np.ndarray) -> np.ndarray:
    """Spearman correlation between the columns of x (R, n)."""
    r = rankdata(x, axis=0)
    if x.shape[1] == 1:
        return np.ones((1, 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.corrcoef(r, rowvar=False)
    return np.atleast_2d(c)


@dataclass
class FddDistances:
    """Distances per (node, time) marginal and Spearman gaps per node pair."""

    times: np.ndarray
    ks: np.ndarray
    ks_se: np.ndarray
    w1: np.ndarray
    w1_se: np.ndarray
    corr_pre: np.ndarray
    corr_limit: np.ndarray
    corr_diff: np.ndarray
    corr_diff_se: np.ndarray

    def to_dict(self) -> dict:
        return {k: _jsonable(getattr(self, k)) for k in
                ("times", "ks", "ks_se", "w1", "w1_se", "corr_pre", "corr_limit", "corr_diff", "corr_diff_se")}


def fdd_distance(pre_samples, limit_samples, times=None, n_boot: int = N_BOOT, seed: int = 0,
                 paired: bool | None = None, min_replicates: int = MIN_REPLICATES) -> FddDistances:
    """KS and W1 per marginal and Spearman differences per pair, with bootstrap SEs.

    Samples are (R,), (R, n) or (R, n, m) arrays at common evaluation times.
    Paired resampling is used when both sets have the same replicate count
    (replicate r of each set is one draw of the pair), unless ``paired=False``.
    """
    a, b = _as3d(pre_samples), _as3d(limit_samples)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"sample shapes {a.shape[1:]} and {b.shape[1:]} do not match")
    Ra, Rb = a.shape[0], b.shape[0]
    if min(Ra, Rb) < min_replicates:
        raise ValueError(f"at least {min_replicates} replicates per sample set required, got {Ra} and {Rb}")
    if paired is None:
        paired = Ra == Rb
    if paired and Ra != Rb:
        raise ValueError("paired bootstrap needs equal replicate counts")
    _, n, m = a.shape
    times = np.arange(m, dtype=float) if times is None else np.asarray(times, dtype=float)

    def stats(x, y):
        ks = np.empty((n, m))
        w1 = np.empty((n, m))
        cd = np.empty((n, n, m))
        cp = np.empty((n, n, m))
        cl = np.empty((n, n, m))
        for k in range(m):
            for i in range(n):
                ks[i, k] = ks_2samp(x[:, i, k], y[:, i, k], method="asymp").statistic
                w1[i, k] = wasserstein_distance(x[:, i, k], y[:, i, k])
            cp[:, :, k] = spearman_matrix(x[:, :, k])
            cl[:, :, k] = spearman_matrix(y[:, :, k])
            cd[:, :, k] = cp[:, :, k] - cl[:, :, k]
        return ks, w1, cp, cl, cd

    ks, w1, cp, cl, cd = stats(a, b)
    rng = _boot_rng(seed)
    bks = np.empty((n_boot, n, m))
    bw1 = np.empty((n_boot, n, m))
    bcd = np.empty((n_boot, n, n, m))
    for r in range(n_boot):
        ia = rng.integers(0, Ra, Ra)
        ib = ia if paired else rng.integers(0, Rb, Rb)
        bks[r], bw1[r], _, _, bcd[r] = stats(a[ia], b[ib])
    se = lambda v: v.std(axis=0, ddof=1)
    return FddDistances(times, ks, se(bks), w1, se(bw1), cp, cl, cd, se(bcd))


@dataclass
class DecouplingSummary:
    corr: np.ndarray
    se: np.ndarray
    cross_pairs: list
    within_pairs: list
    max_abs_cross: float
    max_cross_z: float

    def to_dict(self) -> dict:
        return {
            "corr": _jsonable(self.corr),
            "se": _jsonable(self.se),
            "cross_pairs": [[i, j] for i, j in self.cross_pairs],
            "within_pairs": [{"pair": [i, j], "corr": float(self.corr[i, j]), "se": float(self.se[i, j])}
                             for i, j in self.within_pairs],
            "max_abs_cross": _jsonable(self.max_abs_cross),
            "max_cross_z": _jsonable(self.max_cross_z),
        }


def decoupling_metric(samples, partition: ClassPartition, n_boot: int = N_BOOT, seed: int = 0,
                      min_replicates: int = MIN_REPLICATES) -> DecouplingSummary:
    """Spearman correlations of (R, n) samples split into cross- and within-class pairs."""
    x = np.asarray(samples, dtype=float)
    R, n = x.shape
    if R < min_replicates:
        raise ValueError(f"at least {min_replicates} replicates required, got {R}")
    corr = spearman_matrix(x)
    rng = _boot_rng(seed, 1)
    boot = np.empty((n_boot, n, n))
    for r in range(n_boot):
        boot[r] = spearman_matrix(x[rng.integers(0, R, R)])
    se = boot.std(axis=0, ddof=1)
    np.fill_diagonal(se, 0.0)
    cross = [(i, j) for i in range(n) for j in range(i + 1, n) if partition.f[i] != partition.f[j]]
    within = [(i, j) for i in range(n) for j in range(i + 1, n) if partition.f[i] == partition.f[j]]
    mac = max((abs(corr[i, j]) for i, j in cross), default=0.0)
    mz = max((abs(corr[i, j]) / se[i, j] for i, j in cross if se[i, j] > 0), default=0.0)
    return DecouplingSummary(corr, se, cross, within, float(mac), float(mz))


# path oscillation

def _window_steps(zeta: float, dt: float) -> int:
    if not zeta >= dt * (1 - 1e-9):
        raise ValueError(f"grid step {dt:g} is coarser than zeta={zeta:g}")
    return int(math.floor(zeta / dt + 1e-9))


def window_oscillation(x: np.ndarray, w: int) -> np.ndarray:
    """max - min over every window of w+1 consecutive points along the last axis.

    Edge windows are clipped to the path, so each value is the oscillation of
    some sub-window of length at most w steps.
    """
    x = np.asarray(x, dtype=float)
    size = w + 1
    return maximum_filter1d(x, size, axis=-1, mode="nearest") - minimum_filter1d(x, size, axis=-1, mode="nearest")


def path_modulus(x: np.ndarray, dt: float, zeta: float) -> np.ndarray:
    """sup over |t-s| <= zeta of |x(t) - x(s)| per path (last axis is time)."""
    return window_oscillation(x, _window_steps(zeta, dt)).max(axis=-1)


@dataclass
class ModulusTable:
    zeta: np.ndarray
    quantile: float
    values: np.ndarray  # (len(zeta), n)

    @property
    def decreasing(self) -> bool:
        """Non-increasing as zeta decreases, per node (zeta sorted descending)."""
        order = np.argsort(-self.zeta)
        v = self.values[order]
        return bool(np.all(np.diff(v, axis=0) <= 0))

    def to_dict(self) -> dict:
        return {"zeta": _jsonable(self.zeta), "quantile": self.quantile, "values": _jsonable(self.values),
                "decreasing": self.decreasing}


def modulus_diagnostic(samples, dt: float, zeta_grid: Sequence[float], quantile: float = 0.99) -> ModulusTable:
    """Empirical quantile of the path modulus per zeta; samples are (R, K) or (R, n, K)."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 2:
        x = x[:, None, :]
    zeta = np.asarray(list(zeta_grid), dtype=float)
    vals = np.empty((zeta.size, x.shape[1]))
    for k, z in enumerate(zeta):
        vals[k] = np.quantile(path_modulus(x, dt, z), quantile, axis=0)
    return ModulusTable(zeta, quantile, vals)


def reflection_modulus_violations(xbar: np.ndarray, free: np.ndarray, dt: float,
                                  zeta_grid: Sequence[float]) -> dict:
    """Count windows where osc(X) > 2 osc(M), per zeta; arrays share shape (..., K).

    The bound |X(t)-X(s)| <= 2 max_{[s,t]} |M(u)-M(v)| is checked window by
    window, which implies it for every pair inside the window.
    """
    xbar = np.asarray(xbar, dtype=float)
    free = np.asarray(free, dtype=float)
    if xbar.shape != free.shape:
        raise ValueError("reflected and free paths must share a grid")
    out = {}
    for z in zeta_grid:
        w = _window_steps(z, dt)
        bad = window_oscillation(xbar, w) > 2.0 * window_oscillation(free, w)
        out[float(z)] = int(bad.sum())
    return out


# scan

@dataclass
class ConvergenceReport:
    u_grid: list
    deterministic_gaps: list = field(default_factory=list)
    mc_distances: list = field(default_factory=list)
    modulus_table: dict = field(default_factory=dict)
    decoupling: dict = field(default_factory=dict)
    reflection_violations: dict = field(default_factory=dict)
    stage_failures: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict, repr=False)

    @property
    def ok(self) -> bool:
        return not self.stage_failures

    def to_dict(self) -> dict:
        return _jsonable({
            "u_grid": self.u_grid,
            "deterministic_gaps": self.deterministic_gaps,
            "mc_distances": self.mc_distances,
            "modulus_table": self.modulus_table,
            "decoupling": self.decoupling,
            "reflection_violations": self.reflection_violations,
            "stage_failures": self.stage_failures,
            "settings": self.settings,
        })

    def distance_rows(self) -> list[dict]:
        """Flat per-(u, node, time) rows of the MC distances."""
        rows = []
        for entry in self.mc_distances:
            d = entry["fdd"]
            for i in range(len(d["ks"])):
                for k, t in enumerate(d["times"]):
                    rows.append({"u": entry["u"], "node": i + 1, "t": t, "ks": d["ks"][i][k],
                                 "ks_se": d["ks_se"][i][k], "w1": d["w1"][i][k], "w1_se": d["w1_se"][i][k]})
        return rows


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _values_at(ws: WorkloadSample, times: Sequence[float]) -> np.ndarray:
    return np.stack([ws.q_at(t) for t in times], axis=-1)


def run_convergence_scan(spec: NetworkSpec, vf: VarianceFunction, u_grid: Sequence[float], times: Sequence[float],
                         replicates: int, seed: int, T: float | None = None, dt: float = 0.01,
                         sigma_pairs: Sequence[tuple[float, float]] | None = None,
                         zeta_grid: Sequence[float] | None = None, target_prob: float = 1e-4,
                         piterbarg_c: float = PITERBARG_C, basis: str = "input", t_past: float | None = None,
                         doubling_replicates: int | None = None, ratio_cap: float = 1e4, method: str = "auto",
                         threads: int = 1, n_boot: int = N_BOOT, keep_samples: bool = False,
                         nested_sup: bool = False) -> ConvergenceReport:
    """Deterministic gaps along u_grid, then (replicates > 0) MC comparisons.

    A failing stage is recorded in ``stage_failures`` and the remaining stages
    still run where they do not depend on it.
    """
    times = [float(t) for t in times]
    T = max(times) if T is None else float(T)
    sigma_pairs = [(t, s) for t in (0.5, 1.0, 2.0) for s in (0.5, 1.0, 2.0)] if sigma_pairs is None else sigma_pairs
    if zeta_grid is None:
        zeta_grid = [z for z in (T / 2, T / 4, T / 8, T / 16) if z >= dt]
    rep = ConvergenceReport([float(u) for u in u_grid])
    rep.settings = {"times": times, "T": T, "dt": dt, "replicates": int(replicates), "seed": int(seed),
                    "sigma_pairs": [list(p) for p in sigma_pairs], "zeta_grid": list(zeta_grid),
                    "target_prob": target_prob, "n_boot": n_boot}
    lls = LimitLawSpec.from_network(spec, vf)
    memo = DeltaMemo(vf, spec.regime)

    try:
        rep.deterministic_gaps = [deterministic_gaps(spec, vf, u, sigma_pairs, lls, memo) for u in u_grid]
    except Exception as exc:  # noqa: BLE001 - recorded as a stage failure
        rep.stage_failures["deterministic"] = f"{type(exc).__name__}: {exc}"
    if replicates <= 0:
        return rep

    common = dict(target_prob=target_prob, piterbarg_c=piterbarg_c, doubling_replicates=doubling_replicates,
                  ratio_cap=ratio_cap, method=method, threads=threads, nested_sup=nested_sup)
    limit = None
    try:
        limit = sample_limit_workload(lls, T, dt, seed, replicates, **common)
        rep.decoupling["limit"] = decoupling_metric(limit.q_at(0.0), lls.partition, n_boot, seed).to_dict()
        rep.modulus_table["limit"] = modulus_diagnostic(limit.xbar, dt, zeta_grid).to_dict()
        rep.reflection_violations["limit"] = reflection_modulus_violations(limit.xbar, limit.free, dt, zeta_grid)
        rep.settings["limit_plans"] = [p.to_dict() for p in limit.plans]
    except Exception as exc:  # noqa: BLE001
        rep.stage_failures["limit"] = f"{type(exc).__name__}: {exc}"

    samples = {}
    for u in u_grid:
        key = f"u={u:g}"
        try:
            pre = compute_Q_scaled(spec, vf, u, T, dt, seed, replicates, basis=basis, t_past=t_past, memo=memo,
                                   **common)
        except Exception as exc:  # noqa: BLE001
            rep.stage_failures[f"prelimit {key}"] = f"{type(exc).__name__}: {exc}"
            continue
        if keep_samples:
            samples[float(u)] = pre
        entry = {"u": float(u), "plans": [p.to_dict() for p in pre.plans]}
        try:
            entry["decoupling"] = decoupling_metric(pre.q_at(0.0), lls.partition, n_boot, seed).to_dict()
            rep.reflection_violations[key] = reflection_modulus_violations(pre.xbar, pre.free, dt, zeta_grid)
            if limit is not None:
                entry["fdd"] = fdd_distance(_values_at(pre, times), _values_at(limit, times), times, n_boot,
                                            seed).to_dict()
        except Exception as exc:  # noqa: BLE001
            rep.stage_failures[f"distances {key}"] = f"{type(exc).__name__}: {exc}"
        rep.mc_distances.append(entry)
        if u == max(u_grid):
            try:
                rep.modulus_table[key] = modulus_diagnostic(pre.xbar, dt, zeta_grid).to_dict()
            except Exception as exc:  # noqa: BLE001
                rep.stage_failures[f"modulus {key}"] = f"{type(exc).__name__}: {exc}"
    if keep_samples:
        rep.samples = {"limit": limit, **samples}
    return rep
