"""Exact sampling of Gaussian processes with stationary increments on uniform
grids, including multi-scale layouts where several nodes read one path at
different time scales."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.linalg import toeplitz

from .gp_models import VarianceFunction

MAX_EMBEDDING = 2**24
DENSE_THRESHOLD = 4096


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    replicate_index: int = 0

    def generator(self, stream: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.master_seed), spawn_key=(int(self.replicate_index), int(stream)))
        return np.random.Generator(np.random.SFC64(ss))


def seeds_for(master_seed: int, replicates) -> list[SeedSpec]:
    idx = range(replicates) if isinstance(replicates, (int, np.integer)) else replicates
    return [SeedSpec(master_seed, int(i)) for i in idx]


@dataclass(frozen=True)
class SamplePath:
    t0: float
    dt: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise ValueError("a sample path needs at least two grid points")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "values", v)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.values.size)

    @property
    def zero_index(self) -> int:
        return _grid_index(self.t0, self.dt, 0.0)

    def index_of(self, t: float) -> int:
        k = _grid_index(self.t0, self.dt, t)
        if not 0 <= k < self.values.size:
            raise ValueError(f"time {t} outside the grid")
        return k

    def value_at(self, t: float) -> float:
        return float(self.values[self.index_of(t)])


def _grid_index(t0: float, dt: float, t: float) -> int:
    q = (t - t0) / dt
    k = int(round(q))
    if abs(q - k) > 1e-9 * max(1.0, abs(q)):
        raise ValueError(f"time {t} is not a grid point of (t0={t0}, dt={dt})")
    return k


def increment_covariance(vf: VarianceFunction, dt: float, n_lags: int) -> np.ndarray:
    if not dt > 0 or n_lags < 1:
        raise ValueError("need dt > 0 and n_lags >= 1")
    return vf.increment_cov(float(dt), np.arange(n_lags))


class EmbeddingError(RuntimeError):
    def __init__(self, message: str, min_eigenvalue: float):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class IncrementSampler:
    """Draws n increments with Toeplitz covariance gamma(0..n-1)."""

    def __init__(self, gamma: np.ndarray, method: str = "circulant", max_embedding: int = MAX_EMBEDDING,
                 dense_threshold: int = DENSE_THRESHOLD, gamma_fn=None):
        gamma = np.asarray(gamma, dtype=float)
        # gamma_fn(k) continues the covariance to k lags for larger embeddings
        self._gamma_fn = gamma_fn
        self.n = n = gamma.size
        self.gamma = gamma
        if method == "independent":
            self.method = "independent"
            self.scale = math.sqrt(gamma[0])
            self.n_normals = n
            return
        if method == "circulant":
            ok, info = self._try_circulant(gamma, max_embedding)
            if ok:
                return
            if n > dense_threshold:
                found = (f"smallest eigenvalue {info:.6g}" if np.isfinite(info)
                         else "minimal embedding already exceeds the cap")
                raise EmbeddingError(
                    f"circulant embedding failed up to size {max_embedding} ({found}); "
                    f"grid of {n} increments exceeds the dense fallback threshold {dense_threshold}", info)
            method = "dense"
        if method != "dense":
            raise ValueError(f"unknown sampling method {method!r}")
        self.method = "dense"
        G = toeplitz(gamma)
        try:
            self.factor = np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            w, V = np.linalg.eigh(G)
            if w.min() < -1e-10 * max(w.max(), 1e-300):
                raise EmbeddingError("increment covariance not positive semidefinite; "
                                     f"smallest eigenvalue {w.min():.6g}",
                                     float(w.min()))
            self.factor = V * np.sqrt(np.clip(w, 0.0, None))
        self.n_normals = n

    def _try_circulant(self, gamma: np.ndarray, max_embedding: int):
        n = gamma.size
        m = 1 << max(0, (max(n - 1, 1) - 1).bit_length())
        worst = float("nan")
        while 2 * m <= max_embedding:
            if m + 1 > n:
                full = self._extend_gamma(m + 1)
            else:
                full = gamma[: m + 1]
            row = np.concatenate([full, full[-2:0:-1]])
            eig = np.fft.rfft(row).real
            tol = 64 * np.finfo(float).eps * np.abs(row).sum()
            if eig.min() >= -tol:
                eig = np.clip(eig, 0.0, None)
                M = 2 * m
                a = np.sqrt(eig / 2.0)
                a[0] = math.sqrt(eig[0])
                a[-1] = math.sqrt(eig[-1])
                b = np.sqrt(eig / 2.0)
                b[0] = 0.0
                b[-1] = 0.0
                self.method = "circulant"
                self.m, self.M = m, M
                self.a, self.b = a * math.sqrt(M), b * math.sqrt(M)
                self.n_normals = M
                return True, 0.0
            worst = float(eig.min())
            m *= 2
        return False, worst

    def _extend_gamma(self, k: int) -> np.ndarray:
        if self._gamma_fn is None:
            return np.concatenate([self.gamma, np.zeros(k - self.gamma.size)])
        return self._gamma_fn(k)

    def transform(self, z: np.ndarray) -> np.ndarray:
        """Map standard normals of shape (R, n_normals) to increments (R, n)."""
        if self.method == "independent":
            return self.scale * z
        if self.method == "dense":
            return z @ self.factor.T
        m = self.m
        Y = np.empty((z.shape[0], m + 1), dtype=complex)
        Y.real = z[:, : m + 1] * self.a
        Y.imag[:, 0] = 0.0
        Y.imag[:, m] = 0.0
        Y.imag[:, 1:m] = z[:, m + 1:] * self.b[1:m]
        x = np.fft.irfft(Y, n=self.M, axis=1)
        return x[:, : self.n]

    def draw(self, seeds: Sequence[SeedSpec], stream: int = 0) -> np.ndarray:
        z = np.empty((len(seeds), self.n_normals))
        for r, s in enumerate(seeds):
            s.generator(stream).standard_normal(out=z[r])
        return self.transform(z)


@lru_cache(maxsize=64)
def increment_sampler(vf: VarianceFunction, dt: float, n: int, method: str = "circulant",
                      max_embedding: int = MAX_EMBEDDING, dense_threshold: int = DENSE_THRESHOLD) -> IncrementSampler:
    if method == "auto":
        method = "independent" if vf.independent_increments else "circulant"
    return IncrementSampler(increment_covariance(vf, dt, n), method, max_embedding, dense_threshold,
                            gamma_fn=lambda k: increment_covariance(vf, dt, k))


def _uniform_values(vf, k_lo: int, k_hi: int, dt: float, seeds, method: str, stream: int, **kw) -> np.ndarray:
    """Rows of J on the grid k*dt, k_lo..k_hi, anchored so J(0) = 0."""
    n = k_hi - k_lo
    sampler = increment_sampler(vf, float(dt), int(n), method, kw.get("max_embedding", MAX_EMBEDDING),
                                kw.get("dense_threshold", DENSE_THRESHOLD))
    inc = sampler.draw(seeds, stream)
    vals = np.zeros((len(seeds), n + 1))
    np.cumsum(inc, axis=1, out=vals[:, 1:])
    z = -k_lo
    vals -= vals[:, z: z + 1].copy()
    return vals


def sample_path(vf: VarianceFunction, t_start: float, t_end: float, dt: float, seed: SeedSpec,
                method: str = "circulant", stream: int = 0, **kw) -> SamplePath:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not t_start <= 0 <= t_end or t_start == t_end:
        raise ValueError("the grid must contain 0 and at least two points")
    k_lo = _grid_index(0.0, dt, t_start)
    k_hi = _grid_index(0.0, dt, t_end)
    vals = _uniform_values(vf, k_lo, k_hi, dt, [seed], method, stream, **kw)
    return SamplePath(k_lo * dt, dt, vals[0])


def sample_paths(vf: VarianceFunction, t_start: float, t_end: float, dt: float, seeds: Sequence[SeedSpec],
                 method: str = "circulant", stream: int = 0, **kw) -> tuple[float, np.ndarray]:
    """Batch version of sample_path; returns (t0, values[R, N])."""
    k_lo = _grid_index(0.0, dt, t_start)
    k_hi = _grid_index(0.0, dt, t_end)
    return k_lo * dt, _uniform_values(vf, k_lo, k_hi, dt, list(seeds), method, stream, **kw)


class RatioCapError(ValueError):
    pass


def snap_ratio(rho: float, max_denominator: int = 64, rtol: float = 1e-3) -> Fraction:
    """Smallest-denominator rational within rtol of rho."""
    for q in range(1, max_denominator + 1):
        p = round(rho * q)
        if p > 0 and abs(p / q - rho) <= rtol * rho:
            return Fraction(p, q)
    return Fraction(rho).limit_denominator(max_denominator)


@dataclass(frozen=True)
class MultiscaleLayout:
    scales: tuple[float, ...]
    effective_scales: tuple[float, ...]
    base_dt: float
    lattice_dt: float
    strides: tuple[int, ...]
    past_steps: tuple[int, ...]
    future_steps: tuple[int, ...]

    @property
    def lattice_lo(self) -> int:
        return min(-p * s for p, s in zip(self.past_steps, self.strides))

    @property
    def lattice_hi(self) -> int:
        return max(f * s for f, s in zip(self.future_steps, self.strides))

    @property
    def n_lattice(self) -> int:
        return self.lattice_hi - self.lattice_lo + 1

    def node_indices(self, i: int) -> np.ndarray:
        return np.arange(-self.past_steps[i], self.future_steps[i] + 1, dtype=np.int64) * self.strides[i]

    def node_dt(self, i: int) -> float:
        """Physical step of node i's readings."""
        return self.strides[i] * self.lattice_dt

    def with_past(self, past_steps: Sequence[int]) -> "MultiscaleLayout":
        return MultiscaleLayout(self.scales, self.effective_scales, self.base_dt, self.lattice_dt, self.strides,
                                tuple(int(p) for p in past_steps), self.future_steps)


def plan_multiscale(scales: Sequence[float], horizon, base_dt: float, ratio_cap: float = 1e4,
                    max_denominator: int = 64, snap_rtol: float = 1e-3) -> MultiscaleLayout:
    """Lattice on which every scale reads J(scale * k * base_dt) exactly.

    ``horizon`` is (T_past, T_future) in scaled time, or one such pair per scale.
    """
    s = np.asarray(scales, dtype=float)
    if s.size == 0 or np.any(s <= 0):
        raise ValueError("scales must be nonempty and positive")
    smin = float(s.min())
    ratios = s / smin
    if ratios.max() > ratio_cap:
        raise RatioCapError(
            f"scale ratio {ratios.max():.4g} exceeds the cap {ratio_cap:g}; use a smaller u or a coarser base_dt")
    fr = [snap_ratio(float(r), max_denominator, snap_rtol) for r in ratios]
    L = 1
    for f in fr:
        L = L * f.denominator // math.gcd(L, f.denominator)
    strides = tuple(int(f * L) for f in fr)
    h = base_dt * smin / L
    hz = list(horizon)
    if len(hz) == 2 and np.isscalar(hz[0]):
        hz = [tuple(hz)] * s.size
    if len(hz) != s.size:
        raise ValueError("one (T_past, T_future) pair per scale required")
    past = tuple(int(math.ceil(tp / base_dt - 1e-9)) for tp, _ in hz)
    fut = tuple(int(math.ceil(tf / base_dt - 1e-9)) for _, tf in hz)
    if any(p < 0 for p in past) or any(f < 0 for f in fut):
        raise ValueError("horizons must be nonnegative")
    eff = tuple(smin * float(f) for f in fr)
    return MultiscaleLayout(tuple(float(x) for x in s), eff, float(base_dt), h, strides, past, fut)


def draw_readings(vf: VarianceFunction, layout: MultiscaleLayout, seeds: Sequence[SeedSpec], method: str = "auto",
                  stream: int = 0, max_lattice: int = 2**24, **kw) -> list[np.ndarray]:
    """Per-scale rows of J(effective_scale * k * base_dt), one row per seed."""
    seeds = list(seeds)
    n = len(layout.strides)
    idx = [layout.node_indices(i) for i in range(n)]
    if method == "auto" and vf.independent_increments:
        union = np.unique(np.concatenate(idx))
        gaps = np.diff(union).astype(float) * layout.lattice_dt
        sd = np.sqrt(vf.sigma2(gaps))
        z = np.empty((len(seeds), union.size - 1))
        for r, s in enumerate(seeds):
            s.generator(stream).standard_normal(out=z[r])
        z *= sd
        vals = np.zeros((len(seeds), union.size))
        np.cumsum(z, axis=1, out=vals[:, 1:])
        zpos = int(np.searchsorted(union, 0))
        vals -= vals[:, zpos: zpos + 1].copy()
        return [_take(vals, np.searchsorted(union, ix)) for ix in idx]
    if layout.n_lattice > max_lattice:
        raise RatioCapError(f"lattice of {layout.n_lattice} points exceeds {max_lattice}; "
                            "use a smaller u, a coarser base_dt or shorter horizons")
    m = "circulant" if method == "auto" else method
    lo = layout.lattice_lo
    vals = _uniform_values(vf, lo, layout.lattice_hi, layout.lattice_dt, seeds, m, stream, **kw)
    return [_take(vals, ix - lo) for ix in idx]


def _take(vals: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Columns at pos; a strided view when pos is evenly spaced."""
    if pos.size > 1:
        step = int(pos[1] - pos[0])
        if step > 0 and np.all(np.diff(pos) == step):
            return vals[:, int(pos[0]): int(pos[-1]) + 1: step]
    return vals[:, pos]


@dataclass(frozen=True)
class MultiscaleSample:
    layout: MultiscaleLayout
    path: SamplePath

    def reading(self, i: int) -> SamplePath:
        """Physical-time path of J at scale i on its own reading grid."""
        lo = self.layout.lattice_lo
        ix = self.layout.node_indices(i)
        return SamplePath(float(ix[0] * self.layout.lattice_dt), self.layout.node_dt(i), self.path.values[ix - lo])


def sample_multiscale(vf: VarianceFunction, scales: Sequence[float], horizon, base_dt: float, seed: SeedSpec,
                      method: str = "circulant", stream: int = 0, ratio_cap: float = 1e4, **kw) -> MultiscaleSample:
    layout = plan_multiscale(scales, horizon, base_dt, ratio_cap)
    lo, hi = layout.lattice_lo, layout.lattice_hi
    vals = _uniform_values(vf, lo, hi, layout.lattice_dt, [seed], method, stream, **kw)
    return MultiscaleSample(layout, SamplePath(lo * layout.lattice_dt, layout.lattice_dt, vals[0]))


def write_path_csv(path: SamplePath, file, header_comment: str | None = None) -> None:
    with open(file, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "value"])
        for t, v in zip(path.times, path.values):
            w.writerow([f"{t:.12g}", f"{v:.12g}"])
