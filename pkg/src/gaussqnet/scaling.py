"""Space-time scaling: delta(x) solving x*delta/sigma(delta) = 1, per-node
scale factors and the pre-limit routing weights."""
from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .gp_models import VarianceFunction
from .network import NetworkSpec

RESIDUAL_TOL = 1e-12
_LOG_LO, _LOG_HI = np.log(1e-300), np.log(1e300)


class DeltaSolveError(ValueError):
    pass


def _g(vf: VarianceFunction, logx: float, logd: float) -> float:
    with np.errstate(divide="ignore", under="ignore"):
        return logx + logd - float(np.log(vf.sigma(np.exp(logd))))


def solve_delta(vf: VarianceFunction, x: float, regime: str | None = None) -> float:
    """Root of x*d/sigma(d) = 1 via a geometrically expanded log bracket."""
    if not x > 0:
        raise ValueError("x must be positive")
    if regime is None:
        regime = "light" if x >= 1 else "heavy"
    rho = vf.lambda0 if regime == "light" else vf.alpha_inf
    logx = float(np.log(x))
    if 0 < rho < 1:
        guess = -logx / (1.0 - rho)
    else:
        guess = -logx
    guess = float(np.clip(guess, _LOG_LO + 1, _LOG_HI - 1))

    lo = hi = guess
    step = 1.0
    glo = ghi = _g(vf, logx, guess)
    while glo > 0:
        lo = max(lo - step, _LOG_LO)
        glo = _g(vf, logx, lo)
        step *= 2
        if lo <= _LOG_LO and glo > 0:
            raise DeltaSolveError(f"no root of x*d/sigma(d)=1 in [1e-300, 1e300] for x={x:g}")
    step = 1.0
    while ghi < 0:
        hi = min(hi + step, _LOG_HI)
        ghi = _g(vf, logx, hi)
        step *= 2
        if hi >= _LOG_HI and ghi < 0:
            raise DeltaSolveError(f"no root of x*d/sigma(d)=1 in [1e-300, 1e300] for x={x:g}")
    if lo == hi:
        d = float(np.exp(lo))
    else:
        if not vf.check_ratio_monotone(np.exp(lo), np.exp(hi), 64):
            raise DeltaSolveError("d/sigma(d) is not increasing on the bracket")
        logd = brentq(lambda v: _g(vf, logx, v), lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        d = float(np.exp(logd))
    res = abs(x * d / float(vf.sigma(d)) - 1.0)
    if res >= RESIDUAL_TOL:
        # one Newton step in log d polishes the last bits
        logd = np.log(d)
        h = 1e-6
        slope = (_g(vf, logx, logd + h) - _g(vf, logx, logd - h)) / (2 * h)
        d = float(np.exp(logd - _g(vf, logx, logd) / slope))
        res = abs(x * d / float(vf.sigma(d)) - 1.0)
        if res >= RESIDUAL_TOL:
            raise DeltaSolveError(f"residual {res:.3g} above tolerance for x={x:g}")
    return d


class DeltaMemo:
    """Per-experiment memo of delta keyed by x; safe for concurrent use."""

    def __init__(self, vf: VarianceFunction, regime: str | None = None):
        self.vf = vf
        self.regime = regime
        self._cache: dict[float, float] = {}
        self._lock = threading.Lock()

    def __call__(self, x: float) -> float:
        x = float(x)
        with self._lock:
            hit = self._cache.get(x)
        if hit is not None:
            return hit
        d = solve_delta(self.vf, x, self.regime)
        with self._lock:
            self._cache[x] = d
        return d


def check_delta_rv(vf: VarianceFunction, regime: str, decades: int = 4, spread_tol: float = 1e-2,
                   anchor: float | None = None) -> float:
    """Log-log slope of delta; light expects 1/(lambda-1), heavy 1/(alpha-1)."""
    if regime == "light":
        a = 8.0 if anchor is None else anchor
        xs = 10.0 ** np.arange(a, a + decades + 1)
    else:
        a = -8.0 if anchor is None else anchor
        xs = 10.0 ** np.arange(a - decades, a + 1)
    ld = np.log([solve_delta(vf, x, regime) for x in xs])
    slopes = np.diff(ld) / np.log(10.0)
    spread = float(slopes.max() - slopes.min())
    if spread > spread_tol:
        raise DeltaSolveError(f"delta slope did not settle (spread {spread:.3g}): {slopes.tolist()}")
    return float(slopes[-1] if regime == "light" else slopes[0])


@dataclass(frozen=True)
class ScaleFactors:
    time_scale: np.ndarray
    space_scale: np.ndarray
    rates: np.ndarray


def scale_factors(spec: NetworkSpec, vf: VarianceFunction, u: float, memo: DeltaMemo | None = None) -> ScaleFactors:
    r = spec.r(u)
    solve = memo if memo is not None else (lambda x: solve_delta(vf, x, spec.regime))
    d = np.array([solve(x) for x in r])
    s = np.asarray(vf.sigma(d), dtype=float)
    if np.any(np.abs(r * d / s - 1.0) >= RESIDUAL_TOL):
        raise DeltaSolveError("scale factors violate r*delta = sigma(delta)")
    return ScaleFactors(d, s, r)


def pstar_prelimit(spec: NetworkSpec, vf: VarianceFunction, u: float, memo: DeltaMemo | None = None) -> np.ndarray:
    sf = scale_factors(spec, vf, u, memo)
    w = sf.rates * sf.time_scale
    return spec.P * (w[:, None] / w[None, :])
