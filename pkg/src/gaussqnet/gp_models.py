"""Variance functions of the Gaussian input, regular-variation diagnostics and
the uniform bound fitter for the ratio F_x(t) = sigma(tx)/sigma(x)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

KINDS = ("power", "power_sum", "integrated_ou")
REGIMES = ("light", "heavy")


@dataclass(frozen=True)
class PowerBound:
    """sigma(t) <= C t^beta for t > t0 (light) or t < t0 (heavy)."""

    beta: float
    C: float
    t0: float


@dataclass(frozen=True)
class VarianceFunction:
    """sigma^2 of a centered Gaussian process with stationary increments.

    ``exponents`` are the exponents of sigma^2 (i.e. 2*lambda_k) and are only
    used by the power families.
    """

    kind: str
    exponents: tuple[float, ...] = ()
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown variance function kind {self.kind!r}")
        if self.kind == "integrated_ou":
            if self.exponents or self.weights:
                raise ValueError("integrated_ou takes no parameters")
            return
        if len(self.exponents) == 0 or len(self.exponents) != len(self.weights):
            raise ValueError("exponents and weights must be nonempty and of equal length")
        if self.kind == "power" and len(self.exponents) != 1:
            raise ValueError("power takes a single exponent")
        for e in self.exponents:
            if not (0.0 < e <= 2.0):
                raise ValueError(f"sigma^2 exponent {e} outside (0, 2]")
        for w in self.weights:
            if not w > 0.0:
                raise ValueError(f"weight {w} must be positive")

    @classmethod
    def power(cls, lam: float) -> "VarianceFunction":
        return cls("power", (2.0 * float(lam),), (1.0,))

    @classmethod
    def power_sum(cls, exponents: Sequence[float], weights: Sequence[float] | None = None) -> "VarianceFunction":
        exps = tuple(float(e) for e in exponents)
        ws = tuple(float(w) for w in weights) if weights is not None else (1.0,) * len(exps)
        return cls("power_sum", exps, ws)

    @classmethod
    def integrated_ou(cls) -> "VarianceFunction":
        return cls("integrated_ou")

    # regular-variation metadata
    @property
    def lambda0(self) -> float:
        if self.kind == "integrated_ou":
            return 1.0
        return min(self.exponents) / 2.0

    @property
    def alpha_inf(self) -> float:
        if self.kind == "integrated_ou":
            return 0.5
        return max(self.exponents) / 2.0

    @property
    def independent_increments(self) -> bool:
        """True when sigma^2 is linear, i.e. the input is a Brownian motion."""
        return self.kind != "integrated_ou" and all(e == 1.0 for e in self.exponents)

    def power_bound(self, regime: str) -> PowerBound:
        if regime not in REGIMES:
            raise ValueError(f"unknown regime {regime!r}")
        if self.kind == "integrated_ou":
            # sigma^2 <= t^2 everywhere and sigma^2 <= 2t everywhere
            return PowerBound(1.0, 1.0, 1.0) if regime == "heavy" else PowerBound(0.5, np.sqrt(2.0), 1.0)
        c = float(np.sqrt(sum(self.weights)))
        if regime == "light":
            return PowerBound(self.alpha_inf, c, 1.0)
        return PowerBound(self.lambda0, c, 1.0)

    def index(self, regime: str) -> float:
        return self.lambda0 if regime == "light" else self.alpha_inf

    # evaluation
    def sigma2(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(np.isnan(t)):
            raise ValueError("sigma is defined for t >= 0 only")
        if self.kind == "integrated_ou":
            return _iou_sigma2(t)
        out = np.zeros_like(t)
        for e, w in zip(self.exponents, self.weights):
            out = out + w * np.power(t, e)
        return out

    def sigma(self, t):
        return np.sqrt(self.sigma2(t))

    def increment_cov(self, h: float, k) -> np.ndarray:
        """Covariance between increments of length h at lag k (k >= 0 integers)."""
        k = np.asarray(k, dtype=float)
        if self.kind == "integrated_ou":
            out = np.exp(-k * h) * 4.0 * np.sinh(h / 2.0) ** 2
            return np.where(k == 0, _iou_sigma2(np.asarray(h, dtype=float)), out)
        out = np.zeros_like(k)
        for e, w in zip(self.exponents, self.weights):
            out = out + w * h**e * _half_second_difference(k, e)
        return out

    def to_dict(self) -> dict:
        if self.kind == "power":
            return {"kind": "power", "lambda": self.exponents[0] / 2.0}
        if self.kind == "power_sum":
            return {"kind": "power_sum", "exponents": list(self.exponents), "weights": list(self.weights)}
        return {"kind": "integrated_ou"}

    def check_ratio_monotone(self, lo: float, hi: float, n: int = 400) -> bool:
        """Check that d -> d/sigma(d) is strictly increasing on a log grid."""
        d = np.geomspace(lo, hi, n)
        g = np.log(d) - np.log(self.sigma(d))
        return bool(np.all(np.diff(g) > 0))


def _iou_sigma2(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    small = t < 1e-3
    ts = np.where(small, t, 0.0)
    series = ts**2 * (1.0 - ts / 3.0 + ts**2 / 12.0 - ts**3 / 60.0)
    tb = np.where(small, 1.0, t)
    big = 2.0 * (tb + np.expm1(-tb))
    return np.where(small, series, big)


def _half_second_difference(k: np.ndarray, a: float) -> np.ndarray:
    """0.5*((k+1)^a + |k-1|^a - 2 k^a), accurate for large k."""
    out = np.empty_like(k)
    k0 = k == 0
    out[k0] = 1.0
    k1 = k == 1
    out[k1] = 0.5 * (2.0**a - 2.0)
    big = k >= 2
    kb = k[big]
    inv = 1.0 / kb
    out[big] = 0.5 * kb**a * (np.expm1(a * np.log1p(inv)) + np.expm1(a * np.log1p(-inv)))
    return out


def sigma_eval(vf: VarianceFunction, t) -> float | np.ndarray:
    val = vf.sigma(t)
    return float(val) if np.ndim(val) == 0 else val


def f_ratio(vf: VarianceFunction, x, t):
    """F_x(t) = sigma(t x) / sigma(x)."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("x must be positive")
    t = np.asarray(t, dtype=float)
    if vf.kind == "power":
        val = np.power(t, vf.exponents[0] / 2.0) * np.ones_like(x)
    else:
        val = vf.sigma(t * x) / vf.sigma(x)
    return float(val) if np.ndim(val) == 0 else val


class RVIndexError(ValueError):
    def __init__(self, message: str, slopes):
        super().__init__(message)
        self.slopes = list(slopes)


def estimate_rv_index(vf: VarianceFunction, end: str, decades: int = 4, spread_tol: float = 1e-3,
                      anchor: float | None = None) -> float:
    """Log-log slope of sigma over ``decades`` decades approaching ``end``.

    Returns the slope of the decade closest to the end.
    """
    if end == "zero":
        a = -8.0 if anchor is None else anchor
        pts = 10.0 ** np.arange(a - decades, a + 1)
    elif end == "infinity":
        a = 8.0 if anchor is None else anchor
        pts = 10.0 ** np.arange(a, a + decades + 1)
    else:
        raise ValueError("end must be 'zero' or 'infinity'")
    ls = np.log(vf.sigma(pts))
    slopes = np.diff(ls) / np.log(10.0)
    spread = float(slopes.max() - slopes.min())
    if not np.all(np.isfinite(slopes)) or spread > spread_tol:
        raise RVIndexError(f"log-log slope did not settle (spread {spread:.3g})", slopes)
    return float(slopes[0] if end == "zero" else slopes[-1])


@dataclass(frozen=True)
class UniformBoundFit:
    gamma0: float
    gamma_inf: float
    frakC: float
    fraka: float
    regime: str = "light"
    eps: float = 0.0
    beta: float = float("nan")

    def bound(self, t):
        t = np.asarray(t, dtype=float)
        return self.frakC * (t**self.gamma_inf + t**self.gamma0)

    def max_ratio(self, vf: VarianceFunction, x_grid, t_grid) -> tuple[float, float, float]:
        """Largest F/(bound) over admissible grid points, with its (x, t)."""
        x = np.asarray(x_grid, dtype=float)
        x = x[x <= self.fraka] if self.regime == "light" else x[x >= self.fraka]
        return _worst(vf, x, np.asarray(t_grid, dtype=float), self.gamma0, self.gamma_inf, 1.0 / self.frakC)

    def verify(self, vf: VarianceFunction, x_grid, t_grid, rtol: float = 1e-9) -> bool:
        r, _, _ = self.max_ratio(vf, x_grid, t_grid)
        return r <= 1.0 + rtol


class UniformBoundViolation(ValueError):
    def __init__(self, message: str, worst_x: float, worst_t: float, ratio: float, gamma0: float, gamma_inf: float):
        super().__init__(message)
        self.worst_x = worst_x
        self.worst_t = worst_t
        self.ratio = ratio
        self.gamma0 = gamma0
        self.gamma_inf = gamma_inf


def _worst(vf, x, t, g0, ginf, scale=1.0):
    """max over grid of scale*F/(t^ginf + t^g0) and of scale*F/(2 t^ginf) for t > 1."""
    X, T = np.meshgrid(x, t, indexing="ij")
    F = np.asarray(f_ratio(vf, X, T), dtype=float) if x.size else np.zeros((0, t.size))
    r = scale * F / (T**ginf + T**g0)
    r2 = np.where(T > 1, scale * F / (2.0 * T**ginf), -np.inf)
    r = np.maximum(r, r2)
    if r.size == 0:
        return 0.0, float("nan"), float("nan")
    idx = np.unravel_index(int(np.argmax(r)), r.shape)
    return float(r[idx]), float(X[idx]), float(T[idx])


def _extend(grid: np.ndarray, lo_decades: float, hi_decades: float, n_per_decade: int = 8) -> np.ndarray:
    lo, hi = np.log10(grid.min()), np.log10(grid.max())
    parts = [grid]
    if lo_decades > 0:
        parts.append(np.logspace(lo - lo_decades, lo, int(n_per_decade * lo_decades) + 1))
    if hi_decades > 0:
        parts.append(np.logspace(hi, hi + hi_decades, int(n_per_decade * hi_decades) + 1))
    return np.unique(np.concatenate(parts))


def fit_uniform_bound(vf: VarianceFunction, regime: str, x_grid, t_grid, eps: float | None = None,
                      gamma0: float | None = None, gamma_inf: float | None = None,
                      extend_decades: float = 2.0, growth_tol: float = 0.05) -> UniformBoundFit:
    """Fit F_x(t) <= c (t^g_inf + t^g0) over the grids.

    Candidates come from g = rho +- eps combined with the power-bound exponent
    beta. eps = 0 is tried first, then the default min(rho, 1-rho)/4. A
    candidate is rejected when the ratio keeps growing on a grid extended by
    ``extend_decades`` decades.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    x = np.asarray(x_grid, dtype=float).ravel()
    t = np.asarray(t_grid, dtype=float).ravel()
    if x.size == 0 or t.size == 0 or np.any(x <= 0) or np.any(t <= 0):
        raise ValueError("grids must be nonempty and positive")
    rho = vf.index(regime)
    if not (0.0 < rho < 1.0):
        raise ValueError(f"index {rho} outside (0,1): {regime} regime not valid for {vf.kind}")
    beta = vf.power_bound(regime).beta
    fraka = float(x.max()) if regime == "light" else float(x.min())

    if gamma0 is not None or gamma_inf is not None:
        e = eps if eps is not None else min(rho, 1 - rho) / 4.0
        g0d, gid = _construct(rho, beta, e, regime)
        candidates = [(e, gamma0 if gamma0 is not None else g0d, gamma_inf if gamma_inf is not None else gid)]
    else:
        eps_list = [eps] if eps is not None else [0.0, min(rho, 1 - rho) / 4.0]
        candidates = [(e,) + _construct(rho, beta, e, regime) for e in eps_list]

    if regime == "light":
        x_ext = _extend(x, extend_decades, 0.0)
    else:
        x_ext = _extend(x, 0.0, extend_decades)
    t_ext = _extend(t, extend_decades, extend_decades)

    last = None
    for e, g0, gi in candidates:
        c, _, _ = _worst(vf, x, t, g0, gi)
        c_ext, wx, wt = _worst(vf, x_ext, t_ext, g0, gi)
        if c > 0 and c_ext <= c * (1.0 + growth_tol):
            return UniformBoundFit(float(g0), float(gi), float(c), fraka, regime, float(e), float(beta))
        last = (e, g0, gi, c, c_ext, wx, wt)
    e, g0, gi, c, c_ext, wx, wt = last
    raise UniformBoundViolation(
        f"no bound F <= c(t^{gi:.3g} + t^{g0:.3g}): ratio grows to {c_ext:.4g} "
        f"(grid max {c:.4g}) at x={wx:.3g}, t={wt:.3g}",
        wx, wt, c_ext / c if c > 0 else float("inf"), g0, gi)


def _construct(rho: float, beta: float, eps: float, regime: str) -> tuple[float, float]:
    if regime == "light":
        a = max(beta, rho + eps)
        return min(a, rho - eps), max(a, rho - eps)
    return min(beta, rho - eps), rho + eps
