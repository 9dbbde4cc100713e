"""Domains, boundary-distance power weights and Muckenhoupt constants.

Only two domain shapes are supported, an axis-aligned box and a ball, both
with exact distance-to-boundary formulas.  The A_p estimator works over a
dyadic family of cubes anchored on the bounding cube of the domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_CLOSURE_TOL = 1e-12


class DomainError(ValueError):
    """Raised when a point lies outside the closure of a domain."""


@dataclass(frozen=True)
class DomainSpec:
    """Axis-aligned box ``origin + [0, extents]`` or ball of radius ``extents[0]``.

    For a ball, ``origin`` is the center.
    """

    kind: str
    extents: tuple[float, ...]
    dim: int = 3
    origin: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("box", "ball"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.dim not in (1, 2, 3):
            raise ValueError("dim must be 1, 2 or 3")
        ext = tuple(float(e) for e in np.atleast_1d(self.extents))
        if self.kind == "box" and len(ext) == 1:
            ext = ext * self.dim
        if self.kind == "box" and len(ext) != self.dim:
            raise ValueError("box needs one extent per axis")
        if self.kind == "ball" and len(ext) != 1:
            raise ValueError("ball needs a single radius")
        if any(e <= 0 for e in ext):
            raise ValueError("extents must be strictly positive")
        object.__setattr__(self, "extents", ext)
        org = (0.0,) * self.dim if self.origin is None else tuple(float(o) for o in self.origin)
        if len(org) != self.dim:
            raise ValueError("origin must have dim entries")
        object.__setattr__(self, "origin", org)

    @classmethod
    def unit_cube(cls, dim: int = 3) -> "DomainSpec":
        return cls("box", (1.0,) * dim, dim)

    @classmethod
    def unit_ball(cls, dim: int = 3) -> "DomainSpec":
        return cls("ball", (1.0,), dim)

    @property
    def radius(self) -> float:
        return self.extents[0]

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        o = np.asarray(self.origin)
        if self.kind == "box":
            return o, o + np.asarray(self.extents)
        return o - self.radius, o + self.radius

    def volume(self) -> float:
        if self.kind == "box":
            return float(np.prod(self.extents))
        r = self.radius
        return {1: 2 * r, 2: np.pi * r**2, 3: 4.0 / 3.0 * np.pi * r**3}[self.dim]

    def contains(self, x, tol: float = _CLOSURE_TOL) -> np.ndarray:
        return self._signed_distance(np.asarray(x, dtype=float)) >= -tol

    def _signed_distance(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.dim:
            raise ValueError(f"points must have {self.dim} coordinates")
        o = np.asarray(self.origin)
        if self.kind == "box":
            lo = x - o
            hi = o + np.asarray(self.extents) - x
            return np.minimum(lo, hi).min(axis=-1)
        return self.radius - np.linalg.norm(x - o, axis=-1)

    def distance(self, x) -> np.ndarray | float:
        return distance(self, x)


def distance(domain: DomainSpec, x) -> np.ndarray | float:
    """Exact distance from ``x`` (shape ``(..., dim)``) to the boundary."""
    x = np.asarray(x, dtype=float)
    sd = domain._signed_distance(x)
    if np.any(sd < -_CLOSURE_TOL * max(1.0, max(domain.extents))):
        raise DomainError("point outside the closure of the domain")
    out = np.maximum(sd, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PowerWeight:
    """The weight ``d(x) ** alpha``."""

    alpha: float
    domain: DomainSpec

    def __call__(self, x) -> np.ndarray | float:
        return weight_eval(self, x)

    def of_distance(self, d) -> np.ndarray:
        return _power(np.asarray(d, dtype=float), self.alpha)

    def is_muckenhoupt(self, p: float) -> bool:
        """Criticality test ``-1 < alpha < p - 1``."""
        return -1.0 < self.alpha < p - 1.0


def _power(d: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 0:
        return np.ones_like(d)
    with np.errstate(divide="ignore"):
        return np.where(d > 0, np.power(np.where(d > 0, d, 1.0), alpha), 0.0 if alpha > 0 else np.inf)


def weight_eval(w: PowerWeight, x, return_overflow: bool = False):
    """Evaluate ``d(x) ** alpha``.

    At boundary points the value is 0 for ``alpha > 0`` and ``inf`` for
    ``alpha < 0``; with ``return_overflow`` the second is also flagged.
    """
    d = np.asarray(distance(w.domain, x), dtype=float)
    val = _power(d, w.alpha)
    out = float(val) if val.ndim == 0 else val
    if return_overflow:
        return out, bool(np.any(np.isinf(val)))
    return out


@dataclass(frozen=True)
class DyadicCubeFamily:
    """Nested dyadic cubes of side ``side / 2**j`` for ``j = 0..levels``."""

    origin: tuple[float, ...]
    side: float
    levels: int

    def __post_init__(self):
        if self.levels < 0:
            raise ValueError("levels must be non-negative")
        if self.side <= 0:
            raise ValueError("side must be positive")
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @classmethod
    def covering(cls, domain: DomainSpec, levels: int) -> "DyadicCubeFamily":
        lo, hi = domain.bounding_box()
        return cls(tuple(lo), float(np.max(hi - lo)), levels)

    @property
    def dim(self) -> int:
        return len(self.origin)

    def cube_side(self, j: int) -> float:
        return self.side / 2**j

    def corners(self, j: int) -> np.ndarray:
        """Lower corners of all level-``j`` cubes, shape ``(2**(j*dim), dim)``."""
        n = 2**j
        idx = np.stack(np.meshgrid(*([np.arange(n)] * self.dim), indexing="ij"), axis=-1)
        return np.asarray(self.origin) + self.cube_side(j) * idx.reshape(-1, self.dim)


def boundary_cutoff(levels: int) -> float:
    """Relative depth of the boundary layer excluded from cube averages.

    The layer ``d < cutoff * side`` is dropped from every average at
    refinement ``levels``; the cutoff is ``2**-(2**(levels+1))``, so its
    logarithm doubles with each refinement.  For weights in A_p the excluded
    mass is negligible; for non-A_p weights the truncated averages diverge.
    """
    return 2.0 ** -(2 ** (levels + 1))


def _axis_survival(t, a, b, lo, hi):
    """Fraction of ``x in [a, b]`` with ``min(x - lo, hi - x) > t`` and its t-derivative."""
    upper = np.minimum(b, hi - t)
    lower = np.maximum(a, lo + t)
    width = b - a
    length = upper - lower
    pos = length > 0
    surv = np.where(pos, length / width, 0.0)
    slope = np.where(pos, (-(hi - t < b).astype(float) - (lo + t > a).astype(float)) / width, 0.0)
    return surv, slope


def _distance_density(t, lo, hi, dlo, dhi):
    """Density of ``d(x)`` for x uniform on the boxes ``[lo, hi]`` (rows), at times ``t``."""
    surv = []
    slope = []
    for ax in range(lo.shape[1]):
        s, ds = _axis_survival(t, lo[:, ax, None], hi[:, ax, None], dlo[ax], dhi[ax])
        surv.append(s)
        slope.append(ds)
    dens = np.zeros_like(t)
    for i in range(len(surv)):
        term = -slope[i]
        for k in range(len(surv)):
            if k != i:
                term = term * surv[k]
        dens = dens + term
    return dens


_GL_X, _GL_W = np.polynomial.legendre.leggauss(6)


def _box_moments(lo: np.ndarray, hi: np.ndarray, dom: DomainSpec, powers, cutoff: float):
    """``int g(d) dx / int dx`` over ``[lo, hi] cap {d > cutoff}`` for ``g = d**beta``.

    The distance ``d = min_axes min(x - L, U - x)`` of a point uniform in a box
    is the minimum of independent per-axis distances, so its law has an
    explicit piecewise-quadratic density.  Pieces away from ``t = 0`` use a
    6-point Gauss rule; the piece starting at 0 is integrated exactly.
    """
    dlo, dhi = dom.bounding_box()
    n, dim = lo.shape
    cand = [np.zeros((n, 1))]
    for ax in range(dim):
        a, b = lo[:, ax], hi[:, ax]
        L, U = dlo[ax], dhi[ax]
        cand.append(np.stack([a - L, U - b, np.full(n, 0.5 * (U - L)), b - L, U - a], axis=1))
    bp = np.sort(np.concatenate(cand, axis=1), axis=1)
    tmax = np.minimum.reduce([np.minimum(hi[:, ax] - dlo[ax], dhi[ax] - lo[:, ax]) for ax in range(dim)])
    bp = np.clip(bp, 0.0, tmax[:, None])
    s0, s1 = bp[:, :-1], bp[:, 1:]
    at_zero = (s0 == 0.0) & (s1 > 0.0)
    t0 = np.maximum(s0, cutoff)
    t1 = np.maximum(s1, t0)
    span = np.where(at_zero, 0.0, t1 - t0)
    powers = list(powers)
    totals = np.zeros((len(powers), n))
    mass = np.zeros(n)
    for gx, gw in zip(_GL_X, _GL_W):
        tt = t0 + 0.5 * (gx + 1.0) * span
        wgt = 0.5 * gw * span * _distance_density(tt, lo, hi, dlo, dhi)
        mass += wgt.sum(axis=1)
        for k, beta in enumerate(powers):
            totals[k] += (wgt * np.power(np.where(tt > 0, tt, 1.0), beta)).sum(axis=1)
    # the piece starting at d = 0 has density c0 + c1 t + c2 t^2; integrate exactly
    rows, cols = np.nonzero(at_zero)
    if rows.size:
        end = s1[rows, cols]
        taus = np.array([0.25, 0.5, 0.75])
        dens = _distance_density(end[:, None] * taus[None, :], lo[rows], hi[rows], dlo, dhi)
        V = np.vander(taus, 3, increasing=True)
        coef = np.linalg.solve(V, dens.T).T
        lo_tau = np.minimum(cutoff / end, 1.0)
        m0 = np.zeros(len(rows))
        for k in range(3):
            m0 += coef[:, k] * (1.0 - lo_tau ** (k + 1)) / (k + 1)
        np.add.at(mass, rows, m0 * end)
        for j, beta in enumerate(powers):
            acc = np.zeros(len(rows))
            for k in range(3):
                e = beta + k + 1
                if e == 0:
                    acc += coef[:, k] * (-np.log(lo_tau))
                else:
                    acc += coef[:, k] * (1.0 - lo_tau ** e) / e
            np.add.at(totals[j], rows, acc * end ** (beta + 1))
    return totals / mass


def _level_products(w: PowerWeight, lo: np.ndarray, hi: np.ndarray, p: float, cutoff: float):
    """A_p products for boxes ``[lo, hi]`` inside a box domain."""
    if w.alpha == 0:
        return np.ones(len(lo))
    out = np.empty(len(lo))
    chunk = 20000
    for s in range(0, len(lo), chunk):
        avg_w, avg_dual = _box_moments(lo[s:s + chunk], hi[s:s + chunk], w.domain,
                                       (w.alpha, w.alpha / (1.0 - p)), cutoff)
        out[s:s + chunk] = avg_w * avg_dual ** (p - 1.0)
    return out


def _level_products_masked(w: PowerWeight, lo: np.ndarray, side: float, p: float, order: int):
    """Midpoint sub-grid products restricted to the domain (used for balls)."""
    dim = w.domain.dim
    ref = (np.arange(order) + 0.5) / order
    nodes = np.stack(np.meshgrid(*([ref] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    dual = 1.0 / (1.0 - p)
    out = np.full(len(lo), np.nan)
    chunk = max(1, 4_000_000 // len(nodes))
    for start in range(0, len(lo), chunk):
        pts = lo[start:start + chunk, None, :] + side * nodes[None]
        sd = w.domain._signed_distance(pts)
        inside = sd > 0
        cnt = inside.sum(axis=1)
        d = np.where(inside, sd, 1.0)
        avg_w = np.where(inside, _power(d, w.alpha), 0).sum(axis=1)
        avg_dual = np.where(inside, _power(d, w.alpha * dual), 0).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            val = (avg_w / cnt) * (avg_dual / cnt) ** (p - 1.0)
        out[start:start + chunk] = np.where(cnt > 0, val, np.nan)
    return out


def ap_level_maxima(w: PowerWeight, cubes: DyadicCubeFamily, p: float, quadrature_order: int = 8) -> np.ndarray:
    """Maximum A_p product over each level ``j = 0..cubes.levels``."""
    if p <= 1:
        raise ValueError("p must exceed 1")
    dom = w.domain
    cutoff = boundary_cutoff(cubes.levels) * cubes.side
    dlo, dhi = dom.bounding_box()
    maxima = np.full(cubes.levels + 1, np.nan)
    for j in range(cubes.levels + 1):
        lo = cubes.corners(j)
        side = cubes.cube_side(j)
        if dom.kind == "box":
            clo = np.maximum(lo, dlo)
            chi = np.minimum(lo + side, dhi)
            keep = np.all(chi - clo > 1e-12 * side, axis=1)
            if not keep.any():
                continue
            vals = _level_products(w, clo[keep], chi[keep], p, cutoff)
        else:
            vals = _level_products_masked(w, lo, side, p, quadrature_order)
        vals = vals[np.isfinite(vals)] if np.isnan(vals).any() else vals
        if vals.size:
            maxima[j] = np.max(vals)
    if np.all(np.isnan(maxima)):
        raise ValueError("no cube of the family meets the domain interior")
    return maxima


def ap_constant(w: PowerWeight, cubes: DyadicCubeFamily, p: float, quadrature_order: int = 8) -> float:
    """Estimate ``sup_Q (avg_Q w) (avg_Q w^{1/(1-p)})^{p-1}`` from below.

    Averages are taken over ``Q`` intersected with the domain.  On box
    domains they are computed from the exact law of ``d`` on each cube, with
    the boundary layer of :func:`boundary_cutoff` removed; on balls a
    midpoint sub-grid of ``quadrature_order`` points per axis is used.
    """
    return float(np.nanmax(ap_level_maxima(w, cubes, p, quadrature_order)))


def ap_refinement_sweep(alpha: float, p: float, levels, domain: DomainSpec | None = None,
                        quadrature_order: int = 8) -> list[float]:
    """``ap_constant`` for each maximal level in ``levels``."""
    domain = domain or DomainSpec.unit_cube()
    w = PowerWeight(alpha, domain)
    return [ap_constant(w, DyadicCubeFamily.covering(domain, J), p, quadrature_order) for J in levels]


__all__ = [
    "DomainError",
    "DomainSpec",
    "DyadicCubeFamily",
    "PowerWeight",
    "ap_constant",
    "ap_level_maxima",
    "ap_refinement_sweep",
    "distance",
    "boundary_cutoff",
    "weight_eval",
]
