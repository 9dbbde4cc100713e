"""Stress law, monotone p-operators, Bogovskii right inverse and maximal function.

The discrete stress is the gradient of the convex energy

    J(omega) = sum_c V d_c^alpha Phi(|omega|_c),   Phi'(s) = (kappa + s)^(p-2) s,

where ``|omega|_c`` is the cell magnitude built from averages of squared
edge values.  Each edge therefore receives the multiplier
``m_e = W_e^{-1} sum_{c ~ e} (V/4) d_c^alpha (kappa + |omega|_c)^(p-2)``
and ``S_e = m_e omega_e``.  Monotonicity and the energy identity
``<S(omega), omega> = sum_c V d^alpha (kappa + |omega|)^(p-2) |omega|^2`` hold
exactly, not only up to quadrature error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.ndimage as ndi
from scipy.special import beta as beta_fn

from dclab.fields import (
    EDGE,
    FACE,
    Grid,
    ScalarField,
    StaggeredField,
    operators,
)
from dclab.geometry import DomainSpec, PowerWeight


@dataclass(frozen=True)
class StressParams:
    p: float
    alpha: float = 0.0
    kappa: float = 0.0

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError("p must exceed 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")


def stress_pointwise(params: StressParams, d, omega) -> np.ndarray:
    """``d^alpha (kappa + |omega|)^(p-2) omega`` for vectors in the last axis."""
    omega = np.asarray(omega, dtype=float)
    d = np.asarray(d, dtype=float)
    mag = np.linalg.norm(omega, axis=-1)
    return (_cell_mu(params, d, mag))[..., None] * omega


def _cell_mu(params: StressParams, dalpha_or_d, mag, *, is_weight: bool = False) -> np.ndarray:
    """Scalar factor ``w (kappa + |omega|)^(p-2)``, zero where both weight and |omega| vanish."""
    w = dalpha_or_d if is_weight else (np.ones_like(mag) if params.alpha == 0 else
                                       np.power(np.maximum(dalpha_or_d, 0.0), params.alpha))
    base = params.kappa + mag
    with np.errstate(divide="ignore", invalid="ignore"):
        fac = np.where(base > 0, np.power(np.where(base > 0, base, 1.0), params.p - 2.0), 0.0)
    return w * fac


def cell_weight_values(grid: Grid, w) -> np.ndarray:
    """Flat cell values of the weight: a PowerWeight, an explicit array, or ``None``."""
    if w is None:
        return np.ones(int(np.prod(grid.cells)))
    if isinstance(w, PowerWeight):
        return w.of_distance(grid.distance_cells()).ravel()
    arr = np.asarray(w, dtype=float)
    if arr.shape != grid.cells and arr.size != int(np.prod(grid.cells)):
        raise ValueError("weight array does not match the grid")
    return arr.ravel()


def stress_multipliers(params: StressParams, w, grid: Grid, omega: StaggeredField,
                       floor: float = 0.0) -> np.ndarray:
    """Edge multipliers ``m_e`` of the collocated stress (``floor`` bounds |omega| from below)."""
    ops = operators(grid)
    mag = np.sqrt(ops.edge_sq_to_cell(omega.flat))
    if floor > 0:
        mag = np.maximum(mag, floor)
    mu = _cell_mu(params, cell_weight_values(grid, w), mag, is_weight=True)
    return ops.edge_coefficient(mu)


def stress(params: StressParams, w, grid: Grid, omega: StaggeredField) -> StaggeredField:
    """Discrete ``d^alpha (kappa + |omega|)^(p-2) omega`` on edges.

    ``w`` is a :class:`PowerWeight`, an explicit array of non-negative cell
    weights, or ``None`` for the unweighted law.
    """
    if omega.location != EDGE:
        raise ValueError("stress expects a curl (edge) field")
    m = stress_multipliers(params, w, grid, omega)
    return StaggeredField.from_flat(grid, m * omega.flat, EDGE)


def stress_energy(params: StressParams, w, grid: Grid, omega: StaggeredField) -> float:
    """``<S(omega), omega> = sum_c V w_c (kappa + |omega|_c)^(p-2) |omega|_c^2``."""
    ops = operators(grid)
    mag = np.sqrt(ops.edge_sq_to_cell(omega.flat))
    mu = _cell_mu(params, cell_weight_values(grid, w), mag, is_weight=True)
    return float(ops.vol * np.sum(mu * mag**2))


def monotonicity_gap(params: StressParams, w, grid: Grid, omega1: StaggeredField, omega2: StaggeredField,
                     return_scale: bool = False):
    """``<S(omega1) - S(omega2), omega1 - omega2>`` in the edge inner product.

    With ``return_scale`` also returns ``<|S1| + |S2|, |omega1| + |omega2|>``,
    the magnitude against which roundoff should be judged.
    """
    ops = operators(grid)
    s1 = stress(params, w, grid, omega1).flat
    s2 = stress(params, w, grid, omega2).flat
    o1, o2 = omega1.flat, omega2.flat
    gap = float(np.dot(ops.w_edge_all * (s1 - s2), o1 - o2))
    if return_scale:
        scale = float(np.dot(ops.w_edge_all * (np.abs(s1) + np.abs(s2)), np.abs(o1) + np.abs(o2)))
        return gap, scale
    return gap


def sym_magnitude(grid: Grid, v: StaggeredField) -> np.ndarray:
    """Cell values of ``|Dv|`` (off-diagonal entries counted twice)."""
    ops = operators(grid)
    D = ops.sym_grad @ v.flat
    n = ops.ncell
    sq = D[0:n] ** 2 + D[n:2 * n] ** 2 + D[2 * n:3 * n] ** 2
    sq = sq + 2.0 * ops.edge_sq_to_cell(D[3 * n:])
    return np.sqrt(sq)


def sym_multipliers(grid: Grid, v: StaggeredField, p_reg: float, weight: np.ndarray | None = None,
                    floor: float = 0.0) -> np.ndarray:
    """Multipliers on the symmetric-gradient layout for ``w |Dv|^(p_reg-2) Dv``."""
    ops = operators(grid)
    mag = sym_magnitude(grid, v)
    if floor > 0:
        mag = np.maximum(mag, floor)
    w = np.ones(ops.ncell) if weight is None else weight
    mu = _cell_mu(StressParams(p_reg), w, mag, is_weight=True)
    return np.concatenate([mu, mu, mu, ops.edge_coefficient(mu)])


def p_stokes_operator(grid: Grid, v: StaggeredField, p_reg: float, eps: float,
                      weight: np.ndarray | None = None) -> StaggeredField:
    """Discrete ``-eps div(|Dv|^(p_reg-2) Dv)`` (optionally with a cell weight inside).

    Assembled as ``eps D^* (m Dv)`` where ``D^*`` is the adjoint of the
    staggered symmetric gradient, so ``<A v, v> >= 0`` exactly.
    """
    if eps == 0:
        return StaggeredField.zeros(grid)
    ops = operators(grid)
    m = sym_multipliers(grid, v, p_reg, weight)
    out = eps * (ops.sym_adj @ (m * (ops.sym_grad @ v.flat)))
    return StaggeredField.from_flat(grid, out).with_dirichlet()


def p_stokes_energy(grid: Grid, v: StaggeredField, p_reg: float, weight: np.ndarray | None = None) -> float:
    """``sum_c V w_c |Dv|_c^p_reg``."""
    mag = sym_magnitude(grid, v)
    w = 1.0 if weight is None else weight
    return float(grid.cell_volume * np.sum(w * mag**p_reg))


# ---------------------------------------------------------------------------
# maximal function


def maximal_function(grid: Grid, g: ScalarField | np.ndarray) -> ScalarField:
    """Dyadic centered-cube maximal function of ``|g|`` with zero extension.

    Cubes have half-widths ``2^k - 1`` cells, ``k = 0, 1, ...``, up to the
    first cube containing the whole grid.
    """
    vals = np.abs(g.values if isinstance(g, ScalarField) else np.asarray(g, dtype=float))
    out = vals.copy()
    nmax = max(vals.shape)
    k = 1
    while True:
        r = 2**k - 1
        out = np.maximum(out, ndi.uniform_filter(vals, size=2 * r + 1, mode="constant", cval=0.0))
        if r >= nmax:
            break
        k += 1
    return ScalarField(grid, out)


# ---------------------------------------------------------------------------
# Bogovskii operator


class BogovskiiMeanError(ValueError):
    def __init__(self, mean: float):
        super().__init__(f"Bogovskii operator needs zero-mean data; mean is {mean:.3e}")
        self.mean = mean


@dataclass(frozen=True)
class BogovskiiKernel:
    """Bogovskii operator on the ball ``|x - center| < radius``.

    The core is ``c (1 - |x - center|^2 / (core_ratio radius)^2)^core_power``
    with unit integral.  ``n_polar x 2 n_polar`` directions (Gauss in the
    polar cosine, uniform in azimuth) and a ray step of ``ray_step`` cells
    control the quadrature.
    """

    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0
    core_ratio: float = 0.75
    core_power: int = 4
    n_polar: int = 8
    ray_step: float = 0.5

    def __post_init__(self):
        if self.radius <= 0 or not 0 < self.core_ratio <= 1:
            raise ValueError("invalid ball or core size")
        if self.core_power < 2:
            raise ValueError("core power must be at least 2 for a smooth core")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def domain(self) -> DomainSpec:
        return DomainSpec("ball", (self.radius,), dim=3, origin=self.center)

    @property
    def core_radius(self) -> float:
        return self.core_ratio * self.radius

    @property
    def core_constant(self) -> float:
        m = self.core_power
        integral = 4 * np.pi * self.core_radius**3 * 0.5 * beta_fn(1.5, m + 1)
        return 1.0 / integral

    def core(self, x: np.ndarray) -> np.ndarray:
        r2 = ((np.asarray(x) - np.asarray(self.center)) ** 2).sum(-1) / self.core_radius**2
        return np.where(r2 < 1, self.core_constant * np.clip(1 - r2, 0, None) ** self.core_power, 0.0)

    def directions(self) -> tuple[np.ndarray, np.ndarray]:
        mu, wmu = np.polynomial.legendre.leggauss(self.n_polar)
        naz = 2 * self.n_polar
        phi = 2 * np.pi * (np.arange(naz) + 0.5) / naz
        st = np.sqrt(1 - mu**2)
        dirs = np.stack([np.outer(st, np.cos(phi)), np.outer(st, np.sin(phi)),
                         np.outer(mu, np.ones(naz))], axis=-1).reshape(-1, 3)
        w = np.outer(wmu, np.full(naz, 2 * np.pi / naz)).ravel()
        return dirs, w

    def ball_mask(self, grid: Grid) -> np.ndarray:
        r = np.linalg.norm(grid.cell_centers() - np.asarray(self.center), axis=-1)
        return r < self.radius

    def volume_fractions(self, grid: Grid, sub: int = 6) -> np.ndarray:
        """Fraction of each cell inside the ball (sub-sampled on cut cells)."""
        x = grid.cell_centers() - np.asarray(self.center)
        r = np.linalg.norm(x, axis=-1)
        half_diag = 0.5 * float(np.linalg.norm(grid.spacing))
        frac = (r < self.radius).astype(float)
        cut = np.abs(r - self.radius) < half_diag
        if np.any(cut):
            off = (np.arange(sub) + 0.5) / sub - 0.5
            o = np.stack(np.meshgrid(off, off, off, indexing="ij"), axis=-1).reshape(-1, 3) * grid.spacing
            rs = np.linalg.norm(x[cut][:, None, :] + o[None], axis=-1)
            frac[cut] = (rs < self.radius).mean(axis=1)
        return frac

    def ball_mean(self, grid: Grid, f: np.ndarray) -> float:
        phi = self.volume_fractions(grid)
        return float((phi * f).sum() / phi.sum())


_GL6_X, _GL6_W = np.polynomial.legendre.leggauss(6)


@numba.njit(cache=True)
def _bog_kernel(f, lower, h, shape, nodes, dirs, dw, R, Rc, cc, m, step, glx, glw):
    nn = nodes.shape[0]
    ns = f.shape[1]
    out = np.zeros((nn, 3, ns))
    acc = np.zeros(ns)
    nx, ny, nz = shape[0], shape[1], shape[2]
    for n in range(nn):
        x0, x1, x2 = nodes[n, 0], nodes[n, 1], nodes[n, 2]
        r2 = x0 * x0 + x1 * x1 + x2 * x2
        if r2 >= R * R:
            continue
        for d in range(dirs.shape[0]):
            t0, t1, t2 = dirs[d, 0], dirs[d, 1], dirs[d, 2]
            b = x0 * t0 + x1 * t1 + x2 * t2
            # forward chord through the core
            disc = b * b - (r2 - Rc * Rc)
            if disc <= 0.0:
                continue
            sq = np.sqrt(disc)
            rho2 = -b + sq
            if rho2 <= 0.0:
                continue
            rho1 = max(-b - sq, 0.0)
            half = 0.5 * (rho2 - rho1)
            mid = 0.5 * (rho2 + rho1)
            W0 = 0.0
            W1 = 0.0
            W2 = 0.0
            for q in range(glx.shape[0]):
                rho = mid + half * glx[q]
                y2 = r2 + 2.0 * rho * b + rho * rho
                val = 1.0 - y2 / (Rc * Rc)
                if val <= 0.0:
                    continue
                wv = glw[q] * half * cc * val**m
                W0 += wv
                W1 += wv * rho
                W2 += wv * rho * rho
            # backward ray to the sphere
            L = b + np.sqrt(b * b - r2 + R * R)
            nsteps = int(np.ceil(L / step))
            if nsteps < 1:
                nsteps = 1
            ds = L / nsteps
            for k in range(ns):
                acc[k] = 0.0
            for i in range(nsteps):
                s = (i + 0.5) * ds
                K = ds * (W2 + 2.0 * s * W1 + s * s * W0)
                p0 = (x0 - s * t0 - lower[0]) / h[0] - 0.5
                p1 = (x1 - s * t1 - lower[1]) / h[1] - 0.5
                p2 = (x2 - s * t2 - lower[2]) / h[2] - 0.5
                i0 = int(np.floor(p0))
                i1 = int(np.floor(p1))
                i2 = int(np.floor(p2))
                f0 = p0 - i0
                f1 = p1 - i1
                f2 = p2 - i2
                for a in range(2):
                    ia = i0 + a
                    if ia < 0 or ia >= nx:
                        continue
                    wa = f0 if a == 1 else 1.0 - f0
                    for bb in range(2):
                        ib = i1 + bb
                        if ib < 0 or ib >= ny:
                            continue
                        wb = wa * (f1 if bb == 1 else 1.0 - f1)
                        for c in range(2):
                            ic = i2 + c
                            if ic < 0 or ic >= nz:
                                continue
                            wgt = K * wb * (f2 if c == 1 else 1.0 - f2)
                            if wgt == 0.0:
                                continue
                            row = (ia * ny + ib) * nz + ic
                            for k in range(ns):
                                acc[k] += wgt * f[row, k]
            wd = dw[d]
            for k in range(ns):
                out[n, 0, k] += wd * t0 * acc[k]
                out[n, 1, k] += wd * t1 * acc[k]
                out[n, 2, k] += wd * t2 * acc[k]
    return out


def bogovskii_many(kernel: BogovskiiKernel, grid: Grid, fs: np.ndarray, mean_tol: float = 1e-10) -> list[StaggeredField]:
    """Apply the operator to a stack of cell arrays ``fs`` (shape ``(n, *cells)``)."""
    fs = np.asarray(fs, dtype=float)
    if fs.shape[1:] != grid.cells:
        raise ValueError("data do not match the grid")
    phi = kernel.volume_fractions(grid)
    for f in fs:
        total = (phi * f).sum()
        scale = (phi * np.abs(f)).sum()
        if abs(total) > mean_tol * max(scale, 1e-300):
            raise BogovskiiMeanError(total / phi.sum())
    center = np.asarray(kernel.center)
    dirs, dw = kernel.directions()
    fstack = np.ascontiguousarray(fs.reshape(len(fs), -1).T)
    step = kernel.ray_step * float(grid.spacing.min())
    comps = []
    for a in range(3):
        rel = grid.face_coords(a).reshape(-1, 3) - center
        inside = np.linalg.norm(rel, axis=1) < kernel.radius
        vals = _bog_kernel(fstack, grid.lower - center, grid.spacing, np.array(grid.cells, dtype=np.int64),
                           np.ascontiguousarray(rel[inside]), dirs, dw, kernel.radius, kernel.core_radius,
                           kernel.core_constant, kernel.core_power, step, _GL6_X, _GL6_W)
        full = np.zeros((rel.shape[0], len(fs)))
        full[inside] = vals[:, a, :]
        comps.append(full)
    out = []
    for k in range(len(fs)):
        u = StaggeredField(grid, tuple(comps[a][:, k].reshape(grid.shape(FACE, a)) for a in range(3)))
        out.append(u.with_dirichlet())
    return out


def bogovskii(kernel: BogovskiiKernel, f: ScalarField, mean_tol: float = 1e-10) -> StaggeredField:
    """Solve ``div u = f`` in the kernel ball with ``u = 0`` on its boundary.

    ``f`` holds point values at cell centers of any 3D grid covering the
    ball.  Rays are cut exactly at the sphere, so only the restriction of
    ``f`` to the ball enters; values at cut cells whose centers lie outside
    serve as the smooth extension used by interpolation.  The mean is the
    volume-fraction weighted ball average; a non-zero mean raises
    :class:`BogovskiiMeanError`.
    """
    return bogovskii_many(kernel, f.grid, f.values[None], mean_tol)[0]


def zero_mean(kernel: BogovskiiKernel, grid: Grid, f: np.ndarray) -> np.ndarray:
    """Subtract the ball mean of ``f`` inside the ball."""
    return f - kernel.ball_mean(grid, f)


def random_zero_mean(kernel: BogovskiiKernel, grid: Grid, seed: int, n_bumps: int = 4) -> np.ndarray:
    """Smooth random data with zero ball mean: a bump superposition minus a multiple of ``(1 - r^2)^2``."""
    rng = np.random.default_rng(seed)
    x = (grid.cell_centers() - np.asarray(kernel.center)) / kernel.radius
    out = np.zeros(grid.cells)
    for _ in range(n_bumps):
        c = rng.uniform(-0.5, 0.5, 3)
        r = rng.uniform(0.5, 0.9)
        out += rng.normal() * np.clip(1 - ((x - c) ** 2).sum(-1) / r**2, 0, None) ** 3
    b = np.clip(1 - (x**2).sum(-1), 0, None) ** 2
    phi = kernel.volume_fractions(grid)
    return out - b * (phi * out).sum() / (phi * b).sum()


def bogovskii_residual(kernel: BogovskiiKernel, f: ScalarField, u: StaggeredField) -> dict:
    """Relative L2 residuals of ``div u = f``.

    ``interior`` uses the cells contained in the ball; ``all_cells`` compares
    against the cell averages ``phi f`` of the zero-extended data on every cell.
    """
    from dclab.fields import div

    phi = kernel.volume_fractions(f.grid)
    d = div(f.grid, u).values
    target = phi * f.values
    full = phi >= 1.0
    interior = np.linalg.norm((d - target)[full]) / max(np.linalg.norm(target[full]), 1e-300)
    total = np.linalg.norm(d - target) / max(np.linalg.norm(target), 1e-300)
    return {"interior": float(interior), "all_cells": float(total)}


__all__ = [
    "BogovskiiKernel",
    "BogovskiiMeanError",
    "StressParams",
    "bogovskii",
    "bogovskii_many",
    "bogovskii_residual",
    "random_zero_mean",
    "zero_mean",
    "maximal_function",
    "monotonicity_gap",
    "p_stokes_energy",
    "p_stokes_operator",
    "stress",
    "stress_energy",
    "stress_multipliers",
    "stress_pointwise",
    "sym_magnitude",
]
