"""Solenoidal Lipschitz truncation on the grid.

A solenoidal field ``u`` supported in a ball is written as ``u = curl A`` with
``A = curl psi``, ``-Lap psi = u``.  The bad set is where the maximal
function of the Frobenius norm of the Hessian of ``A`` exceeds a threshold
``lambda``; the truncated field is

    u_trunc = u - curl((1 - zeta) A),

with a smooth cutoff ``zeta`` that vanishes on the bad set dilated by one
collar.  It coincides with ``u`` wherever ``zeta = 1``, is exactly
divergence-free, and behaves like ``curl(zeta A)`` inside the bad set.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.ndimage as ndi

from dclab.fields import (
    EDGE,
    Grid,
    StaggeredField,
    curl,
    div,
    full_grad,
    operators,
    vector_laplace_solve,
)
from dclab.operators import maximal_function


class TruncationError(ValueError):
    """Degenerate input: the bad set swallows the whole double ball."""


def bracket(j: int) -> tuple[int, int]:
    """Exponent range ``[2^j, 2^(j+1) - 1]`` of admissible thresholds ``2^k``."""
    if j < 0:
        raise ValueError("levels start at 0")
    return 2**j, 2 ** (j + 1) - 1


@dataclass
class TruncationLevels:
    """Levels ``j0..J`` and per-(m, j) thresholds ``lambda = 2^k`` with ``k`` in the bracket."""

    j0: int
    J: int
    thresholds: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.J < self.j0 or self.j0 < 0:
            raise ValueError("need 0 <= j0 <= J")
        for (m, j), lam in self.thresholds.items():
            self.check(j, lam)

    @property
    def levels(self) -> range:
        return range(self.j0, self.J + 1)

    @staticmethod
    def check(j: int, lam: float):
        lo, hi = bracket(j)
        if not 2.0**lo <= lam <= 2.0**hi:
            raise ValueError(f"threshold {lam} outside [2^{lo}, 2^{hi}] at level {j}")

    def set(self, m: int, j: int, lam: float):
        self.check(j, lam)
        self.thresholds[(m, j)] = float(lam)

    def get(self, m: int, j: int) -> float:
        if (m, j) in self.thresholds:
            return self.thresholds[(m, j)]
        return 2.0 ** bracket(j)[0]


# ---------------------------------------------------------------------------
# potential and Hessian


def curl_inverse(grid: Grid, u: StaggeredField) -> StaggeredField:
    """Edge potential ``A = curl psi`` with ``-Lap psi = u`` (no-slip walls)."""
    if u.location == EDGE:
        raise ValueError("curl_inverse expects a face field")
    psi = vector_laplace_solve(grid, u)
    return curl(grid, psi)


def edge_divergence(grid: Grid, A: StaggeredField) -> np.ndarray:
    """Divergence of an edge field at interior nodes."""
    if A.location != EDGE:
        raise ValueError("edge_divergence expects an edge field")
    h = grid.spacing
    out = 0.0
    for a, c in enumerate(A.components):
        d = np.diff(c, axis=a) / h[a]
        sl = [slice(1, -1)] * 3
        sl[a] = slice(None)
        out = out + d[tuple(sl)]
    return out


def hessian_magnitude(grid: Grid, A: StaggeredField) -> np.ndarray:
    """Frobenius norm of the second derivatives of ``A`` at cell centers."""
    ops = operators(grid)
    mats = ops.edge_to_cell if A.location == EDGE else ops.face_to_cell
    sq = np.zeros(grid.cells)
    for m, c in zip(mats, A.components):
        cc = (m @ c.ravel()).reshape(grid.cells)
        for a, g in enumerate(np.gradient(cc, *grid.spacing)):
            for b, gg in enumerate(np.gradient(g, *grid.spacing)):
                sq += gg**2
    return np.sqrt(sq)


def maximal_hessian(grid: Grid, u: StaggeredField) -> tuple[StaggeredField, np.ndarray]:
    A = curl_inverse(grid, u)
    return A, maximal_function(grid, hessian_magnitude(grid, A)).values


# ---------------------------------------------------------------------------
# thresholds


def select_threshold(M: np.ndarray, j: int, s: float, cell_volume: float) -> float:
    """Threshold ``2^k`` in the level-``j`` bracket minimizing ``2^(ks) |{M > 2^k}|``.

    This is the pigeonhole choice that yields the ``2^(-j/s)`` bound.
    Ties go to the smallest ``k``.
    """
    lo, hi = bracket(j)
    ks = np.arange(lo, hi + 1)
    # work with log2 of the objective to survive huge exponents
    counts = np.array([np.count_nonzero(M > 2.0**k) for k in ks])
    with np.errstate(divide="ignore"):
        obj = np.where(counts > 0, ks * s + np.log2(np.maximum(counts, 1) * cell_volume), -np.inf)
    return float(2.0 ** ks[int(np.argmin(obj))])


def select_levels(grid: Grid, us, j0: int, J: int, s: float = 2.0) -> TruncationLevels:
    levels = TruncationLevels(j0, J)
    for m, u in enumerate(us):
        _, M = maximal_hessian(grid, u)
        for j in levels.levels:
            levels.set(m, j, select_threshold(M, j, s, grid.cell_volume))
    return levels


# ---------------------------------------------------------------------------
# truncation


@dataclass
class BadSet:
    mask: np.ndarray
    dilated: np.ndarray
    threshold: float

    @property
    def empty(self) -> bool:
        return not self.mask.any()


def _cutoff(mask: np.ndarray, collar: int) -> np.ndarray:
    """Smooth ``zeta``: 0 on ``mask`` dilated by ``collar`` cells, 1 beyond two collars."""
    if not mask.any():
        return np.ones(mask.shape)
    dist = ndi.distance_transform_edt(~mask)
    t = np.clip((dist - collar) / collar, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def _interior_edges(grid: Grid) -> np.ndarray:
    """Mask of edges not lying in a wall; their curl has no wall-normal flux."""
    out = []
    for a in range(3):
        shp = grid.shape(EDGE, a)
        m = np.ones(shp, dtype=bool)
        for b in range(3):
            if b != a:
                idx = [slice(None)] * 3
                for end in (0, -1):
                    idx[b] = end
                    m[tuple(idx)] = False
        out.append(m.ravel())
    return np.concatenate(out)


def _cells_to_edges(grid: Grid, c: np.ndarray) -> np.ndarray:
    ops = operators(grid)
    out = []
    for a in range(3):
        m = ops.edge_to_cell[a]
        cnt = np.asarray(m.sum(axis=0)).ravel()
        out.append((m.T @ c.ravel()) / np.where(cnt > 0, cnt, 1.0))
    return np.concatenate(out)


@dataclass
class TruncationResult:
    field: StaggeredField
    bad: BadSet
    zeta: np.ndarray
    grad_max: float
    threshold: float

    @property
    def grad_ratio(self) -> float:
        return self.grad_max / self.threshold


def _truncate(grid: Grid, u: StaggeredField, A: StaggeredField, M: np.ndarray, threshold: float,
              collar: int, center, radius: float) -> TruncationResult:
    mask = M > threshold
    if mask.any():
        r = np.linalg.norm(grid.cell_centers() - np.asarray(center, dtype=float), axis=-1)
        ball2 = r < 2 * radius
        if ball2.any() and np.all(mask[ball2]):
            raise TruncationError("bad set covers the whole double ball")
    zeta = _cutoff(mask, collar)
    if mask.any():
        ops = operators(grid)
        one_minus = (1.0 - _cells_to_edges(grid, zeta)) * _interior_edges(grid)
        out = StaggeredField.from_flat(grid, u.flat - ops.curl_adj @ (one_minus * A.flat))
    else:
        out = u
    gmax = float(full_grad(grid, out).cell_magnitude().max())
    return TruncationResult(out, BadSet(mask, zeta < 1, threshold), zeta, gmax, threshold)


def truncate_at(grid: Grid, u: StaggeredField, threshold: float, collar: int = 2,
                center=(0.5, 0.5, 0.5), radius: float = 0.25) -> TruncationResult:
    """Truncate ``u`` at an explicit threshold.

    ``u`` is assumed supported in the ball ``B(center, radius)``; a bad set
    covering every cell of the double ball raises :class:`TruncationError`.
    ``collar`` is the cutoff transition width in cells.
    """
    A, M = maximal_hessian(grid, u)
    return _truncate(grid, u, A, M, threshold, collar, center, radius)


def truncate(grid: Grid, u: StaggeredField, levels: TruncationLevels, j: int, m: int = 0,
             collar: int = 2, center=(0.5, 0.5, 0.5), radius: float = 0.25):
    """Truncate member ``m`` at level ``j``; returns ``(field, BadSet)``."""
    res = truncate_at(grid, u, levels.get(m, j), collar, center, radius)
    return res.field, res.bad


# ---------------------------------------------------------------------------
# level decay


@dataclass
class DecayTable:
    rows: list
    exponent: float | None
    c_decay: float
    c_gradient: float
    envelope: dict

    def csv_rows(self) -> list[dict]:
        return [dict(r) for r in self.rows]


def _grad_norm(grid: Grid, u: StaggeredField, s: float) -> float:
    return float((grid.cell_volume * np.sum(full_grad(grid, u).cell_magnitude() ** s)) ** (1 / s))


def level_decay(grid: Grid, us, levels: TruncationLevels, s: float = 2.0, collar: int = 2,
                center=(0.5, 0.5, 0.5), radius: float = 0.25) -> DecayTable:
    """``||lambda chi_O||_s / ||grad u||_s`` per (m, j) and the fitted decay exponent.

    The exponent is the least-squares slope of ``log2`` of the ensemble
    envelope ``max_m row(m, j)`` over levels where it is positive.
    ``c_decay`` is the smallest constant with ``row <= c 2^(-j/s)``;
    ``c_gradient`` the smallest with ``||grad u_trunc||_inf <= c lambda``
    over non-degenerate rows.  Degenerate rows (bad set covering the double
    ball) keep their decay value and are flagged.
    """
    if not 1 < s < np.inf:
        raise ValueError("s must lie in (1, inf)")
    if len(levels.levels) < 3:
        raise ValueError("need at least three levels")
    rows = []
    for m, u in enumerate(us):
        gnorm = _grad_norm(grid, u, s)
        A, M = maximal_hessian(grid, u)
        for j in levels.levels:
            lam = levels.get(m, j)
            vol = grid.cell_volume * np.count_nonzero(M > lam)
            value = lam * vol ** (1 / s) / gnorm if gnorm > 0 else 0.0
            row = {"m": m, "j": j, "lambda": lam, "bad_volume": vol, "value": value,
                   "grad_norm": gnorm, "degenerate": False}
            try:
                res = _truncate(grid, u, A, M, lam, collar, center, radius)
                row.update(grad_max=res.grad_max, grad_ratio=res.grad_ratio,
                           sup_norm=res.field.max_abs(),
                           max_div=float(np.abs(div(grid, res.field).values).max()))
            except TruncationError:
                row.update(degenerate=True, grad_max=np.nan, grad_ratio=np.nan,
                           sup_norm=np.nan, max_div=np.nan)
            rows.append(row)
    env = {j: max(r["value"] for r in rows if r["j"] == j) for j in levels.levels}
    pos = [(j, v) for j, v in env.items() if v > 0]
    exponent = None
    if len(pos) >= 2:
        exponent = float(np.polyfit([j for j, _ in pos], np.log2([v for _, v in pos]), 1)[0])
    c_decay = max((r["value"] * 2 ** (r["j"] / s) for r in rows), default=0.0)
    ratios = [r["grad_ratio"] for r in rows if not r["degenerate"]]
    c_grad = max(ratios, default=0.0)
    return DecayTable(rows, exponent, c_decay, c_grad, env)


def _bump_curl(grid: Grid, center, radius: float, amp: np.ndarray) -> StaggeredField:
    c = np.asarray(center, dtype=float)

    def pot(x):
        rho2 = ((x - c) ** 2).sum(-1) / radius**2
        return np.clip(1 - rho2, 0, None)[..., None] ** 4 * amp

    psi = StaggeredField.from_function(grid, pot, EDGE)
    return StaggeredField.from_flat(grid, operators(grid).curl_adj @ psi.flat).with_dirichlet()


def null_sequence(grid: Grid, n: int = 4, s: float = 2.0, grad_norm=1.0,
                  center=(0.5, 0.5, 0.5), radius: float = 0.25, min_cells: float = 3.0,
                  seed: int = 0) -> list[StaggeredField]:
    """Concentrating solenoidal bumps with prescribed ``||grad u^m||_s``.

    Member ``m`` is the curl of a bump potential of radius shrinking
    geometrically from ``radius`` down to ``min_cells`` cells, rescaled so
    that ``||grad u^m||_s = grad_norm[m]`` (a scalar applies to every member).
    With a bounded gradient norm this is a weak null sequence.
    """
    rng = np.random.default_rng(seed)
    amp = rng.normal(size=3)
    norms = np.broadcast_to(np.asarray(grad_norm, dtype=float), (n,))
    r_min = min(radius, min_cells * grid.h)
    radii = radius * (r_min / radius) ** (np.arange(n) / max(n - 1, 1))
    out = []
    for r, g in zip(radii, norms):
        u = _bump_curl(grid, center, float(r), amp)
        out.append(u * (g / _grad_norm(grid, u, s)))
    return out


def demo_ensemble(grid: Grid, levels: TruncationLevels, s: float = 2.0, per_level: int = 2,
                  seed: int = 0) -> list[StaggeredField]:
    """Ensemble whose maximal-function ranges reach every level bracket.

    Gradient norms are spread geometrically so that some member has its
    largest maximal-function value just above each bracket; the shapes
    concentrate as in :func:`null_sequence`.
    """
    base = null_sequence(grid, 1, s, 1.0, seed=seed)[0]
    top = float(maximal_hessian(grid, base)[1].max())
    norms = []
    for j in levels.levels:
        hi = 2.0 ** (2 ** (j + 1) - 1)
        norms.extend(hi / top * 2.0 ** (np.arange(per_level) / per_level + 0.25))
    return null_sequence(grid, len(norms), s, norms, seed=seed)


def weak_star_pairings(grid: Grid, field: StaggeredField, n_tests: int = 10, seed: int = 0) -> np.ndarray:
    """Pairings ``<grad u, Phi_i>`` with a fixed dictionary of smooth tensor fields."""
    ops = operators(grid)
    rng = np.random.default_rng(seed)
    g = ops.full_grad @ field.flat
    locs = [grid.cell_centers() if ops._loc_of(a, b) == "cell" else grid.edge_coords(ops._loc_of(a, b))
            for a, b in ops.grad_pairs]
    out = []
    for _ in range(n_tests):
        k = rng.integers(1, 4, (9, 3))
        parts = [np.prod(np.sin(np.pi * k[i] * x), axis=-1).ravel() for i, x in enumerate(locs)]
        out.append(float(np.dot(ops.w_grad * g, np.concatenate(parts))))
    return np.asarray(out)


__all__ = [
    "BadSet",
    "DecayTable",
    "TruncationError",
    "TruncationLevels",
    "TruncationResult",
    "bracket",
    "curl_inverse",
    "edge_divergence",
    "hessian_magnitude",
    "level_decay",
    "maximal_hessian",
    "null_sequence",
    "select_levels",
    "select_threshold",
    "demo_ensemble",
    "truncate",
    "truncate_at",
    "weak_star_pairings",
]
