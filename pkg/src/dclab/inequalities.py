"""Empirical constants for the functional inequalities of the weighted setting.

Every check evaluates both sides of an inequality on an ensemble of random
fields and reports the largest observed ratio.  Empirical ratios bound the
best constant from below; the verdict rests on stability under one grid
doubling, with the same continuous samples evaluated on both grids.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from dclab.fields import (
    EDGE,
    FRACTIONAL_MAX_CELLS,
    FACE,
    Grid,
    ScalarField,
    StaggeredField,
    cell_weights,
    curl,
    div,
    fractional_seminorm,
    full_grad,
    leray_project,
)
from dclab.geometry import PowerWeight
from dclab.operators import sym_magnitude

NAMES = ("poincare", "korn", "sobolev", "div_curl", "grad_curl_weighted", "gen_sobolev", "embedding_L1", "hardy")
SAMPLE_KINDS = ("dirichlet", "solenoidal_dirichlet", "interior_bump")
DRIFT_TOL = 0.10


class HypothesisError(ValueError):
    """Raised when case parameters leave the range where the inequality is claimed."""


def gen_sobolev_exponent(p: float, delta: float, dim: int = 3) -> float:
    """Largest admissible ``q = dim p / (dim - p (1 - delta))`` (infinite if the denominator is not positive)."""
    den = dim - p * (1.0 - delta)
    return np.inf if den <= 0 else dim * p / den


def sobolev_exponent(p: float, dim: int = 3) -> float:
    return dim * p / (dim - p)


@dataclass(frozen=True)
class InequalityCase:
    """One inequality with its parameters and ensemble.

    ``demo=True`` marks an intentional hypothesis violation; the parameter
    checks are then skipped and the verdict is ``violated-hypothesis-demo``.
    ``ensemble`` selects the sample family: ``random`` or ``boundary_layer``.
    """

    name: str
    p: float = 2.0
    alpha: float = 0.0
    delta: float = 0.0
    s: float = 0.5
    q: float | None = None
    samples: int = 20
    seed: int = 0
    demo: bool = False
    ensemble: str = "random"

    def __post_init__(self):
        if self.name not in NAMES:
            raise ValueError(f"unknown inequality {self.name!r}")
        if self.samples < 1:
            raise ValueError("need at least one sample")
        if self.ensemble not in ("random", "boundary_layer"):
            raise ValueError(f"unknown ensemble {self.ensemble!r}")
        if self.p < 1:
            raise HypothesisError("p must be at least 1")
        if self.name == "hardy":
            if not 0 < self.s < 1:
                raise HypothesisError("s must lie in (0, 1)")
            if abs(self.s - 1.0 / self.p - 0.5) < 1e-12:
                raise HypothesisError("the characterization excludes s - 1/p = 1/2")
        if self.demo:
            return
        if self.name == "grad_curl_weighted" and not -1 < self.alpha < self.p - 1:
            raise HypothesisError(f"grad_curl_weighted needs -1 < alpha < p - 1 (alpha={self.alpha}, p={self.p})")
        if self.name == "embedding_L1" and not self.alpha < self.p - 1:
            raise HypothesisError("embedding into L^1 needs alpha < p - 1")
        if self.name == "sobolev" and not self.p < 3:
            raise HypothesisError("the Sobolev inequality needs p < 3")
        if self.name == "gen_sobolev":
            if not 0 <= self.delta < 1:
                raise HypothesisError("delta must lie in [0, 1)")
            if self.q is not None and self.q > gen_sobolev_exponent(self.p, self.delta) + 1e-12:
                raise HypothesisError(f"q={self.q} exceeds 3p/(3 - p(1 - delta))")


@dataclass
class InequalityReport:
    name: str
    max_ratio: float
    quantiles: dict
    verdict: str
    samples_used: int
    ratios: list = dc_field(default_factory=list)
    lhs: list = dc_field(default_factory=list)
    rhs: list = dc_field(default_factory=list)
    seeds: list = dc_field(default_factory=list)
    refined_max_ratio: float | None = None
    drift: float | None = None
    violations: int = 0
    skipped: int = 0
    extras: dict = dc_field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


# ---------------------------------------------------------------------------
# random samples


def _unit_coords(grid: Grid, x: np.ndarray) -> np.ndarray:
    lo, hi = grid.domain.bounding_box()
    return (x - lo) / (hi - lo)


def _bump_params(rng, dim: int, n: int, rmin: float, rmax: float, margin: float = 0.02):
    centers, radii = [], []
    for _ in range(n):
        r = rng.uniform(rmin, rmax)
        centers.append(rng.uniform(r + margin, 1 - r - margin, dim))
        radii.append(r)
    return np.array(centers), np.array(radii)


def _bump_sum(xu: np.ndarray, centers, radii, amps) -> np.ndarray:
    out = np.zeros(xu.shape[:-1] + amps.shape[1:])
    for c, r, a in zip(centers, radii, amps):
        rho2 = ((xu - c) ** 2).sum(-1) / r**2
        b = np.clip(1 - rho2, 0, None) ** 4
        out = out + (b[..., None] * a if amps.ndim > 1 else b * a)
    return out


def _ball_inside(grid: Grid, centers, radii) -> tuple[np.ndarray, np.ndarray]:
    """Rescale bump centers so their supports stay inside a ball domain."""
    if grid.domain.kind != "ball":
        return centers, radii
    # the unit-cube coordinates of the ball's bounding box; keep supports within radius 0.45
    c = centers - 0.5
    nrm = np.linalg.norm(c, axis=1, keepdims=True)
    lim = np.clip(0.45 - radii[:, None], 0, None)
    c = np.where(nrm > lim, c * lim / np.maximum(nrm, 1e-300), c)
    return c + 0.5, radii


def sample_field(grid: Grid, kind: str, seed: int, n_bumps: int = 3,
                 radii: tuple[float, float] = (0.2, 0.4)) -> StaggeredField:
    """Smooth random face field made of bumps compactly supported in the domain.

    ``dirichlet``: independent bump sums per component.
    ``solenoidal_dirichlet``: the curl of a compactly supported bump
    potential, passed through :func:`leray_project` (which leaves it unchanged
    up to roundoff).
    ``interior_bump``: a single divergence-free bump supported in the middle
    half of the domain.
    """
    if kind not in SAMPLE_KINDS:
        raise ValueError(f"unknown sample kind {kind!r}")
    rng = np.random.default_rng(seed)
    if kind == "interior_bump":
        centers = rng.uniform(0.45, 0.55, (1, 3))
        rads = np.array([0.2])
    else:
        centers, rads = _bump_params(rng, 3, n_bumps, *radii)
    centers, rads = _ball_inside(grid, centers, rads)
    amps = rng.normal(size=(len(rads), 3))
    fn = lambda x: _bump_sum(_unit_coords(grid, x), centers, rads, amps)  # noqa: E731
    if kind == "dirichlet":
        return StaggeredField.from_function(grid, fn, FACE)
    pot = StaggeredField.from_function(grid, fn, EDGE)
    v = curl(grid, pot).with_dirichlet()
    return leray_project(grid, v)


def sample_scalar(grid: Grid, kind: str, seed: int, n_bumps: int = 3,
                  radii: tuple[float, float] = (0.15, 0.35)) -> ScalarField:
    """Scalar samples for the reduced paths.

    ``dirichlet``: bump sums compactly supported in the domain.
    ``free``: a random low-order trigonometric polynomial (no boundary condition).
    ``interior_bump``: one bump in the middle half of the domain.
    """
    rng = np.random.default_rng(seed)
    xu = _unit_coords(grid, grid.cell_centers())
    dim = grid.dim
    if kind == "free":
        out = np.full(grid.cells, rng.normal())
        for _ in range(4):
            k = rng.integers(0, 3, dim)
            phase = rng.uniform(0, 2 * np.pi, dim)
            out = out + rng.normal() * np.prod(np.cos(np.pi * k * xu + phase), axis=-1)
        return ScalarField(grid, out)
    if kind == "interior_bump":
        centers = rng.uniform(0.45, 0.55, (1, dim))
        rads = np.array([0.2])
    elif kind == "dirichlet":
        centers, rads = _bump_params(rng, dim, n_bumps, *radii)
    else:
        raise ValueError(f"unknown scalar sample kind {kind!r}")
    return ScalarField(grid, _bump_sum(xu, centers, rads, rng.normal(size=len(rads))))


def boundary_layer_field(grid: Grid, seed: int) -> StaggeredField:
    """Adversarial solenoidal Dirichlet field concentrated near one wall.

    A tangential shear ``a(x_t) U(d)`` whose profile ``U`` rises like
    ``log(d / h)`` from the first grid layer, closed into a divergence-free
    field through a stream function.  See :func:`_layer_profile`.
    """
    return _boundary_layer(grid, seed)


def _layer_profile(z: np.ndarray, h: float) -> np.ndarray:
    """``G(z) = z (1 - z)^2 log(1 + z / h) / log(1 + 1 / h)`` on ``[0, 1]``.

    The tangential velocity ``G'`` grows logarithmically from the first grid
    layer, so its shear spreads evenly over all dyadic distances to the wall.
    """
    z = np.clip(z, 0.0, 1.0)
    return z * (1 - z) ** 2 * np.log1p(z / h) / np.log1p(1.0 / h)


def _boundary_layer(grid: Grid, seed: int) -> StaggeredField:
    if grid.domain.kind != "box":
        raise ValueError("boundary-layer samples are built on boxes")
    rng = np.random.default_rng(seed)
    normal = int(rng.integers(3))
    flip = bool(rng.integers(2))
    pot_axis = (normal + 1 + int(rng.integers(2))) % 3
    tang = 3 - normal - pot_axis
    k = rng.integers(1, 3, 2)
    ph = rng.uniform(0, 2 * np.pi, 2)
    c = rng.uniform(0.2, 0.6, 2)
    h = grid.h / (grid.domain.bounding_box()[1] - grid.domain.bounding_box()[0]).max()

    def potential(x):
        xu = _unit_coords(grid, x)
        z = 1 - xu[..., normal] if flip else xu[..., normal]
        s, t = xu[..., tang], xu[..., pot_axis]
        a = np.sin(np.pi * s) ** 3 * (1 + c[0] * np.cos(k[0] * np.pi * s + ph[0]))
        b = np.sin(np.pi * t) ** 3 * (1 + c[1] * np.cos(k[1] * np.pi * t + ph[1]))
        out = np.zeros(x.shape[:-1] + (3,))
        out[..., pot_axis] = a * b * _layer_profile(z, h)
        return out

    pot = StaggeredField.from_function(grid, potential, EDGE)
    return curl(grid, pot).with_dirichlet()


# ---------------------------------------------------------------------------
# discrete magnitudes for scalar samples


def _axis_node_diffs(u: np.ndarray, h: float, axis: int, dirichlet: bool) -> np.ndarray:
    n = u.shape[axis]
    d = np.diff(u, axis=axis) / h
    if dirichlet:
        first = 2.0 * np.take(u, [0], axis=axis) / h
        last = -2.0 * np.take(u, [n - 1], axis=axis) / h
        return np.concatenate([first, d, last], axis=axis)
    return d


def scalar_gradient_magnitude(grid: Grid, u: np.ndarray, dirichlet: bool = True) -> np.ndarray:
    """Cell magnitude of the gradient from averages of squared node differences.

    With ``dirichlet`` the wall value is zero (ghost reflection); otherwise
    only interior node differences enter.
    """
    sq = np.zeros(grid.cells)
    for a in range(grid.dim):
        d2 = _axis_node_diffs(u, grid.spacing[a], a, dirichlet) ** 2
        n = grid.cells[a]
        if dirichlet:
            lo = np.take(d2, range(n), axis=a)
            hi = np.take(d2, range(1, n + 1), axis=a)
            sq += 0.5 * (lo + hi)
        else:
            pad = [(0, 0)] * grid.dim
            pad[a] = (1, 1)
            z = np.pad(d2, pad)
            cnt = np.pad(np.ones_like(d2), pad)
            lo = np.take(z, range(n), axis=a) + np.take(z, range(1, n + 1), axis=a)
            c = np.take(cnt, range(n), axis=a) + np.take(cnt, range(1, n + 1), axis=a)
            sq += lo / c
    return np.sqrt(sq)


def _lp(vals: np.ndarray, weights: np.ndarray, p: float) -> float:
    return float(np.sum(weights * np.abs(vals) ** p) ** (1.0 / p))


def _face_magnitude(grid: Grid, v: StaggeredField) -> np.ndarray:
    from dclab.fields import pointwise_magnitude

    return pointwise_magnitude(grid, v)


# ---------------------------------------------------------------------------
# per-inequality sides


def _sides(case: InequalityCase, grid: Grid, seed: int, given=None):
    """Return ``(lhs, rhs, pointwise_ok)`` for one sample, or for ``given`` if supplied."""
    p = case.p

    def pick(make):
        if given is None:
            return make()
        return given.values if isinstance(given, ScalarField) else given
    vol_w = cell_weights(grid, None)
    if case.name == "poincare":
        if grid.dim == 3:
            v = pick(lambda: sample_field(grid, "dirichlet", seed))
            return _lp(_face_magnitude(grid, v), vol_w, p), _lp(full_grad(grid, v).cell_magnitude(), vol_w, p), True
        u = pick(lambda: sample_scalar(grid, "dirichlet", seed).values)
        return _lp(u, vol_w, p), _lp(scalar_gradient_magnitude(grid, u), vol_w, p), True
    if case.name in ("korn", "sobolev", "div_curl"):
        _need3d(grid, case.name)
        v = pick(lambda: sample_field(grid, "dirichlet", seed))
        gmag = full_grad(grid, v).cell_magnitude()
        if case.name == "korn":
            dmag = sym_magnitude(grid, v).reshape(grid.cells)
            ok = bool(np.all(dmag <= gmag * (1 + 1e-12) + 1e-300))
            return _lp(gmag, vol_w, p), _lp(dmag, vol_w, p), ok
        if case.name == "sobolev":
            q = case.q if case.q is not None else sobolev_exponent(p)
            dmag = sym_magnitude(grid, v).reshape(grid.cells)
            return _lp(_face_magnitude(grid, v), vol_w, q), _lp(dmag, vol_w, p), True
        dv = np.abs(div(grid, v).values)
        cmag = _face_magnitude(grid, curl(grid, v))
        gl = _lp(gmag, vol_w, p)
        ok = _lp(dv, vol_w, p) <= 2 * gl * (1 + 1e-12) and _lp(cmag, vol_w, p) <= 2 * gl * (1 + 1e-12)
        return gl, _lp(dv, vol_w, p) + _lp(cmag, vol_w, p), ok
    if case.name == "grad_curl_weighted":
        _need3d(grid, case.name)
        if case.ensemble == "boundary_layer":
            v = pick(lambda: boundary_layer_field(grid, seed))
        else:
            v = pick(lambda: sample_field(grid, "solenoidal_dirichlet", seed))
        w = cell_weights(grid, PowerWeight(case.alpha, grid.domain))
        gmag = full_grad(grid, v).cell_magnitude()
        cmag = _face_magnitude(grid, curl(grid, v))
        return float(np.sum(w * gmag**p)), float(np.sum(w * cmag**p)), True
    if case.name == "gen_sobolev":
        q = case.q if case.q is not None else gen_sobolev_exponent(p, case.delta, grid.dim)
        u = pick(lambda: sample_scalar(grid, "free", seed).values)
        mean = np.sum(vol_w * u) / np.sum(vol_w)
        w = cell_weights(grid, PowerWeight(case.delta * p, grid.domain))
        g = scalar_gradient_magnitude(grid, u, dirichlet=False)
        return _lp(u - mean, vol_w, q), _lp(g, w, p), True
    if case.name == "embedding_L1":
        u = pick(lambda: sample_scalar(grid, "free", seed).values)
        w = cell_weights(grid, PowerWeight(case.alpha, grid.domain))
        return float(np.sum(vol_w * np.abs(u))), _lp(u, w, p), True
    if case.name == "hardy":
        u = pick(lambda: sample_scalar(grid, "dirichlet", seed).values)
        w = cell_weights(grid, PowerWeight(-case.s * p, grid.domain))
        return _lp(u, w, p), fractional_seminorm(grid, u, case.s, p), True
    raise ValueError(case.name)


def evaluate(case: InequalityCase, grid: Grid, field) -> tuple[float, float]:
    """Both sides of ``case`` for one given field (scalar array, :class:`ScalarField` or face field)."""
    a, b, _ = _sides(case, grid, 0, given=field)
    return a, b


def _need3d(grid: Grid, name: str):
    if grid.dim != 3:
        raise ValueError(f"{name} is evaluated on 3D grids only")


def _ensemble(case: InequalityCase, grid: Grid):
    lhs, rhs, ratios, seeds = [], [], [], []
    violations = skipped = 0
    pointwise_ok = True
    for k in range(case.samples):
        seed = case.seed + k
        a, b, ok = _sides(case, grid, seed)
        pointwise_ok &= ok
        if b <= 1e-14 * max(abs(a), 1.0):
            if a > 1e-12:
                violations += 1
            else:
                skipped += 1
            continue
        lhs.append(a)
        rhs.append(b)
        ratios.append(a / b)
        seeds.append(seed)
    return lhs, rhs, ratios, seeds, violations, skipped, pointwise_ok


def check(case: InequalityCase, grid: Grid, refine: bool = True) -> InequalityReport:
    """Estimate the empirical constant of ``case`` on ``grid``.

    With ``refine`` the same samples are re-evaluated on the doubled grid and
    the relative change of the maximum ratio is reported as ``drift``.
    """
    lhs, rhs, ratios, seeds, violations, skipped, pointwise_ok = _ensemble(case, grid)
    ratios_arr = np.asarray(ratios)
    max_ratio = float(ratios_arr.max()) if ratios_arr.size else (np.inf if violations else 0.0)
    quant = ({str(q): float(np.quantile(ratios_arr, q)) for q in (0.5, 0.9, 0.99)}
             if ratios_arr.size else {})
    report = InequalityReport(case.name, max_ratio, quant, "unstable", len(ratios), ratios, lhs, rhs, seeds,
                              violations=violations, skipped=skipped)
    report.extras["pointwise_bounds_hold"] = pointwise_ok
    report.extras["grid"] = list(grid.cells)
    if case.name == "gen_sobolev":
        report.extras["q_max"] = gen_sobolev_exponent(case.p, case.delta, grid.dim)
    if case.name == "embedding_L1" and case.alpha < case.p - 1:
        beta = case.alpha / (case.p - 1)
        report.extras["holder_constant"] = float(
            np.sum(cell_weights(grid, PowerWeight(-beta, grid.domain))) ** (1 - 1 / case.p))
    if refine:
        fine = _ensemble(case, grid.refined(2))
        fine_ratios = np.asarray(fine[2])
        report.refined_max_ratio = float(fine_ratios.max()) if fine_ratios.size else 0.0
        if max_ratio > 0 and np.isfinite(max_ratio):
            report.drift = float(report.refined_max_ratio / max_ratio - 1.0)
    if case.demo:
        report.verdict = "violated-hypothesis-demo"
    elif (violations == 0 and np.isfinite(max_ratio) and report.drift is not None
          and abs(report.drift) < DRIFT_TOL):
        report.verdict = "bounded"
    else:
        report.verdict = "unstable"
    return report


# ---------------------------------------------------------------------------
# embedding margin and Hardy checks


@dataclass
class EmbeddingMargin:
    """Values of ``int d^(-alpha/(p-1))`` over successive grid doublings."""

    exponent: float
    cells: list
    values: list
    increments: list
    stable: bool
    rate: float


def embedding_margin(p: float, alpha: float, grid: Grid, doublings: int = 3) -> EmbeddingMargin:
    """Growth of the dual-weight integral from the embedding proof.

    ``rate`` is the last increment per doubling: it tends to 0 when
    ``alpha < p - 1`` and to a positive constant (logarithmic divergence) at
    ``alpha = p - 1``.
    """
    if p <= 1:
        raise ValueError("p must exceed 1")
    beta = alpha / (p - 1)
    vals, cells = [], []
    g = grid
    for _ in range(doublings + 1):
        vals.append(float(np.sum(cell_weights(g, PowerWeight(-beta, g.domain)))))
        cells.append(list(g.cells))
        g = g.refined(2)
    inc = list(np.diff(vals))
    stable = bool(abs(inc[-1]) < 0.05 * abs(vals[-1])) if inc else True
    return EmbeddingMargin(beta, cells, vals, inc, stable, float(inc[-1]) if inc else 0.0)


def hardy_check(s: float, p: float, grid: Grid, field: ScalarField | np.ndarray | None = None,
                samples: int = 10, seed: int = 0) -> InequalityReport:
    """Ratios ``||u / d^s||_p / [u]_{s,p}`` for a given field or a compact ensemble."""
    case = InequalityCase("hardy", p=p, s=s, samples=samples, seed=seed)
    if field is None:
        fine = int(np.prod(grid.cells)) * 2**grid.dim
        return check(case, grid, refine=fine <= FRACTIONAL_MAX_CELLS)
    u = field.values if isinstance(field, ScalarField) else np.asarray(field)
    w = cell_weights(grid, PowerWeight(-s * p, grid.domain))
    a = _lp(u, w, p)
    b = fractional_seminorm(grid, u, s, p)
    ratio = a / b if b > 0 else (np.inf if a > 0 else 0.0)
    return InequalityReport("hardy", float(ratio), {}, "unstable", 1, [ratio], [a], [b], [None])


def hardy_cutoff_demo(s: float, p: float, widths, n_cells: int = 4096) -> dict:
    """``||u / d^s||_p`` on (0, 1) for ``u = 1`` on ``[w, 1 - w]`` and 0 elsewhere.

    Returns numerical values and the closed form
    ``(2 int_w^{1/2} t^{-sp} dt)^{1/p}``.
    """
    from dclab.geometry import DomainSpec

    grid = Grid(DomainSpec("box", (1.0,), dim=1), (n_cells,))
    x = grid.cell_centers()[..., 0]
    weights = cell_weights(grid, PowerWeight(-s * p, grid.domain))
    num, exact = [], []
    e = 1.0 - s * p
    for w in widths:
        u = ((x > w) & (x < 1 - w)).astype(float)
        num.append(_lp(u, weights, p))
        integral = 2 * (np.log(0.5 / w) if abs(e) < 1e-14 else (0.5**e - w**e) / e)
        exact.append(float(integral ** (1 / p)))
    return {"widths": list(widths), "numerical": num, "exact": exact}


__all__ = [
    "EmbeddingMargin",
    "HypothesisError",
    "InequalityCase",
    "InequalityReport",
    "NAMES",
    "boundary_layer_field",
    "check",
    "embedding_margin",
    "evaluate",
    "gen_sobolev_exponent",
    "hardy_check",
    "hardy_cutoff_demo",
    "sample_field",
    "sample_scalar",
    "scalar_gradient_magnitude",
    "sobolev_exponent",
]
