"""Steady degenerate turbulence models on the staggered grid.

The momentum balance

    eps D^*(|Dv|^(r-2) Dv) + nu0 D^* D v + curl^*(S(curl v)) + N(v) + grad pi = f,
    div v = 0,  v = 0 on the walls,

is solved by damped Picard iteration.  Each step freezes the stress
coefficients at the current iterate and solves the resulting symmetric
linear Stokes-type problem by projected conjugate gradients (the projection
keeps iterates exactly solenoidal, an algebraic multigrid cycle on the
frozen operator plus a grad-div term preconditions).  The convective term is
lagged.  Written as defect correction ``v <- v - theta K^{-1} P R(v)``, the
step is the classical relaxed Picard map whenever the coefficient floor is
inactive, while the fixed point is always the true discrete solution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
import pyamg
import scipy.sparse as sp

from dclab.fields import (
    EDGE,
    FACE,
    Grid,
    ScalarField,
    StaggeredField,
    convective_divergence,
    convective_rotational,
    curl,
    full_grad,
    leray_project,
    operators,
    vector_laplace_solve,
)
from dclab.geometry import PowerWeight
from dclab.operators import (
    BogovskiiKernel,
    StressParams,
    bogovskii,
    p_stokes_energy,
    p_stokes_operator,
    stress,
    stress_multipliers,
    sym_magnitude,
    sym_multipliers,
    zero_mean,
)

log = logging.getLogger(__name__)

REG_FLAVORS = ("sym_grad", "shifted_weight")
CONVECTIVE_FORMS = ("rotational", "divergence")
ENERGY_EQUALITY_ALPHA = 6.0 / 5.0
GRAD_EXPONENTS = (1.2, 1.33, 1.45)


class NumericalFailure(RuntimeError):
    """Non-finite values during a solve; ``diagnostics`` holds the history."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class ModelParams:
    """Coefficients of the steady model.

    ``nu0 > 0`` selects the viscous model; ``nu0 = 0`` needs ``eps > 0``.
    With ``reg_flavor='shifted_weight'`` the weight ``d^alpha`` becomes
    ``(eps + d)^alpha`` and no p-Stokes term is added.
    """

    p: float = 3.0
    alpha: float = 0.0
    kappa: float = 0.0
    nu0: float = 0.0
    eps: float = 0.0
    p_reg: float = 3.0
    reg_flavor: str = "sym_grad"
    convective_form: str = "rotational"

    def __post_init__(self):
        StressParams(self.p, self.alpha, self.kappa)
        if self.nu0 < 0 or self.eps < 0:
            raise ValueError("nu0 and eps must be non-negative")
        if self.p_reg <= 1:
            raise ValueError("p_reg must exceed 1")
        if self.reg_flavor not in REG_FLAVORS:
            raise ValueError(f"unknown reg_flavor {self.reg_flavor!r}")
        if self.convective_form not in CONVECTIVE_FORMS:
            raise ValueError(f"unknown convective_form {self.convective_form!r}")
        if self.nu0 == 0 and self.eps == 0:
            raise ValueError("nu0 = 0 and eps = 0 leaves the problem without coercivity")
        if self.nu0 == 0 and not self.alpha < self.p - 1:
            if self.convective_form != "divergence" or not self.alpha < 2:
                raise ValueError("alpha >= p - 1 is admitted only below 2 with the divergence-form convective term")

    @property
    def stress_params(self) -> StressParams:
        return StressParams(self.p, self.alpha, self.kappa)

    @property
    def system(self) -> str:
        return "viscous" if self.nu0 > 0 else "regularized"

    @property
    def energy_case(self) -> str:
        """``equality`` when the energy equality is expected, else ``weak_form_only``."""
        return "equality" if self.alpha < ENERGY_EQUALITY_ALPHA else "weak_form_only"

    def with_eps(self, eps: float) -> "ModelParams":
        return replace(self, eps=eps)

    def cell_weight(self, grid: Grid) -> np.ndarray:
        d = grid.distance_cells().ravel()
        if self.reg_flavor == "shifted_weight":
            return (self.eps + d) ** self.alpha
        return PowerWeight(self.alpha, grid.domain).of_distance(d)

    @property
    def eps_sym(self) -> float:
        """Coefficient of the p-Stokes regularization."""
        return self.eps if self.reg_flavor == "sym_grad" else 0.0


@dataclass(frozen=True)
class ForcingSpec:
    """Forcing data.

    ``kind='potential'``: ``f = Div F`` with a smooth random tensor ``F``
    compactly supported in the domain (or the flat grad-layout array
    ``data``).  ``kind='body'``: a smooth random face field (or ``data``).
    ``kind='zero'``: no forcing.  ``weight_power`` tags the weighted norm of
    ``F``; ``None`` means ``-alpha/(p-1)``.
    """

    kind: str = "potential"
    scale: float = 1.0
    seed: int = 0
    n_bumps: int = 3
    data: object = None
    weight_power: float | None = None

    def __post_init__(self):
        if self.kind not in ("potential", "body", "zero"):
            raise ValueError(f"unknown forcing kind {self.kind!r}")


@dataclass
class SolverConfig:
    tol: float = 1e-8
    max_iter: int = 500
    damping: float = 0.5
    min_damping: float = 1.0 / 1024
    floor: float = 1e-3
    inner_tol: float = 1e-6
    inner_max_iter: int = 500


@dataclass
class SolveReport:
    velocity: StaggeredField
    pressure: ScalarField
    residual_history: list
    ledger: dict
    iterations: int
    converged: bool
    params: ModelParams
    damping_history: list = dc_field(default_factory=list)
    inner_iterations: list = dc_field(default_factory=list)
    message: str = ""

    def summary(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "final_residual": self.residual_history[-1] if self.residual_history else 0.0,
            "message": self.message,
            "params": self.params.__dict__,
            "ledger": self.ledger,
        }


# ---------------------------------------------------------------------------
# forcing


def _grad_layout_coords(grid: Grid):
    ops = operators(grid)
    out = []
    for a, b in ops.grad_pairs:
        loc = ops._loc_of(a, b)
        out.append(grid.cell_centers() if loc == "cell" else grid.edge_coords(loc))
    return out


def _potential_bumps(grid: Grid, spec: ForcingSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    lo, hi = grid.domain.bounding_box()
    parts = []
    centers = rng.uniform(0.35, 0.65, (spec.n_bumps, 3))
    radii = rng.uniform(0.15, 0.25, spec.n_bumps)
    amps = rng.normal(size=(spec.n_bumps, 9))
    for k, x in enumerate(_grad_layout_coords(grid)):
        xu = (x - lo) / (hi - lo)
        val = np.zeros(x.shape[:-1])
        for c, r, a in zip(centers, radii, amps):
            rho2 = ((xu - c) ** 2).sum(-1) / r**2
            val += a[k] * np.clip(1 - rho2, 0, None) ** 4
        if grid.domain.kind == "ball":
            val = np.where(grid.domain.contains(x), val, 0.0)
        parts.append(val.ravel())
    return spec.scale * np.concatenate(parts)


@dataclass
class Forcing:
    """Forcing evaluated on a grid: face field ``f`` and optional potential ``F``."""

    f: StaggeredField
    F: np.ndarray | None
    spec: ForcingSpec


def build_forcing(spec: ForcingSpec, grid: Grid) -> Forcing:
    ops = operators(grid)
    if spec.kind == "zero":
        return Forcing(StaggeredField.zeros(grid), None, spec)
    if spec.kind == "potential":
        F = np.asarray(spec.data, dtype=float) if spec.data is not None else _potential_bumps(grid, spec)
        if F.shape != (ops.grad_adj.shape[1],):
            raise ValueError("tensor potential does not match the gradient layout")
        f = StaggeredField.from_flat(grid, -(ops.grad_adj @ F)).with_dirichlet()
        return Forcing(f, F, spec)
    if spec.data is not None:
        f = spec.data if isinstance(spec.data, StaggeredField) else StaggeredField.from_flat(grid, spec.data)
        return Forcing(f.with_dirichlet(), None, spec)
    rng = np.random.default_rng(spec.seed)
    centers = rng.uniform(0.3, 0.7, (spec.n_bumps, 3))
    amps = rng.normal(size=(spec.n_bumps, 3))
    lo, hi = grid.domain.bounding_box()

    def fn(x):
        xu = (x - lo) / (hi - lo)
        out = np.zeros(x.shape[:-1] + (3,))
        for c, a in zip(centers, amps):
            rho2 = ((xu - c) ** 2).sum(-1) / 0.25**2
            out += np.clip(1 - rho2, 0, None)[..., None] ** 4 * a
        return spec.scale * out

    return Forcing(StaggeredField.from_function(grid, fn, FACE), None, spec)


def _as_forcing(forcing, grid: Grid) -> Forcing:
    if isinstance(forcing, Forcing):
        return forcing
    if isinstance(forcing, ForcingSpec):
        return build_forcing(forcing, grid)
    if isinstance(forcing, StaggeredField):
        return Forcing(forcing.with_dirichlet(), None, ForcingSpec("body", data=forcing))
    raise TypeError("forcing must be a ForcingSpec, Forcing or face field")


def grad_layout_cell_magnitude(grid: Grid, flat: np.ndarray) -> np.ndarray:
    """Cell magnitude of a tensor on the gradient layout (averages of squares)."""
    ops = operators(grid)
    sizes = [ops._size_of(a, b) for a, b in ops.grad_pairs]
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    sq = np.zeros(ops.ncell)
    for (a, b), part in zip(ops.grad_pairs, parts):
        loc = ops._loc_of(a, b)
        sq += part**2 if loc == "cell" else ops.edge_to_cell[loc] @ part**2
    return np.sqrt(sq)


def forcing_norm(params: ModelParams, forcing: Forcing, grid: Grid) -> dict:
    """Weighted norm of ``F`` and the dual norm of ``f``.

    ``potential_norm`` is ``sum V d^beta |F|^p'`` (the p'-th power), with
    ``beta = -alpha/(p-1)`` unless tagged otherwise; ``dual_sq`` is
    ``||f||_{-1,2}^2 = <f, (-Lap)^{-1} f>``.
    """
    out = {}
    if forcing.F is not None:
        q = params.p / (params.p - 1)
        beta = forcing.spec.weight_power
        if beta is None:
            beta = -params.alpha / (params.p - 1)
        d = grid.distance_cells().ravel()
        mag = grad_layout_cell_magnitude(grid, forcing.F)
        out["potential_norm"] = float(grid.cell_volume * np.sum(d**beta * mag**q))
        out["potential_exponent"] = q
        out["potential_weight_power"] = beta
    psi = vector_laplace_solve(grid, forcing.f)
    ops = operators(grid)
    out["dual_sq"] = float(np.dot(ops.w_face * forcing.f.flat, psi.flat))
    return out


# ---------------------------------------------------------------------------
# operator assembly


def convective(params: ModelParams, grid: Grid, v: StaggeredField) -> StaggeredField:
    if params.convective_form == "rotational":
        return convective_rotational(grid, v)
    return convective_divergence(grid, v)


def operator_terms(params: ModelParams, grid: Grid, v: StaggeredField) -> dict:
    """Face fields of the separate terms of the momentum operator (no pressure)."""
    w = params.cell_weight(grid)
    omega = curl(grid, v)
    terms = {
        "regularization": p_stokes_operator(grid, v, params.p_reg, params.eps_sym),
        "viscous": p_stokes_operator(grid, v, 2.0, params.nu0),
        "stress": curl(grid, stress(params.stress_params, w, grid, omega)).with_dirichlet(),
        "convective": convective(params, grid, v),
    }
    return terms


def apply_operator(params: ModelParams, grid: Grid, v: StaggeredField) -> StaggeredField:
    """Strong-form momentum operator without pressure."""
    terms = operator_terms(params, grid, v)
    out = terms["regularization"]
    for k in ("viscous", "stress", "convective"):
        out = out + terms[k]
    return out.with_dirichlet()


def residual(params: ModelParams, forcing, grid: Grid, v: StaggeredField) -> StaggeredField:
    """Leray projection of the strong-form residual ``A(v) - f``."""
    fc = _as_forcing(forcing, grid)
    return leray_project(grid, apply_operator(params, grid, v) - fc.f)


def manufactured_forcing(params: ModelParams, grid: Grid, v_star: StaggeredField) -> StaggeredField:
    """Body force for which ``v_star`` solves the discrete system."""
    return apply_operator(params, grid, v_star)


def _norm_w(grid: Grid, x: np.ndarray) -> float:
    return float(np.sqrt(np.dot(operators(grid).w_face * x, x)))


def _seeded_amg(A: sp.csr_matrix):
    """Smoothed-aggregation hierarchy; pyamg draws its spectral-radius start vectors
    from the global RNG, so that state is pinned and restored for reproducibility."""
    state = np.random.get_state()
    np.random.seed(0)
    try:
        return pyamg.smoothed_aggregation_solver(A, symmetry="symmetric")
    finally:
        np.random.set_state(state)


class _FrozenSolver:
    """Projected PCG for the frozen linear operator at the current iterate."""

    def __init__(self, params: ModelParams, grid: Grid, v: StaggeredField, floor: float):
        ops = operators(grid)
        self.grid, self.ops = grid, ops
        omega = curl(grid, v)
        mag = np.sqrt(ops.edge_sq_to_cell(omega.flat))
        fl = floor * mag.max() if mag.max() > 0 else 1.0
        M = stress_multipliers(params.stress_params, params.cell_weight(grid), grid, omega, floor=fl)
        msym = np.zeros(ops.sym_grad.shape[0])
        if params.eps_sym > 0:
            dmag = sym_magnitude(grid, v)
            dfl = floor * dmag.max() if dmag.max() > 0 else 1.0
            msym += params.eps_sym * sym_multipliers(grid, v, params.p_reg, floor=dfl)
        msym += params.nu0
        self.Kw = (ops.sym_grad.T @ sp.diags(ops.w_sym * msym) @ ops.sym_grad
                   + ops.curl.T @ sp.diags(ops.w_edge_all * M) @ ops.curl).tocsr()
        ec = np.split(M, np.cumsum(ops.edge_sizes)[:-1])
        mu_c = sum(ops.edge_to_cell[a] @ ec[a] for a in range(3)) / 3.0 + msym[:ops.ncell]
        I = ops.interior
        aug = (self.Kw + ops.div.T @ sp.diags(ops.vol * mu_c) @ ops.div).tocsr()[I][:, I]
        self.amg = _seeded_amg(aug.tocsr())
        self.I = I

    def _project(self, x):
        return leray_project(self.grid, StaggeredField.from_flat(self.grid, x)).flat

    def _prec(self, r):
        ops = self.ops
        z = np.zeros_like(r)
        z[self.I] = self.amg.solve((ops.w_face * r)[self.I], maxiter=1, cycle="V", tol=1e-300)
        return self._project(z)

    def solve(self, b: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, int]:
        W = self.ops.w_face
        x = np.zeros_like(b)
        r = b.copy()
        b0 = np.sqrt(np.dot(W * b, b))
        if b0 == 0:
            return x, 0
        z = self._prec(r)
        d = z.copy()
        rz = np.dot(W * r, z)
        for it in range(1, max_iter + 1):
            q = self._project((self.Kw @ d) / W)
            step = rz / np.dot(W * d, q)
            x += step * d
            r -= step * q
            if np.sqrt(np.dot(W * r, r)) <= tol * b0:
                return x, it
            z = self._prec(r)
            rz_new = np.dot(W * r, z)
            d = z + (rz_new / rz) * d
            rz = rz_new
        return x, max_iter


def solve(params: ModelParams, forcing, grid: Grid, config: SolverConfig | None = None,
          v0: StaggeredField | None = None) -> SolveReport:
    """Damped Picard iteration to relative projected residual ``config.tol``.

    Non-convergence returns a report with ``converged=False``; non-finite
    values raise :class:`NumericalFailure`.
    """
    cfg = config or SolverConfig()
    fc = _as_forcing(forcing, grid)
    pf = leray_project(grid, fc.f)
    fnorm = _norm_w(grid, pf.flat)
    if fnorm == 0:
        zero = StaggeredField.zeros(grid)
        return SolveReport(zero, ScalarField(grid, np.zeros(grid.cells)), [0.0],
                           energy_ledger(params, fc, grid, zero), 0, True, params, message="zero forcing")
    v = leray_project(grid, v0) if v0 is not None else StaggeredField.zeros(grid)
    r = residual(params, fc, grid, v)
    rel = _norm_w(grid, r.flat) / fnorm
    history, thetas, inner = [rel], [], []
    theta = cfg.damping
    it = 0
    converged = rel < cfg.tol
    while not converged and it < cfg.max_iter:
        it += 1
        frozen = _FrozenSolver(params, grid, v, cfg.floor)
        dv, n_in = frozen.solve(r.flat, cfg.inner_tol, cfg.inner_max_iter)
        inner.append(n_in)
        while True:
            trial = StaggeredField.from_flat(grid, v.flat - theta * dv)
            r_trial = residual(params, fc, grid, trial)
            rel_trial = _norm_w(grid, r_trial.flat) / fnorm
            if not np.isfinite(rel_trial):
                raise NumericalFailure("non-finite residual", {"history": history, "iteration": it})
            if rel_trial <= rel or theta <= cfg.min_damping:
                break
            theta *= 0.5
        thetas.append(theta)
        v, r, rel = trial, r_trial, rel_trial
        history.append(rel)
        converged = rel < cfg.tol
        log.debug("picard %d residual %.3e theta %.3g inner %d", it, rel, theta, n_in)
    pressure = _pressure(params, fc, grid, v)
    message = "converged" if converged else f"not converged after {it} iterations (residual {rel:.3e})"
    return SolveReport(v, pressure, history, energy_ledger(params, fc, grid, v), it, converged, params,
                       thetas, inner, message)


def _pressure(params: ModelParams, fc: Forcing, grid: Grid, v: StaggeredField) -> ScalarField:
    _, phi = leray_project(grid, apply_operator(params, grid, v) - fc.f, return_potential=True)
    return ScalarField(grid, -phi.values)


# ---------------------------------------------------------------------------
# diagnostics


def weighted_vorticity(params: ModelParams, grid: Grid, v: StaggeredField) -> float:
    """``sum_c V w_c |omega|_c^p``."""
    ops = operators(grid)
    mag = np.sqrt(ops.edge_sq_to_cell(curl(grid, v).flat))
    return float(grid.cell_volume * np.sum(params.cell_weight(grid) * mag**params.p))


def grad_norm(grid: Grid, v: StaggeredField, q: float) -> float:
    mag = full_grad(grid, v).cell_magnitude()
    return float((grid.cell_volume * np.sum(mag**q)) ** (1.0 / q))


def energy_ledger(params: ModelParams, forcing, grid: Grid, v: StaggeredField) -> dict:
    """Every term of the energy balance obtained by testing with ``v``.

    ``energy_equality_residual`` is ``|<S, omega> + int F : grad v| / <S, omega>``
    (``None`` unless ``alpha < 6/5`` and a potential is present);
    ``estimate_ratio`` divides the left side of the a-priori estimate by the
    weighted forcing norm and ``viscous_ratio`` by ``||f||_{-1,2}^2 / nu0``.
    """
    fc = _as_forcing(forcing, grid)
    ops = operators(grid)
    omega = curl(grid, v)
    s = stress(params.stress_params, params.cell_weight(grid), grid, omega)
    stress_work = float(np.dot(ops.w_edge_all * s.flat, omega.flat))
    wv = weighted_vorticity(params, grid, v)
    reg = params.eps_sym * p_stokes_energy(grid, v, params.p_reg) if params.eps_sym > 0 else 0.0
    visc = params.nu0 * p_stokes_energy(grid, v, 2.0) if params.nu0 > 0 else 0.0
    conv = float(np.dot(ops.w_face * convective(params, grid, v).flat, v.flat))
    force_work = float(np.dot(ops.w_face * fc.f.flat, v.flat))
    ledger = {
        "regularization_energy": reg,
        "viscous_energy": visc,
        "weighted_vorticity": wv,
        "stress_work": stress_work,
        "convective_work": conv,
        "forcing_work": force_work,
        "balance_defect": reg + visc + stress_work + conv - force_work,
        "regularization_share": reg / (reg + visc + stress_work) if reg + visc + stress_work > 0 else 0.0,
        "energy_case": params.energy_case if params.nu0 == 0 else "viscous",
    }
    if fc.F is not None:
        ledger["potential_work"] = float(np.dot(ops.w_grad * fc.F, ops.full_grad @ v.flat))
    norms = forcing_norm(params, fc, grid)
    ledger.update(norms)
    ledger["energy_equality_residual"] = None
    if fc.F is not None and params.nu0 == 0 and params.energy_case == "equality" and stress_work > 0:
        ledger["energy_equality_residual"] = abs(stress_work + ledger["potential_work"]) / stress_work
    if norms.get("potential_norm", 0) > 0:
        ledger["estimate_ratio"] = (reg + wv) / norms["potential_norm"]
    if params.nu0 > 0 and norms["dual_sq"] > 0:
        ledger["viscous_lhs"] = reg + 0.5 * visc + wv
        ledger["viscous_ratio"] = ledger["viscous_lhs"] / (norms["dual_sq"] / params.nu0)
    for q in GRAD_EXPONENTS:
        ledger[f"grad_norm_{q}"] = grad_norm(grid, v, q)
    ledger["grad_vorticity_ratio"] = (ledger["grad_norm_1.33"] / wv ** (1.0 / params.p)) if wv > 0 else 0.0
    return ledger


def weak_form_residual(params: ModelParams, forcing, grid: Grid, v: StaggeredField,
                       tests: list[StaggeredField]) -> np.ndarray:
    """Relative weak-form residuals against solenoidal test fields.

    Each pairing is assembled from the integrands of the weak formulation
    (sym-gradient, curl and gradient layouts) rather than from the strong
    operator, and divided by the sum of the absolute term values.
    """
    fc = _as_forcing(forcing, grid)
    ops = operators(grid)
    w = params.cell_weight(grid)
    omega = curl(grid, v)
    S = stress(params.stress_params, w, grid, omega).flat
    Dv = ops.sym_grad @ v.flat
    m_reg = params.eps_sym * sym_multipliers(grid, v, params.p_reg) if params.eps_sym > 0 else 0.0
    conv = convective(params, grid, v).flat
    out = []
    for phi in tests:
        Dphi = ops.sym_grad @ phi.flat
        terms = [
            float(np.dot(ops.w_sym * (m_reg * Dv), Dphi)),
            float(params.nu0 * np.dot(ops.w_sym * Dv, Dphi)),
            float(np.dot(ops.w_edge_all * S, ops.curl @ phi.flat)),
            float(np.dot(ops.w_face * conv, phi.flat)),
        ]
        if fc.F is not None:
            rhs = -float(np.dot(ops.w_grad * fc.F, ops.full_grad @ phi.flat))
        else:
            rhs = float(np.dot(ops.w_face * fc.f.flat, phi.flat))
        scale = sum(abs(t) for t in terms) + abs(rhs)
        out.append(abs(sum(terms) - rhs) / scale if scale > 0 else 0.0)
    return np.asarray(out)


# ---------------------------------------------------------------------------
# continuation


def _compact_mask(grid: Grid, n: float) -> np.ndarray:
    return grid.distance_cells().ravel() >= 1.0 / n


def _cell_lp(grid: Grid, vals: np.ndarray, mask: np.ndarray, q: float) -> float:
    return float((grid.cell_volume * np.sum(np.abs(vals[mask]) ** q)) ** (1.0 / q))


@dataclass
class ContinuationReport:
    eps: list
    reports: list
    regularization_share: list
    weighted_vorticity: list
    estimate_ratio: list
    vorticity_increments: dict
    stress_increments: dict
    complete: bool

    def table(self) -> list[dict]:
        rows = []
        for k, e in enumerate(self.eps):
            row = {"stage": k, "eps": e, "iterations": self.reports[k].iterations,
                   "converged": self.reports[k].converged,
                   "regularization_share": self.regularization_share[k],
                   "weighted_vorticity": self.weighted_vorticity[k],
                   "estimate_ratio": self.estimate_ratio[k]}
            for n, inc in self.vorticity_increments.items():
                row[f"omega_increment_K{n}"] = inc[k - 1] if k > 0 else float("nan")
            for n, inc in self.stress_increments.items():
                row[f"stress_increment_K{n}"] = inc[k - 1] if k > 0 else float("nan")
            rows.append(row)
        return rows


def continuation(params: ModelParams, forcing, grid: Grid, eps_schedule, config: SolverConfig | None = None,
                 compacts=(3, 4, 8)) -> ContinuationReport:
    """Solve along a strictly decreasing ``eps_schedule``, warm-starting each stage.

    Increments are measured on ``K_n = {d >= 1/n}``: ``L^3`` norms of
    vorticity differences and ``L^{p'}`` norms of stress differences.
    """
    eps_schedule = [float(e) for e in eps_schedule]
    if any(b >= a for a, b in zip(eps_schedule, eps_schedule[1:])):
        raise ValueError("eps_schedule must be strictly decreasing")
    fc = _as_forcing(forcing, grid)
    ops = operators(grid)
    reports, shares, wvs, ratios = [], [], [], []
    om_inc = {n: [] for n in compacts}
    st_inc = {n: [] for n in compacts}
    prev = None
    v0 = None
    complete = True
    q = params.p / (params.p - 1)
    for e in eps_schedule:
        pe = params.with_eps(e)
        rep = solve(pe, fc, grid, config, v0=v0)
        reports.append(rep)
        shares.append(rep.ledger["regularization_share"])
        wvs.append(rep.ledger["weighted_vorticity"])
        ratios.append(rep.ledger.get("estimate_ratio", float("nan")))
        omega = curl(grid, rep.velocity)
        S = stress(pe.stress_params, pe.cell_weight(grid), grid, omega)
        if prev is not None:
            d_om = np.sqrt(ops.edge_sq_to_cell(omega.flat - prev[0].flat))
            d_st = np.sqrt(ops.edge_sq_to_cell(S.flat - prev[1].flat))
            for n in compacts:
                mask = _compact_mask(grid, n)
                om_inc[n].append(_cell_lp(grid, d_om, mask, 3.0))
                st_inc[n].append(_cell_lp(grid, d_st, mask, q))
        prev = (omega, S)
        v0 = rep.velocity
        if not rep.converged:
            complete = False
            break
    return ContinuationReport(eps_schedule[:len(reports)], reports, shares, wvs, ratios, om_inc, st_inc, complete)


# ---------------------------------------------------------------------------
# localized monotonicity


def _bump(grid: Grid, x: np.ndarray, center, radius) -> np.ndarray:
    """Smooth ``eta`` with ``1`` on ``B(center, R)`` and support in ``B(center, 2R)``."""
    r = np.linalg.norm(x - np.asarray(center), axis=-1) / radius
    t = np.clip(2.0 - r, 0.0, 1.0)

    def smooth(s):
        with np.errstate(divide="ignore"):
            return np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)

    return smooth(t) / (smooth(t) + smooth(1.0 - t))


def _bump_gradient(x: np.ndarray, center, radius, h: float = 1e-6) -> np.ndarray:
    g = []
    for a in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[a] = h
        g.append((_bump(None, x + e, center, radius) - _bump(None, x - e, center, radius)) / (2 * h))
    return np.stack(g, axis=-1)


def localization_diagnostic(params: ModelParams, grid: Grid, v_eps: StaggeredField, v_limit: StaggeredField,
                            center=(0.5, 0.5, 0.5), radius: float = 0.15, mean_tol: float = 1e-8,
                            forcing=None) -> dict:
    """Localized monotonicity gap and the six terms of its decomposition.

    The test field ``w = eta (v_eps - v_limit) - Bog(div(eta (v_eps - v_limit)))``
    is built on the ball ``2B``; the discrete divergence of the product is
    used so that its mean over ``2B`` vanishes exactly, and the Bogovskii
    remainder is removed by a final projection (its size is reported as
    ``projection_leak``).  Term (V) vanishes because the limit stress is the
    stress of the limit velocity.
    """
    center = np.asarray(center, dtype=float)
    dom_d = grid.domain.distance(center)
    if not 2 * radius < dom_d:
        raise ValueError("the ball 2B must lie strictly inside the domain")
    ops = operators(grid)
    dv = v_eps - v_limit
    eta_f = [_bump(grid, grid.face_coords(a), center, radius).ravel() for a in range(3)]
    eta_dv = StaggeredField.from_flat(grid, np.concatenate(eta_f) * dv.flat).with_dirichlet()
    g = ops.div @ eta_dv.flat
    kernel = BogovskiiKernel(center=tuple(center), radius=2 * radius)
    inside = kernel.ball_mask(grid).ravel()
    outside_mass = float(np.abs(g[~inside]).sum() * grid.cell_volume)
    mean = float(g[inside].sum() * grid.cell_volume)
    scale = float(np.abs(g).sum() * grid.cell_volume)
    if scale > 0 and abs(mean) > mean_tol * max(scale, 1e-300) + outside_mass:
        raise ValueError(f"mean of the Bogovskii datum over 2B is {mean:.3e}")
    removed = 0.0
    if scale > 0:
        # the kernel averages with cut-cell volume fractions; remove that quadrature-level mean
        removed = kernel.ball_mean(grid, g.reshape(grid.cells))
        g0 = zero_mean(kernel, grid, g.reshape(grid.cells))
        b = bogovskii(kernel, ScalarField(grid, g0))
    else:
        b = StaggeredField.zeros(grid)
    w_raw = eta_dv - b
    w = leray_project(grid, w_raw)
    leak = _norm_w(grid, (w - w_raw).flat) / max(_norm_w(grid, w_raw.flat), 1e-300)

    w_cell = params.cell_weight(grid)
    om_m, om = curl(grid, v_eps), curl(grid, v_limit)
    S_m = stress(params.stress_params, w_cell, grid, om_m)
    S = stress(params.stress_params, w_cell, grid, om)
    dS = (S_m - S).flat
    eta_e = np.concatenate([_bump(grid, grid.edge_coords(a), center, radius).ravel() for a in range(3)])
    gap = float(np.dot(ops.w_edge_all * eta_e * dS, (om_m - om).flat))

    from dclab.fields import cell_vectors

    # (I): -(dS) . (grad eta x dv), formed at cell centers
    xc = grid.cell_centers()
    geta = _bump_gradient(xc, center, radius)
    cross = np.cross(geta, cell_vectors(grid, dv))
    dS_c = cell_vectors(grid, StaggeredField.from_flat(grid, dS, EDGE))
    term1 = -float(grid.cell_volume * np.sum(dS_c * cross))
    term2 = float(np.dot(ops.w_edge_all * dS, curl(grid, b).flat))
    Ddv = ops.sym_grad @ dv.flat
    term3 = -params.nu0 * float(np.dot(ops.w_sym * Ddv, ops.sym_grad @ w.flat))
    n_lim = convective(params, grid, v_limit).flat
    n_m = convective(params, grid, v_eps).flat
    term4 = float(np.dot(ops.w_face * (n_lim - n_m), w.flat))
    term5 = 0.0
    if params.eps_sym > 0:
        m = sym_multipliers(grid, v_eps, params.p_reg)
        term6 = -params.eps_sym * float(np.dot(ops.w_sym * m * (ops.sym_grad @ v_eps.flat), ops.sym_grad @ w.flat))
    else:
        term6 = 0.0
    terms = [term1, term2, term3, term4, term5, term6]
    return {
        "gap": gap,
        "terms": terms,
        "terms_sum": float(sum(terms)),
        "max_div_w": float(np.abs(ops.div @ w.flat).max()),
        "projection_leak": leak,
        "removed_mean": removed,
    }


__all__ = [
    "ContinuationReport",
    "Forcing",
    "ForcingSpec",
    "ModelParams",
    "NumericalFailure",
    "SolveReport",
    "SolverConfig",
    "apply_operator",
    "build_forcing",
    "continuation",
    "energy_ledger",
    "forcing_norm",
    "localization_diagnostic",
    "manufactured_forcing",
    "operator_terms",
    "residual",
    "solve",
    "weak_form_residual",
    "weighted_vorticity",
]
