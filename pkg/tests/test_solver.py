import numpy as np
import pytest
from numpy.polynomial import Polynomial

from dclab.fields import FACE, Grid, StaggeredField, div, operators
from dclab.inequalities import sample_field
from dclab.solver import (
    ForcingSpec,
    ModelParams,
    NumericalFailure,
    SolverConfig,
    build_forcing,
    continuation,
    energy_ledger,
    localization_diagnostic,
    manufactured_forcing,
    residual,
    solve,
    weak_form_residual,
)


def wnorm(g, x):
    return float(np.sqrt(np.dot(operators(g).w_face * x.flat, x.flat)))


@pytest.mark.parametrize("kw", [
    dict(nu0=0, eps=0),
    dict(nu0=-1),
    dict(eps=1e-2, reg_flavor="other"),
    dict(eps=1e-2, convective_form="skew"),
    dict(eps=1e-2, p=2, alpha=1.5),
    dict(eps=1e-2, p=2, alpha=2.5, convective_form="divergence"),
])
def test_params_refused(kw):
    with pytest.raises(ValueError):
        ModelParams(**kw)


def test_params_accepted():
    assert ModelParams(p=2, alpha=1.5, eps=1e-2, convective_form="divergence").system == "regularized"
    assert ModelParams(p=3, alpha=2, nu0=1).system == "viscous"
    assert ModelParams(alpha=1.0, eps=1).energy_case == "equality"
    assert ModelParams(alpha=1.3, eps=1).energy_case == "weak_form_only"


def test_residual_zero():
    g = Grid.cube(8)
    r = residual(ModelParams(eps=1e-2, alpha=1), ForcingSpec("zero"), g, StaggeredField.zeros(g))
    assert r.max_abs() == 0


@pytest.mark.parametrize("form", ["rotational", "divergence"])
def test_manufactured_self_consistency(form):
    g = Grid.cube(8)
    P = ModelParams(p=3, alpha=1, eps=1e-2, nu0=0.1, convective_form=form)
    v = sample_field(g, "solenoidal_dirichlet", 2)
    f = manufactured_forcing(P, g, v)
    assert wnorm(g, residual(P, f, g, v)) <= 1e-10 * wnorm(g, f)


# polynomial velocity with hand-derived forcing for nu0 = 1, p = 2, alpha = 0:
# f = -(3/2) Lap v + curl v x v
_B = Polynomial([0, 0, 1]) * Polynomial([1, -1]) ** 2
_D = [_B.deriv(k) for k in range(4)]


def _poly(x):
    X = [p(x[..., 0]) for p in _D]
    Y = [p(x[..., 1]) for p in _D]
    Z = [p(x[..., 2]) for p in _D]
    zero = np.zeros_like(X[0])
    v = np.stack([X[0] * Y[1] * Z[0], -X[1] * Y[0] * Z[0], zero], -1)
    lap = np.stack([X[2] * Y[1] * Z[0] + X[0] * Y[3] * Z[0] + X[0] * Y[1] * Z[2],
                    -(X[3] * Y[0] * Z[0] + X[1] * Y[2] * Z[0] + X[1] * Y[0] * Z[2]), zero], -1)
    om = np.stack([X[1] * Y[0] * Z[1], X[0] * Y[1] * Z[1], -X[2] * Y[0] * Z[0] - X[0] * Y[2] * Z[0]], -1)
    return v, -1.5 * lap + np.cross(om, v)


def test_polynomial_oracle_second_order():
    P = ModelParams(p=2, alpha=0, nu0=1.0)
    errs = []
    for n in (8, 16, 32):
        g = Grid.cube(n)
        v = StaggeredField.from_function(g, lambda x: _poly(x)[0], FACE)
        f = StaggeredField.from_function(g, lambda x: _poly(x)[1], FACE)
        r = residual(P, f, g, v)
        tests = [sample_field(g, "solenoidal_dirichlet", s) for s in range(3)]
        W = operators(g).w_face
        errs.append(max(abs(np.dot(W * r.flat, t.flat)) / wnorm(g, t) for t in tests) / wnorm(g, f))
    assert errs[0] <= 0.5 * (1 / 8) ** 2
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert orders.min() >= 1.8, orders


def test_zero_forcing_gives_zero():
    g = Grid.cube(8)
    rep = solve(ModelParams(eps=1e-2, alpha=1), ForcingSpec("zero"), g)
    assert rep.converged and rep.iterations == 0
    assert rep.velocity.max_abs() == 0
    for k in ("regularization_energy", "weighted_vorticity", "stress_work", "forcing_work"):
        assert rep.ledger[k] == 0


def test_viscous_weak_form():
    g = Grid.cube(8)
    P = ModelParams(p=3, alpha=2, nu0=1.0)
    forcing = ForcingSpec("body", scale=1.0)
    rep = solve(P, forcing, g)
    assert rep.converged
    assert rep.residual_history[-1] < 1e-8
    tests = [sample_field(g, "solenoidal_dirichlet", s) for s in range(20)]
    assert weak_form_residual(P, forcing, g, rep.velocity, tests).max() <= 1e-6
    assert np.abs(div(g, rep.velocity).values).max() <= 1e-10
    assert rep.ledger["viscous_ratio"] > 0


def test_energy_equality_and_neutrality():
    g = Grid.cube(8)
    P = ModelParams(p=3, alpha=1, eps=1e-3)
    rep = solve(P, ForcingSpec(), g)
    L = rep.ledger
    assert rep.converged
    assert L["energy_equality_residual"] <= 0.05
    assert abs(L["convective_work"]) <= 1e-10 * wnorm(g, rep.velocity) ** 2
    assert abs(L["balance_defect"]) <= 1e-6 * L["stress_work"]


def test_no_energy_equality_above_threshold():
    g = Grid.cube(8)
    P = ModelParams(p=3, alpha=1.5, eps=1e-2, convective_form="divergence")
    rep = solve(P, ForcingSpec(), g)
    assert rep.converged and rep.ledger["energy_equality_residual"] is None


def test_picard_contraction_small_data():
    g = Grid.cube(8)
    P = ModelParams(p=3, alpha=1, kappa=1.0, nu0=1.0)
    counts = [solve(P, ForcingSpec("body", scale=s), g, SolverConfig(damping=1.0)).iterations
              for s in (10.0, 1.0, 0.1)]
    assert counts[0] >= counts[1] >= counts[2]
    assert counts[2] < counts[0]


def test_convective_forms_agree():
    diffs = []
    for n in (8, 16):
        g = Grid.cube(n)
        vs = [solve(ModelParams(p=3, alpha=1, nu0=0.2, convective_form=c), ForcingSpec("body", scale=20.0), g).velocity
              for c in ("rotational", "divergence")]
        diffs.append(wnorm(g, vs[0] - vs[1]) / wnorm(g, vs[0]))
    assert diffs[1] < diffs[0]
    assert diffs[1] < 0.05


def test_shifted_weight_flavor():
    g = Grid.cube(8)
    rep = solve(ModelParams(p=3, alpha=1, eps=1e-2, reg_flavor="shifted_weight"), ForcingSpec(), g)
    assert rep.converged
    assert rep.ledger["regularization_energy"] == 0


def test_nan_forcing_raises():
    g = Grid.cube(8)
    f = StaggeredField.zeros(g)
    f.components[0][2, 2, 2] = np.nan
    with pytest.raises(NumericalFailure):
        solve(ModelParams(eps=1e-2), f, g)


def test_nonconvergence_is_reported():
    g = Grid.cube(8)
    rep = solve(ModelParams(eps=1e-3, alpha=1), ForcingSpec(), g, SolverConfig(max_iter=2))
    assert not rep.converged and rep.iterations == 2


def test_ledger_zero_field():
    g = Grid.cube(8)
    L = energy_ledger(ModelParams(eps=1e-2), ForcingSpec(), g, StaggeredField.zeros(g))
    assert L["stress_work"] == 0 and L["forcing_work"] == 0


def test_forcing_is_divergence_of_potential():
    g = Grid.cube(8)
    fc = build_forcing(ForcingSpec(seed=3), g)
    v = sample_field(g, "dirichlet", 1)
    ops = operators(g)
    lhs = np.dot(ops.w_face * fc.f.flat, v.flat)
    rhs = -np.dot(ops.w_grad * fc.F, ops.full_grad @ v.flat)
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.fixture(scope="module")
def cont():
    g = Grid.cube(8)
    return g, continuation(ModelParams(p=3, alpha=1, eps=1e-2), ForcingSpec(), g, [8e-3, 4e-3, 2e-3, 1e-3])


def test_continuation_share_decreases(cont):
    _, c = cont
    assert c.complete
    assert np.all(np.diff(c.regularization_share) < 0)
    inc = c.vorticity_increments[4]
    assert inc[-1] < inc[-2]
    assert len(c.table()) == 4


def test_continuation_schedule_validated():
    with pytest.raises(ValueError):
        continuation(ModelParams(eps=1e-2), ForcingSpec(), Grid.cube(8), [1e-3, 2e-3])


def test_localization(cont):
    g, c = cont
    P = ModelParams(p=3, alpha=1, eps=2e-3)
    same = localization_diagnostic(P, g, c.reports[-1].velocity, c.reports[-1].velocity)
    assert same["gap"] == 0 and all(t == 0 for t in same["terms"])
    out = localization_diagnostic(P, g, c.reports[-2].velocity, c.reports[-1].velocity)
    assert out["max_div_w"] <= 1e-7
    assert out["gap"] >= 0
    with pytest.raises(ValueError):
        localization_diagnostic(P, g, c.reports[-2].velocity, c.reports[-1].velocity, radius=0.3)
