import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dclab.fields import EDGE, Grid, ScalarField, StaggeredField, curl, div, grad, inner, operators
from dclab.geometry import DomainSpec, PowerWeight
from dclab.operators import (
    BogovskiiKernel,
    BogovskiiMeanError,
    StressParams,
    bogovskii,
    bogovskii_many,
    bogovskii_residual,
    maximal_function,
    monotonicity_gap,
    p_stokes_operator,
    random_zero_mean,
    stress,
    stress_energy,
    stress_pointwise,
    zero_mean,
)

G6 = Grid.cube(6)
G8 = Grid.cube(8)


def uniform_edge(grid, vec):
    return StaggeredField(grid, tuple(np.full(grid.shape(EDGE, a), vec[a]) for a in range(3)), EDGE)


def random_edge(grid, rng, scale=1.0):
    n = operators(grid).curl.shape[0]
    return StaggeredField.from_flat(grid, scale * rng.standard_normal(n), EDGE)


def test_params_validation():
    with pytest.raises(ValueError):
        StressParams(p=1.0)
    with pytest.raises(ValueError):
        StressParams(p=3.0, alpha=-0.5)
    with pytest.raises(ValueError):
        StressParams(p=3.0, kappa=-1.0)


def test_stress_uniform_unweighted():
    s = stress(StressParams(3.0), None, G6, uniform_edge(G6, (2.0, 0.0, 0.0)))
    assert np.allclose(s.components[0], 4.0) and np.allclose(s.components[1], 0.0)


def test_stress_pointwise_weighted():
    assert np.allclose(stress_pointwise(StressParams(3.0, alpha=2.0), 0.5, [2.0, 0.0, 0.0]), [1.0, 0.0, 0.0])


@pytest.mark.parametrize("p, kappa", [(3.0, 0.0), (2.0, 0.0), (1.5, 0.5), (1.5, 0.0)])
def test_stress_zero_field(p, kappa):
    s = stress(StressParams(p, 1.0, kappa), PowerWeight(1.0, G6.domain), G6, uniform_edge(G6, (0, 0, 0)))
    assert s.max_abs() == 0.0


def test_stress_odd():
    rng = np.random.default_rng(0)
    w = random_edge(G6, rng)
    prm = StressParams(2.5, 1.0, 0.1)
    a = stress(prm, PowerWeight(1.0, G6.domain), G6, w)
    b = stress(prm, PowerWeight(1.0, G6.domain), G6, -w)
    assert np.array_equal(a.flat, -b.flat)


def test_stress_energy_identity():
    rng = np.random.default_rng(1)
    w = random_edge(G6, rng)
    prm = StressParams(3.0, 2.0, 0.0)
    wt = PowerWeight(2.0, G6.domain)
    s = stress(prm, wt, G6, w)
    assert inner(G6, s, w) == pytest.approx(stress_energy(prm, wt, G6, w), rel=1e-12)


def test_monotonicity_examples():
    prm = StressParams(3.0)
    w1 = uniform_edge(G6, (1.0, 0.0, 0.0))
    assert monotonicity_gap(prm, None, G6, w1, w1) == 0.0
    zero = uniform_edge(G6, (0.0, 0.0, 0.0))
    assert monotonicity_gap(prm, np.ones(G6.cells), G6, w1, zero) == pytest.approx(1.0, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    p=st.sampled_from([1.5, 2.0, 3.0]),
    alpha=st.floats(0.0, 2.0),
    kappa=st.sampled_from([0.0, 0.1]),
)
def test_monotonicity_property(seed, p, alpha, kappa):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.0, 1.0, G6.cells) ** 2
    weight = d**alpha
    w1 = random_edge(G6, rng, rng.uniform(0.01, 10))
    w2 = random_edge(G6, rng, rng.uniform(0.01, 10))
    gap, scale = monotonicity_gap(StressParams(p, alpha, kappa), weight, G6, w1, w2, return_scale=True)
    assert gap >= -1e-12 * scale


def test_p_stokes_zero_eps():
    v = StaggeredField.from_flat(G8, np.random.default_rng(2).standard_normal(operators(G8).div.shape[1]))
    assert p_stokes_operator(G8, v, 3.0, 0.0).max_abs() == 0.0


def test_p_stokes_rigid_rotation():
    w0 = np.array([0.4, -0.3, 1.1])
    v = StaggeredField.from_function(G8, lambda x: np.cross(w0, x - 0.5), dirichlet=False)
    out = p_stokes_operator(G8, v, 3.0, 1.0)
    inner_sl = (slice(2, -2),) * 3
    assert max(np.abs(c[inner_sl]).max() for c in out.components) <= 1e-10


def test_p_stokes_linear_stencil_oracle():
    # for p_reg = 2: -div Dv = (1/2) curl* curl v - grad div v on interior faces
    v = StaggeredField.from_flat(G8, np.random.default_rng(3).standard_normal(operators(G8).div.shape[1]))
    v = v.with_dirichlet()
    eps = 0.7
    out = p_stokes_operator(G8, v, 2.0, eps)
    oracle = (curl(G8, curl(G8, v)) * 0.5 - grad(G8, div(G8, v))).with_dirichlet() * eps
    assert (out - oracle).max_abs() <= 1e-10 * oracle.max_abs()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p_reg=st.sampled_from([1.5, 2.0, 3.0]))
def test_p_stokes_coercive(seed, p_reg):
    v = StaggeredField.from_flat(G6, np.random.default_rng(seed).standard_normal(operators(G6).div.shape[1]))
    v = v.with_dirichlet()
    assert inner(G6, p_stokes_operator(G6, v, p_reg, 1.0), v) >= 0.0


def test_maximal_function_constant():
    g = Grid.cube(16)
    m = maximal_function(g, ScalarField(g, np.full(g.cells, -2.5)))
    assert np.allclose(m.values, 2.5)


def test_maximal_function_indicator_decay():
    g = Grid.cube(32)
    vals = np.zeros(g.cells)
    vals[16, 16, 16] = 1.0
    m = maximal_function(g, vals).values
    # at offset k the smallest admissible dyadic cube has half-width 2^ceil(log2(k+1)) - 1
    for k in (1, 3, 7, 15):
        side = 2 * k + 1
        assert m[16 + k, 16, 16] == pytest.approx(1.0 / side**3)
    assert m[16, 16, 16] == 1.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_maximal_function_bounds_and_sublinear(seed):
    g = Grid.cube(8)
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(g.cells), rng.standard_normal(g.cells)
    ma, mb = maximal_function(g, a).values, maximal_function(g, b).values
    assert np.all(ma >= np.abs(a) - 1e-15)
    assert np.all(maximal_function(g, a + b).values <= ma + mb + 1e-12)


BALL16 = Grid(DomainSpec.unit_ball(), (16, 16, 16))
KERNEL = BogovskiiKernel()


def test_core_unit_integral():
    g = Grid(DomainSpec.unit_ball(), (64, 64, 64))
    assert g.cell_volume * KERNEL.core(g.cell_centers()).sum() == pytest.approx(1.0, rel=1e-3)


def test_bogovskii_zero():
    u = bogovskii(KERNEL, ScalarField(BALL16, np.zeros(BALL16.cells)))
    assert u.max_abs() == 0.0


def test_bogovskii_mean_error():
    with pytest.raises(BogovskiiMeanError):
        bogovskii(KERNEL, ScalarField(BALL16, np.ones(BALL16.cells)))


def test_bogovskii_linear_data():
    g = Grid(DomainSpec.unit_ball(), (32, 32, 32))
    f = ScalarField(g, zero_mean(KERNEL, g, g.cell_centers()[..., 0]))
    u = bogovskii(KERNEL, f)
    assert bogovskii_residual(KERNEL, f, u)["interior"] <= 0.05


def test_bogovskii_linearity():
    f = random_zero_mean(KERNEL, BALL16, 1)
    g = random_zero_mean(KERNEL, BALL16, 2)
    uf, ug, uh = bogovskii_many(KERNEL, BALL16, np.stack([f, g, 2.0 * f - 3.0 * g]), mean_tol=1e-8)
    diff = uh - (uf * 2.0 - ug * 3.0)
    assert diff.max_abs() <= 1e-12 * uh.max_abs()


def test_bogovskii_vanishes_outside_ball():
    u = bogovskii(KERNEL, ScalarField(BALL16, random_zero_mean(KERNEL, BALL16, 3)))
    for a, c in enumerate(u.components):
        r = np.linalg.norm(BALL16.face_coords(a), axis=-1)
        assert np.all(c[r >= 1.0] == 0.0)


def test_bogovskii_on_sub_ball_of_cube():
    g = Grid.cube(24)
    kern = BogovskiiKernel(center=(0.5, 0.5, 0.5), radius=0.3)
    f = ScalarField(g, zero_mean(kern, g, g.cell_centers()[..., 1] ** 2))
    u = bogovskii(kern, f)
    assert bogovskii_residual(kern, f, u)["interior"] <= 0.1
