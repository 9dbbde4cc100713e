import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dclab.fields import (
    EDGE,
    FACE,
    Grid,
    NormSpec,
    ScalarField,
    StaggeredField,
    convective_rotational,
    convective_standard,
    curl,
    div,
    grad,
    inner,
    inner_cells,
    kinetic_gradient,
    leray_project,
    load_field,
    norm,
    operators,
    poisson_neumann,
    save_field,
    sym_grad,
    vector_laplace_solve,
)
from dclab.geometry import DomainSpec, PowerWeight

G8 = Grid.cube(8)
INNER = (slice(2, -2),) * 3


def random_face(grid, seed, dirichlet=True):
    rng = np.random.default_rng(seed)
    v = StaggeredField.from_flat(grid, rng.standard_normal(operators(grid).div.shape[1]))
    return v.with_dirichlet() if dirichlet else v


def random_edge(grid, seed):
    rng = np.random.default_rng(seed)
    return StaggeredField.from_flat(grid, rng.standard_normal(operators(grid).curl.shape[0]), EDGE)


def smooth_potential(x):
    r2 = ((x - 0.5) ** 2).sum(-1)
    b = np.where(r2 < 0.16, (1 - r2 / 0.16) ** 4, 0.0)
    return np.stack([b * np.sin(3 * x[..., 1]), b * np.cos(2 * x[..., 2]), b * x[..., 0]], -1)


def test_grid_requires_four_cells():
    with pytest.raises(ValueError):
        Grid.cube(3)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        ScalarField(G8, np.zeros((8, 8, 7)))
    with pytest.raises(ValueError):
        div(Grid.cube(6), StaggeredField.zeros(G8))


def test_zero_field():
    z = StaggeredField.zeros(G8)
    assert np.all(div(G8, z).values == 0)
    assert curl(G8, z).max_abs() == 0


def test_grad_of_linear():
    u = ScalarField.from_function(G8, lambda x: x[..., 0])
    g = grad(G8, u)
    assert np.allclose(g.components[0][1:-1], 1.0, atol=1e-12)
    assert np.allclose(g.components[1], 0.0) and np.allclose(g.components[2], 0.0)


def test_curl_of_shear():
    v = StaggeredField.from_function(G8, lambda x: np.stack([x[..., 1], 0 * x[..., 0], 0 * x[..., 0]], -1),
                                     dirichlet=False)
    w = curl(G8, v)
    assert np.allclose(w.components[2][1:-1, 1:-1, :], -1.0, atol=1e-12)
    assert np.allclose(w.components[0][:, 1:-1, 1:-1], 0.0)
    assert np.allclose(w.components[1][1:-1, :, 1:-1], 0.0)


def test_sym_grad_rigid_rotation():
    w0 = np.array([0.3, -1.2, 0.7])
    v = StaggeredField.from_function(G8, lambda x: np.cross(w0, x - 0.5), dirichlet=False)
    D = sym_grad(G8, v)
    for (a, b), val in D.entries.items():
        sl = (slice(1, -1),) * 3
        assert np.abs(val[sl]).max() <= 1e-10 * np.linalg.norm(w0)


def test_sym_grad_diagonal():
    v = StaggeredField.from_function(
        G8, lambda x: np.stack([x[..., 0], -x[..., 1], 0 * x[..., 2]], -1), dirichlet=False)
    D = sym_grad(G8, v)
    assert np.allclose(D.entries[(0, 0)], 1.0)
    assert np.allclose(D.entries[(1, 1)], -1.0)
    assert np.allclose(D.entries[(2, 2)], 0.0)
    for key in [(0, 1), (0, 2), (1, 2)]:
        assert np.allclose(D.entries[key][(slice(1, -1),) * 3], 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([4, 6, 9]))
def test_grad_div_adjoint(seed, n):
    g = Grid.cube(n)
    v = random_face(g, seed)
    u = ScalarField(g, np.random.default_rng(seed + 1).standard_normal(g.cells))
    lhs = inner(g, grad(g, u), v) + inner_cells(g, u, div(g, v))
    scale = np.sqrt(inner_cells(g, u, u) * inner(g, v, v))
    assert abs(lhs) <= 1e-12 * scale


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_curl_adjoint(seed):
    v = random_face(G8, seed, dirichlet=False)
    A = random_edge(G8, seed + 1)
    lhs = inner(G8, curl(G8, v), A) - inner(G8, v, curl(G8, A))
    assert abs(lhs) <= 1e-12 * np.sqrt(inner(G8, v, v) * inner(G8, A, A))


@pytest.mark.parametrize("n", [6, 8, 12])
def test_exact_identities(n):
    g = Grid.cube(n)
    A = StaggeredField.from_function(g, smooth_potential, EDGE)
    assert np.abs(div(g, curl(g, A)).values).max() <= 1e-12 * max(1.0, A.max_abs() * n * n)
    u = ScalarField.from_function(g, lambda x: np.sin(2 * x[..., 0]) * np.cos(x[..., 1] + x[..., 2]))
    c = curl(g, grad(g, u))
    for comp in c.components:
        assert np.abs(comp[(slice(1, -1),) * 3]).max() <= 1e-12


def test_div_curl_all_cells_random():
    A = random_edge(G8, 3)
    assert np.abs(div(G8, curl(G8, A)).values).max() <= 1e-12 * 64 * 10


def test_gradient_energy_splits_into_curl_and_div():
    g = Grid.cube(7)
    v = random_face(g, 11)
    ops = operators(g)
    G = ops.full_grad @ v.flat
    lhs = np.dot(ops.w_grad * G, G)
    rhs = inner(g, curl(g, v), curl(g, v)) + inner_cells(g, div(g, v), div(g, v))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_convective_examples():
    v = StaggeredField.from_function(G8, lambda x: np.stack([x[..., 1], 0 * x[..., 0], 0 * x[..., 0]], -1),
                                     dirichlet=False)
    std = convective_standard(G8, v)
    rot = convective_rotational(G8, v)
    xf = G8.face_coords(1)[..., 1]
    assert np.allclose(std.components[0][INNER], 0.0, atol=1e-12)
    assert np.allclose(rot.components[1][INNER], -xf[INNER], atol=1e-12)
    assert np.allclose((std - rot).components[1][INNER], xf[INNER], atol=1e-12)


def test_convective_zero():
    z = StaggeredField.zeros(G8)
    assert convective_rotational(G8, z).max_abs() == 0
    assert convective_standard(G8, z).max_abs() == 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_rotational_form_energy_neutral(seed):
    v = leray_project(G8, random_face(G8, seed))
    assert abs(inner(G8, convective_rotational(G8, v), v)) <= 1e-10 * inner(G8, v, v)


def test_rotational_identity_second_order():
    errs = []
    for n in (16, 32, 64):
        g = Grid.cube(n)
        v = curl(g, StaggeredField.from_function(g, smooth_potential, EDGE))
        d = convective_standard(g, v) - convective_rotational(g, v) - kinetic_gradient(g, v)
        k = n // 8
        sl = (slice(k, -k),) * 3
        errs.append(max(np.abs(c[sl]).max() for c in d.components))
    assert np.log2(errs[1] / errs[2]) >= 1.8


def test_leray_projection_properties():
    v = random_face(G8, 5)
    w = leray_project(G8, v)
    assert np.abs(div(G8, w).values).max() <= 1e-8
    assert (leray_project(G8, w) - w).max_abs() <= 1e-10 * w.max_abs()
    assert w.boundary_max() == 0.0


def test_leray_cg_route_agrees():
    v = random_face(G8, 6)
    a = leray_project(G8, v, method="dct")
    b = leray_project(G8, v, method="cg")
    assert (a - b).max_abs() <= 1e-7 * a.max_abs()


def test_leray_annihilates_gradients():
    phi = ScalarField.from_function(G8, lambda x: np.cos(np.pi * x[..., 0]) * np.cos(np.pi * x[..., 1]))
    g = grad(G8, phi)
    assert leray_project(G8, g).max_abs() <= 1e-10 * g.max_abs()


def test_poisson_unknown_method():
    with pytest.raises(ValueError):
        poisson_neumann(G8, np.zeros(G8.cells), method="multigrid")


def test_vector_laplace_inverse():
    v = random_face(G8, 9)
    psi = vector_laplace_solve(G8, v)
    lap = (curl(G8, curl(G8, psi)) - grad(G8, div(G8, psi))).with_dirichlet()
    assert (lap - v).max_abs() <= 1e-10 * v.max_abs()


def test_norm_constant_cube():
    one = ScalarField(G8, np.ones(G8.cells))
    assert norm(G8, one, NormSpec(3.0)) == pytest.approx(1.0, rel=1e-14)


def test_norm_weighted_1d():
    g = Grid(DomainSpec("box", (1.0,), dim=1), (64,))
    one = ScalarField(g, np.ones(g.cells))
    val = norm(g, one, NormSpec(1.0, weight=PowerWeight(1.0, g.domain)))
    assert val == pytest.approx(0.25, rel=1e-12)


def test_norm_alpha_zero_is_plain():
    v = random_face(G8, 2)
    a = norm(G8, v, NormSpec(2.5))
    b = norm(G8, v, NormSpec(2.5, weight=PowerWeight(0.0, G8.domain)))
    assert a == b


def test_negative_alpha_norm_converges_1d():
    vals = []
    for n in (64, 256, 1024):
        g = Grid(DomainSpec("box", (1.0,), dim=1), (n,))
        one = ScalarField(g, np.ones(g.cells))
        vals.append(norm(g, one, NormSpec(1.0, weight=PowerWeight(-0.5, g.domain))))
    exact = 2 * 2 * np.sqrt(0.5)  # 2 * int_0^{1/2} t^{-1/2} dt
    assert abs(vals[-1] - exact) < abs(vals[0] - exact)
    assert vals[-1] == pytest.approx(exact, rel=0.02)


def test_sobolev_norm_includes_gradient():
    g = Grid(DomainSpec("box", (1.0,), dim=1), (256,))
    u = ScalarField.from_function(g, lambda x: np.sin(np.pi * x[..., 0]))
    val = norm(g, u, NormSpec(2.0, sobolev_order=1))
    assert val == pytest.approx(np.sqrt(0.5 + np.pi**2 / 2), rel=1e-3)


def test_fractional_constant_zero_and_guard():
    g = Grid.cube(6)
    assert norm(g, ScalarField(g, np.full(g.cells, 3.0)), NormSpec(2.0, fractional_s=0.3)) == 0.0
    big = Grid.cube(33)
    with pytest.raises(ValueError):
        norm(big, ScalarField(big, np.ones(big.cells)), NormSpec(2.0, fractional_s=0.3))


def test_normspec_exclusive():
    with pytest.raises(ValueError):
        NormSpec(2.0, weight=PowerWeight(1.0, G8.domain), fractional_s=0.5)
    assert NormSpec(2.0).kind == "lebesgue"
    assert NormSpec(2.0, sobolev_order=1).kind == "sobolev"


@pytest.mark.parametrize("location", [FACE, EDGE])
def test_serialization_roundtrip(tmp_path, location):
    f = random_face(G8, 1) if location == FACE else random_edge(G8, 1)
    save_field(tmp_path / "field", f)
    back = load_field(tmp_path / "field.json")
    assert back.location == location and back.grid == G8
    assert all(np.array_equal(a, b) for a, b in zip(f.components, back.components))


def test_serialization_scalar(tmp_path):
    s = ScalarField(G8, np.arange(512.0).reshape(8, 8, 8))
    save_field(tmp_path / "p", s)
    assert np.array_equal(load_field(tmp_path / "p").values, s.values)
