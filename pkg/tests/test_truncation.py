import numpy as np
import pytest
import scipy.ndimage as ndi
from hypothesis import given, settings, strategies as st

from dclab.fields import EDGE, FACE, Grid, StaggeredField, curl, div, operators
from dclab.truncation import (
    TruncationError,
    TruncationLevels,
    bracket,
    curl_inverse,
    demo_ensemble,
    edge_divergence,
    level_decay,
    maximal_hessian,
    null_sequence,
    select_levels,
    select_threshold,
    truncate,
    truncate_at,
    weak_star_pairings,
)


@pytest.fixture(scope="module")
def g16():
    return Grid.cube(16)


@pytest.fixture(scope="module")
def seq16(g16):
    return null_sequence(g16, n=3)


def l2(grid, f):
    return float(np.sqrt(np.dot(operators(grid).w_face, f.flat**2)))


@pytest.mark.parametrize("j, lo, hi", [(0, 1, 1), (1, 2, 3), (2, 4, 7), (3, 8, 15)])
def test_bracket(j, lo, hi):
    assert bracket(j) == (lo, hi)


def test_levels_reject_out_of_bracket():
    with pytest.raises(ValueError):
        TruncationLevels(0, 2, {(0, 1): 2.0})
    with pytest.raises(ValueError):
        TruncationLevels(2, 1)
    lv = TruncationLevels(0, 2)
    lv.set(0, 2, 64.0)
    assert lv.get(0, 2) == 64.0 and lv.get(1, 2) == 16.0


@given(st.integers(0, 3), st.floats(0.1, 5.0))
@settings(max_examples=30, deadline=None)
def test_selected_threshold_in_bracket(j, scale):
    M = scale * np.exp(np.random.default_rng(0).normal(size=(6, 6, 6)) * 3)
    lam = select_threshold(M, j, 2.0, 1.0)
    TruncationLevels.check(j, lam)


def test_curl_inverse_zero(g16):
    A = curl_inverse(g16, StaggeredField.zeros(g16))
    assert A.location == EDGE and A.max_abs() == 0.0


def test_curl_inverse_reconstructs(g16):
    g = Grid.cube(32)
    for u in null_sequence(g, n=2, seed=3):
        A = curl_inverse(g, u)
        assert l2(g, curl(g, A) - u) <= 0.05 * l2(g, u)
        assert np.abs(edge_divergence(g, A)).max() <= 1e-8


def test_identity_when_threshold_huge(g16, seq16):
    u = seq16[0]
    field, bad = truncate(g16, u, TruncationLevels(0, 3), 3)
    assert bad.empty
    assert (field - u).max_abs() <= 1e-10


def test_truncation_solenoidal_and_local(g16, seq16):
    u = seq16[0] * 8.0
    _, M = maximal_hessian(g16, u)
    res = truncate_at(g16, u, 0.5 * M.max())
    assert not res.bad.empty
    assert np.abs(div(g16, res.field).values).max() <= 1e-8
    assert res.field.boundary_max() == 0.0
    # faces whose neighbouring cells are all outside the dilated bad set are untouched
    far = ~ndi.binary_dilation(res.bad.dilated, structure=np.ones((3, 3, 3), bool))
    for a, (c_out, c_in) in enumerate(zip(res.field.components, u.components)):
        pad = np.pad(far, [(1, 1) if k == a else (0, 0) for k in range(3)], constant_values=True)
        lo = np.take(pad, range(0, pad.shape[a] - 1), axis=a)
        hi = np.take(pad, range(1, pad.shape[a]), axis=a)
        keep = lo & hi
        assert np.abs(c_out - c_in)[keep].max() <= 1e-12


def test_gradient_bounded_by_threshold(g16, seq16):
    u = seq16[1] * 8.0
    _, M = maximal_hessian(g16, u)
    ratios = [truncate_at(g16, u, f * M.max()).grad_ratio for f in (0.25, 0.5, 0.8)]
    assert max(ratios) < 5.0


def test_degenerate_bad_set(g16, seq16):
    with pytest.raises(TruncationError):
        truncate_at(g16, seq16[0] * 1e6, 2.0)


def test_level_decay_empty_rows_zero(g16, seq16):
    lv = TruncationLevels(1, 3)
    tab = level_decay(g16, [seq16[0] * 1e-3], lv)
    assert all(r["value"] == 0.0 for r in tab.rows)
    assert tab.exponent is None


def test_level_decay_needs_three_levels(g16, seq16):
    with pytest.raises(ValueError):
        level_decay(g16, seq16, TruncationLevels(0, 1))
    with pytest.raises(ValueError):
        level_decay(g16, seq16, TruncationLevels(0, 3), s=1.0)


def test_rows_nonincreasing_after_first_level(g16, seq16):
    us = [u * 4.0 for u in seq16]
    lv = select_levels(g16, us, 0, 3)
    tab = level_decay(g16, us, lv)
    for m in range(len(us)):
        vals = [r["value"] for r in tab.rows if r["m"] == m][1:]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def test_pigeonhole_bound(g16):
    lv = TruncationLevels(0, 3)
    us = demo_ensemble(g16, lv, per_level=1)
    lv = select_levels(g16, us, 0, 3)
    tab = level_decay(g16, us, lv)
    assert tab.exponent is not None and tab.exponent < 0
    assert all(r["max_div"] <= 1e-8 * max(1.0, r["grad_norm"]) for r in tab.rows if not r["degenerate"])


def test_null_sequence_normalised(g16):
    us = null_sequence(g16, n=3, grad_norm=[1.0, 2.0, 3.0])
    lv = TruncationLevels(0, 2)
    tab = level_decay(g16, us, lv)
    norms = sorted({round(r["grad_norm"], 8) for r in tab.rows})
    assert norms == pytest.approx([1.0, 2.0, 3.0])


def test_sup_norm_decays_along_null_sequence():
    g = Grid.cube(32)
    us = null_sequence(g, n=4)
    outs = [truncate_at(g, u, 2.0).field for u in us]
    sups = [f.max_abs() for f in outs]
    pair = [np.abs(weak_star_pairings(g, f)).max() for f in outs]
    assert all(b < a for a, b in zip(sups, sups[1:]))
    assert all(b < a for a, b in zip(pair, pair[1:]))


def test_weak_star_pairings_fixed_dictionary(g16, seq16):
    a = weak_star_pairings(g16, seq16[0])
    b = weak_star_pairings(g16, seq16[0])
    assert a.shape == (10,) and np.array_equal(a, b)
    assert np.all(weak_star_pairings(g16, StaggeredField.zeros(g16, FACE)) == 0.0)
