"""MAC-staggered fields, discrete calculus, Leray projection and norms.

Layout on an ``nx x ny x nz`` box grid:

* cells ``(nx, ny, nz)`` hold scalars (pressure, divergence);
* face component ``a`` has nodes along axis ``a`` and cells along the others
  and holds velocity component ``a``;
* edge component ``a`` has cells along axis ``a`` and nodes along the others
  and holds curl component ``a``.

Homogeneous Dirichlet data enter through ghost reflection whenever a
tangential velocity is differenced or averaged across a wall.  Edge values
are integrated with trapezoid weights (one half per boundary direction),
which makes the discrete curl exactly self-adjoint.  Magnitudes of
staggered tensors at cell centers are formed from averages of squares.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from dclab.geometry import DomainSpec, PowerWeight

FACE = "face"
EDGE = "edge"


class PoissonError(RuntimeError):
    """Raised when an iterative Poisson solve fails to converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class Grid:
    """Uniform cell grid on the bounding box of ``domain``."""

    domain: DomainSpec
    cells: tuple[int, ...]

    def __post_init__(self):
        cells = tuple(int(n) for n in np.atleast_1d(self.cells))
        if len(cells) == 1 and self.domain.dim > 1:
            cells = cells * self.domain.dim
        if len(cells) != self.domain.dim:
            raise ValueError("need one cell count per axis")
        if min(cells) < 4:
            raise ValueError("at least 4 cells per axis are required")
        object.__setattr__(self, "cells", cells)

    @classmethod
    def cube(cls, n: int, domain: DomainSpec | None = None) -> "Grid":
        return cls(domain or DomainSpec.unit_cube(), (n, n, n))

    @property
    def dim(self) -> int:
        return len(self.cells)

    @cached_property
    def lower(self) -> np.ndarray:
        return self.domain.bounding_box()[0]

    @cached_property
    def spacing(self) -> np.ndarray:
        lo, hi = self.domain.bounding_box()
        return (hi - lo) / np.asarray(self.cells)

    @property
    def h(self) -> float:
        return float(self.spacing.max())

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def _axis(self, ax: int, nodal: bool) -> np.ndarray:
        n = self.cells[ax]
        i = np.arange(n + 1) if nodal else np.arange(n) + 0.5
        return self.lower[ax] + self.spacing[ax] * i

    def coords(self, nodal: tuple[bool, ...]) -> np.ndarray:
        """Point coordinates, shape ``(*shape, dim)``, for a staggering pattern."""
        axes = [self._axis(a, nodal[a]) for a in range(self.dim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def cell_centers(self) -> np.ndarray:
        return self.coords((False,) * self.dim)

    def face_coords(self, a: int) -> np.ndarray:
        return self.coords(tuple(k == a for k in range(self.dim)))

    def edge_coords(self, a: int) -> np.ndarray:
        return self.coords(tuple(k != a for k in range(self.dim)))

    def node_coords(self) -> np.ndarray:
        return self.coords((True,) * self.dim)

    def shape(self, location: str, a: int) -> tuple[int, ...]:
        if location == FACE:
            return tuple(n + (k == a) for k, n in enumerate(self.cells))
        return tuple(n + (k != a) for k, n in enumerate(self.cells))

    def distance_cells(self) -> np.ndarray:
        """Boundary distance at cell centers (0 outside a ball domain)."""
        x = self.cell_centers()
        return np.maximum(self.domain._signed_distance(x), 0.0)

    def inside_cells(self) -> np.ndarray:
        return self.domain._signed_distance(self.cell_centers()) > 0

    def refined(self, factor: int = 2) -> "Grid":
        return Grid(self.domain, tuple(n * factor for n in self.cells))

    def to_dict(self) -> dict:
        return {"domain": {"kind": self.domain.kind, "extents": list(self.domain.extents),
                           "dim": self.domain.dim, "origin": list(self.domain.origin)},
                "cells": list(self.cells)}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(DomainSpec(**{**d["domain"], "extents": tuple(d["domain"]["extents"]),
                                 "origin": tuple(d["domain"]["origin"])}), tuple(d["cells"]))


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Cell-centered scalar."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.cells:
            raise ValueError(f"scalar shape {v.shape} does not match grid {self.grid.cells}")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "ScalarField":
        return cls(grid, fn(grid.cell_centers()))

    def __add__(self, other):
        return ScalarField(self.grid, self.values + other.values)

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - other.values)

    def __mul__(self, c):
        return ScalarField(self.grid, self.values * c)

    __rmul__ = __mul__

    def mean(self, mask=None) -> float:
        if mask is None:
            return float(self.values.mean())
        return float(self.values[mask].mean())


@dataclass(frozen=True, eq=False)
class StaggeredField:
    """Vector field with component ``a`` on ``a``-faces (velocity) or ``a``-edges (curl)."""

    grid: Grid
    components: tuple[np.ndarray, ...]
    location: str = FACE

    def __post_init__(self):
        if self.grid.dim != 3:
            raise ValueError("staggered fields need a 3D grid")
        if self.location not in (FACE, EDGE):
            raise ValueError("location must be 'face' or 'edge'")
        comps = tuple(np.asarray(c, dtype=float) for c in self.components)
        if len(comps) != 3:
            raise ValueError("three components required")
        for a, c in enumerate(comps):
            if c.shape != self.grid.shape(self.location, a):
                raise ValueError(f"component {a} has shape {c.shape}, "
                                 f"expected {self.grid.shape(self.location, a)}")
        object.__setattr__(self, "components", comps)

    @classmethod
    def zeros(cls, grid: Grid, location: str = FACE) -> "StaggeredField":
        return cls(grid, tuple(np.zeros(grid.shape(location, a)) for a in range(3)), location)

    @classmethod
    def from_flat(cls, grid: Grid, flat: np.ndarray, location: str = FACE) -> "StaggeredField":
        comps = []
        start = 0
        for a in range(3):
            shp = grid.shape(location, a)
            n = int(np.prod(shp))
            comps.append(np.asarray(flat[start:start + n]).reshape(shp))
            start += n
        return cls(grid, tuple(comps), location)

    @classmethod
    def from_function(cls, grid: Grid, fn, location: str = FACE, dirichlet: bool = True) -> "StaggeredField":
        """Sample ``fn(x) -> (..., 3)`` at the staggered positions."""
        comps = []
        for a in range(3):
            x = grid.face_coords(a) if location == FACE else grid.edge_coords(a)
            comps.append(np.asarray(fn(x))[..., a])
        f = cls(grid, tuple(comps), location)
        return f.with_dirichlet() if (dirichlet and location == FACE) else f

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([c.ravel() for c in self.components])

    def with_dirichlet(self) -> "StaggeredField":
        """Zero the wall-normal entries of a face field."""
        if self.location != FACE:
            return self
        comps = []
        for a, c in enumerate(self.components):
            c = c.copy()
            idx = [slice(None)] * 3
            for end in (0, -1):
                idx[a] = end
                c[tuple(idx)] = 0.0
            comps.append(c)
        return StaggeredField(self.grid, tuple(comps), FACE)

    def boundary_max(self) -> float:
        """Largest wall-normal entry of a face field."""
        out = 0.0
        for a, c in enumerate(self.components):
            out = max(out, float(np.abs(np.take(c, [0, -1], axis=a)).max()))
        return out

    def max_abs(self) -> float:
        return max(float(np.abs(c).max()) for c in self.components)

    def _binary(self, other, op):
        if other.location != self.location:
            raise ValueError("location mismatch")
        return StaggeredField(self.grid, tuple(op(a, b) for a, b in zip(self.components, other.components)),
                              self.location)

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, c):
        return StaggeredField(self.grid, tuple(x * c for x in self.components), self.location)

    __rmul__ = __mul__


# ---------------------------------------------------------------------------
# sparse building blocks


def _d_nodes(n: int, h: float) -> sp.csr_matrix:
    """nodes (n+1) -> cells (n) forward difference."""
    return sp.diags([-np.ones(n), np.ones(n)], [0, 1], shape=(n, n + 1), format="csr") / h


def _d_cells(n: int, h: float, ghost: bool = True) -> sp.csr_matrix:
    """cells (n) -> nodes (n+1); ghost reflection (zero wall value) or zero wall rows."""
    m = sp.lil_matrix((n + 1, n))
    for i in range(1, n):
        m[i, i] = 1.0
        m[i, i - 1] = -1.0
    if ghost:
        m[0, 0] = 2.0
        m[n, n - 1] = -2.0
    return m.tocsr() / h


def _a_nodes(n: int) -> sp.csr_matrix:
    return sp.diags([0.5 * np.ones(n), 0.5 * np.ones(n)], [0, 1], shape=(n, n + 1), format="csr")


def _a_cells(n: int) -> sp.csr_matrix:
    """cells -> nodes average with zero wall value."""
    m = sp.lil_matrix((n + 1, n))
    for i in range(1, n):
        m[i, i] = 0.5
        m[i, i - 1] = 0.5
    return m.tocsr()


def _kron3(a, b, c) -> sp.csr_matrix:
    return sp.kron(a, sp.kron(b, c, format="csr"), format="csr")


def _eye(n):
    return sp.identity(n, format="csr")


class Operators:
    """Sparse discrete operators for one 3D grid (built once per grid)."""

    def __init__(self, grid: Grid):
        if grid.dim != 3:
            raise ValueError("discrete calculus needs a 3D grid")
        self.grid = grid
        n = grid.cells
        h = grid.spacing
        self.vol = grid.cell_volume
        Dn = [_d_nodes(n[a], h[a]) for a in range(3)]
        Dg = [_d_cells(n[a], h[a], True) for a in range(3)]
        Dz = [_d_cells(n[a], h[a], False) for a in range(3)]
        An = [_a_nodes(n[a]) for a in range(3)]
        Ag = [_a_cells(n[a]) for a in range(3)]
        Ic = [_eye(n[a]) for a in range(3)]
        In = [_eye(n[a] + 1) for a in range(3)]

        def along(a, op, nodal):
            """Apply ``op`` along axis ``a``; other axes nodal per the tuple."""
            mats = []
            for k in range(3):
                mats.append(op if k == a else (In[k] if nodal[k] else Ic[k]))
            return _kron3(*mats)

        face_nodal = [tuple(k == a for k in range(3)) for a in range(3)]
        edge_nodal = [tuple(k != a for k in range(3)) for a in range(3)]
        self.face_sizes = [int(np.prod(grid.shape(FACE, a))) for a in range(3)]
        self.edge_sizes = [int(np.prod(grid.shape(EDGE, a))) for a in range(3)]
        self.ncell = int(np.prod(n))

        self.div = sp.hstack([along(a, Dn[a], face_nodal[a]) for a in range(3)], format="csr")
        self.grad = sp.vstack([along(a, Dz[a], face_nodal[a]) for a in range(3)], format="csr")

        # d_b of face component a, with the location it lands on
        def dface(a, b):
            if a == b:
                return along(a, Dn[a], face_nodal[a])
            return along(b, Dg[b], face_nodal[a])

        def blank(r, c):
            return sp.csr_matrix((r, c))

        fs, es = self.face_sizes, self.edge_sizes
        # curl: edge a = d_{a+1} v_{a+2} - d_{a+2} v_{a+1}
        rows = []
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            blocks = [None, None, None]
            blocks[a] = blank(es[a], fs[a])
            blocks[c] = dface(c, b)
            blocks[b] = -dface(b, c)
            rows.append(blocks)
        self.curl = sp.bmat(rows, format="csr")

        # full gradient: entries (a, b) = d_b v_a; diagonal on cells, (a, b) off-diagonal on edge e
        self.grad_pairs = [(0, 0), (1, 1), (2, 2), (1, 2), (2, 1), (0, 2), (2, 0), (0, 1), (1, 0)]
        blocks = []
        self.grad_locations = []
        for a, b in self.grad_pairs:
            row = [blank(self._size_of(a, b), fs[k]) for k in range(3)]
            row[a] = dface(a, b)
            blocks.append(row)
            self.grad_locations.append(self._loc_of(a, b))
        self.full_grad = sp.bmat(blocks, format="csr")

        # symmetric gradient: D11, D22, D33, D23 (x-edge), D13 (y-edge), D12 (z-edge)
        sym = []
        for a in range(3):
            row = [blank(self.ncell, fs[k]) for k in range(3)]
            row[a] = dface(a, a)
            sym.append(row)
        for e in range(3):
            b, c = (e + 1) % 3, (e + 2) % 3
            row = [blank(es[e], fs[k]) for k in range(3)]
            row[b] = 0.5 * dface(b, c)
            row[c] = 0.5 * dface(c, b)
            sym.append(row)
        self.sym_grad = sp.bmat(sym, format="csr")

        # averaging to cells
        self.face_to_cell = [along(a, An[a], face_nodal[a]) for a in range(3)]
        self.edge_to_cell = []
        for a in range(3):
            mats = [An[k] if k != a else Ic[k] for k in range(3)]
            self.edge_to_cell.append(_kron3(*mats))
        # face component a -> edge e (e != a) interpolation, zero wall values
        self._face_to_edge = {}
        for a in range(3):
            for e in range(3):
                if e == a:
                    continue
                b = 3 - a - e  # the other nodal axis of edge e besides a
                self._face_to_edge[(a, e)] = along(b, Ag[b], face_nodal[a])

        # quadrature weights
        self.w_edge = []
        for a in range(3):
            shp = grid.shape(EDGE, a)
            w = np.full(shp, self.vol)
            for k in range(3):
                if k == a:
                    continue
                idx = [slice(None)] * 3
                for end in (0, -1):
                    idx[k] = end
                    w[tuple(idx)] *= 0.5
            self.w_edge.append(w.ravel())
        self.w_edge_all = np.concatenate(self.w_edge)
        self.w_cell = np.full(self.ncell, self.vol)
        self.w_grad = np.concatenate([self._weights_at(loc) for loc in self.grad_locations])
        self.w_sym = np.concatenate([self.w_cell] * 3 + [2.0 * self.w_edge[e] for e in range(3)])

        mask = []
        for a in range(3):
            m = np.ones(grid.shape(FACE, a), dtype=bool)
            idx = [slice(None)] * 3
            for end in (0, -1):
                idx[a] = end
                m[tuple(idx)] = False
            mask.append(m.ravel())
        self.interior = np.concatenate(mask)
        # trapezoid face weights; only the wall-normal entries differ from the cell volume
        self.w_face = np.where(self.interior, self.vol, 0.5 * self.vol)

    def _loc_of(self, a, b):
        return "cell" if a == b else 3 - a - b

    def _size_of(self, a, b):
        loc = self._loc_of(a, b)
        return self.ncell if loc == "cell" else self.edge_sizes[loc]

    def _weights_at(self, loc):
        return self.w_cell if loc == "cell" else self.w_edge[loc]

    def adjoint(self, m: sp.spmatrix, w_out: np.ndarray) -> sp.csr_matrix:
        """Adjoint of an operator on face fields w.r.t. output weights ``w_out``."""
        return (sp.diags(1.0 / self.w_face) @ m.T @ sp.diags(w_out)).tocsr()

    @cached_property
    def curl_adj(self) -> sp.csr_matrix:
        return self.adjoint(self.curl, self.w_edge_all)

    @cached_property
    def grad_adj(self) -> sp.csr_matrix:
        return self.adjoint(self.full_grad, self.w_grad)

    @cached_property
    def sym_adj(self) -> sp.csr_matrix:
        return self.adjoint(self.sym_grad, self.w_sym)

    def face_to_edge(self, a: int, e: int) -> sp.csr_matrix:
        return self._face_to_edge[(a, e)]

    def edge_sq_to_cell(self, edge_flat: np.ndarray) -> np.ndarray:
        """Cell values of ``sum_a avg(edge_a ** 2)``."""
        out = np.zeros(self.ncell)
        start = 0
        for a in range(3):
            n = self.edge_sizes[a]
            out += self.edge_to_cell[a] @ edge_flat[start:start + n] ** 2
            start += n
        return out

    def edge_coefficient(self, cell_coef: np.ndarray) -> np.ndarray:
        """Edge multipliers ``m_e`` with ``sum_e W_e m_e x_e^2 = sum_c V mu_c avg(x^2)_c``."""
        out = []
        for a in range(3):
            out.append((self.edge_to_cell[a].T @ (self.vol * cell_coef)) / self.w_edge[a])
        return np.concatenate(out)


@lru_cache(maxsize=16)
def operators(grid: Grid) -> Operators:
    return Operators(grid)


# ---------------------------------------------------------------------------
# public differential operators


def _check(grid: Grid, f):
    if f.grid != grid:
        raise ValueError("field does not live on the given grid")


def grad(grid: Grid, u: ScalarField) -> StaggeredField:
    """Face gradient of a cell scalar; wall-normal entries are zero."""
    _check(grid, u)
    return StaggeredField.from_flat(grid, operators(grid).grad @ u.values.ravel())


def div(grid: Grid, v: StaggeredField) -> ScalarField:
    _check(grid, v)
    if v.location != FACE:
        raise ValueError("div expects a face field")
    return ScalarField(grid, (operators(grid).div @ v.flat).reshape(grid.cells))


def curl(grid: Grid, v: StaggeredField) -> StaggeredField:
    """Face field -> edge field, or edge field -> face field (the adjoint curl)."""
    _check(grid, v)
    ops = operators(grid)
    if v.location == FACE:
        return StaggeredField.from_flat(grid, ops.curl @ v.flat, EDGE)
    return StaggeredField.from_flat(grid, ops.curl_adj @ v.flat, FACE)


@dataclass(frozen=True, eq=False)
class TensorField:
    """Staggered second-order tensor: entries keyed by index pairs."""

    grid: Grid
    entries: dict

    def cell_magnitude(self) -> np.ndarray:
        ops = operators(self.grid)
        out = np.zeros(ops.ncell)
        for (a, b), val in self.entries.items():
            if a == b:
                out += val.ravel() ** 2
            else:
                out += ops.edge_to_cell[3 - a - b] @ val.ravel() ** 2
        return np.sqrt(out).reshape(self.grid.cells)


def sym_grad(grid: Grid, v: StaggeredField) -> TensorField:
    """Symmetric gradient; all nine entries, off-diagonal ones on edges."""
    _check(grid, v)
    ops = operators(grid)
    flat = ops.sym_grad @ v.flat
    parts = np.split(flat, np.cumsum([ops.ncell] * 3 + ops.edge_sizes)[:-1])
    cells = grid.cells
    entries = {(a, a): parts[a].reshape(cells) for a in range(3)}
    for e in range(3):
        b, c = (e + 1) % 3, (e + 2) % 3
        val = parts[3 + e].reshape(grid.shape(EDGE, e))
        entries[(b, c)] = val
        entries[(c, b)] = val
    return TensorField(grid, entries)


def full_grad(grid: Grid, v: StaggeredField) -> TensorField:
    _check(grid, v)
    ops = operators(grid)
    flat = ops.full_grad @ v.flat
    sizes = [ops._size_of(a, b) for a, b in ops.grad_pairs]
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    entries = {}
    for (a, b), part in zip(ops.grad_pairs, parts):
        loc = ops._loc_of(a, b)
        shp = grid.cells if loc == "cell" else grid.shape(EDGE, loc)
        entries[(a, b)] = part.reshape(shp)
    return TensorField(grid, entries)


def cell_vectors(grid: Grid, v: StaggeredField) -> np.ndarray:
    """Components averaged to cell centers, shape ``(*cells, 3)``."""
    ops = operators(grid)
    mats = ops.face_to_cell if v.location == FACE else ops.edge_to_cell
    return np.stack([(m @ c.ravel()).reshape(grid.cells) for m, c in zip(mats, v.components)], axis=-1)


def edge_magnitude(grid: Grid, omega: StaggeredField) -> np.ndarray:
    """Cell values of ``|omega|`` built from averages of squared edge values."""
    return np.sqrt(operators(grid).edge_sq_to_cell(omega.flat)).reshape(grid.cells)


def _cells_to_faces(grid: Grid, c: np.ndarray) -> StaggeredField:
    ops = operators(grid)
    flat = np.concatenate([ops.face_to_cell[a].T @ c[..., a].ravel() for a in range(3)])
    return StaggeredField.from_flat(grid, flat).with_dirichlet()


def convective_rotational(grid: Grid, v: StaggeredField) -> StaggeredField:
    """``omega x v`` formed at cell centers and distributed to faces by the adjoint average.

    The construction is exactly energy neutral: ``<omega x v, v> = 0``.
    """
    _check(grid, v)
    w_c = cell_vectors(grid, curl(grid, v))
    v_c = cell_vectors(grid, v)
    return _cells_to_faces(grid, np.cross(w_c, v_c))


def _grad_at_cells(grid: Grid, v: StaggeredField) -> np.ndarray:
    """Velocity gradient averaged to cell centers, ``g[..., a, b] = d_b v_a``."""
    ops = operators(grid)
    t = full_grad(grid, v)
    g = np.zeros(grid.cells + (3, 3))
    for (a, b), val in t.entries.items():
        if a == b:
            g[..., a, b] = val
        else:
            g[..., a, b] = (ops.edge_to_cell[3 - a - b] @ val.ravel()).reshape(grid.cells)
    return g


def convective_standard(grid: Grid, v: StaggeredField) -> StaggeredField:
    """``(grad v) v`` formed at cell centers and distributed to faces."""
    _check(grid, v)
    g = _grad_at_cells(grid, v)
    v_c = cell_vectors(grid, v)
    return _cells_to_faces(grid, np.einsum("...ab,...b->...a", g, v_c))


def kinetic_gradient(grid: Grid, v: StaggeredField) -> StaggeredField:
    """Face gradient of ``|v|^2 / 2`` taken at cell centers."""
    v_c = cell_vectors(grid, v)
    return grad(grid, ScalarField(grid, 0.5 * (v_c**2).sum(axis=-1)))


def convective_divergence(grid: Grid, v: StaggeredField) -> StaggeredField:
    """``Div(v (x) v)`` in weak form: ``<c, phi> = -<v (x) v, grad phi>``."""
    _check(grid, v)
    ops = operators(grid)
    parts = []
    vc = [ops.face_to_cell[a] @ v.components[a].ravel() for a in range(3)]
    for a, b in ops.grad_pairs:
        if a == b:
            parts.append(vc[a] ** 2)
        else:
            e = 3 - a - b
            parts.append((ops.face_to_edge(a, e) @ v.components[a].ravel())
                         * (ops.face_to_edge(b, e) @ v.components[b].ravel()))
    flux = np.concatenate(parts)
    return StaggeredField.from_flat(grid, -(ops.grad_adj @ flux)).with_dirichlet()


# ---------------------------------------------------------------------------
# Poisson solves and projections


def _neumann_eigs(n: int, h: float) -> np.ndarray:
    return (2.0 - 2.0 * np.cos(np.pi * np.arange(n) / n)) / h**2


def poisson_neumann(grid: Grid, rhs: np.ndarray, method: str = "dct", tol: float = 1e-10,
                    maxiter: int = 5000) -> np.ndarray:
    """Solve ``div grad phi = rhs`` (zero-flux walls), zero-mean solution.

    ``method='dct'`` diagonalizes the 7-point Laplacian exactly;
    ``method='cg'`` runs conjugate gradients to relative tolerance ``tol``.
    """
    rhs = np.asarray(rhs, dtype=float).reshape(grid.cells)
    rhs = rhs - rhs.mean()
    if method == "dct":
        lam = np.zeros(grid.cells)
        for a in range(3):
            shape = [1, 1, 1]
            shape[a] = grid.cells[a]
            lam = lam + _neumann_eigs(grid.cells[a], grid.spacing[a]).reshape(shape)
        r = sfft.dctn(rhs, type=2, norm="ortho")
        lam.flat[0] = 1.0
        phi = -r / lam
        phi.flat[0] = 0.0
        return sfft.idctn(phi, type=2, norm="ortho")
    if method == "cg":
        ops = operators(grid)
        lap = -(ops.div @ ops.grad)
        b = -rhs.ravel()
        phi, info = spla.cg(lap, b, rtol=tol, maxiter=maxiter)
        res = np.linalg.norm(lap @ phi - b) / max(np.linalg.norm(b), 1e-300)
        if info != 0 or res > 10 * tol:
            raise PoissonError("conjugate gradient did not converge", res)
        phi = phi - phi.mean()
        return phi.reshape(grid.cells)
    raise ValueError(f"unknown Poisson method {method!r}")


def leray_project(grid: Grid, v: StaggeredField, method: str = "dct", return_potential: bool = False):
    """Discrete Leray projection ``v - grad phi`` with ``div grad phi = div v``."""
    _check(grid, v)
    v = v.with_dirichlet()
    phi = poisson_neumann(grid, div(grid, v).values, method=method)
    out = v - grad(grid, ScalarField(grid, phi))
    if return_potential:
        return out, ScalarField(grid, phi)
    return out


def _dirichlet_eigs(n: int, h: float, nodal: bool) -> np.ndarray:
    k = np.arange(1, n) if nodal else np.arange(1, n + 1)
    return (2.0 - 2.0 * np.cos(np.pi * k / n)) / h**2


def vector_laplace_solve(grid: Grid, rhs: StaggeredField) -> StaggeredField:
    """Solve ``-Lap psi = rhs`` for a face field with no-slip walls.

    Each component decouples: sine transforms of type I along its own axis
    (wall-normal Dirichlet at nodes) and type II along the others (ghost
    reflection).  Wall-normal entries of ``rhs`` are ignored.
    """
    out = []
    for a in range(3):
        r = rhs.components[a]
        sl = [slice(None)] * 3
        sl[a] = slice(1, -1)
        r = r[tuple(sl)]
        lam = np.zeros(r.shape)
        coef = r
        for k in range(3):
            shape = [1, 1, 1]
            shape[k] = r.shape[k]
            lam = lam + _dirichlet_eigs(grid.cells[k], grid.spacing[k], k == a).reshape(shape)
            coef = sfft.dst(coef, type=1 if k == a else 2, axis=k, norm="ortho")
        coef = coef / lam
        for k in range(3):
            coef = sfft.idst(coef, type=1 if k == a else 2, axis=k, norm="ortho")
        full = np.zeros(grid.shape(FACE, a))
        full[tuple(sl)] = coef
        out.append(full)
    return StaggeredField(grid, tuple(out))


# ---------------------------------------------------------------------------
# norms


@dataclass(frozen=True)
class NormSpec:
    """Selects one of: plain L^p, weighted L^p, (weighted) W^{1,p}, fractional seminorm."""

    p: float
    weight: PowerWeight | None = None
    sobolev_order: int = 0
    fractional_s: float | None = None

    def __post_init__(self):
        if not (self.p >= 1):
            raise ValueError("p must be at least 1")
        if self.sobolev_order not in (0, 1):
            raise ValueError("sobolev_order must be 0 or 1")
        if self.fractional_s is not None:
            if not 0 < self.fractional_s < 1:
                raise ValueError("fractional order must lie in (0, 1)")
            if self.weight is not None or self.sobolev_order:
                raise ValueError("fractional seminorm cannot be combined with weights or derivatives")

    @property
    def kind(self) -> str:
        if self.fractional_s is not None:
            return "fractional"
        if self.sobolev_order:
            return "sobolev"
        return "weighted" if self.weight is not None else "lebesgue"


FRACTIONAL_MAX_CELLS = 32**3


def cell_weights(grid: Grid, weight: PowerWeight | None) -> np.ndarray:
    """Quadrature weights ``V * d^alpha`` at cell centers.

    For ``alpha < 0`` cells touching the boundary are split once into
    ``2^dim`` sub-cells and the weight is averaged over them.
    """
    vol = grid.cell_volume
    if weight is None or weight.alpha == 0:
        return np.full(grid.cells, vol)
    d = grid.distance_cells()
    w = weight.of_distance(d)
    if weight.alpha < 0:
        near = d < 0.75 * grid.spacing.max()
        if np.any(near):
            centers = grid.cell_centers()[near]
            offsets = np.stack(np.meshgrid(*([np.array([-0.25, 0.25])] * grid.dim), indexing="ij"),
                               axis=-1).reshape(-1, grid.dim) * grid.spacing
            sub = centers[:, None, :] + offsets[None]
            dsub = np.maximum(grid.domain._signed_distance(sub), 0.0)
            w[near] = weight.of_distance(dsub).mean(axis=1)
    if grid.domain.kind == "ball":
        w = np.where(grid.inside_cells(), w, 0.0)
    return vol * w


def pointwise_magnitude(grid: Grid, field) -> np.ndarray:
    """Cell-center magnitude of a scalar, face or edge field."""
    if isinstance(field, ScalarField):
        return np.abs(field.values)
    if isinstance(field, TensorField):
        return field.cell_magnitude()
    if field.location == EDGE:
        return edge_magnitude(grid, field)
    return np.linalg.norm(cell_vectors(grid, field), axis=-1)


def _scalar_gradient_magnitude(grid: Grid, u: np.ndarray) -> np.ndarray:
    g = np.gradient(u, *grid.spacing) if grid.dim > 1 else [np.gradient(u, grid.spacing[0])]
    return np.sqrt(sum(x**2 for x in g))


def _lp(values: np.ndarray, weights: np.ndarray, p: float) -> float:
    if np.isinf(p):
        return float(np.max(np.where(weights > 0, values, 0.0)))
    return float(np.sum(weights * values**p) ** (1.0 / p))


def fractional_seminorm(grid: Grid, u: np.ndarray, s: float, p: float) -> float:
    """``[u]_{s,p}`` by a double sum over distinct cell pairs."""
    n = int(np.prod(grid.cells))
    if n > FRACTIONAL_MAX_CELLS:
        raise ValueError(f"fractional seminorm refused on {n} cells (limit {FRACTIONAL_MAX_CELLS})")
    x = grid.cell_centers().reshape(n, grid.dim)
    vals = np.asarray(u).reshape(n, -1)
    if grid.domain.kind == "ball":
        keep = grid.inside_cells().ravel()
        x, vals = x[keep], vals[keep]
    vol = grid.cell_volume
    expo = grid.dim + s * p
    total = 0.0
    block = max(1, 2_000_000 // len(x))
    for i0 in range(0, len(x), block):
        xi, ui = x[i0:i0 + block], vals[i0:i0 + block]
        r = np.linalg.norm(xi[:, None, :] - x[None, :, :], axis=-1)
        du = np.linalg.norm(ui[:, None, :] - vals[None, :, :], axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(r > 0, du**p / r**expo, 0.0)
        total += term.sum()
    return float((total * vol * vol) ** (1.0 / p))


def norm(grid: Grid, field, spec: NormSpec) -> float:
    """Quadrature of the selected norm at cell centers.

    ``field`` may be a :class:`ScalarField`, a :class:`StaggeredField`, a
    :class:`TensorField` or a raw cell array (scalar, or with a trailing
    vector axis).
    """
    if isinstance(field, np.ndarray):
        arr = field
        vals = np.abs(arr) if arr.shape == grid.cells else np.linalg.norm(arr, axis=-1)
        raw = arr
    else:
        vals = pointwise_magnitude(grid, field)
        raw = field.values if isinstance(field, ScalarField) else None
    if spec.kind == "fractional":
        data = raw if raw is not None else cell_vectors(grid, field)
        return fractional_seminorm(grid, data, spec.fractional_s, spec.p)
    w = cell_weights(grid, spec.weight)
    base = _lp(vals, w, spec.p)
    if spec.sobolev_order == 0:
        return base
    if isinstance(field, StaggeredField):
        gmag = full_grad(grid, field).cell_magnitude()
    elif isinstance(field, ScalarField) or (isinstance(field, np.ndarray) and field.shape == grid.cells):
        gmag = _scalar_gradient_magnitude(grid, raw)
    else:
        raise ValueError("W^{1,p} norm needs a scalar or staggered field")
    if np.isinf(spec.p):
        return max(base, _lp(gmag, w, spec.p))
    return float((base**spec.p + _lp(gmag, w, spec.p) ** spec.p) ** (1.0 / spec.p))


def inner(grid: Grid, u: StaggeredField, v: StaggeredField) -> float:
    """Quadrature inner product (face or edge weights)."""
    ops = operators(grid)
    if u.location != v.location:
        raise ValueError("location mismatch")
    if u.location == FACE:
        return float(np.dot(ops.w_face * u.flat, v.flat))
    return float(np.dot(ops.w_edge_all * u.flat, v.flat))


def inner_cells(grid: Grid, a: ScalarField, b: ScalarField) -> float:
    return float(grid.cell_volume * np.dot(a.values.ravel(), b.values.ravel()))


# ---------------------------------------------------------------------------
# serialization: raw little-endian float64 body + JSON header


def save_field(path, field) -> tuple[Path, Path]:
    """Write ``<path>.bin`` and ``<path>.json``; returns both paths."""
    path = Path(path)
    if path.suffix in (".bin", ".json"):
        path = path.with_suffix("")
    if isinstance(field, ScalarField):
        arrays = [field.values]
        header = {"kind": "scalar", "location": "cell"}
    else:
        arrays = list(field.components)
        header = {"kind": "staggered", "location": field.location}
    header.update({
        "shapes": [list(a.shape) for a in arrays],
        "dtype": "<f8",
        "order": "C",
        "grid": field.grid.to_dict(),
    })
    bin_path = path.with_suffix(".bin")
    json_path = path.with_suffix(".json")
    with open(bin_path, "wb") as fh:
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    json_path.write_text(json.dumps(header, indent=2, sort_keys=True))
    return bin_path, json_path


def load_field(path):
    path = Path(path)
    if path.suffix in (".bin", ".json"):
        path = path.with_suffix("")
    header = json.loads(path.with_suffix(".json").read_text())
    grid = Grid.from_dict(header["grid"])
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype=header["dtype"]).astype(float)
    arrays = []
    start = 0
    for shp in header["shapes"]:
        n = int(np.prod(shp))
        arrays.append(flat[start:start + n].reshape(shp))
        start += n
    if start != flat.size:
        raise ValueError("binary body size does not match header")
    if header["kind"] == "scalar":
        return ScalarField(grid, arrays[0])
    return StaggeredField(grid, tuple(arrays), header["location"])
