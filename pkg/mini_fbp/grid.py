import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache, reduce

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import map_coordinates

from .exceptions import MarginViolation

ETA_CLIP = 1e-12


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid.

    Node i sits at origin + (i + 1/2) h, so the physical box is
    origin + [0, dims * h]^n and fields vanish outside it.

    Attributes:
        dim (int): Space dimension n.
        h (float): Cell size, the same on every axis.
        origin (tuple): Lower corner of the box.
        dims (tuple): Cells per axis, at least 4.
    """

    dim: int
    h: float
    origin: tuple
    dims: tuple

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"cell size must be positive, got {self.h}")
        if len(self.dims) != self.dim or len(self.origin) != self.dim:
            raise ValueError("origin and dims must have one entry per axis")
        if min(self.dims) < 4:
            raise ValueError(f"need at least 4 cells per axis, got {self.dims}")

    @classmethod
    def box(cls, dim, h, radius, center=None):
        """Grid covering center + [-radius, radius]^n, with an even cell count per axis."""
        center = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
        cells = max(4, 2 * math.ceil(radius / h - 1e-9))
        origin = tuple(float(c - 0.5 * cells * h) for c in center)
        return cls(dim=dim, h=float(h), origin=origin, dims=(cells,) * dim)

    @property
    def shape(self):
        return tuple(self.dims)

    @property
    def cell_shape(self):
        return tuple(d + 1 for d in self.dims)

    @property
    def size(self):
        return int(np.prod(self.dims))

    @property
    def cell_volume(self):
        return self.h**self.dim

    @property
    def center(self):
        return np.asarray(self.origin) + 0.5 * self.h * np.asarray(self.dims)

    @property
    def half_width(self):
        return 0.5 * self.h * min(self.dims)

    def node_axes(self):
        return [self.origin[k] + (np.arange(self.dims[k]) + 0.5) * self.h for k in range(self.dim)]

    def node_coords(self):
        return np.stack(np.meshgrid(*self.node_axes(), indexing="ij"), axis=-1)

    def cell_coords(self):
        axes = [self.origin[k] + np.arange(self.dims[k] + 1) * self.h for k in range(self.dim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def face_coords(self, axis):
        """Midpoints of the axis-direction edges used by the diagonal fluxes."""
        coords = self.cell_coords()
        shift = np.full(self.dim, -0.5 * self.h)
        shift[axis] = 0.0
        return coords + shift

    def to_index(self, points):
        """Fractional node index of physical points."""
        return (np.asarray(points, dtype=float) - np.asarray(self.origin)) / self.h - 0.5

    def contains(self, point, margin=0.0):
        point = np.asarray(point, dtype=float)
        lo = np.asarray(self.origin) + margin
        hi = np.asarray(self.origin) + self.h * np.asarray(self.dims) - margin
        return bool(np.all(point >= lo) and np.all(point <= hi))

    def boundary_mask(self, width):
        """True on the outer `width` layers of nodes."""
        mask = np.zeros(self.shape, dtype=bool)
        for k in range(self.dim):
            lead = [slice(None)] * self.dim
            lead[k] = slice(0, width)
            mask[tuple(lead)] = True
            lead[k] = slice(self.dims[k] - width, None)
            mask[tuple(lead)] = True
        return mask


@dataclass(eq=False)
class ScalarFieldGrid:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.grid.shape)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid, fn):
        return cls(grid, fn(grid.node_coords()))

    def with_values(self, values):
        return ScalarFieldGrid(self.grid, values)

    def clamped(self):
        """Projection on u >= 0 with values below ETA_CLIP set to exactly 0."""
        v = np.where(self.values < ETA_CLIP, 0.0, self.values)
        return ScalarFieldGrid(self.grid, v)

    @property
    def flat(self):
        return self.values.ravel()

    @property
    def sup(self):
        return float(self.values.max(initial=0.0))

    def support(self):
        return self.values > 0

    def sample(self, points, order=1):
        """Interpolates the field at physical points, zero outside the box."""
        points = np.asarray(points, dtype=float)
        idx = self.grid.to_index(points.reshape(-1, self.grid.dim)).T
        out = map_coordinates(self.values, idx, order=order, mode="constant", cval=0.0)
        return out.reshape(points.shape[:-1])

    def embed(self, target):
        """Copies the field into a grid with the same h whose origin differs by whole cells."""
        if not math.isclose(target.h, self.grid.h):
            raise ValueError("embedding needs equal cell sizes")
        offset = np.rint(
            (np.asarray(self.grid.origin) - np.asarray(target.origin)) / target.h
        ).astype(int)
        out = np.zeros(target.shape)
        src, dst = [], []
        for k in range(self.grid.dim):
            lo = max(0, offset[k])
            hi = min(target.dims[k], offset[k] + self.grid.dims[k])
            if hi <= lo:
                return ScalarFieldGrid(target, out)
            dst.append(slice(lo, hi))
            src.append(slice(lo - offset[k], hi - offset[k]))
        out[tuple(dst)] = self.values[tuple(src)]
        return ScalarFieldGrid(target, out)


@dataclass(eq=False)
class VectorFieldGrid:
    """Vector field, n components per point.

    Attributes:
        grid (Grid): Carrier grid.
        values (np.ndarray): Shape grid.shape + (n,) at nodes, or
            grid.cell_shape + (n,) at cell centres.
        location (str): "node" or "cell".
    """

    grid: Grid
    values: np.ndarray
    location: str = "node"

    @property
    def sup_norm(self):
        if self.values.size == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.values, axis=-1)))


@dataclass
class EnergyBreakdown:
    dirichlet: float
    potential: float
    volume_term: float
    total: float
    vol_q_raw: float
    smoothed: bool = False
    delta: float | None = None
    lam: float = 0.0

    CSV_FIELDS = ("dirichlet", "potential", "volume_term", "total", "vol_q_raw", "smoothed", "delta", "lam")

    def as_row(self):
        return [getattr(self, k) for k in self.CSV_FIELDS]


def _ddx(n_nodes, h):
    forward = sp.eye(n_nodes + 1, n_nodes, k=0) - sp.eye(n_nodes + 1, n_nodes, k=-1)
    return (forward / h).tocsr()


def _lower(n_nodes):
    return sp.eye(n_nodes + 1, n_nodes, k=-1, format="csr")


def _average(n_nodes):
    return 0.5 * (sp.eye(n_nodes + 1, n_nodes, k=-1) + sp.eye(n_nodes + 1, n_nodes, k=0)).tocsr()


def _kron_all(factors):
    return reduce(lambda a, b: sp.kron(a, b, format="csr"), factors)


@lru_cache(maxsize=16)
def difference_operators(grid):
    """Sparse maps from node values to the padded cell lattice.

    Returns:
        tuple: (D, G, C) where D[i] is the one-edge difference along axis i,
        G[i] the difference averaged over the 2^(n-1) edges of a cell, and C
        the corner average.
    """
    D, G = [], []
    for i in range(grid.dim):
        D.append(_kron_all([_ddx(d, grid.h) if k == i else _lower(d) for k, d in enumerate(grid.dims)]))
        G.append(_kron_all([_ddx(d, grid.h) if k == i else _average(d) for k, d in enumerate(grid.dims)]))
    C = _kron_all([_average(d) for d in grid.dims])
    return D, G, C


@lru_cache(maxsize=16)
def stiffness_matrix(grid, matrix):
    """Symmetric sparse L with h^n u^T L u the discrete Dirichlet energy."""
    D, G, _ = difference_operators(grid)
    n = grid.dim
    L = sp.csr_matrix((grid.size, grid.size))
    for i in range(n):
        a_ii = matrix(grid.face_coords(i))[..., i, i].ravel()
        L = L + D[i].T @ sp.diags(a_ii) @ D[i]
    if n > 1:
        A_cell = matrix(grid.cell_coords())
        for i in range(n):
            for j in range(i + 1, n):
                s_ij = 0.5 * (A_cell[..., i, j] + A_cell[..., j, i]).ravel()
                if np.any(s_ij != 0.0):
                    M = sp.diags(s_ij)
                    L = L + G[i].T @ M @ G[j] + G[j].T @ M @ G[i]
    logging.debug(f"Assembled stiffness matrix: {grid.size} nodes, nnz={L.nnz}")
    return L.tocsr()


def gradient_field(u):
    """Forward differences (u[c + e_i] - u[c]) / h at every node, zero outside the box."""
    grid = u.grid
    out = np.empty(grid.shape + (grid.dim,))
    for i in range(grid.dim):
        padded = np.concatenate([u.values, np.zeros_like(np.take(u.values, [0], axis=i))], axis=i)
        out[..., i] = np.diff(padded, axis=i) / grid.h
    return VectorFieldGrid(grid, out, location="node")


def cell_centered_gradient(u):
    """Corner-averaged gradient on the padded cell lattice."""
    grid = u.grid
    _, G, _ = difference_operators(grid)
    out = np.stack([(G[i] @ u.flat).reshape(grid.cell_shape) for i in range(grid.dim)], axis=-1)
    return VectorFieldGrid(grid, out, location="cell")


def cell_values(u):
    _, _, C = difference_operators(u.grid)
    return (C @ u.flat).reshape(u.grid.cell_shape)


def support_cells(u):
    """Padded cells with at least one positive corner."""
    _, _, C = difference_operators(u.grid)
    return (C @ (u.flat > 0).astype(float)).reshape(u.grid.cell_shape) > 0


def corner_minimum(values, fill):
    """Minimum over the 2^n corner nodes of every padded cell, `fill` outside the box."""
    padded = np.pad(values, 1, constant_values=fill)
    out = None
    for corner in itertools.product((0, 1), repeat=values.ndim):
        part = padded[tuple(slice(c, c + d + 1) for c, d in zip(corner, values.shape))]
        out = part if out is None else np.minimum(out, part)
    return out


def apply_L(u, spec):
    """-div(A grad u) on the nodes."""
    L = stiffness_matrix(u.grid, spec.matrix)
    return u.with_values(L @ u.flat)


def dirichlet_energy(u, spec):
    L = stiffness_matrix(u.grid, spec.matrix)
    v = u.flat
    return float(u.grid.cell_volume * (v @ (L @ v)))


def smooth_indicator(values, delta):
    return np.minimum(np.maximum(values, 0.0) / delta, 1.0)


def vol_q(u, spec):
    """Sum of q(cell centre) h^n over the padded cells with a positive corner."""
    q = spec.weight(u.grid.cell_coords())
    return float(u.grid.cell_volume * np.sum(np.where(support_cells(u), q, 0.0)))


def smoothed_vol_q(u, spec, delta):
    q = spec.weight(u.grid.cell_coords())
    return float(u.grid.cell_volume * np.sum(q * smooth_indicator(cell_values(u), delta)))


def energy(u, spec, lam, delta=None):
    """F_Lambda on the grid.

    Args:
        u (ScalarFieldGrid): Nonnegative field.
        spec (ProblemSpec): Problem data.
        lam (float): Volume penalty Lambda >= 0.
        delta (float | None): Smoothing width; None for the sharp indicator.

    Returns:
        EnergyBreakdown: Parts and total, summed in a fixed order.
    """
    x = u.grid.node_coords()
    hn = u.grid.cell_volume
    dirichlet = dirichlet_energy(u, spec)
    potential = -2.0 * hn * float(np.sum(spec.nonlinearity.F(x, u.values)))
    raw = vol_q(u, spec)
    vol = raw if delta is None else smoothed_vol_q(u, spec, delta)
    volume_term = lam * vol
    total = dirichlet + potential + volume_term
    return EnergyBreakdown(
        dirichlet=dirichlet,
        potential=potential,
        volume_term=volume_term,
        total=total,
        vol_q_raw=raw,
        smoothed=delta is not None,
        delta=delta,
        lam=lam,
    )


def energy_gradient(u, spec, lam, delta):
    """Exact nodal gradient of the smoothed discrete energy."""
    grid = u.grid
    x = grid.node_coords()
    hn = grid.cell_volume
    L = stiffness_matrix(grid, spec.matrix)
    g = 2.0 * hn * (L @ u.flat).reshape(grid.shape)
    g -= 2.0 * hn * spec.nonlinearity.f(x, u.values)
    if lam:
        _, _, C = difference_operators(grid)
        slope = np.where(cell_values(u) < delta, 1.0 / delta, 0.0) * spec.weight(grid.cell_coords())
        g += lam * hn * (C.T @ slope.ravel()).reshape(grid.shape)
    return u.with_values(g)


def bump_vector_field(grid, center, radius, direction):
    """Tensor-product (1 - t^2)^3 bump times a fixed direction, unit sup-norm."""
    x = grid.node_coords()
    t = (x - np.asarray(center)) / radius
    profile = np.prod(np.clip(1.0 - t * t, 0.0, None) ** 3, axis=-1)
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    values = profile[..., None] * direction
    norm = np.max(np.linalg.norm(values, axis=-1))
    if norm > 0:
        values = values / norm
    return VectorFieldGrid(grid, values, location="node")


def first_variation(u, xi, spec, lam, margin=2):
    """Domain variation of F_Lambda along the vector field xi.

    All five Dirichlet/potential terms plus Lambda * int_{u>0} div(q xi),
    evaluated at cell centres with corner averages.

    Raises:
        MarginViolation: xi is nonzero within `margin` cells of the box edge.
    """
    grid = u.grid
    if np.any(xi.values[grid.boundary_mask(margin)] != 0.0):
        raise MarginViolation(f"test field must vanish on a {margin}-cell margin")
    n = grid.dim
    _, G, C = difference_operators(grid)
    cells = grid.cell_shape
    x = grid.cell_coords()

    gu = cell_centered_gradient(u).values
    uc = np.maximum(cell_values(u), 0.0)
    xi_c = np.stack([(C @ xi.values[..., k].ravel()).reshape(cells) for k in range(n)], axis=-1)
    dxi = np.empty(cells + (n, n))
    for k in range(n):
        for j in range(n):
            dxi[..., k, j] = (G[j] @ xi.values[..., k].ravel()).reshape(cells)
    div_xi = np.trace(dxi, axis1=-2, axis2=-1)

    A = spec.matrix(x)
    A_xi = np.einsum("...dij,...d->...ij", spec.matrix.grad(x), xi_c)
    quad = np.einsum("...i,...ij,...j->...", gu, A, gu)
    term_deform = -2.0 * np.einsum("...i,...ik,...kl,...l->...", gu, dxi, A, gu)
    term_div = quad * div_xi
    term_coef = np.einsum("...i,...ij,...j->...", gu, A_xi, gu)
    nl = spec.nonlinearity
    term_grad_F = -2.0 * np.sum(nl.grad_x_F(x, uc) * xi_c, axis=-1)
    term_F = -2.0 * nl.F(x, uc) * div_xi

    positive = support_cells(u).astype(float)
    div_q_xi = np.sum(spec.weight.grad(x) * xi_c, axis=-1) + spec.weight(x) * div_xi
    term_vol = lam * positive * div_q_xi

    total = term_deform + term_div + term_coef + term_grad_F + term_F + term_vol
    return float(grid.cell_volume * np.sum(total))
