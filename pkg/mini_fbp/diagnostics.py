import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter, map_coordinates
from scipy.spatial import cKDTree

from .exceptions import EmptySupport, LambdaNonPositive, NegativeOnSphere, RadiiOutOfRange
from .grid import apply_L, cell_centered_gradient
from .verdicts import Verdict

NEUMANN_OFFSETS = (2, 4, 6)


@dataclass(frozen=True)
class DiagnosticsConfig:
    """Thresholds for the structural checks.

    Attributes:
        margin (int): Cells kept away from the free boundary in pde_residual.
        kappa_floor (float): Smallest acceptable non-degeneracy constant.
        radii (tuple | None): Scan radii, geometric from 4h to 0.2 when None.
        neumann_tol (float): Per-point relative Neumann residual tolerance.
        neumann_fraction (float): Fraction of points that must meet neumann_tol.
        exterior_radius (float | None): Radius of the exterior-measure balls.
        density_max (float): Largest acceptable density ratio.
        ecc_n_max (int | None): Bound on the number of enlarged components.
        ecc_d_max (float | None): Bound on their diameters.
    """

    margin: int = 3
    kappa_floor: float = 0.05
    radii: tuple | None = None
    neumann_tol: float = 0.15
    neumann_fraction: float = 0.9
    exterior_radius: float | None = None
    density_max: float = 0.98
    ecc_n_max: int | None = None
    ecc_d_max: float | None = None

    def scan_radii(self, h, count=6):
        if self.radii:
            return tuple(self.radii)
        return tuple(np.geomspace(4 * h, 0.2, count)) if 4 * h < 0.2 else (4 * h,)


@dataclass
class BoundaryPointSet:
    """Interface crossings of the clamped field.

    Attributes:
        points (np.ndarray): (k, n) crossing locations.
        normals (np.ndarray): (k, n) outward unit normals -grad u / |grad u|.
        inside (np.ndarray): (k, n) node index of the positive endpoint.
        outside (np.ndarray): (k, n) node index of the zero endpoint.
        h (float): Grid cell size.
    """

    points: np.ndarray
    normals: np.ndarray
    inside: np.ndarray
    outside: np.ndarray
    h: float

    def __len__(self):
        return len(self.points)

    def subset(self, count):
        """Every k-th point so that at most `count` remain, in the original order."""
        if len(self) <= count:
            return self
        pick = np.linspace(0, len(self) - 1, count).round().astype(int)
        return BoundaryPointSet(
            self.points[pick], self.normals[pick], self.inside[pick], self.outside[pick], self.h
        )


@dataclass
class NeumannReport:
    points: np.ndarray
    values: np.ndarray
    target: np.ndarray
    residuals: np.ndarray
    quantiles: dict
    fraction_within: float
    tol: float

    @property
    def median(self):
        return self.quantiles["q50"]


@dataclass
class PdeResidual:
    sup: float
    l2: float
    relative: float
    nodes: int


@dataclass
class RegularityReport:
    """Constants measured on a computed minimizer.

    Attributes:
        lipschitz (float): L = max |grad u|.
        sup (float): ||u||_inf.
        M1 (float): max f(x, u(x)).
        kappa0 (float): Smallest sphere-average slope s(x0, r).
        C_hat (float): Largest sphere-average slope.
        radii (tuple): Scan range.
        slopes (np.ndarray): s(x0, r), one row per boundary point.
        density (np.ndarray): |Omega cap B_r(x0)| / |B_r|, same layout.
        verdicts (dict): Non-degeneracy, density and exterior-measure verdicts.
    """

    lipschitz: float
    sup: float
    M1: float
    kappa0: float = 0.0
    C_hat: float = 0.0
    radii: tuple = ()
    slopes: np.ndarray | None = None
    density: np.ndarray | None = None
    verdicts: dict = field(default_factory=dict)


@dataclass
class HarnackReport:
    C1: float
    C2: float
    explicit: float
    bound: float
    certified: bool
    verdict: Verdict


def _outward_normals(u, points, fallback):
    smoothed = gaussian_filter(u.values, sigma=1.0, mode="constant")
    grads = np.gradient(smoothed, u.grid.h) if u.grid.dim > 1 else [np.gradient(smoothed, u.grid.h)]
    idx = u.grid.to_index(points).T
    g = np.stack([map_coordinates(c, idx, order=1, mode="nearest") for c in grads], axis=-1)
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    normals = np.where(norm > 0, -g / np.where(norm > 0, norm, 1.0), fallback)
    return normals / np.linalg.norm(normals, axis=-1, keepdims=True)


def extract_free_boundary(u):
    """Locates sign changes along grid edges, extrapolating from the next inner node.

    Raises:
        EmptySupport: u has no positive node or no interface inside the box.
    """
    grid = u.grid
    v = u.clamped().values
    positive = v > 0
    if not positive.any():
        raise EmptySupport("field vanishes identically")
    origin = np.asarray(grid.origin)
    points, inside, outside, fallback = [], [], [], []
    for axis in range(grid.dim):
        for sign in (1, -1):
            shifted = np.roll(positive, -sign, axis=axis)
            edge = positive & ~shifted
            border = [slice(None)] * grid.dim
            border[axis] = slice(-1, None) if sign == 1 else slice(0, 1)
            edge[tuple(border)] = False
            for p in np.argwhere(edge):
                a = v[tuple(p)]
                q = p.copy()
                q[axis] -= sign
                b = v[tuple(q)] if 0 <= q[axis] < grid.dims[axis] else 0.0
                offset = a / (b - a) if b > a else 0.5
                offset = min(max(offset, 0.0), 1.0)
                z = p.copy()
                z[axis] += sign
                step = np.zeros(grid.dim)
                step[axis] = sign
                x_p = origin + (p + 0.5) * grid.h
                points.append(x_p + offset * grid.h * step)
                inside.append(p)
                outside.append(z)
                fallback.append(step)
    if not points:
        raise EmptySupport("support has no interface inside the box")
    points = np.asarray(points)
    normals = _outward_normals(u, points, np.asarray(fallback))
    logging.debug(f"Extracted {len(points)} free boundary points")
    return BoundaryPointSet(points, normals, np.asarray(inside), np.asarray(outside), grid.h)


def pde_residual(u, spec, margin=3):
    """sup and L2 norms of L u - f(x, u) on nodes at least `margin` cells inside the support."""
    grid = u.grid
    positive = np.pad(u.values > 0, 1)
    depth = distance_transform_edt(positive)[(slice(1, -1),) * grid.dim]
    mask = depth >= margin
    x = grid.node_coords()
    f = spec.nonlinearity.f(x, u.values)
    if not mask.any():
        return PdeResidual(0.0, 0.0, 0.0, 0)
    r = (apply_L(u, spec).values - f)[mask]
    sup = float(np.max(np.abs(r)))
    l2 = float(np.sqrt(grid.cell_volume * np.sum(r * r)))
    M1 = float(np.max(f))
    return PdeResidual(sup, l2, sup / M1 if M1 > 0 else sup, int(mask.sum()))


def _sample_cell_gradient(u, points):
    grad = cell_centered_gradient(u).values
    idx = ((np.asarray(points) - np.asarray(u.grid.origin)) / u.grid.h).reshape(-1, u.grid.dim).T
    out = [map_coordinates(grad[..., k], idx, order=1, mode="nearest") for k in range(u.grid.dim)]
    return np.stack(out, axis=-1).reshape(np.asarray(points).shape)


def boundary_quadratic_form(u, spec, bset, offsets=NEUMANN_OFFSETS):
    """grad u A grad u^T extrapolated linearly to each boundary point from inward samples."""
    h = u.grid.h
    k = np.asarray(offsets, dtype=float)
    samples = bset.points[:, None, :] - k[None, :, None] * h * bset.normals[:, None, :]
    grad = _sample_cell_gradient(u, samples)
    A = spec.matrix(samples)
    g = np.einsum("...i,...ij,...j->...", grad, A, grad)
    slope, intercept = np.polyfit(k * h, g.T, 1)
    return intercept


def neumann_check(u, spec, lam, bset, tol=0.15, offsets=NEUMANN_OFFSETS):
    """Relative residual |g - Lambda q| / (Lambda q) of the overdetermined condition.

    Raises:
        LambdaNonPositive: lam <= 0.
    """
    if not lam > 0:
        raise LambdaNonPositive(f"Neumann check needs Lambda > 0, got {lam}")
    g = boundary_quadratic_form(u, spec, bset, offsets)
    target = lam * spec.weight(bset.points)
    residuals = np.abs(g - target) / target
    quantiles = {f"q{p}": float(np.percentile(residuals, p)) for p in (10, 50, 90)}
    quantiles["max"] = float(residuals.max())
    report = NeumannReport(
        points=bset.points,
        values=g,
        target=target,
        residuals=residuals,
        quantiles=quantiles,
        fraction_within=float(np.mean(residuals <= tol)),
        tol=tol,
    )
    logging.info(f"Neumann residual median {report.median:.4f}, within tol {report.fraction_within:.3f}")
    return report


def lipschitz_and_sup(u, spec):
    grad = cell_centered_gradient(u).values
    L = float(np.max(np.linalg.norm(grad, axis=-1), initial=0.0))
    M1 = float(np.max(spec.nonlinearity.f(u.grid.node_coords(), np.maximum(u.values, 0.0))))
    return L, u.sup, M1


def sphere_rule(n):
    """Unit-sphere sample directions and weights summing to 1."""
    if n == 1:
        return np.array([[1.0], [-1.0]]), np.array([0.5, 0.5])
    if n == 2:
        theta = 2 * np.pi * np.arange(64) / 64
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1), np.full(64, 1 / 64)
    # 16 x 16 equal-angle grid, polar midpoints weighted by sin(theta)
    theta = np.pi * (np.arange(16) + 0.5) / 16
    phi = 2 * np.pi * np.arange(16) / 16
    T, P = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1).reshape(-1, 3)
    weights = np.sin(T).ravel()
    return dirs, weights / weights.sum()


def sphere_average(u, center, r):
    dirs, weights = sphere_rule(u.grid.dim)
    return float(weights @ u.sample(np.asarray(center) + r * dirs))


def _check_radii(radii, h):
    radii = tuple(float(r) for r in radii)
    if not radii or min(radii) < 4 * h * (1 - 1e-9) or max(radii) > 0.2 * (1 + 1e-9):
        raise RadiiOutOfRange(f"scan radii must lie in [{4 * h:.4g}, 0.2], got {radii}")
    return radii


def nondegeneracy_scan(u, bset, radii, kappa_floor=0.05):
    """s(x0, r) = sphere average of u on dB_r(x0) divided by r.

    Returns:
        tuple: (kappa0, C_hat, slopes, verdict).
    """
    radii = _check_radii(radii, u.grid.h)
    slopes = np.array([[sphere_average(u, y, r) / r for r in radii] for y in bset.points])
    kappa0 = float(slopes.min())
    C_hat = float(slopes.max())
    verdict = Verdict.of(kappa0 >= kappa_floor)
    if verdict is Verdict.FAIL:
        logging.error(f"Non-degeneracy failed: kappa0={kappa0:.4g} < {kappa_floor}")
    return kappa0, C_hat, slopes, verdict


def density_scan(u, bset, radii, density_max=0.98):
    """Cell-counting ratios |Omega_u cap B_r(x0)| / |B_r|; rows above density_max are flagged."""
    grid = u.grid
    x = grid.node_coords().reshape(-1, grid.dim)
    positive = u.values.ravel() > 0
    tree = cKDTree(x)
    ratios = np.empty((len(bset), len(radii)))
    for j, r in enumerate(radii):
        for i, nbrs in enumerate(tree.query_ball_point(bset.points, r)):
            ratios[i, j] = positive[nbrs].mean() if nbrs else 0.0
    flagged = np.flatnonzero(ratios.max(axis=1) > density_max)
    if flagged.size:
        logging.warning(f"{flagged.size} boundary points look interior (density > {density_max})")
    return float(ratios.max()), ratios, flagged


def exterior_measure_check(u, bset, r):
    """Zero-node counts in B_r(x0); inconclusive below the 2h resolution floor."""
    grid = u.grid
    if r < 2 * grid.h:
        logging.warning(f"Exterior radius {r} below resolution floor {2 * grid.h}")
        return Verdict.INCONCLUSIVE, np.zeros(len(bset), dtype=int)
    x = grid.node_coords().reshape(-1, grid.dim)
    zero = x[u.values.ravel() <= 0]
    if zero.size == 0:
        return Verdict.FAIL, np.zeros(len(bset), dtype=int)
    counts = np.asarray(cKDTree(zero).query_ball_point(bset.points, r, return_length=True))
    return Verdict.of(bool(np.all(counts >= 1))), counts


def regularity_report(u, spec, bset, cfg):
    L, sup, M1 = lipschitz_and_sup(u, spec)
    radii = cfg.scan_radii(u.grid.h)
    kappa0, C_hat, slopes, nd = nondegeneracy_scan(u, bset, radii, cfg.kappa_floor)
    dmax, density, _ = density_scan(u, bset, radii, cfg.density_max)
    ext, _ = exterior_measure_check(u, bset, cfg.exterior_radius or max(2 * u.grid.h, 0.05))
    return RegularityReport(
        lipschitz=L,
        sup=sup,
        M1=M1,
        kappa0=kappa0,
        C_hat=C_hat,
        radii=radii,
        slopes=slopes,
        density=density,
        verdicts={
            "nondegeneracy": nd,
            "density": Verdict.of(dmax < cfg.density_max),
            "exterior_measure": ext,
        },
    )


def harnack_check(u_test, M, centers, radii, spec=None):
    """Measured constants of the mean-value and gradient Harnack inequalities for A = I.

    Args:
        u_test (ScalarFieldGrid): Nonnegative on every sampled sphere.
        M (float): Bound on |L u| certified with apply_L.
        centers (list): Ball centres.
        radii (list): Ball radii, one per centre.
        spec (ProblemSpec | None): Supplies A for the apply_L certificate.

    Raises:
        NegativeOnSphere: u_test < 0 somewhere on dB_r(center).
    """
    grid = u_test.grid
    n = grid.dim
    explicit = 2.0**n
    dirs, weights = sphere_rule(n)
    x = grid.node_coords()
    Lu = apply_L(u_test, spec).values if spec is not None else None
    C1 = C2 = 0.0
    certified = True
    for c, r in zip(centers, radii):
        c = np.asarray(c, dtype=float)
        on_sphere = u_test.sample(c + r * dirs)
        if on_sphere.min() < -1e-12:
            raise NegativeOnSphere(f"u < 0 on the sphere of radius {r} at {tuple(c)}")
        denom = float(weights @ on_sphere) + M * r * r
        dist = np.linalg.norm(x - c, axis=-1)
        inner = dist < 0.5 * r
        C1 = max(C1, float(u_test.values[inner].max(initial=0.0)) / denom)
        grad0 = _sample_cell_gradient(u_test, c[None, :])[0]
        C2 = max(C2, float(np.linalg.norm(grad0)) * r / denom)
        if Lu is not None:
            interior = dist < r - 2 * grid.h
            certified &= bool(np.all(np.abs(Lu[interior]) <= M * (1 + 1e-6) + 1e-8))
    if not certified:
        logging.warning(f"apply_L exceeds M={M} inside the test balls")
    bound = 4.0 * explicit
    return HarnackReport(
        C1=C1,
        C2=C2,
        explicit=explicit,
        bound=bound,
        certified=certified,
        verdict=Verdict.of(C1 <= bound and C2 <= bound),
    )
