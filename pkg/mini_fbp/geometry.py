import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure, label
from scipy.sparse.csgraph import connected_components as graph_components
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.spatial.distance import pdist

from .exceptions import InfeasiblePlan, NotPeriodic
from .grid import ScalarFieldGrid
from .verdicts import Verdict

ECC_DISTANCE = 0.25
CORKSCREW_RADIUS = 1 / 20


@dataclass
class SupportMask:
    grid: object
    mask: np.ndarray

    @classmethod
    def of(cls, u):
        return cls(u.grid, u.values > 0)


@dataclass
class Component:
    label: int
    size: int
    lo: np.ndarray
    hi: np.ndarray
    diameter: float


@dataclass
class ComponentDecomposition:
    """Face-connected components of the support and their enlarged unions.

    Attributes:
        grid (Grid): Carrier grid.
        labels (np.ndarray): 0 outside the support, 1..N_cc on components.
        components (list): Component records in label order.
        ecc (list): Tuples of component labels, one per enlarged component.
        ecc_diameters (list): Diameter of each enlarged component.
    """

    grid: object
    labels: np.ndarray
    components: list
    ecc: list = field(default_factory=list)
    ecc_diameters: list = field(default_factory=list)

    @property
    def n_cc(self):
        return len(self.components)

    @property
    def n_ecc(self):
        return len(self.ecc)

    def ecc_of(self, component_label):
        for j, members in enumerate(self.ecc):
            if component_label in members:
                return j
        return None

    def rows(self):
        return [(c.label, c.size, c.diameter, self.ecc_of(c.label)) for c in self.components]


@dataclass
class DiameterReport:
    n_ecc: int
    ecc_diameters: list
    full_diameter: float
    verdicts: dict


@dataclass
class CorkscrewReport:
    radii: np.ndarray
    centers: np.ndarray
    min_radius: float
    degenerate: np.ndarray


@dataclass
class CompactionPlan:
    """Integer translations per enlarged component, in units of the period.

    Attributes:
        translations (list): v_j, one integer vector per component.
        targets (list): Lower corner of the cell each component is moved into.
        feasible (bool): Whether the translated components stay apart.
        period (float): Period T the translations are counted in.
        order (list): Enlarged components, in the order of `translations`.
    """

    translations: list
    targets: list
    feasible: bool = True
    period: float = 0.0
    order: list = field(default_factory=list)


def point_set_diameter(points):
    """Largest pairwise distance, computed over convex hull vertices when possible."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return 0.0
    if points.shape[1] == 1:
        return float(points.max() - points.min())
    try:
        points = points[ConvexHull(points).vertices]
    except (QhullError, ValueError):
        pass
    return float(pdist(points).max())


def _structure(dim):
    return generate_binary_structure(dim, 1)


def connected_components(mask):
    """2n-face adjacency labeling; labels follow the lexicographic order of each component's first node."""
    grid = mask.grid
    labels, count = label(mask.mask, structure=_structure(grid.dim))
    x = grid.node_coords()
    components = []
    for k in range(1, count + 1):
        pts = x[labels == k]
        components.append(
            Component(
                label=k,
                size=len(pts),
                lo=pts.min(axis=0),
                hi=pts.max(axis=0),
                diameter=point_set_diameter(pts),
            )
        )
    logging.debug(f"Labeled {count} connected components")
    return ComponentDecomposition(grid=grid, labels=labels, components=components)


def enlarge_components(dec, threshold=ECC_DISTANCE):
    """Merges components whose node sets come within `threshold`, closing the chains transitively."""
    grid = dec.grid
    if dec.n_cc == 0:
        return ComponentDecomposition(grid, dec.labels, dec.components, [], [])
    support = dec.labels > 0
    edge = support & ~binary_erosion(support, structure=_structure(grid.dim), border_value=0)
    x = grid.node_coords()
    points = x[edge]
    owner = dec.labels[edge] - 1
    pairs = cKDTree(points).query_pairs(threshold * (1 + 1e-12), output_type="ndarray")
    n = dec.n_cc
    if len(pairs):
        a, b = owner[pairs[:, 0]], owner[pairs[:, 1]]
        keep = a != b
        graph = sparse.coo_matrix((np.ones(keep.sum()), (a[keep], b[keep])), shape=(n, n))
    else:
        graph = sparse.coo_matrix((n, n))
    _, ecc_id = graph_components(graph, directed=False)
    groups = {}
    for k, j in enumerate(ecc_id):
        groups.setdefault(j, []).append(k + 1)
    ecc = sorted((tuple(v) for v in groups.values()), key=lambda g: g[0])
    diameters = [point_set_diameter(x[np.isin(dec.labels, members)]) for members in ecc]
    logging.debug(f"{dec.n_cc} components merged into {len(ecc)} enlarged components")
    return ComponentDecomposition(grid, dec.labels, dec.components, ecc, diameters)


def diameter_report(dec, n_max=None, d_max=None):
    x = dec.grid.node_coords()
    full = point_set_diameter(x[dec.labels > 0])
    verdicts = {
        "ecc_count": Verdict.NOT_APPLICABLE if n_max is None else Verdict.of(dec.n_ecc <= n_max),
        "ecc_diameter": (
            Verdict.NOT_APPLICABLE
            if d_max is None
            else Verdict.of(all(d <= d_max for d in dec.ecc_diameters))
        ),
    }
    return DiameterReport(dec.n_ecc, list(dec.ecc_diameters), full, verdicts)


def corkscrew_check(u, bset, radii=None):
    """Largest interior ball B_rho(z) inside Omega_u cap B_{1/20}(y) for every boundary point y.

    Args:
        u (ScalarFieldGrid): The field.
        bset (BoundaryPointSet): Boundary points y.
        radii (list | None): Optional grid of admissible rho; results snap down to it.

    Returns:
        CorkscrewReport: Per-point radius and centre, the minimum, and points
        whose radius does not exceed 2h.
    """
    grid = u.grid
    positive = u.values > 0
    depth = distance_transform_edt(np.pad(positive, 1))[(slice(1, -1),) * grid.dim]
    rho = np.where(positive, depth * grid.h - 0.5 * grid.h, 0.0)
    x = grid.node_coords()[positive]
    rho = rho[positive]
    tree = cKDTree(x)
    best = np.zeros(len(bset))
    centers = np.array(bset.points, copy=True)
    for i, (y, nbrs) in enumerate(zip(bset.points, tree.query_ball_point(bset.points, CORKSCREW_RADIUS))):
        if not nbrs:
            continue
        nbrs = np.asarray(nbrs)
        reach = CORKSCREW_RADIUS - np.linalg.norm(x[nbrs] - y, axis=-1)
        fit = np.minimum(rho[nbrs], reach)
        k = int(np.argmax(fit))
        best[i] = max(fit[k], 0.0)
        centers[i] = x[nbrs[k]]
    if radii is not None:
        grid_r = np.sort(np.asarray(radii, dtype=float))
        pos = np.searchsorted(grid_r, best * (1 + 1e-12), side="right") - 1
        best = np.where(pos >= 0, grid_r[np.maximum(pos, 0)], 0.0)
    degenerate = np.flatnonzero(best <= 2 * grid.h)
    return CorkscrewReport(best, centers, float(best.min(initial=math.inf)), degenerate)


def _translate_labels(u, dec, plan):
    grid = u.grid
    out = np.zeros(grid.shape)
    owner = np.full(grid.shape, -1)
    for j, (members, v) in enumerate(zip(dec.ecc, plan.translations)):
        shift = np.rint(np.asarray(v) * plan.period / grid.h).astype(int)
        idx = np.argwhere(np.isin(dec.labels, members))
        dest = idx - shift
        if np.any(dest < 0) or np.any(dest >= np.asarray(grid.dims)):
            raise InfeasiblePlan(f"enlarged component {j} leaves the box under translation {tuple(v)}")
        dest_t = tuple(dest.T)
        if np.any(owner[dest_t] >= 0):
            raise InfeasiblePlan(f"enlarged component {j} collides with another component")
        out[dest_t] = u.values[tuple(idx.T)]
        owner[dest_t] = j
    structure = _structure(grid.dim)
    for j in range(len(dec.ecc)):
        mine = owner == j
        others = (owner >= 0) & ~mine
        grown = binary_erosion(~mine, structure=structure, border_value=1)
        if np.any(~grown & others):
            raise InfeasiblePlan(f"enlarged component {j} touches another component after translation")
    return ScalarFieldGrid(grid, out)


def plan_compaction(dec, period, origin=None):
    """Integer-period translations moving enlarged component j into the cell
    origin + (2 D j, 0, ..., 0) + [0, 2 D]^n, with D the largest diameter rounded up to T."""
    n = dec.grid.dim
    origin = np.zeros(n) if origin is None else np.asarray(origin, dtype=float)
    d_hat = max(period, period * math.ceil(max(dec.ecc_diameters, default=0.0) / period - 1e-9))
    x = dec.grid.node_coords()
    boxes = []
    for members in dec.ecc:
        pts = x[np.isin(dec.labels, members)]
        boxes.append((pts.min(axis=0), pts.max(axis=0), members))
    order = sorted(range(len(boxes)), key=lambda j: tuple(boxes[j][0]))
    translations, targets, ecc = [], [], []
    for slot, j in enumerate(order):
        lo, hi, members = boxes[j]
        target = origin.copy()
        target[0] += 2 * d_hat * slot
        inside = np.all(lo >= target) and np.all(hi <= target + 2 * d_hat)
        v = np.zeros(n, dtype=int) if inside else np.floor((lo - target) / period).astype(int)
        translations.append(tuple(int(t) for t in v))
        targets.append(tuple(float(t) for t in target))
        ecc.append(members)
    return CompactionPlan(translations=translations, targets=targets, period=period, order=ecc)


def compact_periodic(u, spec, plan=None):
    """Translates each enlarged component by integer periods into consecutive cells near the origin.

    Raises:
        NotPeriodic: spec declares no period.
        InfeasiblePlan: A translation leaves the box, collides, or T is not a multiple of h.
    """
    if spec.period is None:
        raise NotPeriodic("compaction needs a periodic problem")
    T = spec.period
    cells = T / u.grid.h
    if abs(cells - round(cells)) > 1e-9:
        raise InfeasiblePlan(f"period {T} is not a whole number of cells of size {u.grid.h}")
    dec = enlarge_components(connected_components(SupportMask.of(u)))
    if plan is None:
        plan = plan_compaction(dec, T)
    else:
        plan = replace(plan, period=T, order=plan.order or dec.ecc)
    ordered = ComponentDecomposition(dec.grid, dec.labels, dec.components, plan.order, [])
    field_out = _translate_labels(u, ordered, plan)
    logging.info(f"Compacted {dec.n_ecc} enlarged components with translations {plan.translations}")
    return field_out, plan
