"""Blow-ups at free boundary points and the Weiss boundary-adjusted energy."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .diagnostics import sphere_rule
from .exceptions import NotBoundaryPoint, NotSPD, OutOfBox
from .grid import Grid, ScalarFieldGrid
from .oracle import sphere_area
from .verdicts import BlowupClass, Verdict

RESOLUTION_FLOOR = 8


@dataclass(frozen=True)
class WeissConfig:
    """Settings of the blow-up analysis.

    Attributes:
        r_max (float): Largest blow-up radius.
        radii_count (int): Number of dyadic radii below r_max.
        tol (float): Classification and monotonicity tolerance.
        points (int): Boundary points analysed per run.
        resolution (int): Cells per axis of the blow-up grid over [-2, 2]^n.
    """

    r_max: float = 0.25
    radii_count: int = 6
    tol: float = 0.1
    points: int = 4
    resolution: int = 128

    def radii(self, h):
        out = [self.r_max * 0.5**k for k in range(self.radii_count)]
        return [r for r in out if r >= RESOLUTION_FLOOR * h * (1 - 1e-9)]


@dataclass
class BlowupFrame:
    center: np.ndarray
    S: np.ndarray
    S_inv: np.ndarray
    radii: list
    lam: float
    q0: float

    @property
    def slope(self):
        """sqrt(lam q(x0)), the slope of the regular half-plane profile."""
        return math.sqrt(max(self.lam * self.q0, 0.0))


@dataclass
class WeissTrace:
    """Per-radius Weiss values at one boundary point, radii decreasing.

    Attributes:
        radii (list): r_k.
        W (np.ndarray): W(u_r).
        W_hom (np.ndarray): W of the 1-homogeneous extension z_r.
        H (np.ndarray): Homogeneity deviation on the unit sphere.
        slack (np.ndarray): W(z_r) - W(u_r) - H(r) / n.
        dW (np.ndarray): Difference quotients of W between consecutive radii.
        C_W (float): max(0, -min slack / r).
        verdict (Verdict): Each step W(r_k) - W(r_k+1) >= -(n C_W dr + tol |W|).
        finest (ScalarFieldGrid): u_r at the smallest radius.
        frame (BlowupFrame): Centre, affine frame and radii the trace was taken in.
    """

    radii: list
    W: np.ndarray
    W_hom: np.ndarray
    H: np.ndarray
    slack: np.ndarray
    dW: np.ndarray
    C_W: float
    verdict: Verdict
    finest: ScalarFieldGrid = field(repr=False, default=None)
    frame: BlowupFrame = field(repr=False, default=None)

    CSV_FIELDS = ("r", "W", "H", "slack")

    def rows(self):
        return [(r, w, h, s) for r, w, h, s in zip(self.radii, self.W, self.H, self.slack)]


@dataclass
class BlowupClassification:
    kind: BlowupClass
    nu: np.ndarray | None
    alpha: float
    misfit: float


def sqrt_spd(M):
    """Symmetric square root through the eigen-decomposition.

    Raises:
        NotSPD: M is not symmetric or has a non-positive eigenvalue.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NotSPD(f"expected a square matrix, got shape {M.shape}")
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise NotSPD("matrix is not symmetric")
    w, Q = np.linalg.eigh(M)
    if w.min() <= 0:
        raise NotSPD(f"matrix has eigenvalue {w.min():.3g}")
    S = (Q * np.sqrt(w)) @ Q.T
    return 0.5 * (S + S.T)


def blowup_grid(dim, resolution=128):
    return Grid.box(dim, 4.0 / resolution, 2.0)


def _source_points(frame, r, y):
    return frame.center + r * (y @ frame.S)


def rescale(u, x0, r, S=None, target=None):
    """u_r(y) = u(x0 + r S y) / r on the blow-up grid over [-2, 2]^n.

    Raises:
        OutOfBox: B_{2r|S|}(x0) leaves the source box.
    """
    n = u.grid.dim
    S = np.eye(n) if S is None else np.asarray(S, dtype=float)
    target = blowup_grid(n) if target is None else target
    reach = 2 * r * np.linalg.norm(S, 2)
    if not u.grid.contains(x0, margin=reach):
        raise OutOfBox(f"B_{reach:.3g}({tuple(np.round(x0, 4))}) leaves the box")
    y = target.node_coords()
    values = u.sample(np.asarray(x0) + r * (y @ S)) / r
    return ScalarFieldGrid(target, values)


def _cell_gradient(values, h):
    n = values.ndim
    grads = []
    for i in range(n):
        g = np.diff(values, axis=i) / h
        for j in range(n):
            if j != i:
                lead = [slice(None)] * n
                lead[j] = slice(1, None)
                trail = [slice(None)] * n
                trail[j] = slice(None, -1)
                g = 0.5 * (g[tuple(lead)] + g[tuple(trail)])
        grads.append(g)
    return np.stack(grads, axis=-1)


def weiss(v, lam, q0):
    """W(v) = int_{B_1} |grad v|^2 - int_{dB_1} v^2 + lam q0 |{v > 0} cap B_1|."""
    grid = v.grid
    n = grid.dim
    hn = grid.h**n
    centres = grid.node_coords()[(slice(None, -1),) * n] + 0.5 * grid.h
    grad = _cell_gradient(v.values, grid.h)
    inside = np.linalg.norm(centres, axis=-1) < 1.0
    dirichlet = float(np.sum(grad[inside] ** 2) * hn)
    dirs, weights = sphere_rule(n)
    boundary = sphere_area(n) * float(weights @ v.sample(dirs) ** 2)
    nodes_in = np.linalg.norm(grid.node_coords(), axis=-1) < 1.0
    volume = float(np.count_nonzero(v.values[nodes_in] > 0)) * hn
    return dirichlet - boundary + lam * q0 * volume


def _homogeneous_extension(u, frame, r, target):
    y = target.node_coords()
    rad = np.linalg.norm(y, axis=-1, keepdims=True)
    unit = y / np.where(rad > 0, rad, 1.0)
    values = rad[..., 0] * u.sample(_source_points(frame, r, unit)) / r
    return ScalarFieldGrid(target, values)


def _homogeneity_deviation(u, frame, r, step):
    """int_{dB_1} |y . grad u_r - u_r|^2 with a radial central difference."""
    dirs, weights = sphere_rule(u.grid.dim)
    outer = u.sample(_source_points(frame, r, (1 + step) * dirs)) / r
    inner = u.sample(_source_points(frame, r, (1 - step) * dirs)) / r
    mid = u.sample(_source_points(frame, r, dirs)) / r
    radial = (outer - inner) / (2 * step)
    return sphere_area(u.grid.dim) * float(weights @ (radial - mid) ** 2)


def _check_boundary_point(u, x0):
    grid = u.grid
    idx = np.rint(grid.to_index(np.asarray(x0, dtype=float)[None, :])[0]).astype(int)
    window = tuple(
        slice(max(0, i - 2), min(d, i + 3)) for i, d in zip(idx, grid.dims)
    )
    patch = u.values[window]
    if patch.size == 0 or not (np.any(patch > 0) and np.any(patch <= 0)):
        raise NotBoundaryPoint(f"{tuple(np.round(x0, 4))} is not within 2h of the free boundary")


def make_frame(u, spec, lam, x0, radii=None, cfg=None):
    cfg = cfg or WeissConfig()
    x0 = np.asarray(x0, dtype=float)
    _check_boundary_point(u, x0)
    A0 = spec.matrix(x0[None, :])[0]
    S = sqrt_spd(A0)
    floor = RESOLUTION_FLOOR * u.grid.h
    if radii is None:
        radii = cfg.radii(u.grid.h)
    else:
        kept = [float(r) for r in radii if r >= floor * (1 - 1e-9)]
        if len(kept) < len(radii):
            logging.warning(f"Dropped {len(radii) - len(kept)} radii below the {floor:.4g} floor")
        radii = kept
    radii = sorted(set(radii), reverse=True)
    q0 = float(spec.weight(x0[None, :])[0])
    return BlowupFrame(center=x0, S=S, S_inv=np.linalg.inv(S), radii=radii, lam=lam, q0=q0)


def weiss_trace(u, spec, lam, x0, radii=None, cfg=None):
    """Weiss values, homogeneity deviation and equipartition slack along decreasing radii.

    Raises:
        NotBoundaryPoint: x0 is not next to both signs of u.
        OutOfBox: A blow-up ball leaves the box.
    """
    cfg = cfg or WeissConfig()
    frame = make_frame(u, spec, lam, x0, radii, cfg)
    n = u.grid.dim
    target = blowup_grid(n, cfg.resolution)
    W, W_hom, H = [], [], []
    finest = None
    for r in frame.radii:
        u_r = rescale(u, frame.center, r, frame.S, target)
        z_r = _homogeneous_extension(u, frame, r, target)
        W.append(weiss(u_r, lam, frame.q0))
        W_hom.append(weiss(z_r, lam, frame.q0))
        H.append(_homogeneity_deviation(u, frame, r, target.h))
        finest = u_r
    W, W_hom, H = np.array(W), np.array(W_hom), np.array(H)
    radii = np.array(frame.radii)
    slack = W_hom - W - H / n
    dW = (W[:-1] - W[1:]) / (radii[:-1] - radii[1:]) if len(radii) > 1 else np.zeros(0)
    C_W = max(0.0, float(np.max(-slack / radii, initial=0.0)))
    # each step may lose n C_W dr plus a tol share of |W|
    allowance = n * C_W * (radii[:-1] - radii[1:]) + cfg.tol * np.maximum(np.abs(W[:-1]), np.abs(W[1:]))
    verdict = Verdict.of(bool(np.all(W[:-1] - W[1:] >= -allowance)))
    logging.info(f"Weiss trace at {tuple(np.round(frame.center, 4))}: C_W={C_W:.4g} {verdict.value}")
    return WeissTrace(list(frame.radii), W, W_hom, H, slack, dW, C_W, verdict, finest, frame)


def classify_blowup(trace, frame, tol=0.1):
    """Least-squares fit of the finest blow-up to alpha (y . nu)_+ over B_1.

    Returns:
        BlowupClassification: REGULAR with nu = S^-1 nu_hat and alpha when the
        misfit and slope both agree to `tol`, UNRESOLVED otherwise.
    """
    v = trace.finest
    y = v.grid.node_coords()
    inside = np.linalg.norm(y, axis=-1) < 1.0
    ys, vs = y[inside], v.values[inside]
    norm = float(np.linalg.norm(vs))
    if norm == 0.0:
        return BlowupClassification(BlowupClass.UNRESOLVED, None, 0.0, math.inf)
    centroid = (vs[:, None] * ys).sum(axis=0)
    p0 = centroid / (np.linalg.norm(centroid) or 1.0) * vs.max()
    fit = least_squares(lambda p: np.maximum(ys @ p, 0.0) - vs, p0)
    alpha = float(np.linalg.norm(fit.x))
    misfit = float(np.linalg.norm(fit.fun)) / norm
    slope = frame.slope
    if alpha == 0.0:
        return BlowupClassification(BlowupClass.UNRESOLVED, None, 0.0, misfit)
    nu = frame.S_inv @ (fit.x / alpha)
    regular = slope > 0 and misfit <= tol and abs(alpha - slope) <= tol * slope
    kind = BlowupClass.REGULAR if regular else BlowupClass.UNRESOLVED
    logging.debug(f"Blow-up fit alpha={alpha:.4g} misfit={misfit:.3g} -> {kind.value}")
    return BlowupClassification(kind, nu, alpha, misfit)
