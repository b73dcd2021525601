import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation, generate_binary_structure
from scipy.sparse.linalg import spsolve, splu

from .diagnostics import boundary_quadratic_form, extract_free_boundary
from .exceptions import (
    BoxOverflow,
    BracketFailure,
    Diverged,
    EmptySupport,
    Inadmissible,
    LinearSolveFailure,
    NoProgress,
    OutOfBox,
    RadiiOutOfRange,
)
from .grid import (
    Grid,
    ScalarFieldGrid,
    bump_vector_field,
    corner_minimum,
    energy,
    energy_gradient,
    first_variation,
    stiffness_matrix,
    vol_q,
)
from .oracle import ball_radius
from .problem import (
    check_admissibility,
    eigenfunction_profile,
    growth_constants,
    truncate,
)
from .verdicts import Boundedness

LAMBDA_MIN_REPORT = 1e-6
STALL_WINDOW = 50
MAX_FAILURES = 5


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings. None means "derive from h or from the problem".

    Attributes:
        h (float): Grid cell size.
        box_radius (float | None): Initial half-width R_box of the computational box.
        box_cap (float | None): Largest R_box allowed by box enlargement.
        max_bisection (int): Cap on outer Lambda steps (doubling plus bisection).
        max_iterations (int): Cap on inner iterations per solve.
        max_halvings (int): Backtracking halvings per line search.
        delta_start (float | None): Initial smoothing width, 4h by default.
        delta_min (float | None): Final smoothing width, h/4 by default.
        delta_every (int): Accepted steps per smoothing stage.
        tol_vol (float): Relative volume tolerance for saturation.
        tol_energy (float): Relative energy change over 50 accepted steps.
        tol_gradient (float): Projected gradient tolerance, per unit volume.
        bracket_tol (float): Relative width at which Lambda bisection stops.
        lambda_hint (float): First upper bracket candidate.
        hr_every (int): Accepted steps between harmonic replacement sweeps, 0 to disable.
        multistart (int): Number of replicas.
        seed (int): Base RNG seed; replica k uses seed + k.
        force (bool): Solve even when admissibility fails.
        truncate (bool): Replace F by F_R with R = 0.8 R_box.
        sample_budget (int): Samples for the admissibility audit.
    """

    h: float = 1 / 32
    box_radius: float | None = None
    box_cap: float | None = None
    max_bisection: int = 30
    max_iterations: int = 2000
    max_halvings: int = 30
    delta_start: float | None = None
    delta_min: float | None = None
    delta_every: int = 200
    tol_vol: float = 0.01
    tol_energy: float = 1e-9
    tol_gradient: float = 1e-8
    bracket_tol: float = 0.02
    lambda_hint: float = 1.0
    hr_every: int = 50
    multistart: int = 1
    seed: int = 0
    force: bool = False
    truncate: bool = True
    sample_budget: int = 4096

    def __post_init__(self):
        for name in ("h", "tol_vol", "tol_energy", "tol_gradient", "bracket_tol", "lambda_hint"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.multistart < 1:
            raise ValueError("multistart must be at least 1")

    @property
    def delta_schedule(self):
        delta = self.delta_start or 4 * self.h
        floor = self.delta_min or self.h / 4
        out = [delta]
        while delta / 2 >= floor * (1 - 1e-12):
            delta /= 2
            out.append(delta)
        return out


@dataclass
class SolverState:
    lam: float = 0.0
    bracket: tuple = (0.0, math.inf)
    delta: float | None = None
    iterations: int = 0
    accepted: int = 0
    energy_trace: list = field(default_factory=list)
    volume_trace: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    box_radius: float | None = None
    restarts: int = 0
    bisection: list = field(default_factory=list)

    TRACE_FIELDS = ("iteration", "energy", "vol", "lam", "delta")

    def record(self, E, vol):
        self.accepted += 1
        self.energy_trace.append(E)
        self.volume_trace.append(vol)
        self.rows.append((self.iterations, E, vol, self.lam, self.delta))


@dataclass
class RunResult:
    """Outcome of solve_constrained.

    Attributes:
        u (ScalarFieldGrid): The minimizer.
        lam (float): Multiplier recovered from the free boundary.
        lam_bracket (tuple): Final saturation bracket of the bisection.
        energy (EnergyBreakdown): Sharp F_0 breakdown of u.
        vol_q (float): q-volume of {u > 0}.
        converged (bool): Saturated (or trivially zero) and bounded.
        diverged (bool): Energy crossed the unboundedness guard.
        trivial (bool): u vanishes identically.
        flags (list): Warnings such as "multiplier at boundary".
        seed (int): Seed of the winning replica.
        h (float): Cell size.
        wall_time (float): Seconds spent, kept out of the manifest.
        state (SolverState): Traces of the winning replica.
        replica_energies (list): Final F_0 of every replica.
    """

    u: ScalarFieldGrid
    lam: float
    lam_bracket: tuple
    energy: object
    vol_q: float
    converged: bool
    diverged: bool = False
    trivial: bool = False
    flags: list = field(default_factory=list)
    seed: int = 0
    h: float = 0.0
    wall_time: float = 0.0
    state: SolverState | None = None
    replica_energies: list = field(default_factory=list)


def energy_guard(spec, constants=None):
    """E_guard = 10 (2 N m / q_lo + 1)."""
    constants = constants or growth_constants(spec)
    return 10.0 * (2.0 * constants["N"] * spec.volume_target / spec.q_lo + 1.0)


def detect_unbounded(trace, guard):
    """Diverged as soon as an energy drops below -guard, Bounded otherwise."""
    for value in trace:
        if value < -guard:
            return Boundedness.DIVERGED
    return Boundedness.BOUNDED


def project(u, spec, cap=math.inf):
    """Clamps to u >= 0 and keeps the largest nodes while Vol_q stays <= cap."""
    u = u.clamped()
    if not math.isfinite(cap) or vol_q(u, spec) <= cap:
        return u
    grid = u.grid
    values = u.flat
    order = np.argsort(-values, kind="stable")
    rank = np.empty(values.size, dtype=np.int64)
    rank[order] = np.arange(values.size)
    rank[values <= 0] = values.size
    # a cell enters the support with its highest-ranked corner
    first = corner_minimum(rank.reshape(grid.shape), values.size).ravel()
    entering = first < values.size
    q = spec.weight(grid.cell_coords()).ravel()
    added = np.bincount(first[entering], weights=q[entering], minlength=values.size)
    cumulative = np.cumsum(added) * grid.cell_volume
    keep = int(np.searchsorted(cumulative, cap * (1 + 1e-12), side="right"))
    out = values.copy()
    out[order[keep:]] = 0.0
    return u.with_values(out)


class _DirectionSolver:
    """Preconditioned directions 2 h^n L_FF d_F = g_F, factorized once per free set."""

    def __init__(self, grid, spec):
        self.L = stiffness_matrix(grid, spec.matrix).tocsr()
        self.scale = 2.0 * grid.cell_volume
        self._key = None
        self._lu = None

    def newton(self, g, free):
        idx = np.flatnonzero(free)
        d = np.zeros_like(g)
        if idx.size == 0:
            return d
        key = free.tobytes()
        if key != self._key:
            try:
                self._lu = splu(self.L[idx][:, idx].tocsc())
            except RuntimeError as e:
                raise LinearSolveFailure(f"factorization failed on {idx.size} free nodes: {e}")
            self._key = key
        d[idx] = self._lu.solve(g[idx]) / self.scale
        return d

    def jacobi(self, g, free):
        diag = self.L.diagonal() * self.scale
        return np.where(free, g / diag, 0.0)


def _frontier(values, grid):
    """Zero nodes face-adjacent to the support, or every zero node when the support is empty."""
    positive = (values > 0).reshape(grid.shape)
    if not positive.any():
        return ~positive.ravel()
    structure = generate_binary_structure(grid.dim, 1)
    return (binary_dilation(positive, structure) & ~positive).ravel()


def _projected_gradient(u, g, hn, frontier, saturated):
    pg = np.where(u > 0, g, 0.0)
    if not saturated:
        pg = np.where(frontier, np.minimum(g, 0.0), pg)
    return float(np.max(np.abs(pg), initial=0.0)) / hn


def r_hr_max(spec, constants=None):
    constants = constants or growth_constants(spec)
    M2 = constants["M2"]
    if M2 <= 0:
        return 0.25
    return 0.25 * min(1.0, math.sqrt(spec.matrix.ellipticity / (2.0 * M2)))


def harmonic_replacement(u, spec, center, radius, radius_cap=None):
    """Solves L h = f(x, u) on the nodes of B_radius(center), h = u elsewhere.

    Raises:
        OutOfBox: The ball does not keep a 2-cell margin from the box edge.
        RadiiOutOfRange: radius exceeds the smallness cap.
        LinearSolveFailure: The sparse solve failed or left a large residual.
    """
    grid = u.grid
    if radius_cap is not None and radius > radius_cap * (1 + 1e-12):
        raise RadiiOutOfRange(f"replacement radius {radius} exceeds {radius_cap}")
    lo = np.asarray(center) - radius
    hi = np.asarray(center) + radius
    if not (grid.contains(lo, 2 * grid.h) and grid.contains(hi, 2 * grid.h)):
        raise OutOfBox(f"ball B_{radius}({tuple(center)}) leaves the box")
    x = grid.node_coords()
    inside = (np.linalg.norm(x - np.asarray(center), axis=-1) < radius).ravel()
    if not np.any(inside):
        return u
    L = stiffness_matrix(grid, spec.matrix).tocsr()
    idx = np.flatnonzero(inside)
    out_idx = np.flatnonzero(~inside)
    flat = u.flat
    rhs = spec.nonlinearity.f(x.reshape(-1, grid.dim)[idx], flat[idx])
    rhs = rhs - L[idx][:, out_idx] @ flat[out_idx]
    L_BB = L[idx][:, idx].tocsc()
    try:
        solution = spsolve(L_BB, rhs)
    except RuntimeError as e:
        raise LinearSolveFailure(f"harmonic replacement solve failed: {e}")
    residual = np.max(np.abs(L_BB @ solution - rhs), initial=0.0)
    if not np.all(np.isfinite(solution)) or residual > 1e-10 * max(1.0, np.max(np.abs(rhs))):
        raise LinearSolveFailure(f"harmonic replacement residual {residual:.2e}")
    values = flat.copy()
    values[idx] = solution
    return u.with_values(values)


def _replacement_sweep(u, spec, lam, cap, radius, E_sharp):
    grid = u.grid
    positive = u.values > 0
    if not np.any(positive):
        return u, E_sharp, 0
    x = grid.node_coords()
    lo = x[positive].min(axis=0) - radius
    hi = x[positive].max(axis=0) + radius
    axes = [np.arange(lo[k], hi[k] + radius, radius) for k in range(grid.dim)]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, grid.dim)
    accepted = 0
    for center in centers:
        try:
            candidate = harmonic_replacement(u, spec, center, radius).clamped()
        except (OutOfBox, LinearSolveFailure) as e:
            logging.debug(f"Skipping replacement at {tuple(center)}: {e}")
            continue
        if vol_q(candidate, spec) > cap * (1 + 1e-12):
            continue
        E = energy(candidate, spec, lam).total
        if E < E_sharp:
            u, E_sharp = candidate, E
            accepted += 1
    return u, E_sharp, accepted


def minimize_penalized(spec, lam, init, cfg, cap=None, state=None, guard=None, stop_below=None):
    """Projected descent on the smoothed F_Lambda over {u >= 0, Vol_q <= cap}.

    Args:
        spec (ProblemSpec): Problem data, possibly truncated.
        lam (float): Volume penalty Lambda >= 0.
        init (ScalarFieldGrid): Starting field.
        cfg (SolverConfig): Solver settings.
        cap (float | None): Volume cap, the volume target by default; inf disables.
        state (SolverState | None): Trace collector.
        guard (float | None): Unboundedness guard, derived from spec by default.
        stop_below (float | None): Return as soon as Vol_q drops below this.

    Returns:
        ScalarFieldGrid: The projected minimizer.

    Raises:
        Diverged: F_0 dropped below -guard.
        NoProgress: Line search failed on 5 consecutive iterations.
    """
    if lam < 0:
        raise ValueError("Lambda must be nonnegative")
    cap = spec.volume_target if cap is None else cap
    state = state or SolverState()
    state.lam = lam
    guard = guard if guard is not None else energy_guard(spec)
    grid = init.grid
    hn = grid.cell_volume
    solver = _DirectionSolver(grid, spec)
    hr_radius = min(r_hr_max(spec), 0.25 * grid.half_width)
    hr_radius = max(hr_radius, 3 * grid.h)

    u = project(init, spec, cap)
    # one node adds at most 2^n cells
    cell_q = 2**grid.dim * spec.q_hi * hn
    iterations = 0
    for delta in cfg.delta_schedule:
        state.delta = delta
        E = energy(u, spec, lam, delta).total
        stage_trace = [E]
        failures = 0
        use_jacobi = False
        accepted = 0
        while accepted < cfg.delta_every and iterations < cfg.max_iterations:
            iterations += 1
            state.iterations += 1
            g = energy_gradient(u, spec, lam, delta).flat
            values = u.flat
            vol = vol_q(u, spec)
            if stop_below is not None and vol < stop_below:
                logging.debug(f"Volume {vol:.4g} fell below {stop_below:.4g}, stopping early")
                return u
            saturated = vol >= cap - cell_q
            frontier = _frontier(values, grid)
            if _projected_gradient(values, g, hn, frontier, saturated) <= cfg.tol_gradient:
                logging.debug(f"Stage delta={delta:.3g}: projected gradient below tolerance")
                break
            free = (values > 0) | (frontier & (g < 0))
            d = solver.jacobi(g, free) if use_jacobi else solver.newton(g, free)
            step = 1.0
            best = None
            for _ in range(cfg.max_halvings + 1):
                candidate = project(u.with_values(values - step * d), spec, cap)
                E_c = energy(candidate, spec, lam, delta).total
                if np.isfinite(E_c) and E_c < E:
                    best = candidate
                    break
                step *= 0.5
            if best is None:
                if np.isfinite(E_c) and E_c - E <= cfg.tol_energy * max(abs(E), hn):
                    logging.debug(f"Stage delta={delta:.3g}: line search stalled at a stationary point")
                    break
                failures += 1
                use_jacobi = True
                logging.debug(f"Line search failed ({failures} in a row)")
                if failures >= MAX_FAILURES:
                    raise NoProgress(f"line search failed {failures} consecutive times at Lambda={lam}")
                continue
            failures = 0
            use_jacobi = False
            change = float(np.max(np.abs(best.flat - values)))
            u, E = best, E_c
            accepted += 1
            breakdown = energy(u, spec, 0.0)
            state.record(E, breakdown.vol_q_raw)
            stage_trace.append(E)
            if detect_unbounded([breakdown.total], guard) is Boundedness.DIVERGED:
                raise Diverged(
                    f"F_0 = {breakdown.total:.4g} below -{guard:.4g} at Lambda={lam}",
                    trace=state.energy_trace,
                )
            if cfg.hr_every and accepted % cfg.hr_every == 0:
                u, _, swapped = _replacement_sweep(u, spec, lam, cap, hr_radius, energy(u, spec, lam).total)
                if swapped:
                    E = energy(u, spec, lam, delta).total
                    stage_trace.append(E)
                    logging.debug(f"Harmonic replacement accepted {swapped} balls")
            if change <= 1e-14 * max(1.0, u.sup):
                break
            if len(stage_trace) > STALL_WINDOW:
                old = stage_trace[-STALL_WINDOW - 1]
                if abs(old - E) <= cfg.tol_energy * max(abs(E), hn):
                    break
        logging.debug(f"Stage delta={delta:.3g} done after {accepted} accepted steps, E={E:.6g}")
    return _polish_support(u, spec, lam, cap)


def _polish_support(u, spec, lam, cap):
    """Solves L u = f(x, u) on the current support; kept when the sharp energy does not grow."""
    positive = u.flat > 0
    if not np.any(positive):
        return u
    grid = u.grid
    x = grid.node_coords().reshape(-1, grid.dim)
    L = stiffness_matrix(grid, spec.matrix).tocsr()
    idx = np.flatnonzero(positive)
    values = u.flat.copy()
    for _ in range(20):
        rhs = spec.nonlinearity.f(x[idx], values[idx])
        try:
            new = spsolve(L[idx][:, idx].tocsc(), rhs)
        except RuntimeError:
            return u
        done = np.max(np.abs(new - values[idx]), initial=0.0) <= 1e-12 * max(1.0, np.max(np.abs(new)))
        values[idx] = new
        if done:
            break
    candidate = project(u.with_values(values), spec, cap)
    if energy(candidate, spec, lam).total <= energy(u, spec, lam).total + 1e-15:
        return candidate
    return u


def default_box_radius(spec, h):
    radius = ball_radius(spec.dim, spec.volume_target / spec.q_lo)
    center = np.mean(np.asarray(spec.witness_centers), axis=0)
    reach = max(float(np.linalg.norm(np.asarray(c) - center)) for c in spec.witness_centers)
    return max(2.0 * radius, reach + 1.5 * radius) + 4 * h


def initial_field(spec, grid, rng=None, jitter=0.0):
    """One eigenfunction-shaped bump per centre, each holding an equal share of the volume."""
    centers = np.asarray(spec.witness_centers, dtype=float)
    k = len(centers)
    radius = ball_radius(spec.dim, spec.volume_target / (k * spec.q_hi))
    if rng is not None and jitter > 0:
        centers = centers + rng.normal(0.0, jitter * radius, size=centers.shape)
    x = grid.node_coords()
    values = np.zeros(grid.shape)
    for c in centers:
        f0 = float(spec.nonlinearity.f(c[None, :], np.zeros(1))[0])
        peak = max(f0, 1.0) * radius**2 / (2 * spec.dim)
        s = np.linalg.norm(x - c, axis=-1) / radius
        values = np.maximum(values, peak * eigenfunction_profile(spec.dim, s))
    return ScalarFieldGrid(grid, values)


def recover_multiplier(u, spec):
    """Median over the free boundary of the extrapolated grad u A grad u^T / q."""
    try:
        bset = extract_free_boundary(u)
    except EmptySupport:
        return 0.0
    g = boundary_quadratic_form(u, spec, bset)
    q = spec.weight(bset.points)
    return float(np.median(g / q))


class _Run:
    """One replica: box management plus the Lambda bisection."""

    def __init__(self, spec, cfg, seed, replica):
        self.spec = spec
        self.cfg = cfg
        self.state = SolverState()
        self.replica = replica
        self.rng = np.random.default_rng(seed)
        self.radius = cfg.box_radius or default_box_radius(spec, cfg.h)
        floor = 2.0 * ball_radius(spec.dim, spec.volume_target / spec.q_lo)
        if self.radius < floor:
            logging.warning(f"Box radius {self.radius} below {floor:.4g}, enlarging")
            self.radius = floor + 4 * cfg.h
        self.box_cap = cfg.box_cap or 4.0 * self.radius
        self.center = np.mean(np.asarray(spec.witness_centers), axis=0)
        self.constants = growth_constants(spec)
        self.guard = energy_guard(spec, self.constants)
        self._rebuild()

    def _rebuild(self):
        self.grid = Grid.box(self.spec.dim, self.cfg.h, self.radius, center=self.center)
        self.state.box_radius = self.radius
        self.work = truncate(self.spec, 0.8 * self.radius) if self.cfg.truncate else self.spec

    def _enlarge(self, u):
        self.radius *= 1.5
        if self.radius > self.box_cap:
            raise BoxOverflow(f"box radius {self.radius:.4g} exceeds cap {self.box_cap:.4g}")
        logging.info(f"Support reached the box edge, enlarging box to R={self.radius:.4g}")
        self._rebuild()
        return u.embed(self.grid)

    def inner(self, lam, start, trial=False):
        """Inner solve with box enlargement; bisection trials stop once saturation is lost."""
        stop_below = (1 - self.cfg.tol_vol) * self.spec.volume_target if trial else None
        u = start
        while True:
            u = minimize_penalized(
                self.work, lam, u, self.cfg, state=self.state, guard=self.guard, stop_below=stop_below
            )
            if not np.any(u.values[self.grid.boundary_mask(3)] > 0):
                return u
            u = self._enlarge(u)

    def saturated(self, u):
        return vol_q(u, self.spec) >= (1 - self.cfg.tol_vol) * self.spec.volume_target

    def run(self):
        cfg = self.cfg
        jitter = 0.1 if self.replica else 0.0
        init = initial_field(self.spec, self.grid, self.rng, jitter)
        flags = []
        u_lo = self.inner(0.0, init)
        self.state.bisection.append((0.0, vol_q(u_lo, self.spec)))
        lo, hi = 0.0, cfg.lambda_hint
        if not self.saturated(u_lo):
            logging.info("Zero-penalty minimizer is not saturated; reporting it with Lambda = 0")
            return self._result(u_lo, (0.0, 0.0), flags)

        steps = 0
        while True:
            steps += 1
            if steps > cfg.max_bisection:
                raise BracketFailure(
                    f"still saturated at Lambda={hi:.4g} after {steps - 1} doublings",
                    trace=self.state.bisection,
                )
            u_hi = self.inner(hi, u_lo, trial=True)
            self.state.bisection.append((hi, vol_q(u_hi, self.spec)))
            if not self.saturated(u_hi):
                break
            lo, u_lo = hi, u_hi
            hi *= 2.0
        logging.info(f"Lambda bracket established: [{lo:.4g}, {hi:.4g}]")

        while hi - lo > cfg.bracket_tol * hi and steps < cfg.max_bisection:
            steps += 1
            mid = 0.5 * (lo + hi)
            u_mid = self.inner(mid, u_lo, trial=True)
            vol = vol_q(u_mid, self.spec)
            self.state.bisection.append((mid, vol))
            self.state.bracket = (lo, hi)
            logging.info(f"Bisection step {steps}: Lambda={mid:.6g}, vol={vol:.6g}")
            if self.saturated(u_mid):
                lo, u_lo = mid, u_mid
            else:
                hi = mid

        if not _monotone(self.state.bisection, cfg.tol_vol * self.spec.volume_target):
            logging.warning("Volume is not monotone in Lambda across the bracket")
            flags.append("non-monotone bracket")
        if lo == 0.0:
            logging.warning("Saturation threshold at Lambda = 0 (multiplier at boundary)")
            flags.append("multiplier at boundary")
        self.state.bracket = (lo, hi)
        u = self.inner(lo, u_lo)
        return self._result(u, (lo, hi), flags)

    def _result(self, u, bracket, flags):
        spec = self.spec
        vol = vol_q(u, spec)
        trivial = not np.any(u.values > 0)
        lam = 0.0 if trivial else recover_multiplier(u, spec)
        if not trivial and lam < LAMBDA_MIN_REPORT:
            logging.warning(f"Recovered multiplier {lam:.3g} is not positive")
            flags.append("multiplier not positive")
        converged = trivial or self.saturated(u)
        return RunResult(
            u=u,
            lam=lam,
            lam_bracket=bracket,
            energy=energy(u, spec, 0.0),
            vol_q=vol,
            converged=converged,
            trivial=trivial,
            flags=list(flags),
            h=self.cfg.h,
            state=self.state,
        )


def _monotone(trace, tol):
    ordered = sorted(trace)
    return all(b[1] <= a[1] + tol for a, b in zip(ordered, ordered[1:]))


def solve_constrained(spec, cfg, report=None):
    """Minimizes F_0 over K_{=m}: Lambda bisection on saturation with box management.

    Args:
        spec (ProblemSpec): Problem data.
        cfg (SolverConfig): Solver settings.
        report (AdmissibilityReport | None): Precomputed audit, computed when missing.

    Returns:
        RunResult: Lowest-energy replica.

    Raises:
        Inadmissible: The audit failed and cfg.force is not set.
        Diverged, BracketFailure, BoxOverflow: As raised by the replicas.
    """
    started = time.perf_counter()
    if not cfg.force:
        report = report or check_admissibility(spec, cfg.sample_budget, cfg.seed)
        if not report.admissible:
            raise Inadmissible(
                f"hypotheses failed: {', '.join(report.failures())}", report.failures()
            )
    results = []
    for k in range(cfg.multistart):
        seed = cfg.seed + k
        logging.info(f"Replica {k}: seed={seed}, h={cfg.h}")
        result = _Run(spec, cfg, seed, k).run()
        result.seed = seed
        results.append(result)
    energies = [r.energy.total for r in results]
    best = min(range(len(results)), key=lambda i: (energies[i], i))
    result = results[best]
    result.replica_energies = energies
    if len(results) > 1 and max(energies) - min(energies) > 1e-3 * max(1.0, abs(min(energies))):
        logging.warning(f"Replicas disagree: energies {energies}")
        result.flags.append("multistart disagreement")
    result.wall_time = time.perf_counter() - started
    logging.info(
        f"Solved {spec.name}: Lambda={result.lam:.6g}, vol={result.vol_q:.6g}, "
        f"F0={result.energy.total:.6g}, converged={result.converged}"
    )
    return result


def random_test_fields(grid, n_fields, seed, support=None):
    """Smooth compactly supported xi, bumps of unit sup-norm clear of a 3-cell margin."""
    rng = np.random.default_rng(seed)
    x = grid.node_coords()
    if support is not None and np.any(support):
        lo, hi = x[support].min(axis=0), x[support].max(axis=0)
    else:
        lo = hi = grid.center
    box_lo = np.asarray(grid.origin) + 3 * grid.h
    box_hi = np.asarray(grid.origin) + grid.h * np.asarray(grid.dims) - 3 * grid.h
    extent = max(float(np.max(hi - lo)) / 2, 4 * grid.h)
    fields = []
    for _ in range(n_fields):
        center = rng.uniform(lo, hi)
        radius = rng.uniform(0.5, 1.0) * extent
        radius = min(radius, float(np.min(np.minimum(center - box_lo, box_hi - center))))
        direction = rng.normal(size=grid.dim)
        fields.append(bump_vector_field(grid, center, max(radius, 2 * grid.h), direction))
    return fields


def stationarity_residual(u, spec, lam, n_fields=20, seed=0):
    """max |first_variation(u, xi)| over random unit bumps xi."""
    if not np.any(u.values > 0):
        return 0.0
    worst = 0.0
    for xi in random_test_fields(u.grid, n_fields, seed, u.values > 0):
        worst = max(worst, abs(first_variation(u, xi, spec, lam, margin=2)))
    return worst
