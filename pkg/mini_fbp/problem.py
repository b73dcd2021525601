import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import j0

from .exceptions import (
    NegativeU,
    NonPositiveVolumeTarget,
    NoWitnessFound,
    PeriodMismatch,
    UnknownBuiltin,
)
from .grid import Grid, ScalarFieldGrid, energy
from .oracle import ball_radius, bessel_j0_zero, lambda1_ball
from .verdicts import Verdict

PERIODICITY_TOL = 1e-12
SYMMETRY_TOL = 1e-12
FD_STEP_X = 1e-6


class NonlinearityKind(Enum):
    CONSTANT_F = "constant_f"
    LINEAR_F = "linear_f"
    QUADRATIC_F = "quadratic_F"
    BUMP_TIMES_U = "bump_times_u"
    CUSTOM_TABLE = "custom_table"


class MatrixKind(Enum):
    IDENTITY = "identity"
    CONSTANT_SPD = "constant_spd"
    PERIODIC_SPD = "periodic_spd"


class WeightKind(Enum):
    CONSTANT_Q = "constant_q"
    PERIODIC_Q = "periodic_q"


def _builtin(enum_cls, name, what):
    try:
        return enum_cls(name)
    except ValueError:
        known = ", ".join(k.value for k in enum_cls)
        raise UnknownBuiltin(f"unknown {what} builtin '{name}' (known: {known})")


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def cutoff_profile(x, radius):
    """phi_R: 1 on B_R, C^1 decay to 0 on the shell R < |x| < 1.25 R."""
    r = np.linalg.norm(x, axis=-1)
    return 1.0 - _smoothstep((r - radius) / (0.25 * radius))


@dataclass(frozen=True)
class NonlinearitySpec:
    """F(x, u) with its u-derivatives f = F' and f' = F''.

    Attributes:
        kind (NonlinearityKind): Which builtin family.
        params (tuple): Builtin-specific real parameters.
        dim (int): Space dimension.
        centers (tuple): Points where f(., 0) is largest (witness metadata).
        table_u, table_F (tuple): Samples for the custom_table builtin.
        period (float | None): Declared period T.
        cutoff_radius (float | None): Radius R of the truncation phi_R, if any.
    """

    kind: NonlinearityKind
    params: tuple = ()
    dim: int = 2
    centers: tuple = ()
    table_u: tuple = ()
    table_F: tuple = ()
    period: float | None = None
    cutoff_radius: float | None = None

    @cached_property
    def _table(self):
        return PchipInterpolator(np.asarray(self.table_u), np.asarray(self.table_F))

    def _bump(self, x):
        r_in, r_out, sharpness = self.params
        phi = np.zeros(x.shape[:-1])
        for c in self.centers:
            d = np.linalg.norm(x - np.asarray(c), axis=-1)
            t = (d - r_in) / (r_out - r_in)
            phi = np.maximum(phi, (1.0 - _smoothstep(t)) ** sharpness)
        return phi

    def _cutoff(self, x):
        if self.cutoff_radius is None:
            return 1.0
        return cutoff_profile(x, self.cutoff_radius)

    def _eval(self, x, u, order):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        kind = self.kind
        if kind is NonlinearityKind.CONSTANT_F:
            (c,) = self.params
            out = (c * u, np.full_like(u, c), np.zeros_like(u))[order]
        elif kind is NonlinearityKind.LINEAR_F:
            c0, c1 = self.params
            out = (c0 * u + 0.5 * c1 * u * u, c0 + c1 * u, np.full_like(u, c1))[order]
        elif kind is NonlinearityKind.QUADRATIC_F:
            (b,) = self.params
            out = (b * u * u, 2.0 * b * u, np.full_like(u, 2.0 * b))[order]
        elif kind is NonlinearityKind.BUMP_TIMES_U:
            phi = self._bump(x)
            out = (phi * u, phi + 0.0 * u, np.zeros_like(u))[order]
        else:
            out = self._eval_table(u, order)
        return out * self._cutoff(x)

    def _eval_table(self, u, order):
        u_last = self.table_u[-1]
        inside = np.minimum(u, u_last)
        value = self._table(inside, order)
        if order == 0:
            slope = self._table(u_last, 1)
            value = value + slope * np.maximum(u - u_last, 0.0)
        elif order == 2:
            value = np.where(u > u_last, 0.0, value)
        return value

    def F(self, x, u):
        return self._eval(x, u, 0)

    def f(self, x, u):
        return self._eval(x, u, 1)

    def fprime(self, x, u):
        return self._eval(x, u, 2)

    def grad_x_F(self, x, u):
        """x-gradient of F by central differences, shape (..., n)."""
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape)
        for k in range(x.shape[-1]):
            step = np.zeros(x.shape[-1])
            step[k] = FD_STEP_X
            out[..., k] = (self.F(x + step, u) - self.F(x - step, u)) / (2 * FD_STEP_X)
        return out


@dataclass(frozen=True)
class CoefficientMatrixField:
    kind: MatrixKind
    params: tuple = ()
    dim: int = 2
    period: float | None = None
    ellipticity: float = 1.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        n = self.dim
        lead = x.shape[:-1]
        if self.kind is MatrixKind.IDENTITY:
            return np.broadcast_to(np.eye(n), lead + (n, n)).copy()
        if self.kind is MatrixKind.CONSTANT_SPD:
            entries = np.asarray(self.params, dtype=float).reshape(n, n)
            return np.broadcast_to(entries, lead + (n, n)).copy()
        a, b = self.params
        w = 2.0 * math.pi / self.period
        c = np.cos(w * x)
        s = np.sin(w * x)
        out = np.empty(lead + (n, n))
        for i in range(n):
            out[..., i, i] = 1.0 + a * c[..., i]
            for j in range(i + 1, n):
                out[..., i, j] = b * s[..., i] * s[..., j]
                out[..., j, i] = b * s[..., i] * s[..., j]
        return out

    def grad(self, x):
        """Spatial derivatives, shape (..., n, n, n) with the derivative axis first."""
        x = np.asarray(x, dtype=float)
        n = self.dim
        out = np.zeros(x.shape[:-1] + (n, n, n))
        if self.kind is not MatrixKind.PERIODIC_SPD:
            return out
        a, b = self.params
        w = 2.0 * math.pi / self.period
        c = np.cos(w * x)
        s = np.sin(w * x)
        for i in range(n):
            out[..., i, i, i] = -a * w * s[..., i]
            for j in range(n):
                if i != j:
                    out[..., i, i, j] = b * w * c[..., i] * s[..., j]
                    out[..., i, j, i] = b * w * c[..., i] * s[..., j]
        return out


@dataclass(frozen=True)
class WeightField:
    kind: WeightKind
    params: tuple = (1.0,)
    dim: int = 2
    period: float | None = None

    @property
    def bounds(self):
        if self.kind is WeightKind.CONSTANT_Q:
            return self.params[0], self.params[0]
        c, amp = self.params
        return c * (1.0 - amp), c * (1.0 + amp)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind is WeightKind.CONSTANT_Q:
            return np.full(x.shape[:-1], float(self.params[0]))
        c, amp = self.params
        w = 2.0 * math.pi / self.period
        return c * (1.0 + amp * np.mean(np.cos(w * x), axis=-1))

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind is WeightKind.CONSTANT_Q:
            return np.zeros(x.shape)
        c, amp = self.params
        w = 2.0 * math.pi / self.period
        return -c * amp * w * np.sin(w * x) / self.dim


@dataclass(frozen=True)
class ProblemSpec:
    """The data (F, A, q, m, T) of one volume-constrained free boundary problem."""

    dim: int
    nonlinearity: NonlinearitySpec
    matrix: CoefficientMatrixField
    weight: WeightField
    volume_target: float
    period: float | None = None
    u_max: float | None = None
    name: str = "custom"

    @property
    def q_lo(self):
        return self.weight.bounds[0]

    @property
    def q_hi(self):
        return self.weight.bounds[1]

    @property
    def sampling_u_max(self):
        if self.u_max is not None:
            return self.u_max
        return 10.0 * (1.0 + self.volume_target ** (2.0 / self.dim))

    @property
    def witness_centers(self):
        if self.nonlinearity.centers:
            return tuple(tuple(float(v) for v in c) for c in self.nonlinearity.centers)
        return (tuple(0.0 for _ in range(self.dim)),)


@dataclass
class HypothesisResult:
    verdict: Verdict
    constants: dict = field(default_factory=dict)
    note: str = ""


@dataclass
class AdmissibilityReport:
    """Per-hypothesis verdicts with the measured constants.

    Attributes:
        results (dict): HF1..HF6, HA1..HA3, Hq1, Hq2, HPer -> HypothesisResult.
        lambda1 (float): lambda_1 of the ball of Lebesgue volume m / q_lo.
        b_threshold (float): lambda * lambda1 / 2, the HF4 bound on b.
        witness (ScalarFieldGrid | None): HF6 witness when found.
        witness_energy (float | None): F_0 of the witness.
        sampled (bool): Constants are sample maxima, not certified bounds.
    """

    results: dict
    lambda1: float
    b_threshold: float
    witness: ScalarFieldGrid | None = None
    witness_energy: float | None = None
    sampled: bool = True

    @property
    def admissible(self):
        return all(r.verdict is not Verdict.FAIL for r in self.results.values())

    def failures(self):
        return [k for k, r in self.results.items() if r.verdict is Verdict.FAIL]


def _periodic_check(kind, period, declared):
    if kind and period is None:
        raise PeriodMismatch(f"{declared} is periodic but declares no period")


def build_problem(config):
    """Builds a ProblemSpec from a parsed [problem] section.

    Args:
        config (Mapping): Keys as in schemas/json/ProblemSection.json.

    Returns:
        ProblemSpec: Fully evaluable problem data.
    """
    dim = int(config.get("dim", 2))
    m = float(config["volume"])
    if not m > 0:
        raise NonPositiveVolumeTarget(f"volume target must be positive, got {m}")

    n_kind = _builtin(NonlinearityKind, config.get("nonlinearity", "constant_f"), "nonlinearity")
    a_kind = _builtin(MatrixKind, config.get("matrix", "identity"), "matrix")
    q_kind = _builtin(WeightKind, config.get("weight", "constant_q"), "weight")

    shared = config.get("period")
    declared = {
        "nonlinearity": config.get("nonlinearity_period", shared),
        "matrix": config.get("matrix_period", shared),
        "weight": config.get("weight_period", shared),
    }
    periods = {float(t) for t in declared.values() if t is not None}
    if len(periods) > 1:
        raise PeriodMismatch(f"components declare different periods: {declared}")
    period = periods.pop() if periods else None
    _periodic_check(a_kind is MatrixKind.PERIODIC_SPD, period, "matrix")
    _periodic_check(q_kind is WeightKind.PERIODIC_Q, period, "weight")

    centers = tuple(tuple(float(v) for v in c) for c in config.get("centers", ()))
    params = tuple(float(p) for p in config.get("nonlinearity_params", ()))
    if n_kind is NonlinearityKind.CONSTANT_F:
        params = params or (1.0,)
    elif n_kind is NonlinearityKind.LINEAR_F:
        params = (params + (1.0, 0.0)[len(params):])[:2]
    elif n_kind is NonlinearityKind.QUADRATIC_F:
        params = params or (1.0,)
    elif n_kind is NonlinearityKind.BUMP_TIMES_U:
        q_ref = float(config.get("weight_params", (1.0,))[0])
        defaults = (ball_radius(dim, m / 2 / q_ref), ball_radius(dim, m / q_ref), 4.0)
        params = params + defaults[len(params):]
        centers = centers or (tuple(0.0 for _ in range(dim)),)
    nonlinearity = NonlinearitySpec(
        kind=n_kind,
        params=params,
        dim=dim,
        centers=centers,
        table_u=tuple(float(v) for v in config.get("table_u", ())),
        table_F=tuple(float(v) for v in config.get("table_F", ())),
        period=period,
    )

    a_params = tuple(float(p) for p in config.get("matrix_params", ()))
    if a_kind is MatrixKind.PERIODIC_SPD:
        a_params = (a_params + (0.2, 0.1)[len(a_params):])[:2]
        a, b = abs(a_params[0]), abs(a_params[1])
        spread = a + (dim - 1) * b
        default_lambda = min(1.0 - spread, 1.0 / (1.0 + spread))
    elif a_kind is MatrixKind.CONSTANT_SPD:
        eig = np.linalg.eigvalsh(np.asarray(a_params).reshape(dim, dim))
        default_lambda = min(eig.min(), 1.0 / eig.max())
    else:
        default_lambda = 1.0
    matrix = CoefficientMatrixField(
        kind=a_kind,
        params=a_params,
        dim=dim,
        period=period,
        ellipticity=float(config.get("ellipticity", default_lambda)),
    )

    q_params = tuple(float(p) for p in config.get("weight_params", ()))
    if q_kind is WeightKind.PERIODIC_Q:
        q_params = q_params + (1.0, 0.25)[len(q_params):]
    else:
        q_params = q_params[:1] or (1.0,)
    weight = WeightField(kind=q_kind, params=q_params, dim=dim, period=period)

    spec = ProblemSpec(
        dim=dim,
        nonlinearity=nonlinearity,
        matrix=matrix,
        weight=weight,
        volume_target=m,
        period=period,
        u_max=config.get("u_max"),
        name=str(config.get("name", "custom")),
    )
    logging.debug(f"Built problem {spec.name}: n={dim}, m={m}, T={period}")
    return spec


def truncate(spec, radius):
    """Returns spec with F replaced by F_R = F * phi_R."""
    return replace(spec, nonlinearity=replace(spec.nonlinearity, cutoff_radius=radius))


def _check_u(u):
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise NegativeU("F, f and f' are only defined for u >= 0")
    return u


def eval_F(spec, x, u):
    return spec.nonlinearity.F(x, _check_u(u))


def eval_f(spec, x, u):
    return spec.nonlinearity.f(x, _check_u(u))


def eval_fprime(spec, x, u):
    return spec.nonlinearity.fprime(x, _check_u(u))


def default_sample_radius(spec):
    radius = 2.0 * ball_radius(spec.dim, spec.volume_target / spec.q_lo) + 1.0
    for c in spec.witness_centers:
        radius = max(radius, float(np.max(np.abs(c))) + 2.0)
    return radius


def growth_constants(spec, sample_budget=4096, seed=0, box_radius=None):
    """Sampled HF4/HF5 constants N, b, N', M', M2."""
    rng = np.random.default_rng(seed)
    radius = box_radius or default_sample_radius(spec)
    x = rng.uniform(-radius, radius, size=(sample_budget, spec.dim))
    u = rng.uniform(0.0, spec.sampling_u_max, size=sample_budget)
    nl = spec.nonlinearity
    F = nl.F(x, u)
    f = nl.f(x, u)
    f0 = nl.f(x, np.zeros_like(u))
    top = u >= 0.5 * spec.sampling_u_max
    b = max(0.0, float(np.max((F[top] - u[top] * f0[top]) / u[top] ** 2)))
    N = max(0.0, float(np.max(F - b * u * u)))
    positive = u > 0
    return {
        "N": N,
        "b": b,
        "N_prime": max(0.0, float(np.max(f0))),
        "M_prime": max(0.0, float(np.max((f[positive] - f0[positive]) / u[positive]))),
        "M2": max(0.0, float(np.max(nl.fprime(x, u)))),
        "f_min": float(np.min(f)),
        "samples": (x, u),
    }


def energy_lower_bound(spec, constants=None):
    """-2 N m / q_lo: the scale below which a truncated energy cannot go."""
    constants = constants or growth_constants(spec)
    return -2.0 * constants["N"] * spec.volume_target / spec.q_lo


def _lattice_residual(func, x, period, dim):
    worst = 0.0
    base = func(x)
    for k in range(dim):
        shift = np.zeros(dim)
        shift[k] = period
        worst = max(worst, float(np.max(np.abs(func(x + shift) - base))))
    return worst


def check_admissibility(spec, sample_budget=4096, seed=0, box_radius=None):
    """Audits HF1-HF6, HA1-HA3, Hq1-Hq2 and HPer on random samples.

    Args:
        spec (ProblemSpec): The problem.
        sample_budget (int): Number of (x, u) samples, at least 1000.
        seed (int): RNG seed for the samples.
        box_radius (float | None): Sampling box half-width.

    Returns:
        AdmissibilityReport: Verdicts and measured constants.
    """
    sample_budget = max(int(sample_budget), 1000)
    consts = growth_constants(spec, sample_budget, seed, box_radius)
    x, u = consts["samples"]
    nl = spec.nonlinearity
    results = {}

    lip_u = float(np.max(np.abs(nl.fprime(x, u))))
    lip_x = float(np.max(np.linalg.norm(nl.grad_x_F(x, u), axis=-1) / np.maximum(u, 1.0)))
    results["HF1"] = HypothesisResult(
        Verdict.of(np.isfinite(lip_u) and np.isfinite(lip_x)),
        {"lip_u": lip_u, "lip_x": lip_x},
        "sampled",
    )
    F0 = nl.F(x, np.zeros_like(u))
    results["HF2"] = HypothesisResult(
        Verdict.of(bool(np.all(F0 == 0.0))), {"max_abs_F0": float(np.max(np.abs(F0)))}
    )
    results["HF3"] = HypothesisResult(
        Verdict.of(consts["f_min"] >= 0.0), {"f_min": consts["f_min"]}
    )

    A = spec.matrix(x)
    asym = float(np.max(np.abs(A - np.swapaxes(A, -1, -2))))
    eig = np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, -1, -2)))
    lo, hi = float(eig.min()), float(eig.max())
    lam_decl = spec.matrix.ellipticity
    lam_meas = min(lo, 1.0 / hi) if lo > 0 else 0.0
    ha3_ok = 0 < lam_decl <= 1 and lo >= lam_decl * (1 - 1e-12) and hi <= (1 + 1e-12) / lam_decl
    results["HA1"] = HypothesisResult(
        Verdict.of(bool(np.all(np.isfinite(spec.matrix.grad(x))))), {}, "sampled"
    )
    results["HA2"] = HypothesisResult(Verdict.of(asym <= SYMMETRY_TOL), {"asymmetry": asym})
    results["HA3"] = HypothesisResult(
        Verdict.of(ha3_ok),
        {"lambda_declared": lam_decl, "lambda_measured": lam_meas, "eig_min": lo, "eig_max": hi},
    )

    lam_ell = lam_decl if ha3_ok else lam_meas
    m_tilde = spec.volume_target / spec.q_lo
    lambda1 = lambda1_ball(spec.dim, m_tilde)
    threshold = lam_ell * lambda1 / 2.0
    results["HF4"] = HypothesisResult(
        Verdict.of(consts["b"] < threshold),
        {"N": consts["N"], "b": consts["b"], "threshold": threshold},
        "sampled",
    )
    results["HF5"] = HypothesisResult(
        Verdict.of(all(np.isfinite([consts["N_prime"], consts["M_prime"], consts["M2"]]))),
        {"N_prime": consts["N_prime"], "M_prime": consts["M_prime"], "M2": consts["M2"]},
        "sampled",
    )

    q = spec.weight(x)
    q_lo, q_hi = spec.weight.bounds
    results["Hq1"] = HypothesisResult(
        Verdict.of(bool(np.all(np.isfinite(spec.weight.grad(x))))), {}, "sampled"
    )
    results["Hq2"] = HypothesisResult(
        Verdict.of(q_lo > 0 and bool(np.all((q >= q_lo * (1 - 1e-12)) & (q <= q_hi * (1 + 1e-12))))),
        {"q_min": float(q.min()), "q_max": float(q.max()), "q_lo": q_lo, "q_hi": q_hi},
    )

    if spec.period is None:
        results["HPer"] = HypothesisResult(Verdict.NOT_APPLICABLE)
    else:
        residual = max(
            _lattice_residual(lambda y: nl.F(y, u), x, spec.period, spec.dim),
            _lattice_residual(spec.matrix, x, spec.period, spec.dim),
            _lattice_residual(spec.weight, x, spec.period, spec.dim),
        )
        results["HPer"] = HypothesisResult(
            Verdict.of(residual <= PERIODICITY_TOL), {"residual": residual}
        )

    witness, witness_energy = None, None
    try:
        witness, witness_energy = witness_negative_energy(spec)
        results["HF6"] = HypothesisResult(Verdict.PASS, {"energy": witness_energy})
    except NoWitnessFound as e:
        results["HF6"] = HypothesisResult(Verdict.FAIL, {}, str(e))

    report = AdmissibilityReport(
        results=results,
        lambda1=lambda1,
        b_threshold=threshold,
        witness=witness,
        witness_energy=witness_energy,
    )
    for name, r in results.items():
        if r.verdict is Verdict.FAIL:
            logging.error(f"Admissibility {name} failed: {r.constants} {r.note}")
    logging.info(f"Admissibility of {spec.name}: {'pass' if report.admissible else 'fail'}")
    return report


def eigenfunction_profile(dim, s):
    """First Dirichlet eigenfunction of the unit ball, sup-normalized, at radius s."""
    s = np.asarray(s, dtype=float)
    inside = s < 1.0
    if dim == 1:
        prof = np.cos(0.5 * np.pi * s)
    elif dim == 2:
        prof = j0(bessel_j0_zero() * s)
    else:
        arg = np.pi * np.maximum(s, 1e-300)
        prof = np.where(s > 0, np.sin(arg) / arg, 1.0)
    return np.where(inside, prof, 0.0)


def witness_negative_energy(spec, resolution=8):
    """Finds tau * phi_1 on a small ball with F_0(tau * phi_1) < 0.

    Args:
        spec (ProblemSpec): The problem; the witness sits at its first centre.
        resolution (int): Grid cells per witness radius.

    Returns:
        tuple: (ScalarFieldGrid, energy) of the first tau = 2^-k that works.
    """
    center = np.asarray(spec.witness_centers[0])
    eps = min(0.5, 0.5 * ball_radius(spec.dim, spec.volume_target / spec.q_hi))
    h = eps / resolution
    grid = Grid.box(spec.dim, h, 1.25 * eps, center=center)
    s = np.linalg.norm(grid.node_coords() - center, axis=-1) / eps
    phi = eigenfunction_profile(spec.dim, s)
    for k in range(21):
        tau = 2.0**-k
        candidate = ScalarFieldGrid(grid, tau * phi)
        total = energy(candidate, spec, 0.0).total
        if total < 0:
            logging.debug(f"HF6 witness: tau=2^-{k}, energy={total:.3e}")
            return candidate, total
    raise NoWitnessFound(f"no negative-energy witness down to tau = 2^-20 at {tuple(center)}")
