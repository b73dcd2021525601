"""Grid-free closed forms used as references by the tests and by `fb oracle`."""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import bisect
from scipy.special import gamma, j0, j1

from .grid import energy


def unit_ball_volume(n):
    return math.pi ** (n / 2) / gamma(n / 2 + 1)


def sphere_area(n):
    """H^{n-1}(dB_1), which equals n |B_1|."""
    return n * unit_ball_volume(n)


def ball_radius(n, volume):
    return (volume / unit_ball_volume(n)) ** (1.0 / n)


@lru_cache(maxsize=1)
def bessel_j0_zero():
    """First positive zero of J0, bracketed in [2, 3]."""
    return bisect(j0, 2.0, 3.0, xtol=1e-14)


def lambda1_ball(n, volume):
    """First Dirichlet eigenvalue of the ball of the given Lebesgue volume."""
    R = ball_radius(n, volume)
    if n == 1:
        return math.pi**2 / (2 * R) ** 2
    if n == 2:
        return bessel_j0_zero() ** 2 / R**2
    return math.pi**2 / R**2


def poincare_constant(n, volume):
    """Faber-Krahn: int v^2 <= lambda_1(B^volume)^-1 int |grad v|^2 on sets of that volume."""
    return 1.0 / lambda1_ball(n, volume)


def eigenfunction_norm_sq(n, volume):
    """L2 norm squared of the sup-normalized first eigenfunction of B^volume."""
    R = ball_radius(n, volume)
    if n == 1:
        return R
    if n == 2:
        return math.pi * R**2 * j1(bessel_j0_zero()) ** 2
    return 2 * R**3 / math.pi


@dataclass(frozen=True)
class RadialSolution:
    """Torsion function of a ball: -Laplace u = 1 in B_rho, u = 0 on its boundary."""

    n: int
    rho: float

    def profile(self, r):
        return np.maximum(self.rho**2 - np.asarray(r, dtype=float) ** 2, 0.0) / (2 * self.n)

    @property
    def sup(self):
        return self.rho**2 / (2 * self.n)

    @property
    def boundary_gradient(self):
        return self.rho / self.n

    @property
    def multiplier(self):
        return self.rho**2 / self.n**2

    @property
    def volume(self):
        return unit_ball_volume(self.n) * self.rho**self.n

    @property
    def energy(self):
        return -sphere_area(self.n) * self.rho ** (self.n + 2) / (self.n**2 * (self.n + 2))


def torsion_ball(n, rho):
    return RadialSolution(n=n, rho=rho)


@dataclass(frozen=True)
class AppendixEnergies:
    """One-ball and two-ball candidate energies for the two-bump datum.

    Attributes:
        n (int): Dimension.
        m (float): Volume target.
        r (float): Radius with |B_r| = m / 2.
        rho (float): Radius with |B_rho| = m.
        one_ball (float): Displayed one-ball expression.
        two_ball (float): Displayed two-ball expression.
        one_ball_exact (float): int over B^{m/2} of the torsion function of B^m.
        two_ball_exact (float): F_0 of two disjoint torsion balls of volume m / 2.
        m_star (float): Smallest m where two_ball < one_ball.
    """

    n: int
    m: float
    r: float
    rho: float
    one_ball: float
    two_ball: float
    one_ball_exact: float
    two_ball_exact: float
    m_star: float


def _displayed(n, m):
    r = ball_radius(n, m / 2)
    rho = ball_radius(n, m)
    core = -sphere_area(n) / (2 * n) * r ** (n + 2) / (n + 2)
    return core + rho / (2 * n) * m / 2, 2 * (core + r / (2 * n) * m / 2)


def appendix_threshold(n, rel_tol=1e-6):
    """m* where the displayed two-ball expression drops below the one-ball one."""

    def gap(m):
        one, two = _displayed(n, m)
        return two - one

    lo, hi = 1e-6, 1.0
    while gap(hi) >= 0:
        lo, hi = hi, 2 * hi
    return bisect(gap, lo, hi, rtol=rel_tol)


def appendix_energies(n, m):
    r = ball_radius(n, m / 2)
    rho = ball_radius(n, m)
    one, two = _displayed(n, m)
    core = sphere_area(n) * r ** (n + 2) / (2 * n * (n + 2))
    return AppendixEnergies(
        n=n,
        m=m,
        r=r,
        rho=rho,
        one_ball=one,
        two_ball=two,
        one_ball_exact=rho**2 / (2 * n) * m / 2 - core,
        two_ball_exact=2 * torsion_ball(n, r).energy,
        m_star=appendix_threshold(n),
    )


def halfplane_weiss(n, lam, q0):
    """W of sqrt(lam q0) (x . nu)_+ on the unit ball: lam q0 |B_1| / 2."""
    return lam * q0 * unit_ball_volume(n) / 2


def quadratic_blowup_trace(n, m, b, taus):
    """F_0(tau phi_1) = tau^2 (lambda_1(B^m) - 2b) ||phi_1||^2 for F = b u^2."""
    base = (lambda1_ball(n, m) - 2 * b) * eigenfunction_norm_sq(n, m)
    return [tau * tau * base for tau in taus]


def fd_gradient(u, spec, lam, delta, step=1e-5):
    """Difference quotients of the smoothed discrete energy, one node at a time.

    Central differences, one-sided forward where u - step would leave u >= 0.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step must lie in [1e-7, 1e-3], got {step}")
    flat = u.flat.copy()
    out = np.empty_like(flat)
    base = None
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = energy(u.with_values(flat), spec, lam, delta).total
        if orig - step >= 0:
            flat[i] = orig - step
            down = energy(u.with_values(flat), spec, lam, delta).total
            out[i] = (up - down) / (2 * step)
        else:
            if base is None:
                base = energy(u, spec, lam, delta).total
            out[i] = (up - base) / step
        flat[i] = orig
    return u.with_values(out)
