import math
import numpy as np
import pytest
from mini_fbp.diagnostics import extract_free_boundary
from mini_fbp.exceptions import Diverged, Inadmissible, OutOfBox, RadiiOutOfRange
from mini_fbp.geometry import (
    SupportMask,
    connected_components,
    diameter_report,
    enlarge_components,
)
from mini_fbp.grid import Grid, ScalarFieldGrid, vol_q
from mini_fbp.problem import build_problem
from mini_fbp.scenarios import SCENARIOS, Expectation, get_scenario
from mini_fbp.solve import (
    SolverConfig,
    detect_unbounded,
    energy_guard,
    harmonic_replacement,
    minimize_penalized,
    project,
    recover_multiplier,
    solve_constrained,
    stationarity_residual,
)
from mini_fbp.verdicts import BlowupClass, Boundedness, Verdict
from mini_fbp.weiss import classify_blowup, weiss_trace


@pytest.fixture
def torsion_spec():
    return build_problem({"name": "serrin_torsion", "dim": 2, "volume": math.pi})


@pytest.fixture
def quadratic_spec():
    return build_problem(
        {"dim": 2, "volume": math.pi, "nonlinearity": "quadratic_F", "nonlinearity_params": [6.0]}
    )


@pytest.fixture
def torsion_field():
    grid = Grid.box(2, 1 / 32, 1.5)
    return ScalarFieldGrid.from_function(grid, lambda x: np.maximum(1 - np.sum(x * x, axis=-1), 0) / 4)


@pytest.fixture(scope="module")
def fine_torsion():
    spec = build_problem({"name": "serrin_torsion", "dim": 2, "volume": math.pi})
    return spec, solve_constrained(spec, SolverConfig(h=1 / 128))


def describe_solver_config():

    def rejects_nonpositive_tolerances():
        with pytest.raises(ValueError):
            SolverConfig(h=0.0)
        with pytest.raises(ValueError):
            SolverConfig(tol_vol=-1.0)

    def rejects_zero_replicas():
        with pytest.raises(ValueError):
            SolverConfig(multistart=0)

    def halves_delta_from_4h_to_a_quarter_h():
        assert SolverConfig(h=1 / 32).delta_schedule == pytest.approx(
            [1 / 8, 1 / 16, 1 / 32, 1 / 64, 1 / 128]
        )


def describe_guard():

    def follows_the_growth_constant(torsion_spec):
        assert energy_guard(torsion_spec, {"N": 2.0}) == pytest.approx(10 * (4 * math.pi + 1))

    def flags_the_first_drop_below():
        assert detect_unbounded([0.0, -5.0, -11.0], 10.0) is Boundedness.DIVERGED
        assert detect_unbounded([0.0, -5.0], 10.0) is Boundedness.BOUNDED


def describe_project():

    def clamps_negative_values(torsion_spec):
        grid = Grid.box(2, 0.25, 1.0)
        u = ScalarFieldGrid(grid, np.linspace(-1, 1, grid.size))
        assert project(u, torsion_spec).values.min() == 0.0

    def caps_the_volume(torsion_spec):
        grid = Grid.box(2, 0.25, 2.0)
        u = ScalarFieldGrid.from_function(grid, lambda x: 5.0 - np.sum(x * x, axis=-1) + 1e-3 * x[..., 0])
        capped = project(u, torsion_spec, cap=1.0)
        assert vol_q(capped, torsion_spec) <= 1.0 + 1e-12
        # the largest values survive
        assert capped.values.max() == u.values.max()


def describe_harmonic_replacement():

    def leaves_an_exact_solution_unchanged(torsion_spec):
        grid = Grid.box(2, 1 / 32, 1.5)
        u = ScalarFieldGrid.from_function(grid, lambda x: (1 - np.sum(x * x, axis=-1)) / 4)
        replaced = harmonic_replacement(u, torsion_spec, [0.1, -0.2], 0.3)
        assert np.max(np.abs(replaced.values - u.values)) < 1e-10

    def rejects_balls_leaving_the_box(torsion_field, torsion_spec):
        with pytest.raises(OutOfBox):
            harmonic_replacement(torsion_field, torsion_spec, [1.4, 0.0], 0.2)

    def rejects_radii_above_the_cap(torsion_field, torsion_spec):
        with pytest.raises(RadiiOutOfRange):
            harmonic_replacement(torsion_field, torsion_spec, [0.0, 0.0], 0.3, radius_cap=0.25)


def describe_minimize_penalized():

    def rejects_negative_lambda(torsion_field, torsion_spec):
        with pytest.raises(ValueError):
            minimize_penalized(torsion_spec, -1.0, torsion_field, SolverConfig(h=1 / 32))

    def detects_divergence(quadratic_spec):
        cfg = SolverConfig(h=1 / 8, force=True, hr_every=0, delta_every=50)
        with pytest.raises(Diverged) as e:
            solve_constrained(quadratic_spec, cfg)
        assert e.value.trace


def describe_solve_constrained():

    def refuses_inadmissible_problems(quadratic_spec):
        with pytest.raises(Inadmissible) as e:
            solve_constrained(quadratic_spec, SolverConfig(h=1 / 8, sample_budget=1000))
        assert "HF4" in e.value.failures

    def recovers_the_torsion_disk(torsion_spec):
        cfg = SolverConfig(h=1 / 16, hr_every=0, delta_every=50, bracket_tol=0.05)
        result = solve_constrained(torsion_spec, cfg)
        assert result.converged
        assert not result.trivial
        assert result.vol_q == pytest.approx(math.pi, rel=0.03)
        assert result.energy.total < 0
        assert 0.15 < result.lam < 0.35
        assert result.state.bisection[0][0] == 0.0


def describe_recover_multiplier():

    def reads_a_quarter_from_the_torsion_disk(torsion_field, torsion_spec):
        assert recover_multiplier(torsion_field, torsion_spec) == pytest.approx(0.25, rel=0.15)

    def is_zero_for_an_empty_support(torsion_spec):
        u = ScalarFieldGrid.zeros(Grid.box(2, 0.25, 1.0))
        assert recover_multiplier(u, torsion_spec) == 0.0


def describe_stationarity_residual():

    def is_zero_without_support(torsion_spec):
        u = ScalarFieldGrid.zeros(Grid.box(2, 0.25, 1.0))
        assert stationarity_residual(u, torsion_spec, 0.25) == 0.0

    def is_finite_for_the_torsion_disk(torsion_field, torsion_spec):
        assert np.isfinite(stationarity_residual(torsion_field, torsion_spec, 0.25, n_fields=4))

    def perturbed_field_is_far_from_stationary(torsion_field, torsion_spec):
        stationary = stationarity_residual(torsion_field, torsion_spec, 0.25, n_fields=8)
        inflated = torsion_field.with_values(1.3 * torsion_field.values)
        assert stationarity_residual(inflated, torsion_spec, 0.25, n_fields=8) > stationary


def describe_mild_quadratic():

    def stays_bounded_when_forced():
        spec = build_problem(
            {"dim": 2, "volume": math.pi, "nonlinearity": "quadratic_F", "nonlinearity_params": [2.5]}
        )
        with pytest.raises(Inadmissible) as e:
            solve_constrained(spec, SolverConfig(h=1 / 8, sample_budget=1000))
        assert "HF6" in e.value.failures
        assert "HF4" not in e.value.failures
        # lambda_1(B^pi) > 2b, so nothing beats u = 0
        result = solve_constrained(spec, SolverConfig(h=1 / 8, force=True, hr_every=0, delta_every=50))
        assert result.energy.total >= -1e-9
        assert result.u.values.max() < 1e-3


@pytest.mark.slow
def describe_fine_torsion():

    def matches_the_closed_form_energy(fine_torsion):
        _, result = fine_torsion
        assert abs(result.energy.total + math.pi / 8) <= 0.01 * math.pi / 8
        assert result.vol_q == pytest.approx(math.pi, rel=0.01)
        assert 0.225 <= result.lam <= 0.275

    def is_stationary_to_ten_cells(fine_torsion):
        spec, result = fine_torsion
        residual = stationarity_residual(result.u, spec, result.lam)
        assert residual <= 10 * result.h
        inflated = result.u.with_values(1.3 * result.u.values)
        assert stationarity_residual(inflated, spec, result.lam) > residual

    def blows_up_regular_on_the_boundary(fine_torsion):
        spec, result = fine_torsion
        points = extract_free_boundary(result.u).points
        x0 = points[np.argmax(points[:, 0])]
        trace = weiss_trace(result.u, spec, result.lam, x0)
        assert trace.verdict is Verdict.PASS
        assert classify_blowup(trace, trace.frame).kind is BlowupClass.REGULAR


@pytest.mark.slow
def describe_scenario_runs():

    @pytest.mark.parametrize(
        "name", [s.name for s in SCENARIOS.values() if s.expect is Expectation.CONVERGES]
    )
    def saturate_the_volume(name):
        run = get_scenario(name).config()
        spec = build_problem(run.problem)
        result = solve_constrained(spec, run.solver)
        m = spec.volume_target
        assert abs(result.vol_q - m) <= run.solver.tol_vol * m

    def half_disk_radius_scales_the_multiplier():
        spec = build_problem({"dim": 2, "volume": math.pi / 4})
        result = solve_constrained(spec, SolverConfig(h=1 / 64))
        assert result.lam == pytest.approx(1 / 16, rel=0.1)
        assert result.u.values.max() == pytest.approx(1 / 16, rel=0.05)

    def two_ball_splits_into_two_enlarged_components():
        run = get_scenario("appendix_two_ball").config()
        result = solve_constrained(build_problem(run.problem), run.solver)
        dec = enlarge_components(connected_components(SupportMask.of(result.u)))
        report = diameter_report(dec, n_max=2, d_max=3.0)
        assert report.n_ecc == 2
        assert all(d < 3.0 for d in report.ecc_diameters)
        assert report.full_diameter >= 5.4
