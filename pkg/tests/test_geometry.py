import math
import numpy as np
import pytest
from mini_fbp.diagnostics import extract_free_boundary
from mini_fbp.exceptions import InfeasiblePlan, NotPeriodic
from mini_fbp.geometry import (
    CompactionPlan,
    SupportMask,
    compact_periodic,
    connected_components,
    corkscrew_check,
    diameter_report,
    enlarge_components,
    point_set_diameter,
)
from mini_fbp.grid import Grid, ScalarFieldGrid, energy, vol_q
from mini_fbp.problem import build_problem
from mini_fbp.verdicts import Verdict


def disks(grid, centers, radius):
    x = grid.node_coords()
    values = np.zeros(grid.shape)
    for c in centers:
        values = np.maximum(values, radius**2 - np.sum((x - np.asarray(c)) ** 2, axis=-1))
    return ScalarFieldGrid(grid, values)


@pytest.fixture
def torsion_spec():
    return build_problem({"dim": 2, "volume": math.pi})


@pytest.fixture
def periodic_spec():
    return build_problem(
        {
            "dim": 2,
            "volume": 1.0,
            "matrix": "periodic_spd",
            "weight": "periodic_q",
            "period": 1.0,
        }
    )


@pytest.fixture
def grid():
    return Grid.box(2, 1 / 32, 2.0)


def decompose(u):
    return enlarge_components(connected_components(SupportMask.of(u)))


def describe_connected_components():

    def empty_mask_has_no_components(grid):
        dec = connected_components(SupportMask.of(ScalarFieldGrid.zeros(grid)))
        assert dec.n_cc == 0
        assert decompose(ScalarFieldGrid.zeros(grid)).n_ecc == 0

    def labels_are_deterministic(grid):
        u = disks(grid, [(-0.7, 0.0), (0.7, 0.0)], 0.5)
        first = connected_components(SupportMask.of(u))
        second = connected_components(SupportMask.of(u))
        assert first.n_cc == 2
        assert np.array_equal(first.labels, second.labels)
        assert first.components[0].lo[0] < first.components[1].lo[0]


def describe_enlarge_components():

    def merges_disks_closer_than_a_quarter(grid):
        dec = decompose(disks(grid, [(-0.6, 0.0), (0.6, 0.0)], 0.5))
        assert dec.n_cc == 2
        assert dec.n_ecc == 1

    def keeps_disks_farther_than_a_quarter_apart(grid):
        dec = decompose(disks(grid, [(-0.65, 0.0), (0.65, 0.0)], 0.5))
        assert dec.n_cc == 2
        assert dec.n_ecc == 2

    def closes_chains_transitively(grid):
        dec = decompose(disks(grid, [(-0.8, 0.0), (0.0, 0.0), (0.8, 0.0)], 0.3))
        assert dec.n_cc == 3
        assert dec.n_ecc == 1
        assert dec.ecc == [(1, 2, 3)]

    def is_idempotent(grid):
        dec = decompose(disks(grid, [(-0.6, 0.0), (0.6, 0.0), (0.0, 1.5)], 0.4))
        again = enlarge_components(dec)
        assert again.ecc == dec.ecc
        assert again.ecc_diameters == dec.ecc_diameters

    def ecc_diameter_dominates_its_components(grid):
        dec = decompose(disks(grid, [(-0.6, 0.0), (0.6, 0.0)], 0.5))
        assert dec.ecc_diameters[0] >= max(c.diameter for c in dec.components)
        assert [row[3] for row in dec.rows()] == [0, 0]


def describe_diameter_report():

    def unit_disk_has_diameter_two(grid):
        dec = decompose(disks(grid, [(0.0, 0.0)], 1.0))
        report = diameter_report(dec)
        assert report.ecc_diameters[0] == pytest.approx(2.0, abs=2 * grid.h)
        assert report.verdicts == {
            "ecc_count": Verdict.NOT_APPLICABLE,
            "ecc_diameter": Verdict.NOT_APPLICABLE,
        }

    def two_far_balls_have_small_ecc_and_large_support():
        g = Grid.box(2, 1 / 16, 4.0)
        dec = decompose(disks(g, [(-3.0, 0.0), (3.0, 0.0)], 1.0))
        report = diameter_report(dec, n_max=2, d_max=3.0)
        assert report.n_ecc == 2
        assert report.full_diameter >= 6.0
        assert report.verdicts["ecc_count"] is Verdict.PASS
        assert report.verdicts["ecc_diameter"] is Verdict.PASS
        assert diameter_report(dec, n_max=1).verdicts["ecc_count"] is Verdict.FAIL

    def diameter_of_few_points():
        assert point_set_diameter(np.zeros((1, 2))) == 0.0
        assert point_set_diameter(np.array([[0.0], [3.0], [1.0]])) == 3.0
        assert point_set_diameter(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])) == 2.0


def describe_corkscrew_check():

    def unit_disk_admits_interior_balls():
        g = Grid.box(2, 1 / 128, 1.25)
        u = disks(g, [(0.0, 0.0)], 1.0)
        report = corkscrew_check(u, extract_free_boundary(u))
        assert report.min_radius >= 0.01
        assert report.radii.max() <= 1 / 40 + g.h

    def single_node_is_degenerate(grid):
        values = np.zeros(grid.shape)
        values[64, 64] = 1.0
        u = ScalarFieldGrid(grid, values)
        report = corkscrew_check(u, extract_free_boundary(u))
        assert report.min_radius <= grid.h
        assert report.degenerate.size == len(report.radii)

    def snaps_down_to_the_radius_grid():
        g = Grid.box(2, 1 / 128, 1.25)
        u = disks(g, [(0.0, 0.0)], 1.0)
        report = corkscrew_check(u, extract_free_boundary(u).subset(16), radii=[0.005, 0.01])
        assert set(np.unique(report.radii)) <= {0.0, 0.005, 0.01}


def describe_compact_periodic():

    def moves_far_components_next_to_the_origin(periodic_spec):
        g = Grid.box(2, 1 / 16, 6.0)
        u = disks(g, [(-4.0, 0.0), (3.5, 2.0)], 0.4)
        compacted, plan = compact_periodic(u, periodic_spec)
        assert plan.translations == [(-5, -1), (1, 1)]
        assert plan.period == 1.0
        assert len(plan.order) == 2
        assert vol_q(compacted, periodic_spec) == pytest.approx(vol_q(u, periodic_spec), abs=1e-12)
        before = energy(u, periodic_spec, 0.0).total
        after = energy(compacted, periodic_spec, 0.0).total
        assert after <= before + 1e-9
        x = g.node_coords()[compacted.values > 0]
        assert x.min() >= 0.0 and x.max() <= 4.0

    def leaves_a_placed_component_alone(periodic_spec):
        g = Grid.box(2, 1 / 16, 3.0)
        u = disks(g, [(1.0, 1.0)], 0.4)
        compacted, plan = compact_periodic(u, periodic_spec)
        assert plan.translations == [(0, 0)]
        assert np.array_equal(compacted.values, u.values)

    def fills_in_the_period_and_order_of_a_given_plan(periodic_spec):
        g = Grid.box(2, 1 / 16, 3.0)
        u = disks(g, [(1.0, 1.0)], 0.4)
        given = CompactionPlan(translations=[(1, 1)], targets=[(0.0, 0.0)])
        compacted, plan = compact_periodic(u, periodic_spec, given)
        assert plan.period == 1.0
        assert len(plan.order) == 1
        x = g.node_coords()[compacted.values > 0]
        assert np.allclose(x.mean(axis=0), [0.0, 0.0], atol=g.h)

    def needs_a_periodic_problem(torsion_spec, grid):
        with pytest.raises(NotPeriodic):
            compact_periodic(disks(grid, [(0.0, 0.0)], 0.5), torsion_spec)

    def needs_whole_cells_per_period(periodic_spec):
        g = Grid.box(2, 0.3, 3.0)
        with pytest.raises(InfeasiblePlan):
            compact_periodic(disks(g, [(0.0, 0.0)], 1.0), periodic_spec)
