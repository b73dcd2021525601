import math
import numpy as np
import pytest
from mini_fbp.exceptions import MarginViolation
from mini_fbp.grid import (
    EnergyBreakdown,
    Grid,
    ScalarFieldGrid,
    apply_L,
    bump_vector_field,
    cell_centered_gradient,
    dirichlet_energy,
    energy,
    energy_gradient,
    first_variation,
    stiffness_matrix,
    vol_q,
)
from mini_fbp.oracle import fd_gradient
from mini_fbp.problem import build_problem
from mini_fbp.scenarios import SCENARIOS


@pytest.fixture
def torsion_spec():
    return build_problem({"dim": 2, "volume": math.pi})


@pytest.fixture
def periodic_spec():
    return build_problem(
        {
            "dim": 2,
            "volume": 1.0,
            "nonlinearity": "linear_f",
            "nonlinearity_params": [1.0, 0.5],
            "matrix": "periodic_spd",
            "weight": "periodic_q",
            "period": 1.0,
        }
    )


@pytest.fixture
def grid():
    return Grid.box(2, 1 / 16, 1.5)


def describe_grid():

    def rejects_too_few_cells():
        with pytest.raises(ValueError):
            Grid(dim=2, h=0.5, origin=(0.0, 0.0), dims=(3, 8))

    def rejects_nonpositive_cell_size():
        with pytest.raises(ValueError):
            Grid(dim=1, h=0.0, origin=(0.0,), dims=(8,))

    def box_is_centred_with_even_cell_count(grid):
        assert grid.dims == (48, 48)
        assert np.allclose(grid.center, [0.0, 0.0])
        assert grid.contains([1.4, -1.4])
        assert not grid.contains([1.6, 0.0])

    def nodes_sit_at_cell_centres(grid):
        axes = grid.node_axes()
        assert axes[0][0] == pytest.approx(-1.5 + 1 / 32)


def describe_scalar_field_grid():

    def sample_is_exact_for_linear_functions(grid):
        u = ScalarFieldGrid.from_function(grid, lambda x: 2.0 + x[..., 0] - 0.5 * x[..., 1])
        pts = np.array([[0.1, 0.2], [-0.73, 0.41], [1.0, -1.0]])
        expected = 2.0 + pts[:, 0] - 0.5 * pts[:, 1]
        assert np.allclose(u.sample(pts), expected, atol=1e-12)

    def clamped_zeroes_tiny_values(grid):
        u = ScalarFieldGrid(grid, np.full(grid.shape, 1e-14))
        assert not u.clamped().support().any()

    def embed_preserves_values(grid):
        u = ScalarFieldGrid.from_function(grid, lambda x: np.maximum(1 - np.sum(x * x, axis=-1), 0))
        bigger = Grid.box(2, 1 / 16, 2.5)
        moved = u.embed(bigger)
        assert np.sum(moved.values) == pytest.approx(np.sum(u.values))


@pytest.fixture
def skewed_constant_spec():
    return build_problem(
        {"dim": 2, "volume": 1.0, "matrix": "constant_spd", "matrix_params": [2.0, 0.5, 0.5, 1.0]}
    )


def describe_stiffness_matrix():

    def is_symmetric(grid, periodic_spec):
        L = stiffness_matrix(grid, periodic_spec.matrix)
        assert abs(L - L.T).max() < 1e-12

    def annihilates_constants_away_from_the_edge(grid, torsion_spec, periodic_spec):
        inner = ~grid.boundary_mask(1)
        ones = ScalarFieldGrid(grid, np.ones(grid.shape))
        for spec in (torsion_spec, periodic_spec):
            assert np.max(np.abs(apply_L(ones, spec).values[inner])) < 1e-9

    def reproduces_the_laplacian_of_quadratics(grid, torsion_spec):
        u = ScalarFieldGrid.from_function(grid, lambda x: (1.0 - np.sum(x * x, axis=-1)) / 4)
        inner = ~grid.boundary_mask(1)
        assert np.allclose(apply_L(u, torsion_spec).values[inner], 1.0, atol=1e-9)

    def dirichlet_energy_of_a_linear_ramp(torsion_spec):
        g = Grid.box(1, 1 / 8, 1.0)
        u = ScalarFieldGrid.from_function(g, lambda x: x[..., 0] + 2.0)
        # interior edges carry slope 1, the two outer edges jump to zero
        interior = (g.dims[0] - 1) * g.h
        ends = (u.values[0] ** 2 + u.values[-1] ** 2) / g.h
        assert dirichlet_energy(u, torsion_spec) == pytest.approx(interior + ends)

    def applies_a_diagonal_matrix_to_a_quadratic(grid):
        spec = build_problem(
            {"dim": 2, "volume": 1.0, "matrix": "constant_spd", "matrix_params": [2.0, 0.0, 0.0, 1.0]}
        )
        u = ScalarFieldGrid.from_function(grid, lambda x: x[..., 0] ** 2)
        inner = ~grid.boundary_mask(1)
        assert np.allclose(apply_L(u, spec).values[inner], -4.0, atol=1e-9)

    def is_positive_definite(periodic_spec, skewed_constant_spec):
        g = Grid.box(2, 1 / 4, 1.0)
        for spec in (periodic_spec, skewed_constant_spec):
            assert np.linalg.eigvalsh(stiffness_matrix(g, spec.matrix).toarray()).min() > 0

    def bounds_the_cell_gradients_by_the_ellipticity(grid, skewed_constant_spec):
        # eigenvalues of [[2, 0.5], [0.5, 1]]
        ellipticity = 1.5 - math.sqrt(0.5)
        rng = np.random.default_rng(11)
        for _ in range(10):
            u = ScalarFieldGrid(grid, rng.normal(size=grid.shape))
            gradient = cell_centered_gradient(u).values
            lower = ellipticity * grid.cell_volume * np.sum(gradient**2)
            assert dirichlet_energy(u, skewed_constant_spec) >= lower - 1e-10


def describe_energy():

    def splits_into_parts(grid, torsion_spec):
        u = ScalarFieldGrid.from_function(grid, lambda x: np.maximum(1 - np.sum(x * x, axis=-1), 0) / 4)
        e = energy(u, torsion_spec, 0.25)
        assert isinstance(e, EnergyBreakdown)
        assert e.total == pytest.approx(e.dirichlet + e.potential + e.volume_term)
        assert e.volume_term == pytest.approx(0.25 * vol_q(u, torsion_spec))
        assert len(e.as_row()) == len(EnergyBreakdown.CSV_FIELDS)

    def torsion_energy_is_close_to_closed_form(torsion_spec):
        g = Grid.box(2, 1 / 32, 1.25)
        u = ScalarFieldGrid.from_function(g, lambda x: np.maximum(1 - np.sum(x * x, axis=-1), 0) / 4)
        assert energy(u, torsion_spec, 0.0).total == pytest.approx(-math.pi / 8, rel=0.06)

    def gradient_matches_difference_quotients(periodic_spec):
        g = Grid(dim=2, h=0.25, origin=(-0.5, -0.5), dims=(4, 4))
        rng = np.random.default_rng(7)
        values = np.where(
            rng.random(g.shape) < 0.5,
            rng.uniform(0.02, 0.08, g.shape),
            rng.uniform(0.15, 0.3, g.shape),
        )
        u = ScalarFieldGrid(g, values)
        exact = energy_gradient(u, periodic_spec, 0.7, 0.1).values
        approx = fd_gradient(u, periodic_spec, 0.7, 0.1).values
        assert np.max(np.abs(exact - approx)) <= 1e-6 * max(1.0, np.max(np.abs(exact)))

    @pytest.mark.slow
    @pytest.mark.parametrize("name", sorted(SCENARIOS))
    def gradient_matches_on_random_fields_of_every_scenario(name):
        spec = build_problem(SCENARIOS[name].config().problem)
        g = Grid.box(spec.dim, 1 / 8, 1.0, center=spec.witness_centers[0])
        rng = np.random.default_rng(5)
        for _ in range(50):
            # delta above every corner average keeps the smoothed volume linear
            u = ScalarFieldGrid(g, rng.uniform(0.02, 0.3, g.shape))
            exact = energy_gradient(u, spec, 0.7, 0.5).values
            approx = fd_gradient(u, spec, 0.7, 0.5).values
            assert np.max(np.abs(exact - approx)) <= 1e-6 * max(1.0, np.max(np.abs(exact)))


def describe_vol_q():

    def counts_every_cell_around_a_positive_node(torsion_spec):
        g = Grid.box(2, 1 / 4, 1.0)
        values = np.zeros(g.shape)
        values[3, 4] = 1.0
        assert vol_q(ScalarFieldGrid(g, values), torsion_spec) == pytest.approx(4 * g.cell_volume)

    def covers_the_padded_lattice_for_a_positive_field(torsion_spec):
        g = Grid.box(2, 1 / 4, 1.0)
        u = ScalarFieldGrid(g, np.ones(g.shape))
        padded = (g.dims[0] + 1) * (g.dims[1] + 1)
        assert vol_q(u, torsion_spec) == pytest.approx(padded * g.cell_volume)

    def reaches_half_a_cell_past_the_positive_nodes_of_a_disk(torsion_spec):
        g = Grid.box(2, 1 / 64, 1.25)
        u = ScalarFieldGrid.from_function(g, lambda x: np.maximum(1 - np.sum(x * x, axis=-1), 0))
        # the cells around the outermost positive nodes overhang the circle
        assert math.pi < vol_q(u, torsion_spec) < math.pi * (1 + 4 * g.h)

    def two_diagonal_nodes_share_a_cell(torsion_spec):
        g = Grid.box(2, 1 / 4, 1.0)
        values = np.zeros(g.shape)
        values[3, 3] = values[4, 4] = 1.0
        assert vol_q(ScalarFieldGrid(g, values), torsion_spec) == pytest.approx(7 * g.cell_volume)


def describe_first_variation():

    def rejects_fields_touching_the_margin(grid, torsion_spec):
        u = ScalarFieldGrid.zeros(grid)
        xi = bump_vector_field(grid, [1.45, 0.0], 0.3, [1.0, 0.0])
        with pytest.raises(MarginViolation):
            first_variation(u, xi, torsion_spec, 0.25)

    def nearly_vanishes_for_the_torsion_ball_at_its_multiplier(torsion_spec):
        g = Grid.box(2, 1 / 32, 1.5)
        u = ScalarFieldGrid.from_function(g, lambda x: np.maximum(1 - np.sum(x * x, axis=-1), 0) / 4)
        xi = bump_vector_field(g, [0.9, 0.0], 0.4, [1.0, 0.0])
        unpenalized = first_variation(u, xi, torsion_spec, 0.0)
        balanced = first_variation(u, xi, torsion_spec, 0.25)
        assert unpenalized < 0
        assert abs(balanced) < 0.5 * abs(unpenalized)
