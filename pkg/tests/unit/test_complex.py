"""
Unit tests for complex.py

Cartesian construction, integer exactness, boundary masks and Betti numbers.
"""

import numpy as np
import pytest
import scipy.sparse as sp

from src.core.complex import (
    ChainComplex,
    Cochain,
    betti_number,
    boundary_mask,
    build_cartesian_complex,
    coboundary,
    node_incidence,
    remove_cells,
    verify_exact,
)


class TestCartesianComplex:
    """Tests for build_cartesian_complex."""

    def test_counts(self):
        c = build_cartesian_complex(2, 2)
        assert c.counts == (9, 12, 4)
        assert c.dim == 2
        assert c.grid_shape == (2, 2)

    def test_rectangular_counts(self):
        c = build_cartesian_complex(4, 2, 2.0, 1.0)
        assert c.counts == (15, 4 * 3 + 2 * 5, 8)
        assert c.positions[:, 0].max() == pytest.approx(2.0)

    def test_exact_in_integers(self):
        for nx, ny in [(1, 1), (3, 2), (7, 5)]:
            report = verify_exact(build_cartesian_complex(nx, ny))
            assert report["passed"] is True
            assert report["max_violation"] == [0]

    def test_flipped_sign_breaks_exactness(self, grid3):
        d1 = grid3.delta[1].tolil()
        row, col = d1.nonzero()[0][0], d1.nonzero()[1][0]
        d1[row, col] = -d1[row, col]
        broken = ChainComplex(grid3.counts, [grid3.delta[0], d1.tocsr()], grid3.positions)
        report = verify_exact(broken)
        assert report["passed"] is False
        assert report["max_violation"] == [2]

    def test_default_resolution_counts(self):
        c = build_cartesian_complex(50, 50)
        assert c.counts == (2601, 5100, 2500)

    def test_incidence_entries(self, grid3):
        for d in grid3.delta:
            assert set(np.unique(d.data)).issubset({-1, 1})
        # every edge has two nodes, every cell four edges
        assert np.all(np.abs(grid3.delta[0]).sum(axis=1) == 2)
        assert np.all(np.abs(grid3.delta[1]).sum(axis=1) == 4)

    def test_gradient_of_linear_function(self, grid3):
        x = grid3.positions[:, 0]
        grad = coboundary(grid3, 0) @ x
        # x-edges carry h, y-edges carry 0
        n_xedges = 3 * 4
        assert np.allclose(grad[:n_xedges], 1.0 / 3.0)
        assert np.allclose(grad[n_xedges:], 0.0)

    @pytest.mark.parametrize("nx,ny", [(0, 2), (2, -1), (1.5, 2)])
    def test_invalid_sizes(self, nx, ny):
        with pytest.raises(ValueError):
            build_cartesian_complex(nx, ny)

    def test_invalid_lengths(self):
        with pytest.raises(ValueError):
            build_cartesian_complex(2, 2, 0.0, 1.0)

    def test_coboundary_level_out_of_range(self, grid3):
        with pytest.raises(ValueError):
            coboundary(grid3, 2)


class TestChainComplexValidation:
    """Tests for ChainComplex invariants."""

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            ChainComplex(counts=(3, 2), delta=[sp.csr_matrix((3, 3))], positions=np.zeros((3, 2)))

    def test_rejects_large_entries(self):
        delta = sp.csr_matrix(np.array([[2, -1]]))
        with pytest.raises(ValueError):
            ChainComplex(counts=(2, 1), delta=[delta], positions=np.zeros((2, 2)))

    def test_cochain_length_check(self, grid3):
        Cochain(1, np.zeros(grid3.counts[1])).check(grid3)
        with pytest.raises(ValueError):
            Cochain(1, np.zeros(3)).check(grid3)
        with pytest.raises(ValueError):
            Cochain(3, np.zeros(3)).check(grid3)


class TestGeometry:
    """Tests for centroids, closures and boundary masks."""

    def test_cell_centroids(self):
        c = build_cartesian_complex(2, 2)
        cells = c.cell_centroids(2)
        assert np.allclose(cells[0], [0.25, 0.25])
        assert np.allclose(cells[3], [0.75, 0.75])

    def test_node_incidence_counts(self, grid3):
        assert np.all(node_incidence(grid3, 1).sum(axis=1) == 2)
        assert np.all(node_incidence(grid3, 2).sum(axis=1) == 4)

    def test_boundary_masks(self, grid3):
        assert boundary_mask(grid3, 1).sum() == 4 * 3
        assert boundary_mask(grid3, 0).sum() == 4 * 3
        assert not boundary_mask(grid3, 2).any()

    def test_boundary_nodes_on_square_edges(self, grid3):
        pos = grid3.positions[boundary_mask(grid3, 0)]
        on_edge = np.isclose(pos, 0.0) | np.isclose(pos, 1.0)
        assert np.all(on_edge.any(axis=1))


class TestTopology:
    """Tests for Betti numbers and cell removal."""

    def test_square_is_contractible(self, grid3):
        assert betti_number(grid3, 0) == 1
        assert betti_number(grid3, 1) == 0
        assert betti_number(grid3, 2) == 0

    def test_hole_creates_one_cycle(self, grid3):
        holed = remove_cells(grid3, [4])
        assert holed.counts == (16, 24, 8)
        assert verify_exact(holed)["passed"] is True
        assert betti_number(holed, 1) == 1
        assert betti_number(holed, 0) == 1
