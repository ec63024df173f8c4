import numpy as np
import pytest

from deepkm.linear_oracle import (_solve_transfer_root, linear_equal_width,
                                  linear_general_width)
from deepkm.matrices import InvalidInputError


def stationarity_residuals(g0, grams, gout, nus):
    """Residual of the layerwise first-order condition for the linear chain."""
    gs = [np.asarray(g0)] + [np.asarray(g) for g in grams] + [np.asarray(gout)]
    p = gs[0].shape[0]
    out = []
    for layer in range(1, len(nus)):
        lhs = nus[layer] * np.linalg.solve(gs[layer], gs[layer + 1])
        rhs = (nus[layer - 1] * np.linalg.solve(gs[layer - 1], gs[layer])
               + (nus[layer] - nus[layer - 1]) * np.eye(p))
        out.append(np.linalg.norm(lhs - rhs))
    return out


class TestEqualWidth:
    def test_degenerate_interpolation(self, pd_factory):
        g0 = np.asarray(pd_factory(4))
        sol = linear_equal_width(g0, g0, 3)
        for g in sol.grams:
            assert np.allclose(g, g0, atol=1e-10)

    def test_scalar_geometric_sequence(self):
        sol = linear_equal_width([[1.0]], [[16.0]], 3)
        assert [g[0, 0] for g in sol.grams] == pytest.approx([2.0, 4.0, 8.0],
                                                              abs=1e-10)

    def test_transfer_power_multiplies_back(self, pd_factory):
        g0 = np.asarray(pd_factory(5))
        gout = np.asarray(pd_factory(5))
        depth = 3
        sol = linear_equal_width(g0, gout, depth)
        t = sol.transfer
        power = np.linalg.matrix_power(t, depth + 1)
        expect = np.linalg.solve(g0, gout)
        assert np.linalg.norm(power - expect) < 1e-8 * max(1.0, np.linalg.norm(expect))

    def test_transfer_constant_across_layers(self, pd_factory):
        g0 = np.asarray(pd_factory(5))
        gout = np.asarray(pd_factory(5))
        sol = linear_equal_width(g0, gout, 4)
        gs = [g0] + sol.grams + [gout]
        for layer in range(1, len(gs)):
            t = np.linalg.solve(gs[layer - 1], gs[layer])
            assert np.linalg.norm(t - sol.transfer) < 1e-8 * np.linalg.norm(sol.transfer)

    def test_all_outputs_pd(self, pd_factory):
        sol = linear_equal_width(pd_factory(6), pd_factory(6), 3)
        for g in sol.grams:
            assert np.linalg.eigvalsh(g).min() > 0

    def test_rejects_indefinite_pencil(self):
        with pytest.raises((InvalidInputError, np.linalg.LinAlgError, Exception)):
            linear_equal_width(np.eye(2), -np.eye(2), 2)

    def test_rejects_bad_depth(self, pd_factory):
        with pytest.raises(InvalidInputError):
            linear_equal_width(pd_factory(3), pd_factory(3), 0)


class TestTransferRoot:
    def test_scalar_two_layer_hand_case(self):
        # nu = (2, 1): solve (d' + 1)(d' + 0) = lam
        lam = 6.0
        d = _solve_transfer_root(lam, np.array([1.0, 0.0]))
        assert d * (d + 1) == pytest.approx(lam, rel=1e-10)

    def test_equal_offsets_power_root(self):
        d = _solve_transfer_root(81.0, np.zeros(4))
        assert d == pytest.approx(3.0, rel=1e-10)

    def test_unique_root_from_disjoint_brackets(self, rng):
        for _ in range(20):
            offsets = np.sort(rng.uniform(0, 4, size=3))
            offsets -= offsets.min()
            lam = float(rng.uniform(0.01, 100.0))
            a = _solve_transfer_root(lam, offsets)
            b = _solve_transfer_root(lam, offsets[::-1].copy())
            assert a == pytest.approx(b, abs=1e-10 * max(1.0, a))
            assert np.prod(a + offsets) == pytest.approx(lam, rel=1e-9)


class TestGeneralWidth:
    def test_reduces_to_equal_width(self, pd_factory):
        g0 = np.asarray(pd_factory(5))
        gout = np.asarray(pd_factory(5))
        eq = linear_equal_width(g0, gout, 2)
        gen = linear_general_width(g0, gout, [3.0, 3.0, 3.0])
        for a, b in zip(eq.grams, gen.grams):
            assert np.linalg.norm(np.asarray(a) - b) < 1e-8

    def test_scalar_residual_check(self):
        g0, gout = 1.0, 5.0
        nus = [2.0, 1.0]
        sol = linear_general_width([[g0]], [[gout]], nus)
        g1 = sol.grams[0][0, 0]
        lhs = nus[1] * gout / g1
        rhs = nus[0] * g1 / g0 + (nus[1] - nus[0])
        assert lhs == pytest.approx(rhs, rel=1e-9)

    def test_stationarity_first_order_condition(self, pd_factory):
        g0 = np.asarray(pd_factory(5))
        gout = np.asarray(pd_factory(5))
        nus = [1.0, 2.0, 1.0, 3.0]
        sol = linear_general_width(g0, gout, nus)
        for res in stationarity_residuals(g0, sol.grams, gout, nus):
            assert res < 1e-8

    def test_outputs_pd(self, pd_factory):
        sol = linear_general_width(pd_factory(4), pd_factory(4), [2.0, 0.5, 4.0])
        for g in sol.grams:
            assert np.linalg.eigvalsh(np.asarray(g)).min() > 0

    def test_rejects_nonpositive_widths(self, pd_factory):
        with pytest.raises(InvalidInputError):
            linear_general_width(pd_factory(3), pd_factory(3), [1.0, -2.0])
