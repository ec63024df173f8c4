import math

import numpy as np
import pytest
import torch

from deepkm.kernels import Linear, SqExp, kernel_apply
from deepkm.matrices import DTYPE, InvalidInputError
from deepkm.objective import WidthProfile
from deepkm.optimizer import prior_recursion
from deepkm.sparse import (SparseConfig, SparseState, init_sparse_state,
                           load_checkpoint, nngp_baseline, predict, propagate,
                           save_checkpoint, sparse_objective, train_sparse)


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)


def shallow_state(x_i, f_i, kernel, noise=0.1, nu_out=1.0):
    """No hidden layers: a plain inducing-point GP with the given kernel."""
    return SparseState(inducing_inputs=t(x_i), inducing_factors=[],
                       inducing_outputs=t(f_i), kernels=[kernel],
                       widths=WidthProfile([1.0, nu_out]), noise_var=noise)


def one_layer_state(x_i, factor, f_i, kernels, nu=2.0, noise=0.1):
    return SparseState(inducing_inputs=t(x_i), inducing_factors=[t(factor)],
                       inducing_outputs=t(f_i), kernels=kernels,
                       widths=WidthProfile([1.0, nu, 1.0]), noise_var=noise)


class TestPropagate:
    def test_scalar_linear_hand_case(self):
        # one inducing point x_i=2, one test point x_t=3, linear kernels,
        # one hidden layer with G_ii = 9 (factor 3).
        # layer 1: K_ii=4, K_ti=6, K_tt=9; a = 6/4 = 1.5
        # G_ti = 1.5 * 9 = 13.5; schur = 9 - 1.5*6 = 0
        # G_tt = 1.5^2 * 9 + 0 = 20.25
        # output layer (linear): blocks are those Grams with K_ii = 9.
        state = one_layer_state([[2.0]], [[3.0]], [[1.0]],
                                [Linear(), Linear()])
        blocks = propagate(state, [[3.0]], full_cov=False)
        assert float(blocks.k_ii) == pytest.approx(9.0, rel=1e-12)
        assert float(blocks.k_ti) == pytest.approx(13.5, rel=1e-12)
        assert float(blocks.k_tt) == pytest.approx(20.25, rel=1e-12)

    def test_diag_matches_full_cov_marginals(self, rng):
        x_i = rng.standard_normal((6, 3))
        x_t = rng.standard_normal((4, 3))
        factor = rng.standard_normal((6, 6))
        state = one_layer_state(x_i, factor, rng.standard_normal((6, 1)),
                                [SqExp(lengthscale=1.3), SqExp()])
        diag = propagate(state, x_t, full_cov=False)
        full = propagate(state, x_t, full_cov=True)
        assert torch.allclose(diag.k_tt, torch.diagonal(full.k_tt), atol=1e-10)
        assert torch.allclose(diag.k_ti, full.k_ti, atol=1e-10)

    def test_inducing_points_reproduce_inducing_gram(self, rng):
        # propagating the inducing inputs themselves conditions exactly,
        # so the cross block at the output equals K(G_ii)
        x_i = rng.standard_normal((5, 3))
        factor = rng.standard_normal((5, 5))
        state = one_layer_state(x_i, factor, rng.standard_normal((5, 1)),
                                [SqExp(), SqExp()])
        blocks = propagate(state, x_i, full_cov=True)
        expect = kernel_apply(SqExp(), state.inducing_grams()[0])
        assert torch.allclose(blocks.k_ti, expect, atol=1e-8)
        assert torch.allclose(blocks.k_tt, expect, atol=1e-8)


class TestPredict:
    def test_matches_gp_regression_oracle(self, rng):
        # with no hidden layers and inducing points at the training inputs,
        # the predictive mean is the noiseless-interpolation GP mean
        x_i = rng.standard_normal((8, 2))
        f_i = rng.standard_normal((8, 1))
        state = shallow_state(x_i, f_i, SqExp(lengthscale=0.9), noise=0.05)
        x_t = rng.standard_normal((5, 2))
        mean, cov = predict(state, x_t, full_cov=True)

        def k(a, b):
            ga = a @ a.T / a.shape[1]
            gb = b @ b.T / b.shape[1]
            gab = a @ b.T / a.shape[1]
            r = np.diag(ga)[:, None] - 2 * gab + np.diag(gb)[None, :]
            return np.exp(-r / (2 * 0.9**2))

        k_ii = k(x_i, x_i)
        k_ti = k(x_t, x_i)
        k_tt = k(x_t, x_t)
        mean_o = k_ti @ np.linalg.solve(k_ii, f_i)
        cov_o = k_tt - k_ti @ np.linalg.solve(k_ii, k_ti.T) + 0.05 * np.eye(5)
        assert np.allclose(np.asarray(mean), mean_o, atol=1e-8)
        assert np.allclose(np.asarray(cov), cov_o, atol=1e-8)

    def test_diag_matches_full(self, rng):
        x_i = rng.standard_normal((6, 2))
        state = one_layer_state(x_i, rng.standard_normal((6, 6)),
                                rng.standard_normal((6, 1)),
                                [SqExp(), SqExp()])
        x_t = rng.standard_normal((3, 2))
        _, full = predict(state, x_t, full_cov=True)
        _, diag = predict(state, x_t, full_cov=False)
        assert torch.allclose(diag, torch.diagonal(full), atol=1e-10)

    def test_zero_variance_at_inducing_points(self, rng):
        x_i = rng.standard_normal((5, 2))
        state = shallow_state(x_i, rng.standard_normal((5, 1)), SqExp(),
                              noise=0.0)
        _, var = predict(state, x_i, full_cov=False)
        assert float(var.abs().max()) < 1e-7


class TestSparseObjective:
    def test_scalar_hand_computed(self):
        # inducing point = train point (x=2), linear kernel, one hidden layer
        # with G_ii = 4 (the prior value), F_i = 1, y = 1.5, s2 = 0.5, nu = 3.
        # conditioning is exact: m = F_i = 1, v = 0, KL(4||4) = 0, so the
        # objective is log N(1.5; 1, 0.5).
        state = one_layer_state([[2.0]], [[2.0]], [[1.0]],
                                [Linear(), Linear()], nu=3.0, noise=0.5)
        val = float(sparse_objective(state, [[2.0]], [[1.5]], total_train=1))
        expect = -0.5 * math.log(2 * math.pi * 0.5) - 0.25 / (2 * 0.5)
        assert val == pytest.approx(expect, rel=1e-10)

    def test_scalar_kl_term(self):
        # same geometry but G_ii = 9: KL contribution is
        # nu * 0.5 * (9/4 - 1 + ln(4/9)); the likelihood moments shift too:
        # m = (K_ti/K_ii) F_i with linear output kernel K = G, giving m = F_i
        # and v = 0 (single inducing point, exact conditioning).
        nu = 3.0
        state = one_layer_state([[2.0]], [[3.0]], [[1.0]],
                                [Linear(), Linear()], nu=nu, noise=0.5)
        val = float(sparse_objective(state, [[2.0]], [[1.5]], total_train=1))
        loglik = -0.5 * math.log(2 * math.pi * 0.5) - 0.25 / (2 * 0.5)
        kl = nu * 0.5 * (9.0 / 4.0 - 1.0 + math.log(4.0 / 9.0))
        assert val == pytest.approx(loglik - kl, rel=1e-10)

    def test_batch_scaling(self, rng):
        x = rng.standard_normal((10, 2))
        y = rng.standard_normal((10, 1))
        state = one_layer_state(x[:4], rng.standard_normal((4, 4)),
                                y[:4], [SqExp(), SqExp()])
        full = float(sparse_objective(state, x, y, total_train=10))
        # likelihood is rescaled by total/batch; with the full set as the
        # batch the scale factor is one, and KL terms never scale
        again = float(sparse_objective(state, x, y, total_train=10))
        assert full == again

    def test_flip_kl_changes_value(self, rng):
        x = rng.standard_normal((5, 2))
        y = rng.standard_normal((5, 1))
        state = one_layer_state(x, rng.standard_normal((5, 5)), y,
                                [SqExp(), SqExp()])
        a = float(sparse_objective(state, x, y, 5, flip_kl=False))
        b = float(sparse_objective(state, x, y, 5, flip_kl=True))
        assert a != b

    def test_zero_noise_with_conditional_variance_rejected(self, rng):
        x_i = rng.standard_normal((3, 2))
        state = shallow_state(x_i, rng.standard_normal((3, 1)), SqExp(),
                              noise=0.0)
        x_far = x_i + 10.0
        with pytest.raises(InvalidInputError, match="noise variance 0"):
            sparse_objective(state, x_far, np.zeros((3, 1)), 3)

    def test_empty_batch_rejected(self, rng):
        x_i = rng.standard_normal((3, 2))
        state = shallow_state(x_i, rng.standard_normal((3, 1)), SqExp())
        with pytest.raises(InvalidInputError):
            sparse_objective(state, np.zeros((0, 2)), np.zeros((0, 1)), 3)


class TestInitAndTrain:
    def test_init_subset_and_outputs(self, rng):
        x = rng.standard_normal((20, 3))
        y = rng.standard_normal((20, 1))
        config = SparseConfig(num_inducing=8, iterations=1, seed=4)
        state = init_sparse_state(x, y, [SqExp(), SqExp()],
                                  WidthProfile([1.0, 2.0, 1.0]), config)
        assert state.num_inducing == 8
        # every inducing row is a training row with its matching target
        xs = {tuple(np.round(row, 10)) for row in x}
        for row, out in zip(np.asarray(state.inducing_inputs),
                            np.asarray(state.inducing_outputs)):
            assert tuple(np.round(row, 10)) in xs

    def test_init_grams_follow_prior_recursion(self, rng):
        x = rng.standard_normal((10, 3))
        y = rng.standard_normal((10, 1))
        config = SparseConfig(num_inducing=10, iterations=1)
        state = init_sparse_state(x, y, [SqExp(), SqExp()],
                                  WidthProfile([1.0, 2.0, 1.0]), config)
        expect = prior_recursion(state.inducing_g0(), [SqExp()])[0]
        assert torch.allclose(state.inducing_grams()[0], expect, atol=1e-8)

    def test_training_improves_objective(self, rng):
        x = rng.standard_normal((20, 2))
        y = np.sin(x[:, :1] * 2) + 0.05 * rng.standard_normal((20, 1))
        config = SparseConfig(num_inducing=10, iterations=200,
                              learning_rate=1e-2, seed=0, trace_every=199)
        state = init_sparse_state(x, y, [SqExp(), SqExp()],
                                  WidthProfile([1.0, 2.0, 1.0]), config)
        trained, trace = train_sparse(state, x, y, config)
        assert trace[-1].objective > trace[0].objective

    def test_training_deterministic(self, rng):
        x = rng.standard_normal((12, 2))
        y = rng.standard_normal((12, 1))
        config = SparseConfig(num_inducing=6, iterations=40, seed=2)
        state = init_sparse_state(x, y, [SqExp(), SqExp()],
                                  WidthProfile([1.0, 2.0, 1.0]), config)
        a, ta = train_sparse(state, x, y, config)
        b, tb = train_sparse(state, x, y, config)
        assert torch.equal(a.inducing_factors[0], b.inducing_factors[0])
        assert [r.objective for r in ta] == [r.objective for r in tb]

    def test_nngp_pins_grams_to_recursion(self, rng):
        x = rng.standard_normal((15, 2))
        y = rng.standard_normal((15, 1))
        config = SparseConfig(num_inducing=8, iterations=100,
                              learning_rate=1e-2, seed=0)
        state = init_sparse_state(x, y, [SqExp(), SqExp()],
                                  WidthProfile([1.0, 2.0, 1.0]), config)
        err, trained = nngp_baseline(state, x, y, x[:5], y[:5], config)
        expect = prior_recursion(trained.inducing_g0(),
                                 trained.kernels[:-1])[0]
        assert torch.allclose(trained.inducing_grams()[0], expect, atol=1e-8)
        assert np.isfinite(err)

    def test_hyperparameters_move_during_training(self, rng):
        x = rng.standard_normal((15, 2))
        y = rng.standard_normal((15, 1))
        config = SparseConfig(num_inducing=8, iterations=150,
                              learning_rate=5e-2, seed=0)
        state = init_sparse_state(x, y, [SqExp(lengthscale=1.0), SqExp()],
                                  WidthProfile([1.0, 2.0, 1.0]), config)
        trained, _ = train_sparse(state, x, y, config)
        assert float(trained.kernels[0].lengthscale) != 1.0

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            SparseConfig(num_inducing=0)
        with pytest.raises(InvalidInputError):
            SparseConfig(iterations=0)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path, rng):
        x = rng.standard_normal((6, 3))
        state = one_layer_state(x, rng.standard_normal((6, 6)),
                                rng.standard_normal((6, 1)),
                                [SqExp(lengthscale=1.7), SqExp()],
                                nu=2.5, noise=0.3)
        path = tmp_path / "ckpt.txt"
        save_checkpoint(state, path)
        back = load_checkpoint(path)
        assert torch.equal(back.inducing_inputs, state.inducing_inputs)
        assert torch.equal(back.inducing_factors[0], state.inducing_factors[0])
        assert torch.equal(back.inducing_outputs, state.inducing_outputs)
        assert float(back.noise_var) == 0.3
        assert back.kernels[0] == SqExp(lengthscale=1.7)
        assert list(back.widths.nus) == [1.0, 2.5, 1.0]

    def test_roundtrip_preserves_predictions(self, tmp_path, rng):
        x = rng.standard_normal((5, 2))
        state = one_layer_state(x, rng.standard_normal((5, 5)),
                                rng.standard_normal((5, 1)),
                                [SqExp(), SqExp()])
        path = tmp_path / "ckpt.txt"
        save_checkpoint(state, path)
        back = load_checkpoint(path)
        x_t = rng.standard_normal((4, 2))
        m1, _ = predict(state, x_t, full_cov=False)
        m2, _ = predict(back, x_t, full_cov=False)
        assert torch.equal(m1, m2)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text('{"format": "something-else"}\n')
        with pytest.raises(InvalidInputError, match="not a recognized"):
            load_checkpoint(path)


class TestStateValidation:
    def test_kernel_count_mismatch(self, rng):
        with pytest.raises(InvalidInputError):
            SparseState(inducing_inputs=rng.standard_normal((3, 2)),
                        inducing_factors=[rng.standard_normal((3, 3))],
                        inducing_outputs=rng.standard_normal((3, 1)),
                        kernels=[SqExp()], widths=WidthProfile([1.0, 2.0, 1.0]))

    def test_negative_noise(self, rng):
        with pytest.raises(InvalidInputError):
            shallow_state(rng.standard_normal((3, 2)),
                          rng.standard_normal((3, 1)), SqExp(), noise=-1.0)
