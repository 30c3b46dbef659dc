import numpy as np
import pytest

from jsmkit.autodiff import nn
from jsmkit.autodiff import tensor as T
from jsmkit.errors import ConfigError, InputError

DIMS4 = (4, 4, 4)


def tiny_spec(channels=(2, 3), activation=nn.SOFTPLUS, dropout=(0.0, 0.0)):
    return nn.classifier_spec(
        input_dims=DIMS4, channels=channels, activation=activation, dropout_rates=dropout
    )


@pytest.fixture
def tiny_model():
    return nn.build_model(tiny_spec(), seed=3, input_dims=DIMS4)


class TestBuildModel:
    def test_desk_scale_dense_extent_after_two_pools(self):
        spec = nn.classifier_spec(input_dims=(16, 16, 16), channels=(4, 8))
        dense = spec[-1]
        assert dense.in_features == 8 * (16 // 4) ** 3 == 512

    def test_output_length_is_class_count(self):
        spec = nn.classifier_spec(input_dims=(16, 16, 16), classes=4)
        assert nn.spec_output_classes(spec) == 4

    def test_same_seed_is_bit_identical(self):
        a = nn.build_model(tiny_spec(), seed=9, input_dims=DIMS4)
        b = nn.build_model(tiny_spec(), seed=9, input_dims=DIMS4)
        assert a.tensors.keys() == b.tensors.keys()
        for k in a.tensors:
            assert np.array_equal(a.tensors[k], b.tensors[k])

    def test_shape_mismatch_names_offending_layer(self):
        spec = tiny_spec()
        spec[-1] = nn.Dense(10, 4)
        with pytest.raises(ConfigError, match="layer 11"):
            nn.build_model(spec, seed=0, input_dims=DIMS4)

    def test_channel_mismatch_rejected(self):
        spec = [nn.Conv3d(2, 4)]
        with pytest.raises(ConfigError, match="channels"):
            nn.validate_spec(spec, in_channels=1, input_dims=DIMS4)


class TestForward:
    def test_softmax_rows_sum_to_one(self, tiny_model, rng):
        x = rng.normal(size=(3, 1, *DIMS4))
        fp = nn.forward(tiny_model, x, mode="eval")
        np.testing.assert_allclose(fp.probs.data.sum(axis=1), 1.0, atol=1e-9)

    def test_eval_mode_is_deterministic(self, tiny_model, rng):
        x = rng.normal(size=(1, 1, *DIMS4))
        p1 = nn.forward(tiny_model, x, mode="eval", seed=1).probs.data
        p2 = nn.forward(tiny_model, x, mode="eval", seed=2).probs.data
        np.testing.assert_array_equal(p1, p2)

    def test_zero_weights_give_uniform_distribution(self, tiny_model, rng):
        params = tiny_model.copy()
        for key in params.trainable_keys():
            if key.endswith(("weight", "bias", "shift")):
                params.tensors[key] = np.zeros_like(params.tensors[key])
        x = rng.normal(size=(2, 1, *DIMS4))
        fp = nn.forward(params, x, mode="eval")
        np.testing.assert_allclose(fp.probs.data, 0.25, atol=1e-12)

    def test_extreme_logits_still_normalize(self):
        probs, _ = nn._softmax(T.Tensor(np.array([[500.0, -500.0, 0.0, 1.0]])))
        assert probs.data.sum() == pytest.approx(1.0, abs=1e-9)

    def test_shape_mismatch_rejected(self, tiny_model, rng):
        with pytest.raises(InputError):
            nn.forward(tiny_model, rng.normal(size=(1, 2, *DIMS4)))

    def test_batchnorm_running_stats_update_in_train_only(self, tiny_model, rng):
        params = tiny_model.copy()
        x = rng.normal(size=(4, 1, *DIMS4))
        before = params.tensors["1.mean_running"].copy()
        nn.forward(params, x, mode="eval")
        np.testing.assert_array_equal(params.tensors["1.mean_running"], before)
        nn.forward(params, x, mode="train")
        assert not np.array_equal(params.tensors["1.mean_running"], before)


class TestCrossEntropy:
    def test_perfect_prediction_is_zero(self):
        probs = T.Tensor(np.array([[1.0, 0.0, 0.0, 0.0]]))
        assert nn.cross_entropy(probs, np.array([1.0, 0, 0, 0])).item() == 0.0

    def test_uniform_prediction_is_log4(self):
        probs = T.Tensor(np.full((1, 4), 0.25))
        got = nn.cross_entropy(probs, np.array([0, 0, 1.0, 0])).item()
        assert got == pytest.approx(np.log(4.0), abs=1e-12)

    def test_known_value(self):
        probs = T.Tensor(np.array([[0.7, 0.1, 0.1, 0.1]]))
        got = nn.cross_entropy(probs, np.array([1.0, 0, 0, 0])).item()
        assert got == pytest.approx(0.3566749439387324, abs=1e-12)

    def test_probability_floor_keeps_loss_finite(self):
        probs = T.Tensor(np.array([[0.0, 1.0]]))
        got = nn.cross_entropy(probs, np.array([1.0, 0.0])).item()
        assert got == pytest.approx(-np.log(1e-12))


class TestBackward:
    def test_softmax_ce_gradient_identity(self, rng):
        # d(ce)/d(logits) = probs - onehot for the fused softmax+CE path
        logits = T.Tensor(rng.normal(size=(2, 4)))
        probs, _ = nn._softmax(logits)
        y = np.zeros((2, 4))
        y[0, 1] = y[1, 3] = 1.0
        loss = nn.cross_entropy(probs, y)
        (g,) = T.grad(loss, [logits])
        np.testing.assert_allclose(g.data, (probs.data - y) / 2.0, atol=1e-12)

    def test_untouched_parameters_get_zero_gradient(self, tiny_model, rng):
        x = rng.normal(size=(1, 1, *DIMS4))
        fp = nn.forward(tiny_model, x, mode="eval")
        # a loss that ignores the network output entirely
        loss = T.tsum(T.mul(fp.input_leaf, T.Tensor(np.zeros_like(x))))
        grads = nn.backward(fp, loss)
        assert all(np.all(grads[k] == 0) for k in tiny_model.trainable_keys())

    @pytest.mark.parametrize("activation", [nn.SOFTPLUS, nn.RELU])
    def test_full_model_gradients_match_finite_differences(self, rng, activation):
        params = nn.build_model(tiny_spec(activation=activation), seed=5, input_dims=DIMS4)
        x = rng.normal(size=(2, 1, *DIMS4))
        y = np.zeros((2, 4))
        y[0, 0] = y[1, 2] = 1.0
        fp = nn.forward(params, x, mode="eval")
        grads = nn.backward(fp, nn.cross_entropy(fp.probs, y))

        def loss_with(key, idx, value):
            probe = params.copy()
            probe.tensors[key].flat[idx] = value
            fp2 = nn.forward(probe, x, mode="eval")
            return nn.cross_entropy(fp2.probs, y).item()

        h = 1e-5
        for key in params.trainable_keys():
            arr = params.tensors[key]
            for idx in rng.choice(arr.size, size=min(arr.size, 5), replace=False):
                v = arr.flat[idx]
                fd = (loss_with(key, idx, v + h) - loss_with(key, idx, v - h)) / (2 * h)
                ga = grads[key].flat[idx]
                assert ga == pytest.approx(fd, rel=1e-4, abs=1e-8), key


class TestInputGradient:
    def test_blind_voxel_has_zero_gradient(self, rng):
        # dense model that never reads feature 0
        spec = [nn.Flatten(), nn.Dense(8, 3)]
        params = nn.build_model(spec, seed=0, in_channels=1, input_dims=(2, 2, 2))
        params.tensors["1.weight"][0] = 0.0
        g = nn.input_gradient(params, rng.normal(size=(1, 2, 2, 2)))
        assert g.flat[0] == 0.0

    def test_linear_softmax_matches_hand_derivation(self, rng):
        spec = [nn.Flatten(), nn.Dense(2, 2)]
        params = nn.build_model(spec, seed=0, in_channels=2, input_dims=(1, 1, 1))
        w = np.array([[0.7, -0.4], [0.2, 1.1]])  # (features, classes)
        b = np.array([0.05, -0.3])
        params.tensors["1.weight"] = w.copy()
        params.tensors["1.bias"] = b.copy()
        x = rng.normal(size=(2, 1, 1, 1))
        z = x.ravel() @ w + b
        p = np.exp(z - z.max())
        p /= p.sum()
        # grad of sum_k log p_k = sum_k (e_k - K p)^T dz/dx
        expected = w @ (np.ones(2) - 2 * p)
        got = nn.input_gradient(params, x)
        np.testing.assert_allclose(got.ravel(), expected, rtol=1e-12)

    def test_matches_finite_differences(self, rng):
        params = nn.build_model(tiny_spec(), seed=7, input_dims=DIMS4)
        x = rng.normal(size=(1, 1, *DIMS4))
        g = nn.input_gradient(params, x)
        h = 1e-5
        for idx in rng.choice(x.size, size=10, replace=False):
            xp, xm = x.copy(), x.copy()
            xp.flat[idx] += h
            xm.flat[idx] -= h
            up = nn.log_prob_sum(nn.forward(params, xp, mode="eval")).item()
            down = nn.log_prob_sum(nn.forward(params, xm, mode="eval")).item()
            fd = (up - down) / (2 * h)
            assert g.flat[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)


class TestPenaltyParamGradient:
    def test_zero_map_gives_zero_gradients(self, tiny_model, rng):
        x = rng.normal(size=(1, 1, *DIMS4))
        grads = nn.penalty_param_gradient(tiny_model, x, np.zeros_like(x))
        assert all(np.all(g == 0) for g in grads.values())

    def test_linear_softmax_closed_form(self, rng):
        spec = [nn.Flatten(), nn.Dense(2, 2)]
        params = nn.build_model(spec, seed=0, in_channels=2, input_dims=(1, 1, 1))
        w = np.array([[0.9, -0.2], [-0.5, 0.4]])
        params.tensors["1.weight"] = w.copy()
        params.tensors["1.bias"] = np.array([0.1, -0.1])
        x = rng.normal(size=(2, 1, 1, 1))
        q = rng.normal(size=(2, 1, 1, 1))

        xv, qv = x.ravel(), q.ravel()
        z = xv @ w + params.tensors["1.bias"]
        e = np.exp(z - z.max())
        p = e / e.sum()
        K = 2
        g = w @ (np.ones(K) - K * p)
        # dg_p/dW_{jk} = delta_pj (1 - K p_k) - K x_j p_k (W_kp - sum_m p_m W_mp)
        wbar = w @ p  # (features,)
        dg = np.zeros((2, 2, 2))  # (p, j, k)
        for pi in range(2):
            for j in range(2):
                for k in range(2):
                    dg[pi, j, k] = (pi == j) * (1 - K * p[k]) - K * xv[j] * p[k] * (
                        w[pi, k] - wbar[pi]
                    )
        expected_w = np.einsum("p,pjk->jk", 2 * qv**2 * g, dg)
        got = nn.penalty_param_gradient(params, x, q)
        np.testing.assert_allclose(got["1.weight"], expected_w, rtol=1e-10)

    def test_conv_model_matches_finite_differences(self, rng):
        params = nn.build_model(tiny_spec(), seed=11, input_dims=DIMS4)
        x = rng.normal(size=(1, 1, *DIMS4))
        q = rng.normal(size=(1, 1, *DIMS4))
        grads = nn.penalty_param_gradient(params, x, q)

        def penalty_with(key, idx, value):
            probe = params.copy()
            probe.tensors[key].flat[idx] = value
            fp = nn.forward(probe, x, mode="eval")
            return nn.gradient_penalty(fp, q).item()

        h = 1e-4
        for key in params.trainable_keys():
            arr = params.tensors[key]
            for idx in rng.choice(arr.size, size=min(arr.size, 3), replace=False):
                v = arr.flat[idx]
                fd = (penalty_with(key, idx, v + h) - penalty_with(key, idx, v - h)) / (2 * h)
                assert grads[key].flat[idx] == pytest.approx(fd, rel=1e-3, abs=1e-7), key


class TestDropout:
    def test_train_mode_preserves_expected_activations(self, rng):
        # with a linear 2-class head the log-odds are linear in the masked
        # input, so inverted-dropout scaling makes their mean match eval mode
        spec = [nn.Dropout(0.4), nn.Flatten(), nn.Dense(8, 2)]
        params = nn.build_model(spec, seed=0, in_channels=1, input_dims=(2, 2, 2))
        x = rng.normal(size=(1, 1, 2, 2, 2))

        def log_odds(probs):
            return float(np.log(probs[0, 0] / probs[0, 1]))

        eval_lo = log_odds(nn.forward(params, x, mode="eval").probs.data)
        samples = [
            log_odds(nn.forward(params, x, mode="train", seed=s).probs.data)
            for s in range(2000)
        ]
        sem = np.std(samples) / np.sqrt(len(samples))
        assert np.mean(samples) == pytest.approx(eval_lo, abs=max(4 * sem, 1e-3))

    def test_train_mode_deterministic_given_seed(self, rng):
        spec = nn.classifier_spec(input_dims=DIMS4, channels=(2, 3))
        params = nn.build_model(spec, seed=1, input_dims=DIMS4)
        x = rng.normal(size=(2, 1, *DIMS4))
        a = nn.forward(params, x, mode="train", seed=77, update_running=False).probs.data
        b = nn.forward(params, x, mode="train", seed=77, update_running=False).probs.data
        np.testing.assert_array_equal(a, b)


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path, rng):
        spec = nn.classifier_spec(input_dims=DIMS4, channels=(2, 3), dropout_rates=(0.5, 0.2))
        params = nn.build_model(spec, seed=13, input_dims=DIMS4)
        x = rng.normal(size=(2, 1, *DIMS4))
        nn.forward(params, x, mode="train")  # perturb running stats
        path = tmp_path / "model.jsmm"
        nn.save_model(params, path)
        back = nn.load_model(path)
        assert back.in_channels == params.in_channels
        assert back.input_dims == params.input_dims
        assert [type(l).__name__ for l in back.spec] == [type(l).__name__ for l in params.spec]
        assert back.tensors.keys() == params.tensors.keys()
        for key in params.tensors:
            np.testing.assert_array_equal(back.tensors[key], params.tensors[key])
        xq = rng.normal(size=(1, 1, *DIMS4))
        np.testing.assert_array_equal(
            nn.forward(back, xq, mode="eval").probs.data,
            nn.forward(params, xq, mode="eval").probs.data,
        )
