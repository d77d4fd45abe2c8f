import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coupled_reid.errors import CacheMismatch, NonFiniteInput, ShapeMismatch
from coupled_reid.gradcheck import check_dnet_backward, check_encoder
from coupled_reid.models import (
    AdamState,
    ClassifierHead,
    DiscriminatorModel,
    EncoderModel,
    adam_step,
    classifier_backward,
    classifier_forward,
    dnet_backward,
    dnet_forward,
    encoder_backward,
    encoder_forward,
    load_checkpoint,
    normalize_backward,
    save_checkpoint,
)
from coupled_reid.objectives import dim_loss, finite_diff_check


def _flat_check(model, x, readout):
    """FD check of a linear readout of the encoder output, w.r.t. every parameter."""
    keys = list(model.params)
    shapes = [model.params[k].shape for k in keys]
    sizes = [model.params[k].size for k in keys]

    def f(theta):
        probe = model.copy()
        for k, chunk, shape in zip(keys, np.split(theta, np.cumsum(sizes)[:-1]), shapes):
            probe.params[k] = chunk.reshape(shape)
        feats, cache = encoder_forward(probe, x)
        grads = encoder_backward(probe, cache, readout)
        return float(np.sum(feats * readout)), np.concatenate([grads[k].ravel() for k in keys])
    return finite_diff_check(f, np.concatenate([model.params[k].ravel() for k in keys]))


class TestEncoder:
    def test_unit_norm(self, rng):
        model = EncoderModel(8, (16,), 4, rng=0)
        feats, _ = encoder_forward(model, rng.normal(size=(10, 8)))
        np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-12)

    def test_zero_output_guarded(self, rng):
        model = EncoderModel(3, (4,), 2, rng=0)
        model.params["W1"][:] = 0
        model.params["b1"][:] = 0
        feats, cache = encoder_forward(model, rng.normal(size=(2, 3)))
        assert not feats.any()
        grads = encoder_backward(model, cache, np.ones((2, 2)))
        assert all(np.all(np.isfinite(g)) for g in grads.values())

    def test_batch_independent(self, rng):
        model = EncoderModel(5, (7,), 3, rng=1)
        x = rng.normal(size=(6, 5))
        full, _ = encoder_forward(model, x)
        for i in range(6):
            np.testing.assert_allclose(encoder_forward(model, x[i])[0][0], full[i], atol=1e-15)

    def test_hand_forward(self):
        model = EncoderModel(2, (2,), 2, rng=0)
        model.params.update(W0=np.array([[1.0, -1.0], [0.0, 2.0]]), b0=np.array([0.0, -1.0]),
                            W1=np.array([[3.0, 0.0], [0.0, 4.0]]), b1=np.zeros(2))
        # hidden relu([1, -1 + 2 - 1]) = [1, 0] -> [3, 0] -> [1, 0]
        feats, _ = encoder_forward(model, [[1.0, 1.0]])
        np.testing.assert_allclose(feats, [[1.0, 0.0]], atol=1e-12)
        feats, _ = encoder_forward(model, [[1.0, 2.0]])
        # hidden relu([1, -1 + 4 - 1]) = [1, 2] -> [3, 8] / sqrt(73)
        np.testing.assert_allclose(feats, [[3 / np.sqrt(73), 8 / np.sqrt(73)]], atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_difference_tiny(self, seed):
        rng = np.random.default_rng(seed)
        model = EncoderModel(3, (4,), 2, rng=seed)
        assert _flat_check(model, rng.normal(size=(5, 3)), rng.normal(size=(5, 2))).passed

    def test_finite_difference_suite(self, rng):
        assert check_encoder(rng, 1e-5).passed

    def test_zero_upstream(self, rng):
        model = EncoderModel(4, (5,), 3, rng=0)
        _, cache = encoder_forward(model, rng.normal(size=(3, 4)))
        grads, gx = encoder_backward(model, cache, np.zeros((3, 3)), return_input_grad=True)
        assert not any(g.any() for g in grads.values()) and not gx.any()

    @given(st.integers(0, 10_000))
    def test_normalize_gradient_orthogonal(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(4, 6))
        norm = np.linalg.norm(z, axis=1, keepdims=True)
        g = normalize_backward(z, norm, rng.normal(size=(4, 6)))
        np.testing.assert_allclose(np.sum(g * z, axis=1), 0.0, atol=1e-10)

    def test_errors(self, rng):
        model = EncoderModel(4, (5,), 3, rng=0)
        with pytest.raises(NonFiniteInput):
            encoder_forward(model, [[np.nan, 0, 0, 0]])
        with pytest.raises(ShapeMismatch):
            encoder_forward(model, np.zeros((2, 5)))
        _, cache = encoder_forward(model, rng.normal(size=(2, 4)))
        with pytest.raises(CacheMismatch):
            encoder_backward(EncoderModel(4, (5,), 3, rng=0), cache, np.zeros((2, 3)))
        with pytest.raises(CacheMismatch):
            encoder_backward(model, cache, np.zeros((3, 3)))


class TestDiscriminator:
    def _model(self):
        model = DiscriminatorModel(2, 2, rng=0)
        model.params.update(W1=np.array([[1.0, -1.0], [2.0, 0.0]]), b1=np.array([0.0, 0.5]),
                            W2=np.array([[0.5], [2.0]]), b2=np.array([0.1]))
        return model

    def test_hand_arithmetic(self):
        # z = [1 + 4, -1 + 0.5] = [5, -0.5] -> h = [5, 0] -> 2.5 + 0.1
        scores, _ = dnet_forward(self._model(), [[1.0, 2.0]])
        assert scores[0] == pytest.approx(2.6, abs=1e-15)

    def test_dead_relu(self):
        model = self._model()
        scores, cache = dnet_forward(model, [[1.0, 2.0]])
        grads, gf = dnet_backward(model, cache, [1.0])
        assert not grads["W1"][:, 1].any() and grads["b1"][1] == 0
        np.testing.assert_allclose(gf, [[0.5, 1.0]])

    def test_finite_difference(self, rng):
        assert check_dnet_backward(rng, 1e-5).passed

    def test_cache_mismatch(self):
        model = self._model()
        _, cache = dnet_forward(model, [[1.0, 2.0]])
        with pytest.raises(CacheMismatch):
            dnet_backward(model, cache, [1.0, 2.0])

    def test_dim_step_decreases_loss(self, rng):
        """A small step along the encoder-side DIM gradient lowers the DIM loss."""
        enc = EncoderModel(6, (8,), 4, rng=3)
        dnet = DiscriminatorModel(4, 8, rng=4)
        xs, xt = rng.normal(size=(10, 6)), rng.normal(1.0, 1.0, size=(10, 6))

        def loss_and_grad(model):
            fs, cs = encoder_forward(model, xs)
            ft, ct = encoder_forward(model, xt)
            ss, dcs = dnet_forward(dnet, fs)
            st_, dct = dnet_forward(dnet, ft)
            r = dim_loss(ss, st_)
            gs = encoder_backward(model, cs, dnet_backward(dnet, dcs, r.grads["scores_src"])[1])
            gt = encoder_backward(model, ct, dnet_backward(dnet, dct, r.grads["scores_tgt"])[1])
            return r.value, {k: gs[k] + gt[k] for k in gs}

        before, grads = loss_and_grad(enc)
        if before < 1e-12:
            pytest.skip("already at optimum")
        stepped = enc.copy()
        for k in stepped.params:
            stepped.params[k] -= 1e-3 * grads[k]
        assert loss_and_grad(stepped)[0] < before


class TestClassifier:
    def test_forward_backward(self, rng):
        head = ClassifierHead(3, 4, rng=0)
        f = rng.normal(size=(2, 3))
        logits, cache = classifier_forward(head, f)
        np.testing.assert_allclose(logits, f @ head.params["W"])
        g = rng.normal(size=(2, 4))
        grads, gf = classifier_backward(head, cache, g)
        np.testing.assert_allclose(grads["W"], f.T @ g)
        np.testing.assert_allclose(gf, g @ head.params["W"].T)


class TestAdam:
    def test_first_step_is_lr(self):
        params = {"w": np.array([1.0, -2.0])}
        adam_step(params, {"w": np.array([0.3, -5.0])}, AdamState(lr=0.01))
        np.testing.assert_allclose(params["w"], [0.99, -1.99], atol=1e-8)

    def test_zero_gradient(self):
        params = {"w": np.array([1.0, -2.0])}
        adam_step(params, {"w": np.zeros(2)}, AdamState(lr=0.01))
        assert np.array_equal(params["w"], [1.0, -2.0])

    def test_two_steps_unrolled(self):
        params = {"w": np.array([0.0])}
        state = AdamState(lr=0.1)
        adam_step(params, {"w": np.array([1.0])}, state)
        adam_step(params, {"w": np.array([-1.0])}, state)
        m = 0.9 * 0.1 + 0.1 * -1.0
        v = 0.999 * 0.001 + 0.001
        step2 = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        first = 0.1 * 1.0 / (1.0 + 1e-8)
        assert params["w"][0] == pytest.approx(-first - step2, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())
        with pytest.raises(ShapeMismatch):
            adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, AdamState())


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        enc, dnet = EncoderModel(3, (4,), 2, rng=0), DiscriminatorModel(2, 3, rng=1)
        save_checkpoint(tmp_path / "m.ckpt", {"encoder": enc, "dnet": dnet})
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        for name, model in (("encoder", enc), ("dnet", dnet)):
            assert set(loaded[name]) == set(model.params)
            for k, v in model.params.items():
                assert np.array_equal(loaded[name][k], v)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE" + b"\0" * 8)
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.ckpt")
