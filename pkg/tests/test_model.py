import dataclasses

import numpy as np
import pytest

from protonet import model as M
from protonet import tensor as T
from protonet.tensor import ShapeError, Tensor


@pytest.fixture(scope="module")
def mnist_cfg():
    return M.preset("mnist")


@pytest.fixture(scope="module")
def mnist_params(mnist_cfg):
    return M.init_params(mnist_cfg, seed=0)


class TestPresets:
    def test_mnist_encoder_shapes(self, mnist_cfg):
        shapes = M._encoder_shapes(mnist_cfg.input_shape, mnist_cfg.encoder_layers)
        assert shapes == [(14, 14, 32), (7, 7, 32), (4, 4, 32), (2, 2, 10)]
        assert mnist_cfg.latent_dim == 40

    def test_car_encoder_shapes(self):
        cfg = M.preset("car")
        shapes = M._encoder_shapes(cfg.input_shape, cfg.encoder_layers)
        assert shapes == [(30, 30, 32), (13, 13, 10)]
        assert cfg.latent_dim == 1690
        assert cfg.n_prototypes == 11 and cfg.n_classes == 11

    def test_car_activations(self):
        cfg = M.preset("car")
        assert [ls.activation for ls in cfg.encoder_layers] == ["leaky_relu", "sigmoid"]
        assert [ls.activation for ls in cfg.decoder_layers] == ["leaky_relu", "sigmoid"]

    def test_fashion_matches_mnist_architecture(self, mnist_cfg):
        fashion = M.preset("fashion")
        assert fashion.encoder_layers == mnist_cfg.encoder_layers
        assert fashion.latent_dim == mnist_cfg.latent_dim

    def test_ablate_proto(self):
        cfg = M.preset("ablate_proto")
        assert cfg.head_mode == "dense_ablation"
        assert cfg.autoencoder_enabled
        assert cfg.n_prototypes == 15

    def test_ablate_all(self):
        cfg = M.preset("ablate_all")
        assert cfg.head_mode == "dense_ablation"
        assert not cfg.autoencoder_enabled
        assert all(ls.activation == "relu" for ls in cfg.encoder_layers)

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            M.preset("resnet")

    def test_decoder_mirrors_encoder_input_shapes(self, mnist_cfg):
        targets = [(ls.out_h, ls.out_w) for ls in mnist_cfg.decoder_layers]
        assert targets == [(4, 4), (7, 7), (14, 14), (28, 28)]


class TestInitParams:
    def test_prototypes_in_unit_hypercube(self, mnist_params):
        p = mnist_params.prototypes.data
        assert p.shape == (15, 40)
        assert (p > 0).all() and (p < 1).all()

    def test_negative_identity_w(self):
        cfg = dataclasses.replace(M.preset("mnist"), w_mode="negative_identity",
                                  n_prototypes=10)
        params = M.init_params(cfg, 0)
        np.testing.assert_array_equal(params.classifier.data, -np.eye(10))
        assert not params.classifier.requires_grad

    def test_same_seed_bit_identical(self, mnist_cfg):
        a = M.init_params(mnist_cfg, 7)
        b = M.init_params(mnist_cfg, 7)
        for x, y in zip(a.named().values(), b.named().values()):
            np.testing.assert_array_equal(x.data, y.data)

    def test_learned_w_small(self, mnist_params):
        assert np.abs(mnist_params.classifier.data).max() <= 0.01
        assert mnist_params.classifier.requires_grad


class TestForward:
    def test_probability_rows_sum_to_one(self, mnist_params, mnist_cfg, rng):
        batch = rng.uniform(size=(4, 28, 28, 1))
        trace = M.forward(mnist_params, mnist_cfg, batch)
        np.testing.assert_allclose(trace.probabilities.numpy().sum(axis=1), 1.0, atol=1e-10)
        assert (trace.distances.numpy() >= 0).all()

    def test_negid_zero_distance_prototype_wins(self):
        cfg = dataclasses.replace(M.preset("mnist"), w_mode="negative_identity",
                                  n_prototypes=10)
        params = M.init_params(cfg, 3)
        batch = np.random.default_rng(0).uniform(size=(1, 28, 28, 1))
        z = M.encode(params, cfg, batch).numpy()
        params.prototypes.data[4] = z[0]  # prototype 4 coincides with the encoding
        trace = M.forward(params, cfg, batch)
        logits = trace.logits.numpy()[0]
        assert logits[4] == pytest.approx(0.0, abs=1e-12)
        assert (np.delete(logits, 4) < 0).all()
        assert np.argmax(logits) == 4

    def test_matches_independent_composition(self, mnist_params, mnist_cfg, rng):
        batch = rng.uniform(size=(2, 28, 28, 1))
        trace = M.forward(mnist_params, mnist_cfg, batch)
        # rebuild from individual ops
        t = Tensor(batch)
        for ls, k, b in zip(mnist_cfg.encoder_layers, mnist_params.enc_kernels,
                            mnist_params.enc_biases):
            t = T.sigmoid(T.conv2d(t, k, b, ls.conv))
        z = t.numpy().reshape(2, 40)
        np.testing.assert_allclose(trace.z.numpy(), z, atol=1e-12)
        d = np.array([[((zi - pj) ** 2).sum() for pj in mnist_params.prototypes.data]
                      for zi in z])
        np.testing.assert_allclose(trace.distances.numpy(), d, atol=1e-10)
        logits = d @ mnist_params.classifier.data.T
        np.testing.assert_allclose(trace.logits.numpy(), logits, atol=1e-8)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        np.testing.assert_allclose(trace.probabilities.numpy(),
                                   e / e.sum(axis=1, keepdims=True), atol=1e-12)

    def test_batch_order_equivariance(self, mnist_params, mnist_cfg, rng):
        batch = rng.uniform(size=(5, 28, 28, 1))
        perm = rng.permutation(5)
        a = M.forward(mnist_params, mnist_cfg, batch)
        b = M.forward(mnist_params, mnist_cfg, batch[perm])
        np.testing.assert_allclose(a.probabilities.numpy()[perm],
                                   b.probabilities.numpy(), atol=1e-12)

    def test_shape_mismatch(self, mnist_params, mnist_cfg, rng):
        with pytest.raises(ShapeError):
            M.forward(mnist_params, mnist_cfg, rng.uniform(size=(1, 27, 28, 1)))

    def test_encoder_output_in_unit_hypercube(self, mnist_params, mnist_cfg, rng):
        z = M.encode(mnist_params, mnist_cfg, rng.uniform(size=(3, 28, 28, 1))).numpy()
        assert (z > 0).all() and (z < 1).all()

    def test_dense_ablation_head(self, rng):
        cfg = M.preset("ablate_all")
        params = M.init_params(cfg, 1)
        trace = M.forward(params, cfg, rng.uniform(size=(3, 28, 28, 1)))
        assert trace.distances is None
        assert trace.reconstruction is None
        np.testing.assert_allclose(trace.probabilities.numpy().sum(axis=1), 1.0, atol=1e-10)


class TestDecode:
    def test_prototype_decode_shape_and_range(self, mnist_params, mnist_cfg):
        imgs = M.decode_prototypes(mnist_params, mnist_cfg)
        assert imgs.shape == (15, 28, 28, 1)
        assert (imgs > 0).all() and (imgs < 1).all()

    def test_decode_of_encoding_equals_reconstruction(self, mnist_params, mnist_cfg, rng):
        batch = rng.uniform(size=(2, 28, 28, 1))
        trace = M.forward(mnist_params, mnist_cfg, batch)
        again = M.decode(mnist_params, mnist_cfg, Tensor(trace.z.numpy()))
        np.testing.assert_array_equal(again.numpy(), trace.reconstruction.numpy())

    def test_decode_without_autoencoder_rejected(self):
        cfg = M.preset("ablate_all")
        params = M.init_params(cfg, 0)
        with pytest.raises(ValueError):
            M.decode(params, cfg, Tensor(np.zeros((1, 40))))

    @pytest.mark.parametrize("name", ["mnist", "car", "ablate_proto"])
    def test_shape_round_trip(self, name, rng):
        cfg = M.preset(name)
        params = M.init_params(cfg, 0)
        h, w, c = cfg.input_shape
        batch = rng.uniform(size=(2, h, w, c))
        trace = M.forward(params, cfg, batch)
        assert trace.reconstruction.shape == batch.shape


class TestPredict:
    def test_negid_equals_argmin_distance(self, rng):
        cfg = dataclasses.replace(M.preset("mnist"), w_mode="negative_identity",
                                  n_prototypes=10)
        params = M.init_params(cfg, 5)
        batch = rng.uniform(size=(20, 28, 28, 1))
        preds = M.predict(params, cfg, batch)
        d = M.forward(params, cfg, batch).distances.numpy()
        np.testing.assert_array_equal(preds, np.argmin(d, axis=1))

    def test_tie_breaks_to_lowest_index(self):
        # uniform probabilities arise from equal logits
        assert int(np.argmax(np.full(10, 0.1))) == 0

    def test_monotone_rescaling_invariance(self, mnist_params, mnist_cfg, rng):
        batch = rng.uniform(size=(4, 28, 28, 1))
        probs = M.forward(mnist_params, mnist_cfg, batch).probabilities.numpy()
        assert (np.argmax(probs, axis=1) == np.argmax(probs ** 3 * 2.0, axis=1)).all()


class TestConfigSerialization:
    @pytest.mark.parametrize("name", ["mnist", "car", "ablate_proto", "ablate_all"])
    def test_round_trip(self, name):
        cfg = M.preset(name)
        assert M.config_from_dict(M.config_to_dict(cfg)) == cfg

    def test_negid_requires_m_equals_k(self):
        with pytest.raises(ValueError):
            dataclasses.replace(M.preset("mnist"), w_mode="negative_identity")
