import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boostseg.grid import extract_block
from boostseg.net import (Batch, BatchSample, Network, NetworkError, NetworkSpec, PathwaySpec, StateError,
                          conv, count_params, cross_entropy, glorot_init, load_checkpoint, res_a, res_b,
                          save_checkpoint, softmax)

from gradcheck import GRAD_CASES, grad_check, make_batch

P = PathwaySpec


def spec_params(spec):
    """Independent parameter count straight from the layer list."""
    def pathway(pw, cin=1):
        n = 0
        for layer in pw.layers:
            if layer.kind == "conv":
                n += layer.features * (27 * cin + 1)
                cin = layer.features
            elif layer.kind == "res_a":
                n += 2 * cin * (27 * cin + 1)
            else:
                b = layer.bottleneck
                n += b * (cin + 1) + b * (27 * b + 1) + cin * (b + 1)
        return n, cin

    n, c = pathway(spec.native)
    if spec.low is not None:
        m, cl = pathway(spec.low)
        n, c = n + m, c + cl
    for w in [*spec.hidden, spec.num_classes]:
        n += w * (c + 1)
        c = w
    return n


class TestSpec:
    def test_geometry(self):
        s = NetworkSpec(P([conv(4), res_a(), res_b(2)]), P([conv(4), conv(4)]))
        assert s.native_patch == 1 + 2 + 4 + 2
        assert s.receptive_fields == {"native": 9, "low": 4 * 4 + 1}
        assert s.low_patch == 5

    def test_region_three_low_index(self):
        s = NetworkSpec(P([conv(2)]), P([conv(2)]), output_region=3)
        # offsets -1, 0, 1 all round to the same quarter-scale voxel
        assert list(s.low_index()) == [0, 0, 0]
        assert s.low_region == 1
        s5 = NetworkSpec(P([conv(2)]), P([conv(2)]), output_region=5)
        # d / 4 rounded half up: -2 -> 0, +2 -> 1
        assert list(s5.low_index()) == [0, 0, 0, 0, 1]
        assert s5.low_region == 3

    @pytest.mark.parametrize("kwargs", [
        dict(native=P([res_a()])),
        dict(native=P([])),
        dict(native=P([conv(2)]), output_region=2),
        dict(native=P([conv(2)]), num_classes=1),
        dict(native=P([conv(2)]), dropout=1.0),
        dict(native=P([conv(2), res_b(0)])),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(NetworkError):
            NetworkSpec(**kwargs)

    def test_dict_roundtrip(self):
        s = NetworkSpec(P([conv(4), res_b(2)]), P([conv(3)]), hidden=[5, 6], num_classes=4)
        assert NetworkSpec.from_dict(s.to_dict()) == s

    @pytest.mark.parametrize("spec", [c[0] for c in GRAD_CASES.values()]
                             + [NetworkSpec(P([conv(8), conv(8), conv(8), conv(8)]), P([conv(8), conv(8)]))])
    def test_param_count(self, spec):
        n = spec_params(spec)
        assert Network(spec).num_params == n
        assert count_params(spec) == n


class TestInit:
    def test_unit_limit(self):
        # hidden dense 3 -> 3 has fan_in + fan_out = 6, so the limit is sqrt(6/6) = 1
        spec = NetworkSpec(P([conv(3)]), hidden=[3])
        net = glorot_init(spec, 0)
        w = net.view(net.head[0].w)
        assert np.all(np.abs(w) <= 1.0) and np.abs(w).max() > 0.8

    def test_deterministic(self):
        spec = NetworkSpec(P([conv(4), res_a()]), P([conv(3)]))
        np.testing.assert_array_equal(glorot_init(spec, 5).weights, glorot_init(spec, 5).weights)
        assert not np.array_equal(glorot_init(spec, 5).weights, glorot_init(spec, 6).weights)

    def test_biases_zero(self):
        net = glorot_init(NetworkSpec(P([conv(4), res_b(2)]), hidden=[7]), 1)
        for p in net.param_list:
            if p.is_bias:
                assert not net.view(p).any()

    def test_variance(self):
        spec = NetworkSpec(P([conv(16), conv(24)]))
        net = glorot_init(spec, 0, np.float64)
        layer = net.native.layers[1]
        w = net.view(layer.w)
        assert w.size > 10_000
        expected = 2.0 / (16 * 27 + 24 * 27)
        assert abs(w.var() / expected - 1) < 0.1


class TestForward:
    def test_zero_logits_uniform(self):
        spec = NetworkSpec(P([conv(2)]), hidden=[])
        net = glorot_init(spec, 0)
        net.view(net.head[-1].w)[...] = 0
        p = net.forward(make_batch(spec, 4, np.random.default_rng(0)))
        np.testing.assert_allclose(p, 0.5)

    def test_eval_deterministic(self):
        spec = NetworkSpec(P([conv(3), res_a()]), P([conv(2)]), hidden=[5])
        net = glorot_init(spec, 0)
        b = make_batch(spec, 3, np.random.default_rng(1))
        np.testing.assert_array_equal(net.forward(b), net.forward(b))

    def test_hand_evaluated(self):
        # one 1-feature conv that copies the centre voxel, ReLU, then a 1 -> 2 linear softmax
        spec = NetworkSpec(P([conv(1)]), hidden=[], dropout=0.0)
        net = Network(spec, np.float64)
        k = np.zeros((1, 27))
        k[0, 13] = 1.0
        net.view(net.native.layers[0].w)[...] = k
        net.view(net.head[0].w)[...] = [[2.0], [-1.0]]
        net.view(net.head[0].b)[...] = [[0.5], [0.25]]
        x = np.zeros((2, 3, 3, 3))
        x[0, 1, 1, 1] = 0.7
        x[1, 1, 1, 1] = -0.4  # removed by the ReLU
        p = net.forward(Batch(x))[:, 0, 0, 0]
        z0 = np.array([2.0 * 0.7 + 0.5, -0.7 + 0.25])
        z1 = np.array([0.5, 0.25])
        np.testing.assert_allclose(p[0], np.exp(z0) / np.exp(z0).sum())
        np.testing.assert_allclose(p[1], np.exp(z1) / np.exp(z1).sum())

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(2, 4), st.sampled_from([1, 3]))
    def test_probabilities_sum_to_one(self, seed, K, R):
        spec = NetworkSpec(P([conv(2), res_b(1)]), P([conv(2)]), hidden=[3], num_classes=K, output_region=R)
        net = glorot_init(spec, seed)
        p = net.forward(make_batch(spec, 2, np.random.default_rng(seed), 3.0))
        assert p.shape == (2, R, R, R, K)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)

    def test_dropout_only_in_train(self):
        spec = NetworkSpec(P([conv(3)]), hidden=[8], dropout=0.5)
        net = glorot_init(spec, 0)
        b = make_batch(spec, 5, np.random.default_rng(0))
        a = net.forward(b, "train", np.random.default_rng(1))
        c = net.forward(b, "train", np.random.default_rng(2))
        assert not np.allclose(a, c)
        with pytest.raises(NetworkError):
            net.forward(b, "train")

    def test_inverted_dropout_scaling(self):
        # a linear head makes the logits linear in the dropped features, so the
        # average over many masks converges to the eval-mode logits
        spec = NetworkSpec(P([conv(6)]), hidden=[], dropout=0.5, num_classes=2)
        net = glorot_init(spec, 3, np.float64)
        b = make_batch(spec, 1, np.random.default_rng(0))
        rng = np.random.default_rng(1)

        def logit_gap(p):
            return np.log(p[..., 1] / p[..., 0]).ravel()

        train = np.mean([logit_gap(net.forward(b, "train", rng)) for _ in range(4000)], axis=0)
        np.testing.assert_allclose(train, logit_gap(net.forward(b)), atol=0.05)

    def test_zero_dropout_train_equals_eval(self):
        spec = NetworkSpec(P([conv(3), res_a()]), hidden=[4], dropout=0.0)
        net = glorot_init(spec, 0)
        b = make_batch(spec, 2, np.random.default_rng(0))
        np.testing.assert_array_equal(net.forward(b, "train"), net.forward(b, "eval"))

    def test_shape_mismatch(self):
        spec = NetworkSpec(P([conv(3)]), P([conv(2)]))
        net = glorot_init(spec, 0)
        with pytest.raises(NetworkError):
            net.forward(Batch(np.zeros((1, 5, 5, 5)), np.zeros((1, 3, 3, 3))))
        with pytest.raises(NetworkError):
            net.forward(Batch(np.zeros((1, 3, 3, 3)), None))
        with pytest.raises(NetworkError):
            net.forward(Batch(np.zeros((1, 3, 3, 3)), np.zeros((1, 3, 3, 3))), mode="test")

    def test_sample_list(self):
        spec = NetworkSpec(P([conv(2)]))
        net = glorot_init(spec, 0)
        rng = np.random.default_rng(0)
        samples = [BatchSample(rng.normal(size=(3, 3, 3))) for _ in range(3)]
        np.testing.assert_array_equal(net.forward(samples), net.forward(Batch(np.stack([s.native for s in samples]))))

    @pytest.mark.parametrize("block,crop", [(res_a(), 2), (res_b(2), 1)])
    def test_zero_residual_is_identity(self, block, crop):
        with_block = NetworkSpec(P([conv(3), block]), hidden=[4])
        plain = NetworkSpec(P([conv(3)]), hidden=[4])
        a = glorot_init(with_block, 0, np.float64)
        b = glorot_init(plain, 0, np.float64)
        for p in a.native.layers[1].params:
            a.view(p)[...] = 0
        for pa, pb in zip([*a.native.layers[0].params, *[q for d in a.head for q in d.params]],
                          [*b.native.layers[0].params, *[q for d in b.head for q in d.params]]):
            b.view(pb)[...] = a.view(pa)
        x = np.random.default_rng(0).normal(size=(3,) + (with_block.native_patch,) * 3)
        inner = x[:, crop:-crop, crop:-crop, crop:-crop]
        np.testing.assert_allclose(a.forward(Batch(x)), b.forward(Batch(inner)), atol=1e-12)


class TestLoss:
    @pytest.mark.parametrize("p,expected", [(1.0, 0.0), (0.5, 0.693147), (0.0, -np.log(1e-12))])
    def test_examples(self, p, expected):
        probs = np.array([[[[[1 - p, p]]]]])
        assert cross_entropy(probs, np.array([[[[1]]]])) == pytest.approx(expected, abs=1e-6)

    def test_batch_mean(self):
        probs = np.array([[0.0, 1.0], [0.5, 0.5]]).reshape(2, 1, 1, 1, 2)
        assert cross_entropy(probs, np.array([1, 0]).reshape(2, 1, 1, 1)) == pytest.approx(0.346574, abs=1e-6)

    def test_softmax_stable(self):
        z = np.array([1000.0, 1000.0, -1000.0])
        np.testing.assert_allclose(softmax(z), [0.5, 0.5, 0.0])


class TestBackward:
    @pytest.mark.parametrize("name", list(GRAD_CASES))
    def test_finite_differences(self, name):
        spec, seed, n = GRAD_CASES[name]
        count, kinks, err = grad_check(spec, seed, n)
        assert count <= 5000
        assert kinks == 0
        assert err < 1e-4

    def test_duplicated_batch_same_gradient(self):
        spec = NetworkSpec(P([conv(3), res_b(2)]), P([conv(2)]), hidden=[4], dropout=0.0, output_region=3)
        net = glorot_init(spec, 0, np.float64)
        rng = np.random.default_rng(0)
        b = make_batch(spec, 3, rng)
        t = rng.integers(0, 2, size=(3, 3, 3, 3))
        net.forward(b, "train")
        g1 = net.backward(t)
        b2 = Batch(np.concatenate([b.native] * 2), np.concatenate([b.low] * 2))
        net.forward(b2, "train")
        g2 = net.backward(np.concatenate([t, t]))
        np.testing.assert_allclose(g1, g2, atol=1e-10)

    def test_zero_input_zero_first_layer_gradient(self):
        spec = NetworkSpec(P([conv(3), conv(3)]), hidden=[4], dropout=0.0)
        net = glorot_init(spec, 0, np.float64)
        net.forward(Batch(np.zeros((2,) + (spec.native_patch,) * 3)), "train")
        g = net.backward(np.array([0, 1]).reshape(2, 1, 1, 1))
        first = net.native.layers[0]
        assert not g[first.w.offset:first.w.offset + first.w.size].any()

    def test_stale_cache(self):
        spec = NetworkSpec(P([conv(2)]), dropout=0.0)
        net = glorot_init(spec, 0)
        t = np.zeros((1, 1, 1, 1), dtype=int)
        with pytest.raises(StateError):
            net.backward(t)
        net.forward(make_batch(spec, 1, np.random.default_rng(0)), "train")
        net.backward(t)
        with pytest.raises(StateError):
            net.backward(t)
        net.forward(make_batch(spec, 1, np.random.default_rng(0)), "eval")
        with pytest.raises(StateError):
            net.backward(t)

    def test_gradient_length(self):
        spec = NetworkSpec(P([conv(2)]), P([conv(2)]), dropout=0.5)
        net = glorot_init(spec, 0)
        net.forward(make_batch(spec, 2, np.random.default_rng(0)), "train", np.random.default_rng(0))
        assert net.backward(np.zeros((2, 1, 1, 1), dtype=int)).shape == net.weights.shape


class TestDenseInference:
    @pytest.mark.parametrize("spec", [
        NetworkSpec(P([conv(3), res_a()])),
        NetworkSpec(P([conv(3), res_b(2)]), P([conv(2), conv(2)]), hidden=[4], num_classes=3),
    ])
    def test_matches_per_voxel_patches(self, spec):
        net = glorot_init(spec, 0, np.float64)
        data = np.random.default_rng(0).normal(size=(9, 10, 7))
        dense = net.predict_dense(data, slab=4)
        centers = list(np.ndindex(*data.shape))
        native = np.stack([extract_block(data, c, spec.native_patch, 1) for c in centers])
        low = None
        if spec.low is not None:
            low = np.stack([extract_block(data, c, spec.low_patch, 4) for c in centers])
        per_voxel = net.forward(Batch(native, low))[:, 0, 0, 0]
        np.testing.assert_allclose(dense.reshape(-1, spec.num_classes), per_voxel, atol=1e-12)

    def test_large_volume_chunked_path(self):
        spec = NetworkSpec(P([conv(4), conv(4)]), P([conv(3)]))
        net = glorot_init(spec, 0, np.float64)
        data = np.random.default_rng(0).normal(size=(40, 41, 42))
        dense = net.predict_dense(data)
        rng = np.random.default_rng(1)
        centers = [tuple(rng.integers(0, n) for n in data.shape) for _ in range(50)]
        native = np.stack([extract_block(data, c, spec.native_patch, 1) for c in centers])
        low = np.stack([extract_block(data, c, spec.low_patch, 4) for c in centers])
        expected = net.forward(Batch(native, low))[:, 0, 0, 0]
        np.testing.assert_allclose(np.stack([dense[c] for c in centers]), expected, atol=1e-12)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        spec = NetworkSpec(P([conv(3), res_a(), res_b(2)]), P([conv(2)]), hidden=[5], num_classes=3)
        net = glorot_init(spec, 0)
        vel = np.random.default_rng(0).normal(size=net.num_params).astype(np.float32)
        save_checkpoint(tmp_path / "a.ckpt", net, vel, {"epoch": 7})
        net2, vel2, extra = load_checkpoint(tmp_path / "a.ckpt")
        assert extra == {"epoch": 7}
        np.testing.assert_array_equal(net2.weights, net.weights)
        np.testing.assert_array_equal(vel2, vel)
        save_checkpoint(tmp_path / "b.ckpt", net2, vel2, extra)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"garbage" * 4)
        with pytest.raises(NetworkError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_decay_mask_exempts_classifier(self):
        spec = NetworkSpec(P([conv(2)]), hidden=[3])
        net = Network(spec)
        mask = net.decay_mask()
        last = net.head[-1]
        assert not mask[last.w.offset:last.b.offset + last.b.size].any()
        assert mask[:last.w.offset].all()
