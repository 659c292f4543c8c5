import numpy as np
import pytest

import nfem.autodiff as ad
from nfem.checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from nfem.unet import (
    ParamStore,
    UNetConfig,
    build,
    layer_plan,
    parameter_count,
    variational_layer_names,
)


def tiny_config(mode="deterministic", **kw):
    defaults = dict(dim=2, grid_shape=(4, 4), mode=mode, levels=2, base_channels=4)
    defaults.update(kw)
    return UNetConfig(**defaults)


class TestConfig:
    def test_beam2d_level_extents(self):
        cfg = UNetConfig(dim=2, grid_shape=(16, 4), levels=3, base_channels=32)
        assert cfg.padded_shape == (20, 8)
        # pooling halves twice: 20x8 -> 10x4 -> 5x2
        extents = [cfg.padded_shape]
        for _ in range(cfg.levels - 1):
            extents.append(tuple(n // 2 for n in extents[-1]))
        assert extents == [(20, 8), (10, 4), (5, 2)]

    def test_beam3d_level_extents(self):
        cfg = UNetConfig(dim=3, grid_shape=(28, 12, 12))
        assert cfg.levels == 4 and cfg.base_channels == 64
        assert cfg.padded_shape == (32, 16, 16)
        e = cfg.padded_shape
        for _ in range(3):
            e = tuple(n // 2 for n in e)
        assert e == (4, 2, 2)

    def test_dimension_defaults(self):
        assert UNetConfig(dim=2, grid_shape=(16, 4)).base_channels == 128
        assert UNetConfig(dim=2, grid_shape=(16, 4)).levels == 3

    def test_divisibility_enforced(self):
        with pytest.raises(ValueError, match="divisible"):
            UNetConfig(dim=2, grid_shape=(15, 4), levels=3)

    def test_output_channels_by_mode(self):
        assert tiny_config("deterministic").out_channels == 2
        assert tiny_config("mle").out_channels == 4
        assert tiny_config("vb").out_channels == 4

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError):
            tiny_config("bayes")


class TestBuild:
    def test_same_seed_identical_store(self):
        a = build(tiny_config(), seed=3)
        b = build(tiny_config(), seed=3)
        for name, arr in a.store.arrays().items():
            np.testing.assert_array_equal(arr, b.store.arrays()[name])

    def test_different_seed_differs(self):
        a = build(tiny_config(), seed=3)
        b = build(tiny_config(), seed=4)
        assert any(
            not np.array_equal(arr, b.store.arrays()[n])
            for n, arr in a.store.arrays().items()
        )

    def test_parameter_count_matches_built_model(self):
        for mode in ("deterministic", "vb"):
            cfg = tiny_config(mode)
            assert parameter_count(cfg) == build(cfg, 0).n_parameters()

    def test_vb_layers_are_half_of_convolutions(self):
        for levels, grid in ((2, (4, 4)), (3, (16, 4))):
            cfg = UNetConfig(dim=2, grid_shape=grid, mode="vb", levels=levels,
                             base_channels=4)
            convs = [s for s in layer_plan(cfg) if s.kind == "conv"]
            vb_names = variational_layer_names(cfg)
            assert len(vb_names) == int(np.ceil(len(convs) / 2))
            # The second convolution of each level is the stochastic one.
            assert all(name.endswith(".conv2") for name in vb_names)

    def test_deterministic_3d_smaller_than_dense_layer(self):
        # The full-resolution 3D configuration stays under the parameter
        # count of one dense 12096 -> 12096 layer.
        cfg = UNetConfig(dim=3, grid_shape=(28, 12, 12))
        assert cfg.base_channels == 64 and cfg.levels == 4
        assert parameter_count(cfg) < 146.3e6

    def test_constant_channel_variant_counts(self):
        counts = [
            parameter_count(tiny_config(base_channels=c, constant_channels=True))
            for c in (4, 8, 16)
        ]
        assert counts == sorted(counts) and counts[0] < counts[-1]


class TestForward:
    def test_zero_weights_give_zero_output(self):
        model = build(tiny_config(), seed=0)
        for name, p in model.store.params.items():
            p.values = np.zeros_like(p.values)
        rng = np.random.default_rng(0)
        out = model.forward_det(rng.standard_normal((4, 4, 2)))
        np.testing.assert_array_equal(out, 0.0)

    def test_output_shape_matches_input(self):
        model = build(tiny_config(), seed=1)
        f = np.random.default_rng(1).standard_normal((3, 4, 4, 2))
        out, _ = model.forward(ad.Tape(), f, train=False)
        assert out.values.shape == (3, 4, 4, 2)

    def test_3d_forward_shape(self):
        cfg = UNetConfig(dim=3, grid_shape=(4, 4, 2), levels=2, base_channels=2)
        model = build(cfg, seed=2)
        f = np.random.default_rng(2).standard_normal((2, 4, 4, 2, 3))
        out, _ = model.forward(ad.Tape(), f, train=True)
        assert out.values.shape == (2, 4, 4, 2, 3)

    def test_forward_det_requires_deterministic(self):
        model = build(tiny_config("mle"), seed=0)
        with pytest.raises(ValueError):
            model.forward_det(np.zeros((4, 4, 2)))

    def test_forward_prob_requires_probabilistic(self):
        model = build(tiny_config(), seed=0)
        with pytest.raises(ValueError):
            model.forward_prob(np.zeros((4, 4, 2)))

    def test_shape_mismatch_rejected(self):
        model = build(tiny_config(), seed=0)
        with pytest.raises(ValueError):
            model.forward_det(np.zeros((5, 4, 2)))

    def test_inference_is_pure(self):
        model = build(tiny_config(), seed=5)
        f = np.random.default_rng(3).standard_normal((4, 4, 2))
        a = model.forward_det(f)
        b = model.forward_det(f)
        assert a.tobytes() == b.tobytes()


class TestStochasticForward:
    def test_vb_same_seed_identical(self):
        model = build(tiny_config("vb"), seed=7)
        f = np.random.default_rng(4).standard_normal((4, 4, 2))
        mu1, rho1 = model.forward_prob(f, np.random.default_rng(11))
        mu2, rho2 = model.forward_prob(f, np.random.default_rng(11))
        assert mu1.tobytes() == mu2.tobytes()
        assert rho1.tobytes() == rho2.tobytes()

    def test_vb_fresh_draws_differ(self):
        model = build(tiny_config("vb"), seed=7)
        f = np.random.default_rng(4).standard_normal((4, 4, 2))
        mu1, _ = model.forward_prob(f, np.random.default_rng(11))
        mu2, _ = model.forward_prob(f, np.random.default_rng(12))
        assert not np.array_equal(mu1, mu2)

    def test_zero_posterior_spread_removes_weight_noise(self):
        model = build(tiny_config("vb"), seed=7)
        for name in variational_layer_names(model.config):
            model.store.params[f"{name}.rho_w"].values = np.full_like(
                model.store.params[f"{name}.rho_w"].values, -60.0
            )
        f = np.random.default_rng(4).standard_normal((4, 4, 2))
        mu1, _ = model.forward_prob(f, np.random.default_rng(1))
        mu2, _ = model.forward_prob(f, np.random.default_rng(2))
        np.testing.assert_allclose(mu1, mu2, atol=1e-12)

    def test_mle_ignores_rng(self):
        model = build(tiny_config("mle"), seed=7)
        f = np.random.default_rng(4).standard_normal((4, 4, 2))
        mu1, rho1 = model.forward_prob(f)
        mu2, rho2 = model.forward_prob(f)
        assert mu1.tobytes() == mu2.tobytes()

    def test_mc_mean_stabilizes(self):
        # Standard error of the pass mean falls well below the pass spread.
        model = build(tiny_config("vb"), seed=9)
        f = np.random.default_rng(5).standard_normal((4, 4, 2))
        draws = np.stack([
            model.forward_prob(f, np.random.default_rng([42, t]))[0] for t in range(300)
        ])
        std = draws.std(axis=0, ddof=1)
        stderr = std / np.sqrt(300)
        active = std > 1e-12
        assert np.all(stderr[active] < 0.1 * std[active])


class TestGradFlow:
    def test_composed_net_gradcheck(self):
        # FD check of d(loss)/d(weights) through the full net on a sample of
        # weights from several layers.
        model = build(tiny_config(), seed=13)
        f = np.random.default_rng(6).standard_normal((2, 4, 4, 2))
        target = np.random.default_rng(7).standard_normal((2, 4, 4, 2))

        def loss_value():
            tape = ad.Tape()
            out, _ = model.forward(tape, f, train=True)
            diff = ad.sub(tape, out, ad.leaf(target))
            return tape, ad.sum_all(tape, ad.mul(tape, diff, diff))

        tape, loss = loss_value()
        ad.backward(tape, loss)
        rng = np.random.default_rng(8)
        names = ["enc0.conv1.k", "enc1.conv2.k", "dec0.conv1.k", "head.conv.k",
                 "enc0.bn1.gamma", "dec0.conv2.b"]
        picks = []
        for name in names:
            p = model.store.params[name]
            idx = tuple(rng.integers(s) for s in p.values.shape)
            picks.append((name, idx, p.node.grad[idx]))
        for q in model.store.params.values():
            q.node.grad = None
        h = 1e-6
        for name, idx, got in picks:
            p = model.store.params[name]
            orig = p.values[idx]
            p.node.values[idx] = orig + h
            _, lp = loss_value()
            p.node.values[idx] = orig - h
            _, lm = loss_value()
            p.node.values[idx] = orig
            fd = (float(lp.values) - float(lm.values)) / (2 * h)
            assert got == pytest.approx(fd, rel=1e-5, abs=1e-7)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = build(tiny_config("vb"), seed=21)
        # Dirty the running stats so buffers are exercised too.
        model.store.buffers["enc0.bn1.running_mean"][:] = 0.25
        p = tmp_path / "w.nfemw"
        save_checkpoint(model, p)
        restored = load_checkpoint(p)
        assert restored.config == model.config
        for name, arr in model.store.arrays().items():
            np.testing.assert_array_equal(arr, restored.store.arrays()[name])
        p2 = tmp_path / "w2.nfemw"
        save_checkpoint(restored, p2)
        assert p.read_bytes() == p2.read_bytes()

    def test_corruption_detected(self, tmp_path):
        model = build(tiny_config(), seed=21)
        p = tmp_path / "w.nfemw"
        save_checkpoint(model, p)
        blob = bytearray(p.read_bytes())
        blob[50] ^= 0x01
        p.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "w.nfemw"
        p.write_bytes(b"whatever")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(p)


class TestParamStore:
    def test_duplicate_rejected(self):
        store = ParamStore()
        store.add_param("a", np.zeros(2))
        with pytest.raises(ValueError):
            store.add_param("a", np.zeros(2))

    def test_load_arrays_validates_names_and_shapes(self):
        model = build(tiny_config(), seed=0)
        arrays = model.store.arrays()
        bad = {k: v for k, v in arrays.items() if k != "head.conv.b"}
        with pytest.raises(ValueError):
            model.store.load_arrays(bad)
