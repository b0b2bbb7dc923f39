"""Network structure: parameter budget against an independent counting
oracle, head contracts, cast predictor, and re-parameterization."""

import numpy as np
import pytest

from unitmod import checkpoint, net
from unitmod import tensor as T
from unitmod.errors import ConfigError, ContractError, DimensionError
from unitmod.tensor import Tensor


def param_count_oracle(cs1, cs2, kernels):
    """Count from layer shapes alone; independent of the module tree."""
    def conv(cin, cout, k, groups=1, bias=False):
        return cout * (cin // groups) * k * k + (cout if bias else 0)

    def gn(c):
        return 2 * c

    total = conv(3, cs1, 3) + gn(cs1) + conv(cs1, cs2, 3) + gn(cs2)
    for k in kernels:
        total += conv(cs2, cs2, 1) + gn(cs2)                     # entry 1x1
        total += conv(cs2, cs2, k, groups=cs2) + gn(cs2)         # big branch
        total += conv(cs2, cs2, 3, groups=cs2) + gn(cs2)         # small branch
        total += conv(cs2, cs2, 1) + gn(cs2)                     # exit 1x1
    total += conv(cs2, cs2, 3) + gn(cs2)                         # head conv 1
    total += conv(cs2, 3, 3, bias=True)                          # head conv 2
    return total


def make_module(seed=0, **cfg_kwargs):
    cfg = net.UnitModuleConfig(**cfg_kwargs)
    return net.UnitModule(cfg, np.random.default_rng(seed))


def rand_image(rng, n=1, hw=16):
    return Tensor(rng.uniform(0, 1, size=(n, 3, hw, hw)).astype(np.float32))


class TestParameterBudget:
    def test_inference_count_matches_oracle(self):
        m = make_module()
        oracle = param_count_oracle(32, 32, (9, 9))
        assert m.inference_parameter_count() == oracle
        assert oracle == 30723
        assert 29_000 <= oracle <= 33_000

    def test_other_architectures(self):
        for cs, ks in [((32, 64), (9, 9)), ((32, 16), (9, 9)), ((32, 32), (5, 5))]:
            m = make_module(stem_channels=cs, lk_kernels=ks)
            assert m.inference_parameter_count() == param_count_oracle(cs[0], cs[1], ks)

    def test_merged_count_not_larger(self):
        m = make_module()
        merged = m.reparameterize()
        assert merged.parameter_count() <= m.inference_parameter_count()


class TestBackboneAndHead:
    def test_feature_shape(self):
        m = make_module()
        rng = np.random.default_rng(1)
        feats = m.features(rand_image(rng, n=2, hw=32))
        assert feats.shape == (2, 32, 8, 8)

    def test_zero_input_zero_stem_activations(self):
        m = make_module()
        x = Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32))
        h = x
        for layer in m.stem:
            h = layer(h).relu()
        np.testing.assert_allclose(h.data, 0.0, atol=1e-6)

    def test_transmission_contract(self):
        m = make_module()
        rng = np.random.default_rng(2)
        t = m.transmission(rand_image(rng, n=2, hw=16))
        assert t.shape == (2, 3, 16, 16)
        assert float(t.data.min()) >= m.cfg.t_min
        assert float(t.data.max()) <= 1.0

    def test_indivisible_size_rejected(self):
        m = make_module()
        with pytest.raises(ConfigError):
            m.features(Tensor(np.zeros((1, 3, 18, 18), dtype=np.float32)))

    def test_large_bias_gives_identity_enhancement(self):
        m = make_module()
        m.thead.conv2.bias.data[:] = 20.0
        rng = np.random.default_rng(3)
        img = rand_image(rng, hw=16)
        enhanced, t, _, _ = m.enhance(img, want_cast=False)
        assert float(t.data.min()) > 1.0 - 1e-6
        np.testing.assert_allclose(enhanced.data, img.data, atol=1e-6)

    def test_enhance_shapes_and_finiteness(self):
        m = make_module()
        rng = np.random.default_rng(4)
        for _ in range(100):
            img = rand_image(rng, hw=28)
            enhanced, t, light, cast = m.enhance(img)
            assert enhanced.shape == (1, 3, 28, 28)
            assert t.shape == (1, 3, 28, 28)
            assert light.shape == (1, 3)
            assert cast.shape == (1, 3)
            assert np.isfinite(enhanced.data).all()
            assert np.isfinite(cast.data).all()

    def test_gradients_reach_image_and_all_inference_params(self):
        m = make_module()
        rng = np.random.default_rng(5)
        img = Tensor(rng.uniform(0, 1, size=(2, 3, 16, 16)).astype(np.float32),
                     requires_grad=True)
        enhanced, _, _, _ = m.enhance(img, want_cast=False)
        (enhanced * enhanced).sum().backward()
        assert float(np.abs(img.grad).sum()) > 0
        for name, p in m.named_parameters():
            if name.startswith("cast."):
                continue
            assert p.grad is not None and float(np.abs(p.grad).sum()) > 0, name


class TestCastPredictor:
    def test_output_range_and_shape(self):
        m = make_module()
        rng = np.random.default_rng(6)
        cast = m.enhance(rand_image(rng, n=3, hw=32))[3]
        assert cast.shape == (3, 3)
        assert np.all(cast.data > 0) and np.all(cast.data < 1)

    def test_zero_weights_give_half(self):
        m = make_module()
        for _, p in m.cast.named_parameters():
            p.data[:] = 0.0
        rng = np.random.default_rng(7)
        cast = m.enhance(rand_image(rng, hw=32))[3]
        np.testing.assert_allclose(cast.data, 0.5, atol=1e-7)

    def test_inference_mode_rejected(self):
        m = make_module().eval()
        rng = np.random.default_rng(8)
        feats = m.features(rand_image(rng, hw=16))
        with pytest.raises(ContractError):
            m.cast(feats)

    def test_gradient_reaches_stem(self):
        m = make_module()
        rng = np.random.default_rng(9)
        cast = m.enhance(rand_image(rng, hw=32))[3]
        cast.sum().backward()
        stem_w = m.stem[0].conv.weight
        assert stem_w.grad is not None
        assert float(np.abs(stem_w.grad).sum()) > 0


class TestReparameterize:
    def _train_a_little(self, m, seed=10, steps=3):
        # move running stats away from their init values
        rng = np.random.default_rng(seed)
        for _ in range(steps):
            m.features(rand_image(rng, n=2, hw=16))

    def test_eval_equivalence(self):
        m = make_module()
        self._train_a_little(m)
        m.eval()
        merged = m.reparameterize()
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(20):
            img = rand_image(rng, hw=16)
            a = m.enhance(img, want_cast=False)[0]
            b = merged.enhance(img, want_cast=False)[0]
            worst = max(worst, float(np.abs(a.data - b.data).max()))
        assert worst < 1e-5, worst

    def test_strict_mode_exact_any_mode(self):
        m = make_module(reparam_mode=net.REPARAM_KEEP)
        self._train_a_little(m)
        merged = m.reparameterize()
        rng = np.random.default_rng(12)
        m.eval()
        for _ in range(5):
            img = rand_image(rng, hw=16)
            a = m.enhance(img, want_cast=False)[0]
            b = merged.enhance(img, want_cast=False)[0]
            np.testing.assert_allclose(a.data, b.data, atol=1e-6)

    def test_zero_small_branch_folds_to_big_alone(self):
        m = make_module()
        self._train_a_little(m)
        block = m.blocks[0]
        block.dw_small.weight.data[:] = 0.0
        kernel, _ = block.folded_kernel_bias()
        scale, _ = block.big_norm.frozen_affine()
        want = block.dw_big.weight.data * scale[:, None, None, None]
        np.testing.assert_allclose(kernel, want, atol=1e-7)

    def test_original_untouched(self):
        m = make_module()
        n_before = m.inference_parameter_count()
        m.reparameterize()
        assert m.inference_parameter_count() == n_before
        assert m.blocks[0].merged is None


class TestStateDict:
    def test_checkpoint_round_trip(self, tmp_path):
        m = make_module(seed=13)
        state = m.state_dict()
        path = tmp_path / "net.umck"
        checkpoint.save_state(path, state)
        loaded = checkpoint.load_state(path)
        m2 = make_module(seed=99)
        m2.load_state_dict(loaded)
        rng = np.random.default_rng(14)
        img = rand_image(rng, hw=16)
        a = m.eval().enhance(img, want_cast=False)[0]
        b = m2.eval().enhance(img, want_cast=False)[0]
        np.testing.assert_array_equal(a.data, b.data)

    def test_mismatched_state_rejected(self):
        m = make_module()
        state = m.state_dict()
        state.pop(next(iter(state)))
        with pytest.raises(ContractError):
            make_module().load_state_dict(state)

    def test_rng_state_round_trip(self):
        gen = np.random.default_rng(1234)
        gen.uniform(size=10)
        arr = checkpoint.encode_rng_state(gen)
        twin = checkpoint.decode_rng_state(arr)
        np.testing.assert_array_equal(gen.uniform(size=5), twin.uniform(size=5))


class TestConfigValidation:
    def test_bad_kernels(self):
        with pytest.raises(ConfigError):
            net.UnitModuleConfig(lk_kernels=(8, 9))
        with pytest.raises(ConfigError):
            net.UnitModuleConfig(lk_kernels=(15, 9))

    def test_bad_channels(self):
        with pytest.raises(ConfigError):
            net.UnitModuleConfig(stem_channels=(30, 32))

    def test_bad_tmin(self):
        with pytest.raises(ConfigError):
            net.UnitModuleConfig(t_min=0.0)
