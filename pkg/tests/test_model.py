import numpy as np
import pytest

from parttrack import autodiff as ad
from parttrack import model as mdl
from parttrack.autodiff import RngState, Tensor
from parttrack.geometry import TargetMask
from parttrack.model import ModelConfig, PartSet


def toy_cfg(**kw):
    base = dict(channels=8, heads=2, encoder_layers=1, ff_mult=2,
                template_size=32, search_size=64, stride=16)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def cfg():
    return toy_cfg()


@pytest.fixture
def params(cfg):
    return mdl.init_params(cfg, RngState(0))


class TestConfig:
    def test_heads_must_divide_channels(self):
        with pytest.raises(ValueError):
            toy_cfg(channels=10, heads=4)

    def test_grid_shapes_default(self):
        cfg = ModelConfig()
        assert cfg.n_template == 64
        assert cfg.n_search == 256
        assert cfg.n_template + cfg.n_search == 320

    def test_sizes_divisible_by_stride(self):
        with pytest.raises(ValueError):
            toy_cfg(search_size=65)


class TestExtractFeatures:
    def test_shapes_128(self):
        cfg = toy_cfg(channels=64, heads=8, template_size=128, search_size=256)
        params = mdl.init_params(cfg, RngState(0))
        img = RngState(1).uniform(size=(128, 128, 3))
        ps = mdl.extract_features(img, params, cfg)
        assert ps.features.shape == (64, 64)
        assert (ps.grid_h, ps.grid_w) == (8, 8)

    def test_shapes_256(self):
        cfg = toy_cfg(channels=64, heads=8, template_size=128, search_size=256)
        params = mdl.init_params(cfg, RngState(0))
        img = RngState(1).uniform(size=(256, 256, 3))
        ps = mdl.extract_features(img, params, cfg)
        assert (ps.grid_h, ps.grid_w) == (16, 16)

    def test_deterministic(self, cfg, params):
        img = RngState(2).uniform(size=(32, 32, 3))
        a = mdl.extract_features(img, params, cfg)
        b = mdl.extract_features(img, params, cfg)
        assert np.array_equal(a.features.data, b.features.data)

    def test_bad_size_rejected(self, cfg, params):
        with pytest.raises(ValueError):
            mdl.extract_features(np.zeros((30, 30, 3)), params, cfg)


class TestSinusoidalPos:
    def test_range(self):
        pos = mdl.sinusoidal_pos(4, 4, 16)
        assert pos.shape == (16, 16)
        assert np.all(pos >= -1.0) and np.all(pos <= 1.0)

    def test_rows_distinct(self):
        pos = mdl.sinusoidal_pos(4, 4, 16)
        for i in range(16):
            for j in range(i + 1, 16):
                assert np.linalg.norm(pos[i] - pos[j]) > 0

    def test_origin_row(self):
        # position (0,0): all sin entries 0, all cos entries 1
        pos = mdl.sinusoidal_pos(2, 2, 8)
        np.testing.assert_allclose(pos[0, 0::2], 0.0, atol=1e-15)
        np.testing.assert_allclose(pos[0, 1::2], 1.0, atol=1e-15)

    def test_channels_divisible_by_four(self):
        with pytest.raises(ValueError):
            mdl.sinusoidal_pos(2, 2, 6)


class TestUpdateParts:
    def test_zero_pseudo_identity(self, cfg, params):
        f_z = PartSet(Tensor(RngState(3).normal(size=(4, 8))), 2, 2, "template")
        f_y = PartSet(ad.constant(np.zeros((4, 8))), 2, 2, "pseudo")
        out = mdl.update_parts(f_z, f_y, params, cfg)
        expect = f_z.features.data + params["pos_z"].data
        assert np.array_equal(out.features.data, expect)

    def test_singleton_pseudo_broadcasts(self, cfg, params):
        # softmax over one key gives weight 1: every part receives the same
        # projected pseudo vector
        f_z = PartSet(Tensor(RngState(4).normal(size=(4, 8))), 2, 2, "template")
        f_y = PartSet(Tensor(RngState(5).normal(size=(1, 8))), 1, 1, "pseudo")
        out = mdl.update_parts(f_z, f_y, params, cfg)
        delta = out.features.data - f_z.features.data - params["pos_z"].data
        for row in delta[1:]:
            np.testing.assert_allclose(row, delta[0], atol=1e-12)

    def test_pseudo_permutation_invariance(self, cfg, params):
        rng = RngState(6)
        f_z = PartSet(Tensor(rng.normal(size=(4, 8))), 2, 2, "template")
        fy = rng.normal(size=(4, 8))
        out1 = mdl.update_parts(f_z, PartSet(Tensor(fy), 2, 2, "pseudo"),
                                params, cfg)
        perm = fy[[2, 0, 3, 1]]
        out2 = mdl.update_parts(f_z, PartSet(Tensor(perm), 2, 2, "pseudo"),
                                params, cfg)
        np.testing.assert_allclose(out1.features.data, out2.features.data,
                                   atol=1e-12)

    def test_channel_mismatch_rejected(self, cfg, params):
        f_z = PartSet(Tensor(np.zeros((4, 8))), 2, 2, "template")
        f_y = PartSet(Tensor(np.zeros((4, 4))), 2, 2, "pseudo")
        with pytest.raises(ValueError):
            mdl.update_parts(f_z, f_y, params, cfg)


class TestEncode:
    def test_zero_layers_identity(self, params):
        cfg = toy_cfg(encoder_layers=0)
        rng = RngState(7)
        search = PartSet(Tensor(rng.normal(size=(16, 8))), 4, 4, "search")
        template = PartSet(Tensor(rng.normal(size=(4, 8))), 2, 2, "template")
        mask = TargetMask(np.ones(4))
        h_x, h_z = mdl.encode(search, template, mask, params, cfg,
                              add_search_pos=False)
        assert np.array_equal(h_x.data, search.features.data)
        assert np.array_equal(h_z.data, template.features.data)

    def test_mask_zeroes_template_rows(self, params):
        cfg = toy_cfg(encoder_layers=0)
        rng = RngState(8)
        search = PartSet(Tensor(rng.normal(size=(16, 8))), 4, 4, "search")
        template = PartSet(Tensor(rng.normal(size=(4, 8))), 2, 2, "template")
        mask = TargetMask(np.array([1.0, 0.0, 0.0, 1.0]))
        _, h_z = mdl.encode(search, template, mask, params, cfg,
                            add_search_pos=False)
        assert np.array_equal(h_z.data[1], np.zeros(8))
        assert np.array_equal(h_z.data[2], np.zeros(8))
        assert np.array_equal(h_z.data[0], template.features.data[0])

    def test_all_zero_mask_zeroes_all(self, params):
        cfg = toy_cfg(encoder_layers=0)
        search = PartSet(Tensor(RngState(9).normal(size=(16, 8))), 4, 4, "search")
        template = PartSet(Tensor(RngState(10).normal(size=(4, 8))), 2, 2,
                           "template")
        _, h_z = mdl.encode(search, template, TargetMask(np.zeros(4)), params,
                            cfg, add_search_pos=False)
        assert np.array_equal(h_z.data, np.zeros((4, 8)))

    def test_permutation_equivariance_without_pos(self, cfg, params):
        rng = RngState(11)
        sx = rng.normal(size=(16, 8))
        template = PartSet(Tensor(rng.normal(size=(4, 8))), 2, 2, "template")
        mask = TargetMask(np.ones(4))
        h1, _ = mdl.encode(PartSet(Tensor(sx), 4, 4, "search"), template, mask,
                           params, cfg, add_search_pos=False)
        perm = RngState(12).integers(0, 16, size=0)  # placeholder, build below
        order = np.arange(16)[::-1].copy()
        h2, _ = mdl.encode(PartSet(Tensor(sx[order]), 4, 4, "search"), template,
                           mask, params, cfg, add_search_pos=False)
        np.testing.assert_allclose(h2.data, h1.data[order], atol=1e-10)

    def test_exclude_masked_keys_flag(self, params):
        cfg_in = toy_cfg(encoder_layers=1, exclude_masked_keys=False)
        cfg_ex = toy_cfg(encoder_layers=1, exclude_masked_keys=True)
        rng = RngState(13)
        search = PartSet(Tensor(rng.normal(size=(16, 8))), 4, 4, "search")
        template = PartSet(Tensor(rng.normal(size=(4, 8))), 2, 2, "template")
        mask = TargetMask(np.array([1.0, 0.0, 1.0, 1.0]))
        h_in, _ = mdl.encode(search, template, mask, params, cfg_in,
                             add_search_pos=False)
        h_ex, _ = mdl.encode(search, template, mask, params, cfg_ex,
                             add_search_pos=False)
        assert not np.allclose(h_in.data, h_ex.data)


class TestLocalize:
    def test_zero_final_layer_centers(self, cfg, params):
        p = dict(params)
        p["head.w2"] = Tensor(np.zeros((8, 2)), requires_grad=True)
        p["head.b2"] = Tensor(np.zeros(2), requires_grad=True)
        out = mdl.localize(Tensor(RngState(14).normal(size=(4, 8))), p)
        np.testing.assert_array_equal(out.data, np.full((4, 2), 0.5))

    def test_identical_rows_identical_outputs(self, cfg, params):
        row = RngState(15).normal(size=8)
        out = mdl.localize(Tensor(np.tile(row, (3, 1))), params)
        np.testing.assert_array_equal(out.data[0], out.data[1])
        np.testing.assert_array_equal(out.data[0], out.data[2])

    def test_range(self, cfg, params):
        out = mdl.localize(Tensor(RngState(16).normal(size=(6, 8)) * 10), params)
        assert np.all(out.data > 0) and np.all(out.data < 1)

    def test_gradient(self, cfg, params):
        h = Tensor(RngState(17).normal(size=(4, 8)))

        def f(x):
            return ad.mean(mdl.localize(x, params))

        assert ad.grad_check(f, h, eps=1e-5) < 1e-5


class TestHardAttention:
    def test_rows_one_hot(self, cfg):
        rng = RngState(18)
        a = mdl.hard_attention(Tensor(rng.normal(size=(4, 8))),
                               Tensor(rng.normal(size=(16, 8))), 1.0,
                               RngState(19))
        np.testing.assert_array_equal(a.data.sum(axis=1), np.ones(4))
        assert np.all(np.isin(a.data, [0.0, 1.0]))

    def test_margin_concentration(self):
        # logit margin >= 10 wins with prob ~1 - 15 e^-10
        h_x = np.zeros((8, 4))
        h_x[3] = [10.0, 0, 0, 0]
        h_z = np.array([[1.0, 0, 0, 0]])
        rng = RngState(20)
        hits = 0
        for _ in range(1000):
            a = mdl.hard_attention(Tensor(h_z), Tensor(h_x), 1.0, rng)
            hits += int(a.data[0, 3] == 1.0)
        assert hits / 1000 >= 0.99

    def test_duplicate_keys_split_mass(self):
        h_x = np.zeros((6, 4))
        h_x[2] = [10.0, 0, 0, 0]
        h_x[4] = [10.0, 0, 0, 0]
        h_z = np.array([[1.0, 0, 0, 0]])
        rng = RngState(21)
        counts = np.zeros(6)
        for _ in range(1000):
            counts += mdl.hard_attention(Tensor(h_z), Tensor(h_x), 1.0,
                                         rng).data[0]
        assert counts[2] + counts[4] >= 990
        assert 0.4 <= counts[2] / (counts[2] + counts[4]) <= 0.6

    def test_inference_argmax_no_rng(self):
        h_z = np.array([[1.0, 0.0], [0.0, 1.0]])
        h_x = np.array([[2.0, 0.0], [0.0, 3.0], [1.0, 1.0]])
        a = mdl.hard_attention(Tensor(h_z), Tensor(h_x), 1.0, None, sample=False)
        np.testing.assert_array_equal(a.data, [[1, 0, 0], [0, 1, 0]])

    def test_unscaled_logits(self):
        # raw dot products: no 1/sqrt(C) shrink before the softmax
        h_z = Tensor(np.array([[3.0, 0.0]]))
        h_x = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        logits = ad.matmul(h_z, ad.transpose(h_x)).data
        np.testing.assert_array_equal(logits, [[3.0, 0.0]])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, cfg, params, tmp_path):
        path = tmp_path / "model.npz"
        mdl.save_checkpoint(path, cfg, params, extras={"step": np.array([7])})
        cfg2, params2, extras = mdl.load_checkpoint(path)
        assert cfg2 == cfg
        assert extras["step"][0] == 7
        assert set(params2) == set(params)
        for k in params:
            assert np.array_equal(params[k].data, params2[k].data)

    def test_config_mismatch_rejected(self, cfg, params, tmp_path):
        path = tmp_path / "model.npz"
        mdl.save_checkpoint(path, cfg, params)
        with pytest.raises(ValueError, match="does not match"):
            mdl.load_checkpoint(path, expect=toy_cfg(channels=16, heads=2))

    def test_forward_identical_after_reload(self, cfg, params, tmp_path):
        path = tmp_path / "model.npz"
        mdl.save_checkpoint(path, cfg, params)
        _, params2, _ = mdl.load_checkpoint(path)
        img = RngState(22).uniform(size=(32, 32, 3))
        a = mdl.extract_features(img, params, cfg).features.data
        b = mdl.extract_features(img, params2, cfg).features.data
        assert np.array_equal(a, b)


class TestFloat32Inference:
    def test_cast_and_forward(self, cfg, params):
        p32 = mdl.cast_params(params, np.float32)
        img = RngState(23).uniform(size=(32, 32, 3)).astype(np.float32)
        out = mdl.extract_features(img, p32, cfg)
        assert out.features.dtype == np.float32
