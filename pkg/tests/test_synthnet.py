import numpy as np
import pytest

from normavatar import autodiff as ad
from normavatar.nets import (DiscriminatorTrio, GanConfig, GanError, Generator,
                             gan_g_loss, train_gan)


def tiny_cfg(**kw):
    base = dict(map_size=16, latent_dim=8, style_dim=8, channel_base=64,
                channel_cap=32, batch=4, steps=2, seed=3)
    base.update(kw)
    return GanConfig(**base)


@pytest.fixture(scope="module")
def tiny_gen():
    return Generator.init(tiny_cfg(), seed=1)


class TestMapping:
    def test_deterministic_and_shaped(self, tiny_gen):
        z = np.random.default_rng(0).standard_normal(8)
        w1 = tiny_gen.map_latent(z)
        w2 = tiny_gen.map_latent(z)
        assert np.array_equal(w1, w2)
        assert w1.shape == (tiny_gen.cfg.num_style_layers, 8)
        # broadcast: every row is the same style until edited
        assert np.array_equal(w1, np.tile(w1[0], (len(w1), 1)))

    def test_nonfinite_latent_rejected(self, tiny_gen):
        with pytest.raises(GanError):
            tiny_gen.map_latent(np.array([np.nan] * 8))

    def test_w_mean_matches_direct_recomputation(self, tiny_gen):
        est = tiny_gen.w_mean(n=600, seed=42, batch=128)
        # oracle: accumulate the same seeded draws one at a time
        rng = np.random.default_rng(42)
        acc = np.zeros(8, dtype=np.float64)
        done = 0
        while done < 600:
            b = min(128, 600 - done)
            z = rng.standard_normal((b, 8)).astype(np.float32)
            for row in z:
                acc += tiny_gen.map_latent(row)[0]
            done += b
        direct = (acc / 600).astype(np.float32)
        assert np.allclose(est[0], direct, atol=1e-5)

    def test_w_mean_of_large_sample_is_stable(self, tiny_gen):
        a = tiny_gen.w_mean(n=2000, seed=1)
        b = tiny_gen.w_mean(n=2000, seed=2)
        assert np.abs(a - b).max() < 0.1


class TestSynthesize:
    def test_bit_identical_repeats(self, tiny_gen):
        w = tiny_gen.map_latent(np.random.default_rng(1).standard_normal(8))
        m1 = tiny_gen.synthesize(w)
        m2 = tiny_gen.synthesize(w)
        assert np.array_equal(m1, m2)

    def test_output_dimensions(self, tiny_gen):
        w = tiny_gen.map_latent(np.zeros(8))
        m = tiny_gen.synthesize(w)
        assert m.shape == (16, 16, 6)

    def test_interpolated_latents_stay_bounded(self, tiny_gen):
        rng = np.random.default_rng(2)
        for _ in range(100):
            w1 = tiny_gen.map_latent(rng.standard_normal(8))
            w2 = tiny_gen.map_latent(rng.standard_normal(8))
            m = tiny_gen.synthesize(0.5 * w1 + 0.5 * w2)
            assert np.isfinite(m).all()
            assert m[..., :3].min() >= 0.0 and m[..., :3].max() <= 1.0

    def test_wrong_latent_shape_rejected(self, tiny_gen):
        with pytest.raises(GanError):
            tiny_gen.synthesize(np.zeros((3, 8)))

    def test_noise_injection_flag_rejected(self):
        with pytest.raises(GanError):
            GanConfig(map_size=16, noise_injection=True).validate()


class TestDiscriminators:
    def test_tex_blind_to_position_channels(self, tiny_gen):
        cfg = tiny_cfg()
        trio = DiscriminatorTrio.init(cfg, seed=5)
        rng = np.random.default_rng(3)
        m = rng.uniform(0, 1, size=(16, 16, 6)).astype(np.float32)
        base = trio.discriminate(m)
        permuted = m.copy()
        permuted[..., 3:] = permuted[..., [5, 3, 4]]
        after = trio.discriminate(permuted)
        assert after[0] == base[0]
        assert after[2] != base[2]

    def test_geo_blind_to_color_channels(self):
        cfg = tiny_cfg()
        trio = DiscriminatorTrio.init(cfg, seed=5)
        rng = np.random.default_rng(4)
        m = rng.uniform(0, 1, size=(16, 16, 6)).astype(np.float32)
        base = trio.discriminate(m)
        permuted = m.copy()
        permuted[..., :3] = permuted[..., [2, 0, 1]]
        after = trio.discriminate(permuted)
        assert after[1] == base[1]

    def test_wrong_size_rejected(self):
        trio = DiscriminatorTrio.init(tiny_cfg(), seed=5)
        with pytest.raises(GanError):
            trio.discriminate(np.zeros((8, 8, 6)))

    def test_unrolled_input_gradient_matches_fd(self):
        cfg = tiny_cfg()
        trio = DiscriminatorTrio.init(cfg, seed=6)
        rng = np.random.default_rng(7)
        x = rng.uniform(0, 1, size=(2, 6, 16, 16)).astype(np.float64)

        # oracle: finite differences of the joint logit w.r.t. the input
        params64 = trio.params.astype(np.float64)
        trio64 = DiscriminatorTrio(cfg, params64)
        _, grad_t = trio64.head_logits_t("joint", ad.as_tensor(x), with_input_grad=True)
        eps = 1e-6
        rng2 = np.random.default_rng(8)
        for _ in range(12):
            b = rng2.integers(0, 2)
            c = rng2.integers(0, 6)
            i = rng2.integers(0, 16)
            j = rng2.integers(0, 16)
            xp = x.copy(); xp[b, c, i, j] += eps
            xm = x.copy(); xm[b, c, i, j] -= eps
            lp = trio64.head_logits_t("joint", ad.as_tensor(xp))[0].data.sum()
            lm = trio64.head_logits_t("joint", ad.as_tensor(xm))[0].data.sum()
            num = (lp - lm) / (2 * eps)
            ana = grad_t.data[b, c, i, j]
            assert abs(ana - num) / max(abs(ana), abs(num), 1e-8) < 1e-5


class TestTraining:
    def make_maps(self, n=64, size=16):
        rng = np.random.default_rng(11)
        maps = rng.uniform(0.2, 0.8, size=(n, size, size, 6)).astype(np.float32)
        maps[..., 3:] = (maps[..., 3:] - 0.5) * 0.04
        return maps

    def test_one_step_changes_generator(self):
        cfg = tiny_cfg(steps=1)
        maps = self.make_maps()
        g0 = Generator.init(cfg, seed=cfg.seed)
        before = {n: t.data.copy() for n, t in g0.params.items()}
        g1, d1, hist = train_gan(maps, cfg, seed=cfg.seed)
        delta = sum(np.abs(g1.params[n].data - before[n]).sum() for n in before)
        assert delta > 0

    def test_deterministic_given_seed(self):
        cfg = tiny_cfg(steps=2)
        maps = self.make_maps()
        g1, _, h1 = train_gan(maps, cfg, seed=9)
        g2, _, h2 = train_gan(maps, cfg, seed=9)
        for n, t in g1.params.items():
            assert np.array_equal(t.data, g2.params[n].data)
        assert h1 == h2

    def test_too_few_maps_rejected(self):
        with pytest.raises(GanError):
            train_gan(self.make_maps(n=16), tiny_cfg(), seed=0)

    def test_empty_dataset_rejected(self):
        with pytest.raises(GanError):
            train_gan(np.zeros((0, 16, 16, 6), np.float32), tiny_cfg(), seed=0)

    def test_generator_w_gradient_matches_fd(self):
        cfg = tiny_cfg()
        gen = Generator.init(cfg, seed=13)
        trio = DiscriminatorTrio.init(cfg, seed=13)
        gen64 = Generator(cfg, gen.params.astype(np.float64).frozen())
        trio64 = DiscriminatorTrio(cfg, trio.params.astype(np.float64).frozen())
        ps = ad.ParamSet()
        ps.add("w", np.random.default_rng(14).standard_normal(
            (1, cfg.num_style_layers, cfg.style_dim)))

        def prog(p):
            fake = gen64.synthesize_t(p["w"])
            return gan_g_loss(trio64, fake, cfg)

        err = ad.finite_diff_check(prog, ps, eps=1e-6, max_coords=16, seed=15)
        assert err < 1e-3
