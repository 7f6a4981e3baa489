import numpy as np
import pytest

from normavatar import autodiff as ad
from normavatar import percept as pc


@pytest.fixture(scope="module")
def fnet():
    return pc.FeatureNet.init(seed=100).validate()


@pytest.fixture(scope="module")
def embedder():
    cfg = pc.EmbedderConfig(resolution=32, embed_dim=16, widths=(8, 16, 16))
    return pc.Embedder.init(cfg, seed=0)


def smooth_image(seed, size=32):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(size // 4, size // 4, 3))
    img = np.repeat(np.repeat(x, 4, axis=0), 4, axis=1)
    return img.astype(np.float64)


class TestPerceptualDistance:
    def test_self_distance_zero(self, fnet):
        img = smooth_image(0)
        assert pc.perceptual_distance(img, img, fnet) == 0.0

    def test_symmetry(self, fnet):
        a, b = smooth_image(1), smooth_image(2)
        dab = pc.perceptual_distance(a, b, fnet)
        dba = pc.perceptual_distance(b, a, fnet)
        assert abs(dab - dba) < 1e-7

    def test_nonnegative(self, fnet):
        for s in range(10):
            d = pc.perceptual_distance(smooth_image(s), smooth_image(s + 50), fnet)
            assert d >= 0.0

    def test_monotone_under_growing_noise(self, fnet):
        rng = np.random.default_rng(3)
        means = []
        for eta in (0.05, 0.1, 0.2):
            vals = []
            for s in range(50):
                img = smooth_image(s + 200)
                noise = rng.standard_normal(img.shape)
                noisy = np.clip(img + eta * noise, 0, 1)
                vals.append(pc.perceptual_distance(img, noisy, fnet))
            means.append(np.mean(vals))
        assert means[0] < means[1] < means[2]

    def test_dimension_mismatch_rejected(self, fnet):
        with pytest.raises(pc.PerceptError):
            pc.perceptual_distance_t(
                ad.as_tensor(np.zeros((1, 3, 16, 16), np.float32)),
                ad.as_tensor(np.zeros((1, 3, 8, 8), np.float32)), fnet)

    def test_differentiable_wrt_both_images(self, fnet):
        rng = np.random.default_rng(4)
        ps = ad.ParamSet()
        ps.add("a", rng.uniform(0.2, 0.8, size=(1, 3, 16, 16)))
        ps.add("b", rng.uniform(0.2, 0.8, size=(1, 3, 16, 16)))

        def prog(p):
            return pc.perceptual_distance_t(p["a"], p["b"], fnet)

        assert ad.finite_diff_check(prog, ps, eps=1e-6, max_coords=10, seed=5) < 1e-3


class TestEmbedder:
    def test_unit_norm(self, embedder):
        e = embedder.embed(smooth_image(7))
        assert abs(np.linalg.norm(e) - 1.0) < 1e-5

    def test_deterministic(self, embedder):
        img = smooth_image(8)
        assert np.array_equal(embedder.embed(img), embedder.embed(img))

    def test_wrong_resolution_rejected(self, embedder):
        with pytest.raises(pc.PerceptError):
            embedder.embed(smooth_image(9, size=64))

    def test_identity_loss_identical_images_zero(self, embedder):
        img = smooth_image(10)
        assert pc.identity_loss(img, img, embedder) < 1e-6

    def test_identity_loss_range(self, embedder):
        vals = [pc.identity_loss(smooth_image(s), smooth_image(s + 1), embedder)
                for s in range(10)]
        assert all(0.0 <= v <= 2.0 for v in vals)

    def test_identity_loss_orthogonal_embeddings(self, embedder):
        # synthetic check of the formula itself on a stubbed embedding pair
        ea = np.zeros(16); ea[0] = 1.0
        eb = np.zeros(16); eb[1] = 1.0
        cos = ea @ eb
        assert 1.0 - cos == 1.0

    def test_differentiable(self, embedder):
        rng = np.random.default_rng(11)
        ps = ad.ParamSet()
        ps.add("a", rng.uniform(0.2, 0.8, size=(1, 3, 32, 32)))
        target = ad.as_tensor(rng.uniform(0.2, 0.8, size=(1, 3, 32, 32)))

        def prog(p):
            return pc.identity_loss_t(p["a"], target, embedder)

        assert ad.finite_diff_check(prog, ps, eps=1e-6, max_coords=8, seed=12) < 1e-3

    def test_blend_toward_target_reduces_loss_on_average(self, embedder):
        rng = np.random.default_rng(13)
        deltas = []
        for s in range(20):
            a = smooth_image(s + 300)
            b = smooth_image(s + 400)
            losses = [pc.identity_loss(a * (1 - t) + b * t, b, embedder)
                      for t in (0.0, 0.5, 1.0)]
            deltas.append(losses[0] - losses[1])
            deltas.append(losses[1] - losses[2])
        assert np.mean(deltas) > 0


class TestTraining:
    def make_identity_set(self, n_id=12, k=3, size=32):
        # identities are distinct smooth color fields; variants add small
        # brightness and shift perturbations
        rng = np.random.default_rng(20)
        out = []
        for i in range(n_id):
            base = smooth_image(1000 + i, size=size)
            variants = []
            for _ in range(k):
                v = np.clip(base * rng.uniform(0.8, 1.2) + rng.normal(0, 0.02), 0, 1)
                v = np.roll(v, rng.integers(-2, 3), axis=1)
                variants.append(v)
            out.append(np.stack(variants))
        return out

    def test_training_separates_identities(self):
        cfg = pc.EmbedderConfig(resolution=32, embed_dim=16, widths=(8, 16, 16),
                                epochs=12, batch_triplets=24, seed=1)
        data = self.make_identity_set()
        net, history = pc.train_embedder(data, cfg)
        assert history[-1]["triplet_loss"] < history[0]["triplet_loss"]
        same, diff = [], []
        for i, stack in enumerate(data):
            e0 = net.embed(stack[0].astype(np.float32).transpose(0, 1, 2))
            e1 = net.embed(stack[1])
            same.append(e0 @ e1)
            other = data[(i + 1) % len(data)]
            diff.append(e0 @ net.embed(other[0]))
        assert np.mean(same) > np.mean(diff)

    def test_too_few_identities_rejected(self):
        with pytest.raises(pc.PerceptError):
            pc.train_embedder([np.zeros((2, 32, 32, 3))] * 3,
                              pc.EmbedderConfig(resolution=32))

    def test_training_deterministic(self):
        cfg = pc.EmbedderConfig(resolution=32, embed_dim=16, widths=(8, 16, 16),
                                epochs=2, batch_triplets=8, seed=2)
        data = self.make_identity_set(n_id=8, k=2)
        n1, h1 = pc.train_embedder(data, cfg)
        n2, h2 = pc.train_embedder(data, cfg)
        for name, t in n1.params.items():
            assert np.array_equal(t.data, n2.params[name].data)
