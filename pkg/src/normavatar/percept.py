"""Perceptual image distance and identity embeddings.

Both networks are small stand-ins with the contracts the pipeline needs
rather than replicas of large pretrained models. The perceptual metric
compares channel-normalized activations of a fixed, seeded multi-scale
convolutional feature stack under nonnegative per-channel calibration
weights, which makes it a symmetric pseudometric that is differentiable
with respect to both images. The identity embedder is a convolutional
encoder trained with a margin-based triplet objective so that renders of
one synthetic identity agree across camera and lighting changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import apply_conv, apply_dense, flatten, init_conv, init_dense, l2_normalize, lrelu


class PerceptError(Exception):
    pass


# ---------------------------------------------------------------------------
# Perceptual feature distance
# ---------------------------------------------------------------------------

_SCALE_CHANNELS = (12, 24, 48)


class FeatureNet:
    """Fixed random multi-scale features with calibration weights."""

    def __init__(self, params):
        self.params = params

    @classmethod
    def init(cls, seed=100):
        rng = np.random.default_rng(seed)
        p = ad.ParamSet()
        c_in = 3
        for i, c_out in enumerate(_SCALE_CHANNELS):
            init_conv(p, f"scale{i}", c_in, c_out, rng, scale=1.4)
            p.add(f"calib{i}", np.full(c_out, 1.0 / c_out, dtype=np.float32),
                  trainable=False)
            c_in = c_out
        for name, t in p.items():
            t.requires_grad = False
        return cls(p)

    def features_t(self, img_t):
        """(B, 3, S, S) tensor -> list of per-scale activation tensors."""
        feats = []
        h = img_t
        for i in range(len(_SCALE_CHANNELS)):
            h = lrelu(apply_conv(self.params, f"scale{i}", h))
            feats.append(h)
            if i < len(_SCALE_CHANNELS) - 1:
                h = ad.avgpool2x(h)
        return feats

    def validate(self):
        for i in range(len(_SCALE_CHANNELS)):
            if self.params[f"calib{i}"].data.min() < 0:
                raise PerceptError("calibration weights must be nonnegative")
        return self


def _nhwc_to_tensor(img):
    if isinstance(img, ad.Tensor):
        if img.data.ndim == 3:
            return ad.reshape(ad.transpose(img, (2, 0, 1)),
                              (1,) + img.data.shape[2:3] + img.data.shape[:2])
        return img
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PerceptError(f"expected (S, S, 3) image, got {arr.shape}")
    return ad.as_tensor(arr.transpose(2, 0, 1)[None])


def perceptual_distance_t(a_t, b_t, fnet):
    """Graph-mode distance between (B, 3, S, S) image tensors."""
    if a_t.data.shape != b_t.data.shape:
        raise PerceptError(f"image shapes differ: {a_t.data.shape} vs {b_t.data.shape}")
    fa = fnet.features_t(a_t)
    fb = fnet.features_t(b_t)
    total = None
    for i, (xa, xb) in enumerate(zip(fa, fb)):
        na = _channel_normalize(xa)
        nb = _channel_normalize(xb)
        calib = ad.reshape(fnet.params[f"calib{i}"], (1, -1, 1, 1))
        d = ad.tmean(ad.tsum(ad.square(na - nb) * calib, axis=1))
        total = d if total is None else total + d
    return total


def _channel_normalize(x, eps=1e-10):
    sq = ad.tsum(ad.square(x), axis=1, keepdims=True)
    return x * ad.pow_const(sq + eps, -0.5)


def perceptual_distance(a, b, fnet):
    """Scalar perceptual distance between two (S, S, 3) arrays in [0, 1]."""
    return float(perceptual_distance_t(_nhwc_to_tensor(a), _nhwc_to_tensor(b),
                                       fnet).data)


# ---------------------------------------------------------------------------
# Identity embedder
# ---------------------------------------------------------------------------


@dataclass
class EmbedderConfig:
    resolution: int = 64
    embed_dim: int = 64
    widths: tuple = (16, 32, 64, 64)
    margin: float = 0.3
    lr: float = 1e-3
    epochs: int = 30
    batch_triplets: int = 32
    seed: int = 0


class Embedder:
    """Convolutional encoder producing unit-norm identity vectors."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg, seed=None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        p = ad.ParamSet()
        c_in = 3
        res = cfg.resolution
        for i, c_out in enumerate(cfg.widths):
            init_conv(p, f"c{i}", c_in, c_out, rng)
            c_in = c_out
            res //= 2
        init_dense(p, "fc", c_in * res * res, cfg.embed_dim, rng)
        return cls(cfg, p)

    def embed_t(self, img_t):
        """(B, 3, R, R) tensor -> (B, D) unit-norm embedding tensor."""
        if img_t.data.shape[2] != self.cfg.resolution:
            raise PerceptError(f"embedder wants {self.cfg.resolution}px input, "
                               f"got {img_t.data.shape[2]}")
        h = img_t
        for i in range(len(self.cfg.widths)):
            h = lrelu(apply_conv(self.params, f"c{i}", h, stride=2, pad=1))
        e = apply_dense(self.params, "fc", flatten(h))
        return l2_normalize(e, axis=1)

    def embed(self, img):
        """(R, R, 3) array -> unit-norm embedding vector."""
        return self.embed_t(_nhwc_to_tensor(img)).data[0].copy()


def identity_loss_t(a_t, b_t, embedder):
    """1 - cosine(embed(a), embed(b)) for (B, 3, R, R) tensors."""
    ea = embedder.embed_t(a_t)
    eb = embedder.embed_t(b_t)
    cos = ad.tsum(ea * eb, axis=1)
    return ad.tmean(ad.as_tensor(1.0) - cos)


def identity_loss(a, b, embedder):
    return float(identity_loss_t(_nhwc_to_tensor(a), _nhwc_to_tensor(b),
                                 embedder).data)


def downsample_image(img, factor):
    """Box-filter downsample of an (S, S, 3) array by an integer factor."""
    s = img.shape[0]
    return img.reshape(s // factor, factor, s // factor, factor, 3).mean(axis=(1, 3))


def downsample_image_t(img_t, factor):
    """Graph-mode box downsample for (B, 3, S, S) tensors."""
    h = img_t
    while factor > 1:
        h = ad.avgpool2x(h)
        factor //= 2
    return h


def train_embedder(identity_images, cfg, progress=None):
    """Triplet training: images of one identity are positives of each other.

    `identity_images` is a list of (K_i, R, R, 3) arrays, one entry per
    identity. Returns (Embedder, history).
    """
    if len(identity_images) < 4:
        raise PerceptError("need at least 4 identities for triplet training")
    rng = np.random.default_rng(cfg.seed)
    net = Embedder.init(cfg)
    opt = ad.Adam(net.params, lr=cfg.lr)
    stacks = [np.ascontiguousarray(np.asarray(v, dtype=np.float32).transpose(0, 3, 1, 2))
              for v in identity_images]
    n_id = len(stacks)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n_id)
        epoch_loss = 0.0
        n_batches = max(1, n_id // 8)
        for bi in range(n_batches):
            anchors, positives, negatives = [], [], []
            for _ in range(cfg.batch_triplets):
                ia = perm[rng.integers(0, n_id)]
                im = ia
                while im == ia:
                    im = rng.integers(0, n_id)
                ka, kp = rng.choice(len(stacks[ia]), size=2, replace=False)
                kn = rng.integers(0, len(stacks[im]))
                anchors.append(stacks[ia][ka])
                positives.append(stacks[ia][kp])
                negatives.append(stacks[im][kn])
            a = ad.as_tensor(np.stack(anchors))
            p = ad.as_tensor(np.stack(positives))
            n = ad.as_tensor(np.stack(negatives))

            def prog(_):
                ea = net.embed_t(a)
                ep = net.embed_t(p)
                en = net.embed_t(n)
                d_ap = ad.tsum(ad.square(ea - ep), axis=1)
                d_an = ad.tsum(ad.square(ea - en), axis=1)
                return ad.tmean(ad.relu(d_ap - d_an + cfg.margin))

            loss, grads = ad.evaluate_with_gradients(prog, net.params)
            opt.step(grads)
            epoch_loss += loss
        row = {"epoch": epoch, "triplet_loss": epoch_loss / n_batches}
        history.append(row)
        if progress:
            progress(row)
    return net, history
