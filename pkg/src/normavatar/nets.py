"""Style-based generator of joint geometry and albedo UV maps, plus the
three discriminators and adversarial training.

The generator decodes a latent through a mapping MLP into a style vector,
broadcast to one row per synthesis layer (rows only diverge later, when
inversion or refinement edits them independently). Synthesis starts from a
learned 4x4 block and doubles resolution with pairs of style-modulated
convolutions: the style scales input channels before each convolution and
the output is rescaled by the matching demodulation factor, which is
algebraically identical to modulating the convolution weights themselves.
There are no noise-injection branches, so synthesis is a deterministic
function of the latent.

Three discriminators score a 6-channel map: one sees the color channels,
one the position channels, one the full map. Training uses the
non-saturating logistic loss plus an R1 gradient penalty on real samples;
the penalty's inner input-gradient is unrolled explicitly (transposed
convolutions with shared weights, rectifier masks held constant), keeping
every training quantity first-order differentiable by the engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .layers import apply_conv, apply_dense, flatten, init_conv, init_dense, lrelu, pixel_norm


class GanError(Exception):
    pass


@dataclass
class GanConfig:
    map_size: int = 64
    latent_dim: int = 64        # z
    style_dim: int = 64         # w
    mapping_layers: int = 3
    channel_base: int = 512
    channel_cap: int = 128
    xyz_scale: float = 0.05     # meters per unit of raw position output
    noise_injection: bool = False  # architecture flag; must stay off
    steps: int = 500
    batch: int = 8
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    beta1: float = 0.0
    beta2: float = 0.99
    r1_weight: float = 10.0
    adv_weights: tuple = (1.0, 1.0, 1.0)  # tex, geo, joint
    seed: int = 0

    def validate(self):
        s = self.map_size
        if s < 16 or (s & (s - 1)) != 0:
            raise GanError("map size must be a power of two >= 16")
        if self.noise_injection:
            raise GanError("noise injection is unsupported; synthesis must be deterministic")
        return self

    @property
    def resolutions(self):
        res, out = 8, []
        while res <= self.map_size:
            out.append(res)
            res *= 2
        return out

    @property
    def num_style_layers(self):
        return 2 * len(self.resolutions)

    def channels(self, res):
        return min(self.channel_cap, self.channel_base // res)


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------


class Generator:
    """Mapping + synthesis networks over one ParamSet."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg, seed=None):
        cfg.validate()
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        p = ad.ParamSet()
        for i in range(cfg.mapping_layers):
            d_in = cfg.latent_dim if i == 0 else cfg.style_dim
            init_dense(p, f"map/fc{i}", d_in, cfg.style_dim, rng)
        c0 = cfg.channels(4)
        p.add("syn/const", rng.normal(size=(c0, 4, 4)).astype(np.float32) * 0.2)
        c_in = c0
        li = 0
        for res in cfg.resolutions:
            c_out = cfg.channels(res)
            for j in range(2):
                name = f"syn/l{li}"
                init_dense(p, f"{name}/style", cfg.style_dim, c_in, rng, scale=0.25)
                init_conv(p, f"{name}/conv", c_in, c_out, rng)
                li += 1
                c_in = c_out
        init_conv(p, "syn/out", c_in, 6, rng, k=1)
        return cls(cfg, p)

    # -- mapping ------------------------------------------------------------

    def map_latent_t(self, z):
        """z (B, D_z) tensor -> single style (B, D_w) tensor."""
        h = pixel_norm(z, axis=1)
        for i in range(self.cfg.mapping_layers):
            h = lrelu(apply_dense(self.params, f"map/fc{i}", h))
        return h

    def map_latent(self, z):
        """Latent vector -> broadcast per-layer style matrix (L, D_w)."""
        z = np.asarray(z, dtype=np.float32).reshape(1, -1)
        if not np.isfinite(z).all():
            raise GanError("non-finite latent")
        w = self.map_latent_t(ad.as_tensor(z)).data[0]
        return np.tile(w, (self.cfg.num_style_layers, 1))

    def w_mean(self, n=10000, seed=1234, batch=256):
        """Monte-Carlo estimate of the mean style, broadcast to (L, D_w)."""
        rng = np.random.default_rng(seed)
        total = np.zeros(self.cfg.style_dim, dtype=np.float64)
        done = 0
        while done < n:
            b = min(batch, n - done)
            z = rng.standard_normal((b, self.cfg.latent_dim)).astype(np.float32)
            total += self.map_latent_t(ad.as_tensor(z)).data.sum(axis=0)
            done += b
        w = (total / n).astype(np.float32)
        return np.tile(w, (self.cfg.num_style_layers, 1))

    # -- synthesis ------------------------------------------------------------

    def _styled_conv(self, name, x, w_row, stride_up=False):
        p = self.params
        s = apply_dense(p, f"{name}/style", w_row) + 1.0      # (B, c_in)
        b, c_in = s.data.shape
        s4 = ad.reshape(s, (b, c_in, 1, 1))
        y = ad.conv2d(x * s4, p[f"{name}/conv/w"], stride=1, pad=1)
        # demodulation: 1/sqrt(sum_i s_i^2 * sum_k W_oik^2)
        w2 = ad.tsum(ad.square(p[f"{name}/conv/w"]), axis=(2, 3))  # (c-out, c_in)
        t = ad.pow_const(ad.square(s) @ ad.transpose(w2) + 1e-8, -0.5)
        y = y * ad.reshape(t, (b, -1, 1, 1))
        bias = ad.reshape(p[f"{name}/conv/b"], (1, -1, 1, 1))
        return lrelu(y + bias)

    def synthesize_t(self, w_plus):
        """w_plus (B, L, D_w) tensor -> map tensor (B, 6, S, S)."""
        cfg = self.cfg
        b = w_plus.data.shape[0]
        if w_plus.data.shape[1] != cfg.num_style_layers:
            raise GanError(f"latent has {w_plus.data.shape[1]} rows, generator wants "
                           f"{cfg.num_style_layers}")
        const = self.params["syn/const"]
        x = ad.reshape(const, (1,) + const.data.shape)
        x = ad.concat([x] * b, axis=0) if b > 1 else x
        li = 0
        for res in cfg.resolutions:
            x = ad.upsample2x(x)
            for j in range(2):
                x = self._styled_conv(f"syn/l{li}", x, w_plus[:, li], )
                li += 1
        raw = apply_conv(self.params, "syn/out", x, pad=0)
        rgb = ad.sigmoid(raw[:, :3])
        xyz = raw[:, 3:] * cfg.xyz_scale
        return ad.concat([rgb, xyz], axis=1)

    def synthesize(self, w_plus):
        """(L, D_w) latent -> (S, S, 6) map array (r, g, b, x, y, z)."""
        w = np.asarray(w_plus, dtype=np.float32)
        if w.shape != (self.cfg.num_style_layers, self.cfg.style_dim):
            raise GanError(f"latent shape {w.shape} does not match generator")
        out = self.synthesize_t(ad.as_tensor(w[None]))
        return np.ascontiguousarray(out.data[0].transpose(1, 2, 0))

    def sample_maps(self, n, seed):
        """n generator samples: (latents (n, L, D), maps (n, S, S, 6))."""
        rng = np.random.default_rng(seed)
        ws, maps = [], []
        for _ in range(n):
            z = rng.standard_normal(self.cfg.latent_dim)
            w = self.map_latent(z)
            ws.append(w)
            maps.append(self.synthesize(w))
        return np.stack(ws), np.stack(maps)


# ---------------------------------------------------------------------------
# Discriminators
# ---------------------------------------------------------------------------

_D_HEADS = ("tex", "geo", "joint")
_D_SLICES = {"tex": (0, 3), "geo": (3, 6), "joint": (0, 6)}


class DiscriminatorTrio:
    """Three independent convolutional critics over one ParamSet."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg, seed=None):
        cfg.validate()
        rng = np.random.default_rng((cfg.seed if seed is None else seed) + 7919)
        p = ad.ParamSet()
        for head in _D_HEADS:
            lo, hi = _D_SLICES[head]
            c_in = hi - lo
            res = cfg.map_size
            i = 0
            while res > 4:
                c_out = cfg.channels(res // 2)
                init_conv(p, f"{head}/c{i}", c_in, c_out, rng)
                c_in = c_out
                res //= 2
                i += 1
            init_dense(p, f"{head}/fc0", c_in * 16, 128, rng)
            init_dense(p, f"{head}/fc1", 128, 1, rng)
        return cls(cfg, p)

    def _n_convs(self):
        return int(math.log2(self.cfg.map_size)) - 2

    def head_logits_t(self, head, maps_t, with_input_grad=False):
        """Logits for one head; maps_t is (B, 6, S, S).

        With `with_input_grad`, also returns the unrolled gradient of the
        summed logits w.r.t. the head's input slice, as a graph tensor
        (rectifier masks enter as constants, weights stay differentiable).
        """
        lo, hi = _D_SLICES[head]
        x = maps_t[:, lo:hi]
        b = x.data.shape[0]
        p = self.params
        acts, shapes = [], []
        h = x
        for i in range(self._n_convs()):
            shapes.append(h.data.shape[2:])
            pre = apply_conv(p, f"{head}/c{i}", h, stride=2, pad=1)
            acts.append(pre.data >= 0)
            h = lrelu(pre)
        h = flatten(h)
        pre_fc = apply_dense(p, f"{head}/fc0", h)
        mask_fc = pre_fc.data >= 0
        h2 = lrelu(pre_fc)
        logits = apply_dense(p, f"{head}/fc1", h2)
        if not with_input_grad:
            return logits, None

        slope = 0.2
        ones = ad.as_tensor(np.ones((b, 1), dtype=x.data.dtype))
        g = ones @ ad.transpose(p[f"{head}/fc1/w"])
        g = g * ad.as_tensor(np.where(mask_fc, 1.0, slope).astype(x.data.dtype))
        g = g @ ad.transpose(p[f"{head}/fc0/w"])
        c_last = self.cfg.channels(4)
        g = ad.reshape(g, (b, c_last, 4, 4))
        for i in reversed(range(self._n_convs())):
            g = g * ad.as_tensor(np.where(acts[i], 1.0, slope).astype(x.data.dtype))
            g = ad.conv2d_transpose(g, p[f"{head}/c{i}/w"], shapes[i], stride=2, pad=1)
        return logits, g

    def logits_t(self, maps_t):
        return tuple(self.head_logits_t(h, maps_t)[0] for h in _D_HEADS)

    def discriminate(self, attr_map):
        """Numpy scores (tex, geo, joint) for one (S, S, 6) map array."""
        arr = np.asarray(attr_map, dtype=np.float32)
        if arr.shape != (self.cfg.map_size, self.cfg.map_size, 6):
            raise GanError(f"map shape {arr.shape} does not match discriminator")
        t = ad.as_tensor(arr.transpose(2, 0, 1)[None])
        return tuple(float(self.head_logits_t(h, t)[0].data[0, 0]) for h in _D_HEADS)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _softplus_mean(x):
    return ad.tmean(ad.softplus(x))


def gan_d_loss(trio, real_t, fake_t, cfg):
    """Non-saturating logistic D loss + R1 penalty; returns (loss, parts)."""
    total = None
    r1_total = None
    for head, wgt in zip(_D_HEADS, cfg.adv_weights):
        logit_r, grad_r = trio.head_logits_t(head, real_t, with_input_grad=True)
        logit_f, _ = trio.head_logits_t(head, fake_t)
        term = (_softplus_mean(ad.neg(logit_r)) + _softplus_mean(logit_f)) * wgt
        r1 = ad.tmean(ad.tsum(ad.square(grad_r), axis=(1, 2, 3)))
        total = term if total is None else total + term
        r1_total = r1 if r1_total is None else r1_total + r1
    loss = total + r1_total * (cfg.r1_weight * 0.5)
    return loss, {"d_adv": float(total.data), "r1": float(r1_total.data)}


def gan_g_loss(trio_frozen, fake_t, cfg):
    total = None
    for head, wgt in zip(_D_HEADS, cfg.adv_weights):
        logit_f, _ = trio_frozen.head_logits_t(head, fake_t)
        term = _softplus_mean(ad.neg(logit_f)) * wgt
        total = term if total is None else total + term
    return total


def train_gan(dataset_maps, cfg, seed=None, log_every=50, progress=None,
              generator=None, trio=None, steps=None):
    """Adversarial training on (N, S, S, 6) map arrays.

    Returns (Generator, DiscriminatorTrio, history rows). Seeded and
    single-threaded deterministic; pass `generator`/`trio` to fine-tune
    existing networks instead of fresh ones.
    """
    cfg.validate()
    maps = np.asarray(dataset_maps, dtype=np.float32)
    if maps.ndim != 4 or maps.shape[3] != 6:
        raise GanError(f"expected (N, S, S, 6) maps, got {maps.shape}")
    if maps.shape[0] < 64:
        raise GanError("need at least 64 training maps")
    if maps.shape[1] != cfg.map_size:
        raise GanError("map size does not match config")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    nchw = np.ascontiguousarray(maps.transpose(0, 3, 1, 2))

    g_net = generator if generator is not None else Generator.init(cfg, seed)
    d_net = trio if trio is not None else DiscriminatorTrio.init(cfg, seed)
    opt_g = ad.Adam(g_net.params, lr=cfg.lr_g, beta1=cfg.beta1, beta2=cfg.beta2)
    opt_d = ad.Adam(d_net.params, lr=cfg.lr_d, beta1=cfg.beta1, beta2=cfg.beta2)

    g_frozen = Generator(cfg, g_net.params.frozen())
    d_frozen = DiscriminatorTrio(cfg, d_net.params.frozen())

    history = []
    n_steps = cfg.steps if steps is None else steps
    for step in range(n_steps):
        idx = rng.choice(len(nchw), size=cfg.batch, replace=len(nchw) < cfg.batch)
        real = nchw[idx]
        z = rng.standard_normal((cfg.batch, cfg.latent_dim)).astype(np.float32)

        # discriminator update (generator held constant)
        w1 = g_frozen.map_latent_t(ad.as_tensor(z))
        wp1 = ad.stack([w1] * cfg.num_style_layers, axis=1)
        fake_const = ad.Tensor(g_frozen.synthesize_t(wp1).data)

        def d_prog(_p):
            loss, parts = gan_d_loss(d_net, ad.as_tensor(real), fake_const, cfg)
            d_prog.parts = parts
            return loss

        loss_d, grads_d = ad.evaluate_with_gradients(d_prog, d_net.params)
        if not np.isfinite(loss_d):
            raise GanError(f"non-finite discriminator loss at step {step}: {d_prog.parts}")
        opt_d.step(grads_d)

        # generator update (discriminators held constant)
        def g_prog(_p):
            w = g_net.map_latent_t(ad.as_tensor(z))
            wp = ad.stack([w] * cfg.num_style_layers, axis=1)
            fake = g_net.synthesize_t(wp)
            return gan_g_loss(d_frozen, fake, cfg)

        loss_g, grads_g = ad.evaluate_with_gradients(g_prog, g_net.params)
        if not np.isfinite(loss_g):
            raise GanError(f"non-finite generator loss at step {step}")
        opt_g.step(grads_g)

        if step % log_every == 0 or step == n_steps - 1:
            acc = _real_fake_accuracy(d_net, real, fake_const.data)
            row = {"step": step, "loss_d": loss_d, "loss_g": loss_g,
                   "d_adv": d_prog.parts["d_adv"], "r1": d_prog.parts["r1"],
                   "d_acc": acc}
            history.append(row)
            if progress:
                progress(row)
    return g_net, d_net, history


def _real_fake_accuracy(trio, real_nchw, fake_nchw):
    """Joint-head accuracy of separating real from fake at threshold 0."""
    lr = trio.head_logits_t("joint", ad.as_tensor(real_nchw))[0].data
    lf = trio.head_logits_t("joint", ad.as_tensor(fake_nchw))[0].data
    return float(((lr > 0).sum() + (lf <= 0).sum()) / (lr.size + lf.size))
