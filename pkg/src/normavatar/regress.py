"""Identity-to-latent regression and camera regression.

The identity regressor is a four-layer fully connected network from a
unit-norm embedding to the flattened extended latent, trained with mean
squared error on (embedding, latent) pairs and early stopping on a held-out
split. The camera regressor is a small strided convolutional encoder that
predicts normalized camera parameters; focal length is parameterized in
log space, so the decoded value is positive by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import apply_conv, apply_dense, flatten, init_conv, init_dense, lrelu
from .render import Camera7


class RegressorError(Exception):
    pass


# ---------------------------------------------------------------------------
# Identity regressor
# ---------------------------------------------------------------------------

N_LAYERS = 4  # fixed depth


@dataclass
class RegressorConfig:
    embed_dim: int = 64
    latent_rows: int = 8
    latent_dim: int = 64
    hidden: int = 256
    lr: float = 1e-3
    epochs: int = 400
    batch: int = 32
    val_fraction: float = 0.1
    patience: int = 40
    min_pairs: int = 32
    seed: int = 0


class IdentityRegressor:
    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg, seed=None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        p = ad.ParamSet()
        dims = [cfg.embed_dim] + [cfg.hidden] * (N_LAYERS - 1) \
            + [cfg.latent_rows * cfg.latent_dim]
        for i in range(N_LAYERS):
            init_dense(p, f"fc{i}", dims[i], dims[i + 1], rng)
        return cls(cfg, p)

    def regress_t(self, e_t):
        h = e_t
        for i in range(N_LAYERS - 1):
            h = lrelu(apply_dense(self.params, f"fc{i}", h))
        return apply_dense(self.params, f"fc{N_LAYERS - 1}", h)

    def regress(self, e):
        """Embedding vector -> (L, D_w) latent matrix."""
        e = np.asarray(e, dtype=np.float32).reshape(1, -1)
        if e.shape[1] != self.cfg.embed_dim:
            raise RegressorError(f"embedding dim {e.shape[1]} != {self.cfg.embed_dim}")
        out = self.regress_t(ad.as_tensor(e)).data[0]
        return out.reshape(self.cfg.latent_rows, self.cfg.latent_dim).copy()


def train_regressor(pairs, cfg, progress=None):
    """MSE training on (embedding, latent) pairs with early stopping.

    Returns (IdentityRegressor, history). The validation split is the
    seeded tail fraction; with val_fraction 0, the train loss early-stops.
    """
    if len(pairs) < cfg.min_pairs:
        raise RegressorError(f"need at least {cfg.min_pairs} pairs, got {len(pairs)}")
    rng = np.random.default_rng(cfg.seed)
    e_all = np.stack([np.asarray(e, dtype=np.float32) for e, _w in pairs])
    w_all = np.stack([np.asarray(w, dtype=np.float32).reshape(-1) for _e, w in pairs])
    order = rng.permutation(len(pairs))
    n_val = int(round(len(pairs) * cfg.val_fraction))
    val_idx, tr_idx = order[:n_val], order[n_val:]
    if len(tr_idx) == 0:
        raise RegressorError("validation split leaves no training pairs")

    net = IdentityRegressor.init(cfg)
    opt = ad.Adam(net.params, lr=cfg.lr)
    best_val = np.inf
    best_state = {n: t.data.copy() for n, t in net.params.items()}
    since_best = 0
    history = []

    def mse_on(idx):
        pred = net.regress_t(ad.as_tensor(e_all[idx])).data
        return float(np.mean(np.square(pred - w_all[idx])))

    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(tr_idx))
        for lo in range(0, len(tr_idx), cfg.batch):
            sel = tr_idx[perm[lo:lo + cfg.batch]]
            eb = ad.as_tensor(e_all[sel])
            wb = ad.as_tensor(w_all[sel])

            def prog(_):
                return ad.tmean(ad.square(net.regress_t(eb) - wb))

            _, grads = ad.evaluate_with_gradients(prog, net.params)
            opt.step(grads)
        train_mse = mse_on(tr_idx)
        val_mse = mse_on(val_idx) if n_val else train_mse
        history.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse})
        if progress:
            progress(history[-1])
        if val_mse < best_val - 1e-12:
            best_val = val_mse
            best_state = {n: t.data.copy() for n, t in net.params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    net.params.load_arrays(best_state)
    return net, history


# ---------------------------------------------------------------------------
# Camera regressor
# ---------------------------------------------------------------------------


@dataclass
class CameraConfig:
    resolution: int = 64
    widths: tuple = (16, 32, 64, 64, 128)
    hidden: int = 128
    translation_scale: float = 0.5   # meters; nominal subject distance
    focal_reference: float = 153.6   # pixels; nominal focal length
    lr: float = 1e-3
    epochs: int = 120
    batch: int = 16
    min_samples: int = 200
    seed: int = 0


def normalize_camera(cam_vec, cfg):
    """Camera vector -> dimensionless training target (log-focal)."""
    v = np.asarray(cam_vec, dtype=np.float64)
    out = np.empty(7)
    out[:3] = v[:3] / cfg.translation_scale
    out[3:6] = v[3:6]
    out[6] = np.log(v[6] / cfg.focal_reference)
    return out


def denormalize_camera(n_vec, cfg):
    v = np.asarray(n_vec, dtype=np.float64)
    out = np.empty(7)
    out[:3] = v[:3] * cfg.translation_scale
    out[3:6] = v[3:6]
    out[6] = np.exp(v[6]) * cfg.focal_reference
    return out


class CameraRegressor:
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
        init_dense(p, "fc0", c_in * res * res, cfg.hidden, rng)
        init_dense(p, "fc1", cfg.hidden, 7, rng, scale=0.1)
        return cls(cfg, p)

    def forward_t(self, img_t):
        if img_t.data.shape[2] != self.cfg.resolution:
            raise RegressorError(f"camera regressor wants {self.cfg.resolution}px "
                                 f"input, got {img_t.data.shape[2]}")
        h = img_t
        for i in range(len(self.cfg.widths)):
            h = lrelu(apply_conv(self.params, f"c{i}", h, stride=2, pad=1))
        h = lrelu(apply_dense(self.params, "fc0", flatten(h)))
        return apply_dense(self.params, "fc1", h)

    def regress(self, image):
        """(R, R, 3) image -> Camera7 with positive focal length."""
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise RegressorError(f"expected (R, R, 3) image, got {arr.shape}")
        t = ad.as_tensor(arr.transpose(2, 0, 1)[None])
        raw = self.forward_t(t).data[0]
        return Camera7.from_array(denormalize_camera(raw, self.cfg))


def train_camera_regressor(images, cam_vecs, cfg, progress=None):
    """L2 regression on normalized camera parameters.

    `images` (N, R, R, 3), `cam_vecs` (N, 7). Returns (CameraRegressor,
    history).
    """
    images = np.asarray(images, dtype=np.float32)
    cam_vecs = np.asarray(cam_vecs, dtype=np.float64)
    if len(images) < cfg.min_samples:
        raise RegressorError(f"need at least {cfg.min_samples} labeled renders, "
                             f"got {len(images)}")
    targets = np.stack([normalize_camera(v, cfg) for v in cam_vecs]).astype(np.float32)
    nchw = np.ascontiguousarray(images.transpose(0, 3, 1, 2))
    rng = np.random.default_rng(cfg.seed)
    net = CameraRegressor.init(cfg)
    opt = ad.Adam(net.params, lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(nchw))
        total, batches = 0.0, 0
        for lo in range(0, len(nchw), cfg.batch):
            sel = perm[lo:lo + cfg.batch]
            xb = ad.as_tensor(nchw[sel])
            yb = ad.as_tensor(targets[sel])

            def prog(_):
                return ad.tmean(ad.square(net.forward_t(xb) - yb))

            loss, grads = ad.evaluate_with_gradients(prog, net.params)
            opt.step(grads)
            total += loss
            batches += 1
        history.append({"epoch": epoch, "loss": total / batches})
        if progress:
            progress(history[-1])
    return net, history
