"""Latent recovery: find the extended latent that reproduces a target
geometry+albedo map, and build (embedding, latent) training pairs.

The objective is a masked 6-channel L1 against the target map, plus a
perceptual term over three fixed-view renders of the generated and target
maps, plus an adversarial realism term from the three discriminators. All
rows of the extended latent are optimized independently.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import percept as pc
from .geometry import MeanFace, UVAttributeMap
from .nets import _D_HEADS, DiscriminatorTrio, GanConfig, Generator
from .render import RenderConfig, render_three_views_t


class InversionError(Exception):
    pass


class InversionDiverged(InversionError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class InversionConfig:
    lambda_percept: float = 0.4      # weight of the rendered perceptual term
    lambda_adv: float = 0.02         # weight of the adversarial term
    iterations: int = 400
    lr: float = 0.02
    init: str = "mean"               # "mean" or "provided"
    view_size: int = 64
    view_sigma: float = 0.5
    divergence_factor: float = 10.0
    divergence_patience: int = 50

    def validate(self):
        if self.lambda_percept < 0 or self.lambda_adv < 0:
            raise InversionError("loss weights must be nonnegative")
        if self.iterations < 1:
            raise InversionError("need at least one iteration")
        if self.init not in ("mean", "provided"):
            raise InversionError(f"unknown init mode {self.init!r}")
        return self


@dataclass
class InversionContext:
    """Frozen models and constants shared by one inversion run."""

    generator: Generator
    trio: DiscriminatorTrio
    fnet: pc.FeatureNet
    mean_face: MeanFace
    topology: object
    w_mean: np.ndarray


def masked_l1(a, b, mask):
    """Mean absolute difference over covered texels, all 6 channels.

    Mirrors the graph-mode computation operation for operation so the
    lambda-free inversion loss reduces to it bit for bit.
    """
    a32 = np.asarray(a, dtype=np.float32)
    b32 = np.asarray(b, dtype=np.float32)
    m3 = np.broadcast_to(mask[..., None], a32.shape).astype(np.float32)
    denom = 6.0 * max(int(mask.sum()), 1)
    total = (np.abs(a32 - b32) * m3).sum()
    return float(total * np.float32(1.0 / denom))


def _masked_l1_t(gen_hwc, target_data, mask):
    m3 = np.broadcast_to(mask[..., None], target_data.shape).astype(np.float32)
    denom = 6.0 * max(int(mask.sum()), 1)
    diff = ad.tabs(gen_hwc - ad.as_tensor(target_data.astype(np.float32)))
    return ad.tsum(diff * ad.as_tensor(m3)) * (1.0 / denom)


def _view_cfg(cfg):
    return RenderConfig(image_size=cfg.view_size, sigma=cfg.view_sigma,
                        cull_backfaces=True)


def _render_target_views(target, ctx, cfg):
    views = render_three_views_t(ad.as_tensor(target.data.astype(np.float32)),
                                 ctx.mean_face, ctx.topology, _view_cfg(cfg))
    return [ad.Tensor(rgb.data.copy()) for rgb, _alpha in views]


def inversion_loss_t(w_t, target, target_views, ctx, cfg, keep_map=False):
    """Graph-mode loss; returns (total tensor, parts dict of floats)."""
    gen = ctx.generator.synthesize_t(ad.reshape(w_t, (1,) + w_t.data.shape))
    gen_hwc = ad.transpose(gen[0], (1, 2, 0))

    l_pix = _masked_l1_t(gen_hwc, target.data, target.coverage_mask)
    total = l_pix
    parts = {"pix": float(l_pix.data)}
    if keep_map:
        parts["_gen_map"] = gen_hwc.data.copy()

    if cfg.lambda_percept > 0:
        gen_views = render_three_views_t(gen_hwc, ctx.mean_face, ctx.topology,
                                         _view_cfg(cfg))
        l_per = None
        for (rgb, _a), tv in zip(gen_views, target_views):
            b_rgb = ad.reshape(ad.transpose(rgb, (2, 0, 1)), (1, 3) + rgb.data.shape[:2])
            b_tv = ad.reshape(ad.transpose(tv, (2, 0, 1)), (1, 3) + tv.data.shape[:2])
            d = pc.perceptual_distance_t(b_rgb, b_tv, ctx.fnet)
            l_per = d if l_per is None else l_per + d
        l_per = l_per * (1.0 / 3.0)
        term = l_per * cfg.lambda_percept
        parts["percept"] = float(l_per.data)
        parts["percept_term"] = float(term.data)
        total = total + term
    else:
        parts["percept"] = 0.0
        parts["percept_term"] = 0.0

    if cfg.lambda_adv > 0:
        l_adv = None
        for head in _D_HEADS:
            logit, _ = ctx.trio.head_logits_t(head, gen)
            term = ad.tmean(ad.softplus(ad.neg(logit)))
            l_adv = term if l_adv is None else l_adv + term
        term = l_adv * cfg.lambda_adv
        parts["adv"] = float(l_adv.data)
        parts["adv_term"] = float(term.data)
        total = total + term
    else:
        parts["adv"] = 0.0
        parts["adv_term"] = 0.0

    parts["total"] = float(total.data)
    if not np.isfinite(parts["total"]):
        raise InversionError(f"non-finite inversion loss: {parts}")
    return total, parts


def inversion_loss(w, target, ctx, cfg, return_map=False):
    """Loss and term breakdown at a fixed latent (no gradient)."""
    cfg.validate()
    target.validate()
    w_t = ad.Tensor(np.asarray(w, dtype=np.float32))
    views = _render_target_views(target, ctx, cfg) if cfg.lambda_percept > 0 else []
    total_t, parts = inversion_loss_t(w_t, target, views, ctx, cfg,
                                      keep_map=return_map)
    if return_map:
        return parts["total"], parts, parts.pop("_gen_map")
    return parts["total"], parts


@dataclass
class InversionResult:
    w: np.ndarray
    loss: float
    parts: dict
    history: list = field(repr=False, default_factory=list)


def invert(target, ctx, cfg, w_init=None):
    """Iterative first-order minimization over all latent rows.

    Returns the best-loss iterate. Raises InversionDiverged when the loss
    exceeds `divergence_factor` times the initial loss for
    `divergence_patience` consecutive iterations.
    """
    cfg.validate()
    target.validate()
    if target.height != ctx.generator.cfg.map_size:
        raise InversionError("target size does not match the generator")
    if cfg.init == "provided":
        if w_init is None:
            raise InversionError("init mode 'provided' needs w_init")
        w0 = np.asarray(w_init, dtype=np.float32).copy()
    else:
        w0 = ctx.w_mean.astype(np.float32).copy()

    params = ad.ParamSet()
    w_t = params.add("w", w0)
    opt = ad.Adam(params, lr=cfg.lr)
    target_views = _render_target_views(target, ctx, cfg) if cfg.lambda_percept > 0 else []

    best_w = w0.copy()
    best = None
    best_parts = None
    history = []
    initial = None
    over = 0
    for it in range(cfg.iterations):
        def prog(p):
            total, parts = inversion_loss_t(p["w"], target, target_views, ctx, cfg)
            prog.parts = parts
            return total

        loss, grads = ad.evaluate_with_gradients(prog, params)
        parts = prog.parts
        history.append({"iter": it, **parts})
        if initial is None:
            initial = loss
        if best is None or loss < best:
            best, best_parts, best_w = loss, parts, w_t.data.copy()
        if loss > cfg.divergence_factor * max(initial, 1e-12):
            over += 1
            if over >= cfg.divergence_patience:
                raise InversionDiverged(
                    f"loss {loss:.4g} exceeded {cfg.divergence_factor}x initial "
                    f"for {over} consecutive iterations", history)
        else:
            over = 0
        opt.step(grads)
    return InversionResult(w=best_w, loss=best, parts=best_parts, history=history)


# ---------------------------------------------------------------------------
# Pair building (parallel across records)
# ---------------------------------------------------------------------------

_WORKER = {}


def _pair_worker_init(gen_cfg, gen_arrays, trio_arrays, fnet_arrays,
                      emb_cfg, emb_arrays, mean_positions, topology, w_mean, inv_cfg):
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    gen = Generator.init(gen_cfg, seed=0)
    gen.params.load_arrays(gen_arrays)
    trio = DiscriminatorTrio.init(gen_cfg, seed=0)
    trio.params.load_arrays(trio_arrays)
    fnet = pc.FeatureNet.init()
    fnet.params.load_arrays(fnet_arrays)
    emb = pc.Embedder.init(emb_cfg)
    emb.params.load_arrays(emb_arrays)
    _WORKER["ctx"] = InversionContext(
        generator=Generator(gen_cfg, gen.params.frozen()),
        trio=DiscriminatorTrio(gen_cfg, trio.params.frozen()),
        fnet=fnet, mean_face=MeanFace(positions=mean_positions),
        topology=topology, w_mean=w_mean)
    _WORKER["embedder"] = emb
    _WORKER["cfg"] = inv_cfg


def _pair_worker(job):
    rec_id, map_data, mask, render, w_init = job
    ctx = _WORKER["ctx"]
    emb = _WORKER["embedder"]
    cfg = _WORKER["cfg"]
    target = UVAttributeMap(data=map_data, coverage_mask=mask)
    factor = render.shape[0] // emb.cfg.resolution
    img = pc.downsample_image(render, factor) if factor > 1 else render
    e = emb.embed(img.astype(np.float32))
    try:
        res = invert(target, ctx, cfg, w_init=w_init)
    except InversionDiverged as exc:
        return rec_id, None, None, f"diverged: {exc}"
    return rec_id, e, res.w, f"ok loss={res.loss:.5f}"


def build_training_pairs(records, ctx, embedder, cfg, n_workers=1, w_inits=None,
                         progress=None):
    """Invert each record's maps and embed its frontal render.

    `records` is a list of (record_id, UVAttributeMap, frontal render array).
    Returns (pairs, statuses): pairs is a list of (embedding, w) in record
    order, skipping failed inversions; statuses maps record_id to a string.
    """
    cfg.validate()
    jobs = []
    for i, (rec_id, amap, render) in enumerate(records):
        w_init = None if w_inits is None else w_inits[i]
        jobs.append((rec_id, amap.data, amap.coverage_mask, render, w_init))

    init_args = (ctx.generator.cfg, ctx.generator.params.state_arrays(),
                 ctx.trio.params.state_arrays(), ctx.fnet.params.state_arrays(),
                 embedder.cfg, embedder.params.state_arrays(),
                 ctx.mean_face.positions, ctx.topology, ctx.w_mean, cfg)
    results = []
    if n_workers <= 1:
        _pair_worker_init(*init_args)
        for job in jobs:
            results.append(_pair_worker(job))
            if progress:
                progress(results[-1])
    else:
        with ProcessPoolExecutor(max_workers=n_workers,
                                 initializer=_pair_worker_init,
                                 initargs=init_args) as pool:
            for out in pool.map(_pair_worker, jobs, chunksize=1):
                results.append(out)
                if progress:
                    progress(out)
    results.sort(key=lambda r: str(r[0]))
    pairs = [(e, w) for _id, e, w, _s in results if e is not None]
    statuses = {rec_id: s for rec_id, _e, _w, s in results}
    return pairs, statuses
