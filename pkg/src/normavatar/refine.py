"""Perceptual refinement of a predicted latent against an input image, and
the end-to-end single-image avatar pipeline.

Refinement keeps the camera fixed and optimizes only the latent: the
objective anchors the latent to its initialization with a squared distance,
renders the current avatar under the regressed camera, composites it over
the input image using the renderer's coverage, and adds perceptual and
identity terms between the composite and the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import percept as pc
from .geometry import FaceMesh, UVAttributeMap, mesh_from_map, mesh_positions_t
from .render import Camera7, RenderConfig, composite_t, render_t


class RefineError(Exception):
    pass


class StageError(RefineError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RefineConfig:
    lambda_percept: float = 150.0  # weight of the composite-vs-input term
    lambda_id: float = 50.0        # weight of the identity term
    iterations: int = 200
    lr: float = 0.01
    init: str = "inference"       # "inference" or "mean"
    sigma: float = 0.5
    divergence_factor: float = 10.0
    divergence_patience: int = 50

    def validate(self):
        if self.lambda_percept < 0 or self.lambda_id < 0:
            raise RefineError("loss weights must be nonnegative")
        if self.iterations < 1:
            raise RefineError("need at least one iteration")
        if self.init not in ("inference", "mean"):
            raise RefineError(f"unknown init mode {self.init!r}")
        return self


@dataclass
class ModelBundle:
    """Frozen trained models plus the shared geometry constants."""

    generator: object
    embedder: object
    fnet: object
    regressor: object
    camera_net: object
    mean_face: object
    topology: object
    w_mean: np.ndarray
    coverage_mask: np.ndarray
    fingerprint: str = ""


@dataclass
class AvatarResult:
    w: np.ndarray
    mesh: FaceMesh
    albedo_map: UVAttributeMap
    camera: Camera7
    history: list = field(repr=False, default_factory=list)
    fingerprint: str = ""
    pre_map: UVAttributeMap | None = None
    post_map: UVAttributeMap | None = None
    loss: float = 0.0


def map_from_array(arr, coverage_mask):
    """Wrap a generated (S, S, 6) array with the canonical coverage mask,
    zeroing uncovered texels to the declared fill value."""
    data = np.asarray(arr, dtype=np.float32).copy()
    data[~coverage_mask] = 0.0
    data[..., :3] = np.clip(data[..., :3], 0.0, 1.0)
    return UVAttributeMap(data=data, coverage_mask=coverage_mask.copy())


def _image_tensor(img):
    arr = np.asarray(img, dtype=np.float32)
    return ad.as_tensor(arr.transpose(2, 0, 1)[None])


def refine_loss_t(w_t, w_init, image, cam, bundle, cfg):
    """Graph-mode refinement loss; returns (total, parts dict of floats)."""
    l_w = ad.tsum(ad.square(w_t - ad.as_tensor(w_init.astype(np.float32))))
    parts = {"w_reg": float(l_w.data)}
    total = l_w

    size = image.shape[0]
    rcfg = RenderConfig(image_size=size, sigma=cfg.sigma, cull_backfaces=True)
    gen = bundle.generator.synthesize_t(ad.reshape(w_t, (1,) + w_t.data.shape))
    gen_hwc = ad.transpose(gen[0], (1, 2, 0))
    positions = mesh_positions_t(gen_hwc, bundle.mean_face, bundle.topology)
    rgb, alpha = render_t(positions, gen_hwc[:, :, :3], cam.as_array(), rcfg,
                          bundle.topology)
    comp = composite_t(rgb, alpha, image.astype(np.float32))

    need_percept = cfg.lambda_percept > 0
    need_id = cfg.lambda_id > 0
    if need_percept or need_id:
        comp_nchw = ad.reshape(ad.transpose(comp, (2, 0, 1)), (1, 3, size, size))
        img_nchw = _image_tensor(image)
    if need_percept:
        l_per = pc.perceptual_distance_t(comp_nchw, img_nchw, bundle.fnet)
        term = l_per * cfg.lambda_percept
        parts["percept"] = float(l_per.data)
        parts["percept_term"] = float(term.data)
        total = total + term
    else:
        parts["percept"] = 0.0
        parts["percept_term"] = 0.0
    if need_id:
        factor = size // bundle.embedder.cfg.resolution
        a_small = pc.downsample_image_t(comp_nchw, factor)
        b_small = pc.downsample_image_t(img_nchw, factor)
        l_id = pc.identity_loss_t(a_small, b_small, bundle.embedder)
        term = l_id * cfg.lambda_id
        parts["id"] = float(l_id.data)
        parts["id_term"] = float(term.data)
        total = total + term
    else:
        parts["id"] = 0.0
        parts["id_term"] = 0.0

    parts["total"] = float(total.data)
    if not np.isfinite(parts["total"]):
        raise RefineError(f"non-finite refinement loss: {parts}")
    return total, parts


def refine_loss(w, w_init, image, cam, bundle, cfg):
    cfg.validate()
    total, parts = refine_loss_t(ad.Tensor(np.asarray(w, dtype=np.float32)),
                                 np.asarray(w_init), image, cam, bundle, cfg)
    return parts["total"], parts


def refine(w_init, image, cam, bundle, cfg, fingerprint=""):
    """First-order minimization over the latent with the camera frozen.

    Returns an AvatarResult at the best-loss iterate; history has one row
    per iteration.
    """
    cfg.validate()
    cam.validate()
    w_start = (bundle.w_mean if cfg.init == "mean" else np.asarray(w_init))
    w_start = w_start.astype(np.float32).copy()
    anchor = w_start.copy()

    params = ad.ParamSet()
    w_t = params.add("w", w_start)
    opt = ad.Adam(params, lr=cfg.lr)

    best, best_w, best_parts = None, w_start.copy(), None
    history = []
    initial = None
    over = 0
    for it in range(cfg.iterations):
        def prog(p):
            total, parts = refine_loss_t(p["w"], anchor, image, cam, bundle, cfg)
            prog.parts = parts
            return total

        loss, grads = ad.evaluate_with_gradients(prog, params)
        history.append({"iter": it, **prog.parts})
        if initial is None:
            initial = loss
        if best is None or loss < best:
            best, best_parts, best_w = loss, prog.parts, w_t.data.copy()
        if loss > cfg.divergence_factor * max(initial, 1e-12):
            over += 1
            if over >= cfg.divergence_patience:
                raise RefineError(f"refinement diverged at iteration {it}")
        else:
            over = 0
        opt.step(grads)

    return _assemble_result(best_w, cam, bundle, history, fingerprint, loss=best)


def _assemble_result(w, cam, bundle, history, fingerprint, loss=0.0):
    arr = bundle.generator.synthesize(w)
    amap = map_from_array(arr, bundle.coverage_mask)
    mesh = mesh_from_map(amap, bundle.mean_face, bundle.topology)
    albedo_only = UVAttributeMap(data=np.concatenate(
        [amap.data[..., :3], np.zeros_like(amap.data[..., 3:])], axis=2),
        coverage_mask=amap.coverage_mask)
    return AvatarResult(w=w, mesh=mesh, albedo_map=albedo_only, camera=cam,
                        history=history, fingerprint=fingerprint, loss=loss)


def digitize(image, bundle, cfg, fingerprint=""):
    """Single-image avatar pipeline: embed, regress, refine.

    Stores both the pre-refinement and post-refinement maps for evaluation.
    Stage failures surface as StageError with the stage name.
    """
    cfg.validate()
    image = np.asarray(image, dtype=np.float32)
    try:
        factor = image.shape[0] // bundle.embedder.cfg.resolution
        small = pc.downsample_image(image, factor) if factor > 1 else image
        e = bundle.embedder.embed(small)
    except Exception as exc:
        raise StageError("embed", exc) from exc
    try:
        w_pred = bundle.regressor.regress(e)
    except Exception as exc:
        raise StageError("regress_w", exc) from exc
    try:
        cfactor = image.shape[0] // bundle.camera_net.cfg.resolution
        csmall = pc.downsample_image(image, cfactor) if cfactor > 1 else image
        cam = bundle.camera_net.regress(csmall)
    except Exception as exc:
        raise StageError("regress_camera", exc) from exc
    try:
        result = refine(w_pred, image, cam, bundle, cfg, fingerprint)
    except Exception as exc:
        raise StageError("refine", exc) from exc
    result.pre_map = map_from_array(bundle.generator.synthesize(w_pred),
                                    bundle.coverage_mask)
    result.post_map = map_from_array(bundle.generator.synthesize(result.w),
                                     bundle.coverage_mask)
    return result
