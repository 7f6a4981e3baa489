"""Synthetic scan corpus, latent editing vectors, blendshape fitting, and
the bootstrap round that fine-tunes the generator and regressor.

Identities are procedural deformations of the base half-ellipsoid head:
eight smooth shape fields (proportions, nose, brow, cheeks, jaw, chin) and
a four-parameter albedo palette, all deterministic in the identity seed.
Expressions add a fixed six-field blendshape basis (jaw open, smile, brow
raise, frown, cheek puff, pucker) on top of the identity mesh.

A dataset record stores the ground-truth 6-channel map plus a set of
labeled renders: a canonical unlit frontal portrait first, then camera and
lighting variants, and (where requested) expressive variants that play the
role of unconstrained input photos.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import percept as pc
from .geometry import (FaceMesh, MeanFace, UVAttributeMap, bounding_box_diagonal,
                       rasterize_vertex_maps)
from .invert import InversionConfig, InversionContext, InversionDiverged, invert
from .nets import DiscriminatorTrio, Generator, train_gan
from .regress import IdentityRegressor, normalize_camera, train_regressor
from .render import (Camera7, DirectionalLight, RenderConfig, canonical_camera,
                     composite, project_vertices, render, visible_vertices)


class DatasetError(Exception):
    pass


N_SHAPE = 8
N_PALETTE = 4
N_EXPRESSION = 6
COEFF_BOUND = 3.0

BACKDROP = 0.2  # flat background gray the renders are composited over


# ---------------------------------------------------------------------------
# Identity parameters
# ---------------------------------------------------------------------------


@dataclass
class SyntheticIdentityParams:
    seed: int
    shape_coeffs: np.ndarray      # (8,) in [-3, 3]
    palette: np.ndarray           # (4,) in [-3, 3]
    expression: np.ndarray | None = None  # (6,) blendshape coefficients

    def validate(self):
        for arr in (self.shape_coeffs, self.palette,
                    self.expression if self.expression is not None else np.zeros(1)):
            if np.abs(np.asarray(arr)).max() > COEFF_BOUND + 1e-9:
                raise DatasetError("identity coefficients must lie in [-3, 3]")
        return self

    @classmethod
    def sample(cls, seed, expressive=False):
        rng = np.random.default_rng(seed)
        shape = np.clip(rng.normal(0, 1.0, N_SHAPE), -COEFF_BOUND, COEFF_BOUND)
        palette = np.clip(rng.normal(0, 1.0, N_PALETTE), -COEFF_BOUND, COEFF_BOUND)
        expr = None
        if expressive:
            expr = sample_expression(rng)
        return cls(seed=seed, shape_coeffs=shape, palette=palette, expression=expr)


def sample_expression(rng):
    """Expression coefficients with a consistent dominant mode (jaw + smile),
    so the neutralization direction averages coherently across subjects."""
    expr = np.zeros(N_EXPRESSION)
    expr[0] = rng.uniform(0.7, 1.6)    # jaw open
    expr[1] = rng.uniform(0.5, 1.4)    # smile
    expr[2] = rng.uniform(-0.2, 0.6)   # brow raise
    expr[4] = rng.uniform(0.0, 0.4)    # cheek puff
    return np.clip(expr, -COEFF_BOUND, COEFF_BOUND)


# ---------------------------------------------------------------------------
# Procedural geometry and albedo
# ---------------------------------------------------------------------------


def _flipped_normal_fraction(base, positions, topology):
    """Area-weighted fraction of front-region triangles whose normals flip
    against the base head; sub-percent sliver flips are normal, large values
    mean the surface folded through itself."""
    tris = topology.triangles
    cols = topology.grid_shape[1]
    fc = (np.arange(topology.vertex_count) % cols) / (cols - 1)
    front = (fc[tris].mean(axis=1) > 0.22) & (fc[tris].mean(axis=1) < 0.78)

    def raw_normals(v):
        return np.cross(v[tris[:, 1]] - v[tris[:, 0]], v[tris[:, 2]] - v[tris[:, 0]])

    nb = raw_normals(base)[front]
    nd = raw_normals(positions)[front]
    dots = (nb * nd).sum(axis=1)
    areas = 0.5 * np.linalg.norm(nd, axis=1)
    return float(areas[dots < 0].sum() / max(areas.sum(), 1e-12))


def _grid_fractions(topology):
    rows, cols = topology.grid_shape
    idx = np.arange(topology.vertex_count)
    fr = (idx // cols) / (rows - 1)   # 0 chin .. 1 forehead
    fc = (idx % cols) / (cols - 1)    # 0 left .. 1 right
    return fr, fc


def _gauss(fr, fc, cr, cc, sr, sc):
    return np.exp(-((fr - cr) ** 2 / (2 * sr ** 2) + (fc - cc) ** 2 / (2 * sc ** 2)))


def identity_shape_fields(topology, base):
    """The eight unit deformation fields, stacked (8, V, 3)."""
    fr, fc = _grid_fractions(topology)
    v = topology.vertex_count
    fields = np.zeros((N_SHAPE, v, 3))
    fields[0, :, 0] = 0.06 * base[:, 0]                    # width
    fields[1, :, 1] = 0.05 * base[:, 1]                    # height
    fields[2, :, 2] = 0.05 * base[:, 2]                    # depth
    nose = _gauss(fr, fc, 0.46, 0.5, 0.10, 0.06)
    fields[3, :, 2] = 0.010 * nose                         # nose prominence
    brow = _gauss(fr, fc, 0.72, 0.5, 0.06, 0.28)
    fields[4, :, 2] = 0.006 * brow                         # brow ridge
    cheek = _gauss(fr, fc, 0.42, 0.26, 0.10, 0.10) + _gauss(fr, fc, 0.42, 0.74, 0.10, 0.10)
    fields[5, :, 2] = 0.006 * cheek
    fields[5, :, 0] = 0.004 * cheek * np.sign(fc - 0.5)    # cheek fullness
    jaw = np.clip(0.35 - fr, 0, None) / 0.35
    fields[6, :, 0] = 0.010 * jaw * np.sign(fc - 0.5)      # jaw width
    chin = _gauss(fr, fc, 0.02, 0.5, 0.08, 0.18)
    fields[7, :, 1] = -0.010 * chin                        # chin length
    return fields


def build_blendshape_basis(topology):
    """Fixed expression basis, (6, V, 3) meters at unit coefficient."""
    fr, fc = _grid_fractions(topology)
    v = topology.vertex_count
    basis = np.zeros((N_EXPRESSION, v, 3))
    jaw = np.clip(0.38 - fr, 0, None) / 0.38
    basis[0, :, 1] = -0.014 * jaw                              # jaw open
    basis[0, :, 2] = -0.004 * jaw
    smile = _gauss(fr, fc, 0.30, 0.38, 0.07, 0.07) + _gauss(fr, fc, 0.30, 0.62, 0.07, 0.07)
    basis[1, :, 1] = 0.008 * smile                             # smile
    basis[1, :, 0] = 0.005 * smile * np.sign(fc - 0.5)
    brow = _gauss(fr, fc, 0.72, 0.5, 0.06, 0.30)
    basis[2, :, 1] = 0.007 * brow                              # brow raise
    mouth = _gauss(fr, fc, 0.30, 0.5, 0.07, 0.16)
    basis[3, :, 1] = -0.006 * mouth                            # frown
    cheek = _gauss(fr, fc, 0.42, 0.26, 0.09, 0.09) + _gauss(fr, fc, 0.42, 0.74, 0.09, 0.09)
    basis[4, :, 0] = 0.010 * cheek * np.sign(fc - 0.5)         # cheek puff
    basis[4, :, 2] = 0.004 * cheek
    basis[5, :, 2] = 0.010 * mouth                             # pucker
    basis[5, :, 1] = -0.005 * mouth
    basis[5, :, 0] = -0.006 * smile * np.sign(fc - 0.5)
    return basis


@dataclass
class BlendshapeBasis:
    fields: np.ndarray  # (K, V, 3)

    @property
    def k(self):
        return len(self.fields)

    def apply(self, positions, delta):
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (self.k,):
            raise DatasetError(f"expected {self.k} coefficients, got {delta.shape}")
        return positions + np.tensordot(delta, self.fields, axes=1)

    def validate(self):
        if not np.isfinite(self.fields).all():
            raise DatasetError("non-finite blendshape fields")
        zero = self.apply(np.zeros((self.fields.shape[1], 3)), np.zeros(self.k))
        if np.abs(zero).max() != 0.0:
            raise DatasetError("zero coefficients must give zero offset")
        return self


def identity_mesh(params, topology, base, basis=None):
    """Deterministic identity (plus optional expression) mesh positions."""
    fields = identity_shape_fields(topology, base)
    positions = base + np.tensordot(params.shape_coeffs, fields, axes=1)
    if params.expression is not None:
        if basis is None:
            raise DatasetError("expression coefficients need a blendshape basis")
        positions = basis.apply(positions, params.expression)
    return positions


def identity_albedo(params, topology):
    """Per-vertex albedo from the palette plus a seeded low-frequency field."""
    fr, fc = _grid_fractions(topology)
    p = params.palette
    base_tone = np.array([0.72, 0.55, 0.44])
    tone = (base_tone
            + p[0] * np.array([0.055, 0.05, 0.045])     # lightness
            + p[1] * np.array([0.035, -0.012, -0.02]))  # redness
    albedo = np.tile(tone, (topology.vertex_count, 1))
    lips = _gauss(fr, fc, 0.28, 0.5, 0.045, 0.11)
    albedo += lips[:, None] * np.array([0.10, -0.16, -0.12])
    brows = _gauss(fr, fc, 0.70, 0.34, 0.025, 0.07) + _gauss(fr, fc, 0.70, 0.66, 0.025, 0.07)
    albedo -= np.clip(brows, 0, 1)[:, None] * (0.30 + 0.05 * p[2]) * np.array([1.0, 1.1, 1.1])
    eyes = _gauss(fr, fc, 0.62, 0.35, 0.02, 0.035) + _gauss(fr, fc, 0.62, 0.65, 0.02, 0.035)
    albedo -= np.clip(eyes, 0, 1)[:, None] * np.array([0.45, 0.42, 0.35])
    blush = _gauss(fr, fc, 0.40, 0.26, 0.08, 0.08) + _gauss(fr, fc, 0.40, 0.74, 0.08, 0.08)
    albedo += blush[:, None] * (0.04 + 0.02 * p[3]) * np.array([1.0, -0.3, -0.2])
    rng = np.random.default_rng(params.seed ^ 0x5EED)
    freq = rng.uniform(8, 16, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    grain = 0.02 * np.sin(freq[0] * fr + phase[0]) * np.sin(freq[1] * fc + phase[1])
    albedo += grain[:, None]
    return np.clip(albedo, 0.04, 0.98)


# ---------------------------------------------------------------------------
# Records and rendering
# ---------------------------------------------------------------------------


@dataclass
class RenderSpec:
    camera: Camera7
    light: DirectionalLight | None
    kind: str  # "canonical" | "variant" | "expressive"


@dataclass
class DatasetRecord:
    record_id: str
    params: SyntheticIdentityParams
    attr_map: UVAttributeMap
    renders: list            # (S, S, 3) arrays, composited over the backdrop
    cameras: list            # Camera7 per render
    lights: list             # DirectionalLight | None per render
    kinds: list              # str per render
    landmarks: list          # (L, 2) pixel coordinates per render
    regenerate: bool = False

    @property
    def canonical_render(self):
        return self.renders[0]

    def input_render_index(self):
        """The render playing the unconstrained-photo role: the first
        expressive variant when present, else the canonical portrait."""
        for i, k in enumerate(self.kinds):
            if k == "expressive":
                return i
        return 0


@dataclass
class ScanContext:
    """Shared constants for record generation."""

    topology: object
    base: np.ndarray
    basis: BlendshapeBasis
    mean_face: MeanFace
    map_size: int = 64
    render_size: int = 128
    render_sigma: float = 0.35
    n_pose_variants: int = 3
    n_expressive_variants: int = 1


def sample_camera(rng, image_size):
    dist = rng.uniform(0.42, 0.58)
    return Camera7(
        tx=rng.uniform(-0.02, 0.02), ty=rng.uniform(-0.02, 0.02), tz=-dist,
        rx=rng.uniform(-0.18, 0.18), ry=rng.uniform(-0.55, 0.55),
        rz=rng.uniform(-0.08, 0.08), f=1.2 * image_size * rng.uniform(0.85, 1.15))


def sample_light(rng):
    d = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.3, 0.9), rng.uniform(0.5, 1.0)])
    d /= np.linalg.norm(d)
    return DirectionalLight(direction=tuple(d), ambient=rng.uniform(0.25, 0.5))


def _render_spec_list(params, ctx, rng):
    size = ctx.render_size
    specs = [RenderSpec(canonical_camera(size), None, "canonical")]
    for _ in range(ctx.n_pose_variants):
        specs.append(RenderSpec(sample_camera(rng, size), sample_light(rng), "variant"))
    for _ in range(ctx.n_expressive_variants):
        specs.append(RenderSpec(sample_camera(rng, size), sample_light(rng), "expressive"))
    return specs


def generate_synthetic_scan(params, ctx, record_id=None):
    """Deterministic record: maps, labeled renders, projected landmarks.

    Expressive variant renders apply a sampled expression on top of the
    record's identity mesh; the stored maps keep the record's own
    (neutral or expressive) geometry.
    """
    params.validate()
    topo = ctx.topology
    positions = identity_mesh(params, topo, ctx.base, ctx.basis)
    albedo = identity_albedo(params, topo)

    regenerate = False
    disp = np.linalg.norm(positions - ctx.base, axis=1)
    diag = bounding_box_diagonal(positions)
    flipped = _flipped_normal_fraction(ctx.base, positions, topo)
    if disp.max() > 0.065 or flipped > 0.05 or not (0.1 < diag < 0.6):
        regenerate = True

    offsets = positions - ctx.mean_face.positions
    amap = rasterize_vertex_maps(offsets, albedo, topo, ctx.map_size)

    rng = np.random.default_rng(params.seed ^ 0xC0FFEE)
    specs = _render_spec_list(params, ctx, rng)
    mesh = FaceMesh(positions=positions, topology=topo)
    renders, cameras, lights, kinds, landmarks = [], [], [], [], []
    backdrop = np.full((ctx.render_size, ctx.render_size, 3), BACKDROP)
    for spec in specs:
        rpos = positions
        if spec.kind == "expressive":
            expr = sample_expression(rng)
            rpos = ctx.basis.apply(positions, expr)
        rmesh = FaceMesh(positions=rpos, topology=topo)
        cfg = RenderConfig(image_size=ctx.render_size, sigma=ctx.render_sigma,
                           lighting=spec.light, cull_backfaces=True)
        img = render(rmesh, amap.data[..., :3], spec.camera, cfg)
        renders.append(composite(img, backdrop).astype(np.float32))
        screen, _, _ = project_vertices(rmesh, spec.camera, ctx.render_size)
        landmarks.append(screen[topo.landmark_indices].copy())
        cameras.append(spec.camera)
        lights.append(spec.light)
        kinds.append(spec.kind)

    return DatasetRecord(
        record_id=record_id or f"id{params.seed:08d}",
        params=params, attr_map=amap, renders=renders, cameras=cameras,
        lights=lights, kinds=kinds, landmarks=landmarks, regenerate=regenerate)


# ---------------------------------------------------------------------------
# Corpus storage
# ---------------------------------------------------------------------------


def save_record(record, rec_dir):
    """One directory per record: tensors, renders, and a metadata file."""
    from PIL import Image

    os.makedirs(rec_dir, exist_ok=True)
    arrays = {
        "map": record.attr_map.data,
        "mask": record.attr_map.coverage_mask,
        "shape_coeffs": record.params.shape_coeffs.astype(np.float64),
        "palette": record.params.palette.astype(np.float64),
    }
    if record.params.expression is not None:
        arrays["expression"] = record.params.expression.astype(np.float64)
    for i, (rimg, lm) in enumerate(zip(record.renders, record.landmarks)):
        arrays[f"render{i:02d}"] = rimg.astype(np.float32)
        arrays[f"landmarks{i:02d}"] = lm.astype(np.float64)
        Image.fromarray(np.round(np.clip(rimg, 0, 1) * 255).astype(np.uint8)).save(
            os.path.join(rec_dir, f"render_{i:02d}.png"))
    ad.save_tensors(os.path.join(rec_dir, "record.nt"), arrays)
    meta = {
        "record_id": record.record_id,
        "seed": int(record.params.seed),
        "kinds": record.kinds,
        "cameras": [list(c.as_array()) for c in record.cameras],
        "lights": [None if l is None else
                   {"direction": list(l.direction), "ambient": l.ambient}
                   for l in record.lights],
        "regenerate": bool(record.regenerate),
    }
    with open(os.path.join(rec_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return record_checksum(rec_dir)


def load_record(rec_dir):
    arrays = ad.load_tensors(os.path.join(rec_dir, "record.nt"))
    with open(os.path.join(rec_dir, "meta.json")) as fh:
        meta = json.load(fh)
    params = SyntheticIdentityParams(
        seed=meta["seed"], shape_coeffs=arrays["shape_coeffs"],
        palette=arrays["palette"], expression=arrays.get("expression"))
    n = len(meta["kinds"])
    renders = [arrays[f"render{i:02d}"] for i in range(n)]
    landmarks = [arrays[f"landmarks{i:02d}"] for i in range(n)]
    cameras = [Camera7.from_array(np.asarray(c)) for c in meta["cameras"]]
    lights = [None if l is None else
              DirectionalLight(direction=tuple(l["direction"]), ambient=l["ambient"])
              for l in meta["lights"]]
    return DatasetRecord(
        record_id=meta["record_id"], params=params,
        attr_map=UVAttributeMap(data=arrays["map"], coverage_mask=arrays["mask"]),
        renders=renders, cameras=cameras, lights=lights, kinds=meta["kinds"],
        landmarks=landmarks, regenerate=meta["regenerate"])


def record_checksum(rec_dir):
    h = hashlib.sha256()
    for name in ("record.nt", "meta.json"):
        with open(os.path.join(rec_dir, name), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def write_manifest(corpus_dir, checksums, fingerprint=""):
    path = os.path.join(corpus_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump({"fingerprint": fingerprint, "records": checksums}, fh,
                  indent=1, sort_keys=True)
    return path


def verify_manifest(corpus_dir, subset=None):
    """Recompute checksums; returns the set of mismatched record ids."""
    with open(os.path.join(corpus_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    bad = set()
    for rec_id, checksum in manifest["records"].items():
        if subset is not None and rec_id not in subset:
            continue
        if record_checksum(os.path.join(corpus_dir, rec_id)) != checksum:
            bad.add(rec_id)
    return bad


# ---------------------------------------------------------------------------
# Latent editing vectors
# ---------------------------------------------------------------------------


@dataclass
class EditVectors:
    """Mean style, attribute direction set, and neutralization direction."""

    w_mean: np.ndarray      # (L, D)
    attr_dirs: np.ndarray   # (k, L*D), orthonormal rows
    coeff_map: np.ndarray   # (E+1, k) affine map from embedding to coefficients
    beta: np.ndarray        # (L, D)

    def validate(self, generator_cfg=None):
        if self.beta.shape != self.w_mean.shape:
            raise DatasetError("beta shape does not match w_mean")
        if generator_cfg is not None:
            want = (generator_cfg.num_style_layers, generator_cfg.style_dim)
            if self.w_mean.shape != want:
                raise DatasetError("edit vectors do not match the generator")
        return self


def build_beta(latent_pairs):
    """Neutralization direction: mean of (neutral - expressive) latents."""
    if not latent_pairs:
        raise DatasetError("need at least one neutral/expressive pair")
    diffs = [np.asarray(wn) - np.asarray(we) for wn, we in latent_pairs]
    return np.mean(diffs, axis=0).astype(np.float32)


def build_edit_vectors(w_mean, latents, embeddings, beta, k_dirs=16, ridge=1e-3):
    """PCA of inverted-latent offsets plus a ridge map from embeddings.

    `latents` (N, L, D) are inverted subject latents, `embeddings` (N, E)
    their matching identity embeddings.
    """
    n = len(latents)
    offs = np.asarray(latents, dtype=np.float64).reshape(n, -1) - w_mean.reshape(1, -1)
    k = min(k_dirs, n, offs.shape[1])
    _, _, vt = np.linalg.svd(offs, full_matrices=False)
    dirs = vt[:k]
    coeffs = offs @ dirs.T                                   # (N, k)
    e = np.concatenate([np.asarray(embeddings, dtype=np.float64),
                        np.ones((n, 1))], axis=1)            # (N, E+1)
    gram = e.T @ e + ridge * np.eye(e.shape[1])
    coeff_map = np.linalg.solve(gram, e.T @ coeffs)
    return EditVectors(w_mean=w_mean.astype(np.float32),
                       attr_dirs=dirs.astype(np.float32),
                       coeff_map=coeff_map.astype(np.float32),
                       beta=beta.astype(np.float32))


def attribute_offset(edits, embedding):
    """Identity-attribute latent offset predicted from an embedding."""
    e = np.concatenate([np.asarray(embedding, dtype=np.float64), [1.0]])
    coeffs = e @ edits.coeff_map.astype(np.float64)
    return (coeffs @ edits.attr_dirs.astype(np.float64)).reshape(
        edits.w_mean.shape).astype(np.float32)


def latent_normalize(w_subject, attrs, edits, alpha=None):
    """w' = w_mean + alpha + beta.

    `attrs` is the subject's identity embedding; pass `alpha` to supply a
    precomputed offset instead. `w_subject` is accepted for interface
    parity but the normalized latent is rebuilt from the mean.
    """
    if alpha is None:
        alpha = (np.zeros_like(edits.w_mean) if attrs is None
                 else attribute_offset(edits, attrs))
    alpha = np.asarray(alpha, dtype=np.float32)
    if alpha.shape != edits.w_mean.shape:
        raise DatasetError("alpha shape does not match the latent")
    return edits.w_mean + alpha + edits.beta


# ---------------------------------------------------------------------------
# Blendshape + camera fitting
# ---------------------------------------------------------------------------


@dataclass
class FitConfig:
    iterations: int = 150
    lr: float = 0.04               # blendshape coefficients
    lr_camera: float = 0.003       # normalized camera parameters
    lr_decay: float = 0.25         # applied for the final third of iterations
    pixel_weight: float = 1.0
    landmark_weight: float = 120.0  # on squared error in units of image size
    tikhonov: float = 1e-4
    sigma: float = 0.5
    translation_scale: float = 0.5
    backdrop: float = BACKDROP     # targets are composited over this gray

    def validate(self):
        if self.iterations < 1:
            raise DatasetError("need at least one fit iteration")
        return self


@dataclass
class FitResult:
    delta: np.ndarray
    camera: Camera7
    mesh: FaceMesh
    history: list = field(repr=False, default_factory=list)
    landmark_rms: float = 0.0


def fit_linear_3dmm(target_render, target_landmarks, init_mesh, basis, cam_init,
                    albedo, cfg=None):
    """Fit blendshape coefficients and the camera to a target render.

    Minimizes masked pixel L1 (rendered vs target) + landmark reprojection
    + a Tikhonov term on the coefficients, by first-order descent. With an
    empty basis (k = 0) only the camera is optimized.
    """
    from .render import project_vertices_t, render_t  # local import avoids a cycle

    cfg = (cfg or FitConfig()).validate()
    topo = init_mesh.topology
    if len(target_landmarks) < 5:
        raise DatasetError("need at least 5 landmarks")
    size = target_render.shape[0]
    f_ref = 1.2 * size
    k = basis.k if basis is not None else 0

    params = ad.ParamSet()
    if k:
        delta_t = params.add("delta", np.zeros(k, dtype=np.float32))
        basis_flat = basis.fields.reshape(k, -1).astype(np.float32)
    cam_norm0 = normalize_camera(cam_init.as_array(), _FitCamScales(cfg, f_ref))
    cam_t = params.add("cam", cam_norm0.astype(np.float32))

    target_t = ad.as_tensor(target_render.astype(np.float32))
    lm_t = ad.as_tensor((np.asarray(target_landmarks) / size).astype(np.float32))
    albedo_t = ad.as_tensor(albedo.astype(np.float32))
    init_pos = ad.as_tensor(init_mesh.positions.astype(np.float32))
    rcfg = RenderConfig(image_size=size, sigma=cfg.sigma, cull_backfaces=True)

    def build_cam(c):
        return ad.concat([c[0:3] * cfg.translation_scale, c[3:6],
                          ad.exp(c[6:7]) * f_ref], axis=0)

    def prog(p):
        pos = init_pos
        if k:
            pos = init_pos + ad.reshape(ad.reshape(p["delta"], (1, k)) @ basis_flat,
                                        init_mesh.positions.shape)
        cam_full = build_cam(p["cam"])
        screen, _depth, _clip = project_vertices_t(pos, cam_full, size)
        lm_px = ad.gather_rows(screen, topo.landmark_indices) * (1.0 / size)
        lm_term = ad.tmean(ad.square(lm_px - lm_t))
        rgb, alpha = render_t(pos, albedo_t, cam_full, rcfg, topo)
        a3 = ad.reshape(alpha, alpha.data.shape + (1,))
        comp = rgb * a3 + ad.as_tensor(np.float32(cfg.backdrop)) * (ad.as_tensor(1.0) - a3)
        pix_term = ad.tsum(a3 * ad.tabs(comp - target_t)) \
            * ad.pow_const(ad.tsum(alpha) * 3.0 + 1e-6, -1.0)
        total = pix_term * cfg.pixel_weight + lm_term * cfg.landmark_weight
        if k:
            total = total + ad.tsum(ad.square(p["delta"])) * cfg.tikhonov
        prog.lm_rms = float(np.sqrt(np.mean(np.square(
            lm_px.data * size - np.asarray(target_landmarks)))))
        prog.parts = {"pixel": float(pix_term.data), "landmark": float(lm_term.data)}
        return total

    opt = ad.Adam(params, lr=cfg.lr, lr_overrides={"cam": cfg.lr_camera})
    best = None
    best_state = None
    history = []
    decay_at = (2 * cfg.iterations) // 3
    for it in range(cfg.iterations):
        if it == decay_at:
            opt.state.lr *= cfg.lr_decay
            opt.lr_overrides = {k: v * cfg.lr_decay for k, v in opt.lr_overrides.items()}
        loss, grads = ad.evaluate_with_gradients(prog, params)
        if not np.isfinite(loss):
            raise DatasetError(f"non-finite fit loss at iteration {it}: {prog.parts}")
        row = {"iter": it, "total": loss, "landmark_rms": prog.lm_rms, **prog.parts}
        if k:
            row["delta_norm"] = float(np.linalg.norm(params["delta"].data))
        history.append(row)
        if best is None or loss < best:
            best = loss
            best_state = {n: t.data.copy() for n, t in params.items()}
        opt.step(grads)

    delta = best_state["delta"] if k else np.zeros(0, dtype=np.float32)
    cam_vec = denormalize_fit_camera(best_state["cam"], cfg, f_ref)
    positions = init_mesh.positions
    if k:
        positions = positions + (delta.astype(np.float64) @ basis.fields.reshape(k, -1)) \
            .reshape(init_mesh.positions.shape)
    best_rows = [h for h in history if h["total"] == best]
    return FitResult(delta=delta, camera=Camera7.from_array(cam_vec),
                     mesh=FaceMesh(positions=positions, topology=topo),
                     history=history, landmark_rms=best_rows[0]["landmark_rms"])


class _FitCamScales:
    """Adapter so normalize_camera can be reused for fit parameterization."""

    def __init__(self, cfg, f_ref):
        self.translation_scale = cfg.translation_scale
        self.focal_reference = f_ref


def denormalize_fit_camera(n_vec, cfg, f_ref):
    v = np.asarray(n_vec, dtype=np.float64)
    out = np.empty(7)
    out[:3] = v[:3] * cfg.translation_scale
    out[3:6] = v[3:6]
    out[6] = np.exp(v[6]) * f_ref
    return out


# ---------------------------------------------------------------------------
# Bootstrap round
# ---------------------------------------------------------------------------


@dataclass
class BootstrapConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    reinvert: InversionConfig = field(default_factory=lambda: InversionConfig(
        iterations=80, lr=0.02, init="provided"))
    gan_steps: int = 200
    gan_lr_scale: float = 0.5
    n_workers: int = 1
    seed: int = 0


def project_albedo(mesh, target_render, camera, fallback_albedo, tol=0.008):
    """Per-vertex albedo sampled from the target where vertices are visible.

    Hidden vertices keep the fallback (synthesized) albedo.
    """
    size = target_render.shape[0]
    vis = visible_vertices(mesh, camera, size, tol=tol)
    screen, _, clipped = project_vertices(mesh, camera, size)
    uv = np.clip(screen / size, 0.0, 1.0)
    sampled = _bilinear_image(target_render, uv)
    out = np.asarray(fallback_albedo, dtype=np.float64).copy()
    use = vis & ~clipped
    out[use] = sampled[use]
    return np.clip(out, 0.0, 1.0)


def _bilinear_image(img, uv01):
    h, w = img.shape[:2]
    x = np.clip(uv01[:, 0] * w - 0.5, 0, w - 1.001)
    y = np.clip(uv01[:, 1] * h - 0.5, 0, h - 1.001)
    j0 = np.floor(x).astype(np.int64)
    i0 = np.floor(y).astype(np.int64)
    fx = (x - j0)[:, None]
    fy = (y - i0)[:, None]
    return ((1 - fy) * ((1 - fx) * img[i0, j0] + fx * img[i0, j0 + 1])
            + fy * ((1 - fx) * img[i0 + 1, j0] + fx * img[i0 + 1, j0 + 1]))


def correct_expanded_record(record, g0, r0, embedder, ctx, fit_cfg):
    """Inference + blendshape correction of one expansion record.

    Regresses a latent from the record's canonical portrait, fits
    blendshapes and camera against that portrait, projects its albedo, and
    re-rasterizes the corrected maps.
    """
    from .geometry import mesh_from_map, sample_uv

    portrait = record.canonical_render
    factor = portrait.shape[0] // embedder.cfg.resolution
    small = pc.downsample_image(portrait, factor) if factor > 1 else portrait
    e = embedder.embed(small.astype(np.float32))
    w0 = r0.regress(e)
    synth = g0.synthesize(w0)
    synth[~record.attr_map.coverage_mask] = 0.0
    synth_map = UVAttributeMap(data=synth, coverage_mask=record.attr_map.coverage_mask)
    init_mesh = mesh_from_map(synth_map, ctx.mean_face, ctx.topology)

    fit = fit_linear_3dmm(portrait, record.landmarks[0], init_mesh, ctx.basis,
                          record.cameras[0], synth[..., :3], fit_cfg)

    vals, _ = sample_uv(synth_map, ctx.topology.uv_coords)
    fallback = vals[:, :3]
    albedo = project_albedo(fit.mesh, portrait, fit.camera, fallback)
    offsets = fit.mesh.positions - ctx.mean_face.positions
    corrected = rasterize_vertex_maps(offsets, albedo, ctx.topology, ctx.map_size)
    corrected.validate()

    report = {
        "record_id": record.record_id,
        "delta_norm": float(np.linalg.norm(fit.delta)),
        "camera_shift": float(np.linalg.norm(
            fit.camera.as_array()[:6] - record.cameras[0].as_array()[:6])),
        "landmark_rms": fit.landmark_rms,
        "map_correction_l1": float(np.abs(
            corrected.data - synth_map.data).mean()),
    }
    return replace(record, attr_map=corrected), w0, e, report


_BOOT = {}


def _boot_worker_init(gen_cfg, g_arrays, reg_cfg, r_arrays, emb_cfg, emb_arrays,
                      mean_positions, topology, basis_fields, map_size, fit_cfg):
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    g = Generator.init(gen_cfg, seed=0)
    g.params.load_arrays(g_arrays)
    r = IdentityRegressor.init(reg_cfg)
    r.params.load_arrays(r_arrays)
    emb = pc.Embedder.init(emb_cfg)
    emb.params.load_arrays(emb_arrays)
    _BOOT["g"] = Generator(gen_cfg, g.params.frozen())
    _BOOT["r"] = r
    _BOOT["emb"] = emb
    _BOOT["ctx"] = ScanContext(topology=topology, base=mean_positions,
                               basis=BlendshapeBasis(fields=basis_fields),
                               mean_face=MeanFace(positions=mean_positions),
                               map_size=map_size)
    _BOOT["fit_cfg"] = fit_cfg


def _boot_worker(job):
    rec_dir = job
    record = load_record(rec_dir)
    corrected, w0, e, report = correct_expanded_record(
        record, _BOOT["g"], _BOOT["r"], _BOOT["emb"], _BOOT["ctx"], _BOOT["fit_cfg"])
    return corrected, w0, e, report


def bootstrap_round(expanded_dirs, g0, d0, r0, embedder, fnet, scan_records,
                    scan_w, mean_face, topology, basis, gan_cfg, reg_cfg, bcfg,
                    progress=None):
    """One data-expansion round: correct, fine-tune, re-invert, retrain.

    `expanded_dirs` point at stored expansion records; `scan_records` is the
    original corpus (list of DatasetRecord) and `scan_w` their previously
    inverted latents keyed by record id. Returns (g1, d1, r1, corrected
    records, report rows). With no expansion records the incoming networks
    are returned untouched.
    """
    from .invert import build_training_pairs

    if not expanded_dirs:
        return g0, d0, r0, [], []

    init_args = (g0.cfg, g0.params.state_arrays(), r0.cfg, r0.params.state_arrays(),
                 embedder.cfg, embedder.params.state_arrays(), mean_face.positions,
                 topology, basis.fields, scan_records[0].attr_map.height, bcfg.fit)
    corrected, reports = [], []
    if bcfg.n_workers <= 1:
        _boot_worker_init(*init_args)
        outs = [_boot_worker(d) for d in expanded_dirs]
    else:
        with ProcessPoolExecutor(max_workers=bcfg.n_workers,
                                 initializer=_boot_worker_init,
                                 initargs=init_args) as pool:
            outs = list(pool.map(_boot_worker, expanded_dirs, chunksize=1))
    outs.sort(key=lambda o: o[0].record_id)
    corrected = [o[0] for o in outs]
    boot_w = {o[0].record_id: o[1] for o in outs}
    reports = [o[3] for o in outs]
    if progress:
        progress({"stage": "correct", "records": len(corrected)})

    # continued adversarial training on the enlarged corpus
    all_maps = np.stack([r.attr_map.data for r in scan_records]
                        + [r.attr_map.data for r in corrected])
    ft_cfg = replace(gan_cfg, lr_g=gan_cfg.lr_g * bcfg.gan_lr_scale,
                     lr_d=gan_cfg.lr_d * bcfg.gan_lr_scale)
    g1 = Generator(g0.cfg, g0.params.copy())
    d1 = DiscriminatorTrio(d0.cfg, d0.params.copy())
    g1, d1, _hist = train_gan(all_maps, ft_cfg, seed=bcfg.seed + 17,
                              generator=g1, trio=d1, steps=bcfg.gan_steps)
    if progress:
        progress({"stage": "finetune", "steps": bcfg.gan_steps})

    # re-invert under the fine-tuned generator, warm-started
    ctx1 = InversionContext(
        generator=Generator(g1.cfg, g1.params.frozen()),
        trio=DiscriminatorTrio(d1.cfg, d1.params.frozen()),
        fnet=fnet, mean_face=mean_face, topology=topology,
        w_mean=g1.w_mean(n=2000, seed=bcfg.seed))
    jobs, inits = [], []
    for rec in scan_records:
        jobs.append((rec.record_id, rec.attr_map,
                     rec.renders[rec.input_render_index()]))
        inits.append(scan_w[rec.record_id])
    for rec in corrected:
        jobs.append((rec.record_id, rec.attr_map,
                     rec.renders[rec.input_render_index()]))
        inits.append(boot_w[rec.record_id])
    pairs, statuses = build_training_pairs(jobs, ctx1, embedder, bcfg.reinvert,
                                           n_workers=bcfg.n_workers, w_inits=inits)
    if progress:
        progress({"stage": "reinvert", "ok": len(pairs), "total": len(jobs)})

    r1, _hist = train_regressor(pairs, reg_cfg)
    if progress:
        progress({"stage": "retrain", "pairs": len(pairs)})
    return g1, d1, r1, corrected, reports
