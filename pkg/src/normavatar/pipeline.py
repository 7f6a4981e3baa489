"""Stage orchestration: run directories, artifacts, and the evaluation
benchmarks.

Stages run in a fixed order (gen-data, train-gan, build-pairs,
train-regressor, train-camera, expand, bootstrap, eval), each writing its
artifacts under the run directory and a completion marker carrying the
resolved config fingerprint. Re-running a completed stage with the same
fingerprint is a no-op; a missing prerequisite raises an error naming the
stage that produces it. A lock file guards the run directory against
concurrent writers.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from . import dataset as ds
from . import geometry as geo
from . import metrics as mx
from . import percept as pc
from .invert import InversionContext, build_training_pairs, invert, masked_l1
from .nets import DiscriminatorTrio, Generator, train_gan
from .refine import ModelBundle, RefineConfig, digitize, map_from_array, refine
from .regress import (CameraRegressor, IdentityRegressor, RegressorConfig,
                      train_camera_regressor, train_regressor)
from .render import Camera7, canonical_camera
from .config import save_config, to_dict


class PipelineError(Exception):
    pass


class MissingStageError(PipelineError):
    def __init__(self, artifact, stage):
        super().__init__(f"missing artifact {artifact!r}: run stage {stage!r} first")
        self.stage = stage


STAGE_ORDER = ["gen-data", "train-gan", "build-pairs", "train-regressor",
               "train-camera", "expand", "bootstrap", "eval"]
COMMANDS = STAGE_ORDER + ["digitize", "refine-only", "interpolate", "export"]


class PipelineRun:
    """One run directory with its resolved config."""

    def __init__(self, cfg, log=None):
        self.cfg = cfg
        self.out = cfg.out
        self.fingerprint = cfg.fingerprint()
        self.log = log or (lambda msg: print(msg, flush=True))
        os.makedirs(self.out, exist_ok=True)
        os.makedirs(self.path("stages"), exist_ok=True)
        save_config(cfg, self.path("config.yaml"))
        with open(self.path("fingerprint.txt"), "w") as fh:
            fh.write(self.fingerprint + "\n")

    # -- bookkeeping ---------------------------------------------------------

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def _marker(self, stage):
        return self.path("stages", stage.replace("-", "_") + ".json")

    def stage_done(self, stage):
        marker = self._marker(stage)
        if not os.path.exists(marker):
            return False
        with open(marker) as fh:
            info = json.load(fh)
        return info.get("fingerprint") == self.fingerprint

    def mark_done(self, stage, seconds, extra=None):
        info = {"fingerprint": self.fingerprint, "seconds": seconds}
        if extra:
            info.update(extra)
        with open(self._marker(stage), "w") as fh:
            json.dump(info, fh, indent=1, sort_keys=True)

    def stage_info(self, stage):
        with open(self._marker(stage)) as fh:
            return json.load(fh)

    def require(self, stage):
        if not self.stage_done(stage):
            raise MissingStageError(stage, stage)

    def require_file(self, relpath, stage):
        path = self.path(relpath)
        if not os.path.exists(path):
            raise MissingStageError(relpath, stage)
        return path

    # -- locking ---------------------------------------------------------------

    def acquire_lock(self, force=False):
        lock = self.path("lock")
        if force and os.path.exists(lock):
            os.remove(lock)
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PipelineError(f"run directory {self.out} is locked by another writer "
                                "(use --force to steal the lock)")
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return lock

    def release_lock(self):
        lock = self.path("lock")
        if os.path.exists(lock):
            os.remove(lock)

    # -- shared loaders ----------------------------------------------------------

    def load_assets(self):
        arrays = ad.load_tensors(self.require_file("corpus/assets.nt", "gen-data"))
        gcfg = self.cfg.geometry
        topo, base = geo.build_head_topology(gcfg.grid_rows, gcfg.grid_cols)
        mean = geo.MeanFace(positions=arrays["mean_positions"])
        basis = ds.BlendshapeBasis(fields=arrays["basis"])
        coverage = arrays["coverage_mask"]
        return topo, base, basis, mean, coverage

    def record_dirs(self, group):
        root = self.path("corpus", group)
        if not os.path.isdir(root):
            raise MissingStageError(f"corpus/{group}", "gen-data")
        return [os.path.join(root, d) for d in sorted(os.listdir(root))
                if os.path.isdir(os.path.join(root, d))]

    def load_records(self, group):
        return [ds.load_record(d) for d in self.record_dirs(group)]

    def scan_context(self, mean, topo, base, basis):
        g = self.cfg.geometry
        d = self.cfg.data
        return ds.ScanContext(topology=topo, base=base, basis=basis, mean_face=mean,
                              map_size=g.map_size, render_size=g.render_size,
                              render_sigma=g.render_sigma,
                              n_pose_variants=d.pose_variants,
                              n_expressive_variants=d.expressive_variants)

    def load_generator(self, tag="g0"):
        gcfg = replace(self.cfg.gan, map_size=self.cfg.geometry.map_size)
        gen = Generator.init(gcfg, seed=0)
        gen.params.load_arrays(ad.load_tensors(
            self.require_file(f"models/gan_{tag}.nt",
                              "train-gan" if tag == "g0" else "bootstrap")))
        return gen

    def load_trio(self, tag="d0"):
        gcfg = replace(self.cfg.gan, map_size=self.cfg.geometry.map_size)
        trio = DiscriminatorTrio.init(gcfg, seed=0)
        trio.params.load_arrays(ad.load_tensors(
            self.require_file(f"models/gan_{tag}.nt",
                              "train-gan" if tag == "d0" else "bootstrap")))
        return trio

    def load_w_mean(self):
        return ad.load_tensors(self.require_file("models/w_mean.nt", "train-gan"))["w_mean"]

    def load_fnet(self):
        fnet = pc.FeatureNet.init(seed=self.cfg.seed)
        path = self.path("models/fnet.nt")
        if os.path.exists(path):
            fnet.params.load_arrays(ad.load_tensors(path))
        return fnet

    def load_embedder(self):
        emb = pc.Embedder.init(self.cfg.embedder)
        emb.params.load_arrays(ad.load_tensors(
            self.require_file("models/embedder.nt", "build-pairs")))
        return emb

    def regressor_cfg(self):
        gcfg = self.cfg.gan
        return replace(self.cfg.regressor, embed_dim=self.cfg.embedder.embed_dim,
                       latent_rows=replace(gcfg, map_size=self.cfg.geometry.map_size)
                       .num_style_layers,
                       latent_dim=gcfg.style_dim)

    def load_regressor(self, tag="r0"):
        reg = IdentityRegressor.init(self.regressor_cfg())
        reg.params.load_arrays(ad.load_tensors(
            self.require_file(f"models/regressor_{tag}.nt",
                              "train-regressor" if tag == "r0" else "bootstrap")))
        return reg

    def load_camera_net(self):
        cam = CameraRegressor.init(self.cfg.camera)
        cam.params.load_arrays(ad.load_tensors(
            self.require_file("models/camera.nt", "train-camera")))
        return cam

    def load_pairs(self):
        arrays = ad.load_tensors(self.require_file("pairs/pairs_g0.nt", "build-pairs"))
        ids = sorted({k.split("/", 1)[1] for k in arrays if k.startswith("e/")})
        pairs = [(arrays[f"e/{i}"], arrays[f"w/{i}"]) for i in ids]
        return pairs, {i: arrays[f"w/{i}"] for i in ids}

    def bundle(self, tag="1"):
        """ModelBundle from the latest (bootstrapped) or initial networks."""
        topo, base, basis, mean, coverage = self.load_assets()
        g_tag, r_tag = ("g1", "r1") if tag == "1" else ("g0", "r0")
        return ModelBundle(
            generator=self.load_generator(g_tag).freeze(),
            embedder=self.load_embedder(),
            fnet=self.load_fnet(),
            regressor=self.load_regressor(r_tag),
            camera_net=self.load_camera_net(),
            mean_face=mean, topology=topo, w_mean=self.load_w_mean(),
            coverage_mask=coverage, fingerprint=self.fingerprint)


def _freeze_generator(gen):
    return Generator(gen.cfg, gen.params.frozen())


Generator.freeze = _freeze_generator


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------


def _identity_seed_stream(base_seed, offset):
    """Deterministic identity seeds; resample on the regenerate flag."""
    return base_seed * 1_000_003 + offset


def _sample_valid_record(ctx, seed, expressive, record_id):
    for attempt in range(8):
        params = ds.SyntheticIdentityParams.sample(seed + attempt * 10_007,
                                                   expressive=expressive)
        rec = ds.generate_synthetic_scan(params, ctx, record_id=record_id)
        if not rec.regenerate:
            return rec
    raise PipelineError(f"could not sample a valid identity for {record_id}")


_GEN = {}


def _gen_worker_init(ctx):
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    _GEN["ctx"] = ctx


def _gen_worker(job):
    group, rec_id, seed, expressive, rec_dir = job
    rec = _sample_valid_record(_GEN["ctx"], seed, expressive, rec_id)
    checksum = ds.save_record(rec, rec_dir)
    return group, rec_id, checksum


def stage_gen_data(run):
    cfg = run.cfg
    g = cfg.geometry
    topo, base = geo.build_head_topology(g.grid_rows, g.grid_cols)
    basis = ds.BlendshapeBasis(fields=ds.build_blendshape_basis(topo)).validate()

    # the mean face is the arithmetic mean of the training meshes, so build
    # the training identities first
    train_params = []
    for i in range(cfg.data.train_identities):
        seed = _identity_seed_stream(cfg.seed, i)
        for attempt in range(8):
            p = ds.SyntheticIdentityParams.sample(seed + attempt * 10_007)
            pos = ds.identity_mesh(p, topo, base)
            diag = geo.bounding_box_diagonal(pos)
            if (ds._flipped_normal_fraction(base, pos, topo) <= 0.05
                    and np.linalg.norm(pos - base, axis=1).max() <= 0.065
                    and 0.1 < diag < 0.6):
                train_params.append(p)
                break
        else:
            raise PipelineError(f"no valid identity at index {i}")
    meshes = np.stack([ds.identity_mesh(p, topo, base) for p in train_params])
    mean = geo.MeanFace(positions=meshes.mean(axis=0))

    ctx = run.scan_context(mean, topo, base, basis)
    coverage = geo.rasterize_vertex_maps(np.zeros_like(base),
                                         np.full((topo.vertex_count, 3), 0.5),
                                         topo, g.map_size).coverage_mask
    ad.save_tensors(run.path("corpus", "assets.nt"), {
        "mean_positions": mean.positions,
        "base_positions": base,
        "basis": basis.fields,
        "coverage_mask": coverage,
    })

    jobs = []
    for i, p in enumerate(train_params):
        rec_id = f"train{i:04d}"
        jobs.append(("train", rec_id, p.seed, False,
                     run.path("corpus", "train", rec_id)))
    for i in range(cfg.data.eval_identities):
        rec_id = f"eval{i:04d}"
        seed = _identity_seed_stream(cfg.seed, 500_000 + i)
        jobs.append(("eval", rec_id, seed, False, run.path("corpus", "eval", rec_id)))

    os.makedirs(run.path("corpus", "train"), exist_ok=True)
    os.makedirs(run.path("corpus", "eval"), exist_ok=True)
    n_workers = run.cfg.n_workers()
    checksums = {}
    if n_workers <= 1:
        _gen_worker_init(ctx)
        outs = [_gen_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_workers, initializer=_gen_worker_init,
                                 initargs=(ctx,)) as pool:
            outs = list(pool.map(_gen_worker, jobs, chunksize=4))
    for group, rec_id, checksum in outs:
        checksums[f"{group}/{rec_id}"] = checksum
    ds.write_manifest(run.path("corpus"), checksums, run.fingerprint)
    return {"train": cfg.data.train_identities, "eval": cfg.data.eval_identities}


def stage_train_gan(run):
    run.require("gen-data")
    records = run.load_records("train")
    maps = np.stack([r.attr_map.data for r in records])
    gcfg = replace(run.cfg.gan, map_size=run.cfg.geometry.map_size,
                   seed=run.cfg.seed)
    history_rows = []
    gen, trio, history = train_gan(
        maps, gcfg, seed=run.cfg.seed,
        progress=lambda row: run.log(f"  gan step {row['step']}: d={row['loss_d']:.3f} "
                                     f"g={row['loss_g']:.3f} acc={row['d_acc']:.2f}"))
    os.makedirs(run.path("models"), exist_ok=True)
    ad.save_params(run.path("models", "gan_g0.nt"), gen.params)
    ad.save_params(run.path("models", "gan_d0.nt"), trio.params)
    w_mean = gen.w_mean(n=10000, seed=run.cfg.seed)
    ad.save_tensors(run.path("models", "w_mean.nt"), {"w_mean": w_mean})
    _write_history_csv(run.path("models", "gan_history.csv"), history)
    return {"steps": gcfg.steps, "final": history[-1]}


def _write_history_csv(path, rows):
    import csv

    if not rows:
        return
    keys = sorted(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def stage_build_pairs(run):
    run.require("train-gan")
    topo, base, basis, mean, coverage = run.load_assets()
    records = run.load_records("train")

    # identity embedder training on per-identity variant renders
    emb_cfg = replace(run.cfg.embedder, seed=run.cfg.seed)
    factor = run.cfg.geometry.render_size // emb_cfg.resolution
    stacks = [np.stack([pc.downsample_image(r, factor) for r in rec.renders])
              for rec in records]
    embedder, ehist = pc.train_embedder(
        stacks, emb_cfg,
        progress=lambda row: run.log(f"  embedder epoch {row['epoch']}: "
                                     f"{row['triplet_loss']:.4f}"))
    os.makedirs(run.path("models"), exist_ok=True)
    ad.save_params(run.path("models", "embedder.nt"), embedder.params)
    fnet = pc.FeatureNet.init(seed=run.cfg.seed)
    ad.save_params(run.path("models", "fnet.nt"), fnet.params)

    ctx = InversionContext(
        generator=run.load_generator("g0").freeze(),
        trio=DiscriminatorTrio(replace(run.cfg.gan, map_size=run.cfg.geometry.map_size),
                               run.load_trio("d0").params.frozen()),
        fnet=fnet, mean_face=mean, topology=topo, w_mean=run.load_w_mean())
    jobs = [(rec.record_id, rec.attr_map, rec.canonical_render) for rec in records]
    done = []
    pairs, statuses = build_training_pairs(
        jobs, ctx, embedder, run.cfg.pairs_inversion, n_workers=run.cfg.n_workers(),
        progress=lambda out: (done.append(1),
                              run.log(f"  inverted {len(done)}/{len(jobs)}: {out[0]} {out[3]}")))
    os.makedirs(run.path("pairs"), exist_ok=True)
    arrays = {}
    rec_ids = sorted(statuses)
    ok_ids = [i for i in rec_ids if statuses[i].startswith("ok")]
    for rec_id, (e, w) in zip(ok_ids, pairs):
        arrays[f"e/{rec_id}"] = e
        arrays[f"w/{rec_id}"] = w
    ad.save_tensors(run.path("pairs", "pairs_g0.nt"), arrays)
    with open(run.path("pairs", "statuses.json"), "w") as fh:
        json.dump(statuses, fh, indent=1, sort_keys=True)
    return {"pairs": len(pairs), "skipped": len(jobs) - len(pairs)}


def stage_train_regressor(run):
    run.require("build-pairs")
    pairs, _ = run.load_pairs()
    reg_cfg = replace(run.regressor_cfg(), seed=run.cfg.seed)
    reg, history = train_regressor(
        pairs, reg_cfg,
        progress=lambda row: (row["epoch"] % 25 == 0) and run.log(
            f"  regressor epoch {row['epoch']}: val={row['val_mse']:.5f}"))
    ad.save_params(run.path("models", "regressor_r0.nt"), reg.params)
    _write_history_csv(run.path("models", "regressor_history.csv"), history)
    return {"epochs": len(history), "final_val": history[-1]["val_mse"]}


def stage_train_camera(run):
    run.require("gen-data")
    records = run.load_records("train")
    cam_cfg = replace(run.cfg.camera, seed=run.cfg.seed,
                      focal_reference=1.2 * run.cfg.geometry.render_size)
    factor = run.cfg.geometry.render_size // cam_cfg.resolution
    images, cams = [], []
    for rec in records:
        for img, cam in zip(rec.renders, rec.cameras):
            images.append(pc.downsample_image(img, factor) if factor > 1 else img)
            cams.append(cam.as_array())
    net, history = train_camera_regressor(
        np.stack(images), np.stack(cams), cam_cfg,
        progress=lambda row: (row["epoch"] % 20 == 0) and run.log(
            f"  camera epoch {row['epoch']}: {row['loss']:.5f}"))
    ad.save_params(run.path("models", "camera.nt"), net.params)
    _write_history_csv(run.path("models", "camera_history.csv"), history)
    return {"samples": len(images), "final": history[-1]["loss"]}


def stage_expand(run):
    run.require("train-regressor")
    topo, base, basis, mean, coverage = run.load_assets()
    cfg = run.cfg
    ctx = run.scan_context(mean, topo, base, basis)
    g0 = run.load_generator("g0").freeze()
    d0 = run.load_trio("d0")
    fnet = run.load_fnet()
    w_mean = run.load_w_mean()
    inv_ctx = InversionContext(
        generator=g0, trio=DiscriminatorTrio(d0.cfg, d0.params.frozen()),
        fnet=fnet, mean_face=mean, topology=topo, w_mean=w_mean)

    # neutralization direction from inverted neutral/expressive map pairs
    beta_cfg = replace(cfg.pairs_inversion,
                       iterations=max(40, cfg.pairs_inversion.iterations // 2))
    beta_jobs = []
    for i in range(cfg.data.beta_pairs):
        seed = _identity_seed_stream(cfg.seed, 700_000 + i)
        p_neutral = ds.SyntheticIdentityParams.sample(seed)
        rng = np.random.default_rng(seed ^ 0xBE7A)
        p_expr = replace(p_neutral, expression=ds.sample_expression(rng))
        for tag, p in (("n", p_neutral), ("x", p_expr)):
            positions = ds.identity_mesh(p, topo, base, basis)
            albedo = ds.identity_albedo(p, topo)
            amap = geo.rasterize_vertex_maps(positions - mean.positions, albedo,
                                             topo, cfg.geometry.map_size)
            beta_jobs.append((f"beta{i:03d}{tag}", amap,
                              np.zeros((cfg.embedder.resolution,
                                        cfg.embedder.resolution, 3), np.float32)))
    embedder = run.load_embedder()
    done = []
    beta_pairs, beta_status = build_training_pairs(
        beta_jobs, inv_ctx, embedder, beta_cfg, n_workers=cfg.n_workers(),
        progress=lambda out: (done.append(1),
                              run.log(f"  beta inversion {len(done)}/{len(beta_jobs)}")))
    by_id = {rec_id: w for (rec_id, (e, w)) in
             zip(sorted(k for k, v in beta_status.items() if v.startswith("ok")),
                 beta_pairs)}
    latent_pairs = []
    for i in range(cfg.data.beta_pairs):
        wn = by_id.get(f"beta{i:03d}n")
        wx = by_id.get(f"beta{i:03d}x")
        if wn is not None and wx is not None:
            latent_pairs.append((wn, wx))
    beta = ds.build_beta(latent_pairs)

    # attribute direction set from the scan inversion pairs
    pairs, _ = run.load_pairs()
    embeddings = np.stack([e for e, _w in pairs])
    latents = np.stack([w for _e, w in pairs])
    edits = ds.build_edit_vectors(w_mean, latents, embeddings, beta, k_dirs=16)
    ad.save_tensors(run.path("models", "edits.nt"), {
        "w_mean": edits.w_mean, "attr_dirs": edits.attr_dirs,
        "coeff_map": edits.coeff_map, "beta": edits.beta})

    # expansion records: fresh neutral identities whose canonical render is
    # the normalized-portrait stand-in; expressive variants play the photos
    os.makedirs(run.path("expanded"), exist_ok=True)
    jobs = []
    for i in range(cfg.data.expanded_records):
        rec_id = f"exp{i:04d}"
        seed = _identity_seed_stream(cfg.seed, 900_000 + i)
        jobs.append(("expanded", rec_id, seed, False, run.path("expanded", rec_id)))
    n_workers = cfg.n_workers()
    if n_workers <= 1:
        _gen_worker_init(ctx)
        outs = [_gen_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_workers, initializer=_gen_worker_init,
                                 initargs=(ctx,)) as pool:
            outs = list(pool.map(_gen_worker, jobs, chunksize=4))
    checksums = {rec_id: c for _g, rec_id, c in outs}
    ds.write_manifest(run.path("expanded"), checksums, run.fingerprint)
    return {"expanded": len(jobs), "beta_pairs": len(latent_pairs)}


def load_edits(run):
    arrays = ad.load_tensors(run.require_file("models/edits.nt", "expand"))
    return ds.EditVectors(w_mean=arrays["w_mean"], attr_dirs=arrays["attr_dirs"],
                          coeff_map=arrays["coeff_map"], beta=arrays["beta"])


def stage_bootstrap(run):
    run.require("expand")
    run.require("train-camera")
    topo, base, basis, mean, coverage = run.load_assets()
    cfg = run.cfg
    scan_records = run.load_records("train")
    _pairs, scan_w = run.load_pairs()
    scan_records = [r for r in scan_records if r.record_id in scan_w]
    expanded_dirs = [os.path.join(run.path("expanded"), d)
                     for d in sorted(os.listdir(run.path("expanded")))
                     if os.path.isdir(os.path.join(run.path("expanded"), d))]

    before = ds.verify_manifest(run.path("corpus"))
    gcfg = replace(cfg.gan, map_size=cfg.geometry.map_size, seed=cfg.seed)
    bcfg = replace(cfg.bootstrap, fit=cfg.fit, n_workers=cfg.n_workers(),
                   seed=cfg.seed)
    g1, d1, r1, corrected, report = ds.bootstrap_round(
        expanded_dirs, run.load_generator("g0"), run.load_trio("d0"),
        run.load_regressor("r0"), run.load_embedder(), run.load_fnet(),
        scan_records, scan_w, mean, topo, basis, gcfg,
        replace(run.regressor_cfg(), seed=cfg.seed + 1), bcfg,
        progress=lambda info: run.log(f"  bootstrap {info}"))
    after = ds.verify_manifest(run.path("corpus"))
    if before != after:
        raise PipelineError("bootstrap mutated the original corpus")

    ad.save_params(run.path("models", "gan_g1.nt"), g1.params)
    ad.save_params(run.path("models", "gan_d1.nt"), d1.params)
    ad.save_params(run.path("models", "regressor_r1.nt"), r1.params)
    os.makedirs(run.path("corrected"), exist_ok=True)
    checksums = {}
    for rec in corrected:
        checksums[rec.record_id] = ds.save_record(
            rec, run.path("corrected", rec.record_id))
    ds.write_manifest(run.path("corrected"), checksums, run.fingerprint)
    _write_history_csv(run.path("corrected", "bootstrap_report.csv"), report)
    return {"corrected": len(corrected),
            "mean_delta_norm": float(np.mean([r["delta_norm"] for r in report]))}


# ---------------------------------------------------------------------------
# Evaluation benchmarks
# ---------------------------------------------------------------------------

_EVAL = {}


def _bundle_payload(run, tag="1"):
    topo, base, basis, mean, coverage = run.load_assets()
    g_tag, r_tag = ("g1", "r1") if tag == "1" else ("g0", "r0")
    gan_cfg = replace(run.cfg.gan, map_size=run.cfg.geometry.map_size)
    return {
        "gan_cfg": gan_cfg,
        "g": ad.load_tensors(run.path("models", f"gan_{g_tag}.nt")),
        "g0": ad.load_tensors(run.path("models", "gan_g0.nt")),
        "d0": ad.load_tensors(run.path("models", "gan_d0.nt")),
        "emb_cfg": run.cfg.embedder,
        "emb": ad.load_tensors(run.path("models", "embedder.nt")),
        "fnet": ad.load_tensors(run.path("models", "fnet.nt")),
        "reg_cfg": run.regressor_cfg(),
        "r": ad.load_tensors(run.path("models", f"regressor_{r_tag}.nt")),
        "r0": ad.load_tensors(run.path("models", "regressor_r0.nt")),
        "cam_cfg": replace(run.cfg.camera,
                           focal_reference=1.2 * run.cfg.geometry.render_size),
        "cam": ad.load_tensors(run.path("models", "camera.nt")),
        "mean": mean.positions,
        "base": base,
        "basis": basis.fields,
        "topology": topo,
        "w_mean": run.load_w_mean(),
        "coverage": coverage,
        "seed": run.cfg.seed,
        "fingerprint": run.fingerprint,
        "inversion": run.cfg.inversion,
        "refine": run.cfg.refine,
        "fit": run.cfg.fit,
    }


def _eval_worker_init(payload):
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    p = payload
    gen = Generator.init(p["gan_cfg"], seed=0)
    gen.params.load_arrays(p["g"])
    gen0 = Generator.init(p["gan_cfg"], seed=0)
    gen0.params.load_arrays(p["g0"])
    trio0 = DiscriminatorTrio.init(p["gan_cfg"], seed=0)
    trio0.params.load_arrays(p["d0"])
    emb = pc.Embedder.init(p["emb_cfg"])
    emb.params.load_arrays(p["emb"])
    fnet = pc.FeatureNet.init()
    fnet.params.load_arrays(p["fnet"])
    reg = IdentityRegressor.init(p["reg_cfg"])
    reg.params.load_arrays(p["r"])
    reg0 = IdentityRegressor.init(p["reg_cfg"])
    reg0.params.load_arrays(p["r0"])
    cam_net = CameraRegressor.init(p["cam_cfg"])
    cam_net.params.load_arrays(p["cam"])
    mean = geo.MeanFace(positions=p["mean"])
    topo = p["topology"]
    _EVAL["bundle"] = ModelBundle(
        generator=gen.freeze(), embedder=emb, fnet=fnet, regressor=reg,
        camera_net=cam_net, mean_face=mean, topology=topo, w_mean=p["w_mean"],
        coverage_mask=p["coverage"], fingerprint=p["fingerprint"])
    _EVAL["bundle0"] = ModelBundle(
        generator=gen0.freeze(), embedder=emb, fnet=fnet, regressor=reg0,
        camera_net=cam_net, mean_face=mean, topology=topo, w_mean=p["w_mean"],
        coverage_mask=p["coverage"], fingerprint=p["fingerprint"])
    _EVAL["inv_ctx"] = InversionContext(
        generator=gen0.freeze(),
        trio=DiscriminatorTrio(p["gan_cfg"], trio0.params.frozen()),
        fnet=fnet, mean_face=mean, topology=topo, w_mean=p["w_mean"])
    _EVAL["basis"] = ds.BlendshapeBasis(fields=p["basis"])
    _EVAL["cfg"] = p


def _map_l1_pair(gen, w, target_map, coverage):
    arr = gen.synthesize(w)
    return masked_l1(arr, target_map.data, target_map.coverage_mask & coverage)


def _position_rmse_between(map_a_arr, target_map, mean, topo, coverage):
    a = map_from_array(map_a_arr, coverage)
    mesh_a = geo.mesh_from_map(a, mean, topo)
    mesh_b = geo.mesh_from_map(target_map, mean, topo)
    diag = geo.bounding_box_diagonal(mesh_b.positions)
    err = np.linalg.norm(mesh_a.positions - mesh_b.positions, axis=1)
    return float(np.sqrt((err ** 2).mean()) / diag)


def _eval_worker(job):
    kind = job["kind"]
    p = _EVAL["cfg"]
    bundle = _EVAL["bundle"]
    inv_ctx = _EVAL["inv_ctx"]
    mean = bundle.mean_face
    topo = bundle.topology
    coverage = bundle.coverage_mask

    if kind == "invert_target":
        target = map_from_array(job["map"], coverage)
        res = invert(target, inv_ctx, p["inversion"])
        arr = inv_ctx.generator.synthesize(res.w)
        return {
            "case": job["case"],
            "inv_l1": masked_l1(arr, target.data, target.coverage_mask),
            "inv_pos_rmse_frac": _position_rmse_between(arr, target, mean, topo, coverage),
            "inv_loss": res.loss,
        }

    if kind == "regression_case":
        target = geo.UVAttributeMap(data=job["map"], coverage_mask=job["mask"])
        res = invert(target, inv_ctx, p["inversion"])
        floor_arr = inv_ctx.generator.synthesize(res.w)
        floor = masked_l1(floor_arr, target.data, target.coverage_mask)
        factor = job["render"].shape[0] // bundle.embedder.cfg.resolution
        e = bundle.embedder.embed(pc.downsample_image(job["render"], factor))
        out = {"case": job["case"], "floor_l1": floor}
        for tag, b in (("r1", bundle), ("r0", _EVAL["bundle0"])):
            w = b.regressor.regress(e)
            arr = b.generator.synthesize(w)
            out[f"{tag}_l1"] = masked_l1(arr, target.data, target.coverage_mask)
        return out

    if kind == "recovery_case":
        image = job["render"]
        target = geo.UVAttributeMap(data=job["map"], coverage_mask=job["mask"])
        factor = image.shape[0] // bundle.embedder.cfg.resolution
        e = bundle.embedder.embed(pc.downsample_image(image, factor))
        w_init = bundle.regressor.regress(e)
        cfac = image.shape[0] // bundle.camera_net.cfg.resolution
        cam = bundle.camera_net.regress(pc.downsample_image(image, cfac))
        rcfg = p["refine"]
        variants = {
            "full": rcfg,
            "mean_init": replace(rcfg, init="mean"),
            "no_percept": replace(rcfg, lambda_percept=0.0),
            "no_id": replace(rcfg, lambda_id=0.0),
            "no_wreg": replace(rcfg, w_anchor_weight=0.0)
            if hasattr(rcfg, "w_anchor_weight") else replace(rcfg),
        }
        out = {"case": job["case"]}
        pre_l1 = masked_l1(bundle.generator.synthesize(w_init), target.data,
                           target.coverage_mask)
        out["pre_l1"] = pre_l1
        for name, vcfg in variants.items():
            res = refine(w_init, image, cam, bundle, vcfg)
            arr = bundle.generator.synthesize(res.w)
            out[f"{name}_l1"] = masked_l1(arr, target.data, target.coverage_mask)
            out[f"{name}_loss0"] = res.history[0]["total"]
            out[f"{name}_loss"] = res.loss
            if name == "full":
                amap = map_from_array(arr, coverage)
                mesh = geo.mesh_from_map(amap, mean, topo)
                gt_mesh = geo.mesh_from_map(target, mean, topo)
                out["geo_mm"] = mx.point_to_mesh_distance(mesh, gt_mesh)
                out["tex_l1"] = mx.texture_l1(amap, target)
        return out

    if kind == "digitize_case":
        res = digitize(job["render"], bundle, p["refine"])
        return {"case": job["case"], "identity": job["identity"],
                "post_map": res.post_map.data, "pre_map": res.pre_map.data,
                "final_loss": res.loss}

    if kind == "neutralize_case":
        edits = ds.EditVectors(**job["edits"])
        factor = job["input"].shape[0] // bundle.embedder.cfg.resolution
        e = bundle.embedder.embed(pc.downsample_image(job["input"], factor))
        alpha = ds.attribute_offset(edits, e)
        basis = _EVAL["basis"]
        out = {"case": job["case"]}
        for tag, w in (("before", edits.w_mean + alpha),
                       ("after", ds.latent_normalize(None, None, edits, alpha=alpha))):
            arr = bundle.generator.synthesize(w)
            amap = map_from_array(arr, coverage)
            mesh = geo.mesh_from_map(amap, mean, topo)
            fit = ds.fit_linear_3dmm(job["portrait"], job["landmarks"], mesh, basis,
                                     Camera7.from_array(job["camera"]),
                                     arr[..., :3], p["fit"])
            out[f"delta_{tag}"] = float(np.linalg.norm(fit.delta))
        return out

    raise PipelineError(f"unknown eval job kind {kind!r}")


def _run_eval_jobs(run, payload, jobs):
    n_workers = run.cfg.n_workers()
    results = []
    if n_workers <= 1:
        _eval_worker_init(payload)
        for j in jobs:
            results.append(_eval_worker(j))
            run.log(f"  eval {j['kind']} {j['case']}")
    else:
        with ProcessPoolExecutor(max_workers=n_workers, initializer=_eval_worker_init,
                                 initargs=(payload,)) as pool:
            for out in pool.map(_eval_worker, jobs, chunksize=1):
                results.append(out)
                run.log(f"  eval done {out['case']}")
    results.sort(key=lambda r: str(r["case"]))
    return results
