import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from normavatar import geometry as geo
from normavatar import percept as pc
from normavatar.invert import InversionContext
from normavatar.nets import DiscriminatorTrio, GanConfig, Generator
from normavatar.refine import ModelBundle
from normavatar.regress import CameraConfig, CameraRegressor, IdentityRegressor, RegressorConfig


@pytest.fixture(scope="session")
def tiny_world():
    """Small untrained model stack over a coarse head, for contract tests."""
    gan_cfg = GanConfig(map_size=16, latent_dim=8, style_dim=8,
                        channel_base=64, channel_cap=32, seed=2)
    gen = Generator.init(gan_cfg, seed=2)
    trio = DiscriminatorTrio.init(gan_cfg, seed=2)
    fnet = pc.FeatureNet.init(seed=2)
    topo, base = geo.build_head_topology(rows=9, cols=14)
    mean = geo.MeanFace(positions=base)
    w_mean = gen.w_mean(n=400, seed=2)
    emb_cfg = pc.EmbedderConfig(resolution=32, embed_dim=16, widths=(8, 16, 16), seed=2)
    embedder = pc.Embedder.init(emb_cfg, seed=2)
    reg_cfg = RegressorConfig(embed_dim=16, latent_rows=gan_cfg.num_style_layers,
                              latent_dim=8, hidden=32, seed=2)
    regressor = IdentityRegressor.init(reg_cfg, seed=2)
    cam_cfg = CameraConfig(resolution=32, widths=(8, 16, 16), hidden=32,
                           focal_reference=1.2 * 64, seed=2)
    camera_net = CameraRegressor.init(cam_cfg, seed=2)

    offsets = np.zeros_like(base)
    albedo = np.full((topo.vertex_count, 3), 0.5)
    amap = geo.rasterize_vertex_maps(offsets, albedo, topo, gan_cfg.map_size)

    ctx = InversionContext(
        generator=Generator(gan_cfg, gen.params.frozen()),
        trio=DiscriminatorTrio(gan_cfg, trio.params.frozen()),
        fnet=fnet, mean_face=mean, topology=topo, w_mean=w_mean)
    bundle = ModelBundle(
        generator=Generator(gan_cfg, gen.params.frozen()),
        embedder=embedder, fnet=fnet, regressor=regressor,
        camera_net=camera_net, mean_face=mean, topology=topo,
        w_mean=w_mean, coverage_mask=amap.coverage_mask,
        fingerprint="tiny-test")
    return {"gan_cfg": gan_cfg, "gen": gen, "trio": trio, "fnet": fnet,
            "topo": topo, "mean": mean, "w_mean": w_mean,
            "embedder": embedder, "regressor": regressor,
            "camera_net": camera_net, "ctx": ctx, "bundle": bundle,
            "coverage": amap.coverage_mask}
