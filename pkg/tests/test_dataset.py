import numpy as np
import pytest

from normavatar import dataset as ds
from normavatar import geometry as geo
from normavatar import render as rn


@pytest.fixture(scope="module")
def scan_ctx():
    topo, base = geo.build_head_topology(rows=27, cols=54)
    basis = ds.BlendshapeBasis(fields=ds.build_blendshape_basis(topo)).validate()
    return ds.ScanContext(topology=topo, base=base, basis=basis,
                          mean_face=geo.MeanFace(positions=base.copy()),
                          map_size=64, render_size=64,
                          n_pose_variants=2, n_expressive_variants=1)


class TestIdentitySampling:
    def test_coefficients_bounded(self):
        for seed in range(30):
            p = ds.SyntheticIdentityParams.sample(seed, expressive=seed % 2 == 0)
            p.validate()

    def test_out_of_bounds_rejected(self):
        p = ds.SyntheticIdentityParams(seed=0, shape_coeffs=np.full(8, 4.0),
                                       palette=np.zeros(4))
        with pytest.raises(ds.DatasetError):
            p.validate()

    def test_identity_mesh_deterministic(self, scan_ctx):
        p = ds.SyntheticIdentityParams.sample(5)
        m1 = ds.identity_mesh(p, scan_ctx.topology, scan_ctx.base)
        m2 = ds.identity_mesh(p, scan_ctx.topology, scan_ctx.base)
        assert np.array_equal(m1, m2)

    def test_zero_coefficients_give_base_head(self, scan_ctx):
        p = ds.SyntheticIdentityParams(seed=0, shape_coeffs=np.zeros(8),
                                       palette=np.zeros(4))
        m = ds.identity_mesh(p, scan_ctx.topology, scan_ctx.base)
        assert np.array_equal(m, scan_ctx.base)


class TestBlendshapes:
    def test_zero_coefficients_zero_offset(self, scan_ctx):
        basis = scan_ctx.basis
        pos = scan_ctx.base.copy()
        assert np.array_equal(basis.apply(pos, np.zeros(basis.k)), pos)

    def test_affine_in_coefficients(self, scan_ctx):
        basis = scan_ctx.basis
        rng = np.random.default_rng(0)
        pos = scan_ctx.base
        d1 = rng.uniform(-1, 1, basis.k)
        d2 = rng.uniform(-1, 1, basis.k)
        lhs = basis.apply(pos, d1 + d2)
        rhs = basis.apply(pos, d1) + basis.apply(pos, d2) - pos
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_wrong_coefficient_count_rejected(self, scan_ctx):
        with pytest.raises(ds.DatasetError):
            scan_ctx.basis.apply(scan_ctx.base, np.zeros(3))


class TestGenerateScan:
    def test_bit_identical_per_seed(self, scan_ctx):
        p = ds.SyntheticIdentityParams.sample(11)
        r1 = ds.generate_synthetic_scan(p, scan_ctx)
        r2 = ds.generate_synthetic_scan(p, scan_ctx)
        assert np.array_equal(r1.attr_map.data, r2.attr_map.data)
        for a, b in zip(r1.renders, r2.renders):
            assert np.array_equal(a, b)
        for a, b in zip(r1.landmarks, r2.landmarks):
            assert np.array_equal(a, b)

    def test_landmarks_equal_projection(self, scan_ctx):
        p = ds.SyntheticIdentityParams.sample(12)
        rec = ds.generate_synthetic_scan(p, scan_ctx)
        # the canonical render keeps the record's own geometry
        positions = ds.identity_mesh(p, scan_ctx.topology, scan_ctx.base,
                                     scan_ctx.basis)
        mesh = geo.FaceMesh(positions=positions, topology=scan_ctx.topology)
        screen, _, _ = rn.project_vertices(mesh, rec.cameras[0], scan_ctx.render_size)
        expected = screen[scan_ctx.topology.landmark_indices]
        assert np.array_equal(rec.landmarks[0], expected)

    def test_render_structure(self, scan_ctx):
        rec = ds.generate_synthetic_scan(ds.SyntheticIdentityParams.sample(13), scan_ctx)
        assert rec.kinds[0] == "canonical"
        assert rec.kinds.count("variant") == 2
        assert rec.kinds.count("expressive") == 1
        assert rec.input_render_index() == 3
        assert all(r.shape == (64, 64, 3) for r in rec.renders)
        rec.attr_map.validate()

    def test_degenerate_parameters_flagged(self, scan_ctx):
        p = ds.SyntheticIdentityParams(seed=1, shape_coeffs=np.full(8, -3.0),
                                       palette=np.zeros(4))
        rec = ds.generate_synthetic_scan(p, scan_ctx)
        assert rec.regenerate  # folded triangles near the jaw
        ok = ds.generate_synthetic_scan(ds.SyntheticIdentityParams.sample(2), scan_ctx)
        assert not ok.regenerate

    def test_matches_golden_fixture(self, scan_ctx):
        import pathlib
        golden_path = pathlib.Path(__file__).parent / "data" / "base_head_map.npz"
        p = ds.SyntheticIdentityParams(seed=0, shape_coeffs=np.zeros(8),
                                       palette=np.zeros(4))
        rec = ds.generate_synthetic_scan(p, scan_ctx, record_id="golden")
        if not golden_path.exists():
            pytest.skip("golden fixture not generated yet")
        golden = np.load(golden_path)
        assert np.abs(rec.attr_map.data - golden["map"]).max() < 1e-6
        assert np.array_equal(rec.attr_map.coverage_mask, golden["mask"])


class TestCorpusIO:
    def test_record_roundtrip(self, scan_ctx, tmp_path):
        rec = ds.generate_synthetic_scan(
            ds.SyntheticIdentityParams.sample(20, expressive=True), scan_ctx,
            record_id="rt")
        checksum = ds.save_record(rec, tmp_path / "rt")
        back = ds.load_record(tmp_path / "rt")
        assert back.record_id == rec.record_id
        assert np.array_equal(back.attr_map.data, rec.attr_map.data)
        assert np.array_equal(back.params.expression, rec.params.expression)
        assert back.kinds == rec.kinds
        assert np.allclose(back.cameras[1].as_array(), rec.cameras[1].as_array())
        assert checksum == ds.record_checksum(tmp_path / "rt")

    def test_manifest_detects_mutation(self, scan_ctx, tmp_path):
        rec = ds.generate_synthetic_scan(ds.SyntheticIdentityParams.sample(21),
                                         scan_ctx, record_id="m0")
        checksums = {"m0": ds.save_record(rec, tmp_path / "m0")}
        ds.write_manifest(tmp_path, checksums)
        assert ds.verify_manifest(tmp_path) == set()
        # mutate a stored tensor file
        path = tmp_path / "m0" / "record.nt"
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF
        path.write_bytes(bytes(blob))
        assert ds.verify_manifest(tmp_path) == {"m0"}


class TestEditVectors:
    def make_edits(self, l=4, d=8, e=16, n=24, seed=0):
        rng = np.random.default_rng(seed)
        w_mean = rng.normal(size=(l, d)).astype(np.float32)
        lat = w_mean[None] + 0.3 * rng.normal(size=(n, l, d))
        emb = rng.normal(size=(n, e))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        beta = 0.1 * rng.normal(size=(l, d)).astype(np.float32)
        return ds.build_edit_vectors(w_mean, lat, emb, beta, k_dirs=6), w_mean

    def test_zero_edits_return_mean(self):
        edits, w_mean = self.make_edits()
        edits.beta = np.zeros_like(edits.beta)
        out = ds.latent_normalize(None, None, edits)
        assert np.array_equal(out, w_mean)

    def test_offsets_compose_additively(self):
        edits, w_mean = self.make_edits()
        rng = np.random.default_rng(1)
        a1 = rng.normal(size=w_mean.shape).astype(np.float32)
        a2 = rng.normal(size=w_mean.shape).astype(np.float32)
        w12 = ds.latent_normalize(None, None, edits, alpha=a1 + a2)
        w1 = ds.latent_normalize(None, None, edits, alpha=a1)
        w2 = ds.latent_normalize(None, None, edits, alpha=a2)
        assert np.allclose(w12, w1 + w2 - edits.w_mean - edits.beta, atol=1e-6)

    def test_normalize_assembles_offset_exactly(self):
        edits, _ = self.make_edits()
        rng = np.random.default_rng(2)
        e = rng.normal(size=16)
        e /= np.linalg.norm(e)
        out = ds.latent_normalize(None, e, edits)
        alpha = ds.attribute_offset(edits, e)
        assert np.allclose(out, edits.w_mean + alpha + edits.beta, atol=1e-7)

    def test_ridge_map_reconstructs_training_offsets(self):
        # with more samples than directions the fit should capture a linear
        # relation between embeddings and latent offsets
        rng = np.random.default_rng(3)
        l, d, e, n = 2, 6, 8, 64
        w_mean = np.zeros((l, d), np.float32)
        m = rng.normal(size=(e, l * d)) * 0.3
        emb = rng.normal(size=(n, e))
        lat = (emb @ m).reshape(n, l, d)
        edits = ds.build_edit_vectors(w_mean, lat, emb, np.zeros((l, d)), k_dirs=8)
        err = []
        for i in range(8):
            alpha = ds.attribute_offset(edits, emb[i])
            err.append(np.abs(alpha - lat[i]).max())
        assert np.mean(err) < 0.05


class TestBeta:
    def test_mean_of_differences(self):
        rng = np.random.default_rng(0)
        pairs = [(rng.normal(size=(2, 3)), rng.normal(size=(2, 3))) for _ in range(5)]
        beta = ds.build_beta(pairs)
        expect = np.mean([a - b for a, b in pairs], axis=0)
        assert np.allclose(beta, expect, atol=1e-6)

    def test_empty_pairs_rejected(self):
        with pytest.raises(ds.DatasetError):
            ds.build_beta([])


@pytest.fixture(scope="module")
def fit_world():
    topo, base = geo.build_head_topology(rows=27, cols=54)
    basis = ds.BlendshapeBasis(fields=ds.build_blendshape_basis(topo))
    params = ds.SyntheticIdentityParams.sample(7)
    positions = ds.identity_mesh(params, topo, base)
    albedo_v = ds.identity_albedo(params, topo)
    amap = geo.rasterize_vertex_maps(positions - base, albedo_v, topo, 64)
    mesh = geo.FaceMesh(positions=positions, topology=topo)
    return topo, basis, mesh, amap


class TestFit:
    def render_target(self, mesh, amap, cam, size):
        cfg = rn.RenderConfig(image_size=size, sigma=0.5, cull_backfaces=True)
        img = rn.composite(rn.render(mesh, amap.data[..., :3], cam, cfg),
                           np.full((size, size, 3), ds.BACKDROP))
        screen, _, _ = rn.project_vertices(mesh, cam, size)
        return img, screen[mesh.topology.landmark_indices]

    def test_fixed_point_zero_delta(self, fit_world):
        topo, basis, mesh, amap = fit_world
        size = 64
        cam = rn.canonical_camera(size)
        target, lm = self.render_target(mesh, amap, cam, size)
        fit = ds.fit_linear_3dmm(target, lm, mesh, basis, cam, amap.data[..., :3],
                                 ds.FitConfig(iterations=80))
        assert np.linalg.norm(fit.delta) < 1e-2
        assert fit.landmark_rms < 0.5

    def test_recovers_known_expression(self, fit_world):
        topo, basis, mesh, amap = fit_world
        size = 96
        cam = rn.canonical_camera(size)
        rng = np.random.default_rng(9)
        delta_star = np.zeros(basis.k)
        delta_star[:3] = rng.uniform(0, 1.0, 3)
        delta_star[4] = rng.uniform(0, 0.5)
        expr = geo.FaceMesh(positions=basis.apply(mesh.positions, delta_star),
                            topology=topo)
        target, lm = self.render_target(expr, amap, cam, size)
        fit = ds.fit_linear_3dmm(target, lm, mesh, basis, cam, amap.data[..., :3],
                                 ds.FitConfig(iterations=240))
        assert np.abs(fit.delta - delta_star).max() < 0.05

    def test_best_so_far_landmark_error_nonincreasing(self, fit_world):
        topo, basis, mesh, amap = fit_world
        size = 64
        cam = rn.Camera7(tz=-0.52, ry=0.05, f=1.2 * size)
        target, lm = self.render_target(mesh, amap, rn.canonical_camera(size), size)
        fit = ds.fit_linear_3dmm(target, lm, mesh, basis, cam, amap.data[..., :3],
                                 ds.FitConfig(iterations=40))
        best = [h["landmark_rms"] for h in fit.history]
        cummin = np.minimum.accumulate(best)
        assert (np.diff(cummin) <= 1e-12).all()

    def test_empty_basis_fits_camera_only(self, fit_world):
        topo, basis, mesh, amap = fit_world
        size = 64
        cam_true = rn.canonical_camera(size)
        cam_off = rn.Camera7(tx=0.01, tz=-0.53, ry=0.04, f=1.25 * size)
        target, lm = self.render_target(mesh, amap, cam_true, size)
        empty = ds.BlendshapeBasis(fields=np.zeros((0, topo.vertex_count, 3)))
        fit = ds.fit_linear_3dmm(target, lm, mesh, empty, cam_off,
                                 amap.data[..., :3], ds.FitConfig(iterations=150))
        assert fit.delta.shape == (0,)
        assert fit.landmark_rms < 1.0

    def test_mesh_affine_in_delta(self, fit_world):
        topo, basis, mesh, amap = fit_world
        rng = np.random.default_rng(4)
        d = rng.uniform(-0.5, 0.5, basis.k)
        applied = basis.apply(mesh.positions, d)
        manual = mesh.positions + np.tensordot(d, basis.fields, axes=1)
        assert np.array_equal(applied, manual)

    def test_too_few_landmarks_rejected(self, fit_world):
        topo, basis, mesh, amap = fit_world
        with pytest.raises(ds.DatasetError):
            ds.fit_linear_3dmm(np.zeros((64, 64, 3)), np.zeros((3, 2)), mesh,
                               basis, rn.canonical_camera(64), amap.data[..., :3])


class TestProjectAlbedo:
    def test_visible_vertices_take_target_colors(self, scan_ctx):
        p = ds.SyntheticIdentityParams.sample(30)
        positions = ds.identity_mesh(p, scan_ctx.topology, scan_ctx.base)
        albedo = ds.identity_albedo(p, scan_ctx.topology)
        mesh = geo.FaceMesh(positions=positions, topology=scan_ctx.topology)
        amap = geo.rasterize_vertex_maps(positions - scan_ctx.base, albedo,
                                         scan_ctx.topology, 64)
        size = 96
        cam = rn.canonical_camera(size)
        cfg = rn.RenderConfig(image_size=size, sigma=0.35, cull_backfaces=True)
        target = rn.composite(rn.render(mesh, amap.data[..., :3], cam, cfg),
                              np.full((size, size, 3), ds.BACKDROP))
        out = ds.project_albedo(mesh, target, cam, np.full_like(albedo, 0.5),
                                tol=0.004)
        vis = rn.visible_vertices(mesh, cam, size, tol=0.004)
        err = np.abs(out[vis] - albedo[vis]).mean()
        assert err < 0.06
        # hidden vertices keep the fallback
        assert np.allclose(out[~vis], 0.5, atol=1e-9)


class TestBootstrapEmptySet:
    def test_returns_inputs_untouched(self, tiny_world):
        out = ds.bootstrap_round(
            [], tiny_world["gen"], tiny_world["trio"], tiny_world["regressor"],
            tiny_world["embedder"], tiny_world["fnet"], [], {},
            tiny_world["mean"], tiny_world["topo"], None,
            tiny_world["gan_cfg"], None, ds.BootstrapConfig())
        g1, d1, r1, corrected, report = out
        assert g1 is tiny_world["gen"]
        assert d1 is tiny_world["trio"]
        assert r1 is tiny_world["regressor"]
        assert corrected == [] and report == []
