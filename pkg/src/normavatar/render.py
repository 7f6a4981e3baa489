"""Differentiable perspective renderer with a seven-parameter camera.

Projection: intrinsic X->Y->Z Euler rotation, translation, perspective
divide with the camera looking down -Z, focal length in pixels, principal
point at the image center. Rasterization is soft: a triangle's coverage at
a pixel is exp(-(min(d, 0))^2 / sigma^2) for the signed screen distance d
to its boundary (positive inside), and per-pixel contributions are
alpha-composited front to back. Interior pixels therefore reproduce a hard
z-buffer exactly while silhouettes stay differentiable with respect to
vertex positions, the albedo map, and the camera.

The rasterizer is a single custom autodiff op with a hand-written backward
pass; everything upstream (projection, shading) is composed from engine
primitives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import (FaceMesh, GeometryError, barycentric_at_points,
                       mesh_positions_t, triangle_pixel_candidates)


class RenderError(Exception):
    pass


DEPTH_EPS = 1e-4  # meters; vertices closer than this are flagged clipped
_W_MIN = 5e-3     # coverage below this is dropped from compositing


@dataclass
class Camera7:
    """[tx, ty, tz, rx, ry, rz, f]: translation (m), rotation (rad), focal (px)."""

    tx: float = 0.0
    ty: float = 0.0
    tz: float = -0.5
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    f: float = 150.0

    def as_array(self):
        return np.array([self.tx, self.ty, self.tz, self.rx, self.ry, self.rz, self.f],
                        dtype=np.float64)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64).reshape(7)
        return cls(*[float(v) for v in arr])

    def validate(self):
        if not np.isfinite(self.as_array()).all():
            raise RenderError("non-finite camera parameters")
        if self.f <= 0:
            raise RenderError("focal length must be positive")
        return self


@dataclass
class DirectionalLight:
    direction: tuple = (0.3, 0.4, 0.85)  # unit direction from surface toward light
    ambient: float = 0.35


@dataclass
class RenderConfig:
    image_size: int = 128
    sigma: float = 1.5                       # screen-space softness, pixels
    background: tuple = (0.12, 0.12, 0.14)
    lighting: DirectionalLight | None = None  # None renders unlit albedo
    max_layers: int = 32
    # safe to enable for closed consistently-wound surfaces; halves the work
    cull_backfaces: bool = False

    def validate(self):
        if self.sigma <= 0:
            raise RenderError("sigma must be positive")
        if self.image_size < 16:
            raise RenderError("image size must be at least 16")
        return self


@dataclass
class RenderedImage:
    rgb: np.ndarray    # (S, S, 3) in [0, 1]
    alpha: np.ndarray  # (S, S) in [0, 1]

    def validate(self):
        if not (np.isfinite(self.rgb).all() and np.isfinite(self.alpha).all()):
            raise RenderError("non-finite rendered image")
        if self.alpha.min() < -1e-6 or self.alpha.max() > 1 + 1e-6:
            raise RenderError("alpha outside [0, 1]")
        return self


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def project_vertices_t(positions, cam, image_size):
    """Graph-mode projection; returns (screen_xy, depth, clipped mask).

    `positions` is a (V, 3) tensor, `cam` a (7,) tensor. Screen coordinates
    are in pixel units with pixel (i, j) centered at (j + 0.5, i + 0.5);
    depth is the positive distance along the viewing direction.
    """
    positions = ad.as_tensor(positions)
    cam = ad.as_tensor(cam)
    x, y, z = positions[:, 0], positions[:, 1], positions[:, 2]
    sx_, cx_ = ad.sin(cam[3]), ad.cos(cam[3])
    sy_, cy_ = ad.sin(cam[4]), ad.cos(cam[4])
    sz_, cz_ = ad.sin(cam[5]), ad.cos(cam[5])
    # intrinsic X->Y->Z: p_cam = Rx @ Ry @ Rz @ p + t
    x1 = cz_ * x - sz_ * y
    y1 = sz_ * x + cz_ * y
    z1 = z
    x2 = cy_ * x1 + sy_ * z1
    z2 = cy_ * z1 - sy_ * x1
    y2 = y1
    y3 = cx_ * y2 - sx_ * z2
    z3 = sx_ * y2 + cx_ * z2
    x3 = x2
    xc = x3 + cam[0]
    yc = y3 + cam[1]
    zc = z3 + cam[2]
    depth = ad.neg(zc)
    clipped = depth.data <= DEPTH_EPS
    safe = (~clipped).astype(depth.dtype)
    # clipped vertices keep a -1 sentinel depth so rasterization culls them
    depth_safe = depth * safe - ad.as_tensor((1.0 - safe).astype(depth.dtype))
    half = 0.5 * image_size
    sx_px = cam[6] * (xc / depth_safe) + half
    sy_px = ad.neg(cam[6] * (yc / depth_safe)) + half
    screen = ad.stack([sx_px, sy_px], axis=1)
    return screen, depth_safe, clipped


def project_vertices(mesh, cam, image_size):
    """Numpy projection of a mesh; returns (screen_xy, depth, clipped)."""
    cam.validate()
    screen, depth, clipped = project_vertices_t(
        ad.as_tensor(mesh.positions.astype(np.float64)),
        ad.as_tensor(cam.as_array()), image_size)
    return screen.data, depth.data, clipped


def face_shades_t(positions, topology, light):
    """Per-face lambertian shade factors from world-space normals."""
    tris = topology.triangles
    pa = ad.gather_rows(positions, tris[:, 0])
    pb = ad.gather_rows(positions, tris[:, 1])
    pc = ad.gather_rows(positions, tris[:, 2])
    e1 = pb - pa
    e2 = pc - pa
    nx = e1[:, 1] * e2[:, 2] - e1[:, 2] * e2[:, 1]
    ny = e1[:, 2] * e2[:, 0] - e1[:, 0] * e2[:, 2]
    nz = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    norm = ad.sqrt(nx * nx + ny * ny + nz * nz + 1e-20)
    ldir = np.asarray(light.direction, dtype=np.float64)
    ldir = ldir / np.linalg.norm(ldir)
    lam = ad.relu((nx * ldir[0] + ny * ldir[1] + nz * ldir[2]) / norm)
    return lam * (1.0 - light.ambient) + light.ambient


# ---------------------------------------------------------------------------
# Soft rasterization custom op
# ---------------------------------------------------------------------------


def _segment_distance(edge_a, edge_v, faces, px, py):
    """Distance from points to the nearest edge segment of indexed faces.

    `edge_a` and `edge_v` are per-face (F, 3, 2) edge origins and vectors.
    Returns (dist, edge index, clamped parameter t, unit vector from the
    closest boundary point to the query point).
    """
    dt = px.dtype
    p = np.stack([px, py], axis=1).astype(dt)[:, None, :]   # (n, 1, 2)
    a = edge_a[faces]                                        # (n, 3, 2)
    ab = edge_v[faces]
    denom = np.square(ab).sum(axis=2)
    t = ((p - a) * ab).sum(axis=2) / np.maximum(denom, 1e-20)
    np.clip(t, 0.0, 1.0, out=t)
    dvec = p - a - t[:, :, None] * ab                        # (n, 3, 2)
    dist2 = np.square(dvec).sum(axis=2)
    best_edge = dist2.argmin(axis=1).astype(np.int8)
    rows = np.arange(len(faces))
    best = np.sqrt(dist2[rows, best_edge])
    best_t = t[rows, best_edge].astype(dt)
    with np.errstate(invalid="ignore", divide="ignore"):
        best_u = (dvec[rows, best_edge] / np.maximum(best[:, None], 1e-20)).astype(dt)
    return best.astype(dt), best_edge, best_t, best_u


def _bary_vertex_grads(xy, tri_verts, px, py, bary, g_bary):
    """Accumulate d(bary)/d(vertex xy) contributions into a (V, 2) array."""
    dt = xy.dtype
    a = xy[tri_verts[:, 0]]
    b = xy[tri_verts[:, 1]]
    c = xy[tri_verts[:, 2]]
    p = np.stack([px, py], axis=1).astype(dt)

    def cross_grad_u(v):
        return np.stack([v[:, 1], -v[:, 0]], axis=1)

    def cross_grad_v(u):
        return np.stack([-u[:, 1], u[:, 0]], axis=1)

    D = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
         - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    dD_db = cross_grad_u(c - a)
    dD_dc = cross_grad_v(b - a)
    dD_da = -dD_db - dD_dc
    w0 = bary[:, 0]
    w1 = bary[:, 1]
    # fold w2 = 1 - w0 - w1 into the first two
    g0 = g_bary[:, 0] - g_bary[:, 2]
    g1 = g_bary[:, 1] - g_bary[:, 2]

    dN0_db = cross_grad_u(c - p)
    dN0_dc = cross_grad_v(b - p)
    dN1_dc = cross_grad_u(a - p)
    dN1_da = cross_grad_v(c - p)

    inv_d = 1.0 / D
    ga = (g0 * inv_d)[:, None] * (-w0[:, None] * dD_da) \
        + (g1 * inv_d)[:, None] * (dN1_da - w1[:, None] * dD_da)
    gb = (g0 * inv_d)[:, None] * (dN0_db - w0[:, None] * dD_db) \
        + (g1 * inv_d)[:, None] * (-w1[:, None] * dD_db)
    gc = (g0 * inv_d)[:, None] * (dN0_dc - w0[:, None] * dD_dc) \
        + (g1 * inv_d)[:, None] * (dN1_dc - w1[:, None] * dD_dc)

    out = np.zeros_like(xy)
    np.add.at(out, tri_verts[:, 0], ga)
    np.add.at(out, tri_verts[:, 1], gb)
    np.add.at(out, tri_verts[:, 2], gc)
    return out


def soft_rasterize(screen_xy, depth, albedo_map, face_shade, topology, cfg):
    """Soft rasterization as a single differentiable op.

    screen_xy: (V, 2) tensor of projected pixel coordinates.
    depth: (V,) tensor (used for front-to-back ordering, no gradient).
    albedo_map: (H, W, 3) tensor sampled bilinearly at interpolated UVs.
    face_shade: optional (F,) tensor of per-face shading factors.
    Returns (rgb, alpha) tensors of shape (S, S, 3) and (S, S).
    """
    screen_xy = ad.as_tensor(screen_xy)
    depth_t = ad.as_tensor(depth)
    albedo_map = ad.as_tensor(albedo_map)
    shade_t = None if face_shade is None else ad.as_tensor(face_shade)

    S = cfg.image_size
    sigma = cfg.sigma
    dt = screen_xy.data.dtype
    bg = np.asarray(cfg.background, dtype=dt)
    tris = topology.triangles
    xy = screen_xy.data - 0.5  # pixel (i, j) center lands on integer (j, i)
    depth_v = depth_t.data
    maph, mapw = albedo_map.data.shape[:2]

    vert_ok = depth_v > DEPTH_EPS
    face_ok = vert_ok[tris].all(axis=1)
    # drop screen-degenerate triangles (zero area after projection)
    va, vb, vc = xy[tris[:, 0]], xy[tris[:, 1]], xy[tris[:, 2]]
    area2 = ((vb[:, 0] - va[:, 0]) * (vc[:, 1] - va[:, 1])
             - (vb[:, 1] - va[:, 1]) * (vc[:, 0] - va[:, 0]))
    face_ok &= np.abs(area2) > 1e-12
    if cfg.cull_backfaces:
        # with y flipped on screen, outward-facing triangles wind negative
        face_ok &= area2 < 0
    valid_faces = np.nonzero(face_ok)[0]

    empty = valid_faces.size == 0
    if not empty:
        r_cut = sigma * float(np.sqrt(np.log(1.0 / _W_MIN)))
        dilate = r_cut + 0.75
        rows, cols, tci = triangle_pixel_candidates(xy, tris[valid_faces], S, S, dilate)
        faces = valid_faces[tci]
        px = cols.astype(dt)
        py = rows.astype(dt)

        # edge functions from per-face constants: E_k = ex*py - ey*px - c0,
        # reused for the inside test, a distance prefilter, and barycentrics
        edge_a = np.stack([va, vb, vc], axis=1)                     # (F, 3, 2)
        edge_v = np.stack([vb - va, vc - vb, va - vc], axis=1)       # (F, 3, 2)
        edge_c = edge_v[:, :, 0] * edge_a[:, :, 1] - edge_v[:, :, 1] * edge_a[:, :, 0]
        edge_len = np.sqrt(np.square(edge_v).sum(axis=2))
        ex = edge_v[faces, :, 0]
        ey = edge_v[faces, :, 1]
        e_val = ex * py[:, None] - ey * px[:, None] - edge_c[faces]
        sgn = np.sign(area2)[faces]
        e_signed = e_val * sgn[:, None]
        inside = (e_signed >= 0.0).all(axis=1)
        # outside the triangle, max(-line distance) lower-bounds the true
        # boundary distance
        line_d = e_signed / edge_len[faces]
        lower = np.maximum(-line_d.min(axis=1), 0.0)
        keep = inside | (lower <= r_cut)
        rows, cols, faces, px, py = rows[keep], cols[keep], faces[keep], px[keep], py[keep]
        e_val, inside = e_val[keep], inside[keep]

        denom = area2[faces]
        bary = np.stack([e_val[:, 1], e_val[:, 2], e_val[:, 0]], axis=1) / denom[:, None]

        edge_k = np.zeros(faces.size, dtype=np.int8)
        edge_t = np.zeros(faces.size, dtype=dt)
        edge_u = np.zeros((faces.size, 2), dtype=dt)
        d = np.ones(faces.size, dtype=dt)
        ring = ~inside
        if ring.any():
            dist, ek, et, eu = _segment_distance(edge_a, edge_v, faces[ring],
                                                 px[ring], py[ring])
            d[ring] = -dist
            edge_k[ring] = ek
            edge_t[ring] = et
            edge_u[ring] = eu
        cov = np.exp(-np.square(np.minimum(d, 0.0)) / (sigma * sigma))
        keep2 = inside | (cov > _W_MIN)
        rows, cols, faces = rows[keep2], cols[keep2], faces[keep2]
        bary, d, inside = bary[keep2], d[keep2], inside[keep2]
        edge_k, edge_t, edge_u = edge_k[keep2], edge_t[keep2], edge_u[keep2]
        cov = cov[keep2]
        empty = faces.size == 0

    if empty:
        out = np.zeros((S, S, 4), dtype=dt)
        out[..., :3] = bg
        combined = ad._make(out, (screen_xy, albedo_map), lambda g: None)
        return combined[..., :3], combined[..., 3]

    tri_vids = tris[faces]
    # front-to-back by per-face mean depth: a pixel-independent key keeps the
    # composite stable under small vertex perturbations (per-pixel z only
    # differs for interpenetrating triangles, which face meshes avoid)
    z_key = depth_v[tri_vids].mean(axis=1)
    uv_pix = np.einsum("nk,nkc->nc", bary, topology.uv_coords[tri_vids]).astype(dt)

    pix = rows * S + cols
    order = np.lexsort((faces, z_key, pix))
    pix, rows, cols, faces = pix[order], rows[order], cols[order], faces[order]
    bary, d, inside, cov = bary[order], d[order], inside[order], cov[order]
    edge_k, edge_t, edge_u = edge_k[order], edge_t[order], edge_u[order]
    uv_pix, tri_vids = uv_pix[order], tri_vids[order]

    first = np.ones(pix.size, dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    seg_id = np.cumsum(first) - 1
    seg_start = np.nonzero(first)[0]
    slot = np.arange(pix.size) - seg_start[seg_id]
    K = cfg.max_layers
    trunc = slot < K
    (pix, rows, cols, faces, bary, d, inside, cov, edge_k, edge_t, edge_u,
     uv_pix, tri_vids, seg_id, slot) = (
        pix[trunc], rows[trunc], cols[trunc], faces[trunc], bary[trunc], d[trunc],
        inside[trunc], cov[trunc], edge_k[trunc], edge_t[trunc], edge_u[trunc],
        uv_pix[trunc], tri_vids[trunc], seg_id[trunc], slot[trunc])
    n_pix = int(seg_id[-1]) + 1
    px = cols.astype(dt)
    py = rows.astype(dt)
    seg_first = np.nonzero(np.r_[True, seg_id[1:] != seg_id[:-1]])[0]
    pr, pc = rows[seg_first], cols[seg_first]

    # bilinear texture fetch at interpolated UVs (internal, hand-backprop'd)
    u = np.clip(uv_pix[:, 0], 0.0, 1.0)
    v = np.clip(uv_pix[:, 1], 0.0, 1.0)
    tx = u * mapw - 0.5
    ty = v * maph - 0.5
    tj0 = np.clip(np.floor(tx), 0, mapw - 2).astype(np.int64)
    ti0 = np.clip(np.floor(ty), 0, maph - 2).astype(np.int64)
    fx = np.clip(tx - tj0, 0.0, 1.0)[:, None]
    fy = np.clip(ty - ti0, 0.0, 1.0)[:, None]
    m = albedo_map.data
    tex = ((1 - fy) * ((1 - fx) * m[ti0, tj0] + fx * m[ti0, tj0 + 1])
           + fy * ((1 - fx) * m[ti0 + 1, tj0] + fx * m[ti0 + 1, tj0 + 1]))
    shade = np.ones(faces.size, dtype=dt) if shade_t is None else shade_t.data[faces].astype(dt)
    color = tex * shade[:, None]

    c_mat = np.zeros((n_pix, K), dtype=dt)
    c_mat[seg_id, slot] = cov
    col_mat = np.zeros((n_pix, K, 3), dtype=dt)
    col_mat[seg_id, slot] = color
    one_minus = 1.0 - c_mat
    t_mat = np.ones((n_pix, K), dtype=dt)
    t_mat[:, 1:] = np.cumprod(one_minus[:, :-1], axis=1)
    t_end = t_mat[:, -1] * one_minus[:, -1]
    w_mat = c_mat * t_mat
    rgb_pix = (w_mat[:, :, None] * col_mat).sum(axis=1) + t_end[:, None] * bg
    alpha_pix = 1.0 - t_end

    out = np.zeros((S, S, 4), dtype=dt)
    out[..., :3] = bg
    out[pr, pc, :3] = rgb_pix
    out[pr, pc, 3] = alpha_pix

    parents = tuple(t for t in (screen_xy, albedo_map, shade_t) if t is not None)

    def bwd(g):
        g_rgb_pix = g[pr, pc, :3].astype(dt)
        g_alpha_pix = g[pr, pc, 3].astype(dt)

        # per-slot dot of the downstream grad with the extended color [rgb, 1]
        cg_mat = (col_mat * g_rgb_pix[:, None, :]).sum(axis=2) + g_alpha_pix[:, None]
        bgg = (bg * g_rgb_pix).sum(axis=1)  # background alpha channel is 0

        u_mat = np.empty((n_pix, K), dtype=dt)
        u_mat[:, -1] = bgg
        for k in range(K - 2, -1, -1):
            u_mat[:, k] = (c_mat[:, k + 1] * cg_mat[:, k + 1]
                           + (1.0 - c_mat[:, k + 1]) * u_mat[:, k + 1])
        g_c_mat = t_mat * (cg_mat - u_mat)

        g_cov = g_c_mat[seg_id, slot]
        g_w = w_mat[seg_id, slot]
        g_color = g_w[:, None] * g_rgb_pix[seg_id]

        if shade_t is not None and (shade_t.requires_grad or shade_t._parents):
            gs = np.zeros_like(shade_t.data)
            np.add.at(gs, faces, (g_color * tex).sum(axis=1).astype(gs.dtype))
            shade_t.accumulate(gs)

        g_tex = g_color * shade[:, None]
        if albedo_map.requires_grad or albedo_map._parents:
            gm = np.zeros_like(m)
            np.add.at(gm, (ti0, tj0), g_tex * (1 - fy) * (1 - fx))
            np.add.at(gm, (ti0, tj0 + 1), g_tex * (1 - fy) * fx)
            np.add.at(gm, (ti0 + 1, tj0), g_tex * fy * (1 - fx))
            np.add.at(gm, (ti0 + 1, tj0 + 1), g_tex * fy * fx)
            albedo_map.accumulate(gm)

        if screen_xy.requires_grad or screen_xy._parents:
            # texture -> uv -> barycentric path
            dtex_du = ((1 - fy) * (m[ti0, tj0 + 1] - m[ti0, tj0])
                       + fy * (m[ti0 + 1, tj0 + 1] - m[ti0 + 1, tj0])) * mapw
            dtex_dv = ((1 - fx) * (m[ti0 + 1, tj0] - m[ti0, tj0])
                       + fx * (m[ti0 + 1, tj0 + 1] - m[ti0, tj0 + 1])) * maph
            in_u = (tx > 0) & (tx < mapw - 1)
            in_v = (ty > 0) & (ty < maph - 1)
            g_u = (g_tex * dtex_du).sum(axis=1) * in_u
            g_v = (g_tex * dtex_dv).sum(axis=1) * in_v
            uv_verts = topology.uv_coords[tri_vids]  # (n, 3, 2)
            g_bary = (uv_verts[:, :, 0] * g_u[:, None]
                      + uv_verts[:, :, 1] * g_v[:, None])

            # coverage -> signed distance path (silhouette gradient)
            dc_dd = g_cov * cov * (-2.0 * np.minimum(d, 0.0)) / (sigma * sigma)
            g_dist = dc_dd * np.where(inside, 1.0, -1.0).astype(dt)
            g_xy = np.zeros_like(xy)
            a_ids = tri_vids[np.arange(faces.size), edge_k]
            b_ids = tri_vids[np.arange(faces.size), (edge_k + 1) % 3]
            # d(dist)/da = -(1 - t) u, d(dist)/db = -t u (envelope theorem)
            np.add.at(g_xy, a_ids, (-(1.0 - edge_t) * g_dist)[:, None] * edge_u)
            np.add.at(g_xy, b_ids, (-edge_t * g_dist)[:, None] * edge_u)

            g_xy += _bary_vertex_grads(xy, tri_vids, px, py, bary, g_bary)
            screen_xy.accumulate(g_xy)

    tracked = any(t.requires_grad or t._parents for t in parents)
    combined = ad.Tensor(out, _parents=parents if tracked else (),
                         _backward=bwd if tracked else None)
    return combined[..., :3], combined[..., 3]


# ---------------------------------------------------------------------------
# Rendering entry points
# ---------------------------------------------------------------------------


def render_t(positions, albedo_map, cam, cfg, topology):
    """Graph-mode render; positions (V,3), albedo_map (H,W,3), cam (7,)."""
    cfg.validate()
    positions = ad.as_tensor(positions)
    if not isinstance(cam, ad.Tensor):
        cam = ad.as_tensor(np.asarray(cam, dtype=positions.data.dtype))
    screen, depth, _clipped = project_vertices_t(positions, cam, cfg.image_size)
    shade = None
    if cfg.lighting is not None:
        shade = face_shades_t(positions, topology, cfg.lighting)
    return soft_rasterize(screen, depth, albedo_map, shade, topology, cfg)


def render(mesh, albedo_map, cam, cfg):
    """Render a mesh with a UV albedo map; returns a RenderedImage.

    `albedo_map` may be a UVAttributeMap (its rgb channels are used) or a
    raw (H, W, 3) array.
    """
    cam.validate()
    rgb_src = albedo_map.rgb if hasattr(albedo_map, "rgb") else np.asarray(albedo_map)
    rgb, alpha = render_t(mesh.positions.astype(np.float32),
                          rgb_src.astype(np.float32),
                          cam.as_array(), cfg, mesh.topology)
    return RenderedImage(rgb=rgb.data.copy(), alpha=alpha.data.copy()).validate()


THREE_VIEW_DISTANCE = 0.5
THREE_VIEW_YAW = np.deg2rad(30.0)
FOCAL_FACTOR = 1.2


def canonical_camera(image_size, distance=THREE_VIEW_DISTANCE):
    return Camera7(tz=-distance, f=FOCAL_FACTOR * image_size)


def three_view_cameras(image_size):
    """Frontal and +/-30 degree yaw cameras at fixed distance."""
    cams = []
    for yaw in (0.0, THREE_VIEW_YAW, -THREE_VIEW_YAW):
        cams.append(Camera7(tz=-THREE_VIEW_DISTANCE, ry=yaw,
                            f=FOCAL_FACTOR * image_size))
    return cams


def render_three_views_t(map_t, mean, topology, cfg):
    """Render a 6-channel attribute map tensor from the three fixed views."""
    positions = mesh_positions_t(map_t, mean, topology)
    albedo = map_t[:, :, :3]
    views = []
    for cam in three_view_cameras(cfg.image_size):
        views.append(render_t(positions, albedo, cam.as_array(), cfg, topology))
    return views


def render_three_views(attr_map, mean, topology, cfg=None):
    """Numpy convenience wrapper; returns three RenderedImages."""
    cfg = cfg or RenderConfig()
    views = render_three_views_t(ad.as_tensor(attr_map.data.astype(np.float32)),
                                 mean, topology, cfg)
    return [RenderedImage(rgb=r.data.copy(), alpha=a.data.copy()).validate()
            for r, a in views]


def composite_t(rgb, alpha, target):
    """I0 = alpha * rendered + (1 - alpha) * target, graph mode."""
    target = ad.as_tensor(target)
    if target.data.shape[:2] != rgb.data.shape[:2]:
        raise RenderError("composite dimension mismatch")
    a3 = ad.reshape(alpha, alpha.data.shape + (1,))
    return rgb * a3 + target * (ad.as_tensor(1.0) - a3)


def composite(rendered, target):
    """Numpy compositing of a RenderedImage over a background image."""
    if rendered.rgb.shape != np.asarray(target).shape:
        raise RenderError("composite dimension mismatch")
    a = rendered.alpha[..., None]
    return rendered.rgb * a + np.asarray(target) * (1.0 - a)


# ---------------------------------------------------------------------------
# Hard depth queries (visibility for texture projection)
# ---------------------------------------------------------------------------


def depth_buffer(mesh, cam, image_size):
    """Z-buffer of the mesh: per-pixel nearest depth and face id (-1 empty)."""
    screen, depth, clipped = project_vertices(mesh, cam, image_size)
    tris = mesh.topology.triangles
    xy = screen - 0.5
    face_ok = ~clipped[tris].any(axis=1)
    valid = np.nonzero(face_ok)[0]
    zbuf = np.full((image_size, image_size), np.inf)
    fbuf = np.full((image_size, image_size), -1, dtype=np.int64)
    if valid.size == 0:
        return zbuf, fbuf
    rows, cols, tci = triangle_pixel_candidates(xy, tris[valid], image_size,
                                                image_size, dilate=0.5)
    faces = valid[tci]
    bary = barycentric_at_points(xy, tris, faces, cols.astype(np.float64),
                                 rows.astype(np.float64))
    inside = (bary >= -1e-9).all(axis=1)
    rows, cols, faces, bary = rows[inside], cols[inside], faces[inside], bary[inside]
    z = (bary * depth[tris[faces]]).sum(axis=1)
    order = np.lexsort((faces, -z, rows * image_size + cols))
    rows, cols, faces, z = rows[order], cols[order], faces[order], z[order]
    # descending z per pixel: the final write wins with the nearest face
    zbuf[rows, cols] = z
    fbuf[rows, cols] = faces
    return zbuf, fbuf


def visible_vertices(mesh, cam, image_size, tol=0.01):
    """Boolean mask of vertices that pass the z-buffer visibility test."""
    screen, depth, clipped = project_vertices(mesh, cam, image_size)
    zbuf, _ = depth_buffer(mesh, cam, image_size)
    j = np.clip(np.round(screen[:, 0] - 0.5).astype(np.int64), 0, image_size - 1)
    i = np.clip(np.round(screen[:, 1] - 0.5).astype(np.int64), 0, image_size - 1)
    ref = zbuf[i, j]
    vis = ~clipped & np.isfinite(ref) & (depth <= ref + tol)
    return vis
