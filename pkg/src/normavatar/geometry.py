"""Head topology, cylindrical UV parameterization, and attribute maps.

The face is a fixed-triangulation grid mesh over a half-ellipsoid band
(`build_head_topology`). Geometry and albedo live together in a 6-channel
UV-space attribute map (r, g, b, x, y, z): colors are dimensionless in
[0, 1], positional channels are vertex offsets in meters relative to a mean
face. Rasterization and sampling between vertex attributes and maps use the
pixel-center convention ((j + 0.5) / W, (i + 0.5) / H).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class GeometryError(Exception):
    pass


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------


@dataclass
class FaceTopology:
    """Fixed triangulation with per-vertex UV coordinates and landmarks."""

    vertex_count: int
    triangles: np.ndarray        # (F, 3) int
    uv_coords: np.ndarray        # (V, 2) in [0, 1]^2
    landmark_indices: np.ndarray  # (>=5,) vertex indices
    landmark_names: tuple = ()
    grid_shape: tuple = ()

    def validate(self):
        if self.triangles.min() < 0 or self.triangles.max() >= self.vertex_count:
            raise GeometryError("triangle index out of range")
        if not np.isfinite(self.uv_coords).all():
            raise GeometryError("non-finite uv coordinates")
        if self.uv_coords.min() < 0.0 or self.uv_coords.max() > 1.0:
            raise GeometryError("uv coordinates outside [0,1]^2")
        if len(self.landmark_indices) < 5:
            raise GeometryError("need at least 5 landmarks")
        areas = _uv_triangle_areas(self.uv_coords, self.triangles)
        if np.any(np.abs(areas) < 1e-12):
            raise GeometryError("degenerate UV triangle")
        return self


@dataclass
class FaceMesh:
    positions: np.ndarray  # (V, 3) meters
    topology: FaceTopology

    def validate(self):
        if self.positions.shape != (self.topology.vertex_count, 3):
            raise GeometryError(f"positions shape {self.positions.shape} does not match topology")
        if not np.isfinite(self.positions).all():
            raise GeometryError("non-finite vertex positions")
        diag = bounding_box_diagonal(self.positions)
        if not (0.0 < diag < 1.0):
            raise GeometryError(f"bounding-box diagonal {diag:.3f} m outside (0, 1)")
        return self


@dataclass
class MeanFace:
    positions: np.ndarray  # (V, 3) meters


@dataclass
class UVAttributeMap:
    """H x W x 6 map of (r, g, b, x, y, z); colors in [0,1], offsets in meters."""

    data: np.ndarray            # (H, W, 6) float32
    coverage_mask: np.ndarray   # (H, W) bool
    fill_value: float = 0.0

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def rgb(self):
        return self.data[..., :3]

    @property
    def xyz(self):
        return self.data[..., 3:]

    def validate(self):
        if self.data.ndim != 3 or self.data.shape[2] != 6:
            raise GeometryError(f"attribute map must be HxWx6, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise GeometryError("non-finite attribute map values")
        if self.rgb.min() < -1e-6 or self.rgb.max() > 1.0 + 1e-6:
            raise GeometryError("rgb channels outside [0,1]")
        uncovered = self.data[~self.coverage_mask]
        if uncovered.size and not np.all(uncovered == self.fill_value):
            raise GeometryError("uncovered texels must hold the fill value")
        return self


def bounding_box_diagonal(positions):
    ext = positions.max(axis=0) - positions.min(axis=0)
    return float(np.linalg.norm(ext))


def _uv_triangle_areas(uv, tris):
    a, b, c = uv[tris[:, 0]], uv[tris[:, 1]], uv[tris[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                  - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


# ---------------------------------------------------------------------------
# Procedural head grid
# ---------------------------------------------------------------------------

# landmark anchors as (row fraction, col fraction) on the parameter grid;
# row 0 is the chin edge, col 0.5 is the sagittal center line
_LANDMARK_ANCHORS = (
    ("eye_outer_l", (0.62, 0.28)),
    ("eye_inner_l", (0.62, 0.41)),
    ("eye_inner_r", (0.62, 0.59)),
    ("eye_outer_r", (0.62, 0.72)),
    ("nose_tip", (0.46, 0.50)),
    ("mouth_corner_l", (0.30, 0.40)),
    ("mouth_corner_r", (0.30, 0.60)),
    ("chin", (0.04, 0.50)),
    ("forehead", (0.92, 0.50)),
)

HEAD_SEMI_AXES = (0.085, 0.115, 0.095)  # x width, y height, z depth, meters
HEAD_LAT_RANGE = (-1.15, 1.25)          # radians, chin to forehead
HEAD_AZIMUTH_RANGE = (-1.75, 1.75)      # radians around the up axis


def build_head_topology(rows=27, cols=54):
    """Grid topology over a half-ellipsoid band, plus its base positions.

    Returns (FaceTopology, base_positions). UV coordinates are the grid
    parameters themselves, which coincide with the cylindrical projection
    up to an affine rescale of the azimuth span.
    """
    if rows < 4 or cols < 4:
        raise GeometryError("grid must be at least 4x4")
    psi = np.linspace(HEAD_LAT_RANGE[0], HEAD_LAT_RANGE[1], rows)
    phi = np.linspace(HEAD_AZIMUTH_RANGE[0], HEAD_AZIMUTH_RANGE[1], cols)
    ax, by, cz = HEAD_SEMI_AXES
    pp, ff = np.meshgrid(psi, phi, indexing="ij")
    x = ax * np.cos(pp) * np.sin(ff)
    y = by * np.sin(pp)
    z = cz * np.cos(pp) * np.cos(ff)
    base = np.stack([x, y, z], axis=-1).reshape(-1, 3).astype(np.float64)

    tris = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            v00 = r * cols + c
            v01 = v00 + 1
            v10 = v00 + cols
            v11 = v10 + 1
            tris.append((v00, v11, v10))
            tris.append((v00, v01, v11))
    uu, vv = np.meshgrid(np.arange(cols) / (cols - 1), np.arange(rows) / (rows - 1))
    uv = np.stack([uu, vv], axis=-1).reshape(-1, 2)

    names, indices = [], []
    for name, (fr, fc) in _LANDMARK_ANCHORS:
        r = int(round(fr * (rows - 1)))
        c = int(round(fc * (cols - 1)))
        names.append(name)
        indices.append(r * cols + c)

    topo = FaceTopology(
        vertex_count=rows * cols,
        triangles=np.asarray(tris, dtype=np.int64),
        uv_coords=uv.astype(np.float64),
        landmark_indices=np.asarray(indices, dtype=np.int64),
        landmark_names=tuple(names),
        grid_shape=(rows, cols),
    )
    return topo.validate(), base


# ---------------------------------------------------------------------------
# Cylindrical projection
# ---------------------------------------------------------------------------


def cylindrical_project(mesh, axis=(0.0, 1.0, 0.0)):
    """Project vertices to (u, v): u from the azimuth around `axis` with the
    forward direction at u = 0.5, v from normalized height along `axis`.
    """
    axis = np.asarray(axis, dtype=np.float64)
    if abs(np.linalg.norm(axis) - 1.0) > 1e-6:
        raise GeometryError("axis must be a unit vector")
    forward = np.array([0.0, 0.0, 1.0])
    if abs(forward @ axis) > 0.9:
        forward = np.array([1.0, 0.0, 0.0])
    forward = forward - (forward @ axis) * axis
    forward /= np.linalg.norm(forward)
    right = np.cross(axis, forward)

    p = mesh.positions
    h = p @ axis
    radial = p - h[:, None] * axis
    r_right = radial @ right
    r_fwd = radial @ forward
    if np.any(np.hypot(r_right, r_fwd) < 1e-9):
        raise GeometryError("vertex lies on the projection axis (azimuth undefined)")
    u = 0.5 + np.arctan2(r_right, r_fwd) / (2.0 * np.pi)
    h_min, h_max = h.min(), h.max()
    if h_max - h_min < 1e-12:
        raise GeometryError("degenerate height range along axis")
    v = (h - h_min) / (h_max - h_min)
    return np.stack([u, v], axis=1)


# ---------------------------------------------------------------------------
# Triangle / pixel candidate machinery (shared with the renderer)
# ---------------------------------------------------------------------------

_BUCKET_SIZES = (4, 8, 16, 32, 64)


def triangle_pixel_candidates(xy, tris, height, width, dilate):
    """Candidate (pixel row, pixel col, triangle) triples near each triangle.

    `xy` holds per-vertex positions in pixel units where pixel (i, j) has
    center (j, i). Candidates cover each triangle's bounding box dilated by
    `dilate` pixels, clipped to the image. Returns int64 arrays
    (rows, cols, tri_index) in deterministic order.
    """
    v = xy[tris]  # (F, 3, 2)
    xmin = v[:, :, 0].min(axis=1) - dilate
    xmax = v[:, :, 0].max(axis=1) + dilate
    ymin = v[:, :, 1].min(axis=1) - dilate
    ymax = v[:, :, 1].max(axis=1) + dilate
    j0 = np.clip(np.floor(xmin).astype(np.int64), 0, width - 1)
    j1 = np.clip(np.ceil(xmax).astype(np.int64), 0, width - 1)
    i0 = np.clip(np.floor(ymin).astype(np.int64), 0, height - 1)
    i1 = np.clip(np.ceil(ymax).astype(np.int64), 0, height - 1)
    visible = (xmax >= 0) & (xmin <= width - 1) & (ymax >= 0) & (ymin <= height - 1)
    bw = j1 - j0 + 1
    bh = i1 - i0 + 1
    extent = np.maximum(bw, bh)

    rows_out, cols_out, tri_out = [], [], []
    remaining = visible.copy()
    for bucket in _BUCKET_SIZES:
        sel = remaining & (extent <= bucket)
        remaining &= ~sel
        idx = np.nonzero(sel)[0]
        if idx.size == 0:
            continue
        oi, oj = np.meshgrid(np.arange(bucket), np.arange(bucket), indexing="ij")
        oi = oi.reshape(-1)
        oj = oj.reshape(-1)
        rr = i0[idx][:, None] + oi[None, :]
        cc = j0[idx][:, None] + oj[None, :]
        ok = (rr <= i1[idx][:, None]) & (cc <= j1[idx][:, None]) & (rr < height) & (cc < width)
        tt = np.broadcast_to(idx[:, None], rr.shape)
        rows_out.append(rr[ok])
        cols_out.append(cc[ok])
        tri_out.append(tt[ok])
    # oversize leftovers, handled one by one (rare for face meshes)
    for t in np.nonzero(remaining)[0]:
        rr, cc = np.meshgrid(np.arange(i0[t], i1[t] + 1), np.arange(j0[t], j1[t] + 1),
                             indexing="ij")
        rows_out.append(rr.reshape(-1))
        cols_out.append(cc.reshape(-1))
        tri_out.append(np.full(rr.size, t, dtype=np.int64))
    if not rows_out:
        z = np.zeros(0, dtype=np.int64)
        return z, z.copy(), z.copy()
    # deterministic (bucket-structured) but otherwise unspecified order;
    # callers sort by their own keys
    return np.concatenate(rows_out), np.concatenate(cols_out), np.concatenate(tri_out)


def barycentric_at_points(xy, tris, tri_idx, px, py):
    """Barycentric coordinates of points (px, py) in the indexed triangles."""
    a = xy[tris[tri_idx, 0]]
    b = xy[tris[tri_idx, 1]]
    c = xy[tris[tri_idx, 2]]
    denom = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
             - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    w0 = ((b[:, 0] - px) * (c[:, 1] - py) - (b[:, 1] - py) * (c[:, 0] - px)) / denom
    w1 = ((c[:, 0] - px) * (a[:, 1] - py) - (c[:, 1] - py) * (a[:, 0] - px)) / denom
    w2 = 1.0 - w0 - w1
    return np.stack([w0, w1, w2], axis=1)


# ---------------------------------------------------------------------------
# Rasterization and sampling
# ---------------------------------------------------------------------------


def rasterize_vertex_maps(mesh_offsets, albedo, topology, size):
    """Rasterize per-vertex offsets and albedo into a 6-channel UV map.

    Each covered texel takes the barycentric interpolation of the UV
    triangle containing its center. Raises if two triangles claim the same
    texel interior (invalid parameterization).
    """
    if size < 4:
        raise GeometryError("map size must be at least 4")
    mesh_offsets = np.asarray(mesh_offsets, dtype=np.float64)
    albedo = np.asarray(albedo, dtype=np.float64)
    if mesh_offsets.shape != (topology.vertex_count, 3):
        raise GeometryError("mesh_offsets shape mismatch")
    if albedo.shape != (topology.vertex_count, 3):
        raise GeometryError("albedo shape mismatch")

    h = w = int(size)
    xy = np.stack([topology.uv_coords[:, 0] * w - 0.5,
                   topology.uv_coords[:, 1] * h - 0.5], axis=1)
    rows, cols, tri = triangle_pixel_candidates(xy, topology.triangles, h, w, dilate=1.0)
    bary = barycentric_at_points(xy, topology.triangles, tri, cols.astype(np.float64),
                                 rows.astype(np.float64))
    inside = (bary >= -1e-9).all(axis=1)
    rows, cols, tri, bary = rows[inside], cols[inside], tri[inside], bary[inside]

    pix = rows * w + cols
    order = np.lexsort((tri, pix))
    pix, rows, cols, tri, bary = pix[order], rows[order], cols[order], tri[order], bary[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    dup = ~first
    if np.any(dup):
        strict = (bary > 1e-6).all(axis=1)
        # a duplicate claim is only legal when the texel center sits on a
        # shared edge (some barycentric coordinate ~ 0)
        bad = dup & strict
        if np.any(bad):
            prev_strict = np.zeros(len(pix), dtype=bool)
            prev_strict[1:] = strict[:-1] & (pix[1:] == pix[:-1])
            if np.any(bad & prev_strict):
                raise GeometryError("overlapping UV triangles: parameterization invalid")
    rows, cols, tri, bary = rows[first], cols[first], tri[first], bary[first]

    attrs = np.concatenate([albedo, mesh_offsets], axis=1)  # (V, 6) as r,g,b,x,y,z
    tri_attrs = attrs[topology.triangles[tri]]               # (N, 3, 6)
    texels = np.einsum("nk,nkc->nc", bary, tri_attrs)

    data = np.zeros((h, w, 6), dtype=np.float32)
    mask = np.zeros((h, w), dtype=bool)
    data[rows, cols] = texels.astype(np.float32)
    mask[rows, cols] = True
    return UVAttributeMap(data=data, coverage_mask=mask)


def sample_uv(attr_map, uv):
    """Bilinear sample of a UV map at (u, v); returns (values, clamped mask).

    `uv` may be a single pair or an (N, 2) array. Out-of-range coordinates
    are clamped to the border and flagged.
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    clamped = (uv < 0.0).any(axis=1) | (uv > 1.0).any(axis=1)
    vals = ad.bilinear_sample(ad.as_tensor(attr_map.data), ad.as_tensor(uv)).data
    return vals, clamped


def sample_uv_t(map_t, uv):
    """Graph-mode bilinear sampling used inside differentiable programs."""
    uv = np.asarray(uv, dtype=map_t.data.dtype) if not isinstance(uv, ad.Tensor) else uv
    return ad.bilinear_sample(map_t, uv)


def mesh_from_map(attr_map, mean, topology):
    """Reconstruct the mesh: positions = mean + sampled xyz offsets."""
    vals, _ = sample_uv(attr_map, topology.uv_coords)
    offsets = vals[:, 3:]
    if not np.isfinite(offsets).all():
        raise GeometryError("non-finite sampled offsets")
    return FaceMesh(positions=mean.positions + offsets, topology=topology)


def mesh_positions_t(map_t, mean, topology):
    """Graph-mode mesh reconstruction; returns a (V, 3) tensor."""
    sampled = sample_uv_t(map_t, topology.uv_coords)
    return sampled[:, 3:] + ad.as_tensor(mean.positions.astype(map_t.data.dtype))


# ---------------------------------------------------------------------------
# Asset export / import
# ---------------------------------------------------------------------------


def export_assets(mesh, albedo_map, out_dir, basename="avatar"):
    """Write a Wavefront OBJ plus an 8-bit PNG albedo; returns file paths.

    The OBJ carries v/vt/f records with shared vertex and texture indices.
    Texture v runs top-down to match the PNG row order written here.
    """
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    obj_path = os.path.join(out_dir, basename + ".obj")
    png_path = os.path.join(out_dir, basename + "_albedo.png")

    topo = mesh.topology
    with open(obj_path, "w") as fh:
        fh.write(f"# normavatar export, {mesh.positions.shape[0]} vertices\n")
        fh.write(f"mtllib {basename}.mtl\n")
        for p in mesh.positions:
            fh.write(f"v {p[0]:.8f} {p[1]:.8f} {p[2]:.8f}\n")
        for uv in topo.uv_coords:
            fh.write(f"vt {uv[0]:.8f} {uv[1]:.8f}\n")
        for t in topo.triangles:
            fh.write(f"f {t[0]+1}/{t[0]+1} {t[1]+1}/{t[1]+1} {t[2]+1}/{t[2]+1}\n")
    mtl_path = os.path.join(out_dir, basename + ".mtl")
    with open(mtl_path, "w") as fh:
        fh.write(f"newmtl skin\nmap_Kd {basename}_albedo.png\n")

    rgb8 = np.round(np.clip(albedo_map.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(rgb8, mode="RGB").save(png_path)
    return [obj_path, mtl_path, png_path]


def import_obj(path):
    """Parse v/vt/f records; returns (positions, uvs, triangles)."""
    positions, uvs, faces = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                positions.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return (np.asarray(positions, dtype=np.float64),
            np.asarray(uvs, dtype=np.float64),
            np.asarray(faces, dtype=np.int64))
