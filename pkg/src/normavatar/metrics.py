"""Evaluation metrics: exact point-to-mesh distance, masked texture error,
identity-consistency ratios, and the metrics report container.

Geometry is metric internally (meters); reports quote millimeters.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np


class MetricsError(Exception):
    pass


def _closest_points_on_triangles(p, a, b, c):
    """Exact closest point on each triangle (vertex/edge/face cases),
    vectorized over triangles for one query point."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(axis=1)
    d2 = (ac * ap).sum(axis=1)
    bp = p - b
    d3 = (ab * bp).sum(axis=1)
    d4 = (ac * bp).sum(axis=1)
    cp = p - c
    d5 = (ab * cp).sum(axis=1)
    d6 = (ac * cp).sum(axis=1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    out = np.empty_like(a)

    # face region (default)
    denom = np.where(va + vb + vc != 0, va + vb + vc, 1.0)
    v = vb / denom
    w = vc / denom
    out[:] = a + v[:, None] * ab + w[:, None] * ac

    # edge AC
    t_ac = np.clip(d2 / np.where(d2 - d6 != 0, d2 - d6, 1.0), 0, 1)
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out[m] = a[m] + t_ac[m, None] * ac[m]
    # edge BC
    den_bc = (d4 - d3) + (d5 - d6)
    t_bc = np.clip((d4 - d3) / np.where(den_bc != 0, den_bc, 1.0), 0, 1)
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    out[m] = b[m] + t_bc[m, None] * (c[m] - b[m])
    # edge AB
    t_ab = np.clip(d1 / np.where(d1 - d3 != 0, d1 - d3, 1.0), 0, 1)
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out[m] = a[m] + t_ab[m, None] * ab[m]
    # vertex regions
    m = (d1 <= 0) & (d2 <= 0)
    out[m] = a[m]
    m = (d3 >= 0) & (d4 <= d3)
    out[m] = b[m]
    m = (d6 >= 0) & (d5 <= d6)
    out[m] = c[m]
    return out


def point_to_mesh_distance(points, target_mesh, return_per_point=False):
    """Mean exact distance (mm) from query points to the target surface.

    `points` may be a FaceMesh (its vertices are used) or an (N, 3) array.
    """
    pts = points.positions if hasattr(points, "positions") else np.asarray(points)
    if pts.size == 0:
        raise MetricsError("empty query point set")
    verts = target_mesh.positions
    tris = target_mesh.topology.triangles
    if len(tris) == 0:
        raise MetricsError("empty target mesh")
    a = verts[tris[:, 0]]
    b = verts[tris[:, 1]]
    c = verts[tris[:, 2]]
    dists = np.empty(len(pts))
    for i, p in enumerate(pts):
        q = _closest_points_on_triangles(p, a, b, c)
        dists[i] = np.sqrt(((p - q) ** 2).sum(axis=1).min())
    mm = dists * 1000.0
    if return_per_point:
        return float(mm.mean()), mm
    return float(mm.mean())


def texture_l1(map_a, map_b, unmasked=False):
    """Mean absolute rgb difference over the intersection of coverage masks."""
    if map_a.data.shape != map_b.data.shape:
        raise MetricsError("map size mismatch")
    if unmasked:
        both = np.ones(map_a.data.shape[:2], bool)
    else:
        both = map_a.coverage_mask & map_b.coverage_mask
    if not both.any():
        raise MetricsError("empty coverage intersection")
    return float(np.abs(map_a.rgb[both] - map_b.rgb[both]).mean())


def position_rmse(map_a, map_b, normalizer=1.0):
    """RMSE of position channels over the mask intersection, / normalizer."""
    both = map_a.coverage_mask & map_b.coverage_mask
    if not both.any():
        raise MetricsError("empty coverage intersection")
    d = map_a.xyz[both] - map_b.xyz[both]
    return float(np.sqrt((d ** 2).sum(axis=1).mean()) / normalizer)


def result_distance(map_a, map_b, diag):
    """Scalar avatar difference: normalized position RMSE + texture L1."""
    return position_rmse(map_a, map_b, normalizer=diag) + texture_l1(map_a, map_b)


def eval_consistency(maps_by_identity, diag):
    """Intra- over inter-identity mean pairwise result distance.

    `maps_by_identity` is a list (one entry per identity) of lists of
    result maps from different variants of that identity. Lower is better;
    identical results give 0.
    """
    if len(maps_by_identity) < 2:
        raise MetricsError("need at least 2 identities")
    if any(len(v) < 2 for v in maps_by_identity):
        raise MetricsError("need at least 2 images per identity")
    intra = []
    for variant_maps in maps_by_identity:
        for i in range(len(variant_maps)):
            for j in range(i + 1, len(variant_maps)):
                intra.append(result_distance(variant_maps[i], variant_maps[j], diag))
    inter = []
    for i in range(len(maps_by_identity)):
        for j in range(i + 1, len(maps_by_identity)):
            inter.append(result_distance(maps_by_identity[i][0],
                                         maps_by_identity[j][0], diag))
    inter_mean = float(np.mean(inter))
    if inter_mean == 0.0:
        return 0.0 if float(np.mean(intra)) == 0.0 else float("inf")
    return float(np.mean(intra)) / inter_mean


# ---------------------------------------------------------------------------
# Metrics report
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Per-case rows plus aggregates; aggregates are recomputable."""

    rows: list = field(default_factory=list)          # dicts with "case" key
    aggregates: dict = field(default_factory=dict)
    fingerprint: str = ""

    def add(self, case, **values):
        self.rows.append({"case": case, **values})

    def aggregate(self, metric, how="mean"):
        vals = [r[metric] for r in self.rows if metric in r]
        if not vals:
            raise MetricsError(f"no rows carry metric {metric!r}")
        agg = float(np.mean(vals)) if how == "mean" else float(np.median(vals))
        self.aggregates[f"{how}_{metric}"] = agg
        return agg

    def recompute_aggregates(self):
        """Recheck every stored aggregate from the rows; returns mismatches."""
        bad = {}
        for key, value in self.aggregates.items():
            how, metric = key.split("_", 1)
            vals = [r[metric] for r in self.rows if metric in r]
            fresh = float(np.mean(vals)) if how == "mean" else float(np.median(vals))
            if fresh != value:
                bad[key] = (value, fresh)
        return bad

    def write(self, out_dir, basename="metrics"):
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, f"{basename}.csv")
        keys = sorted({k for r in self.rows for k in r})
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            for r in self.rows:
                writer.writerow(r)
        txt_path = os.path.join(out_dir, f"{basename}_summary.txt")
        with open(txt_path, "w") as fh:
            fh.write(f"fingerprint: {self.fingerprint}\n")
            fh.write(f"cases: {len(self.rows)}\n")
            for k in sorted(self.aggregates):
                fh.write(f"{k}: {self.aggregates[k]:.6g}\n")
        return csv_path, txt_path

    @classmethod
    def read(cls, out_dir, basename="metrics"):
        rows = []
        with open(os.path.join(out_dir, f"{basename}.csv"), newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append({k: (v if k in ("case",) or v == "" else float(v))
                             for k, v in r.items() if v != ""})
        report = cls(rows=rows)
        path = os.path.join(out_dir, f"{basename}_summary.txt")
        with open(path) as fh:
            for line in fh:
                key, _, val = line.partition(":")
                if key == "fingerprint":
                    report.fingerprint = val.strip()
                elif key != "cases":
                    try:
                        report.aggregates[key.strip()] = float(val)
                    except ValueError:
                        pass
        return report
