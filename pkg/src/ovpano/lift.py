"""Lift per-pixel features onto points: correspondences, depth screening, averaging."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import kernels
from .cloud import FeatureField, PointCloud
from .embed import ViewFilter, pixel_features_at
from .render import Intrinsics, RenderedView, cube_rig, project_points, render_views


@dataclass
class Correspondences:
    """Point-to-pixel pairs stored column-wise. ``u`` is the column, ``v`` the row."""

    point_index: np.ndarray
    view_id: np.ndarray  # object array of str
    u: np.ndarray
    v: np.ndarray
    point_depth: np.ndarray
    screen_depth: np.ndarray

    def __len__(self) -> int:
        return len(self.point_index)

    def take(self, mask) -> "Correspondences":
        return Correspondences(self.point_index[mask], self.view_id[mask], self.u[mask],
                               self.v[mask], self.point_depth[mask], self.screen_depth[mask])

    @classmethod
    def concat(cls, parts: Sequence["Correspondences"]) -> "Correspondences":
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("point_index", "view_id", "u", "v", "point_depth", "screen_depth")))

    @classmethod
    def empty(cls) -> "Correspondences":
        i = np.zeros(0, dtype=np.int64)
        f = np.zeros(0)
        return cls(i, np.zeros(0, dtype=object), i, i, f, f)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["point_index", "view_id", "u", "v", "point_depth", "screen_depth"])
            for row in zip(self.point_index, self.view_id, self.u, self.v,
                           self.point_depth, self.screen_depth):
                w.writerow([int(row[0]), row[1], int(row[2]), int(row[3]),
                            repr(float(row[4])), repr(float(row[5]))])


def correspond(cloud: PointCloud, view: RenderedView) -> Correspondences:
    """All points that project inside ``view``, with the rendered depth at their pixel."""
    uv, z, valid = project_points(cloud.positions, view.pose)
    idx = np.flatnonzero(valid)
    cols = np.floor(uv[idx, 0]).astype(np.int64)
    rows = np.floor(uv[idx, 1]).astype(np.int64)
    ids = np.full(len(idx), view.view_id, dtype=object)
    return Correspondences(idx, ids, cols, rows, z[idx], view.depth[rows, cols])


def depth_screen(corr: Correspondences, depth_maps: Mapping[str, np.ndarray],
                 tau_rel: float = 0.05) -> Correspondences:
    """Keep pairs with ``point_depth <= screen_depth * (1 + tau_rel)``.

    ``screen_depth`` is re-read from ``depth_maps`` so externally estimated depth
    can replace the rendered z-buffer.
    """
    if tau_rel < 0:
        raise ValueError("tau_rel must be non-negative")
    screen = np.empty(len(corr))
    for vid in np.unique(corr.view_id):
        if vid not in depth_maps:
            raise KeyError(f"missing depth map for view {vid}")
        sel = corr.view_id == vid
        screen[sel] = np.asarray(depth_maps[vid])[corr.v[sel], corr.u[sel]]
    keep = corr.point_depth <= screen * (1.0 + tau_rel)
    out = corr.take(keep)
    out.screen_depth = screen[keep]
    return out


FeatureSource = Callable[[str, np.ndarray, np.ndarray], np.ndarray]


def gather_features(corr: Correspondences, source) -> np.ndarray:
    """Pixel vectors for every correspondence.

    ``source`` is either a mapping ``view_id -> (H, W, C) array`` or a callable
    ``(view_id, rows, cols) -> (n, C)``.
    """
    rows_out = None
    dim = None
    for vid in np.unique(corr.view_id):
        sel = np.flatnonzero(corr.view_id == vid)
        if callable(source):
            vecs = source(vid, corr.v[sel], corr.u[sel])
        else:
            vecs = np.asarray(source[vid])[corr.v[sel], corr.u[sel]]
        if dim is None:
            dim = vecs.shape[1]
            rows_out = np.zeros((len(corr), dim))
        elif vecs.shape[1] != dim:
            raise ValueError(f"feature dimension {vecs.shape[1]} of view {vid} != {dim}")
        rows_out[sel] = vecs
    return rows_out if rows_out is not None else np.zeros((0, 0))


def scatter_average(n_points: int, corr: Correspondences, source, dim: Optional[int] = None) -> FeatureField:
    """Per-point mean of all corresponding pixel vectors, with hit counts.

    Summation runs in (point, view, row, column) order, so the result does not
    depend on the order of ``corr``.
    """
    if len(corr) == 0:
        return FeatureField.empty(n_points, dim or 0)
    vecs = gather_features(corr, source)
    order = np.lexsort((corr.u, corr.v, corr.view_id.astype(str), corr.point_index))
    sums, counts = kernels.segment_accumulate(
        np.ascontiguousarray(corr.point_index[order]), np.ascontiguousarray(vecs[order]), n_points)
    if dim is not None and sums.shape[1] != dim:
        raise ValueError(f"feature dimension {sums.shape[1]} != expected {dim}")
    feats = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return FeatureField(feats, counts)


def merge_fields(a: FeatureField, b: FeatureField) -> FeatureField:
    """Combine two running averages as if all their pixels were averaged at once."""
    if a.dim == 0:
        return b
    if b.dim == 0:
        return a
    if a.dim != b.dim:
        raise ValueError(f"cannot merge fields of dimension {a.dim} and {b.dim}")
    total = a.hit_count + b.hit_count
    sums = a.features * a.hit_count[:, None] + b.features * b.hit_count[:, None]
    feats = np.divide(sums, total[:, None], out=np.zeros_like(sums), where=total[:, None] > 0)
    return FeatureField(feats, total)


def coverage(field: FeatureField) -> float:
    if len(field) == 0:
        return 0.0
    return float(np.count_nonzero(field.hit_count >= 1)) / len(field)


def provider_source(provider, views: Sequence[RenderedView]):
    by_id = {v.view_id: v for v in views}
    return lambda vid, rows, cols: pixel_features_at(provider, by_id[vid], rows, cols)


def lift_views(cloud: PointCloud, views: Sequence[RenderedView], provider,
               tau_rel: float = 0.05, dim: Optional[int] = None):
    """Correspond, depth-screen and average ``views`` into a fresh field."""
    corr = Correspondences.concat([correspond(cloud, v) for v in views])
    corr = depth_screen(corr, {v.view_id: v.depth for v in views}, tau_rel)
    dim = dim if dim is not None else getattr(provider, "dim", None)
    return scatter_average(len(cloud), corr, provider_source(provider, views), dim), corr


@dataclass
class CoverageParams:
    target_coverage: float = 0.90
    max_rounds: int = 5
    cube_radius: float = 2.0
    eps_scale: float = 2.0
    base_minpts: int = 4
    tau_rel: float = 0.05
    splat_px: int = 2
    seed: int = 0
    intrinsic: Intrinsics = field(default_factory=Intrinsics)


def draw_targets(positions: np.ndarray, params: CoverageParams, rng: np.random.Generator) -> np.ndarray:
    """Two random points per density cluster of ``positions`` (indices into it)."""
    from .pseudolabel import adaptive_dbscan, class_density_params

    n = len(positions)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    eps, min_pts = class_density_params(positions, params.base_minpts, params.eps_scale)
    labels = adaptive_dbscan(positions, eps, min_pts)
    groups = [np.flatnonzero(labels == c) for c in range(labels.max() + 1)]
    if not groups:
        # everything is noise: treat the leftovers as a single cluster
        groups = [np.arange(n)]
    picks = [rng.choice(g, size=min(2, len(g)), replace=False) for g in groups]
    return np.concatenate(picks).astype(np.int64)


def coverage_loop(cloud: PointCloud, field: FeatureField, provider,
                  params: CoverageParams = CoverageParams(),
                  view_filter: Optional[ViewFilter] = None,
                  log: Optional[List[dict]] = None, threads: int = 1):
    """Add cube-rig views around uncovered clusters until coverage reaches the target.

    Returns ``(field, rounds_used)``. Per-round statistics are appended to ``log``.
    """
    if not 0 < params.target_coverage <= 1:
        raise ValueError("target_coverage must be in (0, 1]")
    if params.max_rounds < 0:
        raise ValueError("max_rounds must be >= 0")
    rng = np.random.default_rng(params.seed)
    rounds = 0
    view_counter = 0
    while rounds < params.max_rounds and coverage(field) < params.target_coverage:
        unmapped = np.flatnonzero(field.hit_count == 0)
        picks = unmapped[draw_targets(cloud.positions[unmapped], params, rng)]
        poses = [p for i in picks for p in cube_rig(cloud.positions[i], params.cube_radius,
                                                     params.intrinsic)]
        views = render_views(cloud, poses, params.splat_px, prefix=f"r{rounds + 1:02d}c",
                             start=view_counter, threads=threads)
        view_counter += len(views)
        verdicts = [view_filter(v) for v in views] if view_filter is not None else None
        kept = [v for i, v in enumerate(views) if verdicts is None or verdicts[i].keep]
        before = coverage(field)
        if kept:
            new, _ = lift_views(cloud, kept, provider, params.tau_rel, field.dim or None)
            field = merge_fields(field, new)
        rounds += 1
        if log is not None:
            log.append({"round": rounds, "targets": int(len(picks)), "poses": len(poses),
                        "kept": len(kept), "coverage_before": before,
                        "coverage_after": coverage(field)})
    return field, rounds
