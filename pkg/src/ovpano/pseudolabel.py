"""Pseudo-classes by spherical k-means and pseudo-instances by per-class DBSCAN."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .cloud import FeatureField, PointCloud, read_ply, save_cloud
from .embed import normalize, things_stuff, write_vector, read_vector


@dataclass
class SphericalKMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: List[float] = field(default_factory=list)
    n_iter: int = 0


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [int(rng.integers(n))]
    dist = 1.0 - x @ x[centers[0]]
    for _ in range(1, k):
        d = np.clip(dist, 0.0, None)
        total = d.sum()
        if total <= 0:
            # all remaining points coincide with a center; take the lowest unused index
            unused = np.setdiff1d(np.arange(n), centers)
            nxt = int(unused[0])
        else:
            nxt = int(rng.choice(n, p=d / total))
        centers.append(nxt)
        dist = np.minimum(dist, 1.0 - x @ x[nxt])
    return x[centers].copy()


def spherical_kmeans(features: np.ndarray, k: int, seed: int = 0, max_iter: int = 100,
                     tol: float = 1e-9) -> SphericalKMeansResult:
    """Cluster directions by maximizing the cosine to unit centroids.

    ``history`` holds the mean cosine after every update step; it never decreases.
    Argmax ties go to the lower cluster id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    x = normalize(np.asarray(features, dtype=np.float64))
    if len(x) < k:
        raise ValueError(f"need at least k={k} labeled points, got {len(x)}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    assign = np.full(len(x), -1, dtype=np.int64)
    history: List[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        sims = x @ centroids.T
        new_assign = np.argmax(sims, axis=1)
        changed = int(np.count_nonzero(new_assign != assign))
        assign = new_assign
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        new_centroids = centroids.copy()
        nonempty = np.linalg.norm(sums, axis=1) > 0
        new_centroids[nonempty] = normalize(sums[nonempty])
        history.append(float(np.mean(np.sum(x * new_centroids[assign], axis=1))))
        empty = np.flatnonzero(~nonempty)
        if len(empty):
            fit = np.sum(x * new_centroids[assign], axis=1)
            worst = np.argsort(fit, kind="stable")
            for j, e in enumerate(empty):
                new_centroids[e] = x[worst[j]]
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if len(empty) == 0 and (changed == 0 or shift < tol):
            break
    sims = x @ centroids.T
    assign_final = np.argmax(sims, axis=1)
    if np.array_equal(assign_final, assign):
        inertia = history[-1]
    else:
        inertia = float(np.mean(np.max(sims, axis=1)))
        assign = assign_final
    return SphericalKMeansResult(assign, centroids, inertia, history, it)


def adaptive_dbscan(positions: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN labels (``-1`` = noise), neighbourhoods counted with the point itself.

    Clusters are numbered by their lowest member index. A border point joins the
    cluster discovered first by a sequential scan, i.e. the one whose lowest
    core point index is smallest among its core neighbours' clusters.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    tree = cKDTree(positions)
    nbrs = tree.query_ball_point(positions, eps, return_sorted=True)
    lengths = np.fromiter((len(a) for a in nbrs), dtype=np.int64, count=n)
    indptr = np.r_[0, np.cumsum(lengths)].astype(np.int64)
    indices = np.fromiter((j for a in nbrs for j in a), dtype=np.int64, count=int(indptr[-1]))
    labels, _ = kernels.dbscan_core_labels(indptr, indices, int(min_pts))
    return renumber_by_first_member(labels)


def renumber_by_first_member(labels: np.ndarray) -> np.ndarray:
    """Relabel non-negative ids so that ids increase with each group's lowest index."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full_like(labels, -1)
    pos = labels >= 0
    if not pos.any():
        return out
    uniq, first = np.unique(labels[pos], return_index=True)
    rank = np.empty(uniq.max() + 1, dtype=np.int64)
    rank[uniq[np.argsort(first)]] = np.arange(len(uniq))
    out[pos] = rank[labels[pos]]
    return out


def class_density_params(positions: np.ndarray, base_minpts: int = 4,
                         eps_scale: float = 2.0, knn: int = 4) -> Tuple[float, int]:
    """``eps = eps_scale * median distance to the 4th neighbour``; ``minPts = max(base, round(log2 n))``."""
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if n < 2:
        raise ValueError("density parameters need at least two points")
    k = min(knn, n - 1)
    dist, _ = cKDTree(positions).query(positions, k=k + 1)
    eps = eps_scale * float(np.median(dist[:, k]))
    min_pts = max(int(base_minpts), int(np.floor(np.log2(n) + 0.5)))
    return eps, min_pts


@dataclass
class PseudoLabelSet:
    z_pc: np.ndarray
    z_pi: np.ndarray
    class_repr: np.ndarray
    is_thing: np.ndarray
    per_class_params: List[Optional[Tuple[float, int]]]
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.class_repr)

    @property
    def n_instances(self) -> int:
        return int(self.z_pi.max()) + 1 if self.z_pi.size and self.z_pi.max() >= 0 else 0

    def save(self, cloud: PointCloud, ply_path, sidecar_path=None) -> None:
        ply_path = Path(ply_path)
        sidecar_path = Path(sidecar_path or ply_path.with_suffix(".json"))
        save_cloud(cloud, ply_path, extra={"pc": self.z_pc.astype(np.int32),
                                           "pi": self.z_pi.astype(np.int32)})
        repr_files = []
        for k, vec in enumerate(self.class_repr):
            name = f"{sidecar_path.stem}_class{k:03d}.hev1"
            write_vector(sidecar_path.parent / name, vec)
            repr_files.append(name)
        meta = {
            "K": self.n_classes, "seed": self.seed, "class_repr": repr_files,
            "is_thing": [bool(t) for t in self.is_thing],
            "eps": [None if p is None else float(p[0]) for p in self.per_class_params],
            "min_pts": [None if p is None else int(p[1]) for p in self.per_class_params],
        }
        sidecar_path.write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, ply_path, sidecar_path=None) -> "PseudoLabelSet":
        ply_path = Path(ply_path)
        sidecar_path = Path(sidecar_path or ply_path.with_suffix(".json"))
        props, _ = read_ply(ply_path)
        meta = json.loads(sidecar_path.read_text())
        reprs = np.array([read_vector(sidecar_path.parent / f) for f in meta["class_repr"]])
        params = [None if e is None else (e, m) for e, m in zip(meta["eps"], meta["min_pts"])]
        return cls(props["pc"].astype(np.int64), props["pi"].astype(np.int64), reprs,
                   np.array(meta["is_thing"], dtype=bool), params, meta["seed"])


def derive_labels(cloud: PointCloud, field: FeatureField, k: int, provider, seed: int = 0,
                  eps_scale: float = 2.0, base_minpts: int = 4, max_iter: int = 100,
                  logit_scale: float = 100.0) -> PseudoLabelSet:
    """Pseudo-classes, class representatives, thing flags and pseudo-instances."""
    labeled = np.flatnonzero(field.hit_count > 0)
    if len(labeled) == 0:
        raise ValueError("field has no labeled points")
    km = spherical_kmeans(field.features[labeled], k, seed=seed, max_iter=max_iter)
    n = len(cloud)
    z_pc = np.full(n, -1, dtype=np.int64)
    z_pc[labeled] = km.assignments
    z_pi = np.full(n, -1, dtype=np.int64)
    class_repr = np.zeros((k, field.dim))
    is_thing = np.zeros(k, dtype=bool)
    params: List[Optional[Tuple[float, int]]] = []
    next_id = 0
    for c in range(k):
        members = labeled[km.assignments == c]
        if len(members) == 0:
            class_repr[c] = km.centroids[c]
            params.append(None)
            continue
        class_repr[c] = normalize(field.features[members].mean(axis=0))
        is_thing[c] = things_stuff(class_repr[c], provider, logit_scale) == "thing"
        if len(members) == 1:
            params.append(None)
            if is_thing[c]:
                z_pi[members] = next_id
                next_id += 1
            continue
        eps, min_pts = class_density_params(cloud.positions[members], base_minpts, eps_scale)
        params.append((eps, min_pts))
        if not is_thing[c]:
            continue
        if eps <= 0:
            # duplicated positions: every member sits on the same spot
            local = np.zeros(len(members), dtype=np.int64)
        else:
            local = adaptive_dbscan(cloud.positions[members], eps, min_pts)
        hit = local >= 0
        z_pi[members[hit]] = local[hit] + next_id
        next_id += int(local.max()) + 1 if hit.any() else 0
    return PseudoLabelSet(z_pc, z_pi, class_repr, is_thing, params, seed)
