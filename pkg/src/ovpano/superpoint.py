"""Hierarchical superpoint partition and per-superpoint target vectors.

Each level is an l0-penalized piecewise-constant approximation of node features
on an adjacency graph::

    E(partition) = sum_i ||x_i - mean(component(i))||^2 + lam * (#cut edges)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, maximum_flow
from scipy.spatial import cKDTree

from .cloud import FeatureField, PointCloud
from .embed import normalize
from .pseudolabel import PseudoLabelSet, renumber_by_first_member, spherical_kmeans

GEOM_DIM = 11
EDGE_DIM = 10
TARGET_K = 4


# ------------------------------------------------------------------ adjacency

def knn_indices(positions: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbours per point (self excluded), ties broken by lower index."""
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if k < 1 or n <= k:
        raise ValueError(f"need 1 <= k_nn < N, got k_nn={k}, N={n}")
    q = min(n, k + 1 + 8)
    dist, idx = cKDTree(positions).query(positions, k=q)
    dist = np.asarray(dist).reshape(n, q)
    idx = np.asarray(idx).reshape(n, q)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        sel = idx[i] != i
        d, j = dist[i][sel], idx[i][sel]
        order = np.lexsort((j, d))
        if q < n and len(order) > k and d[order[k - 1]] == d[order[k]]:
            # a tie straddles the cut-off and may continue past the queried window
            full = np.sqrt(((positions - positions[i]) ** 2).sum(1))
            full[i] = np.inf
            out[i] = np.lexsort((np.arange(n), full))[:k]
        else:
            out[i] = j[order[:k]]
    return out


def build_adjacency(positions: np.ndarray, k_nn: int) -> np.ndarray:
    """Symmetrized k-NN graph as unique undirected edges ``(i, j)`` with ``i < j``, sorted."""
    nbr = knn_indices(positions, k_nn)
    src = np.repeat(np.arange(len(nbr)), nbr.shape[1])
    dst = nbr.ravel()
    return undirected(np.stack([src, dst], axis=1))


def undirected(edges: np.ndarray) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    edges = edges[edges[:, 0] != edges[:, 1]]
    pairs = np.sort(edges, axis=1)
    if len(pairs) == 0:
        return pairs
    return np.unique(pairs, axis=0)


def symmetric(edges: np.ndarray) -> np.ndarray:
    """Both directions of each undirected edge, sorted by (source, target)."""
    e = undirected(edges)
    both = np.concatenate([e, e[:, ::-1]])
    if len(both) == 0:
        return both
    return both[np.lexsort((both[:, 1], both[:, 0]))]


# ------------------------------------------------------------------ partition

def partition_energy(features: np.ndarray, edges: np.ndarray, labels: np.ndarray, lam: float) -> float:
    features = np.asarray(features, dtype=np.float64).reshape(len(labels), -1)
    labels = np.asarray(labels)
    _, inv = np.unique(labels, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv).astype(np.float64)
    sums = np.zeros((len(counts), features.shape[1]))
    np.add.at(sums, inv, features)
    means = sums / counts[:, None]
    fit = float(((features - means[inv]) ** 2).sum())
    edges = np.asarray(edges).reshape(-1, 2)
    cuts = int(np.count_nonzero(labels[edges[:, 0]] != labels[edges[:, 1]])) if len(edges) else 0
    return fit + lam * cuts


@dataclass
class PartitionResult:
    labels: np.ndarray
    energy: float
    history: List[float] = field(default_factory=list)
    method: str = "greedy"

    @property
    def n_components(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def _components(n: int, edges: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    if len(edges) == 0:
        return np.arange(n)
    e = edges if mask is None else edges[mask]
    g = csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, lab = connected_components(g, directed=False)
    return lab


def _restricted_growth(n: int):
    """All set partitions of ``range(n)`` as restricted-growth label lists."""
    labels = [0] * n
    maxes = [0] * n

    def rec(i):
        if i == n:
            yield list(labels)
            return
        for v in range(maxes[i - 1] + 2):
            labels[i] = v
            maxes[i] = max(maxes[i - 1], v)
            yield from rec(i + 1)

    if n == 0:
        yield []
        return
    yield from rec(1)


def _exact_partition(x: np.ndarray, edges: np.ndarray, lam: float) -> PartitionResult:
    """Minimum-energy partition into connected components by enumeration."""
    n = len(x)
    adj = [set() for _ in range(n)]
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    best, best_key, best_labels = np.inf, None, None
    for lab in _restricted_growth(n):
        lab = np.array(lab)
        k = lab.max() + 1
        # every block must be connected
        ok = True
        for c in range(k):
            members = np.flatnonzero(lab == c)
            seen = {members[0]}
            stack = [members[0]]
            while stack:
                u = stack.pop()
                for w in adj[u]:
                    if lab[w] == c and w not in seen:
                        seen.add(w)
                        stack.append(w)
            if len(seen) != len(members):
                ok = False
                break
        if not ok:
            continue
        e = partition_energy(x, edges, lab, lam)
        key = (e, k)
        if best_key is None or e < best - 1e-12 * max(1.0, abs(best)) or (
                abs(e - best) <= 1e-12 * max(1.0, abs(best)) and k < best_key[1]):
            best, best_key, best_labels = e, key, lab
    return PartitionResult(renumber_by_first_member(best_labels), best, [best], "exact")


def _binary_cut(x: np.ndarray, sub_edges: np.ndarray, lam: float, rng_init: np.ndarray,
                iters: int = 8) -> Optional[np.ndarray]:
    """Two-value piecewise-constant fit on a component by alternating min-cut and refit."""
    lab = rng_init.astype(bool)
    if lab.all() or not lab.any():
        return None
    for _ in range(iters):
        c0 = x[~lab].mean(0)
        c1 = x[lab].mean(0)
        d0 = ((x - c0) ** 2).sum(1)
        d1 = ((x - c1) ** 2).sum(1)
        new = _min_cut_labels(d0, d1, sub_edges, lam)
        if new.all() or not new.any() or np.array_equal(new, lab):
            break
        lab = new
    return lab


def _min_cut_labels(d0: np.ndarray, d1: np.ndarray, edges: np.ndarray, lam: float) -> np.ndarray:
    """Exact binary labeling of ``sum d_label + lam * cuts`` by s-t min cut (integer-scaled)."""
    n = len(d0)
    base = np.minimum(d0, d1)
    a0, a1 = d0 - base, d1 - base
    total = a0.sum() + a1.sum() + 2 * lam * len(edges)
    if total <= 0:
        return d1 < d0
    scale = 2.0e8 / total
    s, t = n, n + 1
    rows = [np.full(n, s), np.arange(n)]
    cols = [np.arange(n), np.full(n, t)]
    caps = [np.round(a1 * scale), np.round(a0 * scale)]
    if len(edges):
        w = np.full(len(edges), np.round(lam * scale))
        rows += [edges[:, 0], edges[:, 1]]
        cols += [edges[:, 1], edges[:, 0]]
        caps += [w, w]
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    cap = np.concatenate(caps).astype(np.int64)
    keep = cap > 0
    graph = csr_matrix((cap[keep].astype(np.int32), (r[keep], c[keep])), shape=(n + 2, n + 2))
    graph.sum_duplicates()
    res = maximum_flow(graph, s, t)
    residual = graph - res.flow
    residual.data[residual.data < 0] = 0
    residual.eliminate_zeros()
    reach = breadth_first_order(residual, s, directed=True, return_predecessors=False)
    source_side = np.zeros(n + 2, dtype=bool)
    source_side[reach] = True
    # source side pays the label-0 cost
    return ~source_side[:n]


def _greedy_partition(x: np.ndarray, edges: np.ndarray, lam: float, max_passes: int = 50) -> PartitionResult:
    n = len(x)
    labels = _components(n, edges)
    energy = partition_energy(x, edges, labels, lam)
    history = [energy]
    for _ in range(max_passes):
        changed = False
        # split
        next_id = labels.max() + 1
        for c in np.unique(labels):
            members = np.flatnonzero(labels == c)
            if len(members) < 2:
                continue
            xc = x[members]
            centered = xc - xc.mean(0)
            if not np.any(centered):
                continue
            local = -np.ones(n, dtype=np.int64)
            local[members] = np.arange(len(members))
            inside = (local[edges[:, 0]] >= 0) & (local[edges[:, 1]] >= 0) if len(edges) else np.zeros(0, bool)
            sub = np.stack([local[edges[inside, 0]], local[edges[inside, 1]]], 1) if len(edges) else np.zeros((0, 2), np.int64)
            _, _, vt = np.linalg.svd(centered, full_matrices=False)
            proj = centered @ vt[0]
            cut = _binary_cut(xc, sub, lam, proj > 0)
            if cut is None:
                continue
            # connected pieces of each side become components
            same = cut[sub[:, 0]] == cut[sub[:, 1]] if len(sub) else np.zeros(0, bool)
            pieces = _components(len(members), sub, same)
            if pieces.max() == 0:
                continue
            trial = labels.copy()
            trial[members] = np.where(pieces == 0, c, next_id + pieces - 1)
            e_new = partition_energy(x, edges, trial, lam)
            if e_new < energy - 1e-12 * max(1.0, abs(energy)):
                labels, energy = trial, e_new
                next_id = labels.max() + 1
                history.append(energy)
                changed = True
        # merge
        while True:
            labels = renumber_by_first_member(labels)
            k = labels.max() + 1
            if k < 2 or len(edges) == 0:
                break
            la, lb = labels[edges[:, 0]], labels[edges[:, 1]]
            cross = la != lb
            if not cross.any():
                break
            pa = np.minimum(la[cross], lb[cross])
            pb = np.maximum(la[cross], lb[cross])
            pairs, nedge = np.unique(np.stack([pa, pb], 1), axis=0, return_counts=True)
            counts = np.bincount(labels, minlength=k).astype(np.float64)
            sums = np.zeros((k, x.shape[1]))
            np.add.at(sums, labels, x)
            means = sums / counts[:, None]
            na, nb = counts[pairs[:, 0]], counts[pairs[:, 1]]
            dfit = na * nb / (na + nb) * ((means[pairs[:, 0]] - means[pairs[:, 1]]) ** 2).sum(1)
            gain = dfit - lam * nedge
            best = int(np.argmin(gain))  # first minimum: lowest pair on ties
            if gain[best] >= -1e-12 * max(1.0, abs(energy)):
                break
            a, b = pairs[best]
            trial = np.where(labels == b, a, labels)
            e_new = partition_energy(x, edges, trial, lam)
            if not e_new < energy:
                break
            labels, energy = trial, e_new
            history.append(energy)
            changed = True
        if not changed:
            break
    labels = renumber_by_first_member(labels)
    return PartitionResult(labels, energy, history, "greedy")


def partition_level(features: np.ndarray, edges: np.ndarray, lam: float,
                    exact_limit: int = 8, max_passes: int = 50) -> PartitionResult:
    """Approximate minimizer of the l0 partition energy on a graph.

    Graphs with at most ``exact_limit`` nodes are solved exactly by enumerating
    connected partitions. Larger graphs start from the graph's connected
    components and alternate min-cut splits with pairwise merges; every accepted
    move strictly lowers the energy (recorded in ``history``).
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    edges = undirected(edges)
    if len(x) <= exact_limit:
        return _exact_partition(x, edges, lam)
    return _greedy_partition(x, edges, lam, max_passes)


# ------------------------------------------------------------ geometry

def _eigen(points: np.ndarray):
    if len(points) < 2:
        return np.zeros(3), np.eye(3)
    cov = np.cov(points.T, bias=True)
    w, v = np.linalg.eigh(cov)
    return np.clip(w[::-1], 0.0, None), v[:, ::-1]


def shape_descriptors(eigvals: np.ndarray, eigvecs: np.ndarray) -> np.ndarray:
    """Linearity, planarity, verticality from descending covariance eigenpairs."""
    l1, l2, l3 = eigvals
    if l1 <= 0:
        return np.zeros(3)
    return np.array([(l1 - l2) / l1, (l2 - l3) / l1, abs(eigvecs[2, 2])])


def chroma(colors: np.ndarray) -> np.ndarray:
    """Two color components orthogonal to the gray axis."""
    c = np.asarray(colors, dtype=np.float64)
    return np.stack([(c[..., 0] - c[..., 1]) / np.sqrt(2.0),
                     (c[..., 0] + c[..., 1] - 2 * c[..., 2]) / np.sqrt(6.0)], axis=-1)


def point_features(cloud: PointCloud, k: int = 10, color_weight: float = 1.0) -> np.ndarray:
    """Per-point local shape descriptors plus weighted RGB."""
    n = len(cloud)
    k = min(k, n - 1)
    out = np.zeros((n, 6))
    if k >= 2:
        _, nbr = cKDTree(cloud.positions).query(cloud.positions, k=k + 1)
        local = cloud.positions[nbr]  # (n, k+1, 3)
        centered = local - local.mean(1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
        w, v = np.linalg.eigh(cov)
        w = np.clip(w[:, ::-1], 0.0, None)
        v = v[:, :, ::-1]
        l1 = np.where(w[:, 0] > 0, w[:, 0], 1.0)
        out[:, 0] = (w[:, 0] - w[:, 1]) / l1
        out[:, 1] = (w[:, 1] - w[:, 2]) / l1
        out[:, 2] = np.abs(v[:, 2, 2])
        out[w[:, 0] <= 0, :3] = 0.0
    out[:, 3:] = color_weight * cloud.colors
    return out


def superpoint_geometry(positions: np.ndarray, colors: np.ndarray, assign: np.ndarray, n_sp: int) -> np.ndarray:
    """11 scalars per superpoint: centroid, sqrt eigenvalues, lin/plan/vert, 2 chroma."""
    geom = np.zeros((n_sp, GEOM_DIM))
    order = np.argsort(assign, kind="stable")
    bounds = np.searchsorted(assign[order], np.arange(n_sp + 1))
    for s in range(n_sp):
        idx = order[bounds[s]:bounds[s + 1]]
        pts = positions[idx]
        w, v = _eigen(pts)
        geom[s, 0:3] = pts.mean(0)
        geom[s, 3:6] = np.sqrt(w)
        geom[s, 6:9] = shape_descriptors(w, v)
        geom[s, 9:11] = chroma(colors[idx].mean(0))
    return geom


def edge_features(positions: np.ndarray, point_edges: np.ndarray, assign: np.ndarray,
                  sp_edges: np.ndarray, geom: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Per directed superpoint edge ``a -> b``: centroid offset, mean/std of crossing
    point offsets, and log size ratio."""
    pe = np.concatenate([point_edges, point_edges[:, ::-1]])
    a, b = assign[pe[:, 0]], assign[pe[:, 1]]
    cross = a != b
    a, b = a[cross], b[cross]
    off = positions[pe[cross, 1]] - positions[pe[cross, 0]]
    n_sp = len(geom)
    key = a * n_sp + b
    want = sp_edges[:, 0] * n_sp + sp_edges[:, 1]
    slot = np.searchsorted(want, key)
    cnt = np.bincount(slot, minlength=len(want)).astype(np.float64)
    s1 = np.zeros((len(want), 3))
    s2 = np.zeros((len(want), 3))
    np.add.at(s1, slot, off)
    np.add.at(s2, slot, off ** 2)
    safe = np.maximum(cnt, 1.0)[:, None]
    mean = s1 / safe
    std = np.sqrt(np.clip(s2 / safe - mean ** 2, 0.0, None))
    feat = np.zeros((len(want), EDGE_DIM))
    feat[:, 0:3] = geom[sp_edges[:, 1], 0:3] - geom[sp_edges[:, 0], 0:3]
    feat[:, 3:6] = mean
    feat[:, 6:9] = std
    feat[:, 9] = np.log(counts[sp_edges[:, 1]] / counts[sp_edges[:, 0]])
    return feat


# ------------------------------------------------------------ hierarchy

@dataclass
class Level:
    parent_of: np.ndarray  # index at the finer level (points for level 1) -> superpoint
    edges: np.ndarray  # directed, symmetric, sorted
    edge_feat: np.ndarray
    sp_geom: np.ndarray
    point_count: np.ndarray
    lam: float = 0.0
    energy: float = 0.0
    targets: Optional[np.ndarray] = None  # (S, 3, C)
    target_mask: Optional[np.ndarray] = None  # True = usable in the loss
    majority_class: Optional[np.ndarray] = None
    majority_instance: Optional[np.ndarray] = None
    is_thing: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return len(self.sp_geom)


@dataclass
class SuperpointHierarchy:
    levels: List[Level]
    n_points: int
    k_nn: int = 10
    requested_levels: int = 3

    @property
    def depth(self) -> int:
        return len(self.levels)

    def point_assignment(self, level: int) -> np.ndarray:
        """Superpoint index at ``level`` (1-based) for every raw point."""
        assign = self.levels[0].parent_of
        for lv in self.levels[1:level]:
            assign = lv.parent_of[assign]
        return assign

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"n_points": self.n_points, "k_nn": self.k_nn,
                    "requested_levels": self.requested_levels, "levels": []}
        for i, lv in enumerate(self.levels, start=1):
            arrays = {
                "parent_of": lv.parent_of.astype("<u4"), "edges": lv.edges.astype("<u4"),
                "edge_feat": lv.edge_feat.astype("<f4"), "sp_geom": lv.sp_geom.astype("<f4"),
                "point_count": lv.point_count.astype("<u4"),
            }
            if lv.targets is not None:
                arrays.update(targets=lv.targets.astype("<f4"),
                              target_mask=lv.target_mask.astype("u1"),
                              majority_class=lv.majority_class.astype("<i4"),
                              majority_instance=lv.majority_instance.astype("<i4"),
                              is_thing=lv.is_thing.astype("u1"))
            entry = {"size": lv.size, "lam": lv.lam, "energy": lv.energy, "arrays": {}}
            for name, arr in arrays.items():
                fname = f"level{i}_{name}.bin"
                (directory / fname).write_bytes(np.ascontiguousarray(arr).tobytes())
                entry["arrays"][name] = {"file": fname, "dtype": arr.dtype.str, "shape": list(arr.shape)}
            manifest["levels"].append(entry)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "SuperpointHierarchy":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        levels = []
        for entry in manifest["levels"]:
            arrs = {}
            for name, spec in entry["arrays"].items():
                raw = np.frombuffer((directory / spec["file"]).read_bytes(), dtype=spec["dtype"])
                arrs[name] = raw.reshape(spec["shape"])
            conv = {"parent_of": np.int64, "edges": np.int64, "point_count": np.int64,
                    "edge_feat": np.float64, "sp_geom": np.float64, "targets": np.float64,
                    "target_mask": bool, "majority_class": np.int64,
                    "majority_instance": np.int64, "is_thing": bool}
            arrs = {k: v.astype(conv[k]) for k, v in arrs.items()}
            levels.append(Level(lam=entry["lam"], energy=entry["energy"], **arrs))
        return cls(levels, manifest["n_points"], manifest["k_nn"], manifest["requested_levels"])


def _coarse_edges(child_edges: np.ndarray, parent: np.ndarray) -> np.ndarray:
    if len(child_edges) == 0:
        return child_edges
    return undirected(parent[child_edges])


def geometry_scale(cloud: PointCloud) -> float:
    ext = cloud.positions.max(0) - cloud.positions.min(0)
    return float(np.linalg.norm(ext)) or 1.0


def partition_features(geom: np.ndarray, scale: float) -> np.ndarray:
    """sp_geom with metric entries divided by the scene diagonal."""
    f = geom.copy()
    f[:, :6] /= scale
    return f


def build_hierarchy(cloud: PointCloud, pseudolabels: Optional[PseudoLabelSet],
                    field: Optional[FeatureField], levels: int = 3,
                    lams: Sequence[float] = (0.01, 0.1, 1.0), k_nn: int = 10,
                    color_weight: float = 1.0, seed: int = 0) -> SuperpointHierarchy:
    """Partition points into superpoints, then superpoints into coarser ones.

    Stops early when a level does not coarsen; ``depth`` reports the levels built.
    Targets are filled when ``pseudolabels`` and ``field`` are given.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if len(lams) < levels:
        raise ValueError(f"need {levels} lambda values, got {len(lams)}")
    point_edges = build_adjacency(cloud.positions, k_nn)
    scale = geometry_scale(cloud)
    feats = point_features(cloud, k_nn, color_weight)
    node_edges = point_edges
    assign_points = np.arange(len(cloud))
    out: List[Level] = []
    prev_size = len(cloud)
    for li in range(levels):
        part = partition_level(feats, node_edges, lams[li])
        parent = part.labels
        n_sp = part.n_components
        if li > 0 and n_sp >= prev_size:
            break
        assign_points = parent[assign_points]
        counts = np.bincount(assign_points, minlength=n_sp)
        geom = superpoint_geometry(cloud.positions, cloud.colors, assign_points, n_sp)
        sp_edges = symmetric(_coarse_edges(node_edges, parent))
        efeat = edge_features(cloud.positions, point_edges, assign_points, sp_edges, geom, counts)
        out.append(Level(parent, sp_edges, efeat, geom, counts, float(lams[li]), part.energy))
        node_edges = undirected(sp_edges)
        feats = partition_features(geom, scale)
        prev_size = n_sp
        if n_sp == 1:
            break
    hier = SuperpointHierarchy(out, len(cloud), k_nn, levels)
    if pseudolabels is not None and field is not None:
        propagate_targets(hier, field, pseudolabels, seed)
    return hier


def _majority(values: np.ndarray, groups: np.ndarray, n_groups: int, weights=None) -> np.ndarray:
    """Most frequent value per group; ties go to the smaller value; empty groups -> -1."""
    out = np.full(n_groups, -1, dtype=np.int64)
    if len(values) == 0:
        return out
    vals, inv = np.unique(values, return_inverse=True)
    table = np.zeros((n_groups, len(vals)))
    np.add.at(table, (groups, inv.reshape(-1)), 1.0 if weights is None else weights)
    has = table.sum(1) > 0
    out[has] = vals[np.argmax(table[has], axis=1)]
    return out


def _dominant_centers(vectors: np.ndarray, seed: int, n_keep: int):
    """Centers of the ``n_keep`` most populous spherical k-means clusters (K=4 or fewer)."""
    k = min(TARGET_K, len(vectors))
    km = spherical_kmeans(vectors, k, seed=seed)
    pop = np.bincount(km.assignments, minlength=k)
    order = np.lexsort((np.arange(k), -pop))
    centers = [km.centroids[order[0]]]
    if n_keep > 1:
        second = order[1] if k > 1 and pop[order[1]] > 0 else order[0]
        centers.append(km.centroids[second])
    return centers, pop[order]


def propagate_targets(hier: SuperpointHierarchy, field: FeatureField,
                      labels: PseudoLabelSet, seed: int = 0) -> SuperpointHierarchy:
    """Fill three target vectors, majority class/instance and thing flag per superpoint."""
    c = field.dim
    labeled = field.hit_count > 0
    lv1 = hier.levels[0]
    s1 = lv1.size
    assign = lv1.parent_of
    targets = np.zeros((s1, 3, c))
    mask = np.zeros(s1, dtype=bool)
    has_class = labels.z_pc >= 0
    maj_class = _majority(labels.z_pc[has_class], assign[has_class], s1)
    maj_inst = _majority(labels.z_pi[has_class], assign[has_class], s1)
    order = np.argsort(assign, kind="stable")
    bounds = np.searchsorted(assign[order], np.arange(s1 + 1))
    for s in range(s1):
        idx = order[bounds[s]:bounds[s + 1]]
        idx = idx[labeled[idx]]
        if len(idx) == 0 or maj_class[s] < 0:
            continue
        (t1, t2), _ = _dominant_centers(field.features[idx], seed, 2)
        targets[s] = [t1, t2, labels.class_repr[maj_class[s]]]
        mask[s] = True
    lv1.targets, lv1.target_mask = targets, mask
    lv1.majority_class, lv1.majority_instance = maj_class, maj_inst
    lv1.is_thing = np.where(maj_class >= 0, labels.is_thing[np.maximum(maj_class, 0)], False)
    for prev, lv in zip(hier.levels[:-1], hier.levels[1:]):
        n = lv.size
        child = np.flatnonzero(prev.target_mask)
        parent = lv.parent_of
        t = np.zeros((n, 3, c))
        m = np.zeros(n, dtype=bool)
        mc = _majority(prev.majority_class[child], parent[child], n)
        mi = _majority(prev.majority_instance[child], parent[child], n)
        for s in range(n):
            kids = child[parent[child] == s]
            if len(kids) == 0 or mc[s] < 0:
                continue
            (t1,), _ = _dominant_centers(prev.targets[kids, 0], seed, 1)
            (t2,), _ = _dominant_centers(prev.targets[kids, 1], seed, 1)
            t[s] = [t1, t2, labels.class_repr[mc[s]]]
            m[s] = True
        lv.targets, lv.target_mask = t, m
        lv.majority_class, lv.majority_instance = mc, mi
        lv.is_thing = np.where(mc >= 0, labels.is_thing[np.maximum(mc, 0)], False)
    return hier
