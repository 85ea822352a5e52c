"""Slow, direct reference implementations the package is checked against.

Each oracle follows the textbook definition with plain loops or dense
matrices and shares no code with the package.
"""

from __future__ import annotations

from collections import defaultdict, deque

import numpy as np


def project_homogeneous(points, K, E, width=None, height=None, eps_z=1e-6):
    """``u~ = K [I|0] E p~`` with explicit homogeneous coordinates."""
    P = K @ np.hstack([np.eye(3), np.zeros((3, 1))]) @ E
    out = []
    for p in np.asarray(points, dtype=np.float64):
        cam = E @ np.append(p, 1.0)
        if cam[2] <= eps_z:
            out.append(None)
            continue
        h = P @ np.append(p, 1.0)
        u, v = h[0] / h[2], h[1] / h[2]
        if width is not None and not (0 <= u < width and 0 <= v < height):
            out.append(None)
            continue
        out.append((u, v, cam[2]))
    return out


def zbuffer_min(px, py, depth, height, width, radius):
    """Per pixel: smallest depth among points whose square splat covers it, and that point."""
    best = {}
    for i, (x, y, z) in enumerate(zip(px, py, depth)):
        for yy in range(y - radius, y + radius + 1):
            for xx in range(x - radius, x + radius + 1):
                if 0 <= xx < width and 0 <= yy < height:
                    cur = best.get((yy, xx))
                    if cur is None or z < cur[0]:
                        best[(yy, xx)] = (z, i)
    return best


def accumulate_divide(n_points, point_index, vectors):
    sums = defaultdict(lambda: 0.0)
    counts = defaultdict(int)
    for p, v in zip(point_index, vectors):
        sums[int(p)] = sums[int(p)] + np.asarray(v, dtype=np.float64)
        counts[int(p)] += 1
    dim = np.asarray(vectors).shape[1]
    feats = np.zeros((n_points, dim))
    hits = np.zeros(n_points, dtype=np.int64)
    for p, c in counts.items():
        feats[p] = sums[p] / c
        hits[p] = c
    return feats, hits


def reference_dbscan(points, eps, min_pts):
    """Sequential DBSCAN over a dense distance matrix; ids renumbered by lowest member."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    nbrs = [np.flatnonzero(d[i] <= eps) for i in range(n)]
    core = [len(nb) >= min_pts for nb in nbrs]
    labels = [-1] * n
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            q = queue.popleft()
            if not core[q]:
                continue
            for j in nbrs[q]:
                if labels[j] == -1:
                    labels[j] = cluster
                    queue.append(j)
        cluster += 1
    labels = np.array(labels)
    out = np.full(n, -1)
    order = {}
    for i, lab in enumerate(labels):
        if lab >= 0 and lab not in order:
            order[lab] = len(order)
    for i, lab in enumerate(labels):
        if lab >= 0:
            out[i] = order[lab]
    return out


def brute_knn(points, k):
    """Indices of the ``k`` nearest other points, ties broken by index."""
    points = np.asarray(points, dtype=np.float64)
    out = []
    for i, p in enumerate(points):
        d = ((points - p) ** 2).sum(1)
        cand = sorted((d[j], j) for j in range(len(points)) if j != i)
        out.append([j for _, j in cand[:k]])
    return np.array(out)


def set_partitions(n):
    """Every partition of ``range(n)`` as a label list."""
    def rec(i, labels, m):
        if i == n:
            yield list(labels)
            return
        for c in range(m + 1):
            labels.append(c)
            yield from rec(i + 1, labels, max(m, c + 1))
            labels.pop()
    yield from rec(0, [], 0)


def partition_energy_direct(x, edges, labels, lam):
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    e = 0.0
    for c in set(labels.tolist()):
        m = x[labels == c]
        e += float(((m - m.mean(0)) ** 2).sum())
    cut = sum(1 for a, b in edges if labels[a] != labels[b])
    return e + lam * cut


def _connected_blocks(labels, edges, n):
    adj = defaultdict(list)
    for a, b in edges:
        if labels[a] == labels[b]:
            adj[a].append(b)
            adj[b].append(a)
    for c in set(labels):
        members = [i for i in range(n) if labels[i] == c]
        seen = {members[0]}
        stack = [members[0]]
        while stack:
            q = stack.pop()
            for j in adj[q]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        if len(seen) != len(members):
            return False
    return True


def exhaustive_min_energy(x, edges, lam, connected_only=False):
    """Minimum of the cut energy over every partition of the nodes."""
    n = len(x)
    best = np.inf
    for labels in set_partitions(n):
        if connected_only and not _connected_blocks(labels, edges, n):
            continue
        best = min(best, partition_energy_direct(x, edges, labels, lam))
    return best


def load_balance_two_pass(probs, selected):
    probs = np.asarray(probs, dtype=np.float64)
    n, e = probs.shape
    frac = np.zeros(e)
    for row in selected:
        for s in row:
            frac[s] += 0.5
    frac /= n
    mean_p = np.zeros(e)
    for row in probs:
        mean_p += row
    mean_p /= n
    return e * float(sum(f * p for f, p in zip(frac, mean_p)))


def bce(p, y):
    total = 0.0
    for pi, yi in zip(p, y):
        total += -(yi * np.log(pi) + (1 - yi) * np.log(1 - pi))
    return total / len(p)


def union_find_components(n, edges, keep, things):
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for (a, b), k in zip(edges, keep):
        if k and things[a] and things[b]:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    ids = {}
    out = []
    for i in range(n):
        if not things[i]:
            out.append(-1)
            continue
        r = find(i)
        if r not in ids:
            ids[r] = len(ids)
        out.append(ids[r])
    return np.array(out)


def hash_grid_downsample(points, colors, voxel):
    """Group by floor(p / voxel) with a dict; returns {key: (centroid, mean color)}."""
    groups = defaultdict(list)
    for i, p in enumerate(points):
        key = tuple(int(np.floor(c / voxel)) for c in p)
        groups[key].append(i)
    return {k: (points[v].mean(0), colors[v].mean(0)) for k, v in groups.items()}


def pq_by_hand(pred_segments, gt_segments):
    """Per-class PQ/RQ/SQ from lists of point-index sets (one class)."""
    tp_iou = []
    used = set()
    for g in gt_segments:
        for j, p in enumerate(pred_segments):
            inter = len(g & p)
            union = len(g | p)
            if j not in used and inter / union > 0.5:
                tp_iou.append(inter / union)
                used.add(j)
                break
    tp = len(tp_iou)
    fp = len(pred_segments) - len(used)
    fn = len(gt_segments) - tp
    denom = tp + fp / 2 + fn / 2
    sq = sum(tp_iou) / tp if tp else 0.0
    rq = tp / denom if denom else 0.0
    return sq * rq, rq, sq
