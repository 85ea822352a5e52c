"""Vectorized numpy/scipy versions of the compiled kernels (same contracts)."""

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components


def splat_zbuffer(px, py, depth, height, width, radius):
    """Winner point index and depth per pixel; ties on depth go to the lower index."""
    px = np.asarray(px, dtype=np.int64)
    py = np.asarray(py, dtype=np.int64)
    depth = np.asarray(depth, dtype=np.float64)
    winner = np.full(height * width, -1, dtype=np.int64)
    zbuf = np.full(height * width, np.inf)
    if len(px) == 0:
        return winner, zbuf
    offs = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(offs, offs, indexing="xy")
    xs = (px[:, None] + dx.ravel()[None, :]).ravel()
    ys = (py[:, None] + dy.ravel()[None, :]).ravel()
    idx = np.repeat(np.arange(len(px)), dx.size)
    ok = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
    pix = ys[ok] * width + xs[ok]
    idx = idx[ok]
    d = depth[idx]
    order = np.lexsort((idx, d, pix))
    pix, idx, d = pix[order], idx[order], d[order]
    first = np.r_[True, pix[1:] != pix[:-1]]
    winner[pix[first]] = idx[first]
    zbuf[pix[first]] = d[first]
    return winner, zbuf


def segment_accumulate(index, rows, n_out):
    index = np.asarray(index, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.float64)
    sums = np.zeros((n_out, rows.shape[1]))
    # np.add.at is unbuffered and applies updates in input order
    np.add.at(sums, index, rows)
    counts = np.bincount(index, minlength=n_out).astype(np.int64)
    return sums, counts


def dbscan_core_labels(indptr, indices, min_pts):
    indptr = np.asarray(indptr, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    n = len(indptr) - 1
    deg = np.diff(indptr)
    core = deg >= min_pts
    labels = np.full(n, -1, dtype=np.int64)
    if not core.any():
        return labels, core
    rows = np.repeat(np.arange(n), deg)
    keep = core[rows] & core[indices]
    graph = csr_matrix((np.ones(keep.sum()), (rows[keep], indices[keep])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    core_idx = np.flatnonzero(core)
    # number components in order of their lowest core index
    comp_core = comp[core_idx]
    _, first = np.unique(comp_core, return_index=True)
    rank = np.empty(comp.max() + 1, dtype=np.int64)
    rank[comp_core[np.sort(first)]] = np.arange(len(first))
    labels[core_idx] = rank[comp_core]
    border = ~core[rows] & core[indices]
    b_rows, b_cols = rows[border], indices[border]
    # earliest-discovered cluster among core neighbors, as in sequential expansion
    best = np.full(n, np.iinfo(np.int64).max)
    np.minimum.at(best, b_rows, labels[b_cols])
    labels[b_rows] = best[b_rows]
    return labels, core
