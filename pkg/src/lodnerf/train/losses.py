"""The four training loss terms and their hand-written gradients.

The total objective is the photometric error plus three weighted
regularisers: a distortion term that concentrates ray weights, a
between-level density consistency term, and a transparency term that
clears density from regions no image supports.
"""

from __future__ import annotations

import numpy as np

from ..errors import LengthMismatch
from ..field import query as field_query
from ..octree import LodTree, NodeId

_UP = np.array([0.0, 0.0, 1.0])


def rgb_loss(pred, target) -> float:
    """Mean squared error over channels (and rays, for batched input)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return float(np.mean((pred - target) ** 2))


def _mids_deltas(intervals: np.ndarray):
    intervals = np.asarray(intervals, dtype=np.float64)
    mids = 0.5 * (intervals[..., 0] + intervals[..., 1])
    deltas = intervals[..., 1] - intervals[..., 0]
    return mids, deltas


def distortion_loss(weights, intervals) -> float:
    """Pairwise weight-spread penalty in normalised ray distance.

    sum_ij w_i w_j |m_i - m_j| + (1/3) sum_i w_i^2 d_i with interval
    midpoints m and lengths d given in s in [0, 1].  Batched input
    averages over rays.
    """
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    intervals = np.asarray(intervals, dtype=np.float64)
    if intervals.ndim == 2:
        intervals = intervals[None]
    if intervals.shape[:2] != w.shape:
        raise LengthMismatch(
            f"weights {w.shape} do not align with intervals {intervals.shape}")
    mids, deltas = _mids_deltas(intervals)
    gap = np.abs(mids[:, :, None] - mids[:, None, :])
    pair = np.einsum("ns,nt,nst->n", w, w, gap)
    self_term = np.sum(w * w * deltas, axis=-1) / 3.0
    return float(np.mean(pair + self_term))


def distortion_loss_grad(weights, intervals) -> np.ndarray:
    """d distortion / d weights for batched rays (mean over rays applied)."""
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    intervals = np.asarray(intervals, dtype=np.float64)
    if intervals.ndim == 2:
        intervals = intervals[None]
    mids, deltas = _mids_deltas(intervals)
    gap = np.abs(mids[:, :, None] - mids[:, None, :])
    grad = 2.0 * np.einsum("nt,nst->ns", w, gap) + (2.0 / 3.0) * w * deltas
    return grad / w.shape[0]


def sample_leafmost(tree: LodTree, points: np.ndarray, owned=None,
                    split_level=None):
    """Density at the deepest retained (and owned) node covering each point.

    Returns (sigma, per-node index lists, records) for gradient hookup.
    """
    assignment, nodes = tree.route(
        points, np.full(len(points), tree.root_gsd), force_level=tree.max_depth,
        owned=owned, split_level=split_level)
    sigma = np.empty(len(points))
    groups = []
    for i, nid in enumerate(nodes):
        node = tree.nodes[nid]
        idx = np.nonzero(assignment == i)[0]
        local = (points[idx] - node.aabb.min_corner) / node.aabb.edge
        local = np.clip(local, 0.0, 1.0)
        smp, rec = field_query(node.field, local, _UP, None, with_record=True)
        sigma[idx] = smp.density
        groups.append((nid, idx, rec))
    return sigma, groups


def transparency_loss(tree: LodTree, n_points: int, gen: np.random.Generator) -> float:
    """-mean(exp(-sigma)) over uniform points in the scene box.

    Ranges from -1 (fully transparent scene) to 0 (opaque everywhere);
    minimising it pushes unsupported density towards zero.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    pts = gen.uniform(tree.root_aabb.min_corner, tree.root_aabb.max_corner,
                      size=(n_points, 3))
    sigma, _groups = sample_leafmost(tree, pts)
    return float(-np.mean(np.exp(-sigma)))


def level_consistency_loss(tree: LodTree, n_points: int,
                           gen: np.random.Generator) -> float:
    """Mean squared density gap between retained child/parent pairs.

    Points are sampled uniformly in the scene box; every retained
    ancestor pair covering a point contributes one squared difference of
    activated densities at that same world position.
    """
    pts = gen.uniform(tree.root_aabb.min_corner, tree.root_aabb.max_corner,
                      size=(n_points, 3))
    loss, _pairs, _n = _consistency_forward(tree, pts)
    return loss


def _consistency_forward(tree: LodTree, pts: np.ndarray, owned=None, split_level=None):
    """Forward pass shared with training; returns (loss, pair records, count)."""
    assignment, nodes = tree.route(
        pts, np.full(len(pts), tree.root_gsd), force_level=tree.max_depth,
        owned=owned, split_level=split_level)
    depth_of = np.array([nodes[a].level for a in assignment])
    pairs = []
    total = 0.0
    count = 0
    for lvl in range(1, tree.max_depth + 1):
        mask = depth_of >= lvl
        if not np.any(mask):
            break
        idx = np.nonzero(mask)[0]
        sub = pts[idx]
        child_sigma = np.empty(len(idx))
        parent_sigma = np.empty(len(idx))
        child_groups = _query_level(tree, sub, lvl, child_sigma)
        parent_groups = _query_level(tree, sub, lvl - 1, parent_sigma)
        diff = child_sigma - parent_sigma
        total += float(np.sum(diff ** 2))
        count += len(idx)
        pairs.append((idx, diff, child_groups, parent_groups))
    if count == 0:
        return 0.0, [], 0
    return total / count, pairs, count


def _query_level(tree: LodTree, pts: np.ndarray, level: int, out_sigma: np.ndarray):
    """Query the level-``level`` retained node containing each point."""
    cells = tree.cell_indices(pts, level)
    keys = (cells[:, 0] << 42) | (cells[:, 1] << 21) | cells[:, 2]
    groups = []
    for key in np.unique(keys):
        nid = NodeId(level, int(key >> 42), int((key >> 21) & ((1 << 21) - 1)),
                     int(key & ((1 << 21) - 1)))
        node = tree.nodes[nid]
        idx = np.nonzero(keys == key)[0]
        local = (pts[idx] - node.aabb.min_corner) / node.aabb.edge
        local = np.clip(local, 0.0, 1.0)
        smp, rec = field_query(node.field, local, _UP, None, with_record=True)
        out_sigma[idx] = smp.density
        groups.append((nid, idx, rec))
    return groups
