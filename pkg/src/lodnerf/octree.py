"""The level-of-detail tree: construction, pruning and traversal.

A node at level L covers one cube of the scene, its eight children the
octants of that cube.  Every node halves the ground sampling distance
(GSD = cube edge / grid size) of its parent, so the level whose GSD
matches a sampling sphere's radius is a simple log2 of the radius ratio.

Pruning keeps exactly the union of root-to-target chains induced by the
observation spheres of a sparse reconstruction, which is closed under
taking parents by construction; traversal of the pruned tree answers a
query at the deepest retained ancestor of the ideal target node.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .errors import EmptyObservations, PointOutsideScene, UnknownNode
from .field import FieldSample, VoxelField, make_field, query as field_query
from .geometry import Aabb


class NodeId(NamedTuple):
    level: int
    ix: int
    iy: int
    iz: int

    def parent(self) -> "NodeId":
        return NodeId(self.level - 1, self.ix >> 1, self.iy >> 1, self.iz >> 1)

    def child(self, octant: int) -> "NodeId":
        return NodeId(self.level + 1,
                      (self.ix << 1) | (octant & 1),
                      (self.iy << 1) | ((octant >> 1) & 1),
                      (self.iz << 1) | ((octant >> 2) & 1))

    @property
    def octant_in_parent(self) -> int:
        return (self.ix & 1) | ((self.iy & 1) << 1) | ((self.iz & 1) << 2)


ROOT_ID = NodeId(0, 0, 0, 0)


def node_gsd(aabb_edge: float, grid_size: int) -> float:
    """Ground sampling distance of a node: cube edge over grid size."""
    if aabb_edge <= 0:
        raise ValueError("aabb_edge must be positive")
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    return aabb_edge / grid_size


def select_level(root_gsd: float, perturbed_radius, max_depth: int):
    """Tree level whose granularity matches a sampling-sphere radius.

    floor(log2(root_gsd / radius)) clamped to [0, max_depth]; radii at or
    above the root GSD map to the root, radii finer than the deepest level
    clamp to it.  Accepts scalars or arrays.
    """
    r = np.asarray(perturbed_radius, dtype=np.float64)
    if root_gsd <= 0 or np.any(r <= 0):
        raise ValueError("root_gsd and radius must be positive")
    raw = np.floor(np.log2(root_gsd / r))
    lvl = np.clip(raw, 0, max_depth).astype(np.int64)
    return int(lvl) if np.isscalar(perturbed_radius) or r.ndim == 0 else lvl


@dataclass
class OctreeNode:
    node_id: NodeId
    aabb: Aabb
    gsd: float
    field: Optional[VoxelField] = None
    children: list = dataclass_field(default_factory=lambda: [None] * 8)

    @property
    def param_bytes(self) -> int:
        return self.field.param_bytes if self.field is not None else 0

    @property
    def level(self) -> int:
        return self.node_id.level


def world_to_local(node: OctreeNode, x_world) -> np.ndarray:
    """Map world points into the node's unit cube, (x - min) / edge."""
    x = np.asarray(x_world, dtype=np.float64)
    local = (x - node.aabb.min_corner) / node.aabb.edge
    if np.any(local < -1e-9) or np.any(local > 1 + 1e-9):
        raise PointOutsideScene(f"point outside node {node.node_id}")
    return np.clip(local, 0.0, 1.0)


def local_to_world(node: OctreeNode, x_local) -> np.ndarray:
    x = np.asarray(x_local, dtype=np.float64)
    return node.aabb.min_corner + x * node.aabb.edge


class LodTree:
    """A pruned (or perfect) octree plus fast lookup tables.

    Topology is immutable after construction; node fields hold the only
    mutable state and are swapped/updated by the trainer under its own
    locking discipline.
    """

    def __init__(self, root_aabb: Aabb, grid_size: int, max_depth: int,
                 node_ids: Iterable[NodeId]):
        root_aabb.require_cube()
        self.root_aabb = root_aabb
        self.grid_size = int(grid_size)
        self.max_depth = int(max_depth)
        self.root_gsd = node_gsd(root_aabb.edge, grid_size)

        ids = set(node_ids)
        ids.add(ROOT_ID)
        for nid in list(ids):
            cur = nid
            while cur.level > 0:  # chains are parent-closed; enforce anyway
                cur = cur.parent()
                ids.add(cur)
        self.nodes: dict[NodeId, OctreeNode] = {}
        for nid in sorted(ids):
            if nid.level > self.max_depth:
                raise ValueError(f"node {nid} deeper than max_depth {self.max_depth}")
            if not all(0 <= c < (1 << nid.level) for c in (nid.ix, nid.iy, nid.iz)):
                raise ValueError(f"node {nid} grid coordinates out of range")
            self.nodes[nid] = OctreeNode(nid, self._node_aabb(nid),
                                         self.root_gsd / (1 << nid.level))
        for nid, node in self.nodes.items():
            if nid.level == 0:
                continue
            parent = self.nodes[nid.parent()]
            parent.children[nid.octant_in_parent] = node

        self._level_keys: list[np.ndarray] = []
        for lvl in range(self.max_depth + 1):
            keys = sorted(self._pack(n) for n in self.nodes if n.level == lvl)
            self._level_keys.append(np.asarray(keys, dtype=np.int64))

    @staticmethod
    def _pack(nid: NodeId) -> int:
        return ((nid.ix << 42) | (nid.iy << 21) | nid.iz)

    def _node_aabb(self, nid: NodeId) -> Aabb:
        edge = self.root_aabb.edge / (1 << nid.level)
        lo = self.root_aabb.min_corner + edge * np.array([nid.ix, nid.iy, nid.iz], dtype=np.float64)
        return Aabb(lo, lo + edge)

    @property
    def root(self) -> OctreeNode:
        return self.nodes[ROOT_ID]

    @property
    def total_param_bytes(self) -> int:
        return sum(n.param_bytes for n in self.nodes.values())

    def node(self, nid: NodeId) -> OctreeNode:
        try:
            return self.nodes[NodeId(*nid)]
        except KeyError:
            raise UnknownNode(f"no node {nid} in tree") from None

    def level_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for nid in self.nodes:
            hist[nid.level] = hist.get(nid.level, 0) + 1
        return hist

    def subtree_param_bytes(self, nid: NodeId) -> int:
        """Parameter bytes of a node and all of its descendants."""
        node = self.node(nid)
        total = 0
        stack = [node]
        while stack:
            n = stack.pop()
            total += n.param_bytes
            stack.extend(c for c in n.children if c is not None)
        return total

    def subtree_ids(self, nid: NodeId) -> list[NodeId]:
        node = self.node(nid)
        out = []
        stack = [node]
        while stack:
            n = stack.pop()
            out.append(n.node_id)
            stack.extend(c for c in n.children if c is not None)
        return out

    # -- coordinate arithmetic -------------------------------------------

    def cell_indices(self, points: np.ndarray, level: int) -> np.ndarray:
        """Grid coordinates of the level-``level`` cubes containing points.

        Points exactly on a splitting plane belong to the lower-index
        octant; the result is (N, 3) int64.
        """
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        u = (p - self.root_aabb.min_corner) / self.root_aabb.edge
        if np.any(u < 0) or np.any(u > 1):
            raise PointOutsideScene("point outside the root box")
        c = u * (1 << level)
        idx = np.ceil(c).astype(np.int64) - 1
        return np.clip(idx, 0, (1 << level) - 1)

    def ideal_chain(self, point, target_level: int) -> list[NodeId]:
        """Root-to-target chain of cube ids containing ``point``."""
        if target_level < 0:
            raise ValueError("target_level must be >= 0")
        chain = []
        for lvl in range(target_level + 1):
            ix, iy, iz = self.cell_indices(point, lvl)[0]
            chain.append(NodeId(lvl, int(ix), int(iy), int(iz)))
        return chain

    # -- traversal ---------------------------------------------------------

    def find_subcube(self, node: OctreeNode, x) -> int:
        """Octant of ``node`` containing x, lower octant on exact boundaries."""
        mid = node.aabb.center
        x = np.asarray(x, dtype=np.float64)
        return int((x[0] > mid[0]) | ((x[1] > mid[1]) << 1) | ((x[2] > mid[2]) << 2))

    def descend(self, node: OctreeNode, x, r: float, d,
                appearance_id=None) -> tuple[FieldSample, NodeId]:
        """Route one sampling sphere down the pruned tree and query it.

        Starting from ``node`` (normally the root): if the sphere is too
        coarse for the next level (2r exceeds this node's GSD) the node
        answers; else recurse into the containing octant, falling back to
        this node when that child was pruned away.  Returns the sample and
        the id of the node that answered, for working-set accounting.
        """
        x = np.asarray(x, dtype=np.float64)
        if node.node_id == ROOT_ID and not self.root_aabb.contains(x, atol=1e-12):
            raise PointOutsideScene(f"point {x} outside the scene")
        while True:
            if 2.0 * r > node.gsd:
                break  # process: descending further would overshoot the radius
            child = node.children[self.find_subcube(node, x)]
            if child is None:
                break  # revert: the matching child was pruned away
            node = child  # descend
        sample = field_query(node.field, world_to_local(node, x), d, appearance_id)
        return sample, node.node_id

    def route(self, points: np.ndarray, radii: np.ndarray,
              force_level: int | None = None,
              owned=None, split_level: int | None = None
              ) -> tuple[np.ndarray, list[NodeId]]:
        """Vectorised routing of many spheres at once.

        Returns (assignment, nodes): ``assignment[k]`` indexes into
        ``nodes``, the distinct answering nodes of this batch.  Agrees
        with :meth:`descend` sphere by sphere; used by the renderer so a
        frame costs a handful of array passes instead of a Python
        recursion per sample.  ``force_level`` overrides the radius-based
        target for every sphere (the deepest-retained ablation).

        ``owned``/``split_level`` model a distributed worker: descent into
        a subtree rooted at level ``split_level`` that is not in ``owned``
        stops at the subtree root's parent, exactly as if that subtree had
        been pruned away on this worker.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        r = np.asarray(radii, dtype=np.float64)
        n = pts.shape[0]
        if force_level is None:
            target = select_level(self.root_gsd, r, self.max_depth)
        else:
            target = np.full(n, int(force_level), dtype=np.int64)
        target = np.broadcast_to(target, (n,))

        owned_keys = None
        if owned is not None:
            if split_level is None:
                raise ValueError("owned requires split_level")
            owned_keys = np.asarray(sorted(self._pack(NodeId(*nid)) for nid in owned),
                                    dtype=np.int64)

        resolved = np.zeros(n, dtype=np.int64)  # answering level per sample
        packed = np.zeros(n, dtype=np.int64)
        active = np.arange(n)
        for lvl in range(1, self.max_depth + 1):
            active = active[target[active] >= lvl]
            if active.size == 0:
                break
            idx = self.cell_indices(pts[active], lvl)
            keys = (idx[:, 0] << 42) | (idx[:, 1] << 21) | idx[:, 2]
            table = self._level_keys[lvl]
            if table.size:
                pos = np.searchsorted(table, keys)
                pos = np.minimum(pos, table.size - 1)
                present = table[pos] == keys
            else:
                present = np.zeros(keys.shape, dtype=bool)
            if owned_keys is not None and lvl >= split_level:
                shift = (lvl - split_level)
                anc = (((keys >> 42) >> shift) << 42) \
                    | ((((keys >> 21) & ((1 << 21) - 1)) >> shift) << 21) \
                    | ((keys & ((1 << 21) - 1)) >> shift)
                if owned_keys.size:
                    p2 = np.searchsorted(owned_keys, anc)
                    p2 = np.minimum(p2, owned_keys.size - 1)
                    present &= owned_keys[p2] == anc
                else:
                    present &= False
            hit = active[present]
            resolved[hit] = lvl
            packed[hit] = keys[present]
            active = hit  # parent closure: absent here => absent deeper

        order = np.lexsort((packed, resolved))
        assignment = np.empty(n, dtype=np.int64)
        nodes: list[NodeId] = []
        prev = None
        for k in order:
            key = (int(resolved[k]), int(packed[k]))
            if key != prev:
                lvl, p = key
                nodes.append(NodeId(lvl, p >> 42, (p >> 21) & ((1 << 21) - 1), p & ((1 << 21) - 1)))
                prev = key
            assignment[k] = len(nodes) - 1
        return assignment, nodes


def build_ideal_chain(root_aabb: Aabb, point, target_level: int) -> list[NodeId]:
    """Chain of cube ids from the root down to ``target_level`` around a point.

    The chain of an ideal, unpruned tree; pruning unions these chains.
    """
    tree = LodTree(root_aabb, grid_size=1, max_depth=max(target_level, 0), node_ids=[])
    return tree.ideal_chain(point, target_level)


@dataclass(frozen=True)
class SparseObservation:
    """One (sparse point, observing camera) pair with its pruning radius."""

    point: np.ndarray
    camera_index: int
    radius: float


def prune_tree(root_aabb: Aabb, grid_size: int, max_depth: int,
               observations: list[SparseObservation]) -> LodTree:
    """Build the tree that retains exactly the observation-supported chains.

    Each observation contributes the root-to-target chain of the cube
    containing its point, where the target level matches its unperturbed
    radius; the tree is the union of all chains.

    Raises
    ------
    EmptyObservations
        If the observation list is empty.
    PointOutsideScene
        If any observation point falls outside ``root_aabb``.
    """
    if not observations:
        raise EmptyObservations("cannot prune with zero observations")
    root_aabb.require_cube()
    g0 = node_gsd(root_aabb.edge, grid_size)
    skeleton = LodTree(root_aabb, grid_size, max_depth, [])
    retained: set[NodeId] = set()
    pts = np.stack([np.asarray(o.point, dtype=np.float64) for o in observations])
    radii = np.array([o.radius for o in observations], dtype=np.float64)
    targets = select_level(g0, radii, max_depth)
    targets = np.broadcast_to(targets, (len(observations),))
    for lvl in range(max_depth + 1):
        mask = targets >= lvl
        if not np.any(mask):
            continue
        cells = skeleton.cell_indices(pts[mask], lvl)
        for ix, iy, iz in np.unique(cells, axis=0):
            retained.add(NodeId(lvl, int(ix), int(iy), int(iz)))
    return LodTree(root_aabb, grid_size, max_depth, retained)


def build_perfect_tree(root_aabb: Aabb, grid_size: int, max_depth: int) -> LodTree:
    """Fully populated tree with every node down to ``max_depth``."""
    ids = [NodeId(lvl, ix, iy, iz)
           for lvl in range(max_depth + 1)
           for ix in range(1 << lvl)
           for iy in range(1 << lvl)
           for iz in range(1 << lvl)]
    return LodTree(root_aabb, grid_size, max_depth, ids)


def allocate_fields(tree: LodTree, resolution: int, n_images: int, seed: int,
                    init_density: float = 0.02) -> None:
    """Give every retained node a fresh trainable field."""
    for nid in sorted(tree.nodes):
        tree.nodes[nid].field = make_field(resolution, n_images, seed=seed,
                                           init_density=init_density, tags=tuple(nid))
