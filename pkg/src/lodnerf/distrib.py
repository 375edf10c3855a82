"""Partitioned training: shared upper tree, worker-owned subtrees.

The tree splits at level L: everything above is replicated on every
worker and kept in lockstep by summing its gradients across workers each
step (the all-reduce contract, here a deterministic in-process sum);
every subtree rooted at level L belongs to exactly one worker and is
updated locally.  A sample descending into a subtree the worker does not
own is answered by its deepest shared ancestor, exactly as if that
subtree were pruned on this worker, so no worker ever needs the others'
parameters.

Workers also skip pixels that cannot see their subtrees: the sparse
points inside each worker's boxes are projected into every image and only
the bounding rectangles (plus a safety margin) are sampled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask, NoSubtreesAtLevel, OwnershipViolation
from .field import FieldGradients
from .geometry import CameraModel
from .octree import LodTree, NodeId, SparseObservation
from .train.loop import TrainConfig, WorkerContext, batch_gradients
from .train.optim import AdamOptimizer
from .train.pyramid import PyramidDataset, sample_pixels


@dataclass
class DistributionPlan:
    split_level: int
    shared_node_ids: set
    worker_assignments: dict          # worker -> set of level-L subtree roots
    pixel_masks: dict                 # (worker, image_id) -> (x0, y0, x1, y1), level-0 px
    margin: int = 16

    @property
    def n_workers(self) -> int:
        return len(self.worker_assignments)

    def masks_for(self, worker: int) -> dict:
        return {img: rect for (w, img), rect in self.pixel_masks.items() if w == worker}

    def to_json(self) -> str:
        return json.dumps({
            "split_level": self.split_level,
            "margin": self.margin,
            "shared": [list(n) for n in sorted(self.shared_node_ids)],
            "assignments": {str(w): [list(n) for n in sorted(s)]
                            for w, s in self.worker_assignments.items()},
            "masks": {f"{w}:{img}": list(rect)
                      for (w, img), rect in sorted(self.pixel_masks.items())},
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DistributionPlan":
        obj = json.loads(text)
        masks = {}
        for key, rect in obj["masks"].items():
            w, img = key.split(":")
            masks[(int(w), int(img))] = tuple(rect)
        return cls(
            split_level=obj["split_level"],
            margin=obj.get("margin", 16),
            shared_node_ids={NodeId(*n) for n in obj["shared"]},
            worker_assignments={int(w): {NodeId(*n) for n in s}
                                for w, s in obj["assignments"].items()},
            pixel_masks=masks,
        )


def plan(tree: LodTree, split_level: int, n_workers: int,
         observations: list[SparseObservation], cameras: list[CameraModel],
         margin: int = 16) -> DistributionPlan:
    """Assign level-L subtrees to workers and derive their pixel masks.

    Subtrees go largest-first (by parameter bytes) to the least-loaded
    worker, so the byte imbalance never exceeds the largest single
    subtree.  With one worker the masks are the full images and the plan
    degenerates to undistributed training.

    Raises
    ------
    NoSubtreesAtLevel
        If the retained tree has no nodes at ``split_level``.
    """
    if not (1 <= split_level <= tree.max_depth):
        raise ValueError("need 1 <= split_level <= max_depth")
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    roots = sorted(n for n in tree.nodes if n.level == split_level)
    if not roots:
        raise NoSubtreesAtLevel(f"no retained nodes at level {split_level}")
    shared = {n for n in tree.nodes if n.level < split_level}

    sizes = {r: tree.subtree_param_bytes(r) for r in roots}
    order = sorted(roots, key=lambda r: (-sizes[r], r))
    loads = [0] * n_workers
    assignments: dict[int, set] = {w: set() for w in range(n_workers)}
    for r in order:
        w = min(range(n_workers), key=lambda i: (loads[i], i))
        assignments[w].add(r)
        loads[w] += sizes[r]

    masks: dict = {}
    if n_workers == 1:
        for img_id, cam in enumerate(cameras):
            masks[(0, img_id)] = (0, 0, cam.resolution[0], cam.resolution[1])
    else:
        pts = np.stack([np.asarray(o.point) for o in observations]) if observations else None
        for w in range(n_workers):
            if pts is None:
                continue
            inside = np.zeros(len(pts), dtype=bool)
            for r in assignments[w]:
                box = tree.nodes[r].aabb
                inside |= box.contains(pts)
            wpts = pts[inside]
            if len(wpts) == 0:
                continue
            for img_id, cam in enumerate(cameras):
                px, z = cam.project(wpts)
                ok = z > 0
                if not np.any(ok):
                    continue
                p = px[ok]
                x0 = int(np.floor(p[:, 0].min())) - margin
                y0 = int(np.floor(p[:, 1].min())) - margin
                x1 = int(np.ceil(p[:, 0].max())) + margin
                y1 = int(np.ceil(p[:, 1].max())) + margin
                x0, y0 = max(0, x0), max(0, y0)
                x1 = min(cam.resolution[0], x1)
                y1 = min(cam.resolution[1], y1)
                if x1 > x0 and y1 > y0:
                    masks[(w, img_id)] = (x0, y0, x1, y1)
    return DistributionPlan(split_level=split_level, shared_node_ids=shared,
                            worker_assignments=assignments, pixel_masks=masks,
                            margin=margin)


def _level_rect(rect, level: int, cam_resolution) -> tuple:
    """Scale a level-0 rectangle to pyramid level ``level`` (margin halves too)."""
    x0, y0, x1, y1 = rect
    s = 1 << level
    w, h = cam_resolution
    return (max(0, x0 // s), max(0, y0 // s),
            min(w, -(-x1 // s)), min(h, -(-y1 // s)))


def masked_sample_pixels_arrays(dataset: PyramidDataset, masks: dict, n: int,
                                gen: np.random.Generator,
                                exclude_heldout: bool = False):
    """Uniform pixel draws restricted to per-image rectangles.

    When every mask covers its full image the draw is delegated to
    :func:`sample_pixels` (bit-identical consumption of ``gen``), which is
    what makes a one-worker plan reproduce undistributed training exactly.

    Raises
    ------
    EmptyMask
        If the rectangles cover zero pixels across all images and levels.
    """
    full = all(
        masks.get(img_id) == (0, 0, cam.resolution[0], cam.resolution[1])
        for img_id, cam in enumerate(dataset.cameras[0])
    ) and len(masks) == dataset.n_images
    if full:
        return sample_pixels(dataset, n, gen, exclude_heldout=exclude_heldout)

    rects = []
    for img_id, rect in sorted(masks.items()):
        for lvl in range(dataset.n_levels):
            cam = dataset.cameras[lvl][img_id]
            r = _level_rect(rect, lvl, cam.resolution)
            area = (r[2] - r[0]) * (r[3] - r[1])
            if area > 0:
                rects.append((lvl, img_id, r, area))
    if not rects:
        raise EmptyMask("pixel masks cover no pixels")
    areas = np.array([r[-1] for r in rects], dtype=np.int64)
    cum = np.concatenate([[0], np.cumsum(areas)])
    total = int(cum[-1])

    out_l = np.empty(n, dtype=np.int64)
    out_i = np.empty(n, dtype=np.int64)
    out_x = np.empty(n, dtype=np.int64)
    out_y = np.empty(n, dtype=np.int64)
    fill = 0
    while fill < n:
        draw = gen.integers(0, total, size=n - fill)
        slot = np.searchsorted(cum, draw, side="right") - 1
        rem = draw - cum[slot]
        for j in range(len(draw)):
            lvl, img_id, r, _area = rects[slot[j]]
            rw = r[2] - r[0]
            x = r[0] + int(rem[j]) % rw
            y = r[1] + int(rem[j]) // rw
            if exclude_heldout:
                flat = _global_flat(dataset, lvl, img_id, x, y)
                if flat % dataset.heldout_stride == 0:
                    continue  # redraw in the next round
            out_l[fill] = lvl
            out_i[fill] = img_id
            out_x[fill] = x
            out_y[fill] = y
            fill += 1
    return out_l, out_i, out_x, out_y


def _global_flat(dataset: PyramidDataset, lvl: int, img_id: int, x: int, y: int) -> int:
    slot = lvl * dataset.n_images + img_id
    w = dataset.images[lvl][img_id].shape[1]
    return int(dataset._offsets[slot]) + y * w + x


def masked_sample_pixels(dataset: PyramidDataset, dplan: DistributionPlan,
                         worker: int, n: int, gen: np.random.Generator):
    """Spec-level wrapper: one worker's restricted pixel draw."""
    if worker not in dplan.worker_assignments:
        raise ValueError(f"unknown worker {worker}")
    masks = dplan.masks_for(worker)
    if not masks:
        raise EmptyMask(f"worker {worker} sees no pixels")
    return masked_sample_pixels_arrays(dataset, masks, n, gen)


@dataclass
class WorkerState:
    worker: int
    tree: LodTree
    allowed: set
    optimizer: AdamOptimizer
    resident_bytes: int
    ctx: WorkerContext


@dataclass
class DistributedReport:
    steps: int
    n_workers: int
    shared_param_count: int
    comm_gradients_per_step: int
    comm_bytes_per_step: int
    worker_bytes: dict
    total_bytes: int
    loss_history: list          # per step: list of per-worker totals

    def max_worker_bytes(self) -> int:
        return max(self.worker_bytes.values())


def _subtree_closure(tree: LodTree, roots) -> set:
    out = set()
    for r in roots:
        out.update(tree.subtree_ids(r))
    return out


def _make_worker(tree: LodTree, dplan: DistributionPlan, w: int,
                 config: TrainConfig) -> WorkerState:
    wt = LodTree(tree.root_aabb, tree.grid_size, tree.max_depth, set(tree.nodes))
    allowed = set(dplan.shared_node_ids) | _subtree_closure(tree, dplan.worker_assignments[w])
    resident = 0
    for nid in allowed:
        src = tree.nodes[nid].field
        if src is not None:
            wt.nodes[nid].field = src.copy()
            resident += src.param_bytes
    opt = AdamOptimizer(lr=config.learning_rate, total_steps=config.n_iterations,
                        min_factor=config.lr_min_factor)
    ctx = WorkerContext(worker=w, masks=dplan.masks_for(w),
                        owned=dplan.worker_assignments[w],
                        split_level=dplan.split_level)
    return WorkerState(worker=w, tree=wt, allowed=allowed, optimizer=opt,
                       resident_bytes=resident, ctx=ctx)


def simulate_distributed_fit(tree: LodTree, dataset: PyramidDataset,
                             dplan: DistributionPlan, config: TrainConfig, *,
                             log_path=None) -> DistributedReport:
    """Run the partitioned training loop with simulated workers.

    Workers execute sequentially inside one process but are isolated
    state machines: each sees only the shared upper tree plus its owned
    subtrees, and the only cross-worker data flow is the summed shared
    gradient at the step barrier (fixed reduction order, so the run is
    deterministic).  On return the input tree holds the merged result.

    Raises
    ------
    OwnershipViolation
        If access tracing catches a worker touching an unowned subtree.
    """
    workers = [_make_worker(tree, dplan, w, config) for w in sorted(dplan.worker_assignments)]
    shared_sorted = sorted(dplan.shared_node_ids)
    shared_param_count = sum(tree.nodes[n].field.param_count
                             for n in shared_sorted if tree.nodes[n].field is not None)
    k = len(workers)
    loss_history = []
    log_f = open(log_path, "w", encoding="utf-8") if log_path else None
    if log_f:
        cols = ",".join(f"loss_w{w.worker}" for w in workers)
        log_f.write(f"step,{cols},comm_bytes,max_worker_bytes\n")
    try:
        for step in range(config.n_iterations):
            per_worker_grads = []
            per_worker_losses = []
            for ws in workers:
                ws.ctx.accessed_nodes.clear()
                breakdown, grads = batch_gradients(ws.tree, dataset, config, step, ws.ctx)
                illegal = ws.ctx.accessed_nodes - ws.allowed
                if illegal:
                    raise OwnershipViolation(
                        f"worker {ws.worker} touched unowned nodes {sorted(illegal)[:4]}")
                per_worker_grads.append(grads)
                per_worker_losses.append(breakdown.total)

            # all-reduce contract: shared gradients are summed in worker order
            reduced: dict = {}
            for nid in shared_sorted:
                acc = None
                for ws, grads in zip(workers, per_worker_grads):
                    g = grads.get(nid)
                    if g is None:
                        continue
                    if acc is None:
                        acc = FieldGradients.zeros_like(ws.tree.nodes[nid].field)
                    acc.accumulate(g)
                if acc is not None:
                    reduced[nid] = acc

            for ws, grads in zip(workers, per_worker_grads):
                update_grads = {nid: g for nid, g in grads.items()
                                if nid not in dplan.shared_node_ids}
                update_grads.update(reduced)
                fields = {nid: ws.tree.nodes[nid].field for nid in ws.allowed
                          if ws.tree.nodes[nid].field is not None}
                ws.optimizer.step(fields, update_grads)

            loss_history.append(per_worker_losses)
            if log_f:
                vals = ",".join(f"{v:.8g}" for v in per_worker_losses)
                log_f.write(f"{step},{vals},{4 * shared_param_count * k},"
                            f"{max(w.resident_bytes for w in workers)}\n")
    finally:
        if log_f:
            log_f.close()

    # merge: shared from worker 0 (all equal), owned from their owners
    for nid in shared_sorted:
        if workers[0].tree.nodes[nid].field is not None:
            tree.nodes[nid].field = workers[0].tree.nodes[nid].field
    for ws in workers:
        for nid in _subtree_closure(tree, dplan.worker_assignments[ws.worker]):
            if ws.tree.nodes[nid].field is not None:
                tree.nodes[nid].field = ws.tree.nodes[nid].field

    return DistributedReport(
        steps=config.n_iterations, n_workers=k,
        shared_param_count=shared_param_count,
        comm_gradients_per_step=shared_param_count * k,
        comm_bytes_per_step=4 * shared_param_count * k,
        worker_bytes={w.worker: w.resident_bytes for w in workers},
        total_bytes=tree.total_param_bytes,
        loss_history=loss_history)


def reference_fit(tree: LodTree, dataset: PyramidDataset, dplan: DistributionPlan,
                  config: TrainConfig) -> None:
    """Single-process baseline with the same routing and batches as the plan.

    Holds one copy of every parameter, walks the workers' batches in the
    same order with the same unowned-subtree reverts, sums their gradients
    identically, and applies one synchronized update.  The distributed
    simulation must match this run on the shared tree.
    """
    optimizer = AdamOptimizer(lr=config.learning_rate, total_steps=config.n_iterations,
                              min_factor=config.lr_min_factor)
    contexts = [WorkerContext(worker=w, masks=dplan.masks_for(w),
                              owned=dplan.worker_assignments[w],
                              split_level=dplan.split_level)
                for w in sorted(dplan.worker_assignments)]
    fields = {nid: node.field for nid, node in tree.nodes.items()
              if node.field is not None}
    for step in range(config.n_iterations):
        combined: dict = {}
        for ctx in contexts:
            _breakdown, grads = batch_gradients(tree, dataset, config, step, ctx)
            for nid, g in grads.items():
                if nid in combined:
                    combined[nid].accumulate(g)
                else:
                    acc = FieldGradients.zeros_like(tree.nodes[nid].field)
                    acc.accumulate(g)
                    combined[nid] = acc
        optimizer.step(fields, combined)
