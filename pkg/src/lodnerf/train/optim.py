"""Adaptive-moment optimiser over per-node parameter arrays."""

from __future__ import annotations

import math

import numpy as np

from ..field import FieldGradients, VoxelField


class AdamOptimizer:
    """Adam with a cosine-decayed step size.

    Moments are float64 and keyed by (node_id, array name); parameters
    stay float32 in place.  ``total_steps`` anchors the cosine schedule;
    the step size decays from ``lr`` to ``lr * min_factor``.
    """

    def __init__(self, lr: float = 0.05, beta1: float = 0.9, beta2: float = 0.99,
                 eps: float = 1e-15, total_steps: int = 1000,
                 min_factor: float = 0.1):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.total_steps = max(1, total_steps)
        self.min_factor = min_factor
        self.t = 0
        self.moments: dict = {}

    def lr_at(self, t: int) -> float:
        frac = min(t / self.total_steps, 1.0)
        lo = self.lr * self.min_factor
        return lo + 0.5 * (self.lr - lo) * (1.0 + math.cos(math.pi * frac))

    def step(self, fields: dict, grads: dict) -> None:
        """One synchronized update: every array of every field, in id order.

        Fields without a gradient entry this step still advance their
        moments with a zero gradient, so update trajectories do not depend
        on which nodes a batch happened to touch.
        """
        self.t += 1
        lr_t = self.lr_at(self.t)
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for nid in sorted(fields):
            fld: VoxelField = fields[nid]
            g: FieldGradients | None = grads.get(nid)
            for name, arr in fld.array_items():
                key = (nid, name)
                if key not in self.moments:
                    self.moments[key] = (np.zeros(arr.shape), np.zeros(arr.shape))
                m, v = self.moments[key]
                ga = getattr(g, name) if g is not None else None
                if ga is None:
                    m *= self.beta1
                    v *= self.beta2
                else:
                    m *= self.beta1
                    m += (1.0 - self.beta1) * ga
                    v *= self.beta2
                    v += (1.0 - self.beta2) * ga * ga
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                arr -= (lr_t * update).astype(np.float32)

    def state_arrays(self):
        """(key, m, v) triples for checkpointing."""
        for key in sorted(self.moments):
            m, v = self.moments[key]
            yield key, m, v
