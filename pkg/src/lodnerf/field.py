"""Per-node radiance field: a trainable voxel grid with analytic gradients.

Each octree node carries one ``VoxelField``.  Density is a trilinearly
interpolated scalar lattice passed through softplus.  Color combines a
trilinearly interpolated 12-channel feature lattice with a degree-1
spherical-harmonic encoding of the view direction and a learned per-image
appearance embedding, then a sigmoid.  The mixing of the appearance
embedding into the three channels is a fixed (non-trainable) projection so
every learnable quantity lives in plain arrays with hand-derivable
gradients.

The interface is deliberately small (query / backward / parameter blobs)
so a different field, e.g. a hash grid, can be swapped in behind it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OutOfNodeBounds
from . import rng as _rng

SH_BASIS_DIM = 4
COLOR_FEATURES = 3 * SH_BASIS_DIM
APPEARANCE_DIM = 32

_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199

# fixed appearance projection, shared by every node; regenerated, not stored
_APPEARANCE_PROJECTION = (
    _rng.stream(0x5EED, "appearance-projection")
    .normal(0.0, 1.0 / np.sqrt(APPEARANCE_DIM), size=(3, APPEARANCE_DIM))
    .astype(np.float64)
)


def sh_basis(directions: np.ndarray) -> np.ndarray:
    """Degree-1 real spherical harmonics of unit directions, shape (N, 4)."""
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    out = np.empty((d.shape[0], SH_BASIS_DIM))
    out[:, 0] = _SH_C0
    out[:, 1] = -_SH_C1 * d[:, 1]
    out[:, 2] = _SH_C1 * d[:, 2]
    out[:, 3] = -_SH_C1 * d[:, 0]
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_softplus(y: float) -> float:
    """Raw value whose softplus equals ``y`` (y > 0)."""
    return float(np.log(np.expm1(y))) if y < 30 else float(y)


@dataclass
class VoxelField:
    """Trainable parameters of one node.

    density_raw : (R, R, R) float32, pre-activation densities
    color_feat  : (R, R, R, 12) float32, per-vertex color features
    appearance  : (n_images, 32) float32, per-image embeddings
    """

    density_raw: np.ndarray
    color_feat: np.ndarray
    appearance: np.ndarray

    @property
    def resolution(self) -> int:
        return self.density_raw.shape[0]

    @property
    def n_images(self) -> int:
        return self.appearance.shape[0]

    @property
    def param_count(self) -> int:
        return self.density_raw.size + self.color_feat.size + self.appearance.size

    @property
    def param_bytes(self) -> int:
        return 4 * self.param_count

    def array_items(self):
        return (("density_raw", self.density_raw),
                ("color_feat", self.color_feat),
                ("appearance", self.appearance))

    def copy(self) -> "VoxelField":
        return VoxelField(self.density_raw.copy(), self.color_feat.copy(),
                          self.appearance.copy())

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.array_items()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, resolution: int, n_images: int) -> "VoxelField":
        r3 = resolution ** 3
        flat = np.asarray(flat, dtype=np.float32)
        expected = r3 + r3 * COLOR_FEATURES + n_images * APPEARANCE_DIM
        if flat.size != expected:
            raise ValueError(f"expected {expected} parameters, got {flat.size}")
        d = flat[:r3].reshape(resolution, resolution, resolution).copy()
        c = flat[r3:r3 + r3 * COLOR_FEATURES].reshape(
            resolution, resolution, resolution, COLOR_FEATURES).copy()
        a = flat[r3 + r3 * COLOR_FEATURES:].reshape(n_images, APPEARANCE_DIM).copy()
        return cls(d, c, a)


def make_field(resolution: int, n_images: int, seed: int,
               init_density: float = 0.02, tags: tuple = ()) -> VoxelField:
    """Fresh field with a faint uniform fog and near-neutral colors.

    The small positive initial density gives the photometric loss something
    to carve; the transparency term is what clears fog that no image
    supports.  ``tags`` extends the init stream so sibling nodes built
    from one seed still get independent noise.
    """
    gen = _rng.stream(seed, "field-init", *tags)
    raw = inverse_softplus(init_density)
    density = np.full((resolution,) * 3, raw, dtype=np.float32)
    density += gen.normal(0.0, 1e-3, size=density.shape).astype(np.float32)
    color = gen.normal(0.0, 1e-2, size=(resolution,) * 3 + (COLOR_FEATURES,)).astype(np.float32)
    appearance = np.zeros((n_images, APPEARANCE_DIM), dtype=np.float32)
    return VoxelField(density, color, appearance)


@dataclass
class FieldSample:
    """Activated field output: density >= 0 and colors in [0, 1]."""

    density: np.ndarray
    color: np.ndarray


@dataclass
class AnalyticField:
    """Closed-form stand-in for a trained field; world-space callables.

    Plugs into the renderer in place of a :class:`VoxelField`, which lets
    tests drive the sampling and compositing machinery with exact field
    values.  Carries no parameters.
    """

    sigma_fn: object
    color_fn: object
    param_bytes: int = 0

    def evaluate_world(self, points: np.ndarray, directions, appearance_ids) -> FieldSample:
        pts = np.atleast_2d(points)
        return FieldSample(density=np.asarray(self.sigma_fn(pts), dtype=np.float64),
                           color=np.asarray(self.color_fn(pts), dtype=np.float64))


@dataclass
class QueryRecord:
    """Everything the backward pass needs to redo the chain rule.

    corner_flat : (N, 8) int, flattened lattice indices of the touched cells
    weights     : (N, 8) trilinear weights
    sh          : (N, 4) direction encoding
    app_rows    : (N,) embedding row per sample, -1 for the mean embedding
    """

    corner_flat: np.ndarray
    weights: np.ndarray
    sh: np.ndarray
    app_rows: np.ndarray
    raw_density: np.ndarray
    raw_color: np.ndarray
    density: np.ndarray
    color: np.ndarray


def _trilinear_setup(resolution: int, x_local: np.ndarray, atol: float):
    x = np.atleast_2d(np.asarray(x_local, dtype=np.float64))
    if np.any(x < -atol) or np.any(x > 1.0 + atol):
        bad = x[np.any((x < -atol) | (x > 1.0 + atol), axis=1)][0]
        raise OutOfNodeBounds(f"local coordinate {bad} outside the unit cube")
    x = np.clip(x, 0.0, 1.0)
    c = x * (resolution - 1)
    i0 = np.minimum(c.astype(np.int64), resolution - 2)
    f = c - i0
    # weights for the 8 corners in (dz, dy, dx) bit order of the corner index
    wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
    wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
    wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
    weights = np.empty((x.shape[0], 8))
    corner_flat = np.empty((x.shape[0], 8), dtype=np.int64)
    r = resolution
    for bit in range(8):
        dx, dy, dz = bit & 1, (bit >> 1) & 1, (bit >> 2) & 1
        weights[:, bit] = wx[:, dx] * wy[:, dy] * wz[:, dz]
        corner_flat[:, bit] = ((i0[:, 0] + dx) * r + (i0[:, 1] + dy)) * r + (i0[:, 2] + dz)
    return corner_flat, weights


def query(field: VoxelField, x_local: np.ndarray, directions: np.ndarray,
          appearance_ids=None, *, atol: float = 1e-9,
          with_record: bool = False):
    """Evaluate the field at node-local coordinates in [0, 1]^3.

    Parameters
    ----------
    x_local : (N, 3) or (3,)
        Positions in the node's unit cube.
    directions : (N, 3) or (3,)
        Unit view directions.
    appearance_ids : int array, int, or None
        Per-sample embedding rows; None or -1 selects the mean of all
        learned embeddings (used for cameras never seen in training).
    with_record
        Also return a :class:`QueryRecord` for the backward pass.

    Returns
    -------
    FieldSample, and the record when requested.

    Raises
    ------
    OutOfNodeBounds
        If any coordinate leaves the unit cube by more than ``atol``.
    """
    single = np.asarray(x_local).ndim == 1
    corner_flat, weights = _trilinear_setup(field.resolution, x_local, atol)
    n = corner_flat.shape[0]

    dens_flat = field.density_raw.reshape(-1).astype(np.float64, copy=False)
    feat_flat = field.color_feat.reshape(-1, COLOR_FEATURES).astype(np.float64, copy=False)
    raw_density = np.einsum("nk,nk->n", weights, dens_flat[corner_flat])
    feat = np.einsum("nk,nkf->nf", weights, feat_flat[corner_flat])

    sh = sh_basis(directions)
    if sh.shape[0] == 1 and n > 1:
        sh = np.broadcast_to(sh, (n, SH_BASIS_DIM))
    raw_color = np.einsum("ncb,nb->nc", feat.reshape(n, 3, SH_BASIS_DIM), sh)

    if appearance_ids is None:
        app_rows = np.full(n, -1, dtype=np.int64)
    else:
        app_rows = np.broadcast_to(np.asarray(appearance_ids, dtype=np.int64), (n,)).copy()
        app_rows[app_rows >= field.n_images] = -1
    emb = np.where(
        (app_rows >= 0)[:, None],
        field.appearance.astype(np.float64)[np.maximum(app_rows, 0)],
        field.appearance.astype(np.float64).mean(axis=0),
    )
    raw_color = raw_color + emb @ _APPEARANCE_PROJECTION.T

    density = softplus(raw_density)
    color = sigmoid(raw_color)
    sample = FieldSample(density=density[0] if single else density,
                         color=color[0] if single else color)
    if not with_record:
        return sample
    record = QueryRecord(corner_flat=corner_flat, weights=weights, sh=np.asarray(sh),
                         app_rows=app_rows, raw_density=raw_density,
                         raw_color=raw_color, density=density, color=color)
    return sample, record


@dataclass
class FieldGradients:
    """Dense parameter gradients of one node, float64 accumulators."""

    density_raw: np.ndarray
    color_feat: np.ndarray
    appearance: np.ndarray

    @classmethod
    def zeros_like(cls, field: VoxelField) -> "FieldGradients":
        return cls(np.zeros(field.density_raw.shape),
                   np.zeros(field.color_feat.shape),
                   np.zeros(field.appearance.shape))

    def accumulate(self, other: "FieldGradients") -> None:
        self.density_raw += other.density_raw
        self.color_feat += other.color_feat
        self.appearance += other.appearance

    def max_abs(self) -> float:
        return max(np.abs(self.density_raw).max(initial=0.0),
                   np.abs(self.color_feat).max(initial=0.0),
                   np.abs(self.appearance).max(initial=0.0))


def backward(field: VoxelField, record: QueryRecord,
             d_density: np.ndarray, d_color: np.ndarray,
             out: FieldGradients | None = None) -> FieldGradients:
    """Accumulate parameter gradients for one batch of queried samples.

    ``d_density`` (N,) and ``d_color`` (N, 3) are the upstream cotangents
    with respect to the *activated* outputs.  Gradients land only on the
    eight lattice cells each sample touched, the corresponding appearance
    rows, and nothing else.
    """
    if out is None:
        out = FieldGradients.zeros_like(field)
    n = record.corner_flat.shape[0]
    r3 = field.density_raw.size

    d_raw_density = np.asarray(d_density, dtype=np.float64) * sigmoid(record.raw_density)
    contrib = record.weights * d_raw_density[:, None]
    out.density_raw += np.bincount(
        record.corner_flat.ravel(), weights=contrib.ravel(), minlength=r3
    ).reshape(field.density_raw.shape)

    c = record.color
    d_raw_color = np.asarray(d_color, dtype=np.float64) * c * (1.0 - c)
    # feature gradient: outer product of per-channel color grads and SH basis
    d_feat = (d_raw_color[:, :, None] * record.sh[:, None, :]).reshape(n, COLOR_FEATURES)
    flat_idx = (record.corner_flat[:, :, None] * COLOR_FEATURES
                + np.arange(COLOR_FEATURES)[None, None, :])
    vals = record.weights[:, :, None] * d_feat[:, None, :]
    out.color_feat += np.bincount(
        flat_idx.ravel(), weights=vals.ravel(), minlength=r3 * COLOR_FEATURES
    ).reshape(field.color_feat.shape)

    d_emb = d_raw_color @ _APPEARANCE_PROJECTION  # (N, 32)
    rows = record.app_rows
    direct = rows >= 0
    if np.any(direct):
        np.add.at(out.appearance, rows[direct], d_emb[direct])
    if np.any(~direct) and field.n_images > 0:
        out.appearance += d_emb[~direct].sum(axis=0) / field.n_images
    return out


def query_gradients(field: VoxelField, x_local, directions, appearance_ids,
                    d_density, d_color) -> FieldGradients:
    """Gradient record for a batch of samples given upstream cotangents.

    Convenience wrapper over :func:`query` + :func:`backward` for callers
    that only need the parameter gradients.
    """
    _, record = query(field, x_local, directions, appearance_ids, with_record=True)
    n = record.corner_flat.shape[0]
    d_density = np.broadcast_to(np.asarray(d_density, dtype=np.float64), (n,))
    d_color = np.broadcast_to(np.asarray(d_color, dtype=np.float64), (n, 3))
    return backward(field, record, d_density, d_color)
