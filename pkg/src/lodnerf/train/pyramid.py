"""Image pyramid supervision.

Drone-style captures lack genuinely coarse views, so the coarse tree
levels would never receive matching-scale gradients.  Downsampling every
training image builds that supervision: a level-L pixel has twice the
footprint of a level-(L-1) pixel, hence twice the sampling-sphere radius,
and its rays land on proportionally coarser tree nodes.

Pixel sampling is uniform over the union of all pyramid pixels, so a
level receives four times the draws of the next-coarser one, balancing
the gradient flow per level of the tree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ImageTooSmall
from ..geometry import CameraModel


def box_downsample(image: np.ndarray) -> np.ndarray:
    """2x box filter; odd trailing rows/columns are dropped."""
    h, w = image.shape[:2]
    h2, w2 = h // 2, w // 2
    img = image[: 2 * h2, : 2 * w2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


@dataclass
class PyramidDataset:
    """Per-level images and matching cameras, flattened for pixel draws.

    ``images[level][image_id]`` is an (H, W, 3) float array in [0, 1];
    ``cameras[level][image_id]`` the camera rescaled for that level.
    ``heldout_stride`` reserves every Nth pixel of the flattened index for
    evaluation; training draws skip them.
    """

    images: list
    cameras: list
    heldout_stride: int = 13

    def __post_init__(self):
        self.n_levels = len(self.images)
        self.n_images = len(self.images[0])
        counts = []
        meta = []
        for lvl, imgs in enumerate(self.images):
            for img_id, img in enumerate(imgs):
                h, w = img.shape[:2]
                counts.append(h * w)
                meta.append((lvl, img_id, w, h))
        self._meta = meta
        self._counts = np.asarray(counts, dtype=np.int64)
        self._offsets = np.concatenate([[0], np.cumsum(self._counts)])
        self.total_pixels = int(self._offsets[-1])

    def level_pixel_count(self, level: int) -> int:
        return int(sum(img.shape[0] * img.shape[1] for img in self.images[level]))

    def decode_flat(self, flat: np.ndarray):
        """Map flat indices to (level, image_id, x, y) arrays."""
        flat = np.asarray(flat, dtype=np.int64)
        slot = np.searchsorted(self._offsets, flat, side="right") - 1
        rem = flat - self._offsets[slot]
        meta = np.asarray(self._meta, dtype=np.int64)
        lvl = meta[slot, 0]
        img_id = meta[slot, 1]
        w = meta[slot, 2]
        x = rem % w
        y = rem // w
        return lvl, img_id, x, y

    def n_heldout(self) -> int:
        return (self.total_pixels + self.heldout_stride - 1) // self.heldout_stride

    def heldout_flat(self) -> np.ndarray:
        return np.arange(0, self.total_pixels, self.heldout_stride, dtype=np.int64)

    def target_rgb(self, lvl, img_id, x, y) -> np.ndarray:
        out = np.empty((len(lvl), 3))
        for i in range(len(lvl)):
            out[i] = self.images[lvl[i]][img_id[i]][y[i], x[i]]
        return out


def build_pyramid(images, cameras, levels: int, heldout_stride: int = 13) -> PyramidDataset:
    """Repeatedly 2x-downsample images and rescale their cameras.

    Raises
    ------
    ImageTooSmall
        If any image has fewer than 2**(levels-1) pixels per side.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    min_side = 2 ** (levels - 1)
    for img in images:
        if img.shape[0] < min_side or img.shape[1] < min_side:
            raise ImageTooSmall(
                f"image {img.shape[1]}x{img.shape[0]} cannot support {levels} levels")
    level_images = [[np.asarray(img, dtype=np.float64) for img in images]]
    level_cameras = [list(cameras)]
    for _ in range(1, levels):
        level_images.append([box_downsample(img) for img in level_images[-1]])
        level_cameras.append([cam.scaled(0.5) for cam in level_cameras[-1]])
    for lvl in range(levels):  # keep camera resolution in sync with truncation
        level_cameras[lvl] = [
            _with_resolution(cam, img.shape[1], img.shape[0])
            for cam, img in zip(level_cameras[lvl], level_images[lvl])
        ]
    return PyramidDataset(images=level_images, cameras=level_cameras,
                          heldout_stride=heldout_stride)


def _with_resolution(cam: CameraModel, w: int, h: int) -> CameraModel:
    if cam.resolution == (w, h):
        return cam
    return CameraModel(rotation=cam.rotation, translation=cam.translation,
                       focal_length=cam.focal_length, principal_point=cam.principal_point,
                       resolution=(w, h), pixel_width=cam.pixel_width,
                       appearance_id=cam.appearance_id)


def sample_pixels(dataset: PyramidDataset, n: int, gen: np.random.Generator,
                  exclude_heldout: bool = False):
    """Draw n pixels uniformly over the flattened pyramid index.

    Uniformity over the union gives level L four times the expected draws
    of level L+1.  With ``exclude_heldout`` the reserved evaluation pixels
    are skipped while keeping the draw exactly uniform over the rest.

    Returns (level, image_id, x, y) int arrays of length n.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    total = dataset.total_pixels
    if not exclude_heldout:
        flat = gen.integers(0, total, size=n)
    else:
        stride = dataset.heldout_stride
        kept = total - dataset.n_heldout()
        j = gen.integers(0, kept, size=n)
        # kept indices are those not divisible by stride: block q holds
        # stride-1 of them, so index back with an offset of one per block
        flat = j + j // (stride - 1) + 1
    return dataset.decode_flat(flat)
