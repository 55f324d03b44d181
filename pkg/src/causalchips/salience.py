"""Occlusion salience grids and their CSV / PGM renderings."""

from dataclasses import dataclass

import numpy as np

from .embed import KernelBank, embed_one
from .errors import ImageTooSmall


@dataclass
class SalienceGrid:
    values: np.ndarray  # (rows, cols), |change in predicted probability|
    patch_size: int
    stride: int
    base_prob: float

    @property
    def dims(self):
        return self.values.shape

    def argmax_cell(self):
        return np.unravel_index(int(np.argmax(self.values)), self.values.shape)

    def cell_bounds(self, r, c):
        """Pixel box (top, left, bottom, right) occluded for grid cell (r, c)."""
        top, left = r * self.stride, c * self.stride
        return top, left, top + self.patch_size, left + self.patch_size

    def to_csv(self, path):
        np.savetxt(path, self.values, delimiter=",", fmt="%.10g")

    def to_pgm(self, path):
        write_pgm(path, self.values)


def grid_shape(height, width, patch, stride):
    return (height - patch) // stride + 1, (width - patch) // stride + 1


def occlusion_salience(img, bank: KernelBank, prob_fn, patch: int, stride: int, fill=None) -> SalienceGrid:
    """Slide a ``patch`` square over the image, re-embed and re-score.

    ``prob_fn`` maps an embedding vector to a probability. ``fill`` defaults
    to the per-band mean of the image. For sequences the patch covers every
    frame at the same spatial location.
    """
    img = np.asarray(img, dtype=np.float64)
    spatial = img.shape[-3:-1]
    h, w = spatial
    if patch < 1 or stride < 1:
        raise ValueError("patch and stride must be >= 1")
    if patch > min(h, w):
        raise ImageTooSmall(f"patch {patch} exceeds the {h}x{w} image")
    if fill is None:
        fill = img.mean(axis=tuple(range(img.ndim - 1)))
    base = float(prob_fn(embed_one(img, bank)))
    rows, cols = grid_shape(h, w, patch, stride)
    out = np.zeros((rows, cols))
    for r in range(rows):
        for c in range(cols):
            occluded = img.copy()
            top, left = r * stride, c * stride
            occluded[..., top:top + patch, left:left + patch, :] = fill
            out[r, c] = abs(float(prob_fn(embed_one(occluded, bank))) - base)
    return SalienceGrid(out, patch, stride, base)


def write_pgm(path, values):
    """Plain (P2) 8-bit graymap, scaled so the maximum maps to 255."""
    values = np.asarray(values, dtype=np.float64)
    peak = values.max() if values.size else 0.0
    scaled = np.zeros(values.shape, dtype=int) if peak <= 0 else np.rint(values / peak * 255).astype(int)
    h, w = scaled.shape
    with open(path, "w") as fh:
        fh.write(f"P2\n{w} {h}\n255\n")
        for row in scaled:
            fh.write(" ".join(str(v) for v in row) + "\n")


def read_pgm(path):
    with open(path) as fh:
        tokens = [t for line in fh if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM file")
    w, h, _maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array([int(t) for t in tokens[4:4 + w * h]]).reshape(h, w)
