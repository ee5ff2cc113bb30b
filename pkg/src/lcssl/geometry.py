"""Correspondences between the feature grids of two views of one image.

Feature cell ``(i, j)`` covers a ``stride x stride`` block whose pixel center
is ``((j + .5) * stride - .5, (i + .5) * stride - .5)``. A pixel coordinate
``x`` therefore sits at feature coordinate ``(x + .5) / stride - .5``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .imaging import TransformSpec, map_source_to_view, map_view_to_source


@dataclass(frozen=True)
class FeatureGeometry:
    H: int
    W: int
    stride: int

    def __post_init__(self):
        if self.stride <= 0 or self.H % self.stride or self.W % self.stride:
            raise GeometryError(
                f"view size {self.H}x{self.W} not divisible by stride {self.stride}")

    @property
    def h(self) -> int:
        return self.H // self.stride

    @property
    def w(self) -> int:
        return self.W // self.stride

    @property
    def n(self) -> int:
        return self.h * self.w

    def cell_center(self, i, j):
        p = self.stride
        return (j + 0.5) * p - 0.5, (i + 0.5) * p - 0.5

    def pixel_to_feature(self, x, y):
        p = self.stride
        return (x + 0.5) / p - 0.5, (y + 0.5) / p - 0.5


@dataclass(frozen=True)
class CorrespondenceSet:
    """Pairs ``(flat index in view c, (u, v) in view sc)``.

    ``index_c`` holds row-major grid indices ``i * w + j``; ``coords_sc`` holds
    continuous ``(u, v)`` feature coordinates, all inside ``[0, w-1] x [0, h-1]``.
    """

    index_c: np.ndarray  # (P,) int64
    coords_sc: np.ndarray  # (P, 2) float64
    geometry: FeatureGeometry

    @property
    def valid_count(self) -> int:
        return int(self.index_c.shape[0])

    def __len__(self):
        return self.valid_count


def grid_points(geom: FeatureGeometry):
    """All ``h * w`` cell centers, row-major, as ``[((i, j), (x, y)), ...]``."""
    return [((i, j), geom.cell_center(i, j)) for i in range(geom.h) for j in range(geom.w)]


def grid_centers(geom: FeatureGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized cell centers, each ``(h * w,)`` in row-major order."""
    ii, jj = np.meshgrid(np.arange(geom.h, dtype=np.float64),
                         np.arange(geom.w, dtype=np.float64), indexing="ij")
    x, y = geom.cell_center(ii.ravel(), jj.ravel())
    return x, y


def build_correspondences(spec_c: TransformSpec, spec_sc: TransformSpec,
                          geom: FeatureGeometry) -> CorrespondenceSet:
    if tuple(spec_c.out_size) != tuple(spec_sc.out_size):
        raise GeometryError(f"view sizes differ: {spec_c.out_size} vs {spec_sc.out_size}")
    if tuple(spec_c.out_size) != (geom.H, geom.W):
        raise GeometryError(f"geometry {geom.H}x{geom.W} does not match views {spec_c.out_size}")
    if tuple(spec_c.src_size) != tuple(spec_sc.src_size):
        raise GeometryError("views come from sources of different sizes")
    xc, yc = grid_centers(geom)
    xs, ys = map_view_to_source(spec_c, (xc, yc))
    xv, yv = map_source_to_view(spec_sc, (xs, ys))
    u, v = geom.pixel_to_feature(xv, yv)
    keep = (u >= 0) & (u <= geom.w - 1) & (v >= 0) & (v <= geom.h - 1)
    index = np.flatnonzero(keep).astype(np.int64)
    coords = np.stack([u[keep], v[keep]], axis=1)
    return CorrespondenceSet(index, coords, geom)


def flip_ground_truth(geom: FeatureGeometry) -> dict[tuple[int, int], tuple[int, int]]:
    return {(i, j): (i, geom.w - 1 - j) for i in range(geom.h) for j in range(geom.w)}


def flip_ground_truth_flat(geom: FeatureGeometry) -> np.ndarray:
    """Same mapping as :func:`flip_ground_truth` over flat indices."""
    i, j = np.divmod(np.arange(geom.n), geom.w)
    return i * geom.w + (geom.w - 1 - j)
