"""Landmark grids and distance-to-landmark features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_K = 7
DEFAULT_ALPHA = 0.01


@dataclass(frozen=True, eq=False)
class LandmarkGrid:
    """k**3 landmarks spaced uniformly along each axis, endpoints included.

    ``positions`` has shape (k**3, 3) in canonical order: the first grid index
    varies fastest. ``axes`` holds the k coordinates along each axis.
    """

    k: int
    axes: tuple[np.ndarray, np.ndarray, np.ndarray]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def positions(self) -> np.ndarray:
        gx, gy, gz = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel(order="F") for g in (gx, gy, gz)], axis=1)


def build_grid(dims, k: int = DEFAULT_K, spacing=None) -> LandmarkGrid:
    """Place k landmarks per axis at 0, (N-1)/(k-1), ..., N-1.

    With ``spacing`` given, distances computed from this grid are in millimeters
    instead of voxel units.
    """
    if k < 2:
        raise ValueError(f"need at least 2 landmarks per axis, got k={k}")
    if any(int(n) < 2 for n in dims):
        raise ValueError(f"every dimension must be >= 2, got {tuple(dims)}")
    axes = tuple(np.linspace(0.0, n - 1.0, k) for n in dims)
    return LandmarkGrid(k, axes, tuple(spacing) if spacing is not None else (1.0, 1.0, 1.0))


def distance_image(grid: LandmarkGrid, x) -> np.ndarray:
    """Euclidean distances from point(s) ``x`` to every landmark.

    ``x`` is a single coordinate of shape (3,) or a batch (n, 3). The result has
    shape (..., k, k, k) with entry [i, j, m] the distance to landmark
    (axes[0][i], axes[1][j], axes[2][m]).
    """
    x = np.asarray(x, dtype=np.float64)
    s = grid.spacing
    d0 = ((x[..., 0, None] - grid.axes[0]) * s[0]) ** 2
    d1 = ((x[..., 1, None] - grid.axes[1]) * s[1]) ** 2
    d2 = ((x[..., 2, None] - grid.axes[2]) * s[2]) ** 2
    sq = d0[..., :, None, None] + d1[..., None, :, None] + d2[..., None, None, :]
    return np.sqrt(sq)


def as_planes(dist: np.ndarray) -> np.ndarray:
    """View a (..., k, k, k) distance image as k channels of k x k planes.

    Channel c is the plane of landmarks sharing the last-axis index c.
    """
    return np.moveaxis(dist, -1, -3)


def rbf_normalize(d: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return np.exp(-alpha * np.square(d))
