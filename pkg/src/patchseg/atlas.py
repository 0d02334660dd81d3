"""Probabilistic atlas built from registered training label maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import volume as vol_io
from .volume import LabelMap

DEFAULT_EPSILON = 1e-3


@dataclass(frozen=True, eq=False)
class ProbAtlas:
    """Per-voxel class probabilities, shape (nx, ny, nz, num_classes)."""

    probs: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.probs.shape[:3]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[3]


def build_atlas(labelmaps, epsilon: float = DEFAULT_EPSILON, blur_sigma: float = 0.0) -> ProbAtlas:
    """Laplace-smoothed label frequencies: (count_c + eps) / (N + num_classes * eps).

    ``blur_sigma`` > 0 additionally smooths each class plane with a Gaussian
    (in voxels) before renormalizing.
    """
    maps = list(labelmaps)
    if not maps:
        raise ValueError("need at least one label map")
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    ref = maps[0]
    for i, m in enumerate(maps[1:], start=1):
        if m.dims != ref.dims or m.num_classes != ref.num_classes:
            raise ValueError(
                f"label map {i} has dims {m.dims} / {m.num_classes} classes, "
                f"expected {ref.dims} / {ref.num_classes}"
            )
    n_cls = ref.num_classes
    counts = np.zeros(ref.dims + (n_cls,), dtype=np.float64)
    flat = counts.reshape(-1, n_cls)
    rows = np.arange(flat.shape[0])
    for m in maps:
        np.add.at(flat, (rows, m.labels.ravel().astype(np.intp)), 1.0)
    probs = (counts + epsilon) / (len(maps) + n_cls * epsilon)
    if blur_sigma > 0:
        probs = ndimage.gaussian_filter(probs, sigma=(blur_sigma,) * 3 + (0,), mode="nearest")
        probs /= probs.sum(axis=-1, keepdims=True)
    return ProbAtlas(probs, ref.spacing)


def query_atlas(a: ProbAtlas, v) -> np.ndarray:
    """Probability vector(s) at integer voxel(s) ``v``; out-of-bounds gives 1/num_classes.

    ``v`` may be (3,) or (n, 3).
    """
    v = np.asarray(v, dtype=np.intp)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    dims = np.array(a.dims)
    inside = np.all((v >= 0) & (v < dims), axis=1)
    out = np.full((len(v), a.num_classes), 1.0 / a.num_classes)
    iv = v[inside]
    out[inside] = a.probs[iv[:, 0], iv[:, 1], iv[:, 2]]
    return out[0] if single else out


def atlas_argmax(a: ProbAtlas) -> LabelMap:
    return LabelMap(np.argmax(a.probs, axis=-1), a.num_classes, a.spacing)


def save_atlas(path, a: ProbAtlas) -> None:
    vol_io.save_prob_planes(path, a.probs, a.spacing)


def load_atlas(path) -> ProbAtlas:
    code, _, spacing, arr, _ = vol_io.read_mrvol(path)
    if code != vol_io.CODE_PROB:
        raise vol_io.VolumeFormatError(f"{path}: payload code {code} is not an atlas")
    return ProbAtlas(arr.astype(np.float64), spacing)
