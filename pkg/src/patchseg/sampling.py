"""Per-voxel patch extraction, augmentation, and training-batch assembly.

2D patches are taken in the plane orthogonal to ``plane`` (default 2, i.e. the
(x, y) plane at fixed z); the first patch axis follows the lower-numbered
in-plane volume axis. Everything outside the volume reads as 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import atlas as atlas_mod
from . import spatial
from .volume import Volume

PATCH = 25
HALF = PATCH // 2
SCALES = (25, 51, 71)
PATCH_3D = 15
HALF_3D = PATCH_3D // 2
AUG_WINDOW = 101
SCALE_RANGE = (0.9, 1.1)
ANGLE_RANGE = (-10.0, 10.0)


@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    angle_deg: float = 0.0

    def __post_init__(self):
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise ValueError(f"scale {self.scale} outside {SCALE_RANGE}")
        if not ANGLE_RANGE[0] <= self.angle_deg <= ANGLE_RANGE[1]:
            raise ValueError(f"angle {self.angle_deg} outside {ANGLE_RANGE}")


def draw_augment_params(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform scales and angles (degrees) for ``n`` samples."""
    return rng.uniform(*SCALE_RANGE, n), rng.uniform(*ANGLE_RANGE, n)


@dataclass
class PatchSample:
    p25: np.ndarray
    p51s: np.ndarray
    p71s: np.ndarray
    center: tuple[int, int, int]
    target: int
    p3d: np.ndarray | None = None
    dist: np.ndarray | None = None
    atlas_prob: np.ndarray | None = None


@dataclass
class PatchBatch:
    """Stacked network inputs; optional members are None when the branch is off."""

    p25: np.ndarray  # (B, 25, 25)
    p51s: np.ndarray
    p71s: np.ndarray
    centers: np.ndarray  # (B, 3) int
    targets: np.ndarray  # (B,) int
    p3d: np.ndarray | None = None  # (B, 15, 15, 15)
    dist: np.ndarray | None = None  # (B, k, k, k)
    atlas_prob: np.ndarray | None = None  # (B, L)

    def __len__(self):
        return len(self.targets)

    def __getitem__(self, i: int) -> PatchSample:
        opt = lambda a: None if a is None else a[i]
        return PatchSample(
            self.p25[i], self.p51s[i], self.p71s[i], tuple(int(c) for c in self.centers[i]),
            int(self.targets[i]), opt(self.p3d), opt(self.dist), opt(self.atlas_prob),
        )

    @classmethod
    def from_samples(cls, samples) -> "PatchBatch":
        samples = list(samples)
        opt = lambda name: (
            None if getattr(samples[0], name) is None
            else np.stack([getattr(s, name) for s in samples])
        )
        return cls(
            np.stack([s.p25 for s in samples]),
            np.stack([s.p51s for s in samples]),
            np.stack([s.p71s for s in samples]),
            np.array([s.center for s in samples]),
            np.array([s.target for s in samples]),
            opt("p3d"), opt("dist"), opt("atlas_prob"),
        )

    def take(self, idx) -> "PatchBatch":
        opt = lambda a: None if a is None else a[idx]
        return PatchBatch(
            self.p25[idx], self.p51s[idx], self.p71s[idx], self.centers[idx], self.targets[idx],
            opt(self.p3d), opt(self.dist), opt(self.atlas_prob),
        )


# -- low-level gathers -------------------------------------------------------


def _in_plane(arr: np.ndarray, centers: np.ndarray, plane: int):
    """Move the normal axis last; return the view and centers in its axis order."""
    order = [a for a in range(3) if a != plane] + [plane]
    return np.transpose(arr, order), np.asarray(centers)[..., order]


def _gather(arr: np.ndarray, i, j, k) -> np.ndarray:
    """arr[i, j, k] with zeros outside the array."""
    i, j, k = (np.asarray(a) for a in (i, j, k))
    if math.prod(np.broadcast_shapes(i.shape, j.shape, k.shape)) > arr.size // 4:
        return _gather_padded(arr, i, j, k)
    n0, n1, n2 = arr.shape
    ok = (i >= 0) & (i < n0) & (j >= 0) & (j < n1) & (k >= 0) & (k < n2)
    vals = arr[np.clip(i, 0, n0 - 1), np.clip(j, 0, n1 - 1), np.clip(k, 0, n2 - 1)]
    return np.where(ok, vals, 0).astype(np.float32)


def _gather_padded(arr, i, j, k):
    # for big gathers: zero-pad just enough once, then a flat take; the index
    # arithmetic stays on the unbroadcast operands until the final sum
    pads, idx = [], []
    for ax, n in zip((i, j, k), arr.shape):
        lo, hi = max(0, -int(ax.min())), max(0, int(ax.max()) - n + 1)
        pads.append((lo, hi))
        idx.append(ax + lo)
    padded = np.pad(np.asarray(arr, dtype=np.float32), pads)
    _, s1, s2 = padded.shape
    return np.take(padded, (idx[0] * s1 + idx[1]) * s2 + idx[2])


def _bilinear(arr: np.ndarray, u: np.ndarray, w: np.ndarray, z) -> np.ndarray:
    """Bilinear sample of arr[:, :, z] at real coordinates (u, w), zero padded."""
    u0 = np.floor(u)
    w0 = np.floor(w)
    fu = (u - u0).astype(np.float32)
    fw = (w - w0).astype(np.float32)
    u0 = u0.astype(np.intp)
    w0 = w0.astype(np.intp)
    z = np.broadcast_to(z, u.shape)
    v00 = _gather(arr, u0, w0, z)
    v10 = _gather(arr, u0 + 1, w0, z)
    v01 = _gather(arr, u0, w0 + 1, z)
    v11 = _gather(arr, u0 + 1, w0 + 1, z)
    return (v00 * (1 - fu) + v10 * fu) * (1 - fw) + (v01 * (1 - fu) + v11 * fu) * fw


def _bilinear_2d(img: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Batched bilinear sample of images (B, H, W) at (B, h, w) coordinates."""
    b = np.arange(img.shape[0]).reshape((-1,) + (1,) * (u.ndim - 1))
    return _bilinear(np.moveaxis(img, 0, -1), u, w, b)


def _scale_offsets(size: int) -> np.ndarray:
    """Offsets of 25 evenly spaced samples spanning a ``size``-wide window."""
    return (np.arange(PATCH) - HALF) * ((size - 1) / (PATCH - 1))


# -- patch extraction --------------------------------------------------------


def extract_multiscale_2d_batch(arr: np.ndarray, centers, plane: int = 2):
    """(p25, p51s, p71s) for every center, each shaped (B, 25, 25)."""
    vol, c = _in_plane(arr, np.atleast_2d(centers), plane)
    cu = c[:, 0, None, None]
    cw = c[:, 1, None, None]
    cz = c[:, 2, None, None]
    off = np.arange(PATCH) - HALF
    p25 = _gather(vol, cu + off[:, None], cw + off[None, :], cz)
    out = [p25]
    for size in SCALES[1:]:
        o = _scale_offsets(size)
        out.append(_bilinear(vol, cu + o[:, None], cw + o[None, :], cz))
    return tuple(out)


def extract_multiscale_2d(v: Volume, center, plane: int = 2):
    p25, p51s, p71s = extract_multiscale_2d_batch(v.data, [center], plane)
    return p25[0], p51s[0], p71s[0]


def extract_patch_3d_batch(arr: np.ndarray, centers, plane: int = 2) -> np.ndarray:
    """15**3 windows, axes ordered like the 2D patches with the normal axis last."""
    vol, c = _in_plane(arr, np.atleast_2d(centers), plane)
    off = np.arange(PATCH_3D) - HALF_3D
    i = c[:, 0, None, None, None] + off[:, None, None]
    j = c[:, 1, None, None, None] + off[None, :, None]
    k = c[:, 2, None, None, None] + off[None, None, :]
    return _gather(vol, i, j, k)


def extract_patch_3d(v: Volume, center, plane: int = 2) -> np.ndarray:
    return extract_patch_3d_batch(v.data, [center], plane)[0]


def augment_batch(arr: np.ndarray, centers, scales, angles_deg, plane: int = 2):
    """Rotate/rescale a 101x101 window per sample, then cut the three scales from it."""
    vol, c = _in_plane(arr, np.atleast_2d(centers), plane)
    scales = np.asarray(scales, dtype=np.float64).reshape(-1, 1, 1)
    theta = np.deg2rad(np.asarray(angles_deg, dtype=np.float64)).reshape(-1, 1, 1)
    h = AUG_WINDOW // 2
    g = np.arange(AUG_WINDOW, dtype=np.float64) - h
    gu, gw = g[:, None], g[None, :]
    # window(u) = source(center + R(-theta) u / scale)
    cos, sin = np.cos(theta), np.sin(theta)
    su = (cos * gu + sin * gw) / scales
    sw = (-sin * gu + cos * gw) / scales
    window = _bilinear(vol, c[:, 0, None, None] + su, c[:, 1, None, None] + sw, c[:, 2, None, None])
    p25 = window[:, h - HALF : h + HALF + 1, h - HALF : h + HALF + 1]
    out = [np.ascontiguousarray(p25)]
    for size in SCALES[1:]:
        o = h + _scale_offsets(size)
        uu = np.broadcast_to(o[:, None], (len(window), PATCH, PATCH))
        ww = np.broadcast_to(o[None, :], (len(window), PATCH, PATCH))
        out.append(_bilinear_2d(window, uu, ww))
    return tuple(out)


def augment(v: Volume, center, plane: int, params: AugmentParams):
    if not isinstance(params, AugmentParams):
        params = AugmentParams(*params)
    p25, p51s, p71s = augment_batch(v.data, [center], [params.scale], [params.angle_deg], plane)
    return p25[0], p51s[0], p71s[0]


# -- batch assembly ----------------------------------------------------------


SAMPLING_MODES = ("natural", "class-uniform", "natural-masked")


class CenterSampler:
    """Draws (volume index, center, target) triples from a set of label maps.

    ``natural`` draws uniformly over all voxels, ``class-uniform`` draws a class
    uniformly and then one of its voxels, and ``natural-masked`` draws uniformly
    over the voxels where ``masks`` is True (the inference mask).
    """

    def __init__(self, labelmaps, mode: str = "natural", masks=None):
        if mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {mode!r}")
        self.labelmaps = list(labelmaps)
        if not self.labelmaps:
            raise ValueError("need at least one label map")
        self.mode = mode
        self.num_classes = self.labelmaps[0].num_classes
        sizes = np.array([lm.labels.size for lm in self.labelmaps])
        self._offsets = np.r_[0, np.cumsum(sizes)]
        if mode == "natural-masked":
            if masks is None:
                raise ValueError("natural-masked sampling needs masks")
            self._masked = np.flatnonzero(np.concatenate([np.asarray(m).ravel() for m in masks]))
            if not len(self._masked):
                raise ValueError("inference masks are empty")
        if mode == "class-uniform":
            flat = np.concatenate([lm.labels.ravel() for lm in self.labelmaps])
            order = np.argsort(flat, kind="stable")
            bounds = np.searchsorted(flat[order], np.arange(self.num_classes + 1))
            missing = [c for c in range(self.num_classes) if bounds[c] == bounds[c + 1]]
            if missing:
                raise ValueError(f"classes absent from every label map: {missing}")
            self._by_class = [order[bounds[c] : bounds[c + 1]] for c in range(self.num_classes)]

    def draw(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("batch size must be >= 1")
        if self.mode == "natural":
            flat = rng.integers(0, self._offsets[-1], n)
        elif self.mode == "natural-masked":
            flat = self._masked[rng.integers(0, len(self._masked), n)]
        else:
            cls = rng.integers(0, self.num_classes, n)
            flat = np.empty(n, dtype=np.int64)
            for i, c in enumerate(cls):
                pool = self._by_class[c]
                flat[i] = pool[rng.integers(0, len(pool))]
        vol_idx = np.searchsorted(self._offsets, flat, side="right") - 1
        local = flat - self._offsets[vol_idx]
        centers = np.empty((n, 3), dtype=np.intp)
        targets = np.empty(n, dtype=np.intp)
        for vi in np.unique(vol_idx):
            sel = vol_idx == vi
            lab = self.labelmaps[vi].labels
            centers[sel] = np.stack(np.unravel_index(local[sel], lab.shape), axis=1)
            targets[sel] = lab.ravel()[local[sel]]
        return vol_idx, centers, targets


def assemble_batch(
    arr: np.ndarray,
    centers,
    targets=None,
    *,
    plane: int = 2,
    use_3d: bool = False,
    grid: spatial.LandmarkGrid | None = None,
    atlas: atlas_mod.ProbAtlas | None = None,
    aug: tuple[np.ndarray, np.ndarray] | None = None,
) -> PatchBatch:
    """Network inputs for ``centers`` in one (normalized) intensity array."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.intp))
    if aug is None:
        p25, p51s, p71s = extract_multiscale_2d_batch(arr, centers, plane)
    else:
        p25, p51s, p71s = augment_batch(arr, centers, aug[0], aug[1], plane)
    if targets is None:
        targets = np.zeros(len(centers), dtype=np.intp)
    return PatchBatch(
        p25, p51s, p71s, centers, np.asarray(targets),
        p3d=extract_patch_3d_batch(arr, centers, plane) if use_3d else None,
        dist=spatial.distance_image(grid, centers).astype(np.float32) if grid is not None else None,
        atlas_prob=atlas_mod.query_atlas(atlas, centers).astype(np.float32) if atlas is not None else None,
    )


def concat_batches(batches) -> PatchBatch:
    batches = list(batches)
    cat = lambda name: (
        None if getattr(batches[0], name) is None
        else np.concatenate([getattr(b, name) for b in batches])
    )
    return PatchBatch(*(cat(n) for n in ("p25", "p51s", "p71s", "centers", "targets",
                                         "p3d", "dist", "atlas_prob")))


def sample_batch(
    volumes,
    labelmaps,
    n: int,
    mode: str = "natural",
    seed: int = 0,
    *,
    plane: int = 2,
    use_3d: bool = False,
    grid=None,
    atlas=None,
    augment: bool = False,
    sampler: CenterSampler | None = None,
    rng: np.random.Generator | None = None,
) -> PatchBatch:
    """Draw ``n`` training samples; deterministic given ``seed`` (or ``rng``)."""
    volumes = list(volumes)
    if not volumes:
        raise ValueError("need at least one volume")
    rng = rng if rng is not None else np.random.default_rng(seed)
    sampler = sampler or CenterSampler(labelmaps, mode)
    vol_idx, centers, targets = sampler.draw(n, rng)
    aug = draw_augment_params(rng, n) if augment else None
    parts, order = [], []
    for vi in np.unique(vol_idx):
        sel = np.flatnonzero(vol_idx == vi)
        sub_aug = None if aug is None else (aug[0][sel], aug[1][sel])
        parts.append(assemble_batch(
            volumes[vi].data, centers[sel], targets[sel], plane=plane, use_3d=use_3d,
            grid=grid, atlas=atlas, aug=sub_aug,
        ))
        order.append(sel)
    batch = concat_batches(parts)
    # restore draw order
    inverse = np.empty(n, dtype=np.intp)
    inverse[np.concatenate(order)] = np.arange(n)
    return batch.take(inverse)
