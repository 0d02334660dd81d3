"""Synthetic phantoms: nested ellipsoids plus an optional intensity-ambiguous mirrored pair.

Layout for ``num_classes`` = L:

* class 1 is a large "body" ellipsoid centred in the volume;
* the other non-ambiguous classes sit on a ring inside the body, in the
  axis-2 mid-plane, with class 3 nested inside class 2;
* with ``ambiguous_pair`` the last two classes are mirror images of each other
  across that mid-plane, with the same mean and mirrored noise, so their
  intensity samples are identical.

The layout is canonical (a function of dims and class count) with small
per-seed jitter of centers and radii, the way registered subjects share
anatomy.

Every non-pair structure is centred exactly on the axis-2 mid-plane, so the
whole label geometry is symmetric under z -> nz-1-z except for which twin
carries which label. In-plane (axis 0/1) patches therefore cannot tell the
twins apart; only the axis-2 position can.

Background intensity is exactly 0 (no noise), which lets inference use the
nonzero-intensity mask. Randomness comes from a Philox counter-based stream
keyed on the 64-bit seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import LabelMap, Volume

PHILOX_KEY_CONSTANT = 0x9E3779B97F4A7C15
_MAX_TRIES = 50


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    num_classes: int = 8
    seed: int = 0
    noise_sigma: float = 0.1
    ambiguous_pair: bool = True

    def __post_init__(self):
        if self.num_classes < 4:
            raise ValueError(f"need >= 4 classes (background + 3 structures), got {self.num_classes}")
        if len(self.dims) != 3 or any(d < 32 for d in self.dims):
            raise ValueError(f"every dimension must be >= 32, got {self.dims}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def make_rng(seed: int) -> np.random.Generator:
    """Philox stream for a 64-bit seed; identical on every platform."""
    key = (int(seed) ^ PHILOX_KEY_CONSTANT) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(key=key))


def class_levels(spec: PhantomSpec) -> np.ndarray:
    """Mean intensity per class; 0 for background, twins share one level.

    Levels are a fixed function of the class index so that every phantom in a
    suite uses the same intensity code.
    """
    n = spec.num_classes
    step = 4.0 * spec.noise_sigma if spec.noise_sigma > 0 else 1.0
    base = 1.0 + step
    n_distinct = n - 2 if spec.ambiguous_pair else n - 1
    # interleave so that nested neighbours are not adjacent in intensity
    order = np.r_[np.arange(0, n_distinct, 2), np.arange(1, n_distinct, 2)]
    ranks = np.empty(n_distinct, dtype=int)
    ranks[order] = np.arange(n_distinct)
    levels = np.zeros(n)
    levels[1 : n_distinct + 1] = base + step * ranks
    if spec.ambiguous_pair:
        levels[n - 1] = levels[n - 2]
    return levels


def _ellipsoid(dims, center, radii) -> np.ndarray:
    grids = np.ogrid[: dims[0], : dims[1], : dims[2]]
    acc = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return acc <= 1.0


def _jitter(rng, n, frac):
    return n * rng.uniform(-frac, frac, len(n))


def _layout(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray | None:
    """One jittered draw of the canonical layout; None if something collides."""
    dims = tuple(int(d) for d in spec.dims)
    n = np.array(dims, dtype=float)
    mid = (n - 1.0) / 2.0
    labels = np.zeros(dims, dtype=np.uint16)

    body_c = mid + np.r_[_jitter(rng, n[:2], 0.02), 0.0]
    body_r = n * 0.42 * rng.uniform(0.96, 1.04, 3)
    body = _ellipsoid(dims, body_c, body_r)
    labels[body] = 1
    room = ndimage.binary_erosion(body, iterations=2)
    taken = np.zeros(dims, dtype=bool)

    def fits(mask, inside):
        return (
            mask.any()
            and np.all(inside[mask])
            and not np.any(ndimage.binary_dilation(mask, iterations=2) & taken)
        )

    last = spec.num_classes
    if spec.ambiguous_pair:
        xy = mid[:2] + _jitter(rng, n[:2], 0.02)
        radii = n * 0.105 * rng.uniform(0.95, 1.05, 3)
        dz = 0.22 * n[2]
        left = _ellipsoid(dims, np.r_[xy, mid[2] - dz], radii)
        right = _ellipsoid(dims, np.r_[xy, mid[2] + dz], radii)
        if not fits(left | right, room):
            return None
        labels[left] = last - 2
        labels[right] = last - 1
        taken |= left | right
        last -= 2

    # ring of structures in the axis-2 mid-plane; class 3 nests inside class 2
    ring = [c for c in range(2, last) if c != 3]
    ring_r = 0.2 * n[:2]
    # shrink blobs when the ring gets crowded
    chord = 2 * 0.2 * np.sin(np.pi / len(ring)) if len(ring) > 1 else 1.0
    for i, cls in enumerate(ring):
        angle = 2 * np.pi * i / len(ring) + rng.uniform(-0.05, 0.05)
        xy = mid[:2] + ring_r * np.array([np.cos(angle), np.sin(angle)]) + _jitter(rng, n[:2], 0.015)
        base = min(0.15, 0.45 * chord) if cls == 2 else min(0.1, 0.3 * chord)
        radii = n * base * rng.uniform(0.92, 1.08, 3)
        blob = _ellipsoid(dims, np.r_[xy, mid[2]], radii)
        if not fits(blob, room):
            return None
        labels[blob] = cls
        taken |= blob
        if cls == 2 and last > 3:
            inner_c = np.r_[xy + _jitter(rng, n[:2], 0.015), mid[2]]
            inner_r = radii * 0.5 * rng.uniform(0.95, 1.05, 3)
            inner = _ellipsoid(dims, inner_c, inner_r)
            if not np.all(ndimage.binary_erosion(blob, iterations=2)[inner]):
                return None
            labels[inner] = 3

    return labels


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    rng = make_rng(spec.seed)
    for _ in range(_MAX_TRIES):
        labels = _layout(spec, rng)
        if labels is not None:
            break
    else:
        raise ValueError(f"dims {spec.dims} too small to fit {spec.num_classes - 1} structures")
    levels = class_levels(spec)
    data = levels[labels]
    if spec.noise_sigma > 0:
        fg = labels > 0
        data[fg] += rng.normal(0.0, spec.noise_sigma, int(fg.sum()))
        if spec.ambiguous_pair:
            # the twins are exact mirror images; mirror the noise too so their
            # intensity samples coincide
            right = labels == spec.num_classes - 1
            data[right] = data[:, :, ::-1][right]
        # keep the zero-background mask exact
        data[fg & (data == 0)] = np.finfo(np.float32).tiny
    return Volume(data), LabelMap(labels, spec.num_classes)


def ambiguous_classes(spec: PhantomSpec) -> tuple[int, int] | None:
    if not spec.ambiguous_pair:
        return None
    return spec.num_classes - 2, spec.num_classes - 1


def generate_suite(n_volumes: int, base_seed: int, **spec_kwargs) -> list[tuple[Volume, LabelMap]]:
    """``n_volumes`` phantoms with seeds base_seed, base_seed+1, ..."""
    return [
        generate_phantom(PhantomSpec(seed=base_seed + i, **spec_kwargs)) for i in range(n_volumes)
    ]
