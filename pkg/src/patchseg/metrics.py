"""Dice, Hausdorff and mean surface distance between label maps.

Distances are measured in millimeters between point sets taken from each mask:
its boundary voxels by default (voxels with a face neighbour outside the mask,
the volume edge counting as outside), or every voxel with ``fullset=True``.
Point-to-set distances use an exact Euclidean distance transform.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import LabelMap

_FACES = ndimage.generate_binary_structure(3, 1)


def dice(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    denom = int(x.sum()) + int(y.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / denom


def boundary_mask(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=bool)
    if not x.any():
        raise ValueError("undefined surface: empty mask")
    inner = ndimage.binary_erosion(x, structure=_FACES, border_value=0)
    return x & ~inner


def extract_boundary(x: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Boundary voxel centers in mm, shape (n, 3)."""
    return np.argwhere(boundary_mask(x)) * np.asarray(spacing, dtype=np.float64)


def _point_mask(x, fullset):
    x = np.asarray(x, dtype=bool)
    if not x.any():
        raise ValueError("undefined surface: empty mask")
    return x if fullset else boundary_mask(x)


def directed_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distance from every True voxel of ``src`` to the nearest True voxel of ``dst``."""
    edt = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return edt[src]


def _directed_pair(x, y, spacing, fullset):
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    px = _point_mask(x, fullset)
    py = _point_mask(y, fullset)
    spacing = tuple(float(s) for s in spacing)
    return directed_distances(px, py, spacing), directed_distances(py, px, spacing)


def hausdorff(x, y, spacing=(1.0, 1.0, 1.0), fullset: bool = False) -> float:
    dxy, dyx = _directed_pair(x, y, spacing, fullset)
    return float(max(dxy.max(), dyx.max()))


def msd(x, y, spacing=(1.0, 1.0, 1.0), fullset: bool = False) -> float:
    dxy, dyx = _directed_pair(x, y, spacing, fullset)
    return float(0.5 * (dxy.mean() + dyx.mean()))


@dataclass
class MetricReport:
    """Per-class scores for classes 1..L-1 plus averages.

    Mean dice skips classes absent from both maps; mean distances use valid
    (non-empty in both maps) classes only.
    """

    classes: list[int]
    dice: list[float]
    hausdorff: list[float]
    msd: list[float]
    valid: list[bool]
    present: list[bool] | None = None
    mean_dice: float = field(init=False)
    mean_hausdorff: float = field(init=False)
    mean_msd: float = field(init=False)

    def __post_init__(self):
        if self.present is None:
            self.present = [True] * len(self.classes)
        scored = [dv for dv, p in zip(self.dice, self.present) if p]
        self.mean_dice = float(np.mean(scored)) if scored else float("nan")
        ok = [i for i, v in enumerate(self.valid) if v]
        self.mean_hausdorff = float(np.mean([self.hausdorff[i] for i in ok])) if ok else float("nan")
        self.mean_msd = float(np.mean([self.msd[i] for i in ok])) if ok else float("nan")

    def for_class(self, c: int) -> dict:
        i = self.classes.index(c)
        return {"dice": self.dice[i], "hausdorff": self.hausdorff[i], "msd": self.msd[i],
                "valid": self.valid[i]}


def evaluate_pair(pred: LabelMap, gt: LabelMap, fullset: bool = False) -> MetricReport:
    """Compare two label maps class by class, background excluded.

    A class empty in both maps scores dice 1; empty in exactly one scores dice 0.
    Either way its distances are NaN and flagged invalid.
    """
    if pred.dims != gt.dims:
        raise ValueError(f"dims mismatch: {pred.dims} vs {gt.dims}")
    if pred.num_classes != gt.num_classes:
        raise ValueError(f"class count mismatch: {pred.num_classes} vs {gt.num_classes}")
    classes, d, h, m, valid, present = [], [], [], [], [], []
    for c in range(1, gt.num_classes):
        x = pred.labels == c
        y = gt.labels == c
        classes.append(c)
        present.append(bool(x.any() or y.any()))
        d.append(dice(x, y))
        if x.any() and y.any():
            dxy, dyx = _directed_pair(x, y, gt.spacing, fullset)
            h.append(float(max(dxy.max(), dyx.max())))
            m.append(float(0.5 * (dxy.mean() + dyx.mean())))
            valid.append(True)
        else:
            h.append(float("nan"))
            m.append(float("nan"))
            valid.append(False)
    return MetricReport(classes, d, h, m, valid, present)


CSV_HEADER = ("volume_id", "class_id", "dice", "hausdorff_mm", "msd_mm", "valid")


def write_metrics_csv(path, reports: dict) -> None:
    """One row per (volume, class) plus a ``mean`` summary row per volume."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for vid, rep in reports.items():
            for c, dv, hv, mv, ok in zip(rep.classes, rep.dice, rep.hausdorff, rep.msd, rep.valid):
                w.writerow([vid, c, f"{dv:.6f}", f"{hv:.6f}", f"{mv:.6f}", int(ok)])
            w.writerow([vid, "mean", f"{rep.mean_dice:.6f}", f"{rep.mean_hausdorff:.6f}",
                        f"{rep.mean_msd:.6f}", int(any(rep.valid))])
