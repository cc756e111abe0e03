"""PCK and thresholded MPJPE over keypoint predictions."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .codec import KeypointSet


def _stack(items):
    """Coerce a list of KeypointSet (or an (N, K, 2) array) into arrays."""
    if isinstance(items, np.ndarray):
        arr = np.asarray(items, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[-1] != 2:
            raise ValueError(f"expected (N, K, 2) coordinates, got {arr.shape}")
        return arr, np.ones(arr.shape[:2], dtype=bool)
    items = list(items)
    ks = {kp.num_keypoints for kp in items}
    if len(ks) > 1:
        raise ValueError(f"inconsistent keypoint counts {sorted(ks)}")
    xy = np.stack([kp.xy for kp in items]) if items else np.zeros((0, 0, 2))
    vis = np.stack([kp.visible for kp in items]) if items else np.zeros((0, 0), bool)
    return xy, vis


def keypoint_errors(preds, labels):
    """Euclidean errors (N, K) and the mask of labelled-visible keypoints."""
    p, _ = _stack(preds)
    y, vis = _stack(labels)
    if p.shape != y.shape:
        raise ValueError(f"predictions {p.shape[:2]} and labels {y.shape[:2]} are not aligned")
    return np.sqrt(((p - y) ** 2).sum(axis=-1)), vis


def pck(preds, labels, t: float) -> float:
    err, vis = keypoint_errors(preds, labels)
    n = int(vis.sum())
    if n == 0:
        raise ValueError("no visible keypoints to score")
    return int(((err < t) & vis).sum()) / n


@dataclass
class MPJPE:
    value: float          # nan when no keypoint is correct
    correct_count: int

    @property
    def defined(self) -> bool:
        return self.correct_count > 0


def mpjpe(preds, labels, t: float) -> MPJPE:
    err, vis = keypoint_errors(preds, labels)
    ok = (err < t) & vis
    count = int(ok.sum())
    if count == 0:
        return MPJPE(math.nan, 0)
    return MPJPE(math.fsum(err[ok].tolist()) / count, count)


@dataclass
class MetricsReport:
    thresholds: list
    pck: list
    mpjpe: list
    correct_counts: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("threshold,pck,mpjpe,correct_count\n")
        for t, p, e, c in zip(self.thresholds, self.pck, self.mpjpe, self.correct_counts):
            e_txt = "nan" if math.isnan(e) else f"{e:.6g}"
            buf.write(f"{t:.6g},{p:.6g},{e_txt},{c}\n")
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def pck_curve(preds, labels, thresholds) -> MetricsReport:
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValueError("threshold list is empty")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    err, vis = keypoint_errors(preds, labels)
    n = int(vis.sum())
    if n == 0:
        raise ValueError("no visible keypoints to score")
    pcks, errs, counts = [], [], []
    for t in thresholds:
        ok = (err < t) & vis
        c = int(ok.sum())
        pcks.append(c / n)
        errs.append(float(err[ok].mean()) if c else math.nan)
        counts.append(c)
    return MetricsReport(thresholds, pcks, errs, counts)


def as_keypoint_sets(coords, width, height, visible=None):
    """Wrap an (N, K, 2) coordinate array as a list of KeypointSet."""
    coords = np.asarray(coords, dtype=np.float64)
    out = []
    for i, xy in enumerate(coords):
        vis = None if visible is None else visible[i]
        out.append(KeypointSet.from_points(xy, width, height, vis))
    return out
