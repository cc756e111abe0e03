"""Gaussian heatmap encoding, align-corners resizing and argmax decoding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_SIGMA_SQ = 3.0


@dataclass
class KeypointSet:
    """K ordered keypoints in pixel coordinates.

    ``xy`` has shape (K, 2) holding (x, y); ``visible`` is a boolean mask of
    length K. Keypoint j always denotes the same landmark.
    """

    xy: np.ndarray
    visible: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if self.visible is None:
            self.visible = np.ones(len(self.xy), dtype=bool)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(self.xy) < 1:
            raise ValueError("a KeypointSet needs at least one keypoint")
        if len(self.visible) != len(self.xy):
            raise ValueError(
                f"visibility mask has {len(self.visible)} entries for {len(self.xy)} keypoints"
            )

    @classmethod
    def from_points(cls, points, image_width, image_height, visible=None):
        xy = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if visible is None:
            visible = np.ones(len(xy), dtype=bool)
        return cls(xy, np.asarray(visible, dtype=bool), int(image_width), int(image_height))

    @property
    def num_keypoints(self) -> int:
        return len(self.xy)

    def validate(self):
        """Raise ValueError if a visible point lies outside the image."""
        x, y = self.xy[:, 0], self.xy[:, 1]
        inside = (x >= 0) & (x < self.image_width) & (y >= 0) & (y < self.image_height)
        bad = np.flatnonzero(self.visible & ~inside)
        if bad.size:
            j = int(bad[0])
            raise ValueError(
                f"visible keypoint {j} at ({x[j]}, {y[j]}) is outside the "
                f"{self.image_width}x{self.image_height} image"
            )

    def rescaled(self, width: int, height: int) -> "KeypointSet":
        """Keypoints for the same image resized to ``width`` x ``height``."""
        scale = np.array([width / self.image_width, height / self.image_height])
        return KeypointSet(self.xy * scale, self.visible.copy(), int(width), int(height))


@dataclass
class Heatmap:
    data: np.ndarray  # (K, H, W)
    scale_id: int = field(default=1)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"heatmap data must be (K, H, W), got shape {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


def encode_heatmap(kps: KeypointSet, sigma_sq: float = DEFAULT_SIGMA_SQ,
                   out_h: int | None = None, out_w: int | None = None) -> Heatmap:
    """Render one unnormalized isotropic Gaussian per keypoint channel.

    Each channel peaks at 1 on the keypoint; invisible keypoints give an
    all-zero channel. ``out_h``/``out_w`` default to the image size and the
    keypoint coordinates are interpreted in that pixel grid.
    """
    out_h = kps.image_height if out_h is None else int(out_h)
    out_w = kps.image_width if out_w is None else int(out_w)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    if not sigma_sq > 0:
        raise ValueError(f"sigma_sq must be positive, got {sigma_sq}")
    kps.validate()

    ys = np.arange(out_h, dtype=np.float64)[:, None]
    xs = np.arange(out_w, dtype=np.float64)[None, :]
    data = np.zeros((kps.num_keypoints, out_h, out_w), dtype=np.float64)
    for k, ((x, y), vis) in enumerate(zip(kps.xy, kps.visible)):
        if vis:
            data[k] = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sigma_sq))
    return Heatmap(data)


def _align_corners_weights(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_array(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes, first/last samples aligned."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = data.shape[-2:]
    if (h, w) == (out_h, out_w):
        return data.copy()
    lo, hi, fy = _align_corners_weights(h, out_h)
    rows = data[..., lo, :] * (1.0 - fy)[:, None] + data[..., hi, :] * fy[:, None]
    lo, hi, fx = _align_corners_weights(w, out_w)
    out = rows[..., lo] * (1.0 - fx) + rows[..., hi] * fx
    # convex combinations can overshoot by an ulp
    return np.clip(out, data.min(), data.max()) if data.size else out


def resize_heatmap(h: Heatmap, out_h: int, out_w: int, scale_id: int | None = None) -> Heatmap:
    return Heatmap(resize_array(h.data, out_h, out_w), h.scale_id if scale_id is None else scale_id)


def decode_keypoints(h: Heatmap) -> KeypointSet:
    """Integer argmax per channel; ties go to the first row-major index."""
    k, height, width = h.data.shape
    if h.data.size == 0:
        raise ValueError("cannot decode an empty heatmap")
    flat = np.argmax(h.data.reshape(k, -1), axis=1)
    ys, xs = np.divmod(flat, width)
    xy = np.stack([xs, ys], axis=1).astype(np.float64)
    return KeypointSet(xy, np.ones(k, dtype=bool), width, height)


def decode_batch(heatmaps) -> np.ndarray:
    """Argmax coordinates for a (B, K, H, W) array, returned as (B, K, 2)."""
    arr = np.asarray(heatmaps)
    b, k, height, width = arr.shape
    flat = np.argmax(arr.reshape(b, k, -1), axis=2)
    ys, xs = np.divmod(flat, width)
    return np.stack([xs, ys], axis=2).astype(np.float64)
