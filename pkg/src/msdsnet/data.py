"""Annotation loading, 8:1:1 splitting, synthetic blob datasets and batching."""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .codec import DEFAULT_SIGMA_SQ, KeypointSet, encode_heatmap, resize_array

ANNOTATIONS = "annotations.json"
SPLITS = ("train", "val", "test")


class DatasetError(Exception):
    """Base class for dataset problems."""


class MissingFileError(DatasetError):
    pass


class AnnotationError(DatasetError):
    pass


class KeypointCountError(DatasetError):
    pass


class ImageDecodeError(DatasetError):
    pass


@dataclass
class DatasetRecord:
    id: str
    image_path: Path
    keypoints: KeypointSet
    split: str | None = None


def _image_size(path: Path, record_id: str):
    try:
        with Image.open(path) as im:
            return im.size
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"record {record_id!r}: cannot decode {path}: {exc}") from exc


def load_dataset(root) -> list[DatasetRecord]:
    """Read ``root/annotations.json`` and check every record against it."""
    root = Path(root)
    ann_path = root / ANNOTATIONS
    if not ann_path.is_file():
        raise MissingFileError(f"{ann_path} not found")
    try:
        ann = json.loads(ann_path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{ann_path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(ann, dict) or "num_keypoints" not in ann or "records" not in ann:
        raise AnnotationError(f"{ann_path}: expected keys 'num_keypoints' and 'records'")
    k = ann["num_keypoints"]
    if not isinstance(k, int) or k < 1:
        raise AnnotationError(f"{ann_path}: num_keypoints must be a positive integer")

    records, seen = [], set()
    for i, rec in enumerate(ann["records"]):
        try:
            rid, rel, kps = str(rec["id"]), rec["image"], rec["keypoints"]
            xy = [(float(p["x"]), float(p["y"])) for p in kps]
            vis = [int(p.get("v", 1)) for p in kps]
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"{ann_path}: record #{i} is malformed ({exc!r})") from exc
        if rid in seen:
            raise AnnotationError(f"duplicate record id {rid!r}")
        seen.add(rid)
        if len(xy) != k:
            raise KeypointCountError(f"record {rid!r} has {len(xy)} keypoints, dataset declares {k}")
        if any(v not in (0, 1) for v in vis):
            raise AnnotationError(f"record {rid!r}: visibility flags must be 0 or 1")
        path = root / rel
        if not path.is_file():
            raise MissingFileError(f"record {rid!r}: image {path} does not exist")
        w, h = _image_size(path, rid)
        kp = KeypointSet.from_points(xy, w, h, np.array(vis, dtype=bool))
        try:
            kp.validate()
        except ValueError as exc:
            raise AnnotationError(f"record {rid!r}: {exc}") from exc
        records.append(DatasetRecord(rid, path, kp))
    return records


def split_sizes(n: int, ratios=(8, 1, 1)):
    """Largest-remainder apportionment of ``n`` items over ``ratios``."""
    if any(r <= 0 for r in ratios):
        raise ValueError("split ratios must be positive")
    if n < len(ratios):
        raise ValueError(f"cannot split {n} records into {len(ratios)} parts")
    total = float(sum(ratios))
    exact = [n * r / total for r in ratios]
    sizes = [math.floor(e) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(records, ratios=(8, 1, 1), seed: int = 0) -> dict:
    records = list(records)
    sizes = split_sizes(len(records), ratios)
    perm = np.random.default_rng(seed).permutation(len(records))
    parts, start = {}, 0
    for name, size in zip(SPLITS, sizes):
        chosen = [records[i] for i in perm[start:start + size]]
        for r in chosen:
            r.split = name
        parts[name] = chosen
        start += size
    return parts


@dataclass
class SynthSpec:
    num_images: int = 64
    image_size: int = 64
    num_keypoints: int = 3
    blob_radius_range: tuple = (4, 7)
    noise_level: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.blob_radius_range
        if self.num_images < 1 or self.image_size < 4 or self.num_keypoints < 1:
            raise ValueError("num_images, image_size and num_keypoints must be positive")
        if not 1 <= lo <= hi:
            raise ValueError(f"bad blob radius range {self.blob_radius_range}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must lie in [0, 1]")


def keypoint_colors(k: int) -> np.ndarray:
    """K fully saturated, evenly spaced hues as 0..255 RGB."""
    return np.array([colorsys.hsv_to_rgb(i / k, 1.0, 1.0) for i in range(k)]) * 255.0


def _background(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    bg = np.zeros((size, size, 3))
    for c in range(3):
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 4.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            bg[..., c] += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    bg -= bg.min()
    return bg / max(bg.max(), 1e-12) * 60.0


def _place_blobs(rng, size, radii, max_tries=1000):
    k = len(radii)
    for _ in range(max_tries):
        centers = np.array([
            rng.integers(int(math.ceil(r)), size - int(math.ceil(r)), size=2) for r in radii
        ])
        ok = True
        for i in range(k):
            for j in range(i + 1, k):
                if np.hypot(*(centers[i] - centers[j])) < 2 * max(radii[i], radii[j]):
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return centers
    raise ValueError(
        f"could not place {k} blobs of radius up to {max(radii):.1f} in a {size}px image "
        f"after {max_tries} tries"
    )


def render_image(rng, spec: SynthSpec):
    """One synthetic image (H, W, 3) uint8 and its (K, 2) integer blob centers."""
    size, k = spec.image_size, spec.num_keypoints
    radii = rng.uniform(*spec.blob_radius_range, size=k)
    if 2 * max(radii) >= size:
        raise ValueError(f"blob radius {max(radii):.1f} does not fit a {size}px image")
    centers = _place_blobs(rng, size, radii)
    img = _background(rng, size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for (cx, cy), r, color in zip(centers, radii, keypoint_colors(k)):
        alpha = np.clip(1.0 - ((xx - cx) ** 2 + (yy - cy) ** 2) / r**2, 0.0, 1.0)[..., None]
        img = img * (1.0 - alpha) + color * alpha
    if spec.noise_level > 0:
        img = img + rng.normal(0.0, spec.noise_level * 127.5, size=img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img, centers.astype(np.float64)


def generate_synthetic(spec: SynthSpec, out_root) -> Path:
    """Write ``images/*.png`` and ``annotations.json`` under ``out_root``."""
    out_root = Path(out_root)
    (out_root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.rng_seed)
    records = []
    for i in range(spec.num_images):
        img, centers = render_image(rng, spec)
        rid = f"img_{i:05d}"
        rel = f"images/{rid}.png"
        Image.fromarray(img, mode="RGB").save(out_root / rel, format="PNG")
        records.append({
            "id": rid,
            "image": rel,
            "keypoints": [{"x": float(x), "y": float(y), "v": 1} for x, y in centers],
        })
    ann = {"num_keypoints": spec.num_keypoints, "records": records}
    (out_root / ANNOTATIONS).write_text(json.dumps(ann, indent=1) + "\n")
    return out_root


def load_image(record: DatasetRecord, target_size):
    """Decode to float (3, H, W) in [0, 1] at ``target_size`` = (H, W)."""
    th, tw = target_size
    try:
        with Image.open(record.image_path) as im:
            im = im.convert("RGB")
            if im.size != (tw, th):
                im = im.resize((tw, th), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"record {record.id!r}: cannot decode {record.image_path}: {exc}") from exc
    return arr.transpose(2, 0, 1)


@dataclass
class Batch:
    images: torch.Tensor                 # (B, 3, H, W)
    labels: torch.Tensor                 # (B, K, H, W)
    scale_labels: dict                   # s -> (B, K, h_s, w_s)
    keypoints: np.ndarray                # (B, K, 2) in target pixels
    visible: np.ndarray                  # (B, K)
    ids: list


def _as_size(target_size):
    if isinstance(target_size, int):
        return target_size, target_size
    return int(target_size[0]), int(target_size[1])


def encode_records(records, target_size, sigma_sq=DEFAULT_SIGMA_SQ, scale_shapes=None) -> Batch:
    """Decode, resize and label ``records`` into a single batch."""
    th, tw = _as_size(target_size)
    scale_shapes = scale_shapes or {}
    imgs, labels, kps, vis = [], [], [], []
    scaled = {s: [] for s in scale_shapes}
    for rec in records:
        imgs.append(load_image(rec, (th, tw)))
        kp = rec.keypoints.rescaled(tw, th)
        label = encode_heatmap(kp, sigma_sq, th, tw).data
        labels.append(label)
        for s, (h, w) in scale_shapes.items():
            scaled[s].append(resize_array(label, h, w))
        kps.append(kp.xy)
        vis.append(kp.visible)
    to_t = lambda a: torch.from_numpy(np.stack(a).astype(np.float32))
    return Batch(
        images=to_t(imgs),
        labels=to_t(labels),
        scale_labels={s: to_t(v) for s, v in scaled.items()},
        keypoints=np.stack(kps),
        visible=np.stack(vis),
        ids=[r.id for r in records],
    )


def make_batches(records, batch_size, target_size, sigma_sq=DEFAULT_SIGMA_SQ, scale_shapes=None):
    """Yield consecutive batches; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    records = list(records)
    for start in range(0, len(records), batch_size):
        yield encode_records(records[start:start + batch_size], target_size, sigma_sq, scale_shapes)


def scale_shapes(cfg) -> dict:
    """Label shapes for each supervised scale of a NetworkConfig."""
    return {s: cfg.scale_shape(s) for s in cfg.supervised_scales}
