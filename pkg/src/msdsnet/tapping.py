"""Finger-tapping frequency from thumb-tip / index-tip trajectories."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks

METHODS = ("peak_count", "spectral")
TRAJECTORY_HEADER = ["frame", "thumb_x", "thumb_y", "index_x", "index_y", "valid"]


@dataclass
class Frame:
    thumb: tuple
    index: tuple
    valid: bool = True


@dataclass
class Trajectory:
    fps: float
    frames: list

    def __post_init__(self):
        if not self.fps > 0:
            raise ValueError("fps must be positive")


@dataclass
class TapReport:
    frequency_hz: float
    num_taps: int
    distance_signal: list
    method: str
    peak_indices: list = field(default_factory=list)
    peak_count_hz: float = 0.0
    spectral_hz: float = 0.0
    duration_s: float = 0.0

    CSV_HEADER = ("method", "frequency_hz", "num_taps", "peak_count_hz", "spectral_hz", "duration_s")

    def to_csv(self) -> str:
        row = (self.method, f"{self.frequency_hz:.6g}", str(self.num_taps),
               f"{self.peak_count_hz:.6g}", f"{self.spectral_hz:.6g}", f"{self.duration_s:.6g}")
        return ",".join(self.CSV_HEADER) + "\n" + ",".join(row) + "\n"


def read_trajectory_csv(path, fps) -> Trajectory:
    frames = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRAJECTORY_HEADER:
            raise ValueError(f"{path}: header must be {','.join(TRAJECTORY_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) != len(TRAJECTORY_HEADER):
                    raise ValueError(f"expected {len(TRAJECTORY_HEADER)} fields, got {len(row)}")
                valid = int(row[5])
                if valid not in (0, 1):
                    raise ValueError("valid must be 0 or 1")
                tx, ty, ix, iy = (float(v) for v in row[1:5])
                if valid and not all(math.isfinite(v) for v in (tx, ty, ix, iy)):
                    raise ValueError("non-finite coordinate in a valid frame")
            except ValueError as exc:
                raise ValueError(f"{path}: malformed row {lineno}: {exc}") from exc
            frames.append(Frame((tx, ty), (ix, iy), bool(valid)))
    return Trajectory(float(fps), frames)


def distance_signal(traj: Trajectory) -> np.ndarray:
    """Per-frame thumb-index distance, gaps filled linearly.

    Invalid frames before the first (after the last) valid frame copy its
    value.
    """
    n = len(traj.frames)
    valid = np.array([f.valid for f in traj.frames], dtype=bool)
    if valid.sum() < 2:
        raise ValueError(f"need at least 2 valid frames, got {int(valid.sum())}")
    thumb = np.array([f.thumb for f in traj.frames], dtype=np.float64)
    index = np.array([f.index for f in traj.frames], dtype=np.float64)
    d = np.hypot(*(thumb - index).T)
    idx = np.arange(n)
    return np.interp(idx, idx[valid], d[valid])


def count_taps(signal, fps, prominence_frac=0.25, min_separation_s=0.15) -> np.ndarray:
    """Indices of local maxima with range-relative prominence and a refractory gap."""
    x = np.asarray(signal, dtype=np.float64)
    span = float(x.max() - x.min()) if x.size else 0.0
    if span <= 1e-12 * max(1.0, float(np.abs(x).max(initial=0.0))):
        return np.array([], dtype=int)
    distance = max(1, int(math.ceil(min_separation_s * fps)))
    peaks, _ = find_peaks(x, prominence=prominence_frac * span, distance=distance)
    return peaks


def spectral_frequency(signal, fps) -> float:
    """Frequency of the strongest non-DC bin of the mean-removed spectrum."""
    x = np.asarray(signal, dtype=np.float64)
    x = x - x.mean()
    mag = np.abs(np.fft.rfft(x))
    if len(mag) < 2 or mag[1:].max() <= 1e-9 * max(1.0, np.abs(x).sum()):
        return 0.0
    k = int(np.argmax(mag[1:])) + 1
    return k * fps / len(x)


def tapping_frequency(signal, fps, method="peak_count", prominence_frac=0.25,
                      min_separation_s=0.15) -> TapReport:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if not fps > 0:
        raise ValueError("fps must be positive")
    x = np.asarray(signal, dtype=np.float64)
    duration = len(x) / fps
    if duration < 1.0:
        raise ValueError(f"need at least 1 s of signal, got {duration:.3g} s")
    peaks = count_taps(x, fps, prominence_frac, min_separation_s)
    peak_hz = len(peaks) / duration
    spec_hz = spectral_frequency(x, fps)
    return TapReport(
        frequency_hz=peak_hz if method == "peak_count" else spec_hz,
        num_taps=len(peaks),
        distance_signal=x.tolist(),
        method=method,
        peak_indices=peaks.tolist(),
        peak_count_hz=peak_hz,
        spectral_hz=spec_hz,
        duration_s=duration,
    )


def analyze_trajectory(traj: Trajectory, method="peak_count", **kw) -> TapReport:
    return tapping_frequency(distance_signal(traj), traj.fps, method, **kw)
