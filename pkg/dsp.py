"""
Classical radar processing: range/azimuth FFTs, log normalization,
low-threshold input quantization and the cell-averaging CFAR baseline
"""

import logging
import math
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from errors import ShapeError
from schemas import CfarConfig, SimConfig

if TYPE_CHECKING:
    from sim import ArraySnapshot

logger = logging.getLogger(__name__)


class ImageKind(str, Enum):
    MAGNITUDE = "magnitude"
    NORMALIZED = "normalized"
    PROBABILITY = "probability"
    BINARY = "binary"


class AzimuthGrid(str, Enum):
    BEAMSPACE = "beamspace"  # uniform in sin(theta), native FFT output
    ANGLE = "angle"  # uniform in theta, lidar rays


class PolarImage(BaseModel):
    """Range x azimuth grid; rows are range, columns sweep -90 deg to +90 deg"""

    data: np.ndarray
    kind: ImageKind
    max_range: float = 10.0
    azimuth_grid: AzimuthGrid = AzimuthGrid.BEAMSPACE

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def check_values(self):
        data = self.data
        if data.ndim != 2:
            raise ValueError(f"polar image must be 2D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("polar image contains NaN or Inf")
        if data.size:
            lo, hi = float(data.min()), float(data.max())
            if lo < 0:
                raise ValueError(f"{self.kind.value} image has negative values")
            if self.kind != ImageKind.MAGNITUDE and hi > 1:
                raise ValueError(f"{self.kind.value} image has values above 1")
            if self.kind == ImageKind.BINARY and not np.all((data == 0) | (data == 1)):
                raise ValueError("binary image must contain only 0 and 1")
        return self

    @property
    def n_range(self) -> int:
        return self.data.shape[0]

    @property
    def n_azimuth(self) -> int:
        return self.data.shape[1]

    @property
    def range_extent(self) -> Tuple[float, float]:
        return (0.0, self.max_range)

    @property
    def azimuth_extent(self) -> Tuple[float, float]:
        return (-90.0, 90.0)

    def azimuth_angles(self) -> np.ndarray:
        """Column angles in radians"""
        if self.azimuth_grid == AzimuthGrid.BEAMSPACE:
            return beamspace_angles(self.n_azimuth)
        return angle_grid_angles(self.n_azimuth)

    def range_centers(self) -> np.ndarray:
        return (np.arange(self.n_range) + 0.5) * self.max_range / self.n_range

    def count_nonzero(self) -> int:
        return int(np.count_nonzero(self.data))

    def with_data(self, data: np.ndarray, kind: ImageKind) -> "PolarImage":
        return PolarImage(data=data, kind=kind, max_range=self.max_range, azimuth_grid=self.azimuth_grid)


def beamspace_angles(n_az: int) -> np.ndarray:
    """Bin b maps to sin(theta) = 2 (b - n/2) / n"""
    s = 2.0 * (np.arange(n_az) - n_az / 2) / n_az
    return np.arcsin(np.clip(s, -1.0, 1.0))


def angle_grid_angles(n_az: int) -> np.ndarray:
    """Bin centers uniform in angle over (-90, +90) deg"""
    return -math.pi / 2 + (np.arange(n_az) + 0.5) * math.pi / n_az


def range_fft(snap: "ArraySnapshot", n_range_bins: int) -> np.ndarray:
    """Hann-windowed FFT along fast time; keeps the first n_range_bins bins"""
    n_fast = snap.n_fast_time
    if n_range_bins > n_fast // 2:
        raise ShapeError(f"n_range_bins={n_range_bins} exceeds n_fast_time/2={n_fast // 2}")
    window = np.hanning(n_fast)
    spectrum = np.fft.fft(snap.samples * window[None, :], axis=1)
    return spectrum[:, :n_range_bins]


def azimuth_fft(range_profiles: np.ndarray, n_az_bins: int, max_range: float = 10.0) -> PolarImage:
    """Zero-padded FFT across antennas, shifted so column 0 is -90 deg"""
    n_antennas = range_profiles.shape[0]
    if n_az_bins < n_antennas or n_az_bins & (n_az_bins - 1):
        raise ShapeError(f"n_az_bins={n_az_bins} must be a power of two >= {n_antennas}")
    beams = np.fft.fft(range_profiles.T, n=n_az_bins, axis=1)
    magnitude = np.abs(np.fft.fftshift(beams, axes=1))
    return PolarImage(data=magnitude, kind=ImageKind.MAGNITUDE, max_range=max_range,
                      azimuth_grid=AzimuthGrid.BEAMSPACE)


def radar_heatmap(snap: "ArraySnapshot", cfg: SimConfig) -> PolarImage:
    profiles = range_fft(snap, cfg.n_range_bins)
    return azimuth_fft(profiles, cfg.n_radar_az_bins, cfg.max_range)


def log_normalize(img: PolarImage, quantize: bool = True) -> PolarImage:
    """log10(1 + v), min-max scaled per image, quantized to k/255"""
    if img.kind != ImageKind.MAGNITUDE:
        raise ValueError(f"log_normalize expects a magnitude image, got {img.kind.value}")
    v = np.log10(1.0 + img.data)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        scaled = np.zeros_like(v)
    else:
        scaled = (v - lo) / (hi - lo)
    if quantize:
        scaled = np.round(scaled * 255.0) / 255.0
    return img.with_data(scaled, ImageKind.NORMALIZED)


def low_threshold(img: PolarImage, keep_fraction: float) -> PolarImage:
    """Keep the ceil(keep_fraction * n_nonzero) strongest pixels; ties at the cut survive"""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    data = img.data
    values = data[data > 0]
    if keep_fraction == 1 or values.size == 0:
        return img.with_data(data.copy(), ImageKind.NORMALIZED)
    k = max(1, math.ceil(keep_fraction * values.size - 1e-9))
    cut = np.partition(values, values.size - k)[values.size - k]
    return img.with_data(np.where(data >= cut, data, 0.0), ImageKind.NORMALIZED)


def radar_input_image(snap: "ArraySnapshot", cfg: SimConfig) -> PolarImage:
    """Heatmap -> 8-bit log normalization -> low threshold: the network input channel"""
    heatmap = radar_heatmap(snap, cfg)
    keep = cfg.keep_fraction
    if keep is None:
        keep = frame_keep_fraction(heatmap, cfg.keep_cfar, cfg.keep_ratio) or 1.0
    return low_threshold(log_normalize(heatmap), keep)


def _box_sums(integral: np.ndarray, half: int) -> Tuple[np.ndarray, np.ndarray]:
    """Sum and cell count of the (2 half + 1)^2 box around every pixel, clamped to the image"""
    n_rows, n_cols = integral.shape[0] - 1, integral.shape[1] - 1
    rows, cols = np.arange(n_rows), np.arange(n_cols)
    r0, r1 = np.clip(rows - half, 0, n_rows), np.clip(rows + half + 1, 0, n_rows)
    c0, c1 = np.clip(cols - half, 0, n_cols), np.clip(cols + half + 1, 0, n_cols)
    total = (integral[np.ix_(r1, c1)] - integral[np.ix_(r0, c1)]
             - integral[np.ix_(r1, c0)] + integral[np.ix_(r0, c0)])
    count = (r1 - r0)[:, None] * (c1 - c0)[None, :]
    return total, count


def ca_cfar(img: PolarImage, cfg: CfarConfig) -> PolarImage:
    """2D cell-averaging CFAR on power = magnitude^2"""
    if img.kind != ImageKind.MAGNITUDE:
        raise ValueError(f"ca_cfar expects a magnitude image, got {img.kind.value}")
    if img.n_range < cfg.window or img.n_azimuth < cfg.window:
        raise ShapeError(f"image {img.data.shape} smaller than the {cfg.window}x{cfg.window} CFAR window")

    power = img.data.astype(np.float64) ** 2
    integral = np.zeros((power.shape[0] + 1, power.shape[1] + 1))
    integral[1:, 1:] = power.cumsum(axis=0).cumsum(axis=1)

    outer_sum, outer_n = _box_sums(integral, cfg.guard_cells + cfg.train_cells)
    inner_sum, inner_n = _box_sums(integral, cfg.guard_cells)
    train_sum = np.maximum(outer_sum - inner_sum, 0.0)
    train_n = outer_n - inner_n

    noise = np.divide(train_sum, train_n, out=np.zeros_like(train_sum), where=train_n > 0)
    detections = (power > noise * cfg.factor) & (train_n > 0)
    return img.with_data(detections.astype(np.float64), ImageKind.BINARY)


def frame_keep_fraction(heatmap: PolarImage, cfar: CfarConfig, ratio: float = 15.0) -> Optional[float]:
    """keep_fraction leaving ~ratio x the CA-CFAR detections of this frame; None without detections"""
    detections = ca_cfar(heatmap, cfar).count_nonzero()
    nonzero = log_normalize(heatmap).count_nonzero()
    if detections == 0 or nonzero == 0:
        return None
    return min(1.0, ratio * detections / nonzero)


def calibrate_keep_fraction(heatmaps: Iterable[PolarImage], cfar: CfarConfig, ratio: float = 15.0) -> float:
    """Median of the per-frame keep fractions"""
    fractions = [f for f in (frame_keep_fraction(h, cfar, ratio) for h in heatmaps) if f is not None]
    if not fractions:
        logger.warning("No CFAR detections on calibration frames; keeping every pixel")
        return 1.0
    return float(np.median(fractions))
