"""
Polar image to Cartesian point cloud conversion and the Chamfer /
modified-Hausdorff similarity metrics
"""

import logging
from typing import Dict, Iterable

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.spatial import cKDTree

from dsp import ImageKind, PolarImage
from errors import EmptyCloudError

logger = logging.getLogger(__name__)

CDF_PERCENTILES = tuple(range(5, 100, 5))


class PointCloud2D(BaseModel):
    """Sensor at the origin, +y boresight, +x to the right"""

    points: np.ndarray

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def check_points(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains NaN or Inf")
        self.points = pts
        return self

    def __len__(self):
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0

    @classmethod
    def of(cls, points) -> "PointCloud2D":
        return cls(points=np.asarray(points, dtype=np.float64).reshape(-1, 2))


def threshold_image(img: PolarImage, tau: float = 0.5) -> PolarImage:
    if not 0 < tau < 1:
        raise ValueError("tau must be in (0, 1)")
    return img.with_data((img.data >= tau).astype(np.float64), ImageKind.BINARY)


def polar_to_points(img: PolarImage) -> PointCloud2D:
    """Occupied cells to (rho sin(theta), rho cos(theta)) at range-bin centers"""
    rows, cols = np.nonzero(img.data)
    rho = img.range_centers()[rows]
    theta = img.azimuth_angles()[cols]
    return PointCloud2D(points=np.stack([rho * np.sin(theta), rho * np.cos(theta)], axis=1))


def _require(a: PointCloud2D, b: PointCloud2D) -> None:
    if a.is_empty or b.is_empty:
        raise EmptyCloudError(f"metric undefined for empty cloud (|a|={len(a)}, |b|={len(b)})")


def brute_nn(a: PointCloud2D, b: PointCloud2D) -> np.ndarray:
    """Distance from every point of a to its nearest point in b, O(|a| |b|)"""
    _require(a, b)
    diff = a.points[:, None, :] - b.points[None, :, :]
    return np.sqrt(np.min(np.sum(diff * diff, axis=2), axis=1))


def nn_accel(a: PointCloud2D, b: PointCloud2D) -> np.ndarray:
    """Same distances as brute_nn through a k-d tree query"""
    _require(a, b)
    _, idx = cKDTree(b.points).query(a.points, k=1)
    # distances recomputed the brute-force way so both paths round identically
    diff = a.points - b.points[idx]
    return np.sqrt(np.sum(diff * diff, axis=1))


def chamfer(a: PointCloud2D, b: PointCloud2D) -> float:
    """Mean over the |a| + |b| nearest-neighbor distances in both directions"""
    return float(np.mean(np.concatenate([nn_accel(a, b), nn_accel(b, a)])))


def mod_hausdorff(a: PointCloud2D, b: PointCloud2D) -> float:
    """Max over the two directions of the median nearest-neighbor distance"""
    return float(max(np.median(nn_accel(a, b)), np.median(nn_accel(b, a))))


def cdf_samples(values: Iterable[float]) -> Dict[int, float]:
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        return {}
    return {p: float(np.percentile(values, p)) for p in CDF_PERCENTILES}
