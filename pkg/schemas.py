"""
Pydantic schemas for configuration, dataset manifests, reports and the HTTP API
"""

import math
from datetime import datetime
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


# Simulation schemas
class EnvironmentKind(str, Enum):
    SAME = "same"
    SIMILAR = "similar"
    DIFFERENT = "different"


class Split(str, Enum):
    TRAIN = "train"
    TEST_SAME = "test_same"
    TEST_SIMILAR = "test_similar"
    TEST_DIFFERENT = "test_different"
    TEST_SMOKE = "test_smoke"


class CfarConfig(BaseModel):
    guard_cells: int = Field(2, ge=0)
    train_cells: int = Field(8, ge=1)
    threshold_db: float = 8.0

    @field_validator("threshold_db")
    @classmethod
    def finite_threshold(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("threshold_db must be finite")
        return v

    @property
    def factor(self) -> float:
        return 10.0 ** (self.threshold_db / 10.0)

    @property
    def window(self) -> int:
        return 2 * (self.guard_cells + self.train_cells) + 1


class SimConfig(BaseModel):
    """Sensor and scene-rendering parameters shared by radar and lidar"""

    max_range: float = Field(10.0, gt=0)
    n_range_bins: int = Field(256, ge=1)
    n_radar_az_bins: int = Field(64, ge=2)
    n_lidar_az_bins: int = Field(512, ge=2)
    specular_halfangle: float = Field(25.0, ge=0, le=90)  # degrees
    ghost_order: int = Field(1, ge=0, le=1)
    smoke: bool = False
    rng_seed: int = Field(0, ge=0)

    n_antennas: int = Field(8, ge=2)
    n_fast_time: int = Field(512, ge=2)
    wavelength: float = Field(3.9e-3, gt=0)  # 77 GHz
    element_spacing: Optional[float] = Field(None, gt=0)  # None means wavelength / 2
    noise_sigma: float = Field(0.01, ge=0)
    keep_fraction: Optional[float] = Field(None, gt=0, le=1)  # None means calibrated against keep_cfar
    keep_ratio: float = Field(15.0, gt=0)
    keep_cfar: CfarConfig = Field(default_factory=lambda: CfarConfig(guard_cells=2, train_cells=5))
    specular_attenuation: float = Field(0.05, ge=0, le=1)
    ghost_gain: float = Field(0.5, ge=0)
    wall_sample_step: float = Field(0.05, gt=0)
    scatterer_radius: float = Field(0.1, ge=0)

    @model_validator(mode="after")
    def check_grids(self):
        if self.n_lidar_az_bins % self.n_radar_az_bins != 0:
            raise ValueError("n_lidar_az_bins must be an integer multiple of n_radar_az_bins")
        if not _is_power_of_two(self.n_fast_time):
            raise ValueError("n_fast_time must be a power of two")
        if self.n_range_bins > self.n_fast_time // 2:
            raise ValueError("n_range_bins must not exceed n_fast_time / 2")
        if not _is_power_of_two(self.n_radar_az_bins) or self.n_radar_az_bins < self.n_antennas:
            raise ValueError("n_radar_az_bins must be a power of two and at least n_antennas")
        if self.keep_fraction is None and self.keep_cfar.window > min(self.n_range_bins, self.n_radar_az_bins):
            raise ValueError(f"keep_cfar window {self.keep_cfar.window} does not fit the radar image")
        return self

    @property
    def sr_factor(self) -> int:
        return self.n_lidar_az_bins // self.n_radar_az_bins

    @property
    def range_bin_width(self) -> float:
        return self.max_range / self.n_range_bins

    @property
    def spacing(self) -> float:
        return self.element_spacing if self.element_spacing is not None else self.wavelength / 2


# Learning schemas
class LossConfig(BaseModel):
    bce_weight: float = Field(1.0, ge=0)
    dice_weight: float = Field(1.0, ge=0)
    dice_epsilon: float = Field(1e-6, gt=0)

    @model_validator(mode="after")
    def check_weights(self):
        if self.bce_weight + self.dice_weight <= 0:
            raise ValueError("bce_weight + dice_weight must be positive")
        return self


class AdamConfig(BaseModel):
    lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    seed: int = Field(0, ge=0)


class UNetConfig(BaseModel):
    """Asymmetric U-Net shape; defaults are the desk-scale toy network"""

    levels: int = Field(3, ge=1)
    encoder_filters: List[int] = Field(default_factory=lambda: [8, 16, 32])
    history: int = Field(4, ge=0)
    n_range: int = Field(64, ge=1)
    n_az_in: int = Field(16, ge=1)
    az_upsample_factor: int = Field(8, ge=1)
    kernel_size: int = Field(3, ge=1)

    @model_validator(mode="after")
    def check_shape_arithmetic(self):
        if len(self.encoder_filters) != self.levels:
            raise ValueError("encoder_filters must have one entry per level")
        if any(f < 1 for f in self.encoder_filters):
            raise ValueError("encoder_filters must be positive")
        if not _is_power_of_two(self.az_upsample_factor):
            raise ValueError("az_upsample_factor must be a power of two")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        scale = 2 ** (self.levels - 1)
        if self.n_range % scale or self.n_az_in % scale:
            raise ValueError(f"input {self.n_range}x{self.n_az_in} is not divisible by {scale}")
        return self

    @classmethod
    def full_scale(cls) -> "UNetConfig":
        return cls(levels=5, encoder_filters=[64, 128, 256, 512, 512], history=40,
                   n_range=256, n_az_in=64, az_upsample_factor=8)

    @property
    def in_channels(self) -> int:
        return self.history + 1

    @property
    def n_az_out(self) -> int:
        return self.n_az_in * self.az_upsample_factor

    @property
    def n_asym_stages(self) -> int:
        return self.az_upsample_factor.bit_length() - 1

    @property
    def in_shape(self) -> tuple:
        return (self.in_channels, self.n_range, self.n_az_in)

    @property
    def out_shape(self) -> tuple:
        return (1, self.n_range, self.n_az_out)


class TrainingConfig(BaseModel):
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(4, ge=1)
    tau: float = Field(0.5, gt=0, lt=1)
    cfar_thresholds: List[float] = Field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])
    n_triptychs: int = Field(8, ge=0)


def _toy_sim() -> SimConfig:
    return SimConfig(n_range_bins=64, n_radar_az_bins=16, n_lidar_az_bins=128)


class ExperimentConfig(BaseModel):
    """Everything a config file may set; mirrors the field names above"""

    sim: SimConfig = Field(default_factory=_toy_sim)
    unet: UNetConfig = Field(default_factory=UNetConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    adam: AdamConfig = Field(default_factory=AdamConfig)
    cfar: CfarConfig = Field(default_factory=lambda: CfarConfig(guard_cells=2, train_cells=5))
    training: TrainingConfig = Field(default_factory=TrainingConfig)

    @model_validator(mode="after")
    def check_agreement(self):
        check_unet_matches_sim(self.unet, self.sim)
        return self


def check_unet_matches_sim(unet: UNetConfig, sim: SimConfig) -> None:
    if unet.n_range != sim.n_range_bins:
        raise ValueError(f"unet.n_range={unet.n_range} but sim.n_range_bins={sim.n_range_bins}")
    if unet.n_az_in != sim.n_radar_az_bins:
        raise ValueError(f"unet.n_az_in={unet.n_az_in} but sim.n_radar_az_bins={sim.n_radar_az_bins}")
    if unet.n_az_out != sim.n_lidar_az_bins:
        raise ValueError(f"unet output width {unet.n_az_out} but sim.n_lidar_az_bins={sim.n_lidar_az_bins}")


# Dataset schemas
class TrajectoryEntry(BaseModel):
    id: str
    kind: EnvironmentKind
    split: Split
    n_frames: int = Field(ge=1)
    scene_seed: int
    traj_seed: int
    smoke: bool = False
    reference_id: Optional[str] = None  # clear-air twin of a smoke trajectory
    file: str
    offsets: List[int]

    @model_validator(mode="after")
    def check_offsets(self):
        if len(self.offsets) != self.n_frames:
            raise ValueError(f"{self.id}: {len(self.offsets)} offsets for {self.n_frames} frames")
        return self


class DatasetManifest(BaseModel):
    version: int = 1
    sim_config: SimConfig
    step: float = Field(ge=0)
    trajectories: List[TrajectoryEntry]

    @model_validator(mode="after")
    def check_splits(self):
        ids = [t.id for t in self.trajectories]
        if len(ids) != len(set(ids)):
            raise ValueError("trajectory ids must be unique")
        train = {t.id for t in self.trajectories if t.split == Split.TRAIN}
        test = {t.id for t in self.trajectories if t.split != Split.TRAIN}
        if train & test:
            raise ValueError(f"train and test trajectories overlap: {sorted(train & test)}")
        train_scenes = {(t.kind, t.scene_seed, t.traj_seed) for t in self.trajectories if t.split == Split.TRAIN}
        for t in self.trajectories:
            if t.split != Split.TRAIN and (t.kind, t.scene_seed, t.traj_seed) in train_scenes:
                raise ValueError(f"test trajectory {t.id} replays a training trajectory")
        return self

    def split(self, name: Split) -> List[TrajectoryEntry]:
        return [t for t in self.trajectories if t.split == name]

    def entry(self, traj_id: str) -> TrajectoryEntry:
        for t in self.trajectories:
            if t.id == traj_id:
                return t
        raise KeyError(traj_id)


# Report schemas
class MethodMetrics(BaseModel):
    method: str
    n_pairs: int
    n_missing: int
    mean_points: float
    chamfer: List[float]
    mod_hausdorff: List[float]
    median_chamfer: Optional[float] = None
    median_mod_hausdorff: Optional[float] = None
    cdf_chamfer: Dict[int, float] = Field(default_factory=dict)
    cdf_mod_hausdorff: Dict[int, float] = Field(default_factory=dict)


class MetricsReport(BaseModel):
    split: Split
    tau: float
    n_frames: int
    lidar_mean_points: float
    methods: Dict[str, MethodMetrics]
    best_cfar: Optional[str] = None
    chamfer_ratio: Optional[float] = None
    mod_hausdorff_ratio: Optional[float] = None


# HTTP schemas
class HealthResponse(BaseModel):
    status: str
    model_loaded: bool
    checkpoint: Optional[str] = None


class InferenceResponse(BaseModel):
    n_range: int
    n_azimuth: int
    tau: float
    occupied_fraction: float
    points: List[List[float]]


class MetricsRequest(BaseModel):
    a: List[List[float]]
    b: List[List[float]]


class MetricsResponse(BaseModel):
    chamfer: float
    mod_hausdorff: float


class EpochLossResponse(BaseModel):
    epoch: int
    mean_loss: float

    model_config = ConfigDict(from_attributes=True)


class MethodSummaryResponse(BaseModel):
    method: str
    n_pairs: int
    n_missing: int
    median_chamfer: Optional[float] = None
    median_mod_hausdorff: Optional[float] = None
    mean_points: float

    model_config = ConfigDict(from_attributes=True)


class RunResponse(BaseModel):
    id: int
    kind: str
    status: str
    data_dir: str
    split: Optional[str] = None
    checkpoint: Optional[str] = None
    created_at: datetime

    model_config = ConfigDict(from_attributes=True)


class RunDetailResponse(RunResponse):
    losses: List[EpochLossResponse] = []
    summaries: List[MethodSummaryResponse] = []
