"""
Parametric 2D scenes, sensor trajectories, first-hit lidar scans and
8-element radar array snapshots with specular dropout and mirror ghosts
"""

import logging
import math
from typing import List, NamedTuple, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from dsp import AzimuthGrid, ImageKind, PolarImage, angle_grid_angles
from errors import SimulationError
from schemas import EnvironmentKind, SimConfig

logger = logging.getLogger(__name__)

Point = Tuple[float, float]

_KIND_SALT = {EnvironmentKind.SAME: 11, EnvironmentKind.SIMILAR: 23, EnvironmentKind.DIFFERENT: 37}
_MIN_RANGE = 0.3  # amplitude law is clamped below this distance
_EPS = 1e-9


# Scene schemas
class Wall(BaseModel):
    p0: Point
    p1: Point
    reflectivity: float = Field(1.0, gt=0)
    specular: bool = False

    @model_validator(mode="after")
    def check_length(self):
        if self.p0 == self.p1:
            raise ValueError("wall endpoints must differ")
        return self

    @property
    def length(self) -> float:
        return math.dist(self.p0, self.p1)

    @property
    def normal(self) -> np.ndarray:
        dx, dy = self.p1[0] - self.p0[0], self.p1[1] - self.p0[1]
        return np.array([-dy, dx]) / math.hypot(dx, dy)


class Scatterer(BaseModel):
    pos: Point
    rcs: float = Field(1.0, gt=0)


class Bounds(BaseModel):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @model_validator(mode="after")
    def check_order(self):
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ValueError("bounds must have positive extent")
        return self

    def contains(self, x: float, y: float, margin: float = 0.0) -> bool:
        return (self.x_min + margin - _EPS <= x <= self.x_max - margin + _EPS
                and self.y_min + margin - _EPS <= y <= self.y_max - margin + _EPS)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.x_max - self.x_min, self.y_max - self.y_min)


class Scene(BaseModel):
    walls: List[Wall] = Field(default_factory=list)
    scatterers: List[Scatterer] = Field(default_factory=list)
    bounds: Bounds
    family: str = "custom"
    n_cubicles: int = 0

    @model_validator(mode="after")
    def check_geometry(self):
        for wall in self.walls:
            for p in (wall.p0, wall.p1):
                if not self.bounds.contains(*p):
                    raise ValueError(f"wall endpoint {p} outside scene bounds")
        for s in self.scatterers:
            if not self.bounds.contains(*s.pos):
                raise ValueError(f"scatterer {s.pos} outside scene bounds")
        return self

    def wall_array(self) -> np.ndarray:
        """[n_walls, 4] rows of x0, y0, x1, y1"""
        if not self.walls:
            return np.zeros((0, 4))
        return np.array([[*w.p0, *w.p1] for w in self.walls], dtype=np.float64)

    def scatterer_positions(self) -> np.ndarray:
        if not self.scatterers:
            return np.zeros((0, 2))
        return np.array([s.pos for s in self.scatterers], dtype=np.float64)


class Pose(BaseModel):
    """Sensor pose; heading is the boresight angle from world +x, counter-clockwise"""

    x: float
    y: float
    heading: float = 0.0

    @field_validator("heading")
    @classmethod
    def normalize_heading(cls, h: float) -> float:
        h = math.fmod(h + math.pi, 2 * math.pi)
        if h <= 0:
            h += 2 * math.pi
        return h - math.pi

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def boresight(self) -> np.ndarray:
        return np.array([math.cos(self.heading), math.sin(self.heading)])

    def right(self) -> np.ndarray:
        return np.array([math.sin(self.heading), -math.cos(self.heading)])

    def to_sensor(self, points: np.ndarray) -> np.ndarray:
        """World points -> sensor frame (+x right, +y boresight)"""
        d = np.asarray(points, dtype=np.float64).reshape(-1, 2) - self.position
        return np.stack([d @ self.right(), d @ self.boresight()], axis=1)


class ArraySnapshot(BaseModel):
    """Dechirped fast-time samples of the virtual uniform linear array"""

    samples: np.ndarray
    wavelength: float
    element_spacing: float
    noise_sigma: float

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def check_samples(self):
        s = self.samples
        if s.ndim != 2 or s.shape[0] < 2:
            raise ValueError(f"snapshot must be [n_antennas>=2, n_fast_time], got {s.shape}")
        n = s.shape[1]
        if n < 1 or n & (n - 1):
            raise ValueError("n_fast_time must be a power of two")
        if not np.all(np.isfinite(s)):
            raise ValueError("snapshot contains NaN or Inf")
        return self

    @property
    def n_antennas(self) -> int:
        return self.samples.shape[0]

    @property
    def n_fast_time(self) -> int:
        return self.samples.shape[1]


# Geometry
def ray_segment_hits(origin: np.ndarray, dirs: np.ndarray, walls: np.ndarray) -> np.ndarray:
    """Ray parameter of every ray/segment intersection, inf where they miss"""
    if len(walls) == 0:
        return np.full((len(dirs), 0), np.inf)
    p0 = walls[:, :2]
    e = walls[:, 2:] - p0
    w = p0 - origin
    dx, dy = dirs[:, 0:1], dirs[:, 1:2]
    denom = dx * e[:, 1] - dy * e[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[:, 0] * e[:, 1] - w[:, 1] * e[:, 0]) / denom
        u = (w[:, 0] * dy - w[:, 1] * dx) / denom
    hit = (np.abs(denom) > 1e-12) & (t > _EPS) & (u >= -_EPS) & (u <= 1 + _EPS)
    return np.where(hit, t, np.inf)


def ray_circle_hits(origin: np.ndarray, dirs: np.ndarray, centers: np.ndarray, radius: float) -> np.ndarray:
    if len(centers) == 0 or radius <= 0:
        return np.full((len(dirs), len(centers)), np.inf)
    f = centers - origin
    b = dirs @ f.T
    c = np.sum(f * f, axis=1) - radius ** 2
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        t = b - np.sqrt(disc)
    hit = (disc >= 0) & (t > _EPS) & (c > 0)
    return np.where(hit, t, np.inf)


def point_segment_distances(points: np.ndarray, walls: np.ndarray) -> np.ndarray:
    """[n_points, n_walls] Euclidean distances"""
    if len(walls) == 0:
        return np.full((len(points), 0), np.inf)
    p0 = walls[:, :2]
    e = walls[:, 2:] - p0
    rel = points[:, None, :] - p0[None, :, :]
    u = np.clip(np.sum(rel * e, axis=2) / np.sum(e * e, axis=1), 0.0, 1.0)
    closest = p0[None] + u[..., None] * e[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def segments_cross(a0: np.ndarray, a1: np.ndarray, walls: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """[n, n_walls] True where segment a0->a1 crosses a wall strictly inside both"""
    if len(walls) == 0:
        return np.zeros((len(a0), 0), dtype=bool)
    d = a1 - a0
    p0 = walls[:, :2]
    e = walls[:, 2:] - p0
    denom = d[:, 0:1] * e[:, 1] - d[:, 1:2] * e[:, 0]
    w0 = p0[None, :, 0] - a0[:, 0:1]
    w1 = p0[None, :, 1] - a0[:, 1:2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w0 * e[:, 1] - w1 * e[:, 0]) / denom
        u = (w0 * d[:, 1:2] - w1 * d[:, 0:1]) / denom
    return (np.abs(denom) > 1e-12) & (t > tol) & (t < 1 - tol) & (u > -tol) & (u < 1 + tol)


def mirror_point(p: np.ndarray, wall: Wall) -> np.ndarray:
    a = np.asarray(wall.p0)
    n = wall.normal
    return p - 2.0 * np.dot(p - a, n) * n


# Scene generators
def _room(width: float, depth: float, rng: np.random.Generator, glass_prob: float) -> List[Wall]:
    corners = [(0.0, 0.0), (width, 0.0), (width, depth), (0.0, depth)]
    walls = []
    for i in range(4):
        glass = bool(rng.random() < glass_prob)
        walls.append(Wall(p0=corners[i], p1=corners[(i + 1) % 4],
                          reflectivity=float(rng.uniform(1.2, 1.6) if glass else rng.uniform(0.8, 1.2)),
                          specular=glass))
    return walls


def _office(rng: np.random.Generator, width: float, depth: float, rows: int, cols: int,
            cell: float) -> Scene:
    """Corridor along the near wall, cubicle grid against the far wall"""
    walls = _room(width, depth, rng, glass_prob=0.25)
    scatterers = []
    x0 = (width - cols * cell) / 2
    y0 = depth - rows * cell - 0.1
    gap = 0.1
    for i in range(rows):
        for j in range(cols + 1):
            x = x0 + j * cell
            walls.append(Wall(p0=(x, y0 + i * cell + gap), p1=(x, y0 + (i + 1) * cell - gap),
                              reflectivity=float(rng.uniform(0.3, 0.7)), specular=bool(rng.random() < 0.4)))
    for i in range(1, rows + 1):
        for j in range(cols):
            y = y0 + i * cell
            walls.append(Wall(p0=(x0 + j * cell + gap, y), p1=(x0 + (j + 1) * cell - gap, y),
                              reflectivity=float(rng.uniform(0.3, 0.7)), specular=bool(rng.random() < 0.4)))
    for i in range(rows):
        for j in range(cols):
            if rng.random() < 0.7:
                px = x0 + (j + rng.uniform(0.25, 0.75)) * cell
                py = y0 + (i + rng.uniform(0.25, 0.75)) * cell
                scatterers.append(Scatterer(pos=(float(px), float(py)), rcs=float(rng.uniform(0.5, 2.0))))
    # furniture hugging the side walls keeps the corridor center free
    for _ in range(int(rng.integers(2, 5))):
        side = rng.random() < 0.5
        px = rng.uniform(0.25, 0.6) if side else width - rng.uniform(0.25, 0.6)
        py = rng.uniform(0.4, max(0.5, y0 - 0.4))
        scatterers.append(Scatterer(pos=(float(px), float(py)), rcs=float(rng.uniform(0.5, 3.0))))
    bounds = Bounds(x_min=0.0, y_min=0.0, x_max=width, y_max=depth)
    return Scene(walls=walls, scatterers=scatterers, bounds=bounds, family="office", n_cubicles=rows * cols)


def _lobby(rng: np.random.Generator) -> Scene:
    """Open lobby: glass facades, a few pillars, sparse benches"""
    width, depth = float(rng.uniform(6.5, 7.5)), float(rng.uniform(5.5, 6.2))
    walls = _room(width, depth, rng, glass_prob=0.5)
    for _ in range(int(rng.integers(1, 4))):
        cx, cy, h = rng.uniform(1.5, width - 1.5), rng.uniform(2.0, depth - 1.0), 0.2
        corners = [(cx - h, cy - h), (cx + h, cy - h), (cx + h, cy + h), (cx - h, cy + h)]
        refl = float(rng.uniform(1.0, 2.0))
        for i in range(4):
            walls.append(Wall(p0=tuple(map(float, corners[i])), p1=tuple(map(float, corners[(i + 1) % 4])),
                              reflectivity=refl))
    scatterers = [Scatterer(pos=(float(rng.uniform(0.4, width - 0.4)), float(rng.uniform(0.4, depth - 0.4))),
                            rcs=float(rng.uniform(0.5, 3.0)))
                  for _ in range(int(rng.integers(2, 6)))]
    bounds = Bounds(x_min=0.0, y_min=0.0, x_max=width, y_max=depth)
    return Scene(walls=walls, scatterers=scatterers, bounds=bounds, family="lobby", n_cubicles=0)


def gen_scene(seed: int, kind: EnvironmentKind) -> Scene:
    """same: fixed office family; similar: perturbed office layout; different: lobby family"""
    kind = EnvironmentKind(kind)
    rng = np.random.default_rng([seed, _KIND_SALT[kind]])
    if kind == EnvironmentKind.SAME:
        return _office(rng, width=7.0, depth=5.5, rows=2, cols=3, cell=1.1)
    if kind == EnvironmentKind.SIMILAR:
        width, depth = float(rng.uniform(6.0, 7.5)), float(rng.uniform(5.0, 6.0))
        rows, cols = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        cell = min(float(rng.uniform(0.9, 1.4)), (depth - 1.8) / rows, (width - 0.4) / cols)
        return _office(rng, width=width, depth=depth, rows=rows, cols=cols, cell=cell)
    return _lobby(rng)


# Trajectories
def _is_free(scene: Scene, walls: np.ndarray, scatterers: np.ndarray, x: float, y: float,
             clearance: float) -> bool:
    if not scene.bounds.contains(x, y, margin=clearance):
        return False
    p = np.array([[x, y]])
    if len(walls) and point_segment_distances(p, walls).min() < clearance:
        return False
    if len(scatterers) and np.linalg.norm(scatterers - p, axis=1).min() < clearance:
        return False
    return True


def gen_trajectory(scene: Scene, n_frames: int, step: float, seed: int, clearance: float = 0.35,
                   max_retries: int = 500) -> List[Pose]:
    """Collision-free random walk; consecutive poses are at most `step` apart"""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if step < 0:
        raise ValueError("step must be >= 0")
    rng = np.random.default_rng(seed)
    walls, scatterers = scene.wall_array(), scene.scatterer_positions()
    b = scene.bounds

    for _ in range(max_retries):
        x = float(rng.uniform(b.x_min + clearance, b.x_max - clearance))
        y = float(rng.uniform(b.y_min + clearance, b.y_max - clearance))
        if _is_free(scene, walls, scatterers, x, y, clearance):
            break
    else:
        raise SimulationError(f"no collision-free start pose after {max_retries} tries")

    heading = float(rng.uniform(-math.pi, math.pi))
    poses = [Pose(x=x, y=y, heading=heading)]
    for _ in range(1, n_frames):
        heading += float(rng.normal(0.0, 0.1))
        if step > 0:
            for _attempt in range(16):
                nx, ny = x + step * math.cos(heading), y + step * math.sin(heading)
                crossing = len(walls) and segments_cross(np.array([[x, y]]), np.array([[nx, ny]]), walls).any()
                if not crossing and _is_free(scene, walls, scatterers, nx, ny, clearance):
                    x, y = nx, ny
                    break
                heading = float(rng.uniform(-math.pi, math.pi))
        poses.append(Pose(x=x, y=y, heading=heading))
    return poses


def frame_seed(traj_seed: int, frame_index: int) -> int:
    """Per-frame seed so frames can be simulated independently and in any order"""
    state = np.random.SeedSequence([traj_seed, frame_index]).generate_state(1, dtype=np.uint64)
    return int(state[0])


# Lidar
def lidar_ranges(scene: Scene, pose: Pose, cfg: SimConfig) -> np.ndarray:
    """First-hit distance of each forward lidar ray (inf when nothing is hit)"""
    theta = angle_grid_angles(cfg.n_lidar_az_bins)
    dirs = np.cos(theta)[:, None] * pose.boresight() + np.sin(theta)[:, None] * pose.right()
    hits = ray_segment_hits(pose.position, dirs, scene.wall_array())
    circles = ray_circle_hits(pose.position, dirs, scene.scatterer_positions(), cfg.scatterer_radius)
    every = np.concatenate([hits, circles], axis=1)
    return every.min(axis=1) if every.shape[1] else np.full(len(dirs), np.inf)


def lidar_scan(scene: Scene, pose: Pose, cfg: SimConfig) -> PolarImage:
    """Binary n_range x n_lidar_az image with at most one occupied cell per column"""
    data = np.zeros((cfg.n_range_bins, cfg.n_lidar_az_bins))
    if not cfg.smoke:
        t = lidar_ranges(scene, pose, cfg)
        cols = np.nonzero(t < cfg.max_range)[0]
        rows = np.minimum(np.floor(t[cols] / cfg.max_range * cfg.n_range_bins).astype(int),
                          cfg.n_range_bins - 1)
        data[rows, cols] = 1.0
    return PolarImage(data=data, kind=ImageKind.BINARY, max_range=cfg.max_range, azimuth_grid=AzimuthGrid.ANGLE)


# Radar
class Reflectors(NamedTuple):
    ranges: np.ndarray
    sin_az: np.ndarray
    amplitudes: np.ndarray


def incidence_gain(wall: Wall, sensor: np.ndarray, point: np.ndarray, cfg: SimConfig) -> float:
    """Hard specular cone: full return within the half-angle of the normal, attenuated outside"""
    if not wall.specular:
        return 1.0
    to_sensor = np.asarray(sensor, dtype=np.float64) - np.asarray(point, dtype=np.float64)
    cos_inc = abs(float(np.dot(wall.normal, to_sensor))) / max(float(np.linalg.norm(to_sensor)), _EPS)
    incidence = math.degrees(math.acos(min(1.0, cos_inc)))
    return 1.0 if incidence <= cfg.specular_halfangle + 1e-9 else cfg.specular_attenuation


def _wall_samples(scene: Scene, cfg: SimConfig) -> Tuple[np.ndarray, np.ndarray]:
    points, owners = [], []
    for i, wall in enumerate(scene.walls):
        n = max(1, math.ceil(wall.length / cfg.wall_sample_step))
        u = (np.arange(n) + 0.5) / n
        p0, p1 = np.asarray(wall.p0), np.asarray(wall.p1)
        points.append(p0 + u[:, None] * (p1 - p0))
        owners.append(np.full(n, i))
    if not points:
        return np.zeros((0, 2)), np.zeros(0, dtype=int)
    return np.concatenate(points), np.concatenate(owners)


def _visible(pose: Pose, points: np.ndarray, walls: np.ndarray, own_wall: np.ndarray) -> np.ndarray:
    """Line of sight from the sensor, ignoring the wall a sample lies on"""
    if len(points) == 0 or len(walls) == 0:
        return np.ones(len(points), dtype=bool)
    origin = np.repeat(pose.position[None], len(points), axis=0)
    blocked = segments_cross(origin, points, walls)
    own = own_wall >= 0
    blocked[np.nonzero(own)[0], own_wall[own]] = False
    return ~blocked.any(axis=1)


def radar_reflectors(scene: Scene, pose: Pose, cfg: SimConfig) -> Reflectors:
    """Visible point reflectors (scatterers, wall patches, mirror ghosts) in sensor coordinates"""
    walls = scene.wall_array()
    positions, amplitudes, owners = [], [], []

    scat = scene.scatterer_positions()
    if len(scat):
        positions.append(scat)
        amplitudes.append(np.sqrt([s.rcs for s in scene.scatterers]))
        owners.append(np.full(len(scat), -1))

    samples, sample_owner = _wall_samples(scene, cfg)
    if len(samples):
        gains = np.array([scene.walls[w].reflectivity * incidence_gain(scene.walls[w], pose.position, p, cfg)
                          for p, w in zip(samples, sample_owner)])
        positions.append(samples)
        amplitudes.append(gains)
        owners.append(sample_owner)

    if not positions:
        empty = np.zeros(0)
        return Reflectors(empty, empty, empty)

    pts = np.concatenate(positions)
    amp = np.concatenate(amplitudes)
    own = np.concatenate(owners)
    visible = _visible(pose, pts, walls, own)

    if cfg.ghost_order >= 1 and len(scat):
        ghost_pts, ghost_amp = [], []
        scat_visible = visible[:len(scat)]
        for wall in scene.walls:
            if not wall.specular:
                continue
            n, a = wall.normal, np.asarray(wall.p0)
            sensor_side = np.dot(pose.position - a, n)
            for k in np.nonzero(scat_visible)[0]:
                if np.dot(scat[k] - a, n) * sensor_side <= 0:
                    continue
                ghost = mirror_point(scat[k], wall)
                path = segments_cross(pose.position[None], ghost[None], np.array([[*wall.p0, *wall.p1]]))
                if path[0, 0]:
                    ghost_pts.append(ghost)
                    ghost_amp.append(amp[k] * wall.reflectivity * cfg.ghost_gain)
        if ghost_pts:
            pts = np.concatenate([pts, np.array(ghost_pts)])
            amp = np.concatenate([amp, np.array(ghost_amp)])
            visible = np.concatenate([visible, np.ones(len(ghost_pts), dtype=bool)])

    local = pose.to_sensor(pts)
    rho = np.hypot(local[:, 0], local[:, 1])
    keep = visible & (local[:, 1] > 0) & (rho < cfg.max_range) & (rho > _EPS)
    rho, local, amp = rho[keep], local[keep], amp[keep]
    spread = 1.0 / np.maximum(rho, _MIN_RANGE) ** 2
    return Reflectors(ranges=rho, sin_az=local[:, 0] / rho, amplitudes=amp * spread)


def radar_snapshot(scene: Scene, pose: Pose, cfg: SimConfig, seed: int) -> ArraySnapshot:
    """Superposition of beat tones across the virtual array plus complex Gaussian noise.

    Smoke is deliberately absent from this path: the radar channel does not see it.
    """
    refl = radar_reflectors(scene, pose, cfg)
    rng = np.random.default_rng(seed)
    n_ant, n_fast = cfg.n_antennas, cfg.n_fast_time

    phases = rng.uniform(0.0, 2 * math.pi, size=len(refl.ranges))
    beat = refl.ranges / cfg.max_range * cfg.n_range_bins  # cycles per chirp
    fast = np.exp(2j * math.pi * beat[:, None] * np.arange(n_fast)[None, :] / n_fast)
    steer = np.exp(2j * math.pi * cfg.spacing / cfg.wavelength
                   * np.arange(n_ant)[:, None] * refl.sin_az[None, :])
    samples = (steer * (refl.amplitudes * np.exp(1j * phases))[None, :]) @ fast
    if len(refl.ranges) == 0:
        samples = np.zeros((n_ant, n_fast), dtype=np.complex128)

    noise = rng.standard_normal((n_ant, n_fast)) + 1j * rng.standard_normal((n_ant, n_fast))
    samples = samples + cfg.noise_sigma / math.sqrt(2.0) * noise
    return ArraySnapshot(samples=samples, wavelength=cfg.wavelength, element_spacing=cfg.spacing,
                         noise_sigma=cfg.noise_sigma)
