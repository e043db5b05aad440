"""
Tests for scenes, trajectories, lidar scans and radar snapshots
"""

import math

import numpy as np
import pytest

from dsp import angle_grid_angles, radar_heatmap
from errors import SimulationError
from schemas import EnvironmentKind, SimConfig
from sim import (Bounds, Pose, Scatterer, Scene, Wall, frame_seed, gen_scene, gen_trajectory, incidence_gain,
                 lidar_scan, radar_reflectors, radar_snapshot)


def _open_scene(walls=(), scatterers=()):
    return Scene(walls=list(walls), scatterers=list(scatterers),
                 bounds=Bounds(x_min=-4.0, y_min=-1.0, x_max=4.0, y_max=9.5))


FACING_PLUS_Y = Pose(x=0.0, y=0.0, heading=math.pi / 2)


def test_gen_scene_is_deterministic():
    assert gen_scene(0, EnvironmentKind.SAME) == gen_scene(0, EnvironmentKind.SAME)


def test_same_family_varies_with_seed():
    a, b = gen_scene(0, EnvironmentKind.SAME), gen_scene(1, EnvironmentKind.SAME)
    assert a.family == b.family == "office"
    assert a != b


def test_different_kind_has_no_cubicles():
    scene = gen_scene(0, EnvironmentKind.DIFFERENT)
    assert scene.family == "lobby"
    assert scene.n_cubicles == 0


@pytest.mark.parametrize("kind", list(EnvironmentKind))
def test_scenes_fit_inside_radar_range(kind):
    for seed in range(20):
        assert gen_scene(seed, kind).bounds.diagonal < 10.0


def test_heading_is_normalized():
    assert Pose(x=0, y=0, heading=-math.pi).heading == pytest.approx(math.pi)
    assert Pose(x=0, y=0, heading=0.0).heading == 0.0
    assert -math.pi < Pose(x=0, y=0, heading=7.0).heading <= math.pi


def test_single_static_pose():
    scene = gen_scene(3, EnvironmentKind.SAME)
    poses = gen_trajectory(scene, 1, 0.0, seed=5)
    assert len(poses) == 1


def test_trajectory_steps_are_bounded_and_replayable():
    scene = gen_scene(3, EnvironmentKind.SAME)
    poses = gen_trajectory(scene, 100, 0.05, seed=5)
    steps = [math.dist((a.x, a.y), (b.x, b.y)) for a, b in zip(poses, poses[1:])]
    assert max(steps) <= 0.05 + 1e-12
    assert all(scene.bounds.contains(p.x, p.y) for p in poses)
    assert poses == gen_trajectory(scene, 100, 0.05, seed=5)


def test_trajectory_without_free_space_fails():
    cramped = Scene(bounds=Bounds(x_min=0.0, y_min=0.0, x_max=0.5, y_max=0.5))
    with pytest.raises(SimulationError):
        gen_trajectory(cramped, 5, 0.1, seed=0, max_retries=20)


def test_empty_scene_gives_empty_lidar():
    assert lidar_scan(_open_scene(), FACING_PLUS_Y, SimConfig()).count_nonzero() == 0


def test_lidar_wall_matches_ray_intersections():
    cfg = SimConfig()
    wall = Wall(p0=(-2.0, 5.0), p1=(2.0, 5.0))
    img = lidar_scan(_open_scene([wall]), FACING_PLUS_Y, cfg)

    theta = angle_grid_angles(cfg.n_lidar_az_bins)
    expected_cols = np.nonzero(5.0 * np.abs(np.tan(theta)) < 2.0)[0]
    rows, cols = np.nonzero(img.data)
    assert np.array_equal(np.sort(cols), expected_cols)

    t = 5.0 / np.cos(theta[cols])
    centers = (rows + 0.5) * cfg.range_bin_width
    assert np.all(np.abs(centers - t) <= cfg.range_bin_width / 2 + 1e-9)
    assert img.data[128, cfg.n_lidar_az_bins // 2] == 1


def _first_hits(scene, pose, cfg):
    """Sensor-frame first hits per lidar column, solved segment by segment"""
    theta = angle_grid_angles(cfg.n_lidar_az_bins)
    d = np.stack([np.sin(theta), np.cos(theta)], axis=1)
    best = np.full(len(theta), np.inf)
    for wall in scene.walls:
        a, b = pose.to_sensor(np.array([wall.p0, wall.p1]))
        cross_a = d[:, 0] * a[1] - d[:, 1] * a[0]
        cross_ab = d[:, 0] * (a[1] - b[1]) - d[:, 1] * (a[0] - b[0])
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cross_a / cross_ab
        p = a[None, :] + u[:, None] * (b - a)[None, :]
        t = np.sum(p * d, axis=1)
        ok = (np.abs(cross_ab) > 1e-12) & (u >= 0) & (u <= 1) & (t > 0)
        best = np.where(ok & (t < best), t, best)
    for scatterer in scene.scatterers:
        c = pose.to_sensor(np.array([scatterer.pos]))[0]
        along = d @ c
        disc = along ** 2 - (c @ c - cfg.scatterer_radius ** 2)
        with np.errstate(invalid="ignore"):
            t = along - np.sqrt(disc)
        ok = (disc >= 0) & (t > 0) & (c @ c > cfg.scatterer_radius ** 2)
        best = np.where(ok & (t < best), t, best)
    return best


def test_lidar_agrees_with_analytic_first_hits():
    cfg = SimConfig()
    kinds = list(EnvironmentKind)
    for seed in range(100):
        scene = gen_scene(seed, kinds[seed % 3])
        pose = gen_trajectory(scene, 1, 0.0, seed=seed)[0]
        img = lidar_scan(scene, pose, cfg)
        expected = _first_hits(scene, pose, cfg)

        rows, cols = np.nonzero(img.data)
        centers = (rows + 0.5) * cfg.range_bin_width
        assert np.all(np.abs(centers - expected[cols]) <= cfg.range_bin_width / 2 + 1e-9), seed
        empty = np.setdiff1d(np.arange(cfg.n_lidar_az_bins), cols)
        assert np.all(expected[empty] >= cfg.max_range), seed


def test_lidar_has_at_most_one_hit_per_column():
    scene = gen_scene(2, EnvironmentKind.SAME)
    pose = gen_trajectory(scene, 1, 0.0, seed=2)[0]
    img = lidar_scan(scene, pose, SimConfig())
    assert img.data.sum(axis=0).max() <= 1


def test_smoke_blanks_lidar():
    scene = gen_scene(2, EnvironmentKind.SAME)
    pose = gen_trajectory(scene, 1, 0.0, seed=2)[0]
    assert lidar_scan(scene, pose, SimConfig(smoke=True)).count_nonzero() == 0


def test_smoke_leaves_radar_untouched():
    scene = gen_scene(2, EnvironmentKind.SAME)
    pose = gen_trajectory(scene, 1, 0.0, seed=2)[0]
    clear = radar_snapshot(scene, pose, SimConfig(smoke=False), seed=9)
    smoky = radar_snapshot(scene, pose, SimConfig(smoke=True), seed=9)
    assert np.array_equal(clear.samples, smoky.samples)


def test_boresight_scatterer_peaks_at_expected_bins():
    cfg = SimConfig(noise_sigma=0.0)
    scene = _open_scene(scatterers=[Scatterer(pos=(0.0, 5.0))])
    heatmap = radar_heatmap(radar_snapshot(scene, FACING_PLUS_Y, cfg, seed=0), cfg)
    assert np.unravel_index(np.argmax(heatmap.data), heatmap.data.shape) == (128, 32)


def test_azimuth_cut_is_array_dirichlet_kernel():
    cfg = SimConfig(noise_sigma=0.0)
    scene = _open_scene(scatterers=[Scatterer(pos=(0.0, 5.0))])
    heatmap = radar_heatmap(radar_snapshot(scene, FACING_PLUS_Y, cfg, seed=0), cfg)
    cut = heatmap.data[128]

    n_az, k = cfg.n_radar_az_bins, np.arange(cfg.n_antennas)
    shift = np.arange(n_az) - n_az // 2
    kernel = np.abs(np.exp(-2j * np.pi * np.outer(shift, k) / n_az).sum(axis=1))
    error = np.max(np.abs(cut / cut.max() - kernel / kernel.max()))
    assert error < 1e-6


def test_specular_wall_outside_cone_is_attenuated():
    cfg = SimConfig()
    wall = Wall(p0=(-1.0, 5.0), p1=(1.0, 5.0), specular=True)
    point = np.array([0.0, 5.0])
    normal = incidence_gain(wall, np.array([0.0, 3.0]), point, cfg)
    oblique = point + 2.0 * np.array([math.sin(math.radians(60)), -math.cos(math.radians(60))])
    assert incidence_gain(wall, oblique, point, cfg) == pytest.approx(0.05 * normal)


def test_specular_wall_adds_mirror_ghost():
    mirror = Wall(p0=(-3.0, 6.0), p1=(3.0, 6.0), specular=True)
    scene = _open_scene([mirror], [Scatterer(pos=(0.0, 3.0))])
    plain = radar_reflectors(scene, FACING_PLUS_Y, SimConfig(ghost_order=0))
    ghosted = radar_reflectors(scene, FACING_PLUS_Y, SimConfig(ghost_order=1))
    assert len(ghosted.ranges) == len(plain.ranges) + 1
    assert np.any(np.isclose(ghosted.ranges, 9.0))
    assert not np.any(np.isclose(plain.ranges, 9.0))


def test_frame_seeds_are_stable_and_distinct():
    assert frame_seed(4, 0) == frame_seed(4, 0)
    assert frame_seed(4, 0) != frame_seed(4, 1)
