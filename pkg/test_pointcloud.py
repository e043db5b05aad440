"""
Tests for thresholding, polar-to-Cartesian conversion and the point-cloud metrics
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dsp import AzimuthGrid, ImageKind, PolarImage
from errors import EmptyCloudError
from pointcloud import (CDF_PERCENTILES, PointCloud2D, brute_nn, cdf_samples, chamfer, mod_hausdorff, nn_accel,
                        polar_to_points, threshold_image)

coordinate = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False, allow_infinity=False)
clouds = st.integers(min_value=1, max_value=30).flatmap(
    lambda n: arrays(np.float64, (n, 2), elements=coordinate))


def _probability(data):
    return PolarImage(data=np.asarray(data, dtype=np.float64), kind=ImageKind.PROBABILITY,
                      azimuth_grid=AzimuthGrid.ANGLE)


def test_threshold_is_inclusive():
    out = threshold_image(_probability([[0.49, 0.5, 0.51]]), 0.5)
    assert out.kind == ImageKind.BINARY
    assert out.data.tolist() == [[0.0, 1.0, 1.0]]


def test_threshold_rejects_tau_outside_unit_interval():
    with pytest.raises(ValueError):
        threshold_image(_probability([[0.5]]), 1.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0.0, 1.0)),
       st.floats(0.01, 0.98), st.floats(0.0, 0.01))
def test_higher_tau_keeps_a_subset(data, tau, delta):
    img = _probability(data)
    low = threshold_image(img, tau).data
    high = threshold_image(img, tau + delta).data
    assert np.all(high <= low)


def test_center_cell_maps_to_boresight_point():
    data = np.zeros((256, 512))
    data[127, 256] = 1
    points = polar_to_points(PolarImage(data=data, kind=ImageKind.BINARY, azimuth_grid=AzimuthGrid.ANGLE)).points
    assert points.shape == (1, 2)
    assert points[0, 0] == pytest.approx(0.0, abs=0.02)
    assert points[0, 1] == pytest.approx(4.98, abs=0.02)


def test_beamspace_center_column_is_exactly_boresight():
    data = np.zeros((256, 64))
    data[127, 32] = 1
    points = polar_to_points(PolarImage(data=data, kind=ImageKind.BINARY)).points
    assert points[0, 0] == 0.0
    assert points[0, 1] == pytest.approx(127.5 * 10 / 256)


def test_edge_column_points_to_the_left():
    data = np.zeros((4, 8))
    data[3, 0] = 1
    points = polar_to_points(PolarImage(data=data, kind=ImageKind.BINARY, azimuth_grid=AzimuthGrid.ANGLE)).points
    rho = 3.5 * 10 / 4
    theta = -math.pi / 2 + 0.5 * math.pi / 8
    assert points[0] == pytest.approx([rho * math.sin(theta), rho * math.cos(theta)])
    assert points[0, 0] < 0


def test_empty_image_gives_empty_cloud():
    assert polar_to_points(PolarImage(data=np.zeros((4, 4)), kind=ImageKind.BINARY)).is_empty


def test_chamfer_worked_examples():
    assert chamfer(PointCloud2D.of([(0, 0)]), PointCloud2D.of([(3, 4)])) == 5.0
    assert chamfer(PointCloud2D.of([(0, 0), (1, 0)]), PointCloud2D.of([(0, 0)])) == pytest.approx(1 / 3)


def test_mod_hausdorff_takes_worse_direction():
    a = PointCloud2D.of([(0, 0), (1, 0), (2, 0)])
    b = PointCloud2D.of([(0, 0), (0, 4)])
    # a -> b medians to 1, b -> a medians to 2
    assert mod_hausdorff(a, b) == 2.0
    assert mod_hausdorff(PointCloud2D.of([(0, 0), (2, 0), (4, 0)]), PointCloud2D.of([(0, 0)])) == 2.0


def test_metrics_reject_empty_clouds():
    empty = PointCloud2D.of(np.zeros((0, 2)))
    full = PointCloud2D.of([(1, 1)])
    with pytest.raises(EmptyCloudError):
        chamfer(empty, full)
    with pytest.raises(EmptyCloudError):
        mod_hausdorff(full, empty)


def test_point_cloud_rejects_nan():
    with pytest.raises(ValueError):
        PointCloud2D.of([(np.nan, 0.0)])


@settings(max_examples=50, deadline=None)
@given(clouds)
def test_identical_clouds_are_at_distance_zero(points):
    cloud = PointCloud2D.of(points)
    assert chamfer(cloud, cloud) == 0.0
    assert mod_hausdorff(cloud, cloud) == 0.0


@settings(max_examples=50, deadline=None)
@given(clouds, clouds)
def test_metrics_are_symmetric(a, b):
    a, b = PointCloud2D.of(a), PointCloud2D.of(b)
    assert chamfer(a, b) == pytest.approx(chamfer(b, a), abs=1e-12)
    assert mod_hausdorff(a, b) == mod_hausdorff(b, a)


@settings(max_examples=50, deadline=None)
@given(clouds, clouds, coordinate, coordinate)
def test_metrics_are_translation_invariant(a, b, dx, dy):
    shift = np.array([dx, dy])
    base = chamfer(PointCloud2D.of(a), PointCloud2D.of(b))
    moved = chamfer(PointCloud2D.of(a + shift), PointCloud2D.of(b + shift))
    assert moved == pytest.approx(base, abs=1e-9)
    base = mod_hausdorff(PointCloud2D.of(a), PointCloud2D.of(b))
    moved = mod_hausdorff(PointCloud2D.of(a + shift), PointCloud2D.of(b + shift))
    assert moved == pytest.approx(base, abs=1e-9)


def test_accelerated_search_matches_brute_force(rng):
    for _ in range(100):
        a = PointCloud2D.of(rng.uniform(-10, 10, size=(500, 2)))
        b = PointCloud2D.of(rng.uniform(-10, 10, size=(int(rng.integers(1, 500)), 2)))
        assert np.max(np.abs(nn_accel(a, b) - brute_nn(a, b))) < 1e-12


def test_accelerated_search_handles_duplicate_points():
    a = PointCloud2D.of(np.ones((50, 2)))
    b = PointCloud2D.of(np.ones((7, 2)))
    assert np.array_equal(nn_accel(a, b), np.zeros(50))
    assert np.array_equal(brute_nn(a, b), np.zeros(50))


def test_cdf_samples_are_nondecreasing(rng):
    samples = cdf_samples(rng.exponential(size=200))
    assert list(samples) == list(CDF_PERCENTILES)
    values = list(samples.values())
    assert all(x <= y for x, y in zip(values, values[1:]))
    assert cdf_samples([]) == {}
