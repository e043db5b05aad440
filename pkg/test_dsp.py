"""
Tests for the FFT chain, normalization, low thresholding and CA-CFAR
"""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from dsp import (AzimuthGrid, ImageKind, PolarImage, azimuth_fft, beamspace_angles, ca_cfar, calibrate_keep_fraction,
                 frame_keep_fraction, log_normalize, low_threshold, radar_heatmap, radar_input_image, range_fft)
from errors import ShapeError
from schemas import CfarConfig, SimConfig
from sim import ArraySnapshot, Pose, gen_scene, gen_trajectory, radar_snapshot


def _magnitude(data):
    return PolarImage(data=np.asarray(data, dtype=np.float64), kind=ImageKind.MAGNITUDE)


def _noise_image(rng, shape=(64, 16)):
    noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)
    return noise


def test_beamspace_grid_convention():
    angles = beamspace_angles(64)
    assert angles[0] == pytest.approx(-math.pi / 2)
    assert angles[32] == 0.0
    assert np.all(np.diff(angles) > 0)


def test_polar_image_rejects_bad_values():
    with pytest.raises(ValidationError):
        PolarImage(data=np.array([[0.0, 0.5]]), kind=ImageKind.BINARY)
    with pytest.raises(ValidationError):
        PolarImage(data=np.array([[np.nan]]), kind=ImageKind.MAGNITUDE)
    with pytest.raises(ValidationError):
        PolarImage(data=np.zeros(4), kind=ImageKind.MAGNITUDE)


def test_range_fft_rejects_too_many_bins():
    snap = ArraySnapshot(samples=np.zeros((8, 64), dtype=complex), wavelength=3.9e-3, element_spacing=1.95e-3,
                         noise_sigma=0.0)
    with pytest.raises(ShapeError):
        range_fft(snap, 33)


def _snapshot(samples):
    return ArraySnapshot(samples=samples, wavelength=3.9e-3, element_spacing=1.95e-3, noise_sigma=0.0)


def _tone(bin_, n_fast=128, n_antennas=8):
    n = np.arange(n_fast)
    phases = np.exp(1j * 0.7 * np.arange(n_antennas))[:, None]
    return phases * np.exp(2j * math.pi * bin_ * n / n_fast)[None, :]


def test_range_fft_tone_peaks_at_its_bin():
    out = range_fft(_snapshot(_tone(5)), 64)
    assert out.shape == (8, 64)
    assert np.all(np.argmax(np.abs(out), axis=1) == 5)


def test_range_fft_two_tones_have_equal_peaks():
    out = np.abs(range_fft(_snapshot(_tone(5) + _tone(50)), 64))
    assert out[:, 5] == pytest.approx(out[:, 50], rel=0.01)
    assert np.all(out[:, 5] > 10 * out[:, 27])


def test_range_fft_of_silence_is_zero():
    assert np.all(range_fft(_snapshot(np.zeros((8, 64), dtype=complex)), 32) == 0)


def test_range_fft_energy_bound(rng):
    samples = rng.standard_normal((8, 128)) + 1j * rng.standard_normal((8, 128))
    out = range_fft(_snapshot(samples), 64)
    assert np.sum(np.abs(out) ** 2) <= 128 * np.sum(np.abs(samples) ** 2)


def test_log_normalize_scales_to_unit_range_in_255ths(rng):
    img = log_normalize(_magnitude(rng.random((8, 8)) * 100))
    assert img.kind == ImageKind.NORMALIZED
    assert img.data.min() == 0.0 and img.data.max() == 1.0
    assert np.allclose(img.data * 255, np.round(img.data * 255))


def test_log_normalize_constant_image_is_zero():
    assert log_normalize(_magnitude(np.full((4, 4), 3.0))).count_nonzero() == 0


def test_log_normalize_needs_magnitude():
    binary = PolarImage(data=np.zeros((2, 2)), kind=ImageKind.BINARY)
    with pytest.raises(ValueError):
        log_normalize(binary)


def test_low_threshold_keeps_strongest_fraction(rng):
    values = rng.permutation(np.arange(1, 101)) / 100.0
    img = PolarImage(data=values.reshape(10, 10), kind=ImageKind.NORMALIZED)
    kept = low_threshold(img, 0.1)
    assert kept.count_nonzero() == 10
    assert np.sort(kept.data[kept.data > 0]).tolist() == pytest.approx([v / 100 for v in range(91, 101)])


def test_low_threshold_full_keep_is_identity(rng):
    img = PolarImage(data=rng.random((6, 6)), kind=ImageKind.NORMALIZED)
    assert np.array_equal(low_threshold(img, 1.0).data, img.data)


def test_low_threshold_ties_at_cut_survive():
    img = PolarImage(data=np.array([[0.5, 0.5, 0.5, 0.2]]), kind=ImageKind.NORMALIZED)
    assert low_threshold(img, 0.25).count_nonzero() == 3


def test_cfar_detections_never_increase_with_threshold(rng):
    cfar = CfarConfig(guard_cells=2, train_cells=5)
    for _ in range(50):
        img = _magnitude(np.abs(_noise_image(rng)) * rng.uniform(0.5, 3.0, size=(64, 16)))
        counts = [ca_cfar(img, cfar.model_copy(update={"threshold_db": t})).count_nonzero()
                  for t in range(1, 9)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_cfar_finds_targets_above_threshold(rng):
    cfar = CfarConfig(guard_cells=2, train_cells=5, threshold_db=8.0)
    amplitude = math.sqrt(cfar.factor * 10 ** (6 / 10))
    hits = 0
    for _ in range(100):
        data = _noise_image(rng)
        data[32, 8] += amplitude
        hits += ca_cfar(_magnitude(np.abs(data)), cfar).data[32, 8] == 1
    assert hits >= 95


def test_cfar_window_larger_than_image():
    with pytest.raises(ShapeError):
        ca_cfar(_magnitude(np.ones((8, 8))), CfarConfig(guard_cells=2, train_cells=8))


def test_radar_input_image_pipeline():
    cfg = SimConfig(n_range_bins=64, n_radar_az_bins=16, n_lidar_az_bins=128)
    scene = gen_scene(1, "same")
    pose = gen_trajectory(scene, 1, 0.0, seed=1)[0]
    snap = radar_snapshot(scene, pose, cfg, seed=3)
    full = log_normalize(radar_heatmap(snap, cfg))
    img = radar_input_image(snap, cfg)
    assert img.data.shape == (64, 16)
    assert img.kind == ImageKind.NORMALIZED
    assert img.count_nonzero() <= full.count_nonzero()
    assert img.data.max() == 1.0


def _office_frames(cfg, n_frames=6):
    scene = gen_scene(1, "same")
    poses = gen_trajectory(scene, n_frames, 0.3, seed=1)
    return [radar_snapshot(scene, p, cfg, seed=i) for i, p in enumerate(poses)]


@pytest.mark.parametrize("cfg", [
    SimConfig(n_range_bins=64, n_radar_az_bins=16, n_lidar_az_bins=128),
    SimConfig(),
], ids=["toy", "full"])
def test_default_low_threshold_keeps_about_15x_cfar(cfg):
    ratios = []
    for snap in _office_frames(cfg):
        detections = ca_cfar(radar_heatmap(snap, cfg), cfg.keep_cfar).count_nonzero()
        if detections:
            ratios.append(radar_input_image(snap, cfg).count_nonzero() / detections)
    assert ratios
    assert all(10 <= r <= 25 for r in ratios)


def test_explicit_keep_fraction_is_used():
    cfg = SimConfig(n_range_bins=64, n_radar_az_bins=16, n_lidar_az_bins=128, keep_fraction=0.05)
    snap = _office_frames(cfg, 1)[0]
    full = log_normalize(radar_heatmap(snap, cfg))
    assert np.array_equal(radar_input_image(snap, cfg).data, low_threshold(full, 0.05).data)


def test_calibrated_keep_fraction_is_median_of_frames():
    cfg = SimConfig(n_range_bins=64, n_radar_az_bins=16, n_lidar_az_bins=128)
    heatmaps = [radar_heatmap(s, cfg) for s in _office_frames(cfg, 3)]
    fractions = [frame_keep_fraction(h, cfg.keep_cfar) for h in heatmaps]
    keep = calibrate_keep_fraction(heatmaps, cfg.keep_cfar)
    assert 0 < keep <= 1
    if None not in fractions:
        assert keep == pytest.approx(float(np.median(fractions)))


def test_calibration_without_detections_keeps_everything():
    assert calibrate_keep_fraction([_magnitude(np.ones((16, 16)))], CfarConfig(guard_cells=1, train_cells=2)) == 1.0


def test_calibration_window_must_fit_the_radar_image():
    with pytest.raises(ValidationError):
        SimConfig(n_range_bins=16, n_radar_az_bins=8, n_lidar_az_bins=32, n_fast_time=64)
    SimConfig(n_range_bins=16, n_radar_az_bins=8, n_lidar_az_bins=32, n_fast_time=64, keep_fraction=0.1)


def test_azimuth_fft_peaks_at_source_angle():
    n_az = 16
    for sin_theta in (0.0, 0.5, -0.25):
        profiles = np.exp(1j * math.pi * np.arange(8) * sin_theta)[:, None] * np.ones((1, 4))
        img = azimuth_fft(profiles, n_az)
        assert img.data.shape == (4, n_az)
        assert img.azimuth_grid == AzimuthGrid.BEAMSPACE
        peak = int(np.argmax(img.data[0]))
        assert math.sin(beamspace_angles(n_az)[peak]) == pytest.approx(sin_theta)


def test_azimuth_fft_rejects_bad_bin_counts():
    profiles = np.ones((8, 4), dtype=complex)
    with pytest.raises(ShapeError):
        azimuth_fft(profiles, 4)
    with pytest.raises(ShapeError):
        azimuth_fft(profiles, 24)
