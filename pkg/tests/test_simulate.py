import numpy as np
import pytest

from atomsight.optics import CameraModel, LatticeGeometry, Scene, build_gaussian_psf
from atomsight.simulate import (
    DatasetIOError,
    generate_dataset,
    load_dataset,
    sample_frame,
    sample_occupancy,
    save_dataset,
)


def uniform_scene(background, height=100, width=1000):
    # A background-only scene gives every pixel the same expected rate.
    geo = LatticeGeometry(rows=1, cols=1, spacing=1.0,
                          origin=(height // 2, width // 2),
                          image_height=height, image_width=width)
    scene = Scene(geometry=geo, psfs=build_gaussian_psf(1, 1.0),
                  gamma=np.array([0.0]), occupancy=np.array([False]))
    return scene


class TestSampleFrame:
    def test_no_signal_no_noise_gives_rounded_offset(self):
        scene = uniform_scene(0.0, 10, 10)
        cam = CameraModel(gain=1.0, offset=100.4, readout_sigma=0.0, background=0.0)
        frame = sample_frame(scene, cam, seed=3)
        assert np.all(frame.pixels == 100)

    def test_moments_match_analytic_model(self):
        # lam=50, g=2, o=100, sigma=1: mean o + lam/g = 125,
        # variance lam/g^2 + sigma^2 = 13.5 (+1/12 from quantization).
        scene = uniform_scene(50.0)
        cam = CameraModel(gain=2.0, offset=100.0, readout_sigma=1.0, background=50.0)
        values = sample_frame(scene, cam, seed=42).pixels.astype(float)
        assert values.size == 100000
        assert abs(values.mean() - 125.0) <= 0.1
        assert abs(values.var(ddof=1) - 13.5) <= 0.5

    def test_deterministic_per_seed(self):
        scene = uniform_scene(5.0, 32, 32)
        cam = CameraModel(gain=1.0, offset=100.0, readout_sigma=1.0, background=5.0)
        a = sample_frame(scene, cam, seed=9)
        b = sample_frame(scene, cam, seed=9)
        c = sample_frame(scene, cam, seed=10)
        assert np.array_equal(a.pixels, b.pixels)
        assert not np.array_equal(a.pixels, c.pixels)

    def test_pixels_clamped_to_max_count(self):
        scene = uniform_scene(1e6, 16, 16)
        cam = CameraModel(gain=0.5, offset=100.0, readout_sigma=1.0,
                          background=1e6, max_count=4000)
        frame = sample_frame(scene, cam, seed=0)
        assert frame.pixels.max() <= 4000
        assert frame.pixels.dtype == np.uint16


class TestSampleOccupancy:
    def test_degenerate_fills(self):
        assert not sample_occupancy(100, 0.0, 1).any()
        assert sample_occupancy(100, 1.0, 1).all()

    def test_half_fill_concentrates(self):
        occ = sample_occupancy(100000, 0.5, 123)
        assert abs(occ.mean() - 0.5) <= 0.01

    def test_deterministic(self):
        assert np.array_equal(sample_occupancy(50, 0.5, 7), sample_occupancy(50, 0.5, 7))

    def test_invalid_fill(self):
        with pytest.raises(ValueError):
            sample_occupancy(10, 1.5, 0)


def small_dataset(frames=3, exposures=(0.005, 0.01), seed=11):
    geo = LatticeGeometry(rows=2, cols=2, spacing=12.0, origin=(10.0, 10.0),
                          image_height=32, image_width=32)
    cam = CameraModel(gain=0.5, offset=100.0, readout_sigma=0.6, background=0.2)
    return generate_dataset(geo, cam, rate=2881.0, exposures=list(exposures),
                            frames_per_exposure=frames, fill=0.5, seed=seed,
                            psf=build_gaussian_psf(9, 1.5))


class TestGenerateDataset:
    def test_structure(self):
        ds = small_dataset()
        assert len(ds.frames) == 6
        assert len(ds.ground_truth) == 6
        assert all(f.pixels.shape == (32, 32) for f in ds.frames)
        assert [f.meta.exposure_index for f in ds.frames] == [0, 0, 0, 1, 1, 1]

    def test_bitwise_reproducible(self):
        a, b = small_dataset(seed=5), small_dataset(seed=5)
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.pixels, fb.pixels)
            assert np.array_equal(fa.meta.occupancy, fb.meta.occupancy)

    def test_frames_independent_of_sibling_count(self):
        # Per-frame streams are split from (seed, exposure, frame), so frame
        # (e, f) does not depend on how many frames follow it.
        few, many = small_dataset(frames=2, seed=5), small_dataset(frames=4, seed=5)
        for ei in range(2):
            for fi in range(2):
                fa = [f for f in few.frames
                      if (f.meta.exposure_index, f.meta.frame_index) == (ei, fi)][0]
                fb = [f for f in many.frames
                      if (f.meta.exposure_index, f.meta.frame_index) == (ei, fi)][0]
                assert np.array_equal(fa.pixels, fb.pixels)

    def test_zero_frames_is_valid_empty_dataset(self):
        ds = small_dataset(frames=0)
        assert ds.frames == []
        assert ds.exposures == [0.005, 0.01]

    def test_requires_exposures(self):
        with pytest.raises(ValueError):
            small_dataset(exposures=())


def test_empty_scene_frames_have_no_spatial_structure():
    # Chi-square over per-pixel means against the analytic model.
    scene = uniform_scene(0.5, 48, 48)
    cam = CameraModel(gain=1.0, offset=100.0, readout_sigma=1.2, background=0.5)
    n_frames = 80
    stack = np.stack([
        sample_frame(scene, cam, seed=1000 + i).pixels.astype(float)
        for i in range(n_frames)
    ])
    mean = stack.mean(axis=0)
    analytic_mean = 100.0 + 0.5
    analytic_var = 1.2**2 + 0.5 + 1.0 / 12.0  # readout + shot + quantization
    z = (mean - analytic_mean) / np.sqrt(analytic_var / n_frames)
    chi2 = float((z**2).sum())
    m = mean.size
    assert abs(chi2 - m) <= 5.0 * np.sqrt(2.0 * m)


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        ds = small_dataset()
        out = tmp_path / "ds"
        save_dataset(ds, out)
        assert (out / "index.json").exists()
        assert (out / "psf.bin").exists()
        raw = out / "frames" / "e00_f0000.u16"
        assert raw.stat().st_size == 32 * 32 * 2
        loaded = load_dataset(out)
        assert loaded.rate == ds.rate
        assert loaded.exposures == ds.exposures
        assert len(loaded.frames) == len(ds.frames)
        for fa, fb in zip(ds.frames, loaded.frames):
            assert np.array_equal(fa.pixels, fb.pixels)
            assert np.array_equal(fa.meta.occupancy, fb.meta.occupancy)
            assert fa.meta.exposure_s == fb.meta.exposure_s
        assert np.array_equal(loaded.psf.weights, ds.psf.weights)

    def test_ground_truth_not_in_pixel_files(self, tmp_path):
        # Occupancy lives only in the sidecars.
        ds = small_dataset()
        out = tmp_path / "ds"
        save_dataset(ds, out)
        raw = (out / "frames" / "e00_f0000.u16").read_bytes()
        assert len(raw) == 2048
        sidecar = (out / "frames" / "e00_f0000.json").read_text()
        assert "occupancy" in sidecar

    def test_write_failure_carries_path(self, tmp_path):
        blocker = tmp_path / "blocked"
        blocker.write_text("file, not a directory")
        ds = small_dataset()
        with pytest.raises(DatasetIOError, match="blocked"):
            save_dataset(ds, blocker / "sub")

    def test_load_missing_index_carries_path(self, tmp_path):
        with pytest.raises(DatasetIOError, match="index.json"):
            load_dataset(tmp_path)
