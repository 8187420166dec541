import numpy as np
import pytest

from atomsight.detectors import (
    ConvergenceError,
    GaussNewtonOptions,
    _cg_solve,
    deconvolution_readout,
    disc_offsets,
    gauss_newton_solve,
    richardson_lucy,
    rl_detect,
    roi_sum,
    wiener_deconvolve,
    wiener_detect,
)
from atomsight.optics import (
    CameraModel,
    LatticeGeometry,
    Scene,
    build_airy_psf,
    build_gaussian_psf,
    expected_electron_map,
)
from atomsight.simulate import sample_frame

CAMERA = CameraModel(gain=0.5, offset=100.0, readout_sigma=0.6, background=0.2)


def grid_geometry(rows=3, cols=3, spacing=20.0, size=101, origin=(30.0, 30.0)):
    return LatticeGeometry(rows=rows, cols=cols, spacing=spacing, origin=origin,
                           image_height=size, image_width=size)


def make_scene(geometry, psf, gamma, camera=CAMERA):
    occupancy = np.asarray(gamma) > 0
    return Scene(geometry=geometry, psfs=psf,
                 gamma=np.asarray(gamma, float), occupancy=occupancy)


class TestRoiSum:
    def test_disc_point_count_radius5(self):
        # Independent enumeration of integer points with distance <= 5.
        count = sum(
            1
            for dy in range(-5, 6)
            for dx in range(-5, 6)
            if dy * dy + dx * dx <= 25
        )
        assert count == 81
        dy, dx = disc_offsets(5.0)
        assert dy.size == count

    def test_uniform_frame_value(self):
        geo = grid_geometry()
        v = 7.0
        frame = np.full(geo.image_shape, CAMERA.offset + v)
        est = roi_sum(frame, geo, 5.0, CAMERA)
        assert np.allclose(est.estimates, CAMERA.gain * v * 81)

    def test_offset_only_frame_gives_zero(self):
        geo = grid_geometry()
        frame = np.full(geo.image_shape, CAMERA.offset)
        est = roi_sum(frame, geo, 5.0, CAMERA)
        assert np.allclose(est.estimates, 0.0)

    def test_border_disc_clipped(self):
        geo = LatticeGeometry(rows=1, cols=1, spacing=5.0, origin=(2.0, 2.0),
                              image_height=21, image_width=21)
        frame = np.full((21, 21), CAMERA.offset + 1.0)
        est = roi_sum(frame, geo, 5.0, CAMERA)
        expected = sum(
            1
            for dy in range(-5, 6)
            for dx in range(-5, 6)
            if dy * dy + dx * dx <= 25 and 0 <= 2 + dy < 21 and 0 <= 2 + dx < 21
        )
        assert np.allclose(est.estimates, CAMERA.gain * expected)

    def test_radius_choice_changes_variance_materially(self):
        geo = grid_geometry()
        psf = build_airy_psf(41, 5.0)
        scene = make_scene(geo, psf, np.where(np.arange(9) % 2 == 0, 80.0, 0.0))
        r2, r5 = [], []
        for seed in range(40):
            frame = sample_frame(scene, CAMERA, seed).pixels
            r2.append(roi_sum(frame, geo, 2.0, CAMERA).estimates)
            r5.append(roi_sum(frame, geo, 5.0, CAMERA).estimates)
        var2 = np.var(np.array(r2)[:, 1], ddof=1)  # an empty site
        var5 = np.var(np.array(r5)[:, 1], ddof=1)
        assert var5 > 2.0 * var2  # 81 vs 13 pixels of noise


class TestWiener:
    def test_delta_psf_zero_balance_is_identity(self):
        rng = np.random.default_rng(0)
        frame = rng.uniform(90, 110, (64, 64))
        out = wiener_deconvolve(frame, build_gaussian_psf(1, 1.0), 0.0)
        assert np.max(np.abs(out - frame)) <= 1e-9

    def test_dc_preserved(self):
        rng = np.random.default_rng(1)
        frame = rng.uniform(90, 110, (64, 64))
        out = wiener_deconvolve(frame, build_airy_psf(21, 4.0), 10.0)
        assert abs(out.mean() - frame.mean()) <= 1e-6

    def test_translation_equivariance(self):
        rng = np.random.default_rng(2)
        frame = rng.uniform(90, 110, (64, 64))
        psf = build_airy_psf(21, 4.0)
        rolled = np.roll(frame, (5, -3), axis=(0, 1))
        out_then_roll = np.roll(wiener_deconvolve(frame, psf, 10.0), (5, -3), axis=(0, 1))
        roll_then_out = wiener_deconvolve(rolled, psf, 10.0)
        assert np.max(np.abs(out_then_roll - roll_then_out)) <= 1e-9

    def test_negative_balance_rejected(self):
        with pytest.raises(ValueError):
            wiener_deconvolve(np.zeros((8, 8)), build_gaussian_psf(1, 1.0), -1.0)


class TestRichardsonLucy:
    def test_delta_psf_fixed_point(self):
        rng = np.random.default_rng(3)
        frame = CAMERA.offset + rng.uniform(0.5, 10.0, (32, 32))
        out1 = richardson_lucy(frame, build_gaussian_psf(1, 1.0), 1, CAMERA)
        out5 = richardson_lucy(frame, build_gaussian_psf(1, 1.0), 5, CAMERA)
        expected = np.maximum(frame - CAMERA.offset, 1e-6)
        assert np.max(np.abs(out1 - expected)) <= 1e-10
        assert np.max(np.abs(out5 - expected)) <= 1e-9

    def test_nonnegative_output(self):
        geo = grid_geometry(size=64, origin=(22.0, 22.0), rows=2, cols=2)
        psf = build_airy_psf(21, 5.0)
        scene = make_scene(geo, psf, [60.0, 0.0, 0.0, 30.0])
        frame = sample_frame(scene, CAMERA, 5).pixels
        for iters in (1, 3, 6):
            out = richardson_lucy(frame, psf, iters, CAMERA)
            assert out.min() >= 0.0

    def test_noiseless_single_site_error_shrinks_over_iterations(self):
        geo = LatticeGeometry(rows=1, cols=1, spacing=5.0, origin=(32.0, 32.0),
                              image_height=65, image_width=65)
        psf = build_gaussian_psf(21, 2.5)
        cam = CameraModel(gain=1.0, offset=100.0, readout_sigma=0.6, background=0.0)
        gamma = 200.0
        scene = make_scene(geo, psf, [gamma], cam)
        noiseless = cam.offset + expected_electron_map(scene, cam) / cam.gain
        errors = []
        for iters in range(1, 11):
            restored = richardson_lucy(noiseless, psf, iters, cam)
            est = deconvolution_readout(restored, geo, 1.0, cam).estimates[0]
            errors.append(abs(est - gamma))
        assert all(a > b for a, b in zip(errors, errors[1:]))

    def test_iterations_must_be_positive(self):
        with pytest.raises(ValueError):
            richardson_lucy(np.zeros((8, 8)), build_gaussian_psf(1, 1.0), 0, CAMERA)


class TestDeconvolutionReadout:
    def test_delta_image_radius_zero(self):
        geo = grid_geometry()
        image = np.zeros(geo.image_shape)
        centers = np.rint(geo.site_centers()).astype(int)
        image[centers[4, 0], centers[4, 1]] = 123.0
        est = deconvolution_readout(image, geo, 0.0, CAMERA)
        assert est.estimates[4] == pytest.approx(CAMERA.gain * 123.0)
        assert np.count_nonzero(est.estimates) == 1

    def test_empty_image_gives_zero(self):
        geo = grid_geometry()
        est = deconvolution_readout(np.zeros(geo.image_shape), geo, 2.0, CAMERA)
        assert np.allclose(est.estimates, 0.0)

    def test_baseline_subtraction(self):
        geo = grid_geometry()
        image = np.full(geo.image_shape, 40.0)
        est = deconvolution_readout(image, geo, 1.0, CAMERA, baseline=40.0)
        assert np.allclose(est.estimates, 0.0)

    @pytest.mark.parametrize("radius", [0.0, 1.0, 2.0])
    def test_radius_exposed(self, radius):
        geo = grid_geometry()
        est = deconvolution_readout(np.ones(geo.image_shape), geo, radius, CAMERA)
        assert est.estimates.shape == (9,)


class TestGaussNewton:
    def test_noiseless_exact_recovery(self):
        geo = grid_geometry()
        psf = build_airy_psf(81, 5.0)
        rng = np.random.default_rng(1)
        gamma = np.where(rng.random(9) < 0.6, rng.uniform(40, 200, 9), 0.0)
        cam = CameraModel(gain=0.5, offset=100.0, readout_sigma=0.6, background=0.0)
        scene = make_scene(geo, psf, gamma, cam)
        noiseless = cam.offset + expected_electron_map(scene, cam) / cam.gain
        est, state = gauss_newton_solve(noiseless, geo, psf, cam,
                                        GaussNewtonOptions(psf_window=None))
        scale = max(gamma.max(), 1.0)
        assert np.max(np.abs(est.estimates - gamma)) <= 1e-6 * scale
        assert abs(est.params["offset_fit"] - cam.offset) <= 1e-6 * cam.offset
        assert state.converged

    def test_solver_state_layout(self):
        geo = grid_geometry()
        psf = build_airy_psf(41, 5.0)
        scene = make_scene(geo, psf, np.where(np.arange(9) % 2 == 0, 120.0, 0.0))
        frame = sample_frame(scene, CAMERA, 19).pixels
        est, state = gauss_newton_solve(frame, geo, psf, CAMERA,
                                        GaussNewtonOptions(psf_window=41))
        assert state.beta.shape == (geo.n_sites + 1,)
        assert np.array_equal(state.beta[:-1], est.estimates)
        assert state.beta[-1] == est.params["offset_fit"]

    def test_objective_non_increasing_per_accepted_iteration(self):
        geo = grid_geometry()
        psf = build_airy_psf(41, 5.0)
        scene = make_scene(geo, psf, np.where(np.arange(9) % 2 == 0, 120.0, 0.0))
        frame = sample_frame(scene, CAMERA, 17).pixels
        for cadence in (1, 3):
            _, state = gauss_newton_solve(
                frame, geo, psf, CAMERA,
                GaussNewtonOptions(psf_window=41, weight_refresh=cadence),
            )
            for before, after in state.residual_history:
                assert after <= before * (1.0 + 1e-9)

    def test_weight_refresh_cadence_changes_little(self):
        geo = grid_geometry()
        psf = build_airy_psf(41, 5.0)
        scene = make_scene(geo, psf, np.where(np.arange(9) % 3 == 0, 150.0, 0.0))
        frame = sample_frame(scene, CAMERA, 23).pixels
        est1, _ = gauss_newton_solve(frame, geo, psf, CAMERA,
                                     GaussNewtonOptions(psf_window=41, weight_refresh=1))
        est3, _ = gauss_newton_solve(frame, geo, psf, CAMERA,
                                     GaussNewtonOptions(psf_window=41, weight_refresh=3))
        assert np.max(np.abs(est1.estimates - est3.estimates)) <= 1e-3 * 150.0

    def test_tiled_matches_untiled_on_interior_sites(self):
        geo = LatticeGeometry(rows=5, cols=5, spacing=20.0, origin=(30.0, 30.0),
                              image_height=141, image_width=141)
        psf = build_airy_psf(41, 5.0)
        rng = np.random.default_rng(4)
        gamma = np.where(rng.random(25) < 0.5, 150.0, 0.0)
        scene = make_scene(geo, psf, gamma)
        frame = sample_frame(scene, CAMERA, 31).pixels
        full, _ = gauss_newton_solve(frame, geo, psf, CAMERA,
                                     GaussNewtonOptions(psf_window=41))
        interior = [geo.site_index(r, c) for r in range(1, 4) for c in range(1, 4)]
        for tile in (50, 80):
            tiled, _ = gauss_newton_solve(frame, geo, psf, CAMERA,
                                          GaussNewtonOptions(psf_window=41, tile=tile))
            diff = np.abs(full.estimates[interior] - tiled.estimates[interior])
            assert diff.max() <= 0.005 * 150.0, tile

    def test_single_tile_matches_untiled_exactly(self):
        geo = grid_geometry()
        psf = build_airy_psf(41, 5.0)
        scene = make_scene(geo, psf, np.where(np.arange(9) % 2 == 0, 120.0, 0.0))
        frame = sample_frame(scene, CAMERA, 13).pixels
        full, _ = gauss_newton_solve(frame, geo, psf, CAMERA,
                                     GaussNewtonOptions(psf_window=41))
        one_tile, _ = gauss_newton_solve(frame, geo, psf, CAMERA,
                                         GaussNewtonOptions(psf_window=41, tile=101))
        assert np.array_equal(full.estimates, one_tile.estimates)

    def test_tile_halo_must_cover_half_window(self):
        geo = grid_geometry()
        psf = build_airy_psf(41, 5.0)
        frame = np.full(geo.image_shape, CAMERA.offset)
        with pytest.raises(ValueError):
            gauss_newton_solve(frame, geo, psf, CAMERA,
                               GaussNewtonOptions(psf_window=41, tile=50, tile_halo=5))

    def test_negative_estimates_not_clamped(self):
        geo = grid_geometry()
        psf = build_airy_psf(41, 5.0)
        scene = make_scene(geo, psf, np.zeros(9))
        negatives = 0
        for seed in range(6):
            frame = sample_frame(scene, CAMERA, seed).pixels
            est, _ = gauss_newton_solve(frame, geo, psf, CAMERA,
                                        GaussNewtonOptions(psf_window=41))
            negatives += int((est.estimates < 0).sum())
        assert negatives > 0

    def test_warm_start_equivalent_result(self):
        geo = grid_geometry()
        psf = build_airy_psf(41, 5.0)
        scene = make_scene(geo, psf, np.where(np.arange(9) % 2 == 0, 100.0, 0.0))
        frame = sample_frame(scene, CAMERA, 41).pixels
        warm, _ = gauss_newton_solve(frame, geo, psf, CAMERA,
                                     GaussNewtonOptions(psf_window=41, warm_start=True))
        cold, _ = gauss_newton_solve(frame, geo, psf, CAMERA,
                                     GaussNewtonOptions(psf_window=41, warm_start=False))
        assert np.max(np.abs(warm.estimates - cold.estimates)) <= 0.01 * 100.0

    def test_cg_failure_raises_with_diagnostics(self):
        geo = grid_geometry()
        psf = build_airy_psf(41, 5.0)
        scene = make_scene(geo, psf, np.where(np.arange(9) % 2 == 0, 100.0, 0.0))
        frame = sample_frame(scene, CAMERA, 7).pixels
        with pytest.raises(ConvergenceError, match="conjugate gradient"):
            gauss_newton_solve(frame, geo, psf, CAMERA,
                               GaussNewtonOptions(psf_window=41, cg_maxiter=1))


def test_cg_error_decreases_in_energy_norm():
    # Conjugate gradient on an SPD system: the error's energy norm is
    # monotonically non-increasing across iterations.
    rng = np.random.default_rng(11)
    m = rng.normal(size=(30, 30))
    a = m @ m.T + 30 * np.eye(30)
    x_true = rng.normal(size=30)
    b = a @ x_true
    iterates = []
    from scipy.sparse.linalg import cg

    cg(a, b, rtol=1e-12, atol=0.0, callback=lambda xk: iterates.append(xk.copy()))
    norms = [float((x - x_true) @ a @ (x - x_true)) for x in iterates]
    assert all(n1 <= n0 * (1 + 1e-9) for n0, n1 in zip(norms, norms[1:]))
    solution = _cg_solve(a, b, rtol=1e-10)
    assert np.allclose(solution, x_true, atol=1e-6)


class TestEmptyFrameUnbiasedness:
    def test_linear_detectors_centered_on_zero(self):
        # Empty scene with zero background: offset removal leaves estimates
        # with zero mean for the linear detectors.
        geo = grid_geometry(size=101, origin=(30.0, 30.0))
        psf = build_airy_psf(41, 5.0)
        cam = CameraModel(gain=0.5, offset=100.0, readout_sigma=0.6, background=0.0)
        collected = {"roi": [], "wiener": [], "gns": []}
        for seed in range(30):
            scene = make_scene(geo, psf, np.zeros(9), cam)
            frame = sample_frame(scene, cam, seed).pixels
            collected["roi"].append(roi_sum(frame, geo, 5.0, cam).estimates)
            collected["wiener"].append(
                wiener_detect(frame, geo, psf, cam, 10.0, 1.0).estimates
            )
            est, _ = gauss_newton_solve(frame, geo, psf, cam,
                                        GaussNewtonOptions(psf_window=41))
            collected["gns"].append(est.estimates)
        for name, values in collected.items():
            values = np.concatenate(values)
            se = values.std(ddof=1) / np.sqrt(values.size)
            assert abs(values.mean()) <= 3.0 * se, name

    def test_rl_zero_on_noiseless_empty_frame(self):
        geo = grid_geometry(size=64, origin=(22.0, 22.0), rows=2, cols=2)
        psf = build_airy_psf(21, 5.0)
        cam = CameraModel(gain=0.5, offset=100.0, readout_sigma=0.6, background=0.0)
        frame = np.full(geo.image_shape, cam.offset)
        est = rl_detect(frame, geo, psf, cam, iterations=3, read_radius=1.0)
        assert np.max(np.abs(est.estimates)) <= 1e-3
