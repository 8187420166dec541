"""Reconstruction algorithms mapping a camera frame to per-site photoelectron
estimates: disc summation, Wiener and Richardson-Lucy deconvolution with a
disc readout, and a weighted global Gauss-Newton solver.

All estimates are reported in electrons (counts scaled by the preamp gain)
and are never clamped: negative estimates keep the empty-site distribution
unbiased for threshold fitting.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import cg

from .optics import (
    CameraModel,
    LatticeGeometry,
    PointSpreadFunction,
    site_footprint,
)

RL_FLOOR = 1e-6
RL_DIVISION_GUARD = 1e-12


class ConvergenceError(RuntimeError):
    """Inner linear solve failed to converge; message carries diagnostics."""


@dataclass
class EstimateSet:
    """Per-site photoelectron estimates from one detector invocation."""

    estimates: np.ndarray
    detector: str
    params: dict
    wall_seconds: float

    def __post_init__(self):
        self.estimates = np.asarray(self.estimates, dtype=float)
        if not np.isfinite(self.estimates).all():
            raise ValueError("estimates must be finite")


def disc_offsets(radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Integer (dy, dx) offsets with Euclidean distance <= radius."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    r = int(np.floor(radius))
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dy * dy + dx * dx <= radius * radius
    return dy[keep], dx[keep]


def roi_sum(
    frame: np.ndarray,
    geometry: LatticeGeometry,
    radius: float,
    camera: CameraModel,
) -> EstimateSet:
    """Sum offset-subtracted counts in a disc around each site, gain-scaled.

    Disc pixels falling outside the image are dropped from that site's sum.
    """
    start = time.perf_counter()
    pixels = np.asarray(frame, dtype=float)
    dy, dx = disc_offsets(radius)
    centers = np.rint(geometry.site_centers()).astype(int)
    rows = centers[:, 0][:, None] + dy[None, :]
    cols = centers[:, 1][:, None] + dx[None, :]
    inside = (
        (rows >= 0)
        & (rows < geometry.image_height)
        & (cols >= 0)
        & (cols < geometry.image_width)
    )
    values = np.where(
        inside, pixels[rows.clip(0, geometry.image_height - 1),
                       cols.clip(0, geometry.image_width - 1)] - camera.offset, 0.0
    )
    estimates = camera.gain * values.sum(axis=1)
    wall = time.perf_counter() - start
    return EstimateSet(estimates, "roi", {"radius": radius}, wall)


def _psf_to_otf(psf: PointSpreadFunction, shape: tuple[int, int]) -> np.ndarray:
    """Frame-sized transfer function with the kernel center at the origin."""
    if psf.window > min(shape):
        raise ValueError("PSF window larger than the frame")
    kernel = np.zeros(shape)
    kernel[: psf.window, : psf.window] = psf.weights
    kernel = np.roll(kernel, (-psf.center, -psf.center), axis=(0, 1))
    return np.fft.rfft2(kernel)


def wiener_deconvolve(
    frame: np.ndarray, psf: PointSpreadFunction, balance: float
) -> np.ndarray:
    """Frequency-domain regularized inverse with a flat noise-to-signal prior.

    The DC bin is left unregularized so the global offset passes through
    unchanged and can be subtracted before readout.
    """
    if balance < 0:
        raise ValueError("balance must be non-negative")
    pixels = np.asarray(frame, dtype=float)
    otf = _psf_to_otf(psf, pixels.shape)
    prior = np.ones_like(otf, dtype=float)
    prior[0, 0] = 0.0
    spectrum = np.fft.rfft2(pixels)
    restored = np.conj(otf) * spectrum / (np.abs(otf) ** 2 + balance * prior)
    return np.fft.irfft2(restored, s=pixels.shape)


def richardson_lucy(
    frame: np.ndarray,
    psf: PointSpreadFunction,
    iterations: int,
    camera: CameraModel,
) -> np.ndarray:
    """Multiplicative Richardson-Lucy updates on the offset-subtracted frame.

    The input is floored at a small positive value so the updates stay
    defined; divisions are guarded at 1e-12. Boundary handling is periodic.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    data = np.asarray(frame, dtype=float) - camera.offset
    data = np.maximum(data, RL_FLOOR)
    shape = data.shape
    otf = _psf_to_otf(psf, shape)
    otf_conj = np.conj(otf)
    estimate = data.copy()
    for _ in range(iterations):
        blurred = np.fft.irfft2(np.fft.rfft2(estimate) * otf, s=shape)
        blurred = np.where(np.abs(blurred) <= RL_DIVISION_GUARD, RL_DIVISION_GUARD, blurred)
        ratio = data / blurred
        correction = np.fft.irfft2(np.fft.rfft2(ratio) * otf_conj, s=shape)
        estimate = estimate * correction
    return estimate


def deconvolution_readout(
    image: np.ndarray,
    geometry: LatticeGeometry,
    read_radius: float,
    camera: CameraModel,
    baseline: float = 0.0,
) -> EstimateSet:
    """Sum a deconvolved image over small discs at the site centers,
    gain-scaled to electrons. ``baseline`` is subtracted per pixel first
    (the camera offset for Wiener output, 0 for Richardson-Lucy)."""
    start = time.perf_counter()
    pixels = np.asarray(image, dtype=float)
    dy, dx = disc_offsets(read_radius)
    centers = np.rint(geometry.site_centers()).astype(int)
    rows = centers[:, 0][:, None] + dy[None, :]
    cols = centers[:, 1][:, None] + dx[None, :]
    inside = (
        (rows >= 0)
        & (rows < geometry.image_height)
        & (cols >= 0)
        & (cols < geometry.image_width)
    )
    values = np.where(
        inside, pixels[rows.clip(0, geometry.image_height - 1),
                       cols.clip(0, geometry.image_width - 1)] - baseline, 0.0
    )
    estimates = camera.gain * values.sum(axis=1)
    wall = time.perf_counter() - start
    return EstimateSet(estimates, "readout", {"read_radius": read_radius}, wall)


def wiener_detect(
    frame: np.ndarray,
    geometry: LatticeGeometry,
    psf: PointSpreadFunction,
    camera: CameraModel,
    balance: float = 10.0,
    read_radius: float = 1.0,
) -> EstimateSet:
    start = time.perf_counter()
    restored = wiener_deconvolve(frame, psf, balance)
    out = deconvolution_readout(
        restored, geometry, read_radius, camera, baseline=camera.offset
    )
    wall = time.perf_counter() - start
    return EstimateSet(
        out.estimates,
        "wiener",
        {"balance": balance, "read_radius": read_radius},
        wall,
    )


def rl_detect(
    frame: np.ndarray,
    geometry: LatticeGeometry,
    psf: PointSpreadFunction,
    camera: CameraModel,
    iterations: int = 2,
    read_radius: float = 1.0,
) -> EstimateSet:
    start = time.perf_counter()
    restored = richardson_lucy(frame, psf, iterations, camera)
    out = deconvolution_readout(restored, geometry, read_radius, camera)
    wall = time.perf_counter() - start
    return EstimateSet(
        out.estimates,
        "rl",
        {"iterations": iterations, "read_radius": read_radius},
        wall,
    )


class _RawKernel:
    """PSF crop that keeps its absolute mass (no renormalization), so the
    solver's model stays scale-true to data generated with the full kernel."""

    def __init__(self, weights: np.ndarray):
        self.weights = weights

    @property
    def window(self) -> int:
        return self.weights.shape[0]

    @property
    def center(self) -> int:
        return self.window // 2


def _solver_kernel(psf: PointSpreadFunction, window: int | None):
    if window is None or window >= psf.window:
        return psf
    if window % 2 == 0 or window < 1:
        raise ValueError("psf_window must be odd and positive")
    lo = psf.center - window // 2
    hi = psf.center + window // 2 + 1
    return _RawKernel(psf.weights[lo:hi, lo:hi])


@dataclass
class GaussNewtonOptions:
    psf_window: int | None = 41
    tol_electrons: float = 1e-3
    max_iterations: int = 50
    weight_refresh: int = 3
    cg_rtol: float = 1e-8
    cg_maxiter: int | None = None
    tile: int | None = None
    tile_halo: int | None = None
    warm_start: bool = True
    warm_start_radius: float = 5.0


@dataclass
class SolverState:
    """Fitted parameter vector (site amplitudes in electrons, then the global
    offset in counts), iteration count, and the weighted residual norm
    before/after each accepted step."""

    beta: np.ndarray
    iterations: int
    residual_history: list = field(default_factory=list)
    converged: bool = False


class _SiteModel:
    """Linear image model on a pixel window: site stamps plus a flat offset."""

    def __init__(self, pixels, geometry, psf, sites, y0, y1, x0, x1):
        self.pixels = pixels[y0:y1, x0:x1]
        self.shape = self.pixels.shape
        self.sites = sites
        self.stamps = []
        for s in sites:
            fp = site_footprint(geometry, psf, s)
            if fp is None:
                self.stamps.append(None)
                continue
            (sy, sx), kernel = fp
            cy0, cy1 = max(sy.start, y0), min(sy.stop, y1)
            cx0, cx1 = max(sx.start, x0), min(sx.stop, x1)
            if cy0 >= cy1 or cx0 >= cx1:
                self.stamps.append(None)
                continue
            crop = kernel[cy0 - sy.start : cy1 - sy.start, cx0 - sx.start : cx1 - sx.start]
            self.stamps.append(
                (slice(cy0 - y0, cy1 - y0), slice(cx0 - x0, cx1 - x0), crop)
            )

    @property
    def n_params(self) -> int:
        return len(self.sites) + 1

    def render(self, beta: np.ndarray) -> np.ndarray:
        image = np.full(self.shape, beta[-1])
        for amp, stamp in zip(beta[:-1], self.stamps):
            if stamp is None or amp == 0.0:
                continue
            sy, sx, crop = stamp
            image[sy, sx] += amp * crop
        return image

    def normal_matrix(self, weights: np.ndarray) -> np.ndarray:
        n = len(self.sites)
        m = np.zeros((n + 1, n + 1))
        for i, stamp_i in enumerate(self.stamps):
            if stamp_i is None:
                m[i, i] = 1.0  # unconstrained site: keep the system non-singular
                continue
            iy, ix, ki = stamp_i
            wi = weights[iy, ix] * ki
            m[i, -1] = m[-1, i] = wi.sum()
            for j in range(i, n):
                stamp_j = self.stamps[j]
                if stamp_j is None:
                    continue
                jy, jx, kj = stamp_j
                y0, y1 = max(iy.start, jy.start), min(iy.stop, jy.stop)
                x0, x1 = max(ix.start, jx.start), min(ix.stop, jx.stop)
                if y0 >= y1 or x0 >= x1:
                    continue
                sub_i = ki[y0 - iy.start : y1 - iy.start, x0 - ix.start : x1 - ix.start]
                sub_j = kj[y0 - jy.start : y1 - jy.start, x0 - jx.start : x1 - jx.start]
                val = float(
                    np.sum(sub_i * sub_j * weights[y0:y1, x0:x1])
                )
                m[i, j] = m[j, i] = val
        m[-1, -1] = weights.sum()
        return m

    def gradient(self, weights: np.ndarray, residual: np.ndarray) -> np.ndarray:
        wr = weights * residual
        g = np.zeros(self.n_params)
        for i, stamp in enumerate(self.stamps):
            if stamp is None:
                continue
            sy, sx, crop = stamp
            g[i] = float(np.sum(wr[sy, sx] * crop))
        g[-1] = float(wr.sum())
        return g


def _cg_solve(matrix: np.ndarray, rhs: np.ndarray, rtol: float, maxiter=None):
    """Conjugate gradient on the SPD normal equations after symmetric Jacobi
    scaling, which removes the scale gap between the offset column and the
    site-amplitude columns."""
    scale = np.sqrt(np.diag(matrix))
    scale[scale <= 0] = 1.0
    scaled = matrix / scale[:, None] / scale[None, :]
    if maxiter is None:
        maxiter = max(200, 20 * rhs.size)
    solution, info = cg(scaled, rhs / scale, rtol=rtol, atol=0.0, maxiter=maxiter)
    if info != 0:
        raise ConvergenceError(
            f"conjugate gradient failed (info={info}, system size {rhs.size}, "
            f"maxiter={maxiter})"
        )
    return solution / scale


def _solve_window(model: _SiteModel, camera: CameraModel, options, beta0):
    """Damped, iteratively reweighted Gauss-Newton on one pixel window.

    Weights (inverse per-pixel model variance, in counts) refresh every
    iteration since they are cheap; the expensive normal matrix is rebuilt
    only every ``weight_refresh`` iterations and otherwise serves as a stale
    SPD curvature model, which leaves the fixed point unchanged. Steps are
    halved until the current-weight objective does not increase, so the
    weighted residual norm is non-increasing across accepted iterations.
    """
    beta = beta0.copy()
    history = []
    normal = None
    converged = False
    iterations = 0
    for s in range(options.max_iterations):
        iterations = s + 1
        image = model.render(beta)
        residual = image - model.pixels
        variance = camera.readout_sigma**2 + np.maximum(image - beta[-1], 0.0) / camera.gain
        weights = 1.0 / np.maximum(variance, 1e-12)
        if normal is None or s % options.weight_refresh == 0:
            normal = model.normal_matrix(weights)
        grad = model.gradient(weights, residual)
        phi_before = float(np.sum(weights * residual * residual))
        delta = _cg_solve(normal, grad, options.cg_rtol, options.cg_maxiter)
        # The model is linear in beta, so the step's effect on the residual
        # is exactly the rendered delta.
        step_image = model.render(delta)
        alpha = 1.0
        while True:
            trial = residual - alpha * step_image
            phi_after = float(np.sum(weights * trial * trial))
            if phi_after <= phi_before * (1.0 + 1e-12) or alpha <= 1e-7:
                break
            alpha *= 0.5
        beta = beta - alpha * delta
        history.append((phi_before, phi_after))
        full_step = alpha >= 1.0 / 64.0
        if full_step and alpha * np.max(np.abs(delta)) * camera.gain < options.tol_electrons:
            converged = True
            break
    return beta, SolverState(beta, iterations, history, converged)


def _warm_start(pixels, geometry, psf, camera, sites, options):
    beta0 = np.zeros(len(sites) + 1)
    beta0[-1] = camera.offset + camera.background / camera.gain
    if options.warm_start:
        rough = roi_sum(pixels, geometry, options.warm_start_radius, camera)
        beta0[:-1] = rough.estimates[sites] / camera.gain
    return beta0


def gauss_newton_solve(
    frame: np.ndarray,
    geometry: LatticeGeometry,
    psf: PointSpreadFunction,
    camera: CameraModel,
    options: GaussNewtonOptions | None = None,
) -> tuple[EstimateSet, SolverState]:
    """Weighted global least-squares fit of all site amplitudes plus offset.

    Known, fixed PSFs make the image model linear in the parameters; the
    nonlinearity enters only through the variance-based weights. Site
    amplitudes are fitted in counts and reported in electrons; the fitted
    offset absorbs the uniform background.
    """
    if options is None:
        options = GaussNewtonOptions()
    start = time.perf_counter()
    pixels = np.asarray(frame, dtype=float)
    solver_psf = _solver_kernel(psf, options.psf_window)
    n = geometry.n_sites

    if options.tile is None:
        sites = np.arange(n)
        model = _SiteModel(
            pixels, geometry, solver_psf, sites, 0, geometry.image_height, 0, geometry.image_width
        )
        beta0 = _warm_start(pixels, geometry, solver_psf, camera, sites, options)
        beta, state = _solve_window(model, camera, options, beta0)
        electrons = beta[:-1] * camera.gain
        offset_fit = beta[-1]
        state = SolverState(
            np.concatenate([electrons, [offset_fit]]),
            state.iterations,
            state.residual_history,
            state.converged,
        )
    else:
        electrons = np.zeros(n)
        offsets = []
        histories = []
        iterations = 0
        converged = True
        # The halo defaults to a full kernel window so context sites near the
        # tile boundary keep enough of their stamp to be well constrained; a
        # bare half-window leaves them ring-only and their noisy amplitudes
        # leak into core sites.
        halo = options.tile_halo if options.tile_halo is not None else solver_psf.window - 1
        if halo < solver_psf.center:
            raise ValueError("tile_halo must be at least the PSF half-window")
        # Sites one further kernel half-window out still shine into the halo
        # pixels; they join the local model as nuisance context so their mass
        # is not misattributed to core sites or the tile offset.
        site_margin = halo + solver_psf.center
        centers = geometry.site_centers()
        for ty in range(0, geometry.image_height, options.tile):
            for tx in range(0, geometry.image_width, options.tile):
                cy1 = min(ty + options.tile, geometry.image_height)
                cx1 = min(tx + options.tile, geometry.image_width)
                ey0, ey1 = max(0, ty - halo), min(geometry.image_height, cy1 + halo)
                ex0, ex1 = max(0, tx - halo), min(geometry.image_width, cx1 + halo)
                in_ext = (
                    (centers[:, 0] >= ty - site_margin)
                    & (centers[:, 0] < cy1 + site_margin)
                    & (centers[:, 1] >= tx - site_margin)
                    & (centers[:, 1] < cx1 + site_margin)
                )
                sites = np.nonzero(in_ext)[0]
                if sites.size == 0:
                    continue
                model = _SiteModel(
                    pixels, geometry, solver_psf, sites, ey0, ey1, ex0, ex1
                )
                beta0 = _warm_start(pixels, geometry, solver_psf, camera, sites, options)
                beta, state = _solve_window(model, camera, options, beta0)
                in_core = (
                    (centers[sites, 0] >= ty)
                    & (centers[sites, 0] < cy1)
                    & (centers[sites, 1] >= tx)
                    & (centers[sites, 1] < cx1)
                )
                electrons[sites[in_core]] = beta[:-1][in_core] * camera.gain
                offsets.append(beta[-1])
                histories.extend(state.residual_history)
                iterations = max(iterations, state.iterations)
                converged &= state.converged
        offset_fit = float(np.mean(offsets))
        state = SolverState(
            np.concatenate([electrons, [offset_fit]]), iterations, histories, converged
        )

    wall = time.perf_counter() - start
    params = {
        "psf_window": options.psf_window,
        "weight_refresh": options.weight_refresh,
        "tile": options.tile,
    }
    estimates = EstimateSet(electrons, "gns", params, wall)
    estimates.params["offset_fit"] = float(offset_fit)
    return estimates, state
