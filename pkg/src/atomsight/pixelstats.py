"""Exact pixel-value probability density for the Poisson-Gaussian readout
model, with per-site partial derivatives.

A pixel with expected photoelectron count lam is modeled as a Poisson draw k,
converted to counts as offset + k / gain, then blurred by Gaussian readout
noise of width sigma. The density over the recorded value q is the Poisson
mixture of readout Gaussians,

    p(q) = 1 / (sigma * sqrt(2 pi)) * sum_k P(k; lam) * exp(-(q - (o + k/g))^2 / (2 sigma^2))

evaluated on a fixed grid of step 0.1 counts. Poisson terms with mass below
``eps`` are dropped, and each readout Gaussian is cut off symmetrically where
it falls below ``eps``. Off-grid values interpolate linearly.

The derivative of p with respect to a site's expected count factors through
the site's PSF value at the pixel: each Poisson summand picks up the factor
(k - lam) / lam, so one shared kernel serves every site.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

GRID_STEP = 0.1


class SingularModelError(ValueError):
    """A pixel with zero expected rate where the model needs lam > 0."""


class DegenerateDensityError(ValueError):
    """sigma = 0 leaves no continuous density; use the discrete Poisson path."""


@dataclass(frozen=True)
class PoissonSupport:
    """Smallest integer interval outside which every Poisson term is < eps."""

    k_min: int
    k_max: int

    def arange(self) -> np.ndarray:
        return np.arange(self.k_min, self.k_max + 1)


def poisson_support(lam: float, eps: float) -> PoissonSupport:
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if not (0 < eps < 1):
        raise ValueError("eps must lie in (0, 1)")
    if lam == 0:
        return PoissonSupport(0, 0)
    # Bracket generously around the mode, then keep the terms >= eps. The
    # bracket width follows the Gaussian tail scale sqrt(2 lam ln(1/eps))
    # plus slack for the sub-exponential upper tail.
    log_eps = np.log(eps)
    spread = np.sqrt(2.0 * lam * (-log_eps)) - log_eps + 60.0
    lo = max(0, int(np.floor(lam - spread)))
    hi = int(np.ceil(lam + spread))
    ks = np.arange(lo, hi + 1)
    logp = ks * np.log(lam) - lam - gammaln(ks + 1.0)
    keep = np.nonzero(logp >= log_eps)[0]
    if keep.size == 0:
        # The mode itself is below eps; keep just the mode.
        mode = int(lam)
        return PoissonSupport(mode, mode)
    return PoissonSupport(int(ks[keep[0]]), int(ks[keep[-1]]))


@dataclass
class PdfAccumulator:
    """Density and shared derivative kernel on the absolute 0.1-count grid.

    Grid point j corresponds to value q = (start_index + j) * 0.1. The
    derivative of the density with respect to site i is the kernel scaled by
    that site's PSF value at the pixel; ``derivative_kernel`` is None when
    lam = 0 (the model is singular there).
    """

    start_index: int
    density: np.ndarray
    derivative_kernel: np.ndarray | None
    lam: float
    step: float = GRID_STEP

    @property
    def q(self) -> np.ndarray:
        return (self.start_index + np.arange(self.density.size)) * self.step

    def site_partial(self, psf_value: float) -> np.ndarray:
        if self.derivative_kernel is None:
            raise SingularModelError(
                "partial derivative undefined at lam = 0; ensure background > 0"
            )
        return psf_value * self.derivative_kernel

    def interpolate(self, q: np.ndarray) -> np.ndarray:
        """Linear interpolation of the density at arbitrary values."""
        return np.interp(q, self.q, self.density, left=0.0, right=0.0)


def _pdf_from_terms(
    ks: np.ndarray, lam: float, camera, eps: float
) -> PdfAccumulator:
    """Accumulate Poisson-weighted readout Gaussians onto the shared q grid.

    ``ks`` may arrive in any order; results are accumulated per grid index so
    the outcome does not depend on the iteration direction.
    """
    sigma = camera.readout_sigma
    if sigma <= 0:
        raise DegenerateDensityError(
            "readout sigma must be positive for the continuous density"
        )
    ks = np.asarray(ks, dtype=float)
    if lam == 0.0:
        log_p = np.where(ks == 0, 0.0, -np.inf)
    else:
        log_p = ks * np.log(lam) - lam - gammaln(ks + 1.0)
    p = np.exp(log_p)

    centers = camera.offset + ks / camera.gain
    halfwidth = sigma * np.sqrt(2.0 * np.log(1.0 / eps))
    j_lo = np.ceil((centers - halfwidth) / GRID_STEP - 1e-9).astype(np.int64)
    j_hi = np.floor((centers + halfwidth) / GRID_STEP + 1e-9).astype(np.int64)
    width = int((j_hi - j_lo).max()) + 1

    j = j_lo[:, None] + np.arange(width)[None, :]
    dq = j * GRID_STEP - centers[:, None]
    gauss = np.exp(-(dq * dq) / (2.0 * sigma * sigma))
    gauss[np.abs(dq) > halfwidth + 1e-12] = 0.0

    start = int(j_lo.min())
    n = int(j.max()) - start + 1
    idx = (j - start).ravel()
    norm = 1.0 / (sigma * np.sqrt(2.0 * np.pi))
    density = norm * np.bincount(idx, weights=(p[:, None] * gauss).ravel(), minlength=n)

    if lam > 0.0:
        u = (ks - lam) / lam
        kernel = norm * np.bincount(
            idx, weights=((p * u)[:, None] * gauss).ravel(), minlength=n
        )
    else:
        kernel = None
    return PdfAccumulator(start, density, kernel, lam)


def pdf_for_rate(lam: float, camera, eps: float = 1e-8) -> PdfAccumulator:
    """Density of the recorded value for a pixel with expected count lam."""
    if lam < 0 or not np.isfinite(lam):
        raise ValueError("lam must be finite and non-negative")
    support = poisson_support(lam, eps)
    return _pdf_from_terms(support.arange(), lam, camera, eps)


def _pixel_rate(x, scene, camera) -> tuple[float, np.ndarray]:
    """Expected count at pixel x = (row, col) and the per-site PSF values."""
    row, col = x
    n = scene.geometry.n_sites
    psf_values = np.zeros(n)
    from .optics import site_footprint

    for i in range(n):
        fp = site_footprint(scene.geometry, scene.psf_for_site(i), i)
        if fp is None:
            continue
        (sy, sx), kernel = fp
        if sy.start <= row < sy.stop and sx.start <= col < sx.stop:
            psf_values[i] = kernel[row - sy.start, col - sx.start]
    lam = camera.background + float(psf_values @ scene.gamma)
    return lam, psf_values


def pixel_pdf(x, scene, camera, eps: float = 1e-8) -> PdfAccumulator:
    """Density of pixel x's recorded value under the scene's expected rates."""
    lam, _ = _pixel_rate(x, scene, camera)
    return pdf_for_rate(lam, camera, eps)


def pixel_pdf_partial(x, site: int, scene, camera, eps: float = 1e-8) -> np.ndarray:
    """Derivative of pixel x's density with respect to site's expected count,
    on the same grid as ``pixel_pdf(x, ...)``."""
    lam, psf_values = _pixel_rate(x, scene, camera)
    if psf_values[site] == 0.0:
        acc = pdf_for_rate(lam, camera, eps)
        return np.zeros_like(acc.density)
    if lam == 0.0:
        raise SingularModelError(
            f"pixel {tuple(x)} has zero expected rate; ensure background > 0"
        )
    acc = pdf_for_rate(lam, camera, eps)
    return acc.site_partial(psf_values[site])


def fisher_pixel_weight(lam: float, camera, eps: float = 1e-8) -> float:
    """Integral of (shared derivative kernel)^2 / density over the value grid.

    The pixel's contribution to Fisher entry (i, j) is this weight times
    PSF_i(x) * PSF_j(x).
    """
    if lam <= 0:
        raise SingularModelError("fisher weight undefined at lam = 0")
    acc = pdf_for_rate(lam, camera, eps)
    ratio = np.zeros_like(acc.density)
    mask = acc.density > 0
    ratio[mask] = acc.derivative_kernel[mask] ** 2 / acc.density[mask]
    return float(np.trapezoid(ratio, dx=GRID_STEP))


def dump_density(acc: PdfAccumulator, path) -> None:
    """Two-column text dump (q, density) for debugging."""
    np.savetxt(path, np.column_stack([acc.q, acc.density]), fmt="%.12g")
