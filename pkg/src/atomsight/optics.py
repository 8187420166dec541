"""Lattice geometry, point spread functions, camera parameters, and the
deterministic expected-photoelectron map shared by the simulator, the bound
engine, and the solvers."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

PSF_MAGIC = b"PSF0"


@dataclass(frozen=True)
class LatticeGeometry:
    """Regular grid of atom sites on a pixel raster.

    ``origin`` is the (row, col) pixel position of site (0, 0); site
    (r, c) sits at ``origin + spacing * (r, c)`` and maps to the flat
    index ``r * cols + c``.
    """

    rows: int
    cols: int
    spacing: float
    origin: tuple[float, float]
    image_height: int
    image_width: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("lattice needs at least one site")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if self.image_height < 1 or self.image_width < 1:
            raise ValueError("image dimensions must be positive")
        centers = self.site_centers()
        if (centers < -0.5).any():
            raise ValueError("site centers fall outside the image")
        if (centers[:, 0] > self.image_height - 0.5).any() or (
            centers[:, 1] > self.image_width - 0.5
        ).any():
            raise ValueError("site centers fall outside the image")

    @property
    def n_sites(self) -> int:
        return self.rows * self.cols

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.image_height, self.image_width)

    def site_centers(self) -> np.ndarray:
        """(n_sites, 2) array of (row, col) centers, ordered by flat index."""
        r = np.arange(self.rows)
        c = np.arange(self.cols)
        rr, cc = np.meshgrid(r, c, indexing="ij")
        out = np.empty((self.n_sites, 2))
        out[:, 0] = self.origin[0] + self.spacing * rr.ravel()
        out[:, 1] = self.origin[1] + self.spacing * cc.ravel()
        return out

    def site_index(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise ValueError(f"site ({row}, {col}) outside lattice")
        return row * self.cols + col


@dataclass(frozen=True)
class PointSpreadFunction:
    """Normalized 2D kernel: fraction of a site's photoelectrons per pixel.

    The window is odd so the kernel has an unambiguous center pixel; the
    weights are non-negative and sum to 1 within 1e-9.
    """

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("PSF weights must be a square 2D array")
        if w.shape[0] % 2 == 0:
            raise ValueError("PSF window must be odd")
        if (w < 0).any():
            raise ValueError("PSF weights must be non-negative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("PSF weights must sum to 1 within 1e-9")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def window(self) -> int:
        return self.weights.shape[0]

    @property
    def center(self) -> int:
        return self.window // 2

    def truncated(self, window: int) -> "PointSpreadFunction":
        """Central ``window``-sized crop, renormalized to unit mass."""
        if window % 2 == 0 or window < 1:
            raise ValueError("truncation window must be odd and positive")
        if window >= self.window:
            return self
        lo = self.center - window // 2
        hi = self.center + window // 2 + 1
        w = self.weights[lo:hi, lo:hi].copy()
        return PointSpreadFunction(w / w.sum())


def build_gaussian_psf(
    window: int, width: float, offset: tuple[float, float] = (0.0, 0.0)
) -> PointSpreadFunction:
    """Isotropic Gaussian sampled at pixel centers, normalized to unit sum.

    ``offset`` shifts the peak by a sub-pixel (row, col) amount, which is how
    sites with fractional centers get their own kernels.
    """
    if window % 2 == 0 or window < 1:
        raise ValueError("window must be odd and positive")
    if width <= 0:
        raise ValueError("width must be positive")
    c = window // 2
    y = np.arange(window)[:, None] - c - offset[0]
    x = np.arange(window)[None, :] - c - offset[1]
    w = np.exp(-(y * y + x * x) / (2.0 * width * width))
    return PointSpreadFunction(w / w.sum())


_AIRY_FIRST_ZERO = 3.8317059702075125  # first root of J1


def build_airy_psf(
    window: int, first_zero: float, offset: tuple[float, float] = (0.0, 0.0)
) -> PointSpreadFunction:
    """Airy diffraction pattern sampled at pixel centers, normalized to unit
    sum; ``first_zero`` is the radius of the first dark ring in pixels.

    The radius-``first_zero`` disc holds about 84% of the total mass, and the
    1/r^3 ring tails couple neighboring lattice sites, unlike a plain
    Gaussian of comparable core size.
    """
    if window % 2 == 0 or window < 1:
        raise ValueError("window must be odd and positive")
    if first_zero <= 0:
        raise ValueError("first_zero must be positive")
    from scipy.special import j1

    c = window // 2
    y = np.arange(window)[:, None] - c - offset[0]
    x = np.arange(window)[None, :] - c - offset[1]
    r = np.hypot(y, x)
    arg = _AIRY_FIRST_ZERO * r / first_zero
    w = np.ones((window, window))
    nz = arg > 0
    w[nz] = (2.0 * j1(arg[nz]) / arg[nz]) ** 2
    return PointSpreadFunction(w / w.sum())


@dataclass(frozen=True)
class CameraModel:
    """Readout chain parameters.

    gain is in electrons per output count (counts = electrons / gain),
    offset and readout_sigma are in counts, background is expected
    photoelectrons per pixel per exposure.
    """

    gain: float
    offset: float
    readout_sigma: float
    background: float
    max_count: int = 65535

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        if self.readout_sigma < 0:
            raise ValueError("readout_sigma must be non-negative")
        if self.background < 0:
            raise ValueError("background must be non-negative")
        if not (0 <= self.offset < self.max_count):
            raise ValueError("offset must lie in [0, max_count)")
        if not (0 < self.max_count <= 65535):
            raise ValueError("max_count must lie in (0, 65535]")


@dataclass(frozen=True)
class Scene:
    """Lattice plus per-site expected photoelectron counts.

    ``psfs`` is either one shared kernel or a per-site list. ``gamma`` must
    be zero wherever ``occupancy`` is false.
    """

    geometry: LatticeGeometry
    psfs: PointSpreadFunction | tuple[PointSpreadFunction, ...]
    gamma: np.ndarray
    occupancy: np.ndarray
    scene_id: str = field(default="scene", compare=False)

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=float)
        occupancy = np.asarray(self.occupancy, dtype=bool)
        n = self.geometry.n_sites
        if gamma.shape != (n,) or occupancy.shape != (n,):
            raise ValueError("gamma and occupancy must have one entry per site")
        if (gamma < 0).any():
            raise ValueError("gamma must be non-negative")
        if (gamma[~occupancy] != 0).any():
            raise ValueError("gamma must be zero at unoccupied sites")
        if isinstance(self.psfs, (list, tuple)):
            if len(self.psfs) != n:
                raise ValueError("per-site PSF list must have one kernel per site")
            object.__setattr__(self, "psfs", tuple(self.psfs))
        gamma.flags.writeable = False
        occupancy.flags.writeable = False
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "occupancy", occupancy)

    def psf_for_site(self, site: int) -> PointSpreadFunction:
        if isinstance(self.psfs, tuple):
            return self.psfs[site]
        return self.psfs


def site_footprint(geometry: LatticeGeometry, psf: PointSpreadFunction, site: int):
    """Image slices and matching kernel crop for one site's PSF stamp.

    The kernel center lands on the rounded site center; rows/cols falling
    outside the image are cut away (the clipped mass is simply lost).
    Returns ``None`` if the whole stamp misses the image.
    """
    centers = geometry.site_centers()
    cy = int(round(centers[site, 0]))
    cx = int(round(centers[site, 1]))
    half = psf.center
    y0, y1 = cy - half, cy + half + 1
    x0, x1 = cx - half, cx + half + 1
    iy0, iy1 = max(y0, 0), min(y1, geometry.image_height)
    ix0, ix1 = max(x0, 0), min(x1, geometry.image_width)
    if iy0 >= iy1 or ix0 >= ix1:
        return None
    kernel = psf.weights[iy0 - y0 : iy1 - y0, ix0 - x0 : ix1 - x0]
    return (slice(iy0, iy1), slice(ix0, ix1)), kernel


def expected_electron_map(scene: Scene, camera: CameraModel) -> np.ndarray:
    """Expected photoelectrons per pixel: background plus PSF-weighted site sums.

    PSF mass clipped at the image border is discarded without renormalizing,
    matching physical photon loss off the sensor.
    """
    lam = np.full(scene.geometry.image_shape, float(camera.background))
    for i in range(scene.geometry.n_sites):
        g = scene.gamma[i]
        if g == 0.0:
            continue
        fp = site_footprint(scene.geometry, scene.psf_for_site(i), i)
        if fp is None:
            continue
        (sy, sx), kernel = fp
        lam[sy, sx] += g * kernel
    return lam


def gamma_from_exposure(
    occupancy: np.ndarray, rate: float, exposure: float
) -> np.ndarray:
    """Expected photoelectrons per site: rate * exposure where occupied."""
    if rate < 0:
        raise ValueError("rate must be non-negative")
    if exposure < 0:
        raise ValueError("exposure must be non-negative")
    occupancy = np.asarray(occupancy, dtype=bool)
    return np.where(occupancy, rate * exposure, 0.0)


def collected_electron_rate(
    scatter_rate: float, quantum_efficiency: float, numerical_aperture: float
) -> float:
    """Photoelectron rate ceiling for an isotropic emitter behind an NA-limited
    objective: scatter_rate * QE * (1 - sqrt(1 - NA^2)) / 2."""
    if not (0 < numerical_aperture < 1):
        raise ValueError("numerical aperture must lie in (0, 1)")
    if not (0 < quantum_efficiency <= 1):
        raise ValueError("quantum efficiency must lie in (0, 1]")
    solid_fraction = (1.0 - np.sqrt(1.0 - numerical_aperture**2)) / 2.0
    return scatter_rate * quantum_efficiency * solid_fraction


def write_psf(path, psf: PointSpreadFunction) -> None:
    """Binary PSF export: magic, uint32 LE width and height, float64 LE rows."""
    h, w = psf.weights.shape
    with open(path, "wb") as f:
        f.write(PSF_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(psf.weights.astype("<f8").tobytes())


def read_psf(path) -> PointSpreadFunction:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PSF_MAGIC:
            raise ValueError(f"{path}: not a PSF file")
        w, h = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(8 * w * h), dtype="<f8").reshape(h, w)
    return PointSpreadFunction(data.astype(float))
