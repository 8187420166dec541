"""Estimator variance floors via the Fisher information of pixel values.

Builds the Fisher information matrix for per-site photoelectron counts over
all pixels of a lattice scene, inverts it for the per-site minimum variances,
and turns empty/occupied variance pairs into optimal-threshold error-rate
floors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import least_squares
from scipy.stats import norm

from .optics import (
    CameraModel,
    LatticeGeometry,
    PointSpreadFunction,
    Scene,
    build_airy_psf,
    expected_electron_map,
    site_footprint,
)
from .pixelstats import SingularModelError, fisher_pixel_weight

NEIGHBORHOODS = ("nn", "sn", "an")
SCENARIO_LABELS = tuple(
    f"{occ}-{nbh}" for occ in ("empty", "occ") for nbh in NEIGHBORHOODS
)

# Power-law coefficients (a, b, c) of a*k**b + c fitted to the reference
# bound curves for the half-filled neighborhood: decision threshold and
# occupied-site variance as functions of the photoelectron count.
THRESHOLD_FIT = (0.391, 0.951, 2.160)
VARIANCE_FIT = (4.183, 0.896, 31.618)


class IllConditionedError(RuntimeError):
    """Fisher matrix too ill-conditioned to invert meaningfully."""


class FitConvergenceError(RuntimeError):
    """Power-law fit failed to converge; carries the best iterate."""

    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


def default_bound_geometry() -> LatticeGeometry:
    """101x101 image holding 5x5 sites spaced 20 px, central site under study."""
    return LatticeGeometry(
        rows=5,
        cols=5,
        spacing=20.0,
        origin=(10.0, 10.0),
        image_height=101,
        image_width=101,
    )


@dataclass(frozen=True)
class BoundScenario:
    """One occupancy configuration with a designated site under study."""

    scene: Scene
    label: str
    study_site: int


def scenario_occupancy(label: str, rows: int, cols: int, study_site: int) -> np.ndarray:
    """Occupancy pattern for a scenario label.

    Neighborhoods: 'nn' leaves every other site empty, 'an' fills them all,
    'sn' fills the deterministic half with odd (row + col) parity, which puts
    the four nearest neighbors of the central site of an odd-sized lattice in
    the occupied half.
    """
    occ_center, nbh = label.split("-")
    occupancy = np.zeros(rows * cols, dtype=bool)
    if nbh == "an":
        occupancy[:] = True
    elif nbh == "sn":
        r, c = np.divmod(np.arange(rows * cols), cols)
        occupancy = (r + c) % 2 == 1
    elif nbh != "nn":
        raise ValueError(f"unknown neighborhood in label {label!r}")
    occupancy[study_site] = occ_center == "occ"
    return occupancy


def make_scenario(
    label: str,
    gamma: float,
    geometry: LatticeGeometry | None = None,
    psf: PointSpreadFunction | None = None,
) -> BoundScenario:
    """Build a scenario scene where every occupied site expects ``gamma``."""
    if label not in SCENARIO_LABELS:
        raise ValueError(f"label must be one of {SCENARIO_LABELS}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if geometry is None:
        geometry = default_bound_geometry()
    if psf is None:
        psf = build_airy_psf(81, 5.0)
    study_site = geometry.site_index(geometry.rows // 2, geometry.cols // 2)
    occupancy = scenario_occupancy(label, geometry.rows, geometry.cols, study_site)
    scene = Scene(
        geometry=geometry,
        psfs=psf,
        gamma=np.where(occupancy, gamma, 0.0),
        occupancy=occupancy,
        scene_id=f"bound-{label}-g{gamma:g}",
    )
    return BoundScenario(scene=scene, label=label, study_site=study_site)


@dataclass(frozen=True)
class FisherMatrix:
    """Symmetric information matrix over per-site photoelectron counts."""

    entries: np.ndarray
    scenario: BoundScenario


def fisher_matrix(
    scenario: BoundScenario, camera: CameraModel, eps: float = 1e-8
) -> FisherMatrix:
    """Sum per-pixel Fisher contributions over the image.

    Every pixel contributes weight(lam(x)) * PSF_i(x) * PSF_j(x) to entry
    (i, j); only pixels under both sites' kernels contribute. With zero
    readout noise the per-pixel weight falls back to the discrete Poisson
    information 1 / lam.
    """
    scene = scenario.scene
    geometry = scene.geometry
    n = geometry.n_sites
    lam = expected_electron_map(scene, camera)

    footprints = []
    active = np.zeros(geometry.image_shape, dtype=bool)
    for i in range(n):
        fp = site_footprint(geometry, scene.psf_for_site(i), i)
        footprints.append(fp)
        if fp is not None:
            (sy, sx), kernel = fp
            active[sy, sx] |= kernel > 0

    if camera.readout_sigma == 0:

        def weight(rate: float) -> float:
            if rate <= 0:
                raise SingularModelError("pixel with zero rate in Poisson path")
            return 1.0 / rate

    else:

        def weight(rate: float) -> float:
            return fisher_pixel_weight(rate, camera, eps)

    cache: dict[float, float] = {}
    s_map = np.zeros(geometry.image_shape)
    ys, xs = np.nonzero(active)
    for y, x in zip(ys, xs):
        rate = lam[y, x]
        if rate <= 0:
            raise SingularModelError(
                f"pixel ({y}, {x}) has zero expected rate; set background > 0"
            )
        w = cache.get(rate)
        if w is None:
            w = weight(rate)
            cache[rate] = w
        s_map[y, x] = w

    entries = np.zeros((n, n))
    for i in range(n):
        if footprints[i] is None:
            continue
        (iy, ix), ki = footprints[i]
        for j in range(i, n):
            if footprints[j] is None:
                continue
            (jy, jx), kj = footprints[j]
            y0, y1 = max(iy.start, jy.start), min(iy.stop, jy.stop)
            x0, x1 = max(ix.start, jx.start), min(ix.stop, jx.stop)
            if y0 >= y1 or x0 >= x1:
                continue
            sub_i = ki[y0 - iy.start : y1 - iy.start, x0 - ix.start : x1 - ix.start]
            sub_j = kj[y0 - jy.start : y1 - jy.start, x0 - jx.start : x1 - jx.start]
            val = float(np.sum(sub_i * sub_j * s_map[y0:y1, x0:x1]))
            entries[i, j] = val
            entries[j, i] = val
    return FisherMatrix(entries=entries, scenario=scenario)


def crb_variances(fisher: FisherMatrix) -> np.ndarray:
    """Diagonal of the inverse information matrix: per-site variance floors."""
    entries = fisher.entries
    cond = np.linalg.cond(entries)
    if not np.isfinite(cond) or cond > 1e12:
        raise IllConditionedError(
            f"Fisher matrix for scenario {fisher.scenario.label!r} has condition "
            f"number {cond:.3g}"
        )
    try:
        chol = scipy.linalg.cho_factor(entries)
    except scipy.linalg.LinAlgError as exc:
        raise IllConditionedError(
            f"Fisher matrix for scenario {fisher.scenario.label!r} is not "
            f"positive definite: {exc}"
        ) from exc
    inverse = scipy.linalg.cho_solve(chol, np.eye(entries.shape[0]))
    return np.diag(inverse).copy()


def error_rate_floor(
    var_empty: float, var_occupied: float, gamma: float
) -> tuple[float, float, float]:
    """Optimal threshold and error floors for Gaussian estimator distributions
    centered at 0 (empty) and gamma (occupied) with the given variances.

    The threshold sits at the density intersection between the means; if no
    root lands there, the midpoint is used and a warning is issued.
    """
    if var_empty <= 0 or var_occupied <= 0:
        raise ValueError("variances must be positive")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    t = _density_intersection(0.0, var_empty, gamma, var_occupied, log_prior_ratio=0.0)
    if t is None:
        warnings.warn(
            "no density intersection between the class means; "
            "falling back to the midpoint threshold",
            RuntimeWarning,
            stacklevel=2,
        )
        t = gamma / 2.0
    fp = float(norm.sf(t / np.sqrt(var_empty)))
    fn = float(norm.cdf((t - gamma) / np.sqrt(var_occupied)))
    return t, fp, fn


def _intersection_roots(
    mean_lo: float,
    var_lo: float,
    mean_hi: float,
    var_hi: float,
    log_prior_ratio: float,
) -> list[float]:
    """Real roots of w_lo * N(mean_lo, var_lo) = w_hi * N(mean_hi, var_hi),
    with ``log_prior_ratio`` = log(w_hi / w_lo)."""
    # Quadratic in t: (t-mean_hi)^2/var_hi - (t-mean_lo)^2/var_lo
    #                 = log(var_lo/var_hi) + 2*log_prior_ratio
    rhs = np.log(var_lo / var_hi) + 2.0 * log_prior_ratio
    a = 1.0 / var_hi - 1.0 / var_lo
    b = -2.0 * (mean_hi / var_hi - mean_lo / var_lo)
    c = mean_hi**2 / var_hi - mean_lo**2 / var_lo - rhs
    if abs(a) < 1e-300:
        if b == 0:
            return []
        return [-c / b]
    disc = b * b - 4.0 * a * c
    if disc < 0:
        return []
    return [(-b - np.sqrt(disc)) / (2 * a), (-b + np.sqrt(disc)) / (2 * a)]


def _density_intersection(
    mean_lo: float,
    var_lo: float,
    mean_hi: float,
    var_hi: float,
    log_prior_ratio: float,
) -> float | None:
    """Intersection root lying strictly between the means, or None."""
    inside = [
        t
        for t in _intersection_roots(mean_lo, var_lo, mean_hi, var_hi, log_prior_ratio)
        if mean_lo < t < mean_hi
    ]
    if not inside:
        return None
    return float(inside[0])


def fn_rate_fit(x: float) -> float:
    """Closed-form false-negative floor from the fitted power laws.

    The CDF argument recenters the fitted threshold on the occupied-class
    mean x, so the numerator is threshold(x) - x.
    """
    if np.any(np.asarray(x) <= 0):
        raise ValueError("x must be positive")
    a1, b1, c1 = THRESHOLD_FIT
    a2, b2, c2 = VARIANCE_FIT
    threshold = a1 * np.power(x, b1) + c1
    variance = a2 * np.power(x, b2) + c2
    return norm.cdf((threshold - x) / np.sqrt(variance))


def fn_rate_from_power_laws(x, threshold_fit, variance_fit):
    """Same closed form with caller-supplied power-law coefficients."""
    a1, b1, c1 = threshold_fit
    a2, b2, c2 = variance_fit
    return norm.cdf((a1 * np.power(x, b1) + c1 - x) / np.sqrt(a2 * np.power(x, b2) + c2))


@dataclass(frozen=True)
class PowerLawFit:
    """Least-squares fit of a * k**b + c."""

    a: float
    b: float
    c: float
    residual_norm: float
    degenerate: bool = False

    def __call__(self, k):
        return self.a * np.power(k, self.b) + self.c


def power_law_fit(points) -> PowerLawFit:
    """Fit a * k**b + c to (k, value) pairs by least squares."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 4:
        raise ValueError("need at least 4 (k, value) pairs")
    k, v = pts[:, 0], pts[:, 1]
    if (k <= 0).any():
        raise ValueError("k values must be positive")

    if np.ptp(v) < 1e-12 * max(1.0, np.abs(v).max()):
        # Constant data: the exponent is unidentifiable.
        return PowerLawFit(0.0, 1.0, float(v.mean()), 0.0, degenerate=True)

    # Initial guess from a log-log line through the data above the floor.
    c0 = v.min() - 1e-3 * np.ptp(v)
    shifted = np.maximum(v - c0, 1e-12)
    slope, intercept = np.polyfit(np.log(k), np.log(shifted), 1)
    x0 = np.array([np.exp(intercept), slope, c0])

    def resid(p):
        return p[0] * np.power(k, p[1]) + p[2] - v

    result = least_squares(resid, x0, method="lm", max_nfev=5000)
    if not result.success:
        raise FitConvergenceError(
            f"power-law fit did not converge: {result.message}", best=result.x
        )
    a, b, c = result.x
    return PowerLawFit(float(a), float(b), float(c), float(np.linalg.norm(result.fun)))


@dataclass(frozen=True)
class BoundReport:
    """Variance floors for one neighborhood at one per-site count, plus the
    optimal-threshold error floors of the site under study."""

    gamma: float
    neighborhood: str
    study_site: int
    variances_empty: np.ndarray
    variances_occupied: np.ndarray
    threshold: float
    fp_floor: float
    fn_floor: float

    @property
    def var_empty(self) -> float:
        return float(self.variances_empty[self.study_site])

    @property
    def var_occupied(self) -> float:
        return float(self.variances_occupied[self.study_site])


def bound_report(
    neighborhood: str,
    gamma: float,
    camera: CameraModel,
    geometry: LatticeGeometry | None = None,
    psf: PointSpreadFunction | None = None,
    eps: float = 1e-8,
) -> BoundReport:
    """Variance floors for the empty and occupied variants of a neighborhood,
    with the error floors of the central site."""
    if neighborhood not in NEIGHBORHOODS:
        raise ValueError(f"neighborhood must be one of {NEIGHBORHOODS}")
    reports = {}
    for occ in ("empty", "occ"):
        scenario = make_scenario(f"{occ}-{neighborhood}", gamma, geometry, psf)
        reports[occ] = crb_variances(fisher_matrix(scenario, camera, eps))
        study_site = scenario.study_site
    var_e = float(reports["empty"][study_site])
    var_o = float(reports["occ"][study_site])
    threshold, fp, fn = error_rate_floor(var_e, var_o, gamma)
    return BoundReport(
        gamma=gamma,
        neighborhood=neighborhood,
        study_site=study_site,
        variances_empty=reports["empty"],
        variances_occupied=reports["occ"],
        threshold=threshold,
        fp_floor=fp,
        fn_floor=fn,
    )


def bound_curves(
    gammas,
    camera: CameraModel,
    neighborhoods=NEIGHBORHOODS,
    geometry: LatticeGeometry | None = None,
    psf: PointSpreadFunction | None = None,
    eps: float = 1e-8,
) -> list[BoundReport]:
    """Bound reports over a grid of per-site photoelectron counts."""
    return [
        bound_report(nbh, float(g), camera, geometry, psf, eps)
        for nbh in neighborhoods
        for g in gammas
    ]
