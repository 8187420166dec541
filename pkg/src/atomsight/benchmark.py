"""Dataset sweeps over detectors: class-distribution fits, threshold
selection on a held-out calibration split, empirical error rates, variance
per class, wall-time measurement, and bound-curve overlays."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bounds as bounds_mod
from .detectors import (
    GaussNewtonOptions,
    gauss_newton_solve,
    rl_detect,
    roi_sum,
    wiener_detect,
)
from .simulate import Dataset, generate_dataset, load_dataset, save_dataset


@dataclass(frozen=True)
class GaussianPairFit:
    """Sample mean and variance of the empty- and occupied-class estimates."""

    mean_empty: float
    var_empty: float
    mean_occupied: float
    var_occupied: float


@dataclass
class MetricsRow:
    """One (exposure, detector) cell.

    Means are in the detector's raw output units (electrons for detectors
    that capture the full PSF mass, a scaled property otherwise); variances
    and the threshold are calibrated to the photoelectron axis via the
    class-mean difference, so they compare directly with the variance
    floors.
    """

    exposure_s: float
    gamma_true: float
    detector: str
    params: str
    mean_empty: float
    mean_occupied: float
    variance_empty: float
    variance_occupied: float
    threshold: float
    fp_rate: float
    fn_rate: float
    n_empty: int
    n_occupied: int
    mean_wall_ms: float


@dataclass
class BenchmarkResult:
    rows: list[MetricsRow]
    bound_reports: list
    dataset: Dataset
    calibration_split: float
    fill: float
    out_dir: Path | None = None
    files: dict = field(default_factory=dict)


def fit_class_distributions(estimates, truth) -> GaussianPairFit:
    """Per-class sample mean/variance, classes given by ground-truth labels."""
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=bool)
    if estimates.shape != truth.shape:
        raise ValueError("estimates and truth must have matching shapes")
    occupied = estimates[truth]
    empty = estimates[~truth]
    if occupied.size < 2 or empty.size < 2:
        raise ValueError("both classes need at least two samples")
    return GaussianPairFit(
        mean_empty=float(empty.mean()),
        var_empty=float(empty.var(ddof=1)),
        mean_occupied=float(occupied.mean()),
        var_occupied=float(occupied.var(ddof=1)),
    )


def optimal_threshold(fit: GaussianPairFit, fill: float) -> float:
    """Threshold minimizing the fill-weighted total error under the
    two-Gaussian model.

    The minimizer is a root of the prior-weighted density intersection; with
    a lopsided fill it may sit outside the (mean_empty, mean_occupied)
    interval. No real root falls back to the midpoint with a warning.
    """
    if not (0 < fill < 1):
        raise ValueError("fill must lie in (0, 1)")
    if fit.mean_occupied <= fit.mean_empty:
        raise ValueError("occupied mean must exceed empty mean")
    log_prior_ratio = np.log(fill / (1.0 - fill))
    roots = bounds_mod._intersection_roots(
        fit.mean_empty,
        fit.var_empty,
        fit.mean_occupied,
        fit.var_occupied,
        log_prior_ratio,
    )
    if not roots:
        warnings.warn(
            "no weighted density intersection; falling back to the midpoint",
            RuntimeWarning,
            stacklevel=2,
        )
        return float(0.5 * (fit.mean_empty + fit.mean_occupied))
    errors = [_gaussian_total_error(t, fit, fill) for t in roots]
    return float(roots[int(np.argmin(errors))])


def _gaussian_total_error(t, fit: GaussianPairFit, fill: float):
    from scipy.stats import norm

    fp = norm.sf((t - fit.mean_empty) / np.sqrt(fit.var_empty))
    fn = norm.cdf((t - fit.mean_occupied) / np.sqrt(fit.var_occupied))
    return (1.0 - fill) * fp + fill * fn


def empirical_threshold(estimates, truth, fill: float, anchor: float) -> float:
    """Refine a threshold to the minimizer of the fill-weighted empirical
    error over the given (calibration) samples.

    Candidate cuts are the midpoints between adjacent sorted estimates plus
    the anchor (the Gaussian-model intersection); among equal-error
    candidates the one closest to the anchor wins, keeping the result
    deterministic and tied to the model-based seed.
    """
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=bool)
    empty = np.sort(estimates[~truth])
    occupied = np.sort(estimates[truth])
    if empty.size == 0 or occupied.size == 0:
        return anchor
    pooled = np.sort(estimates)
    candidates = np.concatenate([[anchor], 0.5 * (pooled[1:] + pooled[:-1])])
    fp = 1.0 - np.searchsorted(empty, candidates, side="right") / empty.size
    fn = np.searchsorted(occupied, candidates, side="right") / occupied.size
    err = (1.0 - fill) * fp + fill * fn
    best = err <= err.min() + 1e-15
    return float(candidates[best][np.argmin(np.abs(candidates[best] - anchor))])


def classify_and_score(estimates, truth, threshold: float) -> tuple[float, float]:
    """Empirical error rates: FP = P(estimate > t | empty),
    FN = P(estimate <= t | occupied)."""
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=bool)
    empty = estimates[~truth]
    occupied = estimates[truth]
    fp = float((empty > threshold).mean()) if empty.size else 0.0
    fn = float((occupied <= threshold).mean()) if occupied.size else 0.0
    return fp, fn


@dataclass(frozen=True)
class TimingResult:
    mean_seconds: float
    min_seconds: float
    repetitions: int


def time_detector(invocation, repetitions: int = 5) -> TimingResult:
    """Wall-clock statistics for a detector call; one warm-up run discarded."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    invocation()
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter()
        invocation()
        samples.append(time.perf_counter() - start)
    return TimingResult(
        mean_seconds=float(np.mean(samples)),
        min_seconds=float(np.min(samples)),
        repetitions=repetitions,
    )


def detector_runner(spec: dict, dataset: Dataset):
    """Callable mapping a frame pixel array to an EstimateSet, from a
    detector spec dict ({'algo': ..., parameters...})."""
    algo = spec["algo"]
    geometry = dataset.geometry
    camera = dataset.camera
    psf = dataset.psf
    if algo == "roi":
        radius = float(spec.get("radius", 5.0))

        def run(pixels):
            return roi_sum(pixels, geometry, radius, camera)

    elif algo == "wiener":
        balance = float(spec.get("balance", 10.0))
        read_radius = float(spec.get("read_radius", 1.0))

        def run(pixels):
            return wiener_detect(pixels, geometry, psf, camera, balance, read_radius)

    elif algo == "rl":
        iterations = int(spec.get("iterations", 2))
        read_radius = float(spec.get("read_radius", 1.0))

        def run(pixels):
            return rl_detect(pixels, geometry, psf, camera, iterations, read_radius)

    elif algo == "gns":
        options = GaussNewtonOptions(
            psf_window=spec.get("psf_window", 41),
            tol_electrons=float(spec.get("tol", 1e-3)),
            max_iterations=int(spec.get("max_iterations", 50)),
            weight_refresh=int(spec.get("weight_refresh", 3)),
            cg_rtol=float(spec.get("cg_rtol", 1e-8)),
            tile=spec.get("tile"),
            warm_start=bool(spec.get("warm_start", True)),
        )

        def run(pixels):
            estimates, _ = gauss_newton_solve(pixels, geometry, psf, camera, options)
            return estimates

    else:
        raise ValueError(f"unknown detector algorithm {algo!r}")
    return run


def detector_label(spec: dict) -> str:
    algo = spec["algo"]
    if algo == "roi":
        return f"roi{spec.get('radius', 5)}"
    if algo == "wiener":
        return f"wiener{spec.get('balance', 10)}"
    if algo == "rl":
        return f"rl{spec.get('iterations', 2)}"
    if algo == "gns":
        return "gns"
    return algo


def params_string(spec: dict) -> str:
    items = sorted((k, v) for k, v in spec.items() if k != "algo")
    return ";".join(f"{k}={v}" for k, v in items)


def ensure_dataset(config: dict) -> Dataset:
    """Load the configured dataset directory if it exists, else generate
    (and persist when a directory is configured)."""
    ds_cfg = config.get("dataset", {})
    path = ds_cfg.get("dir")
    if path is not None and (Path(path) / "index.json").exists():
        return load_dataset(path)
    from .config import camera_from_config, geometry_from_config, psf_from_config

    geometry = geometry_from_config(config)
    camera = camera_from_config(config)
    psf = psf_from_config(config)
    signal = config["signal"]
    dataset = generate_dataset(
        geometry=geometry,
        camera=camera,
        rate=float(signal["rate"]),
        exposures=signal["exposures"],
        frames_per_exposure=int(ds_cfg.get("frames_per_exposure", 20)),
        fill=float(signal.get("fill", 0.5)),
        seed=int(config.get("benchmark", {}).get("seed", 0)),
        psf=psf,
    )
    if path is not None:
        save_dataset(dataset, path)
    return dataset


def split_frames(frames, calibration_split: float):
    """Deterministic calibration/evaluation split by frame index prefix."""
    n_cal = max(1, int(round(calibration_split * len(frames))))
    if len(frames) < 2:
        raise ValueError("need at least 2 frames per exposure to split")
    n_cal = min(n_cal, len(frames) - 1)
    return frames[:n_cal], frames[n_cal:]


def run_benchmark(config: dict, out_dir=None) -> BenchmarkResult:
    """Full sweep: estimates, class fits, thresholds, rates, variances, and
    timing for every (exposure, detector) cell, plus bound curves on the
    matching photoelectron grid. Writes the report bundle when ``out_dir``
    is given."""
    dataset = ensure_dataset(config)
    bench_cfg = config.get("benchmark", {})
    calibration_split = float(bench_cfg.get("calibration_split", 0.2))
    fill = float(config.get("signal", {}).get("fill", dataset.fill))
    detectors = config.get("detectors") or [{"algo": "roi", "radius": 5}]
    rate = dataset.rate

    rows = []
    curves = {}
    for spec in detectors:
        run = detector_runner(spec, dataset)
        label = detector_label(spec)
        for ei, exposure in enumerate(dataset.exposures):
            frames = dataset.frames_for_exposure(ei)
            if not frames:
                continue
            results = []
            walls = []
            skipped = 0
            for frame in frames:
                try:
                    est = run(frame.pixels)
                except Exception as exc:  # noqa: BLE001 - per-frame isolation
                    warnings.warn(
                        f"{label} failed on frame e{ei:02d}/f"
                        f"{frame.meta.frame_index:04d}: {exc}",
                        RuntimeWarning,
                        stacklevel=2,
                    )
                    skipped += 1
                    continue
                results.append((est.estimates, frame.meta.occupancy))
                walls.append(est.wall_seconds)
            if len(results) < 2:
                raise RuntimeError(
                    f"detector {label} produced too few frames at exposure {exposure}"
                )
            cal, split_eval = split_frames(results, calibration_split)
            cal_est = np.concatenate([r[0] for r in cal])
            cal_truth = np.concatenate([r[1] for r in cal])
            fit = fit_class_distributions(cal_est, cal_truth)
            if fit.mean_occupied > fit.mean_empty:
                anchor = optimal_threshold(fit, fill)
            else:
                # No class separation (e.g. zero exposure): seed from the
                # pooled mean and let the empirical refinement decide.
                warnings.warn(
                    f"{label} at exposure {exposure}: occupied mean does not "
                    "exceed empty mean; classes are indistinguishable",
                    RuntimeWarning,
                    stacklevel=2,
                )
                anchor = 0.5 * (fit.mean_empty + fit.mean_occupied)
            threshold = empirical_threshold(cal_est, cal_truth, fill, anchor)
            eval_est = np.concatenate([r[0] for r in split_eval])
            eval_truth = np.concatenate([r[1] for r in split_eval])
            fp, fn = classify_and_score(eval_est, eval_truth, threshold)
            eval_fit = fit_class_distributions(eval_est, eval_truth)
            gamma_true = rate * exposure
            # Calibrate the detector's reconstructed property to the
            # photoelectron axis through its class-mean difference.
            delta = eval_fit.mean_occupied - eval_fit.mean_empty
            scale = gamma_true / delta if gamma_true > 0 and delta > 0 else float("nan")
            rows.append(
                MetricsRow(
                    exposure_s=exposure,
                    gamma_true=gamma_true,
                    detector=label,
                    params=params_string(spec),
                    mean_empty=eval_fit.mean_empty,
                    mean_occupied=eval_fit.mean_occupied,
                    variance_empty=eval_fit.var_empty * scale**2,
                    variance_occupied=eval_fit.var_occupied * scale**2,
                    threshold=(threshold - eval_fit.mean_empty) * scale,
                    fp_rate=fp,
                    fn_rate=fn,
                    n_empty=int((~eval_truth).sum()),
                    n_occupied=int(eval_truth.sum()),
                    mean_wall_ms=1e3 * float(np.mean(walls)),
                )
            )
            curves.setdefault(label, []).append(rows[-1])

    bound_reports = []
    bound_cfg = config.get("bound", {})
    if bench_cfg.get("compute_bounds", True):
        from .config import bound_geometry_from_config, bound_psf_from_config

        geometry = bound_geometry_from_config(config)
        psf = bound_psf_from_config(config)
        gammas = [rate * e for e in dataset.exposures]
        bound_reports = bounds_mod.bound_curves(
            gammas,
            dataset.camera,
            geometry=geometry,
            psf=psf,
            eps=float(bound_cfg.get("epsilon", 1e-8)),
        )

    result = BenchmarkResult(
        rows=rows,
        bound_reports=bound_reports,
        dataset=dataset,
        calibration_split=calibration_split,
        fill=fill,
    )
    if out_dir is not None:
        from .report import write_report_bundle

        result.out_dir = Path(out_dir)
        result.files = write_report_bundle(result, out_dir)
    return result


def fit_rate_slope(exposures, mean_differences) -> float:
    """Slope of the least-squares line through (exposure, occupied - empty
    class-mean difference): the recovered photoelectron rate."""
    exposures = np.asarray(exposures, dtype=float)
    diffs = np.asarray(mean_differences, dtype=float)
    if exposures.size < 2:
        raise ValueError("need at least two exposures to fit a slope")
    slope, _ = np.polyfit(exposures, diffs, 1)
    return float(slope)


def gns_rate_slope(result: BenchmarkResult) -> float:
    """Recovered photoelectron rate from the GNS rows of a benchmark run."""
    rows = [r for r in result.rows if r.detector == "gns"]
    if len(rows) < 2:
        raise ValueError("benchmark has fewer than two GNS rows")
    rows.sort(key=lambda r: r.exposure_s)
    return fit_rate_slope(
        [r.exposure_s for r in rows],
        [r.mean_occupied - r.mean_empty for r in rows],
    )
