"""Report bundle emission for benchmark runs: delimited metrics, bound
curves, plot-data files, a markdown summary, and rendered figures.

Wall-clock means go to a separate timings file so the statistical outputs
stay byte-reproducible for a fixed seed.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bounds import BoundReport, fn_rate_from_power_laws, power_law_fit

METRICS_COLUMNS = [
    "exposure_s",
    "gamma_true",
    "detector",
    "params",
    "mean_empty",
    "mean_occupied",
    "variance_empty",
    "variance_occupied",
    "threshold",
    "fp_rate",
    "fn_rate",
    "n_empty",
    "n_occupied",
]

BOUNDS_COLUMNS = ["gamma", "scenario", "variance_floor", "threshold", "fp_floor", "fn_floor"]


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def write_metrics_csv(rows, path) -> None:
    lines = [",".join(METRICS_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(getattr(row, col)) for col in METRICS_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def write_timings_csv(rows, path) -> None:
    lines = ["detector,params,exposure_s,mean_wall_ms"]
    for row in rows:
        lines.append(
            ",".join(
                [row.detector, row.params, _fmt(row.exposure_s), _fmt(row.mean_wall_ms)]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_bounds_csv(reports, path) -> None:
    """One row per (gamma, scenario); the threshold and error floors of a
    neighborhood pair repeat on both of its rows."""
    lines = [",".join(BOUNDS_COLUMNS)]
    for rep in reports:
        for occ, variance in (
            ("empty", rep.var_empty),
            ("occ", rep.var_occupied),
        ):
            lines.append(
                ",".join(
                    [
                        _fmt(rep.gamma),
                        f"{occ}-{rep.neighborhood}",
                        _fmt(variance),
                        _fmt(rep.threshold),
                        _fmt(rep.fp_floor),
                        _fmt(rep.fn_floor),
                    ]
                )
            )
    Path(path).write_text("\n".join(lines) + "\n")


def write_curve(path, xs, ys) -> None:
    """Two-column text file, one line per point."""
    lines = [f"{_fmt(float(x))} {_fmt(float(y))}" for x, y in zip(xs, ys)]
    Path(path).write_text("\n".join(lines) + "\n")


def _by_detector(rows) -> dict:
    grouped = {}
    for row in rows:
        grouped.setdefault(row.detector, []).append(row)
    for rows_ in grouped.values():
        rows_.sort(key=lambda r: r.gamma_true)
    return grouped


def _bound_band(reports: list[BoundReport], occupied: bool):
    """Per-gamma (lower, center, upper) variance floors across neighborhoods."""
    gammas = sorted({rep.gamma for rep in reports})
    by_nbh = {}
    for rep in reports:
        value = rep.var_occupied if occupied else rep.var_empty
        by_nbh.setdefault(rep.neighborhood, {})[rep.gamma] = value
    if not all(nbh in by_nbh for nbh in ("nn", "sn", "an")):
        return None
    lower = [by_nbh["nn"][g] for g in gammas]
    center = [by_nbh["sn"][g] for g in gammas]
    upper = [by_nbh["an"][g] for g in gammas]
    return np.asarray(gammas), np.asarray(lower), np.asarray(center), np.asarray(upper)


def render_variance_figures(result, fig_dir: Path) -> list[Path]:
    paths = []
    bands = {
        occupied: _bound_band(result.bound_reports, occupied)
        for occupied in (False, True)
    }
    for detector, rows in _by_detector(result.rows).items():
        gammas = [r.gamma_true for r in rows]
        fig, ax = plt.subplots(figsize=(7, 5))
        ax.plot(gammas, [r.variance_empty for r in rows], "o-", label="empty")
        ax.plot(gammas, [r.variance_occupied for r in rows], "s--", label="occupied")
        for occupied, style in ((False, "-"), (True, "--")):
            band = bands[occupied]
            if band is None:
                continue
            bg, lo, mid, hi = band
            ax.fill_between(bg, lo, hi, color="black", alpha=0.15)
            ax.plot(bg, mid, "k" + style, linewidth=1)
        ax.set_xlabel("photoelectrons per atom site")
        ax.set_ylabel("variance (e$^-$$^2$)")
        ax.set_title(f"{detector}: estimate variance vs variance floor")
        ax.legend()
        path = fig_dir / f"variance_{detector}.png"
        fig.savefig(path, dpi=150, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
    return paths


def render_error_rate_figure(result, fig_dir: Path) -> Path | None:
    grouped = _by_detector(result.rows)
    if not grouped:
        return None
    fig, axes = plt.subplots(1, 2, figsize=(12, 5), sharey=True)
    floor = None
    for ax, key, title in (
        (axes[0], "fp_rate", "false positives"),
        (axes[1], "fn_rate", "false negatives"),
    ):
        for detector, rows in grouped.items():
            gammas = [r.gamma_true for r in rows]
            rates = [max(getattr(r, key), 1e-7) for r in rows]
            ax.semilogy(gammas, rates, "o-", label=detector)
        for rep_nbh in ("nn", "sn", "an"):
            reps = sorted(
                (r for r in result.bound_reports if r.neighborhood == rep_nbh),
                key=lambda r: r.gamma,
            )
            if reps:
                gs = [r.gamma for r in reps]
                floors = [
                    max(r.fp_floor if key == "fp_rate" else r.fn_floor, 1e-9)
                    for r in reps
                ]
                ax.semilogy(gs, floors, color="gray", linewidth=1)
                floor = True
        ax.set_xlabel("photoelectrons per atom site")
        ax.set_title(title)
        ax.set_ylim(bottom=1e-7)
    axes[0].set_ylabel("error rate")
    axes[0].legend(fontsize=8)
    path = fig_dir / "error_rates.png"
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def render_bound_figures(reports, fig_dir: Path) -> list[Path]:
    if not reports:
        return []
    paths = []
    fig, ax = plt.subplots(figsize=(7, 5))
    for nbh, color in (("nn", "tab:blue"), ("sn", "tab:red"), ("an", "tab:green")):
        reps = sorted((r for r in reports if r.neighborhood == nbh), key=lambda r: r.gamma)
        if not reps:
            continue
        gs = [r.gamma for r in reps]
        ax.plot(gs, [r.var_empty for r in reps], "o-", color=color, label=f"empty ({nbh})")
        ax.plot(
            gs, [r.var_occupied for r in reps], "s--", color=color, label=f"occupied ({nbh})"
        )
    ax.set_xlabel("photoelectrons per atom site")
    ax.set_ylabel("minimum variance (e$^-$$^2$)")
    ax.legend(fontsize=8)
    path = fig_dir / "bounds_variance.png"
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(7, 5))
    for nbh, color in (("nn", "tab:blue"), ("sn", "tab:red"), ("an", "tab:green")):
        reps = sorted((r for r in reports if r.neighborhood == nbh), key=lambda r: r.gamma)
        if not reps:
            continue
        gs = [r.gamma for r in reps]
        ax.semilogy(gs, [max(r.fp_floor, 1e-12) for r in reps], "o-", color=color,
                    label=f"FP ({nbh})")
        ax.semilogy(gs, [max(r.fn_floor, 1e-12) for r in reps], "s--", color=color,
                    label=f"FN ({nbh})")
    sn = sorted((r for r in reports if r.neighborhood == "sn"), key=lambda r: r.gamma)
    if len(sn) >= 4:
        try:
            tfit = power_law_fit([(r.gamma, r.threshold) for r in sn])
            vfit = power_law_fit([(r.gamma, r.var_occupied) for r in sn])
            xs = np.linspace(min(r.gamma for r in sn), max(r.gamma for r in sn), 200)
            ax.semilogy(
                xs,
                np.maximum(
                    fn_rate_from_power_laws(xs, (tfit.a, tfit.b, tfit.c), (vfit.a, vfit.b, vfit.c)),
                    1e-12,
                ),
                "k--",
                linewidth=1,
                label="fitted FN (sn)",
            )
        except Exception:
            pass
    ax.set_xlabel("photoelectrons per atom site")
    ax.set_ylabel("error-rate floor")
    ax.set_ylim(bottom=1e-9)
    ax.legend(fontsize=8)
    path = fig_dir / "bounds_error.png"
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    paths.append(path)
    return paths


def render_timing_figure(result, fig_dir: Path) -> Path | None:
    grouped = _by_detector(result.rows)
    if not grouped:
        return None
    labels = sorted(grouped)
    means = [float(np.mean([r.mean_wall_ms for r in grouped[d]])) for d in labels]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(labels, means)
    ax.set_ylabel("mean wall time per frame (ms)")
    ax.set_yscale("log")
    path = fig_dir / "timing.png"
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def write_plot_data(result, plot_dir: Path) -> list[Path]:
    paths = []
    for detector, rows in _by_detector(result.rows).items():
        gammas = [r.gamma_true for r in rows]
        for key in ("variance_empty", "variance_occupied", "fp_rate", "fn_rate"):
            path = plot_dir / f"{detector}_{key}.dat"
            write_curve(path, gammas, [getattr(r, key) for r in rows])
            paths.append(path)
    for nbh in ("nn", "sn", "an"):
        reps = sorted(
            (r for r in result.bound_reports if r.neighborhood == nbh),
            key=lambda r: r.gamma,
        )
        if not reps:
            continue
        gs = [r.gamma for r in reps]
        for key, values in (
            ("variance_empty", [r.var_empty for r in reps]),
            ("variance_occupied", [r.var_occupied for r in reps]),
            ("fp_floor", [r.fp_floor for r in reps]),
            ("fn_floor", [r.fn_floor for r in reps]),
        ):
            path = plot_dir / f"bound_{nbh}_{key}.dat"
            write_curve(path, gs, values)
            paths.append(path)
    return paths


def write_report_md(result, path) -> None:
    lines = ["# Benchmark report", ""]
    ds = result.dataset
    lines.append(
        f"Dataset: {ds.geometry.rows}x{ds.geometry.cols} sites, "
        f"{ds.geometry.image_height}x{ds.geometry.image_width} px, "
        f"{ds.frames_per_exposure} frames/exposure, fill {ds.fill}, "
        f"rate {ds.rate:g} e-/s, seed {ds.seed}."
    )
    lines.append(
        f"Camera: gain {ds.camera.gain:g} e-/count, offset {ds.camera.offset:g}, "
        f"readout sigma {ds.camera.readout_sigma:g} counts, "
        f"background {ds.camera.background:g} e-/px."
    )
    lines.append(f"Thresholds fitted on the first {result.calibration_split:.0%} of frames.")
    lines.append("")
    lines.append("## Metrics")
    lines.append("")
    header = [
        "detector",
        "exposure (s)",
        "gamma",
        "var empty",
        "var occupied",
        "threshold",
        "FP",
        "FN",
        "wall (ms)",
    ]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for row in sorted(result.rows, key=lambda r: (r.detector, r.exposure_s)):
        lines.append(
            "| "
            + " | ".join(
                [
                    row.detector,
                    f"{row.exposure_s:g}",
                    f"{row.gamma_true:.1f}",
                    f"{row.variance_empty:.1f}",
                    f"{row.variance_occupied:.1f}",
                    f"{row.threshold:.2f}",
                    f"{row.fp_rate:.2e}",
                    f"{row.fn_rate:.2e}",
                    f"{row.mean_wall_ms:.2f}",
                ]
            )
            + " |"
        )
    lines.append("")
    gns_rows = [r for r in result.rows if r.detector == "gns"]
    if len(gns_rows) >= 2:
        from .benchmark import gns_rate_slope

        slope = gns_rate_slope(result)
        lines.append(
            f"Recovered photoelectron rate from GNS class-mean differences: "
            f"{slope:.1f} e-/s (configured {ds.rate:g} e-/s)."
        )
        lines.append("")
    if result.bound_reports:
        lines.append("## Variance floors")
        lines.append("")
        lines.append("| gamma | neighborhood | var empty | var occupied | threshold | FP floor | FN floor |")
        lines.append("|---|---|---|---|---|---|---|")
        for rep in sorted(result.bound_reports, key=lambda r: (r.neighborhood, r.gamma)):
            lines.append(
                f"| {rep.gamma:.1f} | {rep.neighborhood} | {rep.var_empty:.2f} | "
                f"{rep.var_occupied:.2f} | {rep.threshold:.2f} | "
                f"{rep.fp_floor:.2e} | {rep.fn_floor:.2e} |"
            )
        lines.append("")
    lines.append("Figures: see `figures/`; raw curves: see `plots/`.")
    Path(path).write_text("\n".join(lines) + "\n")


def write_report_bundle(result, out_dir) -> dict:
    out = Path(out_dir)
    fig_dir = out / "figures"
    plot_dir = out / "plots"
    fig_dir.mkdir(parents=True, exist_ok=True)
    plot_dir.mkdir(parents=True, exist_ok=True)

    files = {}
    metrics_path = out / "metrics.csv"
    write_metrics_csv(result.rows, metrics_path)
    files["metrics"] = metrics_path

    timings_path = out / "timings.csv"
    write_timings_csv(result.rows, timings_path)
    files["timings"] = timings_path

    if result.bound_reports:
        bounds_path = out / "bounds.csv"
        write_bounds_csv(result.bound_reports, bounds_path)
        files["bounds"] = bounds_path

    report_path = out / "report.md"
    write_report_md(result, report_path)
    files["report"] = report_path

    files["plot_data"] = write_plot_data(result, plot_dir)
    figures = []
    figures += render_variance_figures(result, fig_dir)
    err_fig = render_error_rate_figure(result, fig_dir)
    if err_fig:
        figures.append(err_fig)
    figures += render_bound_figures(result.bound_reports, fig_dir)
    timing_fig = render_timing_figure(result, fig_dir)
    if timing_fig:
        figures.append(timing_fig)
    files["figures"] = figures
    return files
