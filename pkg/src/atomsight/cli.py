"""Command-line entry point: simulate, bound, detect, and bench subcommands."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import benchmark as benchmark_mod
from . import bounds as bounds_mod
from .config import (
    bound_geometry_from_config,
    bound_psf_from_config,
    camera_from_config,
    load_config,
)
from .simulate import load_dataset, save_dataset


def _parse_params(text: str | None) -> dict:
    params = {}
    if not text:
        return params
    for item in text.split(","):
        if not item:
            continue
        key, _, value = item.partition("=")
        if not _:
            raise SystemExit(f"malformed parameter {item!r}; expected key=value")
        try:
            params[key] = int(value)
        except ValueError:
            try:
                params[key] = float(value)
            except ValueError:
                params[key] = value
    return params


def cmd_simulate(args) -> int:
    config = load_config(args.config, preset=args.preset)
    if args.seed is not None:
        config.setdefault("benchmark", {})["seed"] = args.seed
    dataset = benchmark_mod.ensure_dataset(
        {**config, "dataset": {**config.get("dataset", {}), "dir": None}}
    )
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset.frames)} frames to {args.out}")
    return 0


def cmd_bound(args) -> int:
    config = load_config(args.config, preset=args.preset)
    camera = camera_from_config(config)
    geometry = bound_geometry_from_config(config)
    psf = bound_psf_from_config(config)

    if args.gammas == "auto":
        signal = config["signal"]
        gammas = [float(signal["rate"]) * e for e in signal["exposures"]]
    else:
        gammas = [float(v) for v in args.gammas.split(",") if v]
    if not gammas:
        raise SystemExit("no gamma values requested")

    if args.scenarios == "all":
        labels = set(bounds_mod.SCENARIO_LABELS)
    else:
        labels = {s.strip() for s in args.scenarios.split(",") if s.strip()}
        unknown = labels - set(bounds_mod.SCENARIO_LABELS)
        if unknown:
            raise SystemExit(
                f"unknown scenarios {sorted(unknown)}; valid: {bounds_mod.SCENARIO_LABELS}"
            )
    neighborhoods = sorted(
        {label.split("-")[1] for label in labels},
        key=bounds_mod.NEIGHBORHOODS.index,
    )

    eps = float(config.get("bound", {}).get("epsilon", 1e-8))
    reports = bounds_mod.bound_curves(
        gammas, camera, neighborhoods=neighborhoods, geometry=geometry, psf=psf, eps=eps
    )

    from .report import render_bound_figures, write_bounds_csv

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    filtered = [
        rep
        for rep in reports
        if {f"empty-{rep.neighborhood}", f"occ-{rep.neighborhood}"} & labels
    ]
    write_bounds_csv(filtered, out)
    print(f"wrote {out}")

    if args.all_sites:
        full = out.with_name(out.stem + "_full.csv")
        lines = ["gamma,scenario,site,variance_floor"]
        for rep in filtered:
            for occ, variances in (
                ("empty", rep.variances_empty),
                ("occ", rep.variances_occupied),
            ):
                label = f"{occ}-{rep.neighborhood}"
                if label not in labels:
                    continue
                for site, var in enumerate(np.asarray(variances)):
                    lines.append(f"{rep.gamma:.12g},{label},{site},{var:.12g}")
        full.write_text("\n".join(lines) + "\n")
        print(f"wrote {full}")

    if args.plot:
        fig_dir = out.parent
        for path in render_bound_figures(filtered, fig_dir):
            print(f"wrote {path}")
    return 0


def cmd_detect(args) -> int:
    dataset = load_dataset(args.dataset)
    spec = {"algo": args.algo, **_parse_params(args.params)}
    run = benchmark_mod.detector_runner(spec, dataset)

    lines = ["frame_id,site_index,estimate_electrons,truth_occupancy,wall_ms"]
    for frame in dataset.frames:
        est = run(frame.pixels)
        frame_id = f"e{frame.meta.exposure_index:02d}_f{frame.meta.frame_index:04d}"
        wall_ms = est.wall_seconds * 1e3
        for site, value in enumerate(est.estimates):
            truth = int(frame.meta.occupancy[site])
            lines.append(
                f"{frame_id},{site},{value:.12g},{truth},{wall_ms:.6g}"
            )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {out}")
    return 0


def cmd_bench(args) -> int:
    overrides = {}
    if args.detectors:
        names = [n.strip() for n in args.detectors.split(",") if n.strip()]
        config_all = load_config(args.config, preset=args.preset)
        chosen = [
            spec
            for spec in config_all.get("detectors", [])
            if benchmark_mod.detector_label(spec) in names or spec["algo"] in names
        ]
        if not chosen:
            raise SystemExit(f"no configured detectors match {names}")
        overrides["detectors"] = chosen
    config = load_config(args.config, preset=args.preset, overrides=overrides)
    if args.seed is not None:
        config.setdefault("benchmark", {})["seed"] = args.seed
    result = benchmark_mod.run_benchmark(config, out_dir=args.out)
    print(f"wrote report bundle to {args.out}")
    for key in ("metrics", "bounds", "timings", "report"):
        if key in result.files:
            print(f"  {result.files[key]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atomsight",
        description="Simulate lattice fluorescence images, compute estimator "
        "variance floors, and benchmark atom detection algorithms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate and persist a labelled dataset")
    p.add_argument("--config", default=None, help="YAML config overlay")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bound", help="compute variance and error-rate floors")
    p.add_argument("--config", default=None)
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument(
        "--scenarios",
        default="all",
        help="'all' or comma list from " + ",".join(bounds_mod.SCENARIO_LABELS),
    )
    p.add_argument("--gammas", default="auto", help="'auto' or comma list of counts")
    p.add_argument("--out", default="bounds.csv")
    p.add_argument("--plot", action="store_true", help="render figures next to the CSV")
    p.add_argument(
        "--all-sites", action="store_true", help="also write per-site variance floors"
    )
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("detect", help="run one detector over a stored dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--algo", required=True, choices=["roi", "wiener", "rl", "gns"])
    p.add_argument("--params", default="", help="comma list of key=value overrides")
    p.add_argument("--out", default="estimates.csv")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench", help="full benchmark sweep with report bundle")
    p.add_argument("--config", default=None)
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument(
        "--detectors", default=None, help="comma list of configured detector labels"
    )
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
