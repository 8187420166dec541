"""Structured configuration: YAML key-value tree over built-in presets.

The schema is documented in the repository README. A preset supplies the
full tree; a config file (and programmatic overrides) overlay it key by key.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .bounds import default_bound_geometry
from .optics import (
    CameraModel,
    LatticeGeometry,
    PointSpreadFunction,
    build_airy_psf,
    build_gaussian_psf,
)

_DESK = {
    "geometry": {
        "rows": 10,
        "cols": 10,
        "spacing": 20.0,
        "origin": [38.0, 38.0],
        "image_height": 256,
        "image_width": 256,
    },
    "psf": {"form": "airy", "window": 81, "first_zero": 5.0},
    "camera": {
        "gain": 0.5,
        "offset": 100.0,
        "readout_sigma": 0.6,
        "background": 0.2,
        "max_count": 65535,
    },
    "signal": {
        "rate": 2881.0,
        "exposures": [0.005, 0.010, 0.020, 0.040, 0.060, 0.080],
        "fill": 0.5,
    },
    "dataset": {"frames_per_exposure": 20},
    "bound": {"psf_window": 41, "epsilon": 1e-8},
    "detectors": [
        {"algo": "roi", "radius": 5},
        {"algo": "roi", "radius": 2},
        {"algo": "wiener", "balance": 10, "read_radius": 1},
        {"algo": "rl", "iterations": 2, "read_radius": 1},
        {"algo": "rl", "iterations": 3, "read_radius": 1},
        {"algo": "gns", "psf_window": 41, "weight_refresh": 3},
    ],
    "benchmark": {"calibration_split": 0.2, "compute_bounds": True, "seed": 0},
}

_PAPER = {
    "geometry": {
        "rows": 40,
        "cols": 40,
        "spacing": 20.0,
        "origin": [122.0, 122.0],
        "image_height": 1024,
        "image_width": 1024,
    },
    "psf": {"form": "airy", "window": 81, "first_zero": 5.0},
    "camera": {
        "gain": 0.5,
        "offset": 100.0,
        "readout_sigma": 0.6,
        "background": 0.2,
        "max_count": 65535,
    },
    "signal": {
        "rate": 2881.0,
        "exposures": [
            0.005, 0.010, 0.015, 0.020, 0.025, 0.030,
            0.035, 0.040, 0.050, 0.060, 0.070, 0.080,
        ],
        "fill": 0.5,
    },
    "dataset": {"frames_per_exposure": 100},
    "bound": {"psf_window": 81, "epsilon": 1e-8},
    "detectors": [
        {"algo": "roi", "radius": 5},
        {"algo": "roi", "radius": 2},
        {"algo": "wiener", "balance": 3, "read_radius": 1},
        {"algo": "wiener", "balance": 10, "read_radius": 1},
        {"algo": "wiener", "balance": 35, "read_radius": 1},
        {"algo": "rl", "iterations": 2, "read_radius": 1},
        {"algo": "rl", "iterations": 3, "read_radius": 1},
        {"algo": "rl", "iterations": 4, "read_radius": 1},
        {"algo": "gns", "psf_window": 41, "weight_refresh": 3},
    ],
    "benchmark": {"calibration_split": 0.2, "compute_bounds": True, "seed": 0},
}

PRESETS = {"desk": _DESK, "paper": _PAPER}


def _deep_merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(
    path=None, preset: str = "desk", overrides: dict | None = None
) -> dict:
    """Preset tree overlaid by the YAML file at ``path`` and then by
    ``overrides``."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    config = copy.deepcopy(PRESETS[preset])
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {path} must contain a mapping")
        config = _deep_merge(config, loaded)
    if overrides:
        config = _deep_merge(config, overrides)
    return config


def geometry_from_config(config: dict) -> LatticeGeometry:
    g = config["geometry"]
    return LatticeGeometry(
        rows=int(g["rows"]),
        cols=int(g["cols"]),
        spacing=float(g["spacing"]),
        origin=tuple(float(v) for v in g["origin"]),
        image_height=int(g["image_height"]),
        image_width=int(g["image_width"]),
    )


def camera_from_config(config: dict) -> CameraModel:
    c = config["camera"]
    return CameraModel(
        gain=float(c["gain"]),
        offset=float(c["offset"]),
        readout_sigma=float(c["readout_sigma"]),
        background=float(c["background"]),
        max_count=int(c.get("max_count", 65535)),
    )


def _build_psf(form: str, window: int, p: dict) -> PointSpreadFunction:
    if form == "airy":
        return build_airy_psf(window, float(p.get("first_zero", 5.0)))
    if form == "gaussian":
        return build_gaussian_psf(window, float(p.get("width", 2.5)))
    raise ValueError(f"unknown psf form {form!r}")


def psf_from_config(config: dict) -> PointSpreadFunction:
    p = config["psf"]
    return _build_psf(p.get("form", "airy"), int(p["window"]), p)


def bound_psf_from_config(config: dict) -> PointSpreadFunction:
    p = config["psf"]
    window = int(config.get("bound", {}).get("psf_window", p["window"]))
    return _build_psf(p.get("form", "airy"), window, p)


def bound_geometry_from_config(config: dict) -> LatticeGeometry:
    b = config.get("bound", {})
    if "geometry" in b:
        g = b["geometry"]
        return LatticeGeometry(
            rows=int(g["rows"]),
            cols=int(g["cols"]),
            spacing=float(g["spacing"]),
            origin=tuple(float(v) for v in g["origin"]),
            image_height=int(g["image_height"]),
            image_width=int(g["image_width"]),
        )
    return default_bound_geometry()
