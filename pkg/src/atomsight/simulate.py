"""Synthetic camera frames sampled from a scene under the Poisson-Gaussian
readout model, plus labelled-dataset persistence.

Randomness is counter-based (Philox) with one stream per frame derived from
the dataset seed through ``SeedSequence(seed, spawn_key=(exposure_index,
frame_index))``; within a frame the draws are occupancy, then per-pixel
Poisson counts in row-major order, then readout noise. Frames are therefore
individually reproducible and generation parallelizes across frames without
changing the output.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .optics import (
    CameraModel,
    LatticeGeometry,
    PointSpreadFunction,
    Scene,
    expected_electron_map,
    gamma_from_exposure,
    read_psf,
    write_psf,
)


class DatasetIOError(RuntimeError):
    """Dataset persistence failure, with the offending path in the message."""


@dataclass(frozen=True)
class FrameMeta:
    scene_id: str
    exposure_s: float
    exposure_index: int
    frame_index: int
    seed: int
    occupancy: np.ndarray

    def to_json_dict(self, geometry: LatticeGeometry, camera: CameraModel) -> dict:
        return {
            "scene_id": self.scene_id,
            "exposure_s": self.exposure_s,
            "exposure_index": self.exposure_index,
            "frame_index": self.frame_index,
            "seed": self.seed,
            "occupancy": [int(v) for v in self.occupancy],
            "geometry": {
                "rows": geometry.rows,
                "cols": geometry.cols,
                "spacing": geometry.spacing,
                "origin": list(geometry.origin),
                "image_height": geometry.image_height,
                "image_width": geometry.image_width,
            },
            "camera": asdict(camera),
        }


@dataclass
class Frame:
    pixels: np.ndarray
    meta: FrameMeta

    def __post_init__(self):
        if self.pixels.dtype != np.uint16:
            raise ValueError("frame pixels must be uint16")


@dataclass
class Dataset:
    geometry: LatticeGeometry
    camera: CameraModel
    psf: PointSpreadFunction
    rate: float
    exposures: list[float]
    frames_per_exposure: int
    fill: float
    seed: int
    frames: list[Frame] = field(default_factory=list)

    @property
    def ground_truth(self) -> list[np.ndarray]:
        return [f.meta.occupancy for f in self.frames]

    def frames_for_exposure(self, exposure_index: int) -> list[Frame]:
        return [f for f in self.frames if f.meta.exposure_index == exposure_index]


def frame_rng(seed: int, exposure_index: int, frame_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(exposure_index, frame_index))
    return np.random.Generator(np.random.Philox(ss))


def _sample_pixels(
    lam: np.ndarray, camera: CameraModel, rng: np.random.Generator
) -> np.ndarray:
    electrons = rng.poisson(lam)
    values = camera.offset + electrons / camera.gain
    values = values + rng.normal(0.0, camera.readout_sigma, size=lam.shape)
    return np.clip(np.rint(values), 0, camera.max_count).astype(np.uint16)


def sample_frame(scene: Scene, camera: CameraModel, seed: int) -> Frame:
    """One frame from a fixed scene: per pixel, Poisson electrons at the
    expected rate, scaled to counts, offset, Gaussian readout, then
    round-to-nearest and clamp to [0, max_count]."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    lam = expected_electron_map(scene, camera)
    pixels = _sample_pixels(lam, camera, rng)
    meta = FrameMeta(
        scene_id=scene.scene_id,
        exposure_s=float("nan"),
        exposure_index=-1,
        frame_index=-1,
        seed=seed,
        occupancy=scene.occupancy.copy(),
    )
    return Frame(pixels=pixels, meta=meta)


def sample_occupancy(n: int, fill: float, seed: int) -> np.ndarray:
    """i.i.d. Bernoulli(fill) occupancy vector, deterministic per seed."""
    if not (0 <= fill <= 1):
        raise ValueError("fill must lie in [0, 1]")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    return rng.random(n) < fill


def generate_dataset(
    geometry: LatticeGeometry,
    camera: CameraModel,
    rate: float,
    exposures,
    frames_per_exposure: int,
    fill: float,
    seed: int,
    psf: PointSpreadFunction | None = None,
) -> Dataset:
    """Labelled frames for each exposure, fresh occupancy per frame."""
    exposures = [float(e) for e in exposures]
    if not exposures:
        raise ValueError("exposure list must be non-empty")
    if frames_per_exposure < 0:
        raise ValueError("frames_per_exposure must be non-negative")
    if psf is None:
        from .optics import build_gaussian_psf

        psf = build_gaussian_psf(81, 2.5)
    dataset = Dataset(
        geometry=geometry,
        camera=camera,
        psf=psf,
        rate=rate,
        exposures=exposures,
        frames_per_exposure=frames_per_exposure,
        fill=fill,
        seed=seed,
    )
    n = geometry.n_sites
    for ei, exposure in enumerate(exposures):
        for fi in range(frames_per_exposure):
            rng = frame_rng(seed, ei, fi)
            occupancy = rng.random(n) < fill
            gamma = gamma_from_exposure(occupancy, rate, exposure)
            scene = Scene(
                geometry=geometry,
                psfs=psf,
                gamma=gamma,
                occupancy=occupancy,
                scene_id=f"sim-e{ei:02d}-f{fi:04d}",
            )
            lam = expected_electron_map(scene, camera)
            pixels = _sample_pixels(lam, camera, rng)
            meta = FrameMeta(
                scene_id=scene.scene_id,
                exposure_s=exposure,
                exposure_index=ei,
                frame_index=fi,
                seed=seed,
                occupancy=occupancy,
            )
            dataset.frames.append(Frame(pixels=pixels, meta=meta))
    return dataset


def _frame_stem(meta: FrameMeta) -> str:
    return f"e{meta.exposure_index:02d}_f{meta.frame_index:04d}"


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write raw little-endian uint16 frames with JSON sidecars, the shared
    PSF, and an index file listing everything."""
    out = Path(out_dir)
    frames_dir = out / "frames"
    try:
        frames_dir.mkdir(parents=True, exist_ok=True)
        write_psf(out / "psf.bin", dataset.psf)
        entries = []
        for frame in dataset.frames:
            stem = _frame_stem(frame.meta)
            raw_path = frames_dir / f"{stem}.u16"
            raw_path.write_bytes(frame.pixels.astype("<u2").tobytes())
            sidecar = frames_dir / f"{stem}.json"
            sidecar.write_text(
                json.dumps(
                    frame.meta.to_json_dict(dataset.geometry, dataset.camera),
                    indent=1,
                )
            )
            entries.append(
                {
                    "file": f"frames/{stem}.u16",
                    "sidecar": f"frames/{stem}.json",
                    "exposure_index": frame.meta.exposure_index,
                    "frame_index": frame.meta.frame_index,
                    "exposure_s": frame.meta.exposure_s,
                }
            )
        index = {
            "format": "atomsight-dataset-v1",
            "geometry": {
                "rows": dataset.geometry.rows,
                "cols": dataset.geometry.cols,
                "spacing": dataset.geometry.spacing,
                "origin": list(dataset.geometry.origin),
                "image_height": dataset.geometry.image_height,
                "image_width": dataset.geometry.image_width,
            },
            "camera": asdict(dataset.camera),
            "psf_file": "psf.bin",
            "rate": dataset.rate,
            "exposures": dataset.exposures,
            "frames_per_exposure": dataset.frames_per_exposure,
            "fill": dataset.fill,
            "seed": dataset.seed,
            "frames": entries,
        }
        (out / "index.json").write_text(json.dumps(index, indent=1))
    except OSError as exc:
        raise DatasetIOError(f"failed writing dataset under {out}: {exc}") from exc
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    index_path = root / "index.json"
    try:
        index = json.loads(index_path.read_text())
    except OSError as exc:
        raise DatasetIOError(f"failed reading dataset index {index_path}: {exc}") from exc
    geo = index["geometry"]
    geometry = LatticeGeometry(
        rows=geo["rows"],
        cols=geo["cols"],
        spacing=geo["spacing"],
        origin=tuple(geo["origin"]),
        image_height=geo["image_height"],
        image_width=geo["image_width"],
    )
    camera = CameraModel(**index["camera"])
    psf = read_psf(root / index["psf_file"])
    dataset = Dataset(
        geometry=geometry,
        camera=camera,
        psf=psf,
        rate=index["rate"],
        exposures=[float(e) for e in index["exposures"]],
        frames_per_exposure=index["frames_per_exposure"],
        fill=index["fill"],
        seed=index["seed"],
    )
    shape = geometry.image_shape
    for entry in index["frames"]:
        raw_path = root / entry["file"]
        try:
            pixels = np.frombuffer(raw_path.read_bytes(), dtype="<u2").reshape(shape)
            sidecar = json.loads((root / entry["sidecar"]).read_text())
        except OSError as exc:
            raise DatasetIOError(f"failed reading frame {raw_path}: {exc}") from exc
        meta = FrameMeta(
            scene_id=sidecar["scene_id"],
            exposure_s=sidecar["exposure_s"],
            exposure_index=sidecar["exposure_index"],
            frame_index=sidecar["frame_index"],
            seed=sidecar["seed"],
            occupancy=np.asarray(sidecar["occupancy"], dtype=bool),
        )
        dataset.frames.append(Frame(pixels=pixels.astype(np.uint16), meta=meta))
    return dataset
