"""Noise- and timestep-aware calibration dataset.

Samples are intermediate denoiser inputs captured from deterministic
reverse trajectories of the full-precision model, conditioned on channel-
corrupted maps. Stratification is exact: equal counts per tap timestep
and per channel-noise level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import SemanticMap, awgn, encode_map
from .denoiser import DenoiserNet
from .diffusion import NoiseSchedule, ddim_sample
from .rng import RngStream
from .serialize import read_blob_file, write_blob_file

__all__ = [
    "CalibrationSample",
    "default_psnr_levels",
    "build_calibration_set",
    "timestep_only_variant",
    "save_calibration_set",
    "load_calibration_set",
]


@dataclass
class CalibrationSample:
    x_t: np.ndarray  # intermediate noisy image (3,H,W), full-precision origin
    t: int
    y_noisy: np.ndarray  # channel-corrupted conditioning map (C,H,W)
    psnr_level: float | None  # None marks the clean (no-noise) variant


def default_psnr_levels(count: int = 8, low: float = 1.0, high: float = 100.0) -> list[float]:
    """Linearly spaced channel-noise levels, endpoints included."""
    return [float(v) for v in np.linspace(low, high, count)]


def _plan(n_samples: int, ddim_steps: int, tap_stride: int, n_levels: int) -> tuple[int, int]:
    taps_per_traj = ddim_steps // tap_stride
    if taps_per_traj < 1:
        raise ValueError(f"tap_stride {tap_stride} exceeds ddim_steps {ddim_steps}")
    if n_levels and n_samples % n_levels:
        raise ValueError(f"n_samples {n_samples} not divisible by {n_levels} noise levels")
    if n_samples % taps_per_traj:
        raise ValueError(f"n_samples {n_samples} not divisible by {taps_per_traj} taps per trajectory")
    n_traj = n_samples // taps_per_traj
    if n_levels and n_traj % n_levels:
        raise ValueError(
            f"{n_traj} trajectories cannot be stratified evenly over {n_levels} noise levels"
        )
    return n_traj, taps_per_traj


def _build(
    fp_model: DenoiserNet,
    sched: NoiseSchedule,
    maps: list[SemanticMap],
    n_samples: int,
    ddim_steps: int,
    tap_stride: int,
    psnr_levels: list[float | None],
    seed: int,
    guidance_scale: float,
) -> list[CalibrationSample]:
    if not maps:
        raise ValueError("need at least one conditioning map")
    n_traj, _ = _plan(n_samples, ddim_steps, tap_stride, len(psnr_levels))

    levels = [psnr_levels[k % len(psnr_levels)] for k in range(n_traj)]
    ys = []
    for k in range(n_traj):
        clean = encode_map(maps[k % len(maps)])
        noisy = awgn(clean, levels[k], RngStream(seed, f"calib/channel/{k}"))
        ys.append(noisy.data)
    y_batch = np.stack(ys)
    img_shape = (fp_model.in_channels, y_batch.shape[2], y_batch.shape[3])
    x_start = np.stack([RngStream(seed, f"calib/x_init/{k}").normal(img_shape) for k in range(n_traj)])

    _, taps = ddim_sample(
        fp_model,
        y_batch,
        sched,
        steps=ddim_steps,
        eta=0.0,
        stream=RngStream(seed, "calib/unused"),
        guidance_scale=guidance_scale,
        tap_stride=tap_stride,
        x_start=x_start,
    )

    samples: list[CalibrationSample] = []
    for k in range(n_traj):
        for x_batch, t in taps:
            samples.append(CalibrationSample(x_batch[k].copy(), int(t), ys[k].copy(), levels[k]))
    return samples


def build_calibration_set(
    fp_model: DenoiserNet,
    sched: NoiseSchedule,
    maps: list[SemanticMap],
    n_samples: int,
    ddim_steps: int,
    tap_stride: int,
    psnr_levels: list[float],
    seed: int,
    guidance_scale: float = 2.0,
) -> list[CalibrationSample]:
    """Noise+timestep-aware set: conditioning corrupted at the given levels."""
    levels = [float(v) for v in psnr_levels]
    if not levels:
        raise ValueError("psnr_levels must be non-empty")
    return _build(fp_model, sched, maps, n_samples, ddim_steps, tap_stride, levels, seed, guidance_scale)


def timestep_only_variant(
    fp_model: DenoiserNet,
    sched: NoiseSchedule,
    maps: list[SemanticMap],
    n_samples: int,
    ddim_steps: int,
    tap_stride: int,
    seed: int,
    guidance_scale: float = 2.0,
) -> list[CalibrationSample]:
    """Ablation set: identical construction with clean conditioning maps."""
    return _build(fp_model, sched, maps, n_samples, ddim_steps, tap_stride, [None], seed, guidance_scale)


def save_calibration_set(path, samples: list[CalibrationSample], meta: dict | None = None) -> None:
    header = {
        "kind": "calibset",
        "n_samples": len(samples),
        "t": [s.t for s in samples],
        "psnr": [s.psnr_level for s in samples],
        "meta": meta or {},
    }
    tensors: dict[str, np.ndarray] = {}
    for i, s in enumerate(samples):
        tensors[f"x{i:05d}"] = s.x_t
        tensors[f"y{i:05d}"] = s.y_noisy
    write_blob_file(path, header, tensors)


def load_calibration_set(path) -> tuple[list[CalibrationSample], dict]:
    header, tensors = read_blob_file(path)
    if header.get("kind") != "calibset":
        raise ValueError(f"{path}: not a calibration set file")
    samples = []
    for i in range(header["n_samples"]):
        psnr = header["psnr"][i]
        samples.append(
            CalibrationSample(
                tensors[f"x{i:05d}"],
                int(header["t"][i]),
                tensors[f"y{i:05d}"],
                None if psnr is None else float(psnr),
            )
        )
    return samples, header
