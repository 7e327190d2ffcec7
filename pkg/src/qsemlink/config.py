"""Run configuration: flat key = value sections with lossless round-trip.

Every field has a default; the desk preset is sized for CPU runs in
minutes, the paper preset mirrors the full-scale recipe (T = 1000 DDPM
sampling, 100-step deterministic calibration trajectories tapped every
25 steps, 64 calibration samples over eight channel-noise levels).
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields

from .calibset import default_psnr_levels
from .denoiser import DenoiserConfig
from .quant import AdaRoundHyper

__all__ = [
    "DatasetSpec",
    "ScheduleSpec",
    "TrainSpec",
    "QuantSpec",
    "CalibSpec",
    "EvalSpec",
    "RunConfig",
    "ConfigError",
]


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    n: int = 128
    height: int = 32
    width: int = 32
    classes: int = 6
    seed: int = 42
    train_count: int = 96
    calib_count: int = 16
    eval_count: int = 16

    def __post_init__(self):
        if self.train_count + self.calib_count + self.eval_count > self.n:
            raise ConfigError("dataset splits exceed dataset size")


@dataclass
class ScheduleSpec:
    steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.1


@dataclass
class TrainSpec:
    # lr/epochs sized so the desk model conditions visibly on CPU budgets;
    # 2e-4 x 30 epochs leaves the 32x32 model near chance-level consistency
    epochs: int = 60
    batch: int = 16
    lr: float = 1e-3
    kl_weight: float = 0.001
    psnr_min: float = 1.0
    psnr_max: float = 100.0


@dataclass
class QuantSpec:
    bits: int = 8
    policy: str = "minmax"
    split: bool = True
    steps: int = 1000
    calib_batch: int = 16
    lr_alpha: float = 1e-3
    lr_log_scale: float = 4e-5
    lambda_round: float = 0.01
    b_start: float = 20.0
    b_end: float = 2.0
    warmup_frac: float = 0.2
    holdout_frac: float = 0.25

    def adaround_hyper(self, seed: int) -> AdaRoundHyper:
        return AdaRoundHyper(
            steps=self.steps,
            batch=self.calib_batch,
            lr_alpha=self.lr_alpha,
            lr_log_scale=self.lr_log_scale,
            lambda_round=self.lambda_round,
            b_start=self.b_start,
            b_end=self.b_end,
            warmup_frac=self.warmup_frac,
            holdout_frac=self.holdout_frac,
            seed=seed,
        )


@dataclass
class CalibSpec:
    variant: str = "noise_timestep"  # noise_timestep | timestep_only
    n_samples: int = 64
    ddim_steps: int = 40
    tap_stride: int = 10
    levels: list[float] = field(default_factory=default_psnr_levels)
    guidance: float = 2.0


@dataclass
class EvalSpec:
    psnr_list: list[float] = field(default_factory=lambda: [100.0, 20.0, 10.0])
    n_eval: int = 4
    seeds: int = 3
    guidance: float = 2.0
    sampler: str = "ddim"  # ddim | ddpm
    ddim_steps: int = 40


@dataclass
class RunConfig:
    seed: int = 42
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainSpec = field(default_factory=TrainSpec)
    quant: QuantSpec = field(default_factory=QuantSpec)
    calib: CalibSpec = field(default_factory=CalibSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)

    @staticmethod
    def desk() -> "RunConfig":
        return RunConfig()

    @staticmethod
    def paper() -> "RunConfig":
        cfg = RunConfig()
        cfg.schedule = ScheduleSpec(steps=1000, beta_start=1e-4, beta_end=0.02)
        cfg.calib = CalibSpec(n_samples=64, ddim_steps=100, tap_stride=25)
        cfg.eval = EvalSpec(sampler="ddpm")
        return cfg

    # -- serialization ----------------------------------------------------------

    _SECTIONS = ("dataset", "schedule", "model", "train", "quant", "calib", "eval")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["run"] = {"seed": str(self.seed)}
        for section in self._SECTIONS:
            obj = getattr(self, section)
            cp[section] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @staticmethod
    def from_ini(text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"config parse failure: {e}") from e
        cfg = RunConfig()
        if cp.has_option("run", "seed"):
            cfg.seed = int(cp["run"]["seed"])
        section_types = {
            "dataset": DatasetSpec,
            "schedule": ScheduleSpec,
            "model": DenoiserConfig,
            "train": TrainSpec,
            "quant": QuantSpec,
            "calib": CalibSpec,
            "eval": EvalSpec,
        }
        for section, cls in section_types.items():
            if not cp.has_section(section):
                continue
            kwargs = {}
            known = {f.name: f for f in fields(cls)}
            for key, raw in cp[section].items():
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                kwargs[key] = _parse(raw, getattr(cls(), key))
            try:
                setattr(cfg, section, cls(**kwargs))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad [{section}] config: {e}") from e
        return cfg

    @staticmethod
    def load(path) -> "RunConfig":
        with open(path) as f:
            return RunConfig.from_ini(f.read())

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_ini())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode("utf-8")).hexdigest()[:16]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _parse(raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"bad boolean {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            if not raw:
                return []
            return [float(v.strip()) for v in raw.split(",")]
        return raw
    except ValueError as e:
        raise ConfigError(f"bad config value {raw!r}: {e}") from e
