"""Run configuration: one JSON document drives generation, training and evaluation.

Every numeric default named elsewhere in the package lives here so that a
config snapshot embedded in a checkpoint or report fully reproduces a run.
Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError

ABLATIONS = ("none", "no-interp", "no-nonrigid", "no-lbs-opt", "no-shape-opt", "no-reg")


@dataclass
class RigConfig:
    """Static pinhole camera ring around the subject."""

    n_train: int = 4          # blur-observing cameras
    n_eval: int = 8           # held-out sharp cameras, interleaved azimuths
    radius_m: float = 3.0
    cam_height_m: float = 1.1
    target: tuple = (0.0, 0.9, 0.0)
    width: int = 128
    height: int = 128
    fx: float = 120.0
    fy: float = 120.0
    cx: float = 64.0
    cy: float = 64.0
    near: float = 0.1


@dataclass
class JointMotionConfig:
    """One sinusoidal channel: angle(t) = amplitude * sin(2*pi*frequency*t + phase) about axis."""

    axis: tuple = (0.0, 0.0, 1.0)
    amplitude: float = 0.0    # radians for joints, meters for the root channel
    frequency: float = 0.0    # Hz, over absolute capture time
    phase: float = 0.0


def _default_joint_motion() -> dict:
    # Animates the stickman's articulated joints; leaf joints carry no geometry
    # so scripting them would be a no-op. Amplitudes are set so a default
    # exposure sweeps limbs through sizable arcs (10-30 px streaks at the
    # default rig): weak blur makes the benchmark trivially easy for a
    # blur-ignorant baseline.
    return {
        "l_shoulder": JointMotionConfig(axis=(0.0, 0.0, 1.0), amplitude=1.4, frequency=0.4, phase=0.0),
        "r_shoulder": JointMotionConfig(axis=(0.0, 0.0, 1.0), amplitude=1.4, frequency=0.4, phase=3.14159265),
        "l_hip": JointMotionConfig(axis=(1.0, 0.0, 0.0), amplitude=1.0, frequency=0.4, phase=3.14159265),
        "r_hip": JointMotionConfig(axis=(1.0, 0.0, 0.0), amplitude=1.0, frequency=0.4, phase=0.0),
        "spine": JointMotionConfig(axis=(0.0, 1.0, 0.0), amplitude=0.6, frequency=0.24, phase=0.5),
        "pelvis": JointMotionConfig(axis=(0.0, 1.0, 0.0), amplitude=0.5, frequency=0.2, phase=1.0),
    }


@dataclass
class MotionConfig:
    """Procedural ground-truth motion: smooth in absolute time, so the pose at the
    end of exposure n equals the pose at the start of exposure n+1 exactly."""

    tau_s: float = 0.2        # exposure duration; exposures are contiguous
    n_frames: int = 20
    joints: dict = field(default_factory=_default_joint_motion)
    root: JointMotionConfig = field(
        default_factory=lambda: JointMotionConfig(axis=(1.0, 0.0, 0.0), amplitude=0.12, frequency=0.28, phase=0.0)
    )


@dataclass
class DatagenConfig:
    t_gt: int = 33            # subframes averaged into each synthetic blurry frame
    coarse_rot_sigma: float = 0.05    # rad per joint component, noise on mid-exposure pose
    coarse_trans_sigma: float = 0.02  # meters, noise on root translation
    shape_sigma: float = 0.04         # log-scale noise on ground-truth bone lengths
    float_dump: bool = False          # write .f32 dumps next to PNGs


@dataclass
class DensifyConfig:
    start: int = 300
    end: int = 2000
    every: int = 200
    grad_threshold: float = 2e-4    # mean accumulated ||dL/d mean2d|| in pixels
    scale_threshold: float = 0.05   # meters; below -> clone, at/above -> split
    split_factor: float = 1.6
    prune_opacity: float = 0.01
    prune_scale: float = 0.3        # meters
    max_gaussians: int = 20000


@dataclass
class LearningRates:
    means: float = 2e-4
    means_final_mult: float = 0.01  # exponential decay target multiplier over the run
    quats: float = 1e-3
    log_scales: float = 5e-3
    opacity: float = 5e-2
    colors: float = 2.5e-3
    knots: float = 1e-3
    nonrigid: float = 1e-3
    lbs: float = 1e-3
    shape: float = 1e-3


@dataclass
class TrainConfig:
    iterations: int = 3000
    subframes: int = 5        # virtual sharp renders per blur composite (T)
    control_knots: int = 4    # spline knots per exposure (P)
    # the regularizer touches every frame each iteration while the photometric
    # term samples one; 0.1 balances the two through Adam's momentum
    lambda_reg: float = 0.1
    density: float = 320.0    # seeded Gaussians per meter of bone
    jitter: bool = True
    sigma_disp: float = 0.1   # tanh bound on the non-rigid pose displacement, radians
    ablation: str = "none"
    lrs: LearningRates = field(default_factory=LearningRates)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    log_every: int = 50
    checkpoint_every: int = 0  # 0 = final checkpoint only
    eval_every: int = 0        # 0 = no held-out evaluation during training
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class EvalConfig:
    timesteps: tuple = (0.0, 0.5, 1.0)
    crop_pad: int = 4


@dataclass
class GradcheckConfig:
    n_samples: int = 220      # parameters probed with central differences
    step: float = 1e-4
    max_rel_err: float = 1e-3
    n_gaussians: int = 16
    image_size: int = 8


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 0          # rasterizer threads; 0 = all cores
    skeleton: str = "stickman-11"   # builtin name or path to a skeleton JSON
    rig: RigConfig = field(default_factory=RigConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    datagen: DatagenConfig = field(default_factory=DatagenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    def validate(self) -> None:
        if self.train.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.train.ablation!r}; choose from {ABLATIONS}")
        if not (1 <= self.train.control_knots <= 8):
            raise ConfigError("train.control_knots must be in [1, 8]")
        if self.train.subframes < 1:
            raise ConfigError("train.subframes must be >= 1")
        if self.motion.tau_s <= 0:
            raise ConfigError("motion.tau_s must be positive")
        if self.motion.n_frames < 1:
            raise ConfigError("motion.n_frames must be >= 1")
        if self.datagen.t_gt < 1:
            raise ConfigError("datagen.t_gt must be >= 1")
        if self.train.density <= 0:
            raise ConfigError("train.density must be positive")


def _from_dict(cls, data: Any, path: str):
    """Strictly build a (possibly nested) dataclass; unknown keys are errors."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        value = data[name]
        sub = path + "." + name if path else name
        if f.type in _NESTED:
            kwargs[name] = _from_dict(_NESTED[f.type], value, sub)
        elif name == "joints":
            kwargs[name] = {k: _from_dict(JointMotionConfig, v, sub + "." + k) for k, v in value.items()}
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


# Field annotations are strings under `from __future__ import annotations`,
# so nested dataclasses are resolved by name.
_NESTED = {
    "RigConfig": RigConfig,
    "MotionConfig": MotionConfig,
    "JointMotionConfig": JointMotionConfig,
    "DatagenConfig": DatagenConfig,
    "DensifyConfig": DensifyConfig,
    "LearningRates": LearningRates,
    "TrainConfig": TrainConfig,
    "EvalConfig": EvalConfig,
    "GradcheckConfig": GradcheckConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    cfg = _from_dict(RunConfig, data, "")
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    cfg = config_from_dict(data)
    seed_env = os.environ.get("BAL_SEED")
    if seed_env is not None:
        try:
            cfg.seed = int(seed_env)
        except ValueError as exc:
            raise ConfigError(f"BAL_SEED must be an integer, got {seed_env!r}") from exc
    return cfg


def default_config() -> RunConfig:
    return RunConfig()


def describe_config_keys() -> str:
    """Flat `key = default` listing of every config key, for --help output."""
    lines: list[str] = []

    def walk(obj, prefix: str):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(value) and not isinstance(value, type):
                walk(value, key + ".")
            elif isinstance(value, dict):
                for k, v in value.items():
                    walk(v, f"{key}.{k}.")
            else:
                lines.append(f"  {key} = {value!r}")

    walk(RunConfig(), "")
    return "\n".join(lines)
