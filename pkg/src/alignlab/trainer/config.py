"""Run configuration: one JSON document describing a full experiment."""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from alignlab.alignnet import AlignNetConfig
from alignlab.distill import DivergenceKind
from alignlab.encoders import EncoderConfig
from alignlab.errors import ConfigError
from alignlab.lightcontrol import LightControlConfig
from alignlab.mmdit import TAP_POSITIONS, MMDiTConfig

PIPELINES = ("sequential", "overlapped")
T_MODES = ("fixed", "uniform")
STUDENTS = ("mllm", "teacher")
# how a run is scheduled, not what it computes; left out of checkpoint headers
EXECUTION_FIELDS = ("pipeline",)


@dataclass
class LoRAConfig:
    rank: int = 4
    scale: float = 1.0
    targets: list[str] | None = None  # None: q/k/v/o of every double-stream block


@dataclass
class RunConfig:
    seed: int = 0
    model_seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mmdit: MMDiTConfig = field(default_factory=MMDiTConfig)
    alignnet: AlignNetConfig = field(default_factory=AlignNetConfig)
    lightcontrol: LightControlConfig = field(default_factory=LightControlConfig)
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    loss: DivergenceKind = field(default_factory=DivergenceKind)
    tap: str = "attn"
    student: str = "mllm"
    lr: float = 1e-3
    weight_decay: float = 0.01
    steps: int = 2000
    lightcontrol_steps: int = 1000
    lora_steps: int = 300
    batch_size: int = 8
    n_prompts: int = 512
    n_heldout: int = 64
    prompts_path: str | None = None
    heldout_path: str | None = None
    stage1_checkpoint: str | None = None
    pipeline: str = "sequential"
    strict: bool = False
    t_mode: str = "fixed"
    t_lo: float = 0.5
    t_euler_steps: int = 4
    sample_steps: int = 1
    eval_seed: int = 12345
    n_pairs: int = 256
    n_val_pairs: int = 64
    ema_alpha: float = 0.01

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def checkpoint_dict(self) -> dict:
        """Config echo stored in checkpoints: everything except execution-only fields."""
        data = self.to_dict()
        for name in EXECUTION_FIELDS:
            data.pop(name)
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = _build(cls, data, "config")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)

    def replace(self, **changes) -> "RunConfig":
        data = self.to_dict()
        for dotted, value in changes.items():
            node = data
            *parents, leaf = dotted.split("__")
            for key in parents:
                node = node[key]
            node[leaf] = value
        return RunConfig.from_dict(data)

    @property
    def student_layers(self) -> int:
        return 1 if self.student == "teacher" else self.encoder.layers

    @property
    def student_width(self) -> int:
        if self.student == "teacher":
            return self.encoder.d_c + self.encoder.d_p
        return self.encoder.width

    def validate(self) -> None:
        self.encoder.validate()
        self.mmdit.validate()
        self.lightcontrol.validate()
        self.loss.validate()
        if (self.encoder.d_c, self.encoder.d_p) != (self.mmdit.d_c, self.mmdit.d_p):
            raise ConfigError(
                f"teacher condition dims ({self.encoder.d_c}, {self.encoder.d_p}) differ from "
                f"generator ({self.mmdit.d_c}, {self.mmdit.d_p})"
            )
        if self.student not in STUDENTS:
            raise ConfigError(f"student must be one of {STUDENTS}")
        self.alignnet.validate(self.student_layers, self.student_width, self.encoder.d_c, self.encoder.d_p)
        if self.tap not in TAP_POSITIONS:
            raise ConfigError(f"unknown tap position {self.tap!r}; expected one of {TAP_POSITIONS}")
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}")
        if self.t_mode not in T_MODES:
            raise ConfigError(f"t_mode must be one of {T_MODES}")
        if not 0.0 < self.t_lo <= 1.0:
            raise ConfigError("t_lo must lie in (0, 1]")
        lc, md = self.lightcontrol, self.mmdit
        points = md.blocks + (md.single_blocks if md.inject_single else 0)
        if lc.blocks != points:
            raise ConfigError(f"LightControl has {lc.blocks} blocks but the generator has {points} injection points")
        if (lc.hidden, lc.d_p, lc.ref_channels, lc.ref_size, lc.patch) != (
            md.hidden, md.d_p, md.latent_channels, md.latent_size, md.patch
        ):
            raise ConfigError("LightControl geometry must match the generator's latent grid and widths")
        if self.lora.rank < 1:
            raise ConfigError("lora.rank must be >= 1")
        for name in ("steps", "lightcontrol_steps", "lora_steps", "batch_size", "n_heldout",
                     "sample_steps", "t_euler_steps", "n_pairs", "n_val_pairs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_prompts < self.batch_size and self.prompts_path is None:
            raise ConfigError("n_prompts must be at least batch_size")
        if not self.lr > 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ConfigError("ema_alpha must lie in (0, 1]")


def _check_scalar(value, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_scalar(value, inner[0], where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        return [_check_scalar(v, args[0], f"{where}[]") for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    raise ConfigError(f"unsupported field type at {where}")


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown field(s) in {where}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{where}.{name}")
        else:
            kwargs[name] = _check_scalar(value, tp, f"{where}.{name}")
    return cls(**kwargs)
