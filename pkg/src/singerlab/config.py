"""Run configuration and its line-oriented ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .vit import ArtifactPlan, ModelSpec


class ConfigError(ValueError):
    pass


METHODS = ("singer", "fitnet", "mask")

TEACHER_SPEC = ModelSpec(depth=8, dim=64, heads=4, mlp_ratio=4, patch=4, image=32, num_classes=8, seed=0)
STUDENT_SPEC = ModelSpec(depth=4, dim=32, heads=2, mlp_ratio=4, patch=4, image=32, num_classes=8, seed=1)
ARTIFACT_PLAN = ArtifactPlan(layers=(5,), fraction=0.05, gain=10.0, seed=0)


def default_layers(teacher_depth: int, stride: int = 2, offset: int = 1) -> tuple[int, ...]:
    """Intermediate tap at 17/24 of the depth (snapped onto the student map) plus the last layer."""
    last = teacher_depth - 1
    target = teacher_depth * 17 / 24
    cands = [l for l in range(offset, last) if (l - offset) % stride == 0]
    if not cands:
        return (last,)
    inter = min(cands, key=lambda l: (abs(l - target), l))
    return (inter, last)


@dataclass(frozen=True)
class RunConfig:
    method: str = "singer"
    layers: tuple[int, ...] = (5, 7)
    rank: int = 16
    alpha: float = 0.95
    lambda_out: float = 1.0
    lambda_info: float = 1.0
    epochs: int = 50
    batch: int = 64
    lr_start: float = 1e-3
    lr_end: float = 1e-8
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    seed: int = 0
    mask_ratio: float = 0.5
    init: str = "nullspace"
    gram: str = "normalized"
    quantile_method: str = "linear"
    layer_stride: int = 2
    layer_offset: int = 1
    eval_images: int = 64
    teacher_epochs: int = 30
    teacher_lr: float = 1e-3
    teacher: ModelSpec = TEACHER_SPEC
    student: ModelSpec = STUDENT_SPEC
    artifact: ArtifactPlan | None = ARTIFACT_PLAN

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(sorted(set(int(l) for l in self.layers))))
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.layers:
            raise ConfigError("at least one distillation layer is required")
        if self.layers[-1] != self.teacher.depth - 1:
            raise ConfigError(f"the final teacher layer {self.teacher.depth - 1} must be a distillation layer")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError("need lr_start >= lr_end > 0")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if self.init not in ("nullspace", "random"):
            raise ConfigError("init must be 'nullspace' or 'random'")
        if self.gram not in ("normalized", "raw"):
            raise ConfigError("gram must be 'normalized' or 'raw'")
        if self.epochs < 0 or self.batch < 1:
            raise ConfigError("epochs must be >= 0 and batch >= 1")

    def student_layer(self, teacher_layer: int) -> int:
        s, rem = divmod(teacher_layer - self.layer_offset, self.layer_stride)
        if rem or not 0 <= s < self.student.depth:
            raise ConfigError(f"teacher layer {teacher_layer} has no aligned student layer")
        return s


_SPEC_FIELDS = [f.name for f in fields(ModelSpec)]
_PLAN_FIELDS = ["layers", "fraction", "gain", "seed"]
_SIMPLE = [f.name for f in fields(RunConfig) if f.name not in ("teacher", "student", "artifact")]


def known_keys() -> list[str]:
    keys = list(_SIMPLE)
    keys += [f"teacher.{k}" for k in _SPEC_FIELDS] + [f"student.{k}" for k in _SPEC_FIELDS]
    keys += [f"artifact.{k}" for k in _PLAN_FIELDS] + ["artifact"]
    return keys


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: RunConfig) -> str:
    lines = [f"{k} = {_fmt(getattr(cfg, k))}" for k in _SIMPLE]
    lines += [f"teacher.{k} = {getattr(cfg.teacher, k)}" for k in _SPEC_FIELDS]
    lines += [f"student.{k} = {getattr(cfg.student, k)}" for k in _SPEC_FIELDS]
    if cfg.artifact is None:
        lines.append("artifact = none")
    else:
        lines += [f"artifact.{k} = {_fmt(getattr(cfg.artifact, k))}" for k in _PLAN_FIELDS]
    return "\n".join(lines) + "\n"


def parse_pairs(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(value: str, like, key: str):
    try:
        if isinstance(like, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, tuple):
            return tuple(int(x) for x in value.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r}") from exc
    return value


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse a config file; unknown keys are rejected, invariants checked."""
    pairs = parse_pairs(text)
    unknown = sorted(set(pairs) - set(known_keys()))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    base = base or RunConfig()
    simple = {k: _convert(v, getattr(base, k), k) for k, v in pairs.items() if k in _SIMPLE}
    try:
        teacher = replace(base.teacher, **{k[8:]: _convert(v, getattr(base.teacher, k[8:]), k)
                                           for k, v in pairs.items() if k.startswith("teacher.")})
        student = replace(base.student, **{k[8:]: _convert(v, getattr(base.student, k[8:]), k)
                                           for k, v in pairs.items() if k.startswith("student.")})
        artifact = base.artifact
        if pairs.get("artifact", "").lower() == "none":
            artifact = None
        else:
            plan_kw = {k[9:]: v for k, v in pairs.items() if k.startswith("artifact.")}
            if plan_kw:
                current = artifact or ArtifactPlan(layers=(0,), fraction=0.05, gain=10.0)
                artifact = replace(current, **{k: _convert(v, getattr(current, k), "artifact." + k)
                                               for k, v in plan_kw.items()})
        if "layers" not in simple and teacher.depth != base.teacher.depth:
            simple["layers"] = default_layers(teacher.depth, simple.get("layer_stride", base.layer_stride),
                                              simple.get("layer_offset", base.layer_offset))
        return replace(base, teacher=teacher, student=student, artifact=artifact, **simple)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def spec_to_text(prefix: str, spec: ModelSpec) -> str:
    return "".join(f"{prefix}.{k} = {getattr(spec, k)}\n" for k in _SPEC_FIELDS)


def spec_from_pairs(pairs: dict[str, str], prefix: str) -> ModelSpec:
    kw = {}
    for k in _SPEC_FIELDS:
        key = f"{prefix}.{k}"
        if key in pairs:
            kw[k] = int(pairs[key])
    return ModelSpec(**kw)


def plan_to_text(plan: ArtifactPlan | None) -> str:
    if plan is None:
        return "artifact = none\n"
    return "".join(f"artifact.{k} = {_fmt(getattr(plan, k))}\n" for k in _PLAN_FIELDS)


def plan_from_pairs(pairs: dict[str, str]) -> ArtifactPlan | None:
    if pairs.get("artifact", "").lower() == "none" or "artifact.layers" not in pairs:
        return None
    return ArtifactPlan(
        layers=tuple(int(x) for x in pairs["artifact.layers"].split(",") if x.strip()),
        fraction=float(pairs["artifact.fraction"]),
        gain=float(pairs["artifact.gain"]),
        seed=int(pairs.get("artifact.seed", 0)),
    )


def as_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
