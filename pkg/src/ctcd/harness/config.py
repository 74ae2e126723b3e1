"""Run configuration and its text format.

Grammar, one setting per line::

    # comment (also allowed after a value)
    section.key = value

Blank lines are ignored; keys may not repeat. Lists are comma separated,
booleans are ``true``/``false``, and ``none`` clears an optional value.
Unknown keys are errors. ``CTCD_SEED`` in the environment overrides
``train.seed``.
"""

from __future__ import annotations

import os
from collections.abc import Mapping
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ctcd.distill import DistillPlan, LayerPair
from ctcd.errors import ConfigError
from ctcd.harness.optim import AdamConfig
from ctcd.models import EncoderSpec
from ctcd.synthdata import TaskSpec

SEED_ENV = "CTCD_SEED"

# the default toy task: 5 letters plus space, 8-dim features, noise at template scale
DEFAULT_TASK = {"alphabet_size": 6, "feature_dim": 8, "sigma": 1.0}


@dataclass
class DataConfig:
    train_count: int = 240
    eval_count: int = 100
    train_path: str | None = None
    eval_path: str | None = None


@dataclass
class RunConfig:
    task: TaskSpec
    student: EncoderSpec
    plan: DistillPlan = field(default_factory=DistillPlan)
    optim: AdamConfig = field(default_factory=AdamConfig)
    data: DataConfig = field(default_factory=DataConfig)
    batch_size: int = 16
    stage1_epochs: int = 5
    stage2_epochs: int = 50
    seed: int = 1
    output_dir: str | None = None
    init_checkpoint: object = None  # start the student from this checkpoint (path or Checkpoint)

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.student.input_dim != self.task.feature_dim:
            raise ConfigError(
                f"student input_dim {self.student.input_dim} != task feature_dim {self.task.feature_dim}"
            )
        if self.student.alphabet_size != self.task.num_classes:
            raise ConfigError(
                f"student alphabet_size {self.student.alphabet_size} != |Y'| = {self.task.num_classes}"
            )

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)


# -- parsing ------------------------------------------------------------------------


def parse_lines(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.count(".") != 1 or not all(key.split(".")):
            raise ConfigError(f"config line {lineno}: key {key!r} must look like section.key")
        if key in out:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    return float(v)


def _bool(v: str) -> bool:
    if v.lower() not in ("true", "false"):
        raise ValueError(f"expected true/false, got {v!r}")
    return v.lower() == "true"


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _opt_str(v: str) -> str | None:
    return None if v.lower() == "none" else v


_TASK_KEYS = {
    "alphabet_size": _int, "feature_dim": _int, "d_min": _int, "d_max": _int, "sigma": _float,
    "silence_prob": _float, "min_symbols": _int, "max_symbols": _int, "seed": _int,
}
_STUDENT_KEYS = {"family": str, "layer_widths": _ints, "kernel_widths": _ints, "bidirectional": _bool}
_PLAN_KEYS = {
    "skd_teacher": _opt_str, "rkd_teacher": _opt_str, "lambda_skd": _float, "tau": _float,
    "guided_weight": _float, "nbest_n": _int, "beam_width": _int, "frame_weighting": _bool,
    "adapter_width": _int, "teacher_layer": _int, "student_layer": _int,
}
_OPTIM_KEYS = {
    "lr": _float, "beta1": _float, "beta2": _float, "eps": _float, "poly_decay": _bool,
    "power": _float, "end_lr": _float, "stage1_lr": lambda v: None if v.lower() == "none" else float(v),
}
_DATA_KEYS = {"train_count": _int, "eval_count": _int, "train_path": _opt_str, "eval_path": _opt_str}
_TRAIN_KEYS = {
    "batch_size": _int, "stage1_epochs": _int, "stage2_epochs": _int, "seed": _int, "output_dir": _opt_str,
    "init_checkpoint": _opt_str,
}
SCHEMA = {
    "task": _TASK_KEYS, "student": _STUDENT_KEYS, "distill": _PLAN_KEYS,
    "optim": _OPTIM_KEYS, "data": _DATA_KEYS, "train": _TRAIN_KEYS,
}


def _section(values: Mapping[str, str], name: str) -> dict:
    schema = SCHEMA[name]
    out = {}
    for key, raw in values.items():
        sec, k = key.split(".")
        if sec != name:
            continue
        if k not in schema:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[k] = schema[k](raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return out


def build_config(values: Mapping[str, str], env: Mapping[str, str] | None = None) -> RunConfig:
    """Assemble a RunConfig from ``section.key -> raw string`` settings."""
    unknown = {k.split(".")[0] for k in values} - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    task = TaskSpec(**{**DEFAULT_TASK, **_section(values, "task")})
    stu = _section(values, "student")
    family = stu.pop("family", "tdnn")
    if family == "tdnn":
        stu.setdefault("layer_widths", (24,))
        stu.setdefault("kernel_widths", (5,) * len(stu["layer_widths"]))
    else:
        stu.setdefault("layer_widths", (12,))
    student = EncoderSpec(family, task.feature_dim, alphabet_size=task.num_classes, **stu)
    plan_kw = _section(values, "distill")
    pair = LayerPair(plan_kw.pop("teacher_layer", -1), plan_kw.pop("student_layer", -1))
    plan = DistillPlan(layer_pairs=[pair], **plan_kw)
    train = _section(values, "train")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            train["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return RunConfig(
        task=task,
        student=student,
        plan=plan,
        optim=AdamConfig(**_section(values, "optim")),
        data=DataConfig(**_section(values, "data")),
        **train,
    )


def load_config(path: str | os.PathLike, env: Mapping[str, str] | None = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = build_config(parse_lines(text), env)
    # relative paths inside a config resolve against the config's directory
    base = Path(path).parent
    fix = lambda p: p if p is None or os.path.isabs(p) else str(base / p)  # noqa: E731
    cfg.plan.skd_teacher = fix(cfg.plan.skd_teacher)
    cfg.plan.rkd_teacher = fix(cfg.plan.rkd_teacher)
    cfg.data.train_path = fix(cfg.data.train_path)
    cfg.data.eval_path = fix(cfg.data.eval_path)
    cfg.output_dir = fix(cfg.output_dir)
    cfg.init_checkpoint = fix(cfg.init_checkpoint)
    return cfg


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (int, str)):
        return str(v)
    return "none  # in-memory object, not representable"


def dump_config(cfg: RunConfig) -> str:
    """Text form of ``cfg`` that ``build_config(parse_lines(...))`` reads back."""
    lines = []
    for k in _TASK_KEYS:
        lines.append(f"task.{k} = {_fmt(getattr(cfg.task, k))}")
    for k in _STUDENT_KEYS:
        if k == "kernel_widths" and cfg.student.family != "tdnn":
            continue
        lines.append(f"student.{k} = {_fmt(getattr(cfg.student, k))}")
    pair = cfg.plan.layer_pairs[0]
    for k in _PLAN_KEYS:
        v = getattr(pair, k) if k.endswith("_layer") else getattr(cfg.plan, k)
        lines.append(f"distill.{k} = {_fmt(v)}")
    for f in fields(AdamConfig):
        lines.append(f"optim.{f.name} = {_fmt(getattr(cfg.optim, f.name))}")
    for f in fields(DataConfig):
        lines.append(f"data.{f.name} = {_fmt(getattr(cfg.data, f.name))}")
    for k in _TRAIN_KEYS:
        lines.append(f"train.{k} = {_fmt(getattr(cfg, k))}")
    return "\n".join(lines) + "\n"
