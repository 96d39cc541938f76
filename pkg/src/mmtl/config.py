"""Flat key = value run configuration.

The format is deliberately diff-friendly: one dotted key per line,
``#`` comments, no nesting. A fully annotated example ships in
``configs/mmt_suite.cfg``. Unknown keys are field-level errors, as are
contradictory settings (e.g. the full-adaptation baseline with more than
one task).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from mmtl.data import SyntheticWorld
from mmtl.engine import HyperParams, TaskSpec
from mmtl.models import (
    AttentionConfig,
    BackboneConfig,
    HeadSpec,
    LabelSpec,
    ModelConfig,
)

TASK_KINDS = ("classification", "depth", "normal", "vanishing_point")


class ConfigError(ValueError):
    """Invalid or contradictory run configuration; message names the field."""


def parse_flat_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        key, val = key.strip(), val.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def config_digest(flat: dict[str, str]) -> str:
    canon = "\n".join(f"{k} = {flat[k]}" for k in sorted(flat))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


class _Fields:
    """Typed, consume-tracking view over the flat dict."""

    def __init__(self, flat: dict[str, str]):
        self.flat = dict(flat)
        self.seen: set[str] = set()

    def _get(self, key, default):
        self.seen.add(key)
        if key not in self.flat:
            if default is _REQUIRED:
                raise ConfigError(f"{key}: required field is missing")
            return default
        return self.flat[key]

    def str_(self, key, default=None, choices=None):
        v = self._get(key, default)
        if choices and v not in choices:
            raise ConfigError(f"{key}: {v!r} not one of {sorted(choices)}")
        return v

    def int_(self, key, default=None, lo=None):
        v = self._get(key, default)
        if isinstance(v, str):
            try:
                v = int(v)
            except ValueError:
                raise ConfigError(f"{key}: {v!r} is not an integer") from None
        if lo is not None and v < lo:
            raise ConfigError(f"{key}: {v} is below the minimum {lo}")
        return v

    def float_(self, key, default=None, lo=None):
        v = self._get(key, default)
        if isinstance(v, str):
            try:
                v = float(v)
            except ValueError:
                raise ConfigError(f"{key}: {v!r} is not a number") from None
        if lo is not None and v < lo:
            raise ConfigError(f"{key}: {v} is below the minimum {lo}")
        return float(v)

    def unknown(self) -> list[str]:
        return sorted(set(self.flat) - self.seen)


_REQUIRED = object()


@dataclass
class RunConfig:
    """A validated, assembled run: data source, model, tasks, loop shape."""

    flat: dict[str, str]
    variant: str = "baseline"
    seed: int = 0
    iterations: int = 100
    eval_every: int = 50
    eval_episodes: int = 10
    eval_pool: str = "val"
    outdir: str = "runs/out"
    dtype: str = "float64"
    source: str = "synthetic"
    data_path: str = ""
    world: SyntheticWorld = None
    model: ModelConfig = None
    tasks: dict[str, TaskSpec] = field(default_factory=dict)
    hyper: HyperParams = None

    def digest(self) -> str:
        return config_digest(self.flat)


def load_run_config(path: str | Path) -> RunConfig:
    return run_config_from_flat(parse_flat_config(Path(path).read_text(
        encoding="utf-8")))


def run_config_from_flat(flat: dict[str, str]) -> RunConfig:
    f = _Fields(flat)
    variant = f.str_("run.variant", "baseline",
                     choices={"baseline", "am", "pam", "maml_full"})
    seed = f.int_("run.seed", 0)
    iterations = f.int_("run.iterations", 100, lo=0)
    eval_every = f.int_("run.eval_every", 50, lo=1)
    eval_episodes = f.int_("run.eval_episodes", 10, lo=1)
    eval_pool = f.str_("run.eval_pool", "val", choices={"val", "test"})
    outdir = f.str_("run.outdir", "runs/out")
    dtype = f.str_("run.dtype", "float64", choices={"float64", "float32"})

    blocks = f.int_("model.blocks", 4, lo=1)
    channels = f.int_("model.channels", 32, lo=1)
    attn_depth = f.int_("model.attention_depth", 2, lo=1)
    attn_width = f.int_("model.attention_width", 4, lo=1)

    source = f.str_("data.source", "synthetic", choices={"synthetic", "directory"})
    image_size = f.int_("data.image_size", 64, lo=8)
    img_channels = f.int_("data.channels", 3, lo=1)
    data_path = f.str_("data.path", "")

    try:
        backbone = BackboneConfig(blocks=blocks, channels=channels,
                                  in_shape=(img_channels, image_size, image_size))
    except ValueError as exc:
        raise ConfigError(f"model.blocks/data.image_size: {exc}") from None
    s_h, s_w = backbone.final_spatial()
    dense_hw = s_h * 16  # four doubling stages in the conv-transpose heads

    world = SyntheticWorld(
        seed=seed, image_size=image_size, channels=img_channels,
        label_size=dense_hw,
        train_subtasks=f.int_("data.train_subtasks", 20, lo=1),
        val_subtasks=f.int_("data.val_subtasks", 10, lo=1),
        test_subtasks=f.int_("data.test_subtasks", 12, lo=1),
        train_classes=f.int_("data.train_classes", 12, lo=1),
        val_classes=f.int_("data.val_classes", 6, lo=1),
        test_classes=f.int_("data.test_classes", 8, lo=1))

    task_ids = sorted({k.split(".")[1] for k in flat if k.startswith("tasks.")})
    if not task_ids:
        raise ConfigError("tasks: at least one tasks.<id>.kind entry is required")
    tasks: dict[str, TaskSpec] = {}
    loss_weights: dict[str, float] = {}
    for tid in task_ids:
        kind = f.str_(f"tasks.{tid}.kind", _REQUIRED, choices=set(TASK_KINDS))
        loss_weights[tid] = f.float_(f"tasks.{tid}.loss_weight", 1.0)
        if loss_weights[tid] <= 0:
            raise ConfigError(f"tasks.{tid}.loss_weight: must be positive")
        if kind == "classification":
            n_way = f.int_(f"tasks.{tid}.n_way", 5, lo=2)
            tasks[tid] = TaskSpec(
                task_id=tid, kind="classification",
                adaptation_mode="task_adaptation",
                head=HeadSpec(kind="fully_connected", out_dim=n_way),
                label=LabelSpec(kind="classes", classes=n_way),
                n_way=n_way,
                k_shot=f.int_(f"tasks.{tid}.k_shot", 1, lo=1),
                n_query=f.int_(f"tasks.{tid}.n_query", 15, lo=1))
        elif kind in ("depth", "normal"):
            if dense_hw < 8:
                raise ConfigError(
                    f"tasks.{tid}: dense labels of {dense_hw}px are too small "
                    f"for the label encoder (needs >= 8)")
            out_c, filters = (1, 4) if kind == "depth" else (3, 8)
            tasks[tid] = TaskSpec(
                task_id=tid, kind="dense_regression",
                adaptation_mode="domain_adaptation",
                head=HeadSpec(kind="conv_transpose",
                              out_shape=(out_c, dense_hw, dense_hw),
                              filters=filters),
                label=LabelSpec(kind="image", shape=(out_c, dense_hw, dense_hw)),
                n_support=f.int_(f"tasks.{tid}.n_support", 10, lo=2),
                n_query=f.int_(f"tasks.{tid}.n_query", 15, lo=1),
                dense_kind=kind)
        else:  # vanishing_point
            tasks[tid] = TaskSpec(
                task_id=tid, kind="vector_regression",
                adaptation_mode="domain_adaptation",
                head=HeadSpec(kind="fully_connected", out_dim=2),
                label=LabelSpec(kind="vector", dim=2),
                n_support=f.int_(f"tasks.{tid}.n_support", 10, lo=2),
                n_query=f.int_(f"tasks.{tid}.n_query", 15, lo=1))

    if variant == "maml_full" and len(tasks) != 1:
        raise ConfigError(
            f"run.variant: maml_full handles exactly one task, got {len(tasks)}")
    if source == "directory":
        if not data_path:
            raise ConfigError("data.path: required for the directory source")
        bad = [tid for tid, t in tasks.items() if t.kind != "classification"]
        if bad:
            raise ConfigError(
                f"data.source: directory data only supports classification "
                f"tasks, got {bad}")

    hyper = HyperParams(
        inner_lr=f.float_("hyper.inner_lr", 0.01, lo=0.0),
        inner_steps=f.int_("hyper.inner_steps", 5, lo=0),
        backbone_lr=f.float_("hyper.backbone_lr", 1e-3, lo=0.0),
        attention_lr=f.float_("hyper.attention_lr", 1e-3, lo=0.0),
        loss_weights=loss_weights,
        variant=variant,
        outer_batch=f.int_("hyper.outer_batch", 4, lo=1),
        outer_rule=f.str_("hyper.outer_rule", "adam", choices={"adam", "sgd"}),
        seed=seed)

    model = ModelConfig(
        backbone=backbone,
        heads={tid: t.head for tid, t in tasks.items()},
        labels={tid: t.label for tid, t in tasks.items()},
        attention=(AttentionConfig(depth=attn_depth, width=attn_width)
                   if variant in ("am", "pam") else None),
        probabilistic=(variant == "pam"))

    leftover = f.unknown()
    if leftover:
        raise ConfigError(f"unknown configuration keys: {leftover}")

    return RunConfig(flat=dict(flat), variant=variant, seed=seed,
                     iterations=iterations, eval_every=eval_every,
                     eval_episodes=eval_episodes, eval_pool=eval_pool,
                     outdir=outdir, dtype=dtype, source=source,
                     data_path=data_path, world=world, model=model,
                     tasks=tasks, hyper=hyper)
