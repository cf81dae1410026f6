"""Experiment configuration: a plain-text key-value schema.

Grammar (one setting per line):
    key = value
    # comment lines and blank lines are ignored; '#' also starts an
    # inline comment after the value
Keys are dotted lowercase paths and must exist in the schema; unknown
keys are rejected. Values are int, float, bool (true/false), bare
strings, or comma-separated lists. The fingerprint is a sha256 digest
over the canonical effective settings (defaults included) and is
embedded in every artifact a command writes.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .model.config import ModelConfig
from .scenegen import SceneParams, default_rig
from .training import TrainPlan
from .voxel import GridSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Field:
    kind: str  # int | float | bool | str | int_list | str_list
    default: object
    choices: tuple = ()


_STAGE_FIELDS = {
    "epochs": Field("int", 15),
    "batch": Field("int", 4),
    "lr": Field("float", 2e-4),
    "weight_decay": Field("float", 1e-2),
    "seed": Field("int", 0),
    "eval_every": Field("int", 0),
}


def _stage(name, extra=None):
    out = {f"{name}.{k}": v for k, v in _STAGE_FIELDS.items()}
    for k, v in (extra or {}).items():
        out[f"{name}.{k}"] = v
    return out


SCHEMA: dict[str, Field] = {
    "dataset.seed": Field("int", 7),
    "dataset.grid_h": Field("int", 32),
    "dataset.grid_w": Field("int", 32),
    "dataset.grid_z": Field("int", 8),
    "dataset.voxel_size": Field("float", 0.5),
    "dataset.origin_x": Field("float", -8.0),
    "dataset.origin_y": Field("float", -8.0),
    "dataset.origin_z": Field("float", -0.5),
    "dataset.classes": Field("int", 4),
    "dataset.pretrain_scenes": Field("int", 150),
    "dataset.train_scenes": Field("int", 200),
    "dataset.val_scenes": Field("int", 50),
    "dataset.min_objects": Field("int", 3),
    "dataset.max_objects": Field("int", 8),
    "dataset.cameras": Field("int", 4),
    "dataset.view_h": Field("int", 32),
    "dataset.view_w": Field("int", 56),
    "dataset.focal": Field("float", 28.0),
    "dataset.sweeps": Field("int", 6),
    "dataset.lidar_rays": Field("int", 160),
    "dataset.max_range": Field("float", 24.0),
    "dataset.dir": Field("str", ""),
    "model.transform": Field("str", "lift_splat", ("lift_splat", "deformable")),
    "model.strategy": Field("str", "intermediate",
                            ("intermediate", "multi_head", "replacing")),
    "model.dense_layers": Field("int", 0),
    "model.sparse_layers": Field("int", 1),
    "model.heads": Field("int", 4),
    "model.self_points": Field("int", 4),
    "model.cross_points": Field("int", 8),
    "model.embed": Field("int", 32),
    "model.mid_channels": Field("int", 32),
    "model.out_channels": Field("int", 32),
    "model.mlp_hidden": Field("int", 64),
    "model.encoder_stem": Field("int", 16),
    "model.depth_bins": Field("int", 10),
    "model.depth_min": Field("float", 0.5),
    "model.depth_max": Field("float", 12.5),
    "model.threshold": Field("float", 0.5),
    "model.focal_gamma": Field("float", 2.0),
    "model.focal_alpha": Field("float", 1.0),
    "model.sparse_image_cross": Field("bool", True),
    "model.z_up_mid": Field("int", 1),
    "model.z_up_full": Field("int", 1),
    "model.init_seed": Field("int", 0),
    **_stage("pretrain", {"scenes_from": Field("int", 0),
                          "scenes_count": Field("int", 0)}),
    **_stage("finetune", {
        "regime": Field("str", "S+B*", ("S", "S+B*", "S+B")),
        "init": Field("str", "pretrain", ("pretrain", "none")),
        "binary_weight": Field("float", 1.0),
        "scenes_from": Field("int", 0),
        "scenes_count": Field("int", 0),
    }),
    **_stage("offboard", {"scenes_from": Field("int", 0),
                          "scenes_count": Field("int", 0)}),
    "autolabel.mode": Field("str", "top2", ("top1", "top2")),
    "autolabel.scenes_from": Field("int", 50),
    "autolabel.scenes_count": Field("int", 0),
    **_stage("student", {
        "binary_weight": Field("float", 1.0),
        "gt_from": Field("int", 0),
        "gt_count": Field("int", 50),
        "labels_dir": Field("str", ""),
    }),
    "eval.checkpoint": Field("str", "finetune"),
    "eval.split": Field("str", "val", ("pretrain", "train", "val")),
    "eval.mode": Field("str", "onboard", ("onboard", "offboard")),
    "eval.dump": Field("int", 0),
    "sweep.pretrain_counts": Field("int_list", (0, 50, 100, 150)),
    "sweep.seeds": Field("int_list", (0, 1, 2)),
    "sweep.strategies": Field("str_list", ("intermediate",)),
    "sweep.regimes": Field("str_list", ("S+B*",)),
    "sweep.finetune_scenes": Field("int", 50),
    "bev.z": Field("int", -1),
    "out.dir": Field("str", "runs/exp"),
}


def _parse_value(key: str, raw: str, field: Field):
    raw = raw.strip()
    try:
        if field.kind == "int":
            return int(raw)
        if field.kind == "float":
            return float(raw)
        if field.kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if field.kind == "int_list":
            return tuple(int(v) for v in raw.split(",") if v.strip() != "")
        if field.kind == "str_list":
            return tuple(v.strip() for v in raw.split(",") if v.strip() != "")
        return raw
    except ValueError as e:
        raise ConfigError(f"bad {field.kind} value for {key}: {raw!r}") from e


def _canonical(field: Field, value) -> str:
    if field.kind == "float":
        return repr(float(value))
    if field.kind == "bool":
        return "true" if value else "false"
    if field.kind in ("int_list", "str_list"):
        return ",".join(str(v) for v in value)
    return str(value)


class ExperimentConfig:
    def __init__(self, values: dict | None = None):
        values = dict(values or {})
        unknown = [k for k in values if k not in SCHEMA]
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        self.values = {k: values.get(k, f.default) for k, f in SCHEMA.items()}
        self._validate()

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _parse_value(key, raw, SCHEMA[key])
        return cls(values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.parse(path.read_text())

    def _validate(self):
        v = self.values
        for key, field in SCHEMA.items():
            if field.choices and v[key] not in field.choices:
                if field.kind.endswith("_list"):
                    continue
                raise ConfigError(f"{key} must be one of {field.choices}, "
                                  f"got {v[key]!r}")
        if v["dataset.min_objects"] > v["dataset.max_objects"]:
            raise ConfigError("dataset.min_objects exceeds dataset.max_objects")
        for k in ("dataset.pretrain_scenes", "dataset.train_scenes",
                  "dataset.val_scenes"):
            if v[k] < 0:
                raise ConfigError(f"{k} must be non-negative")
        for s in v["sweep.strategies"]:
            if s not in ("intermediate", "multi_head", "replacing"):
                raise ConfigError(f"sweep.strategies: unknown strategy {s!r}")
        for r in v["sweep.regimes"]:
            if r not in ("S", "S+B*", "S+B"):
                raise ConfigError(f"sweep.regimes: unknown regime {r!r}")

    def __getitem__(self, key):
        return self.values[key]

    def fingerprint(self) -> str:
        lines = [f"{k} = {_canonical(SCHEMA[k], self.values[k])}"
                 for k in sorted(self.values)]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]

    def canonical_text(self) -> str:
        return "\n".join(f"{k} = {_canonical(SCHEMA[k], self.values[k])}"
                         for k in sorted(self.values)) + "\n"

    # --- derived objects ------------------------------------------------------

    def grid_spec(self) -> GridSpec:
        v = self.values
        return GridSpec((v["dataset.grid_h"], v["dataset.grid_w"], v["dataset.grid_z"]),
                        v["dataset.voxel_size"],
                        (v["dataset.origin_x"], v["dataset.origin_y"],
                         v["dataset.origin_z"]))

    def scene_params(self) -> SceneParams:
        v = self.values
        rig = default_rig(v["dataset.cameras"], width=v["dataset.view_w"],
                          height=v["dataset.view_h"], focal=v["dataset.focal"])
        return SceneParams(spec=self.grid_spec(), num_classes=v["dataset.classes"],
                           object_count=(v["dataset.min_objects"],
                                         v["dataset.max_objects"]),
                           rig=rig, num_sweeps=v["dataset.sweeps"],
                           lidar_azimuths=v["dataset.lidar_rays"],
                           max_range=v["dataset.max_range"])

    def model_config(self, strategy: str | None = None) -> ModelConfig:
        v = self.values
        return ModelConfig(
            transform=v["model.transform"],
            strategy=strategy or v["model.strategy"],
            dense_layers=v["model.dense_layers"],
            sparse_layers=v["model.sparse_layers"],
            heads=v["model.heads"], self_points=v["model.self_points"],
            cross_points=v["model.cross_points"], embed=v["model.embed"],
            mid_channels=v["model.mid_channels"],
            out_channels=v["model.out_channels"], mlp_hidden=v["model.mlp_hidden"],
            encoder_stem=v["model.encoder_stem"], depth_bins=v["model.depth_bins"],
            depth_min=v["model.depth_min"], depth_max=v["model.depth_max"],
            threshold=v["model.threshold"], focal_gamma=v["model.focal_gamma"],
            focal_alpha=v["model.focal_alpha"],
            sparse_image_cross=v["model.sparse_image_cross"],
            z_up_mid=v["model.z_up_mid"], z_up_full=v["model.z_up_full"])

    def plan(self, stage: str, seed: int | None = None, **overrides) -> TrainPlan:
        section = {"pretrain_binary": "pretrain", "finetune": "finetune",
                   "offboard": "offboard", "student": "student"}[stage]
        v = self.values
        kwargs = dict(
            stage=stage,
            epochs=v[f"{section}.epochs"],
            batch_size=v[f"{section}.batch"],
            seed=v[f"{section}.seed"] if seed is None else seed,
            lr=v[f"{section}.lr"],
            weight_decay=v[f"{section}.weight_decay"],
            eval_every=v[f"{section}.eval_every"],
        )
        if section == "finetune":
            kwargs["regime"] = v["finetune.regime"]
            kwargs["binary_weight"] = v["finetune.binary_weight"]
        if section == "student":
            kwargs["regime"] = "S+B*"
            kwargs["binary_weight"] = v["student.binary_weight"]
        kwargs.update(overrides)
        return TrainPlan(**kwargs)

    def out_dir(self) -> Path:
        return Path(self.values["out.dir"])

    def dataset_dir(self) -> Path:
        d = self.values["dataset.dir"]
        return Path(d) if d else self.out_dir() / "dataset"
