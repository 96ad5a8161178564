"""Run configuration: one JSON document holding every knob of a run.

Unknown keys are rejected. A top-level ``seed`` is mandatory; it seeds
training and, unless the dataset section sets its own, synthetic data.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .augment import AugmentPolicy
from .dataset import (
    Manifest,
    Source,
    SynthParams,
    load_manifest_file,
    merge,
    synth_manifest,
)
from .nn import BackboneConfig, tiny_preset
from .preproc import PreprocConfig
from .train import TrainConfig

TOP_KEYS = {"seed", "output_dir", "dataset", "preproc", "augment", "backbone", "train", "ablation_seeds"}
SYNTH_KEYS = {"kind", "per_grade", "image_side", "lesions_per_grade", "vessel_walks", "seed"}
MANIFEST_KEYS = {"csv", "image_dir", "source", "id_column", "grade_column", "extension"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int
    dataset: dict
    output_dir: str = "run"
    preproc: PreprocConfig = field(default_factory=PreprocConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    backbone: BackboneConfig = field(default_factory=tiny_preset)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])

    def resolved(self) -> dict:
        """Fully expanded config, defaults included; reloading it reproduces the run."""
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": self.dataset,
            "preproc": self.preproc.to_dict(),
            "augment": self.augment.to_dict(),
            "backbone": self.backbone.to_dict(),
            "train": train,
            "ablation_seeds": list(self.ablation_seeds),
        }

    def load_dataset(self) -> Manifest:
        return build_manifest(self.dataset)


def _resolve_dataset(d: dict, seed: int) -> dict:
    kind = d.get("kind")
    if kind == "synth":
        unknown = set(d) - SYNTH_KEYS
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        defaults = SynthParams()
        out = {
            "kind": "synth",
            "per_grade": int(d.get("per_grade", 120)),
            "image_side": int(d.get("image_side", defaults.image_side)),
            "lesions_per_grade": int(d.get("lesions_per_grade", defaults.lesions_per_grade)),
            "vessel_walks": int(d.get("vessel_walks", defaults.vessel_walks)),
            "seed": int(d.get("seed", seed)),
        }
        if out["per_grade"] < 1:
            raise ConfigError("dataset.per_grade must be >= 1")
        return out
    if kind == "manifest":
        unknown = set(d) - {"kind", "manifests"}
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        entries = d.get("manifests")
        if not entries:
            raise ConfigError("dataset.manifests must list at least one manifest")
        resolved = []
        for e in entries:
            unknown = set(e) - MANIFEST_KEYS
            if unknown:
                raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
            if "csv" not in e:
                raise ConfigError("each manifest entry needs a csv path")
            resolved.append(
                {
                    "csv": e["csv"],
                    "image_dir": e.get("image_dir", str(Path(e["csv"]).parent)),
                    "source": Source(e.get("source", "APTOS")).value,
                    "id_column": e.get("id_column", "id_code"),
                    "grade_column": e.get("grade_column", "diagnosis"),
                    "extension": e.get("extension", ".png"),
                }
            )
        return {"kind": "manifest", "manifests": resolved}
    raise ConfigError(f"dataset.kind must be 'synth' or 'manifest', got {kind!r}")


def build_manifest(d: dict) -> Manifest:
    if d["kind"] == "synth":
        params = SynthParams(d["image_side"], d["lesions_per_grade"], d["vessel_walks"], d["seed"])
        return synth_manifest(d["per_grade"], params)
    out = Manifest()
    for e in d["manifests"]:
        m = load_manifest_file(
            e["csv"],
            e["source"],
            id_column=e["id_column"],
            grade_column=e["grade_column"],
            image_dir=e["image_dir"],
            extension=e["extension"],
        )
        out = merge(out, m)
    return out


def parse_run_config(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(d) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "seed" not in d:
        raise ConfigError("run config needs an explicit top-level 'seed'")
    if "dataset" not in d:
        raise ConfigError("run config needs a 'dataset' section")
    try:
        seed = int(d["seed"])
        backbone_d = dict(d.get("backbone", {"preset": "tiny"}))
        preset = backbone_d.pop("preset", None)
        if preset is not None:
            if preset != "tiny" or backbone_d.keys() - {"input_side"}:
                raise ConfigError("backbone preset 'tiny' accepts only an optional input_side")
            backbone = tiny_preset(**backbone_d)
        else:
            backbone = BackboneConfig.from_dict(backbone_d)
        train_d = dict(d.get("train", {}))
        if "seed" in train_d:
            raise ConfigError("set the seed at the top level, not in 'train'")
        cfg = RunConfig(
            seed=seed,
            dataset=_resolve_dataset(d["dataset"], seed),
            output_dir=str(d.get("output_dir", "run")),
            preproc=PreprocConfig.from_dict(d.get("preproc", {})),
            augment=AugmentPolicy.from_dict(d.get("augment", {})),
            backbone=backbone,
            train=replace(TrainConfig.from_dict(train_d), seed=seed),
            ablation_seeds=[int(s) for s in d.get("ablation_seeds", [0, 1, 2])],
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.backbone.input_side != cfg.preproc.target_side:
        raise ConfigError(
            f"backbone.input_side {cfg.backbone.input_side} differs from preproc.target_side {cfg.preproc.target_side}"
        )
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(d)


def write_resolved(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
