"""Pipeline configuration: JSON schema, defaults, and strict validation.

A config file carries the whole run declaratively; command-line flags only
pick files and override the seed/round count.  Unknown keys anywhere are
rejected so typos cannot silently fall back to defaults.  The effective
config (defaults applied, manifest path resolved) is dumped into the run
directory and can be re-run to reproduce the run exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import IMAGENET_MEAN, IMAGENET_STD, AugmentConfig
from .dataio import SampleManifest, read_manifest
from .errors import InvalidConfigError
from .inference import DEFAULT_VIEWS, parse_views
from .model import TrainStageConfig

_STAGE_DEFAULTS = {
    "stage1": {"epochs": 40, "batch_size": 8, "lr": 6e-5, "resolution": 512},
    "stage2": {"epochs": 25, "batch_size": 1, "lr": 1e-5, "resolution": 1024},
}


@dataclass
class DataConfig:
    manifest_path: str
    num_classes: int = 2


@dataclass
class SelfTrainConfig:
    rounds: int = 2
    tau_pixel: float = 0.90
    tau_image: float = 0.90
    k_folds: int = 10
    pseudolabel_tta: bool = True


@dataclass
class OutputConfig:
    run_dir: str = "runs/run"
    submission_resolution: int = 512
    run_dir_explicit: bool = False  # whether the config file set run_dir itself


@dataclass
class PipelineConfig:
    seed: int
    data: DataConfig
    stage0: TrainStageConfig
    stage1: TrainStageConfig
    stage2: TrainStageConfig
    selftrain: SelfTrainConfig
    augment: AugmentConfig
    tta: list[str]
    output: OutputConfig

    def load_manifest(self) -> SampleManifest:
        return read_manifest(self.data.manifest_path)

    def views(self):
        return parse_views(self.tta)


def _require_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise InvalidConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _as_number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidConfigError(f"{where} must be a number, got {value!r}")
    return value


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidConfigError(f"{where} must be an integer, got {value!r}")
    return value


def _parse_stage(section: dict, defaults: dict, where: str) -> TrainStageConfig:
    allowed = {"epochs", "batch_size", "lr", "resolution", "shuffle_seed",
               "weight_decay"}
    _require_keys(section, allowed, where)
    merged = dict(defaults)
    merged.update(section)
    if merged.get("shuffle_seed") is not None:
        _as_int(merged["shuffle_seed"], f"{where}.shuffle_seed")
    stage = TrainStageConfig(
        epochs=_as_int(merged["epochs"], f"{where}.epochs"),
        batch_size=_as_int(merged["batch_size"], f"{where}.batch_size"),
        lr=_as_number(merged["lr"], f"{where}.lr"),
        resolution=_as_int(merged["resolution"], f"{where}.resolution"),
        shuffle_seed=merged.get("shuffle_seed"),
        weight_decay=_as_number(merged.get("weight_decay", 0.01),
                                f"{where}.weight_decay"),
    )
    if stage.epochs < 0 or stage.batch_size < 1 or stage.resolution < 1:
        raise InvalidConfigError(f"{where}: epochs/batch_size/resolution out of range")
    return stage


def _parse_augment(section: dict, pipeline_seed: int) -> AugmentConfig:
    allowed = {"crop_size", "p_hflip", "p_vflip", "p_rot90", "scale_range",
               "translate_range", "rotate_range", "brightness_contrast_range",
               "hsv_shift_limits", "normalize_mean", "normalize_std", "seed"}
    _require_keys(section, allowed, "augment")
    cfg = AugmentConfig(
        crop_size=_as_int(section.get("crop_size", 512), "augment.crop_size"),
        p_hflip=_as_number(section.get("p_hflip", 0.5), "augment.p_hflip"),
        p_vflip=_as_number(section.get("p_vflip", 0.5), "augment.p_vflip"),
        p_rot90=_as_number(section.get("p_rot90", 0.5), "augment.p_rot90"),
        scale_range=_as_number(section.get("scale_range", 0.20), "augment.scale_range"),
        translate_range=_as_number(section.get("translate_range", 0.0625),
                                   "augment.translate_range"),
        rotate_range=_as_number(section.get("rotate_range", 30.0),
                                "augment.rotate_range"),
        brightness_contrast_range=_as_number(
            section.get("brightness_contrast_range", 0.30),
            "augment.brightness_contrast_range"),
        hsv_shift_limits=tuple(section.get("hsv_shift_limits", (10.0, 0.15, 0.15))),
        normalize_mean=tuple(section.get("normalize_mean", IMAGENET_MEAN)),
        normalize_std=tuple(section.get("normalize_std", IMAGENET_STD)),
        seed=section.get("seed") if section.get("seed") is not None else pipeline_seed,
    )
    if len(cfg.hsv_shift_limits) != 3:
        raise InvalidConfigError("augment.hsv_shift_limits must have 3 entries")
    if len(cfg.normalize_mean) != 3 or len(cfg.normalize_std) != 3:
        raise InvalidConfigError("augment normalization constants must have 3 entries")
    try:
        cfg.validate()
    except Exception as exc:
        raise InvalidConfigError(str(exc)) from exc
    return cfg


def parse_config(doc: dict, base_dir: Path) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise InvalidConfigError("config root must be a JSON object")
    allowed = {"seed", "data", "stage0", "stage1", "stage2", "selftrain",
               "augment", "tta", "output"}
    _require_keys(doc, allowed, "config")

    seed = _as_int(doc.get("seed", 0), "seed")

    data_raw = doc.get("data")
    if not isinstance(data_raw, dict) or "manifest_path" not in data_raw:
        raise InvalidConfigError("config requires data.manifest_path")
    _require_keys(data_raw, {"manifest_path", "num_classes"}, "data")
    manifest_path = str((base_dir / data_raw["manifest_path"]).resolve())
    data = DataConfig(manifest_path,
                      _as_int(data_raw.get("num_classes", 2), "data.num_classes"))
    if data.num_classes < 2:
        raise InvalidConfigError("data.num_classes must be >= 2")

    stage1 = _parse_stage(doc.get("stage1", {}), _STAGE_DEFAULTS["stage1"], "stage1")
    stage2 = _parse_stage(doc.get("stage2", {}), _STAGE_DEFAULTS["stage2"], "stage2")
    stage1_values = {"epochs": stage1.epochs, "batch_size": stage1.batch_size,
                     "lr": stage1.lr, "resolution": stage1.resolution}
    stage0 = _parse_stage(doc.get("stage0", {}), stage1_values, "stage0")

    st_raw = doc.get("selftrain", {})
    _require_keys(st_raw, {"rounds", "tau_pixel", "tau_image", "k_folds",
                           "pseudolabel_tta"}, "selftrain")
    selftrain = SelfTrainConfig(
        rounds=_as_int(st_raw.get("rounds", 2), "selftrain.rounds"),
        tau_pixel=_as_number(st_raw.get("tau_pixel", 0.90), "selftrain.tau_pixel"),
        tau_image=_as_number(st_raw.get("tau_image", 0.90), "selftrain.tau_image"),
        k_folds=_as_int(st_raw.get("k_folds", 10), "selftrain.k_folds"),
        pseudolabel_tta=bool(st_raw.get("pseudolabel_tta", True)),
    )
    if selftrain.rounds < 0:
        raise InvalidConfigError("selftrain.rounds must be >= 0")
    if not 0.0 < selftrain.tau_pixel <= 1.0 or not 0.0 < selftrain.tau_image <= 1.0:
        raise InvalidConfigError("confidence thresholds must be in (0, 1]")
    if selftrain.k_folds < 2:
        raise InvalidConfigError("selftrain.k_folds must be >= 2")

    augment = _parse_augment(doc.get("augment", {}), seed)

    tta = list(doc.get("tta", DEFAULT_VIEWS))
    try:
        parse_views(tta)
    except Exception as exc:
        raise InvalidConfigError(str(exc)) from exc

    out_raw = doc.get("output", {})
    _require_keys(out_raw, {"run_dir", "submission_resolution"}, "output")
    output = OutputConfig(
        run_dir=str(out_raw.get("run_dir", "runs/run")),
        submission_resolution=_as_int(out_raw.get("submission_resolution", 512),
                                      "output.submission_resolution"),
    )
    if output.submission_resolution < 1:
        raise InvalidConfigError("output.submission_resolution must be >= 1")

    return PipelineConfig(seed=seed, data=data, stage0=stage0, stage1=stage1,
                          stage2=stage2, selftrain=selftrain, augment=augment,
                          tta=tta, output=output)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc, path.parent.resolve())


def effective_dict(cfg: PipelineConfig) -> dict:
    """The fully resolved configuration; re-running from this reproduces the run."""
    def stage(s: TrainStageConfig) -> dict:
        return {"epochs": s.epochs, "batch_size": s.batch_size, "lr": s.lr,
                "resolution": s.resolution, "shuffle_seed": s.shuffle_seed,
                "weight_decay": s.weight_decay}

    return {
        "seed": cfg.seed,
        "data": {"manifest_path": cfg.data.manifest_path,
                 "num_classes": cfg.data.num_classes},
        "stage0": stage(cfg.stage0),
        "stage1": stage(cfg.stage1),
        "stage2": stage(cfg.stage2),
        "selftrain": {"rounds": cfg.selftrain.rounds,
                      "tau_pixel": cfg.selftrain.tau_pixel,
                      "tau_image": cfg.selftrain.tau_image,
                      "k_folds": cfg.selftrain.k_folds,
                      "pseudolabel_tta": cfg.selftrain.pseudolabel_tta},
        "augment": {"crop_size": cfg.augment.crop_size,
                    "p_hflip": cfg.augment.p_hflip,
                    "p_vflip": cfg.augment.p_vflip,
                    "p_rot90": cfg.augment.p_rot90,
                    "scale_range": cfg.augment.scale_range,
                    "translate_range": cfg.augment.translate_range,
                    "rotate_range": cfg.augment.rotate_range,
                    "brightness_contrast_range": cfg.augment.brightness_contrast_range,
                    "hsv_shift_limits": list(cfg.augment.hsv_shift_limits),
                    "normalize_mean": list(cfg.augment.normalize_mean),
                    "normalize_std": list(cfg.augment.normalize_std),
                    "seed": cfg.augment.seed},
        "tta": list(cfg.tta),
        "output": {"run_dir": cfg.output.run_dir,
                   "submission_resolution": cfg.output.submission_resolution},
    }


def dump_effective(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(effective_dict(cfg), indent=2, sort_keys=True)
                          + "\n", encoding="utf-8")


def round_config_from(cfg: PipelineConfig, workers: int = 1):
    from .selftrain import RoundConfig

    return RoundConfig(
        seed=cfg.seed,
        num_classes=cfg.data.num_classes,
        stage1=cfg.stage1,
        stage2=cfg.stage2,
        augment=cfg.augment,
        tau_pixel=cfg.selftrain.tau_pixel,
        tau_image=cfg.selftrain.tau_image,
        k_folds=cfg.selftrain.k_folds,
        views=cfg.views(),
        pseudolabel_tta=cfg.selftrain.pseudolabel_tta,
        workers=workers,
    )
