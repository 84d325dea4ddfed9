"""The self-training orchestrator.

One run is: train a starting model on the labeled set (stage 0), then for
each round (a) the current teacher ensemble pseudo-labels the unlabeled set
with confidence filtering, (b) a fresh student pretrains from scratch on the
accepted pseudo-labels at low resolution (stage 1), (c) the student is
fine-tuned per cross-validation fold on ground truth at high resolution
(stage 2), and (d) the well-performing fold models become the next round's
teachers.

Confidence filtering is two-tier: pixels whose max softmax probability falls
below tau_pixel become IGNORE; an image is accepted only if the mean
confidence over surviving pixels reaches tau_image AND at least half of its
pixels survive.

Round artifacts land in <run_dir>/round_<r>/ (checkpoints, pseudolabels/
with PGM masks + JSON sidecars, report.json, ensemble.json with the selected
teachers).  All paths recorded in reports are relative to the run directory,
so identical runs produce byte-identical reports wherever they execute.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from pathlib import Path

from .augment import AugmentConfig
from .core import IGNORE, argmax_mask, resize_bilinear, resize_nearest, softmax
from .dataio import SampleManifest, read_ppm, read_pgm, write_pgm
from .errors import InvalidInputError
from .inference import (EnsembleMember, TtaView, ensemble_logits, parse_views,
                        select_members, write_ensemble_spec)
from .metrics import ConfusionMatrix, accumulate, iou
from .model import (TinySegNet, TrainSample, TrainStageConfig, load_checkpoint,
                    save_checkpoint, train_stage)
from .parallel import run_indexed
from .rng import derive_seed, fnv1a64

MIN_SURVIVOR_FRACTION = 0.5


# ---------------------------------------------------------------------------
# pseudo-labels

@dataclass
class PseudoLabelRecord:
    sample_id: str
    mask: np.ndarray              # (H, W) uint8 with IGNORE below tau_pixel
    pixel_confidence: np.ndarray  # (H, W) max softmax probability
    image_confidence: float       # mean confidence over surviving pixels (0 if none)
    survivor_fraction: float
    teacher_round: int
    accepted: bool


def pseudolabel_image(logits: np.ndarray, tau_pixel: float, tau_image: float,
                      sample_id: str, teacher_round: int) -> PseudoLabelRecord:
    """Filter one image's ensembled logits into a pseudo-label record."""
    probs = softmax(logits)
    confidence = probs.max(axis=-1)
    mask = argmax_mask(logits)
    survivors = confidence >= tau_pixel
    mask[~survivors] = IGNORE
    n_surviving = int(survivors.sum())
    survivor_fraction = n_surviving / survivors.size
    image_confidence = float(confidence[survivors].mean()) if n_surviving else 0.0
    accepted = (image_confidence >= tau_image
                and survivor_fraction >= MIN_SURVIVOR_FRACTION)
    return PseudoLabelRecord(sample_id, mask, confidence.astype(np.float32),
                             image_confidence, survivor_fraction, teacher_round,
                             accepted)


def generate_pseudolabels(teachers: list, unlabeled: list[tuple[str, np.ndarray]],
                          tau_pixel: float, tau_image: float,
                          views: list[TtaView], resolution: int,
                          normalize_mean, normalize_std,
                          teacher_round: int = 0,
                          workers: int = 1) -> tuple[list[PseudoLabelRecord], dict]:
    """Pseudo-label every unlabeled image; returns (accepted records, counts).

    Images are resized to `resolution` (where the stage-1 student will train)
    and scored by the teacher ensemble; pass [identity] as `views` to disable
    test-time augmentation.
    """
    if not teachers:
        raise InvalidInputError("pseudo-labeling requires at least one teacher")
    if not 0.0 < tau_pixel <= 1.0 or not 0.0 < tau_image <= 1.0:
        raise InvalidInputError("confidence thresholds must be in (0, 1]")
    from .augment import normalize

    def _one(item):
        sample_id, image = item
        resized = resize_bilinear(image, resolution, resolution)
        net_input = normalize(resized, normalize_mean, normalize_std)
        logits = ensemble_logits(teachers, net_input, views)
        return pseudolabel_image(logits, tau_pixel, tau_image, sample_id, teacher_round)

    results = run_indexed(_one, unlabeled, workers)
    records: list[PseudoLabelRecord] = []
    for item, outcome in zip(unlabeled, results):
        if isinstance(outcome, Exception):
            raise outcome
        records.append(outcome)
    accepted = [r for r in records if r.accepted]
    counts = {"generated": len(records), "accepted": len(accepted),
              "rejected": len(records) - len(accepted)}
    return accepted, counts


def write_pseudolabel_artifacts(records: list[PseudoLabelRecord], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_pgm(rec.mask, out_dir / f"{rec.sample_id}.pgm")
        sidecar = {
            "sample_id": rec.sample_id,
            "image_confidence": rec.image_confidence,
            "survivor_fraction": rec.survivor_fraction,
            "teacher_round": rec.teacher_round,
            "accepted": rec.accepted,
        }
        (out_dir / f"{rec.sample_id}.json").write_text(
            json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# fold planning

@dataclass
class FoldPlan:
    k: int
    assignment: dict[str, int]

    def fold_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignment.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignment.items() if f != fold]


def make_fold_plan(labeled_ids: list[str], k: int) -> FoldPlan:
    """Balanced folds, independent of input order: sort by (hash, id), deal round-robin."""
    if k < 2:
        raise InvalidInputError("k must be >= 2")
    if k > len(labeled_ids):
        raise InvalidInputError(f"k={k} exceeds {len(labeled_ids)} labeled samples")
    if len(set(labeled_ids)) != len(labeled_ids):
        raise InvalidInputError("labeled ids must be unique")
    ordered = sorted(labeled_ids, key=lambda i: (fnv1a64(i), i))
    return FoldPlan(k, {sample_id: pos % k for pos, sample_id in enumerate(ordered)})


# ---------------------------------------------------------------------------
# validation

def validate_miou(model, samples: list[TrainSample], resolution: int,
                  normalize_mean, normalize_std, num_classes: int) -> float:
    """Global mIoU of plain (no TTA) predictions at `resolution`."""
    from .augment import normalize

    cm = ConfusionMatrix(num_classes)
    for sample in samples:
        image = resize_bilinear(sample.image, resolution, resolution)
        gt = resize_nearest(sample.mask, resolution, resolution)
        logits = model.forward(normalize(image, normalize_mean, normalize_std)[None])[0]
        cm = accumulate(cm, argmax_mask(logits), gt)
    _, miou = iou(cm)
    return miou


# ---------------------------------------------------------------------------
# rounds

@dataclass
class RoundConfig:
    """Everything one round needs; assembled by the pipeline from PipelineConfig."""

    seed: int
    num_classes: int
    stage1: TrainStageConfig
    stage2: TrainStageConfig
    augment: AugmentConfig
    tau_pixel: float
    tau_image: float
    k_folds: int
    views: list[TtaView]
    pseudolabel_tta: bool = True
    workers: int = 1


@dataclass
class TeacherState:
    """The current teacher ensemble: models plus their recorded quality."""

    models: list
    members: list[EnsembleMember]  # checkpoint paths relative to the run dir


def _stage_augment(base: AugmentConfig, *scope) -> AugmentConfig:
    return replace(base, seed=derive_seed(base.seed, *scope, "augment"))


def _stage_train(stage: TrainStageConfig, seed: int, *scope) -> TrainStageConfig:
    if stage.shuffle_seed is not None:
        return stage
    return replace(stage, shuffle_seed=derive_seed(seed, *scope, "shuffle"))


def run_round(state: TeacherState, labeled: list[TrainSample],
              unlabeled: list[tuple[str, np.ndarray]], cfg: RoundConfig,
              round_index: int, run_dir: Path) -> tuple[TeacherState, dict]:
    """One self-training round; returns the next teacher state and the round report."""
    round_dir = run_dir / f"round_{round_index}"
    round_dir.mkdir(parents=True, exist_ok=True)
    scope = f"round{round_index}"

    views = cfg.views if cfg.pseudolabel_tta else parse_views(["identity"])
    accepted, counts = generate_pseudolabels(
        state.models, unlabeled, cfg.tau_pixel, cfg.tau_image, views,
        cfg.stage1.resolution, cfg.augment.normalize_mean,
        cfg.augment.normalize_std, teacher_round=round_index,
        workers=cfg.workers)
    write_pseudolabel_artifacts(accepted, round_dir / "pseudolabels")

    unlabeled_by_id = dict(unlabeled)
    degraded = not accepted
    stage1_history: list[float] = []
    if degraded:
        # No usable pseudo-labels: fall back to fine-tuning from the best
        # current teacher instead of a stage-1 student.
        best = max(range(len(state.members)),
                   key=lambda i: (state.members[i].val_miou, -i))
        student = state.models[best].copy()
        stage1_rel = None
    else:
        pseudo_set = [TrainSample(r.sample_id, unlabeled_by_id[r.sample_id], r.mask)
                      for r in accepted]
        student = TinySegNet(cfg.num_classes)
        student.init_params(derive_seed(cfg.seed, scope, "stage1", "init"))
        student, stage1_history = train_stage(
            student, pseudo_set,
            _stage_train(cfg.stage1, cfg.seed, scope, "stage1"),
            _stage_augment(cfg.augment, scope, "stage1"))
        stage1_rel = f"round_{round_index}/stage1.ckpt"
        save_checkpoint(student, run_dir / stage1_rel)

    labeled_ids = [s.sample_id for s in labeled]
    plan = make_fold_plan(labeled_ids, cfg.k_folds)
    by_id = {s.sample_id: s for s in labeled}

    def _train_fold(fold: int):
        train_set = [by_id[i] for i in labeled_ids if plan.assignment[i] != fold]
        val_set = [by_id[i] for i in labeled_ids if plan.assignment[i] == fold]
        model = student.copy()
        model, history = train_stage(
            model, train_set,
            _stage_train(cfg.stage2, cfg.seed, scope, f"fold{fold}"),
            _stage_augment(cfg.augment, scope, f"fold{fold}"))
        val = validate_miou(model, val_set, cfg.stage2.resolution,
                            cfg.augment.normalize_mean, cfg.augment.normalize_std,
                            cfg.num_classes)
        return model, history, val

    fold_results = run_indexed(_train_fold, list(range(cfg.k_folds)), cfg.workers)
    folds_report = []
    members: list[EnsembleMember] = []
    models: list = []
    for fold, outcome in enumerate(fold_results):
        if isinstance(outcome, Exception):
            raise outcome
        model, history, val = outcome
        rel = f"round_{round_index}/fold_{fold}.ckpt"
        save_checkpoint(model, run_dir / rel)
        folds_report.append({
            "fold": fold,
            "checkpoint": rel,
            "train_ids": sorted(plan.train_ids(fold)),
            "val_ids": sorted(plan.fold_ids(fold)),
            "val_miou": val,
            "loss_history": history,
        })
        members.append(EnsembleMember(rel, val))
        models.append(model)

    selected = select_members(members)
    selected_set = {m.checkpoint_path for m in selected}
    next_state = TeacherState(
        models=[m for m, mem in zip(models, members)
                if mem.checkpoint_path in selected_set],
        members=selected)
    write_ensemble_spec(selected, round_dir / "ensemble.json")

    report = {
        "round": round_index,
        "counts": counts,
        "degraded_mode": degraded,
        "stage1": {"checkpoint": stage1_rel, "loss_history": stage1_history},
        "folds": folds_report,
        "mean_val_miou": float(np.mean([f["val_miou"] for f in folds_report])),
        "teachers": [m.checkpoint_path for m in selected],
    }
    (round_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return next_state, report


# ---------------------------------------------------------------------------
# full pipeline

def load_train_samples(manifest: SampleManifest, num_classes: int) -> list[TrainSample]:
    samples = []
    for entry in manifest.labeled:
        image = read_ppm(manifest.image_file(entry))
        mask = read_pgm(manifest.mask_file(entry), num_classes=num_classes)
        if image.shape[:2] != mask.shape:
            raise InvalidInputError(f"{entry.sample_id}: image/mask size mismatch")
        samples.append(TrainSample(entry.sample_id, image, mask))
    return samples


def load_unlabeled_images(manifest: SampleManifest) -> list[tuple[str, np.ndarray]]:
    return [(e.sample_id, read_ppm(manifest.image_file(e)))
            for e in manifest.unlabeled]


def stage0_train(labeled: list[TrainSample], cfg: "RoundConfig",
                 stage0: TrainStageConfig, run_dir: Path) -> tuple[TinySegNet, list[float]]:
    """Train the starting teacher on the labeled set alone."""
    if not labeled:
        raise InvalidInputError("stage 0 requires a non-empty labeled set")
    model = TinySegNet(cfg.num_classes)
    model.init_params(derive_seed(cfg.seed, "stage0", "init"))
    model, history = train_stage(
        model, labeled,
        _stage_train(stage0, cfg.seed, "stage0"),
        _stage_augment(cfg.augment, "stage0"))
    save_checkpoint(model, run_dir / "stage0.ckpt")
    return model, history


def run_pipeline(pipeline_cfg, run_dir: Path, workers: int = 1) -> dict:
    """Stage 0, then n rounds of pseudo-label / retrain; returns the final report.

    `pipeline_cfg` is a selfseg.config.PipelineConfig; every random stream
    derives from its single seed.
    """
    from .config import round_config_from  # local import to avoid a cycle

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = pipeline_cfg.load_manifest()
    cfg = round_config_from(pipeline_cfg, workers)
    labeled = load_train_samples(manifest, cfg.num_classes)
    unlabeled = load_unlabeled_images(manifest)

    model, history = stage0_train(labeled, cfg, pipeline_cfg.stage0, run_dir)
    stage0_val = validate_miou(model, labeled, cfg.stage2.resolution,
                               cfg.augment.normalize_mean,
                               cfg.augment.normalize_std, cfg.num_classes)
    state = TeacherState(models=[model],
                         members=[EnsembleMember("stage0.ckpt", stage0_val)])

    rounds = []
    for round_index in range(pipeline_cfg.selftrain.rounds):
        state, round_report = run_round(state, labeled, unlabeled, cfg,
                                        round_index, run_dir)
        rounds.append(round_report)

    write_ensemble_spec(state.members, run_dir / "ensemble.json")
    final_miou = rounds[-1]["mean_val_miou"] if rounds else stage0_val
    report = {
        "seed": pipeline_cfg.seed,
        "num_classes": cfg.num_classes,
        "stage0": {"checkpoint": "stage0.ckpt", "loss_history": history,
                   "val_miou": stage0_val},
        "rounds": rounds,
        "final": {
            "ensemble": "ensemble.json",
            "stage0_val_miou": stage0_val,
            "final_round_mean_val_miou": final_miou,
        },
    }
    (run_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report
