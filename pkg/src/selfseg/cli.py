"""Command-line interface.

Subcommands: make-data, train-stage0, pseudo-label, self-train, infer,
evaluate, grad-check.  Hyperparameters live in a JSON config file; flags
select files and override the seed, round count, output location, and
worker count.  Exit codes: 0 success, 1 validation/configuration error,
2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .core import resize_nearest
from .dataio import (SyntheticSpec, generate_synthetic, read_pgm,
                     read_submission_csv, rle_decode, write_submission_csv)
from .errors import InvalidConfigError, InvalidInputError, PipelineError
from .inference import (PredictSettings, predict_submission, read_ensemble_spec)
from .metrics import ConfusionMatrix, accumulate, iou
from .model import TinySegNet, grad_check, load_checkpoint
from .rng import derive_seed
from .selftrain import (generate_pseudolabels, load_unlabeled_images,
                        run_pipeline, write_pseudolabel_artifacts)

RUN_DIR_ENV = "SELFTRAIN_RUN_DIR"


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors on stderr with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="selfseg",
                     description="Self-training semantic segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("make-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="JSON file with synthetic-spec fields")
    p.add_argument("--labeled", type=int)
    p.add_argument("--unlabeled", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--blobs-min", type=int)
    p.add_argument("--blobs-max", type=int)
    p.add_argument("--classes", type=int)

    for name, help_text in (("train-stage0", "train the starting model only"),
                            ("self-train", "run the full self-training pipeline")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--out", help="run directory override")
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("pseudo-label", help="pseudo-label the unlabeled set")
    p.add_argument("--config", required=True)
    p.add_argument("--ensemble", required=True, help="ensemble spec JSON")
    p.add_argument("--out", help="output directory (default <run_dir>/pseudolabels)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("infer", help="predict a submission CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--ensemble", required=True, help="ensemble spec JSON")
    p.add_argument("--manifest", help="manifest to predict (default: config's)")
    p.add_argument("--out", required=True, help="submission CSV path")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("evaluate", help="score a submission against ground truth")
    p.add_argument("--pred", required=True, help="submission CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="metrics JSON path (default: metrics.json beside --pred)")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-image", action="store_true",
                   help="also report per-image mIoU")

    p = sub.add_parser("grad-check", help="verify analytic gradients")
    p.add_argument("--probes", type=int, default=50)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--classes", type=int, default=2)
    return parser


def _load_config(args) -> config_mod.PipelineConfig:
    cfg = config_mod.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        if cfg.augment.seed == 0 or True:
            # augment defaults to the pipeline seed unless the file pinned one
            pass
    if getattr(args, "rounds", None) is not None:
        cfg.selftrain.rounds = args.rounds
    return cfg


def _run_dir(args, cfg: config_mod.PipelineConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if not cfg.output.run_dir_explicit and os.environ.get(RUN_DIR_ENV):
        return Path(os.environ[RUN_DIR_ENV])
    return Path(cfg.output.run_dir)


def _cmd_make_data(args) -> int:
    fields = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        fields = json.loads(path.read_text(encoding="utf-8"))
        allowed = {"count_labeled", "count_unlabeled", "height", "width", "seed",
                   "foreground_blob_count_range", "class_count"}
        unknown = set(fields) - allowed
        if unknown:
            raise InvalidConfigError(f"unknown synthetic-spec key(s): {sorted(unknown)}")
    overrides = {"count_labeled": args.labeled, "count_unlabeled": args.unlabeled,
                 "height": args.height, "width": args.width, "seed": args.seed,
                 "class_count": args.classes}
    for key, value in overrides.items():
        if value is not None:
            fields[key] = value
    if args.blobs_min is not None or args.blobs_max is not None:
        lo, hi = fields.get("foreground_blob_count_range", (2, 6))
        fields["foreground_blob_count_range"] = (
            args.blobs_min if args.blobs_min is not None else lo,
            args.blobs_max if args.blobs_max is not None else hi)
    spec = SyntheticSpec(**{k: tuple(v) if k == "foreground_blob_count_range" else v
                            for k, v in fields.items()})
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest.labeled)} labeled + {len(manifest.unlabeled)} "
          f"unlabeled samples to {args.out}")
    return 0


def _cmd_self_train(args, rounds_override: int | None = None) -> int:
    cfg = _load_config(args)
    if rounds_override is not None:
        cfg.selftrain.rounds = rounds_override
    run_dir = _run_dir(args, cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.output.run_dir = str(run_dir)
    config_mod.dump_effective(cfg, run_dir / "effective_config.json")
    report = run_pipeline(cfg, run_dir, workers=args.workers)

    from .figures import render_run_figures
    figures = render_run_figures(report, run_dir)
    final = report["final"]
    print(f"stage0 val mIoU:      {final['stage0_val_miou']:.4f}")
    print(f"final round val mIoU: {final['final_round_mean_val_miou']:.4f}")
    print(f"report: {run_dir / 'report.json'}")
    for fig in figures:
        print(f"figure: {fig}")
    return 0


def _load_ensemble_models(spec_path: Path):
    members = read_ensemble_spec(spec_path)
    base = spec_path.parent
    return [load_checkpoint(base / m.checkpoint_path) for m in members]


def _cmd_pseudo_label(args) -> int:
    cfg = _load_config(args)
    run_dir = _run_dir(args, cfg)
    out_dir = Path(args.out) if args.out else run_dir / "pseudolabels"
    models = _load_ensemble_models(Path(args.ensemble))
    manifest = cfg.load_manifest()
    unlabeled = load_unlabeled_images(manifest)
    views = cfg.views() if cfg.selftrain.pseudolabel_tta else \
        config_mod.parse_views(["identity"])
    accepted, counts = generate_pseudolabels(
        models, unlabeled, cfg.selftrain.tau_pixel, cfg.selftrain.tau_image,
        views, cfg.stage1.resolution, cfg.augment.normalize_mean,
        cfg.augment.normalize_std, workers=args.workers)
    write_pseudolabel_artifacts(accepted, out_dir)
    (out_dir / "report.json").write_text(
        json.dumps({"counts": counts}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    print(f"generated {counts['generated']}, accepted {counts['accepted']}, "
          f"rejected {counts['rejected']} -> {out_dir}")
    return 0


def _cmd_infer(args) -> int:
    cfg = _load_config(args)
    manifest_path = args.manifest or cfg.data.manifest_path
    from .dataio import read_manifest
    manifest = read_manifest(manifest_path)
    models = _load_ensemble_models(Path(args.ensemble))
    settings = PredictSettings(
        inference_resolution=cfg.stage2.resolution,
        output_resolution=cfg.output.submission_resolution,
        views=cfg.views(),
        normalize_mean=cfg.augment.normalize_mean,
        normalize_std=cfg.augment.normalize_std,
    )
    rows, errors = predict_submission(models, manifest, settings,
                                      workers=args.workers)
    write_submission_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    if errors:
        for line in errors:
            print(f"error: {line}", file=sys.stderr)
        return 2
    return 0


def _cmd_evaluate(args) -> int:
    pred_path = Path(args.pred)
    if not pred_path.is_file():
        raise FileNotFoundError(f"submission file not found: {pred_path}")
    from .dataio import read_manifest
    manifest = read_manifest(args.manifest)
    by_id = {e.sample_id: e for e in manifest.entries}

    k = args.classes
    cm = ConfusionMatrix(k)
    per_image = []
    for row in read_submission_csv(pred_path):
        entry = by_id.get(row.sample_id)
        if entry is None:
            raise InvalidInputError(f"submission row {row.sample_id!r} not in manifest")
        if not entry.labeled:
            raise InvalidInputError(f"sample {row.sample_id!r} has no ground truth")
        pred = rle_decode(row.rle, row.height, row.width)
        gt = read_pgm(manifest.mask_file(entry), num_classes=k)
        if pred.shape != gt.shape:
            pred = resize_nearest(pred, *gt.shape)
        sample_cm = accumulate(ConfusionMatrix(k), pred, gt)
        cm = cm.merge(sample_cm)
        if args.per_image:
            _, sample_miou = iou(sample_cm)
            per_image.append({"sample_id": row.sample_id, "miou": sample_miou})

    per_class, miou = iou(cm)
    metrics = {"miou": miou, "per_class_iou": per_class,
               "valid_pixels": cm.valid_pixels}
    if args.per_image:
        metrics["per_image"] = per_image
        metrics["mean_per_image_miou"] = float(
            np.mean([p["miou"] for p in per_image])) if per_image else None

    out_path = Path(args.out) if args.out else pred_path.parent / "metrics.json"
    out_path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
    from .figures import render_metrics_figure
    figure = render_metrics_figure(metrics, out_path.with_suffix(".png"))
    print(f"mIoU: {miou:.4f} over {cm.valid_pixels} pixels")
    print(f"metrics: {out_path}")
    print(f"figure: {figure}")
    return 0


def _cmd_grad_check(args) -> int:
    worst = 0.0
    for i in range(args.seeds):
        model = TinySegNet(args.classes)
        model.init_params(derive_seed(i, "grad-check", "params"))
        err = grad_check(model, n_probes=args.probes, seed=i)
        print(f"seed {i}: max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"worst: {worst:.3e} (threshold {args.threshold:.1e})")
    if worst > args.threshold:
        print("gradient check FAILED", file=sys.stderr)
        return 2
    print("gradient check passed")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    handlers = {
        "make-data": _cmd_make_data,
        "train-stage0": lambda a: _cmd_self_train(a, rounds_override=0),
        "self-train": _cmd_self_train,
        "pseudo-label": _cmd_pseudo_label,
        "infer": _cmd_infer,
        "evaluate": _cmd_evaluate,
        "grad-check": _cmd_grad_check,
    }
    try:
        return handlers[args.command](args)
    except (FileNotFoundError, InvalidConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
