"""Command-line surface wiring the pipeline together.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure during training, 4 verification mismatch.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, imgio
from .config import ConfigError, RunConfig
from .embeddings import load_concepts, read_bags
from .errors import NonFiniteLoss, PlexkitError
from .evaluate import (
    ConfusionMatrix,
    MetricsReport,
    confusion,
    cross_validate,
    metrics,
    render_metrics_table,
    roc_auc,
    verify_reference_metrics,
)
from .head import load_checkpoint, save_checkpoint
from .optim import read_history, score_bags, train, write_history
from .stain import StainProfile, default_stain_profile, fit_stain_profile, normalize_to_reference
from .synthetic import bags_by_slide_of, materialize_dataset
from .tiling import (
    LABEL_NAMES,
    TileRecord,
    balanced_sample,
    downsample,
    downsample_mask,
    extract_tile,
    label_tile,
    read_manifest,
    tile_grid,
    write_manifest,
    write_tile_index,
)
from .errors import OneClassOnly

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on bad flags, not argparse's 2
        raise UsageError(message)


def _sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(
    path: Path, command: str, cfg: RunConfig, inputs: dict[str, str]
) -> None:
    doc = {
        "command": command,
        "package_version": __version__,
        "config_hash": cfg.digest(),
        "config": cfg.as_dict(),
        "seeds": {
            "sample": cfg["sample.seed"],
            "train": cfg["train.seed"],
            "cv": cfg["cv.seed"],
            "synth": cfg["synth.seed"],
        },
        "inputs": {
            name: {"path": str(p), "sha256": _sha256_file(p)}
            for name, p in inputs.items()
        },
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg.update_from_file(args.config)
    cfg.apply_overrides(args.set or [])
    return cfg


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one configuration key (repeatable)",
    )
    parser.add_argument(
        "--threads", type=int, default=None, help="worker cap for per-slide stages"
    )


def _threads(args, cfg: RunConfig) -> int:
    n = args.threads if args.threads is not None else cfg["threads"]
    return max(1, int(n))


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    paths = materialize_dataset(cfg.synth_spec(), out)
    _write_run_manifest(out / "run_manifest.json", "synth", cfg, {})
    print(f"wrote dataset under {out}")
    for name, p in sorted(paths.items()):
        print(f"  {name}: {p}")
    return EXIT_OK


def cmd_normalize(args) -> int:
    cfg = _load_config(args)
    params = cfg.stain_params()
    slides = read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.profile:
        ref = StainProfile.load(args.profile)
    elif args.reference_slide:
        matches = [s for s in slides if s.slide_id == args.reference_slide]
        if not matches:
            raise PlexkitError(f"reference slide {args.reference_slide!r} not in manifest")
        ref = fit_stain_profile(
            imgio.load_rgb(matches[0].image_path),
            beta=params.beta,
            alpha_pct=params.alpha_pct,
            i0=params.i0,
            conc_percentile=params.conc_percentile,
        )
    else:
        ref = default_stain_profile()
    if args.save_profile:
        ref.save(args.save_profile)

    def work(entry):
        img = imgio.load_rgb(entry.image_path)
        normalized = normalize_to_reference(img, ref, params)
        dest = out / f"{entry.slide_id}.png"
        imgio.save_rgb(normalized, dest)
        return entry, dest

    with ThreadPoolExecutor(max_workers=_threads(args, cfg)) as pool:
        results = list(pool.map(work, slides))

    new_entries = [
        type(entry)(
            slide_id=entry.slide_id,
            image_path=str(dest),
            mask_path=entry.mask_path,
            magnification=entry.magnification,
        )
        for entry, dest in results
    ]
    write_manifest(new_entries, out / "manifest.json")
    _write_run_manifest(
        out / "run_manifest.json", "normalize", cfg, {"manifest": args.manifest}
    )
    print(f"normalized {len(new_entries)} slides -> {out}")
    return EXIT_OK


def cmd_tile(args) -> int:
    cfg = _load_config(args)
    slides = read_manifest(args.manifest)
    size = cfg["tile.size"]
    stride = cfg["tile.stride"]
    working_mag = cfg["tile.working_magnification"]
    plan = cfg.sample_plan()
    dump_dir = Path(args.dump_dir) if args.dump_dir else None
    if dump_dir:
        dump_dir.mkdir(parents=True, exist_ok=True)

    def work(entry):
        img = imgio.load_rgb(entry.image_path)
        mask = imgio.load_mask(entry.mask_path)
        factor = max(1, int(round(entry.magnification / working_mag)))
        if factor > 1:
            img = downsample(img, factor)
            mask = downsample_mask(mask, factor)
        if mask.shape != img.shape[:2]:
            raise PlexkitError(
                f"slide {entry.slide_id}: mask {mask.shape} != image {img.shape[:2]}"
            )
        h, w = img.shape[:2]
        records = [
            TileRecord(
                slide_id=entry.slide_id,
                x=x,
                y=y,
                size=size,
                label=label_tile(mask, x, y, size),
            )
            for x, y in tile_grid(w, h, size, stride)
        ]
        if not args.no_sample:
            records = balanced_sample(records, plan, allow_short=cfg["sample.allow_short"])
        if dump_dir:
            for rec in records:
                imgio.save_rgb(
                    extract_tile(img, rec), dump_dir / f"{rec.slide_id}_{rec.x}_{rec.y}.png"
                )
        return records

    with ThreadPoolExecutor(max_workers=_threads(args, cfg)) as pool:
        per_slide = list(pool.map(work, slides))

    tiles = [rec for records in per_slide for rec in records]
    write_tile_index(tiles, args.out_index)
    _write_run_manifest(
        Path(args.out_index).with_suffix(".manifest.json"),
        "tile",
        cfg,
        {"manifest": args.manifest},
    )
    n_pos = sum(1 for t in tiles if t.label == 1)
    print(f"wrote {len(tiles)} tiles ({n_pos} plexus) -> {args.out_index}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    head_cfg = cfg.head_config()
    concepts = load_concepts(args.concepts, expect_dim=head_cfg.dim)
    bags_train = read_bags(args.bags, expect_dim=head_cfg.dim)
    bags_val = read_bags(args.val, expect_dim=head_cfg.dim)
    params, history = train(bags_train, bags_val, concepts, cfg.train_config(), head_cfg)
    save_checkpoint(params, args.out_checkpoint, seed=cfg["train.seed"])
    if args.out_history:
        write_history(history, args.out_history)
    _write_run_manifest(
        Path(args.out_checkpoint).with_suffix(".manifest.json"),
        "train",
        cfg,
        {"bags": args.bags, "val": args.val, "concepts": args.concepts},
    )
    best = max(history, key=lambda h: h.val_acc)
    print(
        f"trained {len(history)} epochs; best val acc {best.val_acc:.4f} "
        f"at epoch {best.epoch}; checkpoint -> {args.out_checkpoint}"
    )
    return EXIT_OK


def _write_scores_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tile_ref", "label", "score", "pred"])
        for ref, label, score, pred in rows:
            writer.writerow([ref, LABEL_NAMES[int(label)], f"{score:.9g}", LABEL_NAMES[int(pred)]])


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    params = load_checkpoint(args.checkpoint)
    concepts = load_concepts(args.concepts, expect_dim=params.config.dim)
    bags = read_bags(args.bags, expect_dim=params.config.dim)
    scores, preds, labels, mean_loss = score_bags(bags, concepts, params)
    cm = confusion(preds, labels)
    try:
        auc = roc_auc(scores, labels)
    except OneClassOnly:
        auc = float("nan")
    report = metrics(cm, auc=auc)
    doc = {"metrics": report.as_dict(), "mean_loss": mean_loss, "n_bags": len(bags)}
    Path(args.out_report).write_text(json.dumps(doc, indent=2, sort_keys=True))
    if args.out_scores:
        _write_scores_csv(
            args.out_scores,
            zip([b.tile_ref for b in bags], labels, scores, preds),
        )
    _write_run_manifest(
        Path(args.out_report).with_suffix(".manifest.json"),
        "eval",
        cfg,
        {"bags": args.bags, "concepts": args.concepts, "checkpoint": args.checkpoint},
    )
    print(render_metrics_table([("checkpoint", report)]), end="")
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = _load_config(args)
    head_cfg = cfg.head_config()
    concepts = load_concepts(args.concepts, expect_dim=head_cfg.dim)
    bags = read_bags(args.bags, expect_dim=head_cfg.dim)
    by_slide = bags_by_slide_of(bags)
    result = cross_validate(
        by_slide,
        concepts,
        cfg.train_config(),
        head_cfg,
        k=cfg["cv.folds"],
        fold_seed=cfg["cv.seed"],
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(result.as_dict(), indent=2, sort_keys=True))
    score_rows = []
    for fr in result.folds:
        score_rows.extend(zip(fr.tile_refs, fr.labels, fr.scores, fr.preds))
    _write_scores_csv(out / "scores.csv", score_rows)
    _write_run_manifest(
        out / "run_manifest.json",
        "cv",
        cfg,
        {"bags": args.bags, "concepts": args.concepts},
    )
    rows = [(f"fold {fr.fold}", fr.report) for fr in result.folds]
    rows.append(("pooled", result.pooled))
    print(render_metrics_table(rows), end="")
    print(f"report -> {out / 'report.json'}")
    return EXIT_OK


def _metrics_from_dict(doc: dict) -> MetricsReport:
    cm = ConfusionMatrix(**doc["confusion"])
    values = {
        key: (float("nan") if doc.get(key) is None else float(doc[key]))
        for key in ("accuracy", "precision", "recall", "specificity", "f1_micro", "f1_macro", "auc")
    }
    return MetricsReport(matrix=cm, **values)


def cmd_report(args) -> int:
    from . import plots

    doc = json.loads(Path(args.report).read_text())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows: list[tuple[str, MetricsReport]] = []
    extra_lines: list[str] = []
    if "folds" in doc:
        for fold_doc in doc["folds"]:
            rows.append((f"fold {fold_doc['fold']}", _metrics_from_dict(fold_doc["metrics"])))
        pooled = _metrics_from_dict(doc["pooled"])
        rows.append(("pooled", pooled))
        for name in ("accuracy", "precision", "recall", "specificity", "f1_micro", "f1_macro", "auc"):
            mean = doc["fold_mean"].get(name)
            std = doc["fold_std"].get(name)
            if mean is not None and std is not None:
                extra_lines.append(f"{name}: {100 * mean:.2f} +/- {100 * std:.2f}")
        plots.plot_confusion(pooled.matrix, out / "confusion_pooled.png", "Pooled confusion matrix")
        from .evaluate import CvResult, FoldResult, Fold

        fold_results = [
            FoldResult(
                fold=fold_doc["fold"],
                plan=Fold((), (), ()),
                report=_metrics_from_dict(fold_doc["metrics"]),
                scores=np.zeros(0),
                preds=np.zeros(0, dtype=np.int64),
                labels=np.zeros(0, dtype=np.int64),
                tile_refs=[],
            )
            for fold_doc in doc["folds"]
        ]
        plots.plot_fold_metrics(
            CvResult(folds=fold_results, pooled=pooled, mean={}, std={}),
            out / "fold_accuracy.png",
        )
    else:
        report = _metrics_from_dict(doc["metrics"])
        rows.append(("checkpoint", report))
        plots.plot_confusion(report.matrix, out / "confusion.png")

    table = render_metrics_table(rows)
    (out / "metrics_table.txt").write_text(
        table + ("\nfold mean +/- sd\n" + "\n".join(extra_lines) + "\n" if extra_lines else "")
    )
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["row", "accuracy", "precision", "recall", "specificity", "f1_micro", "f1_macro", "auc",
             "tp", "fp", "tn", "fn"]
        )
        for name, report in rows:
            cm = report.matrix
            writer.writerow(
                [name]
                + [
                    "" if math.isnan(getattr(report, m)) else f"{getattr(report, m):.6f}"
                    for m in ("accuracy", "precision", "recall", "specificity", "f1_micro", "f1_macro", "auc")
                ]
                + [cm.tp, cm.fp, cm.tn, cm.fn]
            )

    if args.scores:
        labels, scores = [], []
        with open(args.scores, newline="") as fh:
            for row in csv.DictReader(fh):
                labels.append(1 if row["label"] == "plexus" else 0)
                scores.append(float(row["score"]))
        scores_arr = np.asarray(scores)
        labels_arr = np.asarray(labels)
        try:
            auc = roc_auc(scores_arr, labels_arr)
        except OneClassOnly:
            auc = None
        plots.plot_roc(scores_arr, labels_arr, out / "roc_curve.png", auc=auc)
    if args.history:
        plots.plot_history(read_history(args.history), out / "history.png")

    inputs = {"report": args.report}
    if args.scores:
        inputs["scores"] = args.scores
    if args.history:
        inputs["history"] = args.history
    _write_run_manifest(out / "run_manifest.json", "report", _load_config(args), inputs)

    print(table, end="")
    if extra_lines:
        print("fold mean +/- sd")
        for line in extra_lines:
            print(f"  {line}")
    print(f"report artifacts -> {out}")
    return EXIT_OK


def cmd_verify_metrics(args) -> int:
    ok, checks = verify_reference_metrics()
    from .evaluate import REFERENCE_EVALUATIONS

    rows = [(ref.name, metrics(ref.matrix)) for ref in REFERENCE_EVALUATIONS]
    print(render_metrics_table(rows), end="")
    print()
    for check in checks:
        if check.tolerance_pp is None:
            status = "  --  "
            detail = "informational"
        else:
            status = "  ok  " if check.ok else " FAIL "
            detail = f"tolerance {check.tolerance_pp} pp"
        computed = "n/a" if math.isnan(check.computed_pp) else f"{check.computed_pp:7.3f}"
        print(
            f"[{status}] {check.model:9s} {check.metric:12s} "
            f"computed {computed} vs reported {check.reported_pp:6.2f}  ({detail})"
        )
    if not ok:
        print("verification FAILED", file=sys.stderr)
        return EXIT_VERIFY
    print("all gated metrics match the reference values")
    return EXIT_OK


# ---------------------------------------------------------------- wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="plexkit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"plexkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="materialize a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("normalize", help="fit/apply stain profiles over a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", help="stain profile JSON to apply")
    p.add_argument("--reference-slide", help="fit the reference from this slide id")
    p.add_argument("--save-profile", help="write the reference profile JSON here")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("tile", help="build a labeled tile index from a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-index", required=True)
    p.add_argument("--dump-dir", help="also dump per-tile PNGs here")
    p.add_argument("--no-sample", action="store_true", help="keep the full grid")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("train", help="train the head on embedding bags")
    _add_common(p)
    p.add_argument("--bags", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--concepts", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--out-history")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a bag file")
    _add_common(p)
    p.add_argument("--bags", required=True)
    p.add_argument("--concepts", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-report", required=True)
    p.add_argument("--out-scores")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="run the full cross-validation protocol")
    _add_common(p)
    p.add_argument("--bags", required=True)
    p.add_argument("--concepts", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("report", help="render a report JSON to table, CSV, and figures")
    _add_common(p)
    p.add_argument("--report", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scores", help="per-tile scores CSV for the ROC figure")
    p.add_argument("--history", help="training history CSV for the loss figure")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser(
        "verify-metrics",
        help="recompute bundled reference confusion matrices and check reported values",
    )
    _add_common(p)
    p.set_defaults(func=cmd_verify_metrics)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PlexkitError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
