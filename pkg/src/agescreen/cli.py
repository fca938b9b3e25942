"""Command-line front end.

Each config-driven subcommand writes its outputs under
``<out>/<subcommand>-<config hash>``, so later stages locate earlier ones
through the shared hash: calibrate picks up train's checkpoint, evaluate
picks up calibrate's thresholds, report collects all three. Exit codes are
0 (success), 2 (bad config or input), 3 (training diverged).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from agescreen.bench import (
    build_eval_groups,
    compose_wild,
    flag_label_noise,
    flags_csv,
    image_stats,
    load_image,
    read_stats_csv,
)
from agescreen.data import (
    ManifestError,
    load_embeddings,
    load_manifest,
    split_view,
    validate_against_store,
    write_embeddings,
    write_manifest,
)
from agescreen.experiment import (
    ConfigError,
    ExperimentConfig,
    load_config,
    write_resolved,
)
from agescreen.metrics import (
    CalibratedThreshold,
    DetCurve,
    GroupMetrics,
    calibrate_threshold,
    det_curve,
    grouped_report,
    read_predictions_csv,
    render_metrics_text,
    write_predictions_csv,
)
from agescreen.net import CheckpointError, load_checkpoint, save_checkpoint
from agescreen.synth import synth_dataset
from agescreen.trainer import DivergenceError, TrainReport, evaluate_split, train
from agescreen import report as reporting

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def _dump_json(path: Path, obj) -> None:
    path.write_text(
        json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def _load_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def _load_data(cfg: ExperimentConfig, expected_dim: int | None = None):
    manifest_path, embeddings_path = cfg.data_paths()
    if not manifest_path.exists():
        raise ConfigError(f"manifest not found: {manifest_path}")
    if not embeddings_path.exists():
        raise ConfigError(f"embedding file not found: {embeddings_path}")
    manifest = load_manifest(manifest_path)
    store = load_embeddings(embeddings_path, expected_dim=expected_dim)
    validate_against_store(manifest, store)
    return manifest, store


def _start_run(cfg: ExperimentConfig, command: str, out: str | None) -> Path:
    run = cfg.run_dir(command, out)
    write_resolved(run, cfg.resolved())
    return run


def _checkpoint_path(cfg: ExperimentConfig, args) -> Path:
    if args.checkpoint is not None:
        return Path(args.checkpoint)
    return cfg.run_dir("train", args.out) / "checkpoint.ckpt"


def _load_model(cfg: ExperimentConfig, args):
    path = _checkpoint_path(cfg, args)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path} (run train first or pass --checkpoint)")
    return load_checkpoint(path)


def cmd_train(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    net = cfg.require_network()
    train_config = cfg.require_train()
    manifest, store = _load_data(cfg, expected_dim=net.dim)
    run = _start_run(cfg, "train", args.out)

    params, train_report = train(manifest, store, net, train_config)
    save_checkpoint(run / "checkpoint.ckpt", params, net)
    _dump_json(run / "train_report.json", train_report.to_dict())

    best = train_report.epochs[train_report.best_epoch - 1]
    print(f"run-dir {run}")
    print(
        f"trained {len(train_report.epochs)} epochs, kept epoch {train_report.best_epoch} "
        f"(val MAE {best.val_mae:.4f})"
    )
    return 0


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    params, net = _load_model(cfg, args)
    manifest, store = _load_data(cfg, expected_dim=net.dim)
    samples = split_view(manifest, cfg.calibration.split)
    if not samples:
        raise ConfigError(f"calibration split {cfg.calibration.split!r} is empty")
    run = _start_run(cfg, "calibrate", args.out)

    rows = evaluate_split(
        params, net, samples, store, score_from_age=cfg.evaluation.score_from_age,
    )
    heads: dict[str, dict] = {}
    for t in net.thresholds:
        pairs = [(r.scores[t], r.age < t) for r in rows]
        try:
            point = calibrate_threshold(pairs, cfg.calibration.target_fnr, head=t)
            heads[str(t)] = {"calibratable": True, **point.to_dict()}
        except ValueError as exc:
            heads[str(t)] = {"calibratable": False, "reason": str(exc)}
    payload = {
        "config": cfg.config_hash(),
        "split": cfg.calibration.split,
        "target_fnr": cfg.calibration.target_fnr,
        "score_from_age": cfg.evaluation.score_from_age,
        "heads": heads,
    }
    _dump_json(run / "thresholds.json", payload)

    print(f"run-dir {run}")
    for t in net.thresholds:
        entry = heads[str(t)]
        if entry["calibratable"]:
            print(
                f"under-{t}: score >= {entry['threshold']!r} "
                f"(false-adult rate {entry['achieved_fnr']:.4f})"
            )
        else:
            print(f"under-{t}: uncalibratable ({entry['reason']})")
    return 0


def _read_thresholds(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"thresholds not found: {path} (run calibrate first or pass --thresholds)")
    obj = _load_json(path)
    if not isinstance(obj, dict) or "heads" not in obj:
        raise ConfigError(f"{path} is not a thresholds file")
    return obj


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    params, net = _load_model(cfg, args)
    manifest, store = _load_data(cfg, expected_dim=net.dim)

    thresholds_path = (
        Path(args.thresholds) if args.thresholds is not None
        else cfg.run_dir("calibrate", args.out) / "thresholds.json"
    )
    calibration = _read_thresholds(thresholds_path)
    if bool(calibration.get("score_from_age")) != cfg.evaluation.score_from_age:
        raise ConfigError(
            "thresholds were calibrated with a different score rule "
            f"(score_from_age={calibration.get('score_from_age')!r})"
        )
    operating_points: dict[int, float] = {}
    for t in net.thresholds:
        entry = calibration["heads"].get(str(t))
        if entry is None or not entry.get("calibratable"):
            raise ConfigError(f"no calibrated threshold for head {t} in {thresholds_path}")
        operating_points[t] = float(entry["threshold"])

    split = args.split if args.split is not None else cfg.evaluation.split
    samples = split_view(manifest, split)
    if not samples:
        raise ConfigError(f"evaluation split {split!r} is empty")
    run = _start_run(cfg, "evaluate", args.out)

    rows = evaluate_split(
        params, net, samples, store, score_from_age=cfg.evaluation.score_from_age,
    )
    write_predictions_csv(run / "predictions.csv", rows)

    groups = build_eval_groups(samples, cfg.evaluation.groupings)
    group_metrics = grouped_report(rows, groups, operating_points)
    ages = np.array([r.age for r in rows])
    estimates = np.array([r.age_estimate for r in rows])
    det_notes: dict[str, str] = {}
    for t in net.thresholds:
        pairs = [(r.scores[t], r.age < t) for r in rows]
        try:
            curve = det_curve(pairs)
        except ValueError as exc:
            det_notes[str(t)] = str(exc)
            continue
        (run / f"det_{t}.csv").write_text(curve.to_csv(), encoding="utf-8")

    payload = {
        "config": cfg.config_hash(),
        "split": split,
        "score_from_age": cfg.evaluation.score_from_age,
        "count": len(rows),
        "mae": float(np.mean(np.abs(estimates - ages))),
        "operating_points": {str(t): v for t, v in operating_points.items()},
        "target_fnr": calibration.get("target_fnr"),
        "det_skipped": det_notes,
        "groups": [g.to_dict() for g in group_metrics],
    }
    _dump_json(run / "metrics.json", payload)
    (run / "metrics.txt").write_text(render_metrics_text(group_metrics), encoding="utf-8")

    print(f"run-dir {run}")
    print(f"evaluated {len(rows)} samples of split {split!r} (MAE {payload['mae']:.4f})")
    return 0


def _image_stats_overlay(samples, images_dir: Path) -> dict[str, dict[str, float]]:
    overlay: dict[str, dict[str, float]] = {}
    for s in samples:
        for suffix in _IMAGE_SUFFIXES:
            path = images_dir / f"{s.id}{suffix}"
            if path.exists():
                overlay[s.id] = image_stats(load_image(path)).to_dict()
                break
    return overlay


def cmd_compose_wild(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    manifest_path, _ = cfg.data_paths()
    if not manifest_path.exists():
        raise ConfigError(f"manifest not found: {manifest_path}")
    manifest = load_manifest(manifest_path)
    run = _start_run(cfg, "compose-wild", args.out)

    stats: dict[str, dict[str, float]] = {}
    if args.images_dir is not None:
        images_dir = Path(args.images_dir)
        if not images_dir.is_dir():
            raise ConfigError(f"images dir not found: {images_dir}")
        stats.update(_image_stats_overlay(manifest.samples, images_dir))
    if args.stats_csv is not None:
        # explicit measurements override derived ones, key by key
        for sample_id, values in read_stats_csv(args.stats_csv).items():
            stats.setdefault(sample_id, {}).update(values)

    selection = compose_wild(manifest.samples, cfg.wild, stats=stats or None)
    (run / "wild_ids.txt").write_text(
        "".join(f"{i}\n" for i in selection.union), encoding="utf-8",
    )
    (run / "breakdown.csv").write_text(selection.breakdown_csv(), encoding="utf-8")
    lacking = {c: n for c, n in selection.missing.items() if n}
    if lacking:
        lines = ["criterion,samples_missing_stats"]
        lines += [f"{c},{n}" for c, n in sorted(lacking.items())]
        (run / "missing.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    print(f"run-dir {run}")
    print(f"selected {len(selection.union)} of {len(manifest.samples)} samples")
    for criterion, count in sorted(lacking.items()):
        print(f"note: {count} samples lacked stats for {criterion}")
    return 0


def cmd_flag_noise(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    predictions_path = Path(args.predictions)
    if not predictions_path.exists():
        raise ConfigError(f"predictions file not found: {predictions_path}")
    rows = read_predictions_csv(predictions_path)
    adult_age = cfg.noise.adult_age
    if any(adult_age not in r.scores for r in rows):
        raise ConfigError(
            f"predictions file lacks a score_{adult_age} column needed by the noise rules"
        )
    run = _start_run(cfg, "flag-noise", args.out)

    tuples = [(r.id, r.age, r.age_estimate, 1.0 - r.scores[adult_age]) for r in rows]
    flags = flag_label_noise(tuples, cfg.noise)
    (run / "noise_flags.csv").write_text(flags_csv(flags), encoding="utf-8")

    print(f"run-dir {run}")
    print(f"flagged {len(flags)} rows over {len(rows)} predictions")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fracs = tuple(float(x) for x in args.split_fracs.split(","))
    if len(fracs) != 3:
        raise ConfigError(f"--split-fracs needs three comma-separated values, got {args.split_fracs!r}")
    manifest, embeddings = synth_dataset(
        size=args.size, dim=args.dim, noise=args.noise, seed=args.seed,
        split_fracs=fracs, source=args.source, with_meta=args.meta,
    )
    manifest_path = out / "manifest.jsonl"
    embeddings_path = out / "embeddings.bin"
    write_manifest(manifest_path, manifest)
    write_embeddings(embeddings_path, embeddings)
    print(f"wrote {manifest_path}")
    print(f"wrote {embeddings_path}")
    print(f"{len(manifest.samples)} samples, dim {args.dim}, noise {args.noise}, seed {args.seed}")
    return 0


def cmd_report(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    run = _start_run(cfg, "report", args.out)
    missing: list[str] = []

    train_report = None
    report_path = cfg.run_dir("train", args.out) / "train_report.json"
    if report_path.exists():
        train_report = TrainReport.from_dict(_load_json(report_path))
        reporting.render_training_curves(train_report, run / "training_curves.png")
    else:
        missing.append(str(report_path))

    thresholds = None
    target_fnr = None
    thresholds_path = cfg.run_dir("calibrate", args.out) / "thresholds.json"
    if thresholds_path.exists():
        payload = _load_json(thresholds_path)
        target_fnr = payload.get("target_fnr")
        thresholds = {
            int(t): CalibratedThreshold.from_dict(entry)
            for t, entry in payload["heads"].items()
            if entry.get("calibratable")
        }
    else:
        missing.append(str(thresholds_path))

    metrics = None
    group_metrics = None
    evaluate_dir = cfg.run_dir("evaluate", args.out)
    metrics_path = evaluate_dir / "metrics.json"
    if metrics_path.exists():
        metrics = _load_json(metrics_path)
        group_metrics = [
            GroupMetrics(
                name=g["name"], size=g["size"], mae=g["mae"],
                heads={int(t): m for t, m in g["heads"].items()},
            )
            for g in metrics["groups"]
        ]
        curves = {}
        for t in sorted(int(k) for k in metrics["operating_points"]):
            det_path = evaluate_dir / f"det_{t}.csv"
            if det_path.exists():
                curves[t] = DetCurve.from_csv(det_path.read_text(encoding="utf-8"))
        if curves:
            reporting.render_det_figure(
                curves, run / "det.png",
                target_fnr=target_fnr if target_fnr is not None else metrics.get("target_fnr"),
            )
        for t in (sorted(group_metrics[0].heads) if group_metrics else []):
            reporting.render_group_bars(group_metrics, t, run / f"group_rates_head_{t}.png")
    else:
        missing.append(str(metrics_path))

    if cfg.manifest is not None:
        manifest_path = cfg.data_paths()[0]
        if manifest_path.exists():
            manifest = load_manifest(manifest_path)
            reporting.render_age_histogram(manifest.samples, run / "age_distribution.png")
        else:
            missing.append(str(manifest_path))

    reporting.write_summary(
        run, cfg.config_hash(),
        train_report=train_report, thresholds=thresholds, metrics=metrics,
        group_metrics=group_metrics, missing=missing,
    )
    print(f"run-dir {run}")
    for item in missing:
        print(f"note: missing input {item}")
    return 0


def _add_common(sub: argparse.ArgumentParser, config_required: bool = True) -> None:
    sub.add_argument("--config", required=config_required, help="experiment config JSON")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--out", default=None, help="run-directory root (default: config output_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agescreen",
        description="Train, calibrate, and evaluate underage-screening heads "
                    "on precomputed face embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit the heads and save a checkpoint")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="fix per-head operating points at the target miss rate")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default: the train run's)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="metrics, predictions, and DET curves on one split")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default: the train run's)")
    p.add_argument("--thresholds", default=None,
                   help="thresholds JSON (default: the calibrate run's)")
    p.add_argument("--split", choices=["train", "val", "test"], default=None,
                   help="override the evaluation split")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compose-wild", help="select the hard-condition stress subset")
    _add_common(p)
    p.add_argument("--stats-csv", default=None,
                   help="per-sample statistic overlay (id column plus stat columns)")
    p.add_argument("--images-dir", default=None,
                   help="directory of <id>.png/.jpg images to measure directly")
    p.set_defaults(func=cmd_compose_wild)

    p = sub.add_parser("flag-noise", help="list predictions whose labels deserve review")
    _add_common(p)
    p.add_argument("--predictions", required=True, help="predictions CSV from evaluate")
    p.set_defaults(func=cmd_flag_noise)

    p = sub.add_parser("synth", help="generate a synthetic manifest and embedding file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, required=True, help="number of samples")
    p.add_argument("--dim", type=int, default=64, help="embedding dimension")
    p.add_argument("--noise", type=float, default=0.5, help="embedding noise sigma")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--split-fracs", default="0.7,0.15,0.15",
                   help="train,val,test fractions")
    p.add_argument("--source", default="synth", help="source tag for the samples")
    p.add_argument("--meta", action="store_true", help="attach synthetic quality metadata")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="render figures and summaries for a finished run")
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ManifestError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
