"""Subcommand front door wiring the whole workflow.

Every run writes a ``run.json`` into its output directory echoing the
resolved configuration and seeds; ``ihcmil rerun run.json`` replays a run
exactly. Flags override values from ``--config``; unknown config keys are
rejected.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import annotation, evalkit, mil, pipeline, synth
from .errors import IhcMilError
from .slide_io import load_slide, read_cohort, write_cohort
from .stain import read_features, write_features, FeatureMatrix


def _load_config(path: str | None, known: set[str]) -> dict:
    if not path:
        return {}
    doc = json.loads(Path(path).read_text())
    unknown = set(doc) - known
    if unknown:
        raise IhcMilError(f"unknown config keys: {sorted(unknown)}")
    return doc


def _resolve(args: argparse.Namespace, keys: list[str]) -> dict:
    """Merge config file and flags; explicit flags win over config values."""
    cfg = _load_config(getattr(args, "config", None), set(keys))
    out = {}
    for key in keys:
        flag_val = getattr(args, key, None)
        out[key] = flag_val if flag_val is not None else cfg.get(key)
    return out


def _write_run(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"version": 1, "command": command, "config": resolved}
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _load_cohort_data(cohort_dir: str, pcfg: pipeline.PipelineConfig):
    cohort_dir = Path(cohort_dir)
    manifest = read_cohort(cohort_dir)
    slides = {}
    for patient in manifest.patients:
        for rel in patient.slides:
            slide = load_slide(cohort_dir / rel)
            slides[slide.slide_id] = slide
    return manifest, pipeline.CohortData(manifest, slides, pcfg)


def _load_labels(args, manifest, cohort_dir: Path) -> dict | None:
    if getattr(args, "labels_from_truth", False):
        truths = {}
        for patient in manifest.patients:
            for rel in patient.slides:
                slide_id = Path(rel).stem
                truths[slide_id] = synth.read_truth(slide_id, cohort_dir)
        return pipeline.labels_from_truth(truths)
    if getattr(args, "labels", None):
        return annotation.read_label_snapshot(args.labels)
    return None


def _pipeline_config(resolved: dict) -> pipeline.PipelineConfig:
    keys = (
        "tile_size", "patch_size", "min_tissue_frac", "augment", "mode",
        "responder_weight", "tumor_decision_threshold", "patient_aggregation",
        "hidden1", "hidden2", "attention_dim", "epochs_tumor",
        "epochs_responder", "seed",
    )
    kwargs = {k: resolved[k] for k in keys if resolved.get(k) is not None}
    return pipeline.PipelineConfig(**kwargs)


PIPELINE_KEYS = [
    "tile_size", "patch_size", "min_tissue_frac", "augment", "mode",
    "responder_weight", "tumor_decision_threshold", "patient_aggregation",
    "hidden1", "hidden2", "attention_dim", "epochs_tumor", "epochs_responder",
    "seed",
]


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tile-size", type=int, dest="tile_size")
    p.add_argument("--patch-size", type=int, dest="patch_size")
    p.add_argument("--min-tissue-frac", type=float, dest="min_tissue_frac")
    p.add_argument("--augment", action="store_true", dest="augment", default=None)
    p.add_argument("--no-augment", action="store_false", dest="augment", default=None)
    p.add_argument("--mode", choices=["two_step", "single_step"], dest="mode")
    p.add_argument("--responder-weight", type=float, dest="responder_weight")
    p.add_argument("--threshold", type=float, dest="tumor_decision_threshold")
    p.add_argument("--aggregation", dest="patient_aggregation")
    p.add_argument("--hidden1", type=int)
    p.add_argument("--hidden2", type=int)
    p.add_argument("--attention-dim", type=int, dest="attention_dim")
    p.add_argument("--epochs-tumor", type=int, dest="epochs_tumor")
    p.add_argument("--epochs-responder", type=int, dest="epochs_responder")
    p.add_argument("--seed", type=int)


# ---------------------------------------------------------------- commands


def cmd_synth_gen(args) -> int:
    keys = [
        "n_patients", "responder_fraction", "slide_size", "tile_size",
        "tps_mean", "tps_sd", "pattern_link", "seed", "n_test",
    ]
    resolved = _resolve(args, keys)
    resolved = {k: v for k, v in resolved.items() if v is not None}
    n_test = resolved.pop("n_test", 0) or 0
    cfg = synth.SynthConfig(**resolved)
    manifest, slides, truths = synth.generate_cohort(cfg)

    if n_test:
        # stratified: move the highest-index patients of each class to test
        responders = [p for p in manifest.patients if p.response == "R"]
        others = [p for p in manifest.patients if p.response != "R"]
        n_test_r = max(1, int(np.floor(len(responders) * n_test / cfg.n_patients + 0.5)))
        for p in responders[len(responders) - n_test_r :]:
            p.split = "test"
        for p in others[len(others) - (n_test - n_test_r) :]:
            p.split = "test"

    out = Path(args.out)
    for slide in slides.values():
        from .slide_io import save_slide

        save_slide(slide, out / "slides" / f"{slide.slide_id}.png")
    for truth in truths.values():
        synth.write_truth(truth, out)
    write_cohort(manifest, out)
    _write_run(out, "synth gen", {**resolved, "n_test": n_test})
    print(f"wrote cohort of {cfg.n_patients} patients to {out}")
    return 0


def cmd_tile(args) -> int:
    resolved = _resolve(args, PIPELINE_KEYS)
    pcfg = _pipeline_config(resolved)
    manifest, data = _load_cohort_data(args.cohort, pcfg)
    out = Path(args.out or args.cohort)
    rows = []
    for pid in sorted(data.tiles_by_patient):
        for rec in data.tiles_by_patient[pid]:
            row = rec.to_json()
            row["patient_id"] = pid
            rows.append(row)
    (out / "tiles.json").write_text(json.dumps({"version": 1, "tiles": rows}, indent=2))
    _write_run(out, "tile", resolved)
    print(f"{len(rows)} tiles -> {out / 'tiles.json'}")
    return 0


def cmd_annotate_serve(args) -> int:
    annotation.serve(
        args.cohort,
        port=args.port,
        host=args.host,
        tile_size=args.tile_size or 128,
        min_tissue_frac=args.min_tissue_frac if args.min_tissue_frac is not None else 0.05,
        labels_path=args.labels,
    )
    return 0


def cmd_annotate_export(args) -> int:
    log = annotation.LabelLog(args.labels_log)
    n = annotation.export_labels(log, args.out)
    print(f"exported {n} labels -> {args.out}")
    return 0


def cmd_features_extract(args) -> int:
    resolved = _resolve(args, PIPELINE_KEYS)
    pcfg = _pipeline_config(resolved)
    manifest, data = _load_cohort_data(args.cohort, pcfg)
    values, index = [], []
    n_grid = pcfg.tile_size // pcfg.patch_size
    for pid in sorted(data.tiles_by_patient):
        for rec in data.tiles_by_patient[pid]:
            feats = data.features_for_tile(rec)
            for k in range(feats.shape[0]):
                py, px = divmod(k, n_grid)
                values.append(feats[k])
                index.append(
                    {
                        "slide_id": rec.slide_id,
                        "grid_x": rec.grid_x,
                        "grid_y": rec.grid_y,
                        "patch_x": px,
                        "patch_y": py,
                    }
                )
    matrix = FeatureMatrix(values=np.stack(values), index=index)
    write_features(matrix, args.out)
    out_dir = Path(args.out).parent
    _write_run(out_dir, "features extract", resolved)
    print(f"{matrix.n} x {matrix.d} features -> {args.out}")
    return 0


def cmd_features_import(args) -> int:
    matrix = read_features(args.path)
    print(f"valid feature file: n={matrix.n} d={matrix.d}")
    return 0


def cmd_train_tumor(args) -> int:
    resolved = _resolve(args, PIPELINE_KEYS)
    pcfg = _pipeline_config(resolved)
    manifest, data = _load_cohort_data(args.cohort, pcfg)
    labels = _load_labels(args, manifest, Path(args.cohort))
    if labels is None:
        raise IhcMilError("train tumor requires --labels or --labels-from-truth")
    train_ids = [p.id for p in manifest.patients if p.split == "train"]
    model = pipeline.train_tumor_model(data, labels, train_ids, pcfg)
    model.save(args.out)
    _write_run(Path(args.out).parent, "train tumor", resolved)
    print(f"tumor model -> {args.out}")
    return 0


def cmd_train_responder(args) -> int:
    resolved = _resolve(args, PIPELINE_KEYS)
    pcfg = _pipeline_config(resolved)
    manifest, data = _load_cohort_data(args.cohort, pcfg)
    labels = None
    if pcfg.mode == "two_step":
        labels = _load_labels(args, manifest, Path(args.cohort))
        if labels is None:
            raise IhcMilError("two_step responder training requires tumor labels")
    train_ids = [p.id for p in manifest.patients if p.split == "train"]
    model = pipeline.train_responder_model(data, labels, train_ids, pcfg)
    model.save(args.out)
    _write_run(Path(args.out).parent, "train responder", resolved)
    print(f"responder model -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    resolved = _resolve(args, PIPELINE_KEYS)
    pcfg = _pipeline_config(resolved)
    manifest, data = _load_cohort_data(args.cohort, pcfg)
    responder_model = pipeline.TrainedModel.load(args.responder_model)
    test_ids = [p.id for p in manifest.patients if p.split == "test"] or [
        p.id for p in manifest.patients
    ]
    by_id = manifest.by_id()
    if pcfg.mode == "two_step":
        tumor_model = pipeline.TrainedModel.load(args.tumor_model)
        preds = [
            pipeline.two_step_predict(by_id[pid], tumor_model, responder_model, pcfg, data)
            for pid in test_ids
        ]
    else:
        preds = [
            pipeline.single_step_predict(by_id[pid], responder_model, pcfg, data)
            for pid in test_ids
        ]
    pipeline.write_predictions(preds, args.out)
    _write_run(Path(args.out).parent, "predict", resolved)
    print(f"{len(preds)} patient predictions -> {args.out}")
    return 0


def cmd_cv(args) -> int:
    keys = PIPELINE_KEYS + ["folds", "repeats"]
    resolved = _resolve(args, keys)
    pcfg = _pipeline_config(resolved)
    manifest, data = _load_cohort_data(args.cohort, pcfg)
    labels = _load_labels(args, manifest, Path(args.cohort))
    if pcfg.mode == "two_step" and labels is None:
        raise IhcMilError("two_step cv requires tumor labels")
    report = evalkit.modified_repeated_cv(
        data,
        labels if pcfg.mode == "two_step" else None,
        pcfg,
        n_folds=resolved.get("folds") or 10,
        n_repeats=resolved.get("repeats") or 10,
        seed=pcfg.seed,
    )
    out = Path(args.out)
    evalkit.write_report(report, out / "report.json")
    resolved["cohort"] = str(args.cohort)
    resolved["labels"] = getattr(args, "labels", None)
    resolved["labels_from_truth"] = bool(getattr(args, "labels_from_truth", False))
    _write_run(out, "cv", resolved)
    print(
        f"cv: roc_auc={report.roc_auc_mean:.4f} pr_auc={report.pr_auc_mean:.4f}"
        f" -> {out / 'report.json'}"
    )
    return 0


def cmd_eval_tps(args) -> int:
    cohort_dir = Path(args.cohort)
    manifest = read_cohort(cohort_dir)
    rows = []
    for patient in manifest.patients:
        estimates = []
        for rel in patient.slides:
            slide_id = Path(rel).stem
            slide = load_slide(cohort_dir / rel)
            truth = synth.read_truth(slide_id, cohort_dir)
            estimates.append(evalkit.tps_estimate(slide.pixels, truth.tumor_mask))
        rows.append(
            {
                "patient_id": patient.id,
                "response": patient.response,
                "tps": float(np.mean(estimates)),
            }
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"version": 1, "patients": rows}, indent=2, sort_keys=True))
    print(f"TPS estimates -> {out}")
    return 0


def cmd_eval_enrich(args) -> int:
    if args.predictions:
        preds = pipeline.read_predictions(args.predictions)
        ids = [p.patient_id for p in preds]
        scores = [p.score for p in preds]
        rule = f"MIL score >= {args.threshold}"
    else:
        doc = json.loads(Path(args.tps).read_text())
        ids = [r["patient_id"] for r in doc["patients"]]
        scores = [r["tps"] for r in doc["patients"]]
        rule = f"TPS >= {args.threshold}"
    manifest = read_cohort(args.cohort)
    by_id = manifest.by_id()
    labels = [1 if by_id[pid].response == "R" else 0 for pid in ids]
    report = evalkit.enrich(scores, labels, args.threshold, rule, patient_ids=ids)
    evalkit.write_enrichment(report, args.out)
    print(
        f"selected {report.n_selected}/{report.n_total}, precision {report.precision:.3f},"
        f" accuracy {report.accuracy:.3f} -> {args.out}"
    )
    return 0


def cmd_heatmap(args) -> int:
    resolved = _resolve(args, PIPELINE_KEYS)
    pcfg = _pipeline_config(resolved)
    manifest, data = _load_cohort_data(args.cohort, pcfg)
    model = pipeline.TrainedModel.load(args.responder_model)
    from .slide_io import TileRecord, tile_pixels

    rec = TileRecord(
        slide_id=args.slide, grid_x=args.x, grid_y=args.y,
        tile_size=pcfg.tile_size, tissue_fraction=1.0,
    )
    bag = model.scaled_bag(data.bag_for_tile(rec, label=0))
    _, attn, _ = mil.forward(bag, model.params)
    logits = mil.instance_logits(bag, model.params)
    raster = tile_pixels(data.slides[args.slide], rec)
    evalkit.render_attention_heatmap(raster, attn, logits, args.out)
    print(f"heatmap -> {args.out}")
    return 0


def cmd_ablation(args) -> int:
    keys = PIPELINE_KEYS + ["folds", "repeats"]
    resolved = _resolve(args, keys)
    manifest, data = _load_cohort_data(args.cohort, _pipeline_config(resolved))
    labels_args = argparse.Namespace(
        labels=getattr(args, "labels", None),
        labels_from_truth=getattr(args, "labels_from_truth", False),
    )
    labels = _load_labels(labels_args, manifest, Path(args.cohort))
    folds = resolved.get("folds") or 10
    repeats = resolved.get("repeats") or 3
    seed = resolved.get("seed") or 0

    cells = {}
    modes = [
        ("single_step", {"mode": "single_step", "augment": True}),
        ("two_step_no_augment", {"mode": "two_step", "augment": False}),
        ("two_step_augment", {"mode": "two_step", "augment": True}),
    ]
    for name, overrides in modes:
        cfg_kwargs = dict(resolved)
        for k in ("folds", "repeats"):
            cfg_kwargs.pop(k, None)
        cfg_kwargs.update(overrides)
        pcfg = _pipeline_config(cfg_kwargs)
        report = evalkit.modified_repeated_cv(
            data,
            labels if pcfg.mode == "two_step" else None,
            pcfg,
            n_folds=folds,
            n_repeats=repeats,
            seed=seed,
        )
        cells[name] = {
            "roc_auc": report.roc_auc_mean,
            "roc_auc_ci": list(report.roc_auc_ci),
            "pr_auc": report.pr_auc_mean,
            "pr_auc_ci": list(report.pr_auc_ci),
        }

    # TPS baseline: estimator on ground-truth tumor masks, single evaluation
    tps_scores, tps_labels = [], []
    cohort_dir = Path(args.cohort)
    for patient in manifest.patients:
        estimates = []
        for rel in patient.slides:
            slide_id = Path(rel).stem
            slide = load_slide(cohort_dir / rel)
            truth = synth.read_truth(slide_id, cohort_dir)
            estimates.append(evalkit.tps_estimate(slide.pixels, truth.tumor_mask))
        tps_scores.append(float(np.mean(estimates)))
        tps_labels.append(1 if patient.response == "R" else 0)
    cells["tps_baseline"] = {
        "roc_auc": evalkit.roc_auc(tps_scores, tps_labels),
        "pr_auc": evalkit.pr_auc(tps_scores, tps_labels),
    }

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps({"version": 1, "cells": cells}, indent=2, sort_keys=True))
    _write_run(out, "ablation", resolved)
    for name, cell in cells.items():
        print(f"{name:>22}: roc_auc={cell['roc_auc']:.4f} pr_auc={cell['pr_auc']:.4f}")
    return 0


def cmd_rerun(args) -> int:
    doc = json.loads(Path(args.run_json).read_text())
    command = doc["command"]
    cfg = doc["config"]
    if command == "cv":
        ns = argparse.Namespace(
            config=None,
            cohort=cfg["cohort"],
            labels=cfg.get("labels"),
            labels_from_truth=cfg.get("labels_from_truth", False),
            out=str(Path(args.run_json).parent),
            folds=cfg.get("folds"),
            repeats=cfg.get("repeats"),
            **{k: cfg.get(k) for k in PIPELINE_KEYS},
        )
        return cmd_cv(ns)
    raise IhcMilError(f"rerun not supported for command {command!r}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ihcmil", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthetic cohort generation")
    ssub = p.add_subparsers(dest="subcommand", required=True)
    g = ssub.add_parser("gen", help="generate a synthetic cohort")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--n-patients", type=int, dest="n_patients")
    g.add_argument("--responder-fraction", type=float, dest="responder_fraction")
    g.add_argument("--slide-size", type=int, dest="slide_size")
    g.add_argument("--tile-size", type=int, dest="tile_size")
    g.add_argument("--tps-mean", type=float, dest="tps_mean")
    g.add_argument("--tps-sd", type=float, dest="tps_sd")
    g.add_argument("--pattern-link", dest="pattern_link",
                   choices=["reactive_vs_constitutive", "tps_only", "none"])
    g.add_argument("--seed", type=int)
    g.add_argument("--n-test", type=int, dest="n_test")
    g.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("tile", help="tile a cohort and write tiles.json")
    p.add_argument("--config")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("annotate", help="annotation service")
    asub = p.add_subparsers(dest="subcommand", required=True)
    s = asub.add_parser("serve", help="run the labeling service")
    s.add_argument("--cohort", required=True)
    s.add_argument("--port", type=int, default=8080)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--tile-size", type=int, dest="tile_size")
    s.add_argument("--min-tissue-frac", type=float, dest="min_tissue_frac")
    s.add_argument("--labels")
    s.set_defaults(func=cmd_annotate_serve)
    e = asub.add_parser("export", help="fold the label log into labels.jsonl")
    e.add_argument("--labels-log", required=True, dest="labels_log")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_annotate_export)

    p = sub.add_parser("features", help="feature extraction / import")
    fsub = p.add_subparsers(dest="subcommand", required=True)
    f = fsub.add_parser("extract", help="extract handcrafted patch features")
    f.add_argument("--config")
    f.add_argument("--cohort", required=True)
    f.add_argument("--out", required=True)
    _add_pipeline_flags(f)
    f.set_defaults(func=cmd_features_extract)
    i = fsub.add_parser("import", help="validate an external feature file")
    i.add_argument("--path", required=True)
    i.set_defaults(func=cmd_features_import)

    p = sub.add_parser("train", help="model training")
    tsub = p.add_subparsers(dest="subcommand", required=True)
    t = tsub.add_parser("tumor", help="step 1: tumor recognition")
    t.add_argument("--config")
    t.add_argument("--cohort", required=True)
    t.add_argument("--labels")
    t.add_argument("--labels-from-truth", action="store_true", dest="labels_from_truth")
    t.add_argument("--out", required=True)
    _add_pipeline_flags(t)
    t.set_defaults(func=cmd_train_tumor)
    r = tsub.add_parser("responder", help="step 2: responder identification")
    r.add_argument("--config")
    r.add_argument("--cohort", required=True)
    r.add_argument("--labels")
    r.add_argument("--labels-from-truth", action="store_true", dest="labels_from_truth")
    r.add_argument("--out", required=True)
    _add_pipeline_flags(r)
    r.set_defaults(func=cmd_train_responder)

    p = sub.add_parser("predict", help="patient-level prediction")
    p.add_argument("--config")
    p.add_argument("--cohort", required=True)
    p.add_argument("--tumor-model", dest="tumor_model")
    p.add_argument("--responder-model", required=True, dest="responder_model")
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cv", help="modified repeated cross-validation")
    p.add_argument("--config")
    p.add_argument("--cohort", required=True)
    p.add_argument("--labels")
    p.add_argument("--labels-from-truth", action="store_true", dest="labels_from_truth")
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int)
    p.add_argument("--repeats", type=int)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("eval", help="TPS estimation and enrichment")
    esub = p.add_subparsers(dest="subcommand", required=True)
    t = esub.add_parser("tps", help="estimate per-patient TPS")
    t.add_argument("--cohort", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_eval_tps)
    e = esub.add_parser("enrich", help="threshold enrichment report")
    e.add_argument("--cohort", required=True)
    e.add_argument("--predictions")
    e.add_argument("--tps")
    e.add_argument("--threshold", type=float, required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval_enrich)

    p = sub.add_parser("heatmap", help="render an attention heat-map overlay")
    p.add_argument("--config")
    p.add_argument("--cohort", required=True)
    p.add_argument("--responder-model", required=True, dest="responder_model")
    p.add_argument("--slide", required=True)
    p.add_argument("--x", type=int, required=True)
    p.add_argument("--y", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("ablation", help="single-step / two-step +- augmentation grid")
    p.add_argument("--config")
    p.add_argument("--cohort", required=True)
    p.add_argument("--labels")
    p.add_argument("--labels-from-truth", action="store_true", dest="labels_from_truth")
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int)
    p.add_argument("--repeats", type=int)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("rerun", help="replay a command from its run.json")
    p.add_argument("run_json")
    p.set_defaults(func=cmd_rerun)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except IhcMilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
