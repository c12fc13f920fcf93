"""Metrics, the pooled repeated CV harness, TPS estimation, enrichment, and
attention heat-maps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy import stats

from .errors import (
    EmptySelection,
    MismatchedGrid,
    NoCellsFound,
    NoPositives,
    NoTumorRegion,
    SingleClassCohort,
    SingleClassLabels,
    TooFewPatients,
)
from .pipeline import CohortData, PipelineConfig, fit_and_predict
from .stain import DAB_POSITIVE_OD, StainVectors, deconvolve_hdab

MIN_NUCLEUS_AREA = 20  # px


def _check_binary(labels) -> np.ndarray:
    arr = np.asarray(labels, dtype=np.int64)
    if set(np.unique(arr)) != {0, 1}:
        raise SingleClassLabels("labels must contain both classes")
    return arr


def roc_auc(scores, labels) -> float:
    """ROC AUC via threshold sweep with trapezoidal integration.

    Equals the Mann-Whitney statistic P(s+ > s-) + 0.5 P(tie); ties are
    grouped into single sweep points.
    """
    arr = _check_binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    s, arr = s[order], arr[order]
    # group ties
    distinct = np.where(np.diff(s))[0]
    cuts = np.concatenate([distinct, [len(s) - 1]])
    tps = np.cumsum(arr)[cuts]
    fps = np.cumsum(1 - arr)[cuts]
    pos, neg = tps[-1], fps[-1]
    tpr = np.concatenate([[0.0], tps / pos])
    fpr = np.concatenate([[0.0], fps / neg])
    return float(np.trapezoid(tpr, fpr))


def pr_auc(scores, labels) -> float:
    """Average-precision form of PR AUC (rectangles, no interpolation).

    Equal scores are grouped into one cut; precision at the cut applies to
    the whole recall increment of that group.
    """
    arr = np.asarray(labels, dtype=np.int64)
    if arr.sum() < 1:
        raise NoPositives("need at least one positive label")
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    s, arr = s[order], arr[order]
    distinct = np.where(np.diff(s))[0]
    cuts = np.concatenate([distinct, [len(s) - 1]])
    tps = np.cumsum(arr)[cuts]
    counts = cuts + 1
    pos = tps[-1]
    prev_tp = 0
    auc = 0.0
    for tp, n_at_cut in zip(tps, counts):
        precision = tp / n_at_cut
        auc += ((tp - prev_tp) / pos) * precision
        prev_tp = tp
    return float(auc)


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054):
    """95% Wilson score interval for a binomial proportion."""
    if n == 0:
        raise ValueError("n must be positive")
    phat = successes / n
    denom = 1.0 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = (z / denom) * np.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n))
    return (max(0.0, center - half), min(1.0, center + half))


@dataclass
class CvRepeat:
    roc_auc: float
    pr_auc: float
    scores: dict[str, float]
    labels: dict[str, int]
    folds: list[list[str]]


@dataclass
class CvReport:
    n_folds: int
    n_repeats: int
    repeats: list[CvRepeat]
    roc_auc_mean: float
    roc_auc_ci: tuple[float, float]
    pr_auc_mean: float
    pr_auc_ci: tuple[float, float]

    def to_json(self) -> dict:
        return {
            "version": 1,
            "n_folds": self.n_folds,
            "n_repeats": self.n_repeats,
            "roc_auc_mean": self.roc_auc_mean,
            "roc_auc_ci": list(self.roc_auc_ci),
            "pr_auc_mean": self.pr_auc_mean,
            "pr_auc_ci": list(self.pr_auc_ci),
            "repeats": [
                {
                    "roc_auc": r.roc_auc,
                    "pr_auc": r.pr_auc,
                    "scores": r.scores,
                    "labels": r.labels,
                    "folds": r.folds,
                }
                for r in self.repeats
            ],
        }


def _t_interval(values: np.ndarray):
    mean = float(values.mean())
    if len(values) < 2:
        return mean, (mean, mean)
    half = float(
        stats.t.ppf(0.975, len(values) - 1) * values.std(ddof=1) / np.sqrt(len(values))
    )
    return mean, (mean - half, mean + half)


def stratified_folds(
    patients, n_folds: int, rng: np.random.Generator
) -> list[list[str]]:
    """Patient-level folds with responders dealt round-robin first."""
    responders = sorted(p.id for p in patients if p.response == "R")
    others = sorted(p.id for p in patients if p.response != "R")
    rng.shuffle(responders)
    rng.shuffle(others)
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    for i, pid in enumerate(responders):
        folds[i % n_folds].append(pid)
    offset = len(responders)
    for j, pid in enumerate(others):
        folds[(offset + j) % n_folds].append(pid)
    return folds


def modified_repeated_cv(
    data: CohortData,
    labels: dict | None,
    cfg: PipelineConfig,
    n_folds: int = 10,
    n_repeats: int = 10,
    seed: int = 0,
) -> CvReport:
    """Repeated k-fold CV that pools out-of-fold predictions before scoring.

    Per repeat: stratify patients into folds, train on the other folds and
    predict each held-out fold, concatenate all out-of-fold patient scores,
    then compute ROC/PR AUC once. The report carries the mean and a 95%
    t-interval across repeats.
    """
    patients = data.patients()
    if len(patients) < n_folds:
        raise TooFewPatients(f"{len(patients)} patients < {n_folds} folds")
    responses = {p.response for p in patients}
    if responses != {"R", "NR"}:
        raise SingleClassCohort("cohort must contain both responders and non-responders")

    label_by_id = {p.id: (1 if p.response == "R" else 0) for p in patients}
    repeats: list[CvRepeat] = []
    for rep in range(n_repeats):
        rng = np.random.default_rng([seed, rep])
        folds = stratified_folds(patients, n_folds, rng)
        pooled: dict[str, float] = {}
        for k, fold in enumerate(folds):
            if not fold:
                continue
            train_ids = [pid for j, f in enumerate(folds) if j != k for pid in f]
            preds = fit_and_predict(
                data, labels, train_ids, fold, cfg, seed=int(seed * 10_000 + rep * 100 + k)
            )
            for pred in preds:
                pooled[pred.patient_id] = pred.score
        pids = sorted(pooled)
        scores = [pooled[p] for p in pids]
        y = [label_by_id[p] for p in pids]
        repeats.append(
            CvRepeat(
                roc_auc=roc_auc(scores, y),
                pr_auc=pr_auc(scores, y),
                scores={p: pooled[p] for p in pids},
                labels={p: label_by_id[p] for p in pids},
                folds=folds,
            )
        )
    roc_vals = np.array([r.roc_auc for r in repeats])
    pr_vals = np.array([r.pr_auc for r in repeats])
    roc_mean, roc_ci = _t_interval(roc_vals)
    pr_mean, pr_ci = _t_interval(pr_vals)
    return CvReport(
        n_folds=n_folds,
        n_repeats=n_repeats,
        repeats=repeats,
        roc_auc_mean=roc_mean,
        roc_auc_ci=roc_ci,
        pr_auc_mean=pr_mean,
        pr_auc_ci=pr_ci,
    )


def tps_estimate(
    slide_pixels: np.ndarray,
    tumor_mask: np.ndarray,
    vectors: StainVectors | None = None,
    dab_threshold: float = DAB_POSITIVE_OD,
    min_area: int = MIN_NUCLEUS_AREA,
) -> float:
    """Estimate the tumor proportion score from pixels and a tumor mask.

    Nuclei are connected components of (H-OD >= t) | (DAB-OD >= t) inside the
    tumor mask with area >= min_area; a nucleus is positive iff its mean
    DAB-OD >= t.
    """
    tumor_mask = np.asarray(tumor_mask, dtype=bool)
    if not tumor_mask.any():
        raise NoTumorRegion("tumor mask is empty")
    h_od, dab_od, _ = deconvolve_hdab(slide_pixels, vectors)
    nuclei = ((h_od >= dab_threshold) | (dab_od >= dab_threshold)) & tumor_mask
    labeled, n_comp = ndimage.label(nuclei)
    if n_comp == 0:
        raise NoCellsFound("no nuclei found inside the tumor mask")
    areas = ndimage.sum_labels(np.ones_like(labeled), labeled, np.arange(1, n_comp + 1))
    keep = np.where(areas >= min_area)[0] + 1
    if len(keep) == 0:
        raise NoCellsFound(f"no nuclei of area >= {min_area} px")
    mean_dab = ndimage.mean(dab_od, labeled, keep)
    return float(np.mean(mean_dab >= dab_threshold))


@dataclass
class EnrichmentReport:
    rule: str
    threshold: float
    n_total: int
    n_selected: int
    responders_selected: int
    total_responders: int
    precision: float
    precision_ci: tuple[float, float]
    accuracy: float
    accuracy_ci: tuple[float, float]
    recall: float
    recall_ci: tuple[float, float]
    selected: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "version": 1,
            "rule": self.rule,
            "threshold": self.threshold,
            "n_total": self.n_total,
            "n_selected": self.n_selected,
            "responders_selected": self.responders_selected,
            "total_responders": self.total_responders,
            "precision": self.precision,
            "precision_ci": list(self.precision_ci),
            "accuracy": self.accuracy,
            "accuracy_ci": list(self.accuracy_ci),
            "recall": self.recall,
            "recall_ci": list(self.recall_ci),
            "selected": self.selected,
        }


def enrich(
    scores,
    labels,
    threshold: float,
    rule: str = "score >= threshold",
    patient_ids: list[str] | None = None,
) -> EnrichmentReport:
    """Select patients with score >= threshold and report the confusion
    arithmetic with Wilson 95% intervals."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(s) < 1:
        raise ValueError("need at least one patient")
    sel = s >= threshold
    n_sel = int(sel.sum())
    if n_sel == 0:
        raise EmptySelection("rule selects nobody; precision undefined")
    tp = int((sel & (y == 1)).sum())
    tn = int((~sel & (y == 0)).sum())
    pos = int(y.sum())
    n = len(s)
    ids = patient_ids if patient_ids is not None else [str(i) for i in range(n)]
    return EnrichmentReport(
        rule=rule,
        threshold=float(threshold),
        n_total=n,
        n_selected=n_sel,
        responders_selected=tp,
        total_responders=pos,
        precision=tp / n_sel,
        precision_ci=wilson_interval(tp, n_sel),
        accuracy=(tp + tn) / n,
        accuracy_ci=wilson_interval(tp + tn, n),
        recall=tp / pos if pos else 0.0,
        recall_ci=wilson_interval(tp, pos) if pos else (0.0, 0.0),
        selected=[pid for pid, keep in zip(ids, sel) if keep],
    )


def select_threshold(scores, labels, policy: str = "full_recall") -> float:
    """Pick the enrichment cut from validation predictions.

    ``full_recall``: smallest threshold keeping every responder selected.
    ``max_f1``: exhaustive sweep over observed scores maximizing F1.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _check_binary(labels)
    if policy == "full_recall":
        return float(s[y == 1].min())
    if policy == "max_f1":
        best_t, best_f1 = None, -1.0
        for t in sorted(set(s.tolist())):
            sel = s >= t
            tp = int((sel & (y == 1)).sum())
            if tp == 0:
                continue
            prec = tp / sel.sum()
            rec = tp / y.sum()
            f1 = 2 * prec * rec / (prec + rec)
            if f1 > best_f1:
                best_f1, best_t = f1, t
        return float(best_t)
    raise ValueError(f"unknown policy {policy!r}")


def render_attention_heatmap(
    tile_raster: np.ndarray,
    attention: np.ndarray,
    logits: np.ndarray,
    out_path: str | Path,
) -> np.ndarray:
    """Alpha-blend a per-patch attention overlay onto a tile and write a PNG.

    Hue encodes the instance logit sign (red positive, blue negative);
    brightness scales with a_k / max(a); blend alpha is 0.5.
    """
    tile_raster = np.asarray(tile_raster, dtype=np.uint8)
    attention = np.asarray(attention, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    k = len(attention)
    grid = int(round(np.sqrt(k)))
    side = tile_raster.shape[0]
    if grid * grid != k or tile_raster.shape[0] != tile_raster.shape[1] or side % grid:
        raise MismatchedGrid(
            f"{k} weights do not tile a {tile_raster.shape[0]}x{tile_raster.shape[1]} raster"
        )
    if len(logits) != k:
        raise MismatchedGrid("one logit required per attention weight")
    ps = side // grid
    overlay = np.zeros_like(tile_raster, dtype=np.float64)
    amax = attention.max()
    for idx in range(k):
        gy, gx = divmod(idx, grid)
        brightness = attention[idx] / amax if amax > 0 else 0.0
        color = np.array([255.0, 0.0, 0.0]) if logits[idx] > 0 else np.array([0.0, 0.0, 255.0])
        overlay[gy * ps : (gy + 1) * ps, gx * ps : (gx + 1) * ps] = color * brightness
    blended = np.clip(0.5 * tile_raster + 0.5 * overlay, 0, 255).astype(np.uint8)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(blended, mode="RGB").save(out_path)
    return blended


def write_report(report: CvReport, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report.to_json(), sort_keys=True, indent=2))


def write_enrichment(report: EnrichmentReport, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report.to_json(), sort_keys=True, indent=2))
