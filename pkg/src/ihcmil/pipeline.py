"""Two-step orchestration: bags, augmentation, splits, filtering, prediction.

A bag is one macro-tile whose instances are its patch-size sub-patches in
row-major order; the patient score aggregates per-tumor-tile responder
probabilities (mean by default). The single-step ablation runs the same
machinery on all tiles with no tumor filter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import mil
from .errors import (
    EmptyPatient,
    NoTumorTiles,
    SingleClassCohort,
    UnlabeledTile,
)
from .mil import Bag, MilDims, MilParams, TrainConfig
from .slide_io import (
    DIHEDRAL_TRANSFORMS,
    CohortManifest,
    PatientEntry,
    SlideImage,
    TileRecord,
    segment_tissue,
    tile_pixels,
    tile_slide,
)
from .stain import extract_handcrafted


@dataclass
class PipelineConfig:
    tile_size: int = 128
    patch_size: int = 32
    min_tissue_frac: float = 0.05
    augment: bool = True
    mode: str = "two_step"  # | "single_step"
    responder_weight: float = 4.0
    tumor_decision_threshold: float = 0.5
    patient_aggregation: str = "mean"  # | "max" | "top3_mean"
    hidden1: int = 64
    hidden2: int = 64
    attention_dim: int = 32
    epochs_tumor: int = 12
    epochs_responder: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.tile_size % self.patch_size != 0:
            raise ValueError("patch_size must divide tile_size")
        if self.responder_weight <= 0:
            raise ValueError("responder_weight must be positive")
        if self.mode not in ("two_step", "single_step"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def dims(self, d: int) -> MilDims:
        return MilDims(d=d, h1=self.hidden1, h2=self.hidden2, L=self.attention_dim)

    def train_config(self, epochs: int, seed: int) -> TrainConfig:
        return TrainConfig(epochs=epochs, seed=seed)


@dataclass
class FeatureScaler:
    """Per-dimension z-score scaler fitted on training-bag instances.

    Handcrafted feature dimensions span very different ranges (histogram
    bins vs gradient magnitudes); training without standardization saturates
    the tanh attention layer.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, bags: list[Bag]) -> "FeatureScaler":
        stacked = np.concatenate([b.instances for b in bags], axis=0)
        return cls(
            mean=stacked.mean(axis=0),
            std=np.maximum(stacked.std(axis=0), 1e-6),
        )

    def transform(self, instances: np.ndarray) -> np.ndarray:
        return (instances - self.mean) / self.std

    def transform_bags(self, bags: list[Bag]) -> list[Bag]:
        return [
            Bag(
                bag_id=b.bag_id,
                instances=self.transform(b.instances),
                label=b.label,
                weight=b.weight,
                origin=b.origin,
            )
            for b in bags
        ]


@dataclass
class TrainedModel:
    params: MilParams
    scaler: FeatureScaler
    log: list[dict] = field(default_factory=list)

    def bag_probability(self, instances: np.ndarray) -> float:
        return mil.bag_probability(self.params, self.scaler.transform(instances))

    def scaled_bag(self, bag: Bag) -> Bag:
        return Bag(
            bag_id=bag.bag_id,
            instances=self.scaler.transform(bag.instances),
            label=bag.label,
            weight=bag.weight,
            origin=bag.origin,
        )

    def save(self, path: str | Path, cfg: TrainConfig | None = None) -> None:
        mil.save_checkpoint(self.params, path, cfg, self.log)
        doc = json.loads(Path(path).read_text())
        doc["scaler"] = {"mean": self.scaler.mean.tolist(), "std": self.scaler.std.tolist()}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        params = mil.load_checkpoint(path)
        doc = json.loads(Path(path).read_text())
        sc = doc.get("scaler")
        if sc is None:
            scaler = FeatureScaler(
                mean=np.zeros(params.W1.shape[1]), std=np.ones(params.W1.shape[1])
            )
        else:
            scaler = FeatureScaler(
                mean=np.asarray(sc["mean"], dtype=np.float64),
                std=np.asarray(sc["std"], dtype=np.float64),
            )
        return cls(params=params, scaler=scaler, log=doc.get("log", []))


@dataclass
class CohortSplit:
    train: list[str]
    validation: list[str]
    stratified: bool = True


@dataclass
class PatientPrediction:
    patient_id: str
    score: float
    n_tiles_total: int
    n_tumor_tiles_predicted: int
    fallback: bool = False
    tiles: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "score": self.score,
            "n_tiles_total": self.n_tiles_total,
            "n_tumor_tiles_predicted": self.n_tumor_tiles_predicted,
            "fallback": self.fallback,
            "tiles": self.tiles,
        }


def stratified_split(
    patients: list[PatientEntry], validation_fraction: float = 0.2, seed: int = 0
) -> CohortSplit:
    """Split responders and non-responders independently at the fraction.

    Rounding is half-up per class; the validation set always keeps at least
    one responder.
    """
    responders = [p.id for p in patients if p.response == "R"]
    others = [p.id for p in patients if p.response != "R"]
    if not responders or not others:
        raise SingleClassCohort("need at least one responder and one non-responder")
    rng = np.random.default_rng(seed)
    val: list[str] = []
    train: list[str] = []
    for group in (responders, others):
        idx = np.array(group)
        rng.shuffle(idx)
        n_val = int(np.floor(len(group) * validation_fraction + 0.5))
        if group is responders:
            n_val = max(n_val, 1)
        n_val = min(n_val, len(group) - 1) if len(group) > 1 else n_val
        val.extend(idx[:n_val].tolist())
        train.extend(idx[n_val:].tolist())
    return CohortSplit(train=sorted(train), validation=sorted(val))


def augment_tiles(tile_lists: dict[str, list[TileRecord]]) -> dict[str, list[TileRecord]]:
    """Equalize per-patient tile counts at the maximum by cycling originals.

    Extras revisit the patient's tiles in order; each completed pass over the
    originals advances one step through the dihedral transforms starting at
    rot90 (identity is skipped so augmented tiles differ from their source).
    """
    for pid, tiles in tile_lists.items():
        if not tiles:
            raise EmptyPatient(f"patient {pid} has no tiles")
    max_tiles = max(len(t) for t in tile_lists.values())
    out: dict[str, list[TileRecord]] = {}
    for pid, tiles in tile_lists.items():
        new_list = list(tiles)
        n = len(tiles)
        for i in range(max_tiles - n):
            src = tiles[i % n]
            transform = DIHEDRAL_TRANSFORMS[1 + (i // n) % (len(DIHEDRAL_TRANSFORMS) - 1)]
            new_list.append(
                replace(src, source="augmented", aug_id=i, transform=transform)
            )
        out[pid] = new_list
    return out


class CohortData:
    """Tiled cohort with a per-tile patch-feature cache.

    Tiling runs once per slide at construction; features are extracted
    lazily per (tile, transform) and memoized, so augmentation and repeated
    CV folds never recompute patch features.
    """

    def __init__(
        self,
        manifest: CohortManifest,
        slides: dict[str, SlideImage],
        cfg: PipelineConfig,
    ):
        self.manifest = manifest
        self.slides = slides
        self.cfg = cfg
        self.tiles_by_patient: dict[str, list[TileRecord]] = {}
        self._feature_cache: dict[tuple, np.ndarray] = {}
        for patient in manifest.patients:
            tiles: list[TileRecord] = []
            for rel in patient.slides:
                slide_id = Path(rel).stem
                slide = slides[slide_id]
                mask = segment_tissue(slide)
                tiles.extend(
                    tile_slide(slide, mask, cfg.tile_size, cfg.min_tissue_frac)
                )
            self.tiles_by_patient[patient.id] = tiles

    def patients(self) -> list[PatientEntry]:
        return self.manifest.patients

    def features_for_tile(self, rec: TileRecord) -> np.ndarray:
        """(K, 27) patch features for a tile, row-major over the patch grid."""
        key = (rec.slide_id, rec.grid_x, rec.grid_y, rec.transform)
        cached = self._feature_cache.get(key)
        if cached is not None:
            return cached
        px = tile_pixels(self.slides[rec.slide_id], rec)
        ps = self.cfg.patch_size
        n = rec.tile_size // ps
        rows = []
        for py in range(n):
            for pxi in range(n):
                patch = px[py * ps : (py + 1) * ps, pxi * ps : (pxi + 1) * ps]
                rows.append(extract_handcrafted(patch, ps))
        feats = np.stack(rows)
        self._feature_cache[key] = feats
        return feats

    def bag_for_tile(self, rec: TileRecord, label: int, weight: float = 1.0) -> Bag:
        return Bag(
            bag_id=f"{rec.slide_id}:{rec.grid_x}:{rec.grid_y}:{rec.transform}",
            instances=self.features_for_tile(rec),
            label=label,
            weight=weight,
            origin=rec.key(),
        )


def make_tumor_bags(
    data: CohortData,
    labels: dict[tuple[str, int, int], str],
    patient_ids: list[str] | None = None,
) -> list[Bag]:
    """One weight-1 bag per labeled tile; responder/non-responder tiles mix."""
    ids = patient_ids if patient_ids is not None else [p.id for p in data.patients()]
    bags = []
    for pid in ids:
        for rec in data.tiles_by_patient[pid]:
            label = labels.get(rec.key())
            if label is None:
                raise UnlabeledTile(f"tile {rec.key()} has no tumor label")
            bags.append(data.bag_for_tile(rec, label=1 if label == "tumor" else 0))
    return bags


def filter_tumor_tiles(
    tiles: list[TileRecord],
    tumor_model: TrainedModel,
    threshold: float,
    data: CohortData,
) -> list[TileRecord]:
    """Keep tiles with predicted tumor probability >= threshold.

    The probability is recorded on every input record, kept or not.
    """
    kept = []
    for rec in tiles:
        p = tumor_model.bag_probability(data.features_for_tile(rec))
        rec.tumor_prob = float(p)
        if p >= threshold:
            kept.append(rec)
    return kept


def make_responder_bags(
    data: CohortData,
    tumor_tile_sets: dict[str, list[TileRecord]],
    augment: bool,
    responder_weight: float = 4.0,
) -> list[Bag]:
    """One bag per tumor tile; label inherited from patient response."""
    by_id = data.manifest.by_id()
    for pid, tiles in tumor_tile_sets.items():
        if not tiles:
            raise NoTumorTiles(f"patient {pid} has no tumor tiles")
    tile_sets = augment_tiles(tumor_tile_sets) if augment else tumor_tile_sets
    bags = []
    for pid in sorted(tile_sets):
        is_resp = by_id[pid].response == "R"
        weight = responder_weight if is_resp else 1.0
        for rec in tile_sets[pid]:
            bags.append(data.bag_for_tile(rec, label=1 if is_resp else 0, weight=weight))
    return bags


def _aggregate(probs: list[float], method: str) -> float:
    arr = np.asarray(probs, dtype=np.float64)
    if method == "mean":
        return float(arr.mean())
    if method == "max":
        return float(arr.max())
    if method == "top3_mean":
        return float(np.sort(arr)[-3:].mean())
    raise ValueError(f"unknown aggregation {method!r}")


def two_step_predict(
    patient: PatientEntry,
    tumor_model: TrainedModel,
    responder_model: TrainedModel,
    cfg: PipelineConfig,
    data: CohortData,
) -> PatientPrediction:
    """Filter to predicted tumor tiles, score each, aggregate to the patient.

    Falls back to all tiles (flagged) when no tile passes the filter.
    """
    tiles = data.tiles_by_patient[patient.id]
    survivors = filter_tumor_tiles(tiles, tumor_model, cfg.tumor_decision_threshold, data)
    fallback = not survivors
    scored = tiles if fallback else survivors
    tile_rows = []
    probs = []
    for rec in scored:
        bag = responder_model.scaled_bag(data.bag_for_tile(rec, label=0))
        p, attn, _ = mil.forward(bag, responder_model.params)
        probs.append(float(p))
        tile_rows.append(
            {
                "slide_id": rec.slide_id,
                "grid_x": rec.grid_x,
                "grid_y": rec.grid_y,
                "tumor_prob": rec.tumor_prob,
                "responder_prob": float(p),
                "attention_max": float(np.max(attn)),
            }
        )
    return PatientPrediction(
        patient_id=patient.id,
        score=_aggregate(probs, cfg.patient_aggregation),
        n_tiles_total=len(tiles),
        n_tumor_tiles_predicted=len(survivors),
        fallback=fallback,
        tiles=tile_rows,
    )


def single_step_predict(
    patient: PatientEntry,
    responder_model: TrainedModel,
    cfg: PipelineConfig,
    data: CohortData,
) -> PatientPrediction:
    tiles = data.tiles_by_patient[patient.id]
    probs = []
    tile_rows = []
    for rec in tiles:
        bag = responder_model.scaled_bag(data.bag_for_tile(rec, label=0))
        p, attn, _ = mil.forward(bag, responder_model.params)
        probs.append(float(p))
        tile_rows.append(
            {
                "slide_id": rec.slide_id,
                "grid_x": rec.grid_x,
                "grid_y": rec.grid_y,
                "tumor_prob": None,
                "responder_prob": float(p),
                "attention_max": float(np.max(attn)),
            }
        )
    return PatientPrediction(
        patient_id=patient.id,
        score=_aggregate(probs, cfg.patient_aggregation),
        n_tiles_total=len(tiles),
        n_tumor_tiles_predicted=len(tiles),
        tiles=tile_rows,
    )


def _bags_for_patients(
    data: CohortData,
    labels: dict,
    patient_ids: list[str],
) -> list[Bag]:
    return make_tumor_bags(data, labels, patient_ids)


def train_tumor_model(
    data: CohortData,
    labels: dict,
    patient_ids: list[str],
    cfg: PipelineConfig,
    seed: int | None = None,
):
    """Step 1: tumor vs non-tumor tile recognizer on combined R/NR tiles."""
    seed = cfg.seed if seed is None else seed
    entries = [p for p in data.patients() if p.id in set(patient_ids)]
    split = stratified_split(entries, 0.2, seed)
    train_bags = _bags_for_patients(data, labels, split.train)
    val_bags = _bags_for_patients(data, labels, split.validation)
    scaler = FeatureScaler.fit(train_bags)
    d = train_bags[0].instances.shape[1]
    params, log = mil.train(
        scaler.transform_bags(train_bags),
        cfg.train_config(cfg.epochs_tumor, seed),
        dims=cfg.dims(d),
        val_bags=scaler.transform_bags(val_bags),
    )
    return TrainedModel(params=params, scaler=scaler, log=log)


def _ground_truth_tumor_tiles(
    data: CohortData, labels: dict, patient_ids: list[str]
) -> dict[str, list[TileRecord]]:
    out = {}
    for pid in patient_ids:
        out[pid] = [
            rec
            for rec in data.tiles_by_patient[pid]
            if labels.get(rec.key()) == "tumor"
        ]
    return out


def train_responder_model(
    data: CohortData,
    labels: dict | None,
    patient_ids: list[str],
    cfg: PipelineConfig,
    seed: int | None = None,
):
    """Step 2: responder vs non-responder on tumor tiles (or all tiles when
    labels is None, i.e. single-step mode)."""
    seed = cfg.seed if seed is None else seed
    entries = [p for p in data.patients() if p.id in set(patient_ids)]
    split = stratified_split(entries, 0.2, seed)

    def bags_for(ids: list[str], augment: bool) -> list[Bag]:
        if labels is None:
            tile_sets = {pid: list(data.tiles_by_patient[pid]) for pid in ids}
        else:
            tile_sets = _ground_truth_tumor_tiles(data, labels, ids)
        return make_responder_bags(data, tile_sets, augment, cfg.responder_weight)

    train_bags = bags_for(split.train, cfg.augment)
    val_bags = bags_for(split.validation, False)
    scaler = FeatureScaler.fit(train_bags)
    d = train_bags[0].instances.shape[1]
    params, log = mil.train(
        scaler.transform_bags(train_bags),
        cfg.train_config(cfg.epochs_responder, seed),
        dims=cfg.dims(d),
        val_bags=scaler.transform_bags(val_bags),
    )
    return TrainedModel(params=params, scaler=scaler, log=log)


def fit_and_predict(
    data: CohortData,
    labels: dict | None,
    train_ids: list[str],
    test_ids: list[str],
    cfg: PipelineConfig,
    seed: int | None = None,
) -> list[PatientPrediction]:
    """Train on train_ids and score test_ids under the configured mode."""
    seed = cfg.seed if seed is None else seed
    by_id = data.manifest.by_id()
    if cfg.mode == "two_step":
        tumor_model = train_tumor_model(data, labels, train_ids, cfg, seed)
        responder_model = train_responder_model(data, labels, train_ids, cfg, seed)
        return [
            two_step_predict(by_id[pid], tumor_model, responder_model, cfg, data)
            for pid in test_ids
        ]
    responder_model = train_responder_model(data, None, train_ids, cfg, seed)
    return [
        single_step_predict(by_id[pid], responder_model, cfg, data) for pid in test_ids
    ]


def labels_from_truth(truths: dict) -> dict[tuple[str, int, int], str]:
    """Tile tumor labels from generator ground truth sidecars."""
    labels = {}
    for slide_id, truth in truths.items():
        for (gx, gy), is_tumor in truth.tile_labels.items():
            labels[(slide_id, gx, gy)] = "tumor" if is_tumor else "non_tumor"
    return labels


def write_predictions(preds: list[PatientPrediction], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for pred in preds:
            fh.write(json.dumps(pred.to_json(), sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> list[PatientPrediction]:
    preds = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            preds.append(PatientPrediction(**json.loads(line)))
    return preds
