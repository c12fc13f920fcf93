"""Synthetic IHC cohort generator with planted, controllable response signal.

Responder-linked signal is carried by the spatial staining pattern: responder
tumor nests express the antigen in a ring at the tumor-stroma interface
("reactive") while non-responder nests express it uniformly
("constitutive"). In the pattern-linked mode the tumor proportion score is
drawn from the same distribution for both classes, so TPS carries no signal
by construction. Cells are flat disks; realism is a non-goal, separability
control is the goal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BadSynthConfig
from .kernels import fill_ellipses, stamp_disks
from .slide_io import CohortManifest, PatientEntry, SlideImage

BACKGROUND_RGB = 240
# Darkest color whose H and DAB concentrations stay below the 0.15 OD
# positivity threshold even under +-6 rendering jitter, so counterstained
# tissue never merges nuclei components in the TPS estimator, while staying
# dark enough that Otsu's dominant split is tissue-vs-background.
TISSUE_RGB = (226, 164, 206)
# Transmittance of 0.7 concentration units of each stain through white
# light, consistent with the default H-DAB optical-density basis in
# stain.py. Full-strength (1.0) nuclei are dark enough to outweigh the
# tissue/background contrast in Otsu's objective on tissue-poor slides.
HEMATOXYLIN_RGB = (89, 82, 161)
DAB_RGB = (165, 102, 73)


@dataclass
class SynthConfig:
    n_patients: int = 40
    responder_fraction: float = 0.25
    slide_size: int = 512
    tile_size: int = 128
    tps_mean: float = 0.4
    tps_sd: float = 0.15
    pattern_link: str = "reactive_vs_constitutive"  # | "tps_only" | "none"
    tiles_per_patient_range: tuple[int, int] = (6, 14)
    seed: int = 0
    tumor_tile_threshold: float = 0.30  # tumor-pixel share of tissue pixels
    cell_radius: int = 3
    cell_spacing: int = 9
    stromal_density: float = 0.15  # relative to tumor cell density

    def __post_init__(self):
        if self.pattern_link not in ("reactive_vs_constitutive", "tps_only", "none"):
            raise BadSynthConfig(f"unknown pattern_link {self.pattern_link!r}")
        if self.n_responders() < 1:
            raise BadSynthConfig(
                "responder_fraction yields zero responders for this cohort size"
            )
        if self.slide_size < 4 * self.tile_size:
            raise BadSynthConfig("slide_size must be >= 4 * tile_size")

    def n_responders(self) -> int:
        return int(np.floor(self.n_patients * self.responder_fraction + 0.5))


@dataclass
class GroundTruth:
    slide_id: str
    tumor_mask: np.ndarray  # (H, W) bool
    tissue_mask: np.ndarray  # (H, W) bool
    cells: list[dict]  # {x, y, is_tumor, is_positive}
    true_tps: float
    pattern: str  # "reactive" | "constitutive"
    tile_size: int
    tile_labels: dict[tuple[int, int], bool] = field(default_factory=dict)

    def is_tumor_tile(self, gx: int, gy: int) -> bool:
        return self.tile_labels.get((gx, gy), False)


@dataclass
class _PatientSpec:
    patient_id: str
    index: int
    response: str
    pattern: str
    tps_target: float
    target_tiles: int


def _plan_patients(cfg: SynthConfig) -> list[_PatientSpec]:
    rng = np.random.default_rng([cfg.seed, 0xC070])  # cohort-plan stream
    n_resp = cfg.n_responders()
    specs = []
    for i in range(cfg.n_patients):
        response = "R" if i < n_resp else "NR"
        if cfg.pattern_link == "reactive_vs_constitutive":
            pattern = "reactive" if response == "R" else "constitutive"
            tps = rng.normal(cfg.tps_mean, cfg.tps_sd)
        elif cfg.pattern_link == "tps_only":
            pattern = "reactive" if rng.random() < 0.5 else "constitutive"
            shift = 0.2 if response == "R" else 0.0
            tps = rng.normal(cfg.tps_mean + shift, cfg.tps_sd)
        else:
            pattern = "reactive" if rng.random() < 0.5 else "constitutive"
            tps = rng.normal(cfg.tps_mean, cfg.tps_sd)
        lo, hi = cfg.tiles_per_patient_range
        specs.append(
            _PatientSpec(
                patient_id=f"P{i:03d}",
                index=i,
                response=response,
                pattern=pattern,
                tps_target=float(np.clip(tps, 0.05, 0.99)),
                target_tiles=int(rng.integers(lo, hi + 1)),
            )
        )
    return specs


def _sample_points_in_ellipse(rng, cx, cy, ax, ay, n, min_dist, taken):
    """Rejection-sample up to n points inside an ellipse, min_dist apart.

    ``taken`` is a shared occupancy dict keyed by coarse grid cell so cells
    from different nests / stroma never collide either.
    """
    # cell >= min_dist so a +-1 neighborhood scan covers every conflict
    cell = max(min_dist, 1.0)
    pts = []
    attempts = 0
    limit = n * 40
    while len(pts) < n and attempts < limit:
        attempts += 1
        x = rng.uniform(cx - ax, cx + ax)
        y = rng.uniform(cy - ay, cy + ay)
        fx, fy = (x - cx) / ax, (y - cy) / ay
        if fx * fx + fy * fy > 0.92:  # keep disks fully inside the ellipse
            continue
        gx, gy = int(x / cell), int(y / cell)
        ok = True
        for ddx in (-1, 0, 1):
            for ddy in (-1, 0, 1):
                for (px, py) in taken.get((gx + ddx, gy + ddy), ()):
                    if (px - x) ** 2 + (py - y) ** 2 < min_dist * min_dist:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if not ok:
            continue
        taken.setdefault((gx, gy), []).append((x, y))
        pts.append((x, y))
    return pts


def _sample_points_in_mask(rng, mask, n, min_dist, taken):
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return []
    # cell >= min_dist so a +-1 neighborhood scan covers every conflict
    cell = max(min_dist, 1.0)
    pts = []
    attempts = 0
    limit = n * 40
    while len(pts) < n and attempts < limit:
        attempts += 1
        k = int(rng.integers(0, len(xs)))
        x, y = float(xs[k]), float(ys[k])
        gx, gy = int(x / cell), int(y / cell)
        ok = True
        for ddx in (-1, 0, 1):
            for ddy in (-1, 0, 1):
                for (px, py) in taken.get((gx + ddx, gy + ddy), ()):
                    if (px - x) ** 2 + (py - y) ** 2 < min_dist * min_dist:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if not ok:
            continue
        taken.setdefault((gx, gy), []).append((x, y))
        pts.append((x, y))
    return pts


def generate_slide(cfg: SynthConfig, spec: _PatientSpec, rng=None):
    """Render one patient slide and its ground truth."""
    rng = rng or np.random.default_rng([cfg.seed, spec.index])
    size = cfg.slide_size
    slide_id = f"{spec.patient_id}_s0"

    noise = rng.integers(-5, 6, size=(size, size, 3))
    img = np.clip(BACKGROUND_RGB + noise, 0, 255).astype(np.uint8)

    # tissue: 2-5 ellipses sized so the tissue area roughly matches the
    # patient's target tile count
    tissue = np.zeros((size, size), dtype=np.uint8)
    target_area = min(spec.target_tiles * cfg.tile_size**2, int(0.8 * size * size))
    n_ell = int(rng.integers(2, 6))
    shares = rng.dirichlet(np.ones(n_ell) * 4.0)
    ellipses = []
    for share in shares:
        area = share * target_area
        aspect = rng.uniform(0.65, 1.55)
        a = math.sqrt(area / math.pi * aspect)
        b = area / (math.pi * a)
        a, b = min(a, size * 0.45), min(b, size * 0.45)
        cx = rng.uniform(a + 2, size - a - 2)
        cy = rng.uniform(b + 2, size - b - 2)
        ellipses.append((cx, cy, a, b))
    fill_ellipses(
        tissue,
        np.array([e[0] for e in ellipses]),
        np.array([e[1] for e in ellipses]),
        np.array([e[2] for e in ellipses]),
        np.array([e[3] for e in ellipses]),
        1,
    )
    tissue_bool = tissue.astype(bool)
    tnoise = rng.integers(-6, 7, size=(size, size, 3))
    tissue_rgb = np.clip(np.array(TISSUE_RGB) + tnoise, 0, 255).astype(np.uint8)
    img[tissue_bool] = tissue_rgb[tissue_bool]

    # tumor nests: one or two sub-ellipses per tissue ellipse
    tumor = np.zeros((size, size), dtype=np.uint8)
    nests = []
    for (cx, cy, a, b) in ellipses:
        for _ in range(int(rng.integers(1, 3))):
            scale = rng.uniform(0.38, 0.6)
            na, nb = a * scale, b * scale
            if min(na, nb) < 3 * cfg.cell_spacing:
                continue
            off = rng.uniform(0.0, 0.35)
            ang = rng.uniform(0.0, 2 * math.pi)
            ncx = cx + off * a * math.cos(ang)
            ncy = cy + off * b * math.sin(ang)
            nests.append((ncx, ncy, na, nb))
    if not nests:
        cx, cy, a, b = max(ellipses, key=lambda e: e[2] * e[3])
        nests.append((cx, cy, max(a * 0.5, 3 * cfg.cell_spacing), max(b * 0.5, 3 * cfg.cell_spacing)))
    fill_ellipses(
        tumor,
        np.array([n[0] for n in nests]),
        np.array([n[1] for n in nests]),
        np.array([n[2] for n in nests]),
        np.array([n[3] for n in nests]),
        1,
    )
    tumor_bool = tumor.astype(bool) & tissue_bool

    # cell placement: dense in nests, sparse stroma elsewhere in tissue
    taken: dict = {}
    spacing = float(cfg.cell_spacing)
    tumor_pts = []  # (x, y, boundary_dist)
    for (ncx, ncy, na, nb) in nests:
        n_cells = max(4, int(math.pi * na * nb / (spacing * spacing)))
        for (x, y) in _sample_points_in_ellipse(rng, ncx, ncy, na, nb, n_cells, spacing, taken):
            fx, fy = (x - ncx) / na, (y - ncy) / nb
            rho = math.sqrt(fx * fx + fy * fy)
            tumor_pts.append((x, y, (1.0 - rho) * min(na, nb)))
    stroma_mask = tissue_bool & ~tumor_bool
    n_stromal = int(stroma_mask.sum() / (spacing * spacing) * cfg.stromal_density)
    stromal_pts = _sample_points_in_mask(rng, stroma_mask, n_stromal, spacing, taken)

    n_tumor = len(tumor_pts)
    n_pos = int(round(spec.tps_target * n_tumor))
    if spec.pattern == "reactive":
        order = np.argsort([p[2] for p in tumor_pts], kind="stable")
    else:
        order = rng.permutation(n_tumor)
    positive = np.zeros(n_tumor, dtype=bool)
    positive[np.asarray(order[:n_pos], dtype=int)] = True

    cells = []
    cxs, cys, rads, cols = [], [], [], []
    for i, (x, y, _) in enumerate(tumor_pts):
        base = DAB_RGB if positive[i] else HEMATOXYLIN_RGB
        jitter = rng.integers(-8, 9, size=3)
        cols.append(np.clip(np.array(base) + jitter, 0, 255))
        cxs.append(int(round(x)))
        cys.append(int(round(y)))
        rads.append(int(rng.integers(cfg.cell_radius, cfg.cell_radius + 2)))
        cells.append(
            {"x": float(x), "y": float(y), "is_tumor": True, "is_positive": bool(positive[i])}
        )
    for (x, y) in stromal_pts:
        jitter = rng.integers(-8, 9, size=3)
        cols.append(np.clip(np.array(HEMATOXYLIN_RGB) + jitter, 0, 255))
        cxs.append(int(round(x)))
        cys.append(int(round(y)))
        rads.append(int(rng.integers(cfg.cell_radius, cfg.cell_radius + 2)))
        cells.append({"x": float(x), "y": float(y), "is_tumor": False, "is_positive": False})
    if cxs:
        stamp_disks(
            img,
            np.array(cxs, dtype=np.int64),
            np.array(cys, dtype=np.int64),
            np.array(rads, dtype=np.int64),
            np.stack(cols).astype(np.uint8),
        )

    # tile-level tumor labels from the planted masks
    n_grid = math.ceil(size / cfg.tile_size)
    tile_labels = {}
    for gy in range(n_grid):
        for gx in range(n_grid):
            sl = (
                slice(gy * cfg.tile_size, (gy + 1) * cfg.tile_size),
                slice(gx * cfg.tile_size, (gx + 1) * cfg.tile_size),
            )
            n_tissue = int(tissue_bool[sl].sum())
            n_tum = int(tumor_bool[sl].sum())
            tile_labels[(gx, gy)] = (
                n_tissue > 0 and n_tum / n_tissue >= cfg.tumor_tile_threshold
            )

    truth = GroundTruth(
        slide_id=slide_id,
        tumor_mask=tumor_bool,
        tissue_mask=tissue_bool,
        cells=cells,
        true_tps=(n_pos / n_tumor) if n_tumor else 0.0,
        pattern=spec.pattern,
        tile_size=cfg.tile_size,
        tile_labels=tile_labels,
    )
    return SlideImage(slide_id=slide_id, pixels=img), truth


def generate_cohort(cfg: SynthConfig):
    """Deterministically generate the whole cohort in memory.

    Returns (manifest, slides, truths) with slides/truths keyed by slide id.
    Each patient draws from an independent PRNG stream derived from
    (seed, patient index), so generation order does not matter.
    """
    specs = _plan_patients(cfg)
    patients, slides, truths = [], {}, {}
    for spec in specs:
        slide, truth = generate_slide(cfg, spec)
        slides[slide.slide_id] = slide
        truths[slide.slide_id] = truth
        patients.append(
            PatientEntry(
                id=spec.patient_id,
                response=spec.response,
                slides=[f"slides/{slide.slide_id}.png"],
                split="train",
            )
        )
    return CohortManifest(patients=patients), slides, truths


def write_truth(truth: GroundTruth, cohort_dir: str | Path) -> None:
    """Write `<slide_id>.truth.json` plus tumor/tissue mask PNGs."""
    cohort_dir = Path(cohort_dir)
    truth_dir = cohort_dir / "truth"
    truth_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "version": 1,
        "slide_id": truth.slide_id,
        "true_tps": truth.true_tps,
        "pattern": truth.pattern,
        "tile_size": truth.tile_size,
        "cells": truth.cells,
        "tile_labels": [
            {"grid_x": gx, "grid_y": gy, "is_tumor_tile": v}
            for (gx, gy), v in sorted(truth.tile_labels.items())
        ],
    }
    (truth_dir / f"{truth.slide_id}.truth.json").write_text(json.dumps(doc))
    Image.fromarray((truth.tumor_mask * 255).astype(np.uint8), mode="L").save(
        truth_dir / f"{truth.slide_id}.tumor.png"
    )
    Image.fromarray((truth.tissue_mask * 255).astype(np.uint8), mode="L").save(
        truth_dir / f"{truth.slide_id}.tissue.png"
    )


def read_truth(slide_id: str, cohort_dir: str | Path) -> GroundTruth:
    cohort_dir = Path(cohort_dir)
    truth_dir = cohort_dir / "truth"
    doc = json.loads((truth_dir / f"{slide_id}.truth.json").read_text())
    tumor = np.asarray(Image.open(truth_dir / f"{slide_id}.tumor.png")) > 127
    tissue = np.asarray(Image.open(truth_dir / f"{slide_id}.tissue.png")) > 127
    return GroundTruth(
        slide_id=slide_id,
        tumor_mask=tumor,
        tissue_mask=tissue,
        cells=doc["cells"],
        true_tps=doc["true_tps"],
        pattern=doc["pattern"],
        tile_size=doc["tile_size"],
        tile_labels={
            (t["grid_x"], t["grid_y"]): t["is_tumor_tile"] for t in doc["tile_labels"]
        },
    )
