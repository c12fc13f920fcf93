"""Slide loading, Otsu tissue segmentation, and deterministic tile grids."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegenerateHistogram, DuplicatePatient, MalformedManifest, MissingSlide
from .kernels import luminance_histogram, tile_tissue_counts

# Order of the 8 dihedral transforms used for augmentation. Augmentation
# cycles a patient's tiles and advances one transform per completed pass,
# starting at rot90 so every augmented tile differs from its source.
DIHEDRAL_TRANSFORMS = (
    "identity",
    "rot90",
    "rot180",
    "rot270",
    "flip_h",
    "flip_v",
    "transpose",
    "anti_transpose",
)


@dataclass
class SlideImage:
    slide_id: str
    pixels: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("pixels must be (H, W, 3)")
        if self.height < 1 or self.width < 1:
            raise ValueError("slide must be at least 1x1")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class TissueMask:
    bits: np.ndarray  # (H, W) bool
    threshold_used: int

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


@dataclass
class TileRecord:
    slide_id: str
    grid_x: int
    grid_y: int
    tile_size: int
    tissue_fraction: float
    tumor_label: str | None = None  # "tumor" | "non_tumor" | None
    tumor_prob: float | None = None
    source: str = "original"  # "original" | "augmented"
    aug_id: int | None = None
    transform: str = "identity"

    @property
    def origin_x(self) -> int:
        return self.grid_x * self.tile_size

    @property
    def origin_y(self) -> int:
        return self.grid_y * self.tile_size

    def key(self) -> tuple[str, int, int]:
        return (self.slide_id, self.grid_x, self.grid_y)

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "grid_x": self.grid_x,
            "grid_y": self.grid_y,
            "tile_size": self.tile_size,
            "tissue_fraction": self.tissue_fraction,
            "tumor_label": self.tumor_label,
            "tumor_prob": self.tumor_prob,
            "source": self.source,
            "aug_id": self.aug_id,
            "transform": self.transform,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TileRecord":
        return cls(**obj)


@dataclass
class PatientEntry:
    id: str
    response: str  # "R" | "NR"
    slides: list[str]
    split: str = "train"  # "train" | "test"


@dataclass
class CohortManifest:
    patients: list[PatientEntry] = field(default_factory=list)
    version: int = 1

    def responders(self) -> list[PatientEntry]:
        return [p for p in self.patients if p.response == "R"]

    def by_id(self) -> dict[str, PatientEntry]:
        return {p.id: p for p in self.patients}


def otsu_threshold(histogram) -> int:
    """Smallest threshold t in [0, 254] maximizing inter-class variance.

    Class 0 holds levels <= t. Raises DegenerateHistogram when all mass sits
    at one level (no split separates anything).
    """
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (256,):
        raise ValueError("histogram must have 256 bins")
    if np.any(hist < 0):
        raise ValueError("histogram counts must be non-negative")
    total = hist.sum()
    if total <= 0 or np.count_nonzero(hist) < 2:
        raise DegenerateHistogram("histogram has fewer than two occupied levels")

    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)[:-1]  # mass at levels <= t, t = 0..254
    w1 = total - w0
    m0 = np.cumsum(hist * levels)[:-1]
    mu_total = (hist * levels).sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        mean0 = np.where(w0 > 0, m0 / w0, 0.0)
        mean1 = np.where(w1 > 0, (mu_total - m0) / w1, 0.0)
    sigma_b = w0 * w1 * (mean0 - mean1) ** 2
    return int(np.argmax(sigma_b))  # argmax returns the smallest maximizer


def segment_tissue(slide: SlideImage, threshold_override: int | None = None) -> TissueMask:
    """Threshold rounded Rec.601 luminance with Otsu; tissue is the dark side.

    ``threshold_override`` bypasses Otsu (used for monotonicity testing).
    """
    lum, hist = luminance_histogram(slide.pixels)
    if threshold_override is None:
        t = otsu_threshold(hist)
    else:
        t = int(threshold_override)
    return TissueMask(bits=lum <= t, threshold_used=t)


def tile_slide(
    slide: SlideImage,
    mask: TissueMask,
    tile_size: int,
    min_tissue_frac: float,
) -> list[TileRecord]:
    """Partition the slide into a row-major grid of tiles anchored at (0, 0).

    Edge tiles are logically padded with white to full tile_size;
    tissue_fraction is computed over the unpadded region only. A tile is
    emitted iff tissue_fraction >= min_tissue_frac.
    """
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    if mask.height != slide.height or mask.width != slide.width:
        raise ValueError("mask dimensions must match slide")
    ny = math.ceil(slide.height / tile_size)
    nx = math.ceil(slide.width / tile_size)
    counts = tile_tissue_counts(mask.bits.astype(np.uint8), tile_size, ny, nx)
    tiles: list[TileRecord] = []
    for gy in range(ny):
        rows = min(tile_size, slide.height - gy * tile_size)
        for gx in range(nx):
            cols = min(tile_size, slide.width - gx * tile_size)
            frac = counts[gy, gx] / (rows * cols)
            if frac >= min_tissue_frac:
                tiles.append(
                    TileRecord(
                        slide_id=slide.slide_id,
                        grid_x=gx,
                        grid_y=gy,
                        tile_size=tile_size,
                        tissue_fraction=float(frac),
                    )
                )
    return tiles


def apply_dihedral(pixels: np.ndarray, transform: str) -> np.ndarray:
    """Apply one of the 8 square-symmetry transforms to an (H, W[, C]) array."""
    if transform == "identity":
        return pixels
    if transform == "rot90":
        return np.rot90(pixels, 1)
    if transform == "rot180":
        return np.rot90(pixels, 2)
    if transform == "rot270":
        return np.rot90(pixels, 3)
    if transform == "flip_h":
        return pixels[:, ::-1]
    if transform == "flip_v":
        return pixels[::-1, :]
    if transform == "transpose":
        return np.swapaxes(pixels, 0, 1)
    if transform == "anti_transpose":
        return np.swapaxes(pixels[::-1, ::-1], 0, 1)
    raise ValueError(f"unknown transform {transform!r}")


def tile_pixels(slide: SlideImage, rec: TileRecord) -> np.ndarray:
    """Render a tile's pixels, white-padded to tile_size, transform applied."""
    ts = rec.tile_size
    out = np.full((ts, ts, 3), 255, dtype=np.uint8)
    y0, x0 = rec.origin_y, rec.origin_x
    rows = min(ts, slide.height - y0)
    cols = min(ts, slide.width - x0)
    if rows <= 0 or cols <= 0:
        raise ValueError("tile lies outside the slide")
    out[:rows, :cols] = slide.pixels[y0 : y0 + rows, x0 : x0 + cols]
    return np.ascontiguousarray(apply_dihedral(out, rec.transform))


def load_slide(path: str | Path, slide_id: str | None = None) -> SlideImage:
    path = Path(path)
    if not path.exists():
        raise MissingSlide(f"slide file not found: {path}")
    img = Image.open(path).convert("RGB")
    return SlideImage(slide_id=slide_id or path.stem, pixels=np.asarray(img))


def save_slide(slide: SlideImage, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(slide.pixels, mode="RGB").save(path)


def write_cohort(manifest: CohortManifest, cohort_dir: str | Path) -> Path:
    cohort_dir = Path(cohort_dir)
    cohort_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "version": manifest.version,
        "patients": [
            {"id": p.id, "response": p.response, "slides": p.slides, "split": p.split}
            for p in manifest.patients
        ],
    }
    path = cohort_dir / "cohort.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def read_cohort(cohort_dir: str | Path) -> CohortManifest:
    cohort_dir = Path(cohort_dir)
    path = cohort_dir / "cohort.json"
    if not path.exists():
        raise MalformedManifest(f"no cohort.json in {cohort_dir}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"cohort.json is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "patients" not in doc:
        raise MalformedManifest("cohort.json must be an object with a 'patients' list")
    patients = []
    seen = set()
    for entry in doc["patients"]:
        try:
            p = PatientEntry(
                id=entry["id"],
                response=entry["response"],
                slides=list(entry["slides"]),
                split=entry.get("split", "train"),
            )
        except (KeyError, TypeError) as exc:
            raise MalformedManifest(f"bad patient entry: {entry!r}") from exc
        if p.response not in ("R", "NR"):
            raise MalformedManifest(f"patient {p.id}: response must be R or NR")
        if p.id in seen:
            raise DuplicatePatient(f"duplicate patient id {p.id!r}")
        seen.add(p.id)
        for rel in p.slides:
            if not (cohort_dir / rel).exists():
                raise MissingSlide(f"patient {p.id}: missing slide file {cohort_dir / rel}")
        patients.append(p)
    return CohortManifest(patients=patients, version=doc.get("version", 1))
