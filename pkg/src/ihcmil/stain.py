"""H-DAB stain separation, handcrafted instance features, and the feature file.

The feature layout (d = 27) is fixed and documented on
``extract_handcrafted``; external embedding files with a different d are
accepted by the reader since d is carried in the header.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    NonFiniteValue,
    SingularStainMatrix,
    TruncatedFile,
    VersionMismatch,
    WrongPatchSize,
)

FEATURE_DIM = 27
DAB_POSITIVE_OD = 0.15  # shared with the TPS estimator
MAGIC = b"MILF"
FORMAT_VERSION = 1

# Standard H-DAB optical-density vectors (Ruifrok-style literature
# constants), unit-normalized; residual completes an invertible basis.
DEFAULT_HEMATOXYLIN = (0.650, 0.704, 0.286)
DEFAULT_DAB = (0.269, 0.568, 0.778)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@dataclass
class StainVectors:
    hematoxylin: np.ndarray = field(default_factory=lambda: _unit(DEFAULT_HEMATOXYLIN))
    dab: np.ndarray = field(default_factory=lambda: _unit(DEFAULT_DAB))
    residual: np.ndarray | None = None

    def __post_init__(self):
        self.hematoxylin = _unit(self.hematoxylin)
        self.dab = _unit(self.dab)
        if self.residual is None:
            self.residual = _unit(np.cross(self.hematoxylin, self.dab))
        else:
            self.residual = _unit(self.residual)

    def matrix(self) -> np.ndarray:
        """Stain basis as rows: (3, 3) [H; DAB; residual]."""
        m = np.stack([self.hematoxylin, self.dab, self.residual])
        if np.linalg.cond(m) >= 100:
            raise SingularStainMatrix(
                f"stain matrix condition number {np.linalg.cond(m):.1f} >= 100"
            )
        return m


def rgb_to_od(pixels) -> np.ndarray:
    """Beer-Lambert optical density per channel: -log10(max(I, 1) / 255)."""
    arr = np.asarray(pixels, dtype=np.float64)
    return -np.log10(np.maximum(arr, 1.0) / 255.0)


def deconvolve_hdab(patch: np.ndarray, vectors: StainVectors | None = None):
    """Unmix an RGB patch into (H, DAB, residual) OD concentration rasters.

    Solves OD = C @ M per pixel for the stain basis M; concentrations are not
    clipped, so small negative values survive as recorded.
    """
    vectors = vectors or StainVectors()
    m = vectors.matrix()
    od = rgb_to_od(patch).reshape(-1, 3)
    conc = od @ np.linalg.inv(m)
    shape = patch.shape[:2]
    return (
        conc[:, 0].reshape(shape),
        conc[:, 1].reshape(shape),
        conc[:, 2].reshape(shape),
    )


def _luminance(patch: np.ndarray) -> np.ndarray:
    arr = patch.astype(np.float64)
    return 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]


def extract_handcrafted(
    patch: np.ndarray,
    patch_size: int | None = None,
    vectors: StainVectors | None = None,
) -> np.ndarray:
    """27-dim handcrafted feature vector for a square RGB patch.

    Layout, in order:
      0-5   mean, std of H-OD, DAB-OD, residual-OD
      6     DAB-positive pixel fraction (DAB-OD >= 0.15)
      7-14  8-bin normalized histogram of DAB-OD clipped to [0, 2]
      15-22 same for H-OD
      23-24 mean, std of luminance gradient magnitude
      25-26 tissue-pixel fraction (luminance < 235) and mean saturation
    """
    patch = np.asarray(patch)
    if patch.ndim != 3 or patch.shape[2] != 3 or patch.shape[0] != patch.shape[1]:
        raise WrongPatchSize(f"expected square RGB patch, got shape {patch.shape}")
    if patch_size is not None and patch.shape[0] != patch_size:
        raise WrongPatchSize(f"expected {patch_size}x{patch_size}, got {patch.shape[0]}")

    h_od, dab_od, res_od = deconvolve_hdab(patch, vectors)
    out = np.empty(FEATURE_DIM, dtype=np.float64)
    out[0], out[1] = h_od.mean(), h_od.std()
    out[2], out[3] = dab_od.mean(), dab_od.std()
    out[4], out[5] = res_od.mean(), res_od.std()
    out[6] = float(np.mean(dab_od >= DAB_POSITIVE_OD))

    n_px = patch.shape[0] * patch.shape[1]
    dab_hist, _ = np.histogram(np.clip(dab_od, 0.0, 2.0), bins=8, range=(0.0, 2.0))
    out[7:15] = dab_hist / n_px
    h_hist, _ = np.histogram(np.clip(h_od, 0.0, 2.0), bins=8, range=(0.0, 2.0))
    out[15:23] = h_hist / n_px

    lum = _luminance(patch)
    gy, gx = np.gradient(lum)
    gmag = np.sqrt(gx * gx + gy * gy)
    out[23], out[24] = gmag.mean(), gmag.std()

    out[25] = float(np.mean(lum < 235.0))
    arr = patch.astype(np.float64)
    cmax = arr.max(axis=2)
    cmin = arr.min(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        sat = np.where(cmax > 0, (cmax - cmin) / cmax, 0.0)
    out[26] = sat.mean()
    if not np.all(np.isfinite(out)):
        raise NonFiniteValue("non-finite feature value")
    return out


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (n, d) float32
    index: list[dict]  # per row: slide_id, grid_x, grid_y, patch_x, patch_y

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("values must be 2-D")
        if len(self.index) != self.values.shape[0]:
            raise ValueError("index length must match row count")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


def write_features(matrix: FeatureMatrix, path: str | Path) -> None:
    """Write the binary feature file plus its `.index.json` companion."""
    if not np.all(np.isfinite(matrix.values)):
        raise NonFiniteValue("refusing to write non-finite features")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, matrix.n, matrix.d))
        fh.write(np.ascontiguousarray(matrix.values, dtype="<f4").tobytes())
    _index_path_for(path).write_text(json.dumps(matrix.index))


def _index_path_for(path: Path) -> Path:
    if str(path).endswith(".bin"):
        return Path(str(path)[:-4] + ".index.json")
    return path.with_suffix(path.suffix + ".index.json")


def read_features(path: str | Path) -> FeatureMatrix:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16:
        raise TruncatedFile(f"{path}: header truncated")
    if raw[:4] != MAGIC:
        raise BadMagic(f"{path}: bad magic {raw[:4]!r}")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {FORMAT_VERSION}")
    expected = 16 + n * d * 4
    if len(raw) < expected:
        raise TruncatedFile(f"{path}: expected {expected} bytes, got {len(raw)}")
    values = np.frombuffer(raw[16:expected], dtype="<f4").reshape(n, d).copy()
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue(f"{path}: non-finite feature value")
    index_path = _index_path_for(path)
    index = json.loads(index_path.read_text()) if index_path.exists() else [{} for _ in range(n)]
    return FeatureMatrix(values=values, index=index)
