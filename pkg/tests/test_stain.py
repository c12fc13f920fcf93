from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ihcmil import stain
from ihcmil.errors import (
    BadMagic,
    NonFiniteValue,
    SingularStainMatrix,
    TruncatedFile,
    VersionMismatch,
    WrongPatchSize,
)
from ihcmil.slide_io import DIHEDRAL_TRANSFORMS, apply_dihedral
from ihcmil.stain import (
    FEATURE_DIM,
    FeatureMatrix,
    StainVectors,
    deconvolve_hdab,
    extract_handcrafted,
    read_features,
    rgb_to_od,
    write_features,
)


class TestOd:
    def test_white_is_zero(self):
        assert np.all(rgb_to_od(np.full((2, 2, 3), 255, np.uint8)) == 0.0)

    def test_black_clamped(self):
        od = rgb_to_od(np.zeros((1, 1, 3), np.uint8))
        np.testing.assert_allclose(od, -np.log10(1.0 / 255.0))

    def test_known_value(self):
        od = rgb_to_od(np.full((1, 1, 3), 25.5))
        np.testing.assert_allclose(od, 1.0, atol=1e-12)


class TestDeconvolution:
    def test_reconstruction_identity(self, rng):
        """od == conc @ M to 1e-6 for random patches."""
        patch = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
        vectors = StainVectors()
        h, d, r = deconvolve_hdab(patch, vectors)
        conc = np.stack([h.ravel(), d.ravel(), r.ravel()], axis=1)
        recon = conc @ vectors.matrix()
        np.testing.assert_allclose(recon, rgb_to_od(patch).reshape(-1, 3), atol=1e-6)

    def test_pure_stain_maps_to_single_channel(self):
        """A pixel whose OD lies along the H vector gets zero DAB/residual."""
        vectors = StainVectors()
        od = 0.8 * vectors.hematoxylin
        rgb = np.round(255.0 * 10.0 ** (-od)).astype(np.uint8).reshape(1, 1, 3)
        h, d, r = deconvolve_hdab(rgb, vectors)
        assert h[0, 0] == pytest.approx(0.8, abs=0.02)
        assert abs(d[0, 0]) < 0.02
        assert abs(r[0, 0]) < 0.02

    def test_singular_matrix_rejected(self):
        with pytest.raises(SingularStainMatrix):
            StainVectors(
                hematoxylin=(1.0, 0.0, 0.0),
                dab=(1.0, 1e-4, 0.0),
                residual=(0.0, 0.0, 1.0),
            ).matrix()

    def test_white_patch_zero_concentrations(self):
        h, d, r = deconvolve_hdab(np.full((4, 4, 3), 255, np.uint8))
        for arr in (h, d, r):
            np.testing.assert_allclose(arr, 0.0, atol=1e-12)


class TestHandcrafted:
    def test_dimension_and_finite(self, rng):
        patch = rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
        f = extract_handcrafted(patch)
        assert f.shape == (FEATURE_DIM,)
        assert np.all(np.isfinite(f))

    def test_histograms_normalized(self, rng):
        patch = rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
        f = extract_handcrafted(patch)
        assert f[7:15].sum() == pytest.approx(1.0, abs=1e-9)
        assert f[15:23].sum() == pytest.approx(1.0, abs=1e-9)

    def test_white_patch_features(self):
        f = extract_handcrafted(np.full((16, 16, 3), 255, np.uint8))
        np.testing.assert_allclose(f[0:6], 0.0, atol=1e-12)  # zero OD
        assert f[6] == 0.0  # no DAB-positive pixels
        assert f[7] == 1.0 and f[15] == 1.0  # all mass in first bins
        assert f[23] == 0.0 and f[24] == 0.0  # flat => no gradient
        assert f[25] == 0.0  # luminance 255 is background
        assert f[26] == 0.0  # achromatic

    def test_dab_positive_fraction_oracle(self, rng):
        patch = rng.integers(0, 256, size=(24, 24, 3)).astype(np.uint8)
        _, dab, _ = deconvolve_hdab(patch)
        f = extract_handcrafted(patch)
        assert f[6] == pytest.approx(np.mean(dab >= stain.DAB_POSITIVE_OD))

    def test_wrong_patch_size(self, rng):
        with pytest.raises(WrongPatchSize):
            extract_handcrafted(rng.integers(0, 256, size=(16, 24, 3)).astype(np.uint8))
        with pytest.raises(WrongPatchSize):
            extract_handcrafted(
                rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8), patch_size=32
            )

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(DIHEDRAL_TRANSFORMS))
    def test_dihedral_invariance(self, seed, transform):
        rng = np.random.default_rng(seed)
        patch = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
        f0 = extract_handcrafted(patch)
        f1 = extract_handcrafted(apply_dihedral(patch, transform))
        np.testing.assert_allclose(f1, f0, atol=1e-9)


class TestFeatureFile:
    def _matrix(self, rng, n=5, d=27):
        values = rng.normal(size=(n, d)).astype(np.float32)
        index = [
            {"slide_id": "s", "grid_x": 0, "grid_y": 0, "patch_x": i, "patch_y": 0}
            for i in range(n)
        ]
        return FeatureMatrix(values=values, index=index)

    def test_round_trip_bit_exact(self, tmp_path, rng):
        m = self._matrix(rng)
        path = tmp_path / "feat.bin"
        write_features(m, path)
        back = read_features(path)
        np.testing.assert_array_equal(back.values, m.values)
        assert back.index == m.index
        assert (tmp_path / "feat.index.json").exists()

    def test_header_layout(self, tmp_path, rng):
        m = self._matrix(rng, n=3, d=4)
        path = tmp_path / "feat.bin"
        write_features(m, path)
        raw = path.read_bytes()
        assert raw[:4] == b"MILF"
        assert struct.unpack("<III", raw[4:16]) == (1, 3, 4)
        assert len(raw) == 16 + 3 * 4 * 4

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "feat.bin"
        path.write_bytes(b"NOPE" + b"\0" * 12)
        with pytest.raises(BadMagic):
            read_features(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "feat.bin"
        path.write_bytes(b"MILF" + struct.pack("<III", 2, 0, 0))
        with pytest.raises(VersionMismatch):
            read_features(path)

    def test_truncated(self, tmp_path, rng):
        m = self._matrix(rng)
        path = tmp_path / "feat.bin"
        write_features(m, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(TruncatedFile):
            read_features(path)
        path.write_bytes(b"MILF\0")
        with pytest.raises(TruncatedFile):
            read_features(path)

    def test_nonfinite_rejected_both_ways(self, tmp_path, rng):
        m = self._matrix(rng)
        m.values[0, 0] = np.nan
        with pytest.raises(NonFiniteValue):
            write_features(m, tmp_path / "bad.bin")
        good = self._matrix(rng, n=1, d=1)
        path = tmp_path / "f.bin"
        write_features(good, path)
        raw = bytearray(path.read_bytes())
        raw[16:20] = struct.pack("<f", np.inf)
        path.write_bytes(bytes(raw))
        with pytest.raises(NonFiniteValue):
            read_features(path)

    def test_external_embedding_dim_accepted(self, tmp_path, rng):
        m = self._matrix(rng, n=4, d=384)
        path = tmp_path / "emb.bin"
        write_features(m, path)
        assert read_features(path).d == 384
