from __future__ import annotations

import numpy as np
import pytest

from ihcmil import synth
from ihcmil.errors import BadSynthConfig
from ihcmil.synth import (
    GroundTruth,
    SynthConfig,
    _plan_patients,
    generate_cohort,
    generate_slide,
    read_truth,
    write_truth,
)


class TestConfig:
    def test_responder_count_half_up(self):
        assert SynthConfig(n_patients=40, responder_fraction=0.25).n_responders() == 10
        assert SynthConfig(n_patients=12, responder_fraction=0.34).n_responders() == 4
        assert SynthConfig(n_patients=10, responder_fraction=0.25).n_responders() == 3

    def test_zero_responders_rejected(self):
        with pytest.raises(BadSynthConfig):
            SynthConfig(n_patients=4, responder_fraction=0.05)

    def test_small_slide_rejected(self):
        with pytest.raises(BadSynthConfig):
            SynthConfig(slide_size=256, tile_size=128)

    def test_unknown_pattern_link_rejected(self):
        with pytest.raises(BadSynthConfig):
            SynthConfig(pattern_link="bogus")


class TestPlan:
    def test_responders_first_and_patterns_linked(self):
        cfg = SynthConfig(n_patients=20, responder_fraction=0.25, seed=5)
        specs = _plan_patients(cfg)
        assert [s.response for s in specs] == ["R"] * 5 + ["NR"] * 15
        for s in specs:
            assert s.pattern == ("reactive" if s.response == "R" else "constitutive")
            assert 0.05 <= s.tps_target <= 0.99

    def test_tps_iid_across_classes_in_linked_mode(self):
        # with a large plan the class-wise TPS means must agree closely
        cfg = SynthConfig(n_patients=400, responder_fraction=0.5, seed=0)
        specs = _plan_patients(cfg)
        r = [s.tps_target for s in specs if s.response == "R"]
        nr = [s.tps_target for s in specs if s.response == "NR"]
        assert abs(np.mean(r) - np.mean(nr)) < 0.04

    def test_tps_only_mode_shifts_responders(self):
        cfg = SynthConfig(
            n_patients=400, responder_fraction=0.5, pattern_link="tps_only", seed=0
        )
        specs = _plan_patients(cfg)
        r = np.mean([s.tps_target for s in specs if s.response == "R"])
        nr = np.mean([s.tps_target for s in specs if s.response == "NR"])
        assert r - nr > 0.1

    def test_plan_deterministic(self):
        cfg = SynthConfig(seed=77)
        assert _plan_patients(cfg) == _plan_patients(cfg)


@pytest.fixture(scope="module")
def one():
    cfg = SynthConfig(n_patients=4, responder_fraction=0.5, slide_size=512, seed=9)
    spec = _plan_patients(cfg)[0]
    slide, truth = generate_slide(cfg, spec)
    return cfg, spec, slide, truth


class TestSlide:
    def test_shapes_and_masks(self, one):
        cfg, _, slide, truth = one
        assert slide.pixels.shape == (512, 512, 3)
        assert slide.pixels.dtype == np.uint8
        assert truth.tumor_mask.shape == (512, 512)
        # tumor is contained in tissue
        assert not np.any(truth.tumor_mask & ~truth.tissue_mask)
        assert truth.tissue_mask.sum() > 0

    def test_exact_tps_bookkeeping(self, one):
        _, spec, _, truth = one
        tumor_cells = [c for c in truth.cells if c["is_tumor"]]
        n_pos = sum(c["is_positive"] for c in tumor_cells)
        assert n_pos == round(spec.tps_target * len(tumor_cells))
        assert truth.true_tps == pytest.approx(n_pos / len(tumor_cells))
        # stromal cells are never positive
        assert not any(c["is_positive"] for c in truth.cells if not c["is_tumor"])

    def test_reactive_positives_hug_boundary(self):
        """Positive cells in reactive slides sit nearer the nest boundary."""
        cfg = SynthConfig(n_patients=4, responder_fraction=0.5, slide_size=512, seed=9)
        specs = _plan_patients(cfg)
        reactive = next(s for s in specs if s.pattern == "reactive")
        constitutive = next(s for s in specs if s.pattern == "constitutive")

        def boundary_gap(truth: GroundTruth) -> float:
            from scipy import ndimage

            dist = ndimage.distance_transform_edt(truth.tumor_mask)
            pos, neg = [], []
            for c in truth.cells:
                if not c["is_tumor"]:
                    continue
                d = dist[int(c["y"]), int(c["x"])]
                (pos if c["is_positive"] else neg).append(d)
            return np.mean(neg) - np.mean(pos)

        _, t_r = generate_slide(cfg, reactive)
        _, t_c = generate_slide(cfg, constitutive)
        gap_r, gap_c = boundary_gap(t_r), boundary_gap(t_c)
        assert gap_r > 10.0  # ring pattern: positives much shallower
        assert gap_r > gap_c + 10.0  # uniform pattern shows no such depth signal

    def test_cells_respect_min_distance(self, one):
        cfg, _, _, truth = one
        pts = np.array([(c["x"], c["y"]) for c in truth.cells])
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        assert d2.min() >= cfg.cell_spacing**2 - 1e-9

    def test_tile_labels_match_mask_recount(self, one):
        cfg, _, _, truth = one
        ts = cfg.tile_size
        for (gx, gy), lab in truth.tile_labels.items():
            sl = (slice(gy * ts, (gy + 1) * ts), slice(gx * ts, (gx + 1) * ts))
            n_tissue = truth.tissue_mask[sl].sum()
            n_tumor = truth.tumor_mask[sl].sum()
            expected = n_tissue > 0 and n_tumor / n_tissue >= cfg.tumor_tile_threshold
            assert lab == expected

    def test_deterministic(self, one):
        cfg, spec, slide, truth = one
        slide2, truth2 = generate_slide(cfg, spec)
        assert np.array_equal(slide.pixels, slide2.pixels)
        assert truth.cells == truth2.cells


class TestCohort:
    def test_small_cohort_consistency(self, small_cohort):
        cfg, manifest, slides, truths = small_cohort
        assert len(manifest.patients) == cfg.n_patients
        n_r = sum(p.response == "R" for p in manifest.patients)
        assert n_r == cfg.n_responders()
        assert set(slides) == set(truths)
        for p in manifest.patients:
            assert len(p.slides) == 1

    def test_order_independent_per_patient_streams(self):
        cfg = SynthConfig(n_patients=4, responder_fraction=0.5, slide_size=512, seed=31)
        specs = _plan_patients(cfg)
        # generating patient 2 alone matches generating it inside the cohort
        _, slides, _ = generate_cohort(cfg)
        solo, _ = generate_slide(cfg, specs[2])
        assert np.array_equal(slides[solo.slide_id].pixels, solo.pixels)

    def test_truth_round_trip(self, tmp_path, small_cohort):
        _, _, _, truths = small_cohort
        truth = next(iter(truths.values()))
        write_truth(truth, tmp_path)
        back = read_truth(truth.slide_id, tmp_path)
        assert np.array_equal(back.tumor_mask, truth.tumor_mask)
        assert np.array_equal(back.tissue_mask, truth.tissue_mask)
        assert back.cells == truth.cells
        assert back.true_tps == truth.true_tps
        assert back.tile_labels == truth.tile_labels
