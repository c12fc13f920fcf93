from __future__ import annotations

import numpy as np
import pytest

from ihcmil import kernels, pipeline, synth


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    kernels.warmup()


@pytest.fixture(scope="session")
def small_cohort():
    """Shared 12-patient pattern-linked cohort (512px slides)."""
    cfg = synth.SynthConfig(
        n_patients=12, responder_fraction=0.34, slide_size=512, seed=424
    )
    manifest, slides, truths = synth.generate_cohort(cfg)
    return cfg, manifest, slides, truths


@pytest.fixture(scope="session")
def small_cohort_data(small_cohort):
    cfg, manifest, slides, truths = small_cohort
    pcfg = pipeline.PipelineConfig(seed=7)
    data = pipeline.CohortData(manifest, slides, pcfg)
    labels = pipeline.labels_from_truth(truths)
    return pcfg, data, labels


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
