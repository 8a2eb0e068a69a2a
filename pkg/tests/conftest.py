"""Shared fixtures.

The expensive fixtures (phantom cohort generation, preprocessing, and the
full cross-validation run) are session-scoped so the end-to-end acceptance
tests share one training run.
"""

from __future__ import annotations

import numpy as np
import pytest

from mst_triage import cohort, phantoms
from mst_triage.model import ModelConfig
from mst_triage.training import TrainConfig, run_cv
from mst_triage.volume import preprocess_exam, write_stack_cache

# small architecture used by unit tests that only need a working model
SMALL_MODEL = ModelConfig(
    patch_size=56,
    embed_dim=32,
    encoder_depth=1,
    encoder_heads=2,
    aggregator_depth=1,
    aggregator_heads=2,
)

# configuration of the end-to-end phantom run (CPU tier)
ACCEPT_N = 120
ACCEPT_POSITIVE_FRACTION = 0.2
ACCEPT_DATA_SEED = 1
ACCEPT_FOLD_SEED = 7
ACCEPT_CONFIG = TrainConfig(
    sequences=("T1_sub",),
    lr=1e-3,
    weight_decay=0.3,
    batch_size=16,
    max_epochs=60,
    early_stop_patience=60,
    seed=3,
    augment=False,
    mixup_alpha=0.4,
    label_smoothing=0.1,
)


def preprocess_manifest(manifest, data_root, cache_dir, sequences):
    for rec in manifest.records:
        stack = preprocess_exam(rec, sequences, data_root=data_root)
        write_stack_cache(stack, cache_dir, rec.exam_id)


@pytest.fixture(scope="session")
def phantom_dataset(tmp_path_factory):
    """Full-size phantom cohort with a preprocessed T1_sub cache."""
    root = tmp_path_factory.mktemp("phantom_data")
    manifest = phantoms.generate_phantoms(
        ACCEPT_N, ACCEPT_POSITIVE_FRACTION, ACCEPT_DATA_SEED, root,
        sequences=("T1_sub",),
    )
    cache = root / "cache"
    preprocess_manifest(manifest, root, cache, ("T1_sub",))
    return {"root": root, "manifest": manifest, "cache": cache}


@pytest.fixture(scope="session")
def phantom_cv(phantom_dataset):
    """5-fold cross-validation run on the phantom cohort."""
    root = phantom_dataset["root"]
    manifest = phantom_dataset["manifest"]
    plan = cohort.make_folds(manifest, n_folds=5, seed=ACCEPT_FOLD_SEED)
    out = root / "runs"
    pset = run_cv(ACCEPT_CONFIG, plan, manifest, phantom_dataset["cache"], out)
    return {
        **phantom_dataset,
        "plan": plan,
        "config": ACCEPT_CONFIG,
        "out": out,
        "pset": pset,
    }


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small cohort with all three sequences, preprocessed, for fast
    training/CLI/explain tests."""
    root = tmp_path_factory.mktemp("tiny_data")
    manifest = phantoms.generate_phantoms(
        14, 0.5, 11, root, sequences=("T1_sub", "DWI_1500", "T2w"),
        shape=(8, 48, 48),
    )
    cache = root / "cache"
    preprocess_manifest(manifest, root, cache, ("T1_sub", "DWI_1500", "T2w"))
    plan = cohort.make_folds(manifest, n_folds=2, seed=5)
    return {"root": root, "manifest": manifest, "cache": cache, "plan": plan}


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
