"""Phantom generator tests: determinism, class counts, lesion ground truth,
and manifest integrity."""

import numpy as np
import pytest

from mst_triage import phantoms
from mst_triage.volume import Volume, load_raw, resample

SMALL_SHAPE = (8, 48, 48)


@pytest.fixture(scope="module")
def small_cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms_small")
    manifest = phantoms.generate_phantoms(
        20, 0.3, 123, out, sequences=("T1_sub",), shape=SMALL_SHAPE
    )
    return out, manifest


def test_positive_count_is_rounded_fraction(small_cohort):
    _, manifest = small_cohort
    n_pos = sum(1 for r in manifest.records if r.label == "suspicious")
    assert n_pos == round(20 * 0.3)


def test_determinism_is_byte_exact(small_cohort, tmp_path):
    out, manifest = small_cohort
    again = phantoms.generate_phantoms(
        20, 0.3, 123, tmp_path, sequences=("T1_sub",), shape=SMALL_SHAPE
    )
    assert again == manifest
    assert (tmp_path / "manifest.csv").read_bytes() == (out / "manifest.csv").read_bytes()
    for rec in manifest.records:
        rel = rec.sequence_paths["T1_sub"]
        assert (tmp_path / rel).read_bytes() == (out / rel).read_bytes()


def test_different_seed_differs(small_cohort, tmp_path):
    out, manifest = small_cohort
    other = phantoms.generate_phantoms(
        20, 0.3, 124, tmp_path, sequences=("T1_sub",), shape=SMALL_SHAPE
    )
    assert other != manifest


def test_manifest_ground_truth_fields(small_cohort):
    _, manifest = small_cohort
    for rec in manifest.records:
        if rec.label == "suspicious":
            assert rec.lesion_type in ("mass", "nme", "foci")
            assert rec.lesion_size_mm > 0
            assert 0 <= rec.lesion_slice_start <= rec.lesion_slice_stop <= 37
            assert 4 <= rec.birads <= 6
        else:
            assert rec.lesion_type is None
            assert rec.lesion_size_mm is None
            assert rec.lesion_slice_start is None
            assert 1 <= rec.birads <= 3
    # record-level invariants (label/birads consistency, uniqueness) hold
    manifest.validate()


def test_lesion_brightens_its_slices(small_cohort):
    out, manifest = small_cohort
    hits = 0
    positives = [r for r in manifest.records
                 if r.label == "suspicious" and r.lesion_type != "foci"]
    assert positives
    for rec in positives:
        vox = load_raw(out / rec.sequence_paths["T1_sub"])
        resampled = resample(Volume(vox))
        peak = int(np.argmax(resampled.voxels.max(axis=(1, 2))))
        if rec.lesion_slice_start - 1 <= peak <= rec.lesion_slice_stop + 1:
            hits += 1
    assert hits / len(positives) >= 0.8


def test_multiple_sequences_written(tmp_path):
    manifest = phantoms.generate_phantoms(
        4, 0.25, 9, tmp_path, sequences=("T1_sub", "DWI_1500", "T2w"),
        shape=SMALL_SHAPE,
    )
    for rec in manifest.records:
        assert set(rec.sequence_paths) == {"T1_sub", "DWI_1500", "T2w"}
        for rel in rec.sequence_paths.values():
            assert (tmp_path / rel).exists()


def test_generator_input_validation(tmp_path):
    with pytest.raises(ValueError, match="n >= 4"):
        phantoms.generate_phantoms(3, 0.5, 0, tmp_path)
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError, match="positive_fraction"):
            phantoms.generate_phantoms(10, bad, 0, tmp_path)
