"""Synthetic single-breast phantom volumes: smooth parenchyma-like background
with graded enhancement, plus inserted lesions (mass / NME / focus) for
positive exams. Ground-truth lesion size, type, and slice range go into the
manifest so downstream attention checks have an oracle."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .cohort import CohortManifest, ExamRecord, save_manifest
from .volume import save_raw

NATIVE_SHAPE = (32, 128, 128)  # (Z, Y, X) of generated single-breast volumes
SPACING_MM = (3.0, 1.2, 1.2)

# Table-1-like grade frequencies (minimal, mild, moderate, marked)
BPE_DIST = (0.28, 0.49, 0.18, 0.05)
BPD_DIST = (0.20, 0.53, 0.21, 0.06)
GRADES = ("minimal", "mild", "moderate", "marked")
GRADE_LEVEL = {"minimal": 0.05, "mild": 0.12, "moderate": 0.22, "marked": 0.35}

LESION_TYPE_DIST = {"mass": 0.55, "nme": 0.35, "foci": 0.10}


def _parenchyma(rng, shape, grade):
    """Smooth blobby background inside a soft breast mask, with a few fixed
    bright smooth structures (vessel-like) that dominate the top of the
    intensity histogram in every volume. Lesions are inserted below that
    peak, so percentile clipping during preprocessing never flattens them."""
    z, y, x = shape
    low = rng.normal(0.0, 1.0, size=(max(z // 4, 2), y // 8, x // 8))
    field = ndimage.zoom(low, (shape[0] / low.shape[0], shape[1] / low.shape[1],
                               shape[2] / low.shape[2]), order=1)
    field = ndimage.gaussian_filter(field, sigma=2.5)
    field = (field - field.min()) / (field.max() - field.min() + 1e-9)

    zz, yy, xx = np.meshgrid(
        np.linspace(-1, 1, z), np.linspace(-1, 1, y), np.linspace(-1, 1, x),
        indexing="ij",
    )
    mask = np.clip(1.2 - (zz**2 * 0.6 + yy**2 + xx**2), 0.0, 1.0)
    base = 0.15 + GRADE_LEVEL[grade] * field
    # solid (plateau-valued) bright structures: they contribute well over
    # 0.5% of voxels at the same intensity, so the 99.5th-percentile clip
    # level used in preprocessing falls inside this plateau whether or not
    # a lesion is present, keeping the normalization window class-neutral
    # the tubes' in-slice cross-section stays far smaller than any lesion disc
    vessels = np.zeros((z, y, x), dtype=np.float64)
    for _ in range(3):
        cz = rng.integers(z // 3, 2 * z // 3)
        cy = rng.integers(y // 4, 3 * y // 4)
        cx = rng.integers(x // 4, 3 * x // 4)
        blob = _ellipsoid((z, y, x), (cz, cy, cx), (z * 0.55, 6.0, 6.0))
        vessels = np.maximum(vessels, 0.9 * (blob > 0.25))
    return np.maximum(base * mask, vessels).astype(np.float32)


def _ellipsoid(shape, center, radii):
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    d = (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    )
    return np.clip(1.0 - d, 0.0, 1.0)


def _insert_lesion(rng, vol, lesion_type, size_mm, contrast):
    """Add a bright lesion; returns (volume, native z range inclusive)."""
    z, y, x = vol.shape
    cz = int(rng.integers(int(z * 0.2), int(z * 0.8)))
    cy = int(rng.integers(int(y * 0.25), int(y * 0.75)))
    cx = int(rng.integers(int(x * 0.25), int(x * 0.75)))
    rz = max(size_mm / 2.0 / SPACING_MM[0], 0.8)
    ry = max(size_mm / 2.0 / SPACING_MM[1], 1.0)
    rx = max(size_mm / 2.0 / SPACING_MM[2], 1.0)
    if lesion_type == "mass":
        blob = _ellipsoid(vol.shape, (cz, cy, cx), (rz, ry, rx))
    elif lesion_type == "foci":
        blob = _ellipsoid(vol.shape, (cz, cy, cx), (max(rz, 0.8), ry, rx))
    else:  # nme: cluster of overlapping small blobs
        blob = np.zeros(vol.shape, dtype=np.float64)
        for _ in range(4):
            dz, dy, dx = rng.integers(-1, 2), rng.integers(-4, 5), rng.integers(-4, 5)
            blob += _ellipsoid(
                vol.shape,
                (cz + dz, cy + dy, cx + dx),
                (max(rz * 0.7, 0.8), ry * 0.6, rx * 0.6),
            )
        blob = np.clip(blob, 0.0, 1.0)
    # speckled interior texture so lesions differ from smooth parenchyma;
    # amplitude stays below the vessel peaks so percentile clipping cannot
    # flatten the lesion into a uniform saturated region
    speckle = np.clip(1.0 + 0.4 * rng.normal(0.0, 1.0, size=vol.shape), 0.5, 1.7)
    out = vol + contrast * (blob * speckle).astype(np.float32)
    zs = np.flatnonzero(blob.max(axis=(1, 2)) > 0.05)
    z0, z1 = (int(zs[0]), int(zs[-1])) if len(zs) else (cz, cz)
    return out, (z0, z1)


def _native_to_resampled_slice(z_native, n_native, n_target=38):
    # align-corners mapping used by volume.resample
    return int(round(z_native * (n_target - 1) / (n_native - 1)))


def generate_phantoms(
    n: int,
    positive_fraction: float,
    seed: int,
    out_dir,
    sequences=("T1_sub", "DWI_1500", "T2w"),
    shape=NATIVE_SHAPE,
) -> CohortManifest:
    """Write n synthetic exams (volumes + manifest.csv) under out_dir.

    Deterministic given the seed. Exactly round(n * positive_fraction)
    exams carry a lesion; roughly one patient in ten contributes both
    breasts."""
    if n < 4:
        raise ValueError("need n >= 4")
    if not 0.0 < positive_fraction < 1.0:
        raise ValueError(f"positive_fraction {positive_fraction} not in (0, 1)")
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    n_pos = int(round(n * positive_fraction))
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    rng.shuffle(labels)

    records = []
    patient_no = 0
    pending_laterality = None  # (patient_id, side) for bilateral patients
    for i in range(n):
        if pending_laterality is None:
            patient_no += 1
            patient_id = f"P{patient_no:04d}"
            laterality = "left"
            if i + 1 < n and rng.random() < 0.1:
                pending_laterality = (patient_id, "right")
        else:
            patient_id, laterality = pending_laterality
            pending_laterality = None
        exam_id = f"E{i:04d}"
        positive = bool(labels[i])
        erng = np.random.default_rng((seed, i))

        bpe = str(erng.choice(GRADES, p=BPE_DIST))
        bpd = str(erng.choice(GRADES, p=BPD_DIST))
        lesion_type = lesion_size = slice_range = None
        if positive:
            lesion_type = str(
                erng.choice(list(LESION_TYPE_DIST), p=list(LESION_TYPE_DIST.values()))
            )
            if lesion_type == "foci":
                lesion_size = float(np.clip(erng.lognormal(1.2, 0.3), 2.0, 4.9))
            else:
                lesion_size = float(np.clip(erng.lognormal(3.35, 0.1), 24.0, 34.0))
        birads = int(erng.choice([4, 5, 6]) if positive else erng.choice([1, 2, 3], p=[0.05, 0.8, 0.15]))

        seq_paths = {}
        base_bg = _parenchyma(erng, shape, bpe)
        lesion_geom = None
        for seq in sequences:
            # lesion contrast scales with the sequence's background so the
            # lesion sits below each volume's vessel peaks
            if seq == "T1_sub":
                vol = base_bg * 1.0
                lesion_contrast = 1.6
            elif seq == "DWI_1500":
                vol = _parenchyma(erng, shape, bpd) * 0.6
                lesion_contrast = 1.0
            else:  # T2w
                vol = base_bg * 1.4 + 0.05
                lesion_contrast = 1.6
            vol = vol + erng.normal(0.0, 0.01, size=shape).astype(np.float32)
            vol = np.clip(vol, 0.0, None)
            if positive:
                if lesion_geom is None:
                    srng = np.random.default_rng((seed, i, 7))
                    vol, zr = _insert_lesion(srng, vol, lesion_type, lesion_size, lesion_contrast)
                    lesion_geom = zr
                else:
                    srng = np.random.default_rng((seed, i, 7))
                    vol, _ = _insert_lesion(srng, vol, lesion_type, lesion_size, lesion_contrast)
            fname = f"{exam_id}__{seq}.mst"
            save_raw(vol, vol_dir / fname)
            seq_paths[seq] = f"volumes/{fname}"

        if lesion_geom is not None:
            slice_range = (
                _native_to_resampled_slice(lesion_geom[0], shape[0]),
                _native_to_resampled_slice(lesion_geom[1], shape[0]),
            )
        records.append(
            ExamRecord(
                exam_id=exam_id,
                patient_id=patient_id,
                laterality=laterality,
                sequence_paths=seq_paths,
                birads=birads,
                label="suspicious" if positive else "likely_benign",
                bpe_grade=bpe,
                bpd_grade=bpd,
                lesion_size_mm=lesion_size,
                lesion_type=lesion_type,
                lesion_slice_start=None if slice_range is None else slice_range[0],
                lesion_slice_stop=None if slice_range is None else slice_range[1],
                cohort="internal",
            )
        )
    manifest = CohortManifest(records=tuple(records)).validate()
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest
