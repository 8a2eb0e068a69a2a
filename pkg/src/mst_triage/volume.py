"""3D volume handling: file IO, T1 subtraction, laterality split, resampling
to the fixed model geometry, percentile normalization, channel stacking, and
training-time augmentation."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

TARGET_SHAPE = (38, 224, 224)

RAW_MAGIC = b"MSTV1"
_RAW_DTYPES = {0: np.float32}


class VolumeError(ValueError):
    pass


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray  # (Z, Y, X), float32
    spacing_mm: tuple | None = None
    sequence_id: str = "T1_sub"

    def __post_init__(self):
        v = self.voxels
        if v.ndim != 3 or min(v.shape) < 1:
            raise VolumeError(f"voxels must be 3-D with positive extents, got {v.shape}")
        if not np.all(np.isfinite(v)):
            idx = np.argwhere(~np.isfinite(v))[0]
            raise VolumeError(f"non-finite voxel at index {tuple(int(i) for i in idx)}")

    @property
    def shape(self):
        return self.voxels.shape


@dataclass(frozen=True)
class SequenceStack:
    channels: np.ndarray  # (C, 38, 224, 224), float32, values in [0, 1]
    channel_map: tuple  # sequence-ids, length C
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        c = self.channels
        if c.ndim != 4 or c.shape[0] not in (1, 2, 3) or c.shape[1:] != TARGET_SHAPE:
            raise VolumeError(f"stack shape {c.shape} != (C<=3, {TARGET_SHAPE})")
        if len(self.channel_map) != c.shape[0]:
            raise VolumeError("channel_map length mismatch")
        if c.min() < 0.0 or c.max() > 1.0:
            raise VolumeError("stack values outside [0, 1]")


@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float = 0.0
    flip_x: bool = False
    flip_y: bool = False
    invert_intensity: bool = False
    noise_sd: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rotation_deg <= 90.0:
            raise VolumeError(f"rotation_deg {self.rotation_deg} outside [0, 90]")
        if not 0.0 <= self.noise_sd <= 0.25:
            raise VolumeError(f"noise_sd {self.noise_sd} outside [0, 0.25]")


def sample_augment_params(rng: np.random.Generator, max_rotation_deg=90.0, max_noise_sd=0.25) -> AugmentParams:
    return AugmentParams(
        rotation_deg=float(rng.uniform(0.0, max_rotation_deg)),
        flip_x=bool(rng.integers(2)),
        flip_y=bool(rng.integers(2)),
        invert_intensity=bool(rng.integers(2)),
        noise_sd=float(rng.uniform(0.0, max_noise_sd)),
        rng_seed=int(rng.integers(2**31)),
    )


# ---------------------------------------------------------------------------
# file IO


def save_raw(voxels: np.ndarray, path):
    """Raw-tensor format: magic, dtype code byte, Z/Y/X uint32 LE, float32
    payload X-fastest."""
    voxels = np.ascontiguousarray(voxels, dtype=np.float32)
    z, y, x = voxels.shape
    with open(str(path), "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<BIII", 0, z, y, x))
        f.write(voxels.tobytes())


def load_raw(path) -> np.ndarray:
    with open(str(path), "rb") as f:
        magic = f.read(5)
        if magic != RAW_MAGIC:
            raise VolumeError(f"{path}: bad magic {magic!r}")
        code, z, y, x = struct.unpack("<BIII", f.read(13))
        if code not in _RAW_DTYPES:
            raise VolumeError(f"{path}: unknown dtype code {code}")
        dtype = _RAW_DTYPES[code]
        payload = f.read()
    expected = z * y * x * np.dtype(dtype).itemsize
    if len(payload) != expected:
        raise VolumeError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(z, y, x).copy()


_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}


def _load_nifti(path) -> tuple[np.ndarray, tuple | None]:
    """Minimal NIfTI-1 single-file (.nii/.nii.gz) reader: dims, dtype,
    pixdim, and scaling slope/intercept."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(str(path), "rb") as f:
        hdr = f.read(348)
        if len(hdr) < 348:
            raise VolumeError(f"{path}: truncated NIfTI header")
        (sizeof_hdr,) = struct.unpack_from("<i", hdr, 0)
        if sizeof_hdr != 348:
            raise VolumeError(f"{path}: not a little-endian NIfTI-1 file")
        dim = struct.unpack_from("<8h", hdr, 40)
        (datatype,) = struct.unpack_from("<h", hdr, 70)
        pixdim = struct.unpack_from("<8f", hdr, 76)
        (vox_offset,) = struct.unpack_from("<f", hdr, 108)
        scl_slope, scl_inter = struct.unpack_from("<2f", hdr, 112)
        magic = struct.unpack_from("<4s", hdr, 344)[0]
        if magic not in (b"n+1\x00", b"ni1\x00"):
            raise VolumeError(f"{path}: bad NIfTI magic {magic!r}")
        if dim[0] != 3:
            raise VolumeError(f"{path}: expected 3-D NIfTI, got {dim[0]}-D")
        if datatype not in _NIFTI_DTYPES:
            raise VolumeError(f"{path}: unsupported NIfTI datatype {datatype}")
        nx, ny, nz = dim[1], dim[2], dim[3]
        f.seek(int(vox_offset))
        dtype = _NIFTI_DTYPES[datatype]
        data = np.frombuffer(
            f.read(nx * ny * nz * np.dtype(dtype).itemsize), dtype=dtype
        )
    if data.size != nx * ny * nz:
        raise VolumeError(f"{path}: NIfTI payload shorter than header implies")
    # NIfTI stores x-fastest (Fortran order); reorient to (Z, Y, X)
    vox = data.reshape(nz, ny, nx).astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        vox = vox * slope + scl_inter
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    if any(s <= 0 for s in spacing):
        spacing = None
    return vox, spacing


def save_nifti(voxels: np.ndarray, path, spacing_mm=(1.0, 1.0, 1.0)):
    voxels = np.ascontiguousarray(voxels, dtype=np.float32)
    nz, ny, nx = voxels.shape
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    struct.pack_into(
        "<8f", hdr, 76, 0.0, spacing_mm[2], spacing_mm[1], spacing_mm[0], 0, 0, 0, 0
    )
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(str(path), "wb") as f:
        f.write(bytes(hdr))
        f.write(voxels.tobytes())


def load_volume(path, sequence_id="T1_sub") -> Volume:
    """Load a NIfTI-1 or raw-tensor volume; rejects non-finite voxels."""
    path = str(path)
    if not Path(path).exists():
        raise VolumeError(f"no such file: {path}")
    if path.endswith((".nii", ".nii.gz")):
        vox, spacing = _load_nifti(path)
    else:
        vox, spacing = load_raw(path), None
    return Volume(voxels=vox.astype(np.float32), spacing_mm=spacing, sequence_id=sequence_id)


# ---------------------------------------------------------------------------
# preprocessing


def subtract_t1(pre: Volume, post1: Volume) -> Volume:
    """Early subtraction image: (post1 - pre) clamped at 0 from below."""
    if pre.shape != post1.shape:
        raise VolumeError(f"shape mismatch {pre.shape} vs {post1.shape}")
    diff = np.maximum(post1.voxels - pre.voxels, 0.0).astype(np.float32)
    return Volume(voxels=diff, spacing_mm=post1.spacing_mm, sequence_id="T1_sub")


def split_laterality(v: Volume) -> tuple[Volume, Volume]:
    """Split at the x-axis midpoint: left = columns [0, X//2), right = rest."""
    x = v.shape[2]
    if x < 2:
        raise VolumeError("cannot split a volume with X < 2")
    mid = x // 2
    left = Volume(v.voxels[:, :, :mid].copy(), v.spacing_mm, v.sequence_id)
    right = Volume(v.voxels[:, :, mid:].copy(), v.spacing_mm, v.sequence_id)
    return left, right


def _axis_coords(n_out: int, n_in: int) -> np.ndarray:
    if n_out == 1 or n_in == 1:
        return np.full(n_out, (n_in - 1) / 2.0)
    return np.arange(n_out) * (n_in - 1) / (n_out - 1)


def resample(v: Volume, target=TARGET_SHAPE) -> Volume:
    """Trilinear resample (bilinear in-plane, linear across slices) onto the
    target grid, endpoints aligned. Identity when already at target shape."""
    if v.shape == tuple(target):
        return v
    zc = _axis_coords(target[0], v.shape[0])
    yc = _axis_coords(target[1], v.shape[1])
    xc = _axis_coords(target[2], v.shape[2])
    grid = np.meshgrid(zc, yc, xc, indexing="ij")
    out = ndimage.map_coordinates(
        v.voxels.astype(np.float64), np.stack(grid), order=1, mode="nearest"
    )
    return Volume(out.astype(np.float32), v.spacing_mm, v.sequence_id)


def normalize(v: Volume, lo_pct=0.5, hi_pct=99.5) -> tuple[Volume, dict]:
    """Clip to [P_lo, P_hi] percentiles, then map affinely to [0, 1].

    Returns the normalized volume and a parameter dict (with a warning flag
    for degenerate constant input, which maps to all zeros).
    """
    vox = v.voxels.astype(np.float64)
    lo, hi = np.percentile(vox, [lo_pct, hi_pct])
    params = {"lo_pct": lo_pct, "hi_pct": hi_pct, "p_lo": float(lo), "p_hi": float(hi)}
    if hi <= lo:
        params["constant_input"] = True
        out = np.zeros_like(vox, dtype=np.float32)
    else:
        out = ((np.clip(vox, lo, hi) - lo) / (hi - lo)).astype(np.float32)
        out = np.clip(out, 0.0, 1.0)
    return Volume(out, v.spacing_mm, v.sequence_id), params


def stack_sequences(volumes, normalization=None) -> SequenceStack:
    """Stack 1-3 preprocessed volumes into the model input tensor."""
    if not 1 <= len(volumes) <= 3:
        raise VolumeError(f"need 1-3 sequences, got {len(volumes)}")
    for v in volumes:
        if v.shape != TARGET_SHAPE:
            raise VolumeError(f"{v.sequence_id}: shape {v.shape} != {TARGET_SHAPE}")
    channels = np.stack([v.voxels for v in volumes]).astype(np.float32)
    return SequenceStack(
        channels=channels,
        channel_map=tuple(v.sequence_id for v in volumes),
        normalization=normalization or {},
    )


def channels_to_rgb(channels: np.ndarray) -> np.ndarray:
    """Map a (C, ...) array to 3 display/backbone channels.

    C=1 replicates, C=2 maps to [ch0, ch1, ch0], C=3 is the identity.
    """
    c = channels.shape[0]
    if c == 1:
        return np.repeat(channels, 3, axis=0)
    if c == 2:
        return channels[[0, 1, 0]]
    if c == 3:
        return channels
    raise VolumeError(f"cannot map {c} channels to 3")


def augment(s: SequenceStack, p: AugmentParams) -> SequenceStack:
    """Apply in-plane rotation, flips, intensity inversion, and Gaussian
    noise. The identity parameter set returns the input bit-exactly; the
    same spatial transform is applied to every channel."""
    out = s.channels
    if p.rotation_deg != 0.0:
        out = ndimage.rotate(
            out, p.rotation_deg, axes=(-2, -1), reshape=False, order=1,
            mode="constant", cval=0.0,
        ).astype(np.float32)
        out = np.clip(out, 0.0, 1.0)
    if p.flip_x:
        out = out[..., ::-1]
    if p.flip_y:
        out = out[..., ::-1, :]
    if p.invert_intensity:
        out = 1.0 - out
    if p.noise_sd > 0.0:
        rng = np.random.default_rng(p.rng_seed)
        out = out + rng.normal(0.0, p.noise_sd, size=out.shape)
        out = np.clip(out, 0.0, 1.0)
    out = np.ascontiguousarray(out, dtype=np.float32)
    return replace(s, channels=out)


# ---------------------------------------------------------------------------
# preprocessed cache: one raw-tensor file per (exam, sequence) + JSON sidecar


def preprocess_exam(record, sequences, data_root=".", target=TARGET_SHAPE):
    """Load, resample, and normalize each requested sequence of one exam and
    stack them in the given order. T1_sub may be derived from T1_pre/T1_post1
    when not stored directly."""
    vols, norm_params = [], {}
    root = Path(data_root)
    for seq in sequences:
        if seq in record.sequence_paths:
            v = load_volume(root / record.sequence_paths[seq], sequence_id=seq)
        elif seq == "T1_sub" and {"T1_pre", "T1_post1"} <= set(record.sequence_paths):
            pre = load_volume(root / record.sequence_paths["T1_pre"], "T1_pre")
            post = load_volume(root / record.sequence_paths["T1_post1"], "T1_post1")
            v = subtract_t1(pre, post)
        else:
            raise VolumeError(f"exam {record.exam_id!r}: sequence {seq!r} unavailable")
        v = resample(v, target)
        v, params = normalize(v)
        norm_params[seq] = params
        vols.append(v)
    return stack_sequences(vols, normalization=norm_params)


def cache_path(cache_dir, exam_id, sequence_id) -> Path:
    return Path(cache_dir) / f"{exam_id}__{sequence_id}.mst"


def write_stack_cache(stack: SequenceStack, cache_dir, exam_id):
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    for ch, seq in enumerate(stack.channel_map):
        save_raw(stack.channels[ch], cache_path(cache_dir, exam_id, seq))
    sidecar = {
        "exam_id": exam_id,
        "channel_map": list(stack.channel_map),
        "normalization": stack.normalization,
    }
    (cache_dir / f"{exam_id}.json").write_text(json.dumps(sidecar, indent=2))


def read_stack_cache(cache_dir, exam_id, sequences=None) -> SequenceStack:
    cache_dir = Path(cache_dir)
    sidecar = json.loads((cache_dir / f"{exam_id}.json").read_text())
    channel_map = sequences or sidecar["channel_map"]
    channels = np.stack(
        [load_raw(cache_path(cache_dir, exam_id, seq)) for seq in channel_map]
    )
    return SequenceStack(
        channels=channels.astype(np.float32),
        channel_map=tuple(channel_map),
        normalization=sidecar.get("normalization", {}),
    )
