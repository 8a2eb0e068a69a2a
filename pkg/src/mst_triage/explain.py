"""Render attention bundles into reviewable case directories: per-slice base
images, heatmap overlays, and a slice-weight bar chart, plus metadata for the
rating workflow."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib
import numpy as np
from PIL import Image

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .model import AttentionBundle, N_SLICES  # noqa: E402
from .volume import SequenceStack  # noqa: E402

COLORMAP = "inferno"
ALPHA_SCALE = 0.5  # blend alpha = ALPHA_SCALE * attention


@dataclass(frozen=True)
class CaseBundle:
    exam_id: str
    directory: Path
    score: float
    label: int
    slice_weights: np.ndarray

    @property
    def meta_path(self):
        return self.directory / "meta.json"


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def render_overlay(
    stack: SequenceStack,
    bundle: AttentionBundle,
    out_dir,
    exam_id: str,
    score: float = float("nan"),
    label: int = -1,
    model_hash: str = "",
) -> CaseBundle:
    """Write base_XX.png / overlay_XX.png / slicebar.png / slice_weights.json
    / meta.json for one case. Deterministic bytes given identical inputs."""
    if bundle.area_maps.shape != (N_SLICES, 224, 224):
        raise ValueError(f"area_maps shape {bundle.area_maps.shape}")
    case_dir = Path(out_dir) / exam_id
    case_dir.mkdir(parents=True, exist_ok=True)

    cmap = matplotlib.colormaps[COLORMAP]
    base_channel = stack.channels[0]  # first display channel
    for i in range(N_SLICES):
        base = base_channel[i].astype(np.float64)
        Image.fromarray(_to_u8(base), mode="L").save(case_dir / f"base_{i:02d}.png")
        att = bundle.area_maps[i]
        alpha = ALPHA_SCALE * att
        color = cmap(att)[..., :3]  # RGB in [0,1]
        base_rgb = np.repeat(base[..., None], 3, axis=-1)
        blended = (1.0 - alpha[..., None]) * base_rgb + alpha[..., None] * color
        Image.fromarray(_to_u8(blended), mode="RGB").save(
            case_dir / f"overlay_{i:02d}.png"
        )

    weights = bundle.slice_weights
    (case_dir / "slice_weights.json").write_text(
        json.dumps([float(w) for w in weights])
    )
    fig, ax = plt.subplots(figsize=(6, 2.2))
    ax.bar(range(N_SLICES), weights, color="#3b6ea5")
    ax.set_xlabel("slice")
    ax.set_ylabel("attention")
    fig.tight_layout()
    fig.savefig(case_dir / "slicebar.png", metadata={"Software": None})
    plt.close(fig)

    meta = {
        "exam_id": exam_id,
        "score": None if np.isnan(score) else float(score),
        "label": label,
        "n_slices": N_SLICES,
        "channel_map": list(stack.channel_map),
        "display_channel": stack.channel_map[0],
        "model_hash": model_hash,
        "colormap": COLORMAP,
        "alpha_scale": ALPHA_SCALE,
    }
    (case_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return CaseBundle(
        exam_id=exam_id,
        directory=case_dir,
        score=score,
        label=label,
        slice_weights=np.asarray(weights, dtype=float),
    )


def select_true_positives(prediction_set, threshold: float):
    """Exams with label suspicious and score >= threshold."""
    return [
        r.exam_id for r in prediction_set.rows if r.label == 1 and r.score >= threshold
    ]
