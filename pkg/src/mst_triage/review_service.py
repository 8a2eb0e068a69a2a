"""Local HTTP service for the attention-map rating workflow: serves case
bundles, persists Likert ratings to an append-only JSONL log, and reports a
Table-4-style summary. Backend for the browser review app."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from fastapi import FastAPI, Header, HTTPException
from fastapi.responses import FileResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

RATING_LEVELS = ("good", "moderate", "bad")


@dataclass(frozen=True)
class RatingRecord:
    exam_id: str
    rater_id: str
    area_rating: str
    slice_rating: str
    timestamp: str


class RatingStore:
    """Append-only JSONL log with an in-memory last-write-wins snapshot per
    (exam_id, rater_id). Appends are fsynced before the request is
    acknowledged."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._live = {}
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    rec = RatingRecord(**json.loads(line))
                    self._live[(rec.exam_id, rec.rater_id)] = rec

    def append(self, rec: RatingRecord):
        with self._lock:
            with open(self.path, "a") as f:
                f.write(json.dumps(rec.__dict__) + "\n")
                f.flush()
                os.fsync(f.fileno())
            self._live[(rec.exam_id, rec.rater_id)] = rec

    def records(self):
        return list(self._live.values())

    def rated_exams(self, rater_id=None):
        return {
            e for (e, r) in self._live if rater_id is None or r == rater_id
        }


def summarize_ratings(records) -> dict:
    """Counts and integer percentages per rating level for both map types.

    Only the latest record per (exam, rater) should be passed in; the
    RatingStore snapshot already guarantees that."""
    total = len(records)
    out = {"total_rated": total}
    for kind, attr in (("area", "area_rating"), ("slice", "slice_rating")):
        counts = {lvl: 0 for lvl in RATING_LEVELS}
        for rec in records:
            counts[getattr(rec, attr)] += 1
        out[kind] = {
            "counts": counts,
            "percentages": {
                lvl: (round(100 * counts[lvl] / total) if total else None)
                for lvl in RATING_LEVELS
            },
        }
    return out


class RatingIn(BaseModel):
    area_rating: str
    slice_rating: str


def _load_bundles(bundle_root):
    bundles = {}
    warnings = []
    for meta_path in sorted(Path(bundle_root).glob("*/meta.json")):
        try:
            meta = json.loads(meta_path.read_text())
            exam_id = meta["exam_id"]
            n = meta.get("n_slices", 38)
            for i in range(n):
                for kind in ("base", "overlay"):
                    if not (meta_path.parent / f"{kind}_{i:02d}.png").exists():
                        raise FileNotFoundError(f"{kind}_{i:02d}.png missing")
            bundles[exam_id] = meta_path.parent
        except Exception as e:  # malformed bundle: skip with warning
            warnings.append(f"skipping bundle {meta_path.parent.name}: {e}")
    return bundles, warnings


def create_app(bundle_root, ratings_path, static_dir=None) -> FastAPI:
    bundles, warnings = _load_bundles(bundle_root)
    if not bundles:
        raise ValueError(f"no valid case bundles under {bundle_root}")
    store = RatingStore(ratings_path)
    app = FastAPI(title="attention-map review")
    app.state.bundle_warnings = warnings
    app.state.store = store

    def _meta(exam_id):
        if exam_id not in bundles:
            raise HTTPException(status_code=404, detail=f"unknown case {exam_id!r}")
        return json.loads((bundles[exam_id] / "meta.json").read_text())

    @app.get("/api/cases")
    def list_cases(x_rater_id: str = Header(default="anonymous")):
        rated = store.rated_exams(x_rater_id)
        out = []
        for exam_id in sorted(bundles):
            meta = _meta(exam_id)
            out.append(
                {"exam_id": exam_id, "score": meta.get("score"),
                 "rated": exam_id in rated}
            )
        return out

    @app.get("/api/cases/{exam_id}")
    def case_detail(exam_id: str, x_rater_id: str = Header(default="anonymous")):
        meta = _meta(exam_id)
        n = meta.get("n_slices", 38)
        weights = json.loads((bundles[exam_id] / "slice_weights.json").read_text())
        rating = store._live.get((exam_id, x_rater_id))
        return {
            **meta,
            "slice_weights": weights,
            "images": {
                "base": [f"/api/cases/{exam_id}/image/base/{i}" for i in range(n)],
                "overlay": [f"/api/cases/{exam_id}/image/overlay/{i}" for i in range(n)],
                "slicebar": f"/api/cases/{exam_id}/image/slicebar/0",
            },
            "rating": None if rating is None else {
                "area_rating": rating.area_rating,
                "slice_rating": rating.slice_rating,
            },
        }

    @app.get("/api/cases/{exam_id}/image/{kind}/{slice_idx}")
    def case_image(exam_id: str, kind: str, slice_idx: int):
        meta = _meta(exam_id)
        if kind == "slicebar":
            path = bundles[exam_id] / "slicebar.png"
        elif kind in ("base", "overlay"):
            if not 0 <= slice_idx < meta.get("n_slices", 38):
                raise HTTPException(status_code=404, detail="slice out of range")
            path = bundles[exam_id] / f"{kind}_{slice_idx:02d}.png"
        else:
            raise HTTPException(status_code=404, detail=f"unknown image kind {kind!r}")
        return FileResponse(path, media_type="image/png")

    @app.post("/api/cases/{exam_id}/rating")
    def submit_rating(exam_id: str, rating: RatingIn,
                      x_rater_id: str = Header(default="anonymous")):
        _meta(exam_id)
        for field, value in (("area_rating", rating.area_rating),
                             ("slice_rating", rating.slice_rating)):
            if value not in RATING_LEVELS:
                raise HTTPException(
                    status_code=422,
                    detail=f"{field} must be one of {RATING_LEVELS}, got {value!r}",
                )
        rec = RatingRecord(
            exam_id=exam_id,
            rater_id=x_rater_id,
            area_rating=rating.area_rating,
            slice_rating=rating.slice_rating,
            timestamp=datetime.now(timezone.utc).isoformat(),
        )
        store.append(rec)
        return {"status": "ok", "exam_id": exam_id}

    @app.get("/api/summary")
    def summary():
        s = summarize_ratings(store.records())
        s["total_cases"] = len(bundles)
        return s

    if static_dir and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="app")
    return app


def serve(bundle_root, ratings_path, port=8000, static_dir=None):
    import uvicorn

    app = create_app(bundle_root, ratings_path, static_dir=static_dir)
    for w in app.state.bundle_warnings:
        print(f"warning: {w}")
    uvicorn.run(app, host="127.0.0.1", port=port)
