"""Review-service tests over HTTP (FastAPI TestClient): case listing, image
serving, rating persistence with last-write-wins, and the summary table."""

import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from mst_triage.review_service import (
    RATING_LEVELS,
    RatingRecord,
    RatingStore,
    create_app,
    summarize_ratings,
)

N_SLICES_SMALL = 3  # bundles declare their own slice count in meta.json


def make_bundle(root, exam_id, score=0.9, n_slices=N_SLICES_SMALL):
    d = root / exam_id
    d.mkdir(parents=True)
    rng = np.random.default_rng(hash(exam_id) & 0xFFFF)
    for i in range(n_slices):
        for kind in ("base", "overlay"):
            img = Image.fromarray(rng.integers(0, 255, (16, 16), dtype=np.uint8))
            img.save(d / f"{kind}_{i:02d}.png")
    Image.fromarray(np.zeros((8, 32), dtype=np.uint8)).save(d / "slicebar.png")
    weights = [1.0 / n_slices] * n_slices
    (d / "slice_weights.json").write_text(json.dumps(weights))
    (d / "meta.json").write_text(
        json.dumps({"exam_id": exam_id, "score": score, "label": 1,
                    "n_slices": n_slices})
    )
    return d


@pytest.fixture()
def service(tmp_path):
    bundles = tmp_path / "bundles"
    for i in range(3):
        make_bundle(bundles, f"E{i:03d}", score=0.5 + 0.1 * i)
    app = create_app(bundles, tmp_path / "ratings.jsonl")
    return TestClient(app), tmp_path


def test_list_cases_with_rated_flags(service):
    client, _ = service
    cases = client.get("/api/cases").json()
    assert [c["exam_id"] for c in cases] == ["E000", "E001", "E002"]
    assert all(c["rated"] is False for c in cases)
    client.post("/api/cases/E001/rating",
                json={"area_rating": "good", "slice_rating": "moderate"})
    cases = client.get("/api/cases").json()
    assert [c["rated"] for c in cases] == [False, True, False]


def test_case_detail(service):
    client, _ = service
    detail = client.get("/api/cases/E000").json()
    assert detail["exam_id"] == "E000"
    assert len(detail["slice_weights"]) == N_SLICES_SMALL
    assert len(detail["images"]["base"]) == N_SLICES_SMALL
    assert detail["rating"] is None
    assert client.get("/api/cases/NOPE").status_code == 404


def test_images_served(service):
    client, _ = service
    for kind in ("base", "overlay"):
        r = client.get(f"/api/cases/E000/image/{kind}/1")
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
    assert client.get("/api/cases/E000/image/slicebar/0").status_code == 200
    assert client.get("/api/cases/E000/image/base/99").status_code == 404
    assert client.get("/api/cases/E000/image/sideways/0").status_code == 404


def test_rating_validation(service):
    client, _ = service
    r = client.post("/api/cases/E000/rating",
                    json={"area_rating": "excellent", "slice_rating": "good"})
    assert r.status_code == 422
    r = client.post("/api/cases/MISSING/rating",
                    json={"area_rating": "good", "slice_rating": "good"})
    assert r.status_code == 404
    r = client.post("/api/cases/E000/rating", json={"area_rating": "good"})
    assert r.status_code == 422  # missing field


def test_read_your_write_summary(service):
    client, _ = service
    client.post("/api/cases/E000/rating",
                json={"area_rating": "good", "slice_rating": "bad"})
    s = client.get("/api/summary").json()
    assert s["total_rated"] == 1
    assert s["total_cases"] == 3
    assert s["area"]["counts"] == {"good": 1, "moderate": 0, "bad": 0}
    assert s["slice"]["counts"]["bad"] == 1


def test_re_rating_replaces(service):
    client, _ = service
    for rating in ("good", "bad"):
        client.post("/api/cases/E002/rating",
                    json={"area_rating": rating, "slice_rating": rating})
    s = client.get("/api/summary").json()
    assert s["total_rated"] == 1
    assert s["area"]["counts"] == {"good": 0, "moderate": 0, "bad": 1}
    detail = client.get("/api/cases/E002").json()
    assert detail["rating"] == {"area_rating": "bad", "slice_rating": "bad"}


def test_raters_are_independent(service):
    client, _ = service
    client.post("/api/cases/E000/rating", headers={"X-Rater-Id": "r1"},
                json={"area_rating": "good", "slice_rating": "good"})
    cases_r1 = client.get("/api/cases", headers={"X-Rater-Id": "r1"}).json()
    cases_r2 = client.get("/api/cases", headers={"X-Rater-Id": "r2"}).json()
    assert cases_r1[0]["rated"] is True
    assert cases_r2[0]["rated"] is False
    assert client.get("/api/summary").json()["total_rated"] == 1


def test_persistence_across_restart(service, tmp_path):
    client, root = service
    client.post("/api/cases/E001/rating",
                json={"area_rating": "moderate", "slice_rating": "good"})
    # a fresh app over the same log sees the rating
    app2 = create_app(root / "bundles", root / "ratings.jsonl")
    client2 = TestClient(app2)
    assert client2.get("/api/summary").json()["total_rated"] == 1
    # and the log on disk is append-only JSONL
    lines = (root / "ratings.jsonl").read_text().splitlines()
    assert all(json.loads(line)["exam_id"] == "E001" for line in lines)


def test_malformed_bundle_skipped_with_warning(tmp_path):
    bundles = tmp_path / "bundles"
    make_bundle(bundles, "GOOD")
    bad = bundles / "BAD"
    bad.mkdir()
    (bad / "meta.json").write_text(json.dumps({"exam_id": "BAD", "n_slices": 2}))
    app = create_app(bundles, tmp_path / "r.jsonl")
    assert len(app.state.bundle_warnings) == 1
    client = TestClient(app)
    assert [c["exam_id"] for c in client.get("/api/cases").json()] == ["GOOD"]


def test_no_bundles_is_an_error(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError, match="no valid case bundles"):
        create_app(tmp_path / "empty", tmp_path / "r.jsonl")


def test_static_dir_served(tmp_path):
    bundles = tmp_path / "bundles"
    make_bundle(bundles, "E1")
    static = tmp_path / "static"
    static.mkdir()
    (static / "index.html").write_text("<html><body>review</body></html>")
    app = create_app(bundles, tmp_path / "r.jsonl", static_dir=static)
    client = TestClient(app)
    assert "review" in client.get("/").text


# ---------------------------------------------------------------------------
# summarize_ratings


def _records(area_counts, slice_counts=None):
    slice_counts = slice_counts or area_counts
    recs = []
    i = 0
    for level, n in zip(RATING_LEVELS, area_counts):
        for _ in range(n):
            recs.append(RatingRecord(f"e{i}", "r", level, "good", "t"))
            i += 1
    # overwrite slice ratings to the requested distribution
    out = []
    j = 0
    for level, n in zip(RATING_LEVELS, slice_counts):
        for _ in range(n):
            rec = recs[j]
            out.append(RatingRecord(rec.exam_id, "r", rec.area_rating, level, "t"))
            j += 1
    return out


def test_summary_published_fixture():
    # 226 ratings split 119/80/27 -> 53/35/12 percent
    recs = _records([119, 80, 27])
    s = summarize_ratings(recs)
    assert s["total_rated"] == 226
    assert s["area"]["counts"] == {"good": 119, "moderate": 80, "bad": 27}
    assert s["area"]["percentages"] == {"good": 53, "moderate": 35, "bad": 12}


def test_summary_empty():
    s = summarize_ratings([])
    assert s["total_rated"] == 0
    assert s["area"]["percentages"] == {lvl: None for lvl in RATING_LEVELS}


def test_store_last_write_wins(tmp_path):
    store = RatingStore(tmp_path / "log.jsonl")
    store.append(RatingRecord("e1", "r", "good", "good", "t1"))
    store.append(RatingRecord("e1", "r", "bad", "bad", "t2"))
    store.append(RatingRecord("e1", "other", "moderate", "moderate", "t3"))
    recs = store.records()
    assert len(recs) == 2
    mine = next(r for r in recs if r.rater_id == "r")
    assert mine.area_rating == "bad"
    assert store.rated_exams("r") == {"e1"}
    # reload folds the log identically
    store2 = RatingStore(tmp_path / "log.jsonl")
    assert sorted(r.timestamp for r in store2.records()) == sorted(
        r.timestamp for r in recs
    )
