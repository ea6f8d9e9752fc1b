"""Reader-study service tests: blinding, upsert idempotence, aggregation
conservation, threshold tallies, and byte-stable slice rendering."""

import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from latentvol.study import (
    CATEGORIES,
    DEFAULT_LABELS,
    AggregateReport,
    RatingRecord,
    StudyStore,
    create_app,
    encode_gray_png,
    register_volume_dir,
    window_to_bytes,
)
from latentvol.volume import PhantomSpec, generate_phantom, save_volume


@pytest.fixture()
def store(tmp_path):
    s = StudyStore(tmp_path / "study.db")
    vol_dir = tmp_path / "vols"
    for i in range(4):
        vol, _ = generate_phantom(PhantomSpec(seed=50 + i, shape=(8, 8, 4)))
        save_volume(vol, vol_dir / f"vol_{i}")
    register_volume_dir(s, vol_dir, dataset="synth")
    yield s
    s.close()


@pytest.fixture()
def client(store):
    return TestClient(create_app(store))


def make_study(store, study_id="s1", readers=("alice", "bob"), seed=3):
    return store.create_study(study_id, store.list_volumes(), list(readers), seed)


class TestPngEncoding:
    def test_window_endpoints_and_rounding(self):
        plane = np.array([[-1.0, 1.0], [0.0, 2.0]])
        out = window_to_bytes(plane, -1.0, 1.0)
        assert out[0, 0] == 0
        assert out[0, 1] == 255
        assert out[1, 0] == 128  # round-half-up of 127.5
        assert out[1, 1] == 255  # clipped

    def test_png_signature_and_determinism(self):
        img = np.arange(64, dtype=np.uint8).reshape(8, 8)
        png1 = encode_gray_png(img)
        png2 = encode_gray_png(img)
        assert png1[:8] == b"\x89PNG\r\n\x1a\n"
        assert png1 == png2


class TestStore:
    def test_create_study_orders_are_permutations(self, store):
        definition = make_study(store)
        for reader in definition.readers:
            order = store.reader_order("s1", reader)
            assert sorted(order) == sorted(definition.volume_ids)

    def test_order_reproducible(self, tmp_path, store):
        make_study(store)
        order1 = store.reader_order("s1", "alice")
        s2 = StudyStore(tmp_path / "other.db")
        for vid in store.list_volumes():
            s2.register_volume(vid, store.volume_path(vid), "synth")
        s2.create_study("s1", store.list_volumes(), ["alice", "bob"], 3)
        assert s2.reader_order("s1", "alice") == order1
        s2.close()

    def test_duplicate_study_rejected(self, store):
        make_study(store)
        with pytest.raises(ValueError, match="already exists"):
            make_study(store)

    def test_default_labels_are_full_instrument(self):
        assert set(DEFAULT_LABELS) == set(CATEGORIES)
        for options in DEFAULT_LABELS.values():
            assert set(options) == {"A", "B", "C", "D"}
            assert all(len(text) > 10 for text in options.values())

    def test_upsert_idempotent(self, store):
        make_study(store)
        vid = store.reader_order("s1", "alice")[0]
        store.submit_rating(RatingRecord("s1", "alice", vid, "realistic_appearance", "B"))
        store.submit_rating(RatingRecord("s1", "alice", vid, "realistic_appearance", "D"))
        records = store.ratings("s1")
        assert len(records) == 1
        assert records[0].option == "D"

    def test_invalid_option_rejected(self):
        with pytest.raises(ValueError, match="option"):
            RatingRecord("s", "r", "v", "realistic_appearance", "E")
        with pytest.raises(ValueError, match="category"):
            RatingRecord("s", "r", "v", "overall_vibes", "A")

    def test_next_volume_progression(self, store):
        make_study(store)
        order = store.reader_order("s1", "alice")
        assert store.next_volume("s1", "alice")["volume_id"] == order[0]
        for cat in CATEGORIES:
            store.submit_rating(RatingRecord("s1", "alice", order[0], cat, "C"))
        nxt = store.next_volume("s1", "alice")
        assert nxt["volume_id"] == order[1]
        assert nxt["completed"] == 1
        for vid in order[1:]:
            for cat in CATEGORIES:
                store.submit_rating(RatingRecord("s1", "alice", vid, cat, "D"))
        assert store.next_volume("s1", "alice")["done"] is True

    def test_aggregate_conservation(self, store):
        make_study(store)
        order = store.reader_order("s1", "alice")
        store.submit_rating(RatingRecord("s1", "alice", order[0], "realistic_appearance", "C"))
        store.submit_rating(RatingRecord("s1", "alice", order[0], "slice_consistency", "A"))
        store.submit_rating(RatingRecord("s1", "bob", order[0], "realistic_appearance", "D"))
        report = store.aggregate("s1")
        assert report.total == 3
        assert report.counts["synth"]["realistic_appearance"] == {"C": 1, "D": 1}
        assert report.per_reader["alice"]["slice_consistency"]["A"] == 1
        assert report.threshold_tally["realistic_appearance"] == 2
        assert report.threshold_tally["slice_consistency"] == 0

    def test_aggregate_empty_study(self, store):
        make_study(store)
        report = store.aggregate("s1")
        assert report.total == 0 and report.counts == {}

    def test_conservation_invariant_enforced(self):
        with pytest.raises(ValueError, match="conservation"):
            AggregateReport(total=5, counts={"d": {"c": {"A": 1}}},
                            per_reader={}, threshold_tally={})

    def test_concurrent_submissions_for_distinct_keys_all_persist(self, store):
        import threading

        make_study(store)
        order = store.reader_order("s1", "alice")
        jobs = [(reader, vid, cat)
                for reader in ("alice", "bob")
                for vid in order
                for cat in CATEGORIES]

        errors = []

        def submit(reader, vid, cat):
            try:
                store.submit_rating(RatingRecord("s1", reader, vid, cat, "C"))
            except Exception as exc:  # pragma: no cover - diagnostic path
                errors.append(exc)

        threads = [threading.Thread(target=submit, args=job) for job in jobs]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert len(store.ratings("s1")) == len(jobs)

    def test_threshold_tally_fixture_189_of_200(self, tmp_path):
        # constructed fixture: 200 ratings in one category, 189 at C or D
        s = StudyStore(tmp_path / "fixture.db")
        vol_dir = tmp_path / "fv"
        for i in range(200):
            vol, _ = generate_phantom(PhantomSpec(seed=900, shape=(4, 4, 4)))
            save_volume(vol, vol_dir / f"v{i:03d}")
        register_volume_dir(s, vol_dir, dataset="fixture")
        s.create_study("big", s.list_volumes(), ["reader_a"], 0)
        options = ["C"] * 150 + ["D"] * 39 + ["B"] * 8 + ["A"] * 3
        for vid, opt in zip(sorted(s.list_volumes()), options):
            s.submit_rating(RatingRecord("big", "reader_a", vid, "realistic_appearance", opt))
        report = s.aggregate("big")
        assert report.total == 200
        assert report.threshold_tally["realistic_appearance"] == 189
        s.close()


class TestHttpApi:
    def test_create_and_fetch_study(self, client, store):
        resp = client.post("/v1/studies", json={
            "study_id": "web", "volume_ids": store.list_volumes(),
            "readers": ["alice"], "seed": 1})
        assert resp.status_code == 200
        body = client.get("/v1/studies/web").json()
        assert body["n_volumes"] == 4
        assert body["labels"] == DEFAULT_LABELS

    def test_blinding_no_provenance_in_reader_payloads(self, client, store):
        make_study(store)
        nxt = client.get("/v1/studies/s1/next", params={"reader": "alice"}).json()
        meta = client.get(f"/v1/volumes/{nxt['volume_id']}/meta").json()
        for payload in (nxt, meta):
            text = json.dumps(payload).lower()
            assert "dataset" not in text
            assert "synth" not in text
            assert "source" not in text
        assert set(meta) == {"volume_id", "shape", "depth"}

    def test_slice_bytes_stable_and_correct(self, client, store):
        make_study(store)
        vid = store.list_volumes()[0]
        r1 = client.get(f"/v1/volumes/{vid}/slices/0.png")
        r2 = client.get(f"/v1/volumes/{vid}/slices/0.png")
        assert r1.status_code == 200
        assert r1.headers["content-type"] == "image/png"
        assert r1.content == r2.content
        windowed = client.get(f"/v1/volumes/{vid}/slices/0.png", params={"window": "-0.5,0.5"})
        assert windowed.status_code == 200
        assert windowed.content != r1.content

    def test_slice_out_of_range(self, client, store):
        make_study(store)
        vid = store.list_volumes()[0]
        assert client.get(f"/v1/volumes/{vid}/slices/4.png").status_code == 404
        assert client.get(f"/v1/volumes/{vid}/slices/-1.png").status_code == 404

    def test_rating_flow_and_idempotence(self, client, store):
        make_study(store)
        vid = store.reader_order("s1", "alice")[0]
        payload = {"study_id": "s1", "reader_id": "alice", "volume_id": vid,
                   "category": "realistic_appearance", "option": "C"}
        assert client.post("/v1/ratings", json=payload).status_code == 200
        assert client.post("/v1/ratings", json=payload).status_code == 200
        results = client.get("/v1/studies/s1/results").json()
        assert results["total"] == 1

    def test_invalid_option_422(self, client, store):
        make_study(store)
        vid = store.reader_order("s1", "alice")[0]
        resp = client.post("/v1/ratings", json={
            "study_id": "s1", "reader_id": "alice", "volume_id": vid,
            "category": "realistic_appearance", "option": "E"})
        assert resp.status_code == 422

    def test_unknown_references_404(self, client, store):
        make_study(store)
        assert client.get("/v1/studies/nope/results").status_code == 404
        assert client.get("/v1/volumes/ghost/meta").status_code == 404
        resp = client.post("/v1/ratings", json={
            "study_id": "s1", "reader_id": "alice", "volume_id": "ghost",
            "category": "realistic_appearance", "option": "A"})
        assert resp.status_code == 404

    def test_export_csv(self, client, store):
        make_study(store)
        vid = store.reader_order("s1", "bob")[0]
        client.post("/v1/ratings", json={
            "study_id": "s1", "reader_id": "bob", "volume_id": vid,
            "category": "slice_consistency", "option": "B"})
        resp = client.get("/v1/studies/s1/export.csv")
        lines = resp.text.strip().splitlines()
        assert lines[0] == "study_id,reader_id,volume_id,category,option,timestamp"
        assert len(lines) == 2
        assert lines[1].startswith(f"s1,bob,{vid},slice_consistency,B")

    def test_token_auth_when_configured(self, store):
        make_study(store)
        client = TestClient(create_app(store, token="hunter2"))
        assert client.get("/v1/studies/s1").status_code == 401
        ok = client.get("/v1/studies/s1", headers={"Authorization": "Bearer hunter2"})
        assert ok.status_code == 200
