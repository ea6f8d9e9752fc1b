"""HTTP service for blinded reader studies.

All endpoints live under /v1. Reader-facing responses never carry dataset
tags, generator identity or any other provenance: readers see volume ids,
slice images, and the rating instrument only. Aggregated results (with
dataset breakdowns) are served from the results endpoint for the study owner.
"""

from __future__ import annotations

import io
from functools import lru_cache
from pathlib import Path
from typing import Literal

from fastapi import Depends, FastAPI, HTTPException, Query, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from ..volume import load_volume
from .png import encode_gray_png, window_to_bytes
from .store import CATEGORIES, OPTIONS, RatingRecord, StudyStore


class StudyCreateRequest(BaseModel):
    study_id: str
    volume_ids: list[str]
    readers: list[str]
    seed: int = 0
    labels: dict[str, dict[str, str]] | None = None


class RatingRequest(BaseModel):
    study_id: str
    reader_id: str
    volume_id: str
    category: Literal["realistic_appearance", "slice_consistency", "anatomical_correctness"]
    option: Literal["A", "B", "C", "D"]


def create_app(store: StudyStore, token: str | None = None,
               ui_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="reader-study server")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"])

    def check_auth(authorization: str | None) -> None:
        if token is None:
            return
        if authorization != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or invalid reader token")

    from fastapi import Header

    def auth(authorization: str | None = Header(default=None)) -> None:
        check_auth(authorization)

    @lru_cache(maxsize=16)
    def cached_volume(volume_id: str):
        return load_volume(store.volume_path(volume_id))

    @app.post("/v1/studies", dependencies=[Depends(auth)])
    def create_study(req: StudyCreateRequest):
        try:
            definition = store.create_study(req.study_id, req.volume_ids, req.readers,
                                            req.seed, req.labels)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {
            "study_id": definition.study_id,
            "n_volumes": len(definition.volume_ids),
            "readers": list(definition.readers),
            "categories": list(CATEGORIES),
            "options": list(OPTIONS),
        }

    @app.get("/v1/studies/{study_id}", dependencies=[Depends(auth)])
    def get_study(study_id: str):
        try:
            definition = store.study(study_id)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return {
            "study_id": definition.study_id,
            "n_volumes": len(definition.volume_ids),
            "readers": list(definition.readers),
            "categories": list(CATEGORIES),
            "options": list(OPTIONS),
            "labels": definition.labels,
        }

    @app.get("/v1/studies/{study_id}/next", dependencies=[Depends(auth)])
    def next_volume(study_id: str, reader: str = Query(...)):
        try:
            return store.next_volume(study_id, reader)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.get("/v1/studies/{study_id}/answers", dependencies=[Depends(auth)])
    def volume_answers(study_id: str, reader: str = Query(...), volume: str = Query(...)):
        """Stored per-category options for one (reader, volume): lets the UI
        restore in-progress answers after a refresh."""
        try:
            return {"volume_id": volume, "answers": store.volume_answers(study_id, reader, volume)}
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.get("/v1/volumes/{volume_id}/meta", dependencies=[Depends(auth)])
    def volume_meta(volume_id: str):
        try:
            vol = cached_volume(volume_id)
        except (KeyError, FileNotFoundError) as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        h, w, d = vol.shape
        # deliberately no dataset / provenance fields: readers stay blinded
        return {"volume_id": volume_id, "shape": [h, w, d], "depth": d}

    @app.get("/v1/volumes/{volume_id}/slices/{k}.png", dependencies=[Depends(auth)])
    def volume_slice(volume_id: str, k: int, window: str | None = Query(default=None)):
        try:
            vol = cached_volume(volume_id)
        except (KeyError, FileNotFoundError) as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        if not 0 <= k < vol.shape[2]:
            raise HTTPException(status_code=404,
                                detail=f"slice {k} out of range [0, {vol.shape[2]})")
        lo, hi = -1.0, 1.0
        if window is not None:
            try:
                lo, hi = (float(part) for part in window.split(","))
            except ValueError:
                raise HTTPException(status_code=422, detail="window must be 'lo,hi'")
            if hi <= lo:
                raise HTTPException(status_code=422, detail="window needs lo < hi")
        png = encode_gray_png(window_to_bytes(vol.data[:, :, k], lo, hi))
        return Response(content=png, media_type="image/png")

    @app.post("/v1/ratings", dependencies=[Depends(auth)])
    def submit_rating(req: RatingRequest):
        record = RatingRecord(study_id=req.study_id, reader_id=req.reader_id,
                              volume_id=req.volume_id, category=req.category,
                              option=req.option)
        try:
            stored = store.submit_rating(record)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return {"status": "stored", "timestamp": stored.timestamp}

    @app.get("/v1/studies/{study_id}/results", dependencies=[Depends(auth)])
    def results(study_id: str):
        try:
            report = store.aggregate(study_id)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return {
            "study_id": study_id,
            "total": report.total,
            "counts": report.counts,
            "per_reader": report.per_reader,
            "threshold_tally": report.threshold_tally,
        }

    @app.get("/v1/studies/{study_id}/export.csv", dependencies=[Depends(auth)])
    def export_csv(study_id: str):
        try:
            records = store.ratings(study_id)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        buf = io.StringIO()
        buf.write("study_id,reader_id,volume_id,category,option,timestamp\n")
        for r in records:
            buf.write(f"{r.study_id},{r.reader_id},{r.volume_id},{r.category},"
                      f"{r.option},{r.timestamp}\n")
        return Response(content=buf.getvalue(), media_type="text/csv")

    if ui_dir is not None:
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def register_volume_dir(store: StudyStore, directory: str | Path, dataset: str = "") -> int:
    """Register every native volume in a directory; returns the count."""
    directory = Path(directory)
    count = 0
    for raw in sorted(directory.glob("*.f32raw")):
        store.register_volume(raw.stem, raw, dataset)
        count += 1
    return count
