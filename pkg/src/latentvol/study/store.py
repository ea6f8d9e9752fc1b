"""Reader-study persistence on an embedded single-file SQLite store.

Ratings are keyed on (study, reader, volume, category): resubmission
replaces. Writes go through one lock and commit before returning, so an
acknowledged rating is durable and concurrent submissions for distinct keys
never lose data.
"""

from __future__ import annotations

import json
import sqlite3
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from ..rng import rng_stream

CATEGORIES = ("realistic_appearance", "slice_consistency", "anatomical_correctness")
OPTIONS = ("A", "B", "C", "D")

# The rating instrument: category -> option -> full label text shown to readers.
DEFAULT_LABELS: dict[str, dict[str, str]] = {
    "realistic_appearance": {
        "A": "Overall not recognizable as CT/MRI",
        "B": "Overall unrealistic, but generally recognizable as CT/MRI",
        "C": "Overall realistic and only minor unrealistic areas",
        "D": "Can't tell whether fake or not",
    },
    "slice_consistency": {
        "A": "No consistent slices",
        "B": "Only few (up to 3) slices are consistent",
        "C": "Majority of slices (>10) is consistent",
        "D": "All slices are consistent",
    },
    "anatomical_correctness": {
        "A": "Anatomical region not recognizable",
        "B": "Anatomical region recognizable, but major parts of the images "
             "exhibit anatomical incorrectness",
        "C": "Only minor anatomical incorrectness",
        "D": "Anatomical features are correct",
    },
}

_SCHEMA = """
CREATE TABLE IF NOT EXISTS volumes (
    id TEXT PRIMARY KEY,
    path TEXT NOT NULL,
    dataset TEXT NOT NULL DEFAULT ''
);
CREATE TABLE IF NOT EXISTS studies (
    id TEXT PRIMARY KEY,
    seed INTEGER NOT NULL,
    labels TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS readers (
    study_id TEXT NOT NULL,
    reader_id TEXT NOT NULL,
    PRIMARY KEY (study_id, reader_id)
);
CREATE TABLE IF NOT EXISTS orders (
    study_id TEXT NOT NULL,
    reader_id TEXT NOT NULL,
    position INTEGER NOT NULL,
    volume_id TEXT NOT NULL,
    PRIMARY KEY (study_id, reader_id, position)
);
CREATE TABLE IF NOT EXISTS ratings (
    study_id TEXT NOT NULL,
    reader_id TEXT NOT NULL,
    volume_id TEXT NOT NULL,
    category TEXT NOT NULL,
    option TEXT NOT NULL,
    ts TEXT NOT NULL,
    PRIMARY KEY (study_id, reader_id, volume_id, category)
);
"""


@dataclass(frozen=True)
class RatingRecord:
    study_id: str
    reader_id: str
    volume_id: str
    category: str
    option: str
    timestamp: str = ""

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.option not in OPTIONS:
            raise ValueError(f"option must be one of {OPTIONS}, got {self.option!r}")


@dataclass(frozen=True)
class StudyDefinition:
    study_id: str
    volume_ids: tuple[str, ...]
    readers: tuple[str, ...]
    seed: int
    labels: dict = field(default_factory=lambda: DEFAULT_LABELS)


@dataclass(frozen=True)
class AggregateReport:
    """Exact rating counts plus the 'option C or better' tallies."""
    total: int
    counts: dict            # dataset -> category -> option -> count
    per_reader: dict        # reader -> category -> option -> count
    threshold_tally: dict   # category -> count of ratings at option C or D

    def __post_init__(self):
        summed = sum(n for per_cat in self.counts.values()
                     for per_opt in per_cat.values() for n in per_opt.values())
        if summed != self.total:
            raise ValueError(f"count conservation violated: {summed} != {self.total}")


class StudyStore:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._conn = sqlite3.connect(str(self.path), check_same_thread=False)
        self._conn.executescript(_SCHEMA)
        self._conn.commit()

    def close(self) -> None:
        self._conn.close()

    # -- volumes ---------------------------------------------------------------

    def register_volume(self, volume_id: str, path: str | Path, dataset: str = "") -> None:
        with self._lock:
            self._conn.execute(
                "INSERT OR REPLACE INTO volumes (id, path, dataset) VALUES (?, ?, ?)",
                (volume_id, str(path), dataset))
            self._conn.commit()

    def volume_path(self, volume_id: str) -> Path:
        row = self._conn.execute(
            "SELECT path FROM volumes WHERE id = ?", (volume_id,)).fetchone()
        if row is None:
            raise KeyError(f"unknown volume {volume_id!r}")
        return Path(row[0])

    def volume_dataset(self, volume_id: str) -> str:
        row = self._conn.execute(
            "SELECT dataset FROM volumes WHERE id = ?", (volume_id,)).fetchone()
        if row is None:
            raise KeyError(f"unknown volume {volume_id!r}")
        return row[0]

    def list_volumes(self) -> list[str]:
        return [r[0] for r in self._conn.execute("SELECT id FROM volumes ORDER BY id")]

    # -- studies ---------------------------------------------------------------

    def create_study(self, study_id: str, volume_ids: list[str], readers: list[str],
                     seed: int, labels: dict | None = None) -> StudyDefinition:
        """Persist a study with an independent seeded shuffle per reader."""
        if not volume_ids:
            raise ValueError("a study needs at least one volume")
        if not readers:
            raise ValueError("a study needs at least one reader")
        for vid in volume_ids:
            self.volume_path(vid)  # existence check
        labels = labels or DEFAULT_LABELS
        with self._lock:
            exists = self._conn.execute(
                "SELECT 1 FROM studies WHERE id = ?", (study_id,)).fetchone()
            if exists:
                raise ValueError(f"study {study_id!r} already exists")
            self._conn.execute("INSERT INTO studies (id, seed, labels) VALUES (?, ?, ?)",
                               (study_id, seed, json.dumps(labels, sort_keys=True)))
            for reader in readers:
                self._conn.execute("INSERT INTO readers (study_id, reader_id) VALUES (?, ?)",
                                   (study_id, reader))
                order = list(np.array(volume_ids)[
                    rng_stream(seed, f"study.order.{reader}").permutation(len(volume_ids))])
                for pos, vid in enumerate(order):
                    self._conn.execute(
                        "INSERT INTO orders (study_id, reader_id, position, volume_id) "
                        "VALUES (?, ?, ?, ?)", (study_id, reader, pos, str(vid)))
            self._conn.commit()
        return self.study(study_id)

    def study(self, study_id: str) -> StudyDefinition:
        row = self._conn.execute(
            "SELECT seed, labels FROM studies WHERE id = ?", (study_id,)).fetchone()
        if row is None:
            raise KeyError(f"unknown study {study_id!r}")
        readers = tuple(r[0] for r in self._conn.execute(
            "SELECT reader_id FROM readers WHERE study_id = ? ORDER BY reader_id",
            (study_id,)))
        volumes = tuple(r[0] for r in self._conn.execute(
            "SELECT DISTINCT volume_id FROM orders WHERE study_id = ? ORDER BY volume_id",
            (study_id,)))
        return StudyDefinition(study_id=study_id, volume_ids=volumes, readers=readers,
                               seed=row[0], labels=json.loads(row[1]))

    def reader_order(self, study_id: str, reader_id: str) -> list[str]:
        rows = self._conn.execute(
            "SELECT volume_id FROM orders WHERE study_id = ? AND reader_id = ? "
            "ORDER BY position", (study_id, reader_id)).fetchall()
        if not rows:
            if self._conn.execute("SELECT 1 FROM studies WHERE id = ?",
                                  (study_id,)).fetchone() is None:
                raise KeyError(f"unknown study {study_id!r}")
            raise KeyError(f"unknown reader {reader_id!r} in study {study_id!r}")
        return [r[0] for r in rows]

    # -- ratings ---------------------------------------------------------------

    def submit_rating(self, record: RatingRecord) -> RatingRecord:
        """Upsert on (study, reader, volume, category); durable on return."""
        order = self.reader_order(record.study_id, record.reader_id)
        if record.volume_id not in order:
            raise KeyError(f"volume {record.volume_id!r} is not part of study "
                           f"{record.study_id!r}")
        ts = record.timestamp or datetime.now(timezone.utc).isoformat()
        with self._lock:
            self._conn.execute(
                "INSERT INTO ratings (study_id, reader_id, volume_id, category, option, ts) "
                "VALUES (?, ?, ?, ?, ?, ?) "
                "ON CONFLICT (study_id, reader_id, volume_id, category) "
                "DO UPDATE SET option = excluded.option, ts = excluded.ts",
                (record.study_id, record.reader_id, record.volume_id,
                 record.category, record.option, ts))
            self._conn.commit()
        return RatingRecord(record.study_id, record.reader_id, record.volume_id,
                            record.category, record.option, ts)

    def ratings(self, study_id: str) -> list[RatingRecord]:
        self.study(study_id)
        rows = self._conn.execute(
            "SELECT study_id, reader_id, volume_id, category, option, ts FROM ratings "
            "WHERE study_id = ? ORDER BY reader_id, volume_id, category",
            (study_id,)).fetchall()
        return [RatingRecord(*r) for r in rows]

    def rated_categories(self, study_id: str, reader_id: str, volume_id: str) -> list[str]:
        rows = self._conn.execute(
            "SELECT category FROM ratings WHERE study_id = ? AND reader_id = ? "
            "AND volume_id = ?", (study_id, reader_id, volume_id)).fetchall()
        return [r[0] for r in rows]

    def volume_answers(self, study_id: str, reader_id: str, volume_id: str) -> dict[str, str]:
        """The reader's stored option per category for one volume (may be partial)."""
        self.reader_order(study_id, reader_id)
        rows = self._conn.execute(
            "SELECT category, option FROM ratings WHERE study_id = ? AND reader_id = ? "
            "AND volume_id = ?", (study_id, reader_id, volume_id)).fetchall()
        return {r[0]: r[1] for r in rows}

    def next_volume(self, study_id: str, reader_id: str) -> dict:
        """First volume in the reader's order not yet rated in all categories."""
        order = self.reader_order(study_id, reader_id)
        completed = 0
        for vid in order:
            if len(self.rated_categories(study_id, reader_id, vid)) >= len(CATEGORIES):
                completed += 1
            else:
                return {"volume_id": vid, "position": completed,
                        "completed": completed, "total": len(order), "done": False}
        return {"volume_id": None, "position": len(order),
                "completed": completed, "total": len(order), "done": True}

    def aggregate(self, study_id: str) -> AggregateReport:
        """Exact per-(dataset, category, option) counts, per-reader breakdowns,
        and the per-category tally of ratings at option C or better."""
        records = self.ratings(study_id)
        counts: dict = {}
        per_reader: dict = {}
        threshold = {c: 0 for c in CATEGORIES}
        for r in records:
            dataset = self.volume_dataset(r.volume_id)
            counts.setdefault(dataset, {}).setdefault(r.category, {}).setdefault(r.option, 0)
            counts[dataset][r.category][r.option] += 1
            per_reader.setdefault(r.reader_id, {}).setdefault(r.category, {}).setdefault(r.option, 0)
            per_reader[r.reader_id][r.category][r.option] += 1
            if r.option in ("C", "D"):
                threshold[r.category] += 1
        return AggregateReport(total=len(records), counts=counts,
                               per_reader=per_reader, threshold_tally=threshold)
