"""
JSON Lines stage files passed between subcommands: candidates,
reconstructions and training history. Each starts with a header line
naming its schema and version and carrying the run's provenance.
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from catch_prolong.detector import Event
from catch_prolong.follower import ReconTrack
from catch_prolong.seed_search import LABELS, TARGET, UNLABELLED, TrackCandidate, label_for

logger = logging.getLogger("CatchProlong")

CANDIDATE_SCHEMA = "cp-candidates"
RECON_SCHEMA = "cp-recon"
HISTORY_SCHEMA = "cp-history"
STAGE_VERSION = 1


class StageFileError(ValueError):
    """A stage file is missing, malformed, or of the wrong schema or version."""

    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        self.path = path
        self.line_number = line_number
        where = path or ""
        if line_number is not None:
            where = f"{where}:{line_number}" if where else f"line {line_number}"
        super().__init__(f"{where}: {message}" if where else message)


def write_jsonl(path: str, schema: str, header: Dict[str, Any], records: Iterable[Dict[str, Any]]) -> int:
    """Write a header line plus one record per line; returns the record count."""
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({**header, "schema": schema, "version": STAGE_VERSION}, sort_keys=True) + "\n")
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
            count += 1
    return count


def read_jsonl(path: str, schema: str) -> Tuple[Dict[str, Any], List[Tuple[int, Dict[str, Any]]]]:
    """
    Read a stage file.

    Returns:
        (header, [(line number, record), ...]).

    Raises:
        StageFileError: missing file, bad JSON, or a schema/version mismatch.
    """
    if not os.path.exists(path):
        raise StageFileError(f"missing input file ({schema})", path)
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise StageFileError("empty file (no header)", path, 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise StageFileError(f"invalid header: {e}", path, 1) from e
    if not isinstance(header, dict) or header.get("schema") != schema:
        found = header.get("schema") if isinstance(header, dict) else None
        raise StageFileError(f"expected a {schema} file, found {found!r}", path, 1)
    if header.get("version") != STAGE_VERSION:
        raise StageFileError(f"unsupported {schema} version {header.get('version')!r}", path, 1)

    records = []
    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise StageFileError(f"invalid JSON: {e}", path, line_number) from e
        if not isinstance(record, dict):
            raise StageFileError("record is not an object", path, line_number)
        records.append((line_number, record))
    return header, records


# -- Candidates -----------------------------------------------------------------------------

@dataclass
class CandidateRecord:
    event_id: int
    hit_refs: Tuple[int, ...]
    label: str


def write_candidates(path: str, candidates: Sequence[TrackCandidate], header: Dict[str, Any]) -> None:
    records = (
        {"event_id": c.event_id, "hit_refs": list(c.hit_refs), "label": c.label}
        for c in candidates
    )
    count = write_jsonl(path, CANDIDATE_SCHEMA, header, records)
    logger.info(f"Wrote {count} candidates to {path}")


def read_candidates(path: str) -> Tuple[Dict[str, Any], List[CandidateRecord]]:
    """Candidate records; every record must carry a known label."""
    header, lines = read_jsonl(path, CANDIDATE_SCHEMA)
    records = []
    for line_number, record in lines:
        for key in ("event_id", "hit_refs", "label"):
            if key not in record:
                raise StageFileError(f"candidate is missing field '{key}'", path, line_number)
        if record["label"] not in LABELS:
            raise StageFileError(f"unknown label {record['label']!r}", path, line_number)
        records.append(CandidateRecord(event_id=int(record["event_id"]),
                                       hit_refs=tuple(int(r) for r in record["hit_refs"]),
                                       label=record["label"]))
    logger.info(f"Read {len(records)} candidates from {path}")
    return header, records


def join_candidates(records: Sequence[CandidateRecord], events: Mapping[int, Event]) -> List[TrackCandidate]:
    """
    Rebuild candidate points and hit truth from the event file.

    Raises:
        StageFileError: a record names an unknown event or hit, or its
            label disagrees with the hit truth.
    """
    candidates = []
    coords_cache: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    for i, record in enumerate(records):
        if record.event_id not in events:
            raise StageFileError(f"candidate {i} refers to unknown event {record.event_id}")
        if record.event_id not in coords_cache:
            event = events[record.event_id]
            coords_cache[record.event_id] = (event.coordinates(), event.track_ids())
        coords, ids = coords_cache[record.event_id]
        refs = np.asarray(record.hit_refs, dtype=np.int64)
        if len(refs) and (refs.min() < 0 or refs.max() >= len(coords)):
            raise StageFileError(f"candidate {i} refers to a hit outside event {record.event_id}")
        track_ids = tuple(int(t) for t in ids[refs])
        if record.label != UNLABELLED and record.label != label_for(track_ids):
            raise StageFileError(f"candidate {i} is labelled {record.label!r} but its hits say otherwise")
        points = np.vstack([np.array([TARGET]), coords[refs].reshape(-1, 3)])
        candidates.append(TrackCandidate(points=points, hit_refs=record.hit_refs, label=record.label,
                                         event_id=record.event_id, track_ids=track_ids))
    return candidates


# -- Reconstructions -------------------------------------------------------------------------

def write_reconstructions(path: str, recon: Sequence[Tuple[int, Sequence[ReconTrack]]],
                          header: Dict[str, Any]) -> None:
    records = (
        {
            "event_id": event_id,
            "tracks": [{"hit_refs": list(t.hit_refs), "probability": t.probability} for t in tracks],
        }
        for event_id, tracks in recon
    )
    count = write_jsonl(path, RECON_SCHEMA, header, records)
    logger.info(f"Wrote reconstructions of {count} events to {path}")


def read_reconstructions(path: str) -> Tuple[Dict[str, Any], Dict[int, List[ReconTrack]]]:
    header, lines = read_jsonl(path, RECON_SCHEMA)
    recon = {}
    for line_number, record in lines:
        try:
            recon[int(record["event_id"])] = [
                ReconTrack(hit_refs=tuple(int(r) for r in t["hit_refs"]), probability=float(t["probability"]))
                for t in record["tracks"]
            ]
        except (KeyError, TypeError) as e:
            raise StageFileError(f"malformed reconstruction record: {e}", path, line_number) from e
    return header, recon


# -- History ------------------------------------------------------------------------------------

class HistoryWriter:
    """
    Epoch listener for the training topic: logs each record and appends it
    to a history file whose header is written on construction.
    """

    def __init__(self, path: str, header: Dict[str, Any]):
        self.path = path
        self.count = 0
        write_jsonl(path, HISTORY_SCHEMA, header, [])

    def on_epoch(self, record) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record.to_record(), sort_keys=True) + "\n")
        self.count += 1
        logger.debug(f"History: epoch {record.epoch} appended to {self.path}")


def read_history(path: str) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    header, lines = read_jsonl(path, HISTORY_SCHEMA)
    return header, [record for _, record in lines]
