"""Tests for catch_prolong.files."""

import json

import pytest

from catch_prolong.detector import DetectorConfig, generate_event
from catch_prolong.files import (
    CANDIDATE_SCHEMA,
    CandidateRecord,
    HistoryWriter,
    StageFileError,
    join_candidates,
    read_candidates,
    read_history,
    read_jsonl,
    read_reconstructions,
    write_candidates,
    write_jsonl,
    write_reconstructions,
)
from catch_prolong.follower import ReconTrack
from catch_prolong.seed_search import GHOST, TRUE_TRACK, SearchWindow, run_seed_search
from tests.track_fixtures import fixed_tracks


@pytest.fixture
def event():
    return generate_event(DetectorConfig(), fixed_tracks(6, fake_fraction=0.5), seed=3, event_id=4)


def test_candidates_round_trip(tmp_path, event):
    candidates = run_seed_search(event, DetectorConfig(), SearchWindow())
    path = tmp_path / "candidates.jsonl"
    write_candidates(str(path), candidates, {"seed": 3})

    header, records = read_candidates(str(path))
    assert header["schema"] == CANDIDATE_SCHEMA
    assert header["seed"] == 3
    joined = join_candidates(records, {4: event})
    assert [c.hit_refs for c in joined] == [c.hit_refs for c in candidates]
    assert [c.label for c in joined] == [c.label for c in candidates]
    for a, b in zip(joined, candidates):
        assert (a.points == b.points).all()
        assert a.track_ids == b.track_ids


def test_missing_label_names_the_line(tmp_path):
    path = tmp_path / "candidates.jsonl"
    write_jsonl(str(path), CANDIDATE_SCHEMA, {}, [
        {"event_id": 0, "hit_refs": [0, 1], "label": GHOST},
        {"event_id": 0, "hit_refs": [0, 1]},
    ])
    with pytest.raises(StageFileError, match="label") as excinfo:
        read_candidates(str(path))
    assert excinfo.value.line_number == 3


def test_unknown_label_rejected(tmp_path):
    path = tmp_path / "candidates.jsonl"
    write_jsonl(str(path), CANDIDATE_SCHEMA, {}, [{"event_id": 0, "hit_refs": [0], "label": "maybe"}])
    with pytest.raises(StageFileError):
        read_candidates(str(path))


def test_join_checks_truth(event):
    candidates = run_seed_search(event, DetectorConfig(), SearchWindow())
    true = next(c for c in candidates if c.label == TRUE_TRACK)
    with pytest.raises(StageFileError, match="labelled"):
        join_candidates([CandidateRecord(event_id=4, hit_refs=true.hit_refs, label=GHOST)], {4: event})
    with pytest.raises(StageFileError, match="unknown event"):
        join_candidates([CandidateRecord(event_id=9, hit_refs=true.hit_refs, label=TRUE_TRACK)], {4: event})
    with pytest.raises(StageFileError, match="outside"):
        join_candidates([CandidateRecord(event_id=4, hit_refs=(10_000,), label=GHOST)], {4: event})


def test_schema_and_version_checked(tmp_path):
    path = tmp_path / "recon.jsonl"
    write_jsonl(str(path), CANDIDATE_SCHEMA, {}, [])
    with pytest.raises(StageFileError, match="cp-recon"):
        read_reconstructions(str(path))

    path.write_text(json.dumps({"schema": CANDIDATE_SCHEMA, "version": 2}) + "\n", encoding="utf-8")
    with pytest.raises(StageFileError, match="version"):
        read_candidates(str(path))


def test_missing_and_empty_files(tmp_path):
    with pytest.raises(StageFileError, match="missing"):
        read_jsonl(str(tmp_path / "nope.jsonl"), CANDIDATE_SCHEMA)
    empty = tmp_path / "empty.jsonl"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(StageFileError):
        read_jsonl(str(empty), CANDIDATE_SCHEMA)


def test_bad_json_line(tmp_path):
    path = tmp_path / "candidates.jsonl"
    write_jsonl(str(path), CANDIDATE_SCHEMA, {}, [])
    with open(path, "a", encoding="utf-8") as f:
        f.write("[1, 2\n")
    with pytest.raises(StageFileError) as excinfo:
        read_candidates(str(path))
    assert excinfo.value.line_number == 2


def test_reconstructions_round_trip(tmp_path):
    recon = [(0, [ReconTrack((1, 5, 9, 12, 20), 0.875)]), (1, [])]
    path = tmp_path / "recon.jsonl"
    write_reconstructions(str(path), recon, {"checkpoint": "model.cpnet"})
    header, back = read_reconstructions(str(path))
    assert header["checkpoint"] == "model.cpnet"
    assert back == {0: [ReconTrack((1, 5, 9, 12, 20), 0.875)], 1: []}


class _Record:
    def __init__(self, epoch):
        self.epoch = epoch

    def to_record(self):
        return {"epoch": self.epoch, "train_loss": 0.5 / self.epoch}


def test_history_writer_appends(tmp_path):
    path = tmp_path / "history.jsonl"
    writer = HistoryWriter(str(path), {"seed": 1})
    header, records = read_history(str(path))
    assert records == []
    for epoch in (1, 2, 3):
        writer.on_epoch(_Record(epoch))
    header, records = read_history(str(path))
    assert writer.count == 3
    assert header["seed"] == 1
    assert [r["epoch"] for r in records] == [1, 2, 3]


def test_provenance_header_keeps_stage_version(tmp_path, event):
    from catch_prolong.config import load_run_config
    from catch_prolong.main import provenance

    run = load_run_config(None, seed=3)
    candidates = run_seed_search(event, DetectorConfig(), SearchWindow())
    path = tmp_path / "candidates.jsonl"
    write_candidates(str(path), candidates, provenance(run, "seed", events="events.jsonl"))
    header, records = read_candidates(str(path))
    assert header["version"] == 1
    assert header["package_version"]
    assert header["inputs"] == {"events": "events.jsonl"}
    assert len(records) == len(candidates)

    write_jsonl(str(path), CANDIDATE_SCHEMA, {"version": "0.1.0", "schema": "other"}, [])
    header, _ = read_candidates(str(path))
    assert (header["schema"], header["version"]) == (CANDIDATE_SCHEMA, 1)
