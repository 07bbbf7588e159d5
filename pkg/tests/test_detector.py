"""Tests for catch_prolong.detector."""

import json
import math

import numpy as np
import pytest
from scipy.optimize import brentq

from catch_prolong.detector import (
    FAKE_TRACK_ID,
    DetectorConfig,
    EventFileError,
    GenerationConfig,
    PlaneUnreachableError,
    event_seed,
    generate_event,
    load_event_file,
    project_track,
    read_events,
    station_statistics,
    write_events,
)
from tests.track_fixtures import clean_detector, fixed_tracks, track


# -- Geometry ---------------------------------------------------------------------------

def test_default_detector_geometry():
    det = DetectorConfig()
    assert det.n_stations == 5
    assert det.max_length == 6
    assert det.half_extent_x[0] == 32.0
    assert det.half_extent_y[0] == 20.5
    assert det.half_extent_x[4] == pytest.approx(32.0 * 110.0 / 30.0)
    assert det.station_area(0) == pytest.approx(64.0 * 41.0)


@pytest.mark.parametrize("kwargs", [
    {"n_stations": 1, "station_z": (30.0,)},
    {"station_z": (30.0, 50.0, 50.0, 90.0, 110.0)},
    {"station_z": (30.0, 50.0, 70.0)},
    {"smear_sigma": -1.0},
    {"fake_mode": "sparkles"},
    {"half_extent_x": (1.0, 1.0, 0.0, 1.0, 1.0)},
])
def test_detector_rejects_invalid_geometry(kwargs):
    with pytest.raises(ValueError):
        DetectorConfig(**kwargs)


def test_detector_mapping_round_trip():
    det = DetectorConfig(smear_sigma=0.1, fake_mode="uniform")
    assert DetectorConfig.from_mapping(det.to_mapping()) == det


# -- Track projection ---------------------------------------------------------------------

def test_project_straight_track_limit():
    x, y = project_track(track(0, kappa=1e-12, phi0=0.0, ty=0.1), 50.0)
    # sagitta of a near-straight arc: kappa * z^2 / 2
    assert x == pytest.approx(1e-12 * 50.0 ** 2 / 2, abs=1e-12)
    assert y == pytest.approx(5.0, abs=1e-12)


def test_project_near_target_goes_to_origin():
    x, y = project_track(track(0, kappa=0.003, phi0=0.4, ty=0.3), 1e-9)
    assert abs(x) < 1e-8
    assert abs(y) < 1e-8


def test_project_matches_arc_length_root_finder():
    kappa, phi0, ty, z = 0.002, 0.05, 0.2, 70.0

    def z_of_s(s):
        return (math.sin(phi0 + kappa * s) - math.sin(phi0)) / kappa - z

    s = brentq(z_of_s, 0.0, 200.0, xtol=1e-14, rtol=1e-15)
    x_oracle = (math.cos(phi0) - math.cos(phi0 + kappa * s)) / kappa

    x, y = project_track(track(0, kappa=kappa, phi0=phi0, ty=ty), z)
    assert x == pytest.approx(x_oracle, abs=1e-9)
    assert y == pytest.approx(ty * z, abs=1e-12)


def test_project_negative_curvature_mirrors():
    x_pos, _ = project_track(track(0, kappa=0.003, phi0=0.2), 90.0)
    x_neg, _ = project_track(track(0, kappa=-0.003, phi0=-0.2), 90.0)
    assert x_neg == pytest.approx(-x_pos, abs=1e-12)


def test_project_unreachable_plane():
    # radius 20 cm: the circle never gets past z = 20
    with pytest.raises(PlaneUnreachableError):
        project_track(track(3, kappa=0.05, phi0=0.0), 30.0)


def test_project_rejects_non_positive_z():
    with pytest.raises(ValueError):
        project_track(track(0), 0.0)


# -- Generation -------------------------------------------------------------------------------

def test_invalid_ranges_rejected_before_sampling():
    with pytest.raises(ValueError):
        generate_event(DetectorConfig(), GenerationConfig(kappa_max=0.01), seed=1)
    with pytest.raises(ValueError):
        generate_event(DetectorConfig(), GenerationConfig(n_tracks_min=5, n_tracks_max=4), seed=1)


def test_empty_event():
    event = generate_event(clean_detector(), fixed_tracks(0), seed=3)
    assert event.hits == []
    assert event.tracks == []


def test_noiseless_hits_lie_on_projection():
    det = clean_detector()
    event = generate_event(det, fixed_tracks(1), seed=11)
    assert len(event.hits) == det.n_stations
    params = event.tracks[0]
    for hit in event.hits:
        x, y = project_track(params, hit.z)
        assert abs(hit.x - x) < 1e-9
        assert abs(hit.y - y) < 1e-9
        assert hit.z == det.station_z[hit.station]
        assert hit.track_id == params.track_id


def test_strip_crossing_fake_count():
    det = DetectorConfig(fake_mode="strip-crossing")
    gen = fixed_tracks(25, fake_fraction=1.0)
    event = generate_event(det, gen, seed=5)
    for station in range(det.n_stations):
        on_station = [h for h in event.hits if h.station == station]
        k = sum(not h.is_fake for h in on_station)
        fakes = sum(h.is_fake for h in on_station)
        assert fakes == k * (k - 1)
        assert fakes >= 10 * k


def test_strip_crossing_fakes_combine_two_true_hits():
    det = DetectorConfig(smear_sigma=0.0, fake_mode="strip-crossing")
    event = generate_event(det, fixed_tracks(8, fake_fraction=0.5), seed=9)
    for station in range(det.n_stations):
        true_hits = [h for h in event.hits if h.station == station and not h.is_fake]
        for fake in (h for h in event.hits if h.station == station and h.is_fake):
            assert fake.track_id == FAKE_TRACK_ID
            x_owner = [i for i, h in enumerate(true_hits) if h.x == fake.x]
            y_owner = [j for j, h in enumerate(true_hits) if h.y == fake.y]
            assert len(x_owner) == 1 and len(y_owner) == 1
            assert x_owner[0] != y_owner[0]


def test_uniform_and_none_fake_modes():
    gen = fixed_tracks(6, fake_fraction=0.5)
    uniform = generate_event(DetectorConfig(fake_mode="uniform"), gen, seed=2)
    none = generate_event(DetectorConfig(fake_mode="none"), gen, seed=2)
    assert all(not h.is_fake for h in none.hits)
    for station in range(5):
        k = sum(1 for h in uniform.hits if h.station == station and not h.is_fake)
        fakes = sum(1 for h in uniform.hits if h.station == station and h.is_fake)
        assert fakes == round(0.5 * k * (k - 1))


def test_hits_contained_in_station():
    det = DetectorConfig()
    for seed in range(5):
        event = generate_event(det, GenerationConfig(), seed=seed)
        for hit in event.hits:
            assert abs(hit.x) <= det.half_extent_x[hit.station]
            assert abs(hit.y) <= det.half_extent_y[hit.station]
            assert hit.z == det.station_z[hit.station]


def test_event_truth_consistency():
    event = generate_event(DetectorConfig(), GenerationConfig(), seed=4)
    ids = {t.track_id for t in event.tracks}
    seen = set()
    for hit in event.hits:
        if hit.is_fake:
            continue
        assert hit.track_id in ids
        assert (hit.track_id, hit.station) not in seen
        seen.add((hit.track_id, hit.station))
    assert 20 <= len(event.tracks) <= 30


def test_generation_is_deterministic(tmp_path):
    det, gen = DetectorConfig(), GenerationConfig()
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_events(str(a), [generate_event(det, gen, seed=42, event_id=7)], det)
    write_events(str(b), [generate_event(det, gen, seed=42, event_id=7)], det)
    assert a.read_bytes() == b.read_bytes()


def test_event_seed_differs_per_event():
    seeds = {event_seed(1, i) for i in range(100)}
    assert len(seeds) == 100
    assert event_seed(1, 5) == event_seed(1, 5)
    assert event_seed(1, 5) != event_seed(2, 5)


def test_station_statistics_ratio():
    det = DetectorConfig()
    events = [generate_event(det, fixed_tracks(25, fake_fraction=1.0), seed=s, event_id=s) for s in range(3)]
    stats = station_statistics(det, events)
    assert len(stats) == det.n_stations
    for row in stats:
        # k(k-1) fakes per k true hits, summed over events
        assert row["fake_ratio"] >= 20.0
        assert row["true_hits"] > 0


# -- Event file -------------------------------------------------------------------------------

def test_empty_event_list_writes_header_only(tmp_path):
    path = tmp_path / "events.jsonl"
    write_events(str(path), [], DetectorConfig())
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["schema"] == "cp-events"
    assert read_events(str(path)) == []


def test_event_file_round_trip(tmp_path):
    det = DetectorConfig()
    gen = GenerationConfig(n_tracks_min=3, n_tracks_max=8)
    events = [generate_event(det, gen, seed=event_seed(0, i), event_id=i) for i in range(100)]
    path = tmp_path / "events.jsonl"
    write_events(str(path), events, det, provenance={"seed": 0})

    det_back, events_back = load_event_file(str(path))
    assert det_back == det
    assert events_back == events


def test_missing_track_id_names_the_line(tmp_path):
    det = DetectorConfig()
    path = tmp_path / "events.jsonl"
    write_events(str(path), [generate_event(det, fixed_tracks(2), seed=1)], det)
    header, record = path.read_text(encoding="utf-8").splitlines()
    event = json.loads(record)
    del event["hits"][0]["track_id"]
    path.write_text(header + "\n" + json.dumps(event) + "\n", encoding="utf-8")

    with pytest.raises(EventFileError) as excinfo:
        read_events(str(path))
    assert excinfo.value.line_number == 2
    assert "line 2" in str(excinfo.value)
    assert "track_id" in str(excinfo.value)


def test_unknown_version_rejected(tmp_path):
    path = tmp_path / "events.jsonl"
    write_events(str(path), [], DetectorConfig())
    header = json.loads(path.read_text(encoding="utf-8"))
    header["version"] = 99
    path.write_text(json.dumps(header) + "\n", encoding="utf-8")
    with pytest.raises(EventFileError):
        read_events(str(path))


def test_malformed_json_line(tmp_path):
    path = tmp_path / "events.jsonl"
    write_events(str(path), [], DetectorConfig())
    with open(path, "a", encoding="utf-8") as f:
        f.write("{not json\n")
    with pytest.raises(EventFileError) as excinfo:
        read_events(str(path))
    assert excinfo.value.line_number == 2


def test_coordinates_and_lookup():
    event = generate_event(clean_detector(), fixed_tracks(3), seed=8)
    coords = event.coordinates()
    assert coords.shape == (len(event.hits), 3)
    lookup = event.true_hit_lookup()
    for (track_id, station), index in lookup.items():
        assert event.hits[index].track_id == track_id
        assert event.hits[index].station == station
    assert np.array_equal(np.sort(np.concatenate([event.hits_on_station(s) for s in range(5)])),
                          np.arange(len(event.hits)))
