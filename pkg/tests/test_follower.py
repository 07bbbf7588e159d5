"""Tests for catch_prolong.follower."""

import itertools

import numpy as np
import pytest

from catch_prolong.detector import DetectorConfig, Event, GenerationConfig, generate_event
from catch_prolong.follower import (
    FollowConfig,
    ReconTrack,
    ellipse_norm2,
    follow_event,
    gate_hits,
    point_in_ellipse,
    resolve_conflicts,
)
from catch_prolong.metrics import track_efficiency
from catch_prolong.model import CheckpointError, Ellipse
from catch_prolong.seed_search import CandidateBatch, StationHits, reconstructable_tracks
from tests.track_fixtures import ExtrapolatingNet, clean_event, event_from_points, reference_run, tiny_net


# -- Ellipse membership ------------------------------------------------------------------------

def test_point_in_ellipse_center_and_boundary():
    ellipse = Ellipse(cx=1.0, cy=2.0, r1=0.5, r2=0.25)
    assert point_in_ellipse((1.0, 2.0), ellipse)
    assert point_in_ellipse((1.5, 2.0), ellipse)
    assert point_in_ellipse((1.0, 1.75), (1.0, 2.0, 0.5, 0.25))
    assert not point_in_ellipse((1.5 + 1e-9, 2.0), ellipse)
    assert not point_in_ellipse((1.4, 2.2), ellipse)


def test_point_in_ellipse_matches_closed_form():
    rng = np.random.default_rng(0)
    ellipse = Ellipse(cx=-3.0, cy=4.0, r1=2.0, r2=0.7)
    points = rng.uniform(-6.0, 6.0, size=(20000, 2)) + np.array([-3.0, 4.0])
    for x, y in points[:2000]:
        expected = ((x + 3.0) / 2.0) ** 2 + ((y - 4.0) / 0.7) ** 2 <= 1.0
        assert point_in_ellipse((x, y), ellipse) == expected
    norm2 = ellipse_norm2(points, np.array([-3.0, 4.0]), np.array([2.0, 0.7]))
    assert np.array_equal(norm2 <= 1.0, ((points[:, 0] + 3.0) / 2.0) ** 2 + ((points[:, 1] - 4.0) / 0.7) ** 2 <= 1.0)


# -- Conflicts ------------------------------------------------------------------------------------

def test_resolve_conflicts_keeps_more_probable():
    a = ReconTrack(hit_refs=(0, 2, 4), probability=0.9)
    b = ReconTrack(hit_refs=(1, 2, 5), probability=0.8)
    c = ReconTrack(hit_refs=(1, 3, 5), probability=0.7)
    assert resolve_conflicts([b, a, c]) == [a, c]


def test_resolve_conflicts_ties_go_to_first():
    a = ReconTrack(hit_refs=(0, 1), probability=0.6)
    b = ReconTrack(hit_refs=(1, 2), probability=0.6)
    assert resolve_conflicts([a, b]) == [a]
    assert resolve_conflicts([b, a]) == [b]
    assert resolve_conflicts([]) == []


def test_resolve_conflicts_properties():
    rng = np.random.default_rng(4)
    for _ in range(50):
        tracks = [ReconTrack(hit_refs=tuple(rng.choice(30, size=4, replace=False).tolist()),
                             probability=float(rng.uniform())) for _ in range(12)]
        kept = resolve_conflicts(tracks)
        for x, y in itertools.combinations(kept, 2):
            assert not set(x.hit_refs) & set(y.hit_refs)
        for track in tracks:
            if track in kept:
                continue
            assert any(set(track.hit_refs) & set(k.hit_refs) and k.probability >= track.probability for k in kept)


# -- Gating ---------------------------------------------------------------------------------------

def _gating_setup(seed=1, n_cands=20, n_hits=60):
    rng = np.random.default_rng(seed)
    station = StationHits(station=2, coords=np.column_stack([rng.uniform(-10, 10, n_hits),
                                                             rng.uniform(-10, 10, n_hits),
                                                             np.full(n_hits, 70.0)]),
                          refs=np.arange(100, 100 + n_hits))
    cands = CandidateBatch(points=np.zeros((n_cands, 3, 3)), refs=np.zeros((n_cands, 2), dtype=np.int64))
    centers = rng.uniform(-10, 10, size=(n_cands, 2))
    semiaxes = rng.uniform(0.5, 3.0, size=(n_cands, 2))
    return station, cands, centers, semiaxes


def test_gate_hits_matches_exhaustive_check():
    station, cands, centers, semiaxes = _gating_setup()
    source, local = gate_hits(cands, centers, semiaxes, station)
    got = set(zip(source.tolist(), local.tolist()))
    expected = {
        (i, j)
        for i in range(len(cands))
        for j in range(len(station))
        if point_in_ellipse(station.coords[j, :2], tuple(centers[i]) + tuple(semiaxes[i]))
    }
    assert got == expected
    assert list(source) == sorted(source)


def test_inflating_ellipses_only_adds_pairs():
    station, cands, centers, semiaxes = _gating_setup(seed=2)
    narrow = set(zip(*[a.tolist() for a in gate_hits(cands, centers, semiaxes, station)]))
    wide = set(zip(*[a.tolist() for a in gate_hits(cands, centers, semiaxes * 1.5, station)]))
    assert narrow <= wide


def test_max_branches_keeps_nearest():
    station, cands, centers, semiaxes = _gating_setup(seed=3, n_hits=200)
    full_source, full_local = gate_hits(cands, centers, semiaxes, station)
    source, local = gate_hits(cands, centers, semiaxes, station, max_branches=1)
    assert len(set(source.tolist())) == len(source)
    assert set(source.tolist()) == set(full_source.tolist())
    for i, j in zip(source, local):
        options = full_local[full_source == i]
        norms = ellipse_norm2(station.coords[options, :2], centers[i], semiaxes[i])
        assert np.isclose(ellipse_norm2(station.coords[j, :2], centers[i], semiaxes[i]), norms.min())


def test_gate_hits_empty_inputs():
    station, cands, centers, semiaxes = _gating_setup()
    empty_station = StationHits(station=2, coords=np.zeros((0, 3)), refs=np.zeros(0, dtype=np.int64))
    for args in ((cands, centers, semiaxes, empty_station), (cands.take(slice(0, 0)), centers[:0], semiaxes[:0], station)):
        source, local = gate_hits(*args)
        assert len(source) == 0 and len(local) == 0


# -- Whole events ----------------------------------------------------------------------------------

def test_follow_config_validation():
    for kwargs in ({"prune_threshold": 0.0}, {"accept_threshold": 1.0}, {"ellipse_inflate": 0.5},
                   {"max_branches": 0}):
        with pytest.raises(ValueError):
            FollowConfig(**kwargs)


def test_empty_event_gives_no_tracks():
    det = DetectorConfig()
    net = ExtrapolatingNet(det)
    assert follow_event(event_from_points(0, []), net, FollowConfig(), det) == []
    assert net.calls == []


def test_single_clean_track_is_recovered():
    det = DetectorConfig()
    event = clean_event(n_tracks=1, seed=7)
    tracks = follow_event(event, ExtrapolatingNet(det), FollowConfig(), det)
    assert [t.hit_refs for t in tracks] == reconstructable_tracks(event, det)
    assert tracks[0].probability == pytest.approx(0.9)
    assert tracks[0].length == det.max_length


def test_low_probability_is_rejected():
    det = DetectorConfig()
    event = clean_event(n_tracks=1, seed=7)
    assert follow_event(event, ExtrapolatingNet(det, prob=0.3), FollowConfig(), det) == []
    # pruned before reaching the last station
    net = ExtrapolatingNet(det, prob=0.1)
    assert follow_event(event, net, FollowConfig(), det) == []
    assert max(length for _, length in net.calls) == 3


def test_early_stop_keeps_tracks_missing_last_station():
    det = DetectorConfig()
    full = clean_event(n_tracks=1, seed=7)
    event = Event(event_id=0, hits=[h for h in full.hits if h.station < 4], tracks=full.tracks)
    assert follow_event(event, ExtrapolatingNet(det), FollowConfig(), det) == []
    tracks = follow_event(event, ExtrapolatingNet(det), FollowConfig(allow_early_stop=True), det)
    assert len(tracks) == 1
    assert len(tracks[0].hit_refs) == 4


def test_outputs_are_conflict_free():
    det = DetectorConfig()
    event = generate_event(det, GenerationConfig(n_tracks_min=10, n_tracks_max=10), seed=13)
    tracks = follow_event(event, ExtrapolatingNet(det, radius=1.0), FollowConfig(), det)
    used = [r for t in tracks for r in t.hit_refs]
    assert len(used) == len(set(used))
    for t in tracks:
        assert [event.hits[r].station for r in t.hit_refs] == list(range(det.n_stations))


def test_runs_with_untrained_network():
    det = DetectorConfig()
    event = generate_event(det, GenerationConfig(n_tracks_min=3, n_tracks_max=3), seed=2)
    tracks = follow_event(event, tiny_net(seed=0), FollowConfig(prune_threshold=0.01, accept_threshold=0.01), det)
    assert all(0.0 <= t.probability <= 1.0 for t in tracks)


def test_incompatible_network_rejected():
    det = DetectorConfig()
    other = DetectorConfig(station_z=(20.0, 40.0, 60.0, 80.0, 100.0))
    with pytest.raises(CheckpointError):
        follow_event(clean_event(n_tracks=1), ExtrapolatingNet(other), FollowConfig(), det)


@pytest.mark.slow
def test_trained_network_follows_noiseless_events():
    net = reference_run().net
    det = DetectorConfig()
    events = [clean_event(n_tracks=20, seed=i, event_id=i) for i in range(100)]
    recon = {}
    for event in events:
        tracks = follow_event(event, net, FollowConfig(), det)
        used = [r for t in tracks for r in t.hit_refs]
        assert len(used) == len(set(used))
        recon[event.event_id] = tracks
    assert track_efficiency(det, events, recon).efficiency >= 0.99
