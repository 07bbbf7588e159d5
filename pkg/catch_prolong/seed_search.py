"""
Directed search for track candidates.

Candidates start at the target, take one hit on station 0 and are
extended one station at a time. A continuation must fall inside a y
window around the straight-line YoZ extrapolation (found by binary search
over the station's hits sorted by y), and must not turn the XoZ segment
direction by more than `dtheta_max`.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from catch_prolong.detector import DetectorConfig, Event, FAKE_TRACK_ID

logger = logging.getLogger("CatchProlong")

TRUE_TRACK = "true-track"
GHOST = "ghost"
UNLABELLED = "unlabelled"
LABELS = (TRUE_TRACK, GHOST, UNLABELLED)

TARGET = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SearchWindow:
    dy: float = 0.6
    dtheta_max: float = 0.08

    def __post_init__(self):
        if not self.dy > 0:
            raise ValueError(f"dy must be positive, got {self.dy}")
        if not 0 < self.dtheta_max < math.pi:
            raise ValueError(f"dtheta_max must lie in (0, pi), got {self.dtheta_max}")


@dataclass
class TrackCandidate:
    """
    Target first, then one hit per consecutive station from station 0.

    `hit_refs` index the event's hit list (the target has none);
    `track_ids` is the truth of each referenced hit.
    """
    points: np.ndarray
    hit_refs: Tuple[int, ...]
    label: str = UNLABELLED
    event_id: int = 0
    track_ids: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if len(self.points) != len(self.hit_refs) + 1:
            raise ValueError("a candidate has exactly one more point than hit references")

    @property
    def length(self) -> int:
        return len(self.points)

    @property
    def is_true(self) -> bool:
        return self.label == TRUE_TRACK


def label_for(track_ids: Sequence[int]) -> str:
    """True track iff every hit is real and all share one track id."""
    if len(track_ids) and track_ids[0] != FAKE_TRACK_ID and all(t == track_ids[0] for t in track_ids):
        return TRUE_TRACK
    return GHOST


# -- Station index ---------------------------------------------------------------------

class StationIndex:
    """Hits of one station sorted by y, for closed-interval range queries."""

    def __init__(self, y: np.ndarray):
        y = np.asarray(y, dtype=np.float64)
        self.order = np.argsort(y, kind="stable")
        self.sorted_y = y[self.order]

    def __len__(self) -> int:
        return len(self.order)

    def bounds(self, lo, hi):
        """Slice bounds into `order` of the hits with lo <= y <= hi."""
        starts = np.searchsorted(self.sorted_y, lo, side="left")
        stops = np.searchsorted(self.sorted_y, hi, side="right")
        return starts, np.maximum(stops, starts)

    def query(self, lo: float, hi: float) -> np.ndarray:
        """Station-local positions of the hits with lo <= y <= hi, in y order."""
        start, stop = self.bounds(lo, hi)
        return self.order[int(start):int(stop)]


def build_station_index(y: Sequence[float]) -> StationIndex:
    return StationIndex(np.asarray(y, dtype=np.float64))


@dataclass
class StationHits:
    """The hits of one station: positions and their indices in the event."""
    station: int
    coords: np.ndarray
    refs: np.ndarray
    index: StationIndex = field(init=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.refs = np.asarray(self.refs, dtype=np.int64)
        self.index = build_station_index(self.coords[:, 1])

    def __len__(self) -> int:
        return len(self.refs)

    @classmethod
    def from_event(cls, event: Event, station: int) -> "StationHits":
        refs = event.hits_on_station(station)
        coords = event.coordinates()[refs] if len(refs) else np.zeros((0, 3))
        return cls(station=station, coords=coords, refs=refs)


@dataclass
class CandidateBatch:
    """Equal-length candidates: points (N, L, 3) and hit refs (N, L-1)."""
    points: np.ndarray
    refs: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    @property
    def length(self) -> int:
        return self.points.shape[1]

    @classmethod
    def seeds(cls, station0: StationHits) -> "CandidateBatch":
        n = len(station0)
        points = np.zeros((n, 2, 3))
        points[:, 1] = station0.coords
        return cls(points=points, refs=station0.refs.reshape(n, 1).copy())

    def take(self, mask_or_index) -> "CandidateBatch":
        return CandidateBatch(points=self.points[mask_or_index], refs=self.refs[mask_or_index])


# -- Admissibility ------------------------------------------------------------------------

def y_window(prev, last, z_next, dy):
    """Closed y interval around the two-point YoZ extrapolation to z_next."""
    dz_last = last[..., 2] - prev[..., 2]
    dz_new = z_next - last[..., 2]
    y_pred = last[..., 1] + (last[..., 1] - prev[..., 1]) * dz_new / dz_last
    return y_pred - dy, y_pred + dy


def rotation_change(prev, last, hit):
    """Change of the XoZ segment direction angle when extending through `hit`."""
    theta_last = np.arctan2(last[..., 0] - prev[..., 0], last[..., 2] - prev[..., 2])
    theta_new = np.arctan2(hit[..., 0] - last[..., 0], hit[..., 2] - last[..., 2])
    return np.abs(theta_new - theta_last)


def is_admissible(prev: np.ndarray, last: np.ndarray, hit: np.ndarray, window: SearchWindow,
                  check_rotation: bool) -> bool:
    """
    The extension predicate for a single hit. The rotation test only applies
    once the candidate has two real segments (length >= 3).
    """
    lo, hi = y_window(prev, last, hit[2], window.dy)
    if not lo <= hit[1] <= hi:
        return False
    if check_rotation:
        return bool(rotation_change(prev, last, hit) <= window.dtheta_max)
    return True


def extend_candidates(cands: CandidateBatch, next_station: StationHits, window: SearchWindow,
                      keep_terminated: bool = False):
    """
    Extend every candidate by each admissible hit of the next station.

    Returns the extended batch (one row per admissible hit, grouped by
    source candidate, hits in y order). With `keep_terminated`, returns
    (extended, terminated) where `terminated` holds the candidates that
    found no admissible hit.

    Raises:
        ValueError: if `next_station` is not the station after the
            candidates' last hit.
    """
    length = cands.length
    if length < 2:
        raise ValueError("candidates need at least the target and one hit")
    if next_station.station != length - 1:
        raise ValueError(
            f"candidates of length {length} continue on station {length - 1}, "
            f"got hits of station {next_station.station}"
        )

    empty = CandidateBatch(points=np.zeros((0, length + 1, 3)), refs=np.zeros((0, length), dtype=np.int64))
    if len(cands) == 0 or len(next_station) == 0:
        return (empty, cands) if keep_terminated else empty

    prev = cands.points[:, -2]
    last = cands.points[:, -1]
    z_next = next_station.coords[0, 2]
    lo, hi = y_window(prev, last, z_next, window.dy)
    starts, stops = next_station.index.bounds(lo, hi)
    counts = stops - starts

    total = int(counts.sum())
    source = np.repeat(np.arange(len(cands)), counts)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    local = next_station.index.order[np.repeat(starts, counts) + offsets]
    hits = next_station.coords[local]

    if length >= 3:
        keep = rotation_change(prev[source], last[source], hits) <= window.dtheta_max
        source, local, hits = source[keep], local[keep], hits[keep]

    extended = CandidateBatch(
        points=np.concatenate([cands.points[source], hits[:, None, :]], axis=1),
        refs=np.concatenate([cands.refs[source], next_station.refs[local][:, None]], axis=1),
    )
    if not keep_terminated:
        return extended
    found = np.zeros(len(cands), dtype=bool)
    found[source] = True
    return extended, cands.take(~found)


# -- Whole-event search -------------------------------------------------------------------

def _to_candidates(batch: CandidateBatch, event: Event, track_ids: np.ndarray) -> List[TrackCandidate]:
    candidates = []
    for points, refs in zip(batch.points, batch.refs):
        truth = tuple(int(t) for t in track_ids[refs])
        candidates.append(TrackCandidate(
            points=points,
            hit_refs=tuple(int(r) for r in refs),
            label=label_for(truth),
            event_id=event.event_id,
            track_ids=truth,
        ))
    return candidates


def run_seed_search(event: Event, detector: DetectorConfig, window: SearchWindow) -> List[TrackCandidate]:
    """All full-length candidates of an event, labelled by hit truth."""
    stations = [StationHits.from_event(event, s) for s in range(detector.n_stations)]
    batch = CandidateBatch.seeds(stations[0])
    for station in stations[1:]:
        if len(batch) == 0:
            break
        batch = extend_candidates(batch, station, window)

    if batch.length != detector.max_length:
        return []
    candidates = _to_candidates(batch, event, event.track_ids() if event.hits else np.zeros(0, dtype=np.int64))
    n_true = sum(c.is_true for c in candidates)
    logger.debug(f"Event {event.event_id}: {n_true} true tracks, {len(candidates) - n_true} ghosts")
    return candidates


def enumerate_candidates_bruteforce(event: Event, detector: DetectorConfig,
                                    window: SearchWindow) -> List[Tuple[int, ...]]:
    """
    Hit-ref tuples of every station-consecutive sequence accepted by the
    extension predicate, found by scanning every hit at every step. Slow;
    used to check the indexed search.
    """
    coords = event.coordinates()
    per_station = [event.hits_on_station(s) for s in range(detector.n_stations)]
    target = np.array(TARGET)
    found: List[Tuple[int, ...]] = []

    def grow(points: List[np.ndarray], refs: Tuple[int, ...]):
        station = len(refs)
        if station == detector.n_stations:
            found.append(refs)
            return
        for ref in per_station[station]:
            hit = coords[ref]
            if is_admissible(points[-2], points[-1], hit, window, check_rotation=len(points) >= 3):
                grow(points + [hit], refs + (int(ref),))

    for ref in per_station[0]:
        grow([target, coords[ref]], (int(ref),))
    return found


def reconstructable_tracks(event: Event, detector: DetectorConfig) -> List[Tuple[int, ...]]:
    """Hit refs of every true track with a hit on every station."""
    lookup = event.true_hit_lookup()
    tracks = []
    for track in event.tracks:
        refs = tuple(lookup.get((track.track_id, s), -1) for s in range(detector.n_stations))
        if -1 not in refs:
            tracks.append(refs)
    return tracks
