"""
Track following with the catch-and-prolong network.

Candidates start as (target, station-0 hit) and grow one station at a
time: the network's probability prunes weak candidates, and its ellipse
on the next station gates which hits may continue each one. Full-length
survivors are classified, and hit-sharing conflicts are resolved greedily
by probability.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from catch_prolong.detector import DetectorConfig, Event
from catch_prolong.model import CheckpointError, Ellipse
from catch_prolong.seed_search import CandidateBatch, StationHits

logger = logging.getLogger("CatchProlong")

EllipseLike = Union[Ellipse, Tuple[float, float, float, float]]


@dataclass(frozen=True)
class FollowConfig:
    prune_threshold: float = 0.2
    accept_threshold: float = 0.5
    max_branches: Optional[int] = None
    ellipse_inflate: float = 1.0
    allow_early_stop: bool = False

    def __post_init__(self):
        for name in ("prune_threshold", "accept_threshold"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if self.ellipse_inflate < 1.0:
            raise ValueError(f"ellipse_inflate must be >= 1, got {self.ellipse_inflate}")
        if self.max_branches is not None and self.max_branches < 1:
            raise ValueError(f"max_branches must be positive or None, got {self.max_branches}")


@dataclass(frozen=True)
class ReconTrack:
    hit_refs: Tuple[int, ...]
    probability: float

    @property
    def length(self) -> int:
        return len(self.hit_refs) + 1


def _unpack(ellipse: EllipseLike) -> Tuple[float, float, float, float]:
    if isinstance(ellipse, Ellipse):
        return ellipse.cx, ellipse.cy, ellipse.r1, ellipse.r2
    return tuple(float(v) for v in ellipse)


def ellipse_norm2(xy, center, semiaxes) -> np.ndarray:
    """((x - cx)/R1)^2 + ((y - cy)/R2)^2, broadcasting over leading axes."""
    ratio = (np.asarray(xy, dtype=np.float64) - center) / semiaxes
    return ratio[..., 0] ** 2 + ratio[..., 1] ** 2


def point_in_ellipse(point: Tuple[float, float], ellipse: EllipseLike) -> bool:
    """Closed-region test: the boundary counts as inside."""
    cx, cy, r1, r2 = _unpack(ellipse)
    return bool(ellipse_norm2(point, np.array([cx, cy]), np.array([r1, r2])) <= 1.0)


def check_compatible(net, detector: DetectorConfig) -> None:
    """Refuse a network built for another station layout."""
    if tuple(net.config.station_z) != tuple(detector.station_z):
        raise CheckpointError(
            f"checkpoint was trained for stations at z={list(net.config.station_z)}, "
            f"events have z={list(detector.station_z)}"
        )


def gate_hits(cands: CandidateBatch, centers: np.ndarray, semiaxes: np.ndarray, station: StationHits,
              max_branches: Optional[int] = None):
    """
    Pair every candidate with the station hits inside its ellipse.

    Returns (source, local): candidate row and station-local hit position
    of each admitted pair, grouped by candidate. With `max_branches`, only
    the closest hits (in ellipse-normalised distance) of each candidate
    are kept.
    """
    if len(cands) == 0 or len(station) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)

    # slightly widened y range; the ellipse test below decides
    half = semiaxes[:, 1] * (1.0 + 1e-9)
    starts, stops = station.index.bounds(centers[:, 1] - half, centers[:, 1] + half)
    counts = stops - starts
    total = int(counts.sum())
    source = np.repeat(np.arange(len(cands)), counts)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    local = station.index.order[np.repeat(starts, counts) + offsets]

    norm2 = ellipse_norm2(station.coords[local, :2], centers[source], semiaxes[source])
    inside = norm2 <= 1.0
    source, local, norm2 = source[inside], local[inside], norm2[inside]

    if max_branches is not None and len(source):
        order = np.lexsort((local, norm2, source))
        source, local = source[order], local[order]
        first = np.searchsorted(source, source, side="left")
        rank = np.arange(len(source)) - first
        keep = rank < max_branches
        source, local = source[keep], local[keep]
        regroup = np.lexsort((local, source))
        source, local = source[regroup], local[regroup]
    return source, local


def resolve_conflicts(candidates: Sequence[ReconTrack]) -> List[ReconTrack]:
    """
    Greedy selection by descending probability, ties to the earlier
    candidate; a candidate sharing any hit with a kept track is dropped.
    """
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i].probability, i))
    used = set()
    kept = []
    for i in order:
        refs = set(candidates[i].hit_refs)
        if refs & used:
            continue
        used |= refs
        kept.append(candidates[i])
    return kept


def follow_event(event: Event, net, cfg: FollowConfig, detector: DetectorConfig) -> List[ReconTrack]:
    """
    Reconstruct the tracks of one event.

    Raises:
        CheckpointError: if the network does not match the detector.
    """
    check_compatible(net, detector)
    stations = [StationHits.from_event(event, s) for s in range(detector.n_stations)]
    batch = CandidateBatch.seeds(stations[0])
    accepted: List[ReconTrack] = []

    for s in range(1, detector.n_stations):
        if len(batch) == 0:
            break
        out = net.forward_batch(batch.points)
        centers, semiaxes = out.center, out.semiaxes * cfg.ellipse_inflate
        prob = out.prob

        if prob is not None:
            keep = prob >= cfg.prune_threshold
            batch, prob = batch.take(keep), prob[keep]
            centers, semiaxes = centers[keep], semiaxes[keep]

        source, local = gate_hits(batch, centers, semiaxes, stations[s], cfg.max_branches)

        if cfg.allow_early_stop and prob is not None and batch.length >= 4:
            empty = np.ones(len(batch), dtype=bool)
            empty[source] = False
            for row in np.flatnonzero(empty & (prob >= cfg.accept_threshold)):
                accepted.append(ReconTrack(hit_refs=tuple(int(r) for r in batch.refs[row]),
                                           probability=float(prob[row])))

        hits = stations[s].coords[local]
        batch = CandidateBatch(
            points=np.concatenate([batch.points[source], hits[:, None, :]], axis=1),
            refs=np.concatenate([batch.refs[source], stations[s].refs[local][:, None]], axis=1),
        )
        logger.debug(f"Event {event.event_id}: {len(batch)} candidates reach station {s}")

    if len(batch) and batch.length == detector.max_length:
        prob = net.forward_batch(batch.points).prob
        for row in np.flatnonzero(prob >= cfg.accept_threshold):
            accepted.append(ReconTrack(hit_refs=tuple(int(r) for r in batch.refs[row]),
                                       probability=float(prob[row])))

    tracks = resolve_conflicts(accepted)
    logger.debug(f"Event {event.event_id}: {len(accepted)} accepted, {len(tracks)} after conflicts")
    return tracks
