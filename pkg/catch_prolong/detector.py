"""
Toy planar tracking detector.

Tracks start at the target (the origin), run as straight lines in YoZ and
as circles in XoZ, and leave one smeared hit per station plane they cross
inside the station's extent. Fake hits come from spurious crossings of
fired strips: on each station, the x of one true hit paired with the y of
another.

Events are written to and read from a JSON Lines event file.
"""

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger("CatchProlong")

FAKE_TRACK_ID = -1
FAKE_MODES = ("strip-crossing", "uniform", "none")

EVENT_SCHEMA = "cp-events"
EVENT_SCHEMA_VERSION = 1


class PlaneUnreachableError(ValueError):
    """The XoZ circle of a track never reaches the requested plane."""


class EventFileError(ValueError):
    """Malformed or unsupported event file."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class DetectorConfig:
    """
    Geometry of the planar detector.

    Half-extents default to station 0's 32.0 x 20.5 cm scaled linearly
    with z, so every station covers the same solid angle from the target.
    """
    n_stations: int = 5
    station_z: Tuple[float, ...] = (30.0, 50.0, 70.0, 90.0, 110.0)
    station0_half_x: float = 32.0
    station0_half_y: float = 20.5
    half_extent_x: Optional[Tuple[float, ...]] = None
    half_extent_y: Optional[Tuple[float, ...]] = None
    smear_sigma: float = 0.05
    fake_mode: str = "strip-crossing"

    def __post_init__(self):
        station_z = tuple(float(z) for z in self.station_z)
        object.__setattr__(self, "station_z", station_z)

        if self.n_stations < 2:
            raise ValueError("n_stations must be at least 2")
        if len(station_z) != self.n_stations:
            raise ValueError(f"station_z has {len(station_z)} entries, expected {self.n_stations}")
        if station_z[0] <= 0 or any(b <= a for a, b in zip(station_z, station_z[1:])):
            raise ValueError("station_z must be positive and strictly increasing")

        z0 = station_z[0]
        for name, base in (("half_extent_x", self.station0_half_x),
                           ("half_extent_y", self.station0_half_y)):
            value = getattr(self, name)
            if value is None:
                value = tuple(base * z / z0 for z in station_z)
            value = tuple(float(v) for v in value)
            if len(value) != self.n_stations:
                raise ValueError(f"{name} has {len(value)} entries, expected {self.n_stations}")
            if any(v <= 0 for v in value):
                raise ValueError(f"{name} must be positive")
            object.__setattr__(self, name, value)

        if self.smear_sigma < 0:
            raise ValueError("smear_sigma must be non-negative")
        if self.fake_mode not in FAKE_MODES:
            raise ValueError(f"fake_mode must be one of {FAKE_MODES}, got {self.fake_mode!r}")

    @property
    def max_length(self) -> int:
        """Longest candidate: the target plus one hit per station."""
        return self.n_stations + 1

    def station_area(self, station: int) -> float:
        return 4.0 * self.half_extent_x[station] * self.half_extent_y[station]

    def to_mapping(self) -> Dict[str, Any]:
        mapping = asdict(self)
        for key, value in mapping.items():
            if isinstance(value, tuple):
                mapping[key] = list(value)
        return mapping

    @classmethod
    def from_mapping(cls, mapping: Dict[str, Any]) -> "DetectorConfig":
        values = dict(mapping)
        for key in ("station_z", "half_extent_x", "half_extent_y"):
            if values.get(key) is not None:
                values[key] = tuple(values[key])
        return cls(**values)


@dataclass(frozen=True)
class GenerationConfig:
    """Sampling ranges for simulated events."""
    n_tracks_min: int = 20
    n_tracks_max: int = 30
    kappa_min: float = 0.0
    kappa_max: float = 0.002
    phi0_max: float = 0.5
    ty_max: float = 0.5
    fake_fraction: float = 0.25
    max_turn: float = math.pi / 4

    def validate(self, detector: DetectorConfig) -> None:
        """Raise ValueError for ranges that cannot be sampled."""
        if self.n_tracks_min < 0 or self.n_tracks_max < self.n_tracks_min:
            raise ValueError(f"invalid track count range [{self.n_tracks_min}, {self.n_tracks_max}]")
        if self.kappa_min < 0 or self.kappa_max < self.kappa_min:
            raise ValueError(f"invalid |kappa| range [{self.kappa_min}, {self.kappa_max}]")
        if not 0 <= self.phi0_max < math.pi / 2:
            raise ValueError("phi0_max must lie in [0, pi/2)")
        if self.ty_max < 0:
            raise ValueError("ty_max must be non-negative")
        if self.fake_fraction < 0:
            raise ValueError("fake_fraction must be non-negative")
        if self.fake_fraction > 1 and detector.fake_mode == "strip-crossing":
            raise ValueError("strip-crossing fake_fraction is a keep probability and must be <= 1")
        # Arc length to the last plane is at most z_last / cos(phi0_max)
        depth = detector.station_z[-1] / math.cos(self.phi0_max)
        if self.kappa_max * depth >= self.max_turn:
            raise ValueError(
                f"kappa_max={self.kappa_max} turns the track by {self.kappa_max * depth:.3f} rad "
                f"over the detector, above max_turn={self.max_turn:.3f}"
            )


@dataclass(frozen=True)
class TrackParams:
    kappa: float
    phi0: float
    ty: float
    track_id: int


@dataclass(frozen=True)
class Hit:
    station: int
    x: float
    y: float
    z: float
    track_id: int = FAKE_TRACK_ID

    @property
    def is_fake(self) -> bool:
        return self.track_id == FAKE_TRACK_ID


@dataclass
class Event:
    event_id: int
    hits: List[Hit] = field(default_factory=list)
    tracks: List[TrackParams] = field(default_factory=list)

    def coordinates(self) -> np.ndarray:
        """All hit positions as an (n, 3) array, in hit-list order."""
        if not self.hits:
            return np.zeros((0, 3))
        return np.array([(h.x, h.y, h.z) for h in self.hits], dtype=np.float64)

    def stations(self) -> np.ndarray:
        return np.array([h.station for h in self.hits], dtype=np.int64)

    def track_ids(self) -> np.ndarray:
        return np.array([h.track_id for h in self.hits], dtype=np.int64)

    def hits_on_station(self, station: int) -> np.ndarray:
        """Indices into `hits` of the hits on one station."""
        return np.flatnonzero(self.stations() == station) if self.hits else np.zeros(0, dtype=np.int64)

    def true_hit_lookup(self) -> Dict[Tuple[int, int], int]:
        """Map (track_id, station) to the index of that track's hit."""
        return {(h.track_id, h.station): i for i, h in enumerate(self.hits) if not h.is_fake}


# -- Track propagation -------------------------------------------------------------

def _project_xz(kappa, phi0, z):
    """
    x on the XoZ circle through the origin with tangent angle phi0 (from
    the z axis) and signed curvature kappa, at plane z.

    Along arc length s the direction angle is phi0 + kappa*s, so
    sin(phi0 + kappa*s) = sin(phi0) + kappa*z at the plane. The closed
    form below is the rationalised (cos(phi0) - cos(phi0 + kappa*s))/kappa,
    which stays exact as kappa goes to 0. Returns NaN where unreachable.
    """
    kappa = np.asarray(kappa, dtype=np.float64)
    phi0 = np.asarray(phi0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    sin0 = np.sin(phi0)
    u = sin0 + kappa * z
    reachable = np.abs(u) <= 1.0
    cos_end = np.sqrt(np.where(reachable, 1.0 - u * u, 0.0))
    x = z * (2.0 * sin0 + kappa * z) / (np.cos(phi0) + cos_end)
    return np.where(reachable, x, np.nan)


def project_track(params: TrackParams, z: float) -> Tuple[float, float]:
    """
    Position (x, y) where a track crosses the plane at z.

    Raises:
        ValueError: if z is not positive.
        PlaneUnreachableError: if the track's circle turns back before z.
    """
    if z <= 0:
        raise ValueError(f"plane z must be positive, got {z}")
    x = float(_project_xz(params.kappa, params.phi0, z))
    if math.isnan(x):
        raise PlaneUnreachableError(
            f"track {params.track_id} (kappa={params.kappa}, phi0={params.phi0}) never reaches z={z}"
        )
    return x, params.ty * z


# -- Event generation -----------------------------------------------------------------

def event_seed(global_seed: int, event_id: int) -> int:
    """Independent per-event seed derived from the run seed."""
    return int(np.random.SeedSequence([global_seed, event_id]).generate_state(1)[0])


def _inside(detector: DetectorConfig, station: int, x, y):
    return (np.abs(x) <= detector.half_extent_x[station]) & (np.abs(y) <= detector.half_extent_y[station])


def _sample_tracks(gen: GenerationConfig, rng: np.random.Generator) -> List[TrackParams]:
    n_tracks = int(rng.integers(gen.n_tracks_min, gen.n_tracks_max + 1))
    magnitude = rng.uniform(gen.kappa_min, gen.kappa_max, size=n_tracks)
    sign = rng.choice(np.array([-1.0, 1.0]), size=n_tracks)
    phi0 = rng.uniform(-gen.phi0_max, gen.phi0_max, size=n_tracks)
    ty = rng.uniform(-gen.ty_max, gen.ty_max, size=n_tracks)
    return [
        TrackParams(kappa=float(sign[i] * magnitude[i]), phi0=float(phi0[i]), ty=float(ty[i]), track_id=i)
        for i in range(n_tracks)
    ]


def _station_fakes(detector: DetectorConfig, gen: GenerationConfig, station: int,
                   true_x: np.ndarray, true_y: np.ndarray, rng: np.random.Generator):
    k = len(true_x)
    if detector.fake_mode == "none" or k == 0:
        return np.zeros(0), np.zeros(0)

    if detector.fake_mode == "uniform":
        n_fakes = int(round(gen.fake_fraction * k * (k - 1)))
        fx = rng.uniform(-detector.half_extent_x[station], detector.half_extent_x[station], size=n_fakes)
        fy = rng.uniform(-detector.half_extent_y[station], detector.half_extent_y[station], size=n_fakes)
        return fx, fy

    # strip-crossing: x of hit i with y of hit j, for every ordered pair i != j
    i_idx, j_idx = np.nonzero(~np.eye(k, dtype=bool))
    keep = rng.random(len(i_idx)) < gen.fake_fraction
    i_idx, j_idx = i_idx[keep], j_idx[keep]
    sigma = detector.smear_sigma
    fx = true_x[i_idx] + rng.normal(0.0, sigma, size=len(i_idx))
    fy = true_y[j_idx] + rng.normal(0.0, sigma, size=len(j_idx))
    inside = _inside(detector, station, fx, fy)
    return fx[inside], fy[inside]


def generate_event(detector: DetectorConfig, gen: GenerationConfig, seed: int,
                   event_id: int = 0) -> Event:
    """
    Simulate one event: sample tracks, cross every station, smear, drop hits
    outside the station, then add fakes per the detector's fake mode.

    Hits are ordered by station; within a station the order is shuffled so
    list position carries no truth. Deterministic in (configs, seed).
    """
    gen.validate(detector)
    rng = np.random.default_rng(seed)
    tracks = _sample_tracks(gen, rng)

    kappa = np.array([t.kappa for t in tracks])
    phi0 = np.array([t.phi0 for t in tracks])
    ty = np.array([t.ty for t in tracks])
    ids = np.array([t.track_id for t in tracks], dtype=np.int64)

    hits: List[Hit] = []
    for station, z in enumerate(detector.station_z):
        x = _project_xz(kappa, phi0, z) + rng.normal(0.0, detector.smear_sigma, size=len(tracks))
        y = ty * z + rng.normal(0.0, detector.smear_sigma, size=len(tracks))
        crossed = ~np.isnan(x)
        inside = crossed & _inside(detector, station, np.where(crossed, x, 0.0), y)
        tx, ty_hits, tid = x[inside], y[inside], ids[inside]

        fx, fy = _station_fakes(detector, gen, station, tx, ty_hits, rng)

        all_x = np.concatenate([tx, fx])
        all_y = np.concatenate([ty_hits, fy])
        all_id = np.concatenate([tid, np.full(len(fx), FAKE_TRACK_ID, dtype=np.int64)])
        order = rng.permutation(len(all_x))
        hits.extend(
            Hit(station=station, x=float(all_x[i]), y=float(all_y[i]), z=z, track_id=int(all_id[i]))
            for i in order
        )

    logger.debug(f"Event {event_id}: {len(tracks)} tracks, {len(hits)} hits")
    return Event(event_id=event_id, hits=hits, tracks=tracks)


def station_statistics(detector: DetectorConfig, events: Iterable[Event]) -> List[Dict[str, float]]:
    """Per-station totals of true hits and fakes, with the fake:true ratio."""
    true_counts = np.zeros(detector.n_stations, dtype=np.int64)
    fake_counts = np.zeros(detector.n_stations, dtype=np.int64)
    for event in events:
        for hit in event.hits:
            if hit.is_fake:
                fake_counts[hit.station] += 1
            else:
                true_counts[hit.station] += 1
    return [
        {
            "station": s,
            "true_hits": int(true_counts[s]),
            "fakes": int(fake_counts[s]),
            "fake_ratio": float(fake_counts[s] / true_counts[s]) if true_counts[s] else 0.0,
        }
        for s in range(detector.n_stations)
    ]


# -- Event file ---------------------------------------------------------------------

def _event_record(event: Event) -> Dict[str, Any]:
    return {
        "event_id": event.event_id,
        "tracks": [
            {"track_id": t.track_id, "kappa": t.kappa, "phi0": t.phi0, "ty": t.ty}
            for t in event.tracks
        ],
        "hits": [
            {"station": h.station, "x": h.x, "y": h.y, "z": h.z, "track_id": h.track_id}
            for h in event.hits
        ],
    }


def write_events(path: str, events: Sequence[Event], detector: DetectorConfig,
                 provenance: Optional[Dict[str, Any]] = None) -> None:
    """
    Write the header line and one event per line.

    Floats go through json's shortest round-trip repr, so reading the file
    back reproduces every coordinate bit for bit.
    """
    header = {"schema": EVENT_SCHEMA, "version": EVENT_SCHEMA_VERSION, "detector": detector.to_mapping()}
    if provenance:
        header["provenance"] = provenance
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for event in events:
            f.write(json.dumps(_event_record(event), sort_keys=True) + "\n")
    logger.info(f"Wrote {len(events)} events to {path}")


def _require(record: Dict[str, Any], key: str, what: str, line_number: int):
    if key not in record:
        raise EventFileError(f"{what} is missing field '{key}'", line_number)
    return record[key]


def _parse_event(record: Any, line_number: int) -> Event:
    if not isinstance(record, dict):
        raise EventFileError("event record is not an object", line_number)
    try:
        tracks = [
            TrackParams(
                kappa=float(_require(t, "kappa", "track", line_number)),
                phi0=float(_require(t, "phi0", "track", line_number)),
                ty=float(_require(t, "ty", "track", line_number)),
                track_id=int(_require(t, "track_id", "track", line_number)),
            )
            for t in _require(record, "tracks", "event", line_number)
        ]
        hits = [
            Hit(
                station=int(_require(h, "station", "hit", line_number)),
                x=float(_require(h, "x", "hit", line_number)),
                y=float(_require(h, "y", "hit", line_number)),
                z=float(_require(h, "z", "hit", line_number)),
                track_id=int(_require(h, "track_id", "hit", line_number)),
            )
            for h in _require(record, "hits", "event", line_number)
        ]
        event_id = int(_require(record, "event_id", "event", line_number))
    except (TypeError, AttributeError) as e:
        raise EventFileError(f"malformed event record: {e}", line_number) from e
    return Event(event_id=event_id, hits=hits, tracks=tracks)


def load_event_file(path: str) -> Tuple[DetectorConfig, List[Event]]:
    """
    Read an event file.

    Raises:
        EventFileError: malformed lines (with line number), a missing
            header, or an unknown schema/version.
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise EventFileError("empty event file (no header)", 1)

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise EventFileError(f"invalid header: {e}", 1) from e
    if not isinstance(header, dict) or header.get("schema") != EVENT_SCHEMA:
        raise EventFileError(f"not a {EVENT_SCHEMA} file", 1)
    if header.get("version") != EVENT_SCHEMA_VERSION:
        raise EventFileError(f"unsupported event file version {header.get('version')!r}", 1)
    try:
        detector = DetectorConfig.from_mapping(header["detector"])
    except (KeyError, TypeError, ValueError) as e:
        raise EventFileError(f"invalid detector in header: {e}", 1) from e

    events = []
    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise EventFileError(f"invalid JSON: {e}", line_number) from e
        events.append(_parse_event(record, line_number))
    logger.info(f"Read {len(events)} events from {path}")
    return detector, events


def read_events(path: str) -> List[Event]:
    """Read only the events of an event file."""
    return load_event_file(path)[1]
