"""
Evaluation quantities: per-length classification and ellipse metrics (a
table with one column per prefix length), hits-in-ellipse density and
track-level efficiency.
"""

import csv
import math
from dataclasses import dataclass, asdict, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from catch_prolong.detector import DetectorConfig, Event
from catch_prolong.follower import ReconTrack, ellipse_norm2
from catch_prolong.seed_search import TrackCandidate, reconstructable_tracks

NAN = float("nan")

# Row labels of the text table, in display order, with the MetricsRow field shown.
TABLE_ROWS = (
    ("Recall", "recall"),
    ("Precision", "precision"),
    ("Accuracy", "accuracy"),
    ("Ellipse square, cm2", "mean_area"),
    ("Ellipse hit rate", "inside_fraction"),
)

WIDE_COLUMNS = (
    "length", "samples", "tp", "fp", "tn", "fn",
    "recall", "precision", "accuracy", "mean_area", "inside_fraction",
)


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den else NAN


def ellipse_area(r1, r2):
    """pi * R1 * R2 in cm2."""
    return np.pi * np.asarray(r1, dtype=np.float64) * np.asarray(r2, dtype=np.float64)


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @classmethod
    def from_predictions(cls, labels, prob, threshold: float) -> "Confusion":
        labels = np.asarray(labels).astype(bool)
        predicted = np.asarray(prob, dtype=np.float64) >= threshold
        return cls(
            tp=int(np.sum(predicted & labels)),
            fp=int(np.sum(predicted & ~labels)),
            tn=int(np.sum(~predicted & ~labels)),
            fn=int(np.sum(~predicted & labels)),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def accuracy(self) -> float:
        return _ratio(self.tp + self.tn, self.total)


@dataclass
class MetricsRow:
    """
    Metrics of one prefix length. Classification fields are None when the
    length has no probability output, ellipse fields when it has no ellipse.
    """
    length: int
    samples: int
    confusion: Optional[Confusion] = None
    mean_area: Optional[float] = None
    inside_fraction: Optional[float] = None

    @classmethod
    def from_outputs(cls, length: int, labels, threshold: float, prob=None, semiaxes=None,
                     inside=None) -> "MetricsRow":
        """
        Args:
            labels: 0/1 sample labels.
            prob: predicted probabilities, or None.
            semiaxes: (N, 2) predicted semiaxes, or None.
            inside: boolean mask of samples whose true next hit fell inside
                the ellipse, over samples that have one (shorter than N).
        """
        labels = np.asarray(labels)
        row = cls(length=length, samples=len(labels))
        if prob is not None:
            row.confusion = Confusion.from_predictions(labels, prob, threshold)
        if semiaxes is not None:
            true = labels == 1
            areas = ellipse_area(semiaxes[true, 0], semiaxes[true, 1])
            row.mean_area = float(np.mean(areas)) if len(areas) else NAN
            row.inside_fraction = float(np.mean(inside)) if inside is not None and len(inside) else NAN
        return row

    def value(self, name: str) -> Optional[float]:
        if name in ("tp", "fp", "tn", "fn", "recall", "precision", "accuracy"):
            return None if self.confusion is None else getattr(self.confusion, name)
        return getattr(self, name)

    def to_record(self) -> Dict[str, Any]:
        record = {"length": self.length, "samples": self.samples}
        for name in WIDE_COLUMNS[2:]:
            record[name] = self.value(name)
        return record


@dataclass
class MetricsTable:
    threshold: float
    rows: List[MetricsRow] = field(default_factory=list)

    def row(self, length: int) -> Optional[MetricsRow]:
        for row in self.rows:
            if row.length == length:
                return row
        return None

    def to_records(self) -> List[Dict[str, Any]]:
        return [row.to_record() for row in self.rows]

    def tidy(self) -> List[Tuple[str, int, float]]:
        """(metric, length, value) for every present value."""
        out = []
        for row in self.rows:
            for name in WIDE_COLUMNS[2:]:
                value = row.value(name)
                if value is not None:
                    out.append((name, row.length, float(value)))
        return out

    def format(self) -> str:
        """Rows are metrics, columns are prefix lengths; absent values are blank."""
        header = ["Metric"] + [f"{row.length} points" for row in self.rows]
        lines = [header]
        for label, name in TABLE_ROWS:
            cells = [label]
            for row in self.rows:
                value = row.value(name)
                if value is None:
                    cells.append("")
                elif name == "mean_area":
                    cells.append(f"{value:.3f}")
                else:
                    cells.append(f"{100.0 * value:.1f}%" if not math.isnan(value) else "nan")
            lines.append(cells)
        widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in lines)


def write_wide_csv(path: str, table: MetricsTable) -> None:
    """One row per prefix length; absent values are empty cells."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(WIDE_COLUMNS)
        for record in table.to_records():
            writer.writerow(["" if record[c] is None else record[c] for c in WIDE_COLUMNS])


def write_tidy_csv(path: str, rows: Iterable[Tuple[str, Any, float]]) -> None:
    """Plot data: one (metric, length, value) measurement per line."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(("metric", "length", "value"))
        for metric, length, value in rows:
            writer.writerow((metric, "" if length is None else length, repr(float(value))))


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


# -- Hits in ellipse -----------------------------------------------------------------------

def busiest_station(detector: DetectorConfig, events: Sequence[Event]) -> int:
    """Station with the most hits among those an ellipse can point at (1..n-1)."""
    counts = np.zeros(detector.n_stations, dtype=np.int64)
    for event in events:
        if event.hits:
            counts += np.bincount(event.stations(), minlength=detector.n_stations)
    return int(1 + np.argmax(counts[1:]))


def hits_in_ellipse_density(net, candidates: Sequence[TrackCandidate], events: Mapping[int, Event],
                            station: int, batch_size: int = 512) -> float:
    """
    Mean number of event hits on `station` inside the ellipses predicted
    for true-track prefixes ending one station earlier. NaN when no such
    prefix exists.
    """
    length = station + 1
    prefixes = [(c.event_id, c.points[:length]) for c in candidates if c.is_true and c.length > length]
    if not prefixes:
        return NAN

    counts = []
    for start in range(0, len(prefixes), batch_size):
        chunk = prefixes[start:start + batch_size]
        out = net.forward_batch(np.stack([p for _, p in chunk]))
        for (event_id, _), center, semi in zip(chunk, out.center, out.semiaxes):
            event = events[event_id]
            refs = event.hits_on_station(station)
            xy = event.coordinates()[refs, :2]
            counts.append(int(np.sum(ellipse_norm2(xy, center, semi) <= 1.0)))
    return float(np.mean(counts))


# -- Track level ---------------------------------------------------------------------------

@dataclass
class TrackEfficiency:
    reconstructable: int = 0
    found: int = 0
    reconstructed: int = 0
    ghosts: int = 0

    @property
    def efficiency(self) -> float:
        return _ratio(self.found, self.reconstructable)

    @property
    def ghost_rate(self) -> float:
        return _ratio(self.ghosts, self.reconstructed)

    def to_mapping(self) -> Dict[str, Any]:
        mapping = asdict(self)
        mapping.update(efficiency=self.efficiency, ghost_rate=self.ghost_rate)
        return mapping


def track_efficiency(detector: DetectorConfig, events: Sequence[Event],
                     recon: Mapping[int, Sequence[ReconTrack]]) -> TrackEfficiency:
    """
    A reconstructable track (one true hit on every station) is found when
    some reconstructed track has exactly its hits. A reconstructed track
    whose hits are not all one true track's is a ghost.
    """
    stats = TrackEfficiency()
    for event in events:
        truth = set(reconstructable_tracks(event, detector))
        tracks = recon.get(event.event_id, [])
        found = {t.hit_refs for t in tracks}
        ids = event.track_ids()
        stats.reconstructable += len(truth)
        stats.found += len(truth & found)
        stats.reconstructed += len(tracks)
        for track in tracks:
            owners = set(int(ids[r]) for r in track.hit_refs)
            if len(owners) != 1 or -1 in owners:
                stats.ghosts += 1
    return stats

