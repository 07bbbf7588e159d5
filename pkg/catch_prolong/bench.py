"""CPU inference throughput of the network on candidate prefixes."""

import logging
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field
from typing import Any, Dict, List, Sequence

import numpy as np

logger = logging.getLogger("CatchProlong")

REFERENCE_NOTE = (
    "CPU figures from numpy inference. For comparison, this architecture on GPUs has reached "
    "3,483,608 candidates/s on 2x Tesla V100 and 6,500 candidates/s on one Tesla M60."
)


@dataclass
class BenchResult:
    batch_size: int
    workers: int
    candidates: int
    seconds: float

    @property
    def per_second(self) -> float:
        return self.candidates / self.seconds if self.seconds > 0 and self.candidates else 0.0

    @property
    def latency_us(self) -> float:
        """Wall time per candidate in microseconds."""
        return 1e6 * self.seconds / self.candidates if self.candidates else 0.0


@dataclass
class BenchReport:
    hardware: Dict[str, Any]
    results: List[BenchResult] = field(default_factory=list)
    note: str = REFERENCE_NOTE

    def to_mapping(self) -> Dict[str, Any]:
        return {
            "hardware": self.hardware,
            "note": self.note,
            "results": [dict(asdict(r), per_second=r.per_second, latency_us=r.latency_us) for r in self.results],
        }

    def format(self) -> str:
        lines = [f"Hardware: {self.hardware['processor'] or self.hardware['machine']}, "
                 f"{self.hardware['cpu_count']} CPUs, {self.hardware['system']}"]
        for r in self.results:
            lines.append(f"batch {r.batch_size:4d}, workers {r.workers}: {r.candidates} candidates in "
                         f"{r.seconds:.3f}s -> {r.per_second:,.0f}/s ({r.latency_us:.1f} us each)")
        lines.append(self.note)
        return "\n".join(lines)


def hardware_info() -> Dict[str, Any]:
    return {
        "machine": platform.machine(),
        "processor": platform.processor(),
        "system": f"{platform.system()} {platform.release()}",
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
    }


def _run_batches(net, points: np.ndarray, batch_size: int) -> int:
    for start in range(0, len(points), batch_size):
        net.forward_batch(points[start:start + batch_size])
    return len(points)


def time_inference(net, points: np.ndarray, batch_size: int, workers: int = 1) -> BenchResult:
    """Classify every (N, L, 3) prefix in `points` once and time it."""
    if len(points) == 0:
        return BenchResult(batch_size=batch_size, workers=workers, candidates=0, seconds=0.0)
    started = time.perf_counter()
    if workers <= 1:
        count = _run_batches(net, points, batch_size)
    else:
        shards = np.array_split(points, workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            count = sum(pool.map(lambda shard: _run_batches(net, shard, batch_size), shards))
    return BenchResult(batch_size=batch_size, workers=workers, candidates=count,
                       seconds=time.perf_counter() - started)


def run_bench(net, points: np.ndarray, batch_sizes: Sequence[int] = (1, 128), workers: int = 1) -> BenchReport:
    """
    Throughput per batch size on one worker, plus the largest batch size on
    `workers` threads when more than one is requested.
    """
    report = BenchReport(hardware=hardware_info())
    for batch_size in batch_sizes:
        report.results.append(time_inference(net, points, batch_size, 1))
    if workers > 1:
        report.results.append(time_inference(net, points, max(batch_sizes), workers))
    for result in report.results:
        logger.info(f"Bench batch {result.batch_size} x{result.workers}: {result.per_second:,.0f} candidates/s")
    return report
