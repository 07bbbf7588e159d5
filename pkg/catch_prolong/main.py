#!/usr/bin/env python3
"""
catch-prolong - track finding with one recurrent network that both
classifies track candidates and predicts where each continues.

The pipeline runs as subcommands exchanging files:

    simulate  toy events                        -> events.jsonl
    seed      directed candidate search          -> candidates.jsonl
    train     fit the network                    -> model.cpnet (+ history, test candidates)
    track     follow tracks with the network     -> recon.jsonl
    eval      per-length metrics, ellipse density, track efficiency
    bench     CPU inference throughput

Usage:
    catch-prolong <command> [--config=<path>] [--seed=<int>] [--set Section.Key=value ...]
                            [--workers=<n>] [--verbose] [--log-file=<path>] [command options]
"""

import os
import sys
import json
import logging
import argparse
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import yaml
from pubsub import pub

from catch_prolong import __version__
from catch_prolong.bench import run_bench
from catch_prolong.config import MODEL_DEFAULTS, RunConfig, load_run_config
from catch_prolong.detector import (
    DetectorConfig, Event, event_seed, generate_event, load_event_file, station_statistics, write_events,
)
from catch_prolong.files import (
    HistoryWriter, StageFileError, join_candidates, read_candidates, read_reconstructions,
    write_candidates, write_reconstructions,
)
from catch_prolong.follower import follow_event
from catch_prolong.metrics import (
    busiest_station, hits_in_ellipse_density, track_efficiency, write_tidy_csv, write_wide_csv,
)
from catch_prolong.model import CatchProlongNet, ModelConfig, load_checkpoint, save_checkpoint
from catch_prolong.seed_search import UNLABELLED, run_seed_search
from catch_prolong.trainer import (
    EPOCH_TOPIC, evaluate, expand_candidates, prepare_datasets, subsample_ghosts, train,
)

logger = logging.getLogger("CatchProlong")


def setup_logging(verbose: bool = False, log_file: Optional[str] = None):
    """Configure logging for the whole application (console + optional log file)."""
    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
    )


def parse_args(argv: Optional[Sequence[str]] = None):
    """Parse command line arguments."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default='config.yaml', help='Path to the run configuration file')
    common.add_argument('--seed', type=int, help='Global seed (overrides Seed in the config)')
    common.add_argument('--set', action='append', default=[], metavar='Section.Key=value',
                        help='Override one config value; repeatable')
    common.add_argument('--workers', type=int, default=1, help='Worker processes for per-event stages')
    common.add_argument('--verbose', action='store_true', help='Enable debug logging')
    common.add_argument('--log-file', help='Also write the log to this file')

    parser = argparse.ArgumentParser(description='catch-prolong - recurrent track finding on a toy detector')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('simulate', parents=[common], help='Generate toy events')
    p.add_argument('--n-events', type=int, default=2000, help='Number of events')
    p.add_argument('--out', default='events.jsonl', help='Event file to write')

    p = sub.add_parser('seed', parents=[common], help='Directed search for labelled candidates')
    p.add_argument('--events', default='events.jsonl', help='Event file to read')
    p.add_argument('--out', default='candidates.jsonl', help='Candidate file to write')

    p = sub.add_parser('train', parents=[common], help='Train the network')
    p.add_argument('--candidates', default='candidates.jsonl', help='Candidate file to read')
    p.add_argument('--events', help='Event file (default: the one named in the candidate file)')
    p.add_argument('--out', default='model.cpnet', help='Checkpoint to write')
    p.add_argument('--history', help='History file (default: next to the checkpoint)')

    p = sub.add_parser('track', parents=[common], help='Reconstruct tracks with a trained network')
    p.add_argument('--checkpoint', default='model.cpnet', help='Checkpoint to load')
    p.add_argument('--events', default='events.jsonl', help='Event file to read')
    p.add_argument('--out', default='recon.jsonl', help='Reconstruction file to write')

    p = sub.add_parser('eval', parents=[common], help='Evaluate a trained network')
    p.add_argument('--checkpoint', default='model.cpnet', help='Checkpoint to load')
    p.add_argument('--candidates', help='Labelled candidates (default: the checkpoint\'s test candidates)')
    p.add_argument('--events', help='Event file (default: the one named in the candidate file)')
    p.add_argument('--recon', help='Reconstruction file for track-level efficiency')
    p.add_argument('--out', default='eval', help='Output prefix for the .csv, .tidy.csv and .yaml reports')

    p = sub.add_parser('bench', parents=[common], help='Measure inference throughput')
    p.add_argument('--checkpoint', default='model.cpnet', help='Checkpoint to load')
    p.add_argument('--candidates', help='Candidates to classify (default: none, an empty run)')
    p.add_argument('--events', help='Event file (default: the one named in the candidate file)')
    p.add_argument('--out', help='Write the report as YAML here')

    return parser.parse_args(argv)


# -- Helpers --------------------------------------------------------------------------------

def require_file(path: Optional[str], what: str) -> str:
    if not path or not os.path.exists(path):
        raise StageFileError(f"missing input {what} file", path)
    return path


def map_events(fn: Callable, items: Sequence, workers: int) -> List:
    """fn over items in order, on a process pool when workers > 1."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def provenance(run: RunConfig, command: str, **inputs) -> Dict[str, Any]:
    return {
        "command": command,
        "package_version": __version__,
        "seed": run.seed,
        "config": run.to_mapping(),
        "inputs": {k: v for k, v in inputs.items() if v is not None},
    }


def model_config_for(run: RunConfig, detector: DetectorConfig) -> ModelConfig:
    """Model section of the run applied to the geometry the events were made with."""
    if detector != run.detector:
        logger.warning("Event file detector differs from the run config; using the event file's geometry")
    return ModelConfig.for_detector(detector, **{k: getattr(run.model, k) for k in MODEL_DEFAULTS})


def held_out_path(checkpoint: str) -> str:
    return os.path.splitext(checkpoint)[0] + ".test-candidates.jsonl"


def history_path(checkpoint: str) -> str:
    return os.path.splitext(checkpoint)[0] + ".history.jsonl"


def load_candidates(candidates_path: str, events_path: Optional[str]):
    """Candidates joined with their events; the event file defaults to the one recorded in the header."""
    header, records = read_candidates(require_file(candidates_path, "candidate"))
    events_path = events_path or header.get("events")
    detector, events = load_event_file(require_file(events_path, "event"))
    by_id = {e.event_id: e for e in events}
    return detector, by_id, join_candidates(records, by_id), events_path


# -- Per-event workers ------------------------------------------------------------------------

def _simulate_one(event_id: int, detector, generation, seed: int) -> Event:
    return generate_event(detector, generation, event_seed(seed, event_id), event_id)


def _seed_one(event: Event, detector, window, ghost_ratio, seed: int):
    candidates = run_seed_search(event, detector, window)
    rng = np.random.default_rng([seed, event.event_id, 2])
    return subsample_ghosts(candidates, ghost_ratio, rng)


def _track_one(event: Event, net, follow, detector):
    return event.event_id, follow_event(event, net, follow, detector)


# -- Commands -----------------------------------------------------------------------------------

def cmd_simulate(run: RunConfig, n_events: int, out: str, workers: int = 1) -> List[Dict[str, float]]:
    """Write n_events toy events; returns per-station hit statistics."""
    if n_events < 0:
        raise ValueError(f"n_events must be non-negative, got {n_events}")
    run.generation.validate(run.detector)
    fn = partial(_simulate_one, detector=run.detector, generation=run.generation, seed=run.seed)
    events = map_events(fn, list(range(n_events)), workers)
    write_events(out, events, run.detector, provenance(run, "simulate", n_events=n_events))

    stats = station_statistics(run.detector, events)
    for row in stats:
        print(f"station {row['station']}: {row['true_hits']} true hits, {row['fakes']} fakes, "
              f"fake:true {row['fake_ratio']:.2f}")
    return stats


def cmd_seed(run: RunConfig, events_path: str, out: str, workers: int = 1) -> int:
    """Run the directed search over every event; returns the candidate count."""
    detector, events = load_event_file(require_file(events_path, "event"))
    fn = partial(_seed_one, detector=detector, window=run.window,
                 ghost_ratio=run.training.ghost_ratio, seed=run.seed)
    candidates = [c for per_event in map_events(fn, events, workers) for c in per_event]
    n_true = sum(c.is_true for c in candidates)
    header = provenance(run, "seed", events=events_path)
    header.update(events=events_path, detector=detector.to_mapping())
    write_candidates(out, candidates, header)
    print(f"{len(candidates)} candidates: {n_true} true tracks, {len(candidates) - n_true} ghosts")
    return len(candidates)


def cmd_train(run: RunConfig, candidates_path: str, events_path: Optional[str], out: str,
              history: Optional[str] = None):
    """Train on the candidate file, write checkpoint, history and held-out candidates."""
    detector, by_id, candidates, events_path = load_candidates(candidates_path, events_path)
    full = [c for c in candidates if c.length == detector.max_length]
    if len(full) != len(candidates):
        logger.warning(f"Ignoring {len(candidates) - len(full)} candidates shorter than full length")

    train_groups, test_groups, _, test_cands = prepare_datasets(
        full, by_id, detector.n_stations, run.training, run.seed)
    net = CatchProlongNet(model_config_for(run, detector), seed=run.seed)

    history = history or history_path(out)
    writer = HistoryWriter(history, provenance(run, "train", candidates=candidates_path, events=events_path))
    pub.subscribe(writer.on_epoch, EPOCH_TOPIC)
    try:
        result = train(net, train_groups, test_groups, run.training, run.loss, seed=run.seed)
    finally:
        pub.unsubscribe(writer.on_epoch, EPOCH_TOPIC)

    final = result.history[-1]
    echo = provenance(run, "train", candidates=candidates_path, events=events_path)
    echo["final"] = final.to_record()
    save_checkpoint(out, result.net, training=echo)

    test_header = provenance(run, "train", candidates=candidates_path, events=events_path)
    test_header.update(events=events_path, detector=detector.to_mapping(), split="test")
    write_candidates(held_out_path(out), test_cands, test_header)

    print(final.metrics.format())
    return result


def cmd_track(run: RunConfig, checkpoint: str, events_path: str, out: str, workers: int = 1) -> int:
    """Reconstruct every event; returns the number of tracks found."""
    net, _ = load_checkpoint(require_file(checkpoint, "checkpoint"))
    detector, events = load_event_file(require_file(events_path, "event"))
    fn = partial(_track_one, net=net, follow=run.follow, detector=detector)
    recon = map_events(fn, events, workers)
    write_reconstructions(out, recon, provenance(run, "track", checkpoint=checkpoint, events=events_path))
    total = sum(len(tracks) for _, tracks in recon)
    print(f"{total} tracks reconstructed in {len(events)} events")
    return total


def cmd_eval(run: RunConfig, checkpoint: str, candidates_path: Optional[str], events_path: Optional[str],
             recon_path: Optional[str], out: str) -> Dict[str, Any]:
    """Per-length table, hits-in-ellipse density and track efficiency; returns the report."""
    net, _ = load_checkpoint(require_file(checkpoint, "checkpoint"))
    candidates_path = candidates_path or held_out_path(checkpoint)
    detector, by_id, candidates, events_path = load_candidates(candidates_path, events_path)
    if any(c.label == UNLABELLED for c in candidates):
        raise StageFileError("evaluation needs labelled candidates", candidates_path)
    full = [c for c in candidates if c.length == detector.max_length]

    groups = expand_candidates(full, by_id, detector.n_stations)
    table = evaluate(net, groups, run.training.threshold, run.training.eval_batch_size)
    used = sorted({c.event_id for c in full})
    station = busiest_station(detector, [by_id[i] for i in used]) if used else 1
    density = hits_in_ellipse_density(net, full, by_id, station)

    tidy = table.tidy() + [("hits_in_ellipse", station + 1, density)]
    report = {
        "provenance": provenance(run, "eval", checkpoint=checkpoint, candidates=candidates_path,
                                 events=events_path, recon=recon_path),
        "threshold": table.threshold,
        "metrics": table.to_records(),
        "hits_in_ellipse": {"station": station, "prefix_length": station + 1, "mean_hits": density},
    }
    if recon_path:
        _, recon = read_reconstructions(require_file(recon_path, "reconstruction"))
        recon_events = [by_id[i] for i in sorted(recon) if i in by_id]
        efficiency = track_efficiency(detector, recon_events, recon)
        report["tracks"] = efficiency.to_mapping()
        tidy += [("track_efficiency", None, efficiency.efficiency), ("ghost_rate", None, efficiency.ghost_rate)]

    write_wide_csv(f"{out}.csv", table)
    write_tidy_csv(f"{out}.tidy.csv", tidy)
    with open(f"{out}.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(report, f, sort_keys=False)

    print(table.format())
    print(f"Hits inside ellipses on station {station}: {density:.3f} per ellipse")
    if "tracks" in report:
        print(f"Track efficiency {report['tracks']['efficiency']:.4f}, ghost rate {report['tracks']['ghost_rate']:.4f}")
    return report


def cmd_bench(run: RunConfig, checkpoint: str, candidates_path: Optional[str], events_path: Optional[str],
              out: Optional[str] = None, workers: int = 1):
    """Throughput of full-length classification on local hardware."""
    net, _ = load_checkpoint(require_file(checkpoint, "checkpoint"))
    length = net.config.max_length
    points = np.zeros((0, length, 3))
    if candidates_path:
        _, _, candidates, _ = load_candidates(candidates_path, events_path)
        full = [c.points for c in candidates if c.length == length]
        if full:
            points = np.stack(full)
    report = run_bench(net, points, workers=workers)
    print(report.format())
    if out:
        mapping = report.to_mapping()
        mapping["provenance"] = provenance(run, "bench", checkpoint=checkpoint, candidates=candidates_path)
        with open(out, "w", encoding="utf-8") as f:
            yaml.safe_dump(mapping, f, sort_keys=False)
    return report


def run_command(args) -> None:
    run = load_run_config(args.config, args.set, args.seed)
    if args.command == 'simulate':
        cmd_simulate(run, args.n_events, args.out, args.workers)
    elif args.command == 'seed':
        cmd_seed(run, args.events, args.out, args.workers)
    elif args.command == 'train':
        cmd_train(run, args.candidates, args.events, args.out, args.history)
    elif args.command == 'track':
        cmd_track(run, args.checkpoint, args.events, args.out, args.workers)
    elif args.command == 'eval':
        cmd_eval(run, args.checkpoint, args.candidates, args.events, args.recon, args.out)
    elif args.command == 'bench':
        cmd_bench(run, args.checkpoint, args.candidates, args.events, args.out, args.workers)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit status."""
    args = parse_args(argv)
    setup_logging(verbose=args.verbose, log_file=args.log_file)
    try:
        run_command(args)
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        print("error: " + json.dumps({"type": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
