"""
Training data and the optimisation loop.

Full-length labelled candidates are split into train and test sets at
candidate level, then expanded into every prefix of length 2..full and
grouped by length. Each epoch shuffles within the length groups, runs the
same-length batches in a shuffled interleaved order, and takes one Adam
step per batch on the mean joint cost. One record per epoch is published
on the `catchprolong.train.epoch` topic.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pubsub import pub

from catch_prolong.detector import Event
from catch_prolong.follower import ellipse_norm2
from catch_prolong.loss import HeadGrads, LossConfig, joint_loss_batch, reduce_loss
from catch_prolong.metrics import MetricsRow, MetricsTable
from catch_prolong.model import CatchProlongNet
from catch_prolong.nn.optim import AdamState, adam_step, clip_by_global_norm
from catch_prolong.seed_search import TRUE_TRACK, TrackCandidate, label_for

logger = logging.getLogger("CatchProlong")

EPOCH_TOPIC = "catchprolong.train.epoch"


class TrainingDivergedError(RuntimeError):
    """The loss of a training batch became NaN or infinite."""

    def __init__(self, batch_index: int, epoch: int, loss: float):
        self.batch_index = batch_index
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch_index}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: Optional[float] = 5.0
    split: float = 0.7
    threshold: float = 0.5
    ghost_ratio: Optional[float] = 10.0
    max_candidates: Optional[int] = None
    eval_batch_size: int = 1024

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be positive")
        if not 0.0 < self.split < 1.0:
            raise ValueError(f"split must lie in (0, 1), got {self.split}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.ghost_ratio is not None and self.ghost_ratio < 0:
            raise ValueError("ghost_ratio must be non-negative or None")
        if self.max_candidates is not None and self.max_candidates < 1:
            raise ValueError("max_candidates must be positive or None")


@dataclass
class TrainingSample:
    points: np.ndarray
    label: int
    target: Optional[Tuple[float, float]] = None

    @property
    def length(self) -> int:
        return len(self.points)


@dataclass
class SampleGroup:
    """
    All samples of one prefix length. `targets` rows are NaN where
    `has_target` is False; `source` is the index of the originating
    candidate.
    """
    length: int
    points: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    has_target: np.ndarray
    source: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def sample(self, i: int) -> TrainingSample:
        target = tuple(float(v) for v in self.targets[i]) if self.has_target[i] else None
        return TrainingSample(points=self.points[i], label=int(self.labels[i]), target=target)

    def take(self, index) -> "SampleGroup":
        return SampleGroup(length=self.length, points=self.points[index], labels=self.labels[index],
                           targets=self.targets[index], has_target=self.has_target[index],
                           source=self.source[index])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float
    metrics: MetricsTable
    seconds: float = 0.0

    def to_record(self) -> Dict[str, Any]:
        # wall time stays out so reruns give identical history files
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
            "threshold": self.metrics.threshold,
            "metrics": self.metrics.to_records(),
        }


@dataclass
class TrainResult:
    net: CatchProlongNet
    history: List[EpochRecord] = field(default_factory=list)
    adam: Optional[AdamState] = None


# -- Dataset --------------------------------------------------------------------------------

def subsample_ghosts(candidates: Sequence[TrackCandidate], ratio: Optional[float],
                     rng: np.random.Generator) -> List[TrackCandidate]:
    """
    Keep every true track and at most `ratio` ghosts per true track
    (ceil), chosen at random; candidate order is preserved.
    """
    if ratio is None:
        return list(candidates)
    ghosts = [i for i, c in enumerate(candidates) if not c.is_true]
    n_true = len(candidates) - len(ghosts)
    limit = int(np.ceil(ratio * n_true))
    if len(ghosts) <= limit:
        return list(candidates)
    dropped = set(rng.choice(ghosts, size=len(ghosts) - limit, replace=False).tolist())
    return [c for i, c in enumerate(candidates) if i not in dropped]


def cap_candidates(candidates: Sequence[TrackCandidate], max_candidates: Optional[int],
                   rng: np.random.Generator) -> List[TrackCandidate]:
    """At most `max_candidates`, true tracks first, the rest random ghosts; order preserved."""
    if max_candidates is None or len(candidates) <= max_candidates:
        return list(candidates)
    true = np.array([i for i, c in enumerate(candidates) if c.is_true], dtype=np.int64)
    ghosts = np.array([i for i, c in enumerate(candidates) if not c.is_true], dtype=np.int64)
    if len(true) >= max_candidates:
        chosen = rng.choice(true, size=max_candidates, replace=False)
    else:
        chosen = np.concatenate([true, rng.choice(ghosts, size=max_candidates - len(true), replace=False)])
    return [candidates[i] for i in np.sort(chosen)]


def split_candidates(candidates: Sequence[TrackCandidate], fraction: float,
                     rng: np.random.Generator) -> Tuple[List[TrackCandidate], List[TrackCandidate]]:
    """Random candidate-level split; each side keeps the input order."""
    order = rng.permutation(len(candidates))
    n_train = int(round(fraction * len(candidates)))
    train_idx, test_idx = np.sort(order[:n_train]), np.sort(order[n_train:])
    return [candidates[i] for i in train_idx], [candidates[i] for i in test_idx]


def expand_candidates(candidates: Sequence[TrackCandidate], events: Mapping[int, Event],
                      n_stations: int) -> Dict[int, SampleGroup]:
    """
    Every prefix of length 2..n_stations+1 of every full-length candidate.

    A prefix is true when its own hits all belong to one real track, so a
    ghost may contribute true short prefixes. True prefixes shorter than
    full length carry that track's hit on the next station as regression
    target when it has one. Length-2 prefixes only train the ellipse, so
    ghosts and target-less ones are left out at that length.
    """
    full = n_stations + 1
    collected: Dict[int, Dict[str, list]] = {
        length: {"points": [], "labels": [], "targets": [], "has_target": [], "source": []}
        for length in range(2, full + 1)
    }
    lookups: Dict[int, Dict[Tuple[int, int], int]] = {}

    for index, cand in enumerate(candidates):
        if cand.length != full:
            raise ValueError(f"candidate {index} has length {cand.length}, expected {full}")
        event = events[cand.event_id]
        if cand.event_id not in lookups:
            lookups[cand.event_id] = event.true_hit_lookup()
        lookup = lookups[cand.event_id]

        for length in range(2, full + 1):
            truth = cand.track_ids[:length - 1]
            label = 1 if label_for(truth) == TRUE_TRACK else 0
            target = (np.nan, np.nan)
            has_target = False
            if label == 1 and length < full:
                ref = lookup.get((truth[0], length - 1))
                if ref is not None:
                    hit = event.hits[ref]
                    target = (hit.x, hit.y)
                    has_target = True
            if length == 2 and not has_target:
                continue
            group = collected[length]
            group["points"].append(cand.points[:length])
            group["labels"].append(label)
            group["targets"].append(target)
            group["has_target"].append(has_target)
            group["source"].append(index)

    groups = {}
    for length, data in collected.items():
        n = len(data["labels"])
        groups[length] = SampleGroup(
            length=length,
            points=np.array(data["points"], dtype=np.float64).reshape(n, length, 3),
            labels=np.array(data["labels"], dtype=np.int64),
            targets=np.array(data["targets"], dtype=np.float64).reshape(n, 2),
            has_target=np.array(data["has_target"], dtype=bool),
            source=np.array(data["source"], dtype=np.int64),
        )
    return groups


def group_sizes(groups: Mapping[int, SampleGroup]) -> Dict[int, int]:
    return {length: len(group) for length, group in sorted(groups.items())}


# -- Loss and gradients ----------------------------------------------------------------------

def batch_loss(net: CatchProlongNet, group: SampleGroup, loss_cfg: LossConfig, with_grad: bool = False):
    """
    Reduced joint cost of one same-length batch, and with `with_grad` the
    parameter gradients of that reduced cost.
    """
    heads, cache = net.forward_train(group.points)
    if not with_grad:
        values = joint_loss_batch(heads, group.labels, group.targets, loss_cfg, regress=group.has_target)
        return reduce_loss(values, loss_cfg)

    values, dheads = joint_loss_batch(heads, group.labels, group.targets, loss_cfg,
                                      regress=group.has_target, with_grad=True)
    scale = 1.0 / len(group) if loss_cfg.reduction == "mean" else 1.0
    scaled = HeadGrads(
        logits=None if dheads.logits is None else dheads.logits * scale,
        center=None if dheads.center is None else dheads.center * scale,
        semi_pre=None if dheads.semi_pre is None else dheads.semi_pre * scale,
    )
    return reduce_loss(values, loss_cfg), net.backward(cache, scaled)


def dataset_loss(net: CatchProlongNet, groups: Mapping[int, SampleGroup], loss_cfg: LossConfig,
                 batch_size: int = 1024) -> float:
    """Mean joint cost over every sample of every group (NaN when empty)."""
    total, count = 0.0, 0
    for length in sorted(groups):
        group = groups[length]
        for start in range(0, len(group), batch_size):
            chunk = group.take(slice(start, start + batch_size))
            heads, _ = net.forward_train(chunk.points)
            values = joint_loss_batch(heads, chunk.labels, chunk.targets, loss_cfg, regress=chunk.has_target)
            total += float(np.sum(values))
            count += len(chunk)
    return total / count if count else float("nan")


def make_batches(groups: Mapping[int, SampleGroup], batch_size: int,
                 rng: np.random.Generator) -> List[Tuple[int, np.ndarray]]:
    """(length, sample indices) batches: shuffled within each length, then interleaved."""
    batches = []
    for length in sorted(groups):
        order = rng.permutation(len(groups[length]))
        for start in range(0, len(order), batch_size):
            batches.append((length, order[start:start + batch_size]))
    return [batches[i] for i in rng.permutation(len(batches))]


# -- Evaluation ---------------------------------------------------------------------------------

def evaluate(net: CatchProlongNet, groups: Mapping[int, SampleGroup], threshold: float = 0.5,
             batch_size: int = 1024) -> MetricsTable:
    """
    Per-length metrics of held-out samples. Lengths with probability
    output get the thresholded confusion metrics; lengths with an ellipse
    get the mean area of true-track ellipses and the fraction of true next
    hits inside them. Empty groups give no row.
    """
    table = MetricsTable(threshold=threshold)
    for length in sorted(groups):
        group = groups[length]
        if len(group) == 0:
            logger.warning(f"No test samples of length {length}")
            continue
        probs, centers, semis = [], [], []
        for start in range(0, len(group), batch_size):
            out = net.forward_batch(group.points[start:start + batch_size])
            if out.prob is not None:
                probs.append(out.prob)
            if out.center is not None:
                centers.append(out.center)
                semis.append(out.semiaxes)

        prob = np.concatenate(probs) if probs else None
        semiaxes = inside = None
        if centers:
            center, semiaxes = np.concatenate(centers), np.concatenate(semis)
            mask = group.has_target
            inside = ellipse_norm2(group.targets[mask], center[mask], semiaxes[mask]) <= 1.0
        table.rows.append(MetricsRow.from_outputs(length, group.labels, threshold, prob=prob,
                                                  semiaxes=semiaxes, inside=inside))
    return table


# -- Loop -----------------------------------------------------------------------------------------

def check_trainable(groups: Mapping[int, SampleGroup]) -> None:
    labels = np.concatenate([g.labels for length, g in groups.items() if length >= 3] or [np.zeros(0)])
    if len(labels) == 0 or labels.min() == labels.max():
        raise ValueError("training needs at least one true and one ghost sample of length >= 3")


def train(net: CatchProlongNet, train_groups: Mapping[int, SampleGroup],
          test_groups: Optional[Mapping[int, SampleGroup]], cfg: TrainConfig,
          loss_cfg: LossConfig, seed: int = 0) -> TrainResult:
    """
    Optimise `net` in place for cfg.epochs epochs.

    Raises:
        ValueError: if the training set lacks either class.
        TrainingDivergedError: when a batch loss is not finite.
    """
    check_trainable(train_groups)
    test_groups = test_groups or {}
    rng = np.random.default_rng(seed)
    adam = AdamState.for_params(net.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    result = TrainResult(net=net, adam=adam)
    logger.info(f"Training on {group_sizes(train_groups)} samples per length for {cfg.epochs} epochs")

    batch_index = 0
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        weighted, count = 0.0, 0
        for length, index in make_batches(train_groups, cfg.batch_size, rng):
            batch = train_groups[length].take(index)
            loss, grads = batch_loss(net, batch, loss_cfg, with_grad=True)
            if not np.isfinite(loss):
                raise TrainingDivergedError(batch_index, epoch, loss)
            grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
            net.params, adam = adam_step(net.params, grads, adam)
            logger.debug(f"epoch {epoch} batch {batch_index}: length {length}, loss {loss:.6f}, |g| {norm:.3f}")
            weighted += loss * len(batch)
            count += len(batch)
            batch_index += 1

        train_loss = dataset_loss(net, train_groups, loss_cfg, cfg.eval_batch_size)
        test_loss = dataset_loss(net, test_groups, loss_cfg, cfg.eval_batch_size) if test_groups else float("nan")
        metrics = evaluate(net, test_groups, cfg.threshold, cfg.eval_batch_size)
        record = EpochRecord(epoch=epoch, train_loss=train_loss, test_loss=test_loss, metrics=metrics,
                             seconds=time.perf_counter() - started)
        result.history.append(record)
        pub.sendMessage(EPOCH_TOPIC, record=record)
        logger.info(
            f"Epoch {epoch}/{cfg.epochs}: running loss {weighted / max(count, 1):.5f}, "
            f"train {train_loss:.5f}, test {test_loss:.5f} ({record.seconds:.1f}s)"
        )
    return result


def prepare_datasets(candidates: Sequence[TrackCandidate], events: Mapping[int, Event], n_stations: int,
                     cfg: TrainConfig, seed: int):
    """
    Cap, split and expand candidates.

    Returns:
        (train groups, test groups, train candidates, test candidates).
    """
    rng = np.random.default_rng([seed, 1])
    selected = cap_candidates(candidates, cfg.max_candidates, rng)
    train_cands, test_cands = split_candidates(selected, cfg.split, rng)
    logger.info(f"Split {len(selected)} candidates into {len(train_cands)} train / {len(test_cands)} test")
    return (expand_candidates(train_cands, events, n_stations),
            expand_candidates(test_cands, events, n_stations),
            train_cands, test_cands)
