"""Data-parallel training loop: prune once, then per step GSE -> track -> sync -> SGD."""
from __future__ import annotations

import collections
from dataclasses import dataclass, field, replace

import numpy as np

from .collective import SyncMode, synchronize
from .data import Dataset, epoch_batches, iterations_per_epoch, shard, synthetic_dataset
from .model import Mlp, forward_backward, sgd_step
from .sparsity import (
    MaskTracker,
    PruneConfig,
    PruneMethod,
    Status,
    apply_mask,
    enforce_gradient_sparsity,
    grasp_prune,
    grasp_scores,
    layerwise_prune,
    magnitude_prune,
)
from .tensor import SparsityMask
from .transport import Communicator, LinkModel, Topology, run_simulated, run_tcp

PRUNE_BATCH_ROWS = 256


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.05
    workers: int = 8
    prune: PruneConfig = field(default_factory=PruneConfig)
    mode: SyncMode = SyncMode.FULL
    seed: int = 0
    warmup_epochs: int = 2
    stability_threshold: int = 3
    topk_rate: float = 0.1
    layer_sizes: tuple[int, ...] = (64, 128, 10)
    n_samples: int = 5000
    classes: int = 10
    compute_seconds_per_iteration: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", SyncMode(self.mode))
        object.__setattr__(self, "layer_sizes", tuple(self.layer_sizes))
        for name in ("epochs", "batch_size", "workers", "stability_threshold", "n_samples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.warmup_epochs < 0 or self.compute_seconds_per_iteration < 0:
            raise ValueError("warmup and compute cost must be non-negative")
        if self.layer_sizes[-1] != self.classes:
            raise ValueError("output layer size must equal the number of classes")

    def with_(self, **changes) -> TrainConfig:
        return replace(self, **changes)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    test_accuracy: float
    bytes_on_wire: int
    simulated_seconds: float  # cumulative since the start of the run
    mode_histogram: dict

    @property
    def dominant_mode(self) -> str:
        if not self.mode_histogram:
            return ""
        return max(sorted(self.mode_histogram), key=self.mode_histogram.get)


@dataclass
class WorkerResult:
    rank: int
    metrics: list
    params: np.ndarray
    mask: SparsityMask


def build_mask(model: Mlp, cfg: TrainConfig, train: Dataset) -> SparsityMask:
    """Pruning mask shared by all ranks: every input to it is seed-derived and rank-independent."""
    prune = cfg.prune
    if prune.method is PruneMethod.GRASP:
        rows = np.random.default_rng([cfg.seed, 0x6A5]).choice(len(train), min(PRUNE_BATCH_ROWS, len(train)),
                                                               replace=False)
        scores = grasp_scores(model, train.take(np.sort(rows)), prune.grasp_epsilon)
        if prune.scope == "layer":
            return layerwise_prune(scores, prune.ratio, model.view, lowest_first=not prune.grasp_keep_negative)
        return grasp_prune(scores, prune.ratio, prune.grasp_keep_negative)
    if prune.scope == "layer":
        return layerwise_prune(np.abs(model.params), prune.ratio, model.view)
    return magnitude_prune(model.params, prune.ratio)


def ternary_seed(base: int, rank: int, epoch: int, iteration: int, bucket: int = 0):
    return np.random.SeedSequence([base, rank, epoch, iteration, bucket])


def run_worker(comm: Communicator, cfg: TrainConfig, data=None, fault=None, on_epoch_end=None,
               schedule=None) -> WorkerResult:
    """Train one data-parallel replica.

    ``fault(rank, epoch, iteration, mask) -> mask`` may substitute the mask this
    rank advertises to the tracker and the collective (the GSE mask is never
    changed). ``on_epoch_end(rank, epoch, params, mask)`` observes each epoch.
    ``schedule(epoch) -> SyncMode`` overrides ``cfg.mode`` per epoch.
    """
    rank = comm.rank
    train, test = data if data is not None else synthetic_dataset(cfg.seed, cfg.n_samples, cfg.layer_sizes[0],
                                                                   cfg.classes)
    shards = shard(train, comm.size, cfg.seed)
    iters = iterations_per_epoch(shards, cfg.batch_size)
    my_shard = shards[rank]

    model = Mlp.initialize(cfg.layer_sizes, seed=cfg.seed)
    mask = SparsityMask.ones(model.num_params)
    tracker = MaskTracker(cfg.stability_threshold)
    clock0 = comm.clock.now
    steps = 0
    metrics = []

    for epoch in range(cfg.epochs):
        if epoch == cfg.warmup_epochs and cfg.prune.ratio > 0:
            mask = build_mask(model, cfg, train)
            model.params = apply_mask(model.params, mask)

        mode = cfg.mode if schedule is None else SyncMode(schedule(epoch))
        bytes0 = comm.bytes_sent
        hist = collections.Counter()
        losses = []
        for it, rows in enumerate(epoch_batches(my_shard, iters, cfg.seed, epoch)):
            loss, grad = forward_backward(model, train.take(rows))
            grad = enforce_gradient_sparsity(grad, mask)
            advertised = fault(rank, epoch, it, mask) if fault is not None else mask
            status = tracker.observe(advertised) if mode in (SyncMode.PACKED, SyncMode.TERNARY) else Status.UNSTABLE
            mean, stats = synchronize(grad, comm, mode, mask=advertised, status=status, epoch=epoch,
                                      seed=ternary_seed(cfg.seed, rank, epoch, it), topk_rate=cfg.topk_rate)
            if stats.mode_used is not SyncMode.FULL or mode is SyncMode.FULL:
                hist[stats.mode_used.value] += 1
            else:
                hist["fallback"] += 1
            model.params = sgd_step(model.params, mean, cfg.lr, mask)
            losses.append(loss)
            steps += 1

        metrics.append(EpochMetrics(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            test_accuracy=model.accuracy(test.features, test.labels),
            bytes_on_wire=comm.bytes_sent - bytes0,
            simulated_seconds=(comm.clock.now - clock0) + steps * cfg.compute_seconds_per_iteration,
            mode_histogram=dict(hist),
        ))
        if on_epoch_end is not None:
            on_epoch_end(rank, epoch, model.params, mask)

    return WorkerResult(rank, metrics, model.params, mask)


@dataclass
class TrainResult:
    config: TrainConfig
    workers: list  # WorkerResult by rank

    @property
    def metrics(self) -> list:
        return self.workers[0].metrics

    @property
    def params(self) -> np.ndarray:
        return self.workers[0].params


def train(cfg: TrainConfig, link: LinkModel | None = None, transport: str = "sim", topology: Topology | None = None,
          fault=None, on_epoch_end=None, schedule=None) -> TrainResult:
    """Run all ``cfg.workers`` replicas to completion over the chosen transport."""
    topology = topology or Topology.uniform(cfg.workers, link or LinkModel(1e8))
    if topology.n != cfg.workers:
        raise ValueError("topology size differs from the configured worker count")
    if transport == "sim":
        data = synthetic_dataset(cfg.seed, cfg.n_samples, cfg.layer_sizes[0], cfg.classes)
        args = [(cfg, data, fault, on_epoch_end, schedule)] * cfg.workers
        return TrainResult(cfg, run_simulated(topology, run_worker, args))
    if transport == "tcp":
        if on_epoch_end is not None:
            raise ValueError("epoch callbacks are not supported across processes")
        args = [(cfg, None, fault, None, schedule)] * cfg.workers
        return TrainResult(cfg, run_tcp(topology, run_worker, args))
    raise ValueError(f"unknown transport {transport!r}")
