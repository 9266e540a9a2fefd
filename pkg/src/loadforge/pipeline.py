"""Prefetching data-loading pipeline.

Per epoch the pipeline runs these stages, connected by bounded queues::

    reader -> host pool (fetch, decode, host ops) <-> offload pool (offload ops)
           -> collator -> output queue (consumer calls next_batch)

Work moves between stages in runs of up to eight consecutive samples of one
batch, and a slot gate caps the samples in flight at queue_depth x batch_size.
Every sample's augmentation is seeded from ``sample_seed(seed, epoch,
index)`` so output bits never depend on worker counts, pool placement or
thread scheduling.  The "offload" pool stands in for accelerator-side
preprocessing; at desk scale it is a second pool of host threads.
"""

from __future__ import annotations

import enum
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import (
    GEOMETRIC,
    AugmentChain,
    AugmentPreset,
    FusedCropNormalize,
    Normalize,
    RandomCrop,
    preset_chain,
    run_ops,
)
from .errors import EmptyDataset, InvalidArgument, PipelineError
from .sample_store import DatasetSource, SampleRng, permutation, sample_seed, sample_seeds

_POLL = 0.05
# samples per unit of work handed between threads
_TASK_SAMPLES = 8


class Pool(enum.Enum):
    HOST = "host"
    OFFLOAD = "offload"


@dataclass(frozen=True)
class HostOnly:
    name = "host"


@dataclass(frozen=True)
class Shared:
    offload_workers: int = 1
    name = "shared"


@dataclass
class PipelineConfig:
    source: DatasetSource
    batch_size: int = 32
    augment: AugmentChain | AugmentPreset | str = "few"
    allocation: HostOnly | Shared = field(default_factory=HostOnly)
    host_workers: int = 1
    queue_depth: int = 2
    preserve_order: bool = True
    global_seed: int = 0
    fuse_ops: bool = True
    drop_last: bool = True
    placement_override: dict | None = None

    def chain(self) -> AugmentChain:
        if isinstance(self.augment, AugmentChain):
            return self.augment
        return preset_chain(self.augment)

    def validate(self):
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.host_workers < 1:
            raise InvalidArgument("host_workers must be >= 1")
        if self.queue_depth < 1:
            raise InvalidArgument("queue_depth must be >= 1")
        if not isinstance(self.allocation, (HostOnly, Shared)):
            raise InvalidArgument(f"unknown allocation policy {self.allocation!r}")
        if isinstance(self.allocation, Shared) and self.allocation.offload_workers < 1:
            raise InvalidArgument("Shared allocation needs offload_workers >= 1")
        n = len(self.source)
        if n == 0:
            raise EmptyDataset("dataset has no samples")
        if self.drop_last and n < self.batch_size:
            raise InvalidArgument(
                f"batch_size {self.batch_size} exceeds dataset size {n} with drop_last"
            )


@dataclass
class StageTiming:
    wait_ns: int = 0
    decode_ns: int = 0
    augment_host_ns: int = 0
    augment_offload_ns: int = 0
    collate_ns: int = 0


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    sample_indices: np.ndarray
    epoch: int
    index: int = 0
    timing: StageTiming = field(default_factory=StageTiming, compare=False, repr=False)

    def same_content(self, other: "Batch") -> bool:
        return (
            self.epoch == other.epoch
            and np.array_equal(self.sample_indices, other.sample_indices)
            and np.array_equal(self.labels, other.labels)
            and self.features.dtype == other.features.dtype
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )


# -- chain rewriting and placement ----------------------------------------------

def optimize_chain(chain: AugmentChain, fuse: bool = True) -> AugmentChain:
    """Fuse an adjacent RandomCrop -> Normalize pair into FusedCropNormalize."""
    if not fuse:
        return chain
    ops = list(chain.ops)
    for i in range(len(ops) - 1):
        a, b = ops[i], ops[i + 1]
        if type(a) is RandomCrop and type(b) is Normalize:
            ops[i:i + 2] = [FusedCropNormalize(a.out_h, a.out_w, b.mean, b.std)]
            return AugmentChain(tuple(ops))
    return chain


def assign_ops(chain: AugmentChain, policy, override: dict | None = None) -> tuple[Pool, ...]:
    """Map each op position to a pool.

    Shared puts geometric ops on the host and photometric/normalizing ops on
    the offload pool, forcing the final op onto the offload pool if nothing
    else lands there.  ``override`` maps op positions to pools and wins.
    """
    if isinstance(policy, HostOnly):
        placement = [Pool.HOST] * len(chain)
    else:
        placement = [Pool.HOST if op.family == GEOMETRIC else Pool.OFFLOAD for op in chain]
        if placement and Pool.OFFLOAD not in placement:
            placement[-1] = Pool.OFFLOAD
    for pos, pool in (override or {}).items():
        if not 0 <= pos < len(placement):
            raise InvalidArgument(f"placement override for missing op {pos}")
        placement[pos] = Pool(pool)
    return tuple(placement)


# -- sequential reference -------------------------------------------------------

def _epoch_slices(n: int, batch_size: int, drop_last: bool) -> list[range]:
    stop = n - n % batch_size if drop_last else n
    return [range(s, min(s + batch_size, stop)) for s in range(0, stop, batch_size)]


def _collate(images, labels, indices, epoch, k) -> Batch:
    return Batch(
        features=np.stack(images).astype(np.float32, copy=False),
        labels=np.asarray(labels, dtype=np.int64),
        sample_indices=np.asarray(indices, dtype=np.uint64),
        epoch=epoch,
        index=k,
    )


def reference_epoch(config: PipelineConfig, epoch: int) -> list[Batch]:
    """The whole epoch computed in the calling thread; ground truth for tests."""
    config.validate()
    chain = optimize_chain(config.chain(), config.fuse_ops)
    order = permutation(config.global_seed, epoch, len(config.source))
    batches = []
    for k, sl in enumerate(_epoch_slices(len(order), config.batch_size, config.drop_last)):
        images, labels, indices = [], [], []
        for pos in sl:
            idx = int(order[pos])
            sample = config.source.fetch(idx)
            rng = SampleRng(sample_seed(config.global_seed, epoch, idx))
            images.append(run_ops(sample.image, chain.ops, rng).astype(np.float32, copy=False))
            labels.append(sample.label)
            indices.append(idx)
        batches.append(_collate(images, labels, indices, epoch, k))
    return batches


# -- concurrent execution -------------------------------------------------------

class _Slots:
    """Counting gate taken and returned n at a time (one wake-up per call)."""

    def __init__(self, capacity: int):
        self.free = capacity
        self.cond = threading.Condition()

    def acquire(self, n: int, timeout: float) -> bool:
        with self.cond:
            if not self.cond.wait_for(lambda: self.free >= n, timeout):
                return False
            self.free -= n
            return True

    def release(self, n: int):
        with self.cond:
            self.free += n
            self.cond.notify_all()


class _Task:
    """A run of consecutive order positions inside one batch.

    Workers hand tasks, not single samples, between stages; every sample in
    a task still gets its own seed, so grouping never changes the output.
    """

    __slots__ = ("batch", "pos", "indices", "rngs", "keys", "labels", "images", "op",
                 "decode_ns", "host_ns", "offload_ns")

    def __init__(self, batch, pos, indices, rngs):
        self.batch = batch
        self.pos = pos
        self.indices = indices
        self.rngs = rngs
        self.keys = self.labels = self.images = None
        self.op = 0
        self.decode_ns = self.host_ns = self.offload_ns = 0

    def key_at(self, j, source):
        if self.keys is not None and j < len(self.keys):
            return self.keys[j]
        return source.key_of(self.indices[j])


_END = object()


class _EpochRun:
    """Threads and queues for one epoch; discarded when the epoch ends."""

    def __init__(self, pipe: "Pipeline", epoch: int):
        self.pipe = pipe
        self.epoch = epoch
        cfg = pipe.config
        order = permutation(cfg.global_seed, epoch, len(cfg.source))
        self.slices = _epoch_slices(len(order), cfg.batch_size, cfg.drop_last)
        self.order_array = order[: self.slices[-1].stop if self.slices else 0]
        self.order = self.order_array.tolist()
        self.task_size = min(_TASK_SAMPLES, cfg.batch_size)
        capacity = cfg.queue_depth * cfg.batch_size
        # one slot per sample between the reader and the consumer
        self.slots = _Slots(capacity)
        # a task holds at least one sample, so these never fill while the
        # slot gate holds; the bound is a backstop
        self.host_q: queue.Queue = queue.Queue(capacity)
        self.offload_q: queue.Queue = queue.Queue(capacity)
        self.done_q: queue.Queue = queue.Queue(capacity)
        self.out_q: queue.Queue = queue.Queue(cfg.queue_depth)
        self.stop = threading.Event()
        self.error: PipelineError | None = None
        self.finished = False
        self._lock = threading.Lock()
        self.in_flight = 0
        self.max_in_flight = 0
        self.threads: list[threading.Thread] = []

    def start(self):
        cfg = self.pipe.config
        spawn = [(self._reader, "reader")]
        spawn += [(self._host_worker, f"host-{i}") for i in range(cfg.host_workers)]
        if isinstance(cfg.allocation, Shared):
            spawn += [(self._offload_worker, f"offload-{i}")
                      for i in range(cfg.allocation.offload_workers)]
        spawn.append((self._collator, "collator"))
        for target, name in spawn:
            t = threading.Thread(target=target, name=f"loadforge-{name}", daemon=True)
            self.threads.append(t)
            t.start()

    def shutdown(self):
        self.stop.set()
        # wake idle workers now instead of after their poll timeout
        for q in (self.host_q, self.offload_q, self.done_q):
            for _ in range(len(self.threads)):
                try:
                    q.put_nowait(None)
                except queue.Full:
                    break
        for t in self.threads:
            if t is not threading.current_thread():
                t.join()

    # -- helpers --

    def _put(self, q: queue.Queue, item) -> bool:
        while not self.stop.is_set():
            try:
                q.put(item, timeout=_POLL)
                return True
            except queue.Full:
                continue
        return False

    def _get(self, q: queue.Queue):
        while not self.stop.is_set():
            try:
                return q.get(timeout=_POLL)
            except queue.Empty:
                continue
        return None

    def _fail(self, key, exc):
        with self._lock:
            if self.error is None:
                self.error = PipelineError(key, exc)
                self.error.__cause__ = exc
        self.stop.set()

    def _route(self, task: _Task):
        ops = self.pipe.ops
        if task.op == len(ops):
            task.images = [im.astype(np.float32, copy=False) for im in task.images]
            return self._put(self.done_q, task)
        if self.pipe.placement[task.op] is Pool.HOST:
            return self._put(self.host_q, task)
        return self._put(self.offload_q, task)

    def _advance(self, task: _Task, pool: Pool, source) -> bool:
        ops, placement = self.pipe.ops, self.pipe.placement
        start = end = task.op
        while end < len(ops) and placement[end] is pool:
            end += 1
        if end == start:
            return True
        stage = ops[start:end]
        images = task.images
        for j, rng in enumerate(task.rngs):
            try:
                images[j] = run_ops(images[j], stage, rng, start=start)
            except Exception as exc:  # noqa: BLE001 - any failure poisons the epoch
                self._fail(task.key_at(j, source), exc)
                return False
        task.op = end
        return True

    def _acquire(self, n: int) -> bool:
        while not self.slots.acquire(n, _POLL):
            if self.stop.is_set():
                return False
        return True

    # -- stages --

    def _reader(self):
        cfg = self.pipe.config
        size = self.task_size
        seeds = sample_seeds(cfg.global_seed, self.epoch, self.order_array)
        for k, sl in enumerate(self.slices):
            for pos in range(sl.start, sl.stop, size):
                end = min(pos + size, sl.stop)
                indices = self.order[pos:end]
                if not self._acquire(len(indices)):
                    return
                with self._lock:
                    self.in_flight += len(indices)
                    self.max_in_flight = max(self.max_in_flight, self.in_flight)
                rngs = [SampleRng(seed) for seed in seeds[pos:end]]
                if not self._put(self.host_q, _Task(k, pos, indices, rngs)):
                    return

    def _host_worker(self):
        source = self.pipe.config.source
        while (task := self._get(self.host_q)) is not None:
            if task.images is None:
                t0 = time.perf_counter_ns()
                task.keys, task.labels, task.images = [], [], []
                for j, idx in enumerate(task.indices):
                    try:
                        sample = source.fetch(idx)
                    except Exception as exc:  # noqa: BLE001
                        self._fail(task.key_at(j, source), exc)
                        return
                    task.keys.append(sample.key)
                    task.labels.append(sample.label)
                    task.images.append(sample.image)
                task.decode_ns += time.perf_counter_ns() - t0
            t0 = time.perf_counter_ns()
            if not self._advance(task, Pool.HOST, source):
                return
            task.host_ns += time.perf_counter_ns() - t0
            self._route(task)

    def _offload_worker(self):
        source = self.pipe.config.source
        while (task := self._get(self.offload_q)) is not None:
            t0 = time.perf_counter_ns()
            if not self._advance(task, Pool.OFFLOAD, source):
                return
            task.offload_ns += time.perf_counter_ns() - t0
            self._route(task)

    def _collator(self):
        cfg = self.pipe.config
        pending: dict[int, list[_Task]] = {}
        filled: dict[int, int] = {}
        ready: dict[int, Batch] = {}
        next_emit = 0
        emitted = 0
        while emitted < len(self.slices):
            task = self._get(self.done_q)
            if task is None:
                return
            k = task.batch
            pending.setdefault(k, []).append(task)
            filled[k] = filled.get(k, 0) + len(task.indices)
            if filled[k] < len(self.slices[k]):
                continue
            tasks = sorted(pending.pop(k), key=lambda t: t.pos)
            del filled[k]
            t0 = time.perf_counter_ns()
            try:
                batch = _collate([im for t in tasks for im in t.images],
                                 [lb for t in tasks for lb in t.labels],
                                 [i for t in tasks for i in t.indices], self.epoch, k)
            except Exception as exc:  # noqa: BLE001
                self._fail(tasks[0].keys[0], exc)
                return
            tm = batch.timing
            tm.collate_ns = time.perf_counter_ns() - t0
            for t in tasks:
                tm.decode_ns += t.decode_ns
                tm.augment_host_ns += t.host_ns
                tm.augment_offload_ns += t.offload_ns
            ready[k] = batch
            while ready:
                if cfg.preserve_order:
                    if next_emit not in ready:
                        break
                    key = next_emit
                else:
                    key = next(iter(ready))
                batch = ready.pop(key)
                if not self._put(self.out_q, batch):
                    return
                n = len(batch.sample_indices)
                with self._lock:
                    self.in_flight -= n
                self.slots.release(n)
                next_emit += 1
                emitted += 1
        self._put(self.out_q, _END)


class Pipeline:
    """Concurrent epoch iterator over a :class:`PipelineConfig`.

    Call :meth:`next_batch` repeatedly with the same epoch number; it returns
    ``None`` once the epoch is exhausted.  Asking for a different epoch
    abandons whatever is in flight.
    """

    def __init__(self, config: PipelineConfig):
        config.validate()
        self.config = config
        self.chain = optimize_chain(config.chain(), config.fuse_ops)
        self.ops = self.chain.ops
        self.placement = assign_ops(self.chain, config.allocation, config.placement_override)
        self.timings: list[StageTiming] = []
        self.epoch_wait_ns = 0
        self.max_in_flight = 0
        self._run: _EpochRun | None = None

    @property
    def pools(self) -> tuple[Pool, ...]:
        if isinstance(self.config.allocation, Shared):
            return (Pool.HOST, Pool.OFFLOAD)
        return (Pool.HOST,)

    @property
    def num_batches(self) -> int:
        n, b = len(self.config.source), self.config.batch_size
        return n // b if self.config.drop_last else -(-n // b)

    def _start(self, epoch: int) -> _EpochRun:
        self._stop_run()
        self.timings = []
        self.epoch_wait_ns = 0
        run = _EpochRun(self, epoch)
        self._run = run
        run.start()
        return run

    def _stop_run(self):
        if self._run is not None:
            self._run.shutdown()
            self.max_in_flight = max(self.max_in_flight, self._run.max_in_flight)

    def next_batch(self, epoch: int) -> Batch | None:
        t0 = time.perf_counter_ns()
        run = self._run
        if run is None or run.epoch != epoch:
            run = self._start(epoch)
        if run.error is not None:
            self._raise(run)
        if run.finished:
            return None
        while True:
            try:
                item = run.out_q.get(timeout=_POLL)
                break
            except queue.Empty:
                if run.error is not None:
                    self._raise(run)
        if item is _END:
            run.finished = True
            self._stop_run()
            self.epoch_wait_ns += time.perf_counter_ns() - t0
            return None
        item.timing.wait_ns = time.perf_counter_ns() - t0
        self.epoch_wait_ns += item.timing.wait_ns
        self.timings.append(item.timing)
        return item

    def _raise(self, run: _EpochRun):
        run.finished = True
        self._stop_run()
        raise run.error

    def iter_epoch(self, epoch: int):
        """Yield every batch of ``epoch`` from a fresh run."""
        self._start(epoch)
        while (batch := self.next_batch(epoch)) is not None:
            yield batch

    def close(self):
        self._stop_run()
        self._run = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def build_pipeline(config: PipelineConfig) -> Pipeline:
    return Pipeline(config)


def next_batch(pipeline: Pipeline, epoch: int) -> Batch | None:
    return pipeline.next_batch(epoch)

