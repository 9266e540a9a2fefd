"""Benchmark grid: reader x allocation x augmentation preset.

Each case trains the logistic-regression consumer on top of a pipeline and
splits every epoch's wall time into data-loading time (consumer blocked in
``next_batch``) and training time (per-batch compute).
"""

from __future__ import annotations

import csv
import itertools
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from .augment import preset_chain
from .errors import EmptyReport, InvalidArgument, LoadForgeError, MissingArtifact
from .pipeline import HostOnly, Pipeline, PipelineConfig, Shared
from .sample_store import ContainerSource, scan_directory
from .trainer import TrainConfig, train_epoch

READERS = ("files", "container")
ALLOCATIONS = ("host", "shared")
PRESETS = ("few", "extensive")
CSV_HEADER = (
    "case,reader,allocation,preset,repeat,epoch,batches,"
    "epoch_time_ms,load_time_ms,train_time_ms"
)


@dataclass(frozen=True)
class BenchCase:
    reader: str = "files"
    allocation: str = "host"
    preset: str = "few"
    repeats: int = 1
    epochs: int = 1

    def __post_init__(self):
        if self.reader not in READERS:
            raise InvalidArgument(f"reader must be one of {READERS}, got {self.reader!r}")
        if self.allocation not in ALLOCATIONS:
            raise InvalidArgument(f"allocation must be one of {ALLOCATIONS}")
        if self.preset not in PRESETS:
            raise InvalidArgument(f"preset must be one of {PRESETS}")
        if self.repeats < 1 or self.epochs < 1:
            raise InvalidArgument("repeats and epochs must be >= 1")

    @property
    def label(self) -> str:
        return f"{self.reader}/{self.allocation}/{self.preset}"


def full_grid(repeats: int = 1, epochs: int = 1, presets=PRESETS) -> list[BenchCase]:
    return [
        BenchCase(r, a, p, repeats, epochs)
        for r, a, p in itertools.product(READERS, ALLOCATIONS, presets)
    ]


@dataclass
class EpochRecord:
    case: int
    reader: str
    allocation: str
    preset: str
    repeat: int
    epoch: int
    batches: int
    epoch_time_ms: float
    load_time_ms: float
    train_time_ms: float


@dataclass
class BenchReport:
    environment: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    cases: list[BenchCase] = field(default_factory=list)
    records: list[EpochRecord] = field(default_factory=list)

    def case_records(self, case: int) -> list[EpochRecord]:
        return [r for r in self.records if r.case == case]

    def summaries(self) -> list[dict]:
        """Per-case medians over every measured (repeat, epoch) record."""
        out = []
        for i, case in enumerate(self.cases):
            recs = self.case_records(i)
            if not recs:
                continue
            epoch_ms = statistics.median(r.epoch_time_ms for r in recs)
            load_ms = statistics.median(r.load_time_ms for r in recs)
            train_ms = statistics.median(r.train_time_ms for r in recs)
            out.append({
                "case": i,
                "label": case.label,
                "reader": case.reader,
                "allocation": case.allocation,
                "preset": case.preset,
                "epoch_time_ms": epoch_ms,
                "load_time_ms": load_ms,
                "train_time_ms": train_ms,
                "load_fraction": load_fraction_ms(load_ms, epoch_ms),
            })
        return out


def speedup(t_base: float, t_opt: float) -> float:
    """Percent of ``t_base`` saved by the optimized time ``t_opt``."""
    if not t_base > 0:
        raise InvalidArgument("baseline time must be > 0")
    return 100.0 * (t_base - t_opt) / t_base


def load_fraction_ms(load_ms: float, epoch_ms: float) -> float:
    if not epoch_ms > 0:
        raise InvalidArgument("epoch time must be > 0")
    return 100.0 * load_ms / epoch_ms


def load_fraction(record: EpochRecord) -> float:
    """Data-loading wait as a percentage of the epoch's wall time."""
    return load_fraction_ms(record.load_time_ms, record.epoch_time_ms)


def default_container_path(dataset) -> Path:
    return Path(os.fspath(dataset).rstrip("/\\") + ".brc")


def environment_summary(dataset) -> dict:
    try:
        usable = len(os.sched_getaffinity(0))
    except AttributeError:
        usable = os.cpu_count()
    return {
        "cpu_count": os.cpu_count(),
        "usable_cpus": usable,
        "platform": platform.platform(),
        "python": platform.python_version(),
        "dataset": os.path.abspath(dataset),
    }


def run_grid(
    dataset,
    grid: list[BenchCase],
    seed: int = 0,
    *,
    container=None,
    batch_size: int = 32,
    host_workers: int = 2,
    offload_workers: int = 2,
    queue_depth: int = 2,
    fuse: bool = True,
    eta: float = 0.01,
    short_side: int = 256,
    crop: int = 224,
    cold: bool = False,
    compute_hook: Callable | None = None,
    progress: Callable[[str], None] | None = None,
) -> BenchReport:
    """Run every case in ``grid`` sequentially and collect per-epoch timings.

    Each repeat builds a fresh pipeline and starts training from zero
    weights.  Unless ``cold`` is set, a warm-up epoch precedes the measured
    epochs and is not recorded.
    """
    container = Path(container) if container is not None else default_container_path(dataset)
    if any(c.reader == "container" for c in grid) and not container.exists():
        raise MissingArtifact(
            f"container {str(container)!r} not found; create it with "
            f"`loadforge pack {dataset} -o {container}`"
        )
    report = BenchReport(
        environment=environment_summary(dataset),
        config={
            "seed": seed, "batch_size": batch_size, "host_workers": host_workers,
            "offload_workers": offload_workers, "queue_depth": queue_depth, "fuse": fuse,
            "eta": eta, "short_side": short_side, "crop": crop, "cold": cold,
            "container": str(container),
        },
        cases=list(grid),
    )
    sources = {}
    try:
        for case_id, case in enumerate(grid):
            if case.reader not in sources:
                sources[case.reader] = (
                    scan_directory(dataset) if case.reader == "files"
                    else ContainerSource.from_path(container)
                )
            try:
                _run_case(report, case_id, case, sources[case.reader], seed, batch_size,
                          host_workers, offload_workers, queue_depth, fuse, eta, short_side,
                          crop, cold, compute_hook, progress)
            except LoadForgeError as exc:
                exc.case = case_id
                raise
    finally:
        for src in sources.values():
            src.close()
    return report


def _run_case(report, case_id, case, source, seed, batch_size, host_workers, offload_workers,
              queue_depth, fuse, eta, short_side, crop, cold, compute_hook, progress):
    allocation = HostOnly() if case.allocation == "host" else Shared(offload_workers)
    config = PipelineConfig(
        source=source,
        batch_size=batch_size,
        augment=preset_chain(case.preset, short_side=short_side, crop=crop),
        allocation=allocation,
        host_workers=host_workers,
        queue_depth=queue_depth,
        preserve_order=True,
        global_seed=seed,
        fuse_ops=fuse,
    )
    train_cfg = TrainConfig(eta=eta, batch_size=batch_size, epochs=case.epochs)
    warmup = 0 if cold else 1
    for repeat in range(case.repeats):
        with Pipeline(config) as pipe:
            w = None
            for epoch in range(warmup + case.epochs):
                t0 = time.perf_counter_ns()
                w, stats, train_ns = train_epoch(pipe, w, train_cfg, epoch, compute_hook)
                epoch_ns = time.perf_counter_ns() - t0
                if epoch < warmup:
                    continue
                load_ns = pipe.epoch_wait_ns
                rec = EpochRecord(
                    case=case_id, reader=case.reader, allocation=case.allocation,
                    preset=case.preset, repeat=repeat, epoch=epoch - warmup,
                    batches=len(pipe.timings), epoch_time_ms=epoch_ns / 1e6,
                    load_time_ms=load_ns / 1e6, train_time_ms=train_ns / 1e6,
                )
                report.records.append(rec)
                if progress is not None:
                    progress(
                        f"[{case_id}] {case.label} repeat {repeat} epoch {rec.epoch}: "
                        f"{rec.epoch_time_ms:.1f} ms (load {rec.load_time_ms:.1f} ms)"
                    )


# -- outputs --------------------------------------------------------------------

def emit_csv(report: BenchReport, path) -> None:
    if not report.records:
        raise EmptyReport("report has no epoch records")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER.split(","))
        for r in report.records:
            writer.writerow([
                r.case, r.reader, r.allocation, r.preset, r.repeat, r.epoch, r.batches,
                f"{r.epoch_time_ms:.3f}", f"{r.load_time_ms:.3f}", f"{r.train_time_ms:.3f}",
            ])


def read_csv(path) -> BenchReport:
    """Rebuild a report (records and cases, no environment) from ``emit_csv`` output."""
    report = BenchReport()
    cases: dict[int, BenchCase] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or ",".join(header) != CSV_HEADER:
            raise LoadForgeError(f"{path}: not a loadforge bench CSV")
        for row in reader:
            if not row:
                continue
            case, rd, alloc, preset = int(row[0]), row[1], row[2], row[3]
            rec = EpochRecord(case, rd, alloc, preset, int(row[4]), int(row[5]), int(row[6]),
                              float(row[7]), float(row[8]), float(row[9]))
            report.records.append(rec)
            cases.setdefault(case, (rd, alloc, preset))
    if not report.records:
        raise EmptyReport(f"{path} holds no records")
    for i in range(max(cases) + 1):
        rd, alloc, preset = cases.get(i, ("files", "host", "few"))
        recs = report.case_records(i)
        report.cases.append(BenchCase(
            rd, alloc, preset,
            repeats=max((r.repeat for r in recs), default=0) + 1,
            epochs=max((r.epoch for r in recs), default=0) + 1,
        ))
    return report


def format_summary(report: BenchReport) -> str:
    lines = []
    env = report.environment
    if env:
        lines.append(
            f"cpus: {env.get('usable_cpus')} usable / {env.get('cpu_count')} total; "
            f"dataset: {env.get('dataset')}"
        )
    lines.append(f"{'case':<28}{'epoch ms':>12}{'load ms':>12}{'train ms':>12}{'load %':>9}")
    summaries = report.summaries()
    for s in summaries:
        lines.append(
            f"{s['case']:>2} {s['label']:<25}{s['epoch_time_ms']:>12.1f}{s['load_time_ms']:>12.1f}"
            f"{s['train_time_ms']:>12.1f}{s['load_fraction']:>9.1f}"
        )
    by_key = {(s["reader"], s["allocation"], s["preset"]): s["epoch_time_ms"] for s in summaries}
    for preset in PRESETS:
        base = by_key.get(("files", "host", preset))
        if not base:
            continue
        for reader, alloc in (("container", "host"), ("files", "shared"), ("container", "shared")):
            opt = by_key.get((reader, alloc, preset))
            if opt is not None:
                lines.append(
                    f"speedup {preset:<9} {reader}/{alloc} vs files/host: "
                    f"{speedup(base, opt):+.1f}%"
                )
    return "\n".join(lines)


def emit_plots(report: BenchReport, out_dir) -> list[Path]:
    """Write the four SVG figures and return their paths."""
    from . import plots

    if not report.records:
        raise EmptyReport("report has no epoch records")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return plots.write_all(report, out_dir)


def report_dict(report: BenchReport) -> dict:
    return {
        "environment": report.environment,
        "config": report.config,
        "cases": [asdict(c) for c in report.cases],
        "summaries": report.summaries(),
    }
