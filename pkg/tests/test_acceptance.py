"""Acceptance gate: one PASS/FAIL line per criterion (see the terminal summary).

Timing criteria interleave epochs of the two configurations being compared,
so slow drift of a shared host hits both sides alike, and compare medians of
three measured epochs after one warm-up epoch each.
"""

import math
import statistics
import time
import xml.etree.ElementTree as ET
from collections import Counter

import numpy as np
import pytest

from loadforge import bench
from loadforge.augment import fused_crop_normalize, normalize, preset_chain, random_crop
from loadforge.cli import EXIT_DATA, EXIT_OK, dispatch, pack_directory, synth_dataset
from loadforge.pipeline import HostOnly, Pipeline, PipelineConfig, Shared, reference_epoch
from loadforge.record_format import (
    KIND_ENCODED,
    KIND_TENSOR,
    SamplePayload,
    crc32,
    open_container,
    write_container,
)
from loadforge.sample_store import DatasetSource, SampleRng, scan_directory
from loadforge.trainer import (
    FeatureBatch,
    TrainConfig,
    gradient,
    loss,
    newton_step,
    partial_sum_gradient,
    train_epoch,
)

pytestmark = pytest.mark.slow


def interleaved_medians(pipes: dict, batch_size: int, measured: int = 3, hook=None) -> dict:
    """Median epoch wall time per pipeline, epochs alternating between pipelines."""
    cfg = TrainConfig(eta=0.01, batch_size=batch_size)
    weights = {name: None for name in pipes}
    times = {name: [] for name in pipes}
    for epoch in range(1 + measured):
        for name, pipe in pipes.items():
            t0 = time.perf_counter()
            weights[name], _, _ = train_epoch(pipe, weights[name], cfg, epoch, hook)
            if epoch:
                times[name].append(time.perf_counter() - t0)
    return {name: statistics.median(v) for name, v in times.items()}, times


# -- 1. format suite ------------------------------------------------------------------

def test_format_suite(tmp_path, criterion):
    with criterion("format suite: roundtrip, bit-flip detection, CRC check value") as c:
        t0 = time.perf_counter()
        assert crc32(b"123456789") == 0xCBF43926

        rng = np.random.default_rng(2024)
        samples = []
        for i in range(1000):
            if i % 2:
                shape = tuple(int(v) for v in rng.integers(1, 24, 2)) + (3,)
                dtype = np.uint8 if i % 4 == 1 else np.float32
                img = (rng.integers(0, 256, shape, dtype=np.uint8) if dtype == np.uint8
                       else rng.standard_normal(shape).astype(np.float32))
                samples.append(SamplePayload(f"t/{i}", int(rng.integers(-5, 5)), KIND_TENSOR, image=img))
            else:
                body = rng.integers(0, 256, int(rng.integers(0, 3000)), dtype=np.uint8).tobytes()
                samples.append(SamplePayload(f"e/{i}", i, KIND_ENCODED, encoded=body))
        path = tmp_path / "rt.brc"
        write_container(samples, 16384, path)
        with open_container(path) as h:
            assert h.record_count == 1000
            assert all(h.read_record(i) == s for i, s in enumerate(samples))
            assert [p for cid in range(h.chunk_count) for p in h.iterate_chunk(cid)] == samples

        # every bit of every length field and payload byte of three small records
        small = [SamplePayload(f"k{i}", i, KIND_ENCODED, encoded=bytes(range(i * 7, i * 7 + 24)))
                 for i in range(3)]
        fpath = tmp_path / "flip.brc"
        write_container(small, 4096, fpath)
        with open_container(fpath) as h:
            spans = list(zip(h.offsets.tolist(), h.frame_lens.tolist()))
        pristine = fpath.read_bytes()
        flips = 0
        for rec, (off, flen) in enumerate(spans):
            positions = list(range(off, off + 8)) + list(range(off + 12, off + flen - 4))
            for pos in positions:
                for bit in range(8):
                    data = bytearray(pristine)
                    data[pos] ^= 1 << bit
                    fpath.write_bytes(data)
                    with open_container(fpath) as h:
                        assert h.verify().corrupt_records == [rec], (rec, pos, bit)
                    flips += 1
        elapsed = time.perf_counter() - t0
        c.detail = f"1000 samples, {flips} flips detected, {elapsed:.1f} s"
        assert elapsed < 30


# -- 2. fusion equivalence ------------------------------------------------------------

def test_fusion_equivalence(criterion):
    with criterion("fusion equivalence: fused == normalize(random_crop) bitwise") as c:
        rng = np.random.default_rng(7)
        cases = 2000
        for i in range(cases):
            h, w = (int(v) for v in rng.integers(1, 40, 2))
            img = (rng.integers(0, 256, (h, w, 3), dtype=np.uint8) if i % 2
                   else (rng.random((h, w, 3)) * 255).astype(np.float32))
            oh, ow = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
            mean = tuple(rng.uniform(-1, 1, 3))
            std = tuple(rng.uniform(0.05, 2, 3))
            seed = int(rng.integers(0, 2**63))
            r1, r2 = SampleRng(seed), SampleRng(seed)
            fused = fused_crop_normalize(img, r1, oh, ow, mean, std)
            composed = normalize(random_crop(img, r2, oh, ow), mean, std)
            assert fused.tobytes() == composed.tobytes() and fused.shape == composed.shape
            assert r1 == r2
        c.detail = f"{cases} cases"


# -- 3. scheduling independence -------------------------------------------------------

def test_scheduling_independence(tmp_path, criterion):
    with criterion("scheduling independence: 1024 samples x workers x allocation x fuse") as c:
        t0 = time.perf_counter()
        synth_dataset(tmp_path / "d", classes=4, per_class=256, h=36, w=40, seed=5)
        source = scan_directory(tmp_path / "d")
        assert len(source) == 1024
        chain = preset_chain("extensive", short_side=32, crop=28)
        base = dict(source=source, batch_size=32, augment=chain, global_seed=9)
        ref = reference_epoch(PipelineConfig(**base), 3)
        ref_multiset = Counter(b.sample_indices.tobytes() + b.features.tobytes() for b in ref)
        runs = 0
        for workers in (1, 2, 4, 8):
            for allocation in (HostOnly(), Shared(2)):
                for fuse in (True, False):
                    for ordered in (True, False):
                        cfg = PipelineConfig(**base, host_workers=workers, allocation=allocation,
                                             fuse_ops=fuse, preserve_order=ordered)
                        with Pipeline(cfg) as pipe:
                            got = list(pipe.iter_epoch(3))
                            assert pipe.max_in_flight <= cfg.queue_depth * cfg.batch_size
                        assert len(got) == 32
                        multiset = Counter(b.sample_indices.tobytes() + b.features.tobytes() for b in got)
                        assert multiset == ref_multiset
                        if ordered:
                            assert all(a.same_content(b) for a, b in zip(got, ref))
                        runs += 1
        elapsed = time.perf_counter() - t0
        c.detail = f"{runs} runs, {elapsed:.1f} s"
        assert elapsed < 120


# -- 4. trainer math ----------------------------------------------------------------------

def test_trainer_math(criterion):
    with criterion("trainer math: finite differences, N ln 2, shards, Newton") as c:
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(100):
            d, n = int(rng.integers(1, 21)), int(rng.integers(1, 33))
            fb = FeatureBatch(rng.standard_normal((n, d)), rng.integers(0, 2, n))
            w = rng.standard_normal(d) * 0.5
            g = gradient(w, fb)
            fd = np.zeros(d)
            for j in range(d):
                e = np.zeros(d)
                e[j] = 1e-5
                fd[j] = (loss(w + e, fb) - loss(w - e, fb)) / 2e-5
            worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-3))
        assert worst < 1e-6

        for n in (1, 10, 1000, 5000):
            fb = FeatureBatch(rng.standard_normal((n, 8)) * 50, rng.integers(0, 2, n))
            assert abs(loss(np.zeros(8), fb) - n * math.log(2)) < 1e-12 * n

        for _ in range(20):
            n, d = int(rng.integers(2, 300)), int(rng.integers(1, 10))
            fb = FeatureBatch(rng.standard_normal((n, d)), rng.integers(0, 2, n))
            w = rng.standard_normal(d)
            cuts = np.sort(rng.integers(0, n + 1, int(rng.integers(1, 8))))
            bounds = [0, *cuts.tolist(), n]
            shards = [FeatureBatch(fb.x[a:b], fb.y[a:b]) for a, b in zip(bounds, bounds[1:])]
            assert np.max(np.abs(partial_sum_gradient(w, shards) - gradient(w, fb))) < 1e-12 * n

        hand = FeatureBatch([[1.0], [-1.0]], [1, 0])
        assert newton_step([0.0], hand, 0.0).tolist() == [2.0]

        fb = FeatureBatch(rng.standard_normal((40, 2)), rng.integers(0, 2, 40))
        ridge = 1.0
        reg_grad = lambda v: np.linalg.norm(gradient(v, fb) + ridge * v)  # noqa: E731
        w_star = np.zeros(2)
        for _ in range(30):
            w_star = newton_step(w_star, fb, ridge)
        w = w_star + np.array([0.1, -0.07])
        norms = [reg_grad(w)]
        for _ in range(3):
            w = newton_step(w, fb, ridge)
            norms.append(reg_grad(w))
        ratios = [b / a**2 for a, b in zip(norms, norms[1:]) if b > 1e-13]
        assert all(b < a for a, b in zip(norms, norms[1:]))
        assert all(r <= 2 * ratios[0] for r in ratios)
        c.detail = f"worst FD rel err {worst:.1e}, Newton norms {', '.join(f'{v:.1e}' for v in norms)}"


# -- 5. dedicated reader timing -------------------------------------------------------

def test_container_reader_faster(tmp_path, criterion):
    with criterion("timing: container reader >= 5% faster than file-per-sample (50k 32x32)") as c:
        t0 = time.perf_counter()
        root = tmp_path / "d50k"
        synth_dataset(root, classes=10, per_class=5000, h=32, w=32, seed=3)
        pack_directory(root, tmp_path / "d50k.brc")
        files = scan_directory(root)
        packed = bench.ContainerSource.from_path(tmp_path / "d50k.brc")
        chain = preset_chain("few", short_side=32, crop=28)
        pipes = {
            name: Pipeline(PipelineConfig(source=src, batch_size=32, augment=chain, host_workers=2))
            for name, src in (("files", files), ("container", packed))
        }
        try:
            med, raw = interleaved_medians(pipes, 32)
        finally:
            for p in pipes.values():
                p.close()
            packed.close()
        gain = bench.speedup(med["files"], med["container"])
        elapsed = time.perf_counter() - t0
        c.detail = (f"files {med['files']:.2f} s, container {med['container']:.2f} s, "
                    f"speedup {gain:.1f}%, {elapsed:.0f} s total")
        assert gain >= 5.0
        assert elapsed < 600


# -- 6. shared allocation timing ------------------------------------------------------

def test_shared_allocation_faster(tmp_path, criterion):
    with criterion("timing: Shared(2) >= 10% faster than HostOnly, extensive, 10k 128x128") as c:
        t0 = time.perf_counter()
        root = tmp_path / "d10k"
        synth_dataset(root, classes=10, per_class=1000, h=128, w=128, seed=4)
        source = scan_directory(root)
        chain = preset_chain("extensive", short_side=128, crop=112)
        pipes = {
            name: Pipeline(PipelineConfig(source=source, batch_size=32, augment=chain,
                                          host_workers=2, allocation=alloc))
            for name, alloc in (("host", HostOnly()), ("shared", Shared(2)))
        }
        try:
            med, raw = interleaved_medians(pipes, 32)
        finally:
            for p in pipes.values():
                p.close()
        gain = bench.speedup(med["host"], med["shared"])
        elapsed = time.perf_counter() - t0
        cpus = bench.environment_summary(root)["usable_cpus"]
        c.detail = (f"host {med['host']:.2f} s, shared {med['shared']:.2f} s, speedup {gain:.1f}%, "
                    f"{cpus} usable cpu(s), {elapsed:.0f} s total")
        assert gain >= 10.0
        assert elapsed < 600


# -- 7. load fraction ---------------------------------------------------------------------

class SlowSource(DatasetSource):
    """Wraps a source and sleeps ``delay`` seconds per fetch."""

    def __init__(self, inner, delay):
        self.inner = inner
        self.delay = delay

    def __len__(self):
        return len(self.inner)

    def fetch(self, index):
        time.sleep(self.delay)
        return self.inner.fetch(index)

    def close(self):
        self.inner.close()


def test_load_fraction_tracks_ratio(tmp_path, monkeypatch, criterion):
    with criterion("load fraction tracks configured load/compute split within 10 pp") as c:
        synth_dataset(tmp_path / "lf", classes=2, per_class=200, h=8, w=8, seed=6)
        batch, delay = 8, 0.002
        real_scan = bench.scan_directory
        monkeypatch.setattr(bench, "scan_directory", lambda root: SlowSource(real_scan(root), delay))

        def run(hook):
            return bench.run_grid(
                tmp_path / "lf", [bench.BenchCase("files", "host", "few", repeats=1, epochs=3)],
                batch_size=batch, host_workers=1, queue_depth=1, short_side=8, crop=6,
                compute_hook=hook,
            )

        # calibrate the real per-batch loading cost L (sleep overshoot, reads, augmentation)
        calib = run(None)
        load_per_batch = statistics.median(r.epoch_time_ms / r.batches for r in calib.records) / 1e3
        results = []
        for target in (25.0, 40.0, 60.0):
            # loading overlaps compute, so the consumer waits L - C per batch
            compute = load_per_batch * (1 - target / 100)
            report = run(lambda fb, s=compute: time.sleep(s))
            assert all(r.batches == 50 for r in report.records)
            measured = statistics.median(bench.load_fraction(r) for r in report.records)
            results.append((target, measured))
        c.detail = f"L = {load_per_batch * 1e3:.1f} ms/batch; " + "; ".join(
            f"target {t:.0f}% measured {m:.1f}%" for t, m in results)
        assert all(abs(m - t) <= 10 for t, m in results)


# -- 8. bench outputs and verify exit codes -------------------------------------------------

def test_bench_outputs(small_dataset, small_container, tmp_path, criterion):
    with criterion("bench outputs: 8 cases, exact CSV header, 4 SVGs, verify exit codes") as c:
        report = bench.run_grid(small_dataset, bench.full_grid(), container=small_container,
                                batch_size=8, short_side=16, crop=12)
        assert len(report.cases) == 8 and len({r.case for r in report.records}) == 8
        bench.emit_csv(report, tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_bytes().split(b"\n")
        assert lines[0] == (b"case,reader,allocation,preset,repeat,epoch,batches,"
                            b"epoch_time_ms,load_time_ms,train_time_ms")
        assert len(lines) == 10 and lines[-1] == b""
        svgs = bench.emit_plots(report, tmp_path / "plots")
        assert len(svgs) == 4
        for p in svgs:
            assert ET.parse(p).getroot().tag.endswith("svg")

        packed = tmp_path / "v.brc"
        pack_directory(small_dataset, packed, chunk_bytes=4096)
        assert dispatch(["verify", str(packed)]) == EXIT_OK
        with open_container(packed) as h:
            off = int(h.offsets[5])
        data = bytearray(packed.read_bytes())
        data[off + 40] ^= 0x01
        packed.write_bytes(data)
        assert dispatch(["verify", str(packed)]) == EXIT_DATA
        c.detail = f"{len(report.records)} records, {len(svgs)} SVGs"
