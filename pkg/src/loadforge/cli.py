"""``loadforge`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 internal error.
Any long flag can also be given in a ``key = value`` file passed with
``--config``; flags on the command line win.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .augment import preset_chain
from .bench import (
    BenchCase,
    default_container_path,
    emit_csv,
    emit_plots,
    format_summary,
    full_grid,
    read_csv,
    report_dict,
    run_grid,
)
from .errors import InvalidArgument, LoadForgeError
from .pipeline import HostOnly, Pipeline, PipelineConfig, Shared
from .record_format import (
    DEFAULT_CHUNK_BYTES,
    KIND_ENCODED,
    KIND_TENSOR,
    SamplePayload,
    open_container,
    write_container,
)
from .sample_store import (
    ContainerSource,
    decode_image_file,
    encode_ppm,
    sample_seed,
    scan_directory,
    splitmix_block,
)
from .trainer import TrainConfig, train_epoch

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
THREADS_ENV = "LOADFORGE_THREADS"
DEFAULT_WORKERS = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def default_workers() -> int:
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            return max(1, min(DEFAULT_WORKERS, int(cap)))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return DEFAULT_WORKERS


# -- synthetic data -------------------------------------------------------------

def synth_dataset(out_dir, classes: int, per_class: int, h: int, w: int, seed: int = 0) -> None:
    """Write ``classes * per_class`` PPM files of seeded noise, one folder per class."""
    if min(classes, per_class, h, w) < 1:
        raise InvalidArgument("classes, per_class, height and width must all be >= 1")
    out_dir = Path(out_dir)
    nbytes = h * w * 3
    words = math.ceil(nbytes / 8)
    for c in range(classes):
        folder = out_dir / f"class_{c:03d}"
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            words_le = splitmix_block(sample_seed(seed, c, i), words).astype("<u8")
            pixels = words_le.view(np.uint8)[:nbytes]
            (folder / f"img_{i:06d}.ppm").write_bytes(encode_ppm(pixels.reshape(h, w, 3)))


def pack_directory(src_dir, dest, chunk_bytes=DEFAULT_CHUNK_BYTES, store_encoded=False):
    source = scan_directory(src_dir)

    def payloads():
        for entry in source.manifest:
            data = Path(entry.path).read_bytes()
            if store_encoded and entry.path.lower().endswith(".ppm"):
                yield SamplePayload(entry.key, entry.label, KIND_ENCODED, encoded=data)
            else:
                image = decode_image_file(data, os.path.splitext(entry.path)[1].lower())
                yield SamplePayload(entry.key, entry.label, KIND_TENSOR, image=image)

    return write_container(payloads(), chunk_bytes, dest)


def open_dataset(path):
    path = Path(path)
    if path.is_file():
        return ContainerSource.from_path(path)
    return scan_directory(path)


# -- subcommands ----------------------------------------------------------------

def cmd_pack(args) -> int:
    summary = pack_directory(args.dir, args.output, args.chunk_bytes, args.store_encoded)
    print(f"wrote {args.output}: {summary.record_count} records in "
          f"{summary.chunk_count} chunks, {summary.total_bytes} bytes")
    return EXIT_OK


def cmd_inspect(args) -> int:
    with open_container(args.container) as h:
        print(f"file:          {h.path} ({h.file_size} bytes)")
        print("header:        magic BRC1, version 1, "
              f"chunk_target_bytes {h.chunk_target_bytes}")
        print(f"footer:        index_offset {h.index_offset}, records {h.record_count}, "
              f"chunks {h.chunk_count}, magic BRCE")
        print(f"{'chunk':>7} {'first':>9} {'records':>9} {'bytes':>12}")
        for cid in range(h.chunk_count):
            ids = h.chunk_range(cid)
            nbytes = int(h.frame_lens[ids.start:ids.stop].sum())
            print(f"{cid:>7} {ids.start:>9} {len(ids):>9} {nbytes:>12}")
    return EXIT_OK


def cmd_verify(args) -> int:
    with open_container(args.container) as h:
        report = h.verify()
        if report.ok:
            print(f"{args.container}: ok ({h.record_count} records)")
            return EXIT_OK
    bad = ", ".join(str(i) for i in report.corrupt_records)
    print(f"{args.container}: corrupt records: {bad}")
    print(f"error: {len(report.corrupt_records)} corrupt record(s): {bad}", file=sys.stderr)
    return EXIT_DATA


def _parse_grid(spec: str, preset: str | None, repeats: int, epochs: int) -> list[BenchCase]:
    if spec == "all":
        presets = (preset,) if preset else ("few", "extensive")
        return full_grid(repeats, epochs, presets)
    cases = []
    for part in spec.split(","):
        fields = [f.strip() for f in part.split(":")]
        if len(fields) == 2 and preset:
            fields.append(preset)
        if len(fields) != 3:
            raise UsageError(f"case spec {part!r} is not reader:allocation:preset")
        cases.append(BenchCase(*fields, repeats=repeats, epochs=epochs))
    return cases


def cmd_bench(args) -> int:
    grid = _parse_grid(args.grid, args.preset, args.repeats, args.epochs)
    if args.cold:
        print("cold run: warm-up epoch is measured; drop the OS page cache first "
              "(e.g. `sync; echo 3 > /proc/sys/vm/drop_caches`) for a truly cold start",
              file=sys.stderr)
    report = run_grid(
        args.dataset, grid, args.seed,
        container=args.container,
        batch_size=args.batch_size,
        host_workers=args.workers,
        offload_workers=args.offload_workers,
        queue_depth=args.queue_depth,
        fuse=not args.no_fuse,
        eta=args.eta,
        short_side=args.resize,
        crop=args.crop,
        cold=args.cold,
        progress=lambda msg: print(msg, file=sys.stderr),
    )
    print(format_summary(report))
    if args.csv:
        emit_csv(report, args.csv)
        print(f"csv: {args.csv}")
    if args.plots:
        for path in emit_plots(report, args.plots):
            print(f"plot: {path}")
    if args.json:
        Path(args.json).write_text(json.dumps(report_dict(report), indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    source = open_dataset(args.dataset)
    config = PipelineConfig(
        source=source,
        batch_size=args.batch_size,
        augment=preset_chain(args.preset, short_side=args.resize, crop=args.crop),
        allocation=Shared(args.offload_workers) if args.offload_workers else HostOnly(),
        host_workers=args.workers,
        queue_depth=args.queue_depth,
        global_seed=args.seed,
        fuse_ops=not args.no_fuse,
    )
    train_cfg = TrainConfig(eta=args.eta, batch_size=args.batch_size, epochs=args.epochs)
    w = None
    try:
        with Pipeline(config) as pipe:
            for epoch in range(args.epochs):
                w, stats, train_ns = train_epoch(pipe, w, train_cfg, epoch)
                load_ns = pipe.epoch_wait_ns
                print(f"epoch {epoch}: loss/sample {stats.loss / max(stats.samples_seen, 1):.6f} "
                      f"samples {stats.samples_seen} grad_norm {stats.grad_norm:.4g} "
                      f"train {train_ns / 1e6:.1f} ms load {load_ns / 1e6:.1f} ms")
    finally:
        source.close()
    return EXIT_OK


def cmd_plot(args) -> int:
    report = read_csv(args.csv)
    for path in emit_plots(report, args.output):
        print(f"plot: {path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    synth_dataset(args.out_dir, args.classes, args.per_class, args.height, args.width, args.seed)
    print(f"wrote {args.classes * args.per_class} images to {args.out_dir}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

_BOOL_FLAGS = {"store_encoded", "no_fuse", "cold"}


def build_parser() -> argparse.ArgumentParser:
    workers = default_workers()
    parser = _Parser(prog="loadforge", description="Data-loading pipeline toolkit and benchmark.")
    parser.add_argument("--version", action="version", version=f"loadforge {__version__}")
    parser.add_argument("--config", metavar="FILE", help="key = value defaults for any flag")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pack", help="pack a class-per-folder directory into a container")
    p.add_argument("dir")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--chunk-bytes", type=int, default=DEFAULT_CHUNK_BYTES,
                   help="target chunk size in bytes (default 8 MiB)")
    p.add_argument("--store-encoded", action="store_true",
                   help="store PPM bytes (decoded at read time) instead of raw tensors")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("inspect", help="print a container's header, footer and chunk table")
    p.add_argument("container")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("verify", help="check every record CRC; exit 2 on corruption")
    p.add_argument("container")
    p.set_defaults(func=cmd_verify)

    def pipeline_flags(p, default_preset):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--epochs", type=int, default=1)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--eta", type=float, default=0.01)
        p.add_argument("--workers", type=int, default=workers, help="host pool size")
        p.add_argument("--offload-workers", type=int, default=workers,
                       help="offload pool size for shared allocation")
        p.add_argument("--queue-depth", type=int, default=2, help="prefetch depth in batches")
        p.add_argument("--preset", choices=("few", "extensive"), default=default_preset)
        p.add_argument("--resize", type=int, default=256, help="short-side resize target")
        p.add_argument("--crop", type=int, default=224, help="square crop size")
        p.add_argument("--no-fuse", action="store_true", help="disable crop+normalize fusion")

    p = sub.add_parser("bench", help="run the reader x allocation x preset grid")
    p.add_argument("dataset")
    p.add_argument("--grid", default="all",
                   help="'all' or comma-separated reader:allocation:preset cases")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--container", help="container path (default: <dataset>.brc)")
    p.add_argument("--csv", help="write per-epoch records to this CSV file")
    p.add_argument("--plots", help="write SVG figures into this directory")
    p.add_argument("--json", help="write the summary as JSON")
    p.add_argument("--cold", action="store_true", help="measure the first epoch too")
    pipeline_flags(p, None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="train logistic regression on a dataset or container")
    p.add_argument("dataset")
    pipeline_flags(p, "few")
    p.set_defaults(func=cmd_train, offload_workers=0)

    p = sub.add_parser("plot", help="render SVG figures from a bench CSV")
    p.add_argument("csv")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("synth", help="generate a synthetic PPM dataset")
    p.add_argument("out_dir")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def read_config_file(path) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _to_bool(key, text):
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"config key {key!r} expects a boolean, got {text!r}")


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_config_file(known.config)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    used = set()
    for sp in subparsers.choices.values():
        dests = {a.dest for a in sp._actions if a.option_strings}
        defaults = {}
        for key, value in values.items():
            if key in dests:
                defaults[key] = _to_bool(key, value) if key in _BOOL_FLAGS else value
                used.add(key)
        # string defaults go through each action's type= conversion
        sp.set_defaults(**defaults)
    unknown = set(values) - used
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"loadforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except InvalidArgument as exc:
        print(f"loadforge: invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LoadForgeError, OSError) as exc:
        key = getattr(exc, "key", None)
        where = f" (sample {key})" if key else ""
        print(f"loadforge: error{where}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
