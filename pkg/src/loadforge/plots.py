"""SVG figures for a bench report (matplotlib, non-interactive backend)."""

from __future__ import annotations

import math
import statistics
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import LogLocator, NullLocator  # noqa: E402

FEW_COLOR = "#a0a0a0"
EXTENSIVE_COLOR = "#303030"
PRESET_COLORS = {"few": FEW_COLOR, "extensive": EXTENSIVE_COLOR}
CONFIG_ORDER = (("files", "host"), ("container", "host"), ("files", "shared"), ("container", "shared"))
CONFIG_NAMES = {
    ("files", "host"): "file reader",
    ("container", "host"): "dedicated reader",
    ("files", "shared"): "file reader\n+ shared pools",
    ("container", "shared"): "dedicated reader\n+ shared pools",
}
FILES = ("epoch_time.svg", "load_time_log.svg", "load_vs_train.svg", "few_vs_extensive.svg")
_LOG_FLOOR_MS = 1e-3


def _medians(report, attr):
    """{(reader, allocation, preset): median of attr over the case's records}."""
    groups: dict[tuple, list[float]] = {}
    for r in report.records:
        groups.setdefault((r.reader, r.allocation, r.preset), []).append(getattr(r, attr))
    return {k: statistics.median(v) for k, v in groups.items()}


def _configs(report):
    present = {(r.reader, r.allocation) for r in report.records}
    return [c for c in CONFIG_ORDER if c in present]


def _presets(report):
    present = {r.preset for r in report.records}
    return [p for p in ("few", "extensive") if p in present]


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def epoch_time_figure(report):
    """Epoch time over successive measured epochs, one line per case."""
    presets = _presets(report)
    fig, axes = plt.subplots(1, len(presets), figsize=(5 * len(presets), 3.6), squeeze=False)
    for ax, preset in zip(axes[0], presets):
        for i, case in enumerate(report.cases):
            recs = [r for r in report.case_records(i) if r.preset == preset]
            if not recs:
                continue
            recs.sort(key=lambda r: (r.repeat, r.epoch))
            ax.plot(range(1, len(recs) + 1), [r.epoch_time_ms / 1e3 for r in recs],
                    marker="o", label=CONFIG_NAMES[(case.reader, case.allocation)].replace("\n", " "))
        ax.set_title(f"{preset} augmentation")
        ax.set_xlabel("measured epoch")
        ax.set_ylabel("epoch time (s)")
        ax.legend(fontsize="small")
    fig.tight_layout()
    return fig


def load_time_log_figure(report):
    """Median data-loading time per pipeline, log10 axis with decade ticks."""
    med = _medians(report, "load_time_ms")
    configs, presets = _configs(report), _presets(report)
    fig, ax = plt.subplots(figsize=(6.5, 3.8))
    width = 0.8 / max(len(presets), 1)
    for j, preset in enumerate(presets):
        xs = [i + (j - (len(presets) - 1) / 2) * width for i in range(len(configs))]
        ys = [max(med.get((*c, preset), 0.0), _LOG_FLOOR_MS) for c in configs]
        ax.bar(xs, ys, width, color=PRESET_COLORS[preset], label=preset)
    ax.set_yscale("log")
    values = [max(v, _LOG_FLOOR_MS) for v in med.values()] or [1.0]
    # widen to whole decades so at least two ticks are always visible
    lo, hi = math.floor(math.log10(min(values))), math.ceil(math.log10(max(values)))
    ax.set_ylim(10.0 ** lo, 10.0 ** max(hi, lo + 1))
    ax.yaxis.set_major_locator(LogLocator(base=10.0, subs=(1.0,)))
    ax.yaxis.set_minor_locator(NullLocator())
    ax.set_xticks(range(len(configs)), [CONFIG_NAMES[c] for c in configs], fontsize="small")
    ax.set_ylabel("data loading time per epoch (ms)")
    ax.legend()
    fig.tight_layout()
    return fig


def load_vs_train_figure(report):
    """Training time with data-loading time stacked on top, per pipeline and preset."""
    load, train = _medians(report, "load_time_ms"), _medians(report, "train_time_ms")
    configs, presets = _configs(report), _presets(report)
    fig, ax = plt.subplots(figsize=(7, 3.8))
    labels, xs = [], []
    for i, c in enumerate(configs):
        for j, preset in enumerate(presets):
            x = i * (len(presets) + 1) + j
            t = train.get((*c, preset), 0.0) / 1e3
            l_ = load.get((*c, preset), 0.0) / 1e3
            ax.bar(x, t, color=EXTENSIVE_COLOR, label="training" if not xs else None)
            ax.bar(x, l_, bottom=t, color=FEW_COLOR, label="data loading" if not xs else None)
            total = t + l_
            if total > 0:
                ax.text(x, total, f"{100 * l_ / total:.0f}%", ha="center", va="bottom",
                        fontsize="x-small")
            xs.append(x)
            labels.append(f"{CONFIG_NAMES[c]}\n{preset}")
    ax.set_xticks(xs, labels, fontsize="xx-small")
    ax.set_ylabel("time per epoch (s)")
    ax.legend()
    fig.tight_layout()
    return fig


def few_vs_extensive_figure(report):
    """Median epoch time per pipeline, few vs extensive side by side."""
    med = _medians(report, "epoch_time_ms")
    configs, presets = _configs(report), _presets(report)
    fig, ax = plt.subplots(figsize=(6.5, 3.8))
    width = 0.8 / max(len(presets), 1)
    for j, preset in enumerate(presets):
        xs = [i + (j - (len(presets) - 1) / 2) * width for i in range(len(configs))]
        ax.bar(xs, [med.get((*c, preset), 0.0) / 1e3 for c in configs], width,
               color=PRESET_COLORS[preset], label=preset)
    ax.set_xticks(range(len(configs)), [CONFIG_NAMES[c] for c in configs], fontsize="small")
    ax.set_ylabel("median epoch time (s)")
    ax.legend()
    fig.tight_layout()
    return fig


FIGURES = (epoch_time_figure, load_time_log_figure, load_vs_train_figure, few_vs_extensive_figure)


def write_all(report, out_dir: Path) -> list[Path]:
    with matplotlib.rc_context({"svg.hashsalt": "loadforge", "svg.fonttype": "none"}):
        return [_save(make(report), out_dir / name) for make, name in zip(FIGURES, FILES)]
