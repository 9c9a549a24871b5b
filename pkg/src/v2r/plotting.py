"""Figures for bench reports, written next to the JSON output."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "savefig.dpi": 150,
}


def _save(fig, out_dir, name):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_batchcurve(report, out_dir):
    pts = report["points"]
    b = [p["batch_size"] for p in pts]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(b, [p["lat_mean_ms"] for p in pts], "o-", ms=3, color="tab:red", label="latency")
        ax.set_xlabel("batch size")
        ax.set_ylabel("mean latency (ms)", color="tab:red")
        ax2 = ax.twinx()
        ax2.plot(b, [p["throughput_ips"] for p in pts], "s-", ms=3, color="tab:blue", label="throughput")
        ax2.set_ylabel("throughput (items/s)", color="tab:blue")
        ax2.axvline(report["peak_batch_size"], ls=":", color="grey")
        return _save(fig, out_dir, "batchcurve.png")


def plot_keyframe(report, out_dir):
    modes = ["all_frames", "keyframe"]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2)
        ax1.bar(modes, [report[m]["inference_requests"] for m in modes], color=["grey", "tab:green"])
        ax1.set_ylabel("inference requests")
        ax2.bar(modes, [report[m]["wall_s"] for m in modes], color=["grey", "tab:green"])
        ax2.set_ylabel("wall time (s)")
        ax2.set_title(f"{report['speedup']:.1f}x faster", fontsize=9)
        return _save(fig, out_dir, "keyframe.png")


def plot_decode(report, out_dir):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.barh(["scan"], [report["fps"]], color="tab:purple")
        ax.set_xlabel(f"frames/s ({report['width']}x{report['height']} rgb8)")
        return _save(fig, out_dir, "decode.png")


def plot_match(report, out_dir):
    labels = ["single", "pool"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(labels, [report[k]["latency_ms"] for k in labels], color=["tab:orange", "tab:cyan"])
        ax.set_ylabel(f"top-{report['k']} latency (ms)")
        ax.set_title(f"{report['n']} x {report['dim']}-d", fontsize=9)
        return _save(fig, out_dir, "match.png")


PLOTTERS = {
    "batchcurve": plot_batchcurve,
    "keyframe": plot_keyframe,
    "decode": plot_decode,
    "match": plot_match,
}


def render(report, out_dir) -> str:
    return PLOTTERS[report["suite"]](report, out_dir)
