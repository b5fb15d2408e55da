"""Evaluation reports (structured JSON plus a flat CSV table) and static plots."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .errors import EmptySeries
from .metrics import SyncScore, mean_std

SCHEMA_VERSION = 1
TABLE_COLUMNS = ("LMD", "LSE_C", "LSE_D", "AVS_u", "AVS_m", "AVS_v")
REPORT_FILE = "report.json"
TABLE_FILE = "report.csv"


@dataclass
class ClipResult:
    clip_id: str
    scores: dict = field(default_factory=dict)  # metric -> SyncScore
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_record(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "status": "ok" if self.ok else "failed",
            "error": self.error,
            "scores": {m: s.to_record() for m, s in sorted(self.scores.items())},
        }


def aggregate(results: Sequence[ClipResult], metrics: Sequence[str]) -> dict:
    """Mean, population std and count per metric over successful clips."""
    out = {}
    for metric in metrics:
        values = [r.scores[metric].value for r in results if r.ok and metric in r.scores]
        mean, std = mean_std(values)
        out[metric] = {"mean": None if math.isnan(mean) else mean, "std": None if math.isnan(std) else std,
                       "n": len(values)}
    return out


def build_report(results: Sequence[ClipResult], metrics: Sequence[str], metadata: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "metadata": dict(metadata),
        "clips": [r.to_record() for r in results],
        "aggregate": aggregate(results, metrics),
    }


def recompute_aggregate(report: dict) -> dict:
    """Aggregate block rebuilt from the per-clip records of a loaded report."""
    results = [
        ClipResult(c["clip_id"], {m: SyncScore(value=s["value"], metric=m) for m, s in c["scores"].items()},
                   c["error"])
        for c in report["clips"]
    ]
    return aggregate(results, list(report["aggregate"]))


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def report_table(report: dict) -> str:
    """CSV with one row per clip and a trailing mean row; columns in results-table order (LMD, LSE, AVS)."""
    metrics = [m for m in TABLE_COLUMNS if m in report["aggregate"]]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["clip_id"] + metrics)
    for clip in report["clips"]:
        row = [clip["clip_id"]]
        for m in metrics:
            score = clip["scores"].get(m)
            row.append(f"{score['value']:.6f}" if score else "")
        writer.writerow(row)
    mean_row = ["mean"]
    for m in metrics:
        mean = report["aggregate"][m]["mean"]
        mean_row.append("" if mean is None else f"{mean:.6f}")
    writer.writerow(mean_row)
    return buf.getvalue()


def write_report(report: dict, out_dir, fmt: str = "both") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("records", "both"):
        path = out_dir / REPORT_FILE
        path.write_text(report_json(report))
        written.append(path)
    if fmt in ("table", "both"):
        path = out_dir / TABLE_FILE
        path.write_text(report_table(report))
        written.append(path)
    return written


def strip_timestamp(report: dict) -> dict:
    out = json.loads(json.dumps(report))
    out["metadata"].pop("timestamp", None)
    return out


# ---------------------------------------------------------------------------
# plots
#
# Every figure is first written as a JSON data file of panels and series,
# then rendered from that file alone, so re-rendering is always possible.


def _panel(title, xlabel, ylabel, series, marker_x=None) -> dict:
    return {"title": title, "xlabel": xlabel, "ylabel": ylabel, "series": series, "marker_x": marker_x}


def _curve_figures(curves: dict) -> dict:
    figures = {}
    for metric, curve in curves.items():
        series = [{"label": metric, "x": list(curve.settings), "y": list(curve.mean), "err": list(curve.std)}]
        figures[f"sweep_{curve.axis}_{metric}"] = [
            _panel(f"{metric} vs {curve.axis} (n={curve.n})", curve.axis, metric, series, marker_x=0)
        ]
    return figures


def _scan_figures(scans) -> dict:
    x = list(range(len(scans)))
    ids = [s.clip_id for s in scans]
    return {"gt_similarity": [
        _panel("cosine similarity, GT pairs", "clip", "CS",
               [{"label": "CS", "x": x, "y": [s.cs for s in scans], "ticks": ids}]),
        _panel("lip-sync loss, GT pairs", "clip", "-log CS",
               [{"label": "-log CS", "x": x, "y": [s.loss for s in scans], "ticks": ids}]),
    ]}


def _report_figures(report: dict) -> dict:
    figures = {}
    ok = [c for c in report["clips"] if c["status"] == "ok"]
    for metric in report["aggregate"]:
        pts = [(c["clip_id"], c["scores"][metric]["value"]) for c in ok if metric in c["scores"]]
        if not pts:
            continue
        series = [{"label": metric, "x": list(range(len(pts))), "y": [v for _, v in pts],
                   "ticks": [cid for cid, _ in pts]}]
        figures[f"report_{metric}"] = [_panel(f"{metric} per clip", "clip", metric, series)]
    return figures


def figures_for(data) -> dict:
    """Figure name -> list of panels for a report dict, a curve dict or a list of scans."""
    from .probes import SimilarityScan, StabilityCurve

    if isinstance(data, dict) and "schema_version" in data:
        figures = _report_figures(data)
    elif isinstance(data, dict) and data and all(isinstance(v, StabilityCurve) for v in data.values()):
        figures = _curve_figures(data)
    elif isinstance(data, (list, tuple)) and data and all(isinstance(s, SimilarityScan) for s in data):
        figures = _scan_figures(data)
    else:
        raise EmptySeries("nothing to plot")
    if not figures:
        raise EmptySeries("nothing to plot")
    return figures


def render_figure(data_path, image_path) -> Path:
    """Draw one PNG from a figure data file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = json.loads(Path(data_path).read_text())["panels"]
    fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 3.6), squeeze=False)
    for ax, panel in zip(axes[0], panels):
        for s in panel["series"]:
            style = "o" if len(s["x"]) == 1 else "o-"
            if s.get("err"):
                ax.errorbar(s["x"], s["y"], yerr=s["err"], fmt=style, capsize=3, label=s["label"])
            else:
                ax.plot(s["x"], s["y"], style, label=s["label"])
            if s.get("ticks") and len(s["ticks"]) <= 30:
                ax.set_xticks(s["x"])
                ax.set_xticklabels(s["ticks"], rotation=60, fontsize=6)
        if panel.get("marker_x") is not None:
            ax.axvline(panel["marker_x"], color="gray", linestyle=":", linewidth=1)
        ax.set_title(panel["title"], fontsize=9)
        ax.set_xlabel(panel["xlabel"])
        ax.set_ylabel(panel["ylabel"])
    fig.tight_layout()
    fig.savefig(str(image_path), dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(image_path)


def emit_plots(data, out_dir) -> list[Path]:
    """Write a ``.json`` data file and a ``.png`` rendered from it for every figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, panels in figures_for(data).items():
        data_path = out_dir / f"{name}.json"
        data_path.write_text(json.dumps({"name": name, "panels": panels}, sort_keys=True, indent=2) + "\n")
        written += [data_path, render_figure(data_path, out_dir / f"{name}.png")]
    return written
