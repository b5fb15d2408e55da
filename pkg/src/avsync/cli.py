"""Command-line entry point: ``avsync {evaluate,probe,ablate,train-toy,validate-manifest,plot,make-fixtures}``.

Exit codes: 0 when every clip succeeded, 2 when some clips failed, 1 on a
configuration or manifest error (or when every clip failed).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import AVSyncError, ManifestError
from .features import ExtractorSpec, toy_spec
from .manifest import ManifestRecord, read_manifest, validate_manifest
from .media import crop_mouth, load_clip, load_frames
from .metrics import METRICS, LandmarkTrack, lmd, params_digest, score_clip
from .report import ClipResult, build_report, emit_plots, write_report

logger = logging.getLogger("avsync")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2
EXTRACTORS = {"toy": "toy", "avhubert": "external_avhubert", "syncnet": "external_syncnet"}
GT_FIELDS = {"AVS_m": ("gt_video_path",), "AVS_v": ("gt_video_path",),
             "LMD": ("landmarks_path", "gt_landmarks_path")}


@dataclass
class RunConfiguration:
    command: str
    manifest: Optional[str] = None
    extractor: str = "toy"
    model_ref: str = ""
    metrics: tuple = ("AVS_u",)
    out: str = "avsync-out"
    seed: int = 0
    format: str = "both"
    workers: int = 1
    permissive_zero_norm: bool = False

    def check(self) -> None:
        if self.extractor not in EXTRACTORS:
            raise ManifestError(f"unknown extractor {self.extractor!r}")
        # probe metrics are sweep selectors, validated by SweepSpec
        unknown = [] if self.command == "probe" else [m for m in self.metrics if m not in METRICS]
        if unknown:
            raise ManifestError(f"unknown metrics {unknown}; choose from {', '.join(METRICS)}")
        if self.workers < 1:
            raise ManifestError("--workers must be at least 1")
        out = Path(self.out)
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        try:
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise ManifestError(f"output directory {out} is not writable: {exc}") from exc


def read_landmarks(path) -> np.ndarray:
    """(N, M, 2) landmarks from a text file with one ``x1 y1 x2 y2 ...`` row per frame."""
    rows = np.loadtxt(str(path), ndmin=2)
    if rows.shape[1] % 2:
        raise ManifestError(f"{path}: odd number of coordinates per row")
    return rows.reshape(len(rows), -1, 2)


# ---------------------------------------------------------------------------
# extractor resolution


def resolve_extractor(config: RunConfiguration, style: str = "avhubert") -> ExtractorSpec:
    """Load the requested extractor; a toy one is trained from seeded fixtures when no model is given."""
    kind = EXTRACTORS[config.extractor]
    if kind != "toy":
        return ExtractorSpec(kind=kind, model_ref=config.model_ref)
    from .toy import load_toy_extractor

    if config.model_ref:
        return toy_spec(load_toy_extractor(config.model_ref), config.model_ref)
    return toy_spec(default_toy_extractor(config.seed, style), f"fixtures-seed{config.seed}-{style}")


def default_toy_extractor(seed: int, style: str = "avhubert"):
    from .fixtures import make_fixture_set
    from .toy import SYNCNET_ARCH, ToyArch, train_toy

    arch = SYNCNET_ARCH if style == "syncnet" else ToyArch()
    return train_toy(make_fixture_set(20, seed=seed), seed=seed, arch=arch)


# ---------------------------------------------------------------------------
# evaluate


def evaluate_record(rec: ManifestRecord, spec: ExtractorSpec, metrics, permissive: bool = False) -> ClipResult:
    result = ClipResult(rec.clip_id)
    try:
        clip = load_clip(rec.video_path, rec.audio_path, rec.clip_id)
        landmarks = read_landmarks(rec.landmarks_path) if rec.landmarks_path else None
        track = crop_mouth(clip, landmarks)
        gt_track = None
        if rec.gt_video_path and any(m in ("AVS_m", "AVS_v") for m in metrics):
            gt_landmarks = read_landmarks(rec.gt_landmarks_path) if rec.gt_landmarks_path else None
            gt_track = crop_mouth(load_frames(rec.gt_video_path), gt_landmarks)
        for metric in metrics:
            if metric == "LMD":
                score = lmd(LandmarkTrack(read_landmarks(rec.landmarks_path)),
                            LandmarkTrack(read_landmarks(rec.gt_landmarks_path)), clip_id=rec.clip_id)
            else:
                score = score_clip(metric, spec, track, clip.audio, gt_track, rec.clip_id, permissive)
            result.scores[metric] = score
    except (AVSyncError, OSError, ValueError) as exc:
        logger.warning("clip %s failed: %s", rec.clip_id, exc)
        result.scores = {}
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def evaluate(config: RunConfiguration) -> tuple[dict, int]:
    """Score every manifest clip; returns the report and the exit code."""
    config.check()
    require = tuple(sorted({f for m in config.metrics for f in GT_FIELDS.get(m, ())}))
    records = read_manifest(config.manifest, require=require)
    spec = resolve_extractor(config)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(
                lambda r: evaluate_record(r, spec, config.metrics, config.permissive_zero_norm), records))
    else:
        results = [evaluate_record(r, spec, config.metrics, config.permissive_zero_norm) for r in records]
    extractor_ids = sorted({s.extractor_id for r in results for s in r.scores.values() if s.extractor_id})
    metadata = {
        "tool_version": __version__,
        "command": "evaluate",
        "extractor": config.extractor,
        "extractor_ids": extractor_ids,
        "metrics": list(config.metrics),
        "params_digest": params_digest(extractor=config.extractor, model_ref=spec.model_ref,
                                       metrics=list(config.metrics), seed=config.seed,
                                       permissive=config.permissive_zero_norm),
        "seed": config.seed,
        "permissive_zero_norm": config.permissive_zero_norm,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    report = build_report(results, config.metrics, metadata)
    write_report(report, config.out, config.format)
    failed = sum(not r.ok for r in results)
    if failed == 0:
        code = EXIT_OK
    elif failed == len(results):
        code = EXIT_CONFIG
    else:
        code = EXIT_PARTIAL
    return report, code


# ---------------------------------------------------------------------------
# probe


def probe(config: RunConfiguration, axis: str, values, scan: bool = False, plots: bool = True) -> int:
    from .probes import DEFAULT_GRIDS, ProbeClip, SweepSpec, gt_similarity_scan, run_sweep, stability_index

    config.check()
    records = read_manifest(config.manifest)
    spec = resolve_extractor(config)
    clips, failures = [], {}
    for rec in records:
        try:
            clip = load_clip(rec.video_path, rec.audio_path, rec.clip_id)
            landmarks = read_landmarks(rec.landmarks_path) if rec.landmarks_path else None
            clips.append(ProbeClip(rec.clip_id, crop_mouth(clip, landmarks), clip.audio))
        except (AVSyncError, OSError, ValueError) as exc:
            failures[rec.clip_id] = f"{type(exc).__name__}: {exc}"
    if not clips:
        raise ManifestError("no clip in the manifest could be loaded")
    sweep = SweepSpec(axis, tuple(values) if values else DEFAULT_GRIDS[axis], config.metrics, spec)
    curves = run_sweep(clips, sweep, workers=config.workers)
    out = Path(config.out)
    payload = {
        "tool_version": __version__,
        "axis": axis,
        "records": [r for c in curves.values() for r in c.to_records()],
        "stability_index": {m: float(stability_index(c)) for m, c in curves.items() if len(c.settings) > 1},
        "per_clip": {m: {cid: list(v) for cid, v in c.per_clip.items()} for m, c in curves.items()},
        "excluded": {**failures, **next(iter(curves.values())).excluded},
    }
    (out / f"sweep_{axis}.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    if plots:
        emit_plots(curves, out / "plots")
    if scan:
        scans = gt_similarity_scan(clips, spec)
        (out / "gt_similarity.json").write_text(
            json.dumps([s.to_record() for s in scans], sort_keys=True, indent=2) + "\n")
        if plots:
            emit_plots(scans, out / "plots")
    dropped = len(payload["excluded"])
    return EXIT_OK if dropped == 0 else (EXIT_CONFIG if dropped == len(records) else EXIT_PARTIAL)


# ---------------------------------------------------------------------------
# argument parsing


def _csv(value: str) -> tuple:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _numbers(value: str) -> tuple:
    return tuple(float(v) if "." in v else int(v) for v in _csv(value))


def _common(p: argparse.ArgumentParser, metrics_default: str) -> None:
    p.add_argument("--manifest", required=True, help="JSONL manifest of clips")
    p.add_argument("--extractor", choices=sorted(EXTRACTORS), default="toy")
    p.add_argument("--model-ref", default="", help="toy extractor file, or the model reference passed to the adapter")
    p.add_argument("--metrics", type=_csv, default=_csv(metrics_default), help="comma-separated list")
    p.add_argument("--out", default="avsync-out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--permissive-zero-norm", action="store_true",
                   help="score zero-norm feature rows as 0 and flag the clip instead of failing")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avsync", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", help="score clips listed in a manifest")
    _common(p, "AVS_u")
    p.add_argument("--format", choices=("records", "table", "both"), default="both")

    p = sub.add_parser("probe", help="shift or rotation sweep over manifest clips")
    _common(p, "AVS_u,AVS_v,loss_unsupervised")
    p.add_argument("--axis", choices=("shift_px", "rotation_deg"), default="shift_px")
    p.add_argument("--values", type=_numbers, default=None, help="sorted settings incl. 0; default grid otherwise")
    p.add_argument("--gt-scan", action="store_true", help="also write per-clip GT cosine similarity series")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("ablate", help="toy generator ablation over the four sync-loss variants")
    p.add_argument("--out", default="avsync-out")
    p.add_argument("--seeds", type=_numbers, default=(0, 1, 2))
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None,
                   help="train fixture seed (eval uses seed + 1); default keeps the standard protocol")

    p = sub.add_parser("train-toy", help="train a toy feature extractor on synthetic fixtures")
    p.add_argument("--out", default="avsync-out")
    p.add_argument("--style", choices=("avhubert", "syncnet"), default="avhubert")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--clips", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("validate-manifest", help="check a manifest line by line")
    p.add_argument("manifest")

    p = sub.add_parser("plot", help="re-render plots from a report.json or sweep data file")
    p.add_argument("data", help="report.json or a figure .json written by emit_plots")
    p.add_argument("--out", default=None)

    p = sub.add_parser("make-fixtures", help="write synthetic fixture clips and a manifest")
    p.add_argument("--out", default="fixtures")
    p.add_argument("--clips", type=int, default=5)
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _run(args) -> int:
    if args.command == "evaluate":
        config = RunConfiguration("evaluate", args.manifest, args.extractor, args.model_ref, args.metrics,
                                  args.out, args.seed, args.format, args.workers, args.permissive_zero_norm)
        report, code = evaluate(config)
        for metric, agg in report["aggregate"].items():
            print(f"{metric}: mean {agg['mean']} std {agg['std']} n {agg['n']}")
        failed = [c["clip_id"] for c in report["clips"] if c["status"] != "ok"]
        if failed:
            print(f"{len(failed)} clip(s) failed: {', '.join(failed)}", file=sys.stderr)
        return code

    if args.command == "probe":
        config = RunConfiguration("probe", args.manifest, args.extractor, args.model_ref, args.metrics, args.out,
                                  args.seed, "records", args.workers, args.permissive_zero_norm)
        return probe(config, args.axis, args.values, scan=args.gt_scan, plots=not args.no_plots)

    if args.command == "ablate":
        from .experiments import toy_ablation

        result = toy_ablation(args.out, seeds=tuple(int(s) for s in args.seeds), steps=args.steps,
                              fixture_seed=args.seed)
        for variant, row in result.table.items():
            print(variant, " ".join(f"{k}={v:.4f}" for k, v in sorted(row.items())))
        return EXIT_OK

    if args.command == "train-toy":
        from .fixtures import make_fixture_set
        from .toy import SYNCNET_ARCH, ToyArch, save_toy_extractor, train_toy

        arch = SYNCNET_ARCH if args.style == "syncnet" else ToyArch()
        model = train_toy(make_fixture_set(args.clips, seed=args.seed), epochs=args.epochs, seed=args.seed,
                          arch=arch)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"toy_{args.style}.pt"
        save_toy_extractor(model, path)
        print(f"{path} {model.extractor_id()} margin {model.training_summary['margin']:.3f}")
        return EXIT_OK

    if args.command == "validate-manifest":
        diags = validate_manifest(args.manifest)
        for d in diags:
            print(d)
        return EXIT_CONFIG if any(d.level == "error" for d in diags) else EXIT_OK

    if args.command == "plot":
        from .report import render_figure

        data = Path(args.data)
        out = Path(args.out) if args.out else data.parent
        payload = json.loads(data.read_text())
        if "schema_version" in payload:
            written = emit_plots(payload, out)
        else:
            out.mkdir(parents=True, exist_ok=True)
            written = [render_figure(data, out / f"{data.stem}.png")]
        for path in written:
            print(path)
        return EXIT_OK

    if args.command == "make-fixtures":
        from .fixtures import make_fixture_set, write_fixture_manifest

        path = write_fixture_manifest(args.out, make_fixture_set(args.clips, n_frames=args.frames, seed=args.seed))
        print(path)
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        code = _run(args)
    except (ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AVSyncError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logger.info("%s finished in %.1fs", args.command, time.time() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
