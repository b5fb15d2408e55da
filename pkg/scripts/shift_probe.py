"""Shift sweep with a long-window and a short-window toy extractor; prints stability indices."""

import argparse

from avsync.experiments import ToyAblationConfig, toy_extractors
from avsync.fixtures import make_fixture_set
from avsync.probes import ProbeClip, default_sweep, run_sweep, stability_index
from avsync.report import emit_plots


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="shift_probe")
    parser.add_argument("--clips", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--cache", default=None)
    args = parser.parse_args()
    clips = [ProbeClip(fx.clip_id, fx.track(), fx.clip.audio)
             for fx in make_fixture_set(args.clips, seed=args.seed)]
    metrics = ("AVS_u", "loss_unsupervised")
    for name, spec in zip(("avhubert", "syncnet"), toy_extractors(ToyAblationConfig(), args.cache)):
        curves = run_sweep(clips, default_sweep("shift_px", metrics, spec))
        emit_plots(curves, f"{args.out}/{name}")
        for metric, curve in curves.items():
            print(f"{name:9s} {metric:18s} stability(|s|<=8) {float(stability_index(curve, 8)):.4f}  "
                  f"means {[round(m, 4) for m in curve.mean]}")


if __name__ == "__main__":
    main()
