"""Toy sync-loss ablation: baseline, visual-visual, multimodal and unsupervised variants over several seeds."""

import argparse
import logging

from avsync.experiments import ToyAblationConfig, toy_ablation


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="ablation")
    parser.add_argument("--seeds", type=int, nargs="+", default=list(ToyAblationConfig.seeds))
    parser.add_argument("--steps", type=int, default=ToyAblationConfig.steps)
    parser.add_argument("--cache", default=None, help="directory for the trained toy extractors")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    result = toy_ablation(args.out, seeds=tuple(args.seeds), steps=args.steps, cache_dir=args.cache)
    metrics = ("AVS_u", "AVS_m", "AVS_v", "pixel_l1", "LSE_C", "LSE_D")
    print("variant".ljust(14) + "".join(m.rjust(10) for m in metrics))
    for variant, row in result.table.items():
        print(variant.ljust(14) + "".join(f"{row[m]:10.4f}" for m in metrics))
    print(f"runtime {result.runtime_s / 60:.1f} min")


if __name__ == "__main__":
    main()
