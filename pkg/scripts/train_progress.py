"""Default-configuration toy training run; prints the loss trajectory."""

import argparse
import logging

from avsync.experiments import trailing_mean, training_progress


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=500)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--history", default="history.jsonl")
    parser.add_argument("--cache", default=None)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    history = training_progress(args.steps, args.seed, cache_dir=args.cache, history_path=args.history)
    for step in range(50, args.steps + 1, 50):
        row = history[step - 1]
        print(f"step {step:4d}  total(10-step mean) {trailing_mean(history, step):8.3f}  "
              f"gan {row['gan']:.3f}  pixel {row['pixel']:.3f}  perceptual {row['perceptual']:.3f}  "
              f"sync {row['sync']:.3f}")
    early, late = trailing_mean(history, 50), trailing_mean(history, args.steps)
    print(f"ratio step {args.steps} / step 50: {late / early:.3f}")


if __name__ == "__main__":
    main()
