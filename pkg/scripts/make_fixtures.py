"""Write a synthetic fixture corpus and its manifest."""

import argparse

from avsync.fixtures import make_fixture_set, write_fixture_manifest


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="fixtures")
    parser.add_argument("--clips", type=int, default=10)
    parser.add_argument("--frames", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    path = write_fixture_manifest(args.out, make_fixture_set(args.clips, n_frames=args.frames, seed=args.seed))
    print(path)


if __name__ == "__main__":
    main()
