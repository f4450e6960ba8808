#!/usr/bin/env python3
"""Generate the synthetic fixtures: the 20-color instruction dataset (with
mixture manifest) and the 20-record QA evaluation fixture."""

import argparse
from pathlib import Path

from patchlm.synth import make_color_dataset, make_qa_fixture


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/toy_data", help="output directory")
    parser.add_argument("--n-colors", type=int, default=20)
    parser.add_argument("--n-qa", type=int, default=20)
    args = parser.parse_args()

    out = Path(args.out)
    manifest_path, dataset_path = make_color_dataset(out / "colors", n=args.n_colors)
    qa_path = make_qa_fixture(out / "qa", n=args.n_qa)
    print(f"mixture manifest: {manifest_path}")
    print(f"instruction data: {dataset_path}")
    print(f"qa fixture:       {qa_path}")


if __name__ == "__main__":
    main()
