"""Write a synthetic scenario (models, corpora, n-best lists, run spec) to a directory."""

import argparse
import logging

from grammarlm.synthetic import build_scenario, write_scenario


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("directory")
    ap.add_argument("--num-apps", type=int, default=1)
    ap.add_argument("--seed", type=int, default=5)
    ap.add_argument("--loss", choices=["neg_squared", "perplexity", "expected_wer"], default="expected_wer")
    ap.add_argument("--constraint", choices=["none", "perplexity", "expected_wer"], default="perplexity")
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)
    sc = build_scenario(num_apps=args.num_apps, seed=args.seed)
    print(write_scenario(sc, args.directory, loss=args.loss, constraint=args.constraint))


if __name__ == "__main__":
    main()
