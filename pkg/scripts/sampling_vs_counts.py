"""Perplexity of sampled-data models against the exact-count model.

For each density fixture, trains models on N sampled sentences for a range of
N and reports their perplexity on a held-out sample next to the exact model.
"""

import argparse
import logging

from grammarlm.lm import EvalCorpus, perplexity, train_exact, train_from_samples
from grammarlm.synthetic import count_paths, density_fixtures
from grammarlm.wfst import sample_paths


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[100, 1_000, 10_000, 100_000])
    ap.add_argument("--order", type=int, default=3)
    ap.add_argument("--test-size", type=int, default=2000)
    ap.add_argument("--seeds", type=int, default=3, help="sampling seeds averaged per size")
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)

    header = ["grammar", "nt_pairs", "paths", "exact"] + [f"N={n}" for n in args.sizes]
    print("\t".join(header))
    for fx in density_fixtures():
        f = fx.fst()
        test = EvalCorpus(tuple(tuple(s) for s in sample_paths(f, args.test_size, 999)))
        exact = perplexity(train_exact(f, args.order), test)
        row = [fx.name, str(fx.nonterminal_pairs), str(count_paths(f)), f"{exact:.3f}"]
        for n in args.sizes:
            ppl = [perplexity(train_from_samples(f, n, seed, args.order), test) for seed in range(args.seeds)]
            row.append(f"{sum(ppl) / len(ppl):.3f}")
        print("\t".join(row))


if __name__ == "__main__":
    main()
