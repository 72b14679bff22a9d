"""Joint optimization over a growing number of application components.

For K = 1..max apps, optimizes all weights jointly under the past-data
perplexity constraint and compares each app's test expected WER with the value
it reaches when optimized alone.
"""

import argparse
import logging
import time

import numpy as np

from grammarlm.mixture import MixtureModel
from grammarlm.optimizer import ConstraintSpec, ExpectedWerLoss, OptimizationProblem, PerplexityLoss, multi_app_optimize, optimize
from grammarlm.synthetic import build_scenario


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--max-apps", type=int, default=12)
    ap.add_argument("--seed", type=int, default=5)
    ap.add_argument("--sigma", type=float, default=1000.0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)

    sc = build_scenario(num_apps=args.max_apps, seed=args.seed)
    past = ConstraintSpec(PerplexityLoss(sc.past_corpus), args.sigma)

    single = []
    for a in sc.apps:
        pair = (sc.baseline, a.model)
        s = optimize(OptimizationProblem(MixtureModel.baseline_only(pair), (ExpectedWerLoss(a.dev_nbest),), past))
        single.append(ExpectedWerLoss(a.test_nbest).bind(pair)(np.array(s.weights)))

    print("apps\tseconds\tfeasible\tbaseline_w\tworst_rel_ewer%\tmean_rel_ewer%")
    for k in range(1, args.max_apps + 1):
        apps = sc.apps[:k]
        start = time.perf_counter()
        s = multi_app_optimize(sc.baseline, [(a.model, ExpectedWerLoss(a.dev_nbest)) for a in apps], past)
        elapsed = time.perf_counter() - start
        comps = (sc.baseline,) + tuple(a.model for a in apps)
        w = np.array(s.weights)
        rel = [100 * (ExpectedWerLoss(a.test_nbest).bind(comps)(w) / single[i] - 1) for i, a in enumerate(apps)]
        print(f"{k}\t{elapsed:.1f}\t{'yes' if s.feasible else 'no'}\t{s.weights[0]:.4f}\t{max(rel):+.2f}\t{np.mean(rel):+.2f}")


if __name__ == "__main__":
    main()
