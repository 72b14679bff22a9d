"""Interpolation weight and test metrics for each loss and past-data constraint.

Builds the synthetic scenario (a mismatched baseline plus one application
grammar), optimizes the application weight for every combination of loss and
constraint, and prints the resulting test perplexity and expected WER. With
``--curve`` it also prints the metrics along a fixed grid of weights.
"""

import argparse
import logging

import numpy as np

from grammarlm.mixture import MixtureModel
from grammarlm.optimizer import (
    ConstraintSpec,
    ExpectedWerLoss,
    NegSquaredLoss,
    OptimizationProblem,
    PerplexityLoss,
    optimize,
)
from grammarlm.synthetic import build_scenario

CURVE = [0.0, 1e-5, 1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=5)
    ap.add_argument("--sigma", type=float, default=1000.0)
    ap.add_argument("--curve", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)

    sc = build_scenario(num_apps=1, seed=args.seed)
    app = sc.apps[0]
    comps = sc.components
    mix = MixtureModel.baseline_only(comps)
    test_ppl = PerplexityLoss(app.test).bind(comps)
    test_wer = ExpectedWerLoss(app.test_nbest).bind(comps)
    past_ppl = PerplexityLoss(sc.past_corpus).bind(comps)
    past_wer = ExpectedWerLoss(sc.past_nbest).bind(comps)

    def metrics(w):
        w = np.asarray(w, dtype=float)
        return f"{test_ppl(w):9.2f}\t{100 * test_wer(w):6.2f}\t{past_ppl(w):8.3f}\t{100 * past_wer(w):6.2f}"

    print("constraint\tloss\tlambda_app\tfeasible\tapp_ppl\tapp_ewer%\tpast_ppl\tpast_ewer%")
    print(f"-\tbaseline\t{0.0:.6f}\tyes\t{metrics([1.0, 0.0])}")
    constraints = {
        "none": None,
        "perplexity": ConstraintSpec(PerplexityLoss(sc.past_corpus), args.sigma),
        "expected_wer": ConstraintSpec(ExpectedWerLoss(sc.past_nbest), args.sigma),
    }
    losses = {
        "neg_squared": NegSquaredLoss(target=1),
        "perplexity": PerplexityLoss(app.dev),
        "expected_wer": ExpectedWerLoss(app.dev_nbest),
    }
    for cname, cons in constraints.items():
        for lname, loss in losses.items():
            s = optimize(OptimizationProblem(mix, (loss,), cons))
            print(f"{cname}\t{lname}\t{s.lambda_app:.6f}\t{'yes' if s.feasible else 'no'}\t{metrics(s.weights)}")

    if args.curve:
        print()
        print("lambda_app\tapp_ppl\tapp_ewer%\tpast_ppl\tpast_ewer%")
        for lam in CURVE:
            print(f"{lam:g}\t{metrics([1 - lam, lam])}")


if __name__ == "__main__":
    main()
