"""How clustering separates good relative transforms from gross outliers.

Samples for one agent pair are drawn around a true transform, with a share of
them replaced by uniform draws from a 1 m / 90 deg ball. The script reports
how often the first cluster to reach two members is the correct one, and the
safety margin (correct cluster size minus largest incorrect cluster size) after
a fixed number of samples.

    python demos/outlier_clustering.py
"""

import numpy as np

from collabrecon.alignment import PairClusterSet, RelativeTransformSample, safety_margin
from collabrecon.pipeline import is_correct
from collabrecon.relocaliser import random_perturbation
from collabrecon.se3 import compose, rotate_z, translate


def stream(rng, truth, outlier_rate):
    while True:
        if rng.random() < outlier_rate:
            yield compose(truth, random_perturbation(rng, 1.0, 90.0, gaussian=False))
        else:
            yield compose(truth, random_perturbation(rng, 0.005, 0.5, gaussian=True))


def trial(seed, outlier_rate, n_samples=60):
    rng = np.random.default_rng(seed)
    truth = compose(rotate_z(float(rng.uniform(-180, 180))), translate(*rng.uniform(-2, 2, 3)))
    clusters = PairClusterSet((0, 1))
    first_ok = None
    for i, T in zip(range(n_samples), stream(rng, truth, outlier_rate)):
        if clusters.add_sample(RelativeTransformSample((0, 1), T)) and first_ok is None:
            first_ok = is_correct(clusters.largest().blended, truth)
    return first_ok, safety_margin(clusters)


def main():
    print("outliers  first-confident-correct  mean margin after 60 samples")
    for rate in (0.0, 0.3, 0.6, 0.9):
        results = [trial(seed, rate) for seed in range(100)]
        wins = sum(bool(ok) for ok, _ in results)
        margin = np.mean([m.margin for _, m in results])
        print(f"{rate:8.0%}  {wins:>10d}/100            {margin:6.1f}")


if __name__ == "__main__":
    main()
