"""Mismatched-herald four-folds versus mean pair number.

Compares coincidence-mode Monte Carlo with the independent-draw estimate
``prod_j [1 - G(1 - a_j)] [1 - G(1 - b_j)]`` at the bar voltage, where the
tunable coupler does not mix the two idlers.  A lossless chip with 60 %
detectors keeps the counts large enough to see the fourth-power scaling.
"""

import argparse
import dataclasses
import math

from fockchip import analysis, chip, montecarlo as mc
from fockchip.quantum import PairNumberDistribution


def lossless(cfg, eta):
    wdm = tuple(chip.WdmCouplerSpec({k: 0.0 for k in w.pass_loss_db}, {k: math.inf for k in w.isolation_db})
                for w in cfg.wdm)
    return cfg.replace(
        coupling_loss_db=0.0, wdm=wdm,
        filters={c: dataclasses.replace(f, insertion_loss_db=0.0) for c, f in cfg.filters.items()},
        detectors={c: dataclasses.replace(d, efficiency=eta, dark_rate_hz=0.0) for c, d in cfg.detectors.items()})


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--pulses", type=float, default=4e8)
    p.add_argument("--eta", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=1)
    args = p.parse_args(argv)
    base = lossless(chip.paper_default(), args.eta)
    print("nbar,mc_count,expected,ratio")
    for nbar in (0.0125, 0.025, 0.05, 0.1):
        cfg = base.replace(voltage=16.0, herald_mismatch=True,
                           sources=tuple(dataclasses.replace(s, mean_pairs_override=nbar) for s in base.sources))
        n = int(args.pulses)
        count = analysis.accidental_estimate(mc.simulate_stream(cfg, n, args.seed, "coincidence", workers=1))
        G = PairNumberDistribution(nbar, 1 / chip.source_purity(cfg, 0)).pgf
        expected = n * float(1 - G(1 - args.eta)) ** 4
        print(f"{nbar},{count},{expected:.2f},{count / expected if expected else float('nan'):.3f}")


if __name__ == "__main__":
    main()
