"""Run every scenario at publication-like statistics and collect the outputs.

Usage: python scripts/reproduce_results.py [--out results] [--seed 1] [--quick]

``--quick`` uses desk-scale run lengths (about a minute in total).
"""

import argparse
import json
import sys
from pathlib import Path

from fockchip import cli, montecarlo
from fockchip.chip import paper_default

TWO_HOURS = montecarlo.pulses_for_duration(paper_default())


def scenarios(quick: bool):
    hom = 2 * TWO_HOURS if quick else 20 * TWO_HOURS
    g2 = 3 * 10**10 if quick else 3 * 10**11
    noon = TWO_HOURS // 20 if quick else TWO_HOURS
    return {
        "rate-budget": ["rate-budget"],
        "purity": ["purity"],
        "voltage-scan": ["voltage-scan", "--voltages", "0:60:1"],
        "hom-scan": ["hom-scan", "--pulses", str(hom)],
        "hom-scan-free-width": ["hom-scan", "--pulses", str(hom), "--fit-bandwidth"],
        "noon-histogram": ["noon-histogram", "--pulses", str(noon), "--max-offset", "5"],
        "g2": ["g2", "--pulses", str(g2), "--purity", "0.96"],
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results")
    p.add_argument("--seed", default="1")
    p.add_argument("--quick", action="store_true")
    args = p.parse_args(argv)
    summary = {}
    for name, cmd in scenarios(args.quick).items():
        print(f"== {name}")
        code = cli.main([*cmd, "--seed", args.seed, "--out", str(Path(args.out) / name)])
        summary[name] = code
        if code:
            print(f"{name} exited with {code}", file=sys.stderr)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "exit_codes.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return max(summary.values())


if __name__ == "__main__":
    sys.exit(main())
