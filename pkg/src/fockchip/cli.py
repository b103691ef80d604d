"""Command-line experiment runner.

Every subcommand loads and validates a chip config, runs the analytic model or
the Monte Carlo, and writes machine-readable results into ``--out``.  Outputs
are produced in memory first and written only once everything succeeded.

Exit codes: 0 success, 2 config error, 3 fit non-convergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, chip, montecarlo
from .chip import Channel, ChipConfig, ConfigError
from .quantum import beamsplitter_unitary, output_distribution
from .tags import TagStream, _atomic_write

log = logging.getLogger("fockchip")

EXIT_OK, EXIT_CONFIG, EXIT_FIT, EXIT_IO = 0, 2, 3, 4
DESK_FRACTION = 20   # default runs simulate 1/20 of the reference duration


def _dumps(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode()


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive_int(text: str) -> int:
    value = int(float(text))
    if value <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _float_list(text: str) -> list[float]:
    """``a,b,c`` or ``start:stop:step`` (stop inclusive)."""
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] == 0:
            raise argparse.ArgumentTypeError("range must be start:stop:step with step != 0")
        start, stop, step = parts
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        if n <= 0:
            raise argparse.ArgumentTypeError("empty range")
        return [round(start + k * step, 9) for k in range(n)]
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def load(args) -> ChipConfig:
    cfg = chip.load_config(args.config) if args.config else chip.paper_default()
    return cfg.validate()


def pulse_budget(args, cfg: ChipConfig) -> tuple[int, float]:
    """Pulses to simulate and the factor that scales counts to the reference duration."""
    reference = montecarlo.pulses_for_duration(cfg, args.duration)
    if args.pulses:
        n = args.pulses
    elif args.full:
        n = reference
    else:
        n = max(1, reference // DESK_FRACTION)
    return n, reference / n


def _meta(args, cfg: ChipConfig, n_pulses: int, scale: float) -> dict:
    return {"seed": args.seed, "cfg_sha256": cfg.digest().hex(), "pulses": n_pulses,
            "scale_to_reference": scale, "reference_duration_s": args.duration}


# --- subcommands ----------------------------------------------------------------


def cmd_rate_budget(args, cfg):
    report = chip.rate_budget(cfg, args.duration)
    for name, row in report["channels"].items():
        print(f"{name}: {row['loss_db']:.2f} dB  mu={row['transmission']:.5f}  eta={row['efficiency']}")
    print(f"mean pairs per pulse: {report['mean_pairs_per_pulse']}")
    print(f"four-fold per {args.duration:g} s: {report['fourfold_expected']:.2f}")
    print(f"herald pair rate: {report['herald_pair_rate_hz']:.3f} Hz")
    return {"budget.json": _dumps(report)}


def cmd_purity(args, cfg):
    sources = []
    for j, src in enumerate(cfg.sources):
        idler_filter = cfg.filters[Channel.S1 if j == 0 else Channel.S2]
        spectral = chip.spectral_purity(src.pump_bandwidth_ghz, idler_filter.bandwidth_ghz)
        sources.append({"source": j + 1, "pump_bandwidth_ghz": src.pump_bandwidth_ghz,
                        "filter_bandwidth_ghz": idler_filter.bandwidth_ghz,
                        "spectral_purity": spectral, "model_purity": chip.source_purity(cfg, j),
                        "schmidt_modes": chip.schmidt_modes_from_purity(chip.source_purity(cfg, j))})
    g2_rows = []
    for g2, err in zip(args.g2, args.g2_err or [0.0] * len(args.g2)):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = chip.purity_from_g2(g2)
        g2_rows.append({"g2": g2, "g2_err": err, "purity": p, "purity_err": err})
        print(f"g2 = {g2} +- {err} -> purity {p:.3f} +- {err:.3f}")
    for s in sources:
        print(f"source {s['source']}: spectral purity {s['spectral_purity']:.5f}")
    return {"purity.json": _dumps({"sources": sources, "from_g2": g2_rows})}


def cmd_voltage_scan(args, cfg):
    tc = cfg.tunable_coupler
    voltages = args.voltages
    rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(0, montecarlo.C3)))
    lines = ["voltage,bar,cross,mc_bar,mc_cross,mc_photons"]
    rows = []
    for v in voltages:
        bar, cross = chip.coupler_ratio_from_voltage(tc, v)
        # single photon in port 0, exact output law, then sampled
        dist = output_distribution(beamsplitter_unitary(cross), (1, 0))
        p_bar = sum(p for occ, p in dist.items() if occ.counts[0] == 1)
        mc_bar = int(rng.binomial(args.photons, min(max(p_bar, 0.0), 1.0)))
        frac = mc_bar / args.photons
        rows.append({"voltage": v, "bar": bar, "cross": cross, "mc_bar": frac, "mc_cross": 1 - frac})
        lines.append(f"{v!r},{bar!r},{cross!r},{frac!r},{1 - frac!r},{args.photons}")
    print("\n".join(lines))
    return {"voltage.csv": ("\n".join(lines) + "\n").encode(),
            "voltage.json": _dumps({"v_bar": tc.v_bar, "v_half": tc.v_half, "points": rows,
                                    "photons_per_point": args.photons, "seed": args.seed})}


def _fourfold_counts(streams, cfg: ChipConfig) -> list[int]:
    spec = analysis.fourfold_spec(cfg.coincidence_window_ps, montecarlo.pulse_period_ps(cfg))
    return [analysis.count_nfold(s, spec)[0] for s in streams]


def cmd_hom_scan(args, cfg):
    if len(args.delays) < 5:
        raise ConfigError("a HOM scan needs at least five delay points")
    if args.voltage is not None:
        cfg = cfg.replace(voltage=args.voltage)
    n, scale = pulse_budget(args, cfg)
    plan = montecarlo.RunPlan(cfg, n, args.seed, scan=[("relative_delay_ps", args.delays)],
                              mode=args.mode, dark_counts=not args.no_dark)
    streams = montecarlo.run(plan)
    counts = _fourfold_counts(streams, cfg)
    scan = analysis.ScanResult("delay_ps", list(args.delays), counts, scale)
    for d, c in zip(args.delays, counts):
        print(f"delay {d:+8.2f} ps: {c}")
    outputs = {"scan.csv": scan.to_csv().encode(), "scan.json": scan.to_json().encode()}

    acc_plan = montecarlo.RunPlan(cfg.replace(herald_mismatch=True, relative_delay_ps=0.0), n,
                                  args.seed, mode=args.mode, dark_counts=not args.no_dark)
    accidentals = analysis.accidental_estimate(montecarlo.run(acc_plan),
                                               analysis.fourfold_spec(cfg.coincidence_window_ps,
                                                                      montecarlo.pulse_period_ps(cfg)))
    bw_hint = cfg.filters[Channel.S1].bandwidth_ghz
    try:
        fit = analysis.fit_sinc2(scan, bw_hint, fit_bandwidth=args.fit_bandwidth,
                                 fit_center=args.fit_center)
    except analysis.FitError as exc:
        best = exc.best.to_json() if exc.best else "null"
        raise analysis.FitError(f"{exc} (best so far: {best.strip()})", exc.best) from exc
    try:
        corrected = analysis.corrected_visibility(fit, accidentals)
    except ValueError:
        corrected = None
    report = {"fit": json.loads(fit.to_json()), "raw_visibility": analysis.visibility(fit),
              "accidentals": accidentals, "corrected_visibility": corrected,
              "dip_width": analysis.dip_width(fit), "truncated_pulses": sum(s.truncated for s in streams),
              "mode": args.mode, **_meta(args, cfg, n, scale)}
    print(f"raw visibility {fit.visibility:.4f} +- {fit.stderr.get('visibility', float('nan')):.4f}"
          f", amplitude {fit.amplitude:.2f}, accidentals {accidentals}")
    outputs["fit.json"] = _dumps(report)
    return outputs


def cmd_noon_histogram(args, cfg):
    n, scale = pulse_budget(args, cfg)
    period = montecarlo.pulse_period_ps(cfg)
    volts = {"noon": cfg.tunable_coupler.v_half if args.voltage is None else args.voltage,
             "bar": cfg.tunable_coupler.v_bar if args.bar_voltage is None else args.bar_voltage}
    hist = {}
    for key, v in volts.items():
        stream = montecarlo.simulate_stream(cfg.replace(voltage=v, relative_delay_ps=0.0), n,
                                            args.seed, "full", dark_counts=not args.no_dark)
        hist[key] = analysis.pair_offset_histogram(stream, args.max_offset,
                                                   cfg.coincidence_window_ps, period)
    lines = ["offset,noon_count,bar_count,noon_scaled,bar_scaled"]
    for k, off in enumerate(hist["bar"]["offsets"]):
        a, b = hist["noon"]["fourfold"][k], hist["bar"]["fourfold"][k]
        lines.append(f"{off},{a},{b},{a * scale!r},{b * scale!r}")
        print(f"offset {off}: 50:50 {a}  bar {b}")
    side = lambda h: sum(h["fourfold"][1:])
    ratio = side(hist["noon"]) / side(hist["bar"]) if side(hist["bar"]) else None
    report = {"voltages": volts, "histograms": hist, "side_peak_ratio": ratio,
              "analytic_bar_fourfold": chip.rate_budget(cfg, args.duration)["fourfold_expected"] / scale,
              **_meta(args, cfg, n, scale)}
    print(f"side-peak ratio 50:50 / bar: {ratio}")
    return {"histogram.csv": ("\n".join(lines) + "\n").encode(), "histogram.json": _dumps(report)}


def cmd_g2(args, cfg):
    j = args.source - 1
    sources = list(cfg.sources)
    if args.purity is not None:
        sources[j] = replace(sources[j], purity=args.purity)
    sources[1 - j] = replace(sources[1 - j], mean_pairs_override=0.0)
    cfg = cfg.replace(sources=tuple(sources), voltage=cfg.tunable_coupler.v_half).validate()
    n, scale = pulse_budget(args, cfg)
    stream = montecarlo.simulate_stream(cfg, n, args.seed, "full", observe=(Channel.S1, Channel.S2),
                                        dark_counts=not args.no_dark)
    g2, err = analysis.g2_hbt(stream, Channel.S1, Channel.S2, cfg.coincidence_window_ps,
                              montecarlo.pulse_period_ps(cfg), gated=not args.ungated)
    print(f"g2(0) = {g2:.4f} +- {err:.4f}")
    report = {"g2": g2, "stderr": err, "purity_estimate": g2 - 1.0,
              "model_purity": chip.source_purity(cfg, j), "source": args.source,
              "gated_singles": not args.ungated,
              "singles": {"S1": stream.singles(Channel.S1), "S2": stream.singles(Channel.S2)},
              **_meta(args, cfg, n, scale)}
    return {"g2.json": _dumps(report)}


def cmd_simulate(args, cfg):
    if args.voltage is not None:
        cfg = cfg.replace(voltage=args.voltage)
    if args.delay is not None:
        cfg = cfg.replace(relative_delay_ps=args.delay)
    n, scale = pulse_budget(args, cfg)
    stream = montecarlo.simulate_stream(cfg, n, args.seed, args.mode, dark_counts=not args.no_dark)
    print(f"{len(stream)} tags from {n} pulses")
    return {"__stream__": stream}


def cmd_coincidences(args, cfg):
    path = Path(args.tags)
    stream = TagStream.read_csv(path) if path.suffix == ".csv" else TagStream.read_binary(path)
    stream = stream if stream.is_sorted() else stream.sorted()
    spec = analysis.CoincidenceSpec(tuple(args.channels.split(",")), args.window,
                                    tuple(int(o) for o in _float_list(args.offsets)),
                                    tuple(args.shifted.split(",")) if args.shifted else (),
                                    montecarlo.pulse_period_ps(cfg))
    counts = analysis.count_nfold(stream, spec)
    report = {"channels": [c.name for c in spec.channels], "window_ps": spec.window_ps,
              "counts": {str(k): v for k, v in counts.items()},
              "singles": {c.name: stream.singles(c) for c in chip.CHANNELS}}
    print(json.dumps(report["counts"], sort_keys=True))
    return {"counts.json": _dumps(report)}


# --- plumbing -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="chip config JSON (default: bundled reference chip)")
    common.add_argument("--seed", type=_u64, default=1)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--pulses", type=_positive_int, help="pump pulses to simulate")
    common.add_argument("--full", action="store_true", help="simulate the full reference duration")
    common.add_argument("--duration", type=float, default=montecarlo.TWO_HOURS_S,
                        help="reference integration time in s (default 7200)")
    common.add_argument("--no-dark", action="store_true", help="switch dark counts off")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fockchip", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("rate-budget", parents=[common], help="analytic loss and rate budget")

    s = sub.add_parser("purity", parents=[common], help="spectral purity and g2 mapping")
    s.add_argument("--g2", type=_float_list, default=[1.96, 1.93])
    s.add_argument("--g2-err", type=_float_list, default=[0.08, 0.07])

    s = sub.add_parser("voltage-scan", parents=[common], help="coupler splitting versus voltage")
    s.add_argument("--voltages", type=_float_list, default=_float_list("0:60:2"))
    s.add_argument("--photons", type=_positive_int, default=100_000)

    s = sub.add_parser("hom-scan", parents=[common], help="four-folds versus relative delay")
    s.add_argument("--delays", type=_float_list, default=_float_list("-60:60:10"))
    s.add_argument("--voltage", type=float)
    s.add_argument("--mode", choices=("coincidence", "full"), default="coincidence")
    s.add_argument("--fit-bandwidth", action="store_true")
    s.add_argument("--fit-center", action="store_true")

    s = sub.add_parser("noon-histogram", parents=[common], help="four-folds versus pulse offset")
    s.add_argument("--voltage", type=float, help="balanced-coupler voltage (default v_half)")
    s.add_argument("--bar-voltage", type=float, help="bar-state voltage (default v_bar)")
    s.add_argument("--max-offset", type=int, default=5)

    s = sub.add_parser("g2", parents=[common], help="HBT g2(0) of one heralded source")
    s.add_argument("--source", type=int, choices=(1, 2), default=1)
    s.add_argument("--purity", type=float, help="override the source purity")
    s.add_argument("--ungated", action="store_true", help="normalise by all singles")

    s = sub.add_parser("simulate", parents=[common], help="write a raw time-tag stream")
    s.add_argument("--voltage", type=float)
    s.add_argument("--delay", type=float)
    s.add_argument("--mode", choices=("coincidence", "full"), default="full")
    s.add_argument("--csv", action="store_true", help="also write tags.csv")

    s = sub.add_parser("coincidences", parents=[common], help="count n-folds in a tag file")
    s.add_argument("tags")
    s.add_argument("--channels", default="H1,H2,S1,S2")
    s.add_argument("--window", type=float, default=1000.0)
    s.add_argument("--offsets", default="0")
    s.add_argument("--shifted", default="")
    return p


COMMANDS = {"rate-budget": cmd_rate_budget, "purity": cmd_purity, "voltage-scan": cmd_voltage_scan,
            "hom-scan": cmd_hom_scan, "noon-histogram": cmd_noon_histogram, "g2": cmd_g2,
            "simulate": cmd_simulate, "coincidences": cmd_coincidences}


def write_outputs(out_dir: Path, outputs: dict, csv: bool = False) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, blob in sorted(outputs.items()):
        if name == "__stream__":
            blob.write_binary(out_dir / "tags.fctg")
            if csv:
                blob.write_csv(out_dir / "tags.csv")
        else:
            _atomic_write(out_dir / name, blob)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        outputs = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except analysis.FitError as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        write_outputs(Path(args.out), outputs, getattr(args, "csv", False))
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
