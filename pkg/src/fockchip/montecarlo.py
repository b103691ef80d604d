"""Pulse-resolved Monte Carlo of the chip, producing time-tag streams.

Two paths share the same physics:

* :func:`simulate_pulse` follows one pump pulse photon by photon.  It is slow
  and serves as the reference.
* :func:`run` processes pulse chunks in bulk.  A photon that cannot reach an
  observed detector leaves no trace, so each source is reduced to the joint law
  of its *live* signal and idler counts and only pulses holding at least one
  live photon are drawn (geometric gaps between active pulses).  Losses that are
  equal on both C3 outputs commute with the coupler and are applied before it.

``mode="coincidence"`` keeps only pulses in which both sources hold live
photons.  Every event needing both H1 and H2 lies in that ensemble, so
four-fold statistics are exact while the cost scales with the number of such
pulses rather than with the number of pump pulses.

Random numbers come from ``SeedSequence(seed, spawn_key=(chunk, stage, sub))``.
Chunk boundaries depend only on the scan-independent part of the config, and
the pair-generation stage never looks at delay or voltage, so scan points share
their pair draws.
"""

from __future__ import annotations

import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import chip
from .chip import CHANNELS, Channel, ChipConfig
from .quantum import (PairNumberDistribution, beamsplitter_unitary, loss_thin,
                      multilabel_distribution, output_distribution, sample_pair_count, sinc)
from .tags import TagStream, TimeTag

log = logging.getLogger(__name__)

PAIRS, ROUTE, LABELS, C3, DETECT, DARK = range(6)
SCAN_PARAMETERS = ("relative_delay_ps", "voltage")
TWO_HOURS_S = 7200.0
TABLE_TAIL = 1e-20
EVENTS_PER_CHUNK = 1 << 19


def stage_rng(seed: int, chunk: int, stage: int, sub: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(chunk), stage, sub)))


def pulses_for_duration(cfg: ChipConfig, duration_s: float = TWO_HOURS_S) -> int:
    return int(round(cfg.rep_rate_hz * duration_s))


def pulse_times(index, rep_rate_hz: float, resolution_ps: int) -> np.ndarray:
    """Pulse emission times in ps, rounded to the tagger resolution, overflow-free."""
    period = Fraction(10 ** 12) / (Fraction(rep_rate_hz).limit_denominator(10 ** 9) * int(resolution_ps))
    num, den = period.numerator, period.denominator
    idx = np.asarray(index, dtype=np.int64)
    q, r = np.divmod(idx, den)
    return (q * num + (2 * r * num + den) // (2 * den)) * int(resolution_ps)


def pulse_period_ps(cfg: ChipConfig) -> float:
    return 1e12 / cfg.rep_rate_hz


# --- per-configuration constants ----------------------------------------------


@dataclass(frozen=True)
class SourcePaths:
    """Per-pair survival probabilities of one source, detection included."""

    signal_to_herald: float
    signal_to_coupler: float
    idler_to_coupler: float
    idler_to_herald: float

    @property
    def signal_live(self) -> float:
        return self.signal_to_herald + self.signal_to_coupler

    @property
    def idler_live(self) -> float:
        return self.idler_to_coupler + self.idler_to_herald


def _observed(observe) -> frozenset:
    return frozenset(CHANNELS) if observe is None else frozenset(chip.parse_channel(c) for c in observe)


def herald_transmission(cfg: ChipConfig, source: int, wavelength_nm: float, observe) -> float:
    ch = (Channel.H1, Channel.H2)[source]
    if ch not in observe:
        return 0.0
    return (chip.db_to_linear(cfg.coupling_loss_db) * cfg.filters[ch].transmission(wavelength_nm)
            * cfg.detectors[ch].efficiency)


def coupler_output_transmission(cfg: ChipConfig, wavelength_nm: float, observe):
    """Per-output transmission after C3, the part pulled in front of it, and the residual."""
    f = np.array([
        chip.db_to_linear(cfg.coupling_loss_db) * cfg.filters[ch].transmission(wavelength_nm)
        * cfg.detectors[ch].efficiency if ch in observe else 0.0
        for ch in (Channel.S1, Channel.S2)])
    if f.min() > 0:
        pulled = float(f.min())
    elif f.max() > 0:
        pulled = 1.0
    else:
        pulled = 0.0
    residual = f / pulled if pulled > 0 else np.zeros(2)
    return f, pulled, residual


def source_paths(cfg: ChipConfig, source: int, observe=None) -> SourcePaths:
    observe = _observed(observe)
    src, wdm = cfg.sources[source], cfg.wdm[source]
    s_int, s_x, _ = chip.wdm_route_probabilities(wdm, src.signal_wavelength_nm)
    i_int, i_x, _ = chip.wdm_route_probabilities(wdm, src.idler_wavelength_nm)
    return SourcePaths(
        signal_to_herald=s_int * herald_transmission(cfg, source, src.signal_wavelength_nm, observe),
        signal_to_coupler=s_x * coupler_output_transmission(cfg, src.signal_wavelength_nm, observe)[1],
        idler_to_coupler=i_int * coupler_output_transmission(cfg, src.idler_wavelength_nm, observe)[1],
        idler_to_herald=i_x * herald_transmission(cfg, source, src.idler_wavelength_nm, observe),
    )


def pair_distribution(cfg: ChipConfig, source: int) -> PairNumberDistribution:
    nbar = chip.mean_pairs_per_pulse(cfg.sources[source])
    return PairNumberDistribution(nbar, chip.schmidt_modes_from_purity(chip.source_purity(cfg, source)))


def live_count_table(dist: PairNumberDistribution, signal_live: float, idler_live: float,
                     decorrelated: bool = False) -> np.ndarray:
    """Joint pmf of (live signals, live idlers) for one pulse of one source.

    With ``decorrelated`` the two counts come from independent pair numbers, as
    when the herald filter selects a different spectral slice than the idler
    filter.
    """
    n_max = dist.support_bound(TABLE_TAIL)
    pmf = dist.pmf(n_max)
    n = np.arange(n_max + 1)
    k = np.arange(n_max + 1)
    bs = _thinning_matrix(n, k, signal_live)   # [n, ns]
    bi = _thinning_matrix(n, k, idler_live)    # [n, ni]
    if decorrelated:
        table = np.outer(pmf @ bs, pmf @ bi)
    else:
        table = np.einsum("n,ns,ni->si", pmf, bs, bi)
    return table / table.sum()


def _thinning_matrix(n, k, p):
    # scipy's incomplete-beta path overflows for subnormal p; such photons never register
    p = 0.0 if p < 1e-200 else min(float(p), 1.0)
    return stats.binom.pmf(k[None, :], n[:, None], p)


@dataclass
class _SourceTable:
    q_active: float
    cdf: np.ndarray
    shape: tuple

    @classmethod
    def build(cls, table: np.ndarray) -> "_SourceTable":
        flat = table.ravel().copy()
        q = float(1.0 - flat[0])
        flat[0] = 0.0
        total = flat.sum()
        cdf = np.cumsum(flat / total) if total > 0 else np.zeros_like(flat)
        return cls(q if total > 0 else 0.0, cdf, table.shape)

    def sample(self, rng: np.random.Generator, size: int):
        idx = np.searchsorted(self.cdf, rng.random(size), side="right")
        idx = np.minimum(idx, self.cdf.size - 1)
        return np.unravel_index(idx, self.shape)


@dataclass
class EngineContext:
    """Everything the chunk kernel needs, precomputed once per scan point."""

    cfg: ChipConfig
    seed: int
    mode: str
    observe: frozenset
    dark_counts: bool
    tables: list
    paths: list
    chunk_pulses: int
    reflectivity: float
    excess_transmission: float
    common_prob: np.ndarray          # per source, probability an idler sits in the common mode
    delay_overlap: float
    idler_residual: np.ndarray       # [source, output]
    signal_residual: np.ndarray      # [source, output]
    interfere: bool

    @classmethod
    def build(cls, cfg: ChipConfig, seed: int, mode: str = "full", observe=None,
              dark_counts: bool = True) -> "EngineContext":
        if mode not in ("full", "coincidence"):
            raise ValueError(f"unknown mode {mode!r}")
        cfg.validate()
        observe = _observed(observe)
        paths = [source_paths(cfg, j, observe) for j in range(2)]
        tables = [_SourceTable.build(live_count_table(pair_distribution(cfg, j), p.signal_live,
                                                      p.idler_live, cfg.herald_mismatch))
                  for j, p in enumerate(paths)]
        q = tables[0].q_active * tables[1].q_active if mode == "coincidence" else \
            tables[0].q_active + tables[1].q_active
        chunk = 1 << 40 if q <= 0 else int(2 ** np.clip(round(math.log2(EVENTS_PER_CHUNK / q)), 12, 50))
        tc = cfg.tunable_coupler
        _, cross = chip.coupler_ratio_from_voltage(tc, cfg.voltage)
        purity = np.array([chip.source_purity(cfg, j) for j in range(2)])
        idler_nm = [s.idler_wavelength_nm for s in cfg.sources]
        bandwidth = min(cfg.filters[Channel.S1].bandwidth_ghz, cfg.filters[Channel.S2].bandwidth_ghz)
        delay_overlap = float(sinc(math.pi * bandwidth * 1e9 * cfg.relative_delay_ps * 1e-12) ** 2)
        interfere = (not cfg.distinguishable) and abs(idler_nm[0] - idler_nm[1]) < 1e-3
        return cls(
            cfg=cfg, seed=int(seed), mode=mode, observe=observe, dark_counts=dark_counts,
            tables=tables, paths=paths, chunk_pulses=chunk, reflectivity=cross,
            excess_transmission=chip.db_to_linear(chip.coupler_excess_loss_db(tc, cfg.voltage)),
            common_prob=np.sqrt(purity), delay_overlap=delay_overlap,
            idler_residual=np.array([coupler_output_transmission(cfg, s.idler_wavelength_nm, observe)[2]
                                     for s in cfg.sources]),
            signal_residual=np.array([coupler_output_transmission(cfg, s.signal_wavelength_nm, observe)[2]
                                      for s in cfg.sources]),
            interfere=interfere,
        )


# --- bulk kernel -----------------------------------------------------------


def _bernoulli_positions(rng: np.random.Generator, q: float, length: int) -> np.ndarray:
    if q <= 0 or length <= 0:
        return np.zeros(0, dtype=np.int64)
    if q >= 1:
        return np.arange(length, dtype=np.int64)
    parts, last = [], -1
    while True:
        expect = (length - 1 - last) * q
        draws = int(expect + 6 * math.sqrt(expect) + 16)
        pos = last + np.cumsum(rng.geometric(q, size=draws).astype(np.int64))
        parts.append(pos[pos < length])
        if pos[-1] >= length:
            break
        last = int(pos[-1])
    return np.concatenate(parts)


def _binomial(rng, n, p):
    if p <= 0:
        return np.zeros_like(n)
    if p >= 1:
        return n.copy()
    return rng.binomial(n, p)


@lru_cache(maxsize=256)
def _common_group_cdf(c0: int, c1: int, reflectivity: float) -> np.ndarray:
    """CDF over photons leaving output 0 (n..0) for a common-mode group."""
    dist = output_distribution(beamsplitter_unitary(reflectivity), (c0, c1), cap=c0 + c1)
    n = c0 + c1
    probs = np.array([dist[chip_occ] for chip_occ in sorted(dist, key=lambda o: -o.counts[0])])
    assert len(probs) == n + 1
    return np.cumsum(probs)


def _coupler_stage(ctx: EngineContext, rng_labels, rng_c3, iC, sC, truncated):
    """Propagate coupler-side photons.  Returns output counts per (group, output)."""
    n = iC.shape[1]
    r = ctx.reflectivity
    # Excess loss is identical on both arms and commutes with the coupler.
    iC = _binomial(rng_c3, iC, ctx.excess_transmission)
    sC = _binomial(rng_c3, sC, ctx.excess_transmission)
    total = iC.sum(0) + sC.sum(0)
    over = total > ctx.cfg.photon_cap
    if over.any():
        truncated[0] += int(over.sum())
        budget = np.where(over, ctx.cfg.photon_cap, total)
        for arr in (iC[0], iC[1], sC[0], sC[1]):
            take = np.minimum(arr, budget)
            arr[...] = take
            budget = budget - take

    common = np.zeros_like(iC)
    if ctx.interfere:
        common[0] = _binomial(rng_labels, iC[0], ctx.common_prob[0])
        common[1] = _binomial(rng_labels, iC[1], ctx.common_prob[1])
        delay_coin = rng_labels.random(n) < ctx.delay_overlap
        common[1] = np.where(delay_coin, common[1], 0)
    unique = iC - common

    # out[g, o]: g = 0,1 unique idlers per source port, 2 common idlers, 3,4 crosstalk signals
    out = np.zeros((5, 2, n), dtype=np.int64)
    for g, (port, counts) in enumerate(((0, unique[0]), (1, unique[1]), (None, None),
                                        (0, sC[0]), (1, sC[1]))):
        if port is None:
            continue
        crossed = _binomial(rng_c3, counts, r)
        out[g, port] = counts - crossed
        out[g, 1 - port] = crossed

    n_common = common.sum(0)
    u = rng_c3.random(n)
    single = n_common == 1
    if single.any():
        port0 = common[0] == 1
        cross = u < r
        to0 = np.where(port0, ~cross, cross) & single
        out[2, 0] += to0
        out[2, 1] += single & ~to0
    multi = np.flatnonzero(n_common >= 2)
    if multi.size:
        keys = np.stack([common[0, multi], common[1, multi]], axis=1)
        for c0, c1 in {tuple(k) for k in keys.tolist()}:
            sel = multi[(keys[:, 0] == c0) & (keys[:, 1] == c1)]
            cdf = _common_group_cdf(int(c0), int(c1), float(r))
            k = np.minimum(np.searchsorted(cdf, u[sel], side="right"), c0 + c1)
            out[2, 0, sel] += c0 + c1 - k
            out[2, 1, sel] += k
    return out


def simulate_chunk(ctx: EngineContext, chunk: int, n_pulses: int):
    """Simulate pulses ``[chunk * chunk_pulses, ...)`` of one run.  Returns a TagStream piece."""
    start = chunk * ctx.chunk_pulses
    length = int(min(ctx.chunk_pulses, n_pulses - start))
    cfg = ctx.cfg
    rng_pairs = stage_rng(ctx.seed, chunk, PAIRS)
    truncated = [0]

    if ctx.mode == "coincidence":
        q = ctx.tables[0].q_active * ctx.tables[1].q_active
        pos = _bernoulli_positions(rng_pairs, q, length)
        ns = np.zeros((2, pos.size), dtype=np.int64)
        ni = np.zeros_like(ns)
        for j in range(2):
            ns[j], ni[j] = ctx.tables[j].sample(rng_pairs, pos.size)
    else:
        per_source = []
        for j in range(2):
            rng_j = stage_rng(ctx.seed, chunk, PAIRS, j + 1)
            p = _bernoulli_positions(rng_j, ctx.tables[j].q_active, length)
            per_source.append((p, *ctx.tables[j].sample(rng_j, p.size)))
        pos = np.union1d(per_source[0][0], per_source[1][0])
        ns = np.zeros((2, pos.size), dtype=np.int64)
        ni = np.zeros_like(ns)
        for j, (p, s, i) in enumerate(per_source):
            at = np.searchsorted(pos, p)
            ns[j, at] = s
            ni[j, at] = i

    rng_route = stage_rng(ctx.seed, chunk, ROUTE)
    sH, sC, iC, iH = (np.zeros_like(ns) for _ in range(4))
    for j, paths in enumerate(ctx.paths):
        sH[j] = _binomial(rng_route, ns[j], paths.signal_to_herald / paths.signal_live
                          if paths.signal_live > 0 else 0.0)
        sC[j] = ns[j] - sH[j]
        iC[j] = _binomial(rng_route, ni[j], paths.idler_to_coupler / paths.idler_live
                          if paths.idler_live > 0 else 0.0)
        iH[j] = ni[j] - iC[j]

    out = _coupler_stage(ctx, stage_rng(ctx.seed, chunk, LABELS), stage_rng(ctx.seed, chunk, C3),
                         iC, sC, truncated)

    rng_det = stage_rng(ctx.seed, chunk, DETECT)
    s_hits = []
    for o in range(2):
        hits = np.zeros(pos.size, dtype=np.int64)
        for g in range(5):
            if g == 2:
                res = ctx.idler_residual[0, o]
            elif g < 2:
                res = ctx.idler_residual[g, o]
            else:
                res = ctx.signal_residual[g - 3, o]
            hits += _binomial(rng_det, out[g, o], res)
        s_hits.append(hits > 0)
    clicks = {Channel.H1: (sH[0] + iH[0]) > 0, Channel.S1: s_hits[0],
              Channel.S2: s_hits[1], Channel.H2: (sH[1] + iH[1]) > 0}

    res_ps = cfg.time_resolution_ps
    if ctx.dark_counts and ctx.mode == "coincidence":
        window_s = 2 * cfg.coincidence_window_ps * 1e-12
        for ch in CHANNELS:
            rate = cfg.detectors[ch].dark_rate_hz
            if ch in ctx.observe and rate > 0:
                clicks[ch] = clicks[ch] | (rng_det.random(pos.size) < -math.expm1(-rate * window_s))

    t_pulse = pulse_times(pos + start, cfg.rep_rate_hz, res_ps)
    chans, times = [], []
    for ch in CHANNELS:
        mask = clicks[ch]
        if ch in ctx.observe and mask.any():
            chans.append(np.full(int(mask.sum()), int(ch), dtype=np.uint8))
            times.append(t_pulse[mask])

    if ctx.dark_counts and ctx.mode == "full":
        t0 = int(pulse_times(np.array([start]), cfg.rep_rate_hz, res_ps)[0])
        span = length * 1e12 / cfg.rep_rate_hz
        for ch in CHANNELS:
            rate = cfg.detectors[ch].dark_rate_hz
            if ch not in ctx.observe or rate <= 0:
                continue
            rng_d = stage_rng(ctx.seed, chunk, DARK, int(ch))
            k = rng_d.poisson(rate * span * 1e-12)
            t = t0 + (np.floor(rng_d.random(k) * span / res_ps).astype(np.int64) * res_ps)
            chans.append(np.full(k, int(ch), dtype=np.uint8))
            times.append(t)

    if chans:
        c = np.concatenate(chans)
        t = np.concatenate(times)
        order = np.lexsort((c, t))
        c, t = c[order], t[order]
    else:
        c, t = np.zeros(0, np.uint8), np.zeros(0, np.int64)
    return c, t, truncated[0], int(pos.size)


def _chunk_worker(args):
    ctx, chunk, n_pulses = args
    return simulate_chunk(ctx, chunk, n_pulses)


def worker_count() -> int:
    env = os.environ.get("FOCKCHIP_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def simulate_stream(cfg: ChipConfig, n_pulses: int, seed: int, mode: str = "full", observe=None,
                    dark_counts: bool = True, workers: Optional[int] = None) -> TagStream:
    if n_pulses <= 0:
        raise ValueError("n_pulses must be positive")
    ctx = EngineContext.build(cfg, seed, mode, observe, dark_counts)
    n_chunks = -(-int(n_pulses) // ctx.chunk_pulses)
    jobs = [(ctx, k, int(n_pulses)) for k in range(n_chunks)]
    workers = worker_count() if workers is None else workers
    if workers > 1 and n_chunks > 1:
        with ProcessPoolExecutor(max_workers=min(workers, n_chunks)) as pool:
            results = list(pool.map(_chunk_worker, jobs))
    else:
        results = [_chunk_worker(j) for j in jobs]
    chans = np.concatenate([r[0] for r in results]) if results else np.zeros(0, np.uint8)
    times = np.concatenate([r[1] for r in results]) if results else np.zeros(0, np.int64)
    truncated = sum(r[2] for r in results)
    active = sum(r[3] for r in results)
    if truncated:
        log.info("%d pulses exceeded the photon cap of %d", truncated, cfg.photon_cap)
    return TagStream(chans, times, seed=int(seed), cfg_hash=cfg.digest(), n_pulses=int(n_pulses),
                     truncated=truncated,
                     meta={"mode": mode, "active_pulses": active,
                           "observed": sorted(c.name for c in ctx.observe),
                           "dark_counts": dark_counts, "chunk_pulses": ctx.chunk_pulses,
                           "voltage": cfg.voltage, "relative_delay_ps": cfg.relative_delay_ps})


# --- public run interface ------------------------------------------------------


@dataclass
class RunPlan:
    cfg: ChipConfig
    n_pulses: int
    seed: int = 0
    scan: Optional[list] = None        # [(parameter, values), ...]
    mode: str = "full"
    observe: Optional[Sequence] = None
    dark_counts: bool = True

    def validate(self) -> "RunPlan":
        if self.n_pulses <= 0:
            raise ValueError("n_pulses must be positive")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        for param, values in self.scan or []:
            if param not in SCAN_PARAMETERS:
                raise ValueError(f"cannot scan {param!r}; choose from {SCAN_PARAMETERS}")
            if not all(math.isfinite(v) for v in values):
                raise ValueError("scan values must be finite")
        self.cfg.validate()
        return self

    def points(self) -> list[ChipConfig]:
        if not self.scan:
            return [self.cfg]
        names = [p for p, _ in self.scan]
        return [replace(self.cfg, **dict(zip(names, combo)))
                for combo in itertools.product(*[v for _, v in self.scan])]


def run(plan: RunPlan):
    """One TagStream, or a list of them (one per scan point) when ``plan.scan`` is set."""
    plan.validate()
    streams = [simulate_stream(cfg, plan.n_pulses, plan.seed, plan.mode, plan.observe,
                               plan.dark_counts) for cfg in plan.points()]
    return streams if plan.scan else streams[0]


def add_dark_counts(stream: TagStream, spec: chip.DetectorSpec, duration_s: float,
                    rng: np.random.Generator, channels=CHANNELS) -> TagStream:
    """Merge Poissonian dark counts, uniform over ``[0, duration)``, into a stream."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    res = int(spec.time_resolution_ps)
    chans, times = [stream.channels], [stream.times]
    for ch in channels:
        k = rng.poisson(spec.dark_rate_hz * duration_s)
        t = np.floor(rng.random(k) * duration_s * 1e12 / res).astype(np.int64) * res
        chans.append(np.full(k, int(chip.parse_channel(ch)), dtype=np.uint8))
        times.append(t)
    out = TagStream(np.concatenate(chans), np.concatenate(times), stream.seed, stream.cfg_hash,
                    stream.n_pulses, stream.truncated, dict(stream.meta))
    return out.sorted()


# --- photon-by-photon reference ----------------------------------------------------


@dataclass
class _Photon:
    source: int
    kind: str            # "signal" | "idler"
    wavelength_nm: float
    label: int = 0


def simulate_pulse(cfg: ChipConfig, pulse_index: int, rng: np.random.Generator,
                   pair_counts: Optional[Sequence[int]] = None, stats_out: Optional[dict] = None
                   ) -> list[TimeTag]:
    """Reference simulation of a single pump pulse, one photon at a time."""
    res = cfg.time_resolution_ps
    t = int(pulse_times(np.array([pulse_index]), cfg.rep_rate_hz, res)[0])
    herald_side: dict[Channel, list] = {Channel.H1: [], Channel.H2: []}
    coupler_in: list[tuple[int, _Photon]] = []
    next_label = 1
    bandwidth = min(cfg.filters[Channel.S1].bandwidth_ghz, cfg.filters[Channel.S2].bandwidth_ghz)
    delay_overlap = float(sinc(math.pi * bandwidth * 1e9 * cfg.relative_delay_ps * 1e-12) ** 2)
    delay_coin = rng.random() < delay_overlap

    for j, src in enumerate(cfg.sources):
        if pair_counts is not None:
            n = int(pair_counts[j])
        else:
            n = int(sample_pair_count(pair_distribution(cfg, j), rng))
        herald = (Channel.H1, Channel.H2)[j]
        purity = chip.source_purity(cfg, j)
        for _ in range(n):
            for kind, wl in (("signal", src.signal_wavelength_nm), ("idler", src.idler_wavelength_nm)):
                p_int, p_x, _ = chip.wdm_route_probabilities(cfg.wdm[j], wl)
                u = rng.random()
                to_coupler = (kind == "idler") == (u < p_int)
                if u >= p_int + p_x:
                    continue
                photon = _Photon(j, kind, wl)
                if to_coupler:
                    coupler_in.append((j, photon))
                else:
                    herald_side[herald].append(photon)
        # internal labels for idlers entering the coupler
        for port, photon in coupler_in:
            if port != j or photon.label:
                continue
            common = (photon.kind == "idler" and not cfg.distinguishable
                      and rng.random() < math.sqrt(purity) and (j == 0 or delay_coin))
            if not common:
                photon.label = next_label
                next_label += 1
            elif photon.kind == "idler":
                photon.label = 0
    if cfg.sources[0].idler_wavelength_nm != cfg.sources[1].idler_wavelength_nm:
        for port, photon in coupler_in:
            if port == 1 and photon.label == 0:
                photon.label = next_label
                next_label += 1

    clicks = set()
    coupling = chip.db_to_linear(cfg.coupling_loss_db)
    for ch, photons in herald_side.items():
        survivors = [p for p in photons if rng.random() < coupling * cfg.filters[ch].transmission(p.wavelength_nm)]
        if loss_thin(survivors, cfg.detectors[ch].efficiency, rng):
            clicks.add(ch)

    tc = cfg.tunable_coupler
    coupler_in = loss_thin(coupler_in, chip.db_to_linear(chip.coupler_excess_loss_db(tc, cfg.voltage)), rng)
    if len(coupler_in) > cfg.photon_cap:
        if stats_out is not None:
            stats_out["truncated"] = stats_out.get("truncated", 0) + 1
        coupler_in = coupler_in[:cfg.photon_cap]
    if coupler_in:
        _, cross = chip.coupler_ratio_from_voltage(tc, cfg.voltage)
        u = beamsplitter_unitary(cross)
        # group by wavelength: photons of different colour never interfere
        by_colour: dict[float, list] = {}
        for port, photon in coupler_in:
            by_colour.setdefault(photon.wavelength_nm, []).append((port, photon.label))
        for wl, photons in by_colour.items():
            dist = multilabel_distribution(u, photons, cap=cfg.photon_cap)
            outcomes = list(dist)
            probs = np.array([dist[o] for o in outcomes])
            occ = outcomes[rng.choice(len(outcomes), p=probs / probs.sum())]
            for o, ch in enumerate((Channel.S1, Channel.S2)):
                keep = coupling * cfg.filters[ch].transmission(wl) * cfg.detectors[ch].efficiency
                if rng.binomial(occ.counts[o], keep) > 0:
                    clicks.add(ch)

    tags = [TimeTag(ch, t) for ch in CHANNELS if ch in clicks]
    period = 1e12 / cfg.rep_rate_hz
    for ch in CHANNELS:
        k = rng.poisson(cfg.detectors[ch].dark_rate_hz * period * 1e-12)
        for _ in range(k):
            tags.append(TimeTag(ch, t + int(rng.random() * period // res) * res))
    return sorted(tags, key=lambda tag: (tag.time_ps, tag.channel))
