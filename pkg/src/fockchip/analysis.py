"""From tag streams to coincidences, g2(0), HOM scans and dip fits."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .chip import SPEED_OF_LIGHT, Channel, parse_channel
from .quantum import sinc
from .tags import TagStream

DEFAULT_REP_PERIOD_PS = 1e12 / 76.5e6
SINC2_HALF_MAX = 1.3915573782515103  # sinc(x)^2 = 1/2


class FitError(RuntimeError):
    def __init__(self, message, best: Optional["FitResult"] = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class CoincidenceSpec:
    channels: tuple
    window_ps: float = 1000.0
    pulse_offsets: tuple = (0,)
    shifted: tuple = ()
    rep_period_ps: float = DEFAULT_REP_PERIOD_PS

    def __post_init__(self):
        chans = tuple(parse_channel(c) for c in self.channels)
        if not chans:
            raise ValueError("coincidence needs at least one channel")
        if len(set(chans)) != len(chans):
            raise ValueError("duplicate channels")
        if not self.window_ps > 0:
            raise ValueError("window must be positive")
        shifted = tuple(parse_channel(c) for c in self.shifted)
        if not set(shifted) <= set(chans):
            raise ValueError("shifted channels must be among the coincidence channels")
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "shifted", shifted)
        object.__setattr__(self, "pulse_offsets", tuple(int(o) for o in self.pulse_offsets))


def count_nfold(stream: TagStream, spec: CoincidenceSpec) -> dict[int, int]:
    """Count n-fold coincidences per pulse offset.

    A coincidence is a tag on the first channel at ``t`` with, for every other
    channel, at least one tag within ``window`` of ``t + shift``; channels in
    ``spec.shifted`` carry ``shift = offset * rep_period`` and the rest zero.
    Each reference tag counts at most once.
    """
    if not stream.is_sorted():
        raise ValueError("stream must be sorted in time")
    per_channel = {c: stream.channel_times(c) for c in spec.channels}
    ref_ch = spec.channels[0]
    ref = per_channel[ref_ch]
    w = spec.window_ps
    result = {}
    def narrow(cand, c, delta):
        # integer bounds keep searchsorted on the native int64 tags
        times = per_channel[c]
        lo = np.searchsorted(times, cand + math.ceil(delta - w), side="left")
        hi = np.searchsorted(times, cand + math.floor(delta + w), side="right")
        return cand[hi > lo]

    # channels moving with the reference do not depend on the offset: filter once
    fixed = [c for c in spec.channels[1:] if (c in spec.shifted) == (ref_ch in spec.shifted)]
    moving = [c for c in spec.channels[1:] if c not in fixed]
    base = ref
    for c in fixed:
        base = narrow(base, c, 0.0)
    for offset in spec.pulse_offsets:
        shift = offset * spec.rep_period_ps
        sign = -1.0 if ref_ch in spec.shifted else 1.0
        cand = base
        for c in moving:
            cand = narrow(cand, c, sign * shift)
        result[offset] = int(cand.size)
    return result


def gate_to_pulses(times: np.ndarray, window_ps: float, rep_period_ps: float) -> np.ndarray:
    """Mask of tags lying within ``window`` of the nearest pump-pulse slot."""
    phase = np.mod(times.astype(float), rep_period_ps)
    return np.minimum(phase, rep_period_ps - phase) <= window_ps


def g2_hbt(stream: TagStream, channel_a, channel_b, window_ps: float = 1000.0,
           rep_period_ps: float = DEFAULT_REP_PERIOD_PS, n_pulses: Optional[int] = None,
           gated: bool = False):
    """Zero-delay g2 from coincidences normalised by singles: C0 N / (S_A S_B).

    With ``gated`` only singles inside a pulse window are counted, which keeps
    the uniform dark-count background out of the normalisation.
    """
    n = stream.n_pulses if n_pulses is None else n_pulses
    if n is None:
        raise ValueError("number of pulses is unknown; pass n_pulses")
    ta, tb = stream.channel_times(channel_a), stream.channel_times(channel_b)
    if gated:
        sa = int(np.count_nonzero(gate_to_pulses(ta, window_ps, rep_period_ps)))
        sb = int(np.count_nonzero(gate_to_pulses(tb, window_ps, rep_period_ps)))
    else:
        sa, sb = ta.size, tb.size
    if sa == 0 or sb == 0:
        raise ZeroDivisionError("g2 undefined: a channel recorded no singles")
    c0 = count_nfold(stream, CoincidenceSpec((channel_a, channel_b), window_ps, (0,),
                                             rep_period_ps=rep_period_ps))[0]
    g2 = c0 * n / (sa * sb)
    err = g2 * math.sqrt((1.0 / c0 if c0 else 1.0) + 1.0 / sa + 1.0 / sb)
    return g2, err


@dataclass
class ScanResult:
    control: str                      # "delay_ps" | "voltage"
    values: list
    counts: list
    scale: float = 1.0                # multiply raw counts by this for the reference duration

    @property
    def errors(self) -> list:
        return [math.sqrt(c) for c in self.counts]

    @property
    def points(self) -> list:
        return list(zip(self.values, self.counts, self.errors))

    def to_csv(self) -> str:
        lines = [f"{self.control},count,error,scaled_count,scaled_error"]
        for v, c, e in self.points:
            lines.append(f"{v!r},{c},{e!r},{c * self.scale!r},{e * self.scale!r}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"control": self.control, "values": self.values, "counts": self.counts,
                           "errors": self.errors, "scale": self.scale}, sort_keys=True, indent=2) + "\n"


@dataclass
class FitResult:
    visibility: float
    amplitude: float
    bandwidth_ghz: float
    center_ps: float
    residual_norm: float
    stderr: dict = field(default_factory=dict)
    iterations: int = 0
    converged: bool = True

    @property
    def width_param_ps(self) -> float:
        return 1e3 / self.bandwidth_ghz

    def model(self, delay_ps):
        return sinc2_dip(delay_ps, self.amplitude, self.visibility, self.bandwidth_ghz, self.center_ps)

    def to_json(self) -> str:
        d = asdict(self)
        d["width_param_ps"] = self.width_param_ps
        return json.dumps(d, sort_keys=True, indent=2) + "\n"


def sinc2_dip(delay_ps, amplitude, visibility, bandwidth_ghz, center_ps=0.0):
    x = np.pi * bandwidth_ghz * 1e-3 * (np.asarray(delay_ps, dtype=float) - center_ps)
    return amplitude * (1.0 - visibility * sinc(x) ** 2)


def fit_sinc2(scan: ScanResult, bandwidth_hint_ghz: float, fit_bandwidth: bool = False,
              fit_center: bool = False, max_iter: int = 20000, xtol: float = 1e-9) -> FitResult:
    """Weighted least squares of A (1 - V sinc^2(pi dnu (tau - tau0))) by Nelder-Mead.

    Weights are 1/max(count, 1).  Parameters are scaled to order one so the
    simplex tolerance acts as a relative step criterion.
    """
    x = np.asarray(scan.values, dtype=float)
    y = np.asarray(scan.counts, dtype=float)
    if x.size < 5:
        raise ValueError("need at least five scan points")
    w = 1.0 / np.maximum(y, 1.0)
    a0 = max(float(np.max(y)), 1.0)
    v0 = float(np.clip(1.0 - np.min(y) / a0, 0.0, 1.0))
    c0 = float(x[np.argmin(y)]) if fit_center else 0.0

    def unpack(p):
        a, v = p[0] * a0, p[1]
        bw = p[2] * bandwidth_hint_ghz if fit_bandwidth else bandwidth_hint_ghz
        ctr = p[-1] * 10.0 if fit_center else 0.0
        return a, v, bw, ctr

    def cost(p):
        a, v, bw, ctr = unpack(p)
        if bw <= 0:
            return np.inf
        r = y - sinc2_dip(x, a, v, bw, ctr)
        return float(np.sum(w * r * r))

    start = [1.0, v0] + ([1.0] if fit_bandwidth else []) + ([c0 / 10.0] if fit_center else [])
    best = None
    total_iter = 0
    for _ in range(4):  # restarts guard against simplex collapse
        res = minimize(cost, start, method="Nelder-Mead",
                       options={"xatol": xtol, "fatol": 1e-14 * max(1.0, cost(start)),
                                "maxiter": max_iter, "maxfev": 4 * max_iter, "adaptive": True})
        total_iter += res.nit
        if best is not None and abs(res.fun - best.fun) <= 1e-12 * max(1.0, best.fun):
            best = res
            break
        best = res
        start = res.x
    a, v, bw, ctr = unpack(best.x)
    fit = FitResult(visibility=float(v), amplitude=float(a), bandwidth_ghz=float(bw),
                    center_ps=float(ctr), residual_norm=float(math.sqrt(best.fun)),
                    iterations=total_iter, converged=bool(best.success))
    fit.stderr = _stderr(cost, best.x, unpack, a0, bandwidth_hint_ghz, fit_bandwidth, fit_center)
    if not best.success:
        raise FitError(f"sinc^2 fit did not converge: {best.message}", fit)
    return fit


def _stderr(cost, p, unpack, a0, bw_hint, fit_bandwidth, fit_center) -> dict:
    """Parameter standard errors from a finite-difference Hessian of the chi^2 cost."""
    p = np.asarray(p, dtype=float)
    n = p.size
    h = 1e-4 * np.maximum(np.abs(p), 1e-2)
    hess = np.zeros((n, n))
    f0 = cost(p)
    for i in range(n):
        for j in range(i, n):
            ei, ej = np.eye(n)[i] * h[i], np.eye(n)[j] * h[j]
            if i == j:
                val = (cost(p + ei) - 2 * f0 + cost(p - ei)) / h[i] ** 2
            else:
                val = (cost(p + ei + ej) - cost(p + ei - ej) - cost(p - ei + ej)
                       + cost(p - ei - ej)) / (4 * h[i] * h[j])
            hess[i, j] = hess[j, i] = val
    try:
        cov = 2.0 * np.linalg.inv(hess)
    except np.linalg.LinAlgError:
        return {}
    diag = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    names = ["amplitude", "visibility"] + (["bandwidth_ghz"] if fit_bandwidth else []) \
        + (["center_ps"] if fit_center else [])
    scales = [a0, 1.0] + ([bw_hint] if fit_bandwidth else []) + ([10.0] if fit_center else [])
    return {k: float(d * s) for k, d, s in zip(names, diag, scales)}


def visibility(fit: FitResult) -> float:
    return fit.visibility


def corrected_visibility(fit: FitResult, accidentals: float) -> float:
    """Visibility after subtracting a flat accidental floor from the dip."""
    signal = fit.amplitude - accidentals
    if signal <= 0:
        raise ValueError("accidentals exceed the fitted amplitude")
    return fit.amplitude * fit.visibility / signal


def dip_width(fit: FitResult) -> dict:
    """Dip width conventions in ps and in mm of optical path."""
    first_zero = 1e3 / fit.bandwidth_ghz
    fwhm = 2.0 * SINC2_HALF_MAX / (math.pi * fit.bandwidth_ghz * 1e-3)
    to_mm = SPEED_OF_LIGHT * 1e-12 * 1e3
    return {"first_zero_ps": first_zero, "first_zero_mm": first_zero * to_mm,
            "fwhm_ps": fwhm, "fwhm_mm": fwhm * to_mm}


FOURFOLD = (Channel.H1, Channel.H2, Channel.S1, Channel.S2)


def fourfold_spec(window_ps: float = 1000.0, rep_period_ps: float = DEFAULT_REP_PERIOD_PS,
                  offsets: Sequence[int] = (0,), shifted=()) -> CoincidenceSpec:
    return CoincidenceSpec(FOURFOLD, window_ps, tuple(offsets), tuple(shifted), rep_period_ps)


def accidental_estimate(stream_mismatched: TagStream, spec: Optional[CoincidenceSpec] = None) -> int:
    """Four-folds recorded with energy-mismatched heralds: no true pair survives the filters."""
    spec = spec or fourfold_spec()
    return count_nfold(stream_mismatched, spec)[spec.pulse_offsets[0]]


def pair_offset_histogram(stream: TagStream, max_offset: int, window_ps: float = 1000.0,
                          rep_period_ps: float = DEFAULT_REP_PERIOD_PS) -> dict:
    """Four-folds versus the pulse offset between the H1 and H2 heralded pairs.

    The pair heralded on H2 is looked for ``n`` pulses after the one heralded on
    H1; the two heralded photons may exit C3 on either output, so both
    assignments (S2 or S1 travelling with H2) are counted.  At offset zero the
    two assignments coincide.  Three-folds with only one S click are returned
    as a proxy for bunched pairs.
    """
    offsets = tuple(range(0, max_offset + 1))
    same = count_nfold(stream, fourfold_spec(window_ps, rep_period_ps, offsets, (Channel.H2, Channel.S2)))
    swap = count_nfold(stream, fourfold_spec(window_ps, rep_period_ps, offsets, (Channel.H2, Channel.S1)))
    three = {}
    for s in (Channel.S1, Channel.S2):
        spec = CoincidenceSpec((Channel.H1, Channel.H2, s), window_ps, (0,), rep_period_ps=rep_period_ps)
        three[s.name] = count_nfold(stream, spec)[0]
    fourfold = {n: same[n] + (swap[n] if n else 0) for n in offsets}
    return {"offsets": list(offsets), "fourfold": [fourfold[n] for n in offsets],
            "fourfold_fixed_assignment": [same[n] for n in offsets],
            "threefold_zero_offset": three}
