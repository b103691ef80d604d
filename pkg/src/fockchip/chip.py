"""Chip parameterisation and closed-form physics.

Channels are ordered H1, S1, S2, H2.  Source 1 feeds H1 (signal) and C3 input
port 0 (idler); source 2 feeds H2 and C3 input port 1.  C3 output port 0 is
detected on S1, port 1 on S2.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s


class ConfigError(ValueError):
    pass


class Channel(enum.IntEnum):
    H1 = 0
    S1 = 1
    S2 = 2
    H2 = 3


CHANNELS = tuple(Channel)
SIGNAL_NM = 1310.0
IDLER_NM = 1560.0


def db_to_linear(db):
    return 10.0 ** (-np.asarray(db, dtype=float) / 10.0) if np.ndim(db) else 10.0 ** (-float(db) / 10.0)


def linear_to_db(x):
    if np.ndim(x):
        return -10.0 * np.log10(np.asarray(x, dtype=float))
    return -10.0 * math.log10(float(x)) if x > 0 else math.inf


def parse_channel(ch) -> Channel:
    if isinstance(ch, Channel):
        return ch
    if isinstance(ch, str):
        try:
            return Channel[ch.upper()]
        except KeyError:
            raise ValueError(f"unknown channel {ch!r}") from None
    return Channel(int(ch))


@dataclass(frozen=True)
class SourceSpec:
    brightness: float = 8e8            # pairs / mW / s
    pump_power_mw: float = 0.7
    rep_rate_hz: float = 76.5e6
    pump_bandwidth_ghz: float = 142.0
    signal_wavelength_nm: float = SIGNAL_NM
    idler_wavelength_nm: float = IDLER_NM
    poling_period_um: float = 13.1     # metadata only
    mean_pairs_override: Optional[float] = 9e-3
    collected_fraction: float = 1.0
    purity: Optional[float] = None     # None -> spectral model

    def validate(self):
        for name in ("brightness", "rep_rate_hz", "pump_bandwidth_ghz",
                     "signal_wavelength_nm", "idler_wavelength_nm", "poling_period_um"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"source {name} must be positive")
        if self.pump_power_mw < 0:
            raise ConfigError("pump power must be non-negative")
        if not 0.0 <= self.collected_fraction <= 1.0:
            raise ConfigError("collected_fraction must lie in [0, 1]")
        if self.mean_pairs_override is not None and self.mean_pairs_override < 0:
            raise ConfigError("mean_pairs_override must be non-negative")
        if self.purity is not None and not 0.0 < self.purity <= 1.0:
            raise ConfigError("purity must lie in (0, 1]")


@dataclass(frozen=True)
class FilterSpec:
    center_wavelength_nm: float
    bandwidth_ghz: float
    insertion_loss_db: float = 4.0

    def validate(self):
        if not self.bandwidth_ghz > 0:
            raise ConfigError("filter bandwidth must be positive")
        if self.insertion_loss_db < 0:
            raise ConfigError("filter insertion loss must be non-negative")

    def transmission(self, wavelength_nm: float) -> float:
        """Rectangular passband in optical frequency."""
        detune_ghz = abs(SPEED_OF_LIGHT / wavelength_nm - SPEED_OF_LIGHT / self.center_wavelength_nm)
        if detune_ghz <= self.bandwidth_ghz / 2 + 1e-9:
            return db_to_linear(self.insertion_loss_db)
        return 0.0


@dataclass(frozen=True)
class WdmCouplerSpec:
    """Measured pass loss and isolation of one demultiplexing coupler, keyed by nm."""

    pass_loss_db: dict = field(default_factory=dict)
    isolation_db: dict = field(default_factory=dict)

    def validate(self):
        if set(self.pass_loss_db) != set(self.isolation_db) or not self.pass_loss_db:
            raise ConfigError("WDM coupler needs pass loss and isolation for the same wavelengths")
        for wl, loss in self.pass_loss_db.items():
            if loss < 0:
                raise ConfigError(f"pass loss at {wl} nm must be >= 0 dB")
            if not self.isolation_db[wl] > 0:
                raise ConfigError(f"isolation at {wl} nm must be > 0 dB")


@dataclass(frozen=True)
class TunableCouplerSpec:
    v_bar: float = 16.0
    v_half: float = 34.0
    excess_loss_db: float = 0.0

    def validate(self):
        if self.v_half == self.v_bar:
            raise ConfigError("v_half must differ from v_bar")
        if self.excess_loss_db < 0:
            raise ConfigError("excess loss must be non-negative")


@dataclass(frozen=True)
class DetectorSpec:
    efficiency: float = 0.8
    dark_rate_hz: float = 200.0
    time_resolution_ps: int = 10

    def validate(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ConfigError("detector efficiency must lie in [0, 1]")
        if self.dark_rate_hz < 0:
            raise ConfigError("dark rate must be non-negative")
        if int(self.time_resolution_ps) <= 0:
            raise ConfigError("time resolution must be a positive integer of ps")


@dataclass(frozen=True)
class ChipConfig:
    sources: tuple = (SourceSpec(), SourceSpec())
    filters: dict = field(default_factory=dict)       # Channel -> FilterSpec
    wdm: tuple = ()                                   # one WdmCouplerSpec per source
    tunable_coupler: TunableCouplerSpec = TunableCouplerSpec()
    detectors: dict = field(default_factory=dict)     # Channel -> DetectorSpec
    coupling_loss_db: float = 3.0
    voltage: float = 34.0
    relative_delay_ps: float = 0.0
    coincidence_window_ps: float = 1000.0
    photon_cap: int = 4
    distinguishable: bool = False
    herald_mismatch: bool = False

    def validate(self) -> "ChipConfig":
        if len(self.sources) != 2 or len(self.wdm) != 2:
            raise ConfigError("chip needs exactly two sources and two WDM couplers")
        if set(self.filters) != set(CHANNELS) or set(self.detectors) != set(CHANNELS):
            raise ConfigError("filters and detectors are required for H1, S1, S2, H2")
        for spec in (*self.sources, *self.wdm, self.tunable_coupler,
                     *self.filters.values(), *self.detectors.values()):
            spec.validate()
        if self.sources[0].rep_rate_hz != self.sources[1].rep_rate_hz:
            raise ConfigError("both sources share one pump and must have equal rep rates")
        resolutions = {int(d.time_resolution_ps) for d in self.detectors.values()}
        if len(resolutions) != 1:
            raise ConfigError("all detectors must share one time resolution")
        for i, src in enumerate(self.sources):
            for wl in (src.signal_wavelength_nm, src.idler_wavelength_nm):
                if _wdm_key(self.wdm[i], wl) is None:
                    raise ConfigError(f"WDM coupler {i + 1} has no entry for {wl} nm")
        if self.coupling_loss_db < 0:
            raise ConfigError("coupling loss must be non-negative")
        if not self.coincidence_window_ps > 0:
            raise ConfigError("coincidence window must be positive")
        if self.photon_cap < 2:
            raise ConfigError("photon cap must allow two-photon interference")
        for name in ("voltage", "relative_delay_ps"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        return self

    @property
    def rep_rate_hz(self) -> float:
        return self.sources[0].rep_rate_hz

    @property
    def time_resolution_ps(self) -> int:
        return int(self.detectors[Channel.H1].time_resolution_ps)

    def replace(self, **changes) -> "ChipConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "sources": [dataclasses.asdict(s) for s in self.sources],
            "filters": {c.name: dataclasses.asdict(self.filters[c]) for c in CHANNELS},
            "wdm": [{"pass_loss_db": {_fmt_wl(k): v for k, v in sorted(w.pass_loss_db.items())},
                     "isolation_db": {_fmt_wl(k): v for k, v in sorted(w.isolation_db.items())}}
                    for w in self.wdm],
            "tunable_coupler": dataclasses.asdict(self.tunable_coupler),
            "detectors": {c.name: dataclasses.asdict(self.detectors[c]) for c in CHANNELS},
            "coupling_loss_db": self.coupling_loss_db,
            "voltage": self.voltage,
            "relative_delay_ps": self.relative_delay_ps,
            "coincidence_window_ps": self.coincidence_window_ps,
            "photon_cap": self.photon_cap,
            "distinguishable": self.distinguishable,
            "herald_mismatch": self.herald_mismatch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChipConfig":
        try:
            sources = tuple(SourceSpec(**_strip(s)) for s in d["sources"])
            filters = {parse_channel(k): FilterSpec(**_strip(v)) for k, v in d["filters"].items()}
            wdm = tuple(
                WdmCouplerSpec(
                    pass_loss_db={float(k): float(v) for k, v in _strip(w["pass_loss_db"]).items()},
                    isolation_db={float(k): _float(v) for k, v in _strip(w["isolation_db"]).items()},
                )
                for w in d["wdm"])
            detectors = {parse_channel(k): DetectorSpec(**_strip(v)) for k, v in d["detectors"].items()}
            extras = {k: d[k] for k in ("coupling_loss_db", "voltage", "relative_delay_ps",
                                        "coincidence_window_ps", "photon_cap", "distinguishable",
                                        "herald_mismatch") if k in d}
            cfg = cls(sources=sources, filters=filters, wdm=wdm,
                      tunable_coupler=TunableCouplerSpec(**_strip(d.get("tunable_coupler", {}))),
                      detectors=detectors, **extras)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed chip config: {exc}") from exc
        return cfg.validate()

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=_json_default)
        return hashlib.sha256(blob.encode()).digest()


def _fmt_wl(wl: float) -> str:
    return str(int(wl)) if float(wl).is_integer() else repr(float(wl))


def _float(v) -> float:
    return math.inf if v in ("inf", "Infinity") else float(v)


def _json_default(o):
    raise TypeError(f"cannot serialise {type(o)}")


def _strip(d: dict) -> dict:
    return {k: v for k, v in d.items() if k != "comment"}


def _wdm_key(spec: WdmCouplerSpec, wavelength_nm: float):
    for wl in spec.pass_loss_db:
        if abs(wl - wavelength_nm) < 0.5:
            return wl
    return None


def load_config(path) -> ChipConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ChipConfig.from_dict(data)


def save_config(cfg: ChipConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def paper_default() -> ChipConfig:
    text = resources.files("fockchip").joinpath("data/paper-default.json").read_text()
    return ChipConfig.from_dict(json.loads(text))


# --- closed-form physics -------------------------------------------------


def spectral_purity(pump_bandwidth_ghz: float, filter_bandwidth_ghz: float) -> float:
    sp, sf = float(pump_bandwidth_ghz), float(filter_bandwidth_ghz)
    if sp <= 0 or sf <= 0:
        raise ValueError("bandwidths must be positive")
    ratio = sf * sf / (sp * sp + sf * sf)
    return math.sqrt(1.0 - ratio * ratio)


def purity_from_g2(g2: float) -> float:
    if g2 < 1.0:
        raise ValueError(f"g2(0) = {g2} < 1 is not a thermal-like marginal")
    if g2 > 2.2:
        raise ValueError(f"g2(0) = {g2} exceeds the tolerated overshoot (2.2)")
    if g2 > 2.0:
        warnings.warn(f"g2(0) = {g2} above 2, purity clamped to 1", stacklevel=2)
    return min(g2 - 1.0, 1.0)


def schmidt_modes_from_purity(purity: float) -> float:
    if not 0.0 < purity <= 1.0:
        raise ValueError("purity must lie in (0, 1]")
    return 1.0 / purity


def mean_pairs_per_pulse(src: SourceSpec, collected_fraction: Optional[float] = None) -> float:
    if src.mean_pairs_override is not None:
        return float(src.mean_pairs_override)
    frac = src.collected_fraction if collected_fraction is None else collected_fraction
    return src.brightness * src.pump_power_mw * frac / src.rep_rate_hz


def source_purity(cfg: ChipConfig, source: int) -> float:
    src = cfg.sources[source]
    if src.purity is not None:
        return src.purity
    idler_filter = cfg.filters[(Channel.S1, Channel.S2)[source]]
    return spectral_purity(src.pump_bandwidth_ghz, idler_filter.bandwidth_ghz)


def coupler_ratio_from_voltage(spec: TunableCouplerSpec, voltage: float) -> tuple[float, float]:
    """(bar, cross) power fractions of the electro-optic coupler."""
    phase = (math.pi / 4) * (voltage - spec.v_bar) / (spec.v_half - spec.v_bar)
    cross = math.sin(phase) ** 2
    return 1.0 - cross, cross


def coupler_excess_loss_db(spec: TunableCouplerSpec, voltage: float) -> float:
    """Excess loss, zero at bar/cross and ``excess_loss_db`` at 50:50, linear in between."""
    bar, cross = coupler_ratio_from_voltage(spec, voltage)
    return spec.excess_loss_db * 2.0 * min(bar, cross)


def wdm_route_probabilities(spec: WdmCouplerSpec, wavelength_nm: float) -> tuple[float, float, float]:
    """(intended, crosstalk, lost) probabilities for one photon.

    A fraction ``x = 10^(-iso/10)`` of the routed light leaks to the wrong port
    and then suffers the same pass loss, so the three parts always sum to one.
    """
    key = _wdm_key(spec, wavelength_nm)
    if key is None:
        raise ValueError(f"no WDM data for {wavelength_nm} nm")
    iso = spec.isolation_db[key]
    leak = 0.0 if math.isinf(iso) else db_to_linear(iso)
    p_int = db_to_linear(spec.pass_loss_db[key]) * (1.0 - leak)
    p_x = p_int * leak
    return p_int, p_x, max(0.0, 1.0 - p_int - p_x)


def channel_loss_budget(cfg: ChipConfig, channel) -> tuple[float, float]:
    """(linear transmission, dB loss) of a channel, detector excluded."""
    ch = parse_channel(channel)
    source = 0 if ch in (Channel.H1, Channel.S1) else 1
    src = cfg.sources[source]
    wl = src.signal_wavelength_nm if ch in (Channel.H1, Channel.H2) else src.idler_wavelength_nm
    wdm = cfg.wdm[source]
    loss_db = (wdm.pass_loss_db[_wdm_key(wdm, wl)] + cfg.coupling_loss_db
               + cfg.filters[ch].insertion_loss_db)
    return db_to_linear(loss_db), loss_db


def fourfold_rate(rep_rate_hz: float, mean_pairs: float, transmissions, efficiency: float,
                  duration_s: float) -> float:
    mus = list(transmissions)
    if len(mus) != 4:
        raise ValueError("need one transmission per channel")
    vals = [rep_rate_hz, mean_pairs, efficiency, duration_s, *mus]
    if any(v < 0 for v in vals):
        raise ValueError("all inputs must be non-negative")
    return rep_rate_hz * mean_pairs ** 2 * math.prod(mus) * efficiency ** 4 * duration_s


def herald_pair_rate(rep_rate_hz: float, mean_pairs: float, mu_h1: float, mu_h2: float,
                     efficiency: float) -> float:
    return rep_rate_hz * mean_pairs ** 2 * mu_h1 * mu_h2 * efficiency ** 2


def rate_budget(cfg: ChipConfig, duration_s: float = 7200.0) -> dict:
    """Per-channel transmissions and the analytic four-fold / herald rates."""
    channels = {}
    for ch in CHANNELS:
        mu, db = channel_loss_budget(cfg, ch)
        channels[ch.name] = {"loss_db": db, "transmission": mu,
                             "efficiency": cfg.detectors[ch].efficiency}
    nbar = [mean_pairs_per_pulse(s) for s in cfg.sources]
    nbar_geo = math.sqrt(nbar[0] * nbar[1])
    eta = [cfg.detectors[ch].efficiency for ch in CHANNELS]
    mus = [channels[ch.name]["transmission"] for ch in CHANNELS]
    four = (cfg.rep_rate_hz * nbar[0] * nbar[1] * math.prod(mus) * math.prod(eta) * duration_s)
    herald = (cfg.rep_rate_hz * nbar[0] * nbar[1] * mus[0] * mus[3] * eta[0] * eta[3])
    return {
        "rep_rate_hz": cfg.rep_rate_hz,
        "mean_pairs_per_pulse": nbar,
        "mean_pairs_geometric": nbar_geo,
        "channels": channels,
        "duration_s": duration_s,
        "fourfold_expected": four,
        "herald_pair_rate_hz": herald,
    }
