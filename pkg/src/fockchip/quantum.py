"""Exact few-photon linear optics.

Amplitudes follow the creation-operator convention a_j^dag -> sum_i U[i, j] a_i^dag,
so column j of a unitary is the image of input mode j.  Output probabilities are
permanents of row/column-repeated submatrices.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

UNITARITY_TOL = 1e-9
PERMANENT_CAP = 8
PHOTON_CAP = 4


class CapacityError(ValueError):
    """Raised when a photon number or matrix size exceeds the configured cap."""


@dataclass(frozen=True)
class FockOccupation:
    counts: tuple[int, ...]
    modes: tuple[int, ...] = field(default=())

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise ValueError(f"negative occupation in {counts}")
        object.__setattr__(self, "counts", counts)
        modes = tuple(self.modes) if self.modes else tuple(range(len(counts)))
        if len(modes) != len(counts):
            raise ValueError("modes and counts differ in length")
        object.__setattr__(self, "modes", modes)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def __len__(self):
        return len(self.counts)

    def __iter__(self):
        return iter(self.counts)

    def __getitem__(self, i):
        return self.counts[i]

    def __repr__(self):
        return "|" + ",".join(map(str, self.counts)) + ">"


def _as_occupation(occ) -> FockOccupation:
    return occ if isinstance(occ, FockOccupation) else FockOccupation(tuple(occ))


@dataclass(frozen=True, eq=False)
class LinearUnitary:
    entries: np.ndarray

    def __post_init__(self):
        u = np.array(self.entries, dtype=complex)
        if u.ndim != 2 or u.shape[0] != u.shape[1]:
            raise ValueError(f"unitary must be square, got shape {u.shape}")
        err = unitarity_error(u)
        if err > UNITARITY_TOL:
            raise ValueError(f"matrix is not unitary (max |UU^dag - I| = {err:.3g})")
        u.setflags(write=False)
        object.__setattr__(self, "entries", u)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    def __matmul__(self, other):
        return LinearUnitary(self.entries @ np.asarray(other))


def unitarity_error(u) -> float:
    u = np.asarray(u, dtype=complex)
    return float(np.max(np.abs(u @ u.conj().T - np.eye(u.shape[0]))))


def _matrix(u) -> np.ndarray:
    return u.entries if isinstance(u, LinearUnitary) else np.asarray(u, dtype=complex)


def beamsplitter_unitary(reflectivity: float, phase: float = 0.0) -> LinearUnitary:
    """2x2 coupler with power reflectivity ``r`` (cross fraction).

    Convention: symmetric i-phase on the cross terms,
    ``[[sqrt(t), i e^{i phi} sqrt(r)], [i e^{-i phi} sqrt(r), sqrt(t)]]``.
    """
    r = float(reflectivity)
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"reflectivity must lie in [0, 1], got {r}")
    st, sr = math.sqrt(1.0 - r), math.sqrt(r)
    cross = 1j * sr
    return LinearUnitary(np.array([[st, cross * np.exp(1j * phase)],
                                   [cross * np.exp(-1j * phase), st]]))


def embed_unitary(u, target_modes: Sequence[int], total_modes: int) -> LinearUnitary:
    block = _matrix(u)
    targets = list(target_modes)
    if len(set(targets)) != len(targets):
        raise ValueError(f"duplicate target modes {targets}")
    if any(t < 0 or t >= total_modes for t in targets):
        raise ValueError(f"target modes {targets} out of range for {total_modes} modes")
    if block.shape != (len(targets), len(targets)):
        raise ValueError("block size does not match number of target modes")
    full = np.eye(total_modes, dtype=complex)
    full[np.ix_(targets, targets)] = block
    return LinearUnitary(full)


def permanent(m, cap: int = PERMANENT_CAP) -> complex:
    """Ryser's formula with Gray-code subset updates, O(2^n n)."""
    a = np.asarray(m, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"permanent needs a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if n > cap:
        raise CapacityError(f"matrix dimension {n} exceeds permanent cap {cap}")
    if n == 0:
        return 1.0 + 0j
    row_sums = np.zeros(n, dtype=complex)
    total = 0j
    gray_prev = 0
    for k in range(1, 1 << n):
        gray = k ^ (k >> 1)
        changed = gray ^ gray_prev
        j = changed.bit_length() - 1
        if gray & changed:
            row_sums += a[:, j]
        else:
            row_sums -= a[:, j]
        gray_prev = gray
        term = np.prod(row_sums)
        total += -term if (bin(gray).count("1") & 1) else term
    return complex(total * (-1) ** n)


def fock_basis(n_photons: int, n_modes: int) -> list[tuple[int, ...]]:
    """All occupations of ``n_modes`` modes holding ``n_photons`` photons."""
    out = []
    for combo in itertools.combinations_with_replacement(range(n_modes), n_photons):
        occ = [0] * n_modes
        for mode in combo:
            occ[mode] += 1
        out.append(tuple(occ))
    return out


def _expand(occ: Sequence[int]) -> list[int]:
    return [mode for mode, c in enumerate(occ) for _ in range(c)]


def output_distribution(u, input_state, cap: int = PHOTON_CAP) -> dict[FockOccupation, float]:
    occ = _as_occupation(input_state)
    mat = _matrix(u)
    if len(occ) != mat.shape[0]:
        raise ValueError(f"input has {len(occ)} modes, unitary has {mat.shape[0]}")
    if occ.total > cap:
        raise CapacityError(f"{occ.total} photons exceed cap {cap}")
    probs = _output_probs(mat.tobytes(), mat.shape[0], occ.counts)
    return {FockOccupation(s): p for s, p in probs.items()}


@lru_cache(maxsize=4096)
def _output_probs(mat_bytes: bytes, m: int, counts: tuple[int, ...]) -> dict[tuple[int, ...], float]:
    mat = np.frombuffer(mat_bytes, dtype=complex).reshape(m, m)
    n = sum(counts)
    cols = _expand(counts)
    norm_in = math.prod(math.factorial(c) for c in counts)
    out = {}
    for s in fock_basis(n, m):
        rows = _expand(s)
        sub = mat[np.ix_(rows, cols)]
        norm = norm_in * math.prod(math.factorial(c) for c in s)
        out[s] = abs(permanent(sub, cap=max(n, 1))) ** 2 / norm
    return out


def multilabel_distribution(u, photons: Iterable[tuple[int, int]],
                            cap: int = PHOTON_CAP) -> dict[FockOccupation, float]:
    """Output law for photons carrying internal labels.

    ``photons`` holds ``(mode, label)`` pairs.  Label 0 is the common internal
    mode; every distinct label is a separate group that does not interfere with
    the others, so group outputs are convolved.
    """
    mat = _matrix(u)
    m = mat.shape[0]
    photons = list(photons)
    if len(photons) > cap:
        raise CapacityError(f"{len(photons)} photons exceed cap {cap}")
    groups: dict[int, list[int]] = {}
    for mode, label in photons:
        if not 0 <= mode < m:
            raise ValueError(f"mode {mode} out of range for {m} modes")
        groups.setdefault(int(label), [0] * m)[mode] += 1
    dist = {(0,) * m: 1.0}
    for label in sorted(groups):
        part = _output_probs(mat.tobytes(), m, tuple(groups[label]))
        merged: dict[tuple[int, ...], float] = {}
        for occ_a, pa in dist.items():
            for occ_b, pb in part.items():
                key = tuple(x + y for x, y in zip(occ_a, occ_b))
                merged[key] = merged.get(key, 0.0) + pa * pb
        dist = merged
    return {FockOccupation(k): v for k, v in dist.items()}


def hom_coincidence_prob(reflectivity: float, overlap: float) -> float:
    r, v = float(reflectivity), float(overlap)
    if not 0.0 <= r <= 1.0 or not 0.0 <= v <= 1.0:
        raise ValueError("reflectivity and overlap must lie in [0, 1]")
    t = 1.0 - r
    return t * t + r * r - 2.0 * t * r * v


def sinc(x):
    """sin(x)/x with the removable singularity handled by its series."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    out = np.where(small, 1.0 - x * x / 6.0, np.sin(safe) / safe)
    return out if out.ndim else float(out)


def overlap_vs_delay(base_overlap: float, bandwidth_hz: float, delay_s):
    if bandwidth_hz <= 0:
        raise ValueError("bandwidth must be positive")
    if not 0.0 <= base_overlap <= 1.0:
        raise ValueError("base overlap must lie in [0, 1]")
    return base_overlap * sinc(np.pi * bandwidth_hz * np.asarray(delay_s, dtype=float)) ** 2


@dataclass(frozen=True)
class PairNumberDistribution:
    """Multimode-thermal (negative binomial) pair statistics.

    ``schmidt_modes = inf`` gives the Poisson limit.  The second factorial
    moment normalised by the squared mean is 1 + 1/K.
    """

    mean_pairs: float
    schmidt_modes: float = 1.0

    def __post_init__(self):
        if self.mean_pairs < 0:
            raise ValueError("mean_pairs must be non-negative")
        if not self.schmidt_modes >= 1:
            raise ValueError("schmidt_modes must be >= 1")

    @property
    def poisson(self) -> bool:
        return math.isinf(self.schmidt_modes)

    def pgf(self, z):
        z = np.asarray(z, dtype=float)
        nbar, k = self.mean_pairs, self.schmidt_modes
        if self.poisson:
            return np.exp(-nbar * (1.0 - z))
        return (1.0 + nbar * (1.0 - z) / k) ** (-k)

    def pmf(self, n_max: int) -> np.ndarray:
        """P(n) for n = 0..n_max."""
        from scipy import stats

        n = np.arange(n_max + 1)
        if self.mean_pairs == 0:
            out = np.zeros(n_max + 1)
            out[0] = 1.0
            return out
        if self.poisson:
            return stats.poisson.pmf(n, self.mean_pairs)
        k = self.schmidt_modes
        return stats.nbinom.pmf(n, k, k / (k + self.mean_pairs))

    def tail(self, n: int) -> float:
        """P(count > n)."""
        from scipy import stats

        if self.mean_pairs == 0:
            return 0.0
        if self.poisson:
            return float(stats.poisson.sf(n, self.mean_pairs))
        k = self.schmidt_modes
        return float(stats.nbinom.sf(n, k, k / (k + self.mean_pairs)))

    def support_bound(self, tail: float = 1e-18) -> int:
        """Smallest n_max whose upper tail mass is below ``tail``."""
        n_max = 1
        while self.tail(n_max) >= tail and n_max < 100_000:
            n_max += max(1, n_max // 4)
        return n_max


def sample_pair_count(dist: PairNumberDistribution, rng: np.random.Generator, size=None):
    if dist.mean_pairs == 0:
        return 0 if size is None else np.zeros(size, dtype=np.int64)
    if dist.poisson:
        return rng.poisson(dist.mean_pairs, size=size)
    k = dist.schmidt_modes
    return rng.negative_binomial(k, k / (k + dist.mean_pairs), size=size)


def loss_thin(photons: Sequence, transmission: float, rng: np.random.Generator) -> list:
    if not 0.0 <= transmission <= 1.0:
        raise ValueError("transmission must lie in [0, 1]")
    if not photons:
        return []
    keep = rng.random(len(photons)) < transmission
    return [p for p, k in zip(photons, keep) if k]
