import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fockchip import quantum as q


def random_unitary(m, rng):
    z = (rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m))) / math.sqrt(2)
    qm, r = np.linalg.qr(z)
    return qm * (np.diag(r) / np.abs(np.diag(r)))


def naive_permanent(a):
    n = a.shape[0]
    return sum(math.prod(a[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def brute_force_distribution(u, occ):
    """Sum amplitudes over every assignment of input photons to output modes."""
    u = np.asarray(u)
    m = u.shape[0]
    sources = [j for j, c in enumerate(occ) for _ in range(c)]
    amps = {}
    for paths in itertools.product(range(m), repeat=len(sources)):
        out = tuple(paths.count(i) for i in range(m))
        amps[out] = amps.get(out, 0) + math.prod(u[i, j] for i, j in zip(paths, sources))
    norm_in = math.prod(math.factorial(c) for c in occ)
    # (a^dag)^k |0> = sqrt(k!) |k>, so |<s|psi>|^2 = |A|^2 prod(s!) / prod(t!)
    return {s: abs(a) ** 2 * math.prod(math.factorial(c) for c in s) / norm_in for s, a in amps.items()}


# --- beamsplitter / embedding -------------------------------------------------


def test_beamsplitter_limits():
    assert np.allclose(np.asarray(q.beamsplitter_unitary(0.0)), np.eye(2))
    swap = np.asarray(q.beamsplitter_unitary(1.0))
    assert np.allclose(swap, [[0, 1j], [1j, 0]])
    half = np.asarray(q.beamsplitter_unitary(0.5))
    assert np.allclose(np.abs(half), 1 / math.sqrt(2))


@given(st.floats(0, 1), st.floats(-math.pi, math.pi))
def test_beamsplitter_is_unitary(r, phi):
    assert q.unitarity_error(q.beamsplitter_unitary(r, phi)) < q.UNITARITY_TOL


def test_beamsplitter_rejects_bad_reflectivity():
    with pytest.raises(ValueError):
        q.beamsplitter_unitary(1.2)


def test_embed_identity_and_block():
    assert np.allclose(np.asarray(q.embed_unitary(np.eye(2), [0, 1], 4)), np.eye(4))
    e = np.asarray(q.embed_unitary(q.beamsplitter_unitary(0.5), [1, 2], 4))
    assert np.allclose(e[0], [1, 0, 0, 0]) and np.allclose(e[3], [0, 0, 0, 1])


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_embed_random_unitary(seed, total):
    rng = np.random.default_rng(seed)
    targets = list(rng.choice(total, size=2, replace=False))
    e = q.embed_unitary(random_unitary(2, rng), targets, total)
    assert q.unitarity_error(e) < 1e-9


def test_embed_errors():
    with pytest.raises(ValueError):
        q.embed_unitary(np.eye(2), [0, 0], 3)
    with pytest.raises(ValueError):
        q.embed_unitary(np.eye(2), [0, 3], 3)


def test_non_unitary_rejected():
    with pytest.raises(ValueError):
        q.LinearUnitary(np.array([[1, 1], [0, 1]]))


# --- permanent ------------------------------------------------------------------


def test_permanent_examples():
    assert q.permanent([[1, 1], [1, 1]]) == pytest.approx(2)
    assert q.permanent(np.eye(3)) == pytest.approx(1)
    assert q.permanent([[1, 2], [3, 4]]) == pytest.approx(10)
    assert q.permanent(np.zeros((0, 0))) == 1


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_permanent_matches_naive(n):
    rng = np.random.default_rng(n)
    for _ in range(5):
        a = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        ref = naive_permanent(a)
        assert abs(q.permanent(a) - ref) <= 1e-10 * max(1.0, abs(ref))


def test_permanent_cap():
    with pytest.raises(q.CapacityError):
        q.permanent(np.ones((9, 9)))


# --- output distributions -----------------------------------------------------


def test_hom_bunching():
    d = q.output_distribution(q.beamsplitter_unitary(0.5), (1, 1))
    probs = {occ.counts: p for occ, p in d.items()}
    assert probs[(2, 0)] == pytest.approx(0.5) and probs[(0, 2)] == pytest.approx(0.5)
    assert probs[(1, 1)] == pytest.approx(0.0, abs=1e-15)


def test_single_photon_split():
    d = q.output_distribution(q.beamsplitter_unitary(0.5), (1, 0))
    assert {o.counts: p for o, p in d.items()} == pytest.approx({(1, 0): 0.5, (0, 1): 0.5})


def test_unbalanced_coincidence():
    d = q.output_distribution(q.beamsplitter_unitary(0.3), (1, 1))
    assert {o.counts: p for o, p in d.items()}[(1, 1)] == pytest.approx(0.16, abs=1e-12)


def test_output_distribution_exhaustive_against_brute_force():
    rng = np.random.default_rng(7)
    for m in range(1, 5):
        u = random_unitary(m, rng)
        for n in range(0, 4):
            for occ in q.fock_basis(n, m):
                got = {o.counts: p for o, p in q.output_distribution(u, occ).items()}
                ref = brute_force_distribution(u, occ)
                assert set(got) == set(ref)
                for s in ref:
                    assert abs(got[s] - ref[s]) < 1e-9
                assert abs(sum(got.values()) - 1) < 1e-9


def test_output_distribution_cap():
    with pytest.raises(q.CapacityError):
        q.output_distribution(np.eye(2), (3, 2), cap=4)


def test_fock_occupation():
    occ = q.FockOccupation((1, 0, 2))
    assert occ.total == 3 and len(occ) == 3 and repr(occ) == "|1,0,2>"
    with pytest.raises(ValueError):
        q.FockOccupation((-1, 0))


# --- labels and HOM -------------------------------------------------------------


def test_multilabel_examples():
    u = q.beamsplitter_unitary(0.5)
    same = {o.counts: p for o, p in q.multilabel_distribution(u, [(0, 0), (1, 0)]).items()}
    assert same.get((1, 1), 0) == pytest.approx(0, abs=1e-15)
    diff = {o.counts: p for o, p in q.multilabel_distribution(u, [(0, 1), (1, 2)]).items()}
    assert diff[(1, 1)] == pytest.approx(0.5)
    p = 0.94
    mixed = p * same.get((1, 1), 0) + (1 - p) * diff[(1, 1)]
    assert mixed == pytest.approx(0.03)


def test_hom_formula_examples():
    assert q.hom_coincidence_prob(0.5, 1) == pytest.approx(0)
    assert q.hom_coincidence_prob(0.5, 0) == pytest.approx(0.5)
    assert q.hom_coincidence_prob(0.5, 0.94) == pytest.approx(0.03)


@pytest.mark.parametrize("r", [0.3, 0.5])
@pytest.mark.parametrize("v", [0.0, 0.5, 1.0])
def test_hom_formula_matches_label_sampling(r, v):
    rng = np.random.default_rng(11)
    u = q.beamsplitter_unitary(r)
    same = {o.counts: p for o, p in q.multilabel_distribution(u, [(0, 0), (1, 0)]).items()}.get((1, 1), 0)
    diff = {o.counts: p for o, p in q.multilabel_distribution(u, [(0, 1), (1, 2)]).items()}[(1, 1)]
    n = 200_000
    common = rng.random(n) < v
    hits = rng.random(n) < np.where(common, same, diff)
    est = hits.mean()
    exact = q.hom_coincidence_prob(r, v)
    assert abs(est - exact) < 4 * math.sqrt(exact * (1 - exact) / n) + 1e-12


def test_overlap_vs_delay():
    bw = 25e9
    assert q.overlap_vs_delay(0.9, bw, 0.0) == pytest.approx(0.9)
    assert q.overlap_vs_delay(0.9, bw, 1 / bw) == pytest.approx(0, abs=1e-15)
    assert q.overlap_vs_delay(1.0, bw, 0.5 / bw) == pytest.approx((2 / math.pi) ** 2)
    with pytest.raises(ValueError):
        q.overlap_vs_delay(0.5, 0.0, 1.0)


def test_sinc_series_branch():
    assert q.sinc(0.0) == 1.0
    assert q.sinc(1e-9) == pytest.approx(1.0)
    assert q.sinc(math.pi) == pytest.approx(0, abs=1e-15)


# --- pair statistics and loss -----------------------------------------------------


def test_pair_count_zero_mean():
    rng = np.random.default_rng(0)
    d = q.PairNumberDistribution(0.0)
    assert q.sample_pair_count(d, rng) == 0
    assert not q.sample_pair_count(d, rng, 1000).any()


def test_poisson_mean():
    rng = np.random.default_rng(1)
    d = q.PairNumberDistribution(9e-3, math.inf)
    x = q.sample_pair_count(d, rng, 10_000_000)
    assert abs(x.mean() - 9e-3) < 3 * math.sqrt(9e-3 / x.size)


@pytest.mark.parametrize("k", [1.0, 1 / 0.96, 4.0])
def test_factorial_moment_matches_schmidt_number(k):
    rng = np.random.default_rng(2)
    d = q.PairNumberDistribution(0.2, k)
    x = q.sample_pair_count(d, rng, 10_000_000).astype(float)
    g2 = np.mean(x * (x - 1)) / np.mean(x) ** 2
    # delta-method error of the ratio, estimated from the sample
    f = x * (x - 1)
    se = g2 * math.sqrt(np.var(f) / (f.size * np.mean(f) ** 2) + 4 * np.var(x) / (x.size * np.mean(x) ** 2))
    assert abs(g2 - (1 + 1 / k)) < 3 * se


def test_thermal_bunching_ratio():
    # P(n>=2)/P(1)^2 at K=1 is twice the Poisson value as nbar -> 0
    nbar = 9e-3
    th = q.PairNumberDistribution(nbar, 1.0)
    po = q.PairNumberDistribution(nbar, math.inf)
    ratio = lambda d: d.tail(1) / d.pmf(1)[1] ** 2
    assert ratio(th) / ratio(po) == pytest.approx(2.0, rel=0.02)


def test_pmf_and_pgf_consistent():
    d = q.PairNumberDistribution(0.3, 2.0)
    pmf = d.pmf(60)
    assert pmf.sum() == pytest.approx(1.0, abs=1e-12)
    z = 0.7
    assert np.sum(pmf * z ** np.arange(61)) == pytest.approx(float(d.pgf(z)), rel=1e-12)
    assert d.tail(d.support_bound(1e-15)) < 1e-15


def test_loss_thin_examples():
    rng = np.random.default_rng(3)
    photons = list(range(10))
    assert q.loss_thin(photons, 1.0, rng) == photons
    assert q.loss_thin(photons, 0.0, rng) == []
    kept = len(q.loss_thin(list(range(1_000_000)), 0.5, rng))
    assert abs(kept / 1e6 - 0.5) < 0.002
    with pytest.raises(ValueError):
        q.loss_thin(photons, 1.5, rng)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_loss_thinning_composes(m1, m2):
    rng = np.random.default_rng(4)
    n = 200_000
    twice = len(q.loss_thin(q.loss_thin(list(range(n)), m1, rng), m2, rng))
    once = len(q.loss_thin(list(range(n)), m1 * m2, rng))
    p = m1 * m2
    sd = math.sqrt(2 * n * p * (1 - p)) + 1
    assert abs(twice - once) < 5 * sd
