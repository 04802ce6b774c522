from __future__ import annotations

import warnings

import numpy as np
import pytest
from scipy import stats

from selfavg.core import RateFunction
from selfavg.processes import (OverloadWarning, ReplicaSeed, ServiceLawSpec, sample_arrivals,
                               sample_services, utilization_diagnostic)

SEED = 918273


def test_poisson_count_window():
    r = RateFunction.constant(0.5, 0, 1000)
    z = sample_arrivals(r, ReplicaSeed(SEED, 0))
    assert abs(z.size - 500) <= 4 * np.sqrt(500)
    assert np.all(np.diff(z) > 0) and z[0] >= 0 and z[-1] <= 1000


@pytest.mark.parametrize("method, envelope", [("thinning", "segment"), ("thinning", "global"),
                                              ("inversion", "segment")])
def test_counts_are_poisson_chi_square(method, envelope):
    r = RateFunction.sinusoidal(1.0, 0.5, 0, 10, 0.05)
    a, b = 2.0, 5.0
    mu = r.mass(a, b)
    n = 10_000
    counts = np.empty(n, int)
    for i in range(n):
        z = sample_arrivals(r, ReplicaSeed(SEED, i), method=method, envelope=envelope)
        counts[i] = np.count_nonzero((z >= a) & (z <= b))
    # cells 0..hi-1 plus a pooled upper tail
    hi = int(mu + 3 * np.sqrt(mu)) + 1
    obs = [np.count_nonzero(counts == c) for c in range(hi)] + [np.count_nonzero(counts >= hi)]
    exp = list(stats.poisson.pmf(np.arange(hi), mu)) + [stats.poisson.sf(hi - 1, mu)]
    exp = np.asarray(exp) * n
    _, pval = stats.chisquare(obs, exp)
    assert pval > 0.01


def test_disjoint_counts_uncorrelated():
    r = RateFunction.constant(2.0, 0, 4)
    n = 4000
    c = np.empty((n, 2))
    for i in range(n):
        z = sample_arrivals(r, ReplicaSeed(SEED, i))
        c[i] = np.count_nonzero(z < 2), np.count_nonzero(z >= 2)
    assert abs(np.corrcoef(c.T)[0, 1]) < 4 / np.sqrt(n)


def test_thinning_acceptance():
    r = RateFunction.sinusoidal(0.5, 0.3, 0, 2 * np.pi * 20, 0.05)
    _, acc = sample_arrivals(r, ReplicaSeed(SEED, 0), envelope="global", return_acceptance=True)
    lo, hi = r.window
    assert acc == pytest.approx(r.window_average(lo, hi) / r.sup, rel=1e-12)
    # empirical: accepted points per unit of envelope mass
    n = 300
    kept = sum(sample_arrivals(r, ReplicaSeed(SEED, i), envelope="global").size for i in range(n))
    env = n * r.sup * (hi - lo)
    assert abs(kept / env - acc) <= 4 * np.sqrt(acc * (1 - acc) / env) + 4 * np.sqrt(kept) / env


def test_segment_thinning_is_prefix_causal():
    a = RateFunction.sinusoidal(0.5, 0.3, 0, 50, 0.05)
    b = a.modified_after(25.0, factor=3.0)
    za = sample_arrivals(a, ReplicaSeed(SEED, 3))
    zb = sample_arrivals(b, ReplicaSeed(SEED, 3))
    assert np.array_equal(za[za < 25.0], zb[zb < 25.0])


def test_deterministic_services():
    eta = sample_services(ServiceLawSpec("iid_deterministic"), 100, ReplicaSeed(SEED, 0))
    assert np.all(eta == 1.0)


def test_markov_mean():
    spec = ServiceLawSpec("markov_modulated", {"means": [0.5, 1.5], "switch": 0.1})
    eta = sample_services(spec, 100_000, ReplicaSeed(SEED, 0))
    assert abs(eta.mean() - 1.0) <= 0.02


def test_moving_average_autocorrelation():
    eta = sample_services(ServiceLawSpec("moving_average", {"k": 5}), 100_000, ReplicaSeed(SEED, 0))
    c = eta - eta.mean()
    assert (c[1:] @ c[:-1]) / (c @ c) > 0.5


LAWS = [
    ServiceLawSpec("iid_exponential", {}, 1.0),
    ServiceLawSpec("iid_deterministic", {}, 0.7),
    ServiceLawSpec("iid_two_point", {"low": 0.2, "high": 3.0, "p_low": 0.8}, 1.0),
    ServiceLawSpec("markov_modulated", {"means": [0.5, 1.5], "switch": [0.1, 0.3]}, 1.0),
    ServiceLawSpec("moving_average", {"k": 5}, 2.0),
]


@pytest.mark.parametrize("spec", LAWS, ids=lambda s: s.kind)
def test_normalization(spec):
    assert spec.analytic_mean() == pytest.approx(spec.mean, rel=1e-14)
    eta = sample_services(spec, 100_000, ReplicaSeed(SEED, 1))
    # batch means absorb the serial correlation of the dependent laws
    se = eta.reshape(100, -1).mean(axis=1).std(ddof=1) / 10
    assert abs(eta.mean() - spec.mean) <= 4 * max(se, 1e-12)


def test_markov_starts_stationary():
    spec = ServiceLawSpec("markov_modulated", {"means": [0.5, 1.5], "switch": [0.1, 0.3]})
    first = [sample_services(spec, 1, ReplicaSeed(SEED, i), return_states=True)[1][0]
             for i in range(4000)]
    pi1 = spec.stationary()[1]
    assert abs(np.mean(first) - pi1) <= 4 * np.sqrt(pi1 * (1 - pi1) / 4000)


@pytest.mark.parametrize("kind, params", [
    ("iid_two_point", {"low": 0, "high": 1, "p_low": 0.5}),
    ("markov_modulated", {"means": [0.5, -1], "switch": 0.1}),
    ("markov_modulated", {"means": [0.5, 1], "switch": 0.0}),
    ("moving_average", {"k": 0}),
    ("gamma", {}),
])
def test_invalid_laws_rejected(kind, params):
    with pytest.raises(ValueError):
        ServiceLawSpec(kind, params)
    with pytest.raises(ValueError):
        ServiceLawSpec("iid_exponential", {}, 0.0)


def test_determinism_and_stream_independence():
    r = RateFunction.constant(1.0, 0, 100)
    spec = LAWS[3]
    a = sample_arrivals(r, ReplicaSeed(SEED, 7))
    assert np.array_equal(a, sample_arrivals(r, ReplicaSeed(SEED, 7)))
    assert not np.array_equal(a, sample_arrivals(r, ReplicaSeed(SEED, 8)))
    # replica 7's draws do not depend on which other replicas were drawn first
    for i in range(5):
        sample_services(spec, 50, ReplicaSeed(SEED, i))
    e1 = sample_services(spec, 50, ReplicaSeed(SEED, 7))
    assert np.array_equal(e1, sample_services(spec, 50, ReplicaSeed(SEED, 7)))
    # arrival and service streams are disjoint
    s = ReplicaSeed(SEED, 7)
    x = s.with_tag("arrivals").generator().random(4)
    y = s.with_tag("services").generator().random(4)
    assert not np.array_equal(x, y)
    assert not np.array_equal(ReplicaSeed(SEED, 7, family=1).generator().random(4),
                              s.generator().random(4))


def test_seed_validation():
    with pytest.raises(ValueError):
        ReplicaSeed(-1, 0)
    with pytest.raises(ValueError):
        ReplicaSeed(1, 0, "clock")


def test_utilization_examples():
    exp = ServiceLawSpec()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = utilization_diagnostic(RateFunction.constant(0.5, 0, 100), exp)
    assert rep.utilization == pytest.approx(0.5) and not rep.overloaded
    with pytest.warns(OverloadWarning):
        rep = utilization_diagnostic(RateFunction.constant(1.2, 0, 100), exp)
    assert rep.utilization == pytest.approx(1.2) and rep.overloaded
    sine = RateFunction.sinusoidal(0.5, 0.2, 0, 2 * np.pi * 4, 2 * np.pi / 400)
    assert utilization_diagnostic(sine, exp).utilization == pytest.approx(0.5, abs=1e-6)
