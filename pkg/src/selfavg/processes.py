"""Arrival and service samplers with per-replica seeded streams."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _kernels as K
from .core import RateFunction

SERVICE_KINDS = {
    "iid_exponential": K.IID_EXPONENTIAL,
    "iid_deterministic": K.IID_DETERMINISTIC,
    "iid_two_point": K.IID_TWO_POINT,
    "markov_modulated": K.MARKOV_MODULATED,
    "moving_average": K.MOVING_AVERAGE,
}
STREAM_TAGS = ("arrivals", "services", "auxiliary")


class OverloadWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ReplicaSeed:
    """Key of one replica stream.

    ``family`` separates independent replica farms built from the same master
    seed (e.g. the exit-rate farm and the idle-probability farm).
    """

    master_seed: int
    replica_index: int
    stream_tag: str = "arrivals"
    family: int = 0

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master seed must be a 64-bit unsigned integer")
        if self.replica_index < 0:
            raise ValueError("replica index must be nonnegative")
        if self.stream_tag not in STREAM_TAGS:
            raise ValueError(f"unknown stream tag {self.stream_tag!r}")

    def with_tag(self, tag: str) -> "ReplicaSeed":
        return ReplicaSeed(self.master_seed, self.replica_index, tag, self.family)

    def generator(self, sub: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence(
            self.master_seed,
            spawn_key=(self.family, self.replica_index, STREAM_TAGS.index(self.stream_tag), sub))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class ServiceLawSpec:
    """Stationary service-time law, rescaled so its mean equals ``mean``.

    params per kind:
      iid_exponential, iid_deterministic: none
      iid_two_point: low, high, p_low
      markov_modulated: means [m0, m1], switch (scalar or [p01, p10]);
        within a state services are exponential with the state mean
      moving_average: k (window of exponential innovations)
    """

    kind: str = "iid_exponential"
    params: dict = field(default_factory=dict)
    mean: float = 1.0

    def __post_init__(self):
        if self.kind not in SERVICE_KINDS:
            raise ValueError(f"unknown service law {self.kind!r}")
        if not self.mean > 0:
            raise ValueError("target mean must be positive")
        p = self.params
        if self.kind == "iid_two_point":
            if not (p.get("low", 0) > 0 and p.get("high", 0) > 0 and 0 < p.get("p_low", -1) < 1):
                raise ValueError("two-point law needs low, high > 0 and 0 < p_low < 1")
        elif self.kind == "markov_modulated":
            means = p.get("means", ())
            sw = self.switch_probs if "switch" in p else (0.0, 0.0)
            if len(means) != 2 or min(means) <= 0:
                raise ValueError("markov_modulated needs two positive state means")
            if not all(0 < s <= 1 for s in sw):
                raise ValueError("switch probabilities must lie in (0, 1]")
        elif self.kind == "moving_average":
            if int(p.get("k", 0)) < 1:
                raise ValueError("moving_average needs k >= 1")

    @property
    def code(self) -> int:
        return SERVICE_KINDS[self.kind]

    @property
    def switch_probs(self) -> tuple[float, float]:
        sw = self.params["switch"]
        if np.ndim(sw) == 0:
            return (float(sw), float(sw))
        return (float(sw[0]), float(sw[1]))

    @property
    def n_states(self) -> int:
        return 2 if self.kind == "markov_modulated" else 1

    def stationary(self) -> np.ndarray:
        if self.kind != "markov_modulated":
            return np.ones(1)
        p01, p10 = self.switch_probs
        return np.array([p10 / (p01 + p10), p01 / (p01 + p10)])

    def raw_mean(self) -> float:
        p = self.params
        if self.kind == "iid_two_point":
            return p["p_low"] * p["low"] + (1 - p["p_low"]) * p["high"]
        if self.kind == "markov_modulated":
            return float(self.stationary() @ np.asarray(p["means"], dtype=float))
        return 1.0

    def kernel_params(self) -> np.ndarray:
        """Flat parameter vector for the compiled samplers, already rescaled."""
        c = self.mean / self.raw_mean()
        p = self.params
        if self.kind in ("iid_exponential", "iid_deterministic"):
            return np.array([self.mean])
        if self.kind == "iid_two_point":
            return np.array([c * p["low"], c * p["high"], p["p_low"]])
        if self.kind == "markov_modulated":
            m0, m1 = p["means"]
            return np.array([c * m0, c * m1, *self.switch_probs])
        return np.array([self.mean, float(int(p["k"]))])

    def analytic_mean(self) -> float:
        kp = self.kernel_params()
        if self.kind == "iid_two_point":
            return float(kp[2] * kp[0] + (1 - kp[2]) * kp[1])
        if self.kind == "markov_modulated":
            return float(self.stationary() @ kp[:2])
        return float(kp[0])

    @property
    def tail(self) -> int:
        """Extra innovations needed beyond one per customer."""
        return int(self.params["k"]) - 1 if self.kind == "moving_average" else 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "mean": self.mean}


@njit(cache=True)
def _markov_states(U, pi0, p01, p10):
    n = U.shape[0]
    s = np.empty(n, np.int64)
    if n == 0:
        return s
    s[0] = 0 if U[0] < pi0 else 1
    for j in range(1, n):
        p = p01 if s[j - 1] == 0 else p10
        s[j] = 1 - s[j - 1] if U[j] < p else s[j - 1]
    return s


def services_from_draws(spec: ServiceLawSpec, E: np.ndarray, U: np.ndarray, n: int):
    """Services for ``n`` customers from raw Exp(1) draws E and uniforms U.

    Returns (services, states); states is None except for markov_modulated.
    """
    kp = spec.kernel_params()
    if spec.kind == "iid_exponential":
        return kp[0] * E[:n], None
    if spec.kind == "iid_deterministic":
        return np.full(n, kp[0]), None
    if spec.kind == "iid_two_point":
        return np.where(U[:n] < kp[2], kp[0], kp[1]), None
    if spec.kind == "markov_modulated":
        states = _markov_states(U[:n], spec.stationary()[0], kp[2], kp[3])
        return kp[:2][states] * E[:n], states
    k = int(kp[1])
    sums = np.convolve(E[: n + k - 1], np.ones(k), mode="valid")
    return kp[0] * sums / k, None


def sample_services(spec: ServiceLawSpec, n: int, seed: ReplicaSeed, return_states: bool = False):
    E = seed.with_tag("services").generator().standard_exponential(n + spec.tail)
    U = seed.with_tag("auxiliary").generator().random(n)
    eta, states = services_from_draws(spec, E, U, n)
    return (eta, states) if return_states else eta


def _bounds(rate: RateFunction, lo, hi):
    a, b = rate.window
    lo = a if lo is None else max(a, lo)
    hi = b if hi is None else min(b, hi)
    return lo, hi


def _thin_segments(rate: RateFunction, rngs, lo, hi):
    nodes, v = rate.nodes, rate.samples
    a = np.maximum(nodes[:-1], lo)
    b = np.minimum(nodes[1:], hi)
    ok = b > a
    a, b = a[ok], b[ok]
    env = np.maximum(v[:-1], v[1:])[ok]
    # counts and (position, acceptance) pairs come from separate streams so
    # the draws for early segments never depend on later rate values
    counts = rngs[0].poisson(env * (b - a))
    total = int(counts.sum())
    seg = np.repeat(np.arange(a.size), counts)
    uv = rngs[1].random((total, 2))
    pos = a[seg] + (b[seg] - a[seg]) * uv[:, 0]
    keep = uv[:, 1] * env[seg] < rate(pos)
    return np.sort(pos[keep]), float(np.sum(env * (b - a)))


def _thin_global(rate: RateFunction, rngs, lo, hi):
    sup = rate.sup
    n = rngs[0].poisson(sup * (hi - lo))
    uv = rngs[1].random((n, 2))
    pos = lo + (hi - lo) * uv[:, 0]
    keep = uv[:, 1] * sup < rate(pos)
    return np.sort(pos[keep]), sup * (hi - lo)


def _invert(rate: RateFunction, rngs, lo, hi):
    rng = rngs[0]
    m_lo, m_hi = rate.cumulative(lo), rate.cumulative(hi)
    span = m_hi - m_lo
    chunk = int(span + 5 * np.sqrt(span) + 16)
    gam = np.cumsum(rng.standard_exponential(chunk))
    while gam[-1] < span:
        gam = np.concatenate([gam, gam[-1] + np.cumsum(rng.standard_exponential(chunk))])
    gam = gam[gam < span]
    return rate.inverse_cumulative(m_lo + gam), span


def sample_arrivals(rate: RateFunction, seed: ReplicaSeed, lo: float | None = None,
                    hi: float | None = None, method: str = "thinning",
                    envelope: str = "segment", return_acceptance: bool = False):
    """Inhomogeneous Poisson epochs on [lo, hi] (default: the rate window).

    Thinning uses a per-grid-segment envelope by default, which makes the
    draws up to any time t depend only on the rate up to the grid node after
    t.  ``envelope="global"`` thins against sup rate; ``method="inversion"``
    maps a unit-rate stream through the inverse cumulative mass.
    """
    lo, hi = _bounds(rate, lo, hi)
    s = seed.with_tag("arrivals")
    rngs = (s.generator(0), s.generator(1))
    while True:
        if method == "inversion":
            z, env_mass = _invert(rate, rngs, lo, hi)
        elif envelope == "global":
            z, env_mass = _thin_global(rate, rngs, lo, hi)
        else:
            z, env_mass = _thin_segments(rate, rngs, lo, hi)
        if z.size < 2 or np.all(np.diff(z) > 0):
            break
        # exact collision: draw again from the continuing stream
    if return_acceptance:
        return z, rate.mass(lo, hi) / env_mass
    return z


@dataclass(frozen=True)
class LoadReport:
    utilization: float
    mean_rate: float
    mean_service: float
    overloaded: bool
    warnings: tuple = ()


def utilization_diagnostic(rate: RateFunction, spec: ServiceLawSpec, lo: float | None = None,
                           hi: float | None = None, warn: bool = True) -> LoadReport:
    lo, hi = _bounds(rate, lo, hi)
    mean_rate = rate.window_average(lo, hi)
    ell = mean_rate * spec.analytic_mean()
    msgs = []
    if ell >= 1:
        msgs.append(f"utilization {ell:.3g} >= 1: no-overload presumed to fail")
    if not rate.continuous:
        msgs.append("rate profile is discontinuous (ramped on the grid)")
    if warn:
        for m in msgs:
            warnings.warn(m, OverloadWarning if "utilization" in m else UserWarning, stacklevel=2)
    return LoadReport(ell, mean_rate, spec.analytic_mean(), ell >= 1, tuple(msgs))
