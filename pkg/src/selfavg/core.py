"""Per-trajectory mechanics of the single-server FIFO queue.

Arrival epochs move under the nonlinear shift ``theta_t`` (travel for time
``t`` along ``dx / rate(x)``), exits come from the Lindley recursion, and
the crossing counters compare a trajectory with its shifted copy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels as K

SHIFT_TOL = 1e-9


class OutOfWindowError(ValueError):
    """A shift or evaluation left the window a rate function is defined on."""


class InvalidTrajectory(ValueError):
    pass


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RateFunction:
    """Positive arrival rate, piecewise linear between uniform grid nodes.

    The cumulative mass ``M(t) = int_{t0}^t rate`` is kept exactly (it is
    piecewise quadratic), which is what the shift inverts.
    """

    t0: float
    step: float
    samples: np.ndarray
    label: str = "table"
    continuous: bool = True
    cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        samples = _frozen(self.samples)
        if samples.ndim != 1 or samples.size < 2:
            raise ValueError("rate needs at least two grid samples")
        if not self.step > 0:
            raise ValueError("rate grid step must be positive")
        if not np.all(np.isfinite(samples)) or np.any(samples <= 0):
            raise ValueError("rate samples must be finite and strictly positive")
        object.__setattr__(self, "samples", samples)
        seg = 0.5 * (samples[:-1] + samples[1:]) * self.step
        cum = np.empty(samples.size)
        cum[0] = 0.0
        np.cumsum(seg, out=cum[1:])
        cum.setflags(write=False)
        object.__setattr__(self, "cum", cum)

    # construction helpers
    @classmethod
    def from_callable(cls, f: Callable, lo: float, hi: float, step: float,
                      label: str = "callable", continuous: bool = True) -> "RateFunction":
        n = int(round((hi - lo) / step)) + 1
        nodes = lo + step * np.arange(n)
        return cls(lo, step, np.asarray(f(nodes), dtype=float) * np.ones(n), label, continuous)

    @classmethod
    def constant(cls, value: float, lo: float, hi: float, step: float = 0.05) -> "RateFunction":
        return cls.from_callable(lambda t: np.full_like(t, value), lo, hi, step, "constant")

    @classmethod
    def sinusoidal(cls, base: float, amplitude: float, lo: float, hi: float,
                   step: float = 0.05, frequency: float = 1.0, phase: float = 0.0) -> "RateFunction":
        return cls.from_callable(
            lambda t: base + amplitude * np.sin(frequency * t + phase), lo, hi, step, "sinusoidal")

    @classmethod
    def step_profile(cls, before: float, after: float, at: float, lo: float, hi: float,
                     step: float = 0.001) -> "RateFunction":
        # the jump becomes a ramp one grid step wide, ending at ``at``; nodes
        # within rounding of ``at`` count as reaching it
        return cls.from_callable(
            lambda t: np.where(t >= at - 1e-9 * step, after, before), lo, hi, step, "step",
            continuous=False)

    @property
    def window(self) -> tuple[float, float]:
        return (self.t0, self.t0 + self.step * (self.samples.size - 1))

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.step * np.arange(self.samples.size)

    @property
    def packed(self):
        return (float(self.t0), float(self.step), self.samples, self.cum)

    @property
    def sup(self) -> float:
        return float(self.samples.max())

    @property
    def inf(self) -> float:
        return float(self.samples.min())

    @property
    def total_mass(self) -> float:
        return float(self.cum[-1])

    def contains(self, t) -> bool:
        lo, hi = self.window
        t = np.asarray(t)
        return bool(np.all((t >= lo) & (t <= hi)))

    def _check(self, t):
        if not self.contains(t):
            raise OutOfWindowError(f"time outside rate window {self.window}")

    def __call__(self, t):
        self._check(t)
        return np.interp(t, self.nodes, self.samples)

    def cumulative(self, t):
        """M(t0, t)."""
        self._check(t)
        if np.ndim(t) == 0:
            return float(K.cum_mass(float(t), *self.packed))
        return K.cum_mass_array(np.asarray(t, dtype=float).ravel(), *self.packed).reshape(np.shape(t))

    def mass(self, a, b):
        return self.cumulative(b) - self.cumulative(a)

    def inverse_cumulative(self, m):
        m_arr = np.asarray(m, dtype=float)
        if np.any(m_arr < 0) or np.any(m_arr > self.cum[-1]):
            raise OutOfWindowError("cumulative mass outside rate window")
        if m_arr.ndim == 0:
            return float(K.inv_mass(float(m_arr), *self.packed))
        return K.inv_mass_array(m_arr.ravel(), *self.packed).reshape(m_arr.shape)

    def window_average(self, lo: float | None = None, hi: float | None = None) -> float:
        a, b = self.window
        lo = a if lo is None else lo
        hi = b if hi is None else hi
        return float(self.mass(lo, hi) / (hi - lo))

    def modified_after(self, t: float, factor: float) -> "RateFunction":
        """Copy with samples scaled by ``factor`` on nodes strictly after ``t``,
        keeping the function unchanged on ``(-inf, t]``."""
        nodes = self.nodes
        k = int(np.searchsorted(nodes, t, side="left"))
        if k < nodes.size and not np.isclose(nodes[k], t, rtol=0, atol=1e-12 * max(1.0, abs(t))):
            k += 1  # t inside a segment: keep the node just after it
        out = self.samples.copy()
        out[k + 1:] *= factor
        return RateFunction(self.t0, self.step, out, self.label, self.continuous)

    def modified_before(self, t: float, factor: float) -> "RateFunction":
        nodes = self.nodes
        out = self.samples.copy()
        out[nodes < t] *= factor
        return RateFunction(self.t0, self.step, out, self.label, self.continuous)


@dataclass(frozen=True, eq=False)
class Trajectory:
    arrivals: np.ndarray
    services: np.ndarray
    index_offset: int = 0

    def __post_init__(self):
        z = _frozen(self.arrivals)
        eta = _frozen(self.services)
        if z.ndim != 1 or z.shape != eta.shape:
            raise InvalidTrajectory("arrivals and services must be 1-d and of equal length")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(eta))):
            raise InvalidTrajectory("non-finite epochs or services")
        if z.size > 1 and np.any(np.diff(z) <= 0):
            raise InvalidTrajectory("arrival epochs must be strictly increasing")
        if np.any(eta <= 0):
            raise InvalidTrajectory("service times must be positive")
        object.__setattr__(self, "arrivals", z)
        object.__setattr__(self, "services", eta)

    def __len__(self):
        return self.arrivals.size

    def prefix(self, n: int) -> "Trajectory":
        return Trajectory(self.arrivals[:n], self.services[:n], self.index_offset)

    def before(self, x: float) -> "Trajectory":
        """Customers arriving strictly before ``x``."""
        return self.prefix(int(np.searchsorted(self.arrivals, x, side="left")))


@dataclass(frozen=True, eq=False)
class BusyPeriod:
    head_index: int
    start: float
    end: float
    departure_epochs: np.ndarray
    first: int = 0  # local index of the head inside its trajectory

    @property
    def support(self) -> tuple[float, float]:
        return (self.start, self.end)

    def __len__(self):
        return self.departure_epochs.size


@dataclass(frozen=True, eq=False)
class DepartureSchedule:
    """Exit epochs per customer (in customer order) plus the busy periods."""

    departures: np.ndarray
    clusters: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "departures", _frozen(self.departures))
        object.__setattr__(self, "clusters", tuple(self.clusters))

    @property
    def epochs(self) -> np.ndarray:
        return np.sort(self.departures)

    def __len__(self):
        return self.departures.size


@dataclass(frozen=True)
class CrossingCounts:
    s_count: int
    r_count: int
    queue_len: int
    x: float
    T: float
    primed: bool = False
    dropped: int = 0


# --- departures and conflict resolution ---------------------------------------

def lindley_departures(traj: Trajectory) -> DepartureSchedule:
    y = K.lindley(traj.arrivals, traj.services)
    return DepartureSchedule(y, _clusters(traj, y))


def head_mask(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    mask = np.ones(z.size, dtype=bool)
    if z.size > 1:
        mask[1:] = z[1:] > y[:-1]
    return mask


def _clusters(traj: Trajectory, y: np.ndarray) -> tuple:
    z = traj.arrivals
    if z.size == 0:
        return ()
    heads = np.flatnonzero(head_mask(z, y))
    ends = np.append(heads[1:], z.size)
    out = []
    for h, e in zip(heads, ends):
        out.append(BusyPeriod(int(h) + traj.index_offset, float(z[h]), float(y[e - 1]),
                              _frozen(y[h:e]), int(h)))
    return tuple(out)


def conflict_resolution_iterate(traj: Trajectory, n: int) -> Trajectory:
    """Apply the conflict-resolution operator ``n`` times to the arrival epochs."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    z = np.array(traj.arrivals)
    for _ in range(n):
        z = K.resolve_once(z, np.asarray(traj.services))
    return _unchecked(z, traj.services, traj.index_offset)


def resolve_conflicts(traj: Trajectory, max_iter: int | None = None) -> tuple[Trajectory, int]:
    """Iterate the operator to its fixed point; returns (resolved, iterations)."""
    z = np.array(traj.arrivals)
    eta = np.asarray(traj.services)
    limit = max_iter if max_iter is not None else len(traj) + 1
    for n in range(limit + 1):
        nz = K.resolve_once(z, eta)
        if np.array_equal(nz, z):
            return _unchecked(z, eta, traj.index_offset), n
        z = nz
    raise RuntimeError("conflict resolution did not stabilize")


def _unchecked(z, eta, offset) -> Trajectory:
    # resolved epochs may touch a predecessor's exit, which the validator rejects
    t = object.__new__(Trajectory)
    object.__setattr__(t, "arrivals", _frozen(z))
    object.__setattr__(t, "services", _frozen(eta))
    object.__setattr__(t, "index_offset", offset)
    return t


def decompose_clusters(traj: Trajectory, sched: DepartureSchedule) -> list:
    y = K.lindley(traj.arrivals, traj.services)
    if y.shape != sched.departures.shape or not np.array_equal(y, sched.departures):
        raise ValueError("schedule is not the FIFO resolution of this trajectory")
    return list(_clusters(traj, y))


# --- nonlinear shift -----------------------------------------------------------

def shift_point(rate: RateFunction, x, t):
    """theta_t(x): the point reached from x after rate-mass t."""
    m = rate.cumulative(x) + np.asarray(t, dtype=float)
    lo, hi = 0.0, rate.total_mass
    if np.any(m < lo) or np.any(m > hi):
        raise OutOfWindowError("shift leaves the rate window")
    return rate.inverse_cumulative(np.clip(m, lo, hi))


def shift_trajectory(rate: RateFunction, traj: Trajectory, t: float) -> Trajectory:
    if t == 0 or len(traj) == 0:
        return traj
    z = shift_point(rate, traj.arrivals, t)
    return _unchecked(z, traj.services, traj.index_offset)


# --- V functional and crossing counters -----------------------------------------

def _cover(z, eta, y, x):
    """Index j of the customer in service at x (half-open [start, exit)) and
    the index of its cluster head; (-1, -1) if the server is idle at x."""
    j = int(np.searchsorted(y, x, side="right"))
    if j >= y.size:
        return -1, -1
    start = z[j] if j == 0 or z[j] > y[j - 1] else y[j - 1]
    if start > x:
        return -1, -1
    heads = np.flatnonzero(head_mask(z[: j + 1], y[: j + 1]))
    return j, int(heads[-1])


def v_functional(traj: Trajectory, rate: RateFunction, x: float,
                 sched: DepartureSchedule | None = None) -> float:
    """0 if the server is idle at x, else 1 / (rate(head epoch) * covering service)."""
    rate._check(x)
    y = sched.departures if sched is not None else K.lindley(traj.arrivals, traj.services)
    j, h = _cover(traj.arrivals, traj.services, y, x)
    if j < 0:
        return 0.0
    return float(1.0 / (rate(traj.arrivals[h]) * traj.services[j]))


def queue_length(z: np.ndarray, y: np.ndarray, x: float) -> int:
    return int(np.count_nonzero((z <= x) & (y > x)))


def crossing_arrays(z, eta, rate: RateFunction, x: float, T: float, y=None):
    """Counts on raw arrays (trajectory already restricted as needed).

    Returns (s, r, q, v_integral, dropped).  For T >= 0 the integral is the
    closed-form time integral of V_x along the shift; for T < 0 it is nan.
    """
    if y is None:
        y = K.lindley(z, eta)
    q = queue_length(z, y, x)
    if T >= 0:
        n = int(np.searchsorted(z, x, side="left"))
        zp, ep, yp = z[:n], eta[:n], y[:n]
        if T == 0:
            return 0, 0, q, 0.0, 0
        shift_point(rate, x, T)  # raises if the shifted location leaves the window
        zs = shift_point(rate, zp, T) if n else zp
        ys = K.lindley(zs, ep)
        s = int(np.count_nonzero((yp < x) & (ys > x)))
        r = int(np.count_nonzero(zs > x))
        lo = np.maximum(yp, x)
        hi = np.minimum(ys, x + ep)
        v = float(np.sum(np.clip(hi - lo, 0.0, None) / ep))
        return s, r, q, v, 0
    xr = shift_point(rate, x, -T)
    n = int(np.searchsorted(z, xr, side="left"))
    zp, ep, yp = z[:n], eta[:n], y[:n]
    lo_mass = rate.cumulative(zp) + T if n else zp
    keep = lo_mass >= 0.0
    dropped = int(n - np.count_nonzero(keep))
    zs = rate.inverse_cumulative(lo_mass[keep]) if n else zp
    ys = K.lindley(zs, ep[keep])
    s = int(np.count_nonzero((yp[keep] > x) & (ys < x)))
    r = int(np.count_nonzero((zp[keep] > x) & (zs < x)))
    return s, r, q, float("nan"), dropped


def count_crossings(traj: Trajectory, rate: RateFunction, x: float, T: float) -> CrossingCounts:
    """Exit points and arrival points crossing x when passing from omega to
    theta_T omega, plus the queue length at x.  Negative T gives the primed
    counters (crossings from right to left)."""
    rate._check(x)
    s, r, q, _, dropped = crossing_arrays(np.asarray(traj.arrivals), np.asarray(traj.services),
                                          rate, x, T)
    return CrossingCounts(s, r, q, float(x), float(T), primed=T < 0, dropped=dropped)


def v_time_integral(traj: Trajectory, rate: RateFunction, x: float, T: float) -> float:
    """int_0^T V_x(theta_t omega) dt, exactly.

    Exit j moves monotonically and continuously with t and, while it is the
    rod covering x, advances at speed 1/rate(head), so the integrand
    integrates to (distance travelled inside (x, x + eta_j]) / eta_j.
    """
    if T < 0:
        raise ValueError("horizon must be nonnegative")
    rate._check(x)
    return crossing_arrays(np.asarray(traj.arrivals), np.asarray(traj.services), rate, x, T)[3]
