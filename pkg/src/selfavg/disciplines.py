"""Service disciplines: FIFO, the hourly batch, the slow/fast two-mode server,
and an engine for user-supplied disciplines that never see a clock."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import _kernels as K
from .core import DepartureSchedule, RateFunction, Trajectory, lindley_departures

DISCIPLINE_KINDS = ("fifo", "hourly_batch", "two_mode")


@dataclass(frozen=True)
class DisciplineSpec:
    kind: str = "fifo"
    slow_service: float = 100.0  # L
    fast_service: float = 0.01   # l
    threshold: int = 50          # F
    p_slow: float = 0.5
    period: float = 1.0

    def __post_init__(self):
        if self.kind not in DISCIPLINE_KINDS:
            raise ValueError(f"unknown discipline {self.kind!r}")
        if self.kind == "two_mode":
            if not self.slow_service > self.fast_service > 0:
                raise ValueError("two_mode needs slow_service > fast_service > 0")
            if int(self.threshold) != self.threshold or self.threshold < 1:
                raise ValueError("two_mode threshold must be an integer >= 1")
            if not 0 < self.p_slow < 1:
                raise ValueError("p_slow must lie in (0, 1)")
        if self.kind == "hourly_batch" and not self.period > 0:
            raise ValueError("batch period must be positive")

    def rate_bound(self, arrival_rate: float, eps: float = 0.1) -> float:
        """Exit-rate level Lambda / (4 eps + Lambda l) the two-mode argument
        says is exceeded somewhere; informational only."""
        return arrival_rate / (4 * eps + arrival_rate * self.fast_service)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "two_mode":
            d.update(slow_service=self.slow_service, fast_service=self.fast_service,
                     threshold=int(self.threshold), p_slow=self.p_slow)
        elif self.kind == "hourly_batch":
            d["period"] = self.period
        return d


@dataclass
class DisciplineState:
    """Snapshot of a server: mode, waiting customers and the one in service."""

    mode: str = "slow"
    waiting: list = field(default_factory=list)   # (arrival order, class) pairs
    in_service: int | None = None
    residual: float = 0.0


def two_mode_classes(n: int, spec: DisciplineSpec, rng: np.random.Generator) -> np.ndarray:
    """True marks a slow client."""
    return rng.random(n) < spec.p_slow


def two_mode_services(classes: np.ndarray, spec: DisciplineSpec) -> np.ndarray:
    return np.where(classes, spec.slow_service, spec.fast_service)


def simulate_two_mode(traj: Trajectory, classes, spec: DisciplineSpec):
    """Departures and the mode each customer was served in (0 slow, 1 fast)."""
    return K.two_mode(np.asarray(traj.arrivals), np.asarray(traj.services),
                      np.asarray(classes, dtype=np.bool_), int(spec.threshold))


def simulate_discipline(traj: Trajectory, classes, spec: DisciplineSpec) -> DepartureSchedule:
    """Exit epoch of every customer (customer order) under ``spec``."""
    if spec.kind == "fifo":
        return lindley_departures(traj)
    z = np.asarray(traj.arrivals)
    if spec.kind == "hourly_batch":
        return DepartureSchedule((np.floor(z / spec.period) + 1.0) * spec.period)
    if classes is None or len(classes) != len(traj):
        raise ValueError("two_mode needs one class label per customer")
    y, _ = simulate_two_mode(traj, classes, spec)
    return DepartureSchedule(y)


def discipline_state_at(traj: Trajectory, classes, spec: DisciplineSpec, t: float) -> DisciplineState:
    """Reconstruct the two-mode server state at time t from a full run."""
    y, modes = simulate_two_mode(traj, classes, spec)
    z = np.asarray(traj.arrivals)
    eta = np.asarray(traj.services)
    start = y - eta
    busy = np.flatnonzero((start <= t) & (y > t))
    waiting = [(int(i), "slow" if classes[i] else "fast")
               for i in np.flatnonzero((z <= t) & (start > t))]
    if busy.size:
        i = int(busy[0])
        return DisciplineState("fast" if modes[i] else "slow", waiting, i, float(y[i] - t))
    return DisciplineState("slow", waiting, None, 0.0)


# --- memoryless disciplines ---------------------------------------------------------

class InterfaceViolation(RuntimeError):
    pass


class ClockAccessError(InterfaceViolation):
    pass


@dataclass(frozen=True)
class WaitingCustomer:
    order: int        # arrival order (global index)
    required: float   # service time the customer needs


class QueueView(Sequence):
    """What a memoryless discipline may look at: the waiting customers in
    arrival order with their required times.  Nothing else is reachable."""

    __slots__ = ("_items",)

    def __init__(self, items):
        object.__setattr__(self, "_items", tuple(items))

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    @property
    def required_times(self) -> tuple:
        return tuple(c.required for c in self._items)

    @property
    def orders(self) -> tuple:
        return tuple(c.order for c in self._items)

    def __getattr__(self, name):
        if name in ("now", "time", "clock", "t"):
            raise ClockAccessError("memoryless disciplines cannot read the clock")
        raise InterfaceViolation(f"queue view exposes no {name!r}")

    def __setattr__(self, name, value):
        raise InterfaceViolation("queue view is read-only")


class MemorylessDiscipline(Protocol):
    name: str

    def select(self, queue: QueueView) -> int:
        """Position (in ``queue``) of the customer to serve next."""


class FifoHook:
    name = "fifo"

    def select(self, queue: QueueView) -> int:
        return 0


class ShortestJobFirst:
    name = "shortest_job_first"

    def select(self, queue: QueueView) -> int:
        req = queue.required_times
        return min(range(len(req)), key=lambda i: (req[i], i))


class LongestJobFirst:
    name = "longest_job_first"

    def select(self, queue: QueueView) -> int:
        req = queue.required_times
        return min(range(len(req)), key=lambda i: (-req[i], i))


def run_memoryless(traj: Trajectory, discipline: MemorylessDiscipline) -> DepartureSchedule:
    """Non-idling, run-to-completion service under a clock-free discipline.

    The discipline is consulted only when the server frees up, so it has no
    way to interrupt a service in progress.
    """
    z = np.asarray(traj.arrivals)
    eta = np.asarray(traj.services)
    n = z.size
    y = np.empty(n)
    waiting: list[int] = []
    nxt = 0
    t = -np.inf
    done = 0
    while done < n:
        if not waiting:
            t = max(t, z[nxt])
        while nxt < n and z[nxt] <= t:
            waiting.append(nxt)
            nxt += 1
        view = QueueView(WaitingCustomer(i + traj.index_offset, float(eta[i])) for i in waiting)
        pos = discipline.select(view)
        if not isinstance(pos, (int, np.integer)) or not 0 <= pos < len(waiting):
            raise InterfaceViolation(f"select returned {pos!r} for a queue of {len(waiting)}")
        i = waiting.pop(int(pos))
        t = t + eta[i]
        y[i] = t
        done += 1
    return DepartureSchedule(y)


HOOKS = {"fifo": FifoHook, "shortest_job_first": ShortestJobFirst,
         "longest_job_first": LongestJobFirst}


# --- experiments ------------------------------------------------------------------

@dataclass
class ViolationReport:
    discipline: str
    peak_t: float
    peak_rate: float
    peak_stderr: float
    sup_rate: float
    z_score: float
    significant: bool
    bin_width: float
    n_selection: int
    n_evaluation: int
    formula_bound: float | None = None  # Lambda / (4 eps + Lambda l) at eps = 0.1

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _peak(config, spec: DisciplineSpec, serve: DisciplineSpec, grid, ids, family):
    """Pick the peak bin on even replicas, measure it on odd ones, so the
    reported excess is not inflated by taking a maximum over noisy bins."""
    from .estimators import exit_rate_farm

    sel = exit_rate_farm(config, [grid], replica_ids=ids[0::2], family=family,
                         discipline=spec, serve=serve)[0]
    ev = exit_rate_farm(config, [grid], replica_ids=ids[1::2], family=family,
                        discipline=spec, serve=serve)[0]
    i = int(np.argmax(sel.values))
    return float(ev.t[i]), float(ev.values[i]), float(ev.stderr[i]), sel.n_replicas, ev.n_replicas


def detect_violation(config, rate: RateFunction | None = None, t_range=None,
                     bin_width: float = 0.002, replicas: int | None = None,
                     serve: DisciplineSpec | None = None, sigma: float = 3.0) -> ViolationReport:
    """Peak exit rate against sup rate for the configured discipline.

    ``serve`` replaces the service order while keeping the configured
    discipline's service times (a FIFO control on two-mode paths).
    """
    from .estimators import FAMILY_CONTROL

    if rate is not None:
        config = config.with_rate(rate)
    spec = config.discipline
    serve = spec if serve is None else serve
    lo, hi = config.window if t_range is None else t_range
    n = config.replicas if replicas is None else replicas
    if n < 2:
        raise ValueError("peak detection needs at least two replicas")
    ids = np.arange(n)
    t, peak, se, n_sel, n_ev = _peak(config, spec, serve, (lo, hi, bin_width), ids,
                                     FAMILY_CONTROL)
    sup = config.rate().sup
    z = (peak - sup) / se if se > 0 else (np.inf if peak > sup else -np.inf)
    bound = spec.rate_bound(sup) if spec.kind == "two_mode" else None
    return ViolationReport(serve.kind, t, peak, se, sup, float(z), bool(z >= sigma), bin_width,
                           n_sel, n_ev, bound)


def check_violation(config, params: dict | None = None):
    """Two-mode exceedance, FIFO control on the same paths and the hourly
    batch boundary spike, all under the configured rate."""
    import time

    from .estimators import IdentityReport

    started = time.perf_counter()
    p = dict(params or {})
    spec = config.discipline
    if spec.kind != "two_mode":
        spec = DisciplineSpec("two_mode")
    from dataclasses import replace

    cfg = replace(config, discipline=spec)
    t_range = tuple(p.get("t_range", config.window))
    width = float(p.get("bin_width", 0.002))
    n = int(p.get("replicas", config.replicas))
    sigma = float(p.get("sigma", 3.0))
    period = float(p.get("period", 1.0))
    two = detect_violation(cfg, t_range=t_range, bin_width=width, replicas=n, sigma=sigma)
    fifo = detect_violation(cfg, t_range=t_range, bin_width=width, replicas=n,
                            serve=DisciplineSpec("fifo"), sigma=sigma)
    batch = detect_violation(cfg, t_range=t_range, bin_width=width, replicas=n,
                             serve=DisciplineSpec("hourly_batch", period=period), sigma=sigma)
    batch_factor = batch.peak_rate / batch.sup_rate
    ok = two.significant and not fifo.significant and batch_factor >= 10
    measured = {"two_mode_peak": two.peak_rate, "two_mode_z": two.z_score,
                "fifo_peak": fifo.peak_rate, "fifo_z": fifo.z_score,
                "batch_peak_over_sup": batch_factor}
    return IdentityReport(
        "violation", "pass" if ok else "fail", measured,
        {"two_mode_z": f">= {sigma}", "fifo_z": f"< {sigma}", "batch_peak_over_sup": ">= 10"},
        sigma, n, time.perf_counter() - started,
        {"two_mode": two.to_dict(), "fifo": fifo.to_dict(), "hourly_batch": batch.to_dict(),
         "interpretations": ["switch to fast mode is evaluated when a service completes",
                             "slow mode serves the oldest fast client when no slow one waits"]})


def check_memoryless_selfaveraging(hook, config, x: float | None = None,
                                   replicas: int | None = None, coarse: float = 0.5):
    """Probe a clock-free discipline: kernel mass from exit-point crossings
    under a unit shift, and sup/inf bounds of the binned exit rate."""
    import time

    from .core import shift_point
    from .estimators import FAMILY_CONTROL, IdentityReport, exit_rate_farm, simulate_path

    started = time.perf_counter()
    if isinstance(hook, str):
        hook = HOOKS[hook]()
    rate = config.rate()
    lo, hi = config.window
    x = 0.5 * (lo + hi) if x is None else x
    n = min(config.replicas, 2000) if replicas is None else replicas
    fifo = DisciplineSpec("fifo")
    D = np.empty(n)
    for r in range(n):
        path = simulate_path(config, r, FAMILY_CONTROL + 1, x, rate, fifo)
        traj = Trajectory(path.arrivals, path.services)
        y0 = run_memoryless(traj, hook).departures
        if len(traj):
            zs = shift_point(rate, np.asarray(traj.arrivals), 1.0)
            y1 = run_memoryless(Trajectory(zs, path.services), hook).departures
        else:
            y1 = y0
        D[r] = np.count_nonzero(y0 < x) - np.count_nonzero(y1 < x)
    mass = float(D.mean())
    mass_se = float(D.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    est = exit_rate_farm(config, [(lo, hi, coarse)], n, family=FAMILY_CONTROL + 1,
                         discipline=fifo, hook=hook)[0]
    v, se = est.values, est.stderr
    i, j = int(np.argmax(v)), int(np.argmin(v))
    upper = bool(v[i] <= rate.sup + 3 * se[i])
    lower = bool(v[j] >= rate.inf - 3 * se[j])
    return IdentityReport(
        "memoryless_probe", "reported",
        {"mass": mass, "max_bin": float(v[i]), "min_bin": float(v[j])},
        {"mass": 1.0, "sup_rate": rate.sup, "inf_rate": rate.inf}, None, n,
        time.perf_counter() - started,
        {"discipline": getattr(hook, "name", type(hook).__name__), "mass_stderr": mass_se,
         "upper_bound_ok": upper, "lower_bound_ok": lower, "conjectural": True, "x": x})
