from __future__ import annotations

import numpy as np
import pytest

from selfavg.config import loads
from selfavg.core import Trajectory, lindley_departures
from selfavg.disciplines import (ClockAccessError, DisciplineSpec, FifoHook, InterfaceViolation,
                                 LongestJobFirst, QueueView, ShortestJobFirst, WaitingCustomer,
                                 check_memoryless_selfaveraging, discipline_state_at,
                                 run_memoryless, simulate_discipline, simulate_two_mode,
                                 two_mode_classes, two_mode_services)

TWO = DisciplineSpec("two_mode")


def traj(z, eta):
    return Trajectory(np.asarray(z, float), np.asarray(eta, float))


def random_two_mode(seed, n=400, rate=100.0):
    rng = np.random.default_rng(seed)
    z = np.cumsum(rng.exponential(1 / rate, n))
    classes = two_mode_classes(n, TWO, rng)
    return traj(z, two_mode_services(classes, TWO)), classes


def assert_non_idling(t, y):
    z, eta = np.asarray(t.arrivals), np.asarray(t.services)
    start = y - eta  # recovered start; exact up to one rounding of y
    order = np.argsort(start, kind="stable")
    s, e = start[order], y[order]
    # each service begins when the previous ends, or at the next arrival if nobody waits
    pending = np.minimum.accumulate(z[order][::-1])[::-1]
    prev_end = np.concatenate([[-np.inf], e[:-1]])
    assert np.allclose(s, np.maximum(prev_end, pending), rtol=1e-13, atol=1e-12)
    assert np.all(s >= z[order] - 1e-12 * np.abs(z[order]).max())


def test_spec_validation():
    with pytest.raises(ValueError):
        DisciplineSpec("lifo")
    with pytest.raises(ValueError):
        DisciplineSpec("two_mode", slow_service=0.01, fast_service=1.0)
    with pytest.raises(ValueError):
        DisciplineSpec("two_mode", threshold=0)
    with pytest.raises(ValueError):
        DisciplineSpec("two_mode", p_slow=1.0)
    with pytest.raises(ValueError):
        DisciplineSpec("hourly_batch", period=0)


def test_fifo_example_and_bitwise_lindley():
    t = traj([0, 1, 3], [2, 2, 1])
    assert simulate_discipline(t, None, DisciplineSpec()).departures.tolist() == [2, 4, 5]
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = 200
        t = traj(np.cumsum(rng.exponential(1.1, n)), rng.exponential(1.0, n))
        y = lindley_departures(t).departures
        assert np.array_equal(simulate_discipline(t, None, DisciplineSpec()).departures, y)
        assert np.array_equal(run_memoryless(t, FifoHook()).departures, y)


def test_hourly_batch_example():
    t = traj([0.2, 0.7], [1, 1])
    y = simulate_discipline(t, None, DisciplineSpec("hourly_batch")).departures
    assert y.tolist() == [1.0, 1.0]


def test_two_mode_fast_burst_back_to_back():
    F, ell = 50, 0.01
    z = np.concatenate([[0.0], np.linspace(1.0, 90.0, F)])
    classes = np.array([True] + [False] * F)
    t = traj(z, two_mode_services(classes, TWO))
    y, modes = simulate_two_mode(t, classes, TWO)
    assert y[0] == 100.0
    assert np.allclose(y[1:], 100.0 + ell * np.arange(1, F + 1), rtol=0, atol=1e-9)
    assert np.all(modes[1:] == 1) and modes[0] == 0


def test_two_mode_below_threshold_serves_slow_first():
    # one slow waiting, fewer than F fast: the slow client goes first
    z = [0.0, 1.0, 2.0]
    classes = np.array([True, False, True])
    y, modes = simulate_two_mode(traj(z, two_mode_services(classes, TWO)), classes, TWO)
    assert y.tolist() == [100.0, 200.01, 200.0]
    assert modes.tolist() == [0, 0, 0]


def test_two_mode_only_fast_waiting_is_served():
    z = [0.0, 0.001]
    classes = np.array([False, False])
    y, _ = simulate_two_mode(traj(z, two_mode_services(classes, TWO)), classes, TWO)
    assert np.allclose(y, [0.01, 0.02])


@pytest.mark.parametrize("seed", range(5))
def test_conservation_non_idling_run_to_completion(seed):
    t, classes = random_two_mode(seed)
    for spec in (TWO, DisciplineSpec()):
        y = simulate_discipline(t, classes, spec).departures
        assert y.size == len(t) and np.all(np.isfinite(y))
        assert np.unique(y).size == y.size
        assert_non_idling(t, y)
    for hook in (FifoHook(), ShortestJobFirst(), LongestJobFirst()):
        y = run_memoryless(t, hook).departures
        assert y.size == len(t)
        assert_non_idling(t, y)
    y = simulate_discipline(t, None, DisciplineSpec("hourly_batch")).departures
    assert y.size == len(t) and np.all(y > np.asarray(t.arrivals))


def test_two_mode_rejects_missing_classes():
    t, classes = random_two_mode(0, 10)
    with pytest.raises(ValueError):
        simulate_discipline(t, classes[:5], TWO)


def test_state_snapshot():
    z = np.concatenate([[0.0], np.linspace(1.0, 90.0, 50)])
    classes = np.array([True] + [False] * 50)
    t = traj(z, two_mode_services(classes, TWO))
    s = discipline_state_at(t, classes, TWO, 50.0)
    assert s.mode == "slow" and s.in_service == 0 and s.residual == pytest.approx(50.0)
    assert all(c == "fast" for _, c in s.waiting)
    s = discipline_state_at(t, classes, TWO, 100.005)
    assert s.mode == "fast" and s.in_service == 1


def test_shortest_job_first_order():
    t = traj([0.0, 0.1, 0.2], [1.0, 0.5, 0.2])
    assert run_memoryless(t, ShortestJobFirst()).departures.tolist() == pytest.approx([1.0, 1.7, 1.2])


class PeekingAtClock:
    name = "peek"

    def select(self, queue):
        return 0 if queue.now < 5 else len(queue) - 1


class Preempting:
    name = "lifo_preemptive"

    def select(self, queue):
        queue.interrupt(0)
        return len(queue) - 1


class OutOfRange:
    name = "bad"

    def select(self, queue):
        return len(queue)


def test_clock_access_is_refused():
    t = traj([0, 0.5, 0.7], [1, 1, 1])
    with pytest.raises(ClockAccessError):
        run_memoryless(t, PeekingAtClock())


def test_preemption_not_expressible():
    t = traj([0, 0.5, 0.7], [1, 1, 1])
    with pytest.raises(InterfaceViolation):
        run_memoryless(t, Preempting())
    with pytest.raises(InterfaceViolation):
        run_memoryless(t, OutOfRange())
    view = QueueView([WaitingCustomer(0, 1.0)])
    with pytest.raises(InterfaceViolation):
        view.extra = 1
    assert view.required_times == (1.0,) and view.orders == (0,)


def test_hook_only_consulted_when_server_frees():
    calls = []

    class Recorder:
        name = "rec"

        def select(self, queue):
            calls.append(len(queue))
            return len(queue) - 1

    t = traj([0, 0.1, 0.2, 5.0], [1, 1, 1, 1])
    y = run_memoryless(t, Recorder()).departures
    # one decision per service start; the first customer is never interrupted
    assert len(calls) == 4 and y[0] == 1.0


PROBE = """{
  "master_seed": 77, "replicas": 400, "window": [0, 40],
  "grid": {"x_max": 30},
  "rate": {"kind": "constant", "value": 0.5},
  "service": {"kind": "iid_exponential"}
}"""


def test_memoryless_probe_fifo_mass():
    rep = check_memoryless_selfaveraging("fifo", loads(PROBE), x=35.0, replicas=400)
    se = rep.details["mass_stderr"]
    assert rep.status == "reported"
    assert abs(rep.measured["mass"] - 1.0) <= 4 * se


def test_memoryless_probe_sjf_flagged():
    rep = check_memoryless_selfaveraging(ShortestJobFirst(), loads(PROBE), x=35.0, replicas=200)
    assert rep.status == "reported" and rep.details["conjectural"]
    assert rep.details["discipline"] == "shortest_job_first"
    assert np.isfinite(rep.measured["mass"])
