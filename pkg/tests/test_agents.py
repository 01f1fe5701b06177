import pytest
from hypothesis import given
from hypothesis import strategies as st

from airground.agents import (
    PreprocessError,
    RelayEnvironmentError,
    RelayError,
    RelayRangeError,
    ReflectionMonitor,
    detect_deviation,
    move_toward,
    preprocess,
    relay,
    serve_queue,
)
from airground.model import EdgeNode, Environment, FlyingNode, Position, Task, TaskStatus, distance


def queued(tid, demand, arrival=0, wait=25):
    t = Task(tid, Position(0, 0), demand, arrival, wait)
    t.advance(TaskStatus.QUEUED)
    t.queue_arrival_tick = arrival
    return t


def edge(*tasks, cap=4):
    node = EdgeNode("e00", Position(50, 50), cap, 15.0)
    node.queue = [t.id for t in tasks]
    return node, {t.id: t for t in tasks}


# -- service ------------------------------------------------------------------

def test_exact_fit_completes():
    node, tasks = edge(queued(1, 4))
    out = serve_queue(node, tasks, 0)
    assert out.completed == [1] and tasks[1].status is TaskStatus.SUCCEEDED and node.queue == []


def test_carryover_completes_next_tick():
    node, tasks = edge(queued(1, 6))
    serve_queue(node, tasks, 0)
    assert tasks[1].remaining == 2 and tasks[1].status is TaskStatus.RUNNING
    out = serve_queue(node, tasks, 1)
    assert out.completed == [1] and tasks[1].end_tick == 1


def test_unstarted_task_fails_after_threshold():
    node, tasks = edge(queued(1, 4))
    assert serve_queue(node, tasks, 25, budget=0).failed == []
    out = serve_queue(node, tasks, 26)
    assert out.failed == [1] and tasks[1].status is TaskStatus.FAILED and out.completed == []


def test_expired_tasks_removed_before_service():
    node, tasks = edge(queued(1, 4, arrival=0), queued(2, 4, arrival=10))
    out = serve_queue(node, tasks, 26)
    assert out.failed == [1] and out.completed == [2]


def test_leftover_capacity_flows_to_next_task_in_order():
    node, tasks = edge(queued(1, 2), queued(2, 3), queued(3, 1))
    out = serve_queue(node, tasks, 0)
    assert out.completed == [1] and out.started == [1, 2]
    assert tasks[2].remaining == 1 and node.queue == [2, 3] and out.used == 4


def test_running_task_is_not_preempted_or_expired():
    node, tasks = edge(queued(1, 40), cap=4)
    for tick in range(12):
        serve_queue(node, tasks, tick)
    assert tasks[1].status is TaskStatus.SUCCEEDED and tasks[1].start_tick == 0 and tasks[1].end_tick == 9
    node, tasks = edge(queued(1, 400))
    for tick in range(40):
        assert not serve_queue(node, tasks, tick).failed


def test_paused_node_continues_running_task_but_starts_nothing():
    node, tasks = edge(queued(1, 6), queued(2, 1))
    serve_queue(node, tasks, 0)
    out = serve_queue(node, tasks, 1, allow_start=False)
    assert out.completed == [1] and out.started == [] and tasks[2].status is TaskStatus.QUEUED


def test_serving_before_queue_arrival_is_an_error():
    t = queued(1, 2, arrival=0)
    t.queue_arrival_tick = 5
    node, tasks = edge(t)
    with pytest.raises(RuntimeError):
        serve_queue(node, tasks, 3)


@given(st.lists(st.integers(1, 12), min_size=1, max_size=8), st.integers(1, 6))
def test_fifo_completion_and_work_bound(demands, cap):
    ts = [queued(i, d) for i, d in enumerate(demands)]
    node, tasks = edge(*ts, cap=cap)
    done, tick = [], 0
    while node.queue:
        out = serve_queue(node, tasks, tick)
        assert out.used <= cap and len([t for t in tasks.values() if t.status is TaskStatus.RUNNING]) <= 1
        done += out.completed
        tick += 1
    survivors = [t.id for t in ts if t.status is TaskStatus.SUCCEEDED]
    assert done == survivors == sorted(survivors)
    assert all(t.start_tick is None or t.start_tick >= t.arrival_tick for t in ts)


# -- mobility -----------------------------------------------------------------

def flyer(x, y, wp=None, speed=3.0):
    return FlyingNode("f00", Position(x, y), speed, 1, 20.0, waypoint=wp)


def test_move_axis_aligned():
    f = flyer(0, 0, Position(10, 0))
    assert move_toward(f) == Position(3, 0) and f.waypoint == Position(10, 0)


def test_move_arrival_clamp():
    f = flyer(9, 0, Position(10, 0))
    assert move_toward(f) == Position(10, 0) and f.waypoint is None


def test_no_waypoint_holds_position():
    f = flyer(4, 4)
    assert move_toward(f) == Position(4, 4)


@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 100), st.floats(0, 100), st.floats(0.1, 20))
def test_motion_is_bounded_and_converges(x, y, wx, wy, speed):
    f = flyer(x, y, Position(wx, wy), speed)
    start_gap = distance(f.pos, Position(wx, wy))
    for _ in range(int(start_gap / speed) + 2):
        before = f.pos
        move_toward(f, 1, 100.0)
        assert distance(before, f.pos) <= speed + 1e-9
        assert 0 <= f.pos.x <= 100 and 0 <= f.pos.y <= 100
    assert f.waypoint is None and f.pos == Position(wx, wy)


# -- preprocessing and relay --------------------------------------------------

def relaying(demand, origin=(50, 50)):
    t = Task(1, Position(*origin), demand, 0, 25)
    t.advance(TaskStatus.RELAYING)
    return t


@pytest.mark.parametrize("demand,rho,want", [(8, 0.5, 4), (5, 0.5, 3), (7, 1.0, 7)])
def test_preprocess_examples(demand, rho, want):
    assert preprocess(relaying(demand), rho).demand == want


def test_preprocess_only_once_and_only_in_transit():
    t = preprocess(relaying(8), 0.5)
    with pytest.raises(PreprocessError):
        preprocess(t, 0.5)
    with pytest.raises(PreprocessError):
        preprocess(Task(2, Position(0, 0), 4, 0, 25), 0.5)
    with pytest.raises(PreprocessError):
        preprocess(relaying(4), 0.0)


def test_relay_sets_arrival_after_hop_delay():
    via = flyer(50, 50)
    target = EdgeNode("e00", Position(60, 50), 4, 15.0)
    t = relay(relaying(4), via, target, 10, 2, Environment.INTEGRATED)
    assert t.queue_arrival_tick == 12 and t.status is TaskStatus.RELAYING and t.holder == "e00"
    with pytest.raises(RelayError):
        relay(t, via, target, 11, 2, Environment.INTEGRATED)


def test_relay_range_checks():
    via = flyer(50, 50)
    far = EdgeNode("e00", Position(75, 50), 4, 15.0)
    with pytest.raises(RelayRangeError):
        relay(relaying(4), via, far, 0, 1, Environment.INTEGRATED)
    near = EdgeNode("e01", Position(55, 50), 4, 15.0)
    with pytest.raises(RelayRangeError):
        relay(relaying(4, origin=(10, 10)), via, near, 0, 1, Environment.INTEGRATED)


@pytest.mark.parametrize("env", [Environment.LAE_ONLY, Environment.CPN_ONLY])
def test_relay_needs_integrated_environment(env):
    with pytest.raises(RelayEnvironmentError):
        relay(relaying(4), flyer(50, 50), EdgeNode("e00", Position(55, 50), 4, 15.0), 0, 1, env)


# -- reflection ---------------------------------------------------------------

def monitor(baseline=1.0, theta=2.0, window=5, reset=10):
    return ReflectionMonitor(window, baseline, theta, reset)


def test_deviation_magnitude_is_mean_over_baseline():
    m = monitor()
    for c in (3, 3, 3, 4, 3):  # mean 3.2
        m.observe(c)
    dev = detect_deviation(m, Position(1, 2))
    assert dev.kind == "LoadSurge" and dev.magnitude == pytest.approx(3.2) and dev.location == Position(1, 2)
    assert m.cooldown == 10


def test_below_threshold_is_quiet():
    m = monitor()
    for c in (1, 2, 1, 2, 1.5):
        m.observe(c)
    assert detect_deviation(m, Position(0, 0)) is None


def test_cooldown_suppresses_and_decrements():
    m = monitor()
    for _ in range(5):
        m.observe(9)
    m.cooldown = 5
    assert detect_deviation(m, Position(0, 0)) is None and m.cooldown == 4


def test_window_must_fill_first():
    m = monitor()
    for _ in range(4):
        m.observe(100)
        assert detect_deviation(m, Position(0, 0)) is None


def test_scripted_surge_fires_once_at_hand_computed_tick():
    # window means: ticks 0-4 -> 1.0, tick 5 -> 1.8, tick 6 -> 2.6 (fires), then a 10-tick cooldown
    trace = [1] * 5 + [5] * 5 + [1] * 20
    m = monitor()
    fired = []
    for tick, c in enumerate(trace):
        m.observe(c)
        dev = detect_deviation(m, Position(0, 0))
        if dev is not None:
            fired.append((tick, dev.magnitude))
    assert fired == [(6, pytest.approx(2.6))]


def test_monitor_validation():
    with pytest.raises(ValueError):
        monitor(theta=1.0)
    with pytest.raises(ValueError):
        monitor(baseline=0.0)
