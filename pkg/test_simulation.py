from dataclasses import replace

import pytest

from conftest import gate_node
from src.config import GridConfig, RandomTripsConfig, ScenarioConfig, TripConfig, settings
from src.network import Side, build_grid_network
from src.routing import TravelTimePredictor, build_route_sets, solve_system_optimal
from src.simulation import (
    Metrics,
    RoutingEvent,
    Scenario,
    ScenarioMismatchError,
    Simulation,
    TravelRecord,
    compare_runs,
    explicit_trips,
    random_trips,
    run,
)
from src.world import TripRequest


def _stub_length(graph, node, *, outgoing):
    for edge in graph.edges.values():
        if edge.kind == "stub" and (edge.tail if outgoing else edge.head) == node:
            return edge.length
    raise LookupError(node)


def test_single_cav_runs_at_earliest_exit(grid1, single_trip):
    metrics = run(Scenario(graph=grid1, trips=(single_trip,)))
    record = metrics.travel[0]
    approach = _stub_length(grid1, single_trip.origin, outgoing=True)
    departure = _stub_length(grid1, single_trip.destination, outgoing=False)
    # Enters at 12 m/s, crosses the 100 m path at the earliest exit time and leaves at v_max
    expected = approach / 12.0 + 300.0 / 42.0 + departure / 15.0
    assert record.travel_time == pytest.approx(expected, abs=1e-4)
    assert metrics.rejected == []
    assert metrics.stalls == 0
    assert metrics.routing_events[0].n_cavs == 1


def test_prediction_matches_execution(busy_scenario):
    metrics = run(busy_scenario)
    assert len(metrics.travel) + len(metrics.rejected) == len(busy_scenario.trips)
    last = metrics.routing_events[-1]
    executed = sum(r.travel_time for r in metrics.travel.values() if r.t_finish > last.time)
    assert last.predicted_total == pytest.approx(executed, abs=1e-6)


def test_runs_are_deterministic(busy_scenario):
    first = run(busy_scenario)
    second = run(busy_scenario)
    assert first.travel == second.travel
    assert [e.evaluations for e in first.routing_events] == [e.evaluations for e in second.routing_events]


def test_evaluations_never_exceed_assignment_count(busy_scenario):
    metrics = run(busy_scenario)
    assert len(metrics.routing_events) == len(busy_scenario.trips)
    for event in metrics.routing_events:
        assert 1 <= event.evaluations <= event.m_pow_n
        assert event.m_pow_n == 3 ** event.n_cavs


def test_baseline_makes_no_predictions(busy_scenario):
    simulation = Simulation(replace(busy_scenario, mode="baseline"))
    metrics = simulation.run()
    assert metrics.evaluations == 0
    assert metrics.reroute_changes == 0
    assert len(metrics.travel) == len(busy_scenario.trips)
    assert simulation.audit() == []


def test_oracle_enumerates_every_assignment(busy_scenario):
    scenario = replace(busy_scenario, trips=busy_scenario.trips[:4], mode="oracle")
    metrics = run(scenario)
    for event in metrics.routing_events:
        assert event.evaluations == event.m_pow_n


def test_live_commits_pass_the_safety_audit(busy_scenario):
    simulation = Simulation(busy_scenario)
    simulation.run()
    assert simulation.world.archive
    assert simulation.audit() == []
    assert simulation.metrics.audit_issues == []


def test_verified_commits_run_clean(busy_scenario, monkeypatch):
    monkeypatch.setattr(settings, "verify_commits", True)
    simulation = Simulation(busy_scenario)
    assert all(ledger.verify for ledger in simulation.world.ledgers.values())
    metrics = simulation.run()
    assert len(metrics.travel) + len(metrics.rejected) == len(busy_scenario.trips)


def test_cumulative_totals_follow_departures():
    metrics = Metrics(travel={
        2: TravelRecord(2, 5.0, 20.0),
        0: TravelRecord(0, 1.0, 4.0),
        1: TravelRecord(1, 1.0, 11.0),
    })
    assert metrics.cumulative_totals() == [(1, 3.0), (2, 13.0), (3, 28.0)]
    assert metrics.total_travel_time == pytest.approx(28.0)


def test_compare_runs(busy_scenario):
    proposed = run(replace(busy_scenario, fingerprint="abc"))
    baseline = run(replace(busy_scenario, mode="baseline", fingerprint="abc"))
    report = compare_runs(proposed, baseline)
    assert report.mode_a == "proposed" and report.mode_b == "baseline"
    common = proposed.travel.keys() & baseline.travel.keys()
    assert report.common_trips == len(report.rows) == len(common)
    assert report.final_a == pytest.approx(sum(proposed.travel[i].travel_time for i in common))
    assert report.evaluations_a == proposed.evaluations
    assert report.evaluations_b == 0
    itself = compare_runs(proposed, proposed)
    assert itself.improvement_percent == 0.0
    assert all(row.difference == 0.0 for row in itself.rows)
    with pytest.raises(ScenarioMismatchError):
        compare_runs(proposed, replace(baseline, fingerprint="other"))


def test_compare_runs_only_counts_trips_both_completed():
    # Run A rejected trip 1, which run B completed with a long travel time
    run_a = Metrics(
        fingerprint="abc",
        travel={0: TravelRecord(0, 0.0, 10.0), 2: TravelRecord(2, 2.0, 14.0)},
        rejected=[1],
        routing_events=[RoutingEvent(0, 1, 1, 3), RoutingEvent(1, 2, 4, 9), RoutingEvent(2, 2, 3, 9)],
    )
    run_b = Metrics(
        fingerprint="abc",
        mode="baseline",
        travel={
            0: TravelRecord(0, 0.0, 12.0),
            1: TravelRecord(1, 1.0, 101.0),
            2: TravelRecord(2, 2.0, 17.0),
        },
        routing_events=[RoutingEvent(0, 1, 0, 3), RoutingEvent(1, 2, 0, 9), RoutingEvent(2, 3, 0, 27)],
    )
    report = compare_runs(run_a, run_b)
    assert report.common_trips == 2
    assert [(row.n, row.total_a, row.total_b) for row in report.rows] == [(1, 10.0, 12.0), (2, 22.0, 27.0)]
    assert (report.final_a, report.final_b) == (22.0, 27.0)
    assert report.improvement_percent == pytest.approx(5.0 / 27.0 * 100.0)
    assert report.rejected_a == (1,) and report.rejected_b == ()

    summary = report.summary().splitlines()
    assert summary[0] == "trips completed by both runs: 2"
    assert "1 rejected" in summary[1] and "8 predictions vs 21 for full enumeration" in summary[1]
    assert "0 rejected" in summary[2] and "0 predictions vs 39 for full enumeration" in summary[2]
    assert summary[3] == "improvement of A over B: 18.52%"


def test_random_trips_are_reproducible(grid2):
    trips = random_trips(grid2, 20, seed=11, window=(5.0, 50.0))
    assert trips == random_trips(grid2, 20, seed=11, window=(5.0, 50.0))
    assert trips != random_trips(grid2, 20, seed=12, window=(5.0, 50.0))
    assert [t.cav_id for t in trips] == list(range(20))
    starts = [t.start_time for t in trips]
    assert starts == sorted(starts)
    assert all(5.0 <= s <= 50.0 for s in starts)
    assert all(grid2.has_route(t.origin, t.destination) for t in trips)
    with pytest.raises(ValueError):
        random_trips(grid2, -1, seed=0)


def test_explicit_trips(grid1):
    origin = gate_node(grid1, 0, 0, Side.WEST)
    destination = gate_node(grid1, 0, 0, Side.EAST)
    trips = explicit_trips(grid1, [TripConfig(origin=origin, destination=destination, start_time=2.5)])
    assert trips == [TripRequest(0, origin, destination, 2.5)]
    with pytest.raises(ValueError):
        explicit_trips(grid1, [TripConfig(origin=origin, destination=9999, start_time=0.0)])


def test_scenario_from_config():
    config = ScenarioConfig(
        network=GridConfig(rows=1, cols=2),
        random_trips=RandomTripsConfig(count=3),
        seed=5,
        mode="baseline",
    )
    scenario = Scenario.from_config(config)
    assert len(scenario.graph.intersections) == 2
    assert len(scenario.trips) == 3
    assert scenario.mode == "baseline"
    assert scenario.fingerprint == config.fingerprint()
    assert scenario.departure_speed == pytest.approx(12.0)


@pytest.mark.slow
def test_default_grid_run():
    graph = build_grid_network(5, 5)
    scenario = Scenario(graph=graph, trips=tuple(random_trips(graph, 20, seed=0, window=(0.0, 60.0))))
    simulation = Simulation(scenario)
    metrics = simulation.run()
    assert len(metrics.travel) + len(metrics.rejected) == 20
    assert simulation.audit() == []


def test_baseline_and_proposed_agree_on_an_empty_network(grid2):
    trip = TripRequest(0, gate_node(grid2, 0, 0, Side.SOUTH, cols=2), gate_node(grid2, 1, 1, Side.NORTH, cols=2), 0.0)
    proposed = Simulation(Scenario(graph=grid2, trips=(trip,)))
    baseline = Simulation(Scenario(graph=grid2, trips=(trip,), mode="baseline"))
    proposed.run()
    baseline.run()
    assert [e.path.edge_id for e in proposed.world.archive] == [e.path.edge_id for e in baseline.world.archive]
    assert proposed.metrics.travel[0].travel_time == pytest.approx(baseline.metrics.travel[0].travel_time, abs=1e-9)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(50))
def test_routing_lies_between_system_optimum_and_appending(grid2, seed):
    prior = 1 + seed % 5
    trips = random_trips(grid2, prior + 1, seed=seed, window=(0.0, 8.0))
    arriving = trips[-1]
    simulation = Simulation(Scenario(graph=grid2, trips=tuple(trips[:-1]), delayed_only=False))
    while True:
        upcoming = simulation.world.peek()
        routed = len(simulation.metrics.routing_events) == prior
        if routed and (upcoming is None or upcoming.time > arriving.start_time):
            break
        assert simulation.step()

    trial_world = simulation.world.clone()
    trial_world.advance_clock(arriving.start_time)
    trial_world.spawn(arriving, simulation.scenario.departure_speed)
    trial = trial_world.snapshot()
    route_sets = build_route_sets(trial, routes_per_cav=3, kappa=0.5)
    optimum = solve_system_optimal(TravelTimePredictor(), trial, route_sets, 3)

    result = simulation.start_trip(arriving)
    if result is None or not result.accepted or not optimum.accepted:
        return
    assert optimum.total <= result.total + 1e-9
    assert result.total <= result.appended_total + 1e-9


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(10))
def test_full_grid_prediction_counts(seed):
    graph = build_grid_network(5, 5)
    metrics = run(Scenario(graph=graph, trips=tuple(random_trips(graph, 100, seed=seed, window=(0.0, 120.0)))))
    for event in metrics.routing_events:
        assert event.evaluations <= 10 * event.n_cavs * metrics.routes_per_cav
    assert metrics.evaluations < 10_000
    assert max(event.m_pow_n for event in metrics.routing_events) > 10**15


@pytest.mark.slow
def test_proposed_beats_baseline_on_most_seeds():
    graph = build_grid_network(5, 5)
    wins = 0
    for seed in range(10):
        scenario = Scenario(graph=graph, trips=tuple(random_trips(graph, 100, seed=seed, window=(0.0, 120.0))))
        report = compare_runs(run(scenario), run(replace(scenario, mode="baseline")))
        wins += report.final_a <= report.final_b
    assert wins >= 8
