import json

import numpy as np
import pytest

from _helpers import SCENARIO_FILES
from petsignal.conflicts import detect_conflicts, min_pets
from petsignal.errors import OracleSizeError, ScriptError
from petsignal.geometry import points_in_boxes
from petsignal.oracle import (
    MAX_ORACLE_VEHICLES,
    ScenarioScript,
    brute_force_pets,
    generate_scenario,
    load_scenario,
    mc_poses_overlap,
    quads_touch,
    simulate_ordered_data,
)
from petsignal.rplogit import ModelSpec, OrderedData, OrderedParams, ordered_probs


def vehicle(vid, waypoints, length=15.0, width=6.0, lane=1):
    return {"id": vid, "length": length, "width": width, "lane": lane,
            "waypoints": [dict(zip("txy", w)) for w in waypoints]}


def script(*vehicles, **kw):
    return ScenarioScript.from_dict({"id": "t", "vehicles": list(vehicles), **kw})


def single_min_pet(s, rate=3.0):
    mins = min_pets(detect_conflicts(generate_scenario(s, rate)))
    return {(m.leader_id, m.lagger_id): m.min_pet for m in mins}


def test_same_path_follower():
    # P = origin; leader's rear clears P at t=10, follower's front reaches it at t=11.5
    lead = vehicle(1, [(0, 0, -292.5), (20, 0, 307.5)])
    follow = vehicle(2, [(1.5, 0, -307.5), (21.5, 0, 292.5)])
    got = single_min_pet(script(lead, follow))
    assert set(got) == {(1, 2)}
    assert abs(got[(1, 2)] - 1.5) <= 1 / 3 + 1e-9


def test_perpendicular_two_second_gap():
    # eastbound leader's rear leaves x=3 at t=10; northbound lagger's front enters y=-3 at t=12
    lead = {"id": 1, "length": 15.0, "width": 6.0, "lane": 1,
            "waypoints": [{"t": 0, "x": 3 + 7.5 - 300, "y": 0}, {"t": 20, "x": 3 + 7.5 + 300, "y": 0}]}
    lag = {"id": 2, "length": 15.0, "width": 6.0, "lane": 2,
           "waypoints": [{"t": 2, "x": 0, "y": -3 - 7.5 - 300}, {"t": 22, "x": 0, "y": -3 - 7.5 + 300}]}
    got = single_min_pet(script(lead, lag))
    assert set(got) == {(1, 2)}
    assert abs(got[(1, 2)] - 2.0) <= 1 / 3 + 1e-9


def test_parallel_lanes_are_separate():
    a = vehicle(1, [(0, 0, -200), (10, 0, 200)])
    b = vehicle(2, [(0, 12, -200), (10, 12, 200)])
    assert detect_conflicts(generate_scenario(script(a, b))) == []


def test_generated_tracks_are_valid():
    for path in SCENARIO_FILES:
        for tr in generate_scenario(load_scenario(path), rate=3.0):
            assert np.all(np.diff(tr.times) > 0)
            assert points_in_boxes(tr.centers, tr.corners).all()
            assert np.allclose(tr.times * 3.0, np.rint(tr.times * 3.0))


def test_brute_force_trivial_inputs():
    assert brute_force_pets([]) == []
    one = generate_scenario(script(vehicle(1, [(0, 0, 0), (5, 0, 100)])))
    assert brute_force_pets(one) == []


def test_brute_force_size_guard():
    many = [vehicle(i, [(0, 20 * i, 0), (1, 20 * i, 10)]) for i in range(1, MAX_ORACLE_VEHICLES + 2)]
    with pytest.raises(OracleSizeError):
        brute_force_pets(generate_scenario(script(*many)))
    long = generate_scenario(script(vehicle(1, [(0, 0, 0), (400, 0, 10)]), vehicle(2, [(0, 50, 0), (400, 50, 10)])))
    with pytest.raises(OracleSizeError):
        brute_force_pets(long)


@pytest.mark.parametrize(
    "bad",
    [
        {"vehicles": [vehicle(1, [(0, 0, 0), (0, 1, 1)])]},  # times not increasing
        {"vehicles": [vehicle(1, [(0, 0, 0)])]},  # one waypoint
        {"vehicles": [vehicle(1, [(0, 0, 0), (1, 0, 1)]), vehicle(1, [(0, 9, 0), (1, 9, 1)])]},
    ],
)
def test_bad_scripts_rejected(bad):
    with pytest.raises(ScriptError):
        generate_scenario(ScenarioScript.from_dict(bad))


def test_script_parse_errors():
    with pytest.raises(ScriptError):
        ScenarioScript.from_dict({"vehicles": [{"id": 1}]})
    with pytest.raises(ScriptError):
        ScenarioScript.from_dict(
            {"vehicles": [], "expected": [{"leader": 1, "lagger": 2, "min_pet": 6.0}]}
        )


def test_script_round_trip():
    for path in SCENARIO_FILES:
        s = load_scenario(path)
        assert ScenarioScript.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def test_touch_and_mc_oracles_agree_on_clear_cases():
    sq = np.array([[[0, 0], [1, 0], [1, 1], [0, 1]]], dtype=float)
    assert quads_touch(sq, sq + 1.0)[0]  # corner contact
    assert not quads_touch(sq, sq + 1.5)[0]
    hits = mc_poses_overlap([[0, 0, 4, 2, 0], [0, 0, 4, 2, 0]], [[0, 0.5, 4, 2, 90], [0, 10, 4, 2, 0]], seed=1)
    assert hits.tolist() == [True, False]


def test_simulated_level_frequencies():
    spec = ModelSpec(fixed=["x"])
    zero = OrderedParams(0.0, {"x": 0.0}, (0.0, 1.0, 2.0, 3.0))
    df = simulate_ordered_data(zero, spec, n_groups=10_000, obs_per_group=1, seed=0)
    p = ordered_probs(0.0, zero.thresholds)
    freq = np.bincount(df.pet_level, minlength=6)[1:] / len(df)
    assert np.all(np.abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / len(df)))


def test_simulated_extremes_and_determinism():
    spec = ModelSpec(fixed=["x"], random=["z"])
    high = OrderedParams(20.0, {"x": 0.0, "z": 0.0}, (0.0, 1.0, 2.0, 3.0))
    df = simulate_ordered_data(high, spec, n_groups=200, obs_per_group=2, seed=5)
    assert (df.pet_level == 5).all()
    p = OrderedParams(0.1, {"x": 0.5, "z": -0.2}, (0.0, 1.0, 2.0, 3.0), sigma={"z": 0.4})
    a = simulate_ordered_data(p, spec, 50, 3, seed=9)
    assert a.equals(simulate_ordered_data(p, spec, 50, 3, seed=9))
    OrderedData.from_frame(a, spec)  # ingestible as-is
    with pytest.raises(ScriptError):
        simulate_ordered_data(p, spec, 0, 3, seed=9)
