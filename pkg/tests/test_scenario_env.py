import json
import math

import numpy as np
import pytest
from conftest import parked_agent, straight_dict, straight_scenario

from loopdrive.env import (
    DrivingEnv,
    EnvConfig,
    EnvState,
    compute_deviation,
    detect_dynamic_collision,
    detect_static_collision,
    ego_box,
    play_expert,
    reset,
    step,
    trace_record,
    write_trace,
)
from loopdrive.errors import ParseError, SchemaError, SteppedDoneEpisode
from loopdrive.geometry import OrientedBox, Pose, obb_overlap
from loopdrive.scenario import TEMPLATES, Scenario, dumps_scenario, load_scenario, save_scenario, synth_scenario

CFG = EnvConfig()


# -- scenario files ------------------------------------------------------------


def test_minimal_clip_has_81_frames(tmp_path):
    d = straight_dict(agents=[parked_agent("a0", 80.0, 3.5)])
    p = tmp_path / "clip.json"
    p.write_text(json.dumps(d))
    scn = load_scenario(p)
    assert scn.expert_traj.shape == (81, 5)
    assert len(scn.agents) == 1


def test_missing_expert_is_schema_error(tmp_path):
    d = straight_dict()
    del d["expert_traj"]
    p = tmp_path / "clip.json"
    p.write_text(json.dumps(d))
    with pytest.raises(SchemaError) as exc:
        load_scenario(p)
    assert exc.value.field == "expert_traj"


def test_malformed_json_is_parse_error(tmp_path):
    p = tmp_path / "clip.json"
    p.write_text("{not json")
    with pytest.raises(ParseError):
        load_scenario(p)


def test_wrong_frame_count_rejected():
    d = straight_dict()
    d["expert_traj"] = d["expert_traj"][:-1]
    with pytest.raises(SchemaError):
        Scenario.from_dict(d)


def test_non_convex_obstacle_rejected():
    d = straight_dict(obstacles=[[[0, 0], [2, 0], [1, 0.5], [2, 2], [0, 2]]])
    with pytest.raises(SchemaError) as exc:
        Scenario.from_dict(d)
    assert exc.value.field == "static_obstacles"


@pytest.mark.parametrize("template", TEMPLATES)
def test_generated_round_trip(tmp_path, template):
    scn = synth_scenario(11, template)
    p = tmp_path / "s.json"
    save_scenario(p, scn)
    back = load_scenario(p)
    assert dumps_scenario(back) == dumps_scenario(scn)


@pytest.mark.parametrize("template", TEMPLATES)
def test_generator_deterministic(template):
    assert dumps_scenario(synth_scenario(5, template)) == dumps_scenario(synth_scenario(5, template))


def test_cruise_has_no_hazards():
    scn = synth_scenario(2, "unobstructed_cruise")
    assert scn.agents == [] and scn.static_obstacles == []


def test_unknown_template():
    with pytest.raises(ValueError):
        synth_scenario(0, "nope")


# -- reset / step ----------------------------------------------------------------


def test_reset_matches_expert_frame0():
    scn = synth_scenario(3, "static_detour")
    s = reset(scn, CFG)
    e = scn.expert_traj[0]
    assert s.ego == Pose(e[1], e[2], e[3])
    assert s.frame == 0 and not s.done and s.termination == "none"
    assert reset(scn, CFG) == s


def test_reset_after_episode_is_fresh():
    scn = synth_scenario(3, "lead_vehicle_braking")
    env = DrivingEnv(scn, CFG)
    first = env.reset()
    st = first
    while not st.done:
        st, _ = env.step(st, 0.75, 15.0)
    assert env.reset() == first


def test_expert_action_on_empty_straight_road():
    scn = straight_scenario()
    env = DrivingEnv(scn, CFG)
    st = env.reset()
    for _ in range(10):
        st, r = env.step(st, 0.0, 5.0)
        assert r.total == 0.0
        assert not st.done
    assert st.ego.x == pytest.approx(10.0)


def test_dynamic_collision_ahead():
    # agent parked 6 m ahead; a 10 m/s ego reaches it in a few frames
    scn = straight_scenario(agents=[parked_agent("lead", 6.5, 0.0)])
    env = DrivingEnv(scn, CFG)
    st = env.reset()
    while not st.done:
        prev = st
        st, r = env.step(st, 0.0, 5.0)
    assert st.termination == "dynamic_collision"
    assert r.r_dc == CFG.r_dc < 0
    assert r.collision_direction == "ahead"
    boxes, _, _ = scn.agents_at(st.frame)
    assert obb_overlap(ego_box(st.ego, CFG), OrientedBox(Pose(*boxes[0, :3]), boxes[0, 3], boxes[0, 4]))
    assert not obb_overlap(ego_box(prev.ego, CFG), OrientedBox(Pose(*boxes[0, :3]), boxes[0, 3], boxes[0, 4]))


def test_detect_dynamic_collision_cases():
    ego = OrientedBox(Pose(0, 0, 0), 4.6, 1.85)
    assert detect_dynamic_collision(ego, np.zeros((0, 5))) is None
    assert detect_dynamic_collision(ego, np.array([[2.0, 0.0, 0.0, 4.6, 1.85]])) == "ahead"
    # overlapping the rear bumper: centre 4 m behind
    assert detect_dynamic_collision(ego, np.array([[-4.0, 0.3, 0.0, 4.6, 1.85]])) == "behind"
    # rotated ego: agent behind in the ego frame even though its world x is larger
    ego_back = OrientedBox(Pose(0, 0, math.pi), 4.6, 1.85)
    assert detect_dynamic_collision(ego_back, np.array([[4.0, 0.0, 0.0, 4.6, 1.85]])) == "behind"


def test_detect_static_collision_cases():
    ego = OrientedBox(Pose(0, 0, 0), 4.6, 1.85)
    assert detect_static_collision(ego, []) is None
    curb = np.array([[1.8, -0.8], [3.0, -0.8], [3.0, -2.0], [1.8, -2.0]])
    assert detect_static_collision(ego, [curb]) == "right"
    centred = np.array([[1.0, -0.5], [2.0, -0.5], [2.0, 0.5], [1.0, 0.5]])
    assert detect_static_collision(ego, [centred]) == "left"  # tie-break
    far = curb + np.array([20.0, 0.0])
    assert detect_static_collision(ego, [far]) is None


def test_position_deviation_triggers():
    scn = straight_scenario()
    env = DrivingEnv(scn, CFG)
    st = env.reset()
    while not st.done:
        st, r = env.step(st, -0.75, 5.0)  # hard left
    assert st.termination in ("position_deviation", "heading_deviation")
    if st.termination == "position_deviation":
        assert r.r_pd == CFG.r_pd and r.deviation_side == "left"


def test_deviation_threshold_is_strict():
    poly = np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]])
    d, side, _, _ = compute_deviation(Pose(10.0, 2.0, 0.0), poly)
    assert d == 2.0 and side == "left"
    scn = straight_scenario()
    env = DrivingEnv(scn, CFG)
    # place the ego so that the next straight step ends exactly 2.0 m off the path
    st = EnvState(0, Pose(0.0, 2.0, 0.0), 10.0)
    nxt, r = env.step(st, 0.0, 5.0)
    assert nxt.termination == "none" and r.r_pd == 0.0


def test_compute_deviation_examples():
    poly = np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]])
    assert compute_deviation(Pose(5.0, 0.0, 0.0), poly) == (0.0, None, 0.0, None)
    d, side, _, _ = compute_deviation(Pose(5.0, 1.0, 0.0), poly)
    assert (d, side) == (1.0, "left")
    _, _, h, rot = compute_deviation(Pose(5.0, 0.0, 0.3), poly)
    assert h == pytest.approx(0.3) and rot == "counterclockwise"


def test_heading_deviation_annotation():
    scn = straight_scenario()
    env = DrivingEnv(scn, CFG)
    st = EnvState(3, Pose(3.0, 0.0, -0.75), 10.0)
    nxt, r = env.step(st, 0.0, 0.25)
    assert nxt.termination == "heading_deviation"
    assert r.r_hd == CFG.r_hd and r.rotation_dir == "clockwise"


def test_stepping_done_episode_raises():
    scn = straight_scenario()
    st = EnvState(80, Pose(80.0, 0.0, 0.0), 10.0, True, "clip_end")
    with pytest.raises(SteppedDoneEpisode):
        DrivingEnv(scn, CFG).step(st, 0.0, 5.0)


def test_clip_end():
    scn = straight_scenario()
    st = reset(scn, CFG)
    n = 0
    while not st.done:
        st, r = step(st, (0.0, 5.0), scn, CFG)
        n += 1
    assert n == 80 and st.termination == "clip_end" and r.total == 0.0


def test_step_is_deterministic():
    scn = synth_scenario(4, "dense_traffic_crawl")
    env = DrivingEnv(scn, CFG)
    s0 = env.reset()
    assert env.step(s0, 0.1, 3.0) == env.step(s0, 0.1, 3.0)


def test_done_iff_termination(mixed_suite):
    rng = np.random.default_rng(0)
    for scn in mixed_suite:
        env = DrivingEnv(scn, CFG)
        st = env.reset()
        while not st.done:
            st, r = env.step(st, float(rng.uniform(-0.75, 0.75)), float(rng.uniform(0, 15)))
            assert st.done == (st.termination != "none")
            for comp, ann in ((r.r_dc, r.collision_direction), (r.r_sc, r.obstacle_side), (r.r_pd, r.deviation_side), (r.r_hd, r.rotation_dir)):
                assert comp <= 0.0
                assert (comp < 0.0) == (ann is not None)


@pytest.mark.parametrize("template", TEMPLATES)
def test_expert_playback_is_clean(template):
    for seed in range(6):
        scn = synth_scenario(seed, template)
        steps = play_expert(scn, CFG)
        final = steps[-1][3]
        assert final.termination == "clip_end"
        assert sum(s[2].total for s in steps) == 0.0
        assert max(compute_deviation(s[3].ego, scn.expert_polyline)[0] for s in steps) < 1e-6


def test_trace_jsonl(tmp_path):
    scn = straight_scenario()
    env = DrivingEnv(scn, CFG)
    st = env.reset()
    recs = [trace_record(st, None, None)]
    nxt, r = env.step(st, 0.0, 5.0)
    recs.append(trace_record(nxt, (30, 20), r))
    p = tmp_path / "t.jsonl"
    write_trace(p, recs)
    rows = [json.loads(line) for line in p.read_text().splitlines()]
    assert rows[1]["action"] == [30, 20]
    assert rows[1]["rewards"]["collision_direction"] == "none"
    assert rows[1]["termination"] == "none"
