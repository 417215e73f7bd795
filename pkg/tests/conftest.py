import numpy as np
import pytest

from loopdrive.scenario import Scenario, synth_scenario


def straight_dict(speed=10.0, agents=(), obstacles=(), n=81, sid="straight"):
    t = np.arange(n) * 0.1
    x = speed * t
    expert = np.column_stack([t, x, np.zeros(n), np.zeros(n), np.full(n, speed)])
    return {
        "id": sid,
        "frame_rate": 10.0,
        "duration": (n - 1) / 10.0,
        "expert_traj": expert.tolist(),
        "agents": list(agents),
        "static_obstacles": [np.asarray(p).tolist() for p in obstacles],
        "route": [[-10.0, 0.0], [200.0, 0.0]],
    }


def straight_scenario(**kw) -> Scenario:
    return Scenario.from_dict(straight_dict(**kw))


def parked_agent(aid, x, y, psi=0.0, length=4.6, width=1.85, n=81):
    return {"id": aid, "length": length, "width": width, "states": {str(f): [x, y, psi, 0.0] for f in range(n)}}


@pytest.fixture(scope="session")
def mixed_suite():
    templates = ["crossing_pedestrian", "lead_vehicle_braking", "static_detour", "dense_traffic_crawl", "unobstructed_cruise"]
    return [synth_scenario(s, templates[s % 5]) for s in range(10)]


# -- acceptance reporting ------------------------------------------------------

_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    failed = rep.failed
    if rep.when == "call" or failed:
        prev = _CRITERIA.get(n, {"ok": True, "title": title, "details": []})
        prev["ok"] = prev["ok"] and not failed and not rep.skipped
        prev["details"] = [v for k, v in item.user_properties if k == "detail"]
        _CRITERIA[n] = prev


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        c = _CRITERIA[n]
        tr.write_line(f"criterion {n:>2}: {'PASS' if c['ok'] else 'FAIL'}  {c['title']}")
        for d in c["details"]:
            tr.write_line(f"              {d}")
