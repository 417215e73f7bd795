import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from loopdrive.errors import NoSafeFrames, ParseError, TooFewFrames
from loopdrive.metrics import (
    EXPERT,
    BenchConfig,
    EpisodeLog,
    build_report,
    compute_add,
    compute_jerk,
    episode_jerk,
    report_from_json,
    run_benchmark,
    trace_svg,
    write_report,
)
from loopdrive.policy import PolicyConfig, init_params

TERMS = ["clip_end", "dynamic_collision", "static_collision", "position_deviation", "heading_deviation"]


def fake_log(term="clip_end", d=(0.0, 0.0, 0.0), v_long=None, v_lat=None, cid="c"):
    n = len(d)
    recs = [{"frame": k, "ego": [float(k), 0.0, 0.0], "speed": 1.0, "action": None, "rewards": None, "termination": "none"} for k in range(n)]
    return EpisodeLog(
        cid,
        term,
        recs,
        np.asarray(d, float),
        np.zeros(n) if v_long is None else np.asarray(v_long, float),
        np.zeros(n) if v_lat is None else np.asarray(v_lat, float),
    )


# -- counting ------------------------------------------------------------------


def test_dcr_counting():
    logs = [fake_log("dynamic_collision")] * 2 + [fake_log()] * 8
    r = build_report(logs)
    assert r.DCR == 0.2 and r.CR == 0.2 and r.DR == 0.0


@given(st.lists(st.sampled_from(TERMS), min_size=1, max_size=40))
def test_report_identities(terms):
    r = build_report([fake_log(t, d=(0.1, 0.2, 0.3, 0.4)) for t in terms])
    assert r.CR == (r.N_dc + r.N_sc) / r.N_total
    assert r.CR == pytest.approx(r.DCR + r.SCR, abs=1e-15)
    assert r.DR == pytest.approx(r.PDR + r.HDR, abs=1e-15)
    assert r.N_dc + r.N_sc + r.N_pd + r.N_hd <= r.N_total
    for m in ("CR", "DCR", "SCR", "DR", "PDR", "HDR"):
        assert 0.0 <= getattr(r, m) <= 1.0


# -- ADD -----------------------------------------------------------------------


def test_add_examples():
    assert compute_add([fake_log(d=[0.0] * 10)]) == 0.0
    assert compute_add([fake_log(d=[0.3] * 10)]) == pytest.approx(0.3)
    # three safe frames, then the collision frame is excluded
    assert compute_add([fake_log("dynamic_collision", d=[0.1, 0.2, 0.3, 9.0])]) == pytest.approx(0.2)


def test_add_needs_safe_frames():
    with pytest.raises(NoSafeFrames):
        compute_add([fake_log("static_collision", d=[5.0])])
    assert build_report([fake_log("static_collision", d=[5.0])]).ADD is None


# -- jerk ----------------------------------------------------------------------


def test_jerk_examples():
    assert episode_jerk(np.full(8, 4.0), 0.1) == 0.0
    assert episode_jerk(np.linspace(0, 7, 8), 0.1) == pytest.approx(0.0, abs=1e-9)
    assert episode_jerk(np.array([0.0, 0.0, 1.0]), 0.1) == pytest.approx(100.0)


def test_jerk_per_episode_then_mean():
    a = fake_log(d=[0] * 3, v_long=[0, 0, 1])  # 100
    b = fake_log(d=[0] * 5, v_long=[0, 0, 0, 0, 0])  # 0
    assert compute_jerk([a, b], "longitudinal") == pytest.approx(50.0)
    assert compute_jerk([a, b], "lateral") == 0.0


def test_jerk_too_few_frames():
    with pytest.raises(TooFewFrames):
        episode_jerk(np.zeros(2), 0.1)
    with pytest.raises(TooFewFrames):
        compute_jerk([fake_log(d=[0, 0])])
    with pytest.raises(ValueError):
        compute_jerk([fake_log()], "vertical")


# -- benchmark runs ------------------------------------------------------------


def test_expert_is_perfect(mixed_suite):
    r, logs = run_benchmark(EXPERT, mixed_suite)
    assert r.CR == 0.0 and r.DR == 0.0 and r.ADD < 1e-6
    assert all(lg.termination == "clip_end" for lg in logs)


def test_persisted_logs_reproduce_report(mixed_suite, tmp_path):
    p = init_params(PolicyConfig(feature_dim=BenchConfig().features.dim, hidden=(16,)), np.random.default_rng(0))
    r, logs = run_benchmark(p, mixed_suite[:5])
    back = [EpisodeLog.from_jsonl(lg.to_jsonl()) for lg in logs]
    assert build_report(back) == r
    write_report(r, tmp_path / "r.json", tmp_path / "r.csv")
    assert report_from_json(tmp_path / "r.json") == r
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "metric,value"


def test_malformed_log():
    with pytest.raises(ParseError):
        EpisodeLog.from_jsonl('{"no": "header"}\n')


# -- SVG -----------------------------------------------------------------------


def test_svg_with_event_marker(mixed_suite):
    p = init_params(PolicyConfig(feature_dim=BenchConfig().features.dim, hidden=(16,)), np.random.default_rng(0))
    _, logs = run_benchmark(p, mixed_suite[:5])
    failed = [lg for lg in logs if lg.header["event_frame"] is not None]
    assert failed
    root = ET.fromstring(trace_svg(failed[0]))
    ns = "{http://www.w3.org/2000/svg}"
    assert root.findall(f"{ns}circle[@class='event']")
    assert root.findall(f"{ns}polyline[@class='ego']") and root.findall(f"{ns}polyline[@class='expert']")


def test_svg_without_event_has_no_marker(mixed_suite):
    _, logs = run_benchmark(EXPERT, mixed_suite[:2])
    root = ET.fromstring(trace_svg(logs[0]))
    assert not root.findall("{http://www.w3.org/2000/svg}circle")
