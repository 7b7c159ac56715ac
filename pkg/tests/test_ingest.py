import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radar_autocal.core import Calibration, RadarFrame, UtmOrigin, euler_to_rotation
from radar_autocal.ingest import (
    IngestError,
    NoPoseError,
    PoseTrack,
    pose_at,
    read_calibration,
    read_pose_log,
    read_radar_log,
    write_calibration,
    write_pose_log,
    write_radar_log,
)

HEADER = "t_us,utm_zone,easting,northing,altitude,roll,pitch,yaw"


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_two_frame_file(tmp_path):
    p = write_lines(
        tmp_path / "r.jsonl",
        [
            "# schema=1",
            json.dumps({"t_us": 100, "targets": [{"r": 10, "az": 0, "el": 0, "v_rad": 1.0}]}),
            json.dumps({"t_us": 200, "targets": [{"x": 1, "y": 2, "z": 3, "v_rad": -1.0, "rcs": 4.0}, {"r": 5, "az": 0, "el": 0, "v_rad": 0}]}),
        ],
    )
    frames = read_radar_log(p)
    assert [len(f) for f in frames] == [1, 2]
    np.testing.assert_allclose(frames[0].points[0], [10, 0, 0], atol=1e-12)
    np.testing.assert_array_equal(frames[1].points[0], [1, 2, 3])
    assert frames[1].rcs[0] == 4.0 and math.isnan(frames[1].rcs[1])


def test_spherical_conversion_hand_value(tmp_path):
    row = {"r": 10, "az": math.radians(30), "el": math.radians(10), "v_rad": 0.0}
    p = write_lines(tmp_path / "r.jsonl", ["# schema=1", json.dumps({"t_us": 1, "targets": [row]})])
    np.testing.assert_allclose(read_radar_log(p)[0].points[0], [8.529, 4.924, 1.736], atol=1e-3)


@pytest.mark.parametrize(
    "lines, match",
    [
        ([], "empty"),
        (["# schema=2", '{"t_us": 1, "targets": []}'], "schema"),
        (['{"t_us": 1, "targets": []}'], "schema"),
        (["# schema=1", '{"t_us": 1, "targets": []}', "{oops"], ":3:"),
        (["# schema=1", '{"t_us": 5, "targets": []}', '{"t_us": 5, "targets": []}'], "not increasing"),
        (["# schema=1", '{"t_us": 1, "targets": [{"r": -1, "az": 0, "el": 0, "v_rad": 0}]}'], "malformed"),
    ],
)
def test_radar_log_errors(tmp_path, lines, match):
    p = write_lines(tmp_path / "r.jsonl", lines) if lines else tmp_path / "r.jsonl"
    if not lines:
        p.write_text("", encoding="utf-8")
    with pytest.raises(IngestError, match=match):
        read_radar_log(p)


def test_missing_radar_file(tmp_path):
    with pytest.raises(IngestError):
        read_radar_log(tmp_path / "nope.jsonl")


def test_pose_log_three_samples(tmp_path):
    p = write_lines(
        tmp_path / "p.csv",
        [
            "# schema=1",
            HEADER,
            "1000,32U,572000.7,5362000.2,480.0,0,0,0.1",
            "21000,32U,572001.7,5362000.2,480.0,0,0,0.1",
            "41000,32U,572002.7,5362000.2,480.0,0,0,0.1",
        ],
    )
    tr = read_pose_log(p)
    assert len(tr) == 3
    assert tr.origin == UtmOrigin("32U", 572000.0, 5362000.0)
    np.testing.assert_allclose(tr.p[0], [0.7, 0.2, 480.0], atol=1e-9)
    assert tr.breaks == ()


@pytest.mark.parametrize(
    "rows, match",
    [
        (["1000,32U,0,0,0,0,0,0", "1000,32U,1,0,0,0,0,0"], "strictly increasing"),
        (["1000,32U,0,0,0,0,0,3.5"], "outside"),
        (["1000,32U,0,0,0,0,0,-3.1416"], "outside"),
        (["1000,32U,0,0,0,0,0"], "columns"),
        (["1000,32U,0,0,0,0,0,0", "2000,33U,0,0,0,0,0,0"], "zones"),
        (["1000,32U,nan,0,0,0,0,0"], "non-finite"),
    ],
)
def test_pose_log_errors(tmp_path, rows, match):
    p = write_lines(tmp_path / "p.csv", ["# schema=1", HEADER] + rows)
    with pytest.raises(IngestError, match=match):
        read_pose_log(p)


def test_pose_log_gap_recorded(tmp_path):
    rows = [f"{k * 20000},32U,{k},0,0,0,0,0" for k in range(1, 6)]
    rows += [f"{2_100_000 + k * 20000},32U,{k},0,0,0,0,0" for k in range(5)]
    tr = read_pose_log(write_lines(tmp_path / "p.csv", ["# schema=1", HEADER] + rows))
    assert tr.breaks == (4,)
    with pytest.raises(NoPoseError, match="gap"):
        pose_at(tr, 1_000_000, max_dt=10_000_000)


def make_track(t, p, yaw=None):
    t = np.asarray(t)
    rpy = np.zeros((len(t), 3))
    if yaw is not None:
        rpy[:, 2] = yaw
    return PoseTrack(t, p, rpy)


def test_pose_at_exact_hit():
    tr = make_track([0 + 1, 20001], [[1, 2, 3], [4, 5, 6]], [0.1, 0.2])
    pose = pose_at(tr, 20001)
    np.testing.assert_array_equal(pose.p_world, [4, 5, 6])
    assert pose.yaw == 0.2


def test_pose_at_midpoint():
    tr = make_track([1, 20001], [[0, 0, 0], [1, 0, 0]])
    np.testing.assert_allclose(pose_at(tr, 10001).p_world, [0.5, 0, 0])


def test_pose_at_yaw_shortest_arc():
    tr = make_track([1, 20001], [[0, 0, 0], [0, 0, 0]], [math.radians(179), math.radians(-179)])
    yaw = pose_at(tr, 10001).yaw
    assert abs(abs(yaw) - math.pi) < 1e-12


def test_pose_at_nearest_mode():
    tr = make_track([1, 20001], [[0, 0, 0], [1, 0, 0]])
    np.testing.assert_array_equal(pose_at(tr, 14001, nearest=True).p_world, [1, 0, 0])


def test_pose_at_out_of_span():
    tr = make_track([1_000_000, 1_020_000], [[0, 0, 0], [1, 0, 0]])
    with pytest.raises(NoPoseError):
        pose_at(tr, 900_000, max_dt=50_000)
    assert pose_at(tr, 980_000, max_dt=50_000).t == 1_000_000


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0), st.lists(st.floats(-100, 100), min_size=6, max_size=6))
def test_pose_interpolation_is_convex(w, pq):
    a, b = np.array(pq[:3]), np.array(pq[3:])
    tr = make_track([1, 20001], [a, b])
    t = 1 + int(round(w * 20000))
    p = pose_at(tr, t).p_world
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    assert np.all(p >= lo - 1e-9) and np.all(p <= hi + 1e-9)


def test_pose_at_continuous():
    tr = make_track([1, 20001, 40001], [[0, 0, 0], [1, 2, 0], [3, 3, 1]], [3.1, -3.1, -3.0])
    for t in (5000, 20000, 20001, 30000):
        a, b = pose_at(tr, t), pose_at(tr, t + 1)
        assert np.linalg.norm(a.p_world - b.p_world) < 1e-3
        assert abs(math.remainder(a.yaw - b.yaw, 2 * math.pi)) < 1e-3


def test_radar_round_trip(tmp_path, rng):
    frames = [
        RadarFrame(1000 + 66_667 * k, rng.uniform(1, 50, (n, 3)), rng.normal(size=n), rng.normal(size=n))
        for k, n in enumerate([3, 0, 5])
    ]
    for fmt in ("spherical", "cartesian"):
        path = tmp_path / f"{fmt}.jsonl"
        write_radar_log(path, frames, fmt)
        back = read_radar_log(path)
        for a, b in zip(frames, back):
            assert a.t == b.t
            np.testing.assert_allclose(a.points, b.points, atol=1e-4)
            np.testing.assert_allclose(a.v_rad, b.v_rad, atol=1e-9)
            np.testing.assert_allclose(a.rcs, b.rcs, atol=1e-9)


def test_pose_round_trip(tmp_path, rng):
    n = 20
    rpy = rng.uniform(-3.1, 3.1, (n, 3))
    tr = PoseTrack(np.arange(n) * 20_000 + 5, rng.uniform(0, 100, (n, 3)), rpy, origin=UtmOrigin("32U", 572000, 5362000))
    write_pose_log(tmp_path / "p.csv", tr)
    back = read_pose_log(tmp_path / "p.csv")
    abs_in = tr.p + [572000, 5362000, 0]
    abs_out = back.p + [back.origin.easting, back.origin.northing, 0]
    np.testing.assert_allclose(abs_in, abs_out, atol=1e-4)
    np.testing.assert_allclose(back.rpy, rpy, atol=1e-7)
    np.testing.assert_array_equal(back.t, tr.t)


def test_calibration_round_trip(tmp_path):
    R_level = euler_to_rotation(0.02, -0.2, 0.0)
    c = Calibration(euler_to_rotation(0, 0, 2.0) @ R_level, [1, 2, 3], R_level, UtmOrigin("32U", 5, 6), 0.25, 4, True)
    write_calibration(tmp_path / "c.json", c, "2024-01-01T00:00:00+00:00")
    d = json.loads((tmp_path / "c.json").read_text())
    assert d["schema"] == 1 and d["origin"] == [5.0, 6.0] and d["refined"] is True
    assert set(d) >= {"utm_zone", "t", "q_wxyz", "rpy_deg", "r_level_rpy_deg", "residual_rms_m", "n_hypotheses"}
    back = read_calibration(tmp_path / "c.json")
    np.testing.assert_allclose(back.R, c.R, atol=1e-12)
    np.testing.assert_allclose(back.R_level, c.R_level, atol=1e-12)
    np.testing.assert_array_equal(back.t, c.t)
    assert back.origin == c.origin and back.residual_rms == 0.25 and back.n_hypotheses == 4


def test_calibration_schema_mismatch(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"schema": 2}), encoding="utf-8")
    with pytest.raises(IngestError, match="schema"):
        read_calibration(tmp_path / "c.json")
