import json
import math

import numpy as np
import pandas as pd
import pytest
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score

from critgen import highd
from critgen.highd import (
    DriverFeatures, ParseError, build_database, extract_critical_pairs, extract_features, feature_matrix,
    fit_kprototypes, kprototypes, parse_recording, parse_tracks, synthetic_features,
)
from critgen.scenario import load_database, validate_config


def track_rows(vid, frames, x0=0.0, vx=30.0, lane=2, thw=1.5, ttc=0.0, lead=0, dhw=40.0, width=4.5):
    return [dict(frame=f, id=vid, x=x0 + vx * (f - frames[0]) / 25, y=lane * 3.5, width=width, height=1.8,
                 xVelocity=vx, yVelocity=0.0, xAcceleration=0.0, yAcceleration=0.0, dhw=dhw,
                 thw=thw, ttc=ttc, precedingId=lead, laneId=lane) for f in frames]


def write_recording(d, rows, classes, name="01", drop=None):
    df = pd.DataFrame(rows)
    if drop:
        df = df.drop(columns=[drop])
    df.to_csv(d / f"{name}_tracks.csv", index=False)
    meta = pd.DataFrame({"id": list(classes), "class": list(classes.values()),
                         "numLaneChanges": [0] * len(classes)})
    meta.to_csv(d / f"{name}_tracksMeta.csv", index=False)
    pd.DataFrame({"id": [int(name)], "frameRate": [25], "numVehicles": [len(classes)]}).to_csv(
        d / f"{name}_recordingMeta.csv", index=False)
    return d / f"{name}_tracks.csv"


def test_minimal_two_row_vehicle(tmp_path):
    path = write_recording(tmp_path, track_rows(1, [1, 2]), {1: "Car"})
    tracks = parse_tracks(path)
    assert len(tracks) == 1 and len(tracks[0]) == 2 and tracks[0].kind == "car"


def test_shuffled_frames_are_sorted(tmp_path):
    rows = track_rows(1, [1, 2, 3, 4])
    rows = [rows[i] for i in (2, 0, 3, 1)]
    tracks = parse_tracks(write_recording(tmp_path, rows, {1: "Truck"}))
    assert tracks[0].rows["frame"].tolist() == [1, 2, 3, 4]
    assert tracks[0].kind == "truck"


def test_missing_column_named(tmp_path):
    path = write_recording(tmp_path, track_rows(1, [1, 2]), {1: "Car"}, drop="xVelocity")
    with pytest.raises(ParseError) as err:
        parse_tracks(path)
    assert err.value.column == "xVelocity" and "xVelocity" in str(err.value)


def test_non_numeric_cell_reports_row(tmp_path):
    rows = track_rows(1, [1, 2, 3])
    rows[2]["x"] = "abc"
    with pytest.raises(ParseError) as err:
        parse_tracks(write_recording(tmp_path, rows, {1: "Car"}))
    assert err.value.row == 3 and err.value.column == "x"


def test_missing_file(tmp_path):
    with pytest.raises(ParseError, match="not found"):
        parse_tracks(tmp_path / "07_tracks.csv")


def test_parsing_is_lossless(tmp_path):
    rng = np.random.default_rng(0)
    rows = track_rows(1, list(range(1, 11)))
    for r in rows:
        r["x"] = float(rng.uniform(0, 400))
        r["xVelocity"] = float(rng.uniform(20, 40))
    path = write_recording(tmp_path, rows, {1: "Car"})
    got = parse_tracks(path)[0].rows
    want = pd.DataFrame(rows)
    for col in highd.TRACK_COLUMNS:
        assert np.array_equal(got[col].to_numpy(float), want[col].to_numpy(float)), col


def test_extract_features_examples(tmp_path):
    rows = track_rows(1, [1, 2, 3, 4, 5], thw=0.0)
    for r, lane in zip(rows, [2, 2, 3, 3, 2]):
        r["laneId"] = lane
    rows += track_rows(2, [1])
    tracks = parse_tracks(write_recording(tmp_path, rows, {1: "Car", 2: "Car"}))
    feats, skipped = extract_features(tracks)
    assert skipped == 1 and len(feats) == 1
    f = feats[0]
    assert f.speed_std == 0 and f.lane_change_count == 2 and math.isinf(f.min_thw)
    assert f.mean_speed == pytest.approx(30.0)


def test_feature_matrix_replaces_undefined_thw():
    fs = [DriverFeatures(1, 30, 0, 0, 0, math.inf, 0, "car"), DriverFeatures(2, 20, 0, 0, 0, 2.5, 1, "truck")]
    num, cat = feature_matrix(fs)
    assert num[0, highd.NUMERIC_FEATURES.index("min_thw")] == 2.5
    assert cat.tolist() == [0, 1]


def test_identical_rows_share_a_label():
    fs = [DriverFeatures(i, 30, 1, 0.5, 1, 1.5, 0, "car") for i in range(12)]
    model = fit_kprototypes(fs)
    assert len(set(model.labels.values())) == 1
    assert model.cost_history[-1] == 0


def test_too_few_rows():
    with pytest.raises(ValueError):
        fit_kprototypes([DriverFeatures(1, 30, 0, 0, 0, 1, 0, "car")])


def test_naming_by_speed():
    fs, truth = synthetic_features(40, rng_seed=3)
    model = fit_kprototypes(fs, rng_seed=3)
    speed = {f.vehicle_id: f.mean_speed for f in fs}
    by_name = {}
    for vid, name in model.labels.items():
        by_name.setdefault(name, []).append(speed[vid])
    means = {k: np.mean(v) for k, v in by_name.items()}
    assert means["aggressive"] > means["regular"] > means["defensive"]


@pytest.mark.parametrize("seed", range(5))
def test_gamma_zero_matches_kmeans(seed):
    fs, _ = synthetic_features(30, rng_seed=seed)
    num, cat = feature_matrix(fs)
    z = (num - num.mean(0)) / num.std(0)
    rng = np.random.default_rng(seed)
    init = z[rng.choice(len(z), 3, replace=False)]
    labels, centroids, _, _ = kprototypes(z, cat, 3, 0.0, init=(init.copy(), np.zeros(3, dtype=int)))
    km = KMeans(3, init=init, n_init=1, algorithm="lloyd", tol=0.0, max_iter=100).fit(z)
    assert np.array_equal(labels, km.labels_)
    assert np.allclose(centroids, km.cluster_centers_)


def test_cost_never_increases_random_starts():
    rng = np.random.default_rng(0)
    for s in range(20):
        z = rng.normal(size=(60, 4))
        cat = rng.integers(0, 2, 60)
        *_, costs = kprototypes(z, cat, 4, gamma_mix=rng.uniform(0, 2), rng_seed=s)
        assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))


def test_empty_cluster_reseeded():
    z = np.array([[0.0], [0.1], [10.0], [10.1]])
    cat = np.zeros(4, dtype=int)
    init = (np.array([[0.0], [5.0], [100.0]]), np.zeros(3, dtype=int))
    labels, *_ = kprototypes(z, cat, 3, 0.0, init=init)
    assert len(set(labels.tolist())) == 3


def test_critical_pairs_examples(tmp_path):
    rows = track_rows(1, [1, 2, 3], x0=0, lead=2, thw=3.0, ttc=-1.0)
    rows[1].update(thw=2.0, ttc=4.0)
    rows += track_rows(2, [1, 2, 3], x0=50)
    rows += track_rows(3, [1, 2], x0=200, lead=4, thw=0.5, ttc=2.0, lane=3)  # rp 2 + 2 = 4
    rows += track_rows(4, [1, 2], x0=230, lane=3)
    tracks = parse_tracks(write_recording(tmp_path, rows, {1: "Car", 2: "Car", 3: "Car", 4: "Truck"}))
    pairs = extract_critical_pairs(tracks)
    assert [round(p.rp, 9) for p in pairs] == [4.0, 1.5]
    assert pairs[1].frame == 2 and pairs[1].follower.vehicle_id == 1 and pairs[1].leader.vehicle_id == 2
    assert extract_critical_pairs(tracks, top_n=1) == pairs[:1]


def test_no_leaders_no_pairs(tmp_path):
    tracks = parse_tracks(write_recording(tmp_path, track_rows(1, [1, 2]), {1: "Car"}))
    assert extract_critical_pairs(tracks) == []


def test_pair_ties_broken_by_ids(tmp_path):
    rows = []
    for f, l in ((5, 6), (1, 2), (3, 4)):
        rows += track_rows(f, [1, 2], lead=l, thw=1.0, ttc=4.0)
        rows += track_rows(l, [1, 2], x0=60)
    classes = {i: "Car" for i in range(1, 7)}
    pairs = extract_critical_pairs(parse_tracks(write_recording(tmp_path, rows, classes)))
    assert [(p.follower.vehicle_id, p.leader.vehicle_id) for p in pairs] == [(1, 2), (3, 4), (5, 6)]


def test_build_database_synthetic(small_db, synthetic_dir):
    path, configs = small_db
    assert len(configs) == len(synthetic_dir[1])
    for c in configs:
        validate_config(c)
        assert c.critical_pair is not None


def test_build_database_empty(tmp_path):
    report = build_database([], tmp_path / "db.json")
    assert report.count == 0 and load_database(tmp_path / "db.json") == []


def test_build_database_continues_past_bad_file(tmp_path, synthetic_dir):
    _, paths = synthetic_dir
    report = build_database([paths[0], tmp_path / "99_tracks.csv", paths[1]], tmp_path / "db.json")
    assert report.count == 2
    assert [s.ok for s in report.statuses] == [True, False, True]
    assert "99_tracks.csv" in report.failures[0].message


def test_labels_stay_with_their_recording(small_db, synthetic_dir):
    # vehicle ids repeat across recordings; each config must use its own recording's labels
    _, configs = small_db
    per_rec = [extract_features(parse_recording(p).tracks)[0] for p in synthetic_dir[1]]
    model = fit_kprototypes([f for fs in per_rec for f in fs], rng_seed=5)
    start = 0
    for fs, cfg in zip(per_rec, configs):
        names = [model.cluster_names[c] for c in model.assignments[start:start + len(fs)]]
        start += len(fs)
        share = np.array([names.count(b) for b in ("aggressive", "defensive", "regular")]) / len(names)
        counts = np.array([cfg.num_aggressive, cfg.num_defensive, cfg.num_regular])
        assert np.abs(counts / counts.sum() - share).max() <= 1.0 / counts.sum() + 1e-12
    assert len({(c.num_aggressive, c.num_defensive, c.num_regular) for c in configs}) > 1


def test_synthetic_recording_shapes(tmp_path):
    path = highd.write_synthetic_recording(tmp_path, 1, 0, n_vehicles=24, lanes=3)
    rec = parse_recording(path)
    assert rec.name == "01" and len(rec.tracks) == 24
    assert any(t.kind == "truck" for t in rec.tracks)
    paths = highd.synthetic_recordings(tmp_path / "many", 8, rng_seed=1)
    sizes = {len(parse_recording(p).tracks) for p in paths}
    assert len(sizes) > 1 and all(12 <= n <= 42 for n in sizes)
