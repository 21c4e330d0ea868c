"""Ingest highD-format trajectory recordings into a scenario database.

A recording is three CSV files sharing a prefix: ``NN_tracks.csv``,
``NN_tracksMeta.csv`` and ``NN_recordingMeta.csv``. Vehicles are described
by per-vehicle driving-style features, grouped into three behavior classes
with k-prototypes, and each recording contributes one scenario configuration
seeded with its riskiest follower/leader pair.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import pandas as pd

from . import _kernels as _k
from .risk import RpParams, rp
from .scenario import (
    BEHAVIORS,
    DEFAULT_RANGES,
    KINDS,
    ScenarioConfig,
    ValidRanges,
    VehicleSeed,
    reconcile,
    save_database,
    split_kinds,
    validate_config,
)

log = logging.getLogger(__name__)

TRACK_COLUMNS = (
    "frame", "id", "x", "y", "width", "height", "xVelocity", "yVelocity",
    "xAcceleration", "yAcceleration", "dhw", "thw", "ttc", "precedingId", "laneId",
)
TRACK_META_COLUMNS = ("id", "class", "numLaneChanges")
RECORDING_META_COLUMNS = ("id", "frameRate", "numVehicles")
_INT_COLUMNS = ("frame", "id", "precedingId", "laneId")

KIND_OF_CLASS = {"car": "car", "truck": "truck"}

NUMERIC_FEATURES = ("mean_speed", "speed_std", "mean_abs_accel", "max_abs_accel", "min_thw", "lane_change_count")

PAIR_OFFSET = 60.0  # where the follower of a critical pair starts ahead of the ego [m]


class ParseError(ValueError):
    def __init__(self, path, message: str, column: str | None = None, row: int | None = None):
        self.path = str(path)
        self.column = column
        self.row = row
        where = f"{self.path}"
        if row is not None:
            where += f", row {row}"
        super().__init__(f"{where}: {message}")


@dataclass
class VehicleTrack:
    """Frame-sorted rows of one vehicle; columns keep their highD names."""

    vehicle_id: int
    kind: str
    rows: pd.DataFrame

    def __len__(self):
        return len(self.rows)


@dataclass
class Recording:
    name: str
    frame_rate: float
    tracks: list[VehicleTrack]


@dataclass(frozen=True)
class DriverFeatures:
    vehicle_id: int
    mean_speed: float
    speed_std: float
    mean_abs_accel: float
    max_abs_accel: float
    min_thw: float  # inf when the vehicle never had a leader
    lane_change_count: int
    kind: str


@dataclass
class ClusterModel:
    k: int
    numeric_centroids: np.ndarray  # standardized units
    categorical_modes: np.ndarray  # index into KINDS
    gamma_mix: float
    labels: dict[int, str]
    cluster_names: tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray
    cost_history: list[float] = field(default_factory=list)
    assignments: np.ndarray | None = None


class PairState(NamedTuple):
    vehicle_id: int
    x: float  # bounding-box centre [m]
    y: float
    speed: float  # along the direction of travel
    acceleration: float
    lane_id: int
    kind: str
    length: float


class CriticalPair(NamedTuple):
    frame: int
    follower: PairState
    leader: PairState
    rp: float
    gap: float  # the follower's distance headway at the peak frame [m]


@dataclass
class FileStatus:
    path: str
    ok: bool
    message: str = ""


@dataclass
class IngestReport:
    count: int
    statuses: list[FileStatus]

    @property
    def failures(self) -> list[FileStatus]:
        return [s for s in self.statuses if not s.ok]


# ---------------------------------------------------------------- parsing


def _read_csv(path, required: Sequence[str], numeric: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise ParseError(path, "file not found")
    try:
        df = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ParseError(path, f"unreadable CSV ({exc})") from exc
    df.columns = [c.strip() for c in df.columns]
    for col in required:
        if col not in df.columns:
            raise ParseError(path, f"missing required column {col!r}", column=col)
    df = df[list(required)].copy()
    for col in numeric:
        text = df[col].str.strip()
        bad = np.flatnonzero(pd.to_numeric(text, errors="coerce").isna().to_numpy())
        if len(bad):
            row = int(bad[0]) + 1
            raise ParseError(path, f"non-numeric value {df[col].iloc[bad[0]]!r} in column {col!r}",
                             column=col, row=row)
        df[col] = text.astype(float)  # exact round trip, unlike the fast parser
    return df


def _companion(tracks_path: Path, suffix: str) -> Path:
    name = tracks_path.name
    if not name.endswith("_tracks.csv"):
        raise ParseError(tracks_path, "tracks file name must end in '_tracks.csv'")
    return tracks_path.with_name(name[: -len("_tracks.csv")] + suffix)


def parse_tracks(tracks_path, tracks_meta_path=None) -> list[VehicleTrack]:
    """Group a tracks file by vehicle, frame-sorted, with kinds joined from the meta file."""
    tracks_path = Path(tracks_path)
    if tracks_meta_path is None:
        tracks_meta_path = _companion(tracks_path, "_tracksMeta.csv")
    df = _read_csv(tracks_path, TRACK_COLUMNS, TRACK_COLUMNS)
    meta = _read_csv(tracks_meta_path, TRACK_META_COLUMNS, ("id", "numLaneChanges"))
    for col in _INT_COLUMNS:
        df[col] = df[col].astype(np.int64)
    bad = np.flatnonzero((df["frame"] < 1).to_numpy() | (df["width"] <= 0).to_numpy())
    if len(bad):
        raise ParseError(tracks_path, "frame must be >= 1 and width positive", row=int(bad[0]) + 1)

    kinds = {}
    for vid, cls in zip(meta["id"].astype(np.int64), meta["class"]):
        kind = KIND_OF_CLASS.get(str(cls).strip().lower())
        if kind is None:
            raise ParseError(tracks_meta_path, f"unknown vehicle class {cls!r}", column="class")
        kinds[int(vid)] = kind

    out = []
    for vid, rows in df.groupby("id", sort=True):
        if int(vid) not in kinds:
            raise ParseError(tracks_meta_path, f"vehicle {vid} missing from meta file", column="id")
        rows = rows.sort_values("frame", kind="stable").reset_index(drop=True)
        out.append(VehicleTrack(int(vid), kinds[int(vid)], rows))
    return out


def parse_recording(tracks_path) -> Recording:
    tracks_path = Path(tracks_path)
    tracks = parse_tracks(tracks_path)
    meta_path = _companion(tracks_path, "_recordingMeta.csv")
    frame_rate = 25.0
    if meta_path.is_file():
        meta = _read_csv(meta_path, RECORDING_META_COLUMNS, RECORDING_META_COLUMNS)
        if len(meta):
            frame_rate = float(meta["frameRate"].iloc[0])
    name = tracks_path.name[: -len("_tracks.csv")]
    return Recording(name, frame_rate, tracks)


# ---------------------------------------------------------------- features


def extract_features(tracks: Iterable[VehicleTrack]) -> tuple[list[DriverFeatures], int]:
    """Driving-style statistics per vehicle; returns (features, number of skipped short tracks)."""
    out = []
    skipped = 0
    for track in tracks:
        r = track.rows
        if len(r) < 2:
            skipped += 1
            continue
        speed = np.hypot(r["xVelocity"].to_numpy(float), r["yVelocity"].to_numpy(float))
        accel = np.abs(np.hypot(r["xAcceleration"].to_numpy(float), r["yAcceleration"].to_numpy(float)))
        thw = r["thw"].to_numpy(float)
        thw = thw[thw > 0]
        lanes = r["laneId"].to_numpy()
        out.append(DriverFeatures(
            vehicle_id=track.vehicle_id,
            mean_speed=float(speed.mean()),
            speed_std=float(speed.std()),
            mean_abs_accel=float(accel.mean()),
            max_abs_accel=float(accel.max()),
            min_thw=float(thw.min()) if len(thw) else math.inf,
            lane_change_count=int(np.count_nonzero(lanes[1:] != lanes[:-1])),
            kind=track.kind,
        ))
    if skipped:
        log.warning("skipped %d tracks shorter than two frames", skipped)
    return out, skipped


def feature_matrix(features: Sequence[DriverFeatures]) -> tuple[np.ndarray, np.ndarray]:
    """Numeric matrix (undefined min_thw replaced by the largest defined one) and kind indices."""
    num = np.array([[getattr(f, name) for name in NUMERIC_FEATURES] for f in features], dtype=float)
    num = num.reshape(len(features), len(NUMERIC_FEATURES))
    col = NUMERIC_FEATURES.index("min_thw")
    finite = np.isfinite(num[:, col])
    num[~finite, col] = num[finite, col].max() if finite.any() else 0.0
    cat = np.array([KINDS.index(f.kind) for f in features], dtype=np.int64)
    return num, cat


# ---------------------------------------------------------------- clustering


def _cost_matrix(z, cat, centroids, modes, gamma_mix):
    d = ((z[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d + gamma_mix * (cat[:, None] != modes[None, :])


def _init_prototypes(z, cat, k, gamma_mix, rng):
    """k-means++ seeding under the mixed distance."""
    n = len(z)
    first = int(rng.integers(n))
    centroids = [z[first]]
    modes = [cat[first]]
    for _ in range(1, k):
        d = _cost_matrix(z, cat, np.array(centroids), np.array(modes), gamma_mix).min(axis=1)
        total = d.sum()
        pick = int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=d / total))
        centroids.append(z[pick])
        modes.append(cat[pick])
    return np.array(centroids, dtype=float), np.array(modes, dtype=np.int64)


def _mode(values: np.ndarray, n_categories: int) -> int:
    return int(np.argmax(np.bincount(values, minlength=n_categories)))


def kprototypes(z, cat, k, gamma_mix, rng_seed=0, init=None, max_iter=100, n_categories=len(KINDS)):
    """Lloyd-style k-prototypes on standardized numerics ``z`` and category codes ``cat``.

    Returns (labels, centroids, modes, cost_history). ``init`` optionally
    gives the starting (centroids, modes).
    """
    rng = np.random.default_rng(rng_seed)
    if init is None:
        centroids, modes = _init_prototypes(z, cat, k, gamma_mix, rng)
    else:
        centroids = np.array(init[0], dtype=float)
        modes = np.array(init[1], dtype=np.int64)
    labels = None
    costs = []
    for _ in range(max_iter):
        dist = _cost_matrix(z, cat, centroids, modes, gamma_mix)
        new = dist.argmin(axis=1)
        best = dist[np.arange(len(z)), new]
        for c in range(k):
            if np.any(new == c):
                continue
            # re-seed an empty cluster from the point farthest from its prototype
            far = int(np.argmax(best))
            if best[far] <= 0:
                continue
            new[far] = c
            best[far] = 0.0
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = z[members].mean(axis=0)
                modes[c] = _mode(cat[members], n_categories)
        cost = float(_cost_matrix(z, cat, centroids, modes, gamma_mix)[np.arange(len(z)), labels].sum())
        if costs and cost > costs[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-prototypes cost increased: {costs[-1]} -> {cost}")
        costs.append(cost)
    return labels, centroids, modes, costs


def default_gamma_mix(z: np.ndarray) -> float:
    return 0.5 * float(z.var(axis=0).mean())


def fit_kprototypes(
    features: Sequence[DriverFeatures],
    k: int = 3,
    gamma_mix: float | None = None,
    rng_seed: int = 0,
) -> ClusterModel:
    """Cluster drivers and name clusters by mean speed (fastest is aggressive)."""
    if len(features) < k:
        raise ValueError(f"need at least {k} feature rows, got {len(features)}")
    if k != len(BEHAVIORS):
        raise ValueError(f"behavior naming needs k={len(BEHAVIORS)}")
    num, cat = feature_matrix(features)
    mean = num.mean(axis=0)
    scale = num.std(axis=0)
    scale[scale == 0] = 1.0
    z = (num - mean) / scale
    if gamma_mix is None:
        gamma_mix = default_gamma_mix(z)
    if gamma_mix < 0:
        raise ValueError("gamma_mix must be non-negative")
    labels, centroids, modes, costs = kprototypes(z, cat, k, gamma_mix, rng_seed)

    speed = num[:, NUMERIC_FEATURES.index("mean_speed")]
    used = [c for c in range(k) if np.any(labels == c)]
    used.sort(key=lambda c: (-speed[labels == c].mean(), c))
    ranked = {1: ["regular"], 2: ["aggressive", "defensive"], 3: ["aggressive", "regular", "defensive"]}[len(used)]
    names = {c: name for c, name in zip(used, ranked)}
    spare = [b for b in BEHAVIORS if b not in ranked]
    for c in range(k):
        if c not in names:
            names[c] = spare.pop(0)
    return ClusterModel(
        k=k,
        numeric_centroids=centroids,
        categorical_modes=modes,
        gamma_mix=float(gamma_mix),
        labels={f.vehicle_id: names[int(c)] for f, c in zip(features, labels)},
        cluster_names=tuple(names[c] for c in range(k)),
        mean=mean,
        scale=scale,
        cost_history=costs,
        assignments=labels,
    )


# ---------------------------------------------------------------- critical pairs


def _positive_or_inf(value: float) -> float:
    return value if value > 0 else math.inf


def _state(track: VehicleTrack, i: int) -> PairState:
    r = track.rows.iloc[i]
    sign = 1.0 if r["xVelocity"] >= 0 else -1.0
    return PairState(
        vehicle_id=track.vehicle_id,
        x=float(r["x"] + 0.5 * r["width"]),
        y=float(r["y"] + 0.5 * r["height"]),
        speed=abs(float(r["xVelocity"])),
        acceleration=sign * float(r["xAcceleration"]),
        lane_id=int(r["laneId"]),
        kind=track.kind,
        length=float(r["width"]),
    )


def extract_critical_pairs(tracks: Sequence[VehicleTrack], rp_params: RpParams = RpParams(),
                           top_n: int | None = None) -> list[CriticalPair]:
    """Peak-RP instance of every follower/leader pair, riskiest first.

    THW and TTC come from the recording's own columns; non-positive values
    mark an undefined measure. Ties are broken by (follower id, leader id).
    """
    by_id = {t.vehicle_id: t for t in tracks}
    frame_index = {t.vehicle_id: dict(zip(t.rows["frame"].to_numpy(), range(len(t)))) for t in tracks}
    peaks: dict[tuple[int, int], tuple[float, int, int]] = {}
    for t in tracks:
        r = t.rows
        lead = r["precedingId"].to_numpy()
        thw = r["thw"].to_numpy(float)
        ttc = r["ttc"].to_numpy(float)
        frames = r["frame"].to_numpy()
        for i in np.flatnonzero(lead > 0):
            value = rp(_positive_or_inf(thw[i]), _positive_or_inf(ttc[i]), rp_params)
            key = (t.vehicle_id, int(lead[i]))
            if key not in peaks or value > peaks[key][0]:
                peaks[key] = (value, int(frames[i]), int(i))
    out = []
    for (fid, lid), (value, frame, i) in peaks.items():
        leader = by_id.get(lid)
        j = frame_index.get(lid, {}).get(frame)
        if leader is None or j is None:
            continue
        gap = float(by_id[fid].rows["dhw"].iloc[i])
        out.append(CriticalPair(frame, _state(by_id[fid], i), _state(leader, j), value, gap))
    out.sort(key=lambda p: (-p.rp, p.follower.vehicle_id, p.leader.vehicle_id))
    return out if top_n is None else out[:top_n]


# ---------------------------------------------------------------- database


def _directions(tracks: Sequence[VehicleTrack]) -> dict[int, list[int]]:
    """Lane ids per travel direction (+1 / -1), each ordered from the outer lane inwards."""
    lanes = {1: set(), -1: set()}
    for t in tracks:
        sign = 1 if t.rows["xVelocity"].mean() >= 0 else -1
        lanes[sign].update(int(v) for v in t.rows["laneId"].unique())
    return {s: sorted(v) for s, v in lanes.items() if v}


def _road_extent(tracks: Sequence[VehicleTrack]) -> float:
    lo = min(float(t.rows["x"].min()) for t in tracks)
    hi = max(float((t.rows["x"] + t.rows["width"]).max()) for t in tracks)
    return max(hi - lo, 1.0)


def _largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    w = np.asarray(weights, dtype=float)
    if total <= 0 or w.sum() <= 0:
        return [0] * len(w)
    raw = total * w / w.sum()
    base = np.floor(raw).astype(int)
    order = np.argsort(-(raw - base), kind="stable")
    for i in order[: total - base.sum()]:
        base[i] += 1
    return [int(b) for b in base]


def _seed_from(state: PairState, x: float, lane_index: int, behavior: str, ranges: ValidRanges) -> VehicleSeed:
    return VehicleSeed(
        longitudinal_position=float(np.clip(x, *ranges.x)),
        lane_index=lane_index,
        speed=float(np.clip(state.speed, *ranges.speed)),
        acceleration=float(np.clip(state.acceleration, *ranges.acceleration)),
        behavior_class=behavior,
        kind=state.kind,
    )


def recording_config(
    recording: Recording,
    labels: dict[int, str],
    config_id: str,
    seed: int = 0,
    rp_params: RpParams = RpParams(),
    ranges: ValidRanges = DEFAULT_RANGES,
) -> ScenarioConfig:
    """One configuration summarizing a recording's traffic and its riskiest pair."""
    tracks = [t for t in recording.tracks if t.vehicle_id in labels]
    if not tracks:
        raise ValueError(f"recording {recording.name} has no clustered vehicles")
    frames = pd.concat([t.rows[["frame", "id"]] for t in tracks])
    per_frame = frames.groupby("frame").size()
    directions = _directions(tracks)
    lanes_total = sum(len(v) for v in directions.values())
    lane_count = int(np.clip(max(len(v) for v in directions.values()), *ranges.lane_count))
    road_km = _road_extent(tracks) / 1000.0
    density = float(np.clip(per_frame.mean() / (road_km * lanes_total), 1e-3, ranges.density[1]))

    behavior_share = [sum(labels[t.vehicle_id] == b for t in tracks) for b in BEHAVIORS]
    caps = [int(getattr(ranges, f"num_{b}")[1]) for b in BEHAVIORS]
    limit = min(sum(caps), int(ranges.num_trucks[1] + ranges.num_cars[1]))
    total = int(min(max(round(per_frame.mean()), 2), limit))
    counts = _largest_remainder(total, behavior_share)
    for i in np.argsort(counts)[::-1]:  # move overflow to classes with room
        while counts[i] > caps[i]:
            j = int(np.argmax(np.array(caps) - np.array(counts)))
            counts[i] -= 1
            counts[j] += 1
    truck_share = sum(t.kind == "truck" for t in tracks) / len(tracks)
    trucks, cars = split_kinds(sum(counts), truck_share, ranges)

    pair = None
    peaks = extract_critical_pairs(tracks, rp_params, top_n=1)
    if peaks:
        p = peaks[0]
        lane_ids = next(v for v in directions.values() if p.follower.lane_id in v)
        lane_index = min(lane_ids.index(p.follower.lane_id), lane_count - 1)
        lead_index = lane_index
        if p.leader.lane_id in lane_ids:
            lead_index = min(lane_ids.index(p.leader.lane_id), lane_count - 1)
        spacing = max(p.gap, 1.0) + 0.5 * (p.leader.length + p.follower.length)
        pair = (
            _seed_from(p.follower, PAIR_OFFSET, lane_index, labels[p.follower.vehicle_id], ranges),
            _seed_from(p.leader, PAIR_OFFSET + spacing, lead_index, labels[p.leader.vehicle_id], ranges),
        )
    config = ScenarioConfig(
        id=config_id,
        num_aggressive=counts[0],
        num_defensive=counts[1],
        num_regular=counts[2],
        num_trucks=trucks,
        num_cars=cars,
        density=density,
        lane_count=lane_count,
        seed=seed,
        critical_pair=pair,
    )
    return validate_config(reconcile(config, ranges), ranges)


def build_database(
    recordings: Sequence,
    out_path,
    rng_seed: int = 0,
    gamma_mix: float | None = None,
    rp_params: RpParams = RpParams(),
    ranges: ValidRanges = DEFAULT_RANGES,
) -> IngestReport:
    """Parse, cluster across all recordings, and write one configuration per recording.

    Files that fail to parse are reported and skipped; the rest are written.
    """
    statuses = []
    parsed = []
    features = []
    for path in recordings:
        try:
            rec = parse_recording(path)
            feats, skipped = extract_features(rec.tracks)
        except ParseError as exc:
            statuses.append(FileStatus(str(path), False, str(exc)))
            continue
        parsed.append((rec, len(feats)))
        features.extend(feats)
        statuses.append(FileStatus(str(path), True, f"{len(feats)} vehicles ({skipped} skipped)"))

    configs = []
    if parsed:
        model = fit_kprototypes(features, gamma_mix=gamma_mix, rng_seed=rng_seed)
        start = 0
        for i, (rec, n) in enumerate(parsed):
            # vehicle ids restart in every recording, so label by position in the feature list
            labels = {f.vehicle_id: model.cluster_names[int(c)]
                      for f, c in zip(features[start:start + n], model.assignments[start:start + n])}
            start += n
            configs.append(recording_config(rec, labels, f"highd-{rec.name}", seed=rng_seed + i,
                                            rp_params=rp_params, ranges=ranges))
    save_database(configs, out_path)
    return IngestReport(len(configs), statuses)


# ---------------------------------------------------------------- synthetic data

STYLE_SPEED = {"aggressive": 36.0, "regular": 28.0, "defensive": 20.0}
STYLE_THW = {"aggressive": 0.8, "regular": 1.5, "defensive": 2.5}
STYLE_LANE_CHANGES = {"aggressive": 0.02, "regular": 0.005, "defensive": 0.001}  # per frame


def synthetic_features(n_per_class: int, rng_seed: int, truck_share: float = 0.2,
                       speed_gap: float = 10.0) -> tuple[list[DriverFeatures], np.ndarray]:
    """Three driver styles ``speed_gap`` m/s apart with identical kind marginals; returns (features, true class)."""
    rng = np.random.default_rng(rng_seed)
    out = []
    truth = []
    vid = 1
    for c, style in enumerate(("aggressive", "regular", "defensive")):
        n_trucks = int(round(truck_share * n_per_class))
        kinds = ["truck"] * n_trucks + ["car"] * (n_per_class - n_trucks)
        for kind in rng.permutation(kinds):
            out.append(DriverFeatures(
                vehicle_id=vid,
                mean_speed=30.0 + (1 - c) * speed_gap + rng.normal(0, 1.5),
                speed_std=abs(rng.normal(1.5 - 0.4 * c, 0.3)),
                mean_abs_accel=abs(rng.normal(0.8 - 0.25 * c, 0.1)),
                max_abs_accel=abs(rng.normal(2.5 - 0.7 * c, 0.3)),
                min_thw=abs(rng.normal(STYLE_THW[style], 0.2)) + 0.1,
                lane_change_count=int(rng.poisson(2.0 - 0.8 * c)),
                kind=str(kind),
            ))
            truth.append(c)
            vid += 1
    return out, np.array(truth)


def write_synthetic_recording(directory, index: int, rng_seed: int, n_vehicles: int = 24,
                              n_frames: int = 100, frame_rate: float = 25.0, lanes: int = 3,
                              road_length: float = 420.0) -> Path:
    """Write a highD-shaped recording (three CSV files); returns the tracks path.

    Vehicles of three driving styles follow each other with IDM on a looped
    stretch of road. Headway, TTC and leader columns are derived from the
    generated positions, as in the real dataset's precomputed columns.
    """
    rng = np.random.default_rng(rng_seed)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dt = 1.0 / frame_rate
    styles = rng.choice(list(STYLE_SPEED), size=n_vehicles, p=[0.3, 0.4, 0.3])
    kinds = np.where(rng.random(n_vehicles) < 0.2, "truck", "car")
    length = np.where(kinds == "truck", 12.0 + rng.normal(0, 1, n_vehicles), 4.5 + rng.normal(0, 0.3, n_vehicles))
    height = np.where(kinds == "truck", 2.5, 1.9)
    lane_ids = np.arange(2, 2 + lanes)
    lane = lane_ids[np.arange(n_vehicles) % lanes]
    slot = np.arange(n_vehicles) // lanes
    per_lane = int(np.ceil(n_vehicles / lanes))
    x = (slot + rng.uniform(0.0, 0.4, n_vehicles)) * road_length / per_lane
    v0 = np.array([STYLE_SPEED[s] for s in styles]) + rng.normal(0, 1.5, n_vehicles)
    v0 = np.where(kinds == "truck", np.minimum(v0, 25.0), v0)
    headway = np.array([STYLE_THW[s] for s in styles])
    v = 0.8 * v0
    rows = []
    lane_changes = np.zeros(n_vehicles, dtype=int)
    for frame in range(1, n_frames + 1):
        for i in range(n_vehicles):
            if rng.random() < STYLE_LANE_CHANGES[styles[i]]:
                new = lane[i] + rng.choice((-1, 1))
                others = np.flatnonzero(lane == new)
                dx = np.abs((x[others] - x[i] + 0.5 * road_length) % road_length - 0.5 * road_length)
                if new in lane_ids and np.all(dx > 0.5 * (length[others] + length[i]) + 10.0):
                    lane[i] = new
                    lane_changes[i] += 1
        lead = np.zeros(n_vehicles, dtype=int)
        gap = np.zeros(n_vehicles)
        for i in range(n_vehicles):
            same = np.flatnonzero((lane == lane[i]) & (np.arange(n_vehicles) != i))
            if len(same):
                ahead = (x[same] - x[i]) % road_length
                j = same[np.argmin(ahead)]
                lead[i] = j + 1
                gap[i] = max(ahead.min() - 0.5 * (length[i] + length[j]), 0.1)
        a = np.array([
            _k.idm(v[i], v0[i], headway[i], 1.5, 2.0, lead[i] > 0, gap[i], v[lead[i] - 1] if lead[i] else 0.0)
            for i in range(n_vehicles)
        ])
        a = np.clip(a, -8.0, 3.0) + rng.normal(0, 0.1, n_vehicles)
        for i in range(n_vehicles):
            thw = ttc = 0.0
            if lead[i]:
                j = lead[i] - 1
                thw = gap[i] / v[i]
                ttc = gap[i] / (v[i] - v[j]) if v[i] > v[j] else 0.0
            rows.append((
                frame, i + 1, round(x[i] - 0.5 * length[i], 3),
                round((lane[i] - 2) * 3.75 + 10.0, 3), round(length[i], 3), height[i],
                round(v[i], 3), round(rng.normal(0, 0.05), 3), round(a[i], 3), round(rng.normal(0, 0.05), 3),
                round(gap[i], 3), round(thw, 3), round(ttc, 3), lead[i], lane[i],
            ))
        v = np.maximum(v + a * dt, 0.5)
        x = (x + v * dt) % road_length
    prefix = f"{index:02d}"
    pd.DataFrame(rows, columns=TRACK_COLUMNS).to_csv(directory / f"{prefix}_tracks.csv", index=False)
    pd.DataFrame({
        "id": np.arange(1, n_vehicles + 1),
        "class": np.where(kinds == "truck", "Truck", "Car"),
        "numLaneChanges": lane_changes,
    }).to_csv(directory / f"{prefix}_tracksMeta.csv", index=False)
    pd.DataFrame({"id": [index], "frameRate": [frame_rate], "numVehicles": [n_vehicles]}).to_csv(
        directory / f"{prefix}_recordingMeta.csv", index=False)
    return directory / f"{prefix}_tracks.csv"


def synthetic_recordings(directory, count: int, rng_seed: int = 0, **kwargs) -> list[Path]:
    """``count`` recordings; traffic volume and lane count vary unless fixed through ``kwargs``."""
    out = []
    for i, s in enumerate(np.random.SeedSequence(rng_seed).spawn(count)):
        seed, volume, lanes = (int(v) for v in s.generate_state(3))
        shape = {"n_vehicles": 12 + volume % 31, "lanes": 2 + lanes % 3, **kwargs}
        out.append(write_synthetic_recording(directory, i + 1, seed, **shape))
    return out
