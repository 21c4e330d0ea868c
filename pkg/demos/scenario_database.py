"""From drone-style trajectory files to a scenario database.

Run with ``python3 demos/scenario_database.py``. Six recordings are
generated in the highD file layout, driver styles are recovered by
clustering and each recording becomes one configuration.
"""

# %% Recordings
import tempfile
from collections import Counter
from pathlib import Path

from critgen import highd

tmp = Path(tempfile.mkdtemp())
paths = highd.synthetic_recordings(tmp, 6, rng_seed=3)
print("recordings:", ", ".join(p.name for p in paths))

# %% Driver styles
rec = highd.parse_recording(paths[0])
features, skipped = highd.extract_features(rec.tracks)
model = highd.fit_kprototypes(features, rng_seed=0)
print(f"\n{len(features)} drivers clustered ({skipped} too short), cost per iteration:",
      [round(c, 1) for c in model.cost_history])
by_style = {}
for f in features:
    by_style.setdefault(model.labels[f.vehicle_id], []).append(f.mean_speed)
for style, speeds in sorted(by_style.items()):
    print(f"  {style:10s} {len(speeds):3d} drivers, mean speed {sum(speeds) / len(speeds):5.1f} m/s")

# %% The riskiest pair in the recording
(pair, *_) = highd.extract_critical_pairs(rec.tracks)
print(f"\nriskiest pair at frame {pair.frame}: follower {pair.follower.vehicle_id} "
      f"-> leader {pair.leader.vehicle_id}, gap {pair.gap:.1f} m, RP {pair.rp:.2f}")

# %% One configuration per recording
report = highd.build_database(paths, tmp / "database.json", rng_seed=3)
from critgen.scenario import load_database

configs = load_database(tmp / "database.json")
print(f"\n{report.count} configurations written to {tmp / 'database.json'}")
for c in configs:
    print(f"  {c.id}: {c.behavior_counts()} {c.kind_counts()} density {c.density:.1f}/km/lane")
print("truck share overall:", Counter(k for c in configs for k in ("truck",) * c.num_trucks + ("car",) * c.num_cars))
