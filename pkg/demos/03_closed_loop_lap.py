"""
One lap of the figure-8 course
==============================

Run the full loop (sense, fuse, learn from vibration, plan) for one lap
with the trees pinned as impassable from a single labelled cell, then
print the lap metrics and how fast the vehicle drove on each terrain.
"""

# %%
import collections

import numpy as np

from adaptive_trav.estimator import InputScaling, RiskState
from adaptive_trav.feature_space import fit_clusters
from adaptive_trav.pipeline import PipelineConfig
from adaptive_trav.sim import EpisodeConfig, Pin, class_descriptor, run_episode
from adaptive_trav.world import WorldSpec, generate_world, suggest_descriptor_scale

world = generate_world(WorldSpec(seed=0))
clusters = fit_clusters(world.sample_embeddings(4000, 0), 32, 0)
pipeline = PipelineConfig(scaling=InputScaling(descriptor_scale=suggest_descriptor_scale(clusters)),
                          risk=RiskState(r_max=0.3))

# %%
# One click on a tree cell: its descriptor is stored with roughness 1 at
# every speed bin and never evicted.
pin = Pin(tuple(class_descriptor(world, clusters, "tree", pipeline, seed=0)))

# %%
# Progress is printed every 20 simulated seconds.
def progress(rec, pipe):
    if rec["n"] % 200 == 0:
        print(f"t={rec['t']:6.1f} s  pos=({rec['x']:5.1f}, {rec['y']:5.1f})  "
              f"v={rec['speed']:4.2f}  alpha_s={pipe.risk.alpha_s:.2f}  buffer={len(pipe.buffer)}")

log = run_episode(world, clusters, EpisodeConfig(seed=0), pipeline, pins=[pin], on_tick=progress)
print(log.metrics_table())

# %%
names = world.spec.class_names()
by_class = collections.defaultdict(list)
for r in log.ticks():
    by_class[names[r["class"]]].append((r["speed"], r["exp"]["R"]))
for name, rows in sorted(by_class.items()):
    v, R = np.array(rows).T
    print(f"{name:>13}: {len(rows):5d} ticks, mean speed {v.mean():4.2f} m/s, mean R {R.mean():.3f}")
