"""
Vibration, roughness and speed limits
=====================================

Measure roughness from synthetic accelerometer windows, store the
experience, fit the two GP maps and read off risk-adjusted cost and speed
limits.  The last part lets the speed limit grow on easy terrain and
collapse on terrain that is always too rough.
"""

# %%
import numpy as np

from adaptive_trav.estimator import (
    InputScaling, RiskState, cvar_adjust, fit_cost_model, fit_speed_model, predict_cost,
    speed_limit,
)
from adaptive_trav.experience_buffer import BufferConfig, ExperienceBuffer
from adaptive_trav.feature_space import fit_clusters, vlad_descriptor
from adaptive_trav.proprioception import DEFAULT_PARAMS, bandpower, roughness
from adaptive_trav.sim import explore_speed
from adaptive_trav.world import (
    DEFAULT_CLASSES, TerrainClass, WorldSpec, generate_world, suggest_descriptor_scale,
    synthesize_proprio,
)

# %%
# Bandpower of a pure tone is half its squared amplitude.
fs = 100.0
t = np.arange(200) / fs
print(f"BP of a unit 5 Hz tone in [3, 7] Hz: {bandpower(np.sin(2 * np.pi * 5 * t), fs, 3, 7):.4f}")

# %%
# Roughness is a weighted sum of bandpowers.  Windows synthesized for a
# target roughness measure close to it on average.
rng = np.random.default_rng(0)
for target in (0.05, 0.2, 0.5):
    r = [roughness(synthesize_proprio(target, rng=rng)) for _ in range(50)]
    print(f"target {target:.2f}: mean {np.mean(r):.3f}, std {np.std(r):.3f}")

# %%
# Drive over four terrain classes at assorted speeds and keep the
# experience in a balanced buffer.
world = generate_world(WorldSpec(seed=0, classes=DEFAULT_CLASSES + (TerrainClass("boulders", 0.45, 0.05),)))
clusters = fit_clusters(world.sample_embeddings(3000, 0), 16, 0)
scaling = InputScaling(descriptor_scale=suggest_descriptor_scale(clusters))
buf = ExperienceBuffer(BufferConfig(capacity=256))
names = ["trail", "smooth_grass", "rough_grass", "gravel"]
desc = {}
for n in range(400):
    name = names[n % 4]
    cid = world.spec.class_index(name)
    d = vlad_descriptor(world.embed(np.array([cid]), rng).astype(float), clusters)[0]
    desc.setdefault(name, d)
    s = float(rng.uniform(0.5, 8.0))
    r = roughness(synthesize_proprio(world.true_roughness(cid, s), rng=rng, speed=s))
    buf.add(d, s, r, float(n))
print(f"buffer holds {len(buf)} samples")

# %%
# Cost is predicted roughness at a query speed, pushed up by the CVaR tail.
snap = buf.snapshot()
cost_gp = fit_cost_model(snap, scaling=scaling)
speed_gp = fit_speed_model(snap, scaling=scaling)
risk = RiskState(r_max=0.3)
print(f"{'class':>13} {'mean R@4':>9} {'CVaR R@4':>9} {'truth':>6} {'limit':>6}")
for name in names:
    mu, v = predict_cost(cost_gp, desc[name], 4.0)
    truth = world.true_roughness(world.spec.class_index(name), 4.0)
    lim = speed_limit(speed_gp, desc[name], risk.r_max, risk.alpha_s)
    print(f"{name:>13} {mu:9.3f} {cvar_adjust(mu, v, risk.alpha_r):9.3f} {truth:6.3f} {lim:6.2f}")

# %%
# Commanding the limit repeatedly: on the trail it climbs to the hard cap,
# on boulders the risk level drops to its floor.
easy = explore_speed(world, clusters, "trail", steps=12, seed=0, windows_per_step=10)
print("trail limits:", np.round(easy.limits, 2).tolist())
hard = explore_speed(world, clusters, "boulders", steps=12, seed=0)
print("boulders alpha_s:", np.round(hard.alpha_s, 2).tolist())
print("roughness params:", DEFAULT_PARAMS.to_dict())
