"""
From embeddings to a local map
==============================

Fit a small vocabulary of cluster centers, turn noisy per-cell embeddings
into distance descriptors, fuse a few frames into the rolling grid and see
which cells get flagged as unfamiliar.
"""

# %%
# A synthetic world gives us per-cell latent embeddings with known classes.
import numpy as np

from adaptive_trav.bev_map import BevGrid, integrate, update_ood
from adaptive_trav.feature_space import fit_clusters, is_ood, vlad_descriptor
from adaptive_trav.world import WorldSpec, generate_world, sense

world = generate_world(WorldSpec(seed=0))
print("classes:", world.spec.class_names())

# %%
# The vocabulary is fitted on familiar terrain only, so the foreign object
# stays far from every center.  tau is the 95th percentile of nearest-center
# L1 distances.
clusters = fit_clusters(world.sample_embeddings(4000, seed=0), k=32, seed=0)
print(f"k = {clusters.k}, tau = {clusters.tau:.2f}")

rng = np.random.default_rng(1)
for name in ("trail", "smooth_grass", "foreign"):
    cid = world.spec.class_index(name)
    e = world.embed(np.full(200, cid), rng).astype(float)
    frac = np.mean(is_ood(vlad_descriptor(e, clusters), clusters))
    print(f"{name:>13}: {frac:5.1%} of samples beyond tau")

# %%
# Look at the foreign patch from 8 m away and fuse three frames into a
# 60 x 60 grid centred on the vehicle.  Opening with radius 1 removes
# isolated flags but keeps the patch.
patch = np.argwhere(world.labels == world.spec.class_index("foreign"))
cx, cy = (patch.mean(0) + 0.5) * world.resolution
vx, vy = cx - 8.0, cy
grid = BevGrid.centered(clusters.k, vx, vy, width=60, height=60)
for _ in range(3):
    frame = sense(world, (vx, vy, 0.0), clusters, rng)
    gi, gj = grid.lattice_to_cell(frame.cells[:, 0], frame.cells[:, 1])
    integrate(grid, np.column_stack([gi, gj]), frame.descriptors)
update_ood(grid, clusters, radius=1)
print(f"{int(grid.known.sum())} cells observed, {int(grid.ood.sum())} flagged OOD")

# %%
# A coarse picture: '.' unseen, 'o' observed, '#' flagged.
rows = []
for j in range(grid.height - 1, -1, -2):
    rows.append("".join("#" if grid.ood[i, j] else ("o" if grid.known[i, j] else ".")
                        for i in range(0, grid.width, 1)))
print("\n".join(rows))
