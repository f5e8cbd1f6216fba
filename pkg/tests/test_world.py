import math
from dataclasses import replace

import numpy as np
import pytest

from adaptive_trav.errors import InvalidInputError
from adaptive_trav.feature_space import ClusterSet, fit_clusters, ood_score, vlad_descriptor
from adaptive_trav.proprioception import DEFAULT_PARAMS, roughness
from adaptive_trav.sim import Route
from adaptive_trav.world import (
    DEFAULT_CLASSES, TerrainClass, WorldSpec, class_areas, generate_world, sense,
    synthesize_proprio, visible_cells,
)


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldSpec(seed=3))


def test_generation_is_deterministic(world):
    again = generate_world(WorldSpec(seed=3))
    np.testing.assert_array_equal(again.labels, world.labels)
    np.testing.assert_array_equal(again.means, world.means)
    np.testing.assert_array_equal(again.waypoints, world.waypoints)
    other = generate_world(WorldSpec(seed=4))
    assert not np.array_equal(other.labels, world.labels)


def test_class_areas_cover_the_world(world):
    areas = class_areas(world)
    assert sum(areas.values()) == pytest.approx(100.0 * 70.0, rel=1e-12)
    for name in ("trail", "smooth_grass", "rough_grass", "tree", "foreign"):
        assert areas[name] > 0


def test_start_lies_on_trail(world):
    assert world.classes[world.class_at(*world.start[:2])].name in ("trail", "gravel")


def test_foreign_patch_is_far_from_fitted_clusters(world):
    cs = fit_clusters(world.sample_embeddings(3000, 0), 16, seed=0)
    fid = world.spec.class_index("foreign")
    emb = world.embed(np.full(200, fid), np.random.default_rng(1)).astype(float)
    assert ood_score(vlad_descriptor(emb, cs)).min() > 2 * cs.tau
    known = world.sample_embeddings(500, 7)
    assert np.mean(ood_score(vlad_descriptor(known.astype(float), cs)) <= cs.tau) > 0.9


def test_descriptor_to_own_mean_is_folded_normal():
    spec = WorldSpec(seed=0, layout="uniform")
    w = generate_world(spec)
    cs = ClusterSet(w.means[:4], 1.0)
    gid = spec.class_index("smooth_grass")
    emb = w.embed(np.full(4000, gid), np.random.default_rng(0)).astype(float)
    entry = vlad_descriptor(emb, cs)[:, gid].mean()
    sigma = DEFAULT_CLASSES[gid].noise_std
    # float32 storage of the embeddings adds a negligible rounding term
    assert entry == pytest.approx(spec.embed_dim * sigma * math.sqrt(2 / math.pi), rel=0.05)


def test_zero_noise_sensing_is_repeatable():
    classes = tuple(replace(c, noise_std=0.0) for c in DEFAULT_CLASSES)
    w = generate_world(WorldSpec(seed=1, classes=classes))
    cs = ClusterSet(w.means[:4], 1.0)
    pose = (*w.start[:2], w.start[2])
    a = sense(w, pose, cs, np.random.default_rng(0))
    b = sense(w, pose, cs, np.random.default_rng(99))
    np.testing.assert_array_equal(a.embeddings, b.embeddings)
    np.testing.assert_array_equal(a.embeddings, w.means[a.classes].astype(np.float32))


def test_visible_cells_inside_forward_sector():
    w = generate_world(WorldSpec(seed=0, layout="uniform"))
    x, y, heading = 50.0, 35.0, 0.4
    cells = visible_cells(w, x, y, heading, fov=10.0, half_angle=math.radians(45))
    c = (cells + 0.5) * w.resolution
    dx, dy = c[:, 0] - x, c[:, 1] - y
    assert np.all(np.hypot(dx, dy) <= 10.0)
    bearing = (np.arctan2(dy, dx) - heading + np.pi) % (2 * np.pi) - np.pi
    assert np.all(np.abs(bearing) <= math.radians(45) + 1e-12)
    # area of the sector within one ring of cells
    expected = 0.25 * math.pi * 100 / w.resolution ** 2
    assert abs(len(cells) - expected) < 2 * math.pi * 10 / w.resolution
    assert len(visible_cells(w, -500.0, -500.0, 0.0)) == 0


def test_trees_hide_ground_but_stay_visible():
    w = generate_world(WorldSpec(seed=0, layout="uniform"))
    tree = w.spec.class_index("tree")
    # wall two cells thick across the view at x in [55, 56)
    w.labels[110:112, 50:90] = tree
    cells = visible_cells(w, 50.0, 35.0, 0.0, fov=15.0, half_angle=math.radians(20))
    ii = cells[:, 0]
    assert np.any(ii == 110) and np.any(ii == 111)
    assert not np.any(ii >= 113)
    w.labels[110:112, 50:90] = w.spec.class_index("smooth_grass")
    assert np.any(visible_cells(w, 50.0, 35.0, 0.0, 15.0, math.radians(20))[:, 0] >= 113)


def test_uniform_world_is_one_class():
    w = generate_world(WorldSpec(seed=2, layout="uniform", fill_class="gravel"))
    assert set(np.unique(w.labels)) == {w.spec.class_index("gravel")}


def test_generation_rejects_bad_specs():
    bad = DEFAULT_CLASSES[:1] + (TerrainClass("x", -0.1, 0.0),) + DEFAULT_CLASSES[1:]
    with pytest.raises(InvalidInputError):
        generate_world(WorldSpec(classes=bad))
    with pytest.raises(InvalidInputError):
        generate_world(WorldSpec(classes=DEFAULT_CLASSES + DEFAULT_CLASSES[:1]))
    with pytest.raises(InvalidInputError):
        generate_world(WorldSpec(layout="spiral"))


def test_ground_truth_roughness_is_clipped_line():
    c = TerrainClass("c", 0.1, 0.2)
    np.testing.assert_allclose(c.roughness([0.0, 2.0, 10.0]), [0.1, 0.5, 1.0])


def test_synthesized_vibration_hits_target_on_average():
    rng = np.random.default_rng(0)
    r = np.array([roughness(synthesize_proprio(0.3, rng=rng), DEFAULT_PARAMS) for _ in range(400)])
    assert abs(r.mean() - 0.3) < 3 * r.std(ddof=1) / math.sqrt(len(r))


def test_doubling_target_doubles_roughness():
    a = synthesize_proprio(0.1, rng=np.random.default_rng(5))
    b = synthesize_proprio(0.2, rng=np.random.default_rng(5))
    ra, rb = roughness(a, DEFAULT_PARAMS), roughness(b, DEFAULT_PARAMS)
    assert rb == pytest.approx(2 * ra, rel=1e-9)
    assert roughness(synthesize_proprio(0.0), DEFAULT_PARAMS) == 0.0
    with pytest.raises(InvalidInputError):
        synthesize_proprio(1.5)
    with pytest.raises(InvalidInputError):
        synthesize_proprio(0.5, duration=0.1)


def test_route_arc_length():
    r = Route([[0.0, 0.0], [3.0, 0.0], [3.0, 4.0]])
    assert r.length == pytest.approx(12.0)
    np.testing.assert_allclose(r.point_at([0.0, 1.5, 5.0, 12.0, 13.0]),
                               [[0, 0], [1.5, 0], [3, 2], [0, 0], [1, 0]])
    assert r.segment(4.0) == 1
    assert r.project(3.1, 2.0) == pytest.approx(5.0)
    assert r.project(1.0, 0.2, s_hint=0.5) == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        Route([[0.0, 0.0], [0.0, 0.0]])
