import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semsearch.geometry import S_MAX, S_MIN, ObjectSpec, PlacedObject, Scene, ShelfSpec, footprints_collide, in_bounds
from semsearch.taxonomy import (
    DOMAINS,
    SceneGenConfig,
    SceneRejected,
    TaxonomyError,
    _prune,
    generate_accepted,
    generate_scene,
    hidden_indices,
    layout,
    load_taxonomy,
    parse_taxonomy,
    pick_target,
    scaled_spec,
)


@pytest.fixture(scope="module")
def pharmacy():
    return load_taxonomy("pharmacy")


def test_bundled_domains_load():
    for d in DOMAINS:
        tax = load_taxonomy(d)
        labels = tax.labels()
        assert len(labels) == len(set(labels)) > 0
        assert sorted(l for g in tax.categories() for l in g) == sorted(labels)


def test_pharmacy_structure(pharmacy):
    assert len(pharmacy.labels()) == 27
    # Five multi-item categories plus four outliers, each its own group.
    sizes = sorted(len(g) for g in pharmacy.categories())
    assert sizes == [1, 1, 1, 1, 2, 3, 5, 5, 8]


def test_parse_errors():
    with pytest.raises(TaxonomyError):
        parse_taxonomy({"children": []})
    with pytest.raises(TaxonomyError):
        parse_taxonomy({"name": "a", "object": {"dims": [0.1, 0.1, 0.1]}, "children": [{"name": "b", "object": {"dims": [0.1, 0.1, 0.1]}}]})
    with pytest.raises(TaxonomyError):
        parse_taxonomy({"name": "r", "children": [{"name": "a", "object": {"dims": [0.1, 0.1, 0.1]}}, {"name": "a", "object": {"dims": [0.1, 0.1, 0.1]}}]})
    with pytest.raises(TaxonomyError):
        parse_taxonomy({"name": "a"})


def test_scaled_dims_are_clipped():
    s = scaled_spec(ObjectSpec("x", (0.05, 0.5, 0.2)), 0.7)
    assert s.dims == (S_MIN, S_MAX, pytest.approx(0.14))


def test_single_object_scene(pharmacy):
    # One object is always fully visible, so no target can be picked.
    with pytest.raises(SceneRejected):
        generate_scene(pharmacy, SceneGenConfig(1, seed=3))


def test_generation_is_deterministic(pharmacy):
    a, ra = generate_accepted(pharmacy, SceneGenConfig(12, seed=7), 5)
    b, rb = generate_accepted(pharmacy, SceneGenConfig(12, seed=7), 5)
    assert a == b and ra == rb
    c, _ = generate_accepted(pharmacy, SceneGenConfig(12, seed=7), 6)
    assert c != a


def test_n_objects_limit(pharmacy):
    with pytest.raises(ValueError):
        generate_scene(pharmacy, SceneGenConfig(28))
    with pytest.raises(ValueError):
        SceneGenConfig(0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.integers(6, 20))
def test_generated_scenes_satisfy_invariants(seed, n):
    tax = load_taxonomy("pharmacy")
    scene, _ = generate_accepted(tax, SceneGenConfig(n, seed=seed), 0)
    assert len(scene.objects) == n
    assert all(in_bounds(o, scene.shelf) for o in scene.objects)
    assert not any(footprints_collide(p, q) for p, q in itertools.combinations(scene.objects, 2))
    assert scene.target_index in hidden_indices(scene)


def _box(name, x, y, h=0.1):
    return PlacedObject(ObjectSpec(name, (0.1, 0.05, h)), (x, y))


def test_pick_target_rules():
    shelf = ShelfSpec()
    front = _box("front", 0.4, 0.03, 0.5)
    back = _box("back", 0.4, 0.3)
    side = _box("side", 0.1, 0.3)
    scene = Scene(shelf, (front, back, side))
    assert hidden_indices(scene) == [1]
    assert pick_target(scene, 123) == 1
    with pytest.raises(SceneRejected):
        pick_target(Scene(shelf, (front, side)), 0)


def test_pick_target_replays_rng_stream():
    shelf = ShelfSpec()
    wall = PlacedObject(ObjectSpec("wall", (0.8, 0.05, 0.57)), (0.4, 0.025))
    objs = (wall, _box("a", 0.15, 0.3), _box("b", 0.4, 0.3), _box("c", 0.65, 0.3))
    scene = Scene(shelf, objs)
    hidden = hidden_indices(scene)
    assert hidden == [1, 2, 3]
    for seed in range(20):
        want = hidden[int(np.random.default_rng(seed).integers(3))]
        assert pick_target(scene, seed) == want


def test_noise_bounded_by_depth(pharmacy):
    cfg = SceneGenConfig(15, seed=0)
    for seed in range(30):
        rng = np.random.default_rng(seed)
        chosen = rng.choice(27, size=15, replace=False)
        tree = _prune(pharmacy, {pharmacy.leaves()[int(i)].name for i in chosen})
        assignments, _ = layout(tree, ShelfSpec(), cfg, rng)
        assert len(assignments) == 15
        for a in assignments:
            assert np.all(np.abs(a.noise) <= a.depth * cfg.noise_range + 1e-12)


def test_unforced_split_orientation_is_fair(pharmacy):
    cfg = SceneGenConfig(6)
    tree = _prune(pharmacy, set(pharmacy.labels()[:3] + pharmacy.labels()[-3:]))
    counts = {"h": 0, "v": 0}
    for seed in range(10_000):
        _, orient = layout(tree, ShelfSpec(), cfg, np.random.default_rng(seed))
        for n, o in orient:
            assert n <= cfg.horizontal_force_threshold
            counts[o] += 1
    frac = counts["h"] / (counts["h"] + counts["v"])
    assert abs(frac - 0.5) <= 0.05
