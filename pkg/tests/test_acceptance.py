"""End-to-end acceptance experiments. Each test prints one verdict line.

The long experiments (2, 3, 5) share rollouts through module fixtures and
take a few minutes on one core.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest

import oracles
from semsearch.affinity import ground_truth_matrix, jsd_score, uniform_matrix
from semsearch.bench import Outcome, build_corpus, metrics_row, run_cell
from semsearch.geometry import PlacedObject, ObjectSpec, Scene, ShelfSpec, footprints_collide, in_bounds, observe, visibility_fraction
from semsearch.occupancy import (
    KnownWorld,
    OccupancyDistribution1D,
    combine,
    feasible_cells,
    gaussian_smooth,
    mark_explored,
    project_to_1d,
    spatial_grid,
)
from semsearch.openworld import CropRecord, Heatmap, aggregate, binarize, iou_at_threshold, rect_mask, select_view, view_score
from semsearch.perception import DetectionBelief, OcrSignal, ocr_refine, update_geometry
from semsearch.policy import (
    RolloutConfig,
    _pick,
    candidate_actions,
    dar_scores,
    der_scores,
    occlusion_dar_scores,
    rollout,
)
from semsearch.taxonomy import load_taxonomy

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def pharmacy():
    tax = load_taxonomy("pharmacy")
    return tax, tax.labels(), ground_truth_matrix(tax.categories(), tax.labels())


# --- 1 -----------------------------------------------------------------------


def test_uniform_jsd_matches_reference(pharmacy, report):
    t0 = time.perf_counter()
    tax, labels, truth = pharmacy
    mean, improvement = jsd_score(uniform_matrix(labels), truth)
    elapsed = time.perf_counter() - t0
    brute = oracles.brute_jsd_rows(uniform_matrix(labels).values, truth.values)
    ok = abs(mean - 0.65) <= 0.01 and abs(mean - brute) < 1e-12 and elapsed < 1.0
    report(1, ok, f"uniform mean JSD {mean:.4f} (brute force {brute:.4f}, reference 0.65 +- 0.01), {elapsed:.3f}s")
    assert ok


# --- 2 and 5 -----------------------------------------------------------------


@pytest.fixture(scope="module")
def speedup_runs(pharmacy):
    tax, labels, M = pharmacy
    corpus = build_corpus(tax, "pharmacy", 15, 200, seed=0)
    t0 = time.perf_counter()
    runs = {}
    for name, semantic in (("spatial-only", False), ("sms-oracle", True)):
        cfg = RolloutConfig(use_semantic=semantic, check_soundness=True)
        runs[name] = [rollout(s, M if semantic else None, replace(cfg, seed=i), labels) for i, s in enumerate(corpus.scenes)]
    return runs, time.perf_counter() - t0


def _outcomes(records):
    return [Outcome(i, r.success, r.steps, r.max_actions) for i, r in enumerate(records)]


def test_semantic_speedup(speedup_runs, report):
    runs, elapsed = speedup_runs
    base = metrics_row("spatial-only", "pharmacy", 15, _outcomes(runs["spatial-only"]))
    sem = metrics_row("sms-oracle", "pharmacy", 15, _outcomes(runs["sms-oracle"]))
    ratio = sem.mean_actions / base.mean_actions
    ok = ratio <= 0.85 and sem.successes >= base.successes - 2 and elapsed <= 15 * 60
    report(
        2,
        ok,
        f"mean actions {sem.mean_actions:.3f} vs {base.mean_actions:.3f} spatial-only (ratio {ratio:.3f} <= 0.85), "
        f"successes {sem.successes} vs {base.successes}, {elapsed:.0f}s",
    )
    assert ok


def test_distribution_soundness(speedup_runs, report):
    runs, _ = speedup_runs
    steps = [st for recs in runs.values() for r in recs for st in r.per_step]
    rng = np.random.default_rng(5)
    sample = [steps[i] for i in sorted(rng.choice(len(steps), size=min(500, len(steps)), replace=False))]
    positive = all(st.target_bin_mass > 0 for st in sample)
    normalized = all(abs(s - 1.0) <= 1e-9 for st in sample for s in st.distribution_sums)

    smooth_ok = True
    worst = 0.0
    for k in range(20):
        r = np.random.default_rng(100 + k)
        B = int(r.integers(16, 160))
        m = r.random(B) * (r.random(B) < 0.3)
        m[r.integers(B)] += 1.0
        m /= m.sum()
        sigma = float(r.uniform(0.5, 30))
        got = gaussian_smooth(OccupancyDistribution1D(m), sigma).mass
        ref = oracles.naive_reflect_smooth(m, sigma)
        worst = max(worst, float(np.abs(got - ref).max()))
        smooth_ok &= abs(got.sum() - 1.0) <= 1e-9 and np.allclose(got, ref, rtol=0, atol=1e-9)
    ok = len(sample) == 500 and positive and normalized and smooth_ok
    report(
        5,
        ok,
        f"{len(sample)} sampled steps: target bin mass > 0: {positive}, normalized: {normalized}; "
        f"smoothing vs O(B^2) oracle max err {worst:.1e}",
    )
    assert ok


# --- 3 -----------------------------------------------------------------------


def test_noise_monotonicity(pharmacy, report):
    tax, labels, M = pharmacy
    corpus = build_corpus(tax, "pharmacy", 15, 100, seed=1)
    base = metrics_row("spatial-only", "pharmacy", 15, run_cell(corpus, None, RolloutConfig(), labels))
    rows = []
    for p in (0.0, 0.1, 0.5, 0.9):
        rows.append(metrics_row(f"noise={p}", "pharmacy", 15, run_cell(corpus, M, RolloutConfig(use_semantic=True, noise_p=p), labels)))
    pairs_ok = all(b.mean_actions >= a.mean_actions - math.hypot(a.stderr, b.stderr) for a, b in zip(rows, rows[1:]))
    cap_ok = rows[-1].mean_actions <= base.mean_actions + base.stderr
    ok = pairs_ok and cap_ok
    means = ", ".join(f"{r.mean_actions:.2f}+-{r.stderr:.2f}" for r in rows)
    report(3, ok, f"means for noise 0/0.1/0.5/0.9: {means}; spatial-only {base.mean_actions:.2f}+-{base.stderr:.2f}")
    assert ok


# --- 4 -----------------------------------------------------------------------


def _small_scene(rng) -> Scene | None:
    shelf = ShelfSpec()
    n_occ = int(rng.integers(1, 3))
    tw, td, th = rng.uniform(0.05, 0.1), rng.uniform(0.05, 0.1), rng.uniform(0.05, 0.12)
    tx, ty = rng.uniform(0.15, 0.65), rng.uniform(0.22, 0.35 - td / 2)
    target = PlacedObject(ObjectSpec("target", (tw, td, th)), (tx, ty))
    objs = [target]
    for k in range(n_occ):
        w, d, h = rng.uniform(0.08, 0.2), rng.uniform(0.05, 0.1), rng.uniform(0.15, 0.25)
        x = tx + rng.uniform(-0.05, 0.05)
        y = rng.uniform(d / 2, 0.18)
        o = PlacedObject(ObjectSpec(f"occ{k}", (w, d, h)), (float(np.clip(x, w / 2, 0.8 - w / 2)), y))
        if any(footprints_collide(o, p) for p in objs):
            return None
        objs.append(o)
    scene = Scene(shelf, tuple(objs), 0)
    if visibility_fraction(scene, 0) >= 0.01 or not (observe(scene).detected - {"target"}):
        return None
    return scene


def _oracle_pick(cands, scores, secondary=None):
    keyed = []
    best = min(scores)
    for i, c in enumerate(cands):
        if scores[i] <= best + 1e-9:
            keyed.append(i)
    if secondary is not None:
        b2 = min(secondary[i] for i in keyed)
        keyed = [i for i in keyed if secondary[i] <= b2 + 1e-9]
    keyed.sort(key=lambda i: (math.hypot(*cands[i].delta), cands[i].object_index, cands[i].target_xy[0], cands[i].target_xy[1]))
    return cands[keyed[0]]


def _oracle_scores(scene, world, cands, dims, thr, dist, semantic, nx, ny, bins):
    shelf = scene.shelf
    feas_now = ~world.explored
    sil, occ, der = [], [], []
    for c in cands:
        known = {i: g for i, g in world.geometry.items()}
        known[c.object_index] = (c.target_xy, scene.objects[c.object_index].spec.dims)
        # silhouette union
        cover = set()
        for pos, dd in known.values():
            fp = (pos[0] - dd[0] / 2, pos[0] + dd[0] / 2, pos[1] - dd[1] / 2, pos[1] + dd[1] / 2)
            cover |= oracles.silhouette_bins_bruteforce(fp, shelf.width, shelf.camera_offset, bins)
        sil.append(sum(dist[b] for b in cover))
        post = oracles.feasible_bruteforce(nx, ny, shelf.width, shelf.depth, shelf.height, shelf.camera_offset, dims, list(known.values()), thr, 16, world.explored)
        counts_now = oracles.project_bruteforce(feas_now.astype(float), shelf.width, shelf.depth, shelf.camera_offset, bins)
        counts_post = oracles.project_bruteforce(post.astype(float), shelf.width, shelf.depth, shelf.camera_offset, bins)
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(counts_now > 0, counts_post / np.where(counts_now > 0, counts_now, 1), 0.0)
        occ.append(float((dist * frac).sum()))
        if counts_post.sum() == 0:
            der.append(0.0)
        else:
            sp = counts_post / counts_post.sum()
            prod = semantic * sp
            comb = prod / prod.sum() if prod.sum() >= 1e-12 else sp
            nz = comb[comb > 0]
            der.append(float(-(nz * np.log2(nz)).sum()))
    return sil, occ, der


def test_greedy_oracle_equivalence(report):
    nx, ny, bins = 40, 14, 64
    thr = 0.05
    rng = np.random.default_rng(44)
    matched = total = 0
    mismatches = []
    scene_no = 0
    while total < 50:
        scene = _small_scene(rng)
        if scene is None:
            continue
        scene_no += 1
        world = KnownWorld(scene.shelf, nx, ny)
        rep = observe(scene)
        update_geometry(world, rep, scene)
        dims = scene.target.spec.dims
        feasible = feasible_cells(world, dims, thr)
        mark_explored(world, feasible)
        cands = candidate_actions(world, scene, 4, rep.detected)
        semantic = gaussian_smooth(OccupancyDistribution1D(rng.random(bins) + 0.05), 3.0)
        spatial = project_to_1d(spatial_grid(world, dims, feasible=feasible), scene.shelf, bins)
        dist = combine(semantic, spatial)

        got_sil = _pick(cands, dar_scores(cands, dist, world, scene))
        got_occ = _pick(cands, occlusion_dar_scores(cands, dist, world, scene, dims, feasible, thr), None)
        got_der = _pick(cands, der_scores(cands, semantic, world, scene, dims, thr, bins, feasible=feasible))

        feas_ref = oracles.feasible_bruteforce(nx, ny, scene.shelf.width, scene.shelf.depth, scene.shelf.height, scene.shelf.camera_offset, dims, list(world.geometry.values()), thr, 16)
        sil, occ, der = _oracle_scores(scene, world, cands, dims, thr, dist.mass, semantic.mass, nx, ny, bins)
        want = (_oracle_pick(cands, sil), _oracle_pick(cands, occ), _oracle_pick(cands, der))
        same = (got_sil, got_occ, got_der) == want and np.array_equal(feas_ref, feasible)
        total += 1
        matched += same
        if not same:
            mismatches.append(scene_no)
    ok = matched == total
    report(4, ok, f"DAR (silhouette and occlusion) and DER match the brute-force oracle on {matched}/{total} scenes")
    assert ok, mismatches


# --- 6 -----------------------------------------------------------------------


def test_scene_generation_coherence(pharmacy, report):
    tax, labels, _ = pharmacy
    a = build_corpus(tax, "pharmacy", 12, 100, seed=0)
    b = build_corpus(tax, "pharmacy", 12, 100, seed=0)
    group = {l: g for g, members in enumerate(tax.categories()) for l in members}
    collisions = out_of_bounds = 0
    intra, inter = [], []
    for s in a.scenes:
        for o in s.objects:
            out_of_bounds += not in_bounds(o, s.shelf)
        for p, q in itertools.combinations(s.objects, 2):
            collisions += footprints_collide(p, q)
            d = math.dist(p.position, q.position)
            (intra if group[p.name] == group[q.name] else inter).append(d)
    ok = collisions == 0 and out_of_bounds == 0 and a.checksum() == b.checksum() and np.mean(intra) < np.mean(inter)
    report(
        6,
        ok,
        f"collisions {collisions}, out of bounds {out_of_bounds}, checksum stable {a.checksum() == b.checksum()}, "
        f"intra {np.mean(intra):.3f} m < inter {np.mean(inter):.3f} m",
    )
    assert ok


# --- 7 -----------------------------------------------------------------------


def test_ocr_refinement_lift(report):
    rng = np.random.default_rng(0)
    K, trials = 27, 10_000
    names = tuple(str(i) for i in range(K))
    base_hits = refined_hits = ocr_hits = 0
    for _ in range(trials):
        true = int(rng.integers(K))
        pred = true if rng.random() < 0.4 else int((true + 1 + rng.integers(K - 1)) % K)
        z = rng.normal(0, 0.5, K)
        z[true] += 1.0
        z[pred] = z.max() + 1.0
        p = np.exp(z - z.max())
        p /= p.sum()
        pick = true if rng.random() < 0.8 else int((true + 1 + rng.integers(K - 1)) % K)
        s = rng.random(K)
        s[pick] = s.max() + 1.0
        refined = ocr_refine(DetectionBelief(names, p), OcrSignal(s))
        base_hits += int(np.argmax(p)) == true
        ocr_hits += pick == true
        refined_hits += int(np.argmax(refined.label_probs)) == true
    base, ocr, refined = base_hits / trials, ocr_hits / trials, refined_hits / trials

    drift = 0.0
    for _ in range(200):
        p = rng.dirichlet(np.ones(K))
        out = ocr_refine(DetectionBelief(names, p), OcrSignal(np.full(K, rng.normal())))
        drift = max(drift, float(np.abs(out.label_probs - p).max()))
    ok = abs(base - 0.40) < 0.02 and abs(ocr - 0.80) < 0.02 and refined >= 0.60 and drift <= 1e-12
    report(7, ok, f"top-1 {base:.3f} detector, {ocr:.3f} OCR -> {refined:.3f} fused; uniform OCR drift {drift:.1e}")
    assert ok


# --- 8 -----------------------------------------------------------------------


def _random_crops(rng, W, H, n):
    crops = []
    for _ in range(n):
        if rng.random() < 0.5:
            x0, y0 = int(rng.integers(0, W - 1)), int(rng.integers(0, H - 1))
            x1, y1 = int(rng.integers(x0 + 1, W + 1)), int(rng.integers(y0 + 1, H + 1))
            m = rect_mask((x0, y0, x1, y1), W, H)
        else:
            m = rng.random((H, W)) < rng.uniform(0.05, 0.5)
            m[int(rng.integers(H)), int(rng.integers(W))] = True
        crops.append(CropRecord(m, "crop", float(rng.uniform(0, 2)), float(rng.uniform(0, 1))))
    return crops


def test_openworld_exactness(report):
    rng = np.random.default_rng(8)
    agg_ok = iou_ok = view_ok = scale_ok = True
    for _ in range(20):
        W, H = int(rng.integers(5, 24)), int(rng.integers(5, 24))
        crops = _random_crops(rng, W, H, int(rng.integers(1, 7)))
        heat = aggregate(crops, W, H)
        ref = oracles.aggregate_bruteforce([c.mask for c in crops], [c.weighted for c in crops], W, H)
        agg_ok &= np.array_equal(heat.values, ref)

        truth = rng.random((H, W)) < 0.3
        pred = binarize(heat)
        P = {(r, c) for r in range(H) for c in range(W) if pred[r, c]}
        T = {(r, c) for r in range(H) for c in range(W) if truth[r, c]}
        want = len(P & T) / len(P | T) if P | T else 0.0
        iou_ok &= iou_at_threshold(heat, truth) == want

        views = [aggregate(_random_crops(rng, W, H, 3), W, H) for _ in range(int(rng.integers(1, 5)))]
        scores = [oracles.nearest_rank_sorting(list(v.values[v.covered].ravel())) for v in views]
        want_view = scores.index(max(scores))
        view_ok &= select_view(views) == want_view and all(view_score(v) == s for v, s in zip(views, scores))

        for c in (0.1, 10.0):
            scaled = [CropRecord(k.mask, k.label, k.relevance * c, k.affinity) for k in crops]
            sheat = aggregate(scaled, W, H)
            scale_ok &= iou_at_threshold(sheat, truth) == iou_at_threshold(heat, truth)
            sviews = [Heatmap(v.values * c, v.covered) for v in views]
            scale_ok &= select_view(sviews) == select_view(views)
    ok = agg_ok and iou_ok and view_ok and scale_ok
    report(8, ok, f"aggregate exact {agg_ok}, IoU exact {iou_ok}, view selection exact {view_ok}, scale invariance {scale_ok}")
    assert ok
