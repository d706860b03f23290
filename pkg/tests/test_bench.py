"""Metrics: brute-force bitwise equivalence, alignment math, filters."""

import math

import numpy as np
import pytest

from worldtrack.bench import (
    THRESHOLDS,
    MetricReport,
    apd_3d,
    epe,
    eval_recon,
    eval_tracking,
    median_scale_align,
    subsample_queries,
    umeyama_sim3_align,
)
from worldtrack.errors import (
    DegenerateCovariance,
    EmptyDynamicSubset,
    NoOverlap,
    ShapeMismatch,
    ZeroMedian,
)
from worldtrack.geometry import Pointmap, TrackSet, so3_exp


# ---------------------------------------------------------------------------
# scalar reimplementation used to cross-check every reported number


def brute_score(pred_pairs, gt_pairs, alignment, thresholds=THRESHOLDS):
    """Loop-based rescoring; must agree with the library bit for bit.

    The sim3 fit is taken from the library (one fit, shared); median and
    none modes are refit here from scratch.
    """
    n = len(pred_pairs)
    pp = [(float(a), float(b), float(c)) for a, b, c in pred_pairs]
    gg = [(float(a), float(b), float(c)) for a, b, c in gt_pairs]
    if alignment == "none":
        aligned = pp
    elif alignment == "median":
        k = (n - 1) // 2
        pn = sorted(math.sqrt((x * x + y * y) + z * z) for x, y, z in pp)[k]
        gn = sorted(math.sqrt((x * x + y * y) + z * z) for x, y, z in gg)[k]
        scale = gn / pn
        aligned = [(x * scale, y * scale, z * scale) for x, y, z in pp]
    elif alignment == "sim3":
        _, sim = umeyama_sim3_align(np.array(pp), np.array(gg))
        s, R, t = sim.scale, sim.rotation, sim.translation
        aligned = [
            (
                s * ((R[0, 0] * x + R[0, 1] * y) + R[0, 2] * z) + t[0],
                s * ((R[1, 0] * x + R[1, 1] * y) + R[1, 2] * z) + t[1],
                s * ((R[2, 0] * x + R[2, 1] * y) + R[2, 2] * z) + t[2],
            )
            for x, y, z in pp
        ]
    else:
        raise AssertionError(alignment)
    errs = []
    for (ax, ay, az), (gx, gy, gz) in zip(aligned, gg):
        dx, dy, dz = ax - gx, ay - gy, az - gz
        errs.append(math.sqrt((dx * dx + dy * dy) + dz * dz))
    fracs = tuple(sum(1 for e in errs if e < t) / n for t in thresholds)
    apd = 100.0 * math.fsum(fracs) / len(thresholds)
    mean_err = math.fsum(errs) / n
    return apd, fracs, mean_err


def random_tracks(rng, n=40, T=6):
    gt_pos = rng.normal(0, 1, (n, T, 3)) + np.array([0, 0, 3.0])
    pred_pos = gt_pos * rng.uniform(0.5, 2.0) + rng.normal(0, 0.2, (n, T, 3))
    vis = rng.uniform(size=(n, T)) > 0.25
    vis[:, 0] = True
    dyn = rng.uniform(size=n) > 0.6
    return TrackSet(pred_pos, vis, dyn), TrackSet(gt_pos, vis, dyn)


def visible_pairs(pred, gt, window, subset=None):
    end = min(gt.num_frames, window)
    pp, gg = [], []
    for i in range(gt.num_points):
        if subset == "dynamic" and not gt.dynamic[i]:
            continue
        for t in range(end):
            if gt.visibility[i, t]:
                pp.append(pred.positions[i, t])
                gg.append(gt.positions[i, t])
    return pp, gg


@pytest.mark.parametrize("alignment", ["none", "median", "sim3"])
def test_tracking_metrics_match_brute_force(alignment):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pred, gt = random_tracks(rng)
        reports = eval_tracking(pred, gt, alignment=alignment, window=6)
        for subset in reports:
            pp, gg = visible_pairs(pred, gt, 6, None if subset == "all" else subset)
            if alignment == "median":
                # subset scoring reuses the all-pairs fit
                all_p, all_g = visible_pairs(pred, gt, 6)
                _, scale = median_scale_align(np.array(all_p), np.array(all_g))
                scaled = [(x * scale, y * scale, z * scale) for x, y, z in pp]
                apd, fracs, mean_err = brute_score(scaled, gg, "none")
            elif alignment == "sim3":
                all_p, all_g = visible_pairs(pred, gt, 6)
                _, sim = umeyama_sim3_align(np.array(all_p), np.array(all_g))
                moved = [tuple(q) for q in sim.apply(np.array(pp))]
                apd, fracs, mean_err = brute_score(moved, gg, "none")
            else:
                apd, fracs, mean_err = brute_score(pp, gg, "none")
            rep = reports[subset]
            assert rep.apd == apd
            assert rep.per_threshold == fracs
            assert rep.epe == mean_err
            assert rep.num_pairs == len(pp)


def test_all_subset_median_matches_brute_refit():
    # for the full subset the brute scorer can refit the median scale
    # itself and still has to agree exactly
    rng = np.random.default_rng(99)
    pred, gt = random_tracks(rng)
    rep = eval_tracking(pred, gt, alignment="median", window=6)["all"]
    pp, gg = visible_pairs(pred, gt, 6)
    apd, fracs, mean_err = brute_score(pp, gg, "median")
    assert (rep.apd, rep.per_threshold, rep.epe) == (apd, fracs, mean_err)


def test_perfect_prediction_scores_clean():
    rng = np.random.default_rng(0)
    gt_pos = rng.normal(0, 1, (30, 4, 3)) + np.array([0, 0, 3.0])
    vis = np.ones((30, 4), bool)
    ts = TrackSet(gt_pos, vis)
    for alignment in ("none", "median"):
        rep = eval_tracking(ts, ts, alignment=alignment, window=4)["all"]
        assert rep.apd == 100.0
        assert rep.epe == 0.0
        assert rep.per_threshold == (1.0, 1.0, 1.0, 1.0)


def test_apd_thresholds_step_at_point_two():
    rng = np.random.default_rng(1)
    gt = rng.normal(0, 1, (50, 3))
    pred = gt + np.array([0.2, 0.0, 0.0])
    apd, fracs = apd_3d(pred, gt)
    assert fracs == (0.0, 1.0, 1.0, 1.0)
    assert apd == 75.0
    assert abs(epe(pred, gt) - 0.2) < 1e-12


def test_median_is_lower_middle():
    pred = np.array([[1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0], [100.0, 0, 0]])
    aligned, scale = median_scale_align(pred, 2.0 * pred)
    assert scale == 2.0
    np.testing.assert_array_equal(aligned, 2.0 * pred)
    with pytest.raises(ZeroMedian):
        median_scale_align(np.zeros((4, 3)), pred)
    with pytest.raises(ZeroMedian):
        median_scale_align(pred, np.zeros((4, 3)))


def test_median_alignment_scale_invariant():
    rng = np.random.default_rng(2)
    gt = rng.normal(0, 1, (200, 3)) + np.array([0, 0, 4.0])
    pred = gt + rng.normal(0, 0.3, gt.shape)
    base, _ = apd_3d(*(median_scale_align(pred, gt)[0], gt))
    for k in (0.1, 3.0, 10.0):
        scaled, _ = median_scale_align(k * pred, gt)
        val, _ = apd_3d(scaled, gt)
        assert abs(val - base) < 1e-9


def test_umeyama_recovers_similarity():
    rng = np.random.default_rng(3)
    for trial in range(50):
        src = rng.normal(0, 1, (60, 3))
        s = rng.uniform(0.2, 5.0)
        R = so3_exp(rng.normal(0, 1, 3))
        t = rng.normal(0, 2, 3)
        dst = s * (src @ R.T) + t
        aligned, sim = umeyama_sim3_align(src, dst)
        assert np.abs(aligned - dst).max() < 1e-9
        assert abs(sim.scale - s) / s < 1e-9
    with pytest.raises(DegenerateCovariance):
        umeyama_sim3_align(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(DegenerateCovariance):
        umeyama_sim3_align(np.ones((10, 3)), rng.normal(0, 1, (10, 3)))


def test_sim3_metrics_invariant_under_gt_similarity():
    rng = np.random.default_rng(4)
    gt = rng.normal(0, 1, (120, 3)) + np.array([0, 0, 3.0])
    pred = gt + rng.normal(0, 0.25, gt.shape)
    a0, _ = umeyama_sim3_align(pred, gt)
    base, _ = apd_3d(a0, gt)
    for trial in range(5):
        s = rng.uniform(0.3, 3.0)
        R = so3_exp(rng.normal(0, 0.8, 3))
        t = rng.normal(0, 1, 3)
        moved = s * (pred @ R.T) + t
        a1, _ = umeyama_sim3_align(moved, gt)
        val, _ = apd_3d(a1, gt)
        assert abs(val - base) < 1e-9


def test_window_clips_frames():
    rng = np.random.default_rng(5)
    pred, gt = random_tracks(rng, n=10, T=9)
    rep = eval_tracking(pred, gt, alignment="none", window=4)["all"]
    assert rep.window == (0, 4)
    pp, gg = visible_pairs(pred, gt, 4)
    assert rep.num_pairs == len(pp)


def test_invisible_pairs_are_ignored():
    rng = np.random.default_rng(6)
    pred, gt = random_tracks(rng, n=12, T=5)
    poisoned = np.array(pred.positions)
    poisoned[~gt.visibility] = 1e6
    rep_a = eval_tracking(pred, gt, alignment="none", window=5)["all"]
    rep_b = eval_tracking(
        TrackSet(poisoned, pred.visibility, pred.dynamic), gt,
        alignment="none", window=5,
    )["all"]
    assert rep_a.apd == rep_b.apd and rep_a.epe == rep_b.epe


def test_dynamic_subset_errors():
    rng = np.random.default_rng(7)
    gt_pos = rng.normal(0, 1, (8, 3, 3)) + np.array([0, 0, 3.0])
    vis = np.ones((8, 3), bool)
    static = TrackSet(gt_pos, vis, np.zeros(8, bool))
    with pytest.raises(EmptyDynamicSubset):
        eval_tracking(static, static, alignment="none", subsets=("dynamic",))
    nodyn = TrackSet(gt_pos, vis)
    with pytest.raises(EmptyDynamicSubset):
        eval_tracking(nodyn, nodyn, alignment="none", subsets=("all", "dynamic"))
    # auto mode just omits the dynamic report
    assert set(eval_tracking(nodyn, nodyn, alignment="none")) == {"all"}
    with pytest.raises(ValueError):
        eval_tracking(nodyn, nodyn, alignment="none", subsets=("weird",))
    with pytest.raises(ValueError):
        eval_tracking(nodyn, nodyn, alignment="parade")


def test_eval_recon_filters_and_matches_brute():
    rng = np.random.default_rng(8)
    H, W, T = 6, 8, 3
    gt_pts = rng.normal(0, 1, (T, H, W, 3)) + np.array([0, 0, 2.0])
    pred_pts = gt_pts + rng.normal(0, 0.15, gt_pts.shape)
    valid = rng.uniform(size=(T, H, W)) > 0.2
    depth = rng.uniform(0.5, 3.0, (T, H, W))
    depth[0, 0, 0] = 9.0  # outside the range filter
    gt_pms = [Pointmap(gt_pts[j], valid[j], 0, j, j) for j in range(T)]
    pred_pms = [Pointmap(pred_pts[j], valid[j], 0, j, j) for j in range(T)]
    rep = eval_recon(pred_pms, gt_pms, alignment="median", depth_maps=depth)
    pp, gg = [], []
    for j in range(T):
        for r in range(H):
            for c in range(W):
                if valid[j, r, c] and 0.1 <= depth[j, r, c] <= 5.0:
                    pp.append(pred_pts[j, r, c])
                    gg.append(gt_pts[j, r, c])
    apd, fracs, mean_err = brute_score(pp, gg, "median")
    assert rep.apd == apd and rep.per_threshold == fracs and rep.epe == mean_err
    assert rep.num_pairs == len(pp)
    # invalid pixels are excluded no matter their content
    poisoned = [
        pm.with_points(np.where(valid[j, ..., None], pm.points, 0.0))
        for j, pm in enumerate(pred_pms)
    ]
    rep2 = eval_recon(poisoned, gt_pms, alignment="median", depth_maps=depth)
    assert rep2.apd == rep.apd
    with pytest.raises(NoOverlap):
        eval_recon(pred_pms, gt_pms, depth_maps=np.full((T, H, W), 99.0))


def test_fingerprint_distinguishes_runs():
    rng = np.random.default_rng(9)
    pred, gt = random_tracks(rng)
    a = eval_tracking(pred, gt, window=6)["all"]
    b = eval_tracking(pred, gt, window=6)["all"]
    assert a.fingerprint == b.fingerprint
    pred2, _ = random_tracks(np.random.default_rng(10))
    c = eval_tracking(pred2, gt, window=6)["all"]
    assert c.fingerprint != a.fingerprint


def test_subsample_queries_deterministic():
    a = subsample_queries(100, 10, seed=1)
    b = subsample_queries(100, 10, seed=1)
    assert np.array_equal(a, b)
    assert len(set(a.tolist())) == 10
    assert np.all(np.diff(a) > 0)
    full = subsample_queries(5, 10)
    assert np.array_equal(full, np.arange(5))
    with pytest.raises(ValueError):
        subsample_queries(5, 0)


def test_shape_checks():
    with pytest.raises(ShapeMismatch):
        median_scale_align(np.ones((4, 3)), np.ones((5, 3)))
    with pytest.raises(ShapeMismatch):
        umeyama_sim3_align(np.ones((4, 2)), np.ones((4, 2)))
    rng = np.random.default_rng(11)
    p2d = TrackSet(rng.normal(size=(4, 3, 2)), np.ones((4, 3), bool))
    with pytest.raises(ShapeMismatch):
        eval_tracking(p2d, p2d)
