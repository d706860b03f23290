"""Evaluation metrics for world-frame tracks and reconstructions.

Deterministic by construction: reductions use compensated summation
(math.fsum), the median is the lower-middle element of the sorted norms,
and similarity transforms are applied with explicit elementwise
arithmetic, so an independent scalar reimplementation reproduces every
reported number bit for bit.
"""

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateCovariance,
    EmptyDynamicSubset,
    NoOverlap,
    ShapeMismatch,
    ZeroMedian,
)
from .geometry import Pointmap, TrackSet, _freeze

THRESHOLDS = (0.1, 0.3, 0.5, 1.0)
ALIGNMENT_MODES = ("none", "median", "sim3")
DEFAULT_WINDOW = 64


def _point_norms(p: np.ndarray) -> np.ndarray:
    return np.sqrt((p[:, 0] * p[:, 0] + p[:, 1] * p[:, 1]) + p[:, 2] * p[:, 2])


def _pair_errors(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return np.sqrt((d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]) + d[:, 2] * d[:, 2])


@dataclass(frozen=True)
class Sim3:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        R, s, t = self.rotation, self.scale, self.translation
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        ax = s * ((R[0, 0] * x + R[0, 1] * y) + R[0, 2] * z) + t[0]
        ay = s * ((R[1, 0] * x + R[1, 1] * y) + R[1, 2] * z) + t[1]
        az = s * ((R[2, 0] * x + R[2, 1] * y) + R[2, 2] * z) + t[2]
        return np.stack([ax, ay, az], axis=1)


@dataclass(frozen=True)
class MetricReport:
    subset: str
    alignment: str
    window: tuple
    num_pairs: int
    apd: float
    per_threshold: tuple
    epe: float
    scale: float | None
    fingerprint: str

    def to_dict(self) -> dict:
        return {
            "subset": self.subset,
            "alignment": self.alignment,
            "window": list(self.window),
            "num_pairs": self.num_pairs,
            "apd": self.apd,
            "per_threshold": list(self.per_threshold),
            "epe": self.epe,
            "scale": self.scale,
            "fingerprint": self.fingerprint,
        }


def median_scale_align(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, float]:
    """Rescale predictions by the ratio of median point norms.

    The median of n values is the sorted element at index (n-1)//2, the
    lower middle for even n, so no averaging enters the arithmetic.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ShapeMismatch(f"point arrays must match as (N, 3), got {pred.shape}")
    n = pred.shape[0]
    if n == 0:
        raise NoOverlap("no points to align")
    k = (n - 1) // 2
    pm = float(np.sort(_point_norms(pred))[k])
    gm = float(np.sort(_point_norms(gt))[k])
    if pm < 1e-12:
        raise ZeroMedian("prediction median norm is zero")
    if gm < 1e-12:
        raise ZeroMedian("ground-truth median norm is zero")
    scale = gm / pm
    return pred * scale, scale


def umeyama_sim3_align(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, Sim3]:
    """Least-squares similarity transform from predictions onto ground truth."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ShapeMismatch(f"point arrays must match as (N, 3), got {pred.shape}")
    n = pred.shape[0]
    if n < 3:
        raise DegenerateCovariance(f"need at least 3 points, got {n}")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    X = pred - mu_p
    Y = gt - mu_g
    var_p = float(np.mean(np.sum(X * X, axis=1)))
    if var_p < 1e-12:
        raise DegenerateCovariance("prediction cloud has no spread")
    cov = (Y.T @ X) / n
    U, D, Vt = np.linalg.svd(cov)
    s = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        s[2] = -1.0
    R = U @ np.diag(s) @ Vt
    scale = float((D * s).sum() / var_p)
    t = mu_g - scale * (R @ mu_p)
    sim = Sim3(scale, _freeze(R), _freeze(t))
    return sim.apply(pred), sim


def apd_3d(
    pred: np.ndarray, gt: np.ndarray, thresholds: tuple = THRESHOLDS
) -> tuple[float, tuple]:
    """Average percentage of points within distance thresholds.

    Each threshold contributes the fraction of pairs with error strictly
    below it; the score is 100 times the mean fraction.
    """
    errs = _pair_errors(np.asarray(pred, float), np.asarray(gt, float))
    n = errs.shape[0]
    if n == 0:
        raise NoOverlap("no pairs to score")
    fracs = tuple(int((errs < t).sum()) / n for t in thresholds)
    return 100.0 * math.fsum(fracs) / len(thresholds), fracs


def epe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean euclidean error over pairs."""
    errs = _pair_errors(np.asarray(pred, float), np.asarray(gt, float))
    if errs.shape[0] == 0:
        raise NoOverlap("no pairs to score")
    return math.fsum(errs) / errs.shape[0]


def _align(pred: np.ndarray, gt: np.ndarray, mode: str):
    if mode == "none":
        return pred, None
    if mode == "median":
        aligned, scale = median_scale_align(pred, gt)
        return aligned, scale
    if mode == "sim3":
        aligned, sim = umeyama_sim3_align(pred, gt)
        return aligned, sim.scale
    raise ValueError(f"alignment must be one of {ALIGNMENT_MODES}, got {mode!r}")


def _report(subset, alignment, window, aligned, gt, thresholds, scale):
    apd, fracs = apd_3d(aligned, gt, thresholds)
    err_mean = epe(aligned, gt)
    fp = f"{zlib.crc32(np.ascontiguousarray(aligned - gt).tobytes()):08x}"
    return MetricReport(
        subset=subset,
        alignment=alignment,
        window=window,
        num_pairs=aligned.shape[0],
        apd=apd,
        per_threshold=fracs,
        epe=err_mean,
        scale=scale,
        fingerprint=fp,
    )


def eval_tracking(
    pred: TrackSet,
    gt: TrackSet,
    alignment: str = "median",
    thresholds: tuple = THRESHOLDS,
    window: int = DEFAULT_WINDOW,
    subsets: tuple | None = None,
) -> dict:
    """Score predicted 3D tracks against ground truth.

    Pairs are the ground-truth-visible entries within the first ``window``
    frames. One alignment is fitted on all pairs and applied everywhere,
    then each requested subset ("all", "dynamic") is scored on its own
    pairs. With subsets=None the dynamic report appears whenever dynamic
    tracks exist.
    """
    if pred.positions.shape != gt.positions.shape:
        raise ShapeMismatch(
            f"track shapes differ: {pred.positions.shape} vs {gt.positions.shape}"
        )
    if pred.positions.shape[2] != 3:
        raise ShapeMismatch("tracking metrics need 3D tracks")
    if window < 1:
        raise ValueError("window must be positive")
    end = min(gt.num_frames, window)
    vis = gt.visibility[:, :end]
    if not vis.any():
        raise NoOverlap("no visible pairs in the evaluation window")
    idx_n, _ = np.nonzero(vis)
    p = pred.positions[:, :end][vis]
    g = gt.positions[:, :end][vis]
    aligned, scale = _align(p, g, alignment)

    has_dynamic = gt.dynamic is not None and bool(gt.dynamic.any())
    if subsets is None:
        subsets = ("all", "dynamic") if has_dynamic else ("all",)
    win = (0, end)
    out = {}
    for name in subsets:
        if name == "all":
            sel = slice(None)
        elif name == "dynamic":
            if gt.dynamic is None or not has_dynamic:
                raise EmptyDynamicSubset("no dynamic tracks to score")
            sel = gt.dynamic[idx_n]
            if not sel.any():
                raise EmptyDynamicSubset("no dynamic pairs in the window")
        else:
            raise ValueError(f"unknown subset {name!r}")
        out[name] = _report(
            name, alignment, win, aligned[sel], g[sel], thresholds, scale
        )
    return out


def eval_recon(
    pred_pms: list,
    gt_pms: list,
    alignment: str = "median",
    thresholds: tuple = THRESHOLDS,
    window: int = DEFAULT_WINDOW,
    depth_maps: np.ndarray | None = None,
    depth_range: tuple = (0.1, 5.0),
) -> MetricReport:
    """Score reconstruction pointmaps pooled over the evaluation window.

    Pixels must be valid on both sides; when ground-truth depth maps are
    given, pixels whose depth falls outside ``depth_range`` are excluded.
    """
    if len(pred_pms) != len(gt_pms):
        raise ShapeMismatch("frame counts differ")
    if window < 1:
        raise ValueError("window must be positive")
    end = min(len(gt_pms), window)
    ps, gs = [], []
    for j in range(end):
        pm_p, pm_g = pred_pms[j], gt_pms[j]
        if pm_p.points.shape != pm_g.points.shape:
            raise ShapeMismatch(f"grid mismatch at frame {j}")
        m = pm_p.valid & pm_g.valid
        if depth_maps is not None:
            d = depth_maps[j]
            m = m & (d >= depth_range[0]) & (d <= depth_range[1])
        if m.any():
            ps.append(pm_p.points[m])
            gs.append(pm_g.points[m])
    if not ps:
        raise NoOverlap("no comparable pixels in the evaluation window")
    p = np.concatenate(ps, axis=0)
    g = np.concatenate(gs, axis=0)
    aligned, scale = _align(p, g, alignment)
    return _report("all", alignment, (0, end), aligned, g, thresholds, scale)


def subsample_queries(num_queries: int, max_queries: int, seed: int = 0) -> np.ndarray:
    """Deterministic sorted subsample of query indices."""
    if max_queries < 1:
        raise ValueError("max_queries must be positive")
    if max_queries >= num_queries:
        return np.arange(num_queries)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(num_queries, size=max_queries, replace=False))
