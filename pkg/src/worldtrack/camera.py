"""Camera recovery from per-frame pointmaps.

The pipeline per frame is: robust focal estimation from the anchor
pointmap (shared across the video), RANSAC PnP with a 6-point DLT minimal
solver, a non-differentiable Gauss-Newton polish on the consensus set, and
one final damped Gauss-Newton step whose increment stays differentiable
with respect to the 3D points. ``pose_gradient_wrt_points`` backpropagates
an upstream pose gradient through that last increment.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DegenerateGeometry,
    InsufficientValidPoints,
    NoConsensus,
    SingularNormalEquations,
    TooFewCorrespondences,
    WorldTrackError,
)
from .geometry import (
    DEPTH_EPS,
    Intrinsics,
    PixelGrid,
    Pointmap,
    PoseSE3,
    _freeze,
    so3_exp,
    so3_exp_jac,
)

log = logging.getLogger(__name__)

WEISZFELD_FLOOR = 1e-8
MIN_FOCAL_PIXELS = 10


@dataclass(frozen=True)
class Correspondences2D3D:
    """Paired pixels (N, 2) and world points (N, 3) with optional weights."""

    pixels: np.ndarray
    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        pix = np.array(self.pixels, dtype=np.float64)
        pts = np.array(self.points, dtype=np.float64)
        if pix.ndim != 2 or pix.shape[1] != 2 or pts.shape != (pix.shape[0], 3):
            raise ValueError(f"bad correspondence shapes {pix.shape}, {pts.shape}")
        object.__setattr__(self, "pixels", _freeze(pix))
        object.__setattr__(self, "points", _freeze(pts))
        if self.weights is not None:
            w = np.array(self.weights, dtype=np.float64)
            if w.shape != (pix.shape[0],) or (w < 0).any():
                raise ValueError("weights must be non-negative, one per pair")
            object.__setattr__(self, "weights", _freeze(w))

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def effective_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.ones(len(self))
        return self.weights


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 256
    inlier_threshold: float = 2.0
    min_sample: int = 6
    seed: int = 0
    confidence: float = 0.999

    def __post_init__(self):
        if self.min_sample < 6:
            raise ValueError("min_sample must be at least 6 for the DLT solver")
        if self.max_iterations < 1 or self.inlier_threshold <= 0:
            raise ValueError("max_iterations and inlier_threshold must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")


@dataclass(frozen=True)
class GNConfig:
    num_steps: int = 1
    damping: float = 1e-9

    def __post_init__(self):
        if self.num_steps < 0 or self.damping < 0:
            raise ValueError("num_steps and damping must be non-negative")


@dataclass(frozen=True)
class PoseEstimate:
    """Solver output for one frame.

    ``increment`` is the last Gauss-Newton twist (rotation part first) taken
    from ``base_pose``; ``pose`` equals the exp of the increment applied to
    ``base_pose`` on the left. ``inliers`` indexes the correspondences the
    estimate was solved from.
    """

    pose: PoseSE3
    inliers: np.ndarray
    rms_reprojection_error: float
    increment: np.ndarray
    base_pose: PoseSE3
    gn_damping: float = 1e-9

    def __post_init__(self):
        inl = np.array(self.inliers, dtype=bool)
        inc = np.array(self.increment, dtype=np.float64)
        if inc.shape != (6,):
            raise ValueError(f"increment must be a 6-twist, got {inc.shape}")
        object.__setattr__(self, "inliers", _freeze(inl))
        object.__setattr__(self, "increment", _freeze(inc))


# ---------------------------------------------------------------------------
# focal estimation


def estimate_focal_weiszfeld(
    pm: Pointmap, grid: PixelGrid, iterations: int = 10
) -> Intrinsics:
    """Recover a shared focal length from an anchor self-view pointmap.

    Minimizes the robust objective sum_n ||u_n - f * q_n|| over f, where
    u_n is the pixel offset from the image center and q_n = (x/z, y/z) of
    the stored camera-frame point, via iteratively reweighted least squares
    started from the closed-form L2 solution. The principal point is fixed
    at the image center.
    """
    pm.require_tracking_branch()
    if pm.time != pm.content_frame:
        raise DegenerateGeometry(
            "focal estimation needs the first-frame self-view pointmap"
        )
    if (pm.height, pm.width) != (grid.height, grid.width):
        raise ValueError("pointmap and grid sizes differ")
    mask = pm.valid & (pm.points[..., 2] > DEPTH_EPS)
    if mask.sum() < MIN_FOCAL_PIXELS:
        raise InsufficientValidPoints(f"{int(mask.sum())} usable pixels")
    cx, cy = grid.width / 2.0, grid.height / 2.0
    u = grid.coords[mask] - np.array([cx, cy])
    pts = pm.points[mask]
    q = pts[:, :2] / pts[:, 2:3]
    qq = np.einsum("ni,ni->n", q, q)
    uq = np.einsum("ni,ni->n", u, q)
    denom = qq.sum()
    if denom < 1e-12:
        raise DegenerateGeometry("all rays are axial; focal unobservable")
    f = uq.sum() / denom
    for _ in range(iterations):
        res = np.linalg.norm(u - f * q, axis=1)
        w = 1.0 / np.maximum(res, WEISZFELD_FLOOR)
        f = (w * uq).sum() / (w * qq).sum()
    if not np.isfinite(f) or f <= 0:
        raise DegenerateGeometry(f"focal estimate unusable: {f}")
    return Intrinsics(float(f), cx, cy)


# ---------------------------------------------------------------------------
# PnP

def _reproj_errors(
    rotation: np.ndarray, translation: np.ndarray, K: Intrinsics, corr: Correspondences2D3D
) -> np.ndarray:
    """Per-pair reprojection distance; +inf where depth is non-positive."""
    cam = corr.points @ rotation.T + translation
    z = cam[:, 2]
    ok = z > DEPTH_EPS
    zs = np.where(ok, z, 1.0)
    du = K.focal * cam[:, 0] / zs + K.cx - corr.pixels[:, 0]
    dv = K.focal * cam[:, 1] / zs + K.cy - corr.pixels[:, 1]
    err = np.sqrt(du * du + dv * dv)
    err[~ok] = np.inf
    return err


def _dlt_pose(points: np.ndarray, norm_pix: np.ndarray):
    """Minimal DLT solver on intrinsics-normalized pixels.

    Returns (rotation, translation) or None when the configuration is
    numerically degenerate (e.g. a coplanar sample).
    """
    centroid = points.mean(axis=0)
    spread = np.linalg.norm(points - centroid, axis=1).mean()
    if spread < 1e-9:
        return None
    s = np.sqrt(3.0) / spread
    Xn = (points - centroid) * s
    n = points.shape[0]
    A = np.zeros((2 * n, 12))
    A[0::2, 0:3] = Xn
    A[0::2, 3] = 1.0
    A[0::2, 8:11] = -norm_pix[:, 0:1] * Xn
    A[0::2, 11] = -norm_pix[:, 0]
    A[1::2, 4:7] = Xn
    A[1::2, 7] = 1.0
    A[1::2, 8:11] = -norm_pix[:, 1:2] * Xn
    A[1::2, 11] = -norm_pix[:, 1]
    try:
        # reduced SVD: only the right singular vectors are needed, and the
        # full U is quadratic in the consensus size during the polish re-fit
        _, sv, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError:
        return None
    # near-rank-deficient systems have no unique solution worth decoding
    if sv[-2] < 1e-9 * max(sv[0], 1.0):
        return None
    M = Vt[-1].reshape(3, 4)
    # undo the 3D normalization: M acts on s*(X - centroid)
    T = np.eye(4)
    T[:3, :3] *= s
    T[:3, 3] = -s * centroid
    M = M @ T
    det = np.linalg.det(M[:, :3])
    if abs(det) < 1e-12:
        return None
    if det < 0:
        M = -M
    U, sing, Vt3 = np.linalg.svd(M[:, :3])
    lam = sing.mean()
    if lam < 1e-12:
        return None
    R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt3)]) @ Vt3
    t = M[:, 3] / lam
    if not (np.isfinite(R).all() and np.isfinite(t).all()):
        return None
    return R, t


def solve_pnp_ransac(
    corr: Correspondences2D3D, K: Intrinsics, cfg: RansacConfig = RansacConfig()
) -> PoseEstimate:
    """Robust world-to-camera pose from 2D-3D correspondences.

    Seeded 6-point DLT hypotheses are scored by reprojection distance; the
    largest consensus set wins and is polished by (non-differentiable)
    Gauss-Newton. Iterations stop early once the usual confidence bound is
    met, but never before a fixed floor so that near-degenerate scenes still
    get a fair number of draws.
    """
    n = len(corr)
    if n < cfg.min_sample:
        raise TooFewCorrespondences(f"{n} < minimal sample {cfg.min_sample}")
    rng = np.random.default_rng(cfg.seed)
    norm_pix = (corr.pixels - np.array([K.cx, K.cy])) / K.focal
    best_mask = None
    best_pose = None
    best_count = 0
    min_iters = min(32, cfg.max_iterations)
    needed = cfg.max_iterations
    for it in range(cfg.max_iterations):
        if it >= min_iters and it >= needed:
            break
        idx = rng.choice(n, size=cfg.min_sample, replace=False)
        sol = _dlt_pose(corr.points[idx], norm_pix[idx])
        if sol is None:
            continue
        err = _reproj_errors(sol[0], sol[1], K, corr)
        mask = err < cfg.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            best_pose = sol
            ratio = count / n
            hit = ratio**cfg.min_sample
            if hit >= 1.0:
                needed = 0
            elif hit > 0:
                needed = int(np.ceil(np.log(1.0 - cfg.confidence) / np.log(1.0 - hit)))
    if best_mask is None or best_count < cfg.min_sample:
        raise NoConsensus(f"best consensus {best_count} of {n}")
    pose = _polish(best_mask, corr, K, seed_pose=PoseSE3(*best_pose))
    err = _reproj_errors(pose.rotation, pose.translation, K, corr)
    inliers = err < cfg.inlier_threshold
    if int(inliers.sum()) < cfg.min_sample:
        inliers = best_mask
    rms = float(np.sqrt(np.mean(err[inliers] ** 2)))
    return PoseEstimate(
        pose=pose,
        inliers=inliers,
        rms_reprojection_error=rms,
        increment=np.zeros(6),
        base_pose=pose,
    )


def _polish(
    mask: np.ndarray,
    corr: Correspondences2D3D,
    K: Intrinsics,
    seed_pose: PoseSE3 | None = None,
) -> PoseSE3:
    sub = Correspondences2D3D(
        corr.pixels[mask],
        corr.points[mask],
        None if corr.weights is None else corr.weights[mask],
    )
    # seed the polish from a full-consensus DLT fit when it is well posed,
    # otherwise fall back to the winning minimal-sample pose
    norm_pix = (sub.pixels - np.array([K.cx, K.cy])) / K.focal
    sol = _dlt_pose(sub.points, norm_pix)
    if sol is not None:
        pose = PoseSE3(sol[0], sol[1])
    elif seed_pose is not None:
        pose = seed_pose
    else:
        raise DegenerateGeometry("consensus set unusable for re-fit")
    for _ in range(10):
        delta, _ = _gn_terms(pose, sub, K, damping=1e-9)[:2]
        pose = _apply_increment(delta, pose)
        if np.linalg.norm(delta) < 1e-14:
            break
    return pose


# ---------------------------------------------------------------------------
# Gauss-Newton refinement and its point gradient


def _apply_increment(delta: np.ndarray, base: PoseSE3) -> PoseSE3:
    """Left-multiplicative update of the pose by a 6-twist."""
    E = so3_exp(delta[:3])
    return PoseSE3(E @ base.rotation, E @ base.translation + delta[3:])


def _projection_terms(pose: PoseSE3, corr: Correspondences2D3D, K: Intrinsics):
    """Camera points, residuals and per-point Jacobian blocks at a pose.

    Pairs with non-positive depth get zero weight so they drop out of the
    normal equations without disturbing array shapes.
    """
    Y = corr.points @ pose.rotation.T + pose.translation
    z = Y[:, 2]
    usable = z > DEPTH_EPS
    if not usable.any():
        raise DegenerateGeometry("all correspondences behind the camera")
    w = corr.effective_weights() * usable
    zs = np.where(usable, z, 1.0)
    f = K.focal
    m = Y.shape[0]
    A = np.zeros((m, 2, 3))
    A[:, 0, 0] = f / zs
    A[:, 1, 1] = f / zs
    A[:, 0, 2] = -f * Y[:, 0] / zs**2
    A[:, 1, 2] = -f * Y[:, 1] / zs**2
    u = np.stack([f * Y[:, 0] / zs + K.cx, f * Y[:, 1] / zs + K.cy], axis=1)
    r = corr.pixels - u
    B = np.zeros((m, 3, 6))
    B[:, 0, 1] = Y[:, 2]
    B[:, 0, 2] = -Y[:, 1]
    B[:, 1, 0] = -Y[:, 2]
    B[:, 1, 2] = Y[:, 0]
    B[:, 2, 0] = Y[:, 1]
    B[:, 2, 1] = -Y[:, 0]
    B[:, :, 3:] = np.eye(3)
    J = -np.einsum("nij,njk->nik", A, B)
    return Y, zs, w, A, B, J, r


def _gn_terms(pose: PoseSE3, corr: Correspondences2D3D, K: Intrinsics, damping: float):
    """One damped Gauss-Newton increment and its normal-equation pieces."""
    Y, zs, w, A, B, J, r = _projection_terms(pose, corr, K)
    H0 = np.einsum("n,nij,nik->jk", w, J, J)
    eps = damping * np.trace(H0) / 6.0
    H = H0 + eps * np.eye(6)
    g = np.einsum("n,nij,ni->j", w, J, r)
    try:
        np.linalg.cholesky(H)
        delta = -np.linalg.solve(H, g)
    except np.linalg.LinAlgError as exc:
        raise SingularNormalEquations(str(exc)) from exc
    return delta, H, (Y, zs, w, A, B, J, r)


def gauss_newton_refine(
    detached: PoseEstimate,
    corr: Correspondences2D3D,
    K: Intrinsics,
    cfg: GNConfig = GNConfig(),
) -> PoseEstimate:
    """Refine a detached pose by damped Gauss-Newton steps on the inliers.

    The returned estimate records the final step's base pose and twist
    increment; that last step is the differentiable part of the solve.
    """
    mask = detached.inliers
    if mask.shape[0] != len(corr):
        raise ValueError("inlier mask does not cover the correspondences")
    if int(mask.sum()) < 3:
        raise TooFewCorrespondences(f"{int(mask.sum())} inliers")
    sub = Correspondences2D3D(
        corr.pixels[mask],
        corr.points[mask],
        None if corr.weights is None else corr.weights[mask],
    )
    pose = detached.pose
    base = pose
    delta = np.zeros(6)
    for _ in range(cfg.num_steps):
        base = pose
        delta, _, _ = _gn_terms(base, sub, K, cfg.damping)
        pose = _apply_increment(delta, base)
    err = _reproj_errors(pose.rotation, pose.translation, K, corr)
    rms = float(np.sqrt(np.mean(err[mask] ** 2)))
    return PoseEstimate(
        pose=pose,
        inliers=mask,
        rms_reprojection_error=rms,
        increment=delta,
        base_pose=base,
        gn_damping=cfg.damping,
    )


def pose_gradient_wrt_points(
    detached: PoseEstimate,
    corr: Correspondences2D3D,
    K: Intrinsics,
    upstream: tuple[np.ndarray, np.ndarray],
) -> np.ndarray:
    """Backpropagate a pose gradient onto the 3D correspondence points.

    Args:
        detached: estimate from ``gauss_newton_refine``; its base pose is
            treated as a constant, only the final increment is live.
        corr: the same correspondences the estimate was refined on.
        K: intrinsics.
        upstream: (dL/dR, dL/dT) of a scalar loss with respect to the
            refined pose entries, shapes (3, 3) and (3,).

    Returns:
        (N, 3) array dL/dX; rows outside the inlier set (or with
        non-positive depth at the base pose) are zero.
    """
    grad_R = np.asarray(upstream[0], dtype=np.float64)
    grad_T = np.asarray(upstream[1], dtype=np.float64)
    if grad_R.shape != (3, 3) or grad_T.shape != (3,):
        raise ValueError("upstream must be (3,3) rotation and (3,) translation grads")
    mask = detached.inliers
    sub = Correspondences2D3D(
        corr.pixels[mask],
        corr.points[mask],
        None if corr.weights is None else corr.weights[mask],
    )
    base = detached.base_pose
    damping = detached.gn_damping
    delta, H, (Y, zs, w, A, B, J, r) = _gn_terms(base, sub, K, damping)

    # pose = exp(delta) o base: pull the pose gradient back to the twist
    omega = delta[:3]
    G_E = grad_R @ base.rotation.T + np.outer(grad_T, base.translation)
    dE = so3_exp_jac(omega)
    grad_delta = np.empty(6)
    for i in range(3):
        grad_delta[i] = np.sum(G_E * dE[i])
    grad_delta[3:] = grad_T

    # delta = -H^{-1} g
    q = -np.linalg.solve(H, grad_delta)
    grad_g = q
    grad_H = np.outer(q, delta)
    grad_H0 = grad_H + (damping / 6.0) * np.trace(grad_H) * np.eye(6)
    S = grad_H0 + grad_H0.T

    # g = sum w J^T r and H0 = sum w J^T J
    grad_J = np.einsum("n,ni,j->nij", w, r, grad_g)
    grad_J += np.einsum("n,nij,jk->nik", w, J, S)
    grad_r = np.einsum("n,nij,j->ni", w, J, grad_g)

    # J = -A B
    grad_A = -np.einsum("nij,nkj->nik", grad_J, B)
    grad_B = -np.einsum("nji,njk->nik", A, grad_J)

    grad_Y = np.zeros_like(Y)
    C = grad_B[:, :, :3]
    grad_Y[:, 0] += C[:, 1, 2] - C[:, 2, 1]
    grad_Y[:, 1] += C[:, 2, 0] - C[:, 0, 2]
    grad_Y[:, 2] += C[:, 0, 1] - C[:, 1, 0]

    f = K.focal
    inv_z2 = 1.0 / zs**2
    grad_Y[:, 0] += grad_A[:, 0, 2] * (-f * inv_z2)
    grad_Y[:, 1] += grad_A[:, 1, 2] * (-f * inv_z2)
    grad_Y[:, 2] += (grad_A[:, 0, 0] + grad_A[:, 1, 1]) * (-f * inv_z2)
    grad_Y[:, 2] += grad_A[:, 0, 2] * (2 * f * Y[:, 0] / zs**3)
    grad_Y[:, 2] += grad_A[:, 1, 2] * (2 * f * Y[:, 1] / zs**3)

    # residual r = pix - u(Y)
    grad_u = -grad_r
    grad_Y += np.einsum("nij,ni->nj", A, grad_u)

    # points with zero weight carried no signal into the step
    grad_Y *= (w > 0)[:, None]
    grad_sub = grad_Y @ base.rotation

    out = np.zeros((len(corr), 3))
    out[mask] = grad_sub
    return out


# ---------------------------------------------------------------------------
# whole-video solving


def correspondences_from_pointmap(
    pm: Pointmap, grid: PixelGrid
) -> tuple[Correspondences2D3D, np.ndarray]:
    """Valid pixels of a pointmap as correspondences, plus flat indices."""
    if (pm.height, pm.width) != (grid.height, grid.width):
        raise ValueError("pointmap and grid sizes differ")
    flat_valid = pm.valid.reshape(-1)
    idx = np.nonzero(flat_valid)[0]
    corr = Correspondences2D3D(grid.flat()[idx], pm.points.reshape(-1, 3)[idx])
    return corr, idx


def solve_cameras_for_video(
    recon_pointmaps: list[Pointmap],
    grid: PixelGrid,
    ransac: RansacConfig = RansacConfig(),
    gn: GNConfig = GNConfig(),
    max_workers: int = 1,
) -> tuple[Intrinsics, list[PoseEstimate]]:
    """Shared intrinsics and per-frame world-to-camera poses for a video.

    Frame 0 defines the world frame, so its pose is the identity by
    construction; every other frame is solved independently from its
    reconstruction pointmap (RANSAC PnP then Gauss-Newton). Solver errors
    are re-raised with the frame index attached.
    """
    if not recon_pointmaps:
        raise InsufficientValidPoints("no pointmaps")
    for t, pm in enumerate(recon_pointmaps):
        pm.require_recon_branch()
        if pm.time != t:
            raise ValueError(f"pointmaps must be in time order, got time {pm.time} at {t}")
        if pm.coord_frame != recon_pointmaps[0].coord_frame:
            raise ValueError("pointmaps must share one coordinate frame")
    K = estimate_focal_weiszfeld(recon_pointmaps[0], grid)

    def solve_frame(j: int) -> PoseEstimate:
        pm = recon_pointmaps[j]
        try:
            corr, _ = correspondences_from_pointmap(pm, grid)
            if j == 0:
                pose = PoseSE3.identity()
                err = _reproj_errors(pose.rotation, pose.translation, K, corr)
                return PoseEstimate(
                    pose=pose,
                    inliers=np.ones(len(corr), dtype=bool),
                    rms_reprojection_error=float(np.sqrt(np.mean(err**2))),
                    increment=np.zeros(6),
                    base_pose=pose,
                    gn_damping=gn.damping,
                )
            coarse = solve_pnp_ransac(corr, K, replace(ransac, seed=ransac.seed + j))
            return gauss_newton_refine(coarse, corr, K, gn)
        except WorldTrackError as exc:
            raise exc.with_frame(j)

    frames = range(len(recon_pointmaps))
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            estimates = list(pool.map(solve_frame, frames))
    else:
        estimates = [solve_frame(j) for j in frames]
    return K, estimates
