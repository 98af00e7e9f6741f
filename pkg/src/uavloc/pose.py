"""Camera position recovery from 2D-3D correspondences.

Tile-side match points are lifted to 3D through the DSM elsewhere; this
module solves the minimal three-point perspective pose problem (law-of-
cosines quartic over the distance ratios), runs it inside a seeded RANSAC
loop with a fourth-point disambiguation, and refines the winner by
Gauss-Newton over the inlier set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geo import CameraIntrinsics, CameraPose, UtmCoord


@dataclass(frozen=True)
class Corr2D3D:
    """One correspondence: a query pixel and its 3D UTM point."""

    u: float
    v: float
    world: UtmCoord
    elevation: float

    def xyz(self) -> np.ndarray:
        return np.array([self.world.easting, self.world.northing, self.elevation])


@dataclass(frozen=True)
class RansacParams:
    reproj_threshold: float = 3.0
    max_iterations: int = 2000
    confidence: float = 0.999
    seed: int = 0
    min_inliers: int = 6
    # Restrict minimal-sample draws to the first n correspondences (scoring
    # still uses all of them). Lets callers align the sampling schedule
    # across runs that share a prefix of the correspondence list.
    sample_pool: int | None = None

    def __post_init__(self):
        if self.reproj_threshold <= 0:
            raise ValueError("reproj_threshold must be > 0")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1)")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be >= 4")


@dataclass
class PoseEstimate:
    """RANSAC output: a pose (or None), its inliers, and residual statistics."""

    pose: CameraPose | None
    inlier_count: int
    inlier_ids: tuple[int, ...]
    reproj_rmse: float
    status: str  # ok | degenerate | insufficient

    def __post_init__(self):
        if self.inlier_count != len(self.inlier_ids):
            raise ValueError("inlier_count disagrees with inlier_ids")


COLLINEARITY_EPS = 1e-6
_REPROJ_EXACT_TOL = 1e-6


def _project_rt(rot: np.ndarray, cam_center: np.ndarray, k: np.ndarray,
                pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of Nx3 world points; returns (Nx2 pixels, depth)."""
    pc = (pts - cam_center) @ rot.T
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k[0, 0] * pc[:, 0] / z + k[0, 2]
        v = k[1, 1] * pc[:, 1] / z + k[1, 2]
    return np.stack([u, v], axis=1), z


def project_point(pose: CameraPose, intr: CameraIntrinsics, xyz: np.ndarray):
    uv, z = _project_rt(pose.orientation, pose.center_xyz(), intr.matrix(),
                        np.asarray(xyz, dtype=np.float64).reshape(1, 3))
    return uv[0], float(z[0])


def reprojection_error(pose: CameraPose, corr: Corr2D3D, intr: CameraIntrinsics) -> float:
    """Pixel distance between the projected world point and the observation.

    Points behind the camera score +inf so RANSAC treats them as outliers.
    """
    uv, z = project_point(pose, intr, corr.xyz())
    if z <= 0 or not np.all(np.isfinite(uv)):
        return float("inf")
    return float(math.hypot(uv[0] - corr.u, uv[1] - corr.v))


def _bearings(intr: CameraIntrinsics, uv: np.ndarray) -> np.ndarray:
    x = (uv[:, 0] - intr.principal_x) / intr.focal_x
    y = (uv[:, 1] - intr.principal_y) / intr.focal_y
    f = np.stack([x, y, np.ones(len(uv))], axis=1)
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def _collinear(pts: np.ndarray) -> bool:
    area = 0.5 * np.linalg.norm(np.cross(pts[1] - pts[0], pts[2] - pts[0]))
    scale = max(
        np.linalg.norm(pts[1] - pts[0]),
        np.linalg.norm(pts[2] - pts[0]),
        np.linalg.norm(pts[2] - pts[1]),
    )
    return area <= COLLINEARITY_EPS * scale * scale


def _polish_depths(s: np.ndarray, a2, b2, c2, ca, cb, cg, iters=6):
    """Newton iterations on the three law-of-cosines constraints."""
    for _ in range(iters):
        s1, s2, s3 = s
        f = np.array([
            s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca - a2,
            s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb - b2,
            s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg - c2,
        ])
        jac = np.array([
            [0.0, 2 * s2 - 2 * s3 * ca, 2 * s3 - 2 * s2 * ca],
            [2 * s1 - 2 * s3 * cb, 0.0, 2 * s3 - 2 * s1 * cb],
            [2 * s1 - 2 * s2 * cg, 2 * s2 - 2 * s1 * cg, 0.0],
        ])
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            return s
        s = s + step
        if np.max(np.abs(step)) < 1e-13 * max(1.0, np.max(np.abs(s))):
            break
    return s


def _absolute_orientation(world: np.ndarray, cam: np.ndarray):
    """Least-squares rotation/translation with cam = R @ world + t (Kabsch)."""
    wbar = world.mean(axis=0)
    cbar = cam.mean(axis=0)
    h = (world - wbar).T @ (cam - cbar)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cbar - rot @ wbar
    return rot, t


def p3p_solve(corrs: list[Corr2D3D] | tuple[Corr2D3D, ...],
              intr: CameraIntrinsics) -> list[CameraPose]:
    """All real solutions of the three-point perspective pose problem.

    Solves the law-of-cosines quartic in the depth ratios (roots via the
    companion matrix), polishes depths by Newton, and recovers the pose by
    absolute orientation. Every returned candidate reprojects the defining
    triple to within 1e-6 px.

    Raises:
        ValueError: not exactly three correspondences, or collinear points.
    """
    if len(corrs) != 3:
        raise ValueError(f"P3P needs exactly 3 correspondences, got {len(corrs)}")
    world = np.stack([c.xyz() for c in corrs])
    if _collinear(world):
        raise ValueError("degenerate: world points are collinear")
    uv = np.array([[c.u, c.v] for c in corrs], dtype=np.float64)
    f = _bearings(intr, uv)

    a2 = float(np.sum((world[1] - world[2]) ** 2))
    b2 = float(np.sum((world[0] - world[2]) ** 2))
    c2 = float(np.sum((world[0] - world[1]) ** 2))
    ca = float(f[1] @ f[2])
    cb = float(f[0] @ f[2])
    cg = float(f[0] @ f[1])
    ratio_a = a2 / b2
    ratio_c = c2 / b2

    # With u = s2/s1 and v = s3/s1 the constraints reduce to
    #   u = P(v) / Q(v),   P^2 - 2 cg P Q + G Q^2 = 0
    poly_p = np.array([(ratio_a - ratio_c) - 1.0,
                       -2.0 * cb * (ratio_a - ratio_c),
                       (ratio_a - ratio_c) + 1.0])
    poly_q = np.array([-2.0 * ca, 2.0 * cg])
    poly_g = np.array([-ratio_c, 2.0 * ratio_c * cb, 1.0 - ratio_c])
    quartic = np.polyadd(np.polymul(poly_p, poly_p),
                         -2.0 * cg * np.polymul(poly_p, poly_q))
    quartic = np.polyadd(quartic, np.polymul(np.polymul(poly_q, poly_q), poly_g))
    peak = np.max(np.abs(quartic))
    if peak == 0 or not np.isfinite(peak):
        return []
    roots = np.roots(quartic / peak)

    b_len = math.sqrt(b2)
    poses: list[CameraPose] = []
    for root in roots:
        if abs(root.imag) > 1e-8 or root.real <= 0:
            continue
        v = float(root.real)
        qv = float(np.polyval(poly_q, v))
        if abs(qv) > 1e-12:
            u_cands = [float(np.polyval(poly_p, v)) / qv]
        else:
            disc = cg * cg - (1.0 - ratio_c * (1.0 + v * v - 2.0 * v * cb))
            if disc < 0:
                continue
            u_cands = [cg + math.sqrt(disc), cg - math.sqrt(disc)]
        for u in u_cands:
            if u <= 0:
                continue
            den = 1.0 + v * v - 2.0 * v * cb
            if den <= 0:
                continue
            s1 = b_len / math.sqrt(den)
            depths = _polish_depths(np.array([s1, u * s1, v * s1]),
                                    a2, b2, c2, ca, cb, cg)
            if depths is None or np.any(depths <= 0) or not np.all(np.isfinite(depths)):
                continue
            cam_pts = depths[:, None] * f
            rot, t = _absolute_orientation(world, cam_pts)
            center = -rot.T @ t
            try:
                pose = CameraPose(
                    center=UtmCoord(float(center[0]), float(center[1]),
                                    corrs[0].world.zone, corrs[0].world.hemisphere),
                    altitude=float(center[2]),
                    orientation=rot,
                )
            except ValueError:
                continue
            proj, z = _project_rt(rot, center, intr.matrix(), world)
            if np.any(z <= 0):
                continue
            err = np.max(np.hypot(proj[:, 0] - uv[:, 0], proj[:, 1] - uv[:, 1]))
            if err > _REPROJ_EXACT_TOL:
                continue
            if any(np.linalg.norm(p.center_xyz() - pose.center_xyz()) < 1e-7
                   for p in poses):
                continue
            poses.append(pose)
    return poses


def _errors_for(rot, center, k, world, uv):
    proj, z = _project_rt(rot, center, k, world)
    err = np.hypot(proj[:, 0] - uv[:, 0], proj[:, 1] - uv[:, 1])
    err[~np.isfinite(err)] = np.inf
    err[z <= 0] = np.inf
    return err


def _so3_exp(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3)
    ax = w / theta
    kx = np.array([[0, -ax[2], ax[1]], [ax[2], 0, -ax[0]], [-ax[1], ax[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1 - math.cos(theta)) * (kx @ kx)


def _refine(rot, center, k, world, uv, iters=15):
    """Gauss-Newton on (rotation, center) minimizing total squared reprojection
    error; backtracks on any step that would increase the cost."""
    fx, fy = k[0, 0], k[1, 1]

    def cost(r, c):
        e = _errors_for(r, c, k, world, uv)
        if not np.all(np.isfinite(e)):
            return np.inf
        return float(np.sum(e * e))

    cur = cost(rot, center)
    for _ in range(iters):
        pc = (world - center) @ rot.T
        x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
        if np.any(z <= 0):
            break
        proj = np.stack([fx * x / z + k[0, 2], fy * y / z + k[1, 2]], axis=1)
        res = (proj - uv).ravel()
        n = len(world)
        inv_z = 1.0 / z
        # d(proj)/d(camera-frame point)
        ju = np.stack([fx * inv_z, np.zeros(n), -fx * x * inv_z ** 2], axis=1)
        jv = np.stack([np.zeros(n), fy * inv_z, -fy * y * inv_z ** 2], axis=1)
        # camera-frame point: pc = R (p - c); left-perturb R by exp(w):
        # dpc/dw = -[pc]_x and dpc/dc = -R
        skews = np.zeros((n, 3, 3))
        skews[:, 0, 1] = -pc[:, 2]
        skews[:, 0, 2] = pc[:, 1]
        skews[:, 1, 0] = pc[:, 2]
        skews[:, 1, 2] = -pc[:, 0]
        skews[:, 2, 0] = -pc[:, 1]
        skews[:, 2, 1] = pc[:, 0]
        jac = np.empty((2 * n, 6))
        jac[0::2, :3] = -np.einsum("ni,nij->nj", ju, skews)
        jac[0::2, 3:] = -(ju @ rot)
        jac[1::2, :3] = -np.einsum("ni,nij->nj", jv, skews)
        jac[1::2, 3:] = -(jv @ rot)
        try:
            step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        improved = False
        for _ in range(8):
            rot_new = _so3_exp(scale * step[:3]) @ rot
            center_new = center + scale * step[3:]
            new = cost(rot_new, center_new)
            if new < cur:
                rot, center, cur = rot_new, center_new, new
                improved = True
                break
            scale *= 0.5
        if not improved or np.linalg.norm(step) < 1e-12:
            break
    return rot, center


def ransac_pnp(corrs: list[Corr2D3D], intr: CameraIntrinsics,
               params: RansacParams = RansacParams()) -> PoseEstimate:
    """P3P + RANSAC + inlier refinement over 2D-3D correspondences.

    Each iteration samples three correspondences, enumerates the P3P
    candidates, picks one using the lowest-index correspondence outside the
    sample, and scores by inliers under ``reproj_threshold``. Ties keep the
    model with lower inlier RMSE. Iterations stop early once the standard
    (1 - (1 - w^3)^n) confidence bound is met. The best model is refined by
    Gauss-Newton over its inliers and the inlier set is recomputed once.

    Deterministic for a fixed seed.
    """
    n = len(corrs)
    if n < 4:
        return PoseEstimate(pose=None, inlier_count=0, inlier_ids=(),
                            reproj_rmse=float("inf"), status="insufficient")
    world = np.stack([c.xyz() for c in corrs])
    uv = np.array([[c.u, c.v] for c in corrs], dtype=np.float64)
    k = intr.matrix()
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, 0x9A5C]))
    pool = n if params.sample_pool is None else min(params.sample_pool, n)

    best_rot = None
    best_center = None
    best_count = 0
    best_rmse = float("inf")
    needed = params.max_iterations
    it = 0
    while it < min(needed, params.max_iterations):
        it += 1
        idx = rng.choice(pool, size=3, replace=False)
        tri = [corrs[i] for i in idx]
        if _collinear(world[idx]):
            continue
        try:
            cands = p3p_solve(tri, intr)
        except ValueError:
            continue
        if not cands:
            continue
        if len(cands) > 1:
            # disambiguate with the lowest-index correspondence outside the sample
            probe = next(i for i in range(n) if i not in idx)
            probe_err = [
                _errors_for(c.orientation, c.center_xyz(), k,
                            world[probe:probe + 1], uv[probe:probe + 1])[0]
                for c in cands
            ]
            cand = cands[int(np.argmin(probe_err))]
        else:
            cand = cands[0]
        err = _errors_for(cand.orientation, cand.center_xyz(), k, world, uv)
        inl = err <= params.reproj_threshold
        count = int(inl.sum())
        if count == 0:
            continue
        rmse = float(np.sqrt(np.mean(err[inl] ** 2)))
        if count > best_count or (count == best_count and rmse < best_rmse):
            best_count = count
            best_rmse = rmse
            best_rot = cand.orientation.copy()
            best_center = cand.center_xyz()
            w_frac = count / n
            if w_frac >= 1.0:
                needed = it
            else:
                denom = math.log(max(1e-12, 1.0 - w_frac ** 3))
                needed = math.ceil(math.log(1.0 - params.confidence) / denom)

    if best_rot is None or best_count < params.min_inliers:
        ids: tuple[int, ...] = ()
        if best_rot is not None:
            err = _errors_for(best_rot, best_center, k, world, uv)
            ids = tuple(int(i) for i in np.nonzero(err <= params.reproj_threshold)[0])
        return PoseEstimate(pose=None, inlier_count=len(ids), inlier_ids=ids,
                            reproj_rmse=float("inf"), status="insufficient")

    err = _errors_for(best_rot, best_center, k, world, uv)
    inl = err <= params.reproj_threshold
    rot, center = _refine(best_rot, best_center, k, world[inl], uv[inl])
    err = _errors_for(rot, center, k, world, uv)
    inl = err <= params.reproj_threshold
    count = int(inl.sum())
    if count < params.min_inliers:
        ids = tuple(int(i) for i in np.nonzero(inl)[0])
        return PoseEstimate(pose=None, inlier_count=count, inlier_ids=ids,
                            reproj_rmse=float("inf"), status="insufficient")
    rmse = float(np.sqrt(np.mean(err[inl] ** 2)))
    try:
        pose = CameraPose(
            center=UtmCoord(float(center[0]), float(center[1]),
                            corrs[0].world.zone, corrs[0].world.hemisphere),
            altitude=float(center[2]),
            orientation=rot,
        )
    except ValueError:
        # e.g. a center outside the UTM validity band: treat as no solution
        return PoseEstimate(pose=None, inlier_count=count, inlier_ids=(),
                            reproj_rmse=float("inf"), status="degenerate")
    ids = tuple(int(i) for i in np.nonzero(inl)[0])
    return PoseEstimate(pose=pose, inlier_count=count, inlier_ids=ids,
                        reproj_rmse=rmse, status="ok")
