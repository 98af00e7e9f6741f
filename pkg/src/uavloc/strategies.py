"""End-to-end localization strategies.

Four ways to turn a query frame into a position:
  * top1: match the best retrieval candidate only.
  * topn_rerank: match the top n candidates and keep the tile with the most
    RANSAC inliers (tie: higher retrieval score, then lower tile id).
  * most_inliers: topn_rerank over the whole gallery.
  * direct: match against the full orthophoto without retrieval.

Every frame produces exactly one record; solver failures fall back to the
chosen tile's center (map center for direct) and stay in the accuracy
denominator with their large errors. All randomness is derived from
(global seed, frame index, tile id), so results do not depend on strategy
kind, worker count, or evaluation order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .geo import diagonal_fov, planar_error, pixel_to_world
from .imops import block_mean, to_gray
from .matching import (
    MatcherConfig,
    MatchSet,
    detect_and_describe,
    import_matches,
    match_descriptors,
    match_pair,
)
from .pose import Corr2D3D, PoseEstimate, RansacParams, ransac_pnp
from .prior import align_query, estimate_gsd, unwarp_points
from .refmap import GalleryTile, RefMap25D, SampleError, lift_to_3d
from .retrieval import (
    EmbeddingScorer,
    NccScorer,
    QueryView,
    RetrievalResult,
    rank_gallery,
)
from .simulator import UavFrame

RECORD_TOP_K = 5
DEFAULT_MAX_WARP_DIM = 3000
DEFAULT_DIRECT_MAX_DIM = 4096

# The prior scale estimate normalizes by the full image diagonal, while the
# geometric meters-per-pixel at the principal point corresponds to the half
# diagonal; warping against half the map resolution cancels the factor so
# the aligned query lands at true map resolution.
PRIOR_SCALE_NORM = 2.0


@dataclass
class BuiltinMatcher:
    """Classical corner/patch matching in the aligned space."""

    cfg: MatcherConfig = field(default_factory=MatcherConfig)
    needs_warp: bool = True

    def match(self, frame: UavFrame, tile: GalleryTile, warpctx) -> MatchSet:
        warped, mask, warp = warpctx
        return match_pair(warped, mask, tile.image, warp, self.cfg)


@dataclass
class ImportedMatcher:
    """Correspondences precomputed by an external matcher, via the CSV index."""

    index_path: str
    space: str = "original"   # original | warped query coordinates

    def __post_init__(self):
        if self.space not in ("original", "warped"):
            raise ValueError(f"space must be 'original' or 'warped', got {self.space!r}")

    @property
    def needs_warp(self) -> bool:
        return self.space == "warped"

    def match(self, frame: UavFrame, tile: GalleryTile, warpctx) -> MatchSet:
        matches = import_matches(self.index_path, frame.id, tile.id)
        if self.space == "warped" and matches.pairs:
            warp = warpctx[2]
            orig = unwarp_points(warp, matches.query_points())
            pairs = [((float(o[0]), float(o[1])), p[1])
                     for o, p in zip(orig, matches.pairs)]
            return MatchSet(pairs=pairs, source="imported")
        return matches


@dataclass
class StrategyConfig:
    kind: str = "topn_rerank"          # direct | top1 | topn_rerank | most_inliers
    n: int = 5
    scorer: object = field(default_factory=NccScorer)
    matcher: object = field(default_factory=BuiltinMatcher)
    ransac: RansacParams = field(default_factory=RansacParams)
    seed: int = 0
    max_warp_dim: int = DEFAULT_MAX_WARP_DIM
    direct_max_dim: int = DEFAULT_DIRECT_MAX_DIM

    def __post_init__(self):
        if self.kind not in ("direct", "top1", "topn_rerank", "most_inliers"):
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "topn_rerank" and self.n < 1:
            raise ValueError("topn_rerank needs n >= 1")


@dataclass
class LocalizationRecord:
    """One frame's localization outcome plus retrieval context for metrics."""

    frame_id: str
    predicted_e: float
    predicted_n: float
    gt_e: float
    gt_n: float
    error_m: float
    tile_id: int
    inlier_count: int
    reproj_rmse: float
    fallback: bool
    status: str
    pitch_deg: float
    altitude_m: float
    map_label: str
    noise_level: str = ""
    retrieved_ids: tuple[int, ...] = ()
    retrieved_d: tuple[float, ...] = ()
    tile_width_px: float = 0.0
    map_gsd: float = 0.0
    gt_tile_id: int = -1
    timings: dict = field(default_factory=dict, compare=False)


def _ransac_seed(global_seed: int, frame_index: int, tile_id: int) -> int:
    # stable, collision-free combination; tile -1 (direct) maps to 0
    return ((int(global_seed) & 0xFFFFFFFF) << 28) ^ ((frame_index + 1) << 8) ^ (tile_id + 1)


def _prepare_warp(frame: UavFrame, map_gsd: float, max_dim: int):
    """Aligned query at (up to) true map resolution; capped output size."""
    prior = frame.prior
    est = estimate_gsd(prior.altitude, prior.pitch, diagonal_fov(frame.intrinsics),
                       frame.intrinsics.width, frame.intrinsics.height)
    eff_gsd = map_gsd / PRIOR_SCALE_NORM
    scale = est / eff_gsd
    longest = max(frame.intrinsics.width, frame.intrinsics.height)
    if scale * longest > max_dim:
        eff_gsd = est * longest / max_dim
    return align_query(frame.image, prior, frame.intrinsics, eff_gsd)


def _nearest_tile_id(gallery: list[GalleryTile], point_e: float, point_n: float) -> int:
    # gallery is ordered by ascending id, so the first strict minimum wins ties
    best_id = -1
    best_d = float("inf")
    for tile in gallery:
        d = float(np.hypot(tile.center.easting - point_e,
                           tile.center.northing - point_n))
        if d < best_d - 1e-12:
            best_d = d
            best_id = tile.id
    return best_id


def _lift_matches(matches: MatchSet, tile: GalleryTile, rmap: RefMap25D) -> list[Corr2D3D]:
    corrs = []
    for (qu, qv), (ru, rv) in matches.pairs:
        mu, mv = tile.tile_to_map_px(ru, rv)
        try:
            world, elev = lift_to_3d(rmap, mu, mv)
        except SampleError:
            continue
        corrs.append(Corr2D3D(u=qu, v=qv, world=world, elevation=elev))
    return corrs


def localize(frame: UavFrame, tile: GalleryTile, matches: MatchSet,
             rmap: RefMap25D, ransac: RansacParams) -> tuple["LocalizationRecord", PoseEstimate]:
    """Lift tile-side matches through the DSM, solve, and build a record.

    An insufficient or degenerate solve falls back to the tile center and
    sets the fallback flag; the frame always yields a record.
    """
    corrs = _lift_matches(matches, tile, rmap)
    estimate = ransac_pnp(corrs, frame.intrinsics, ransac)
    gt = frame.gt_position()
    if estimate.status == "ok":
        predicted = estimate.pose.center
        fallback = False
    else:
        predicted = tile.center
        fallback = True
    record = LocalizationRecord(
        frame_id=frame.id,
        predicted_e=predicted.easting,
        predicted_n=predicted.northing,
        gt_e=gt.easting,
        gt_n=gt.northing,
        error_m=planar_error(predicted, gt),
        tile_id=tile.id,
        inlier_count=estimate.inlier_count,
        reproj_rmse=estimate.reproj_rmse,
        fallback=fallback,
        status=estimate.status,
        pitch_deg=frame.gt_pitch,
        altitude_m=frame.prior.altitude,
        map_label=rmap.label,
    )
    return record, estimate


def _retrieval_observations(ranked: RetrievalResult, gallery_by_id, frame: UavFrame):
    ids = tuple(tid for tid, _ in ranked.ranked)
    fe, fn = frame.gt_footprint
    dists = tuple(
        float(np.hypot(gallery_by_id[tid].center.easting - fe,
                       gallery_by_id[tid].center.northing - fn))
        for tid in ids
    )
    return ids, dists


def _run_retrieval_strategy(frame: UavFrame, gallery: list[GalleryTile],
                            rmap: RefMap25D, cfg: StrategyConfig,
                            n_match: int) -> LocalizationRecord:
    timings = {}
    gallery_by_id = {t.id: t for t in gallery}
    needs_warp = getattr(cfg.matcher, "needs_warp", False) or not isinstance(
        cfg.scorer, EmbeddingScorer)
    warpctx = None
    t0 = time.perf_counter()
    if needs_warp:
        warpctx = _prepare_warp(frame, rmap.gsd, cfg.max_warp_dim)
    timings["warp_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    query = QueryView(
        id=frame.id,
        image=warpctx[0] if warpctx is not None else np.zeros((1, 1), dtype=np.float32),
        mask=warpctx[1] if warpctx is not None else None,
    )
    k = max(n_match, min(RECORD_TOP_K, len(gallery)))
    ranked = rank_gallery(query, gallery, cfg.scorer, k)
    timings["retrieve_s"] = time.perf_counter() - t0

    candidates = []
    t0 = time.perf_counter()
    match_seconds = 0.0
    solve_seconds = 0.0
    for tile_id, score in ranked.ranked[:n_match]:
        tile = gallery_by_id[tile_id]
        tm = time.perf_counter()
        matches = cfg.matcher.match(frame, tile, warpctx)
        match_seconds += time.perf_counter() - tm
        ts = time.perf_counter()
        ransac = replace(cfg.ransac,
                         seed=_ransac_seed(cfg.seed, frame.index, tile.id))
        record, estimate = localize(frame, tile, matches, rmap, ransac)
        solve_seconds += time.perf_counter() - ts
        candidates.append((estimate.inlier_count, score, tile.id, record))
    timings["match_s"] = match_seconds
    timings["solve_s"] = solve_seconds

    # most inliers, then higher retrieval score, then lower tile id
    candidates.sort(key=lambda c: (-c[0], -c[1], c[2]))
    best = candidates[0][3]
    if best.fallback and best.tile_id != ranked.ranked[0][0]:
        # every candidate failed: fall back to the top retrieval's center
        top_tile = gallery_by_id[ranked.ranked[0][0]]
        gt = frame.gt_position()
        best = replace(
            best,
            predicted_e=top_tile.center.easting,
            predicted_n=top_tile.center.northing,
            error_m=planar_error(top_tile.center, gt),
            tile_id=top_tile.id,
        )

    ids, dists = _retrieval_observations(ranked, gallery_by_id, frame)
    fe, fn = frame.gt_footprint
    best = replace(
        best,
        retrieved_ids=ids[:RECORD_TOP_K],
        retrieved_d=dists[:RECORD_TOP_K],
        tile_width_px=float(gallery[0].width_px),
        map_gsd=rmap.gsd,
        gt_tile_id=_nearest_tile_id(gallery, fe, fn),
    )
    best.timings.update(timings)
    return best


def run_top1(frame: UavFrame, gallery: list[GalleryTile], rmap: RefMap25D,
             cfg: StrategyConfig) -> LocalizationRecord:
    """Match only the best retrieval candidate."""
    if not gallery:
        raise ValueError("empty gallery")
    return _run_retrieval_strategy(frame, gallery, rmap, cfg, n_match=1)


def run_topn_rerank(frame: UavFrame, gallery: list[GalleryTile], rmap: RefMap25D,
                    cfg: StrategyConfig) -> LocalizationRecord:
    """Match the top n candidates, keep the one with the most inliers."""
    if not gallery:
        raise ValueError("empty gallery")
    return _run_retrieval_strategy(frame, gallery, rmap, cfg,
                                   n_match=min(cfg.n, len(gallery)))


def run_most_inliers(frame: UavFrame, gallery: list[GalleryTile], rmap: RefMap25D,
                     cfg: StrategyConfig) -> LocalizationRecord:
    """Match every gallery tile; identical to topn_rerank with n = |gallery|."""
    if not gallery:
        raise ValueError("empty gallery")
    return _run_retrieval_strategy(frame, gallery, rmap, cfg,
                                   n_match=len(gallery))


def run_direct(frame: UavFrame, rmap: RefMap25D, cfg: StrategyConfig) -> LocalizationRecord:
    """Match the aligned query against the whole orthophoto, no retrieval.

    If the map exceeds ``direct_max_dim`` both the map and the aligned query
    are downsampled by the same integer factor so matching stays scale
    consistent; map-side keypoints are scaled back to full-map pixels.
    """
    timings = {}
    og = rmap.ortho.geot
    gt = frame.gt_position()
    t0 = time.perf_counter()
    warped, mask, warp = _prepare_warp(frame, rmap.gsd, cfg.max_warp_dim)
    timings["warp_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    factor = max(1, -(-max(og.cols, og.rows) // cfg.direct_max_dim))
    map_img = to_gray(np.asarray(rmap.ortho.pixels))
    if factor > 1:
        map_img = block_mean(map_img, factor)
        q_img = block_mean(warped, factor)
        q_mask = block_mean(mask.astype(np.float64), factor) > 0.999
    else:
        q_img, q_mask = warped, mask
    timings["downsample_factor"] = float(factor)

    matcher_cfg = getattr(cfg.matcher, "cfg", MatcherConfig())
    whole_tile = GalleryTile(
        id=-1, image=np.asarray(rmap.ortho.pixels),
        center=pixel_to_world(og, (og.cols - 1) / 2.0, (og.rows - 1) / 2.0),
        width_px=og.cols, resolution=og.pixel_size, col0=0, row0=0)

    if getattr(cfg.matcher, "needs_warp", True):
        q_kps = detect_and_describe(
            q_img, max_kp=matcher_cfg.max_keypoints, mask=q_mask,
            nms_radius=matcher_cfg.nms_radius, patch_size=matcher_cfg.patch_size,
            response_rel_floor=matcher_cfg.response_rel_floor)
        m_kps = detect_and_describe(
            map_img, max_kp=matcher_cfg.max_keypoints * 4, mask=None,
            nms_radius=matcher_cfg.nms_radius, patch_size=matcher_cfg.patch_size,
            response_rel_floor=matcher_cfg.response_rel_floor)
        matched = match_descriptors(q_kps, m_kps, ratio=matcher_cfg.ratio)
        pairs = []
        if matched.pairs:
            # undo the shared downsampling, then unwarp the query side
            qpts = matched.query_points() * factor + (factor - 1) / 2.0
            orig = unwarp_points(warp, qpts)
            for o, (_, rp) in zip(orig, matched.pairs):
                pairs.append(((float(o[0]), float(o[1])),
                              (rp[0] * factor + (factor - 1) / 2.0,
                               rp[1] * factor + (factor - 1) / 2.0)))
        matches = MatchSet(pairs=pairs, source="builtin")
    else:
        # oracle/imported matchers see the whole map as one tile
        matches = cfg.matcher.match(frame, whole_tile, (warped, mask, warp))
    timings["match_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ransac = replace(cfg.ransac, seed=_ransac_seed(cfg.seed, frame.index, -1))
    record, _ = localize(frame, whole_tile, matches, rmap, ransac)
    timings["solve_s"] = time.perf_counter() - t0
    record = replace(record, map_gsd=rmap.gsd)
    record.timings.update(timings)
    return record


def run_strategy(frame: UavFrame, gallery: list[GalleryTile] | None,
                 rmap: RefMap25D, cfg: StrategyConfig) -> LocalizationRecord:
    """Dispatch one frame through the configured strategy."""
    if cfg.kind == "direct":
        return run_direct(frame, rmap, cfg)
    if gallery is None:
        raise ValueError(f"strategy {cfg.kind} needs a gallery")
    if cfg.kind == "top1":
        return run_top1(frame, gallery, rmap, cfg)
    if cfg.kind == "topn_rerank":
        return run_topn_rerank(frame, gallery, rmap, cfg)
    return run_most_inliers(frame, gallery, rmap, cfg)
