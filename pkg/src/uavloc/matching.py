"""2D-2D correspondences between the aligned query and a gallery tile.

The built-in matcher is deliberately classical: Harris-style corner
detection with non-maximum suppression plus normalized intensity-patch
descriptors and a mutual-nearest-neighbor ratio test. It is not viewpoint
invariant; it relies on the prior alignment having removed rotation and
scale. Learned matchers plug in through the CSV import adapter instead.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imops import bilinear_sample, to_gray
from .prior import AlignmentWarp, unwarp_points

MIN_MATCHES = 4


@dataclass
class Keypoint:
    u: float
    v: float
    response: float
    descriptor: np.ndarray


@dataclass
class MatchSet:
    """Point pairs in (query-frame, reference-frame) pixel coordinates."""

    pairs: list[tuple[tuple[float, float], tuple[float, float]]]
    source: str = "builtin"

    def __post_init__(self):
        flat = [c for p in self.pairs for pt in p for c in pt]
        if flat and not np.all(np.isfinite(flat)):
            raise ValueError("match coordinates must be finite")
        seen = {p[0] for p in self.pairs}
        if len(seen) != len(self.pairs):
            raise ValueError("duplicate query points in match set")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def insufficient(self) -> bool:
        return len(self.pairs) < MIN_MATCHES

    def query_points(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=np.float64).reshape(-1, 2)

    def ref_points(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True)
class MatcherConfig:
    max_keypoints: int = 512
    nms_radius: int = 8
    patch_size: int = 16
    ratio: float = 0.85
    response_rel_floor: float = 1e-5


def detect_and_describe(
    image: np.ndarray,
    max_kp: int = 512,
    mask: np.ndarray | None = None,
    nms_radius: int = 8,
    patch_size: int = 16,
    response_rel_floor: float = 1e-5,
) -> list[Keypoint]:
    """Corner keypoints with normalized-patch descriptors.

    Corners are local maxima of the Harris response within ``nms_radius``,
    refined to sub-pixel by quadratic fitting, strongest ``max_kp`` kept.
    The descriptor is the mean/std-normalized ``patch_size`` square of
    intensities around the corner, flattened and L2-normalized.

    ``mask`` restricts detection to valid pixels (eroded by the patch
    radius), which keeps warp fill boundaries from spawning fake corners.
    A textureless image yields an empty list; that is not an error.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError("detection expects a grayscale image")
    h, w = img.shape
    if h < 32 or w < 32:
        raise ValueError(f"image too small for detection: {img.shape}")
    margin = patch_size // 2 + 2

    g = ndimage.gaussian_filter(img, 1.0)
    ix = ndimage.sobel(g, axis=1) / 8.0
    iy = ndimage.sobel(g, axis=0) / 8.0
    ixx = ndimage.gaussian_filter(ix * ix, 2.0)
    iyy = ndimage.gaussian_filter(iy * iy, 2.0)
    ixy = ndimage.gaussian_filter(ix * iy, 2.0)
    resp = ixx * iyy - ixy * ixy - 0.04 * (ixx + iyy) ** 2

    ok = np.ones((h, w), dtype=bool)
    if mask is not None:
        ok &= ndimage.binary_erosion(mask, iterations=margin, border_value=0)
    ok[:margin] = ok[-margin:] = False
    ok[:, :margin] = ok[:, -margin:] = False
    if not ok.any():
        return []
    resp_masked = np.where(ok, resp, -np.inf)
    local_max = ndimage.maximum_filter(resp_masked, size=2 * nms_radius + 1)
    floor = max(1e-8, response_rel_floor * float(resp_masked[ok].max()))
    peaks = (resp_masked == local_max) & (resp_masked > floor)
    vs, us = np.nonzero(peaks)
    if len(us) == 0:
        return []
    order = np.lexsort((us, vs, -resp[vs, us]))[:max_kp]
    us, vs = us[order], vs[order]

    half = patch_size / 2.0 - 0.5
    offs = np.arange(patch_size, dtype=np.float64) - half
    ogrid_x, ogrid_y = np.meshgrid(offs, offs)
    kps = []
    for u, v in zip(us, vs):
        du = dv = 0.0
        # sub-pixel peak by 1D parabola fits along each axis
        if 0 < u < w - 1 and 0 < v < h - 1:
            c = resp[v, u]
            dl, dr = resp[v, u - 1], resp[v, u + 1]
            dt, db = resp[v - 1, u], resp[v + 1, u]
            denx = dl - 2 * c + dr
            deny = dt - 2 * c + db
            if denx < 0:
                du = max(-0.5, min(0.5, 0.5 * (dl - dr) / denx))
            if deny < 0:
                dv = max(-0.5, min(0.5, 0.5 * (dt - db) / deny))
        uu, vv = u + du, v + dv
        patch = bilinear_sample(img, uu + ogrid_x, vv + ogrid_y).ravel()
        std = patch.std()
        if std < 1e-6:
            continue
        desc = (patch - patch.mean()) / std
        desc /= np.linalg.norm(desc)
        kps.append(Keypoint(u=float(uu), v=float(vv),
                            response=float(resp[v, u]), descriptor=desc))
    return kps


def match_descriptors(q: list[Keypoint], r: list[Keypoint], ratio: float = 0.85) -> MatchSet:
    """Mutual nearest neighbors in descriptor space passing the ratio test.

    Deterministic given its inputs. Fewer than MIN_MATCHES resulting pairs
    is flagged through ``MatchSet.insufficient``, not raised.
    """
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    if not q or not r:
        return MatchSet(pairs=[], source="builtin")
    dq = np.stack([k.descriptor for k in q])
    dr = np.stack([k.descriptor for k in r])
    sim = dq @ dr.T
    # unit descriptors: squared distance = 2 - 2 sim, monotone in -sim
    nn_r_of_q = np.argmax(sim, axis=1)
    nn_q_of_r = np.argmax(sim, axis=0)
    pairs = []
    for i, j in enumerate(nn_r_of_q):
        if nn_q_of_r[j] != i:
            continue
        if len(r) >= 2:
            row = sim[i].copy()
            row[j] = -np.inf
            second = row.max()
            d1 = math.sqrt(max(0.0, 2.0 - 2.0 * float(sim[i, j])))
            d2 = math.sqrt(max(0.0, 2.0 - 2.0 * float(second)))
            if d1 > ratio * d2:
                continue
        pairs.append(((q[i].u, q[i].v), (r[j].u, r[j].v)))
    return MatchSet(pairs=pairs, source="builtin")


def match_pair(
    warped_query: np.ndarray,
    query_mask: np.ndarray | None,
    tile_image: np.ndarray,
    warp: AlignmentWarp,
    cfg: MatcherConfig = MatcherConfig(),
) -> MatchSet:
    """Built-in matching of an aligned query against a map-resolution tile.

    Detection and matching happen in the aligned (warped) space; the query
    side of every pair is mapped back to original query pixels so the pose
    solver sees true camera coordinates.
    """
    q_kps = detect_and_describe(
        warped_query, max_kp=cfg.max_keypoints, mask=query_mask,
        nms_radius=cfg.nms_radius, patch_size=cfg.patch_size,
        response_rel_floor=cfg.response_rel_floor)
    t_kps = detect_and_describe(
        to_gray(tile_image), max_kp=cfg.max_keypoints, mask=None,
        nms_radius=cfg.nms_radius, patch_size=cfg.patch_size,
        response_rel_floor=cfg.response_rel_floor)
    matched = match_descriptors(q_kps, t_kps, ratio=cfg.ratio)
    if not matched.pairs:
        return matched
    warped_pts = matched.query_points()
    orig = unwarp_points(warp, warped_pts)
    pairs = [
        ((float(o[0]), float(o[1])), rp)
        for o, rp in zip(orig, (p[1] for p in matched.pairs))
    ]
    return MatchSet(pairs=pairs, source="builtin")


def read_match_csv(path) -> MatchSet:
    """Parse one correspondence CSV with header ``qx,qy,rx,ry[,score]``."""
    pairs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return MatchSet(pairs=[], source="imported")
        cols = [c.strip().lower() for c in header]
        if cols[:4] != ["qx", "qy", "rx", "ry"]:
            raise ValueError(f"{path}: expected header qx,qy,rx,ry[,score], got {header}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                qx, qy, rx, ry = (float(x) for x in row[:4])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad row {row}: {exc}") from exc
            if not all(map(math.isfinite, (qx, qy, rx, ry))):
                raise ValueError(f"{path}:{lineno}: non-finite coordinates {row}")
            pairs.append(((qx, qy), (rx, ry)))
    return MatchSet(pairs=pairs, source="imported")


def import_matches(index_path, query_id: str, tile_id: int) -> MatchSet:
    """Look up (query, tile) in a correspondence index and load its CSV.

    The index is JSON: ``{"<query_id>:<tile_id>": "relative/path.csv", ...}``
    with paths resolved against the index file's directory.
    """
    index_path = Path(index_path)
    try:
        index = json.loads(index_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read match index {index_path}: {exc}") from exc
    key = f"{query_id}:{tile_id}"
    if key not in index:
        raise KeyError(f"no imported matches for {key} in {index_path}")
    return read_match_csv(index_path.parent / index[key])
