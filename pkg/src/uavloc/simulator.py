"""Synthetic 2.5D worlds with exact ground truth.

Generates procedurally textured orthophoto + DSM pairs (flat, hilly, or
urban with extruded boxes), renders ground-truth-posed views of them by ray
marching the heightfield, and exports oracle artifacts (exact pixel
correspondences, geo-coded embeddings) so every pipeline stage can be
validated against closed-form or ray-cast truth at desk scale.

Everything here is a pure function of (spec, seed): identical inputs give
byte-identical rasters, images, and files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geo import (
    CameraIntrinsics,
    CameraPose,
    GeoTransform,
    PriorState,
    UtmCoord,
    rotation_from_yaw_pitch,
)
from .imops import bilinear_sample, resize_bilinear, to_gray
from .matching import MatchSet
from .refmap import RefMap25D, Raster, GalleryTile
from .retrieval import EmbeddingTable, tile_key

DEFAULT_INTRINSICS = CameraIntrinsics(
    focal_x=800.0, focal_y=800.0, principal_x=319.5, principal_y=239.5,
    width=640, height=480,
)

_SEED_SCENE = 0x5CE7E
_SEED_FLIGHT = 0xF119
_SEED_ORACLE = 0x09AC
_SEED_EMBED = 0xE3BD


@dataclass(frozen=True)
class TerrainSpec:
    kind: str = "flat"                 # flat | hills | urban
    amplitude: float = 0.0             # hills: half peak-to-peak, meters
    wavelength: float = 200.0          # hills: dominant horizontal scale
    building_density: float = 4.0      # urban: buildings per hectare
    height_range: tuple[float, float] = (6.0, 25.0)

    def __post_init__(self):
        if self.kind not in ("flat", "hills", "urban"):
            raise ValueError(f"unknown terrain kind {self.kind!r}")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")


@dataclass(frozen=True)
class TextureSpec:
    octaves: int = 7
    persistence: float = 0.6
    period_m: float = 0.0              # > 0 tiles the texture every period_m

    def __post_init__(self):
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    extent: float = 400.0              # square side, meters
    gsd: float = 0.1                   # orthophoto meters per pixel
    dsm_gsd: float | None = None       # defaults to 5 * gsd
    terrain: TerrainSpec = field(default_factory=TerrainSpec)
    texture: TextureSpec = field(default_factory=TextureSpec)
    origin_e: float = 500000.0         # center of pixel (0, 0)
    origin_n: float = 4000000.0
    zone: int = 50
    hemisphere: str = "north"

    def __post_init__(self):
        n = self.extent / self.gsd
        if abs(n - round(n)) > 1e-9:
            raise ValueError(
                f"extent {self.extent} must be an integer number of pixels "
                f"at gsd {self.gsd}")
        if self.dsm_gsd is not None:
            nd = self.extent / self.dsm_gsd
            if abs(nd - round(nd)) > 1e-9:
                raise ValueError("extent must also be integral at dsm_gsd")


def _value_noise(rng, rows, cols, cells) -> np.ndarray:
    """Bilinearly upsampled random grid, values roughly N(0, 1)."""
    grid = rng.standard_normal((cells + 1, cells + 1))
    return resize_bilinear(grid, rows, cols)


def _multi_octave(rng, rows, cols, extent, octaves, persistence) -> np.ndarray:
    acc = np.zeros((rows, cols))
    amp = 1.0
    wavelength = extent / 2.0
    min_wavelength = 3.0 * extent / max(rows, cols)
    for _ in range(octaves):
        if wavelength < min_wavelength:
            break
        cells = max(2, int(round(extent / wavelength)))
        acc += amp * _value_noise(rng, rows, cols, cells)
        amp *= persistence
        wavelength /= 2.0
    return acc


def _normalize01(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi - lo < 1e-12:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def generate_scene(spec: SceneSpec) -> RefMap25D:
    """Deterministic textured orthophoto + DSM from a scene spec.

    Hills are normalized multi-octave noise scaled into [-amplitude,
    +amplitude]. Urban scenes extrude axis-aligned boxes with per-building
    rooftop texture; their vertical faces only exist in the DSM, so oblique
    renders show content absent from the orthophoto.
    """
    n = int(round(spec.extent / spec.gsd))
    dsm_gsd = spec.dsm_gsd if spec.dsm_gsd is not None else 5.0 * spec.gsd
    nd = int(round(spec.extent / dsm_gsd))
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _SEED_SCENE]))

    # texture
    if spec.texture.period_m > 0:
        np_patch = int(round(spec.texture.period_m / spec.gsd))
        patch = _normalize01(
            _multi_octave(rng, np_patch, np_patch, spec.texture.period_m,
                          spec.texture.octaves, spec.texture.persistence))
        reps = -(-n // np_patch)
        tex01 = np.tile(patch, (reps, reps))[:n, :n]
    else:
        tex01 = _normalize01(
            _multi_octave(rng, n, n, spec.extent,
                          spec.texture.octaves, spec.texture.persistence))
    ortho = 20.0 + 215.0 * tex01

    # terrain at DSM resolution
    t = spec.terrain
    if t.kind == "hills" and t.amplitude > 0:
        cells = max(2, int(round(spec.extent / t.wavelength)))
        raw = _value_noise(rng, nd, nd, cells)
        dsm = t.amplitude * (2.0 * _normalize01(raw) - 1.0)
    else:
        dsm = np.zeros((nd, nd))

    if t.kind == "urban":
        hectares = (spec.extent / 100.0) ** 2
        count = max(1, int(round(t.building_density * hectares)))
        margin = 0.05 * spec.extent
        for _ in range(count):
            bw = rng.uniform(8.0, 25.0)
            bl = rng.uniform(8.0, 25.0)
            bh = rng.uniform(*t.height_range)
            x0 = rng.uniform(margin, spec.extent - margin - bw)
            y0 = rng.uniform(margin, spec.extent - margin - bl)
            # DSM footprint (row 0 is the north edge)
            c0, c1 = int(x0 / dsm_gsd), int(math.ceil((x0 + bw) / dsm_gsd))
            r0, r1 = int(y0 / dsm_gsd), int(math.ceil((y0 + bl) / dsm_gsd))
            block = dsm[r0:r1, c0:c1]
            if block.size == 0:
                continue
            dsm[r0:r1, c0:c1] = np.maximum(block, block.mean() + bh)
            # distinct rooftop texture
            oc0, oc1 = int(x0 / spec.gsd), int(math.ceil((x0 + bw) / spec.gsd))
            or0, or1 = int(y0 / spec.gsd), int(math.ceil((y0 + bl) / spec.gsd))
            gain = rng.uniform(0.3, 0.8)
            offset = rng.uniform(40.0, 170.0)
            ortho[or0:or1, oc0:oc1] = offset + gain * (ortho[or0:or1, oc0:oc1] - 128.0)

    ortho_px = np.clip(np.round(ortho), 0, 255).astype(np.uint8)
    og = GeoTransform(
        UtmCoord(spec.origin_e, spec.origin_n, spec.zone, spec.hemisphere),
        spec.gsd, n, n)
    # DSM pixel (0,0) center sits at the center of its larger cell
    dg = GeoTransform(
        UtmCoord(spec.origin_e + (dsm_gsd - spec.gsd) / 2.0,
                 spec.origin_n - (dsm_gsd - spec.gsd) / 2.0,
                 spec.zone, spec.hemisphere),
        dsm_gsd, nd, nd)
    return RefMap25D(
        ortho=Raster(ortho_px, og),
        dsm=Raster(dsm.astype(np.float32), dg),
        label="aerial",
    )


# ---------------------------------------------------------------------------
# ray casting


class _HeightField:
    """Bilinear DSM lookup in world coordinates with inside-extent tracking."""

    def __init__(self, rmap: RefMap25D):
        g = rmap.dsm.geot
        self.px = np.asarray(rmap.dsm.pixels, dtype=np.float32)
        self.oe = g.origin.easting
        self.on = g.origin.northing
        self.ps = g.pixel_size
        self.cols = g.cols
        self.rows = g.rows
        self.h_max = float(self.px.max())

    def sample(self, x, y):
        gx = (x - self.oe) / self.ps
        gy = (self.on - y) / self.ps
        inside = (gx >= -0.5) & (gx <= self.cols - 0.5) & \
                 (gy >= -0.5) & (gy <= self.rows - 0.5)
        h = np.full(np.shape(x), -np.inf)
        if np.any(inside):
            h[inside] = bilinear_sample(self.px, gx[inside], gy[inside])
        return h, inside


def _march(field: _HeightField, origin: np.ndarray, dirs: np.ndarray,
           step_min: float, t_max: float = 5000.0) -> np.ndarray:
    """First terrain intersection per ray, NaN for misses.

    Steps are proportional to the clearance above the terrain (never below
    ``step_min``); the first bracketed crossing is refined by bisection, so
    returned hit points sit on the surface to within a small fraction of a
    step.
    """
    n = len(dirs)
    t = np.zeros(n)
    dz = dirs[:, 2]
    desc = dz < -1e-12
    # fast-forward descending rays to the maximum-height plane
    t[desc] = np.maximum(0.0, (origin[2] - field.h_max) / -dz[desc] - step_min)
    t_hit = np.full(n, np.nan)
    alive = desc | (origin[2] < field.h_max)
    idx = np.nonzero(alive)[0]
    ti = t[alive]
    di = dirs[alive]
    last_step = np.full(len(idx), max(step_min, 1.0))
    entered = np.zeros(len(idx), dtype=bool)

    while len(idx):
        p = origin[None, :] + ti[:, None] * di
        h, inside = field.sample(p[:, 0], p[:, 1])
        crossed = (p[:, 2] <= h) & inside
        if crossed.any():
            lo = np.maximum(ti[crossed] - last_step[crossed], 0.0)
            hi = ti[crossed]
            dc = di[crossed]
            for _ in range(28):
                mid = 0.5 * (lo + hi)
                pm = origin[None, :] + mid[:, None] * dc
                hm, _ = field.sample(pm[:, 0], pm[:, 1])
                under = pm[:, 2] <= hm
                hi = np.where(under, mid, hi)
                lo = np.where(under, lo, mid)
            t_hit[idx[crossed]] = hi
        # a straight ray that has entered and then left the raster cannot return
        gone = crossed | (ti > t_max) | (~inside & entered)
        entered = entered | inside
        clearance = p[:, 2] - np.where(np.isfinite(h), h, field.h_max)
        step = np.clip(0.5 * clearance, step_min, 60.0)
        ti = ti + step
        keep = ~gone
        idx, ti, di = idx[keep], ti[keep], di[keep]
        last_step = step[keep]
        entered = entered[keep]
    return t_hit


def _pixel_dirs(intr: CameraIntrinsics, rot: np.ndarray, us, vs) -> np.ndarray:
    x = (np.asarray(us, dtype=np.float64) - intr.principal_x) / intr.focal_x
    y = (np.asarray(vs, dtype=np.float64) - intr.principal_y) / intr.focal_y
    d = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d @ rot  # rows were world->cam; right-multiplying applies R^T


def cast_pixel_rays(rmap: RefMap25D, pose: CameraPose, intr: CameraIntrinsics,
                    us, vs, step_min: float | None = None):
    """Ray-cast query pixels into the heightfield.

    Returns (world xyz hits (n, 3), hit mask (n,)).
    """
    field_ = _HeightField(rmap)
    if step_min is None:
        step_min = 0.5 * rmap.dsm.geot.pixel_size
    dirs = _pixel_dirs(intr, pose.orientation, us, vs)
    origin = pose.center_xyz()
    t_hit = _march(field_, origin, dirs, step_min)
    hit = np.isfinite(t_hit)
    pts = origin[None, :] + np.where(hit, t_hit, 0.0)[:, None] * dirs
    return pts, hit


def footprint_center(rmap: RefMap25D, pose: CameraPose,
                     intr: CameraIntrinsics) -> tuple[float, float] | None:
    """Ground intersection of the principal ray, or None if it misses."""
    pts, hit = cast_pixel_rays(rmap, pose, intr,
                               [intr.principal_x], [intr.principal_y])
    if not hit[0]:
        return None
    return float(pts[0, 0]), float(pts[0, 1])


def render_view(rmap: RefMap25D, pose: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
    """Render a grayscale view of the scene by per-pixel ray marching.

    Ground and roof hits sample the orthophoto bilinearly. Hits on vertical
    DSM faces (point well below the local surface sample) get a procedural
    facade pattern instead, since the orthophoto carries no side-view
    content. Rays that miss the map render black (sky).

    Raises:
        ValueError: camera below the terrain, or principal ray misses the map.
    """
    field_ = _HeightField(rmap)
    cam_h, cam_inside = field_.sample(np.array([pose.center.easting]),
                                      np.array([pose.center.northing]))
    if cam_inside[0] and pose.altitude <= cam_h[0]:
        raise ValueError(
            f"camera altitude {pose.altitude} is below terrain ({cam_h[0]})")
    if footprint_center(rmap, pose, intr) is None:
        raise ValueError("principal ray does not intersect the map")

    w, h = intr.width, intr.height
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    step_min = 0.5 * rmap.dsm.geot.pixel_size
    pts, hit = cast_pixel_rays(rmap, pose, intr, us.ravel(), vs.ravel(),
                               step_min=step_min)

    img = np.zeros(w * h, dtype=np.float64)
    if hit.any():
        hx, hy, hz = pts[hit, 0], pts[hit, 1], pts[hit, 2]
        surf, _ = field_.sample(hx, hy)
        wall = (surf - hz) > 4.0 * step_min
        og = rmap.ortho.geot
        gx = np.clip((hx - og.origin.easting) / og.pixel_size, 0, og.cols - 1)
        gy = np.clip((og.origin.northing - hy) / og.pixel_size, 0, og.rows - 1)
        shade = bilinear_sample(to_gray(np.asarray(rmap.ortho.pixels)), gx, gy)
        if wall.any():
            # banded facade pattern, deterministic in world position
            zz = hz[wall]
            frac = np.sin(hx[wall] * 12.9898 + hy[wall] * 78.233 + zz * 37.719)
            frac = (frac * 43758.5453) % 1.0
            shade[wall] = np.clip(
                110.0 + 60.0 * np.sin(2.0 * np.pi * zz / 3.0) + 45.0 * frac,
                0, 255)
        img[hit] = shade
    return np.clip(np.round(img), 0, 255).astype(np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# flights


@dataclass(frozen=True)
class FlightSpec:
    frame_count: int = 20
    altitude_range: tuple[float, float] = (60.0, 150.0)
    pitch_range: tuple[float, float] = (20.0, 90.0)
    yaw_range: tuple[float, float] = (0.0, 360.0)   # uniform
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    seed: int = 0

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")
        if not 30.0 <= self.altitude_range[0] <= self.altitude_range[1] <= 300.0:
            raise ValueError(f"altitude range {self.altitude_range} outside [30, 300]")
        if not 20.0 <= self.pitch_range[0] <= self.pitch_range[1] <= 90.0:
            raise ValueError(f"pitch range {self.pitch_range} outside [20, 90]")


@dataclass
class UavFrame:
    """One query: image, intrinsics, prior, and exact ground truth."""

    id: str
    index: int
    image: np.ndarray
    intrinsics: CameraIntrinsics
    prior: PriorState
    gt_pose: CameraPose
    gt_footprint: tuple[float, float]   # principal-ray ground hit (E, N)
    gt_pitch: float = 90.0
    gt_yaw: float = 0.0

    def gt_position(self) -> UtmCoord:
        return self.gt_pose.center

    def with_prior(self, prior: PriorState) -> "UavFrame":
        """Copy of this frame carrying a (typically noise-injected) prior."""
        from dataclasses import replace
        return replace(self, prior=prior)


def _sample_frame_geometry(rmap: RefMap25D, fspec: FlightSpec, rng):
    """Sample (pose, prior, footprint) with both the camera and the
    principal-ray ground hit inside the map."""
    field_ = _HeightField(rmap)
    g = rmap.ortho.geot
    e0, e1 = g.origin.easting, g.origin.easting + (g.cols - 1) * g.pixel_size
    n1, n0 = g.origin.northing, g.origin.northing - (g.rows - 1) * g.pixel_size
    inner = 0.15 * (e1 - e0)
    for _ in range(200):
        pitch = rng.uniform(*fspec.pitch_range)
        alt_gl = rng.uniform(*fspec.altitude_range)
        target_e = rng.uniform(e0 + inner, e1 - inner)
        target_n = rng.uniform(n0 + inner, n1 - inner)
        yaw = rng.uniform(*fspec.yaw_range) % 360.0
        ground_t, _ = field_.sample(np.array([target_e]), np.array([target_n]))
        # place the camera back along the heading so the principal ray lands
        # near the target (flat-ground approximation, verified by ray cast)
        dist = alt_gl / math.tan(math.radians(pitch)) if pitch < 90 else 0.0
        psi = math.radians(yaw)
        cam_e = target_e - dist * math.sin(psi)
        cam_n = target_n - dist * math.cos(psi)
        if not (e0 + 2 <= cam_e <= e1 - 2 and n0 + 2 <= cam_n <= n1 - 2):
            continue
        cam_ground, inside = field_.sample(np.array([cam_e]), np.array([cam_n]))
        if not inside[0]:
            continue
        cam_z = float(cam_ground[0]) + alt_gl
        pose = CameraPose(
            center=UtmCoord(cam_e, cam_n, g.origin.zone, g.origin.hemisphere),
            altitude=cam_z,
            orientation=rotation_from_yaw_pitch(yaw, pitch),
        )
        fp = footprint_center(rmap, pose, fspec.intrinsics)
        if fp is None:
            continue
        if not (e0 + 1 <= fp[0] <= e1 - 1 and n0 + 1 <= fp[1] <= n1 - 1):
            continue
        prior = PriorState(altitude=alt_gl, pitch=pitch, yaw=yaw)
        return pose, prior, fp
    raise RuntimeError("could not place a frame inside the map; "
                       "check flight ranges against the scene extent")


def generate_flight(rmap: RefMap25D, fspec: FlightSpec, out_dir) -> list[UavFrame]:
    """Render a flight over the map and write frames plus a JSON manifest.

    The prior is derived from the exact pose and carries no noise; noise
    injection happens downstream and never touches the ground truth here.
    """
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    frames = []
    manifest_frames = []
    for i in range(fspec.frame_count):
        rng = np.random.default_rng(
            np.random.SeedSequence([fspec.seed, _SEED_FLIGHT, i]))
        pose, prior, fp = _sample_frame_geometry(rmap, fspec, rng)
        image = render_view(rmap, pose, fspec.intrinsics)
        frame_id = f"frame_{i:04d}"
        rel = f"frames/{frame_id}.png"
        Image.fromarray(image).save(out_dir / rel, format="PNG")
        # the noise-free prior carries the exact sampled attitude
        yaw, pitch = prior.yaw, prior.pitch
        manifest_frames.append({
            "id": frame_id,
            "image": rel,
            "intrinsics": {
                "focal_x": fspec.intrinsics.focal_x,
                "focal_y": fspec.intrinsics.focal_y,
                "principal_x": fspec.intrinsics.principal_x,
                "principal_y": fspec.intrinsics.principal_y,
                "width": fspec.intrinsics.width,
                "height": fspec.intrinsics.height,
            },
            "gt": {
                "easting": pose.center.easting,
                "northing": pose.center.northing,
                "altitude": pose.altitude,
                "pitch": pitch,
                "yaw": yaw,
                "footprint_e": fp[0],
                "footprint_n": fp[1],
            },
            "prior": {
                "altitude": prior.altitude,
                "pitch": prior.pitch,
                "yaw": prior.yaw,
            },
        })
        frames.append(UavFrame(
            id=frame_id, index=i, image=image, intrinsics=fspec.intrinsics,
            prior=prior, gt_pose=pose, gt_footprint=fp,
            gt_pitch=pitch, gt_yaw=yaw,
        ))
    manifest = {
        "zone": rmap.ortho.geot.origin.zone,
        "hemisphere": rmap.ortho.geot.origin.hemisphere,
        "frames": manifest_frames,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))
    return frames


def load_dataset(dataset_dir) -> list[UavFrame]:
    """Read a flight manifest and its frame images back into UavFrames."""
    dataset_dir = Path(dataset_dir)
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    zone = int(manifest["zone"])
    hemisphere = manifest["hemisphere"]
    frames = []
    for i, rec in enumerate(manifest["frames"]):
        intr = CameraIntrinsics(**rec["intrinsics"])
        gt = rec["gt"]
        pose = CameraPose(
            center=UtmCoord(gt["easting"], gt["northing"], zone, hemisphere),
            altitude=gt["altitude"],
            orientation=rotation_from_yaw_pitch(gt["yaw"], gt["pitch"]),
        )
        image = np.asarray(Image.open(dataset_dir / rec["image"]))
        frames.append(UavFrame(
            id=rec["id"],
            index=i,
            image=image,
            intrinsics=intr,
            prior=PriorState(**rec["prior"]),
            gt_pose=pose,
            gt_footprint=(gt["footprint_e"], gt["footprint_n"]),
            gt_pitch=gt["pitch"],
            gt_yaw=gt["yaw"],
        ))
    return frames


# ---------------------------------------------------------------------------
# oracle artifacts


def _oracle_rays(frame: UavFrame, rmap: RefMap25D, n: int, seed: int):
    """Cast n seeded query pixels to the terrain; returns (query px, map px,
    hit mask) with map pixels in full-orthophoto coordinates."""
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, _SEED_ORACLE, frame.index]))
    intr = frame.intrinsics
    us = rng.uniform(2.0, intr.width - 3.0, size=n)
    vs = rng.uniform(2.0, intr.height - 3.0, size=n)
    pts, hit = cast_pixel_rays(rmap, frame.gt_pose, intr, us, vs)
    og = rmap.ortho.geot
    mu = (pts[:, 0] - og.origin.easting) / og.pixel_size
    mv = (og.origin.northing - pts[:, 1]) / og.pixel_size
    inside = hit & (mu >= -0.5) & (mu <= og.cols - 0.5) \
                 & (mv >= -0.5) & (mv <= og.rows - 0.5)
    return np.stack([us, vs], axis=1), np.stack([mu, mv], axis=1), inside


def export_oracle_matches(frame: UavFrame, rmap: RefMap25D, n: int, path,
                          noise_px: float = 0.0, outlier_fraction: float = 0.0,
                          seed: int = 0):
    """Write exact query-pixel to map-pixel correspondences as CSV.

    Optional Gaussian pixel noise and a uniform-random outlier fraction are
    injected with the given seed, which makes these files direct inputs for
    robust-solver stress tests.
    """
    qpx, mpx, ok = _oracle_rays(frame, rmap, n, seed)
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, _SEED_ORACLE, frame.index, 1]))
    og = rmap.ortho.geot
    lines = ["qx,qy,rx,ry"]
    for i in range(n):
        if not ok[i]:
            continue
        rx, ry = mpx[i]
        if outlier_fraction > 0 and rng.random() < outlier_fraction:
            rx = rng.uniform(0, og.cols - 1)
            ry = rng.uniform(0, og.rows - 1)
        elif noise_px > 0:
            rx += noise_px * rng.standard_normal()
            ry += noise_px * rng.standard_normal()
        rx = min(max(rx, 0.0), og.cols - 1.0)
        ry = min(max(ry, 0.0), og.rows - 1.0)
        lines.append(f"{float(qpx[i, 0])!r},{float(qpx[i, 1])!r},"
                     f"{float(rx)!r},{float(ry)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


class OracleMatcher:
    """Geometric stand-in for a learned matcher.

    Produces exact (optionally noised) correspondences between a frame and
    a tile by ray casting, restricted to rays whose ground hits fall inside
    the tile. A frame whose footprint does not overlap the tile yields too
    few matches, which is exactly how a real matcher fails there.
    """

    def __init__(self, rmap: RefMap25D, rays: int = 250, noise_px: float = 0.0,
                 outlier_fraction: float = 0.0, seed: int = 0):
        self.rmap = rmap
        self.rays = rays
        self.noise_px = noise_px
        self.outlier_fraction = outlier_fraction
        self.seed = seed
        self._cache: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def _frame_rays(self, frame: UavFrame):
        if frame.index not in self._cache:
            self._cache[frame.index] = _oracle_rays(
                frame, self.rmap, self.rays, self.seed)
        return self._cache[frame.index]

    def match(self, frame: UavFrame, tile: GalleryTile, warpctx=None) -> MatchSet:
        qpx, mpx, ok = self._frame_rays(frame)
        size = tile.width_px
        tx = mpx[:, 0] - tile.col0
        ty = mpx[:, 1] - tile.row0
        inside = ok & (tx >= 0) & (tx <= size - 1) & (ty >= 0) & (ty <= size - 1)
        rng = np.random.default_rng(np.random.SeedSequence(
            [self.seed, _SEED_ORACLE, frame.index, tile.id, 2]))
        pairs = []
        for i in np.nonzero(inside)[0]:
            rx, ry = float(tx[i]), float(ty[i])
            if self.outlier_fraction > 0 and rng.random() < self.outlier_fraction:
                rx = rng.uniform(0, size - 1)
                ry = rng.uniform(0, size - 1)
            elif self.noise_px > 0:
                rx = min(max(rx + self.noise_px * rng.standard_normal(), 0.0), size - 1.0)
                ry = min(max(ry + self.noise_px * rng.standard_normal(), 0.0), size - 1.0)
            pairs.append(((float(qpx[i, 0]), float(qpx[i, 1])), (rx, ry)))
        return MatchSet(pairs=pairs, source="imported")


def synthetic_embeddings(
    tiles: list[GalleryTile],
    frames: list[UavFrame],
    dim: int = 64,
    length_scale: float | None = None,
    query_position_noise_m: float = 0.0,
    seed: int = 0,
) -> EmbeddingTable:
    """Geo-coded random-Fourier-feature embeddings for tiles and queries.

    Cosine similarity between two embeddings decays like a Gaussian kernel
    of the ground distance between the encoded positions, which emulates a
    well-behaved learned retrieval model. Query positions are the exact
    ground-truth footprints, optionally perturbed per frame to emulate
    retrieval degradation.
    """
    if not tiles:
        raise ValueError("need at least one tile")
    if length_scale is None:
        length_scale = 0.5 * tiles[0].width_px * tiles[0].resolution
    rng = np.random.default_rng(np.random.SeedSequence([seed, _SEED_EMBED]))
    freqs = rng.standard_normal((dim, 2)) / length_scale
    phases = rng.uniform(0.0, 2.0 * np.pi, size=dim)

    def encode(e, n):
        v = np.cos(freqs @ np.array([e, n]) + phases)
        return v / np.linalg.norm(v)

    vectors = {}
    for tile in tiles:
        vectors[tile_key(tile.id)] = encode(tile.center.easting, tile.center.northing)
    for frame in frames:
        e, n = frame.gt_footprint
        if query_position_noise_m > 0:
            frng = np.random.default_rng(np.random.SeedSequence(
                [seed, _SEED_EMBED, frame.index, 3]))
            e += query_position_noise_m * frng.standard_normal()
            n += query_position_noise_m * frng.standard_normal()
        vectors[frame.id] = encode(e, n)
    return EmbeddingTable(vectors)
