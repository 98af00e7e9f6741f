"""2.5D reference maps: orthophoto + DSM rasters sharing a UTM frame.

Loading, DSM sampling, 3D lifting of map pixels, gallery tiling, and a
controlled degradation path that emulates satellite-quality maps from
aerial-quality ones.

On-disk formats:
  * orthophoto: 8-bit PNG, RGB or grayscale
  * DSM: row-major little-endian float32 binary
  * sidecar: JSON declaring both geo-transforms, see :func:`load_refmap`
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geo import GeoTransform, UtmCoord, ZoneMismatchError, pixel_to_world, world_to_pixel
from .imops import block_mean, block_sum, resize_bilinear


class MapLoadError(Exception):
    """Reference map files could not be loaded."""


class HeaderError(MapLoadError):
    """Sidecar metadata is malformed or inconsistent with the raster files."""


class ExtentMismatchError(MapLoadError):
    """DSM extent does not cover the orthophoto extent."""


class SampleError(ValueError):
    """A DSM sample was requested outside the raster or in an all-void area."""


@dataclass
class Raster:
    """A georeferenced pixel grid. ``pixels`` is HxW (gray / float) or HxWx3."""

    pixels: np.ndarray
    geot: GeoTransform
    nodata: float | None = None

    def __post_init__(self):
        h, w = self.pixels.shape[:2]
        if (h, w) != (self.geot.rows, self.geot.cols):
            raise HeaderError(
                f"raster is {h}x{w} but geo-transform declares "
                f"{self.geot.rows}x{self.geot.cols}"
            )
        self.pixels.setflags(write=False)

    def area_extent(self) -> tuple[float, float, float, float]:
        """(east_min, east_max, north_min, north_max) of the covered ground area.

        The origin references the center of pixel (0, 0), so the covered
        area extends half a pixel beyond the outermost pixel centers.
        """
        g = self.geot
        half = 0.5 * g.pixel_size
        e0 = g.origin.easting - half
        n1 = g.origin.northing + half
        return (e0, e0 + g.cols * g.pixel_size, n1 - g.rows * g.pixel_size, n1)


@dataclass
class RefMap25D:
    """Orthophoto plus DSM in one UTM frame; the localization substrate."""

    ortho: Raster
    dsm: Raster
    label: str = "aerial"

    def __post_init__(self):
        if self.label not in ("aerial", "satellite"):
            raise ValueError(f"label must be 'aerial' or 'satellite', got {self.label!r}")
        if not self.ortho.geot.origin.same_zone(self.dsm.geot.origin):
            raise ZoneMismatchError("orthophoto and DSM are in different UTM zones")
        oe = self.ortho.area_extent()
        de = self.dsm.area_extent()
        tol = 1e-6
        if not (de[0] <= oe[0] + tol and de[1] >= oe[1] - tol
                and de[2] <= oe[2] + tol and de[3] >= oe[3] - tol):
            raise ExtentMismatchError(
                f"DSM extent {de} does not cover orthophoto extent {oe}"
            )

    @property
    def gsd(self) -> float:
        return self.ortho.geot.pixel_size


@dataclass(frozen=True)
class GalleryTile:
    """One retrieval candidate: a square window of the orthophoto.

    ``image`` is a read-only view into the map raster, not a copy.
    ``col0``/``row0`` locate the window inside the full orthophoto so tile
    pixel coordinates can be mapped back to map pixel coordinates.
    """

    id: int
    image: np.ndarray
    center: UtmCoord
    width_px: int
    resolution: float
    col0: int
    row0: int

    def tile_to_map_px(self, u: float, v: float) -> tuple[float, float]:
        return u + self.col0, v + self.row0


def _load_geot(d: dict, zone: int, hemisphere: str) -> GeoTransform:
    try:
        return GeoTransform(
            origin=UtmCoord(float(d["origin_e"]), float(d["origin_n"]), zone, hemisphere),
            pixel_size=float(d["pixel_size"]),
            rows=int(d["rows"]),
            cols=int(d["cols"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"bad geo-transform block: {exc}") from exc


def load_refmap(ortho_path, dsm_path, sidecar_path, label: str = "aerial") -> RefMap25D:
    """Load and validate an orthophoto + DSM pair described by a JSON sidecar.

    Sidecar schema::

        {"utm_zone": 50, "hemisphere": "north",
         "ortho": {"origin_e":..., "origin_n":..., "pixel_size":..., "rows":..., "cols":...},
         "dsm":   {...same fields...},
         "nodata": -9999.0}

    Raises:
        HeaderError: missing/invalid sidecar fields or shape mismatches.
        ExtentMismatchError: DSM does not cover the orthophoto.
        MapLoadError: unreadable files.
    """
    try:
        sidecar = json.loads(Path(sidecar_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise HeaderError(f"cannot read sidecar {sidecar_path}: {exc}") from exc
    try:
        zone = int(sidecar["utm_zone"])
        hemisphere = str(sidecar["hemisphere"])
        ortho_gt = _load_geot(sidecar["ortho"], zone, hemisphere)
        dsm_gt = _load_geot(sidecar["dsm"], zone, hemisphere)
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"bad sidecar {sidecar_path}: {exc}") from exc
    nodata = sidecar.get("nodata")
    nodata = float(nodata) if nodata is not None else None

    try:
        ortho_px = np.asarray(Image.open(ortho_path))
    except OSError as exc:
        raise MapLoadError(f"cannot read orthophoto {ortho_path}: {exc}") from exc
    try:
        dsm_px = np.fromfile(dsm_path, dtype="<f4").reshape(dsm_gt.rows, dsm_gt.cols)
    except (OSError, ValueError) as exc:
        raise HeaderError(f"DSM {dsm_path} does not match declared shape: {exc}") from exc

    ortho = Raster(ortho_px, ortho_gt)
    dsm = Raster(dsm_px, dsm_gt, nodata=nodata)
    return RefMap25D(ortho=ortho, dsm=dsm, label=label)


def save_refmap(rmap: RefMap25D, ortho_path, dsm_path, sidecar_path):
    """Write a map in the formats :func:`load_refmap` reads."""
    Image.fromarray(np.asarray(rmap.ortho.pixels)).save(ortho_path, format="PNG")
    np.asarray(rmap.dsm.pixels, dtype="<f4").tofile(dsm_path)
    og, dg = rmap.ortho.geot, rmap.dsm.geot
    sidecar = {
        "utm_zone": og.origin.zone,
        "hemisphere": og.origin.hemisphere,
        "ortho": {"origin_e": og.origin.easting, "origin_n": og.origin.northing,
                  "pixel_size": og.pixel_size, "rows": og.rows, "cols": og.cols},
        "dsm": {"origin_e": dg.origin.easting, "origin_n": dg.origin.northing,
                "pixel_size": dg.pixel_size, "rows": dg.rows, "cols": dg.cols},
        "nodata": rmap.dsm.nodata,
    }
    Path(sidecar_path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def sample_dsm(rmap: RefMap25D, c: UtmCoord) -> float:
    """Bilinear DSM elevation at a world point.

    Void (nodata) neighbors are excluded and the remaining weights are
    renormalized, so isolated voids degrade gracefully instead of failing.

    Raises:
        SampleError: point outside the DSM extent, or all four neighbors void.
    """
    g = rmap.dsm.geot
    u, v = world_to_pixel(g, c)
    if not (-0.5 <= u <= g.cols - 0.5 and -0.5 <= v <= g.rows - 0.5):
        raise SampleError(f"point ({c.easting}, {c.northing}) outside DSM extent")
    x0 = min(max(int(np.floor(u)), 0), max(g.cols - 2, 0))
    y0 = min(max(int(np.floor(v)), 0), max(g.rows - 2, 0))
    x1 = min(x0 + 1, g.cols - 1)
    y1 = min(y0 + 1, g.rows - 1)
    fx = min(max(u - x0, 0.0), 1.0)
    fy = min(max(v - y0, 0.0), 1.0)
    px = rmap.dsm.pixels
    vals = np.array([px[y0, x0], px[y0, x1], px[y1, x0], px[y1, x1]], dtype=np.float64)
    wts = np.array([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    if rmap.dsm.nodata is not None:
        ok = vals != rmap.dsm.nodata
        if not ok.any():
            raise SampleError(
                f"all DSM neighbors void at ({c.easting}, {c.northing})"
            )
        vals, wts = vals[ok], wts[ok]
        tot = wts.sum()
        if tot <= 0:
            # the point sits exactly on void-only corners
            return float(vals.mean())
        wts = wts / tot
    return float(vals @ wts)


def lift_to_3d(rmap: RefMap25D, u: float, v: float) -> tuple[UtmCoord, float]:
    """Map an orthophoto pixel to (UTM position, DSM elevation)."""
    g = rmap.ortho.geot
    if not (-0.5 <= u <= g.cols - 0.5 and -0.5 <= v <= g.rows - 0.5):
        raise SampleError(f"pixel ({u}, {v}) outside the orthophoto")
    c = pixel_to_world(g, u, v)
    return c, sample_dsm(rmap, c)


def _tile_starts(size_px: int, stride_px: int, total_px: int) -> list[int]:
    starts = list(range(0, total_px - size_px + 1, stride_px))
    last = total_px - size_px
    if starts[-1] != last:
        starts.append(last)
    return starts


def build_gallery(rmap: RefMap25D, footprint_m: float, overlap_fraction: float = 0.5) -> list[GalleryTile]:
    """Cut the orthophoto into a regular grid of square retrieval tiles.

    Tiles are ``footprint_m`` on a side with stride ``footprint_m * (1 -
    overlap_fraction)``; edge tiles are clamped inside the map so every
    orthophoto pixel is covered at least once. Ids are assigned row-major.
    """
    if not 0 <= overlap_fraction < 1:
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    g = rmap.ortho.geot
    size_px = int(round(footprint_m / g.pixel_size))
    if size_px < 1:
        raise ValueError(f"footprint {footprint_m} m is below one pixel")
    if size_px > g.cols or size_px > g.rows:
        raise ValueError(
            f"footprint {footprint_m} m exceeds the map extent "
            f"({g.cols * g.pixel_size} x {g.rows * g.pixel_size} m)"
        )
    stride_px = max(1, int(round(size_px * (1.0 - overlap_fraction))))
    tiles = []
    tid = 0
    for row0 in _tile_starts(size_px, stride_px, g.rows):
        for col0 in _tile_starts(size_px, stride_px, g.cols):
            cu = col0 + (size_px - 1) / 2.0
            cv = row0 + (size_px - 1) / 2.0
            tiles.append(
                GalleryTile(
                    id=tid,
                    image=rmap.ortho.pixels[row0:row0 + size_px, col0:col0 + size_px],
                    center=pixel_to_world(g, cu, cv),
                    width_px=size_px,
                    resolution=g.pixel_size,
                    col0=col0,
                    row0=row0,
                )
            )
            tid += 1
    return tiles


@dataclass(frozen=True)
class DegradeParams:
    """Knobs for emulating a lower-quality (satellite-like) map."""

    target_gsd: float
    dsm_gsd: float
    photometric_shift: float = 0.0
    seed: int = 0


def _degrade_ortho(px: np.ndarray, factor: int, shift: float, rng) -> np.ndarray:
    out = np.asarray(px, dtype=np.float64)
    if factor > 1:
        coarse = block_mean(out, factor)
        out = resize_bilinear(coarse, px.shape[0], px.shape[1])
    if shift > 0:
        channels = 1 if out.ndim == 2 else out.shape[2]
        gain = 1.0 + shift * rng.uniform(-1.0, 1.0, size=channels)
        offset = 32.0 * shift * rng.uniform(-1.0, 1.0, size=channels)
        # low-frequency seeded mottle, shared across channels
        grid = rng.standard_normal((8, 8))
        mottle = resize_bilinear(grid, px.shape[0], px.shape[1]) * 16.0 * shift
        if out.ndim == 3:
            out = out * gain[None, None, :] + offset[None, None, :] + mottle[..., None]
        else:
            out = out * gain[0] + offset[0] + mottle
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def degrade_map(rmap: RefMap25D, params: DegradeParams) -> RefMap25D:
    """Return a degraded copy: blurred orthophoto, block-averaged DSM,
    deterministic photometric shift. The result is labeled ``satellite``.

    Degradation is a pure function of (map, params): the same seed gives
    identical output.
    """
    g = rmap.ortho.geot
    if params.target_gsd < g.pixel_size - 1e-12:
        raise ValueError("target_gsd must be >= the current ground sampling distance")
    factor = max(1, int(round(params.target_gsd / g.pixel_size)))
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, 0xD16]))

    if factor == 1 and params.photometric_shift == 0:
        ortho_px = np.asarray(rmap.ortho.pixels).copy()
    else:
        ortho_px = _degrade_ortho(rmap.ortho.pixels, factor, params.photometric_shift, rng)
    ortho = Raster(ortho_px, g)

    dg = rmap.dsm.geot
    dsm_factor = max(1, int(round(params.dsm_gsd / dg.pixel_size)))
    if dsm_factor == 1:
        dsm = Raster(np.asarray(rmap.dsm.pixels).copy(), dg, nodata=rmap.dsm.nodata)
    else:
        px = np.asarray(rmap.dsm.pixels, dtype=np.float64)
        if rmap.dsm.nodata is not None:
            ok = (px != rmap.dsm.nodata).astype(np.float64)
            sums = block_sum(np.where(ok > 0, px, 0.0), dsm_factor)
            counts = block_sum(ok, dsm_factor)
            with np.errstate(invalid="ignore"):
                coarse = np.where(counts > 0, sums / np.maximum(counts, 1e-300), rmap.dsm.nodata)
        else:
            coarse = block_mean(px, dsm_factor)
        new_ps = dg.pixel_size * dsm_factor
        # origin stays at the center of the new (larger) pixel (0, 0)
        new_origin = UtmCoord(
            dg.origin.easting + (new_ps - dg.pixel_size) / 2.0,
            dg.origin.northing - (new_ps - dg.pixel_size) / 2.0,
            dg.origin.zone,
            dg.origin.hemisphere,
        )
        new_gt = GeoTransform(new_origin, new_ps, coarse.shape[0], coarse.shape[1])
        dsm = Raster(coarse.astype(np.float32), new_gt, nodata=rmap.dsm.nodata)

    return RefMap25D(ortho=ortho, dsm=dsm, label="satellite")
