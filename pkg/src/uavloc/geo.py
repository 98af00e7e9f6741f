"""Coordinate frames, camera model, pose types, and the planar localization error.

Conventions used throughout the package:

  World frame (right-handed):
    X = UTM easting (meters), Y = UTM northing (meters), Z = up (meters
    above the map datum).

  Camera frame (right-handed, standard computer vision):
    X = right in the image, Y = down in the image, Z = forward along the
    optical axis. The orientation matrix R maps world vectors into camera
    vectors: x_cam = R @ (x_world - center).

  Raster frame:
    Column index u increases eastward, row index v increases southward.
    Pixel coordinates reference pixel centers.

  Angles:
    yaw   = compass heading in degrees, 0 = north, 90 = east, in [0, 360).
    pitch = angle between the optical axis and the horizontal plane in
            degrees; 90 = straight down (nadir).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ZoneMismatchError(ValueError):
    """Two UTM coordinates (or a coordinate and a raster) are in different zones."""


@dataclass(frozen=True)
class UtmCoord:
    """A planimetric UTM position."""

    easting: float
    northing: float
    zone: int = 50
    hemisphere: str = "north"

    def __post_init__(self):
        if not 1 <= self.zone <= 60:
            raise ValueError(f"UTM zone {self.zone} outside [1, 60]")
        if not 100_000.0 <= self.easting < 900_000.0:
            raise ValueError(f"easting {self.easting} outside [100000, 900000)")
        if self.hemisphere not in ("north", "south"):
            raise ValueError(f"hemisphere must be 'north' or 'south', got {self.hemisphere!r}")

    def same_zone(self, other: "UtmCoord") -> bool:
        return self.zone == other.zone and self.hemisphere == other.hemisphere


@dataclass(frozen=True)
class GeoTransform:
    """Affine mapping between raster pixels and UTM, square pixels, north-up.

    ``origin`` is the world position of the center of pixel (0, 0).
    """

    origin: UtmCoord
    pixel_size: float
    rows: int
    cols: int

    def __post_init__(self):
        if self.pixel_size <= 0:
            raise ValueError(f"pixel_size must be > 0, got {self.pixel_size}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"raster must be at least 1x1, got {self.rows}x{self.cols}")


def pixel_to_world(gt: GeoTransform, u: float, v: float) -> UtmCoord:
    """World position of (possibly fractional) pixel (u, v); extrapolation allowed."""
    return UtmCoord(
        easting=gt.origin.easting + u * gt.pixel_size,
        northing=gt.origin.northing - v * gt.pixel_size,
        zone=gt.origin.zone,
        hemisphere=gt.origin.hemisphere,
    )


def world_to_pixel(gt: GeoTransform, c: UtmCoord) -> tuple[float, float]:
    """Exact inverse of :func:`pixel_to_world`; fractional pixels allowed."""
    if not c.same_zone(gt.origin):
        raise ZoneMismatchError(
            f"coordinate zone {c.zone}{c.hemisphere[0]} does not match "
            f"raster zone {gt.origin.zone}{gt.origin.hemisphere[0]}"
        )
    u = (c.easting - gt.origin.easting) / gt.pixel_size
    v = (gt.origin.northing - c.northing) / gt.pixel_size
    return u, v


def planar_error(pred: UtmCoord, gt: UtmCoord) -> float:
    """Euclidean distance in the UTM plane, in meters. Altitude is ignored."""
    if not pred.same_zone(gt):
        raise ZoneMismatchError(f"cannot compare zone {pred.zone} with zone {gt.zone}")
    return math.hypot(pred.easting - gt.easting, pred.northing - gt.northing)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels. Images are assumed pre-undistorted."""

    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal_x <= 0 or self.focal_y <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.principal_x < self.width and 0 < self.principal_y < self.height):
            raise ValueError("principal point must lie inside the image bounds")

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.focal_x, 0.0, self.principal_x],
                [0.0, self.focal_y, self.principal_y],
                [0.0, 0.0, 1.0],
            ]
        )


def diagonal_fov(intr: CameraIntrinsics) -> float:
    """Full diagonal field of view in degrees, using the mean focal length."""
    diag = math.hypot(intr.width, intr.height)
    return math.degrees(2.0 * math.atan(diag / (intr.focal_x + intr.focal_y)))


_ROT_TOL = 1e-9


def _check_rotation(m: np.ndarray):
    if m.shape != (3, 3):
        raise ValueError(f"orientation must be 3x3, got {m.shape}")
    if not np.allclose(m @ m.T, np.eye(3), atol=_ROT_TOL):
        raise ValueError("orientation is not orthonormal")
    if not math.isclose(float(np.linalg.det(m)), 1.0, abs_tol=1e-6):
        raise ValueError("orientation determinant is not +1 (improper rotation)")


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera center in UTM plus altitude above datum, and a world-to-camera rotation."""

    center: UtmCoord
    altitude: float
    orientation: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.orientation, dtype=np.float64)
        _check_rotation(m)
        m.setflags(write=False)
        object.__setattr__(self, "orientation", m)

    def center_xyz(self) -> np.ndarray:
        return np.array([self.center.easting, self.center.northing, self.altitude])


def rotation_from_yaw_pitch(yaw_deg: float, pitch_deg: float) -> np.ndarray:
    """World-to-camera rotation for a camera at compass heading ``yaw_deg``
    pitched down by ``pitch_deg`` from horizontal, zero roll.

    At pitch 90 (nadir) with yaw 0 the image top points north and the image
    right points east, matching a north-up raster.
    """
    psi = math.radians(yaw_deg)
    th = math.radians(pitch_deg)
    heading = np.array([math.sin(psi), math.cos(psi), 0.0])
    forward = math.cos(th) * heading + math.sin(th) * np.array([0.0, 0.0, -1.0])
    right = np.array([math.cos(psi), -math.sin(psi), 0.0])
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def yaw_pitch_from_rotation(m: np.ndarray) -> tuple[float, float]:
    """Inverse of :func:`rotation_from_yaw_pitch` for zero-roll rotations."""
    forward = m[2]
    pitch = math.degrees(math.asin(min(1.0, max(-1.0, -forward[2]))))
    yaw = math.degrees(math.atan2(forward[0], forward[1])) % 360.0
    return yaw, pitch


@dataclass(frozen=True)
class PriorState:
    """Onboard-sensor prior: altitude above ground, pitch, and yaw."""

    altitude: float
    pitch: float
    yaw: float

    def __post_init__(self):
        if self.altitude <= 0:
            raise ValueError(f"prior altitude must be > 0, got {self.altitude}")
        if not 0 < self.pitch <= 90:
            raise ValueError(f"prior pitch must be in (0, 90], got {self.pitch}")
        if not 0 <= self.yaw < 360:
            raise ValueError(f"prior yaw must be in [0, 360), got {self.yaw}")
