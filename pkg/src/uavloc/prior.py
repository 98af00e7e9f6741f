"""Prior-driven query alignment: ground-sampling-distance estimation from
altitude/pitch/FOV, rotation+scale warping of the query toward a north-up
map-resolution frame, and seeded Gaussian noise injection into the prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geo import CameraIntrinsics, PriorState, diagonal_fov
from .imops import affine_warp, to_gray

# Queries pitched below this are clamped for scale estimation instead of
# rejected: the slant-range term diverges as pitch approaches horizontal.
PITCH_FLOOR_DEG = 5.0


def estimate_gsd(altitude: float, pitch: float, fov: float, width: int, height: int) -> float:
    """Prior-based scale estimate in meters per pixel.

    slant_range * tan(fov/2) normalized by the image diagonal. Note the
    normalization is by the full diagonal: the geometric meters-per-pixel
    at the principal point is twice this value (the half-diagonal is what
    tan(fov/2) subtends). Callers that need the geometric value should use
    :func:`principal_gsd`.

    Raises:
        ValueError: altitude <= 0, fov outside (0, 180), or pitch > 90.
    """
    if altitude <= 0:
        raise ValueError(f"altitude must be > 0, got {altitude}")
    if not 0 < fov < 180:
        raise ValueError(f"fov must be in (0, 180) degrees, got {fov}")
    if not 0 < pitch <= 90:
        raise ValueError(f"pitch must be in (0, 90] degrees, got {pitch}")
    pitch = max(pitch, PITCH_FLOOR_DEG)
    slant = altitude / math.sin(math.radians(pitch))
    return slant * math.tan(math.radians(fov) / 2.0) / math.hypot(width, height)


def principal_gsd(prior: PriorState, intr: CameraIntrinsics) -> float:
    """Geometric meters-per-pixel at the image center implied by the prior
    (twice the diagonal-normalized estimate)."""
    return 2.0 * estimate_gsd(prior.altitude, prior.pitch, diagonal_fov(intr),
                              intr.width, intr.height)


def _rotation_scale_matrix(rotation_deg: float, scale: float) -> np.ndarray:
    a = math.radians(rotation_deg)
    c, s = math.cos(a), math.sin(a)
    return scale * np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class AlignmentWarp:
    """A similarity transform from original query pixels to aligned pixels.

    Pixel coordinates map as ``dst = scale * R(rotation) @ (src - c_in) + c_out``
    where R is applied in image axes (x right, y down) and c_in/c_out are the
    input and output image centers.
    """

    rotation_deg: float
    scale: float
    input_size: tuple[int, int]   # (width, height)
    output_size: tuple[int, int]  # (width, height)
    pitch_clamped: bool = False

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"warp scale must be positive and finite, got {self.scale}")

    def linear(self) -> np.ndarray:
        return _rotation_scale_matrix(self.rotation_deg, self.scale)

    def centers(self) -> tuple[tuple[float, float], tuple[float, float]]:
        w, h = self.input_size
        ow, oh = self.output_size
        return ((w - 1) / 2.0, (h - 1) / 2.0), ((ow - 1) / 2.0, (oh - 1) / 2.0)

    def apply_points(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        c_in, c_out = self.centers()
        return (pts - c_in) @ self.linear().T + c_out

    def invert_points(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        c_in, c_out = self.centers()
        return (pts - c_out) @ np.linalg.inv(self.linear()).T + c_in


def _fit_output_size(linear: np.ndarray, width: int, height: int) -> tuple[int, int]:
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    corners = np.array([[0, 0], [width - 1, 0], [0, height - 1], [width - 1, height - 1]],
                       dtype=np.float64)
    t = (corners - [cx, cy]) @ linear.T
    ow = int(math.ceil(t[:, 0].max() - t[:, 0].min() - 1e-9)) + 1
    oh = int(math.ceil(t[:, 1].max() - t[:, 1].min() - 1e-9)) + 1
    return ow, oh


def align_query(
    image: np.ndarray,
    prior: PriorState,
    intr: CameraIntrinsics,
    map_gsd: float,
) -> tuple[np.ndarray, np.ndarray, AlignmentWarp]:
    """Rotate the query by -yaw about its center and rescale it by the
    prior GSD estimate over ``map_gsd``, so the output is approximately
    north-up at the reference-map resolution.

    Returns:
        (warped grayscale image, validity mask, warp). Output pixels not
        covered by the source image are zero and masked invalid.
    """
    if map_gsd <= 0 or not math.isfinite(map_gsd):
        raise ValueError(f"map_gsd must be positive and finite, got {map_gsd}")
    gsd = estimate_gsd(prior.altitude, prior.pitch, diagonal_fov(intr),
                       intr.width, intr.height)
    scale = gsd / map_gsd
    if not (scale > 0 and math.isfinite(scale)):
        raise ValueError(f"degenerate alignment scale {scale}")
    gray = to_gray(image)
    h, w = gray.shape
    # Rotating pixel coordinates by +yaw rotates the image content by -yaw,
    # which cancels the camera heading and restores north-up.
    out_size = _fit_output_size(_rotation_scale_matrix(prior.yaw, scale), w, h)
    warp = AlignmentWarp(prior.yaw, scale, (w, h), out_size,
                         pitch_clamped=prior.pitch < PITCH_FLOOR_DEG)
    c_in, c_out = warp.centers()
    warped, valid = affine_warp(gray, warp.linear(), c_in, c_out,
                                (out_size[1], out_size[0]))
    return warped, valid, warp


def unwarp_points(warp: AlignmentWarp, points) -> np.ndarray:
    """Map points from the warped frame back to original query pixels."""
    pts = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return warp.invert_points(pts)


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean Gaussian noise levels for each prior channel."""

    yaw_std: float = 0.0
    pitch_std: float = 0.0
    altitude_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.yaw_std < 0 or self.pitch_std < 0 or self.altitude_std < 0:
            raise ValueError("noise standard deviations must be >= 0")

    def label(self) -> str:
        return f"yaw{self.yaw_std:g}_pitch{self.pitch_std:g}_alt{self.altitude_std:g}"


def inject_noise(prior: PriorState, spec: NoiseSpec, frame_id: int = 0) -> PriorState:
    """Perturb a prior with independent Gaussian noise per field.

    The generator is seeded by (spec.seed, frame_id) so sweeps are
    reproducible while frames stay independent. Yaw wraps to [0, 360),
    pitch clamps to [PITCH_FLOOR_DEG, 90], altitude clamps positive.
    Ground truth is never touched; only the prior is noisy.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, int(frame_id)]))
    # Always draw all three so the stream does not depend on which stds are zero.
    dyaw, dpitch, dalt = rng.standard_normal(3)
    yaw = (prior.yaw + spec.yaw_std * dyaw) % 360.0
    pitch = prior.pitch
    if spec.pitch_std > 0:
        pitch = min(90.0, max(PITCH_FLOOR_DEG, pitch + spec.pitch_std * dpitch))
    altitude = max(1e-3, prior.altitude + spec.altitude_std * dalt)
    return PriorState(altitude=altitude, pitch=pitch, yaw=yaw)
