"""Retrieval and localization metrics.

Localization: A@T, the percentage of frames whose planar UTM error is at
most T meters (fallback frames stay in the denominator).

Retrieval: Recall@K (binary hit on the ground-truth tile), SDM@K (rank-
weighted exponential decay of raw center distances), and PDM@K (rank-
weighted reversed sigmoid of the overlap ratio R = d / (w * r), which
normalizes out both tile size and map resolution).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

DEFAULT_LAMBDA = 6.0
DEFAULT_ALPHA = 0.9
DEFAULT_SDM_DECAY = 0.01
DEFAULT_A_THRESHOLDS = (5.0, 7.0, 10.0, 15.0, 20.0)
DEFAULT_K_VALUES = (1, 3, 5)
PITCH_BINS = ((20.0, 30.0), (30.0, 45.0), (45.0, 60.0), (60.0, 75.0), (75.0, 90.0))
LAMBDA_RECOMMENDED = (4.0, 8.0)
LAMBDA_VALID = (1.0, 20.0)


@dataclass(frozen=True)
class PdmParams:
    """Weight factor, threshold offset, and depth of the overlap metric."""

    lam: float = DEFAULT_LAMBDA
    alpha: float = DEFAULT_ALPHA
    k: int = 5

    def __post_init__(self):
        if not LAMBDA_VALID[0] <= self.lam <= LAMBDA_VALID[1]:
            raise ValueError(f"lambda {self.lam} outside sane band {LAMBDA_VALID}")
        if not LAMBDA_RECOMMENDED[0] <= self.lam <= LAMBDA_RECOMMENDED[1]:
            warnings.warn(
                f"lambda {self.lam} outside the recommended band {LAMBDA_RECOMMENDED}",
                stacklevel=2,
            )
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class OverlapObservation:
    """One retrieval rank: center distance, tile width, and map resolution."""

    distance_m: float
    tile_width_px: float
    resolution: float

    def __post_init__(self):
        if self.distance_m < 0:
            raise ValueError("distance must be >= 0")
        if self.tile_width_px <= 0 or self.resolution <= 0:
            raise ValueError("tile width and resolution must be > 0")

    @property
    def overlap_ratio(self) -> float:
        return self.distance_m / (self.tile_width_px * self.resolution)


def pdm_score(overlap_ratio: float, params: PdmParams = PdmParams()) -> float:
    """Reversed sigmoid of the overlap ratio, in (0, 1)."""
    if overlap_ratio < 0:
        raise ValueError("overlap ratio must be >= 0")
    z = -params.lam * (overlap_ratio - params.alpha)
    # equivalent to e^z / (1 + e^z), stable for both signs of z
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def _rank_weights(k: int) -> list[float]:
    return [float(k - i + 1) for i in range(1, k + 1)]


def pdm_at_k(observations: list[OverlapObservation], params: PdmParams) -> float:
    """Rank-weighted mean of pdm_score over exactly k observations."""
    if len(observations) != params.k:
        raise ValueError(f"expected {params.k} observations, got {len(observations)}")
    weights = _rank_weights(params.k)
    total = sum(w * pdm_score(o.overlap_ratio, params)
                for w, o in zip(weights, observations))
    return total / sum(weights)


def sdm_at_k(distances_m: list[float], decay: float, k: int) -> float:
    """Rank-weighted mean of exp(-decay * d) over exactly k distances."""
    if decay <= 0:
        raise ValueError(f"decay must be > 0, got {decay}")
    if len(distances_m) != k:
        raise ValueError(f"expected {k} distances, got {len(distances_m)}")
    if any(d < 0 for d in distances_m):
        raise ValueError("distances must be >= 0")
    weights = _rank_weights(k)
    total = sum(w * math.exp(-decay * d) for w, d in zip(weights, distances_m))
    return total / sum(weights)


def recall_at_k(ranked_tile_ids: list[int], gt_tile_id: int, k: int) -> int:
    """1 if the ground-truth tile appears in the top k, else 0."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return 1 if gt_tile_id in ranked_tile_ids[:k] else 0


def accuracy_at_t(errors_m: list[float], threshold_m: float) -> float:
    """Percentage of frames with error <= threshold, over all frames."""
    if not errors_m:
        raise ValueError("no records")
    hits = sum(1 for e in errors_m if e <= threshold_m)
    return 100.0 * hits / len(errors_m)


@dataclass
class MetricsReport:
    """Aggregated metric tables for one record set."""

    frame_count: int
    accuracy: dict[float, float]                 # T -> A@T percent
    recall: dict[int, float] = field(default_factory=dict)    # K -> percent
    sdm: dict[int, float] = field(default_factory=dict)       # K -> mean score
    pdm: dict[int, float] = field(default_factory=dict)       # K -> mean score
    by_pitch: dict[str, dict[float, float]] = field(default_factory=dict)
    by_noise: dict[str, dict[float, float]] = field(default_factory=dict)
    by_map: dict[str, dict[float, float]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "frame_count": self.frame_count,
            "accuracy_at_t": {f"{t:g}": v for t, v in sorted(self.accuracy.items())},
            "recall_at_k": {str(k): v for k, v in sorted(self.recall.items())},
            "sdm_at_k": {str(k): v for k, v in sorted(self.sdm.items())},
            "pdm_at_k": {str(k): v for k, v in sorted(self.pdm.items())},
            "by_pitch": self.by_pitch,
            "by_noise": self.by_noise,
            "by_map": self.by_map,
        }


def pitch_bin_label(pitch_deg: float) -> str | None:
    for lo, hi in PITCH_BINS:
        if lo <= pitch_deg < hi or (hi == PITCH_BINS[-1][1] and pitch_deg == hi):
            return f"[{lo:g},{hi:g})" if hi != PITCH_BINS[-1][1] else f"[{lo:g},{hi:g}]"
    return None


def breakdown(records, axis: str, thresholds=(5.0, 10.0, 20.0)) -> dict[str, dict[float, float]]:
    """A@T per bin along one axis: pitch_bins, noise_level, or map_label.

    ``records`` is any iterable with ``error_m`` plus the axis attribute.
    Empty bins are simply absent from the result.
    """
    groups: dict[str, list[float]] = {}
    for rec in records:
        if axis == "pitch_bins":
            key = pitch_bin_label(rec.pitch_deg)
            if key is None:
                continue
        elif axis == "noise_level":
            key = rec.noise_level
        elif axis == "map_label":
            key = rec.map_label
        else:
            raise ValueError(f"unknown breakdown axis {axis!r}")
        groups.setdefault(key, []).append(rec.error_m)
    return {
        key: {t: accuracy_at_t(errs, t) for t in thresholds}
        for key, errs in sorted(groups.items())
    }


def compute_report(
    records,
    thresholds=DEFAULT_A_THRESHOLDS,
    k_values=DEFAULT_K_VALUES,
    pdm_lambda: float = DEFAULT_LAMBDA,
    pdm_alpha: float = DEFAULT_ALPHA,
    sdm_decay: float = DEFAULT_SDM_DECAY,
) -> MetricsReport:
    """Full metric suite over localization records.

    Retrieval metrics are computed only from records that carry at least
    max(k_values) retrieval observations; strategies without retrieval
    (direct matching) yield localization metrics only.
    """
    records = list(records)
    if not records:
        raise ValueError("no records")
    errors = [r.error_m for r in records]
    report = MetricsReport(
        frame_count=len(records),
        accuracy={t: accuracy_at_t(errors, t) for t in thresholds},
    )
    kmax = max(k_values)
    retrieval_recs = [r for r in records
                      if r.retrieved_ids and len(r.retrieved_ids) >= kmax]
    if retrieval_recs:
        for k in k_values:
            params = PdmParams(lam=pdm_lambda, alpha=pdm_alpha, k=k)
            rec_hits = []
            sdm_scores = []
            pdm_scores = []
            for r in retrieval_recs:
                rec_hits.append(recall_at_k(list(r.retrieved_ids), r.gt_tile_id, k))
                dists = list(r.retrieved_d[:k])
                sdm_scores.append(sdm_at_k(dists, sdm_decay, k))
                obs = [
                    OverlapObservation(d, r.tile_width_px, r.map_gsd)
                    for d in dists
                ]
                pdm_scores.append(pdm_at_k(obs, params))
            report.recall[k] = 100.0 * sum(rec_hits) / len(rec_hits)
            report.sdm[k] = sum(sdm_scores) / len(sdm_scores)
            report.pdm[k] = sum(pdm_scores) / len(pdm_scores)
    report.by_pitch = breakdown(records, "pitch_bins")
    report.by_noise = breakdown(records, "noise_level")
    report.by_map = breakdown(records, "map_label")
    return report
