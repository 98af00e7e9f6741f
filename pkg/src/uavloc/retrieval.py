"""Gallery retrieval: rank reference-map tiles against an aligned query.

Three scorers are supported: zero-mean normalized cross-correlation and
mutual information operate on pixels (template matching), while the
embedding scorer consumes externally computed feature vectors loaded from
a JSON-lines file, which is how learned retrieval models plug in.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imops import resize_bilinear, to_gray
from .refmap import GalleryTile

MI_DEFAULT_BINS = 32


class ScoreError(ValueError):
    """A similarity score is undefined for the given inputs."""


def tile_key(tile_id: int) -> str:
    """Embedding-table id for a gallery tile."""
    return f"tile_{tile_id}"


def ncc_score(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Zero-mean normalized cross-correlation over valid pixels, in [-1, 1].

    Raises:
        ScoreError: either image is constant over the mask (zero variance),
            or the mask is empty.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if mask is not None:
        av = av[mask]
        bv = bv[mask]
    else:
        av = av.ravel()
        bv = bv.ravel()
    if av.size == 0:
        raise ScoreError("empty valid mask")
    av = av - av.mean()
    bv = bv - bv.mean()
    denom = math.sqrt(float(av @ av) * float(bv @ bv))
    if denom <= 0:
        raise ScoreError("zero variance over the valid mask")
    return float(av @ bv) / denom


def mi_score(a: np.ndarray, b: np.ndarray, bins: int = MI_DEFAULT_BINS,
             mask: np.ndarray | None = None) -> float:
    """Mutual information H(A) + H(B) - H(A,B) in bits over valid pixels.

    Intensities are histogrammed over [0, 256) so 8-bit levels land in
    stable bins regardless of per-image range.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if mask is not None:
        av = av[mask]
        bv = bv[mask]
    else:
        av = av.ravel()
        bv = bv.ravel()
    if av.size == 0:
        raise ScoreError("empty valid mask")
    joint, _, _ = np.histogram2d(av, bv, bins=bins, range=((0, 256), (0, 256)))
    p = joint / joint.sum()
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    nz = p > 0
    h_ab = -float(np.sum(p[nz] * np.log2(p[nz])))
    h_a = -float(np.sum(pa[pa > 0] * np.log2(pa[pa > 0])))
    h_b = -float(np.sum(pb[pb > 0] * np.log2(pb[pb > 0])))
    return h_a + h_b - h_ab


def cosine_score(q: np.ndarray, t: np.ndarray) -> float:
    """Dot product of two unit vectors."""
    q = np.asarray(q, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if q.shape != t.shape:
        raise ValueError(f"dimension mismatch {q.shape} vs {t.shape}")
    return float(q @ t)


class EmbeddingTable:
    """Id -> unit-norm vector map, uniform dimension.

    Vectors are renormalized at load; a zero vector or inconsistent
    dimension is rejected.
    """

    def __init__(self, vectors: dict[str, np.ndarray]):
        self._vecs: dict[str, np.ndarray] = {}
        dim = None
        for key, vec in vectors.items():
            v = np.asarray(vec, dtype=np.float64).ravel()
            if dim is None:
                dim = v.size
            elif v.size != dim:
                raise ValueError(
                    f"embedding {key!r} has dimension {v.size}, expected {dim}")
            n = float(np.linalg.norm(v))
            if n <= 0 or not math.isfinite(n):
                raise ValueError(f"embedding {key!r} is zero or non-finite")
            self._vecs[key] = v / n
        self.dim = dim or 0

    def __contains__(self, key: str) -> bool:
        return key in self._vecs

    def __len__(self) -> int:
        return len(self._vecs)

    def get(self, key: str) -> np.ndarray:
        if key not in self._vecs:
            raise KeyError(f"no embedding for id {key!r}")
        return self._vecs[key]

    @classmethod
    def load_jsonl(cls, path) -> "EmbeddingTable":
        vectors = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                vectors[str(rec["id"])] = np.asarray(rec["vec"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad embedding record: {exc}") from exc
        return cls(vectors)

    def save_jsonl(self, path):
        lines = [
            json.dumps({"id": key, "vec": [float(x) for x in vec]})
            for key, vec in self._vecs.items()
        ]
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class RetrievalResult:
    """Tiles ranked by descending score; ties broken by ascending tile id."""

    ranked: tuple[tuple[int, float], ...]

    def ids(self) -> list[int]:
        return [tid for tid, _ in self.ranked]


@dataclass
class QueryView:
    """What a scorer needs to see of a query: its id and the aligned image."""

    id: str
    image: np.ndarray
    mask: np.ndarray | None = None


@dataclass(frozen=True)
class NccScorer:
    kind: str = "ncc"


@dataclass(frozen=True)
class MiScorer:
    bins: int = MI_DEFAULT_BINS
    kind: str = "mi"


@dataclass(frozen=True)
class EmbeddingScorer:
    table: EmbeddingTable = field(repr=False)
    kind: str = "embedding"


def _template_score(query: QueryView, tile: GalleryTile, scorer) -> float:
    timg = resize_bilinear(to_gray(tile.image), query.image.shape[0], query.image.shape[1])
    if isinstance(scorer, NccScorer):
        return ncc_score(query.image, timg, mask=query.mask)
    return mi_score(query.image, timg, bins=scorer.bins, mask=query.mask)


def rank_gallery(query: QueryView, tiles: list[GalleryTile], scorer, k: int) -> RetrievalResult:
    """Score every tile against the query and keep the top ``k``.

    Template scorers resample each tile to the aligned query's dimensions
    before scoring. Tiles whose score is undefined rank below all valid
    tiles instead of aborting the query. ``k`` is clamped to the gallery
    size.
    """
    if not tiles:
        raise ValueError("empty gallery")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scored = []
    if isinstance(scorer, EmbeddingScorer):
        qvec = scorer.table.get(query.id)
        for tile in tiles:
            try:
                s = cosine_score(qvec, scorer.table.get(tile_key(tile.id)))
            except (KeyError, ValueError):
                s = float("-inf")
            scored.append((tile.id, s))
    else:
        for tile in tiles:
            try:
                s = _template_score(query, tile, scorer)
            except ScoreError:
                s = float("-inf")
            scored.append((tile.id, s))
    # descending score; undefined (-inf) scores land last; ties by ascending id
    scored.sort(key=lambda t: (t[1], -t[0]), reverse=True)
    return RetrievalResult(ranked=tuple(scored[:min(k, len(scored))]))
