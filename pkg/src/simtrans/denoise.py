"""Transferred similarities: per-category similarity matrices and sample weights."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numcore import ShapeError
from .simnet import SimNetModel
from .synthdata import TrainView

DEFAULT_TILE = 64
PROVENANCES = ("simnet", "euclidean", "cosine", "oracle")


class DegenerateWeightsError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SimilarityMatrix:
    entries: np.ndarray
    provenance: str = "simnet"

    def __post_init__(self):
        e = self.entries
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ShapeError(f"similarity matrix must be square, got {e.shape}")
        if not np.all(np.isfinite(e)) or np.any(e < 0):
            raise ValueError("similarities must be finite and non-negative")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class SampleWeights:
    category: int
    raw: np.ndarray
    normalized: np.ndarray


def category_similarity_matrix(model: SimNetModel, features: np.ndarray,
                               tile: int = DEFAULT_TILE) -> SimilarityMatrix:
    """All ordered-pair scores for one set of images.

    The backbone runs once per image; head passes are done in ``tile x tile``
    blocks so memory stays bounded for large sets.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.backbone.in_dim:
        raise ShapeError(f"features {features.shape} do not match backbone input")
    left, right = model.project(model.embed(features))
    n = len(left)
    out = np.empty((n, n))
    for i in range(0, n, tile):
        for j in range(0, n, tile):
            out[i:i + tile, j:j + tile] = model.pair_scores(left[i:i + tile], right[j:j + tile])
    return SimilarityMatrix(out, "simnet")


def batch_similarity(model: SimNetModel, features: np.ndarray) -> SimilarityMatrix:
    """Similarity matrix of a mixed mini-batch with the SimNet frozen."""
    return category_similarity_matrix(model, features)


def compute_sample_weights(S, category: int = 0) -> SampleWeights:
    """Mean symmetrized similarity of each image to all images (itself included), unit-mean normalized."""
    entries = S.entries if isinstance(S, SimilarityMatrix) else np.asarray(S, dtype=np.float64)
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {entries.shape}")
    sym = (entries + entries.T) / 2.0
    raw = sym.mean(axis=1)
    mean = raw.mean()
    if not mean > 0:
        raise DegenerateWeightsError("all similarities are zero; weights are undefined")
    return SampleWeights(category, raw, raw / mean)


def oracle_similarity(true_labels) -> SimilarityMatrix:
    """1 for pairs sharing a ground-truth category. Outliers (negative ids) match only themselves."""
    t = np.asarray(true_labels)
    same = (t[:, None] == t[None, :]) & (t[:, None] >= 0)
    same |= np.eye(len(t), dtype=bool)
    return SimilarityMatrix(same.astype(np.float64), "oracle")


def weights_for_view(view: TrainView, similarity) -> tuple[np.ndarray, list[SampleWeights]]:
    """Per-record normalized weights for every category in ``view``.

    ``similarity`` maps ``(record_indices, features)`` of one category to a
    :class:`SimilarityMatrix`; a :class:`SimNetModel` is accepted directly.
    """
    if isinstance(similarity, SimNetModel):
        model = similarity

        def similarity(_idx, feats):
            return category_similarity_matrix(model, feats)

    weights = np.ones(len(view))
    per_category = []
    for c in view.categories:
        idx = np.flatnonzero(view.labels == c)
        sw = compute_sample_weights(similarity(idx, view.features[idx]), category=c)
        weights[idx] = sw.normalized
        per_category.append(sw)
    return weights, per_category


def save_weights(per_category: list[SampleWeights], path) -> None:
    lines = ["category_id,index,raw_weight,normalized_weight"]
    for sw in per_category:
        for i, (r, w) in enumerate(zip(sw.raw, sw.normalized)):
            lines.append(f"{sw.category},{i},{float(r)!r},{float(w)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_weights(path) -> list[SampleWeights]:
    rows: dict[int, list] = {}
    for line in Path(path).read_text(encoding="ascii").splitlines()[1:]:
        if not line:
            continue
        c, i, r, w = line.split(",")
        rows.setdefault(int(c), []).append((int(i), float(r), float(w)))
    out = []
    for c, items in rows.items():
        items.sort()
        out.append(SampleWeights(c, np.array([r for _, r, _ in items]),
                                 np.array([w for _, _, w in items])))
    return out


def save_similarity(S: SimilarityMatrix, path) -> None:
    lines = [f"# provenance={S.provenance} n={S.n}"]
    lines += [",".join(repr(float(v)) for v in row) for row in S.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
