"""Per-filter label-field matrices, threshold clipping, greedy diagonal clustering and layer statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class FieldMatrix:
    """L x L; cell (i, j) is the summed output field j over inputs of true label i."""

    values: np.ndarray
    normalized: bool = False
    dead: bool = False


@dataclass(frozen=True)
class ClippedMatrix:
    bits: np.ndarray
    th: float
    negative_extreme: np.ndarray  # bool, cells with normalised value <= -th (display only)
    dead: bool = False

    @property
    def negative_extreme_cells(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in zip(*np.nonzero(self.negative_extreme))}


@dataclass(frozen=True)
class FilterProfile:
    filter_id: int
    clusters: tuple[tuple[int, ...], ...]
    noise_count: int
    dead: bool = False
    label_union: frozenset = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "label_union", frozenset(l for c in self.clusters for l in c))

    @property
    def cluster_sizes(self) -> list[int]:
        return [len(c) for c in self.clusters]

    @property
    def diagonal(self) -> int:
        return sum(self.cluster_sizes)

    def to_dict(self) -> dict:
        return {"filter": self.filter_id, "clusters": [list(c) for c in self.clusters], "noise": self.noise_count, "dead": self.dead}

    @classmethod
    def from_dict(cls, d: dict) -> "FilterProfile":
        return cls(d["filter"], tuple(tuple(c) for c in d["clusters"]), d["noise"], d.get("dead", False))


@dataclass(frozen=True)
class LayerStats:
    n_c: float
    c_s: float
    diagonal: float
    noise: float
    n_filters: int = 0
    n_dead: int = 0


# ---------------------------------------------------------------------------
# field matrices


def _check_labels(labels: np.ndarray, num_labels: int):
    counts = np.bincount(labels, minlength=num_labels)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"label {int(empty[0])} has no inputs")
    return counts


def filter_fields(features: np.ndarray, readout: np.ndarray, labels: np.ndarray, num_labels: int, batch: int = 1000) -> np.ndarray:
    """Field matrices for every filter at once, shape ``(C, L, L)``.

    ``features`` is ``(N, C, ...)`` (spatial dims flattened C-major, matching
    the readout rows); ``readout`` is ``(C * S, L)``.
    """
    labels = np.asarray(labels)
    _check_labels(labels, num_labels)
    n, c = features.shape[:2]
    w = np.asarray(readout, dtype=np.float64).reshape(c, -1, num_labels)
    out = np.zeros((c, num_labels, num_labels))
    for lo in range(0, n, batch):
        f = np.asarray(features[lo : lo + batch], dtype=np.float64).reshape(min(batch, n - lo), c, -1)
        per_filter = np.einsum("ncs,csj->ncj", f, w)
        onehot = np.eye(num_labels)[labels[lo : lo + batch]]
        out += np.einsum("ni,ncj->cij", onehot, per_filter)
    return out


def single_filter_fields(features: np.ndarray, readout: np.ndarray, labels: np.ndarray, num_labels: int, filter_id: int) -> FieldMatrix:
    """Field matrix of one filter: the readout silenced except rows fed by ``filter_id``."""
    c = features.shape[1]
    if not 0 <= filter_id < c:
        raise IndexError(f"filter {filter_id} out of range 0..{c - 1}")
    w = np.asarray(readout).reshape(c, -1, num_labels)
    vals = filter_fields(features[:, filter_id : filter_id + 1], w[filter_id : filter_id + 1].reshape(-1, num_labels), labels, num_labels)[0]
    return FieldMatrix(vals)


def normalize(matrix: FieldMatrix | np.ndarray) -> FieldMatrix:
    """Divide by the maximum entry; a matrix with max <= 0 is returned flagged dead."""
    vals = matrix.values if isinstance(matrix, FieldMatrix) else np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ValueError("field matrix has non-finite entries")
    peak = vals.max() if vals.size else 0.0
    if peak <= 0:
        return FieldMatrix(vals, normalized=False, dead=True)
    return FieldMatrix(vals / peak, normalized=True)


def clip(matrix: FieldMatrix, th: float) -> ClippedMatrix:
    """bits = value >= th; dead matrices clip to all-zero."""
    if not 0 < th < 1:
        raise ValueError("threshold must lie in (0, 1)")
    vals = matrix.values
    if matrix.dead:
        z = np.zeros(vals.shape, dtype=bool)
        return ClippedMatrix(z, th, z.copy(), dead=True)
    bits = vals >= th
    return ClippedMatrix(bits, th, vals <= -th, dead=not bits.any())


# ---------------------------------------------------------------------------
# clustering


def find_clusters(clipped: ClippedMatrix | np.ndarray, filter_id: int = 0, order: Sequence[int] | None = None) -> FilterProfile:
    """Greedy scan along the diagonal.

    Each diagonal 1-cell, visited in ``order`` (ascending by default), joins the
    earliest-opened cluster whose every member pairs with it in both directions;
    otherwise it opens a new cluster. Above-threshold cells outside the
    cluster blocks are noise.
    """
    bits = clipped.bits if isinstance(clipped, ClippedMatrix) else np.asarray(clipped, dtype=bool)
    n = bits.shape[0]
    if bits.shape != (n, n):
        raise ValueError("clipped matrix must be square")
    order = range(n) if order is None else order
    sym = bits & bits.T
    clusters: list[list[int]] = []
    for k in order:
        if not bits[k, k]:
            continue
        for cl in clusters:
            if sym[k, cl].all():
                cl.append(k)
                break
        else:
            clusters.append([k])
    block = np.zeros_like(bits)
    for cl in clusters:
        block[np.ix_(cl, cl)] = True
    noise = int(np.count_nonzero(bits & ~block))
    dead = bool(getattr(clipped, "dead", False))
    return FilterProfile(filter_id, tuple(tuple(c) for c in clusters), noise, dead)


def permute_for_display(clipped: ClippedMatrix | np.ndarray, profile: FilterProfile) -> tuple[np.ndarray, np.ndarray]:
    """Label order with each cluster contiguous (clusters first, in profile order), and the permuted matrix."""
    bits = clipped.bits if isinstance(clipped, ClippedMatrix) else np.asarray(clipped, dtype=bool)
    n = bits.shape[0]
    members = [l for c in profile.clusters for l in c]
    seen = set(members)
    perm = np.array(members + [l for l in range(n) if l not in seen], dtype=np.int64)
    return perm, bits[np.ix_(perm, perm)]


def profile_layer(fields: np.ndarray, th: float, order: Sequence[int] | None = None) -> list[FilterProfile]:
    return [find_clusters(clip(normalize(fields[f]), th), f, order) for f in range(len(fields))]


def layer_stats(profiles: Iterable[FilterProfile]) -> LayerStats:
    """Means over filters.

    N_c averages cluster counts over every filter (dead ones count 0); C_s is
    the pooled mean cluster size, so diagonal = N_c * C_s is the mean number of
    above-threshold diagonal cells per filter.
    """
    profiles = list(profiles)
    if not profiles:
        raise ValueError("no profiles")
    n_clusters = sum(len(p.clusters) for p in profiles)
    total_size = sum(p.diagonal for p in profiles)
    n_c = n_clusters / len(profiles)
    c_s = total_size / n_clusters if n_clusters else 0.0
    noise = sum(p.noise_count for p in profiles) / len(profiles)
    return LayerStats(n_c, c_s, n_c * c_s, noise, len(profiles), sum(p.dead for p in profiles))

