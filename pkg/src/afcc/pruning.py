"""Connection masks: cluster-guided (AFCC), artificial (A-AFCC), random (R-AFCC) and FC-node pruning."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .masks import FILTER_PAIR, WEIGHT, ConnectionMask, measured_dilution
from .metrics import FilterProfile

__all__ = [
    "LabelAssignment",
    "NoSignalPath",
    "afcc_mask",
    "afcc_output_mask",
    "a_afcc_assign",
    "a_afcc_mask",
    "a_afcc_output_mask",
    "r_afcc_filter_mask",
    "r_afcc_weight_mask",
    "fc_node_mask",
    "estimate_dilution",
    "exact_dilution",
    "measured_dilution",
    "label_incidence",
]


class NoSignalPath(RuntimeError):
    """A mask that drops every connection between two layers."""


def label_incidence(unions: Sequence, num_labels: int) -> np.ndarray:
    """Boolean (units x labels) matrix from per-unit label sets."""
    out = np.zeros((len(unions), num_labels), dtype=bool)
    for k, labels in enumerate(unions):
        out[k, list(labels)] = True
    return out


def _unions(profiles) -> list[frozenset]:
    return [p.label_union if isinstance(p, FilterProfile) else frozenset(p) for p in profiles]


def _intersect(prev_unions, next_unions) -> np.ndarray:
    labels = max((max(u) for u in prev_unions + next_unions if u), default=-1) + 1
    a_prev = label_incidence(prev_unions, labels).astype(np.int32)
    a_next = label_incidence(next_unions, labels).astype(np.int32)
    return (a_next @ a_prev.T) > 0


def _warn_isolated(keep: np.ndarray, prev_unions, next_unions) -> None:
    no_in = [j for j, u in enumerate(next_unions) if u and not keep[j].any()]
    no_out = [i for i, u in enumerate(prev_unions) if u and not keep[:, i].any()]
    if no_in or no_out:
        warnings.warn(f"profiled units left isolated: {len(no_in)} without inbound, {len(no_out)} without outbound connections", stacklevel=3)


def afcc_mask(prev_profiles: Sequence, next_profiles: Sequence) -> ConnectionMask:
    """keep[j, i] iff next unit j and previous unit i share a cluster label.

    Profiles may be :class:`FilterProfile` objects or plain label sets; units
    with no clusters end up fully disconnected.
    """
    if not prev_profiles or not next_profiles:
        raise ValueError("afcc_mask needs non-empty profile lists on both sides")
    pu, nu = _unions(prev_profiles), _unions(next_profiles)
    keep = _intersect(pu, nu)
    _warn_isolated(keep, pu, nu)
    return ConnectionMask(keep, FILTER_PAIR, "afcc")


def afcc_output_mask(last_profiles: Sequence, num_labels: int) -> ConnectionMask:
    """Readout pruning: filter f keeps its connection to output y iff y is one of f's cluster labels."""
    keep = label_incidence(_unions(last_profiles), num_labels).T
    return ConnectionMask(keep, FILTER_PAIR, "afcc")


# ---------------------------------------------------------------------------
# artificial clusters


@dataclass(frozen=True)
class LabelAssignment:
    labels: tuple[tuple[int, ...], ...]  # one artificial cluster per filter
    cluster_size: int
    coverage: np.ndarray  # how many filters carry each label

    @property
    def imbalance(self) -> int:
        return int(self.coverage.max() - self.coverage.min())


def a_afcc_assign(layer_filter_counts: Sequence[int], base_size: int, increment: int, num_labels: int, seed: int) -> list[LabelAssignment]:
    """One artificial cluster per filter, for layers listed bottom to top.

    The top layer gets ``base_size`` labels and each layer below gets
    ``increment`` more. Within a layer, filter f takes the f-th contiguous
    block of a seeded label permutation (wrapping around), so every label is
    used floor or ceil of F*s/L times.
    """
    depth = len(layer_filter_counts)
    if base_size < 1 or increment < 0:
        raise ValueError("need base_size >= 1 and increment >= 0")
    if base_size + (depth - 1) * increment > num_labels:
        raise ValueError(f"cluster size {base_size + (depth - 1) * increment} exceeds {num_labels} labels")
    rng = np.random.default_rng(seed)
    out = []
    for k, n_filters in enumerate(layer_filter_counts):
        size = base_size + (depth - 1 - k) * increment
        perm = rng.permutation(num_labels)
        labels = tuple(tuple(sorted(int(perm[(f * size + t) % num_labels]) for t in range(size))) for f in range(n_filters))
        coverage = np.bincount([l for ls in labels for l in ls], minlength=num_labels)
        a = LabelAssignment(labels, size, coverage)
        if a.imbalance > 1:  # pragma: no cover - the block layout cannot produce this
            raise ValueError(f"layer {k}: label coverage uneven by {a.imbalance}")
        out.append(a)
    return out


def a_afcc_mask(assignments: Sequence[LabelAssignment], seed: int | None = None) -> list[ConnectionMask]:
    """Intersection masks between consecutive assigned layers (bottom to top)."""
    masks = []
    for k in range(len(assignments) - 1):
        prev, nxt = [frozenset(l) for l in assignments[k].labels], [frozenset(l) for l in assignments[k + 1].labels]
        keep = _intersect(prev, nxt)
        if not keep.any():
            raise NoSignalPath(f"artificial clusters of layers {k} and {k + 1} share no label")
        masks.append(ConnectionMask(keep, FILTER_PAIR, "a-afcc", seed))
    return masks


def a_afcc_output_mask(top: LabelAssignment, num_labels: int, seed: int | None = None) -> ConnectionMask:
    keep = label_incidence(top.labels, num_labels).T
    return ConnectionMask(keep, FILTER_PAIR, "a-afcc", seed)


# ---------------------------------------------------------------------------
# random controls


def r_afcc_filter_mask(shape: tuple[int, int], rate: float, seed: int) -> ConnectionMask:
    """Drop each filter pair independently with probability ``rate``."""
    if not 0 <= rate <= 1:
        raise ValueError("rate must lie in [0, 1]")
    keep = np.random.default_rng(seed).random(shape) >= rate
    return ConnectionMask(keep, FILTER_PAIR, "r-afcc-filter", seed, rate)


def r_afcc_weight_mask(weight_shape: tuple[int, ...], rate: float, seed: int) -> ConnectionMask:
    """Drop each individual weight independently with probability ``rate``."""
    if not 0 <= rate <= 1:
        raise ValueError("rate must lie in [0, 1]")
    keep = np.random.default_rng(seed).random(weight_shape) >= rate
    return ConnectionMask(keep, WEIGHT, "r-afcc-weight", seed, rate)


# ---------------------------------------------------------------------------
# fully connected layers


def fc_node_mask(prev_profiles: Sequence, next_profiles: Sequence, remove_noise_nodes: bool = True) -> tuple[ConnectionMask, dict]:
    """Node-level intersection mask between two dense layers.

    Nodes without any cluster are noise nodes. With ``remove_noise_nodes`` they
    lose every connection; otherwise they are left fully connected, since the
    label rule says nothing about them.
    """
    pu, nu = _unions(prev_profiles), _unions(next_profiles)
    keep = _intersect(pu, nu) if any(pu) and any(nu) else np.zeros((len(nu), len(pu)), dtype=bool)
    noise_prev = [i for i, u in enumerate(pu) if not u]
    noise_next = [j for j, u in enumerate(nu) if not u]
    if remove_noise_nodes:
        keep[:, noise_prev] = False
        keep[noise_next, :] = False
        removed = {"prev": noise_prev, "next": noise_next}
    else:
        keep[:, noise_prev] = True
        keep[noise_next, :] = True
        removed = {"prev": [], "next": []}
    return ConnectionMask(keep, FILTER_PAIR, "fc-node"), removed


# ---------------------------------------------------------------------------
# dilution estimates


def estimate_dilution(d_prev: float, d_next: float, num_labels: int) -> float:
    """Chance that two units share no label, treating the next unit's ``d_next`` labels as independent uniform draws.

    (1 - d_prev / L) ** d_next; real-valued diagonal sizes are allowed.
    """
    if not (0 <= d_prev <= num_labels and 0 <= d_next <= num_labels):
        raise ValueError("diagonal sizes must lie in [0, L]")
    return float(min(1.0, max(0.0, (1.0 - d_prev / num_labels) ** d_next)))


def exact_dilution(s_prev: int, s_next: int, num_labels: int) -> float:
    """No-overlap probability for two uniformly random label sets of integer sizes (hypergeometric)."""
    if s_next > num_labels - s_prev:
        return 0.0
    return math.comb(num_labels - s_prev, s_next) / math.comb(num_labels, s_next)
