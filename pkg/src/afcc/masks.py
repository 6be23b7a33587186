"""Boolean keep/drop masks between two layers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FILTER_PAIR = "filterPair"
WEIGHT = "weight"


@dataclass(frozen=True)
class ConnectionMask:
    """Keep/drop pattern for the weights feeding one layer.

    ``keep`` has shape ``(next_units, prev_units)`` at filter-pair granularity,
    or the full weight shape at weight granularity.
    """

    keep: np.ndarray
    granularity: str = FILTER_PAIR
    scheme: str = ""
    seed: int | None = None
    rate: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        keep = np.asarray(self.keep, dtype=bool)
        keep.setflags(write=False)
        object.__setattr__(self, "keep", keep)
        if self.granularity not in (FILTER_PAIR, WEIGHT):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity == FILTER_PAIR and keep.ndim != 2:
            raise ValueError("filter-pair masks must be 2-D")

    @property
    def kept(self) -> int:
        return int(np.count_nonzero(self.keep))

    @property
    def total(self) -> int:
        return int(self.keep.size)

    @property
    def dilution_rate(self) -> float:
        if self.total == 0:
            return 0.0
        return 1.0 - self.kept / self.total

    @property
    def survival_rate(self) -> float:
        return 1.0 - self.dilution_rate

    def expand(self, weight_shape: tuple[int, ...]) -> np.ndarray:
        """Weight-shaped boolean array for a conv ``(out, in, kh, kw)`` or dense ``(out, in)`` weight.

        A dense layer fed by flattened ``(C, H, W)`` features has ``in = C*H*W``;
        each filter column is repeated over that filter's spatial positions.
        """
        weight_shape = tuple(weight_shape)
        if self.granularity == WEIGHT:
            if self.keep.shape != weight_shape:
                raise ValueError(f"weight mask shape {self.keep.shape} != {weight_shape}")
            return self.keep
        n_next, n_prev = self.keep.shape
        if weight_shape[0] != n_next:
            raise ValueError(f"mask rows {n_next} != layer outputs {weight_shape[0]}")
        if len(weight_shape) == 4:
            if weight_shape[1] != n_prev:
                raise ValueError(f"mask cols {n_prev} != conv inputs {weight_shape[1]}")
            return np.broadcast_to(self.keep[:, :, None, None], weight_shape)
        n_in = weight_shape[1]
        if n_in % n_prev:
            raise ValueError(f"dense fan-in {n_in} is not a multiple of {n_prev} units")
        return np.repeat(self.keep, n_in // n_prev, axis=1)

    def to_weight(self, weight_shape: tuple[int, ...]) -> "ConnectionMask":
        return ConnectionMask(np.array(self.expand(weight_shape)), WEIGHT, self.scheme, self.seed, self.rate, dict(self.meta))


def measured_dilution(mask: ConnectionMask | np.ndarray) -> float:
    """1 - kept/total."""
    keep = mask.keep if isinstance(mask, ConnectionMask) else np.asarray(mask, dtype=bool)
    if keep.size == 0:
        return 0.0
    return 1.0 - np.count_nonzero(keep) / keep.size
