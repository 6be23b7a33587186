"""Linear readout probes on a frozen backbone cut at feature layer m."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import Checkpoint, Dense, Flatten, NetworkSpec, Schedule, TrainConfig, init_checkpoint, run_layers, train, evaluate


def default_probe_config(epochs: int = 20, seed: int = 0) -> TrainConfig:
    """Readout settings: eta 0.01, mu 0.975, alpha 1e-3, lr x0.975 every epoch."""
    return TrainConfig(eta=0.01, mu=0.975, alpha=1e-3, schedule=[Schedule(0, None, 0.975, 1)], batch_size=100, epochs=epochs, seed=seed)


@dataclass
class ProbeSpec:
    cut_layer: int
    readout: np.ndarray  # (feature_dim, L), no bias
    feature_shape: tuple
    backbone: NetworkSpec
    backbone_ckpt: Checkpoint = field(repr=False)
    accuracy: float | None = None

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.feature_shape))

    @property
    def num_labels(self) -> int:
        return self.readout.shape[1]

    def head(self) -> tuple[NetworkSpec, Checkpoint]:
        """The readout as a one-layer network over cut features."""
        spec = NetworkSpec((Flatten(), Dense(self.feature_dim, self.num_labels, bias=False)), self.num_labels, self.feature_shape)
        ckpt = Checkpoint([None, np.ascontiguousarray(self.readout.T)], [None, None])
        return spec, ckpt


def build_probe(spec: NetworkSpec, ckpt: Checkpoint, m: int, seed: int) -> ProbeSpec:
    """Random bias-free readout from the output of feature layer ``m`` (1-based) to the labels."""
    shape = spec.cut_shape(m)  # raises on bad m
    dim = int(np.prod(shape))
    bound = math.sqrt(6.0 / dim)
    rng = np.random.default_rng(seed)
    readout = rng.uniform(-bound, bound, size=(dim, spec.num_labels)).astype(ckpt.dtype)
    return ProbeSpec(m, readout, tuple(shape), spec, ckpt)


def extract_features(spec: NetworkSpec, ckpt: Checkpoint, m: int, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Backbone output at the cut of feature layer ``m``, shape ``(N, *cut_shape)``."""
    stop = spec.cut_index(m)
    parts = [run_layers(spec, ckpt, np.asarray(x[i : i + batch_size], dtype=ckpt.dtype), stop=stop) for i in range(0, len(x), batch_size)]
    if not parts:
        return np.zeros((0,) + spec.cut_shape(m), dtype=ckpt.dtype)
    return np.ascontiguousarray(np.concatenate(parts))


def train_probe(
    probe: ProbeSpec,
    train_data: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    holdout: tuple[np.ndarray, np.ndarray] | None = None,
    features: tuple[np.ndarray, np.ndarray | None] | None = None,
) -> ProbeSpec:
    """Fit the readout only; the backbone is never written.

    ``features`` may carry precomputed (train, holdout) cut features to skip the
    backbone pass. Returns a new probe whose ``accuracy`` is measured on the
    holdout (or the training data when no holdout is given).
    """
    if features is None:
        f_train = extract_features(probe.backbone, probe.backbone_ckpt, probe.cut_layer, train_data[0])
        f_hold = extract_features(probe.backbone, probe.backbone_ckpt, probe.cut_layer, holdout[0]) if holdout is not None else None
    else:
        f_train, f_hold = features
    spec, head = probe.head()
    if config.epochs:
        head, _ = train(spec, head, (f_train, train_data[1]), config)
    if holdout is not None:
        acc = evaluate(spec, head, f_hold, holdout[1])
    else:
        acc = evaluate(spec, head, f_train, train_data[1])
    return replace(probe, readout=np.ascontiguousarray(head.weights[1].T), accuracy=acc)


def probe_fields(probe: ProbeSpec, features: np.ndarray) -> np.ndarray:
    """Raw (pre-softmax) readout fields, ``(N, L)``."""
    f = np.asarray(features)
    return f.reshape(len(f), -1) @ probe.readout
