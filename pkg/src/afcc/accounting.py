"""PARAMs and multiply-accumulate counts per layer and per network, dense and masked.

Only conv and dense layers are costed; pooling and activations are free.
FLOPs are reported as 2 x MACs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import reference
from .engine import Checkpoint, Conv2D, Dense, NetworkSpec
from .masks import ConnectionMask

COST_COLUMNS = ("layer", "params_dense", "params_masked", "macs_dense", "macs_masked", "survival")


def _check_survival(survival: float) -> None:
    if not 0.0 <= survival <= 1.0:
        raise ValueError(f"survival {survival} outside [0, 1]")


def layer_params(layer, survival: float = 1.0, include_bias: bool = False) -> float:
    """Weight count times survival; biases are added unscaled when requested."""
    _check_survival(survival)
    if isinstance(layer, Conv2D):
        n = layer.kh * layer.kw * layer.in_ch * layer.out_ch * survival
        return n + (layer.out_ch if include_bias and layer.bias else 0)
    if isinstance(layer, Dense):
        return layer.n_in * layer.n_out * survival + (layer.n_out if include_bias and layer.bias else 0)
    return 0


def layer_macs(layer, output_spatial: tuple[int, int] = (1, 1), survival: float = 1.0) -> float:
    """Conv: Hout*Wout*kH*kW*in*out*survival. Dense: in*out*survival."""
    _check_survival(survival)
    if isinstance(layer, Conv2D):
        h, w = output_spatial
        return h * w * layer.kh * layer.kw * layer.in_ch * layer.out_ch * survival
    if isinstance(layer, Dense):
        return layer.n_in * layer.n_out * survival
    return 0


@dataclass(frozen=True)
class LayerCost:
    layer: int  # index into the spec's layer list
    kind: str
    params_dense: int
    params_masked: int
    macs_dense: int
    macs_masked: int
    survival: float


@dataclass
class CostReport:
    layers: list[LayerCost]
    reference: dict = field(default_factory=dict)

    @property
    def params_dense(self) -> int:
        return sum(c.params_dense for c in self.layers)

    @property
    def params_masked(self) -> int:
        return sum(c.params_masked for c in self.layers)

    @property
    def macs_dense(self) -> int:
        return sum(c.macs_dense for c in self.layers)

    @property
    def macs_masked(self) -> int:
        return sum(c.macs_masked for c in self.layers)

    @property
    def flops_dense(self) -> int:
        return 2 * self.macs_dense

    @property
    def flops_masked(self) -> int:
        return 2 * self.macs_masked

    def rows(self) -> list[dict]:
        out = [{k: v for k, v in asdict(c).items() if k in COST_COLUMNS} for c in self.layers]
        out.append({"layer": "total", "params_dense": self.params_dense, "params_masked": self.params_masked,
                    "macs_dense": self.macs_dense, "macs_masked": self.macs_masked,
                    "survival": self.macs_masked / self.macs_dense if self.macs_dense else 1.0})
        return out

    def summary(self) -> dict:
        return {
            "params_dense": self.params_dense,
            "params_masked": self.params_masked,
            "macs_dense": self.macs_dense,
            "macs_masked": self.macs_masked,
            "flops_dense": self.flops_dense,
            "flops_masked": self.flops_masked,
            "reference": self.reference,
        }


def _weight_keep(layer, mask) -> np.ndarray | None:
    if mask is None:
        return None
    if isinstance(mask, ConnectionMask):
        return np.asarray(mask.expand(layer.weight_shape))
    return np.asarray(mask, dtype=bool)


def network_cost(spec: NetworkSpec, masks: dict | None = None, ckpt: Checkpoint | None = None) -> CostReport:
    """Per-layer costs with exact counts of surviving weights.

    ``masks`` maps layer index to a :class:`ConnectionMask` (or weight-shaped
    bool array); a checkpoint's installed masks are used when ``masks`` is
    None. A bias survives while its unit keeps any inbound weight.
    """
    if masks is None:
        masks = dict(ckpt.masks) if ckpt is not None else {}
    shapes = spec.shapes()
    costs = []
    for i in spec.weight_layers():
        layer = spec.layers[i]
        out_shape = shapes[i]
        per_weight = out_shape[1] * out_shape[2] if isinstance(layer, Conv2D) else 1
        n_weights = int(np.prod(layer.weight_shape))
        keep = _weight_keep(layer, masks.get(i))
        kept = n_weights if keep is None else int(np.count_nonzero(keep))
        n_bias = layer.out_ch if isinstance(layer, Conv2D) else layer.n_out
        if not layer.bias:
            bias_dense = bias_kept = 0
        else:
            bias_dense = n_bias
            bias_kept = n_bias if keep is None else int(np.count_nonzero(keep.reshape(n_bias, -1).any(axis=1)))
        costs.append(LayerCost(i, layer.kind, n_weights + bias_dense, kept + bias_kept, per_weight * n_weights, per_weight * kept,
                               kept / n_weights if n_weights else 1.0))
    ref = {"vgg11_dense_gmacs": reference.VGG11_DENSE_GMACS, "vgg11_afcc_gmacs": reference.VGG11_AFCC_GMACS,
           "vgg11_a_afcc_gmacs": reference.VGG11_A_AFCC_GMACS}
    return CostReport(costs, ref)
