"""Reference architectures."""

from __future__ import annotations

from typing import Sequence

from .engine import Conv2D, Dense, Flatten, MaxPool, NetworkSpec, ReLU

VGG11_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512)


def conv_stack(cfg: Sequence, num_labels: int, input_shape=(3, 32, 32), fc_hidden: Sequence[int] = ()) -> NetworkSpec:
    """3x3 same-padded conv + ReLU blocks; ``"M"`` inserts a 2x2 max-pool.

    The last feature map is flattened into optional hidden dense layers and a
    bias-free output layer.
    """
    layers = []
    c, h, w = input_shape
    for item in cfg:
        if item == "M":
            layers.append(MaxPool(2, 2))
            h, w = h // 2, w // 2
        else:
            layers += [Conv2D(c, int(item), 3, 3, 1, 1), ReLU()]
            c = int(item)
    layers.append(Flatten())
    n = c * h * w
    for width in fc_hidden:
        layers += [Dense(n, width), ReLU()]
        n = width
    layers.append(Dense(n, num_labels, bias=False))
    return NetworkSpec(tuple(layers), num_labels, tuple(input_shape))


def desk_net(channels: Sequence[int] = (16, 32, 32, 64), num_labels: int = 10, input_shape=(3, 32, 32), fc_hidden: Sequence[int] = ()) -> NetworkSpec:
    """Four conv layers, pooling after the first three, then the readout."""
    c1, c2, c3, c4 = channels
    return conv_stack((c1, "M", c2, "M", c3, "M", c4), num_labels, input_shape, fc_hidden)


def vgg11(num_labels: int = 100, input_shape=(3, 32, 32)) -> NetworkSpec:
    """VGG-16's CIFAR layout minus conv 11-13; conv 10 (4x4x512) feeds the output directly."""
    return conv_stack(VGG11_CFG, num_labels, input_shape)


ARCHITECTURES = {"desk": desk_net, "vgg11": vgg11}
