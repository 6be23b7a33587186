"""Independent reference implementations used only by the tests."""

import itertools

import numpy as np

from afcc.engine import Conv2D, Dense, Flatten, MaxPool, ReLU, Checkpoint, NetworkSpec, softmax_xent, run_layers


def naive_forward(spec: NetworkSpec, ckpt: Checkpoint, image: np.ndarray) -> np.ndarray:
    """Single NCHW image through the net with explicit loops, float64."""
    x = np.asarray(image, dtype=np.float64)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv2D):
            w = ckpt.weights[i].astype(np.float64)
            c, h, wd = x.shape
            p, s = layer.pad, layer.stride
            xp = np.zeros((c, h + 2 * p, wd + 2 * p))
            xp[:, p : p + h, p : p + wd] = x
            ho = (h + 2 * p - layer.kh) // s + 1
            wo = (wd + 2 * p - layer.kw) // s + 1
            out = np.zeros((layer.out_ch, ho, wo))
            for o in range(layer.out_ch):
                for r in range(ho):
                    for q in range(wo):
                        acc = 0.0 if ckpt.biases[i] is None else float(ckpt.biases[i][o])
                        for ci in range(c):
                            for a in range(layer.kh):
                                for b in range(layer.kw):
                                    acc += w[o, ci, a, b] * xp[ci, r * s + a, q * s + b]
                        out[o, r, q] = acc
            x = out
        elif isinstance(layer, MaxPool):
            c, h, wd = x.shape
            k, s = layer.k, layer.stride
            ho, wo = (h - k) // s + 1, (wd - k) // s + 1
            out = np.full((c, ho, wo), -np.inf)
            for ci in range(c):
                for r in range(ho):
                    for q in range(wo):
                        for a in range(k):
                            for b in range(k):
                                out[ci, r, q] = max(out[ci, r, q], x[ci, r * s + a, q * s + b])
            x = out
        elif isinstance(layer, Dense):
            w = ckpt.weights[i].astype(np.float64)
            out = np.zeros(layer.n_out)
            for o in range(layer.n_out):
                acc = 0.0 if ckpt.biases[i] is None else float(ckpt.biases[i][o])
                for j in range(layer.n_in):
                    acc += w[o, j] * x[j]
                out[o] = acc
            x = out
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0.0)
        elif isinstance(layer, Flatten):
            x = x.reshape(-1)
    return x


def activation_pattern(spec, ckpt, x):
    """ReLU on/off bits and max-pool winners; FD is only valid where these stay fixed."""
    caches = []
    run_layers(spec, ckpt, x, caches=caches)
    bits = []
    for layer, cache in zip(spec.layers, caches):
        if isinstance(layer, ReLU):
            bits.append(np.asarray(cache).ravel())
        elif isinstance(layer, MaxPool):
            xx, y, ho, wo = cache
            k, s = layer.k, layer.stride
            for a in range(k):
                for b in range(k):
                    bits.append((xx[:, a : a + s * ho : s, b : b + s * wo : s] == y).ravel())
    return np.concatenate(bits) if bits else np.zeros(0, bool)


def kink_margin(spec, ckpt, x):
    """Smallest distance of any ReLU input to 0 or any pool window's top-2 gap."""
    margin = np.inf
    for i, layer in enumerate(spec.layers):
        if not isinstance(layer, (ReLU, MaxPool)):
            continue
        prev = run_layers(spec, ckpt, x, stop=i)
        if isinstance(layer, ReLU):
            margin = min(margin, float(np.abs(prev).min()))
            continue
        n, c, hh, ww = prev.shape
        k, s = layer.k, layer.stride
        for r in range((hh - k) // s + 1):
            for q in range((ww - k) // s + 1):
                win = np.sort(prev[:, :, r * s : r * s + k, q * s : q * s + k].reshape(n, c, -1), axis=-1)
                margin = min(margin, float((win[..., -1] - win[..., -2]).min()))
    return margin


def loss_of(spec, ckpt, x, y):
    return softmax_xent(run_layers(spec, ckpt, x), y)[0]


def finite_difference(spec, ckpt, x, y, h=1e-4):
    """Central differences for every weight and bias entry (float64 checkpoint).

    Also returns how many perturbations changed the ReLU/max-pool pattern; a
    nonzero count means the difference straddled a kink and is not a valid oracle.
    """
    base = activation_pattern(spec, ckpt, x)
    flips = 0
    gw, gb = [], []
    for params, out in ((ckpt.weights, gw), (ckpt.biases, gb)):
        for p in params:
            if p is None:
                out.append(None)
                continue
            g = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                vals = []
                for v in (old + h, old - h):
                    p[idx] = v
                    vals.append(loss_of(spec, ckpt, x, y))
                    flips += not np.array_equal(activation_pattern(spec, ckpt, x), base)
                p[idx] = old
                g[idx] = (vals[0] - vals[1]) / (2 * h)
            out.append(g)
    return gw, gb, flips


def all_pairs_valid(bits: np.ndarray, members) -> bool:
    members = list(members)
    return all(bits[i, j] for i in members for j in members)


def intersection_mask(prev_unions, next_unions) -> np.ndarray:
    out = np.zeros((len(next_unions), len(prev_unions)), dtype=bool)
    for j, a in enumerate(next_unions):
        for i, b in enumerate(prev_unions):
            for label in a:
                if label in b:
                    out[j, i] = True
                    break
    return out


def popcount(bits: np.ndarray) -> int:
    return sum(bin(byte).count("1") for byte in np.packbits(np.asarray(bits, bool).ravel()).tolist())


def subsets(n):
    return itertools.chain.from_iterable(itertools.combinations(range(n), r) for r in range(n + 1))
