"""On-disk artifacts: checkpoints, probes, masks and JSON documents.

A checkpoint is a directory holding ``manifest.json`` plus one raw
little-endian float32 file per tensor. Masks are bit-packed. Every file is
written to a temporary name and renamed into place, and manifests carry no
timestamps, so rerunning a stage yields byte-identical output.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .engine import Checkpoint, NetworkSpec
from .masks import ConnectionMask
from .probe import ProbeSpec

FORMAT_VERSION = 1


class ArtifactError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"


def write_json(path, doc) -> Path:
    return atomic_write_bytes(path, dumps(doc).encode())


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# masks


def mask_entry(mask: ConnectionMask, layer: int) -> dict:
    return {
        "layer": layer,
        "layerPair": mask.meta.get("layer_pair"),
        "shape": list(mask.keep.shape),
        "granularity": mask.granularity,
        "scheme": mask.scheme,
        "seed": mask.seed,
        "rate": mask.rate,
        "meta": mask.meta,
    }


def mask_bytes(mask: ConnectionMask) -> bytes:
    return np.packbits(mask.keep.ravel()).tobytes()


def mask_from_bytes(entry: dict, data: bytes) -> ConnectionMask:
    shape = tuple(entry["shape"])
    n = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=n)
    if bits.size != n:
        raise ArtifactError(f"mask for layer {entry['layer']} holds {bits.size} bits, expected {n}")
    return ConnectionMask(bits.astype(bool).reshape(shape), entry["granularity"], entry.get("scheme", ""), entry.get("seed"), entry.get("rate"), entry.get("meta") or {})


def save_masks(directory, masks: dict[int, ConnectionMask], extra: dict | None = None) -> Path:
    """Write ``mask_<layer>.bin`` files and a ``masks.json`` index."""
    directory = Path(directory)
    entries = []
    for layer in sorted(masks):
        entry = mask_entry(masks[layer], layer)
        entry["file"] = f"mask_{layer}.bin"
        atomic_write_bytes(directory / entry["file"], mask_bytes(masks[layer]))
        entries.append(entry)
    return write_json(directory / "masks.json", {"version": FORMAT_VERSION, "masks": entries, **(extra or {})})


def load_masks(directory) -> dict[int, ConnectionMask]:
    directory = Path(directory)
    doc = read_json(directory / "masks.json")
    return {e["layer"]: mask_from_bytes(e, (directory / e["file"]).read_bytes()) for e in doc["masks"]}


# ---------------------------------------------------------------------------
# checkpoints


def _tensor_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_checkpoint(directory, spec: NetworkSpec, ckpt: Checkpoint, extra: dict | None = None) -> Path:
    directory = Path(directory)
    tensors = []
    for i, (w, b) in enumerate(zip(ckpt.weights, ckpt.biases)):
        for kind, arr in (("weight", w), ("bias", b)):
            if arr is None:
                continue
            name = f"layer{i}_{kind}.bin"
            atomic_write_bytes(directory / name, _tensor_bytes(arr))
            tensors.append({"layer": i, "kind": kind, "shape": list(arr.shape), "file": name})
    if ckpt.masks:
        save_masks(directory, ckpt.masks)
    manifest = {
        "version": FORMAT_VERSION,
        "dtype": "float32-le",
        "spec": spec.to_dict(),
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "tensors": tensors,
        "masked": bool(ckpt.masks),
        **(extra or {}),
    }
    return write_json(directory / "manifest.json", manifest)


def _read_tensor(directory: Path, entry: dict) -> np.ndarray:
    data = (directory / entry["file"]).read_bytes()
    shape = tuple(entry["shape"])
    n = int(np.prod(shape))
    if len(data) != 4 * n:
        raise ArtifactError(f"{entry['file']}: {len(data)} bytes, expected {4 * n}")
    return np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)


def load_checkpoint(directory) -> tuple[NetworkSpec, Checkpoint, dict]:
    """Returns (spec, checkpoint, manifest)."""
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    spec = NetworkSpec.from_dict(manifest["spec"])
    n = len(spec.layers)
    weights, biases = [None] * n, [None] * n
    for entry in manifest["tensors"]:
        target = weights if entry["kind"] == "weight" else biases
        target[entry["layer"]] = _read_tensor(directory, entry)
    masks = load_masks(directory) if manifest.get("masked") else {}
    ckpt = Checkpoint(weights, biases, masks, manifest["epoch"], manifest["seed"])
    ckpt.apply_masks()
    return spec, ckpt, manifest


# ---------------------------------------------------------------------------
# probes


def save_probe(directory, probe: ProbeSpec, extra: dict | None = None) -> Path:
    """Readout stored as a one-tensor checkpoint with ``probe: true`` and its cut layer."""
    directory = Path(directory)
    atomic_write_bytes(directory / "readout.bin", _tensor_bytes(probe.readout))
    manifest = {
        "version": FORMAT_VERSION,
        "dtype": "float32-le",
        "probe": True,
        "cut_layer": probe.cut_layer,
        "feature_shape": list(probe.feature_shape),
        "accuracy": probe.accuracy,
        "tensors": [{"layer": 0, "kind": "readout", "shape": list(probe.readout.shape), "file": "readout.bin"}],
        **(extra or {}),
    }
    return write_json(directory / "manifest.json", manifest)


def load_probe(directory, backbone: NetworkSpec, backbone_ckpt: Checkpoint) -> ProbeSpec:
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    if not manifest.get("probe"):
        raise ArtifactError(f"{directory} is not a probe artifact")
    readout = _read_tensor(directory, manifest["tensors"][0])
    return ProbeSpec(manifest["cut_layer"], readout, tuple(manifest["feature_shape"]), backbone, backbone_ckpt, manifest.get("accuracy"))
