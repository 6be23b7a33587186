"""Experiment configuration and the train / probe / analyze / prune / finetune / report / render stages.

Every stage reads its inputs from the experiment's output directory and writes
its artifacts there, so stages can run as separate CLI invocations.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io, render
from .accounting import COST_COLUMNS, network_cost
from .archs import ARCHITECTURES
from .data import AugmentPolicy, DatasetSplit, augmenter, check_balance, load_dataset
from .engine import Checkpoint, Dense, NetworkSpec, Schedule, TrainConfig, evaluate, init_checkpoint, train
from .masks import ConnectionMask, measured_dilution
from .metrics import FilterProfile, clip, filter_fields, layer_stats, normalize, profile_layer
from .probe import build_probe, default_probe_config, extract_features, train_probe
from .pruning import (
    a_afcc_assign,
    a_afcc_mask,
    a_afcc_output_mask,
    afcc_mask,
    afcc_output_mask,
    estimate_dilution,
    fc_node_mask,
    r_afcc_filter_mask,
    r_afcc_weight_mask,
)

log = logging.getLogger(__name__)

STAGES = ("train", "probe", "analyze", "prune", "finetune", "report", "render")
SCHEMES = ("afcc", "a-afcc", "r-afcc-filter", "r-afcc-weight", "fc-node")
REPORT_COLUMNS = ("layer", "accuracy", "N_c", "C_s", "diagonal", "noise", "dilution_est", "dilution_measured", "params_masked", "macs_masked")


class MissingPrerequisite(RuntimeError):
    def __init__(self, stage: str, needs: str, path: Path):
        super().__init__(f"stage '{stage}' needs '{needs}' output at {path}; run `afcc {needs}` first")
        self.stage, self.needs = stage, needs


@dataclass
class ExperimentConfig:
    """Everything a run depends on. Defaults are the documented defaults; nothing else is hidden."""

    output_dir: str
    dataset_path: str
    dataset_format: str = "cifar-binary"
    num_labels: int | None = None
    architecture: str = "desk"
    arch_params: dict = field(default_factory=dict)
    field_set: str = "test"
    conv_threshold: float = 0.3
    fc_node_threshold: float = 0.98
    probe_layers: list | None = None  # 1-based feature layers; None = upper half of the stack
    scheme: str = "afcc"
    a_afcc_base_size: int | None = None  # None = smallest integer above the largest measured mean diagonal
    a_afcc_increment: int = 1
    r_afcc_rates: dict | None = None  # layer -> rate; None = match the afcc masks
    remove_noise_nodes: bool = True
    augment: dict = field(default_factory=lambda: {"horizontal_flip": True, "max_translate": 4})
    train: dict = field(default_factory=lambda: {"eta": 0.04, "mu": 0.9, "alpha": 5e-4, "schedule": [{"start": 0, "stop": None, "q": 0.65, "delta_t": 5}], "batch_size": 100, "epochs": 15})
    probe: dict = field(default_factory=lambda: {"epochs": 20})
    finetune_epochs: int = 5
    # overrides applied on top of the probe optimiser settings; the probe's mu=0.975
    # gives an effective step 40x eta, which re-trains rather than fine-tunes
    finetune: dict = field(default_factory=lambda: {"eta": 0.01, "mu": 0.9})
    seed: int = 0

    def __post_init__(self):
        for name in ("conv_threshold", "fc_node_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.field_set not in ("train", "test"):
            raise ValueError("field_set must be 'train' or 'test'")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; choose from {sorted(ARCHITECTURES)}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def override(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def train_config(self, seed_offset: int = 0, **over) -> TrainConfig:
        d = {**self.train, **over}
        d["schedule"] = [Schedule(**s) if isinstance(s, dict) else s for s in d["schedule"]]
        return TrainConfig(seed=self.seed + seed_offset, **d)

    def probe_config(self, seed_offset: int = 0) -> TrainConfig:
        cfg = default_probe_config(seed=self.seed + seed_offset)
        return replace(cfg, **self.probe) if self.probe else cfg


# ---------------------------------------------------------------------------
# shared helpers


def build_spec(config: ExperimentConfig, num_labels: int) -> NetworkSpec:
    return ARCHITECTURES[config.architecture](num_labels=num_labels, **config.arch_params)


def default_probe_layers(spec: NetworkSpec) -> list[int]:
    """Feature layers in the upper half of the stack."""
    n = len(spec.feature_layers())
    return list(range(max(1, math.ceil(n / 2)), n + 1))


def probe_layers(config: ExperimentConfig, spec: NetworkSpec) -> list[int]:
    return sorted(config.probe_layers) if config.probe_layers else default_probe_layers(spec)


def _data(config: ExperimentConfig) -> tuple[DatasetSplit, DatasetSplit]:
    if not Path(config.dataset_path).exists():
        raise FileNotFoundError(f"dataset path {config.dataset_path} does not exist")
    policy = AugmentPolicy(**config.augment)
    train_ds, test_ds = load_dataset(config.dataset_path, config.dataset_format, config.num_labels, policy=policy)
    check_balance(train_ds.labels, train_ds.num_labels)
    return train_ds, test_ds


def _need(stage: str, needs: str, path: Path) -> Path:
    if not path.exists():
        raise MissingPrerequisite(stage, needs, path)
    return path


def _history(hist) -> list[dict]:
    return [asdict(h) for h in hist]


def _variant_dir(config: ExperimentConfig, stage: str, scheme: str | None = None) -> Path:
    return config.out / stage / (scheme or config.scheme)


def _baseline_dir(config: ExperimentConfig) -> Path:
    return config.out / "train" / "baseline"


def _load_profiles(config: ExperimentConfig, stage: str, m: int) -> list[FilterProfile]:
    path = _need(stage, "analyze", config.out / "analyze" / f"m{m}" / "profiles.json")
    return [FilterProfile.from_dict(d) for d in io.read_json(path)["profiles"]]


def _load_stats(config: ExperimentConfig, stage: str) -> dict:
    return io.read_json(_need(stage, "analyze", config.out / "analyze" / "stats.json"))


def _tag(mask: ConnectionMask, pair) -> ConnectionMask:
    return replace(mask, meta={**mask.meta, "layer_pair": list(pair)})


# ---------------------------------------------------------------------------
# stages


def stage_train(config: ExperimentConfig) -> dict:
    """Dense baseline, or training from scratch under a-afcc masks when scheme is a-afcc."""
    train_ds, test_ds = _data(config)
    spec = build_spec(config, train_ds.num_labels)
    ckpt = init_checkpoint(spec, config.seed)
    if config.scheme == "a-afcc":
        mask_dir = _need("train", "prune", _variant_dir(config, "prune", "a-afcc") / "masks.json").parent
        for layer, mask in io.load_masks(mask_dir).items():
            ckpt.install_mask(layer, mask)
        out = _variant_dir(config, "train", "a-afcc")
    else:
        out = _baseline_dir(config)
    aug = augmenter(train_ds.policy)
    ckpt, hist = train(spec, ckpt, (train_ds.x, train_ds.labels), config.train_config(), augment=aug)
    acc = evaluate(spec, ckpt, test_ds.x, test_ds.labels)
    io.save_checkpoint(out, spec, ckpt, {"test_accuracy": acc})
    io.write_json(out / "history.json", {"history": _history(hist), "config": config.train_config().to_dict()})
    log.info("train: test accuracy %.4f", acc)
    return {"dir": str(out), "test_accuracy": acc}


def stage_probe(config: ExperimentConfig) -> dict:
    """Bias-free readouts from each probed layer of the frozen baseline."""
    spec, ckpt, _ = io.load_checkpoint(_need("probe", "train", _baseline_dir(config) / "manifest.json").parent)
    train_ds, test_ds = _data(config)
    results = {}
    for m in probe_layers(config, spec):
        f_train = extract_features(spec, ckpt, m, train_ds.x)
        f_test = extract_features(spec, ckpt, m, test_ds.x)
        probe = build_probe(spec, ckpt, m, config.seed + 100 + m)
        probe = train_probe(probe, (train_ds.x, train_ds.labels), config.probe_config(100 + m), holdout=(test_ds.x, test_ds.labels), features=(f_train, f_test))
        io.save_probe(config.out / "probe" / f"m{m}", probe)
        results[m] = probe.accuracy
        log.info("probe m=%d: test accuracy %.4f", m, probe.accuracy)
    io.write_json(config.out / "probe" / "summary.json", {"accuracy": {str(k): v for k, v in results.items()}})
    return {"accuracy": results}


def _threshold(spec: NetworkSpec, m: int, config: ExperimentConfig) -> float:
    layer = spec.layers[spec.feature_layers()[m - 1]]
    return config.fc_node_threshold if isinstance(layer, Dense) else config.conv_threshold


def stage_analyze(config: ExperimentConfig, layer: int | None = None) -> dict:
    """Field matrices, clusters and layer statistics for every probed layer (or one)."""
    spec, ckpt, _ = io.load_checkpoint(_need("analyze", "train", _baseline_dir(config) / "manifest.json").parent)
    train_ds, test_ds = _data(config)
    ds = test_ds if config.field_set == "test" else train_ds
    layers = [layer] if layer is not None else probe_layers(config, spec)
    stats_path = config.out / "analyze" / "stats.json"
    all_stats = io.read_json(stats_path)["layers"] if stats_path.exists() else {}
    for m in layers:
        probe = io.load_probe(_need("analyze", "probe", config.out / "probe" / f"m{m}" / "manifest.json").parent, spec, ckpt)
        feats = extract_features(spec, ckpt, m, ds.x)
        if feats.ndim == 2:  # dense layer: each node is its own unit
            feats = feats[:, :, None]
        fields_ = filter_fields(feats, probe.readout, ds.labels, ds.num_labels)
        th = _threshold(spec, m, config)
        profiles = profile_layer(fields_, th)
        st = layer_stats(profiles)
        d = config.out / "analyze" / f"m{m}"
        io.atomic_write_bytes(d / "fields.bin", np.ascontiguousarray(fields_, dtype="<f8").tobytes())
        io.write_json(d / "profiles.json", {"layer": m, "threshold": th, "field_set": config.field_set, "shape": list(fields_.shape), "profiles": [p.to_dict() for p in profiles]})
        all_stats[str(m)] = {**asdict(st), "threshold": th, "probe_accuracy": probe.accuracy}
        log.info("analyze m=%d: N_c %.2f C_s %.2f diagonal %.2f", m, st.n_c, st.c_s, st.diagonal)
    io.write_json(stats_path, {"layers": dict(sorted(all_stats.items(), key=lambda kv: int(kv[0]))), "num_labels": ds.num_labels})
    return {"layers": all_stats}


def load_fields(config: ExperimentConfig, m: int) -> np.ndarray:
    meta = io.read_json(_need("render", "analyze", config.out / "analyze" / f"m{m}" / "profiles.json"))
    data = (config.out / "analyze" / f"m{m}" / "fields.bin").read_bytes()
    return np.frombuffer(data, dtype="<f8").reshape(meta["shape"])


def _pairs(spec: NetworkSpec, layers: list[int]) -> list[tuple[int, int]]:
    """Consecutive probed feature layers (m, m + 1), each pruning the weights of layer m + 1."""
    return [(m, m + 1) for m in layers if m + 1 in layers]


def _weight_index(spec: NetworkSpec, m: int) -> int:
    """Spec index of the weighted layer fed by feature layer m (m = number of feature layers means the output)."""
    return spec.weight_layers()[m]


def build_masks(config: ExperimentConfig, spec: NetworkSpec, scheme: str) -> dict[int, ConnectionMask]:
    layers = probe_layers(config, spec)
    num_labels = spec.num_labels
    top = max(layers)
    output_pair = (top, len(spec.feature_layers()) + 1)
    masks: dict[int, ConnectionMask] = {}
    if scheme == "afcc":
        profiles = {m: _load_profiles(config, "prune", m) for m in layers}
        for a, b in _pairs(spec, layers):
            masks[_weight_index(spec, a)] = _tag(afcc_mask(profiles[a], profiles[b]), (a, b))
        if top == len(spec.feature_layers()):
            masks[spec.output_layer()] = _tag(afcc_output_mask(profiles[top], num_labels), output_pair)
    elif scheme == "a-afcc":
        base = config.a_afcc_base_size
        if base is None:
            stats = _load_stats(config, "prune")["layers"]
            base = int(math.floor(max(s["diagonal"] for s in stats.values()))) + 1
        counts = [spec.layers[spec.feature_layers()[m - 1]].weight_shape[0] for m in layers]
        assignments = a_afcc_assign(counts, base, config.a_afcc_increment, num_labels, config.seed)
        for (a, b), mask in zip(_pairs(spec, layers), a_afcc_mask(assignments, config.seed)):
            masks[_weight_index(spec, a)] = _tag(mask, (a, b))
        if top == len(spec.feature_layers()):
            masks[spec.output_layer()] = _tag(a_afcc_output_mask(assignments[-1], num_labels, config.seed), output_pair)
    elif scheme in ("r-afcc-filter", "r-afcc-weight"):
        rates = _matched_rates(config, spec)
        for k, (idx, rate) in enumerate(sorted(rates.items())):
            layer = spec.layers[idx]
            seed = config.seed + 1000 + k
            if scheme == "r-afcc-filter":
                prev = layer.weight_shape[1] if len(layer.weight_shape) == 4 else _prev_units(spec, idx)
                masks[idx] = r_afcc_filter_mask((layer.weight_shape[0], prev), rate, seed)
            else:
                masks[idx] = r_afcc_weight_mask(layer.weight_shape, rate, seed)
    elif scheme == "fc-node":
        profiles = {m: _load_profiles(config, "prune", m) for m in layers}
        dense = [m for m in layers if isinstance(spec.layers[spec.feature_layers()[m - 1]], Dense)]
        pairs = _pairs(spec, dense)
        if not pairs:
            raise ValueError("fc-node pruning needs two consecutive probed dense layers")
        removed = {}
        for a, b in pairs:
            mask, gone = fc_node_mask(profiles[a], profiles[b], config.remove_noise_nodes)
            masks[_weight_index(spec, a)] = replace(mask, meta={"layer_pair": [a, b], "removed": gone})
            removed[f"{a}-{b}"] = gone
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return masks


def _prev_units(spec: NetworkSpec, idx: int) -> int:
    """Channels or nodes feeding weighted layer ``idx``; looks through Flatten and activations."""
    inputs = [tuple(spec.input_shape)] + spec.shapes()
    for j in range(idx, -1, -1):
        shape = inputs[j]
        if len(shape) == 3 or j == 0 or isinstance(spec.layers[j - 1], Dense):
            return shape[0]
    return inputs[idx][0]


def _matched_rates(config: ExperimentConfig, spec: NetworkSpec) -> dict[int, float]:
    """Per weighted layer dilution: configured, or the measured afcc rates, or the estimator on analyze stats."""
    if config.r_afcc_rates:
        return {_weight_index(spec, int(m)): float(r) for m, r in config.r_afcc_rates.items()}
    afcc_dir = _variant_dir(config, "prune", "afcc")
    if (afcc_dir / "masks.json").exists():
        return {i: m.dilution_rate for i, m in io.load_masks(afcc_dir).items()}
    stats = _load_stats(config, "prune")
    diag = {int(m): s["diagonal"] for m, s in stats["layers"].items()}
    layers = probe_layers(config, spec)
    num_labels = stats["num_labels"]
    rates = {_weight_index(spec, a): estimate_dilution(diag[a], diag[b], num_labels) for a, b in _pairs(spec, layers)}
    top = max(layers)
    if top == len(spec.feature_layers()):
        rates[spec.output_layer()] = estimate_dilution(diag[top], 1, num_labels)
    return rates


def stage_prune(config: ExperimentConfig) -> dict:
    """Build the scheme's masks; for every scheme except a-afcc also apply them to the baseline and score it."""
    scheme = config.scheme
    out = _variant_dir(config, "prune")
    if scheme == "a-afcc":
        if config.a_afcc_base_size is None:
            _need("prune", "analyze", config.out / "analyze" / "stats.json")
        _, test_ds = _data(config)
        spec = build_spec(config, test_ds.num_labels)
        masks = build_masks(config, spec, scheme)
        io.save_masks(out, masks, {"scheme": scheme})
        return {"dir": str(out), "dilution": {i: m.dilution_rate for i, m in masks.items()}}
    spec, ckpt, _ = io.load_checkpoint(_need("prune", "train", _baseline_dir(config) / "manifest.json").parent)
    masks = build_masks(config, spec, scheme)
    for i, mask in masks.items():
        ckpt.install_mask(i, mask)
    _, test_ds = _data(config)
    acc = evaluate(spec, ckpt, test_ds.x, test_ds.labels)
    io.save_checkpoint(out, spec, ckpt, {"scheme": scheme, "test_accuracy": acc})
    log.info("prune %s: immediate test accuracy %.4f", scheme, acc)
    return {"dir": str(out), "test_accuracy": acc, "dilution": {i: m.dilution_rate for i, m in masks.items()}}


def stage_finetune(config: ExperimentConfig) -> dict:
    """A few epochs at probe settings with the masks installed."""
    src = _need("finetune", "prune", _variant_dir(config, "prune") / "manifest.json").parent
    spec, ckpt, _ = io.load_checkpoint(src)
    train_ds, test_ds = _data(config)
    cfg = replace(config.probe_config(200), epochs=config.finetune_epochs)
    if config.finetune:
        over = dict(config.finetune)
        if "schedule" in over:
            over["schedule"] = [Schedule(**s) if isinstance(s, dict) else s for s in over["schedule"]]
        cfg = replace(cfg, **over)
    ckpt, hist = train(spec, ckpt, (train_ds.x, train_ds.labels), cfg, augment=augmenter(train_ds.policy))
    acc = evaluate(spec, ckpt, test_ds.x, test_ds.labels)
    out = _variant_dir(config, "finetune")
    io.save_checkpoint(out, spec, ckpt, {"scheme": config.scheme, "test_accuracy": acc})
    io.write_json(out / "history.json", {"history": _history(hist), "config": cfg.to_dict()})
    log.info("finetune %s: test accuracy %.4f", config.scheme, acc)
    return {"dir": str(out), "test_accuracy": acc}


def _final_checkpoint(config: ExperimentConfig) -> tuple[Path, str]:
    """Most processed network for the scheme: finetuned, else pruned, else a-afcc-trained, else the baseline."""
    candidates = [(_variant_dir(config, "finetune"), "finetune"), (_variant_dir(config, "prune"), "prune")]
    if config.scheme == "a-afcc":
        candidates.insert(0, (_variant_dir(config, "train", "a-afcc"), "train"))
    candidates.append((_baseline_dir(config), "train"))
    for d, name in candidates:
        if (d / "manifest.json").exists():
            return d, name
    raise MissingPrerequisite("report", "train", _baseline_dir(config))


def report_rows(config: ExperimentConfig) -> tuple[list[dict], dict]:
    src, origin = _final_checkpoint(config)
    spec, ckpt, manifest = io.load_checkpoint(src)
    cost = network_cost(spec, ckpt=ckpt)
    by_layer = {c.layer: c for c in cost.layers}
    stats_path = config.out / "analyze" / "stats.json"
    stats = io.read_json(stats_path) if stats_path.exists() else {"layers": {}, "num_labels": spec.num_labels}
    layer_stats_ = {int(k): v for k, v in stats["layers"].items()}
    num_labels = spec.num_labels
    n_feat = len(spec.feature_layers())
    rows = []
    for m in range(1, n_feat + 2):
        idx = spec.weight_layers()[m - 1]
        s = layer_stats_.get(m, {})
        below = layer_stats_.get(m - 1)
        est = None
        if below is not None and m <= n_feat and s:
            est = estimate_dilution(below["diagonal"], s["diagonal"], num_labels)
        elif below is not None and m == n_feat + 1:
            est = estimate_dilution(below["diagonal"], 1, num_labels)
        mask = ckpt.masks.get(idx)
        c = by_layer[idx]
        rows.append({
            "layer": m if m <= n_feat else "output",
            "accuracy": s.get("probe_accuracy") if m <= n_feat else manifest.get("test_accuracy"),
            "N_c": s.get("n_c"), "C_s": s.get("c_s"), "diagonal": s.get("diagonal"), "noise": s.get("noise"),
            "dilution_est": est,
            "dilution_measured": measured_dilution(mask) if mask is not None else 0.0,
            "params_masked": c.params_masked, "macs_masked": c.macs_masked,
        })
    summary = {"scheme": config.scheme, "source": origin, "test_accuracy": manifest.get("test_accuracy"), **cost.summary()}
    return rows, {"summary": summary, "cost_rows": cost.rows()}


def stage_report(config: ExperimentConfig) -> dict:
    rows, extra = report_rows(config)
    out = config.out / "report"
    io.atomic_write_bytes(out / f"{config.scheme}.csv", render.rows_csv(rows, REPORT_COLUMNS).encode())
    io.atomic_write_bytes(out / f"{config.scheme}_cost.csv", render.rows_csv(extra["cost_rows"], COST_COLUMNS).encode())
    io.write_json(out / f"{config.scheme}_summary.json", extra["summary"])
    return {"rows": rows, **extra}


def stage_render(config: ExperimentConfig, layer: int | None = None, max_filters: int | None = None) -> dict:
    """Clipped-matrix images per filter, as scanned and with clusters made contiguous."""
    spec = NetworkSpec.from_dict(io.read_json(_need("render", "train", _baseline_dir(config) / "manifest.json"))["spec"])
    layers = [layer] if layer is not None else probe_layers(config, spec)
    written = []
    for m in layers:
        fields_ = load_fields(config, m)
        profiles = _load_profiles(config, "render", m)
        th = io.read_json(config.out / "analyze" / f"m{m}" / "profiles.json")["threshold"]
        d = config.out / "render" / f"m{m}"
        for f in range(len(fields_) if max_filters is None else min(max_filters, len(fields_))):
            clipped = clip(normalize(fields_[f]), th)
            written.append(render.write_matrix_image(d / f"filter{f:03d}.ppm", clipped, profiles[f]))
            written.append(render.write_matrix_image(d / f"filter{f:03d}_permuted.ppm", clipped, profiles[f], permuted=True))
    return {"files": [str(p) for p in written]}


def run_stage(config: ExperimentConfig, stage: str, layer: int | None = None) -> dict:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    config.out.mkdir(parents=True, exist_ok=True)
    io.write_json(config.out / f"config.{stage}.json", config.to_dict())
    if stage == "analyze":
        return stage_analyze(config, layer)
    if stage == "render":
        return stage_render(config, layer)
    return {"train": stage_train, "probe": stage_probe, "prune": stage_prune, "finetune": stage_finetune, "report": stage_report}[stage](config)
