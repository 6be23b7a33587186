import math
import csv
import io as _io
import json

import numpy as np
import pytest

from afcc import io
from afcc.cli import main
from afcc.pipeline import REPORT_COLUMNS, ExperimentConfig, MissingPrerequisite, run_stage
from afcc.synthetic import write_dataset


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return write_dataset(tmp_path_factory.mktemp("data"), n_train=200, n_test=100, seed=0)


def make_config(out, dataset, **kw):
    base = dict(
        output_dir=str(out),
        dataset_path=str(dataset),
        arch_params={"channels": [4, 6, 6, 8]},
        train={"eta": 0.02, "mu": 0.9, "alpha": 5e-4, "schedule": [{"start": 0, "stop": None, "q": 0.65, "delta_t": 5}], "batch_size": 50, "epochs": 1},
        probe={"epochs": 2},
        finetune_epochs=1,
    )
    base.update(kw)
    return ExperimentConfig.from_dict(base)


@pytest.fixture(scope="module")
def analyzed(tmp_path_factory, dataset):
    cfg = make_config(tmp_path_factory.mktemp("run"), dataset)
    for stage in ("train", "probe", "analyze"):
        run_stage(cfg, stage)
    return cfg


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_config_validation(dataset, tmp_path):
    with pytest.raises(ValueError):
        make_config(tmp_path, dataset, conv_threshold=1.2)
    with pytest.raises(ValueError):
        make_config(tmp_path, dataset, scheme="magnitude")
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"output_dir": "x", "dataset_path": "y", "bogus": 1})
    cfg = make_config(tmp_path, dataset)
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_missing_prerequisites_are_named(dataset, tmp_path):
    cfg = make_config(tmp_path, dataset)
    for stage, needs in (("probe", "train"), ("analyze", "train"), ("finetune", "prune")):
        with pytest.raises(MissingPrerequisite) as e:
            run_stage(cfg, stage)
        assert e.value.needs == needs
    with pytest.raises(MissingPrerequisite):
        run_stage(cfg.override(scheme="a-afcc"), "prune")  # automatic base size needs analyze stats


def test_stage_outputs(analyzed):
    out = analyzed.out
    assert (out / "train" / "baseline" / "manifest.json").exists()
    assert io.read_json(out / "probe" / "m4" / "manifest.json")["probe"] is True
    stats = io.read_json(out / "analyze" / "stats.json")["layers"]
    assert set(stats) == {"2", "3", "4"}
    for s in stats.values():
        assert s["diagonal"] == pytest.approx(s["n_c"] * s["c_s"])


def test_afcc_prune_finetune_report_render(analyzed):
    pruned = run_stage(analyzed, "prune")
    assert set(pruned["dilution"]) == {6, 9, 12}
    tuned = run_stage(analyzed, "finetune")
    _, ckpt, _ = io.load_checkpoint(tuned["dir"])
    for i, m in ckpt.masks.items():
        assert not ckpt.weights[i][~m.expand(ckpt.weights[i].shape)].any()
    rep = run_stage(analyzed, "report")
    text = (analyzed.out / "report" / "afcc.csv").read_text()
    rows = list(csv.DictReader(_io.StringIO(text)))
    assert text.splitlines()[0] == ",".join(REPORT_COLUMNS)
    assert [r["layer"] for r in rows] == ["1", "2", "3", "4", "output"]
    assert float(rows[-1]["dilution_measured"]) == pytest.approx(pruned["dilution"][12])
    assert rep["summary"]["flops_masked"] == 2 * rep["summary"]["macs_masked"]
    files = run_stage(analyzed, "render", layer=4)["files"]
    assert len(files) == 2 * 8 and all(f.endswith(".ppm") for f in files)


def test_unpruned_report_has_full_survival(dataset, tmp_path):
    cfg = make_config(tmp_path, dataset)
    run_stage(cfg, "train")
    rows = run_stage(cfg, "report")["rows"]
    assert all(r["dilution_measured"] == 0.0 for r in rows)
    assert all(r["survival"] == 1 for r in run_stage(cfg, "report")["cost_rows"])


def test_stage_idempotence(analyzed, tmp_path):
    first = tree_bytes(analyzed.out)
    again = analyzed.override(output_dir=str(tmp_path))
    for stage in ("train", "probe", "analyze"):
        run_stage(again, stage)
    second = tree_bytes(tmp_path)
    for name in ("train/baseline/manifest.json", "train/baseline/layer0_weight.bin", "probe/m3/readout.bin", "analyze/m4/profiles.json", "analyze/stats.json"):
        assert first[name] == second[name], name
    # a second run into the same directory rewrites identical bytes
    run_stage(again, "analyze")
    assert tree_bytes(tmp_path)["analyze/m4/fields.bin"] == second["analyze/m4/fields.bin"]


def test_r_afcc_matches_afcc_rates(analyzed):
    if not (analyzed.out / "prune" / "afcc" / "masks.json").exists():
        run_stage(analyzed, "prune")
    afcc = io.load_masks(analyzed.out / "prune" / "afcc")
    rand = run_stage(analyzed.override(scheme="r-afcc-filter"), "prune")
    assert set(rand["dilution"]) == set(afcc)
    drawn = io.load_masks(analyzed.out / "prune" / "r-afcc-filter")
    for i, m in afcc.items():
        r = m.dilution_rate
        # each kept/dropped pair is a Bernoulli draw at the afcc rate: stay within 4 standard deviations
        assert abs(rand["dilution"][i] - r) <= 4 * math.sqrt(r * (1 - r) / drawn[i].keep.size) + 1e-12
    weight = run_stage(analyzed.override(scheme="r-afcc-weight"), "prune")
    assert set(weight["dilution"]) == set(afcc)


def test_a_afcc_can_precede_training(dataset, tmp_path):
    cfg = make_config(tmp_path, dataset, scheme="a-afcc", a_afcc_base_size=3)
    pruned = run_stage(cfg, "prune")
    assert not (tmp_path / "train" / "baseline").exists()
    assert set(pruned["dilution"]) == {6, 9, 12}
    result = run_stage(cfg, "train")
    _, ckpt, _ = io.load_checkpoint(result["dir"])
    assert set(ckpt.masks) == {6, 9, 12}
    masks = io.load_masks(tmp_path / "prune" / "a-afcc")
    # top layer keeps base size labels per filter in the readout
    assert (masks[12].keep.sum(axis=0) == 3).all()


def test_fc_node_scheme_on_hidden_dense_layers(dataset, tmp_path):
    cfg = make_config(tmp_path, dataset, scheme="fc-node", arch_params={"channels": [4, 4, 4, 4], "fc_hidden": [12, 12]}, probe_layers=[5, 6])
    for stage in ("train", "probe", "analyze"):
        run_stage(cfg, stage)
    stats = io.read_json(tmp_path / "analyze" / "stats.json")["layers"]
    assert stats["5"]["threshold"] == 0.98
    pruned = run_stage(cfg, "prune")
    assert list(pruned["dilution"]) == [14]  # weights of the second hidden dense layer


def test_cli_runs_a_stage(dataset, tmp_path, capsys):
    cfg = make_config(tmp_path / "out", dataset)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert main(["probe", "--config", str(path)]) == 2  # nothing trained yet
    assert "train" in capsys.readouterr().err
    assert main(["train", "--config", str(path), "--seed", "3"]) == 0
    assert io.read_json(tmp_path / "out" / "train" / "baseline" / "manifest.json")["seed"] == 3
    assert "test_accuracy" in capsys.readouterr().out
