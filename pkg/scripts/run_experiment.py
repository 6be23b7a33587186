"""Run the whole desk-scale study: baseline, probes, clusters, then each pruning scheme with fine-tuning.

    python3 scripts/run_experiment.py configs/desk.json [--schemes afcc r-afcc-filter a-afcc]
"""

import argparse
import json
import logging
import time

from afcc.pipeline import ExperimentConfig, run_stage


def run(config: ExperimentConfig, schemes) -> dict:
    results = {}
    t0 = time.time()
    results["baseline"] = run_stage(config, "train")["test_accuracy"]
    results["probe"] = run_stage(config, "probe")["accuracy"]
    results["stats"] = run_stage(config, "analyze")["layers"]
    for scheme in schemes:
        cfg = config.override(scheme=scheme)
        pruned = run_stage(cfg, "prune")
        entry = {"dilution": pruned["dilution"]}
        if scheme == "a-afcc":
            entry["trained"] = run_stage(cfg, "train")["test_accuracy"]
        else:
            entry["immediate"] = pruned["test_accuracy"]
            entry["finetuned"] = run_stage(cfg, "finetune")["test_accuracy"]
        run_stage(cfg, "report")
        results[scheme] = entry
    results["seconds"] = time.time() - t0
    return results


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    p.add_argument("--schemes", nargs="+", default=["afcc", "r-afcc-filter", "r-afcc-weight", "a-afcc"])
    p.add_argument("--output-dir")
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig.load(a.config).override(output_dir=a.output_dir)
    res = run(cfg, a.schemes)
    print(json.dumps(res, indent=2, default=str))
