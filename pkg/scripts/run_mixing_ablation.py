"""none / static / mist on the multimodal paraphrase task, plus the iteration ablation."""

import argparse
import json
import logging

from mistnar.experiments import AblationConfig, iteration_ablation, mixing_ablation
from mistnar.metrics import write_iteration_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="ablation.json")
    ap.add_argument("--csv", default="iterations.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    cfg = AblationConfig(seeds=tuple(int(s) for s in args.seeds.split(",")))
    report = mixing_ablation(cfg, keep_models=True)
    models, corpus = report.pop("models"), report.pop("corpus")
    rows = []
    for seed, by_mode in models.items():
        for mode, model in by_mode.items():
            for row in iteration_ablation(model, corpus, cfg.iterations):
                row["strategy"] = f"{mode}/{row['strategy']}/seed{seed}"
                rows.append(row)
    report["iterations"] = rows
    write_iteration_csv(rows, args.csv)
    with open(args.out, "w") as f:
        json.dump(report, f, indent=2)
    print(json.dumps(report["mean_bleu4"]))


if __name__ == "__main__":
    main()
