"""Run the grasp under both contact models and print the comparison table."""

import argparse
from pathlib import Path

from rigidlcp.benchcli import ScenarioConfig, compare_models, run_scenario


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--out-dir", type=Path, default=Path("out/grasp"))
    args = ap.parse_args()

    base = ScenarioConfig(scenario="grasp", steps=args.steps, dt=0.01)
    cfgs = [base, base.replace(model="pyramid-baseline", solver="lemke")]
    reports = []
    for cfg in cfgs:
        rep = run_scenario(cfg)
        rep.write(args.out_dir / cfg.label.replace("/", "_"))
        print(f"{cfg.label}: {len(rep.steps)} steps, {len(rep.failures)} failures, drift {rep.max_drift:.2e}")
        reports.append(rep)
    print(compare_models(cfgs, reports=reports).to_text())


if __name__ == "__main__":
    main()
