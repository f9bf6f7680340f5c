"""Consensus messages on the circle model, at a reduced scale.

A forest is trained to predict the circle centre from the first-iteration
messages of the noisy points, using beliefs after long runs of plain message
passing as targets. The script then prints the mean centre error per
iteration for plain MP, for CMP, and for the forest alone.

The full-size run is ``consensus-mp experiment --config configs/circle.json``.
It takes well under a minute.
"""
import numpy as np

from consensus_mp import harness

cfg = harness.load_config("configs/circle.json")
cfg = harness.ExperimentConfig.from_dict(dict(cfg.to_dict(), D=120, trials=12,
                                              iterations=30, longIterations=60))
res = harness.run_experiment(cfg)

show = [1, 5, 10, 20, 30]
print("iteration   " + "  ".join(f"{i:>6d}" for i in show))
for arm, metrics in res["summary"].items():
    curve = np.array(metrics["centerError"]["mean"])
    print(f"{arm:<11s} " + "  ".join(f"{curve[i - 1]:6.3f}" for i in show))
print("schedule invariants hold:", res["scheduleInvariants"])
