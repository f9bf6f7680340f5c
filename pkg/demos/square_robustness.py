"""Square segmentation with one- and two-stage consensus, at a reduced scale.

Plain EP on this model often locks onto the wrong foreground/background
assignment and never recovers. The colour predictors guess fg and bg from
the pixels; the side-length predictor then reads l off the segmentation.

Full size: ``consensus-mp experiment --config configs/square.json``.
"""
import numpy as np

from consensus_mp import harness

cfg = harness.load_config("configs/square.json")
cfg = harness.ExperimentConfig.from_dict(dict(cfg.to_dict(), D=150, trials=10))
res = harness.run_experiment(cfg)

final = {}
for arm, k, it, m, v in res["rows"]:
    if it == cfg.iterations and m == "centerError":
        final.setdefault(arm, []).append(v)
for arm, errs in final.items():
    errs = np.array(errs)
    print(f"{arm:<11s} mean final centre error {errs.mean():6.2f}   "
          f"solved (< 2 px) {np.mean(errs < 2.0):.0%}")
