"""Intrinsic images of synthetic faces: shading, reflectance and light.

Each pixel is reflectance times shading, shading is the inner product of a
surface normal with the light. Per-pixel reflectance predictors fire first,
then a light predictor reads the shading layer. Reduced scale; the full
setting is ``configs/face.json``.
"""
from consensus_mp import harness

cfg = harness.load_config("configs/face.json")
cfg = harness.ExperimentConfig.from_dict(dict(cfg.to_dict(), D=60, trials=5,
                                              iterations=30))
res = harness.run_experiment(cfg)
for arm, metrics in res["summary"].items():
    light = metrics["lightAngleError"]["mean"][-1]
    refl = metrics["reflectanceRMSE"]["mean"][-1]
    print(f"{arm:<11s} light angle {light:.3f} rad   reflectance RMSE {refl:.3f}")
