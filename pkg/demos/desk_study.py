"""Full desk study: robustness, generalization and drift tables with plots.

Run: python demos/desk_study.py [out_dir]
Roughly 15 minutes on one core; set FWI_CERTIFY_WORKERS to use more.
"""
import sys
from pathlib import Path

from fwicert.experiments import (SuiteConfig, drift_monotone, ensure_drift_sets, run_drift_suite,
                                 run_generalization_suite, run_robustness_suite, spearman,
                                 train_robustness_models, write_report)
from fwicert.fwi_sim import AcquisitionConfig, MapConfig, build_dataset, load_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "out/desk")
maps, acq = MapConfig(32, 32, dx=5.0), AcquisitionConfig()
config = SuiteConfig()
for name, n, seed in (("train", 1600, 1), ("test", 200, 2)):
    if not (out / name / "manifest").exists():
        build_dataset(out / name, n, maps, acq, seed, workers=config.workers)
train, test = load_dataset(out / "train"), load_dataset(out / "test")
train_set, test_set = (train.inputs, train.targets), (test.inputs, test.targets)


def save(table, name):
    write_report(table, out / f"{name}.csv")
    write_report(table, out / f"{name}.svg", fmt="svg")


models = train_robustness_models(train_set, config)
robust = run_robustness_suite(models, test_set, config)
save(robust, "robustness")
for row in robust.rows:
    print(dict(zip(robust.columns, row)))

gen = run_generalization_suite(train_set, test_set, config)
save(gen.sizes, "generalization_sizes")
save(gen.archs, "generalization_archs")
print("spearman(M/sqrt(N), gap) =", spearman(gen.sizes.column("m_over_sqrt_n"), gen.sizes.column("err_g")))
print("spearman(frob product, gap) =", spearman(gen.archs.column("frob_product"), gen.archs.column("err_g")))

sets = ensure_drift_sets(out / "drift", maps, acq, config, test_seed=2)
drift = run_drift_suite(models["mae"] + models["mse"], train_set, sets, config)
save(drift, "drift")
print("gap increases with faults:", drift_monotone(drift, "faults"))
print("gap increases with frequency:", drift_monotone(drift, "frequency"))
