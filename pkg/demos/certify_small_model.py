"""Simulate a small corpus, fit an MAE network and check its robustness certificate.

Run: python demos/certify_small_model.py [out_dir]
Takes about a minute on one core.
"""
import sys
from pathlib import Path

from fwicert.bounds import certify
from fwicert.fwi_sim import AcquisitionConfig, MapConfig, build_dataset, load_dataset
from fwicert.network import init_params, predict, reference_spec
from fwicert.train import compute_loss, fit

out = Path(sys.argv[1] if len(sys.argv) > 1 else "out/demo")
maps, acq = MapConfig(32, 32, dx=5.0), AcquisitionConfig()
build_dataset(out / "train", 400, maps, acq, seed=1)
build_dataset(out / "test", 50, maps, acq, seed=2)
train, test = load_dataset(out / "train"), load_dataset(out / "test")
print("gather shape", train.inputs.shape[1:], "map shape", train.targets.shape[1:])

spec = reference_spec(train.inputs.shape[1:], train.targets.shape[1:])
params, record = fit(spec, init_params(spec, 0), (train.inputs, train.targets), "mae", "adamw",
                     epochs=10, batch_size=32, seed=0, learning_rate=3e-3)
print(f"train MAE {record.max_train_loss:.4f} (max per sample), "
      f"test MAE {compute_loss(predict(params, spec, test.inputs), test.targets):.4f}")

for eta in (0.01, 0.1, 1.0):
    report = certify(params, spec, (test.inputs, test.targets), eta, n_draws=2000)
    print(f"eta={eta:<5g} bound {report.rb_mae:.3e}  worst observed gain "
          f"{report.empirical_gain_max:.3e}  violation={report.violation}")
