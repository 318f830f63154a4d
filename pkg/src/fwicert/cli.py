"""``fwicert`` command-line entry point."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

from .config import ConfigError, float_list, int_list, parse_config

log = logging.getLogger("fwicert")


def _add_common(p):
    p.add_argument("--config", help="INI file with section/key settings")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--workers", type=int, help="worker processes (default: FWI_CERTIFY_WORKERS or all cores)")


def build_parser():
    parser = argparse.ArgumentParser(prog="fwicert", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="synthesize velocity maps and shot gathers")
    _add_common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--faults", type=int)
    p.add_argument("--freq", type=float)
    p.add_argument("--grid", type=int, help="square map size in cells")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="fit the reference network")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--loss", choices=["mae", "mse"])
    p.add_argument("--opt", choices=["sgd", "adagrad", "adamw"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--n-train", type=int)
    p.add_argument("--out-model", required=True)

    p = sub.add_parser("certify", help="robustness bounds with a Monte Carlo check")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--eta", type=float)
    p.add_argument("--draws", type=int)
    p.add_argument("--loss", choices=["mae", "mse"])
    p.add_argument("--out", help="append the CSV row to this file")

    p = sub.add_parser("perturb", help="noise-robustness suite over SNR levels")
    _add_common(p)
    p.add_argument("--model-mae", required=True, help="comma-separated model files")
    p.add_argument("--model-mse", required=True, help="comma-separated model files")
    p.add_argument("--dataset", required=True)
    p.add_argument("--snr")
    p.add_argument("--out", required=True)

    p = sub.add_parser("generalize", help="generalization gap vs training size and width")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--test-dataset", help="held-out set (default: last n_test samples of --dataset)")
    p.add_argument("--sizes")
    p.add_argument("--archs")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("drift", help="generalization gap on drifted test sets")
    _add_common(p)
    p.add_argument("--models", required=True, help="comma-separated model files")
    p.add_argument("--dataset", required=True, help="training set the models were fit on")
    p.add_argument("--drift-dir", help="where drifted test sets live (built if missing)")
    p.add_argument("--faults")
    p.add_argument("--freqs")
    p.add_argument("--n-train", type=int)
    p.add_argument("--loss", choices=["mae", "mse"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="re-emit a CSV report as CSV or SVG")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=["csv", "svg"], default="csv")
    p.add_argument("--out")
    return parser


OVERRIDES = {
    "gen-data": {"seed": "general.seed", "workers": "general.workers", "n": "data.n",
                 "faults": "data.faults", "freq": "data.freq", "grid": "data.grid"},
    "train": {"seed": "general.seed", "workers": "general.workers", "loss": "train.loss",
              "opt": "train.opt", "epochs": "train.epochs", "batch": "train.batch", "lr": "train.lr",
              "n_train": "train.n_train"},
    "certify": {"seed": "general.seed", "workers": "general.workers", "eta": "certify.eta",
                "draws": "certify.draws", "loss": "certify.loss"},
    "perturb": {"seed": "general.seed", "workers": "general.workers", "snr": "suite.snr"},
    "generalize": {"seed": "general.seed", "workers": "general.workers", "sizes": "suite.sizes",
                   "archs": "suite.archs", "steps": "suite.steps"},
    "drift": {"seed": "general.seed", "workers": "general.workers", "faults": "suite.faults",
              "freqs": "suite.freqs", "n_train": "suite.n_train", "loss": "train.loss"},
}


def _workers(cfg):
    return cfg["general.workers"] or None


def _write_provenance(path, cfg, command):
    """Sidecar for artifacts whose own format has no room for a header."""
    info = dict(cfg.provenance(), command=command, config=cfg.values)
    Path(str(path) + ".provenance").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")


def _map_and_acq(cfg):
    from .fwi_sim import AcquisitionConfig, MapConfig
    grid = cfg["data.grid"]
    mc = MapConfig(grid, grid, dx=cfg["data.dx"], fault_count=cfg["data.faults"])
    acq = AcquisitionConfig(n_sources=cfg["data.sources"], frequency=cfg["data.freq"],
                            n_time=cfg["data.time_samples"], source_delay=cfg["data.source_delay"])
    return mc, acq


def _configs_from_manifest(manifest):
    from .fwi_sim import AcquisitionConfig, MapConfig
    c = manifest["config"]
    return MapConfig(**c["map"]), AcquisitionConfig(**c["acquisition"])


def _suite_config(cfg, **kw):
    from .experiments import SuiteConfig
    snr = tuple(math.inf if v.strip() == "inf" else float(v) for v in cfg["suite.snr"].split(","))
    archs = tuple(tuple(int(w) for w in a.split("-")) for a in cfg["suite.archs"].split(","))
    base = dict(snr_levels=snr, train_sizes=int_list(cfg["suite.sizes"]), arch_widths=archs,
                optimizers=tuple(cfg["suite.optimizers"].split(",")), steps=cfg["suite.steps"],
                fault_counts=int_list(cfg["suite.faults"]), frequencies=float_list(cfg["suite.freqs"]),
                n_test=cfg["suite.n_test"], master_seed=cfg.seed, workers=_workers(cfg),
                batch_size=cfg["train.batch"])
    base.update(kw)
    return SuiteConfig(**base)


def cmd_gen_data(args, cfg):
    from .fwi_sim import build_dataset
    mc, acq = _map_and_acq(cfg)
    manifest = build_dataset(args.out, cfg["data.n"], mc, acq, cfg.seed, chunk=cfg["data.chunk"],
                             workers=_workers(cfg))
    print(f"wrote {manifest['n_samples']} samples to {args.out}")


def cmd_train(args, cfg):
    from .experiments import SuiteConfig, train_model
    from .fwi_sim import load_dataset
    ds = load_dataset(args.dataset)
    n = cfg["train.n_train"] or len(ds)
    opt = cfg["train.opt"]
    suite = SuiteConfig(batch_size=cfg["train.batch"])
    if cfg["train.lr"] > 0:
        suite = dataclasses.replace(suite, learning_rates=((opt, cfg["train.lr"]),))
    model = train_model((ds.inputs, ds.targets), cfg["train.loss"], opt, cfg.seed, n, suite,
                        widths=int_list(cfg["train.widths"]), epochs=cfg["train.epochs"])
    model.save(args.out_model)
    _write_provenance(args.out_model, cfg, "train")
    print(f"max_train_loss = {model.max_train_loss}")


def cmd_certify(args, cfg):
    from .bounds import certify
    from .fwi_sim import load_dataset
    from .network import load_model
    spec, params = load_model(args.model)
    ds = load_dataset(args.dataset)
    report = certify(params, spec, (ds.inputs, ds.targets), cfg["certify.eta"], cfg["certify.draws"],
                     seed=cfg.seed, loss_kind=cfg["certify.loss"], workers=_workers(cfg))
    sys.stdout.write(report.to_text())
    sys.stdout.write(report.csv_header() + report.to_csv_row())
    if args.out:
        path = Path(args.out)
        if not path.exists():
            prov = " ".join(f"{k}={v}" for k, v in sorted(cfg.provenance().items()))
            path.write_text(f"# provenance kind=certify {prov}\n" + report.csv_header())
        with path.open("a") as fh:
            fh.write(report.to_csv_row())
    if report.violation:
        raise RuntimeError("robustness bound violated")


def _models(paths, loss_kind, train_set, n_train):
    from .experiments import load_trained
    return [load_trained(p, loss_kind, n_train, train_set) for p in paths.split(",") if p]


def cmd_perturb(args, cfg):
    from .experiments import run_robustness_suite, write_report
    from .fwi_sim import load_dataset
    ds = load_dataset(args.dataset)
    data = (ds.inputs, ds.targets)
    suite = _suite_config(cfg)
    models = {"mae": _models(args.model_mae, "mae", data, len(ds)),
              "mse": _models(args.model_mse, "mse", data, len(ds))}
    table = run_robustness_suite(models, data, suite)
    table.provenance = cfg.provenance()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(table, out / "robustness.csv")
    write_report(table, out / "robustness.svg", "svg")
    print(f"wrote {out / 'robustness.csv'}")


def cmd_generalize(args, cfg):
    from .experiments import run_generalization_suite, write_report
    from .fwi_sim import load_dataset
    ds = load_dataset(args.dataset)
    if args.test_dataset:
        test = load_dataset(args.test_dataset)
        train, held = (ds.inputs, ds.targets), (test.inputs, test.targets)
    else:
        k = cfg["suite.n_test"]
        if k >= len(ds):
            raise ValueError(f"dataset of {len(ds)} samples cannot hold out {k} for testing")
        train, held = (ds.inputs[:-k], ds.targets[:-k]), (ds.inputs[-k:], ds.targets[-k:])
    res = run_generalization_suite(train, held, _suite_config(cfg), cfg["train.loss"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, table in (("generalization_sizes", res.sizes), ("generalization_archs", res.archs)):
        table.provenance = cfg.provenance()
        write_report(table, out / f"{name}.csv")
        write_report(table, out / f"{name}.svg", "svg")
    print(f"wrote {out / 'generalization_sizes.csv'} and {out / 'generalization_archs.csv'}")


def cmd_drift(args, cfg):
    from .experiments import ensure_drift_sets, run_drift_suite, write_report
    from .fwi_sim import load_dataset
    ds = load_dataset(args.dataset)
    data = (ds.inputs, ds.targets)
    n_train = min(cfg["suite.n_train"], len(ds))
    models = _models(args.models, cfg["train.loss"], data, n_train)
    mc, acq = _configs_from_manifest(ds.manifest)
    mc = dataclasses.replace(mc, fault_count=1)
    suite = _suite_config(cfg)
    drift_dir = Path(args.drift_dir or Path(args.out) / "drift_sets")
    sets = ensure_drift_sets(drift_dir, mc, acq, suite, cfg["suite.test_seed"])
    table = run_drift_suite(models, data, sets, suite)
    table.provenance = cfg.provenance()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(table, out / "drift.csv")
    write_report(table, out / "drift.svg", "svg")
    print(f"wrote {out / 'drift.csv'}")


def cmd_report(args, cfg):
    from .experiments import read_report, write_report
    table = read_report(args.input)
    if args.format == "svg":
        out = Path(args.out) if args.out else Path(args.input).with_suffix(".svg")
        write_report(table, out, "svg")
        print(f"wrote {out}")
    elif args.out:
        write_report(table, args.out)
    else:
        sys.stdout.write(Path(args.input).read_text())


COMMANDS = {"gen-data": (cmd_gen_data, "fwi_sim"), "train": (cmd_train, "train"),
            "certify": (cmd_certify, "bounds"), "perturb": (cmd_perturb, "experiments"),
            "generalize": (cmd_generalize, "experiments"), "drift": (cmd_drift, "experiments"),
            "report": (cmd_report, "experiments")}


def dispatch(command, args, cfg) -> int:
    fn, module = COMMANDS[command]
    try:
        fn(args, cfg)
    except Exception as err:  # surfaced as one structured line, never a traceback
        msg = str(err).replace("\n", " ")
        print(f"error: module={module} type={type(err).__name__} message={msg}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    overrides = {dotted: getattr(args, attr, None)
                 for attr, dotted in OVERRIDES.get(args.command, {}).items()}
    try:
        cfg = parse_config(getattr(args, "config", None), overrides)
    except ConfigError as err:
        print(f"error: module=config type=ConfigError key={err.key} message={err}", file=sys.stderr)
        return 1
    return dispatch(args.command, args, cfg)


if __name__ == "__main__":
    sys.exit(main())
