"""Noise-robustness, generalization and distribution-drift experiments.

Each suite returns :class:`ReportTable` objects whose cells are reproducible
bit-for-bit from the suite configuration and master seed. Training runs are
independent cells and may be spread over worker processes; results are
always assembled in a fixed order.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .bounds import rb_mae_bound, rb_mse_bound, weight_norm_products
from .fwi_sim import (AcquisitionConfig, MapConfig, build_dataset, config_hash, load_dataset)
from .network import load_model, predict, reference_spec, init_params, save_model
from .parallel import parallel_map
from .train import fit, per_sample_loss

log = logging.getLogger(__name__)

INF = math.inf
SNR_LEVELS = (INF, 30.0, 20.0, 10.0, 0.0)
ROBUSTNESS_COLUMNS = ["loss_kind", "snr_db", "test_loss", "pct_gain", "ssim_mean", "ssim_std",
                      "rb_mae", "rb_mse_stated", "emp_gain_max"]
GENERALIZATION_COLUMNS = ["n_train", "m_over_sqrt_n", "frob_product", "err_g", "err_g_std"]
DRIFT_COLUMNS = ["model_id", "param_combo", "drift_kind", "drift_level", "err_g"]


# ---------------------------------------------------------------------------
# noise and image similarity

def add_noise_snr(signal, snr_db, seed):
    """Add white Gaussian noise at ``snr_db`` relative to the mean-square power of ``signal``.

    An infinite level returns an unchanged copy.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return signal.copy()
    power = float(np.mean(signal * signal))
    if power == 0.0:
        raise ValueError("signal has zero power; SNR is undefined")
    sigma = math.sqrt(power / 10 ** (snr_db / 10))
    return signal + sigma * np.random.default_rng(seed).standard_normal(signal.shape)


def noisy_inputs(x, snr_db, seed):
    """Per-sample :func:`add_noise_snr`; sample ``i`` uses the stream ``(seed, i)``."""
    return np.stack([add_noise_snr(s, snr_db, [int(seed), i]) for i, s in enumerate(x)]) \
        if len(x) else np.asarray(x, dtype=np.float64).copy()


SSIM_WINDOW = 8
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2


def ssim_batch(x, y):
    """SSIM of each image pair along the leading axis; returns ``(clamped, raw)``.

    Uses 8x8 windows at stride 1 with population statistics, K1 = 0.01,
    K2 = 0.03 and a dynamic range of 1; the index is the mean over windows.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    w = SSIM_WINDOW
    if x.shape[-1] < w or x.shape[-2] < w:
        raise ValueError(f"images must be at least {w}x{w}")
    wx = np.lib.stride_tricks.sliding_window_view(x, (w, w), axis=(-2, -1))
    wy = np.lib.stride_tricks.sliding_window_view(y, (w, w), axis=(-2, -1))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    dx = wx - mx[..., None, None]
    dy = wy - my[..., None, None]
    vx = (dx * dx).mean(axis=(-2, -1))
    vy = (dy * dy).mean(axis=(-2, -1))
    cov = (dx * dy).mean(axis=(-2, -1))
    s = ((2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)) / \
        ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
    raw = s.mean(axis=(-2, -1))
    return np.clip(raw, 0.0, 1.0), raw


def ssim(x, y, clamp=True) -> float:
    """SSIM of two 2-D images with values in [0, 1]."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    clamped, raw = ssim_batch(x, y)
    return float(clamped[0] if clamp else raw[0])


# ---------------------------------------------------------------------------
# statistics helpers

def sign_test_p(successes, trials) -> float:
    """One-sided sign test: P(at least ``successes`` wins out of ``trials`` fair coins)."""
    if trials == 0:
        return 1.0
    return float(stats.binomtest(int(successes), int(trials), 0.5, alternative="greater").pvalue)


def spearman(a, b) -> float:
    return float(stats.spearmanr(a, b).statistic)


# ---------------------------------------------------------------------------
# report tables

@dataclass
class ReportTable:
    kind: str
    columns: list
    rows: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    # per-run values behind the aggregated rows (not written to the CSV)
    detail: list = field(default_factory=list)

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v):
    if v == "":
        return None
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def write_report(table: ReportTable, path, fmt="csv") -> None:
    """Write ``table`` as CSV (with a ``# provenance`` comment line) or as an SVG chart."""
    path = Path(path)
    if fmt == "csv":
        prov = " ".join(f"{k}={v}" for k, v in sorted(table.provenance.items()))
        with path.open("w", newline="") as fh:
            fh.write(f"# provenance kind={table.kind} {prov}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(table.columns)
            for row in table.rows:
                w.writerow([_fmt(v) for v in row])
    elif fmt in ("svg", "svg_plot"):
        path.write_text(svg_plot(table))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report(path) -> ReportTable:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# provenance"):
        raise ValueError(f"{path}: missing provenance header")
    prov = dict(item.split("=", 1) for item in lines[0][len("# provenance"):].split())
    kind = prov.pop("kind", "unknown")
    reader = csv.reader(lines[1:])
    columns = next(reader)
    rows = [[_parse(v) for v in r] for r in reader]
    return ReportTable(kind, columns, rows, prov)


def _series(table):
    """Group rows into named (x, y) series for plotting."""
    c = table.columns
    groups = {}
    if table.kind == "robustness":
        finite = [r for r in table.rows]
        levels = sorted({float(r[c.index("snr_db")]) for r in finite}, reverse=True)
        pos = {lv: i for i, lv in enumerate(levels)}
        for r in finite:
            groups.setdefault(str(r[c.index("loss_kind")]), []).append(
                (pos[float(r[c.index("snr_db")])], r[c.index("test_loss")]))
        return groups, "SNR level (clean to noisiest)", "test loss"
    if table.kind == "drift":
        for r in table.rows:
            key = f"{r[c.index('model_id')]} {r[c.index('drift_kind')]}"
            groups.setdefault(key, []).append((float(r[c.index("drift_level")]), r[c.index("err_g")]))
        return groups, "drift level", "generalization gap"
    for r in table.rows:
        groups.setdefault(table.kind, []).append((float(r[c.index("n_train")]), r[c.index("err_g")]))
    return groups, "training size", "generalization gap"


def svg_plot(table: ReportTable, width=480, height=320) -> str:
    """Line chart with one polyline per series."""
    groups, xlabel, ylabel = _series(table)
    pts = [p for g in groups.values() for p in g]
    xs = [p[0] for p in pts] or [0.0]
    ys = [p[1] for p in pts] or [0.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    m = 50
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height))
    ET.SubElement(svg, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    for k, (name, series) in enumerate(sorted(groups.items())):
        coords = " ".join(
            f"{m + (x - x0) / (x1 - x0) * (width - 2 * m):.2f},"
            f"{height - m - (y - y0) / (y1 - y0) * (height - 2 * m):.2f}" for x, y in series)
        ET.SubElement(svg, "polyline", points=coords, fill="none",
                      stroke=colors[k % len(colors)], **{"data-series": name})
        label = ET.SubElement(svg, "text", x=str(width - m), y=str(m + 14 * k),
                              fill=colors[k % len(colors)], **{"text-anchor": "end"})
        label.text = name
    for text, x, y in ((xlabel, width / 2, height - 10), (ylabel, 10, height / 2)):
        t = ET.SubElement(svg, "text", x=str(x), y=str(y))
        t.text = text
    return ET.tostring(svg, encoding="unicode") + "\n"


# ---------------------------------------------------------------------------
# configuration, models and training cells

@dataclass(frozen=True)
class SuiteConfig:
    loss_kinds: tuple = ("mae", "mse")
    snr_levels: tuple = SNR_LEVELS
    seeds: tuple = (0, 1, 2, 3)
    robust_n_train: int = 1600
    robust_epochs: int = 15
    robust_optimizer: str = "adamw"
    train_sizes: tuple = (200, 400, 800, 1600)
    arch_widths: tuple = ((2, 4, 8, 16), (3, 6, 12, 24), (4, 8, 16, 32))
    arch_n_train: int = 400
    generalization_seeds: tuple = (0,)
    optimizers: tuple = ("sgd", "adagrad", "adamw")
    # every generalization run takes the same number of minibatch steps
    steps: int = 600
    batch_size: int = 32
    learning_rates: tuple = (("sgd", 0.5), ("adagrad", 0.01), ("adamw", 3e-3))
    fault_counts: tuple = (1, 2, 3, 4)
    frequencies: tuple = (15.0, 20.0, 25.0)
    n_test: int = 200
    master_seed: int = 0
    workers: int | None = None

    def learning_rate(self, optimizer):
        return dict(self.learning_rates)[optimizer]

    def provenance(self):
        # the worker count never changes a result, so it stays out of the hash
        settings = dataclasses.asdict(self)
        del settings["workers"]
        return {"config_hash": config_hash(settings), "seed": self.master_seed,
                "version": __version__}


@dataclass
class TrainedModel:
    spec: object
    params: object
    loss_kind: str
    optimizer: str
    seed: int
    n_train: int
    max_train_loss: float
    model_id: str = ""

    def save(self, path):
        save_model(self.spec, self.params, path)


def train_model(train_set, loss_kind, optimizer, seed, n_train, config: SuiteConfig, widths=None,
                epochs=None, model_id=""):
    """Train the reference architecture on the first ``n_train`` samples.

    Without ``epochs`` the run lasts ``config.steps`` minibatch steps (rounded
    up to whole epochs), so small training sets are revisited more often.
    """
    x, y = train_set
    if n_train > len(x):
        raise ValueError(f"training size {n_train} exceeds the {len(x)} available samples")
    x, y = x[:n_train], y[:n_train]
    kw = {} if widths is None else {"widths": tuple(widths)}
    spec = reference_spec(input_shape=x.shape[1:], output_shape=y.shape[1:], **kw)
    if epochs is None:
        batches = math.ceil(n_train / config.batch_size)
        epochs = math.ceil(config.steps / batches)
    params, rec = fit(spec, init_params(spec, seed), (x, y), loss_kind, optimizer, epochs=epochs,
                      batch_size=config.batch_size, seed=seed,
                      learning_rate=config.learning_rate(optimizer))
    if rec.diverged:
        log.warning("run %s diverged", model_id)
    return TrainedModel(spec, params, loss_kind, optimizer, seed, n_train, rec.max_train_loss,
                        model_id)


def load_trained(path, loss_kind, n_train, train_set, model_id=""):
    spec, params = load_model(path)
    x, y = train_set
    m = float(np.max(per_sample_loss(predict(params, spec, x[:n_train]), y[:n_train], loss_kind)))
    return TrainedModel(spec, params, loss_kind, "", 0, n_train, m, model_id or Path(path).stem)


@dataclass
class Gap:
    err_g: float
    train_losses: np.ndarray
    test_losses: np.ndarray


def gap_from_losses(train_losses, test_losses) -> float:
    return float(abs(np.mean(train_losses) - np.mean(test_losses)))


def generalization_gap(model: TrainedModel, train_set, test_set, loss_kind=None) -> Gap:
    """``|mean train loss - mean test loss|`` on the model's own training samples."""
    kind = loss_kind or model.loss_kind
    x, y = train_set
    tr = per_sample_loss(predict(model.params, model.spec, x[:model.n_train]), y[:model.n_train], kind)
    te = per_sample_loss(predict(model.params, model.spec, test_set[0]), test_set[1], kind)
    return Gap(gap_from_losses(tr, te), tr, te)


class _TrainCell:
    def __init__(self, train_set, test_set, config):
        self.train_set, self.test_set, self.config = train_set, test_set, config

    def __call__(self, job):
        loss_kind, optimizer, seed, n_train, widths, epochs, model_id = job
        model = train_model(self.train_set, loss_kind, optimizer, seed, n_train, self.config,
                            widths, epochs, model_id)
        gap = None if self.test_set is None else generalization_gap(model, self.train_set,
                                                                    self.test_set)
        return model, gap


# ---------------------------------------------------------------------------
# robustness

def train_robustness_models(train_set, config: SuiteConfig):
    """One model per (loss kind, seed) on ``robust_n_train`` samples; keyed by loss kind."""
    jobs = [(kind, config.robust_optimizer, seed, config.robust_n_train, None,
             config.robust_epochs, f"{kind}-s{seed}")
            for kind in config.loss_kinds for seed in config.seeds]
    out = parallel_map(_TrainCell(train_set, None, config), jobs, config.workers)
    models = {}
    for model, _ in out:
        models.setdefault(model.loss_kind, []).append(model)
    return models


def run_robustness_suite(models: dict, test_set, config: SuiteConfig) -> ReportTable:
    """Test loss, relative loss gain and SSIM per loss kind and SNR level.

    ``models`` maps a loss kind to a list of trained models (one per seed).
    Rows average over those models; ``detail`` keeps every per-model value.
    The clean row leaves ``pct_gain`` empty. The bound columns use the largest
    realised noise norm at that level as the l2 budget.
    """
    x, y = (np.asarray(a, dtype=np.float64) for a in test_set)
    if not models:
        raise ValueError("no models given")
    levels = list(config.snr_levels)
    noisy = {lv: noisy_inputs(x, lv, config.master_seed * 1000 + i) for i, lv in enumerate(levels)}
    etas = {lv: float(np.max(np.linalg.norm((noisy[lv] - x).reshape(len(x), -1), axis=1)))
            if len(x) else 0.0 for lv in levels}
    d_in = int(np.prod(x.shape[1:]))
    table = ReportTable("robustness", list(ROBUSTNESS_COLUMNS), provenance=config.provenance())
    for kind in config.loss_kinds:
        per_level = {lv: [] for lv in levels}
        for model in models.get(kind, []):
            norms = weight_norm_products(model.params, model.spec)
            clean_pred = predict(model.params, model.spec, x)
            clean_losses = per_sample_loss(clean_pred, y, kind)
            a = float(np.max(clean_losses))
            clean = float(np.mean(clean_losses))
            for lv in levels:
                pred = clean_pred if math.isinf(lv) else predict(model.params, model.spec, noisy[lv])
                losses = per_sample_loss(pred, y, kind)
                s, _ = ssim_batch(np.clip(pred, 0.0, 1.0), y)
                loss = float(np.mean(losses))
                rb_mae = rb_mae_bound(norms.frob_product, etas[lv])
                stated, _ = rb_mse_bound(rb_mae, etas[lv], d_in, a, norms.spec_product)
                cell = {"loss_kind": kind, "seed": model.seed, "model_id": model.model_id,
                        "snr_db": lv, "test_loss": loss,
                        "pct_gain": None if math.isinf(lv) else (loss - clean) / clean,
                        "ssim_mean": float(np.mean(s)), "ssim": s, "rb_mae": rb_mae,
                        "rb_mse_stated": stated,
                        "emp_gain_max": float(np.max(np.abs(losses - clean_losses)))}
                per_level[lv].append(cell)
                table.detail.append(cell)
        for lv in levels:
            cells = per_level[lv]
            if not cells:
                continue
            all_ssim = np.concatenate([c["ssim"] for c in cells])
            gains = [c["pct_gain"] for c in cells]
            table.rows.append([
                kind, lv, float(np.mean([c["test_loss"] for c in cells])),
                None if gains[0] is None else float(np.mean(gains)),
                float(np.mean(all_ssim)), float(np.std(all_ssim)),
                float(np.mean([c["rb_mae"] for c in cells])),
                float(np.mean([c["rb_mse_stated"] for c in cells])),
                float(np.max([c["emp_gain_max"] for c in cells]))])
    return table


# ---------------------------------------------------------------------------
# generalization

@dataclass
class GeneralizationResult:
    sizes: ReportTable
    archs: ReportTable
    models: list


def _aggregate(kind, groups, config):
    table = ReportTable(kind, list(GENERALIZATION_COLUMNS), provenance=config.provenance())
    for key, runs in groups:
        gaps = [g.err_g for _, g, _ in runs]
        table.rows.append([runs[0][0].n_train,
                           float(np.mean([m.max_train_loss for m, _, _ in runs])) / math.sqrt(runs[0][0].n_train),
                           float(np.mean([f for _, _, f in runs])),
                           float(np.mean(gaps)), float(np.std(gaps))])
        for model, gap, frob in runs:
            table.detail.append({"group": key, "model_id": model.model_id, "optimizer": model.optimizer,
                                 "seed": model.seed, "n_train": model.n_train, "frob_product": frob,
                                 "max_train_loss": model.max_train_loss, "err_g": gap.err_g,
                                 "train_losses": gap.train_losses, "test_losses": gap.test_losses})
    return table


def run_generalization_suite(train_set, test_set, config: SuiteConfig,
                             loss_kind="mae") -> GeneralizationResult:
    """Generalization gap against training size and against architecture width.

    Every cell averages over ``config.optimizers`` and
    ``config.generalization_seeds``; all runs take the same number of steps.
    The size sweep uses the default widths, the width sweep ``arch_n_train``
    samples.
    """
    for n in config.train_sizes:
        if n > len(train_set[0]):
            raise ValueError(f"training size {n} exceeds the {len(train_set[0])} available samples")
    jobs = []
    for n in config.train_sizes:
        for opt in config.optimizers:
            for seed in config.generalization_seeds:
                jobs.append((loss_kind, opt, seed, n, None, None, f"size{n}-{opt}-s{seed}"))
    for widths in config.arch_widths:
        for opt in config.optimizers:
            for seed in config.generalization_seeds:
                tag = "-".join(map(str, widths))
                jobs.append((loss_kind, opt, seed, config.arch_n_train, widths, None,
                             f"arch{tag}-{opt}-s{seed}"))
    out = parallel_map(_TrainCell(train_set, test_set, config), jobs, config.workers)
    runs = [(m, g, weight_norm_products(m.params, m.spec, spectral=False).frob_product)
            for m, g in out]
    n_size = len(config.train_sizes) * len(config.optimizers) * len(config.generalization_seeds)
    per = len(config.optimizers) * len(config.generalization_seeds)
    size_groups = [(f"n={n}", runs[i * per:(i + 1) * per]) for i, n in enumerate(config.train_sizes)]
    arch_groups = [("widths=" + "-".join(map(str, w)), runs[n_size + i * per:n_size + (i + 1) * per])
                   for i, w in enumerate(config.arch_widths)]
    return GeneralizationResult(_aggregate("generalization", size_groups, config),
                                _aggregate("architecture", arch_groups, config),
                                [m for m, _ in out])


# ---------------------------------------------------------------------------
# distribution drift

def drift_set_configs(map_config: MapConfig, acq: AcquisitionConfig, config: SuiteConfig):
    """``{(drift_kind, level): (map_config, acquisition)}`` for every drifted test set.

    Fault drift keeps the acquisition fixed; frequency drift keeps one fault.
    """
    out = {}
    for k in config.fault_counts:
        out[("faults", float(k))] = (dataclasses.replace(map_config, fault_count=int(k)), acq)
    for f in config.frequencies:
        out[("frequency", float(f))] = (map_config, dataclasses.replace(acq, frequency=float(f)))
    return out


def ensure_drift_sets(root, map_config, acq, config: SuiteConfig, test_seed):
    """Load the drifted test sets under ``root``, synthesising any that are missing.

    All sets share ``test_seed``, so sample ``i`` has the same layering in
    every set and the sets differ only in the drifted feature.
    """
    root = Path(root)
    sets = {}
    for (kind, level), (mc, ac) in drift_set_configs(map_config, acq, config).items():
        path = root / f"{kind}_{level:g}"
        if not (path / "manifest").exists():
            log.info("synthesising missing drift set %s", path)
            build_dataset(path, config.n_test, mc, ac, test_seed, workers=config.workers)
        sets[(kind, level)] = load_dataset(path)
    return sets


def run_drift_suite(models, train_set, drift_sets: dict, config: SuiteConfig) -> ReportTable:
    """Generalization gap of every model on every drifted test set.

    Rows are labelled with ``param_combo = (M / N) * prod ||W||_F``.
    """
    table = ReportTable("drift", list(DRIFT_COLUMNS), provenance=config.provenance())
    for model in models:
        frob = weight_norm_products(model.params, model.spec, spectral=False).frob_product
        combo = model.max_train_loss / model.n_train * frob
        for (kind, level) in sorted(drift_sets):
            ds = drift_sets[(kind, level)]
            gap = generalization_gap(model, train_set, (ds.inputs, ds.targets))
            table.rows.append([model.model_id, combo, kind, level, gap.err_g])
            table.detail.append({"model_id": model.model_id, "drift_kind": kind,
                                 "drift_level": level, "err_g": gap.err_g,
                                 "test_loss": float(np.mean(gap.test_losses))})
    return table


def drift_monotone(table: ReportTable, kind):
    """Per model: is the gap strictly increasing with the drift level of ``kind``?"""
    c = table.columns
    out = {}
    for model_id in dict.fromkeys(table.column("model_id")):
        rows = sorted((r[c.index("drift_level")], r[c.index("err_g")]) for r in table.rows
                      if r[c.index("model_id")] == model_id and r[c.index("drift_kind")] == kind)
        gaps = [g for _, g in rows]
        out[model_id] = all(b > a for a, b in zip(gaps, gaps[1:]))
    return out
