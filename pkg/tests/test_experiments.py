import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from fwicert.experiments import (GENERALIZATION_COLUMNS, ROBUSTNESS_COLUMNS, ReportTable,
                                 SuiteConfig, TrainedModel, add_noise_snr, drift_monotone,
                                 gap_from_losses, generalization_gap, read_report,
                                 run_generalization_suite, run_robustness_suite, sign_test_p,
                                 spearman, ssim, ssim_batch, svg_plot, train_model, write_report)
from oracles import ssim_loops


def test_noise_infinite_level_is_identity():
    x = np.random.default_rng(0).standard_normal((3, 4))
    out = add_noise_snr(x, math.inf, 1)
    assert out.tobytes() == x.tobytes() and out is not x


def test_noise_rejects_zero_signal():
    with pytest.raises(ValueError, match="zero power"):
        add_noise_snr(np.zeros(10), 10.0, 0)


def test_noise_realized_snr_and_determinism():
    x = np.random.default_rng(1).choice([-1.0, 1.0], size=100_000)
    y = add_noise_snr(x, 0.0, 7)
    n = y - x
    assert abs(10 * np.log10(np.mean(x * x) / np.mean(n * n))) <= 0.1
    assert add_noise_snr(x, 0.0, 7).tobytes() == y.tobytes()


def test_ssim_identity_and_constant_images():
    x = np.random.default_rng(2).random((16, 16))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-15)
    a, b = np.full((16, 16), 0.5), np.full((16, 16), 0.25)
    expected = (2 * 0.125 + 1e-4) / (0.3125 + 1e-4)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-12)
    assert ssim(a, b) == pytest.approx(0.800064, abs=1e-6)


def test_ssim_matches_loop_oracle_and_is_symmetric():
    rng = np.random.default_rng(3)
    for _ in range(5):
        x, y = rng.random((2, 16, 16))
        assert ssim(x, y, clamp=False) == pytest.approx(ssim_loops(x, y), abs=1e-12)
        assert ssim(x, y, clamp=False) == ssim(y, x, clamp=False)


def test_ssim_clamps_but_keeps_raw():
    x = np.tile([0.0, 1.0], (16, 8))
    clamped, raw = ssim_batch(x, 1.0 - x)
    assert raw[0] < 0 and clamped[0] == 0.0
    with pytest.raises(ValueError):
        ssim(x, x[:8])


def test_sign_test_and_spearman():
    assert sign_test_p(4, 4) == pytest.approx(0.0625)
    assert sign_test_p(3, 3) == pytest.approx(0.125)
    assert spearman([1, 2, 3, 4], [10, 20, 25, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [10, 30, 20, 40]) == pytest.approx(0.8)


def table(kind="robustness"):
    t = ReportTable(kind, list(ROBUSTNESS_COLUMNS), provenance={"seed": 3, "version": "x"})
    t.rows.append(["mae", math.inf, 0.1, None, 0.9, 0.01, 0.0, 0.0, 0.0])
    t.rows.append(["mae", 0.0, 0.2, 1.0, 0.7, 0.02, 3.5, 1.25, 0.125])
    t.rows.append(["mse", math.inf, 0.05, None, 0.8, 0.01, 0.0, 0.0, 0.0])
    t.rows.append(["mse", 0.0, 0.15, 2.0, 0.6, 0.03, 3.5, 1.25, 0.1 + 0.2])
    return t


def test_csv_round_trip_and_header_only(tmp_path):
    t = table()
    write_report(t, tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text().splitlines()
    assert text[0].startswith("# provenance kind=robustness")
    assert text[1] == ",".join(ROBUSTNESS_COLUMNS)
    back = read_report(tmp_path / "r.csv")
    assert back.rows == t.rows and back.columns == t.columns and back.kind == "robustness"
    empty = ReportTable("generalization", list(GENERALIZATION_COLUMNS), provenance={"seed": 0})
    write_report(empty, tmp_path / "e.csv")
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 2
    with pytest.raises(ValueError):
        write_report(t, tmp_path / "x", "png")


def test_svg_has_one_polyline_per_loss_kind(tmp_path):
    write_report(table(), tmp_path / "r.svg", "svg")
    root = ET.parse(tmp_path / "r.svg").getroot()
    lines = [e for e in root.iter() if e.tag.endswith("polyline")]
    assert sorted(e.get("data-series") for e in lines) == ["mae", "mse"]
    assert all(len(e.get("points").split()) == 2 for e in lines)


def test_drift_monotone_reader():
    t = ReportTable("drift", ["model_id", "param_combo", "drift_kind", "drift_level", "err_g"])
    for level, gap in [(1.0, 0.1), (2.0, 0.2), (3.0, 0.3)]:
        t.rows.append(["a", 1.0, "faults", level, gap])
        t.rows.append(["b", 1.0, "faults", level, 0.5 - gap if level == 2.0 else gap])
    assert drift_monotone(t, "faults") == {"a": True, "b": False}


def tiny_data(n=24, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1, 16, 8))
    y = rng.random((n, 8, 8))
    return x, y


def tiny_config(**kw):
    base = dict(seeds=(0, 1), robust_n_train=16, robust_epochs=2, train_sizes=(8, 16),
                arch_widths=((1, 2, 2, 2), (2, 2, 4, 4)), arch_n_train=8,
                optimizers=("sgd", "adamw"), steps=6, batch_size=4, n_test=8, workers=1)
    base.update(kw)
    return SuiteConfig(**base)


def tiny_models(config, data):
    models = {}
    for kind in config.loss_kinds:
        models[kind] = [train_model(data, kind, "adamw", s, 16, config, widths=(1, 2, 2, 2),
                                    epochs=2, model_id=f"{kind}-{s}") for s in config.seeds]
    return models


def test_robustness_cardinality_and_clean_rows():
    data = tiny_data()
    test = tiny_data(8, 1)
    cfg = tiny_config(snr_levels=(math.inf,))
    t = run_robustness_suite(tiny_models(cfg, data), test, cfg)
    assert len(t.rows) == 2
    assert t.column("pct_gain") == [None, None]
    cfg = tiny_config()
    t = run_robustness_suite(tiny_models(cfg, data), test, cfg)
    assert len(t.rows) == 10
    assert t.columns == ROBUSTNESS_COLUMNS
    assert all(g is not None and math.isfinite(g) for g in t.column("pct_gain") if g is not None)
    assert len(t.detail) == 20


def test_generalization_gap_recomputes_bit_exactly():
    data, test = tiny_data(), tiny_data(8, 1)
    cfg = tiny_config()
    res = run_generalization_suite(data, test, cfg)
    assert len(res.sizes.rows) == 2 and len(res.archs.rows) == 2
    for row, n in zip(res.sizes.rows, cfg.train_sizes):
        runs = [d for d in res.sizes.detail if d["group"] == f"n={n}"]
        gaps = [gap_from_losses(d["train_losses"], d["test_losses"]) for d in runs]
        assert float(np.mean(gaps)) == row[3]
        assert row[0] == n
    single = tiny_config(train_sizes=(8,), arch_widths=((1, 2, 2, 2),), optimizers=("sgd",))
    res = run_generalization_suite(data, test, single)
    assert len(res.sizes.rows) == 1 and len(res.archs.rows) == 1
    with pytest.raises(ValueError):
        run_generalization_suite(data, test, tiny_config(train_sizes=(100,)))


def test_generalization_gap_uses_model_training_subset():
    data, test = tiny_data(), tiny_data(8, 1)
    m = train_model(data, "mae", "sgd", 0, 10, tiny_config(), widths=(1, 2, 2, 2), epochs=1)
    gap = generalization_gap(m, data, test)
    assert len(gap.train_losses) == 10 and len(gap.test_losses) == 8
    assert gap.err_g == abs(gap.train_losses.mean() - gap.test_losses.mean())
    assert isinstance(m, TrainedModel)
