import math

import numpy as np
import pytest

import dsmr


def test_synth_pair_shapes_and_holes():
    clean, degraded = dsmr.synth_pair(seed=3, width=96, height=64, buildings=1)
    assert clean.shape == (64, 96)
    assert clean.dtype == np.float32
    assert not np.isnan(clean).any()
    holes = np.isnan(degraded).sum()
    assert holes == round(0.03 * clean.size)
    again, _ = dsmr.synth_pair(seed=3, width=96, height=64, buildings=1)
    assert np.array_equal(clean, again)


def test_fill_holes_keeps_valid_cells():
    _, degraded = dsmr.synth_pair(seed=1, width=64, height=64, buildings=1)
    filled = dsmr.fill_holes(degraded)
    valid = ~np.isnan(degraded)
    assert not np.isnan(filled).any()
    assert np.array_equal(filled[valid], degraded[valid])


def test_identity_model_refines_to_input():
    model = dsmr.Model.build(depth=2, channels=[4, 8, 8], seed=1)
    model.zero_head()
    clean, _ = dsmr.synth_pair(seed=2, width=100, height=70, buildings=1)
    out = model.refine(clean, std=2.0, tile=32, overlap=8).heights()
    assert out.shape == clean.shape
    assert np.array_equal(out, clean)


def test_residual_shape_and_dimension_error():
    model = dsmr.Model.build(depth=2, channels=[4, 8, 8])
    x = np.zeros((16, 24), dtype=np.float32)
    assert model.residual(x).shape == (16, 24)
    with pytest.raises(dsmr.DimensionError):
        model.residual(np.zeros((10, 16), dtype=np.float32))
    assert model.param_count > 0


def test_checkpoint_round_trip(tmp_path):
    model = dsmr.Model.build(depth=2, channels=[4, 8, 8], seed=5)
    path = str(tmp_path / "m.ckpt")
    model.save(path, std=1.5)
    back, std = dsmr.load_model(path)
    assert std == 1.5
    assert back.channels == [4, 8, 8]
    x = np.random.default_rng(0).standard_normal((8, 8)).astype(np.float32)
    assert np.array_equal(model.residual(x), back.residual(x))


def test_metrics_hand_example():
    pred = np.array([0.1, 0.6, 0.2, 1.0, 5.0], dtype=np.float32)
    truth = np.array([0, 0, 0, 0, math.nan], dtype=np.float32)
    m = dsmr.metrics(pred, truth)
    assert m["pixels"] == 4
    assert m["acc_at_0_5"] == 0.5
    assert m["mae"] == pytest.approx(0.475, abs=1e-6)
    assert m["medae"] == pytest.approx(0.4, abs=1e-6)


def test_cli_in_process(tmp_path):
    code, out, _ = dsmr.cli(["synth", "--count", "0", "--out", str(tmp_path / "s")])
    assert code == 0
    assert (tmp_path / "s" / "manifest.tsv").exists()
    code, _, _ = dsmr.cli(["synth", "--bogus"])
    assert code == 2
