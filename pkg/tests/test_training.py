import json
import math

import numpy as np
import pytest

from vqc import autodiff as ad
from vqc.codebook import max_modulus_error
from vqc.config import feature_scale_for, single_ris_layout
from vqc.geometry import PilotConfig
from vqc.model import ModelConfig
from vqc.training import (Adam, NumericalError, TrainConfig, episode_rng, new_state, sample_batch,
                          train_loop, train_step)


def tiny():
    layout = single_ris_layout(N=4, C=2, M=1)
    pilot = PilotConfig.from_snr_db(25.0)
    model = ModelConfig(T=2, K=1, N=4, M=1, V=8, B=2, hidden=8, dnn_width=8, dnn_depth=1,
                        pos_head_widths=(8, 3), feature_scale=feature_scale_for(pilot, layout),
                        position_bias=layout.service_area.center, position_gain=20.0)
    return layout, pilot, model


def test_adam_first_step_by_hand():
    p = ad.parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -4.0])
    Adam(lr=0.1).update({"p": p})
    # bias-corrected first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p.value, [0.9, -1.9], rtol=0, atol=1e-7)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=3)
    p = ad.parameter(x.copy())
    opt = Adam(lr=0.01)
    m = v = np.zeros(3)
    for t in range(1, 6):
        g = rng.normal(size=3)
        p.grad = g.copy()
        opt.update({"p": p})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.value, x, rtol=1e-13)


def test_episode_streams_independent_of_batching():
    layout, pilot, _ = tiny()
    a = sample_batch(layout, pilot, 2, 10.0, 5, 0, range(0, 8))
    b = sample_batch(layout, pilot, 2, 10.0, 5, 0, range(4, 12), threads=3)
    assert np.array_equal(a.positions[4:], b.positions[:4])
    assert np.array_equal(a.noise[4:], b.noise[:4])
    c = sample_batch(layout, pilot, 2, 10.0, 5, 1, range(0, 8))
    assert not np.array_equal(a.positions, c.positions)
    assert episode_rng(1, 0, 3).integers(1 << 30) == episode_rng(1, 0, 3).integers(1 << 30)


def test_positions_inside_area():
    layout, pilot, _ = tiny()
    b = sample_batch(layout, pilot, 2, 10.0, 0, 0, range(500))
    x0, x1, y0, y1 = layout.service_area.bounds()
    assert np.all((b.positions[:, 0] >= x0) & (b.positions[:, 0] <= x1))
    assert np.all((b.positions[:, 1] >= y0) & (b.positions[:, 1] <= y1))
    assert np.all(b.positions[:, 2] == layout.service_area.z)


def test_train_step_keeps_codebooks_unit_modulus_and_updates_selected_only():
    layout, pilot, model = tiny()
    state = new_state(model, 0)
    cfg = TrainConfig(episodes_total=64, batch_size=16, learning_rate=1e-2)
    opt = Adam(cfg.learning_rate)
    for step in range(4):
        before = state.codebooks["ris"].table.value.copy()
        batch = sample_batch(layout, pilot, model.T, 10.0, 0, 0, range(16 * step, 16 * step + 16))
        metrics = train_step(state, batch, pilot, opt, cfg)
        assert all(math.isfinite(v) for v in metrics.values())
        for cb in state.codebooks.values():
            assert max_modulus_error(cb.table.value.T) < 1e-9
    changed = np.any(before != state.codebooks["ris"].table.value, axis=0)
    assert changed.any()


def test_codebook_free_training_leaves_codebooks_alone():
    layout, pilot, model = tiny()
    state = new_state(model, 0)
    books = {k: cb.table.value.copy() for k, cb in state.codebooks.items()}
    cfg = TrainConfig(episodes_total=64, batch_size=16, codebook_free=True, val_episodes=16, epochs=1)
    train_loop(cfg, layout, model, pilot, state)
    for k, cb in state.codebooks.items():
        assert np.array_equal(cb.table.value, books[k])


def test_non_finite_loss_raises():
    layout, pilot, model = tiny()
    state = new_state(model, 0)
    state.params["pos.b_1"].value = np.array([np.nan, 0.0, 0.0])
    batch = sample_batch(layout, pilot, model.T, 10.0, 0, 0, range(4))
    with pytest.raises(NumericalError):
        train_step(state, batch, pilot, Adam(), TrainConfig())


def test_train_loop_metrics_stream_and_determinism(tmp_path):
    layout, pilot, model = tiny()
    cfg = TrainConfig(episodes_total=96, batch_size=16, epochs=2, val_episodes=32, seed=3)
    s1, h1 = train_loop(cfg, layout, model, pilot, metrics_path=tmp_path / "m.jsonl")
    s2, h2 = train_loop(cfg, layout, model, pilot)
    assert h1 == h2
    lines = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert lines == h1 and len(lines) == cfg.steps
    assert sum("val_rmse" in r for r in lines) == 2
    for k, v in s1.arrays().items():
        assert np.array_equal(v, s2.arrays()[k])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(adam_beta1=1.0)
    assert TrainConfig(episodes_total=1000, batch_size=256).steps == 3
