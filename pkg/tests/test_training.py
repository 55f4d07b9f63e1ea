import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from reldeepsym import datasets, training
from reldeepsym.training import AdamState, TrainConfig


def tiny(arch="relational", **kw):
    base = dict(architecture=arch, epochs=3, batch_size=16, hidden=8, seeds=(0,), eval_every=1,
                learning_rate=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_adam_zero_grads_leave_params():
    p = [torch.tensor([1.0, -2.0], dtype=torch.float64)]
    state = AdamState.zeros_like(p)
    for _ in range(3):
        training.adam_step(p, [torch.zeros(2, dtype=torch.float64)], state, 0.1)
    assert p[0].tolist() == [1.0, -2.0]


def test_adam_matches_hand_trace():
    theta, m, v = 0.5, 0.0, 0.0
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p = [torch.tensor([theta], dtype=torch.float64)]
    state = AdamState.zeros_like(p)
    for t, g in enumerate([0.3, -1.2, 2.0], start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        training.adam_step(p, [torch.tensor([g], dtype=torch.float64)], state, lr)
        assert abs(p[0].item() - theta) < 1e-15


def test_adam_first_step_is_sign_times_lr():
    p = [torch.tensor([0.0, 0.0], dtype=torch.float64)]
    training.adam_step(p, [torch.tensor([5.0, -0.1], dtype=torch.float64)], AdamState.zeros_like(p), 0.1)
    assert np.allclose(p[0].numpy(), [-0.1, 0.1], atol=1e-8)


def test_clip_by_global_norm():
    grads = [torch.tensor([30.0], dtype=torch.float64), torch.tensor([40.0], dtype=torch.float64)]
    clipped, norm = training.clip_by_global_norm(grads, 10.0)
    assert norm == 50.0
    assert [g.item() for g in clipped] == pytest.approx([6.0, 8.0], abs=1e-12)
    same, norm = training.clip_by_global_norm([torch.tensor([3.0]), torch.tensor([4.0])], 10.0)
    assert norm == 5.0 and [g.item() for g in same] == [3.0, 4.0]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(seeds=(1, 1))
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    assert TrainConfig().model_config(4).n_max == 4


@pytest.mark.parametrize("arch", ["relational", "deepsym", "attentive"])
def test_training_is_deterministic(arch, records_2obj):
    train, val = records_2obj[:64], records_2obj[64:96]
    a = training.train_seed(tiny(arch), train, val, 0)
    b = training.train_seed(tiny(arch), train, val, 0)
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    assert a.log == b.log
    c = training.train_seed(tiny(arch), train, val, 1)
    assert c.checkpoint.to_bytes() != a.checkpoint.to_bytes()


def test_best_checkpoint_tracks_validation(records_2obj):
    res = training.train_seed(tiny(epochs=6), records_2obj[:64], records_2obj[64:96], 0)
    vals = [r["val_loss"] for r in res.log]
    assert res.best_val == min(vals)
    assert res.best_epoch == vals.index(min(vals)) + 1
    assert training.evaluate_loss(res.checkpoint, records_2obj[64:96]) == pytest.approx(res.best_val, rel=1e-6)


def test_training_reduces_loss(records_2obj):
    res = training.train_seed(tiny(epochs=15), records_2obj[:128], records_2obj[128:], 0)
    assert res.log[-1]["train_loss"] < 0.5 * res.log[0]["train_loss"]


def test_nan_raises_numeric_error(records_2obj):
    bad = [replace(r, effects=np.full_like(r.effects, np.nan)) for r in records_2obj[:20]]
    with pytest.raises(training.NumericError):
        training.train_seed(tiny(), bad, bad, 0)


def test_train_writes_checkpoints_and_logs(tmp_path):
    datasets.generate("2obj", 40, 0, tmp_path / "2obj")
    results = training.train(tiny(epochs=2, seeds=(0, 1)), tmp_path / "2obj", tmp_path / "out")
    assert sorted(results) == [0, 1]
    for s in (0, 1):
        assert (tmp_path / "out" / f"relational_2obj_{s}.ckpt").exists()
        rows = [json.loads(line) for line in open(tmp_path / "out" / f"relational_2obj_{s}.log")]
        assert [r["epoch"] for r in rows] == [1, 2]
        assert {"train_loss", "val_loss", "grad_norm_mean", "grad_norm_max"} <= set(rows[0])
