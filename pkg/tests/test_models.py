import numpy as np
import pytest
import torch

from reldeepsym import datasets, gradcore, models
from reldeepsym.models import GumbelConfig
from reldeepsym.simenv import ActionSpec

from conftest import small_config


def batch_of(records):
    b = datasets.collate(records)
    return b.features, b.action, b.effects, b.mask


@pytest.mark.parametrize("arch", models.ARCHITECTURES)
def test_output_shapes(arch, small_ckpt, records_mixed):
    ckpt = small_ckpt(arch, n_max=4)
    x, a, e, m = batch_of(records_mixed[:16])
    out = models.forward(ckpt, x, a, m, "hard")
    assert out.effects.shape == e.shape
    if arch != "deepsym":
        assert out.symbols.shape == x.shape[:2] + (4,)
    if arch == "relational":
        assert out.relations.shape == (16, 4, x.shape[1], x.shape[1])


def test_default_widths():
    ckpt = models.ModelCheckpoint.init(models.ModelConfig("relational"), 0)
    p = ckpt.params
    assert tuple(p["encoder.0.weight"].shape) == (6, 128)
    assert tuple(p["attention.query.weight"].shape) == (128, 512)
    assert tuple(p["aggregate.0.weight"].shape) == (10, 128)
    assert tuple(p["decoder.0.weight"].shape) == (512, 128)
    att = models.ModelCheckpoint.init(models.ModelConfig("attentive"), 0).params
    assert tuple(att["attention.value.weight"].shape) == (4, 512)
    assert tuple(att["decoder.0.weight"].shape) == (518, 128)


def permuted(x, m, perm):
    return x[:, perm], m[:, perm]


@pytest.mark.parametrize("arch", ["relational", "attentive"])
def test_permutation_equivariance(arch, small_ckpt, records_mixed, rng):
    ckpt = small_ckpt(arch, n_max=4)
    recs = [r for r in records_mixed if r.n == 4][:10]
    x, a, _, m = batch_of(recs)
    perm = rng.permutation(4)
    out = models.forward(ckpt, x, a, m, "hard")
    px, pm = permuted(x, m, perm)
    pout = models.forward(ckpt, px, a, pm, "hard")
    assert torch.equal(pout.effects, out.effects[:, perm])
    if arch == "relational":
        P = torch.eye(4, dtype=out.relations.dtype)[perm]
        assert torch.equal(pout.relations, P @ out.relations @ P.T)


def test_aggregator_identity_zero_and_ones(small_ckpt, rng):
    ckpt = small_ckpt("relational")
    z = gradcore.tensor(rng.integers(0, 2, size=(2, 3, 4)))
    act = gradcore.tensor(np.tile(datasets.action_onehot(ActionSpec(0, 0.0, 1, 7.5)), (2, 1)))
    with torch.no_grad():
        zbar = torch.cat([z, act[:, None].expand(2, 3, 6)], dim=-1)
        m = gradcore.mlp_forward(ckpt.params, zbar, models.layer_specs(ckpt.config)["aggregate"], "aggregate")
        eye = torch.eye(3, dtype=z.dtype).expand(2, 4, 3, 3)
        h = models.aggregate(ckpt, z, eye, act).reshape(2, 3, 4, -1)
        for j in range(4):
            assert torch.equal(h[:, :, j], m)
        zero = models.aggregate(ckpt, z, torch.zeros_like(eye), act)
        assert not zero.any()
        ones = models.aggregate(ckpt, z, torch.ones_like(eye), act).reshape(2, 3, 4, -1)
        assert torch.allclose(ones[:, 0, 0], m.sum(dim=1))


def test_aggregator_linear_in_relations(small_ckpt, rng):
    ckpt = small_ckpt("relational")
    z = gradcore.tensor(rng.integers(0, 2, size=(1, 3, 4)))
    act = gradcore.tensor(rng.integers(0, 2, size=(1, 6)))
    a1, a2 = (gradcore.tensor(rng.normal(size=(1, 4, 3, 3))) for _ in range(2))
    with torch.no_grad():
        lhs = models.aggregate(ckpt, z, 2 * a1 + 3 * a2, act)
        rhs = 2 * models.aggregate(ckpt, z, a1, act) + 3 * models.aggregate(ckpt, z, a2, act)
    assert torch.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_key_scaling_scales_logits(small_ckpt, records_mixed):
    ckpt = small_ckpt("relational")
    x = gradcore.tensor(datasets.collate(records_mixed[:4]).features)
    with torch.no_grad():
        base = models.relation_logits(ckpt, x)
        for name in ("attention.key.weight", "attention.key.bias"):
            ckpt.params[name].mul_(2.5)
        scaled = models.relation_logits(ckpt, x)
    assert torch.allclose(scaled, 2.5 * base, rtol=1e-12, atol=1e-12)


def test_aggregate_rejects_wrong_relation_shape(small_ckpt):
    ckpt = small_ckpt("relational")
    with pytest.raises(gradcore.DimensionError):
        models.aggregate(ckpt, torch.zeros(1, 3, 4, dtype=torch.float64),
                         torch.zeros(1, 4, 2, 2, dtype=torch.float64), torch.zeros(1, 6, dtype=torch.float64))


def test_loss_matches_double_loop(rng):
    pred = rng.normal(size=(5, 4, 6))
    target = rng.normal(size=(5, 4, 6))
    mask = (rng.random((5, 4)) > 0.3).astype(float)
    ref = 0.0
    for b in range(5):
        for i in range(4):
            for d in range(6):
                ref += mask[b, i] * (pred[b, i, d] - target[b, i, d]) ** 2
    assert abs(models.loss(gradcore.tensor(pred), target, mask).item() - ref / 5) < 1e-12


def test_loss_shape_and_empty_errors():
    with pytest.raises(gradcore.DimensionError):
        models.loss(torch.zeros(2, 2, 6), np.zeros((2, 3, 6)))
    with pytest.raises(gradcore.ContractError):
        models.loss(torch.zeros(0, 2, 6), np.zeros((0, 2, 6)))


@pytest.mark.parametrize("arch", models.ARCHITECTURES)
def test_gradients_reach_every_parameter(arch, small_ckpt, records_2obj):
    ckpt = small_ckpt(arch)
    x, a, e, m = batch_of(records_2obj[:32])
    out = models.forward(ckpt, x, a, m, "soft", np.random.default_rng(0))
    ckpt.params.zero_grad()
    grads = gradcore.backward(models.loss(out.effects, e, m), ckpt.params)
    for name, g in zip(ckpt.params.names(), grads):
        if arch == "attentive" and name == "attention.key.bias":
            continue  # a shared key offset cancels inside the softmax
        assert g.abs().sum() > 0, name


@pytest.mark.parametrize("arch", models.ARCHITECTURES)
def test_model_gradcheck(arch, records_2obj):
    ckpt = models.ModelCheckpoint.init(small_config(arch, hidden=4, d_attn=3, agg_width=3, n_max=2),
                                       1, torch.float64)
    rng = np.random.default_rng(0)
    # a generic parameter point with small residuals keeps every gradient well
    # above the finite-difference noise floor
    with torch.no_grad():
        for _, t in ckpt.params.items():
            fan = t.shape[0] if t.dim() == 2 else 4
            t.copy_(torch.as_tensor(rng.normal(0, fan ** -0.5, size=t.shape)))
    x, a, _, m = batch_of(records_2obj[:3])
    x = x / 10
    e = models.forward(ckpt, x, a, m, "hard").effects.numpy() + rng.normal(0, 0.1, size=(3, 2, 6))

    def f(ps):
        c = models.ModelCheckpoint(ckpt.config, ps, 1)
        out = models.forward(c, x, a, m, "soft", np.random.default_rng(7))
        return models.loss(out.effects, e, m)

    assert gradcore.grad_check(f, ckpt.params).max_error < 1e-3


def test_gumbel_hard_threshold():
    cfg = GumbelConfig()
    logits = torch.tensor([-1e-9, 0.0, 1e-9, 3.0], dtype=torch.float64)
    assert models.gumbel_sigmoid(logits, cfg, "hard").tolist() == [0, 0, 1, 1]
    with pytest.raises(gradcore.ContractError):
        models.gumbel_sigmoid(logits.clone().requires_grad_(), cfg, "hard")
    with pytest.raises(gradcore.ContractError):
        models.gumbel_sigmoid(logits, cfg, "soft")


def test_gumbel_soft_saturates_and_is_open_interval():
    rng = np.random.default_rng(0)
    y = models.gumbel_sigmoid(torch.full((100_000,), 50.0, dtype=torch.float64), GumbelConfig(), "soft", rng)
    assert (y > 0.5).double().mean() > 0.9999
    y0 = models.gumbel_sigmoid(torch.zeros(100_000, dtype=torch.float64), GumbelConfig(), "soft", rng)
    assert (y0 > 0).all() and (y0 < 1).all()
    assert abs((y0 > 0.5).double().mean().item() - 0.5) < 0.01


def test_gumbel_config_validation():
    with pytest.raises(ValueError):
        GumbelConfig(tau=0.0)


def test_straight_through_emits_bits():
    y = models.gumbel_sigmoid(torch.zeros(50, dtype=torch.float64), GumbelConfig(straight_through=True),
                              "soft", np.random.default_rng(1))
    assert set(y.tolist()) <= {0.0, 1.0}


def test_deepsym_order_tie_break():
    feats = np.zeros((1, 4, 6))
    feats[0, :, 0] = 1
    feats[0, 0, 2:4] = [10, 0]      # rest, distance 10
    feats[0, 1, 2:4] = [0, 0]       # grasped
    feats[0, 2, 2:4] = [0, 10]      # rest, distance 10, smaller x than object 0
    feats[0, 3, 2:4] = [30, 0]
    feats[0, 3, 5] = 1              # target
    assert models.deepsym_order(feats, np.ones((1, 4))).tolist() == [[1, 3, 2, 0]]


def test_deepsym_capacity(small_ckpt, records_mixed):
    ckpt = small_ckpt("deepsym", n_max=3)
    recs = [r for r in records_mixed if r.n == 4][:2]
    x, a, _, m = batch_of(recs)
    with pytest.raises(models.CapacityError):
        models.forward(ckpt, x, a, m, "hard")


def test_attentive_softmax_rows(small_ckpt, records_mixed):
    ckpt = small_ckpt("attentive", n_max=4)
    x, a, _, m = batch_of(records_mixed[:20])
    w = models.forward(ckpt, x, a, m, "hard").attention
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)))
    assert ((w > 0) & (w < 1)).any()


@pytest.mark.parametrize("arch", models.ARCHITECTURES)
def test_soft_outputs_in_open_interval(arch, small_ckpt, records_2obj):
    ckpt = small_ckpt(arch)
    x, a, _, m = batch_of(records_2obj[:8])
    out = models.forward(ckpt, x, a, m, "soft", np.random.default_rng(3))
    assert ((out.symbols > 0) & (out.symbols < 1)).all()


def test_checkpoint_roundtrip(tmp_path, small_ckpt, records_2obj):
    ckpt = small_ckpt("relational").to(torch.float32)
    ckpt.save(tmp_path / "m.ckpt")
    back = models.ModelCheckpoint.load(tmp_path / "m.ckpt")
    assert back.config == ckpt.config and back.seed == ckpt.seed
    x, a, _, m = batch_of(records_2obj[:5])
    assert torch.equal(models.forward(back, x, a, m).effects, models.forward(ckpt, x, a, m).effects)


def test_checkpoint_missing_path_rejected(small_ckpt):
    ckpt = small_ckpt("attentive")
    blob = gradcore.encode_checkpoint(ckpt.params, ckpt.descriptor())
    params, desc = gradcore.decode_checkpoint(blob)
    del params._params["attention.value.weight"]
    with pytest.raises(gradcore.ContractError):
        models.ModelCheckpoint.from_bytes(gradcore.encode_checkpoint(params, desc))
