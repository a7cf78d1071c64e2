import dataclasses

import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch.autograd import gradcheck

from torsd.backbone import BlockSpec, build_toy_cnn, forward_tapped
from torsd.config import TorsdConfig
from torsd.errors import ConfigValidationError, ShapeError
from torsd.losses import compute_losses
from torsd.relation import (
    AuxClassifierPair,
    FeatureProjection,
    RelationBlock,
    RelationNetwork,
    aux_logits,
    build_model,
    concat_pair,
    forward_relations,
    logit_relation,
    project,
    relate,
)


def test_concat_pair_shapes_and_order():
    a, b = torch.randn(2, 8, 16, 16), torch.randn(2, 8, 16, 16)
    ab = concat_pair(a, b)
    assert ab.shape == (2, 16, 16, 16)
    assert torch.equal(ab[:, :8], a) and torch.equal(ab[:, 8:], b)
    assert not torch.equal(ab, concat_pair(b, a))
    same = concat_pair(a, a)
    assert torch.equal(same[:, :8], same[:, 8:])


def test_concat_pair_shape_mismatch():
    with pytest.raises(ShapeError):
        concat_pair(torch.randn(1, 8, 16, 16), torch.randn(1, 8, 8, 8))


def test_project_width_and_channel_check():
    rn = RelationNetwork(BlockSpec(1, 8, 16, 16), embed_dim=64)
    z = project(rn, torch.randn(3, 16, 16, 16))
    assert z.shape == (3, 64)
    with pytest.raises(ShapeError):
        project(rn, torch.randn(3, 8, 16, 16))


def test_zero_final_projection_gives_zero_embedding():
    fpl = FeatureProjection(16, 16, 16, 64)
    torch.nn.init.zeros_(fpl.proj.weight)
    torch.nn.init.zeros_(fpl.proj.bias)
    assert torch.equal(fpl(torch.randn(2, 16, 16, 16)), torch.zeros(2, 64))


def test_relate_zero_input_zero_bias():
    rib = RelationBlock(64)
    torch.nn.init.zeros_(rib.fc1.bias)
    torch.nn.init.zeros_(rib.fc2.bias)
    assert torch.equal(rib(torch.zeros(5, 64)), torch.zeros(5))
    z = torch.randn(4, 64)
    assert torch.equal(rib(z), rib(z))
    with pytest.raises(ShapeError):
        relate(RelationNetwork(BlockSpec(1, 8, 4, 4), 64), torch.randn(2, 32))


def test_aux_head_affine():
    pair = AuxClassifierPair(64, 10)
    head = pair.pos
    assert sum(p.numel() for p in head.parameters()) == 64 * 10 + 10
    assert torch.equal(aux_logits(head, torch.zeros(1, 64))[0], head.bias)
    z = torch.randn(3, 64, dtype=torch.float64)
    head = head.double()
    assert torch.allclose(aux_logits(head, 2 * z) - head.bias, 2 * (aux_logits(head, z) - head.bias))
    with pytest.raises(ShapeError):
        aux_logits(head, torch.randn(1, 32, dtype=torch.float64))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_aux_head_additivity(seed):
    g = torch.Generator().manual_seed(seed)
    head = torch.nn.Linear(16, 5).double()
    z1 = torch.randn(2, 16, generator=g, dtype=torch.float64)
    z2 = torch.randn(2, 16, generator=g, dtype=torch.float64)
    lhs = aux_logits(head, z1) + aux_logits(head, z2) - aux_logits(head, z1 + z2)
    assert torch.allclose(lhs, head.bias.expand_as(lhs), atol=1e-12)


def test_logit_relation_zero_init_and_width_check():
    lrib = RelationBlock(20)
    for p in (lrib.fc2.weight, lrib.fc2.bias):
        torch.nn.init.zeros_(p)
    a, b = torch.randn(3, 10), torch.randn(3, 10)
    assert torch.equal(logit_relation(lrib, a, b), torch.zeros(3))
    with pytest.raises(ShapeError):
        logit_relation(lrib, a, torch.randn(3, 9))


# ---------------------------------------------------------------------------
# finite-difference oracles (torch.autograd.gradcheck)
# ---------------------------------------------------------------------------


def _functional(module, name):
    """Wrap ``module`` as a function of one named parameter."""
    from torch.func import functional_call

    params = dict(module.named_parameters())

    def fn(value, *inputs):
        return functional_call(module, {**params, name: value}, inputs)

    return fn, params[name].detach().clone().requires_grad_(True)


@pytest.mark.parametrize("name", ["convs.0.weight", "convs.2.bias", "proj.weight"])
def test_fpl_gradients_match_finite_differences(name):
    torch.manual_seed(0)
    fpl = FeatureProjection(4, 8, 8, embed_dim=6, hidden=3).double()
    fn, value = _functional(fpl, name)
    pair = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    assert gradcheck(fn, (value, pair), eps=1e-6, atol=1e-8, rtol=1e-4)


@pytest.mark.parametrize("name", ["fc1.weight", "fc2.bias"])
def test_rib_gradients_match_finite_differences(name):
    torch.manual_seed(1)
    rib = RelationBlock(8).double()
    fn, value = _functional(rib, name)
    assert gradcheck(fn, (value, torch.randn(3, 8, dtype=torch.float64)), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_logit_rib_gradients_match_finite_differences():
    torch.manual_seed(2)
    lrib = RelationBlock(6).double()
    a, b = torch.randn(3, 3, dtype=torch.float64), torch.randn(3, 3, dtype=torch.float64)
    fn, value = _functional(lrib, "fc1.weight")
    assert gradcheck(lambda w: fn(w, torch.cat([a, b], -1)), (value,), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_relation_gradient_reaches_anchor_features():
    torch.manual_seed(3)
    rn = RelationNetwork(BlockSpec(1, 2, 4, 4), embed_dim=16).double()
    f_o = torch.randn(4, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    f_p = torch.randn(4, 2, 4, 4, dtype=torch.float64)

    def r_p(x):
        return rn(concat_pair(x, f_p))[1]

    assert gradcheck(r_p, (f_o,), eps=1e-6, atol=1e-8, rtol=1e-4)
    (grad,) = torch.autograd.grad(r_p(f_o).sum(), f_o)
    assert grad.abs().sum() > 0


# ---------------------------------------------------------------------------
# whole bundle
# ---------------------------------------------------------------------------


def _bundle(cfg=TorsdConfig(), seed=0):
    return build_model(build_toy_cnn(4, seed=seed), cfg)


def test_forward_relations_counts_and_finiteness():
    model = _bundle()
    feats = forward_tapped(model.backbone, torch.randn(6, 3, 32, 32))
    rel = forward_relations(feats, model)
    values = [v for depth in zip(rel.r_p, rel.r_n) for r in depth for v in r]
    assert rel.depth == 4 and len(values) == 16
    assert all(torch.isfinite(v) for v in values)
    assert [z.shape for z in rel.z_p] == [(2, 64)] * 4
    assert rel.logit_r_p.shape == (2,)


def test_disabled_rn_empty_bundle_and_zero_losses():
    cfg = TorsdConfig(enable_rn=False, enable_ac=False, enable_ld=False)
    model = _bundle(cfg)
    assert len(model.rn) == 0 and len(model.aux) == 0 and model.logit_rib is None
    feats = forward_tapped(model.backbone, torch.randn(6, 3, 32, 32))
    assert forward_relations(feats, model).is_empty()

    from torsd.data import TripletBatch

    y = torch.tensor([0, 1])
    batch = TripletBatch(torch.randn(6, 3, 32, 32), y, y, torch.tensor([1, 0]))
    breakdown, _ = compute_losses(model, batch, cfg)
    for name in ("triplet", "rd", "pat", "pld", "nat", "nld", "logit_cal"):
        assert float(getattr(breakdown, name)) == 0.0


def test_depth_mismatch_rejected():
    model = _bundle()
    feats = forward_tapped(model.backbone, torch.randn(6, 3, 32, 32))
    feats = dataclasses.replace(feats, f_o=feats.f_o[:3], f_p=feats.f_p[:3], f_n=feats.f_n[:3])
    with pytest.raises(ConfigValidationError):
        forward_relations(feats, model)


def test_depth_parameters_are_independent():
    model = _bundle()
    feats = forward_tapped(model.backbone, torch.randn(6, 3, 32, 32))
    with torch.no_grad():
        before = forward_relations(feats, model)
        for p in model.rn["2"].parameters():
            p.add_(torch.randn_like(p))
        after = forward_relations(feats, model)
    for i in range(4):
        changed = not torch.equal(before.r_p[i], after.r_p[i])
        assert changed == (i == 1)


def test_relations_identical_in_train_and_eval():
    model = _bundle()
    feats = forward_tapped(model.backbone.eval(), torch.randn(6, 3, 32, 32))
    model.train()
    a = forward_relations(feats, model)
    model.eval()
    b = forward_relations(feats, model)
    assert all(torch.equal(x, y) for x, y in zip(a.r_n, b.r_n))


def test_head_names_follow_checkpoint_layout():
    names = set(dict(_bundle().named_parameters()))
    for expected in ("rn.1.fpl.proj.weight", "rn.4.rib.fc2.bias", "aux.3.pos.weight", "aux.1.neg.bias",
                     "logit_rib.fc1.weight", "backbone.fc.weight"):
        assert expected in names
