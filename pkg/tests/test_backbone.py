import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from torsd.backbone import (
    build_backbone,
    build_resnet18_like,
    build_toy_cnn,
    count_parameters,
    forward_tapped,
    strip_for_inference,
    toy_cnn_param_count,
)
from torsd.checkpoint import export_stripped, load_model, save_checkpoint
from torsd.config import OptimConfig, RunManifest, TorsdConfig
from torsd.errors import ShapeError
from torsd.relation import build_model


def test_toy_shapes_on_32x32():
    net = build_toy_cnn(10, seed=0)
    taps, logits = net.forward_features(torch.randn(2, 3, 32, 32))
    assert [tuple(t.shape[1:]) for t in taps] == [(8, 16, 16), (16, 8, 8), (32, 4, 4), (64, 2, 2)]
    assert logits.shape == (2, 10)
    assert [s.shape for s in net.block_specs()] == [(8, 16, 16), (16, 8, 8), (32, 4, 4), (64, 2, 2)]


def test_toy_param_count_closed_form():
    # conv weights (no bias) + BN scale/shift per block, then the linear head
    by_hand = (3 * 8 * 9 + 16) + (8 * 16 * 9 + 32) + (16 * 32 * 9 + 64) + (32 * 64 * 9 + 128) + (64 * 10 + 10)
    assert by_hand == 25298
    assert count_parameters(build_toy_cnn(10)) == by_hand == toy_cnn_param_count(10)


@pytest.mark.parametrize("width,classes", [(4, 2), (8, 3), (16, 100)])
def test_toy_param_count_matches_introspection(width, classes):
    assert count_parameters(build_toy_cnn(classes, width=width)) == toy_cnn_param_count(classes, width)


def test_resnet18_params_and_taps():
    net = build_resnet18_like(100, seed=0)
    # CIFAR-style ResNet18 with a 100-way head
    assert count_parameters(net) == 11_220_132
    assert net.k == 4
    assert [s.channels for s in net.block_specs()] == [64, 128, 256, 512]


def test_seeded_init_identical():
    a, b = build_toy_cnn(4, seed=3), build_toy_cnn(4, seed=3)
    c = build_toy_cnn(4, seed=4)
    for (ka, va), (_, vb), (_, vc) in zip(a.state_dict().items(), b.state_dict().items(), c.state_dict().items()):
        assert torch.equal(va, vb), ka
    assert not all(torch.equal(x, y) for x, y in zip(a.parameters(), c.parameters()))


def test_seeded_init_leaves_global_rng_alone():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_toy_cnn(4, seed=11)
    assert torch.equal(torch.rand(3), expected)


def test_role_slicing():
    net = build_toy_cnn(4, seed=0)
    x = torch.randn(6, 3, 32, 32)
    feats = forward_tapped(net, x)
    assert feats.depth == 4
    for i in range(4):
        assert feats.f_o[i].shape[0] == feats.f_p[i].shape[0] == feats.f_n[i].shape[0] == 2
    taps, logits = net.forward_features(x)
    assert torch.equal(feats.f_p[2], taps[2][1::3])
    assert torch.equal(feats.logits_n, logits[2::3])


def test_wrong_input_size():
    net = build_toy_cnn(4)
    with pytest.raises(ShapeError) as info:
        net(torch.randn(3, 3, 28, 28))
    assert info.value.expected is not None and info.value.actual is not None


def test_taps_do_not_change_logits():
    net = build_toy_cnn(5, seed=0).eval()
    x = torch.randn(4, 3, 32, 32)
    assert torch.equal(net(x), net.forward_features(x)[1])


def test_unknown_backbone():
    with pytest.raises(ValueError):
        build_backbone("vgg", 10)


def test_outputs_finite_after_init():
    net = build_resnet18_like(10, seed=1)
    taps, logits = net.forward_features(torch.randn(2, 3, 32, 32))
    assert all(torch.isfinite(t).all() for t in taps) and torch.isfinite(logits).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_stripped_logits_bitwise_equal(seed):
    bundle = build_model(build_toy_cnn(6, seed=seed % 1000), TorsdConfig(seed=seed % 1000))
    bundle.eval()
    stripped = strip_for_inference(bundle).eval()
    x = torch.from_numpy(np.random.default_rng(seed).standard_normal((4, 3, 32, 32)).astype(np.float32))
    assert torch.equal(stripped(x), bundle.backbone(x))


def test_stripped_param_count_matches_fresh_backbone():
    bundle = build_model(build_toy_cnn(10, seed=0), TorsdConfig())
    assert count_parameters(bundle) > count_parameters(bundle.backbone)
    assert count_parameters(strip_for_inference(bundle)) == count_parameters(build_toy_cnn(10))


def _dir_size(path):
    return sum(p.stat().st_size for p in path.rglob("*") if p.is_file())


def test_stripped_export_smaller_and_equal(tmp_path):
    cfg = TorsdConfig(seed=2)
    bundle = build_model(build_toy_cnn(4, seed=2), cfg)
    manifest = RunManifest(cfg=cfg, opt=OptimConfig(), dataset="toy", backbone="toy_cnn_w8", num_classes=4,
                           input_shape=(3, 32, 32), norm_mean=(0.0, 0.0, 0.0), norm_std=(1.0, 1.0, 1.0))
    save_checkpoint(tmp_path / "full", manifest, bundle.state_dict(), {"epoch": 1, "step": 1})
    export_stripped(tmp_path / "full", tmp_path / "lean")
    assert _dir_size(tmp_path / "lean") < _dir_size(tmp_path / "full")

    lean, lean_manifest = load_model(tmp_path / "lean")
    assert lean_manifest.stripped
    full, _ = load_model(tmp_path / "full")
    x = torch.randn(5, 3, 32, 32)
    assert torch.equal(lean.eval()(x), full.backbone.eval()(x))
    assert torch.equal(lean.eval()(x), bundle.backbone.eval()(x))
