import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from torsd.config import (
    OptimConfig,
    RunManifest,
    TorsdConfig,
    best_setting_config,
    dumps_config,
    load_config,
    loads_config,
    validate_config,
)
from torsd.errors import ConfigSyntaxError, ConfigValidationError


def test_default_config_matches_best_setting():
    cfg = best_setting_config()
    assert cfg.alpha == cfg.beta == cfg.sigma == 0.01
    assert cfg.gamma_p == 0.2
    assert cfg.gamma_n == 0.05
    assert cfg.lambda_mix == 0.8
    assert cfg.margin == 1
    assert cfg.enable_rn and cfg.enable_ac and cfg.enable_ld
    assert not cfg.enable_handcrafted_rd


def test_default_config_is_deterministic():
    assert best_setting_config() == best_setting_config()


def test_optim_defaults():
    opt = OptimConfig()
    assert (opt.peak_lr, opt.momentum, opt.weight_decay, opt.epochs) == (0.1, 0.9, 0.0005, 300)
    assert opt.scheduler == "one_cycle"
    assert opt.batch_size % 3 == 0


def test_defaults_validate_clean():
    assert validate_config(best_setting_config(), OptimConfig()) == []


def test_ac_without_rn_is_one_violation():
    report = validate_config(TorsdConfig(enable_ac=True, enable_rn=False))
    assert [v.key for v in report] == ["enable_ac"]


def test_rn_and_handcrafted_rd_exclusive():
    report = validate_config(TorsdConfig(enable_rn=True, enable_handcrafted_rd=True))
    assert [v.key for v in report] == ["enable_handcrafted_rd"]


@pytest.mark.parametrize("field,value", [
    ("alpha", -0.1), ("beta", -1.0), ("lambda_mix", 1.5), ("lambda_mix", -0.01),
    ("embed_dim", 0), ("kl_temperature", 0.0), ("margin", -1.0),
])
def test_range_violations(field, value):
    report = validate_config(dataclasses.replace(TorsdConfig(), **{field: value}))
    assert [v.key for v in report] == [field]


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    assert load_config(path) == (TorsdConfig(), OptimConfig())


def test_batch_size_not_multiple_of_three(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("batch_size=128\n")
    with pytest.raises(ConfigValidationError, match="multiple of 3") as info:
        load_config(path)
    assert info.value.key == "batch_size"


def test_lambda_out_of_range_names_key():
    with pytest.raises(ConfigValidationError) as info:
        loads_config("lambda_mix=1.5")
    assert info.value.key == "lambda_mix"


def test_comments_and_blank_lines():
    cfg, opt = loads_config("# comment\n\nalpha = 0.5  # trailing\nenable_ld=false\nepochs=7\n")
    assert cfg.alpha == 0.5 and cfg.enable_ld is False and opt.epochs == 7


@pytest.mark.parametrize("text", ["alpha", "alpha=abc", "enable_rn=maybe", "=3", "alpha=1\nalpha=2"])
def test_syntax_errors(text):
    with pytest.raises(ConfigSyntaxError):
        loads_config(text)


def test_unknown_key_rejected():
    with pytest.raises(ConfigValidationError) as info:
        loads_config("temperature=2")
    assert info.value.key == "temperature"


nonneg = st.floats(min_value=0, max_value=10, allow_nan=False)


@st.composite
def valid_configs(draw):
    rn = draw(st.booleans())
    cfg = TorsdConfig(
        alpha=draw(nonneg), beta=draw(nonneg), gamma_p=draw(nonneg), gamma_n=draw(nonneg),
        lambda_mix=draw(st.floats(0, 1)), sigma=draw(nonneg), margin=draw(nonneg),
        embed_dim=draw(st.integers(1, 512)),
        kl_temperature=draw(st.floats(min_value=1e-3, max_value=100)),
        enable_rn=rn, enable_ac=rn and draw(st.booleans()), enable_ld=draw(st.booleans()),
        enable_handcrafted_rd=(not rn) and draw(st.booleans()),
        seed=draw(st.integers(0, 2**31)),
    )
    opt = OptimConfig(
        peak_lr=draw(st.floats(min_value=1e-6, max_value=10)),
        momentum=draw(st.floats(min_value=0, max_value=0.999)),
        weight_decay=draw(nonneg),
        epochs=draw(st.integers(1, 1000)),
        batch_size=3 * draw(st.integers(1, 200)),
        scheduler=draw(st.sampled_from(["one_cycle", "constant"])),
    )
    return cfg, opt


@settings(max_examples=200)
@given(valid_configs())
def test_round_trip(pair):
    cfg, opt = pair
    assert validate_config(cfg, opt) == []
    assert loads_config(dumps_config(cfg, opt)) == (cfg, opt)


@settings(max_examples=100)
@given(valid_configs(), st.integers(1, 600).filter(lambda b: b % 3))
def test_any_bad_batch_size_rejected(pair, batch):
    cfg, opt = pair
    text = dumps_config(cfg, dataclasses.replace(opt, batch_size=batch))
    with pytest.raises(ConfigValidationError, match="multiple of 3"):
        loads_config(text)


def test_manifest_round_trip():
    manifest = RunManifest(cfg=TorsdConfig(alpha=0.3, seed=7), opt=OptimConfig(epochs=3, batch_size=9),
                           dataset="toy", backbone="toy_cnn_w8", num_classes=4, input_shape=(3, 32, 32),
                           norm_mean=(0.1, 0.2, 0.3), norm_std=(1.0, 0.5, 0.25))
    again = RunManifest.from_text(manifest.to_text())
    assert again == manifest
