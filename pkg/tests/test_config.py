import pytest
from hypothesis import given, strategies as st

from singleload.config import (ConfigError, HardwareConfig, ModelConfig, builtin_models, ceil_div,
                               derive_dims, dump_config, get_model, load_hw_config, load_model_config)

HW = HardwareConfig()


def test_vit_b_dims():
    d = derive_dims(get_model("ViT-B"), HW)
    assert (d.num_patches, d.tokens, d.head_dim) == (256, 257, 64)


def test_deit_b_dims_and_row_blocks():
    d = derive_dims(get_model("DeiT-B"), HardwareConfig(p_sys=32))
    assert (d.num_patches, d.tokens, d.head_dim) == (196, 197, 64)
    assert d.row_blocks() == 7


@pytest.mark.parametrize("label,D,h,params", [("DeiT-S", 384, 6, 22_000_000), ("DeiT-T", 192, 3, 6_000_000)])
def test_builtin_lookup(label, D, h, params):
    m = get_model(label)
    assert (m.model_dim, m.num_heads, m.num_layers, m.param_count) == (D, h, 12, params)


def test_vit_b_lookup():
    m = get_model("vit-b")
    assert m.image_size == 256 and m.param_count == 86_000_000


def test_builtin_table():
    ms = builtin_models()
    assert [m.model_dim for m in ms] == [768, 768, 384, 192]
    assert [m.num_heads for m in ms] == [12, 12, 6, 3]
    assert [m.image_size for m in ms] == [256, 224, 224, 224]


@pytest.mark.parametrize("m", builtin_models(), ids=lambda m: m.name)
def test_dims_roundtrip(m):
    d = derive_dims(m, HW)
    assert d.tokens == (m.image_size // m.patch_size) ** 2 + 1
    assert d.head_dim * d.num_heads == d.model_dim
    assert d.hidden_dim == 4 * d.model_dim


@given(t=st.integers(1, 5000), p=st.integers(1, 128))
def test_row_blocks_cover_exactly(t, p):
    rb = ceil_div(t, p)
    assert rb * p >= t and (rb - 1) * p < t


@pytest.mark.parametrize("kw", [dict(model_dim=770), dict(patch_size=15)])
def test_invalid_geometry(kw):
    base = dict(name="bad", image_size=224, patch_size=16, model_dim=768, num_heads=12, num_layers=1)
    base.update(kw)
    with pytest.raises(ConfigError):
        derive_dims(ModelConfig(**base), HW)


def test_unknown_label():
    with pytest.raises(ConfigError):
        get_model("ViT-Huge")


def test_config_files(tmp_path):
    mf = tmp_path / "m.cfg"
    mf.write_text("# override one field\nbase = DeiT-S\nnum_layers = 2\n")
    m = load_model_config(mf)
    assert (m.model_dim, m.num_layers) == (384, 2)
    hf = tmp_path / "h.cfg"
    hf.write_text(dump_config(HardwareConfig(p_sys=16, clock_freq=250e6)))
    assert load_hw_config(hf) == HardwareConfig(p_sys=16, clock_freq=250e6)
    hf.write_text("p_sys = zero\n")
    with pytest.raises(ConfigError):
        load_hw_config(hf)
    hf.write_text("lanes = 3\n")
    with pytest.raises(ConfigError):
        load_hw_config(hf)


def test_peak_macs():
    assert HardwareConfig(p_sys=32).macs_per_cycle == 32 * 64
