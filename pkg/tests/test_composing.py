import numpy as np
import pytest
import torch

import oracles
from helpers import grad_check, named_arrays, randomize, tiny_config
from tscir.composing import (
    ComposingAdapter,
    adapter_forward,
    adapter_parameter_count,
    encode_composed,
    encode_mapping,
)
from tscir.config import ModelConfig
from tscir.inversion import P1, P2, encode_with_pseudo, expand_template
from tscir.model import StateError, Toggles, TSCIRModel, set_ablation


def test_zero_up_projection_identity():
    a = ComposingAdapter(6, 3, 2)
    randomize(a.down, 0)
    Z = torch.randn(5, 6)
    assert torch.equal(adapter_forward(Z, a), Z)


def test_hand_computation_d2_r1():
    a = ComposingAdapter(2, 1, 1).double()
    with torch.no_grad():
        a.down.weight.copy_(torch.tensor([[1.0, -1.0]]))
        a.down.bias.copy_(torch.tensor([0.5]))
        a.up.weight.copy_(torch.tensor([[2.0], [1.0]]))
        a.up.bias.copy_(torch.tensor([0.0, 1.0]))
    Z = torch.tensor([[3.0, 1.0]], dtype=torch.float64)
    h = 2.5  # 3 - 1 + 0.5
    silu = h / (1 + np.exp(-h))
    expected = [3.0 + 2 * silu, 1.0 + silu + 1.0]
    assert np.allclose(adapter_forward(Z, a).detach().numpy()[0], expected, atol=1e-15)


def test_linear_mode_homogeneity():
    a = ComposingAdapter(4, 2, 1, activation="linear").double()
    randomize(a, 1)
    with torch.no_grad():
        a.down.bias.zero_()
        a.up.bias.zero_()
    Z = torch.randn(3, 4, dtype=torch.float64)
    assert torch.allclose(a(2.5 * Z), 2.5 * a(Z), atol=1e-14)


def test_matches_oracle():
    a = ComposingAdapter(5, 3, 1).double()
    randomize(a, 2)
    Z = np.random.default_rng(2).standard_normal((4, 5))
    got = a(torch.from_numpy(Z)).detach().numpy()
    assert np.allclose(got, oracles.adapter_forward(Z, named_arrays(a)), atol=1e-14)


def test_parameter_count_formula():
    for d, r in [(4, 2), (64, 16), (768, 64)]:
        a = ComposingAdapter(d, r, 1)
        assert sum(p.numel() for p in a.parameters()) == adapter_parameter_count(d, r)
    # six adapters at width 768 with bottleneck 64 come to roughly 0.6M; bottleneck 128 to ~1.2M
    assert 1.0e6 < 6 * adapter_parameter_count(768, 128) < 1.3e6


def _stage1_model(cfg=None, seed=0):
    model = TSCIRModel(cfg or ModelConfig())
    randomize(model, seed, std=0.1)
    for adapter in model.adapter.values():
        adapter.zero_up_projection()
    model.stage = "stage1"
    return model


def test_composed_equals_stage1_encoding_at_init():
    model = _stage1_model()
    img = np.random.default_rng(0).random((3, 32, 32, 3)).astype(np.float32)
    mods = ["change color to red", "make it smaller", "move to the top and change shape to cross"]
    set_ablation(model, Toggles(adapters_enabled=True))
    z = encode_composed(model, img, mods)
    set_ablation(model, Toggles(adapters_enabled=False))
    ref = encode_with_pseudo(model, img, P2, mods).s_g
    assert torch.equal(z, ref)
    set_ablation(model, Toggles(adapters_enabled=True))
    assert torch.equal(encode_mapping(model, img), encode_with_pseudo(model, img, P1).s_g)


def test_composed_deterministic():
    model = _stage1_model()
    img = np.random.default_rng(1).random((32, 32, 3)).astype(np.float32)
    assert torch.equal(encode_composed(model, img, "make it larger"),
                       encode_composed(model, img, "make it larger"))


@pytest.mark.parametrize("template,mod", [(P2, "change shape to square"), (P1, None)])
def test_tiny_pipeline_with_adapters_matches_oracle(template, mod):
    cfg = tiny_config(vsi_layers=(1,), adapter_layers=(1, 2))
    model = TSCIRModel(cfg).double()
    randomize(model, 21)
    model.stage = "stage2"
    set_ablation(model, Toggles(adapters_enabled=True))
    img = np.random.default_rng(21).random((16, 16, 3))
    got = encode_composed(model, img, mod) if mod else encode_mapping(model, img)
    seq = expand_template(template, mod, cfg.max_tokens)
    ids = list(seq.padded(cfg.max_tokens).token_ids)
    s_g, _ = oracles.pipeline_forward(img, ids, seq.pseudo_slot, named_arrays(model), cfg,
                                      adapters=True)
    assert np.allclose(got.detach().numpy(), s_g, atol=1e-10)


def test_requires_stage1_weights():
    model = TSCIRModel(ModelConfig())
    with pytest.raises(StateError):
        encode_composed(model, np.zeros((32, 32, 3), np.float32), "make it larger")
    model.stage = "backbone"
    with pytest.raises(StateError):
        encode_mapping(model, np.zeros((32, 32, 3), np.float32))


def test_adapter_gradients_match_finite_differences():
    cfg = tiny_config(embed_dim=8, num_heads=2, adapter_dim=3, adapter_layers=(1, 2))
    model = TSCIRModel(cfg).double()
    randomize(model, 22, std=0.4)
    model.stage = "stage2"
    set_ablation(model, Toggles(adapters_enabled=True))
    img = torch.from_numpy(np.random.default_rng(22).random((16, 16, 3)))
    params = list(model.adapter.parameters())

    def f():
        return encode_composed(model, img, "make it larger").sum()

    assert grad_check(f, params) < 1e-4
