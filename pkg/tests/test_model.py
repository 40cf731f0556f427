import numpy as np
import pytest
import torch

from mstn.errors import SequenceTooLong, ShapeMismatch, UnknownTemplate
from mstn.model import Model, ModelConfig
from mstn.numeric import DTYPE, causal_mask, grad
from mstn.trainer import teacher_forcing_loss

V = 11


def make(variant, layers=1, D=16, H=4, L=12, lam=0.1, templates=("a", "b", "c"), seed=0):
    return Model(ModelConfig(variant, layers, H, D, lam, L, V, seed), templates)


def rand_tokens(n, seed=0, batch=None):
    g = torch.Generator().manual_seed(seed)
    shape = (n,) if batch is None else (batch, n)
    return torch.randint(0, V, shape, generator=g)


def randn(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=DTYPE)


def test_structure_embedding_examples():
    m = make("MSTN-U")
    with torch.no_grad():
        m.params["struct_w"].zero_()
        assert (m.structure_embedding("a", 5) == 0).all()
        m.params["struct_w"].normal_()
        m.params["struct_e"][1] = 1.0
        assert torch.equal(m.structure_embedding("b", 5), m.params["struct_w"][:5])
    with pytest.raises(UnknownTemplate):
        m.structure_embedding("zzz", 3)
    with pytest.raises(SequenceTooLong):
        m.structure_embedding("a", 13)


def test_embed_inputs_variants():
    toks = rand_tokens(6)
    u = make("MSTN-U")
    with torch.no_grad():
        u.params["struct_e"].zero_()
    st = u.embed_inputs(toks, "a")
    assert torch.equal(st.h_d[0], u.params["pos_emb"][:6])
    assert torch.equal(st.h_x[0], u.params["tok_emb"][toks])
    mt = make("MT")
    assert torch.equal(mt.embed_inputs(toks, "a"), mt.embed_inputs(toks, None))
    cmt = make("CMT")
    assert cmt.embed_inputs(toks, "a").shape == (1, 7, 16)
    with pytest.raises(UnknownTemplate):
        cmt.embed_inputs(toks, None)
    with pytest.raises(SequenceTooLong):
        mt.embed_inputs(rand_tokens(13), None)


@pytest.mark.parametrize("variant", ["MSTN-C", "MSTN-U"])
def test_single_step_attention_returns_values(variant):
    m = make(variant)
    h_d, h_x = randn(1, 1, 16, seed=1), randn(1, 1, 16, seed=2)
    a_d, a_x = getattr(m, f"separable_attention_{variant[-1]}")(h_d, h_x, 0, causal_mask(1)[None, None])
    p = m.params
    vd, vx = ("block0.W_d", "block0.W_x") if variant == "MSTN-C" else ("block0.W_vd", "block0.W_vx")
    assert torch.allclose(a_d, h_d @ p[vd], atol=1e-15)
    assert torch.allclose(a_x, h_x @ p[vx], atol=1e-15)


def test_shape_mismatch():
    m = make("MSTN-C")
    with pytest.raises(ShapeMismatch):
        m.separable_attention_C(randn(1, 3, 16), randn(1, 4, 16), 0, causal_mask(3)[None, None])


def test_mstn_c_lambda_zero_coefficients_ignore_notes():
    m = make("MSTN-C", lam=0.0)
    mask = causal_mask(6)[None, None]
    h_d = randn(1, 6, 16, seed=3)
    a_d1, _ = m.separable_attention_C(h_d, randn(1, 6, 16, seed=4), 0, mask)
    a_d2, _ = m.separable_attention_C(h_d, randn(1, 6, 16, seed=5), 0, mask)
    assert torch.equal(a_d1, a_d2)


def test_mstn_u_tied_weights_give_equal_attention():
    m = make("MSTN-U", lam=0.0)
    p = m.params
    with torch.no_grad():
        p["block0.W_qx"].copy_(p["block0.W_qd"])
        p["block0.W_kx"].copy_(p["block0.W_kd"])
        p["block0.W_vx"].copy_(p["block0.W_vd"])
    h = randn(1, 6, 16, seed=6)
    a_d, a_x = m.separable_attention_U(h, h, 0, causal_mask(6)[None, None])
    assert torch.equal(a_d, a_x)


def test_mstn_u_structure_path_ignores_notes():
    m = make("MSTN-U")
    mask = causal_mask(6)[None, None]
    h_d = randn(1, 6, 16, seed=7)
    a1, _ = m.separable_attention_U(h_d, randn(1, 6, 16, seed=8), 0, mask)
    a2, _ = m.separable_attention_U(h_d, 100 * randn(1, 6, 16, seed=9), 0, mask)
    assert torch.equal(a1, a2)


@pytest.mark.parametrize("variant", ["MT", "CMT", "MSTN-C", "MSTN-U"])
def test_forward_shapes_and_determinism(variant):
    m1, m2 = make(variant, layers=2), make(variant, layers=2)
    toks = rand_tokens(10, batch=3)
    out1, out2 = m1(toks, ["a", "b", "c"]), m2(toks, ["a", "b", "c"])
    assert out1.shape == (3, 10, V)
    assert torch.equal(out1, out2)
    assert m1.model_forward(toks[1], "b").shape == (10, V)
    assert torch.equal(m1.model_forward(toks[1], "b"), out1[1])


@pytest.mark.parametrize("variant", ["MT", "CMT", "MSTN-C", "MSTN-U"])
def test_causality(variant):
    m = make(variant)
    toks = rand_tokens(10)
    base = m.model_forward(toks, "a")
    other = toks.clone()
    other[6:] = (other[6:] + 1) % V
    assert torch.equal(m.model_forward(other, "a")[:6], base[:6])


def test_padding_hides_keys():
    m = make("MSTN-U")
    toks = rand_tokens(8, batch=2)
    pad = torch.zeros(2, 8, dtype=torch.bool)
    pad[1, 5:] = True
    out = m(toks, ["a", "a"], pad)
    alone = m(toks[1:, :5], "a")
    assert torch.allclose(out[1, :5], alone[0], atol=1e-12)


@pytest.mark.parametrize("variant", ["CMT", "MSTN-C", "MSTN-U"])
def test_inactive_templates_get_zero_gradient(variant):
    m = make(variant)
    toks = rand_tokens(10)
    loss = teacher_forcing_loss(m.model_forward(toks, "b"), toks)
    g = grad(loss, m.params)["struct_e"]
    assert (g[0] == 0).all() and (g[2] == 0).all()
    assert g[1].abs().sum() > 0


def test_unknown_template_in_forward():
    with pytest.raises(UnknownTemplate):
        make("MSTN-C").model_forward(rand_tokens(4), "nope")


def test_metadata_round_trip():
    m = make("MSTN-C", layers=2)
    clone = Model.from_arrays(m.params.state_arrays(), {**m.metadata(), "step": 0})
    toks = rand_tokens(9)
    assert torch.equal(clone.model_forward(toks, "c"), m.model_forward(toks, "c"))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig("XYZ")
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(lam=-1)
    cfg = ModelConfig.full_scale("MSTN-U", 100)
    assert (cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.lam, cfg.max_len) == (7, 8, 256, 0.1, 2402)


@pytest.mark.parametrize("variant", ["MT", "CMT", "MSTN-C", "MSTN-U"])
def test_cached_steps_match_full_forward(variant):
    m = make(variant, layers=2)
    toks = rand_tokens(10, seed=4, batch=2)
    full = m(toks, ["a", "c"])
    cache = m.start_decoding(["a", "c"], 2)
    parts = [m.step(toks[:, :4], cache)] + [m.step(toks[:, i], cache) for i in range(4, 10)]
    assert torch.allclose(torch.cat(parts, dim=1), full, atol=1e-12)
    with pytest.raises(SequenceTooLong):
        m.step(rand_tokens(3, batch=2), cache)
