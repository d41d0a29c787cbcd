import numpy as np
import pytest

from pointlm import tensor as T
from pointlm.checks import _tiny_inputs, _tiny_model, reference_forward
from pointlm.embedding import EmbedConfig
from pointlm.hga import HgaPlan
from pointlm.model import (ModelConfig, SequenceOverflow, TinyLM, attn_export, cross_entropy, freeze_plan,
                           install_plan)
from pointlm.rng import Rng


@pytest.fixture
def tiny():
    model = _tiny_model(2)
    geo, ids = _tiny_inputs(model, n_text=8)
    return model, model.embed(geo), ids


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(model_dim=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(layers=2, learnable_prefix_layers=3)
    with pytest.raises(ValueError):
        TinyLM(ModelConfig(model_dim=64), EmbedConfig())


def test_zero_layer_is_head_on_embeddings():
    ecfg = EmbedConfig(input_points=64, stage_sizes=(32, 16, 8), group_k=4, stage_dims=(8, 12, 16, 24),
                       model_dim=16, freq_bands=2)
    model = TinyLM(ModelConfig(layers=0, model_dim=16, heads=2, vocab=10, max_seq=32, learnable_prefix_layers=0),
                   ecfg, 0)
    tok = Rng(0).normal((3, 16))
    ids = np.array([1, 2])
    res = model.forward(tok, np.zeros((3, 3)), ids)
    p = {k: v.data for k, v in model.params.items()}
    x = np.concatenate([tok, p["tok_emb"][ids] + p["text_pos"][:2]])
    h = (x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + 1e-5)
    assert np.allclose(res.logits.data, h @ p["head.w"] + p["head.b"], atol=1e-12)


def test_reference_equality(tiny):
    model, ts, ids = tiny
    a = model.forward(ts.tokens, ts.centers, ids).logits.data
    assert np.abs(a - reference_forward(model, ts.tokens.data, ts.centers, ids)).max() <= 1e-12


@pytest.mark.parametrize("layers,plan", [(1, None), (3, None), (4, HgaPlan(l=2, H=0, n_blocks=1)),
                                         (6, HgaPlan(l=2, H=1, O=0, n_blocks=1, pooling_mode="mean"))])
def test_causality(layers, plan):
    model = _tiny_model(layers, plan=plan)
    geo, ids = _tiny_inputs(model, n_text=8)
    ts = model.embed(geo)
    base = model.forward(ts.tokens, ts.centers, ids)
    for t in range(8):
        ids2 = ids.copy()
        ids2[t] = (ids2[t] + 1) % model.cfg.vocab
        pert = model.forward(ts.tokens, ts.centers, ids2)
        cut = base.n_point + t
        assert np.array_equal(base.logits.data[:cut], pert.logits.data[:cut])


def test_point_perturbation_reaches_text(tiny):
    model, ts, ids = tiny
    a = model.forward(ts.tokens, ts.centers, ids)
    tok = ts.tokens.data.copy()
    tok[0] += Rng(3).normal(tok.shape[1])
    b = model.forward(tok, ts.centers, ids)
    assert not np.allclose(a.logits.data[a.n_point:], b.logits.data[b.n_point:])


def test_cross_entropy_examples():
    v = 7
    assert cross_entropy(np.zeros((3, v)), np.array([0, 1, 2]), np.ones(3, bool)).item() == pytest.approx(np.log(v))
    big = np.full((2, v), -50.0)
    big[0, 3] = big[1, 1] = 50.0
    assert cross_entropy(big, np.array([3, 1]), np.ones(2, bool)).item() < 1e-30
    lg = Rng(1).normal((5, v))
    t = np.array([0, 6, 2, 3, 3])
    m = np.array([1, 0, 1, 1, 0], bool)
    sm = np.exp(lg) / np.exp(lg).sum(1, keepdims=True)
    want = -np.mean(np.log(sm[np.arange(5), t][m]))
    assert cross_entropy(lg, t, m).item() == pytest.approx(want, abs=1e-12)
    with pytest.raises(ValueError):
        cross_entropy(lg, t, np.zeros(5, bool))


def test_point_rows_get_no_head_gradient(tiny):
    model, ts, ids = tiny
    res = model.forward(ts.tokens, ts.centers, ids)
    model.text_loss(res, np.roll(ids, -1), np.arange(8) < 7).backward()
    assert not np.any(res.logits.grad[:res.n_point]) and np.any(res.logits.grad[res.n_point:])


def test_sequence_overflow(tiny):
    model, ts, _ = tiny
    with pytest.raises(SequenceOverflow):
        model.forward(ts.tokens, ts.centers, np.zeros(model.cfg.max_seq, dtype=int))


def test_learn_slots_without_coords(tiny):
    model, ts, ids = tiny
    seg = T.concat([ts.tokens[:6], T.Tensor(np.zeros((2, model.cfg.model_dim)))], axis=0)
    res = model.forward(seg, ts.centers[:6], ids, n_learn=2)
    assert res.n_point == 8 and res.point_out.shape == (8, model.cfg.model_dim)
    with pytest.raises(T.ShapeError):
        model.forward(seg, ts.centers, ids, n_learn=2)


def test_freeze_plan_groups():
    model = _tiny_model(4)
    g = freeze_plan(model, 1, "pretrain")
    frozen = g["frozen"][1]
    assert g["frozen"][0] == 0.0 and g["trainable"][0] == 4e-4
    assert "blocks.3.wqkv" in frozen and "blocks.0.wqkv" not in frozen
    assert "blocks.3.pe.w" not in frozen and "embed.lift.w" not in frozen
    assert freeze_plan(model, 4, "pretrain")["frozen"][1] == []
    assert freeze_plan(model, 1, "tune")["frozen"][1] == [] and freeze_plan(model, 1, "tune")["trainable"][0] == 2e-5
    assert "head.w" in freeze_plan(model, 1, "pretrain", train_lm_io=False)["frozen"][1]
    with pytest.raises(ValueError):
        freeze_plan(model, 5, "pretrain")


def test_attn_export(tiny):
    model, ts, ids = tiny
    out = attn_export(model, ts.tokens, ts.centers, ids)
    assert out["profile"].shape == (8,) and np.all(out["profile"] >= 0)
    assert out["row_sums_max_dev"] < 1e-12 and out["coords"].shape == (8, 3)
    one = attn_export(model, ts.tokens[:1], ts.centers[:1], ids)
    assert one["profile"].shape == (1,)
    hmodel = _tiny_model(4, plan=HgaPlan(l=2, H=0, n_blocks=1))
    mid = attn_export(hmodel, ts.tokens, ts.centers, ids, layer=2)
    assert len(mid["coords"]) == mid["n_points"] == len(mid["profile"])


def test_state_round_trip_and_missing(tiny):
    model, ts, ids = tiny
    other = _tiny_model(2, seed=9)
    other.load_state_arrays(model.state_arrays())
    assert np.array_equal(other.forward(ts.tokens, ts.centers, ids).logits.data,
                          model.forward(ts.tokens, ts.centers, ids).logits.data)
    arrays = model.state_arrays()
    del arrays["head.w"]
    with pytest.raises(KeyError):
        other.load_state_arrays(arrays)


def test_hga_rejects_learn_slots():
    model = _tiny_model(4, plan=HgaPlan(l=2, H=0, n_blocks=1))
    geo, ids = _tiny_inputs(model)
    ts = model.embed(geo)
    with pytest.raises(ValueError):
        model.forward(ts.tokens, ts.centers[:7], ids, n_learn=1)


def test_install_plan_seeded_thetas():
    a, b = _tiny_model(4), _tiny_model(4)
    install_plan(a, HgaPlan(l=2, H=0, n_blocks=1))
    install_plan(b, HgaPlan(l=2, H=0, n_blocks=1))
    assert np.array_equal(a.schedule.thetas, b.schedule.thetas)
    assert "const.hga.thetas" in a.state_arrays()
