import json

import numpy as np
import pytest

from pointlm.checkpoint import load_checkpoint
from pointlm.checks import _tiny_model
from pointlm.data import Vocab, make_dataset
from pointlm.hga import HgaPlan
from pointlm.losses import TeacherFeatures
from pointlm.rng import Rng
from pointlm.train import (SSL_LOSSES, TrainConfig, Trainer, TrainingDiverged, batch_indices, build_items,
                           token_accuracy, train_loop)


def _setup(n=6, layers=2, plan=None, seed=0):
    model = _tiny_model(layers, plan=plan, seed=seed)
    items = build_items(make_dataset(n, 3, n_points=64), model, Vocab())
    return model, items


def test_batch_indices_cover_epochs():
    seen = np.concatenate([batch_indices(10, 4, s, 0) for s in range(5)])
    assert sorted(seen[:10].tolist()) == list(range(10)) and sorted(seen[10:20].tolist()) == list(range(10))
    assert np.array_equal(batch_indices(10, 4, 3, 0), batch_indices(10, 4, 3, 0))


@pytest.mark.parametrize("loss", [l for l in SSL_LOSSES if l != "kd"])
def test_every_ssl_loss_runs(loss):
    model, items = _setup(4)
    rec = Trainer(model, items, TrainConfig(steps=1, batch_size=2, ssl_loss=loss, learnable_layers=1)).train_step()
    assert all(np.isfinite(v) for v in rec["losses"].values()) and rec["losses"]["cross_entropy"] > 0
    expect = {"hybrid": {"mask_mse", "chamfer"}, "mask_feat": {"mask_mse"}, "mask_patch": {"chamfer"},
              "recon_feat": {"mask_mse"}, "recon_patch": {"chamfer"}, "contrastive": {"contrastive"}, "none": set()}
    assert set(rec["losses"]) == {"cross_entropy"} | expect[loss]


def test_kd_with_teacher_file_features():
    model = _tiny_model(2)
    from pointlm.model import ModelConfig, TinyLM
    model = TinyLM(ModelConfig(**{**model.cfg.__dict__, "teacher_dim": 5}), model.embed_cfg, 0)
    samples = make_dataset(2, 4, n_points=64)
    teachers = {s.shape_id: TeacherFeatures(Rng(i).normal((8, 5))) for i, s in enumerate(samples)}
    items = build_items(samples, model, Vocab(), teachers=teachers)
    rec = Trainer(model, items, TrainConfig(steps=1, batch_size=2, ssl_loss="kd", learnable_layers=1)).train_step()
    assert rec["losses"]["kd"] > 0


def test_lr_zero_keeps_loss_constant():
    model, items = _setup(4)
    cfg = TrainConfig(steps=3, batch_size=4, lr=0.0, ssl_loss="none", learnable_layers=1)
    hist = Trainer(model, items, cfg).run()
    totals = [h["total"] for h in hist]
    assert max(totals) - min(totals) < 1e-12


def test_frozen_blocks_bit_identical():
    model, items = _setup(4, layers=3)
    before = {k: v.data.copy() for k, v in model.params.items()}
    tr = Trainer(model, items, TrainConfig(steps=1, batch_size=2, learnable_layers=1))
    tr.train_step()
    for k in [k for k in before if k.startswith(("blocks.1.", "blocks.2.")) and ".pe." not in k]:
        assert np.array_equal(model.params[k].data, before[k]), k
        assert model.params[k].grad is not None
    assert not np.array_equal(model.params["blocks.0.wqkv"].data, before["blocks.0.wqkv"])


def test_resume_is_bit_exact(tmp_path):
    cfg = TrainConfig(steps=4, batch_size=2, learnable_layers=1, seed=5)
    model, items = _setup(4)
    tr = Trainer(model, items, cfg)
    tr.run(stop_at=2)
    tr.save(tmp_path / "mid.pfck")
    want = tr.train_step()
    model2, items2 = _setup(4, seed=1)
    tr2 = Trainer(model2, items2, cfg)
    tr2.resume(tmp_path / "mid.pfck")
    got = tr2.train_step()
    assert json.dumps(got, sort_keys=True) == json.dumps(want, sort_keys=True)


def test_nan_aborts_with_dump(tmp_path):
    model, items = _setup(2)
    model.params["blocks.0.wqkv"].data[:] = np.nan
    tr = Trainer(model, items, TrainConfig(steps=2, batch_size=2, learnable_layers=1), out_dir=tmp_path)
    with pytest.raises(TrainingDiverged):
        tr.run()
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["step"] == 0 and "param_norms" in dump


def test_train_loop_artifacts(tmp_path):
    model, items = _setup(4)
    train_loop("pretrain", model, items, TrainConfig(steps=4, batch_size=2, learnable_layers=1), tmp_path)
    lines = (tmp_path / "pretrain_metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[0])
    assert {"step", "lr", "losses", "total", "hga_tokens"} <= set(rec)
    assert (tmp_path / "epoch0001.pfck").exists() and (tmp_path / "epoch0002.pfck").exists()
    ck = load_checkpoint(tmp_path / "pretrain_last.pfck")
    assert float(ck["train.step"]) == 4.0


def test_tune_stage_uses_hga_and_drops_heads():
    model, items = _setup(4, layers=4, plan=HgaPlan(l=2, H=0, n_blocks=1))
    tr = Trainer(model, items, TrainConfig(stage="tune", steps=2, batch_size=2, eval_every=1))
    assert "learn_token" not in model.params and not any(k.startswith("heads.") for k in model.params)
    hist = tr.run()
    assert set(hist[0]["losses"]) == {"cross_entropy"} and "accuracy" in hist[0]
    assert hist[0]["hga_tokens"][0] == 8 and len(hist[0]["hga_tokens"]) == 5
    assert 0.0 <= token_accuracy(model, items) <= 1.0


def test_config_errors():
    with pytest.raises(ValueError):
        TrainConfig(stage="finetune")
    with pytest.raises(ValueError):
        TrainConfig(ssl_loss="triplet")
