"""Two-stage training: self-supervised + caption pre-training, then instruction tuning."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Sample, TextExample, Vocab, caption_example, text_example
from .embedding import EmbedGeometry, prepare_geometry
from .geometry import random_rigid
from .losses import (TERM_ORDER, LossReport, MaskSpec, TeacherFeatures, contrastive_nce, hybrid_semantic_loss, kd_loss,
                     linear_head, masked_modeling_feat, masked_modeling_patch, reconstruction_patch)
from .model import TinyLM, freeze_plan
from .optim import AdamW
from .rng import Rng

SSL_LOSSES = ("hybrid", "mask_feat", "mask_patch", "recon_feat", "recon_patch", "contrastive", "kd", "none")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    steps: int = 200
    batch_size: int = 8
    lr: float = 4e-4
    weight_decay: float = 0.0
    warmup_steps: int = 0
    min_lr_ratio: float = 0.1
    ssl_loss: str = "hybrid"
    hybrid_variant: str = "feat"
    mask_ratio: float = 0.3
    tau: float = 0.07
    learnable_layers: int = 4
    train_lm_io: bool = True
    use_qa: bool = False
    eval_every: int = 0  # tune: check accuracy every n steps
    target_accuracy: float = 0.0  # tune: stop once reached (0 disables)
    seed: int = 0

    def __post_init__(self):
        if self.stage not in ("pretrain", "tune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.ssl_loss not in SSL_LOSSES:
            raise ValueError(f"unknown ssl loss {self.ssl_loss!r}; choose from {SSL_LOSSES}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class Item:
    shape_id: str
    geo: EmbedGeometry
    text: TextExample
    cloud: object = None
    teacher: TeacherFeatures | None = None


def build_items(samples: list[Sample], model: TinyLM, vocab: Vocab, use_qa: bool = False,
                teachers: dict[str, TeacherFeatures] | None = None) -> list[Item]:
    items = []
    for s in samples:
        geo = prepare_geometry(s.cloud, model.embed_cfg)
        teacher = teachers.get(s.shape_id) if teachers else None
        items.append(Item(s.shape_id, geo, caption_example(vocab, s.record), s.cloud, teacher))
        if use_qa:
            for q, a in s.record.qa:
                items.append(Item(s.shape_id, geo, text_example(vocab, q, a), s.cloud, teacher))
    return items


def batch_indices(n_items: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for 0-based ``step``: a stream of per-epoch permutations cut into batches."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        pos = start + len(out)
        epoch, offset = divmod(pos, n_items)
        perm = Rng(seed).split("batches").split(epoch).permutation(n_items)
        take = min(batch_size - len(out), n_items - offset)
        out.extend(perm[offset:offset + take].tolist())
    return np.array(out, dtype=np.int64)


# -- per-sample losses -------------------------------------------------------------

def _ce_report(model: TinyLM, res, text: TextExample) -> LossReport:
    rep = LossReport()
    rep.add("cross_entropy", model.text_loss(res, text.targets, text.loss_mask))
    return rep


def _in_place_masked(model, tokens, centers, text, mask: MaskSpec):
    """Masked tokens replaced in position by the learnable token (coordinates kept)."""
    m = tokens.shape[0]
    keep = np.zeros((m, 1))
    keep[mask.visible_indices] = 1.0
    learn = model.params["learn_token"].reshape(1, -1)
    seq = tokens * T.Tensor(keep) + learn * T.Tensor(1.0 - keep)
    return model.forward(seq, centers, text.ids, use_hga=False)


def sample_report(model: TinyLM, item: Item, cfg: TrainConfig, rng: Rng) -> tuple[LossReport, object]:
    """Loss terms for one pre-training sample (contrastive is handled per batch)."""
    ts = model.embed(item.geo)
    text = item.text
    loss = cfg.ssl_loss
    heads = model.head_params()
    if cfg.stage == "tune":
        res = model.forward(ts.tokens, ts.centers, text.ids)
        return _ce_report(model, res, text), res
    if loss == "hybrid":
        mask = MaskSpec.sample(ts.tokens.shape[0], cfg.mask_ratio, rng.split("mask"))
        holder = {}

        def backbone(segment, n_learn):
            res = model.forward(segment, ts.centers[mask.visible_indices], text.ids, n_learn, use_hga=False)
            holder["res"] = res
            return res.point_out, _ce_report(model, res, text)

        rep = hybrid_semantic_loss(ts.tokens, ts.patches, mask, heads, backbone, cfg.hybrid_variant)
        return rep, holder["res"]
    if loss in ("mask_feat", "mask_patch"):
        mask = MaskSpec.sample(ts.tokens.shape[0], cfg.mask_ratio, rng.split("mask"))
        res = _in_place_masked(model, ts.tokens, ts.centers, text, mask)
        rep = _ce_report(model, res, text)
        out = res.point_out[mask.masked_indices]
        if loss == "mask_feat":
            pred = linear_head(out, heads["feat.w"], heads["feat.b"])
            rep.add("mask_mse", masked_modeling_feat(pred, ts.tokens.detach()[mask.masked_indices]))
        else:
            rep.add("chamfer", reconstruction_patch(out, ts.patches[mask.masked_indices],
                                                    heads["patch.w"], heads["patch.b"]))
        return rep, res
    res = model.forward(ts.tokens, ts.centers, text.ids, use_hga=False)
    rep = _ce_report(model, res, text)
    if loss in ("none", "contrastive"):
        return rep, res
    if loss == "recon_feat":
        pred = linear_head(res.point_out, heads["feat.w"], heads["feat.b"])
        rep.add("mask_mse", masked_modeling_feat(pred, ts.tokens.detach()))
    elif loss == "recon_patch":
        rep.add("chamfer", reconstruction_patch(res.point_out, ts.patches, heads["patch.w"], heads["patch.b"]))
    elif loss == "kd":
        if item.teacher is None:
            raise ValueError(f"kd loss needs teacher features for {item.shape_id}")
        rep.add("kd", kd_loss(res.point_out, item.teacher, heads["kd.w"], heads["kd.b"]))
    return rep, res


def contrastive_term(model: TinyLM, items: list[Item], cfg: TrainConfig, rng: Rng) -> T.Tensor:
    """Two rigidly transformed views per cloud, contrasted across the batch."""
    views = []
    for v in range(2):
        outs = []
        for i, item in enumerate(items):
            pts, _, _ = random_rigid(item.cloud.positions, rng.split(f"view{v}").split(i))
            geo = prepare_geometry(type(item.cloud)(pts, item.cloud.colors), model.embed_cfg)
            ts = model.embed(geo)
            res = model.forward(ts.tokens, ts.centers, [], use_hga=False)
            outs.append(res.point_out.reshape(1, *res.point_out.shape))
        views.append(T.concat(outs, axis=0))
    return contrastive_nce(views[0], views[1], cfg.tau)


# -- evaluation --------------------------------------------------------------------

def token_accuracy(model: TinyLM, items: list[Item], use_hga: bool = True, geos=None) -> float:
    """Teacher-forced argmax accuracy over response tokens."""
    hit = total = 0
    with T.no_grad():
        for j, item in enumerate(items):
            geo = item.geo if geos is None else geos[j]
            ts = model.embed(geo)
            res = model.forward(ts.tokens, ts.centers, item.text.ids, use_hga=use_hga)
            pred = res.logits.data[res.n_point:].argmax(axis=1)
            m = item.text.loss_mask
            hit += int((pred[m] == item.text.targets[m]).sum())
            total += int(m.sum())
    return hit / max(1, total)


# -- loop --------------------------------------------------------------------------

class Trainer:
    def __init__(self, model: TinyLM, items: list[Item], cfg: TrainConfig, out_dir=None,
                 eval_items: list[Item] | None = None):
        self.model = model
        self.items = items
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.eval_items = eval_items if eval_items is not None else items
        if cfg.stage == "tune":
            model.drop_ssl_heads()
        groups = freeze_plan(model, cfg.learnable_layers, cfg.stage, cfg.lr, cfg.lr, cfg.train_lm_io)
        self.opt = AdamW(model.params, groups, cfg.steps, cfg.weight_decay, warmup_steps=cfg.warmup_steps,
                         min_lr_ratio=cfg.min_lr_ratio)
        self.step = 0
        self.history: list[dict] = []
        self.rng = Rng(cfg.seed).split(f"train.{cfg.stage}")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.items) / self.cfg.batch_size))

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.model.state_arrays())
        out.update(self.opt.state_arrays())
        out["train.step"] = np.array(float(self.step))
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.checkpoint_arrays())

    def resume(self, path) -> None:
        arrays = load_checkpoint(path)
        self.model.load_state_arrays({k: v for k, v in arrays.items()
                                      if not k.startswith(("optim.", "train."))})
        self.opt.load_state_arrays(arrays)
        self.step = int(arrays["train.step"])

    def _dump_and_abort(self, record: dict) -> None:
        bad = [n for n, p in self.model.params.items()
               if p.grad is not None and not np.all(np.isfinite(p.grad))]
        diag = {"step": self.step, "losses": record["losses"], "nonfinite_grads": bad,
                "param_norms": {n: float(np.linalg.norm(p.data)) for n, p in self.model.params.items()}}
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "nan_dump.json").write_text(json.dumps(diag, indent=1, sort_keys=True))
        raise TrainingDiverged(f"non-finite loss at step {self.step}: {record['losses']}")

    def train_step(self) -> dict:
        cfg, model = self.cfg, self.model
        idx = batch_indices(len(self.items), cfg.batch_size, self.step, cfg.seed)
        step_rng = self.rng.split(self.step)
        batch = [self.items[i] for i in idx]
        self.opt.zero_grad()
        sums: dict[str, float] = {}
        traces = []
        scale = 1.0 / len(batch)
        for j, item in enumerate(batch):
            rep, res = sample_report(model, item, cfg, step_rng.split(j))
            (rep.total * scale).backward()
            traces.append(res.trace)
            for k, v in rep.values().items():
                sums[k] = sums.get(k, 0.0) + v * scale
        if cfg.stage == "pretrain" and cfg.ssl_loss == "contrastive":
            term = contrastive_term(model, batch, cfg, step_rng.split("contrastive"))
            term.backward()
            sums["contrastive"] = term.item()
        lr = self.opt.state.lr("trainable")
        order = [n for n in TERM_ORDER if n in sums] + sorted(n for n in sums if n not in TERM_ORDER)
        losses = {k: float(sums[k]) for k in order}
        record = {"step": self.step + 1, "stage": cfg.stage, "lr": lr, "losses": losses,
                  "total": float(sum(losses.values())), "indices": idx.tolist(),
                  "hga_tokens": np.mean(np.array(traces, dtype=np.float64), axis=0).tolist()}
        if not all(math.isfinite(v) for v in losses.values()):
            self._dump_and_abort(record)
        self.opt.step()
        self.step += 1
        return record

    def run(self, log_path=None, stop_at: int | None = None) -> list[dict]:
        cfg = self.cfg
        stop = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
        log = open(log_path, "a") if log_path is not None else None
        try:
            while self.step < stop:
                record = self.train_step()
                if cfg.eval_every and self.step % cfg.eval_every == 0:
                    record["accuracy"] = token_accuracy(self.model, self.eval_items, cfg.stage == "tune")
                self.history.append(record)
                if log is not None:
                    log.write(json.dumps(record, sort_keys=True) + "\n")
                    log.flush()
                if self.out_dir is not None and self.step % self.steps_per_epoch == 0:
                    self.save(self.out_dir / f"epoch{self.step // self.steps_per_epoch:04d}.pfck")
                if cfg.target_accuracy and record.get("accuracy", 0.0) >= cfg.target_accuracy:
                    break
        finally:
            if log is not None:
                log.close()
        if self.out_dir is not None:
            self.save(self.out_dir / f"{cfg.stage}_last.pfck")
        return self.history


def train_loop(stage: str, model: TinyLM, items: list[Item], cfg: TrainConfig, out_dir=None,
               eval_items=None) -> Trainer:
    """Run one stage; logs JSON lines and checkpoints under ``out_dir`` when given."""
    if cfg.stage != stage:
        cfg = TrainConfig(**{**asdict(cfg), "stage": stage})
    trainer = Trainer(model, items, cfg, out_dir, eval_items)
    log_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(out_dir) / f"{stage}_metrics.jsonl"
        log_path.write_text("")
    trainer.run(log_path)
    return trainer
