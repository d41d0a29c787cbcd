"""Small pre-norm causal transformer over ``[point tokens][text tokens]``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .embedding import EmbedConfig, EmbedGeometry, TokenSet, embed_geometry, init_embed_params, trig_encode
from .geometry import GridSchedule, grid_schedule
from .hga import HgaPlan, HgaStack, aggregate, init_gated_attention, propagate
from .layers import causal_mask, init_linear, multihead_attention
from .rng import Rng


class SequenceOverflow(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 8
    model_dim: int = 256
    heads: int = 4
    vocab: int = 512
    max_seq: int = 160
    learnable_prefix_layers: int = 4
    mlp_ratio: int = 4
    teacher_dim: int = 0  # width of the distillation adapter; 0 disables it

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0 <= self.learnable_prefix_layers <= self.layers:
            raise ValueError(f"learnable_prefix_layers must lie in [0, {self.layers}]")

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def paper(cls) -> "ModelConfig":
        return cls(layers=32, model_dim=4096, heads=32, vocab=32000, max_seq=2048, learnable_prefix_layers=4)


BLOCK_KEYS = ("ln1.g", "ln1.b", "wqkv", "bqkv", "wo", "bo", "ln2.g", "ln2.b", "w1", "b1", "w2", "b2")


@dataclass
class ForwardResult:
    logits: T.Tensor
    point_out: T.Tensor  # final hidden states of the point segment (incl. learn slots)
    n_point: int
    trace: list[int] = field(default_factory=list)
    attn: list[np.ndarray] = field(default_factory=list)
    layer_coords: list[np.ndarray] = field(default_factory=list)
    layer_points: list[int] = field(default_factory=list)


class TinyLM:
    def __init__(self, cfg: ModelConfig, embed_cfg: EmbedConfig, seed: int = 0):
        if embed_cfg.model_dim != cfg.model_dim:
            raise ValueError("embedding width must match model width")
        self.cfg = cfg
        self.embed_cfg = embed_cfg
        self.seed = seed
        self.rng = Rng(seed).split("model")
        self.params: dict[str, T.Tensor] = {}
        self.plan = HgaPlan.empty()
        self.schedule: GridSchedule | None = None
        self._init_params()

    # -- parameters -------------------------------------------------------------
    def _init_params(self) -> None:
        cfg, ecfg, rng = self.cfg, self.embed_cfg, self.rng
        d = cfg.model_dim
        p = self.params
        p.update(init_embed_params(ecfg, rng.split("embed")))
        p["tok_emb"] = T.Tensor(rng.split("tok_emb").normal((cfg.vocab, d)) * 0.02, requires_grad=True)
        p["text_pos"] = T.Tensor(rng.split("text_pos").normal((cfg.max_seq, d)) * 0.02, requires_grad=True)
        resid_scale = 1.0 / np.sqrt(2 * max(1, cfg.layers))
        for i in range(cfg.layers):
            r = rng.split(f"block{i}")
            pre = f"blocks.{i}."
            p[pre + "ln1.g"] = T.Tensor(np.ones(d), requires_grad=True)
            p[pre + "ln1.b"] = T.Tensor(np.zeros(d), requires_grad=True)
            p[pre + "wqkv"], p[pre + "bqkv"] = init_linear(r.split("qkv"), d, 3 * d)
            p[pre + "wo"], p[pre + "bo"] = init_linear(r.split("o"), d, d, resid_scale)
            p[pre + "ln2.g"] = T.Tensor(np.ones(d), requires_grad=True)
            p[pre + "ln2.b"] = T.Tensor(np.zeros(d), requires_grad=True)
            p[pre + "w1"], p[pre + "b1"] = init_linear(r.split("fc1"), d, cfg.mlp_ratio * d)
            p[pre + "w2"], p[pre + "b2"] = init_linear(r.split("fc2"), cfg.mlp_ratio * d, d, resid_scale)
            p[pre + "pe.w"], p[pre + "pe.b"] = init_linear(r.split("pe"), ecfg.trig_dim, d, 0.1)
        p["ln_f.g"] = T.Tensor(np.ones(d), requires_grad=True)
        p["ln_f.b"] = T.Tensor(np.zeros(d), requires_grad=True)
        p["head.w"], p["head.b"] = init_linear(rng.split("head"), d, cfg.vocab)
        # self-supervised heads (dropped for instruction tuning)
        p["learn_token"] = T.Tensor(rng.split("learn_token").normal(d) * 0.02, requires_grad=True)
        p["heads.feat.w"], p["heads.feat.b"] = init_linear(rng.split("feat"), d, d)
        p["heads.patch.w"], p["heads.patch.b"] = init_linear(rng.split("patch"), d, 3 * ecfg.group_k, 0.1)
        if cfg.teacher_dim:
            p["heads.kd.w"], p["heads.kd.b"] = init_linear(rng.split("kd"), d, cfg.teacher_dim)

    def head_params(self) -> dict[str, T.Tensor]:
        """Loss-head parameters under the short names the loss functions use."""
        out = {k[len("heads."):]: v for k, v in self.params.items() if k.startswith("heads.")}
        if "learn_token" in self.params:
            out["learn_token"] = self.params["learn_token"]
        return out

    def drop_ssl_heads(self) -> None:
        for k in [k for k in self.params if k.startswith("heads.") or k == "learn_token"]:
            del self.params[k]

    def n_params(self, prefix: str = "") -> int:
        return sum(p.size for k, p in self.params.items() if k.startswith(prefix))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        if self.schedule is not None:
            out["const.hga.thetas"] = self.schedule.thetas
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k in self.params:
                if self.params[k].shape != v.shape:
                    raise T.ShapeError(f"checkpoint entry {k}", self.params[k].shape, v.shape)
                self.params[k].data = np.array(v, dtype=self.params[k].data.dtype)
        if "const.hga.thetas" in arrays and self.schedule is not None:
            s = self.schedule
            self.schedule = grid_schedule(s.alpha, s.s_min, s.s_max, s.l, arrays["const.hga.thetas"])
        missing = [k for k in self.params if k not in arrays]
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")

    # -- forward ----------------------------------------------------------------
    def embed(self, geo: EmbedGeometry) -> TokenSet:
        return embed_geometry(geo, self.embed_cfg, self.params)

    def _block(self, x: T.Tensor, i: int, mask: np.ndarray, record: list | None) -> T.Tensor:
        p = self.params
        pre = f"blocks.{i}."
        h = T.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        x = x + multihead_attention(h, p[pre + "wqkv"], p[pre + "bqkv"], p[pre + "wo"], p[pre + "bo"],
                                    self.cfg.heads, mask, record)
        h = T.layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        return x + (T.gelu(h @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"])

    def forward(self, point_seq, coords, text_ids, n_learn: int = 0, record_attn: bool = False,
                use_hga: bool = True) -> ForwardResult:
        """Run ``[coordinate-bearing point tokens][n_learn slots][text]``.

        ``coords`` (M x 3) belong to the first M rows of ``point_seq``; the
        learnable slots carry no coordinate encoding.
        """
        cfg = self.cfg
        p = self.params
        text_ids = np.asarray(text_ids, dtype=np.int64)
        n_text = len(text_ids)
        if point_seq is None:
            point_seq = T.Tensor(np.zeros((0, cfg.model_dim)))
            coords = np.zeros((0, 3))
        point_seq = T.as_tensor(point_seq)
        coords = np.asarray(coords, dtype=np.float64)
        m_cur = point_seq.shape[0] - n_learn
        if coords.shape != (m_cur, 3):
            raise T.ShapeError("forward coords", coords.shape, (m_cur, 3))
        total = point_seq.shape[0] + n_text
        if total > cfg.max_seq or n_text > cfg.max_seq:
            raise SequenceOverflow(f"sequence of {total} tokens exceeds max_seq={cfg.max_seq}")
        plan = self.plan if use_hga else HgaPlan.empty()
        events: dict[int, list[str]] = {}
        for layer, kind in plan.events():
            events.setdefault(layer, []).append(kind)
        if plan.events() and n_learn:
            raise ValueError("geometry aggregation is not combined with learnable slots")

        text = T.gather(p["tok_emb"], text_ids, axis=0) + p["text_pos"][:n_text]
        x = T.concat([point_seq, text], axis=0)
        res = ForwardResult(logits=None, point_out=None, n_point=0, trace=[m_cur])
        stack = HgaStack()
        agg_index = 0
        level = 0
        masks: dict[int, np.ndarray] = {}
        enc = trig_encode(coords, self.embed_cfg.freq_bands)
        for i in range(cfg.layers):
            pre = f"blocks.{i}."
            if m_cur:
                pe = T.Tensor(enc) @ p[pre + "pe.w"] + p[pre + "pe.b"]
                x = T.concat([x[:m_cur] + pe, x[m_cur:]], axis=0)
            n = x.shape[0]
            if n not in masks:
                masks[n] = causal_mask(n)
            record = [] if record_attn else None
            x = self._block(x, i, masks[n], record)
            if record_attn:
                res.attn.append(record[0])
                res.layer_coords.append(coords)
                res.layer_points.append(m_cur)
            for kind in events.get(i + 1, ()):
                if kind == "agg":
                    size = float(self.schedule.sizes[level])
                    prefix = f"hga.{agg_index}."
                    attn_params = p if plan.attention else None
                    pts, coords = aggregate(x[:m_cur], coords, size, plan.pooling_mode, attn_params, stack,
                                            cfg.heads, prefix)
                    level += 1
                    agg_index += 1
                else:
                    pts, coords = propagate(x[:m_cur], stack, plan.residual)
                    level -= 1
                x = T.concat([pts, x[m_cur:]], axis=0)
                m_cur = pts.shape[0]
                enc = trig_encode(coords, self.embed_cfg.freq_bands)
                res.trace.append(m_cur)
        assert stack.depth == 0, "unbalanced aggregation stack"
        h = T.layernorm(x, p["ln_f.g"], p["ln_f.b"])
        res.logits = h @ p["head.w"] + p["head.b"]
        res.n_point = x.shape[0] - n_text
        res.point_out = h[:res.n_point]
        return res

    def text_loss(self, res: ForwardResult, targets, loss_mask) -> T.Tensor:
        return cross_entropy_text(res.logits, res.n_point, targets, loss_mask)


def cross_entropy_text(logits, n_point: int, targets, loss_mask) -> T.Tensor:
    """Cross-entropy on text rows; point rows never carry a target."""
    targets = np.asarray(targets, dtype=np.int64)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    n = logits.shape[0]
    full_t = np.zeros(n, dtype=np.int64)
    full_m = np.zeros(n, dtype=bool)
    full_t[n_point:] = targets
    full_m[n_point:] = loss_mask
    return T.cross_entropy(logits, full_t, full_m)


def cross_entropy(logits, targets, mask) -> T.Tensor:
    return T.cross_entropy(logits, targets, mask)


def install_plan(model: TinyLM, plan: HgaPlan, schedule: GridSchedule | None = None) -> TinyLM:
    """Attach an aggregation plan (and its gated attention parameters) to ``model``."""
    plan.validate(model.cfg.layers)
    for k in [k for k in model.params if k.startswith("hga.")]:
        del model.params[k]
    if schedule is None:
        thetas = Rng(model.seed).split("hga.thetas").normal(plan.l)
        schedule = grid_schedule(l=plan.l, thetas=thetas)
    if plan.n_aggregations() and schedule.l < max(len(a) for a, _ in plan.placements()):
        raise ValueError("grid schedule shorter than the aggregation chain")
    for j in range(plan.n_aggregations()):
        model.params.update(init_gated_attention(model.rng.split(f"hga{j}"), model.cfg.model_dim, f"hga.{j}."))
    model.plan = plan
    model.schedule = schedule
    return model


# -- parameter groups --------------------------------------------------------------

def freeze_plan(model: TinyLM, K: int, stage: str, lr_pretrain: float = 4e-4, lr_tune: float = 2e-5,
                train_lm_io: bool = True) -> dict[str, tuple[float, list[str]]]:
    """Split parameters into a trainable and a frozen (lr 0) group.

    Pre-training trains the tokenizer, the first K blocks, per-layer point
    encodings, loss heads and gates; later blocks stay frozen.  Tuning trains
    everything.
    """
    if not 0 <= K <= model.cfg.layers:
        raise ValueError(f"K={K} out of range [0, {model.cfg.layers}]")
    if stage == "tune":
        return {"trainable": (lr_tune, list(model.params)), "frozen": (0.0, [])}
    if stage != "pretrain":
        raise ValueError(f"unknown stage {stage!r}")
    io = {"tok_emb", "text_pos", "ln_f.g", "ln_f.b", "head.w", "head.b"}
    trainable, frozen = [], []
    for name in model.params:
        if name.startswith("blocks."):
            idx = int(name.split(".")[1])
            ok = idx < K or ".pe." in name
        elif name in io:
            ok = train_lm_io
        else:
            ok = True
        (trainable if ok else frozen).append(name)
    return {"trainable": (lr_pretrain, trainable), "frozen": (0.0, frozen)}


def attn_export(model: TinyLM, point_tokens, coords, text_ids, layer: int = -1, text_rows=None) -> dict:
    """Average attention from text queries onto the point tokens at one layer."""
    with T.no_grad():
        res = model.forward(point_tokens, coords, text_ids, record_attn=True)
    layer = layer % model.cfg.layers
    probs = res.attn[layer]  # H x T x T
    m = res.layer_points[layer]
    n_text = len(text_ids)
    rows = np.arange(probs.shape[1] - n_text, probs.shape[1]) if text_rows is None else np.asarray(text_rows)
    row_sums = probs.sum(axis=-1)
    profile = probs[:, rows, :m].mean(axis=(0, 1))
    return {"layer": layer, "profile": profile, "coords": res.layer_coords[layer], "n_points": m,
            "row_sums_max_dev": float(np.abs(row_sums - 1.0).max())}
