"""Invariant registry behind ``pointlm check``.

Each check is small and self-contained, returns ``(passed, detail)`` and is
registered under a stable id.  The ids are listed in the README; a test keeps
the two in sync.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Vocab, canonical, make_dataset, parse_caption, write_dataset
from .embedding import EmbedConfig, embed_param_count, init_embed_params, prepare_geometry, resample
from .geometry import (PointCloud, chamfer_l2, dynamic_grid_sample, fps, grid_schedule, knn_group, pad_cells,
                       random_rigid)
from .gradcheck import grad_check, grad_check_params
from .hga import HgaPlan, HgaStack, aggregate, init_gated_attention, propagate
from .losses import (LossReport, MaskSpec, TeacherFeatures, contrastive_nce, hybrid_semantic_loss, hybrid_terms,
                     kd_loss, masked_modeling_feat, masked_modeling_patch, nce_from_pooled, reconstruction_patch)
from .model import ModelConfig, TinyLM, install_plan
from .optim import AdamW
from .rng import Rng


@dataclass
class Check:
    id: str
    suite: str
    summary: str
    fn: Callable[[], tuple[bool, str]]


REGISTRY: dict[str, Check] = {}
SUITES = ("tensor", "geometry", "embedding", "losses", "hga", "model", "data", "cli")


def register(id: str, suite: str, summary: str):
    def deco(fn):
        if id in REGISTRY:
            raise KeyError(f"duplicate check id {id}")
        REGISTRY[id] = Check(id, suite, summary, fn)
        return fn
    return deco


def run_suite(suite: str = "all") -> list[dict]:
    if suite != "all" and suite not in SUITES:
        raise KeyError(f"unknown suite {suite!r}; choose from all, {', '.join(SUITES)}")
    results = []
    for c in REGISTRY.values():
        if suite != "all" and c.suite != suite:
            continue
        try:
            ok, detail = c.fn()
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        results.append({"id": c.id, "suite": c.suite, "summary": c.summary, "passed": bool(ok), "detail": detail})
    return results


# -- oracles -----------------------------------------------------------------------

def fps_oracle(pos: np.ndarray, m: int) -> list[int]:
    n = len(pos)
    sel = [0]
    for _ in range(1, m):
        best, best_d = -1, -1.0
        for i in range(n):
            if i in sel:
                continue
            d = min(float(((pos[i] - pos[j]) ** 2).sum()) for j in sel)
            if d > best_d:
                best, best_d = i, d
        sel.append(best)
    return sel


def knn_oracle(pos: np.ndarray, c: int, k: int) -> list[int]:
    d = [(float(((pos[i] - pos[c]) ** 2).sum()), i) for i in range(len(pos))]
    return [i for _, i in sorted(d)[:k]]


def chamfer_oracle(a: np.ndarray, b: np.ndarray) -> float:
    ta = sum(min(float(((x - y) ** 2).sum()) for y in b) for x in a) / len(a)
    tb = sum(min(float(((y - x) ** 2).sum()) for x in a) for y in b) / len(b)
    return ta + tb


def _rand(rng: Rng, *shape) -> np.ndarray:
    return rng.normal(shape)


# -- tensor ------------------------------------------------------------------------

def _op_cases(rng: Rng):
    a = _rand(rng.split("a"), 3, 4)
    b = _rand(rng.split("b"), 4, 2)
    c = _rand(rng.split("c"), 3, 4)
    w = _rand(rng.split("w"), 4)
    idx = np.array([2, 0, 2, 1])
    return {
        "matmul": lambda x: (x @ T.Tensor(b)).sum(),
        "add": lambda x: ((x + T.Tensor(w)) * T.Tensor(c)).sum(),
        "mul": lambda x: (x * x * T.Tensor(c)).sum(),
        "softmax": lambda x: (T.softmax(x, axis=1) * T.Tensor(c)).sum(),
        "layernorm": lambda x: (T.layernorm(x, T.Tensor(w), T.Tensor(w * 0.5)) * T.Tensor(c)).sum(),
        "gelu": lambda x: (T.gelu(x) * T.Tensor(c)).sum(),
        "transpose": lambda x: (x.transpose() @ T.Tensor(c)).sum(),
        "gather": lambda x: (T.gather(x, idx, axis=1) * T.Tensor(c)).sum(),
        "scatter_add": lambda x: (T.scatter_add(x, np.array([1, 0, 1]), 2) ** 2).sum(),
        "reduce_mean": lambda x: (x.mean(axis=0) * T.Tensor(w)).sum(),
        "reduce_max": lambda x: (x.max(axis=1) * T.Tensor(c[:, 0])).sum(),
        "concat": lambda x: (T.concat([x, x * 2.0], axis=0) * T.Tensor(np.concatenate([c, c]))).sum(),
        "slice": lambda x: (x[1:, ::2] ** 2).sum(),
        "tanh_exp_log": lambda x: (T.tanh(x) + T.exp(x * 0.1) + T.log(x * x + 1.0)).sum(),
        "cross_entropy": lambda x: T.cross_entropy(x, np.array([0, 3, 1]), np.array([True, False, True])),
    }, a


@register("T1", "tensor", "every differentiable op passes grad_check < 1e-6")
def check_op_grads():
    cases, a = _op_cases(Rng(1))
    worst = {name: grad_check(f, T.Tensor(a)) for name, f in cases.items()}
    bad = {k: v for k, v in worst.items() if not v < 1e-6}
    return not bad, f"max err {max(worst.values()):.2e}" + (f"; failing {bad}" if bad else "")


@register("T2", "tensor", "ops are deterministic (bit-identical reruns)")
def check_op_determinism():
    cases, a = _op_cases(Rng(2))
    for name, f in cases.items():
        x1, x2 = T.Tensor(a, requires_grad=True), T.Tensor(a, requires_grad=True)
        y1, y2 = f(x1), f(x2)
        y1.backward()
        y2.backward()
        if y1.data.tobytes() != y2.data.tobytes() or x1.grad.tobytes() != x2.grad.tobytes():
            return False, f"{name} differs between runs"
    return True, f"{len(cases)} ops"


@register("T3", "tensor", "rng: same seed and call sequence give the same stream")
def check_rng():
    a, b = Rng(123), Rng(123)
    s1 = np.concatenate([a.uniform(5), a.split("x").normal(3), a.uniform(2)])
    s2 = np.concatenate([b.uniform(5), b.split("x").normal(3), b.uniform(2)])
    # split streams do not depend on parent consumption
    c = Rng(123)
    c.uniform(100)
    same_split = np.array_equal(c.split("x").normal(3), Rng(123).split("x").normal(3))
    return bool(np.array_equal(s1, s2) and same_split), "stream and split reproducible"


@register("T4", "tensor", "adamw: frozen group bit-identical, moments match shapes")
def check_adamw():
    rng = Rng(4)
    params = {"a": T.Tensor(_rand(rng.split("a"), 3, 2), requires_grad=True),
              "b": T.Tensor(_rand(rng.split("b"), 4), requires_grad=True)}
    before = params["b"].data.copy()
    opt = AdamW(params, {"train": (1e-2, ["a"]), "frozen": (0.0, ["b"])}, total_steps=5, weight_decay=0.1)
    for _ in range(3):
        opt.zero_grad()
        ((params["a"] ** 2).sum() + (params["b"] ** 2).sum()).backward()
        opt.step()
    ok = params["b"].data.tobytes() == before.tobytes()
    ok &= all(opt.state.m[k].shape == params[k].shape for k in opt.state.m)
    return ok, f"step={opt.state.step}"


@register("T5", "tensor", "PFCK checkpoint round-trips bit-exactly")
def check_checkpoint():
    rng = Rng(5)
    arrays = {"w": _rand(rng, 3, 4, 2), "s": np.array(1.5), "é": np.arange(3.0)}
    with tempfile.TemporaryDirectory() as d:
        save_checkpoint(Path(d) / "c.pfck", arrays)
        back = load_checkpoint(Path(d) / "c.pfck")
    ok = list(back) == list(arrays) and all(back[k].tobytes() == np.asarray(v, "<f8").tobytes()
                                            for k, v in arrays.items())
    return ok, "3 records"


# -- geometry ----------------------------------------------------------------------

@register("G1", "geometry", "fps matches an independent greedy oracle")
def check_fps():
    rng = Rng(11)
    for t in range(10):
        n = 16 + 8 * t
        pos = rng.split(t).uniform((n, 3), -1, 1)
        m = min(n, 8)
        if fps(pos, m).tolist() != fps_oracle(pos, m):
            return False, f"trial {t} differs"
    return True, "10 clouds"


@register("G2", "geometry", "knn_group matches brute-force top-k")
def check_knn():
    rng = Rng(12)
    for t in range(10):
        pos = rng.split(t).uniform((40, 3), -1, 1)
        centers = np.arange(0, 40, 7)
        ps = knn_group(pos, centers, 5)
        for r, c in enumerate(centers):
            if ps.neighbor_indices[r].tolist() != knn_oracle(pos, int(c), 5):
                return False, f"trial {t} center {c}"
    return True, "10 clouds"


@register("G3", "geometry", "chamfer is symmetric, non-negative, zero on equal sets")
def check_chamfer():
    rng = Rng(13)
    for t in range(20):
        a = rng.split(f"a{t}").normal((6, 3))
        b = rng.split(f"b{t}").normal((9, 3))
        ab, ba = chamfer_l2(a, b), chamfer_l2(b, a)
        if ab < 0 or abs(ab - ba) > 1e-12 or chamfer_l2(a, a[::-1]) != 0.0:
            return False, f"trial {t}"
        if abs(ab - chamfer_oracle(a, b)) > 1e-12:
            return False, f"oracle mismatch trial {t}"
    return True, "20 pairs"


@register("G4", "geometry", "grid sizes stay in [s_min, s_max] and are non-decreasing")
def check_schedule():
    th = Rng(14).normal((10_000, 3))
    for row in th:
        s = grid_schedule(thetas=row).sizes
        if s.min() < 0.02 or s.max() > 1.0 or np.any(np.diff(s) < 0):
            return False, f"thetas {row}"
    return True, "10^4 draws"


@register("G5", "geometry", "dynamic grid sampling partitions the points, order-free")
def check_partition():
    rng = Rng(15)
    pos = rng.uniform((200, 3), -1, 1)
    mp = dynamic_grid_sample(pos, 0.3)
    allm = np.sort(np.concatenate(mp.cells))
    ok = np.array_equal(allm, np.arange(200)) and mp.k_max == max(len(c) for c in mp.cells)
    perm = rng.permutation(200)
    mp2 = dynamic_grid_sample(pos[perm], 0.3)
    same = {tuple(sorted(c.tolist())) for c in mp.cells} == {tuple(sorted(perm[c].tolist())) for c in mp2.cells}
    return bool(ok and same), f"{mp.n_cells} cells"


@register("G6", "geometry", "random rigid motions preserve pairwise distances")
def check_rigid():
    pos = Rng(16).normal((30, 3))
    d0 = np.linalg.norm(pos[:, None] - pos[None], axis=2)
    worst = 0.0
    for t in range(20):
        out, _, _ = random_rigid(pos, Rng(16).split(t))
        worst = max(worst, float(np.abs(np.linalg.norm(out[:, None] - out[None], axis=2) - d0).max()))
    return worst < 1e-9, f"max change {worst:.1e}"


@register("G7", "geometry", "cell padding repeats the member mean")
def check_padding():
    pos = np.array([[0.01, 0, 0], [0.015, 0, 0], [0.05, 0, 0], [0.012, 0, 0]])
    feats = np.array([[1.0], [3.0], [7.0], [5.0]])
    block, mask = pad_cells(feats, dynamic_grid_sample(pos, 0.02))
    ok = block[1, :, 0].tolist() == [7.0, 7.0, 7.0] and block[0, :, 0].tolist() == [1.0, 3.0, 5.0]
    return ok and mask.sum() == 4, "2 cells"


# -- embedding ---------------------------------------------------------------------

def _small_embed_cfg() -> EmbedConfig:
    return EmbedConfig(input_points=64, stage_sizes=(32, 16, 8), group_k=4, stage_dims=(8, 12, 16, 24),
                       model_dim=32, freq_bands=2)


@register("E1", "embedding", "embed is deterministic given cloud and params")
def check_embed_det():
    cfg = _small_embed_cfg()
    cloud = PointCloud(Rng(21).normal((100, 3)))
    params = init_embed_params(cfg, Rng(21))
    from .embedding import embed
    a, b = embed(cloud, cfg, params), embed(cloud, cfg, params)
    return a.tokens.data.tobytes() == b.tokens.data.tobytes(), f"{a.tokens.shape}"


@register("E2", "embedding", "token count is independent of input resolution")
def check_resolution():
    cfg = _small_embed_cfg()
    counts = set()
    for n in (20, 64, 300, 1000):
        geo = prepare_geometry(PointCloud(Rng(22).split(n).normal((n, 3))), cfg)
        counts.add(len(geo.centers))
    return counts == {cfg.stage_sizes[-1]}, f"counts {sorted(counts)}"


@register("E3", "embedding", "max pooling is invariant to neighbor order")
def check_maxpool_perm():
    cfg = _small_embed_cfg()
    params = init_embed_params(cfg, Rng(23))
    geo = prepare_geometry(PointCloud(Rng(23).normal((80, 3))), cfg)
    from .embedding import embed_geometry
    a = embed_geometry(geo, cfg, params).tokens.data
    rng = Rng(23).split("perm")
    for st in geo.stages:
        for r in range(len(st.neighbors)):
            p = rng.split(r).permutation(st.neighbors.shape[1])
            st.neighbors[r], st.rel[r], st.enc[r] = st.neighbors[r][p], st.rel[r][p], st.enc[r][p]
    b = embed_geometry(geo, cfg, params).tokens.data
    return bool(np.array_equal(a, b)), "all stages shuffled"


@register("E4", "embedding", "desk embedding is under 5% of the desk model parameters")
def check_embed_ratio():
    from .flops import param_counts
    pc = param_counts(EmbedConfig.desk(), ModelConfig.desk(), HgaPlan.desk())
    ratio = pc["point_embedding"] / pc["total"]
    return ratio < 0.05, f"ratio {ratio:.4f}"


# -- losses ------------------------------------------------------------------------

def _loss_instance(rng: Rng, m: int = 6, d: int = 5, k: int = 3):
    return (rng.split("p").normal((m, d)), rng.split("g").normal((m, d)), rng.split("pp").normal((m, k, 3)),
            rng.split("gp").normal((m, k, 3)))


@register("L1", "losses", "every loss is >= 0 and 0 on exact matches")
def check_loss_zero_nonneg():
    for t in range(50):
        p, g, pp, gp = _loss_instance(Rng(31).split(t))
        vals = [masked_modeling_feat(p, g).item(), masked_modeling_patch(pp, gp).item(),
                contrastive_nce(p[None], g[None] if t % 2 else g[None] * 2, 0.07).item(),
                kd_loss(T.Tensor(p), TeacherFeatures(g[:, :2]), T.Tensor(np.ones((5, 2))), T.Tensor(np.zeros(2))).item()]
        if min(vals) < 0:
            return False, f"negative loss at trial {t}: {vals}"
    p, _, pp, _ = _loss_instance(Rng(31))
    zeros = [masked_modeling_feat(p, p).item(), masked_modeling_patch(pp, pp).item(),
             contrastive_nce(p[None], p[None], 0.07).item()]
    return max(abs(z) for z in zeros) == 0.0, "50 instances"


@register("L2", "losses", "losses pass gradient checks < 1e-4")
def check_loss_grads():
    p, g, pp, gp = _loss_instance(Rng(32))
    errs = [
        grad_check(lambda x: masked_modeling_feat(x, g), T.Tensor(p)),
        grad_check(lambda x: masked_modeling_patch(x, gp), T.Tensor(pp)),
        grad_check(lambda x: contrastive_nce(x.reshape(2, 3, 5), T.Tensor(g.reshape(2, 3, 5)), 0.5), T.Tensor(p)),
    ]
    return max(errs) < 1e-4, f"max err {max(errs):.1e}"


@register("L3", "losses", "hybrid total is the unit-weight sum of its terms")
def check_hybrid_decomp():
    rng = Rng(33)
    m, d, k = 10, 6, 3
    tokens, patches = rng.split("t").normal((m, d)), rng.split("p").normal((m, k, 3))
    heads = {"learn_token": T.Tensor(rng.split("l").normal(d)), "feat.w": T.Tensor(rng.split("fw").normal((d, d))),
             "feat.b": T.Tensor(np.zeros(d)), "patch.w": T.Tensor(rng.split("pw").normal((d, 3 * k))),
             "patch.b": T.Tensor(np.zeros(3 * k))}
    mix = rng.split("mix").normal((d, d))
    mask = MaskSpec.sample(m, 0.3, rng.split("mask"))

    def backbone(seg, n_learn):
        out = T.tanh(seg @ T.Tensor(mix))
        extra = LossReport()
        extra.add("cross_entropy", (out * out).mean())
        return out, extra

    rep = hybrid_semantic_loss(tokens, patches, mask, heads, backbone)
    seg = np.concatenate([tokens[mask.visible_indices], np.repeat(heads["learn_token"].data[None],
                                                                   len(mask.masked_indices), 0)])
    out = np.tanh(seg @ mix)
    nv = len(mask.visible_indices)
    ce = float((out * out).mean())
    pred = out[nv:] @ heads["feat.w"].data
    mse = float(((pred - tokens[mask.masked_indices]) ** 2).sum(axis=1).mean())
    rec = (out[:nv] @ heads["patch.w"].data).reshape(nv, k, 3)
    ch = float(np.mean([chamfer_oracle(rec[i], patches[mask.visible_indices][i]) for i in range(nv)]))
    diff = abs(rep.total.item() - (ce + mse + ch))
    return diff < 1e-12 and MaskSpec.sample(128, 0.3, rng).masked_indices.size == 38, f"diff {diff:.1e}"


@register("L4", "losses", "contrastive loss depends only on pooled normalized vectors")
def check_contrastive_path():
    rng = Rng(34)
    f1, f2 = rng.split("a").normal((3, 4, 5)), rng.split("b").normal((3, 4, 5))
    z1 = f1.mean(axis=1)
    z1 /= np.linalg.norm(z1, axis=1, keepdims=True)
    z2 = f2.mean(axis=1)
    z2 /= np.linalg.norm(z2, axis=1, keepdims=True)
    a = contrastive_nce(f1, f2, 0.1).item()
    b = nce_from_pooled(z1, z2, 0.1).item()
    # tokens with the same pooled vector give the same loss
    shift = rng.split("s").normal((3, 4, 5))
    shift -= shift.mean(axis=1, keepdims=True)
    c = contrastive_nce(f1 + shift, f2, 0.1).item()
    diff = max(abs(a - b), abs(a - c))
    return diff < 1e-9, f"diff {diff:.1e}"


@register("L5", "losses", "mask sampling is uniform without replacement")
def check_mask_uniform():
    rng = Rng(35)
    counts = np.zeros(10)
    n = 20_000
    for i in range(n):
        ms = MaskSpec.sample(10, 0.3, rng.split(i))
        counts[ms.masked_indices] += 1
        if len(set(ms.masked_indices) | set(ms.visible_indices)) != 10:
            return False, "not a partition"
    freq = counts / n
    return bool(np.all(np.abs(freq - 0.3) < 0.01)), f"freq range [{freq.min():.3f}, {freq.max():.3f}]"


# -- hga ---------------------------------------------------------------------------

def _tiny_model(layers=2, dim=32, plan: HgaPlan | None = None, seed=0) -> TinyLM:
    ecfg = EmbedConfig(input_points=64, stage_sizes=(32, 16, 8), group_k=4, stage_dims=(8, 12, 16, 24),
                       model_dim=dim, freq_bands=2)
    mcfg = ModelConfig(layers=layers, model_dim=dim, heads=4, vocab=64, max_seq=64,
                       learnable_prefix_layers=min(layers, 1))
    model = TinyLM(mcfg, ecfg, seed)
    if plan is not None:
        install_plan(model, plan, grid_schedule(0.5, 0.5, 4.0, plan.l, np.zeros(plan.l)))
    return model


def _tiny_inputs(model: TinyLM, seed=0, n_text=6):
    geo = prepare_geometry(PointCloud(Rng(seed).normal((90, 3)) * 0.5), model.embed_cfg)
    ids = Rng(seed).split("ids").integers(model.cfg.vocab, n_text)
    return geo, ids


@register("H1", "hga", "gate at zero makes the aggregation attention a no-op")
def check_gate_noop():
    model = _tiny_model(4, plan=HgaPlan(l=2, H=0, n_blocks=1))
    geo, ids = _tiny_inputs(model)
    ts = model.embed(geo)
    a = model.forward(ts.tokens, ts.centers, ids).logits.data
    model.plan = HgaPlan(**{**model.plan.to_dict(), "attention": False})
    b = model.forward(ts.tokens, ts.centers, ids).logits.data
    diff = float(np.abs(a - b).max())
    return diff <= 1e-12, f"max diff {diff:.1e}"


@register("H2", "hga", "aggregation is permutation-invariant")
def check_agg_perm():
    rng = Rng(41)
    x, c = rng.split("x").normal((40, 8)), rng.split("c").uniform((40, 3), -1, 1)
    params = init_gated_attention(rng.split("p"), 8, "")
    params["gate"].data = np.array(0.7)
    perm = rng.permutation(40)
    s1, s2 = HgaStack(), HgaStack()
    a, ca = aggregate(T.Tensor(x), c, 0.5, "maxmean", params, s1, 2)
    b, cb = aggregate(T.Tensor(x[perm]), c[perm], 0.5, "maxmean", params, s2, 2)
    key = lambda arr: np.round(arr, 9).tolist()
    same = sorted(key(a.data)) == sorted(key(b.data))
    pa, _ = propagate(a, s1)
    pb, _ = propagate(b, s2)
    same &= bool(np.allclose(pa.data[perm], pb.data, atol=1e-12))
    return same, f"{a.shape[0]} cells"


@register("H3", "hga", "stack is empty after a forward; bad plans rejected at install")
def check_stack():
    model = _tiny_model(4, plan=HgaPlan(l=2, H=0, n_blocks=1))
    geo, ids = _tiny_inputs(model)
    ts = model.embed(geo)
    res = model.forward(ts.tokens, ts.centers, ids)
    balanced = res.trace[0] == res.trace[-1]
    try:
        install_plan(_tiny_model(2), HgaPlan(l=3, H=2, n_blocks=1))
        rejected = False
    except ValueError:
        rejected = True
    return balanced and rejected, f"trace {res.trace}"


@register("H4", "hga", "mean aggregate then propagate is an idempotent projector")
def check_projector():
    rng = Rng(44)
    x, c = rng.split("x").normal((50, 4)), rng.split("c").uniform((50, 3), -1, 1)

    def proj(v):
        st = HgaStack()
        a, _ = aggregate(T.Tensor(v), c, 0.4, "mean", None, st)
        return propagate(a, st)[0].data

    once = proj(x)
    twice = proj(once)
    diff = float(np.abs(once - twice).max())
    return diff <= 1e-12, f"max diff {diff:.1e}"


@register("H5", "hga", "an empty plan leaves text cross-entropy unchanged")
def check_noop_plan():
    model = _tiny_model(2)
    geo, ids = _tiny_inputs(model)
    ts = model.embed(geo)
    tgt, msk = np.roll(ids, -1), np.arange(len(ids)) < len(ids) - 1
    a = model.text_loss(model.forward(ts.tokens, ts.centers, ids), tgt, msk).item()
    install_plan(model, HgaPlan.empty())
    b = model.text_loss(model.forward(ts.tokens, ts.centers, ids), tgt, msk).item()
    return a == b, f"ce {a:.6f}"


# -- model -------------------------------------------------------------------------

@register("M1", "model", "causal: perturbing text token t leaves logits before t unchanged")
def check_causal():
    for layers, plan in ((1, None), (2, None), (4, HgaPlan(l=2, H=0, n_blocks=1))):
        model = _tiny_model(layers, plan=plan)
        geo, ids = _tiny_inputs(model, n_text=8)
        ts = model.embed(geo)
        base = model.forward(ts.tokens, ts.centers, ids)
        for t in (0, 3, 7):
            ids2 = ids.copy()
            ids2[t] = (ids2[t] + 1) % model.cfg.vocab
            pert = model.forward(ts.tokens, ts.centers, ids2)
            cut = base.n_point + t
            if not np.array_equal(base.logits.data[:cut], pert.logits.data[:cut]):
                return False, f"layers={layers} t={t}"
            if np.array_equal(base.logits.data[cut], pert.logits.data[cut]):
                return False, f"no effect at t={t}"
    return True, "3 configurations"


def reference_forward(model: TinyLM, tokens: np.ndarray, coords: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Plain numpy transformer on the same weights, no aggregation."""
    from .embedding import trig_encode
    p = {k: v.data for k, v in model.params.items()}
    d, h = model.cfg.model_dim, model.cfg.heads

    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))

    x = np.concatenate([tokens, p["tok_emb"][ids] + p["text_pos"][:len(ids)]])
    n, m = len(x), len(tokens)
    enc = trig_encode(coords, model.embed_cfg.freq_bands)
    for i in range(model.cfg.layers):
        q = f"blocks.{i}."
        x[:m] += enc @ p[q + "pe.w"] + p[q + "pe.b"]
        y = ln(x, p[q + "ln1.g"], p[q + "ln1.b"])
        qkv = (y @ p[q + "wqkv"] + p[q + "bqkv"]).reshape(n, 3, h, d // h)
        out = np.zeros((n, d))
        for head in range(h):
            qq, kk, vv = qkv[:, 0, head], qkv[:, 1, head], qkv[:, 2, head]
            s = qq @ kk.T / np.sqrt(d // h)
            s[np.triu_indices(n, 1)] = -np.inf
            s = np.exp(s - s.max(1, keepdims=True))
            s /= s.sum(1, keepdims=True)
            out[:, head * (d // h):(head + 1) * (d // h)] = s @ vv
        x = x + out @ p[q + "wo"] + p[q + "bo"]
        y = ln(x, p[q + "ln2.g"], p[q + "ln2.b"])
        x = x + gelu(y @ p[q + "w1"] + p[q + "b1"]) @ p[q + "w2"] + p[q + "b2"]
    return ln(x, p["ln_f.g"], p["ln_f.b"]) @ p["head.w"] + p["head.b"]


@register("M2", "model", "forward equals a plain reference transformer (empty plan)")
def check_reference():
    model = _tiny_model(2)
    geo, ids = _tiny_inputs(model)
    ts = model.embed(geo)
    a = model.forward(ts.tokens, ts.centers, ids).logits.data
    b = reference_forward(model, ts.tokens.data, ts.centers, ids)
    diff = float(np.abs(a - b).max())
    return diff <= 1e-12, f"max diff {diff:.1e}"


@register("M3", "model", "head gradients from point-token positions are exactly zero")
def check_loss_mask():
    model = _tiny_model(2)
    geo, ids = _tiny_inputs(model)
    ts = model.embed(geo)
    res = model.forward(ts.tokens, ts.centers, ids)
    model.text_loss(res, np.roll(ids, -1), np.arange(len(ids)) < len(ids) - 1).backward()
    g = res.logits.grad
    ok = g is not None and not np.any(g[:res.n_point]) and bool(np.any(g[res.n_point:]))
    return ok, f"{res.n_point} point rows"


@register("M4", "model", "end-to-end gradient check of CE + hybrid loss")
def check_e2e_grad():
    model = _tiny_model(2, dim=32)
    geo, ids = _tiny_inputs(model)
    tgt, msk = np.roll(ids, -1), np.arange(len(ids)) < len(ids) - 1
    mask = MaskSpec.sample(8, 0.3, Rng(5))
    heads = model.head_params()
    # feature targets are constants of the objective, so hold them fixed
    fixed = model.embed(geo).tokens.data.copy()

    def f():
        ts = model.embed(geo)

        def backbone(seg, n_learn):
            res = model.forward(seg, ts.centers[mask.visible_indices], ids, n_learn)
            rep = LossReport()
            rep.add("cross_entropy", model.text_loss(res, tgt, msk))
            return res.point_out, rep

        return hybrid_semantic_loss(ts.tokens, ts.patches, mask, heads, backbone, targets=fixed).total

    names = ["embed.stage2.w", "blocks.0.wqkv", "blocks.1.w2", "learn_token", "heads.feat.w", "heads.patch.w",
             "head.w"]
    err = grad_check_params(f, [model.params[n] for n in names], eps=1e-6, max_coords=6)
    return err < 1e-4, f"max err {err:.1e}"


# -- data --------------------------------------------------------------------------

@register("D1", "data", "captions parse back to their specs")
def check_caption_bijection():
    ds = make_dataset(200, 51, n_points=16)
    vocab = Vocab()
    unk = vocab.index["<unk>"]
    for s in ds:
        if canonical(parse_caption(s.record.caption)) != canonical(s.spec):
            return False, s.record.caption
        if unk in vocab.encode(s.record.caption):
            return False, f"out-of-vocabulary word in {s.record.caption!r}"
    return True, "200 shapes"


@register("D2", "data", "dataset bytes are fully determined by the manifest seed")
def check_dataset_bytes():
    with tempfile.TemporaryDirectory() as d:
        digests = []
        for run in ("a", "b"):
            out = Path(d) / run
            write_dataset(out, make_dataset(6, 52, n_points=64), 52, 64)
            digests.append(sorted((p.name, p.read_bytes()) for p in out.rglob("*") if p.is_file()))
    return digests[0] == digests[1], "two generations"


# -- cli ---------------------------------------------------------------------------

@register("C1", "cli", "identical seeded runs give byte-identical logs and checkpoints")
def check_run_determinism():
    from .train import TrainConfig, build_items, train_loop
    blobs = []
    with tempfile.TemporaryDirectory() as d:
        for run in ("a", "b"):
            model = _tiny_model(2)
            samples = make_dataset(4, 61, n_points=64)
            items = build_items(samples, model, Vocab())
            train_loop("pretrain", model, items, TrainConfig(steps=2, batch_size=2, lr=1e-3, learnable_layers=1),
                       Path(d) / run)
            blobs.append(sorted((p.name, p.read_bytes()) for p in (Path(d) / run).iterdir()))
    return blobs[0] == blobs[1], f"{len(blobs[0])} files"


@register("C2", "cli", "every registered check belongs to a known suite")
def check_registry():
    bad = [c.id for c in REGISTRY.values() if c.suite not in SUITES]
    return not bad, f"{len(REGISTRY)} checks"
