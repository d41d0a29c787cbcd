"""Analytic parameter and multiply-add counts (no model is instantiated)."""

from __future__ import annotations

from .embedding import EmbedConfig, embed_param_count
from .hga import HgaPlan
from .model import ModelConfig


def linear_macs(tokens: int, d_in: int, d_out: int) -> int:
    return tokens * d_in * d_out


def param_counts(ecfg: EmbedConfig, mcfg: ModelConfig, plan: HgaPlan | None = None,
                 ssl_heads: bool = True) -> dict[str, int]:
    d = mcfg.model_dim
    point_emb = embed_param_count(ecfg, include_projection=False)
    proj = ecfg.stage_dims[3] * d + d
    block = 2 * 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * mcfg.mlp_ratio * d + mcfg.mlp_ratio * d) \
        + (mcfg.mlp_ratio * d * d + d)
    pe = ecfg.trig_dim * d + d
    out = {
        "point_embedding": point_emb,
        "projection": proj,
        "transformer": mcfg.layers * block,
        "point_position": mcfg.layers * pe,
        "lm_io": mcfg.vocab * d + mcfg.max_seq * d + 2 * d + d * mcfg.vocab + mcfg.vocab,
        "hga": 0,
        "ssl_heads": 0,
    }
    if plan is not None:
        out["hga"] = plan.n_aggregations() * (4 * d * d + 4 * d + 1)
    if ssl_heads:
        out["ssl_heads"] = d + (d * d + d) + (d * 3 * ecfg.group_k + 3 * ecfg.group_k)
        if mcfg.teacher_dim:
            out["ssl_heads"] += d * mcfg.teacher_dim + mcfg.teacher_dim
    out["total"] = sum(out.values())
    return out


def point_token_trace(m: int, plan: HgaPlan | None, keep_ratio: float = 0.5) -> list[int]:
    """Point tokens entering each layer boundary; ``keep_ratio`` models one aggregation."""
    counts = [m]
    cur, level, stack = m, 0, []
    for _, kind in (plan.events() if plan is not None else []):
        if kind == "agg":
            stack.append(cur)
            cur = max(1, int(round(cur * keep_ratio)))
            level += 1
        else:
            cur = stack.pop()
            level -= 1
        counts.append(cur)
    return counts


def _layer_points(m: int, n_layers: int, plan: HgaPlan | None, keep_ratio: float,
                  measured: list[int] | None) -> list[int]:
    trace = measured if measured is not None else point_token_trace(m, plan, keep_ratio)
    per_layer, cur, ev = [], trace[0], 0
    events = plan.events() if plan is not None else []
    for layer in range(1, n_layers + 1):
        per_layer.append(cur)
        while ev < len(events) and events[ev][0] == layer:
            ev += 1
            cur = trace[ev]
    return per_layer


def flops_count(ecfg: EmbedConfig, mcfg: ModelConfig, plan: HgaPlan | None = None, n_text: int = 32,
                keep_ratio: float = 0.5, measured_trace: list[int] | None = None) -> dict[str, int]:
    """Forward multiply-adds per module for one sample."""
    d = mcfg.model_dim
    sd = ecfg.stage_dims
    emb = linear_macs(ecfg.input_points, 6, sd[0])
    for s, m in enumerate(ecfg.stage_sizes):
        emb += linear_macs(m * ecfg.group_k, sd[s] + ecfg.trig_dim, sd[s + 1])
    m_tok = ecfg.stage_sizes[-1]
    proj = linear_macs(m_tok, sd[3], d)
    points = _layer_points(m_tok, mcfg.layers, plan, keep_ratio, measured_trace)
    attn_proj = attn_mix = mlp = pe = 0
    for p in points:
        t = p + n_text
        attn_proj += linear_macs(t, d, 3 * d) + linear_macs(t, d, d)
        attn_mix += 2 * t * t * d
        mlp += 2 * linear_macs(t, d, mcfg.mlp_ratio * d)
        pe += linear_macs(p, ecfg.trig_dim, d)
    trace = measured_trace if measured_trace is not None else point_token_trace(m_tok, plan, keep_ratio)
    hga = 0
    if plan is not None:
        for i, (_, kind) in enumerate(plan.events()):
            if kind == "agg":
                before, after = trace[i], trace[i + 1]
                k = -(-before // max(1, after))  # ceil: members per padded cell
                rows = after * k
                hga += linear_macs(rows, d, 3 * d) + linear_macs(rows, d, d) + 2 * after * k * k * d
    out = {
        "embedding": emb,
        "projection": proj,
        "attention_projections": attn_proj,
        "attention_mixing": attn_mix,
        "mlp": mlp,
        "point_position": pe,
        "hga": hga,
        "lm_head": linear_macs(trace[-1] + n_text, d, mcfg.vocab),
    }
    out["total"] = sum(out.values())
    return out
