"""Self-supervised point-token losses and the hybrid masked/reconstruction objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .geometry import chamfer_l2_batched
from .rng import Rng

TERM_ORDER = ("cross_entropy", "mask_mse", "chamfer", "contrastive", "kd")


def masked_count(m: int, ratio: float) -> int:
    """round(M * r), halves rounding up."""
    return int(np.floor(m * ratio + 0.5))


@dataclass
class MaskSpec:
    ratio: float
    masked_indices: np.ndarray
    visible_indices: np.ndarray
    seed: int | None = None

    @property
    def n_tokens(self) -> int:
        return len(self.masked_indices) + len(self.visible_indices)

    @classmethod
    def sample(cls, m: int, ratio: float, rng: Rng) -> "MaskSpec":
        if not 0.0 <= ratio < 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
        n = masked_count(m, ratio)
        perm = rng.permutation(m)
        masked = np.sort(perm[:n])
        visible = np.sort(perm[n:])
        return cls(ratio, masked, visible, rng.seed)

    @classmethod
    def none(cls, m: int) -> "MaskSpec":
        return cls(0.0, np.zeros(0, dtype=np.int64), np.arange(m))


@dataclass
class LossReport:
    terms: dict[str, T.Tensor] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def add(self, name: str, value: T.Tensor, weight: float = 1.0) -> None:
        if name in self.terms:
            raise KeyError(f"duplicate loss term {name!r}")
        self.terms[name] = T.as_tensor(value)
        self.weights[name] = float(weight)

    def merge(self, other: "LossReport") -> "LossReport":
        for name, value in other.terms.items():
            self.add(name, value, other.weights[name])
        return self

    def names(self) -> list[str]:
        known = [n for n in TERM_ORDER if n in self.terms]
        return known + sorted(n for n in self.terms if n not in TERM_ORDER)

    @property
    def total(self) -> T.Tensor:
        out = None
        for name in self.names():
            term = self.weights[name] * self.terms[name]
            out = term if out is None else out + term
        return T.Tensor(0.0) if out is None else out

    def values(self) -> dict[str, float]:
        return {n: self.terms[n].item() for n in self.names()}


@dataclass
class TeacherFeatures:
    features: np.ndarray  # M x D2
    source: str = ""


def _zero() -> T.Tensor:
    return T.Tensor(0.0)


def masked_modeling_feat(pred, gt) -> T.Tensor:
    """Mean over rows of the squared L2 distance (no division by width)."""
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise T.ShapeError("masked_modeling_feat", pred.shape, gt.shape)
    if pred.shape[0] == 0:
        return _zero()
    d = pred - gt
    return (d * d).sum() / float(pred.shape[0])


reconstruction_feat = masked_modeling_feat


def masked_modeling_patch(pred_patches, gt_patches) -> T.Tensor:
    """Mean over patches of the symmetric chamfer distance between corresponding sets."""
    pred, gt = T.as_tensor(pred_patches), T.as_tensor(gt_patches)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise T.ShapeError("masked_modeling_patch", pred.shape, gt.shape)
    if pred.shape[0] == 0:
        return _zero()
    return chamfer_l2_batched(pred, gt).mean()


def linear_head(x, w, b) -> T.Tensor:
    return T.as_tensor(x) @ w + b


def reconstruction_patch(tokens_out, gt_patches, head_w, head_b) -> T.Tensor:
    tokens_out = T.as_tensor(tokens_out)
    gt = np.asarray(gt_patches.data if isinstance(gt_patches, T.Tensor) else gt_patches)
    m, k, _ = gt.shape
    if head_w.shape != (tokens_out.shape[-1], 3 * k) or head_b.shape != (3 * k,):
        raise T.ShapeError("reconstruction_patch head", head_w.shape, head_b.shape, (tokens_out.shape[-1], 3 * k))
    if tokens_out.shape[0] != m:
        raise T.ShapeError("reconstruction_patch", tokens_out.shape, gt.shape)
    if m == 0:
        return _zero()
    pred = linear_head(tokens_out, head_w, head_b).reshape(m, k, 3)
    return masked_modeling_patch(pred, gt)


def contrastive_nce(f1, f2, tau: float = 0.07) -> T.Tensor:
    """InfoNCE over a batch of clouds.

    Each view's tokens are mean-pooled per cloud and L2-normalized; clouds in
    the same batch act as negatives.
    """
    if not tau > 0:
        raise ValueError(f"contrastive_nce: tau must be positive, got {tau}")
    f1, f2 = T.as_tensor(f1), T.as_tensor(f2)
    if f1.ndim != 3 or f1.shape[0] != f2.shape[0] or f1.shape[2] != f2.shape[2] or f2.ndim != 3:
        raise T.ShapeError("contrastive_nce", f1.shape, f2.shape)
    z1 = T.l2_normalize(f1.mean(axis=1))
    z2 = T.l2_normalize(f2.mean(axis=1))
    return nce_from_pooled(z1, z2, tau)


def nce_from_pooled(z1, z2, tau: float) -> T.Tensor:
    z1, z2 = T.as_tensor(z1), T.as_tensor(z2)
    b = z1.shape[0]
    logits = (z1 @ z2.transpose()) / tau
    logp = T.log_softmax(logits, axis=1)
    diag = logp[np.arange(b), np.arange(b)]
    return -diag.mean()


def kd_loss(student, teacher: TeacherFeatures, adapter_w, adapter_b) -> T.Tensor:
    student = T.as_tensor(student)
    feats = np.asarray(teacher.features, dtype=np.float64)
    if feats.shape[0] != student.shape[0]:
        raise T.ShapeError("kd_loss (teacher rows vs student rows)", feats.shape, student.shape)
    if adapter_w.shape != (student.shape[1], feats.shape[1]):
        raise T.ShapeError("kd_loss adapter", adapter_w.shape, (student.shape[1], feats.shape[1]))
    adapted = linear_head(student, adapter_w, adapter_b)
    return masked_modeling_feat(adapted, T.Tensor(feats))


# -- hybrid ------------------------------------------------------------------------

def hybrid_input(tokens, mask: MaskSpec, learn_token) -> tuple[T.Tensor, int]:
    """Visible tokens in original order, then one learnable slot per masked token."""
    tokens = T.as_tensor(tokens)
    n_learn = len(mask.masked_indices)
    parts = [T.gather(tokens, mask.visible_indices, axis=0)]
    if n_learn:
        learn_token = T.as_tensor(learn_token)
        parts.append(T.gather(learn_token.reshape(1, -1), np.zeros(n_learn, dtype=np.int64), axis=0))
    return T.concat(parts, axis=0), n_learn


def hybrid_terms(outputs, tokens, patches, mask: MaskSpec, heads: dict[str, T.Tensor],
                 variant: str = "feat", targets=None) -> LossReport:
    """Loss terms on backbone outputs laid out as ``[visible slots][learn slots]``.

    ``feat``: learn slots regress the masked tokens, visible slots rebuild
    their patches.  ``patch``: learn slots rebuild masked patches, visible
    slots regress their own tokens.  Feature targets are constants: the
    detached ``tokens`` unless ``targets`` is given.
    """
    outputs = T.as_tensor(outputs)
    gt_tokens = T.as_tensor(tokens if targets is None else targets).detach()
    patches = np.asarray(patches)
    n_vis = len(mask.visible_indices)
    n_learn = len(mask.masked_indices)
    if outputs.shape[0] != n_vis + n_learn:
        raise T.ShapeError("hybrid outputs", outputs.shape, (n_vis + n_learn,))
    vis_out = outputs[:n_vis]
    learn_out = outputs[n_vis:]
    report = LossReport()
    if variant == "feat":
        pred = linear_head(learn_out, heads["feat.w"], heads["feat.b"])
        report.add("mask_mse", masked_modeling_feat(pred, gt_tokens[mask.masked_indices]))
        report.add("chamfer", reconstruction_patch(vis_out, patches[mask.visible_indices],
                                                   heads["patch.w"], heads["patch.b"]))
    elif variant == "patch":
        report.add("chamfer", reconstruction_patch(learn_out, patches[mask.masked_indices],
                                                   heads["patch.w"], heads["patch.b"]))
        pred = linear_head(vis_out, heads["feat.w"], heads["feat.b"])
        report.add("mask_mse", masked_modeling_feat(pred, gt_tokens[mask.visible_indices]))
    else:
        raise ValueError(f"unknown hybrid variant {variant!r}")
    return report


def hybrid_semantic_loss(tokens, patches, mask: MaskSpec, params: dict[str, T.Tensor],
                         backbone: Callable[[T.Tensor, int], tuple[T.Tensor, LossReport | None]],
                         variant: str = "feat", targets=None) -> LossReport:
    """Run the backbone on the hybrid layout and collect all unit-weight terms.

    ``backbone(segment, n_learn)`` returns the point-slot outputs and an
    optional report with its own terms (the language cross-entropy).
    """
    if not 0.0 <= mask.ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {mask.ratio}")
    segment, n_learn = hybrid_input(tokens, mask, params["learn_token"])
    outputs, extra = backbone(segment, n_learn)
    report = LossReport()
    if extra is not None:
        report.merge(extra)
    return report.merge(hybrid_terms(outputs, tokens, patches, mask, params, variant, targets))
