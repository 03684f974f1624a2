"""Training objectives: multi-resolution CE, the contrastive/entropy/
cross-scale regularizers, and their weighted total.

Pair sums run over all positive x negative pairs inside the minibatch.
The entropy term keeps its sign exactly as written by default; the
"prose_intent" mode flips it (see LossConfig.entropy_sign).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .icomesh import IcoMesh

VALID_STAGES = ("encoder", "db1", "db2", "db3", "final")


@dataclass
class LossConfig:
    lambda_contrast: float = 0.2
    lambda_entropy: float = 0.5
    lambda_consistency: float = 0.1
    margin: float = 1.0
    ce_stages: tuple = ("encoder", "db1", "db2", "final")
    entropy_sign: str = "as_written"          # or "prose_intent"
    contrast_stages: tuple = ("db3",)
    entropy_stages: tuple = ("db3",)
    normalize_contrast_features: bool = False

    def __post_init__(self):
        self.ce_stages = tuple(self.ce_stages)
        self.contrast_stages = tuple(self.contrast_stages)
        self.entropy_stages = tuple(self.entropy_stages)
        if min(self.lambda_contrast, self.lambda_entropy, self.lambda_consistency) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if not self.ce_stages:
            raise ValueError("ce_stages must not be empty")
        for s in self.ce_stages + self.contrast_stages + self.entropy_stages:
            if s not in VALID_STAGES:
                raise ValueError(f"unknown stage {s!r}")
        if self.entropy_sign not in ("as_written", "prose_intent"):
            raise ValueError(f"unknown entropy_sign {self.entropy_sign!r}")


@dataclass
class BatchLossReport:
    ce: float = 0.0
    contrast: float = 0.0
    entropy: float = 0.0
    consistency: float = 0.0
    total: float = 0.0
    contrast_skipped: bool = False

    def tsv_line(self, step: int) -> str:
        return (f"{step}\t{self.ce:.10g}\t{self.contrast:.10g}\t"
                f"{self.entropy:.10g}\t{self.consistency:.10g}\t{self.total:.10g}")


def _onehot(label: int) -> np.ndarray:
    v = np.zeros((1, 2), dtype=ad.default_dtype())
    v[0, label] = 1.0
    return v


def ce_from_logits(score: Tensor, label: int) -> Tensor:
    """Softmax cross-entropy of a 2-logit score against an integer label."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    p = ad.softmax(ad.reshape(score, (1, 2)), axis=1)
    picked = ad.sum_(ad.mul(ad.log(p), ad.const(_onehot(label))))
    return ad.scale(picked, -1.0)


def ce_multires(stage_scores: dict, label: int, stages) -> Tensor:
    """Sum of per-stage cross-entropies over the configured stage set."""
    total = None
    for name in stages:
        if name not in stage_scores:
            raise ValueError(f"stage {name!r} not present in forward outputs")
        term = ce_from_logits(stage_scores[name], label)
        total = term if total is None else ad.add(total, term)
    return total


def _pooled(attn: Tensor, feats: Tensor) -> Tensor:
    """Column sums of attention-gated features: a (M,) holistic vector."""
    return ad.sum_(ad.mul(attn, feats), axis=0)


def _pooled_inverse(attn: Tensor, feats: Tensor) -> Tensor:
    inv = ad.sub(ad.const(np.ones((), dtype=attn.data.dtype)), attn)
    return ad.sum_(ad.mul(inv, feats), axis=0)


def _unit(v: Tensor) -> Tensor:
    n = ad.add(ad.norm2(v), ad.const(np.asarray(1e-12)))
    return ad.mul(v, ad.powc(n, -1.0))


def contrast_loss(positives, negatives, margin: float = 1.0,
                  normalize: bool = False):
    """Fidelity-aware contrastive penalty over in-batch class pairs.

    positives/negatives are lists of (attention (2V,1), features (2V,M))
    tensors from one attention stage. For each positive i and negative j:
    pull the positive's non-attended pool toward the negative pool, and
    push the attended pool a margin away from both. Returns (loss,
    skipped); a batch without both classes skips with loss None.
    """
    if not positives or not negatives:
        return None, True
    m_t = ad.const(np.asarray(float(margin)))
    pos = []
    for attn, feats in positives:
        f_pos = _pooled(attn, feats)
        f_inv = _pooled_inverse(attn, feats)
        if normalize:
            f_pos, f_inv = _unit(f_pos), _unit(f_inv)
        pos.append((f_pos, f_inv))
    neg = []
    for attn, feats in negatives:
        f_neg = _pooled(attn, feats)
        neg.append(_unit(f_neg) if normalize else f_neg)
    total = None
    for f_pos, f_inv in pos:
        hinge_self = ad.relu(ad.sub(m_t, ad.norm2(ad.sub(f_inv, f_pos))))
        for f_neg in neg:
            pull = ad.norm2(ad.sub(f_inv, f_neg))
            hinge_cross = ad.relu(ad.sub(m_t, ad.norm2(ad.sub(f_neg, f_pos))))
            term = ad.add(ad.add(pull, hinge_self), hinge_cross)
            total = term if total is None else ad.add(total, term)
    return total, False


def _map_entropy(attn: Tensor) -> Tensor:
    return ad.sum_(ad.mul(attn, ad.log(attn)))


def entropy_loss(pos_attn, neg_attn, sign: str = "as_written"):
    """Sparsity regularizer summed over in-batch positive x negative pairs.

    as_written keeps the per-pair term sum(A+ log A+) - sum(A- log A-);
    prose_intent negates both. Attention values are clamped at 1e-12 by
    the log op. Returns (loss, skipped).
    """
    if not pos_attn or not neg_attn:
        return None, True
    pos_sum = None
    for a in pos_attn:
        e = _map_entropy(a)
        pos_sum = e if pos_sum is None else ad.add(pos_sum, e)
    neg_sum = None
    for a in neg_attn:
        e = _map_entropy(a)
        neg_sum = e if neg_sum is None else ad.add(neg_sum, e)
    # each positive pairs with every negative and vice versa
    val = ad.sub(ad.scale(pos_sum, float(len(neg_attn))),
                 ad.scale(neg_sum, float(len(pos_attn))))
    if sign == "prose_intent":
        val = ad.scale(val, -1.0)
    return val, False


def upsample_attention(attn: Tensor, mesh_fine: IcoMesh) -> Tensor:
    """Lift a (V_coarse, 1) map one level up; midpoints average their parents."""
    up = mesh_fine.unpool_map.astype(np.int64)
    both = ad.add(ad.gather_rows(attn, up[:, 0]), ad.gather_rows(attn, up[:, 1]))
    return ad.scale(both, 0.5)


def consistency_loss(stage_attn, meshes: dict) -> Tensor:
    """Mean squared gap between each attention map and the next-coarser
    map lifted to its level, summed over adjacent stage pairs and
    hemispheres. stage_attn is a list of (level, {hemi: (V,1) Tensor})
    in coarse-to-fine order."""
    if len(stage_attn) < 2:
        raise ValueError("consistency_loss needs at least two stages")
    total = None
    for (lv_c, coarse), (lv_f, fine) in zip(stage_attn[:-1], stage_attn[1:]):
        if lv_f != lv_c + 1:
            raise ValueError(f"stages must be adjacent levels, got {lv_c}->{lv_f}")
        for hemi in ("lh", "rh"):
            up = upsample_attention(coarse[hemi], meshes[lv_f])
            d = ad.sub(up, fine[hemi])
            term = ad.mean(ad.mul(d, d))
            total = term if total is None else ad.add(total, term)
    return total


def total_loss(ce: Tensor, contrast, entropy, consistency, cfg: LossConfig) -> Tensor:
    total = ce
    if contrast is not None:
        total = ad.add(total, ad.scale(contrast, cfg.lambda_contrast))
    if entropy is not None:
        total = ad.add(total, ad.scale(entropy, cfg.lambda_entropy))
    if consistency is not None:
        total = ad.add(total, ad.scale(consistency, cfg.lambda_consistency))
    return total


def _stack_attn(stage) -> Tensor:
    return ad.concat([stage.attn["lh"], stage.attn["rh"]], axis=0)


def batch_loss(batch, cfg: LossConfig, meshes: dict):
    """Full objective over a list of (ForwardResult, label) pairs.

    CE is averaged over the batch; the regularizers are the plain sums
    written in their definitions. Returns (total Tensor, BatchLossReport).
    """
    if not batch:
        raise ValueError("empty batch")
    ce_sum = None
    for res, label in batch:
        term = ce_multires(res.stage_scores(), label, cfg.ce_stages)
        ce_sum = term if ce_sum is None else ad.add(ce_sum, term)
    ce = ad.scale(ce_sum, 1.0 / len(batch))

    def pairs_for(stages):
        pos, neg = [], []
        for res, label in batch:
            for name in stages:
                st = res.stage(name)
                entry = (_stack_attn(st), st.feats)
                (pos if label == 1 else neg).append(entry)
        return pos, neg

    pos_c, neg_c = pairs_for(cfg.contrast_stages)
    contrast, contrast_skipped = contrast_loss(
        pos_c, neg_c, cfg.margin, cfg.normalize_contrast_features)

    pos_e, neg_e = pairs_for(cfg.entropy_stages)
    entropy, _ = entropy_loss([a for a, _ in pos_e], [a for a, _ in neg_e],
                              cfg.entropy_sign)

    consistency = None
    for res, _label in batch:
        stage_attn = [(s.level, s.attn) for s in res.stages]
        term = consistency_loss(stage_attn, meshes)
        consistency = term if consistency is None else ad.add(consistency, term)

    total = total_loss(ce, contrast, entropy, consistency, cfg)
    report = BatchLossReport(
        ce=float(ce.data),
        contrast=float(contrast.data) if contrast is not None else 0.0,
        entropy=float(entropy.data) if entropy is not None else 0.0,
        consistency=float(consistency.data) if consistency is not None else 0.0,
        total=float(total.data),
        contrast_skipped=contrast_skipped,
    )
    return total, report
