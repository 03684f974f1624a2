"""Explanation maps (native attention, CAM, Grad-CAM) and the
explainability metrics: fidelity, sparsity, stability, ground-truth
overlap."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (HEMIS, ChannelStats, SurfaceSample, coarsen_mean,
                   coarsen_random, save_surface, subject_rng)
from .icomesh import IcoMesh
from .model import STAGE_NAMES, ModelState, forward

METHODS = ("attention", "cam", "gradcam")
TAU_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


class ExplainError(RuntimeError):
    pass


@dataclass
class ExplanationMap:
    method: str
    level: int
    subject_id: str
    values: dict                    # hemi -> (V,) in [0, 1]


def normalize_unit(values: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; constant maps fall back to all 0.5."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    lo, hi = values.min(), values.max()
    if hi - lo < 1e-12:
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def _split_hemis(stacked: np.ndarray):
    half = stacked.shape[0] // 2
    return {"lh": stacked[:half], "rh": stacked[half:]}


def extract_attention(state: ModelState, sample: SurfaceSample, meshes: dict,
                      stage: str = "db3") -> ExplanationMap:
    """The model's own normalized attention at the requested stage."""
    if stage not in STAGE_NAMES:
        raise ExplainError(f"unknown stage {stage!r}; expected one of {STAGE_NAMES}")
    res = forward(state, sample.features, meshes, training=False)
    st = res.stage(stage)
    values = {h: st.attn[h].data[:, 0].astype(np.float64).copy() for h in HEMIS}
    return ExplanationMap(method="attention", level=st.level,
                          subject_id=sample.subject_id, values=values)


def cam_from_features(features: np.ndarray, weight_col: np.ndarray) -> np.ndarray:
    """Raw CAM: per-row dot product with a classifier weight column, ReLU'd."""
    return np.maximum(features @ weight_col, 0.0)


def cam(state: ModelState, sample: SurfaceSample, meshes: dict,
        target_class: int) -> ExplanationMap:
    """Class activation map from the pre-GAP head features."""
    res = forward(state, sample.features, meshes, training=False)
    w = state.params["final.out.w"].data[:, target_class]
    raw = cam_from_features(res.head_features.data, w)
    values = {h: normalize_unit(v) for h, v in _split_hemis(raw).items()}
    return ExplanationMap(method="cam", level=state.config.input_level,
                          subject_id=sample.subject_id, values=values)


def grad_cam(state: ModelState, sample: SurfaceSample, meshes: dict,
             target_class: int, layer: str = "db3") -> ExplanationMap:
    """Gradient-weighted activation map at a chosen stage's features."""
    if layer not in STAGE_NAMES:
        raise ExplainError(f"unknown layer {layer!r}; expected one of {STAGE_NAMES}")
    res = forward(state, sample.features, meshes, training=False)
    onehot = np.zeros(2, dtype=ad.default_dtype())
    onehot[target_class] = 1.0
    picked = ad.sum_(ad.mul(res.logits, ad.const(onehot)))
    ad.backward(picked)
    feats = res.stage(layer).feats
    if feats.grad is None:
        raise ExplainError(
            f"grad_cam: no gradient at layer {layer!r} (frozen graph)")
    weights = feats.grad.mean(axis=0)                 # channel importances
    raw = np.maximum(feats.data @ weights, 0.0)
    values = {h: normalize_unit(v) for h, v in _split_hemis(raw).items()}
    return ExplanationMap(method="gradcam", level=res.stage(layer).level,
                          subject_id=sample.subject_id, values=values)


def compute_map(state, sample, meshes, method: str, target_class: int = 1,
                layer: str = "db3") -> ExplanationMap:
    if method == "attention":
        return extract_attention(state, sample, meshes, stage=layer)
    if method == "cam":
        return cam(state, sample, meshes, target_class)
    if method == "gradcam":
        return grad_cam(state, sample, meshes, target_class, layer=layer)
    raise ExplainError(f"unknown method {method!r}; expected one of {METHODS}")


def make_predictor(state: ModelState, meshes: dict):
    def predict_fn(features: dict) -> int:
        res = forward(state, features, meshes, training=False)
        return int(np.argmax(res.logits.data))
    return predict_fn


def _check_tau(tau: float) -> None:
    if not 0.0 < tau < 1.0:
        raise ExplainError(f"tau must be in (0, 1), got {tau}")


def fidelity(predict_fn, samples, maps, tau: float,
             impute: np.ndarray | None = None):
    """Mean over subjects of correct(kept region) - correct(complement).

    Vertices outside the kept set are replaced by the per-channel
    baseline `impute` (training-set means; zeros in normalized space).
    Range [-1, 1]; ~0 for uninformative maps.
    """
    _check_tau(tau)
    per_subject = {}
    for sample, emap in zip(samples, maps):
        n_ch = sample.features["lh"].shape[1]
        base = np.zeros(n_ch) if impute is None else np.asarray(impute, dtype=np.float64)
        kept, comp = {}, {}
        for h in HEMIS:
            keep = emap.values[h] > tau
            x = sample.features[h].astype(np.float64)
            kept[h] = np.where(keep[:, None], x, base[None, :])
            comp[h] = np.where(keep[:, None], base[None, :], x)
        score = float(predict_fn(kept) == sample.label) - \
            float(predict_fn(comp) == sample.label)
        per_subject[sample.subject_id] = score
    agg = float(np.mean(list(per_subject.values()))) if per_subject else 0.0
    return agg, per_subject


def sparsity(maps, tau: float):
    """1 - fraction of vertices above tau, averaged over hemispheres and maps."""
    _check_tau(tau)
    per_subject = {}
    for emap in maps:
        vals = [1.0 - float((emap.values[h] > tau).mean()) for h in HEMIS]
        per_subject[emap.subject_id] = float(np.mean(vals))
    agg = float(np.mean(list(per_subject.values()))) if per_subject else 0.0
    return agg, per_subject


def stability(predict_fn, sample_high: SurfaceSample, input_level: int, k: int,
              seed: int, stats: ChannelStats | None = None) -> float:
    """Fraction of k randomized re-coarsenings predicted with the true label."""
    if k < 2:
        raise ExplainError(f"stability needs k >= 2, got {k}")
    rng = subject_rng(seed, f"stability:{sample_high.subject_id}")
    hits = 0
    for _ in range(k):
        coarse = coarsen_random(sample_high, input_level, rng)
        feats = coarse.features
        if stats is not None:
            feats = {h: (feats[h].astype(np.float64) - stats.mean) / stats.std
                     for h in HEMIS}
        hits += int(predict_fn(feats) == sample_high.label)
    return hits / k


def gt_overlap(emap: ExplanationMap, masks: dict, tau: float):
    """IoU and Dice between the above-tau set and the ground-truth mask,
    pooled over both hemispheres. Empty-vs-empty counts as perfect."""
    _check_tau(tau)
    if masks is None:
        raise ExplainError(f"{emap.subject_id}: no ground-truth mask present")
    pred = np.concatenate([emap.values[h] > tau for h in HEMIS])
    gt = np.concatenate([masks[h].astype(bool) for h in HEMIS])
    inter = float(np.logical_and(pred, gt).sum())
    union = float(np.logical_or(pred, gt).sum())
    if union == 0.0:
        return 1.0, 1.0
    iou = inter / union
    denom = float(pred.sum() + gt.sum())
    dice = 2.0 * inter / denom if denom else 1.0
    return iou, dice


@dataclass
class MetricReport:
    method: str
    tau: float
    fidelity: float
    sparsity: float
    stability: float
    gt_iou: float | None
    gt_dice: float | None
    per_subject: dict
    curves: dict

    def to_json(self) -> str:
        return json.dumps(vars(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def compute_metrics(state: ModelState, meshes: dict, high_samples,
                    stats: ChannelStats | None, method: str, tau: float = 0.5,
                    k_stability: int = 10, seed: int = 0,
                    curves: bool = True, layer: str = "db3") -> MetricReport:
    """Full metric sweep for one explanation method over a dataset.

    high_samples hold the stored high-resolution surfaces; evaluation
    inputs are their deterministic coarsenings, normalized by `stats`.
    """
    _check_tau(tau)
    input_level = state.config.input_level
    predict_fn = make_predictor(state, meshes)

    eval_samples, maps = [], []
    for high in high_samples:
        coarse = coarsen_mean(high, input_level)
        if stats is not None:
            coarse = SurfaceSample(
                subject_id=coarse.subject_id, label=coarse.label, level=coarse.level,
                features={h: (coarse.features[h].astype(np.float64) - stats.mean) / stats.std
                          for h in HEMIS},
                masks=coarse.masks)
        eval_samples.append(coarse)
        maps.append(compute_map(state, coarse, meshes, method, layer=layer))

    fid, fid_per = fidelity(predict_fn, eval_samples, maps, tau)
    spa, spa_per = sparsity(maps, tau)
    stab_per = {h.subject_id: stability(predict_fn, h, input_level, k_stability,
                                        seed, stats) for h in high_samples}
    stab = float(np.mean(list(stab_per.values()))) if stab_per else 0.0

    iou_per, dice_per = {}, {}
    for sample, emap in zip(eval_samples, maps):
        if sample.masks is not None and sample.label == 1:
            iou, dice = gt_overlap(emap, sample.masks, tau)
            iou_per[sample.subject_id] = iou
            dice_per[sample.subject_id] = dice
    gt_iou = float(np.mean(list(iou_per.values()))) if iou_per else None
    gt_dice = float(np.mean(list(dice_per.values()))) if dice_per else None

    curve_data = {}
    if curves:
        curve_data["tau"] = list(TAU_GRID)
        curve_data["sparsity"] = [sparsity(maps, t)[0] for t in TAU_GRID]
        curve_data["fidelity"] = [fidelity(predict_fn, eval_samples, maps, t)[0]
                                  for t in TAU_GRID]

    per_subject = {
        sid: {"fidelity": fid_per.get(sid), "sparsity": spa_per.get(sid),
              "stability": stab_per.get(sid), "gt_iou": iou_per.get(sid),
              "gt_dice": dice_per.get(sid)}
        for sid in sorted(fid_per)
    }
    return MetricReport(method=method, tau=tau, fidelity=fid, sparsity=spa,
                        stability=stab, gt_iou=gt_iou, gt_dice=gt_dice,
                        per_subject=per_subject, curves=curve_data)


def save_map(emap: ExplanationMap, out_dir) -> list:
    """Write one ICOF file per hemisphere; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for h in HEMIS:
        p = out_dir / f"{emap.subject_id}_{emap.method}_{h}.icof"
        save_surface(p, emap.level, emap.values[h].astype(np.float32))
        paths.append(p)
    return paths


def write_colored_ply(mesh: IcoMesh, values: np.ndarray, path) -> None:
    """ASCII PLY with a blue-to-red per-vertex colormap, for offline viewing."""
    values = normalize_unit(values)
    red = np.rint(values * 255).astype(int)
    blue = 255 - red
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {mesh.n_vertices}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices", "end_header",
    ]
    for pos, r, b in zip(mesh.positions, red, blue):
        lines.append(f"{pos[0]:.6f} {pos[1]:.6f} {pos[2]:.6f} {r} 0 {b}")
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    Path(path).write_text("\n".join(lines) + "\n")
