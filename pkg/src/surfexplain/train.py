"""Training loop, classification metrics, and the ablation harness."""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import backward, zero_grads
from .config import RunConfig, config_to_dict, save_config
from .data import (HEMIS, ChannelStats, apply_normalization, coarsen_mean,
                   coarsen_random, load_manifest, load_sample, normalize_stats)
from .icomesh import mesh_pyramid
from .losses import batch_loss
from .model import forward, init_state, load_checkpoint, save_checkpoint
from .optim import adam_init, adam_step


@dataclass
class EvalResult:
    acc: float
    auc: float
    sen: float
    spe: float
    n: int

    def as_dict(self) -> dict:
        return {"acc": self.acc, "auc": self.auc, "sen": self.sen,
                "spe": self.spe, "n": self.n}

    def __str__(self):
        return (f"ACC={self.acc:.4f} AUC={self.auc:.4f} "
                f"SEN={self.sen:.4f} SPE={self.spe:.4f} (n={self.n})")


def roc_auc(labels, scores) -> float:
    """Trapezoidal area under the ROC curve, ties grouped per threshold."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels == 1)
    fp = np.cumsum(sorted_labels == 0)
    # keep only the last index of each tied score block
    last = np.nonzero(np.append(sorted_scores[1:] != sorted_scores[:-1], True))[0]
    tpr = np.concatenate([[0.0], tp[last] / n_pos])
    fpr = np.concatenate([[0.0], fp[last] / n_neg])
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def classification_metrics(labels, preds, scores) -> EvalResult:
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    acc = float((preds == labels).mean())
    pos = labels == 1
    neg = labels == 0
    sen = float((preds[pos] == 1).mean()) if pos.any() else float("nan")
    spe = float((preds[neg] == 0).mean()) if neg.any() else float("nan")
    return EvalResult(acc=acc, auc=roc_auc(labels, scores), sen=sen, spe=spe,
                      n=len(labels))


class SubjectStore:
    """Lazy in-memory cache of stored (high-level) samples."""

    def __init__(self, records, base_dir):
        self.records = {r.subject_id: r for r in records}
        self.base_dir = base_dir
        self._cache = {}

    def get(self, subject_id):
        if subject_id not in self._cache:
            self._cache[subject_id] = load_sample(self.records[subject_id],
                                                  self.base_dir)
        return self._cache[subject_id]


def epoch_order(records, multiplicity: int, balanced: bool,
                rng: np.random.Generator):
    """Subject draw order for one epoch.

    balanced mode oversamples so per-class counts differ by at most one;
    otherwise every subject appears `multiplicity` times.
    """
    by_label = {0: [], 1: []}
    for r in records:
        by_label[r.label].append(r.subject_id)
    entries = []
    if balanced:
        target = max(len(v) for v in by_label.values()) * multiplicity
        for label, ids in sorted(by_label.items()):
            if not ids:
                continue
            reps = [ids[i % len(ids)] for i in range(target)]
            entries.extend(reps)
    else:
        for label, ids in sorted(by_label.items()):
            entries.extend(ids * multiplicity)
    order = rng.permutation(len(entries))
    return [entries[i] for i in order]


def _eval_features(sample, input_level, stats):
    coarse = sample if sample.level == input_level else coarsen_mean(sample, input_level)
    normalized = apply_normalization(coarse, stats)
    return normalized


def evaluate(state, meshes, records, base_dir, stats: ChannelStats) -> EvalResult:
    """ACC/AUC/SEN/SPE on a manifest; inputs are the deterministic
    (full-footprint) coarsenings of the stored surfaces."""
    labels, preds, scores = [], [], []
    input_level = state.config.input_level
    for rec in records:
        sample = _eval_features(load_sample(rec, base_dir), input_level, stats)
        res = forward(state, sample.features, meshes, training=False)
        z = res.logits.data
        labels.append(rec.label)
        preds.append(int(np.argmax(z)))
        scores.append(float(z[1] - z[0]))
    return classification_metrics(labels, preds, scores)


@dataclass
class TrainOutcome:
    checkpoint: Path
    log_path: Path
    steps: int
    eval_result: EvalResult | None


def train(cfg: RunConfig, data_dir, out_dir, resume=None,
          quiet: bool = False) -> TrainOutcome:
    """Train per config; writes checkpoint, tab-separated loss log, stats
    and a config snapshot into out_dir."""
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ad.set_default_dtype(cfg.train.precision)

    train_records = load_manifest(data_dir / "manifest_train.jsonl")
    test_path = data_dir / "manifest_test.jsonl"
    test_records = load_manifest(test_path) if test_path.exists() else []

    stats = normalize_stats(train_records, data_dir)
    stats.save(out_dir / "stats.json")
    save_config(cfg, out_dir / "config.json")

    meshes = mesh_pyramid(cfg.model.input_level)
    if resume is not None:
        state, adam = load_checkpoint(resume, cfg.model)
        if adam is None:
            adam = adam_init(state.params, lr=cfg.train.lr)
        adam.lr = cfg.train.lr
        log_mode = "a"
    else:
        state = init_state(cfg.model)
        adam = adam_init(state.params, lr=cfg.train.lr)
        log_mode = "w"

    store = SubjectStore(train_records, data_dir)
    ckpt_path = out_dir / "model.nexc"
    log_path = out_dir / "training_log.tsv"
    input_level = cfg.model.input_level
    seed = cfg.train.seed

    probe = epoch_order(train_records, cfg.train.multiplicity,
                        cfg.train.balanced, np.random.default_rng(0))
    steps_per_epoch = max(1, (len(probe) + cfg.train.batch_size - 1) // cfg.train.batch_size)
    start_epoch = adam.step // steps_per_epoch

    t0 = time.time()
    with open(log_path, log_mode) as log:
        for epoch in range(start_epoch, cfg.train.epochs):
            order = epoch_order(train_records, cfg.train.multiplicity,
                                cfg.train.balanced,
                                np.random.default_rng([seed, 1000 + epoch]))
            for b0 in range(0, len(order), cfg.train.batch_size):
                chunk = order[b0:b0 + cfg.train.batch_size]
                results = []
                for j, sid in enumerate(chunk):
                    rng = np.random.default_rng([seed, epoch, b0 + j])
                    high = store.get(sid)
                    sample = coarsen_random(high, input_level, rng)
                    sample = apply_normalization(sample, stats)
                    res = forward(state, sample.features, meshes, training=True)
                    results.append((res, sample.label))
                total, report = batch_loss(results, cfg.loss, meshes)
                backward(total)
                adam_step(state.params, adam)
                zero_grads(state.params)
                log.write(report.tsv_line(adam.step) + "\n")
            log.flush()
            if cfg.train.save_every and (epoch + 1) % cfg.train.save_every == 0:
                save_checkpoint(ckpt_path, state, adam)
            if not quiet:
                msg = (f"epoch {epoch + 1}/{cfg.train.epochs} "
                       f"step {adam.step} total {report.total:.4f} "
                       f"[{time.time() - t0:.1f}s]")
                if cfg.train.eval_every and (epoch + 1) % cfg.train.eval_every == 0 \
                        and test_records:
                    msg += " | test " + str(evaluate(state, meshes, test_records,
                                                     data_dir, stats))
                print(msg, file=sys.stderr)
    save_checkpoint(ckpt_path, state, adam)

    eval_result = None
    if test_records:
        eval_result = evaluate(state, meshes, test_records, data_dir, stats)
        (out_dir / "eval.json").write_text(json.dumps(eval_result.as_dict(), indent=2))
    return TrainOutcome(checkpoint=ckpt_path, log_path=log_path,
                        steps=adam.step, eval_result=eval_result)


ABLATION_VARIANTS = ("full", "no_contrast", "no_entropy", "no_consistency")


def _variant_config(cfg: RunConfig, name: str) -> RunConfig:
    loss = cfg.loss
    if name == "no_contrast":
        loss = replace(loss, lambda_contrast=0.0)
    elif name == "no_entropy":
        loss = replace(loss, lambda_entropy=0.0)
    elif name == "no_consistency":
        loss = replace(loss, lambda_consistency=0.0)
    elif name != "full":
        raise ValueError(f"unknown ablation variant {name!r}")
    return RunConfig(synth=cfg.synth, model=cfg.model, loss=loss, train=cfg.train)


def ablate(cfg: RunConfig, data_dir, out_dir, quiet: bool = False):
    """Train the four loss variants with shared seed/data and tabulate
    ACC/AUC/SEN/SPE for each. Returns {variant: EvalResult}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = {}
    for name in ABLATION_VARIANTS:
        sub_cfg = _variant_config(cfg, name)
        outcome = train(sub_cfg, data_dir, out_dir / name, quiet=quiet)
        if outcome.eval_result is None:
            raise ValueError("ablate needs a test manifest next to the training one")
        rows[name] = outcome.eval_result
        if not quiet:
            print(f"[ablate] {name}: {outcome.eval_result}", file=sys.stderr)
    header = "variant\tacc\tauc\tsen\tspe"
    lines = [header]
    for name in ABLATION_VARIANTS:
        r = rows[name]
        lines.append(f"{name}\t{r.acc:.4f}\t{r.auc:.4f}\t{r.sen:.4f}\t{r.spe:.4f}")
    (out_dir / "ablation_table.tsv").write_text("\n".join(lines) + "\n")
    (out_dir / "ablation_table.json").write_text(json.dumps(
        {name: rows[name].as_dict() for name in ABLATION_VARIANTS}, indent=2))
    return rows
