"""Synthetic surface data, file formats, manifests, splits, normalization.

Subjects are generated and stored at a high resolution; training inputs
are produced on the fly by the randomized coarsening step, which doubles
as the stability-oriented augmentation.
"""

from __future__ import annotations

import functools
import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .icomesh import angular_distance, build_icosphere, hex_regions_all, vertex_count

HEMIS = ("lh", "rh")
ICOF_MAGIC = b"ICOF"
ICOF_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class FormatError(ValueError):
    """Malformed ICOF file or manifest."""


def save_surface(path, level: int, values: np.ndarray) -> None:
    """Write one hemisphere's (V, C) array as an ICOF file (f32, vertex-major)."""
    values = np.asarray(values)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != vertex_count(level):
        raise FormatError(
            f"{path}: {values.shape[0]} rows does not match level {level} "
            f"({vertex_count(level)} vertices)")
    header = _HEADER.pack(ICOF_MAGIC, ICOF_VERSION, level,
                          values.shape[0], values.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_surface(path):
    """Read an ICOF file. Returns (level, (V, C) float32 array)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, level, n_vertices, n_channels = _HEADER.unpack_from(raw)
    if magic != ICOF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {ICOF_MAGIC!r}")
    if version != ICOF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if n_vertices != vertex_count(level):
        raise FormatError(
            f"{path}: header says {n_vertices} vertices but level {level} "
            f"has {vertex_count(level)}")
    expected = _HEADER.size + n_vertices * n_channels * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: file size {len(raw)} != expected {expected} "
                          f"(truncated or trailing bytes)")
    values = np.frombuffer(raw, dtype="<f4", count=n_vertices * n_channels,
                           offset=_HEADER.size).reshape(n_vertices, n_channels)
    return int(level), values.copy()


@dataclass
class SurfaceSample:
    subject_id: str
    label: int                      # preterm=1, fullterm=0
    level: int
    features: dict                  # hemi -> (V, 3)
    masks: dict | None = None       # hemi -> (V,) bool, synthetic ground truth


@dataclass
class ManifestRecord:
    subject_id: str
    label: int
    lh: str
    rh: str
    lh_mask: str | None = None
    rh_mask: str | None = None
    split: str | None = None


def save_manifest(records, path) -> None:
    lines = []
    for r in records:
        lines.append(json.dumps({
            "subject_id": r.subject_id, "label": r.label, "lh": r.lh, "rh": r.rh,
            "lh_mask": r.lh_mask, "rh_mask": r.rh_mask, "split": r.split,
        }))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path, check_files: bool = True):
    path = Path(path)
    records = []
    seen = set()
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = ManifestRecord(**obj)
        except (json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"{path}:{n}: bad manifest record: {exc}") from exc
        if rec.subject_id in seen:
            raise FormatError(f"{path}:{n}: duplicate subject id {rec.subject_id!r}")
        seen.add(rec.subject_id)
        if check_files:
            for rel in (rec.lh, rec.rh, rec.lh_mask, rec.rh_mask):
                if rel is not None and not (path.parent / rel).exists():
                    raise FormatError(f"{path}:{n}: referenced file missing: {rel}")
        records.append(rec)
    return records


def save_sample(sample: SurfaceSample, out_dir) -> ManifestRecord:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rec = ManifestRecord(subject_id=sample.subject_id, label=sample.label,
                         lh=f"{sample.subject_id}_lh.icof",
                         rh=f"{sample.subject_id}_rh.icof")
    for hemi in HEMIS:
        save_surface(out_dir / getattr(rec, hemi), sample.level, sample.features[hemi])
    if sample.masks is not None:
        rec.lh_mask = f"{sample.subject_id}_lh_mask.icof"
        rec.rh_mask = f"{sample.subject_id}_rh_mask.icof"
        for hemi, name in (("lh", rec.lh_mask), ("rh", rec.rh_mask)):
            save_surface(out_dir / name, sample.level,
                         sample.masks[hemi].astype(np.float32))
    return rec


def load_sample(record: ManifestRecord, base_dir) -> SurfaceSample:
    base = Path(base_dir)
    levels, features = [], {}
    for hemi in HEMIS:
        level, values = load_surface(base / getattr(record, hemi))
        levels.append(level)
        features[hemi] = values
    if levels[0] != levels[1]:
        raise FormatError(f"{record.subject_id}: hemisphere levels differ {levels}")
    masks = None
    if record.lh_mask is not None and record.rh_mask is not None:
        masks = {}
        for hemi, rel in (("lh", record.lh_mask), ("rh", record.rh_mask)):
            level, values = load_surface(base / rel)
            if level != levels[0] or values.shape[1] != 1:
                raise FormatError(f"{record.subject_id}: bad mask file {rel}")
            masks[hemi] = values[:, 0] > 0.5
    return SurfaceSample(subject_id=record.subject_id, label=record.label,
                         level=levels[0], features=features, masks=masks)


@dataclass
class SynthConfig:
    n_per_class: int = 200
    high_level: int = 5
    input_level: int = 3
    smoothing_passes: int = 10
    lesion_centers: tuple = ((0.8017837, 0.2672612, 0.5345225),
                             (-0.5345225, -0.8017837, 0.2672612))
    lesion_radius: float = 0.45      # radians
    amplitudes: tuple = (2.0, 1.5, 1.0)
    jitter: float = 0.2              # max angular jitter, radians
    seed: int = 0

    def __post_init__(self):
        if self.lesion_radius <= 0:
            raise ValueError("lesion_radius must be positive")
        if not np.all(np.isfinite(self.amplitudes)):
            raise ValueError("amplitudes must be finite")
        if self.high_level <= self.input_level:
            raise ValueError("high_level must exceed input_level")


def subject_rng(master_seed: int, subject_id: str) -> np.random.Generator:
    """Order-independent per-subject stream: hash of (seed, subject id)."""
    digest = hashlib.blake2b(f"{master_seed}:{subject_id}".encode(),
                             digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _resolve_center(center, positions) -> np.ndarray:
    if isinstance(center, (int, np.integer)):
        return positions[int(center)]
    c = np.asarray(center, dtype=np.float64)
    return c / np.linalg.norm(c)


def _jitter_direction(center, rng, max_angle) -> np.ndarray:
    theta = rng.uniform(0.0, max_angle)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(center @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    t1 = ref - (ref @ center) * center
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(center, t1)
    return np.cos(theta) * center + np.sin(theta) * (np.cos(phi) * t1 + np.sin(phi) * t2)


def make_subject(cfg: SynthConfig, subject_id: str, label: int) -> SurfaceSample:
    """One synthetic subject at cfg.high_level.

    Channels are smoothed white noise, z-scored per channel; preterm
    subjects get cosine-profile bumps at the jittered lesion sites and a
    ground-truth mask of the vertices inside the angular radius.
    """
    mesh = build_icosphere(cfg.high_level)
    ring = mesh.ring1.astype(np.int64)
    rng = subject_rng(cfg.seed, subject_id)
    amps = np.asarray(cfg.amplitudes, dtype=np.float64)
    features, masks = {}, {}
    for hemi in HEMIS:
        x = rng.standard_normal((mesh.n_vertices, len(amps)))
        for _ in range(cfg.smoothing_passes):
            x = x[ring].mean(axis=1)
        x = (x - x.mean(axis=0)) / np.maximum(x.std(axis=0), 1e-12)
        mask = np.zeros(mesh.n_vertices, dtype=bool)
        if label == 1:
            for center in cfg.lesion_centers:
                c = _resolve_center(center, mesh.positions)
                c = _jitter_direction(c, rng, cfg.jitter)
                dist = angular_distance(mesh.positions, c)
                inside = dist < cfg.lesion_radius
                profile = np.where(inside, 0.5 * (1.0 + np.cos(np.pi * dist / cfg.lesion_radius)), 0.0)
                x = x + profile[:, None] * amps[None, :]
                mask |= inside
        features[hemi] = x.astype(np.float32)
        masks[hemi] = mask
    return SurfaceSample(subject_id=subject_id, label=label,
                         level=cfg.high_level, features=features, masks=masks)


def synth_generate(cfg: SynthConfig, out_dir):
    """Write the full synthetic cohort plus manifest.jsonl; returns records."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for label, tag in ((0, "ft"), (1, "pt")):
        for i in range(cfg.n_per_class):
            sample = make_subject(cfg, f"sub-{tag}{i:04d}", label)
            records.append(save_sample(sample, out_dir))
    save_manifest(records, out_dir / "manifest.jsonl")
    with open(out_dir / "synth_config.json", "w") as fh:
        json.dump({k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in vars(cfg).items()}, fh, indent=2, default=list)
    return records


@functools.lru_cache(maxsize=None)
def _regions(fine_level: int, coarse_level: int):
    regions, lengths = hex_regions_all(fine_level, coarse_level)
    regions.setflags(write=False)
    lengths.setflags(write=False)
    return regions, lengths


def coarsen_random(sample: SurfaceSample, target_level: int,
                   rng: np.random.Generator | None = None,
                   rho: float | None = None) -> SurfaceSample:
    """Downsample by averaging a random subset of each vertex's footprint.

    The subset fraction rho is drawn once per call from U[0.5, 1]; every
    subset keeps at least one element. rho=1.0 is the deterministic
    mean-pooling baseline (no randomness consumed). Masks coarsen by
    majority vote over the full footprint.
    """
    if sample.level <= target_level:
        raise ValueError(f"cannot coarsen level {sample.level} to {target_level}")
    regions, lengths = _regions(sample.level, target_level)
    n_coarse, width = regions.shape
    pad = np.arange(width)[None, :] >= lengths[:, None]
    if rho is None:
        if rng is None:
            raise ValueError("coarsen_random needs an rng when rho is not fixed")
        rho = float(rng.uniform(0.5, 1.0))
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    if rho < 1.0 and rng is None:
        raise ValueError("coarsen_random needs an rng for rho < 1")

    features, masks = {}, None
    for hemi in HEMIS:
        values = sample.features[hemi].astype(np.float64)
        if rho >= 1.0:
            chosen = ~pad
        else:
            scores = rng.random(regions.shape)
            scores[pad] = np.inf
            ranks = np.argsort(np.argsort(scores, axis=1, kind="stable"), axis=1)
            k = np.maximum(1, np.rint(rho * lengths).astype(np.int64))
            chosen = ranks < k[:, None]
        counts = chosen.sum(axis=1)
        pooled = (values[regions] * chosen[:, :, None]).sum(axis=1) / counts[:, None]
        features[hemi] = pooled.astype(np.float32)
    if sample.masks is not None:
        masks = {}
        for hemi in HEMIS:
            frac = (sample.masks[hemi][regions] & ~pad).sum(axis=1) / lengths
            masks[hemi] = frac >= 0.5
    return SurfaceSample(subject_id=sample.subject_id, label=sample.label,
                         level=target_level, features=features, masks=masks)


def coarsen_mean(sample: SurfaceSample, target_level: int) -> SurfaceSample:
    """Deterministic full-footprint average (the rho=1 baseline)."""
    return coarsen_random(sample, target_level, rng=None, rho=1.0)


def make_splits(records, train_fraction: float, seed: int):
    """Stratified train/test split, deterministic in `seed`.

    Returns (train_records, test_records) with split tags set.
    """
    by_label = {}
    for r in records:
        by_label.setdefault(r.label, []).append(r)
    if set(by_label) != {0, 1}:
        raise ValueError(f"both classes required for a split, got labels {sorted(by_label)}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in (0, 1):
        group = sorted(by_label[label], key=lambda r: r.subject_id)
        order = rng.permutation(len(group))
        n_train = int(round(train_fraction * len(group)))
        for pos, idx in enumerate(order):
            rec = replace(group[idx], split="train" if pos < n_train else "test")
            (train if pos < n_train else test).append(rec)
    train.sort(key=lambda r: r.subject_id)
    test.sort(key=lambda r: r.subject_id)
    return train, test


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(
            {"mean": self.mean.tolist(), "std": self.std.tolist()}, indent=2))

    @classmethod
    def load(cls, path) -> "ChannelStats":
        obj = json.loads(Path(path).read_text())
        return cls(mean=np.asarray(obj["mean"], dtype=np.float64),
                   std=np.asarray(obj["std"], dtype=np.float64))


def normalize_stats(records, base_dir) -> ChannelStats:
    """Per-channel mean/std over the given (training) records only.

    A zero-variance channel is left unscaled (std 1) with a warning.
    """
    count = 0
    total = None
    total_sq = None
    for rec in records:
        sample = load_sample(rec, base_dir)
        for hemi in HEMIS:
            x = sample.features[hemi].astype(np.float64)
            if total is None:
                total = x.sum(axis=0)
                total_sq = (x * x).sum(axis=0)
            else:
                total += x.sum(axis=0)
                total_sq += (x * x).sum(axis=0)
            count += x.shape[0]
    if count == 0:
        raise ValueError("normalize_stats: no samples")
    mean = total / count
    var = total_sq / count - mean * mean
    std = np.sqrt(np.maximum(var, 0.0))
    flat = std < 1e-12
    if flat.any():
        warnings.warn(f"channels {np.nonzero(flat)[0].tolist()} have zero variance; "
                      "left unscaled")
        std = np.where(flat, 1.0, std)
    return ChannelStats(mean=mean, std=std)


def apply_normalization(sample: SurfaceSample, stats: ChannelStats) -> SurfaceSample:
    features = {h: (sample.features[h].astype(np.float64) - stats.mean) / stats.std
                for h in HEMIS}
    return SurfaceSample(subject_id=sample.subject_id, label=sample.label,
                         level=sample.level, features=features, masks=sample.masks)
