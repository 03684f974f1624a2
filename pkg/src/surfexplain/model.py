"""Spherical attention-decoding network for two-hemisphere surface input.

Layout convention: both hemispheres are processed as one stacked
(2V, C) feature matrix with left rows first; mesh index tables are
offset for the right block, which makes cross-hemisphere weight sharing
structural rather than a copy discipline. Attention maps are split and
normalized per hemisphere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .icomesh import IcoMesh, vertex_count
from .optim import AdamState, adam_init

HEMIS = ("lh", "rh")
CKPT_MAGIC = b"NEXC"
CKPT_VERSION = 1

ENCODER_DEPTH = 4
DECODER_DEPTH = 3


class ModelError(RuntimeError):
    """Aborted forward pass (NaN activation) or malformed checkpoint."""


@dataclass
class ModelConfig:
    input_level: int = 5
    input_channels: int = 3
    encoder_channels: tuple = (32, 64, 128, 256)
    decoder_channels: tuple = (256, 128, 64)
    head_channels: int = 32
    n_classes: int = 2
    self_attention_heads: int = 1
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.decoder_channels = tuple(self.decoder_channels)
        if len(self.encoder_channels) != ENCODER_DEPTH:
            raise ValueError("encoder depth must be 4")
        if len(self.decoder_channels) != DECODER_DEPTH:
            raise ValueError("decoder depth must be 3")
        if self.input_level < ENCODER_DEPTH - 1:
            raise ValueError(
                f"input_level {self.input_level} too small: three pooling steps "
                f"need input_level >= {ENCODER_DEPTH - 1}")
        if min(self.encoder_channels + self.decoder_channels) < 1 or self.head_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.n_classes != 2:
            raise ValueError("only binary heads are supported")
        bott = self.encoder_channels[-1]
        if bott % self.self_attention_heads != 0:
            raise ValueError("self_attention_heads must divide the bottleneck width")

    @property
    def bottleneck_level(self) -> int:
        return self.input_level - (ENCODER_DEPTH - 1)


def desk_config(seed: int = 0) -> ModelConfig:
    """Half-width model on the 642-vertex sphere; trains in minutes on CPU."""
    return ModelConfig(input_level=3, encoder_channels=(16, 32, 64, 128),
                       decoder_channels=(128, 64, 32), head_channels=16, seed=seed)


def toy_config(seed: int = 0) -> ModelConfig:
    """Minimal-width model used by gradient checking."""
    return ModelConfig(input_level=3, encoder_channels=(3, 4, 5, 6),
                       decoder_channels=(6, 5, 4), head_channels=3, seed=seed)


STAGE_NAMES = ("encoder", "db1", "db2", "db3")


@dataclass
class StageOutput:
    name: str
    level: int
    feats: Tensor                 # (2V, M) stacked left/right
    attn: dict                    # hemi -> (V, 1) in [0, 1]
    raw_attn: Tensor              # (2V, 2) class-attention columns
    score: Tensor                 # (2,) stage logits


@dataclass
class ForwardResult:
    stages: list
    logits: Tensor                # (2,)
    head_features: Tensor         # (2V_in, head_channels), pre-GAP

    def stage(self, name: str) -> StageOutput:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def stage_scores(self) -> dict:
        out = {s.name: s.score for s in self.stages}
        out["final"] = self.logits
        return out


@dataclass
class ModelState:
    config: ModelConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)


def _uniform(rng, fan_in, shape):
    lim = np.sqrt(1.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape).astype(ad.default_dtype())


def init_state(config: ModelConfig) -> ModelState:
    """Deterministic parameter init from config.seed.

    Conv kernels are fan-in-scaled uniform, biases zero, self-attention
    projections identity plus small uniform noise.
    """
    rng = np.random.default_rng(config.seed)
    st = ModelState(config=config)
    p, b = st.params, st.buffers
    dt = ad.default_dtype()

    def param(name, value):
        p[name] = Tensor(value.astype(dt), requires_grad=True)

    c_in = config.input_channels
    for i, c_out in enumerate(config.encoder_channels, start=1):
        param(f"eb{i}.kernel", _uniform(rng, 7 * c_in, (7 * c_in, c_out)))
        param(f"eb{i}.bias", np.zeros(c_out))
        param(f"eb{i}.bn.scale", np.ones(c_out))
        param(f"eb{i}.bn.shift", np.zeros(c_out))
        b[f"eb{i}.bn.mean"] = np.zeros(c_out, dtype=dt)
        b[f"eb{i}.bn.var"] = np.ones(c_out, dtype=dt)
        c_in = c_out

    m0 = config.encoder_channels[-1]
    eye = np.eye(m0)
    for name in ("wq", "wk", "wv", "wo"):
        param(f"selfattn.{name}", eye + rng.uniform(-0.01, 0.01, size=(m0, m0)))

    param("head.encoder.w", _uniform(rng, m0, (m0, 2)))

    skip_channels = list(config.encoder_channels[:3][::-1])   # EB-3, EB-2, EB-1
    c_prev = m0
    for i, c_out in enumerate(config.decoder_channels, start=1):
        param(f"db{i}.up.w0", _uniform(rng, c_prev, (c_prev, c_out)))
        param(f"db{i}.up.w1", _uniform(rng, c_prev, (c_prev, c_out)))
        param(f"db{i}.up.bias", np.zeros(c_out))
        c_cat = c_out + skip_channels[i - 1]
        param(f"db{i}.fuse.kernel", _uniform(rng, 7 * c_cat, (7 * c_cat, c_out)))
        param(f"db{i}.fuse.bias", np.zeros(c_out))
        param(f"head.db{i}.w", _uniform(rng, c_out, (c_out, 2)))
        c_prev = c_out

    param("final.proj.w", _uniform(rng, c_prev, (c_prev, config.head_channels)))
    param("final.proj.b", np.zeros(config.head_channels))
    param("final.out.w", _uniform(rng, config.head_channels, (config.head_channels, 2)))
    return st


# stacked (two-hemisphere) index tables, cached on the mesh instance

def _stacked_ring(mesh: IcoMesh) -> np.ndarray:
    cached = getattr(mesh, "_stacked_ring", None)
    if cached is None:
        ring = mesh.ring1.astype(np.int64)
        cached = np.concatenate([ring, ring + mesh.n_vertices])
        object.__setattr__(mesh, "_stacked_ring", cached)
    return cached


def _stacked_pool(mesh: IcoMesh) -> np.ndarray:
    cached = getattr(mesh, "_stacked_pool", None)
    if cached is None:
        pool = mesh.pool_map.astype(np.int64)
        cached = np.concatenate([pool, pool + mesh.n_vertices])
        object.__setattr__(mesh, "_stacked_pool", cached)
    return cached


def _stacked_unpool(mesh: IcoMesh) -> np.ndarray:
    cached = getattr(mesh, "_stacked_unpool", None)
    if cached is None:
        up = mesh.unpool_map.astype(np.int64)
        v_c = vertex_count(mesh.level - 1)
        cached = np.concatenate([up, up + v_c])
        object.__setattr__(mesh, "_stacked_unpool", cached)
    return cached


def hex_conv(x: Tensor, mesh: IcoMesh, kernel: Tensor, bias: Tensor,
             stacked: bool = True) -> Tensor:
    """1-ring convolution: gather each vertex's ordered 7-slot ring,
    flatten, and apply a (7*Cin, Cout) linear map."""
    n_rows = 2 * mesh.n_vertices if stacked else mesh.n_vertices
    c_in = x.data.shape[1]
    if x.data.shape[0] != n_rows:
        raise ad.AutodiffError(
            f"hex_conv: features have {x.data.shape[0]} rows, mesh level "
            f"{mesh.level} expects {n_rows}")
    if kernel.data.shape[0] != 7 * c_in:
        raise ad.AutodiffError(
            f"hex_conv: kernel rows {kernel.data.shape[0]} != 7*{c_in}")
    ring = _stacked_ring(mesh) if stacked else mesh.ring1.astype(np.int64)
    gathered = ad.gather_rows(x, ring.reshape(-1))
    flat = ad.reshape(gathered, (n_rows, 7 * c_in))
    return ad.matmul(flat, kernel) + bias


def hex_max_pool(x: Tensor, mesh_fine: IcoMesh, stacked: bool = True) -> Tensor:
    if mesh_fine.pool_map.shape[0] == 0:
        raise ad.AutodiffError("hex_max_pool: level-0 mesh cannot be pooled")
    pool = _stacked_pool(mesh_fine) if stacked else mesh_fine.pool_map
    return ad.max_over_groups(x, pool)


def transposed_conv(x: Tensor, mesh_fine: IcoMesh, w0: Tensor, w1: Tensor,
                    bias: Tensor, stacked: bool = True) -> Tensor:
    """Upsample through the subdivision parents: every fine vertex takes a
    learnable combination of its 1 or 2 coarse parents (prefix vertices
    see themselves through both parent slots)."""
    if mesh_fine.unpool_map.shape[0] == 0:
        raise ad.AutodiffError("transposed_conv: level-0 mesh has no parents")
    up = _stacked_unpool(mesh_fine) if stacked else mesh_fine.unpool_map.astype(np.int64)
    p0 = ad.matmul(ad.gather_rows(x, up[:, 0]), w0)
    p1 = ad.matmul(ad.gather_rows(x, up[:, 1]), w1)
    return p0 + p1 + bias


def batch_norm(x: Tensor, scale_t: Tensor, shift_t: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, update_running: bool,
               momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the vertex axis of the stacked matrix.

    Training mode normalizes with the current statistics; inference uses
    the running averages, so repeated eval calls are reproducible.
    """
    if training:
        mu = ad.mean(x, axis=0, keepdims=True)
        centered = ad.sub(x, mu)
        var = ad.mean(ad.mul(centered, centered), axis=0, keepdims=True)
        inv = ad.powc(var + ad.const(eps), -0.5)
        normed = ad.mul(centered, inv)
        if update_running:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu.data.reshape(-1)
            running_var *= momentum
            running_var += (1.0 - momentum) * var.data.reshape(-1)
    else:
        mu = ad.const(running_mean[None, :])
        inv = ad.const(1.0 / np.sqrt(running_var[None, :] + eps))
        normed = ad.mul(ad.sub(x, mu), inv)
    return ad.mul(normed, scale_t) + shift_t


def _take_cols(x: Tensor, start: int, stop: int) -> Tensor:
    idx = np.arange(start, stop, dtype=np.int64)
    return ad.transpose(ad.gather_rows(ad.transpose(x), idx))


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                   n_heads: int = 1) -> Tensor:
    """Scaled dot-product attention over vertex tokens with a residual add."""
    m = x.data.shape[1]
    q = ad.matmul(x, wq)
    k = ad.matmul(x, wk)
    v = ad.matmul(x, wv)
    if n_heads == 1:
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(m))
        ctx = ad.matmul(ad.softmax(scores, axis=1), v)
    else:
        dh = m // n_heads
        parts = []
        for h in range(n_heads):
            qh = _take_cols(q, h * dh, (h + 1) * dh)
            kh = _take_cols(k, h * dh, (h + 1) * dh)
            vh = _take_cols(v, h * dh, (h + 1) * dh)
            sc = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
            parts.append(ad.matmul(ad.softmax(sc, axis=1), vh))
        ctx = ad.concat(parts, axis=1)
    return x + ad.matmul(ctx, wo)


def minmax_unit(x: Tensor) -> Tensor:
    """Min-max rescale a (V, 1) map to [0, 1]; constant maps become 0.5."""
    n = x.data.shape[0]
    grp = np.arange(n, dtype=np.int64)[None, :]
    mx = ad.max_over_groups(x, grp)
    mn = ad.scale(ad.max_over_groups(ad.scale(x, -1.0), grp), -1.0)
    span = ad.sub(mx, mn)
    if float(span.data) < 1e-12:
        return ad.const(np.full((n, 1), 0.5, dtype=x.data.dtype))
    return ad.mul(ad.sub(x, mn), ad.powc(span, -1.0))


def attention_head(feats: Tensor, w: Tensor, n_per_hemi: int):
    """Shared vertex-wise linear head: class-attention columns, stage
    logits from the GAP feature, and per-hemisphere normalized maps.

    The stage score s satisfies s[i] == mean over vertices of the raw
    attention column i, because GAP and the (bias-free) map commute.
    """
    a = ad.matmul(feats, w)                                    # (2V, 2)
    gap = ad.mean(feats, axis=0, keepdims=True)                # (1, M)
    score = ad.reshape(ad.matmul(gap, w), (2,))
    mix = ad.reshape(ad.softmax(ad.reshape(score, (1, 2)), axis=1), (2, 1))
    attn = {}
    for h_i, hemi in enumerate(HEMIS):
        idx = np.arange(h_i * n_per_hemi, (h_i + 1) * n_per_hemi, dtype=np.int64)
        a_h = ad.gather_rows(a, idx)
        attn[hemi] = minmax_unit(ad.matmul(a_h, mix))
    return a, score, attn


def _stack_attn(attn: dict) -> Tensor:
    return ad.concat([attn["lh"], attn["rh"]], axis=0)


def _nan_guard(t: Tensor, stage: str) -> None:
    if np.isnan(t.data).any():
        raise ModelError(f"NaN activation in stage {stage}")


def forward(state: ModelState, features: dict, meshes: dict,
            training: bool = False, update_running=None) -> ForwardResult:
    """Run the full network on one subject.

    features maps "lh"/"rh" to (V, 3) arrays at config.input_level;
    meshes maps level -> IcoMesh and must cover the encoder pyramid.
    `update_running=False` with training=True makes the pass a pure
    function (used by gradient checking).
    """
    cfg = state.config
    p = state.params
    buf = state.buffers
    if update_running is None:
        update_running = training
    lv_in = cfg.input_level

    lh = features["lh"].data if isinstance(features["lh"], Tensor) else features["lh"]
    rh = features["rh"].data if isinstance(features["rh"], Tensor) else features["rh"]
    if lh.shape != rh.shape or lh.shape[0] != meshes[lv_in].n_vertices:
        raise ModelError(
            f"input features must be (V, C) per hemisphere at level {lv_in}")
    x = ad.const(np.concatenate([lh, rh]).astype(ad.default_dtype()))

    skips = {}
    for i in range(1, ENCODER_DEPTH + 1):
        level = lv_in - (i - 1)
        mesh = meshes[level]
        x = hex_conv(x, mesh, p[f"eb{i}.kernel"], p[f"eb{i}.bias"])
        x = batch_norm(x, p[f"eb{i}.bn.scale"], p[f"eb{i}.bn.shift"],
                       buf[f"eb{i}.bn.mean"], buf[f"eb{i}.bn.var"],
                       training, update_running)
        x = ad.relu(x)
        _nan_guard(x, f"eb{i}")
        if i < ENCODER_DEPTH:
            skips[level] = x
            x = hex_max_pool(x, mesh)

    x = self_attention(x, p["selfattn.wq"], p["selfattn.wk"], p["selfattn.wv"],
                       p["selfattn.wo"], cfg.self_attention_heads)
    _nan_guard(x, "selfattn")

    stages = []
    lv = cfg.bottleneck_level
    raw, score, attn = attention_head(x, p["head.encoder.w"], meshes[lv].n_vertices)
    _nan_guard(score, "encoder head")
    stages.append(StageOutput("encoder", lv, x, attn, raw, score))

    prev = stages[0]
    for i in range(1, DECODER_DEPTH + 1):
        lv_fine = cfg.bottleneck_level + i
        mesh_fine = meshes[lv_fine]
        gated = ad.mul(_stack_attn(prev.attn), prev.feats)
        up = transposed_conv(gated, mesh_fine, p[f"db{i}.up.w0"],
                             p[f"db{i}.up.w1"], p[f"db{i}.up.bias"])
        cat = ad.concat([up, skips[lv_fine]], axis=1)
        fused = hex_conv(cat, mesh_fine, p[f"db{i}.fuse.kernel"], p[f"db{i}.fuse.bias"])
        _nan_guard(fused, f"db{i}")
        raw, score, attn = attention_head(fused, p[f"head.db{i}.w"],
                                          mesh_fine.n_vertices)
        _nan_guard(score, f"db{i} head")
        prev = StageOutput(f"db{i}", lv_fine, fused, attn, raw, score)
        stages.append(prev)

    final_gated = ad.mul(_stack_attn(prev.attn), prev.feats)
    head = ad.relu(ad.matmul(final_gated, p["final.proj.w"]) + p["final.proj.b"])
    gap = ad.mean(head, axis=0, keepdims=True)
    logits = ad.reshape(ad.matmul(gap, p["final.out.w"]), (2,))
    _nan_guard(logits, "final")
    return ForwardResult(stages=stages, logits=logits, head_features=head)


def predict(state: ModelState, features: dict, meshes: dict):
    """Inference-mode class decision. Returns (label, logit values)."""
    res = forward(state, features, meshes, training=False)
    z = res.logits.data
    return int(np.argmax(z)), z.copy()


# checkpoint format: magic, version u32, count u32, then per tensor:
# u32 name length, UTF-8 name, u32 rank, u32 extents, f32 LE payload;
# then u32 optimizer flag; if set: u32 step, u32 count, same records.

def _write_record(parts, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    parts.append(struct.pack("<I", len(raw)))
    parts.append(raw)
    parts.append(struct.pack("<I", arr.ndim))
    parts.append(np.asarray(arr.shape, dtype="<u4").tobytes())
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, state: ModelState, adam: AdamState | None = None) -> None:
    parts = [struct.pack("<4sI", CKPT_MAGIC, CKPT_VERSION)]
    records = [(k, v.data) for k, v in state.params.items()]
    records += [(f"buffer.{k}", v) for k, v in state.buffers.items()]
    parts.append(struct.pack("<I", len(records)))
    for name, arr in records:
        _write_record(parts, name, arr)
    if adam is None:
        parts.append(struct.pack("<I", 0))
    else:
        parts.append(struct.pack("<I", 1))
        parts.append(struct.pack("<I", adam.step))
        moments = [(f"adam.m.{k}", v) for k, v in adam.m.items()]
        moments += [(f"adam.v.{k}", v) for k, v in adam.v.items()]
        parts.append(struct.pack("<I", len(moments)))
        for name, arr in moments:
            _write_record(parts, name, arr)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.raw):
            raise ModelError(f"{self.path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, self.raw, self.off)
        self.off += size
        return vals if len(vals) > 1 else vals[0]

    def record(self):
        n = self.take("<I")
        if self.off + n > len(self.raw):
            raise ModelError(f"{self.path}: truncated checkpoint")
        name = self.raw[self.off:self.off + n].decode("utf-8")
        self.off += n
        rank = self.take("<I")
        shape = tuple(self.take("<" + "I" * rank)) if rank else ()
        if rank == 1:
            shape = (shape,) if isinstance(shape, int) else shape
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if self.off + nbytes > len(self.raw):
            raise ModelError(f"{self.path}: truncated checkpoint")
        arr = np.frombuffer(self.raw, dtype="<f4", count=count,
                            offset=self.off).reshape(shape).copy()
        self.off += nbytes
        return name, arr


def load_checkpoint(path, config: ModelConfig):
    """Rebuild a ModelState (and optional AdamState) from an NEXC file.

    Shapes are validated against a template initialized from `config`.
    """
    raw = Path(path).read_bytes()
    rd = _Reader(raw, path)
    magic, version = rd.take("<4sI")
    if magic != CKPT_MAGIC:
        raise ModelError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    state = init_state(config)
    expected = set(state.params) | {f"buffer.{k}" for k in state.buffers}
    count = rd.take("<I")
    seen = set()
    dt = ad.default_dtype()
    for _ in range(count):
        name, arr = rd.record()
        seen.add(name)
        if name.startswith("buffer."):
            key = name[len("buffer."):]
            if key not in state.buffers or state.buffers[key].shape != arr.shape:
                raise ModelError(f"{path}: unexpected buffer {name!r}")
            state.buffers[key] = arr.astype(dt)
        else:
            if name not in state.params or state.params[name].data.shape != arr.shape:
                raise ModelError(f"{path}: unexpected tensor {name!r}")
            state.params[name].data = arr.astype(dt)
    if seen != expected:
        missing = sorted(expected - seen)
        raise ModelError(f"{path}: checkpoint does not match config "
                         f"(missing {missing[:3]}...)" if missing else
                         f"{path}: checkpoint has extra tensors")
    flag = rd.take("<I")
    adam = None
    if flag:
        adam = adam_init(state.params)
        adam.step = rd.take("<I")
        n_moments = rd.take("<I")
        for _ in range(n_moments):
            name, arr = rd.record()
            if name.startswith("adam.m."):
                adam.m[name[len("adam.m."):]] = arr.astype(dt)
            elif name.startswith("adam.v."):
                adam.v[name[len("adam.v."):]] = arr.astype(dt)
            else:
                raise ModelError(f"{path}: unexpected optimizer tensor {name!r}")
    return state, adam
