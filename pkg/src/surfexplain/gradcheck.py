"""Gradient-integrity harness: every layer and every loss term against
central finite differences, plus the full model on the toy config."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .icomesh import mesh_pyramid
from .losses import LossConfig, batch_loss, consistency_loss, contrast_loss, entropy_loss
from .model import (attention_head, batch_norm, forward, hex_conv, hex_max_pool,
                    init_state, self_attention, toy_config, transposed_conv)

TOLERANCE = 1e-4
FD_STEP = 1e-5


def _proj_loss(out: Tensor, rng) -> Tensor:
    return ad.sum_(ad.mul(out, ad.const(rng.normal(size=out.data.shape))))


def check_layers(rng=None):
    """Isolated layer checks on level-0/1 meshes. Yields (name, report)."""
    rng = rng or np.random.default_rng(11)
    meshes = mesh_pyramid(1)
    m1, m0 = meshes[1], meshes[0]
    v1, v0 = m1.n_vertices, m0.n_vertices

    x = Tensor(rng.normal(size=(2 * v1, 3)), requires_grad=True)
    kernel = Tensor(rng.normal(size=(21, 4)) * 0.3, requires_grad=True)
    bias = Tensor(rng.normal(size=4) * 0.1, requires_grad=True)
    yield "hex_conv", grad_check(
        lambda: _proj_loss(hex_conv(x, m1, kernel, bias), np.random.default_rng(0)),
        {"x": x, "kernel": kernel, "bias": bias}, FD_STEP, TOLERANCE)

    xp = Tensor(rng.normal(size=(2 * v1, 3)), requires_grad=True)
    yield "hex_max_pool", grad_check(
        lambda: _proj_loss(hex_max_pool(xp, m1), np.random.default_rng(1)),
        {"x": xp}, FD_STEP, TOLERANCE)

    xt = Tensor(rng.normal(size=(2 * v0, 3)), requires_grad=True)
    w0 = Tensor(rng.normal(size=(3, 4)) * 0.4, requires_grad=True)
    w1 = Tensor(rng.normal(size=(3, 4)) * 0.4, requires_grad=True)
    bt = Tensor(rng.normal(size=4) * 0.1, requires_grad=True)
    yield "transposed_conv", grad_check(
        lambda: _proj_loss(transposed_conv(xt, m1, w0, w1, bt),
                           np.random.default_rng(2)),
        {"x": xt, "w0": w0, "w1": w1, "bias": bt}, FD_STEP, TOLERANCE)

    xa = Tensor(rng.normal(size=(2 * v0, 6)), requires_grad=True)
    attn_params = {"x": xa}
    for name in ("wq", "wk", "wv", "wo"):
        attn_params[name] = Tensor(np.eye(6) + rng.normal(size=(6, 6)) * 0.1,
                                   requires_grad=True)
    yield "self_attention", grad_check(
        lambda: _proj_loss(self_attention(xa, attn_params["wq"], attn_params["wk"],
                                          attn_params["wv"], attn_params["wo"]),
                           np.random.default_rng(3)),
        attn_params, FD_STEP, TOLERANCE)

    xh = Tensor(rng.normal(size=(2 * v1, 5)), requires_grad=True)
    wh = Tensor(rng.normal(size=(5, 2)) * 0.5, requires_grad=True)

    def head_loss():
        raw, score, attn = attention_head(xh, wh, v1)
        pieces = [ad.sum_(ad.mul(score, ad.const(np.array([0.7, -1.3]))))]
        gen = np.random.default_rng(4)
        for hemi in ("lh", "rh"):
            pieces.append(_proj_loss(attn[hemi], gen))
        total = pieces[0]
        for t in pieces[1:]:
            total = ad.add(total, t)
        return total

    yield "attention_head", grad_check(head_loss, {"x": xh, "w": wh},
                                       FD_STEP, TOLERANCE)

    xb = Tensor(rng.normal(size=(2 * v1, 4)) * 2.0 + 0.5, requires_grad=True)
    sc = Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)
    sh = Tensor(rng.normal(size=4) * 0.2, requires_grad=True)
    run_m = np.zeros(4)
    run_v = np.ones(4)
    yield "batch_norm", grad_check(
        lambda: _proj_loss(batch_norm(xb, sc, sh, run_m, run_v,
                                      training=True, update_running=False),
                           np.random.default_rng(5)),
        {"x": xb, "scale": sc, "shift": sh}, FD_STEP, TOLERANCE)


def check_losses(rng=None):
    """Loss-term checks on synthetic attention/feature tensors."""
    rng = rng or np.random.default_rng(23)
    meshes = mesh_pyramid(2)
    v = 30

    pos = [(Tensor(rng.uniform(0.1, 0.9, size=(v, 1)), requires_grad=True),
            Tensor(rng.normal(size=(v, 4)), requires_grad=True)) for _ in range(2)]
    neg = [(Tensor(rng.uniform(0.1, 0.9, size=(v, 1)), requires_grad=True),
            Tensor(rng.normal(size=(v, 4)), requires_grad=True)) for _ in range(2)]
    params = {}
    for i, (a, f) in enumerate(pos):
        params[f"pos{i}.attn"] = a
        params[f"pos{i}.feats"] = f
    for i, (a, f) in enumerate(neg):
        params[f"neg{i}.attn"] = a
        params[f"neg{i}.feats"] = f
    yield "contrast_loss", grad_check(
        lambda: contrast_loss(pos, neg, margin=1.0)[0], params, FD_STEP, TOLERANCE)

    pa = [Tensor(rng.uniform(0.1, 0.9, size=(v, 1)), requires_grad=True)
          for _ in range(2)]
    na = [Tensor(rng.uniform(0.1, 0.9, size=(v, 1)), requires_grad=True)
          for _ in range(2)]
    eparams = {f"pos{i}": a for i, a in enumerate(pa)}
    eparams.update({f"neg{i}": a for i, a in enumerate(na)})
    yield "entropy_loss", grad_check(
        lambda: entropy_loss(pa, na, "as_written")[0], eparams, FD_STEP, TOLERANCE)

    stage_attn = []
    cparams = {}
    for lv in (0, 1, 2):
        maps = {}
        for hemi in ("lh", "rh"):
            t = Tensor(rng.uniform(0.0, 1.0, size=(meshes[lv].n_vertices, 1)),
                       requires_grad=True)
            maps[hemi] = t
            cparams[f"lv{lv}.{hemi}"] = t
        stage_attn.append((lv, maps))
    yield "consistency_loss", grad_check(
        lambda: consistency_loss(stage_attn, meshes), cparams, FD_STEP, TOLERANCE)


def check_full_model(seed: int = 3):
    """The complete objective (all four terms) on the toy model: finite
    differences over every parameter."""
    cfg = toy_config(seed=seed)
    meshes = mesh_pyramid(cfg.input_level)
    state = init_state(cfg)
    rng = np.random.default_rng(seed + 100)
    v = meshes[cfg.input_level].n_vertices
    batch_inputs = []
    for label in (1, 0):
        feats = {"lh": rng.normal(size=(v, 3)), "rh": rng.normal(size=(v, 3))}
        batch_inputs.append((feats, label))
    loss_cfg = LossConfig()

    def f():
        results = []
        for feats, label in batch_inputs:
            res = forward(state, feats, meshes, training=True, update_running=False)
            results.append((res, label))
        total, _ = batch_loss(results, loss_cfg, meshes)
        return total

    return grad_check(f, state.params, FD_STEP, TOLERANCE)


def run_gradcheck(full_model: bool = True, emit=print):
    """Run the whole harness; returns (all_passed, results list)."""
    results = []
    for name, report in check_layers():
        results.append((name, report))
        emit(f"{'PASS' if report.passed else 'FAIL'}  {name:<18} "
             f"max_rel_err={report.max_error:.3e}")
    for name, report in check_losses():
        results.append((name, report))
        emit(f"{'PASS' if report.passed else 'FAIL'}  {name:<18} "
             f"max_rel_err={report.max_error:.3e}")
    if full_model:
        report = check_full_model()
        results.append(("full_model_total", report))
        emit(f"{'PASS' if report.passed else 'FAIL'}  {'full_model_total':<18} "
             f"max_rel_err={report.max_error:.3e}")
    return all(r.passed for _, r in results), results
