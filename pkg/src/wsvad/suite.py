"""The full finite-difference verification suite: every layer primitive
and every composite block, checked across several seeds at tiny sizes
in float64.  Backs the ``gradcheck`` CLI command.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses as ls
from . import memory as mem
from . import model as md
from .attention import (MultiHeadParams, TcaParams, TransformerBlockParams,
                        attention, gl_mhsa_forward, multi_head, tca_forward,
                        transformer_block, dpe_matrix)
from .gradcheck import CheckResult, check_gradients

F64 = np.float64

TINY_DIMS = {"rgb_i3d": 12, "clip": 10, "flow_i3d": 12, "audio_vggish": 6}


def _leaf(rng, shape, scale=1.0):
    return ad.tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=F64)


def _tiny_detector(seed: int) -> tuple[md.Detector, dict]:
    cfg = md.ModelConfig(streams=("rgb", "flow", "audio"), input_dims=TINY_DIMS,
                         d_model=8, heads=2, radius=2, dropout=0.0, clf_kernel=2,
                         mem_slots=3, ffn_mult=2, noise_std=0.0)
    det = md.Detector.build(cfg, seed=seed, dtype=F64)
    rng = np.random.default_rng(seed + 1000)
    feats = {k: rng.normal(size=(4, d)) for k, d in TINY_DIMS.items()}
    return det, feats


def _primitive_checks(seed: int, rng) -> list[CheckResult]:
    checks = []

    a = _leaf(rng, (4, 3))
    b = _leaf(rng, (3, 5))
    checks.append(check_gradients("matmul", lambda: ad.matmul(a, b).sum(), [a, b], rng))

    x = _leaf(rng, (4, 6))
    w = rng.normal(size=(4, 6))
    checks.append(check_gradients(
        "softmax_rows", lambda: ad.mul(ad.softmax_rows(x), w).sum(), [x], rng))

    for op in (ad.sigmoid, ad.relu, ad.gelu, ad.exp, ad.absolute):
        y = _leaf(rng, (4, 4))
        wy = rng.normal(size=(4, 4))
        checks.append(check_gradients(
            op.__name__, lambda op=op, y=y, wy=wy: ad.mul(op(y), wy).sum(), [y], rng))

    pos = ad.tensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True, dtype=F64)
    checks.append(check_gradients("log", lambda: ad.log(pos).sum(), [pos], rng))
    checks.append(check_gradients("sqrt", lambda: ad.sqrt(pos).sum(), [pos], rng))

    cl = ad.tensor(rng.uniform(0.2, 0.8, size=(3, 4)), requires_grad=True, dtype=F64)
    checks.append(check_gradients(
        "clamp", lambda: ad.log(ad.clamp(cl, 1e-7, 1 - 1e-7)).sum(), [cl], rng))

    ln_x = _leaf(rng, (4, 5))
    gain = _leaf(rng, (5,))
    bias = _leaf(rng, (5,))
    wl = rng.normal(size=(4, 5))
    checks.append(check_gradients(
        "layer_norm", lambda: ad.mul(ad.layer_norm(ln_x, gain, bias), wl).sum(),
        [ln_x, gain, bias], rng))

    nx = _leaf(rng, (4, 5))
    checks.append(check_gradients(
        "l2_normalize_rows", lambda: ad.mul(ad.l2_normalize_rows(nx), wl).sum(), [nx], rng))
    checks.append(check_gradients(
        "row_norms", lambda: ad.mul(ad.row_norms(nx), wl[:, 0]).sum(), [nx], rng))

    cx = _leaf(rng, (6, 3))
    ck = _leaf(rng, (3, 3, 2))
    wc = rng.normal(size=(6, 2))
    checks.append(check_gradients(
        "conv1d", lambda: ad.mul(ad.conv1d(cx, ck), wc).sum(), [cx, ck], rng))
    checks.append(check_gradients(
        "conv1d_causal", lambda: ad.mul(ad.conv1d(cx, ck, causal=True), wc).sum(),
        [cx, ck], rng))

    dx = _leaf(rng, (5, 5))
    checks.append(check_gradients(
        "dropout", lambda: ad.dropout(dx, 0.4, True, np.random.default_rng(seed + 7)).sum(),
        [dx], rng))

    sa = _leaf(rng, (3, 4))
    sb = _leaf(rng, (3, 2))

    def structural():
        cat = ad.concat([sa, sb], axis=1)
        sel = ad.gather_rows(cat, [0, 2, 1])
        return ad.slice_rows(ad.pad_rows(sel, 1, 1), 0, 4).mean()

    checks.append(check_gradients("gather/concat/pad", structural, [sa, sb], rng))

    ra = _leaf(rng, (4, 5))
    row = _leaf(rng, (5,))

    def broadcast_reduce():
        y = ad.mul(ad.add(ra, row), ad.sigmoid(row))
        return ad.add(ad.mean_axis(y, axis=1).sum(), ad.sum_axis(y, axis=0).mean())

    checks.append(check_gradients("broadcast/reduce", broadcast_reduce, [ra, row], rng))
    return checks


def _block_checks(seed: int, rng) -> list[CheckResult]:
    checks = []

    q, k, v = (_leaf(rng, (4, 3)) for _ in range(3))
    wq = rng.normal(size=(4, 3))
    checks.append(check_gradients(
        "attention", lambda: ad.mul(attention(q, k, v), wq).sum(), [q, k, v], rng))

    gamma = _leaf(rng, (), scale=0.5)
    beta = _leaf(rng, (), scale=0.5)
    wd = rng.normal(size=(5, 5))
    checks.append(check_gradients(
        "dpe_matrix", lambda: ad.mul(dpe_matrix(5, gamma, beta), wd).sum(),
        [gamma, beta], rng))

    mh = MultiHeadParams.init(np.random.default_rng(seed), 6, 2, dtype=F64)
    mx = _leaf(rng, (4, 6))
    wm = rng.normal(size=(4, 6))
    mh_leaves = [mx] + [t for _, t in mh.named("mh")]
    checks.append(check_gradients(
        "multi_head", lambda: ad.mul(multi_head(mx, mh), wm).sum(), mh_leaves, rng,
        max_coords_per_leaf=8))
    checks.append(check_gradients(
        "gl_mhsa", lambda: ad.mul(gl_mhsa_forward(mx, mh, 1), wm).sum(), mh_leaves, rng,
        max_coords_per_leaf=8))

    tca = TcaParams.init(np.random.default_rng(seed), 6, radius=2, dtype=F64)
    tx = _leaf(rng, (4, 6))
    tca_leaves = [tx] + [t for _, t in tca.named("tca")]
    checks.append(check_gradients(
        "tca_forward", lambda: ad.mul(tca_forward(tx, tca), wm).sum(), tca_leaves, rng,
        max_coords_per_leaf=8))

    blk = TransformerBlockParams.init(np.random.default_rng(seed), 6, 2, ffn_mult=2, dtype=F64)
    bx = _leaf(rng, (4, 6))
    blk_leaves = [bx] + [t for _, t in blk.named("blk")]
    checks.append(check_gradients(
        "transformer_block", lambda: ad.mul(transformer_block(bx, blk), wm).sum(),
        blk_leaves, rng, max_coords_per_leaf=8))

    bank = mem.MemoryBank.init(np.random.default_rng(seed), 3, 5, "normal", dtype=F64)
    bank.slots.data[...] = rng.normal(size=(3, 5))
    mrx = _leaf(rng, (4, 5))
    wr = rng.normal(size=(4, 5))

    def read_loss():
        sims, aug = mem.memory_read(mrx, bank)
        return ad.add(ad.mul(aug, wr).sum(), sims.mean())

    checks.append(check_gradients("memory_read", read_loss, [mrx, bank.slots], rng))

    nul = mem.NulParams.init(np.random.default_rng(seed), 5, dtype=F64)
    nx = _leaf(rng, (4, 5))
    nul_leaves = [nx] + [t for _, t in nul.named("nul")]

    def nul_loss():
        z, kl = mem.nul_forward(nx, nul, np.random.default_rng(seed + 3), training=True)
        return ad.add(ad.mul(z, wr).sum(), kl)

    checks.append(check_gradients("nul_forward", nul_loss, nul_leaves, rng))

    raw = _leaf(rng, (5, 3))

    def dm_loss():
        sims = ad.sigmoid(raw)
        scores = mem.DualMemoryScores(s_nn=[sims], s_aa=[sims])
        return mem.dual_memory_loss(scores, top_k=2)

    checks.append(check_gradients("dual_memory_loss", dm_loss, [raw], rng))

    dmu = mem.UrdmuParams.init(np.random.default_rng(seed), 6, 2, radius=1,
                               n_slots=3, dtype=F64)
    ux = _leaf(rng, (4, 6))
    dmu_leaves = [ux] + [t for _, t in dmu.named("dmu")]

    def dmu_loss():
        feats, aux = mem.urdmu_forward(ux, dmu, np.random.default_rng(seed + 4),
                                       training=True)
        return ad.add(ad.mul(feats, wm).sum(), ad.add(aux.kl, aux.sims_normal.mean()))

    checks.append(check_gradients("urdmu_forward", dmu_loss, dmu_leaves, rng,
                                  max_coords_per_leaf=6))

    sx = _leaf(rng, (6, 4))
    wn = rng.normal(size=(3, 4))

    def nominate_loss():
        _, sel = md.topk_nominate(sx, 0.5, 0.0, np.random.default_rng(0), training=True)
        return ad.mul(sel, wn).sum()

    checks.append(check_gradients("topk_nominate", nominate_loss, [sx], rng))

    mil_raw = _leaf(rng, (6,))
    checks.append(check_gradients(
        "mil_bag_loss",
        lambda: ls.mil_bag_loss(ad.sigmoid(mil_raw), label=1, bag_topk=2), [mil_raw], rng))

    nf = _leaf(rng, (4, 3))
    af = ad.tensor(rng.normal(size=(4, 3)) * 1.5, requires_grad=True, dtype=F64)
    checks.append(check_gradients(
        "magnitude_contrast",
        lambda: ls.magnitude_contrast_loss(nf, af, k=2, margin=10.0), [nf, af], rng))

    st = _leaf(rng, (5,))
    teacher = rng.uniform(0.1, 0.9, size=5)
    checks.append(check_gradients(
        "distill_loss", lambda: ls.distill_loss(ad.sigmoid(st), teacher), [st], rng))
    return checks


def _stream_checks(seed: int, rng) -> list[CheckResult]:
    det, feats = _tiny_detector(seed)
    cfg = det.cfg
    t = 4
    checks = []
    loop_rng = lambda: np.random.default_rng(seed + 5)

    clip = ad.tensor(feats["clip"], requires_grad=True, dtype=F64)
    i3d = ad.tensor(feats["rgb_i3d"], requires_grad=True, dtype=F64)
    rgb_leaves = [clip, i3d] + [p for _, p in det.rgb.named("rgb")]
    w1 = rng.normal(size=(t, cfg.d_model))

    def stage123():
        f1, x_tca = md.rgb_stage1(clip, i3d, det.rgb, cfg, loop_rng(), training=True)
        x_c = det.rgb.xc_proj(x_tca)
        f2, aux = md.rgb_stage2(f1, x_c, det.rgb, cfg, loop_rng(), training=True)
        out = md.rgb_stage3(f2, det.rgb, cfg, loop_rng(), training=True)
        return ad.add(ad.mul(out, w1).sum(), aux.kl)

    checks.append(check_gradients("rgb_stream(1+2+3)", stage123, rgb_leaves, rng,
                                  max_coords_per_leaf=4))

    fx = ad.tensor(feats["flow_i3d"], requires_grad=True, dtype=F64)
    flow_leaves = [fx] + [p for _, p in det.flow.named("flow")]
    checks.append(check_gradients(
        "flow_stream", lambda: ad.mul(md.flow_stream(fx, det.flow), w1).sum(),
        flow_leaves, rng, max_coords_per_leaf=6))

    ax = ad.tensor(feats["audio_vggish"], requires_grad=True, dtype=F64)
    audio_leaves = [ax] + [p for _, p in det.audio.named("audio")]
    checks.append(check_gradients(
        "audio_stream", lambda: ad.mul(md.audio_stream(ax, det.audio), w1).sum(),
        audio_leaves, rng, max_coords_per_leaf=6))

    sr = np.random.default_rng(seed + 6)
    stream_vals = {s: ad.tensor(sr.normal(size=(t, cfg.d_model)), requires_grad=True,
                                dtype=F64) for s in cfg.streams}
    fuse_leaves = list(stream_vals.values()) + [p for _, p in det.fusion.named("fusion")]
    wf = rng.normal(size=t)

    def fuse_classify():
        fused = md.gated_fuse(stream_vals, det.fusion)
        return ad.mul(md.classify(fused, det.fusion), wf).sum()

    checks.append(check_gradients("gated_fuse+classify", fuse_classify, fuse_leaves, rng,
                                  max_coords_per_leaf=6))

    wm = rng.normal(size=t)

    def full_model():
        out = det.forward_video(feats, training=True, rng=np.random.default_rng(seed + 2))
        loss = ad.mul(out.scores, wm).sum()
        mil = ls.mil_bag_loss(out.scores, label=1, bag_topk=2, pool_idx=out.selected_idx)
        dm = mem.dual_memory_loss(mem.DualMemoryScores(
            s_an=[out.dm_aux.sims_normal], s_aa=[out.dm_aux.sims_abnormal]), top_k=2)
        return ad.add(ad.add(loss, mil), ad.add(dm, out.dm_aux.kl))

    checks.append(check_gradients("full_model+losses", full_model, det.parameters(), rng,
                                  max_coords_per_leaf=3))
    return checks


def run_suite(seeds: int = 5, base_seed: int = 0) -> list[CheckResult]:
    """Run every check for each seed; results carry pass/fail lines."""
    results: list[CheckResult] = []
    for s in range(seeds):
        seed = base_seed + s
        rng = np.random.default_rng(seed)
        for res in (_primitive_checks(seed, rng) + _block_checks(seed, rng)
                    + _stream_checks(seed, rng)):
            res.name = f"{res.name}[seed {seed}]"
            results.append(res)
    return results
