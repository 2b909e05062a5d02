import math

import numpy as np
import pytest

from vlgraph import model as md
from vlgraph import tensor as tn
from vlgraph.graph import Clip, FrameNode, SubtitleLine
from vlgraph.model import (
    FrozenDecisions,
    ModelConfig,
    extract_queries,
    forward,
    init_params,
    inter_modal_step,
    intra_modal_step,
    predict_global,
    refine_segment,
    reason_over_segments,
    segment_pool,
    simulate_halting,
    temporal_pool,
)
from vlgraph.tensor import Tensor, grad_check


def cfg_of(d=4, **kw):
    return ModelConfig(dim=d, **kw)


def params_of(rng, d=4, d_v=3, d_s=3, d_h=3):
    return init_params(cfg_of(d), d_v, d_s, d_h, rng)


def zero_group(ps, name):
    ps[f"{name}.w"].data[:] = 0.0
    if f"{name}.b" in ps:
        ps[f"{name}.b"].data[:] = 0.0


def make_clip(rng, d_v=3, d_s=3, d_h=3, n_segments=2, frames_per=2, tokens_per=2,
              clauses=3, clip_id="toy"):
    frames, subs = [], []
    for i in range(n_segments):
        t0 = 2.0 * i
        subs.append(SubtitleLine(t0=t0, t1=t0 + 2.0,
                                 tokens=rng.standard_normal((tokens_per, d_s))))
        for k in range(frames_per):
            frames.append(FrameNode(t=t0 + 0.3 + k * 0.5, feature=rng.standard_normal(d_v)))
    return Clip(clip_id=clip_id, frames=frames, subs=subs,
                statement=rng.standard_normal((d_h, clauses)), label=1)


# ------------------------------------------------- independent numpy oracle

def np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_row_softmax(a):
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def ref_gate(w, b, g_left, X, g_right):
    n = X.shape[1]
    stacked = np.vstack([np.repeat(g_left, n, axis=1), X, np.repeat(g_right, n, axis=1)])
    return np_sigmoid(w @ stacked + b)


def ref_inter(V, S, p):
    g_v = V.mean(axis=1, keepdims=True)
    g_s = S.mean(axis=1, keepdims=True)
    raw = V.T @ S
    msg_v = S @ np_row_softmax(raw).T
    msg_s = V @ np_row_softmax(raw.T).T
    c_v = ref_gate(p["inter.v.w"].data, p["inter.v.b"].data, g_v, V, g_s)
    c_s = ref_gate(p["inter.s.w"].data, p["inter.s.b"].data, g_s, S, g_v)
    return (1 - c_v) * V + c_v * msg_v, (1 - c_s) * S + c_s * msg_s


def ref_intra(X, p, name):
    g = X.mean(axis=1, keepdims=True)
    msg = X @ np_row_softmax(X.T @ X).T
    c = ref_gate(p[f"{name}.w"].data, p[f"{name}.b"].data, g, X, g)
    return (1 - c) * X + c * msg


def ref_pool(V, S, q, p):
    attn_v = np_row_softmax((V.T @ (p["pool.attn_v.w"].data @ q)).T).T
    attn_s = np_row_softmax((S.T @ (p["pool.attn_s.w"].data @ q)).T).T
    v_q, s_q = V @ attn_v, S @ attn_s
    stacked = np.vstack([V.mean(axis=1, keepdims=True), q, S.mean(axis=1, keepdims=True)])
    gate = np_sigmoid(p["pool.fuse.w"].data @ stacked + p["pool.fuse.b"].data)
    return (1 - gate) * v_q + gate * s_q


# ------------------------------------------------------------- cross-modal

def test_inter_modal_zero_weights_average():
    rng = np.random.default_rng(0)
    ps = params_of(rng)
    zero_group(ps, "inter.v")
    zero_group(ps, "inter.s")
    V = Tensor(rng.standard_normal((4, 3)))
    S = Tensor(rng.standard_normal((4, 2)))
    V2, S2, info = inter_modal_step(V, S, ps, cfg_of())
    assert np.allclose(info["inter_gate_v"], 0.5)
    assert np.allclose(V2.data, (V.data + info["inter_msg_v"]) / 2.0, atol=1e-14)
    assert np.allclose(S2.data, (S.data + info["inter_msg_s"]) / 2.0, atol=1e-14)


def test_inter_modal_single_subtitle_token():
    rng = np.random.default_rng(1)
    ps = params_of(rng)
    V = Tensor(rng.standard_normal((4, 3)))
    S = Tensor(rng.standard_normal((4, 1)))
    _, _, info = inter_modal_step(V, S, ps, cfg_of())
    assert np.allclose(info["inter_adj_v"], np.ones((3, 1)))
    assert np.allclose(info["inter_msg_v"], np.repeat(S.data, 3, axis=1))


def test_inter_modal_hand_instance():
    # d=2, one visual node (1,0), subtitle nodes (1,0) and (0,1)
    rng = np.random.default_rng(2)
    ps = init_params(cfg_of(2), 2, 2, 2, rng)
    V = Tensor([[1.0], [0.0]])
    S = Tensor([[1.0, 0.0], [0.0, 1.0]])
    _, _, info = inter_modal_step(V, S, ps, cfg_of(2))
    e = math.e
    assert np.allclose(info["inter_adj_v"], [[e / (e + 1), 1 / (e + 1)]], atol=1e-12)
    assert np.allclose(info["inter_msg_v"].ravel(), [0.7310586, 0.2689414], atol=1e-6)


def test_inter_modal_matches_reference_oracle():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        ps = params_of(rng)
        V = Tensor(rng.standard_normal((4, 3)))
        S = Tensor(rng.standard_normal((4, 2)))
        V2, S2, _ = inter_modal_step(V, S, ps, cfg_of())
        rv, rs = ref_inter(V.data, S.data, ps)
        assert np.allclose(V2.data, rv, atol=1e-12)
        assert np.allclose(S2.data, rs, atol=1e-12)


# ------------------------------------------------------------- intra-modal

def test_intra_modal_single_node_fixed_point():
    rng = np.random.default_rng(3)
    ps = params_of(rng)
    X = Tensor(rng.standard_normal((4, 1)))
    X2, info = intra_modal_step(X, ps, "intra.v", cfg_of())
    assert np.allclose(X2.data, X.data, atol=1e-14)
    assert np.allclose(info["adj"], [[1.0]])


def test_intra_modal_zero_weights_average():
    rng = np.random.default_rng(4)
    ps = params_of(rng)
    zero_group(ps, "intra.s")
    X = Tensor(rng.standard_normal((4, 3)))
    X2, info = intra_modal_step(X, ps, "intra.s", cfg_of())
    assert np.allclose(X2.data, (X.data + info["msg"]) / 2.0, atol=1e-14)


def test_intra_modal_matches_reference_oracle():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        ps = init_params(cfg_of(2), 2, 2, 2, rng)
        X = Tensor(rng.standard_normal((2, 3)))
        X2, _ = intra_modal_step(X, ps, "intra.v", cfg_of(2))
        assert np.allclose(X2.data, ref_intra(X.data, ps, "intra.v"), atol=1e-12)


# ------------------------------------------------------------------ pooling

def test_segment_pool_zero_fuse_weights_average():
    rng = np.random.default_rng(5)
    ps = params_of(rng)
    zero_group(ps, "pool.fuse")
    seg = refine_segment(Tensor(rng.standard_normal((4, 3))),
                         Tensor(rng.standard_normal((4, 2))), ps, cfg_of())
    q = Tensor(rng.standard_normal((4, 1)))
    node, info = segment_pool(seg, q, ps)
    v_q = seg.visual.data @ info["attn_v"]
    s_q = seg.text.data @ info["attn_s"]
    assert np.allclose(node.data, (v_q + s_q) / 2.0, atol=1e-14)


def test_segment_pool_singletons_ignore_query():
    rng = np.random.default_rng(6)
    ps = params_of(rng)
    V = Tensor(rng.standard_normal((4, 1)))
    S = Tensor(rng.standard_normal((4, 1)))
    seg = md.SegmentTrace(visual=V, text=S)
    for qseed in (1, 2):
        q = Tensor(np.random.default_rng(qseed).standard_normal((4, 1)))
        _, info = segment_pool(seg, q, ps)
        assert np.allclose(info["attn_v"], [[1.0]])
        assert np.allclose(info["attn_s"], [[1.0]])


def test_segment_pool_matches_reference_oracle():
    rng = np.random.default_rng(7)
    ps = params_of(rng)
    seg = md.SegmentTrace(visual=Tensor(rng.standard_normal((4, 3))),
                          text=Tensor(rng.standard_normal((4, 2))))
    q = Tensor(rng.standard_normal((4, 1)))
    node, _ = segment_pool(seg, q, ps)
    assert np.allclose(node.data, ref_pool(seg.visual.data, seg.text.data, q.data, ps),
                       atol=1e-12)


def test_segment_pool_token_permutation_invariance():
    rng = np.random.default_rng(8)
    ps = params_of(rng)
    V = rng.standard_normal((4, 3))
    S = rng.standard_normal((4, 4))
    q = Tensor(rng.standard_normal((4, 1)))
    node1, _ = segment_pool(refine_segment(Tensor(V), Tensor(S), ps, cfg_of()), q, ps)
    perm = rng.permutation(4)
    node2, _ = segment_pool(refine_segment(Tensor(V), Tensor(S[:, perm]), ps, cfg_of()), q, ps)
    assert np.allclose(node1.data, node2.data, atol=1e-9)


# ------------------------------------------------------------------ halting

def test_halting_schedule_examples():
    n, rem, surrogate, literal = simulate_halting([0.5, 0.3, 0.3], 0.1, 5, 0.05)
    assert n == 3
    assert abs(rem - 0.2) < 1e-12
    assert abs(surrogate - 0.16) < 1e-12
    assert abs(literal - 0.15) < 1e-12

    n, *_ = simulate_halting([0.95, 0.9], 0.1, 5, 0.05)
    assert n == 1

    n, *_ = simulate_halting([0.2] * 5, 0.1, 5, 0.05)
    assert n == 5


def _halting_params(rng, h_value, d=4, d_h=3):
    ps = params_of(rng, d=d, d_h=d_h)
    ps["query.halt.w"].data[:] = 0.0
    ps["query.halt.b"].data[:] = math.log(h_value / (1.0 - h_value))
    return ps


def test_forced_high_halt_stops_at_one():
    rng = np.random.default_rng(9)
    ps = _halting_params(rng, 0.95)
    qs = extract_queries(Tensor(rng.standard_normal((4, 3))), ps, cfg_of())
    assert qs.n_queries == 1 and qs.stopped_early
    assert abs(qs.halts[0].item() - 0.95) < 1e-12


def test_constant_low_halt_runs_to_cap():
    rng = np.random.default_rng(10)
    ps = _halting_params(rng, 0.2)
    qs = extract_queries(Tensor(rng.standard_normal((4, 3))), ps, cfg_of())
    assert qs.n_queries == 5
    cums = [c.item() for c in qs.cum]
    assert np.allclose(cums, [0.2, 0.4, 0.6, 0.8, 1.0], atol=1e-12)


def test_halting_invariants_over_random_draws():
    cfg = cfg_of()
    for seed in range(300):
        rng = np.random.default_rng(seed)
        ps = params_of(rng)
        qs = extract_queries(Tensor(rng.standard_normal((4, 3))), ps, cfg)
        assert 1 <= qs.n_queries <= cfg.max_queries
        cums = [c.item() for c in qs.cum]
        assert all(b > a for a, b in zip(cums, cums[1:]))
        assert qs.stopped_early or qs.n_queries == cfg.max_queries


def test_forced_query_count():
    rng = np.random.default_rng(11)
    ps = _halting_params(rng, 0.95)
    qs = extract_queries(Tensor(rng.standard_normal((4, 3))), ps, cfg_of(), force_n=4)
    assert qs.n_queries == 4


def test_query_attention_rows_are_probabilities():
    rng = np.random.default_rng(12)
    ps = params_of(rng)
    qs = extract_queries(Tensor(rng.standard_normal((4, 5))), ps, cfg_of())
    for w in qs.attn:
        assert abs(w.data.sum() - 1.0) <= 1e-12 and np.all(w.data > 0)


# ----------------------------------------------------------------- temporal

def test_temporal_single_segment_fixed_point():
    rng = np.random.default_rng(13)
    ps = params_of(rng)
    X = Tensor(rng.standard_normal((4, 1)))
    X2, _ = intra_modal_step(X, ps, "temporal.gate", cfg_of())
    assert np.allclose(X2.data, X.data, atol=1e-14)


def test_temporal_pool_single_node_and_uniform():
    rng = np.random.default_rng(14)
    ps = params_of(rng)
    t1 = Tensor(rng.standard_normal((4, 1)))
    o, w = temporal_pool(t1, Tensor(rng.standard_normal((4, 1))), ps)
    assert np.allclose(o.data, t1.data) and np.allclose(w.data, [[1.0]])

    # zero attention weight matrix gives uniform logits, so the mean node
    ps["temporal.attn.w"].data[:] = 0.0
    T = Tensor(rng.standard_normal((4, 3)))
    o, w = temporal_pool(T, Tensor(rng.standard_normal((4, 1))), ps)
    assert np.allclose(w.data, np.full((3, 1), 1 / 3))
    assert np.allclose(o.data, T.data.mean(axis=1, keepdims=True), atol=1e-14)


def test_temporal_pool_matches_hand_attention():
    rng = np.random.default_rng(15)
    ps = params_of(rng)
    T = Tensor(rng.standard_normal((4, 3)))
    q = Tensor(rng.standard_normal((4, 1)))
    o, w = temporal_pool(T, q, ps)
    logits = T.data.T @ (ps["temporal.attn.w"].data @ q.data)
    e = np.exp(logits - logits.max())
    ref_w = e / e.sum()
    assert np.allclose(w.data, ref_w, atol=1e-12)
    assert np.allclose(o.data, T.data @ ref_w, atol=1e-12)


# ------------------------------------------------------------------- global

def test_predict_zero_head_gives_half():
    rng = np.random.default_rng(16)
    ps = params_of(rng)
    zero_group(ps, "head.hidden")
    zero_group(ps, "head.out")
    p, _ = predict_global([Tensor(rng.standard_normal((4, 1)))], ps)
    assert p.item() == 0.5


def test_predict_mean_idempotent_on_duplicates():
    rng = np.random.default_rng(17)
    ps = params_of(rng)
    o = Tensor(rng.standard_normal((4, 1)))
    p1, _ = predict_global([o], ps)
    p2, _ = predict_global([o, o.detach()], ps)
    assert abs(p1.item() - p2.item()) < 1e-14


# ------------------------------------------------------------- full forward

def test_forward_deterministic():
    rng = np.random.default_rng(18)
    ps = params_of(rng)
    clip = make_clip(np.random.default_rng(99))
    p1 = forward(clip, ps, cfg_of()).prob.item()
    p2 = forward(clip, ps, cfg_of()).prob.item()
    assert p1 == p2


def test_forward_permutation_invariance():
    cfg = cfg_of()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        ps = params_of(rng)
        clip = make_clip(rng, n_segments=2, frames_per=3, tokens_per=3)
        base = forward(clip, ps, cfg).prob.item()

        shuffled_tokens = [
            SubtitleLine(t0=s.t0, t1=s.t1, tokens=s.tokens[rng.permutation(s.tokens.shape[0])])
            for s in clip.subs
        ]
        clip_tok = Clip(clip.clip_id, clip.frames, shuffled_tokens, clip.statement, clip.label)
        assert abs(forward(clip_tok, ps, cfg).prob.item() - base) <= 1e-9

        # swap the two frames inside the first segment
        frames = list(clip.frames)
        frames[0], frames[1] = frames[1], frames[0]
        clip_frm = Clip(clip.clip_id, frames, clip.subs, clip.statement, clip.label)
        assert abs(forward(clip_frm, ps, cfg).prob.item() - base) <= 1e-9


def test_forward_convex_combination_bounds():
    rng = np.random.default_rng(20)
    ps = params_of(rng)
    clip = make_clip(rng, n_segments=3, frames_per=3, tokens_per=2)
    trace = forward(clip, ps, cfg_of())
    for seg, V0 in zip(trace.segments, trace.graph.visual):
        lo = np.minimum(V0.data, seg.inter_msg_v) - 1e-12
        hi = np.maximum(V0.data, seg.inter_msg_v) + 1e-12
        assert np.all(seg.after_inter_v >= lo) and np.all(seg.after_inter_v <= hi)
        lo2 = np.minimum(seg.after_inter_v, seg.intra_msg_v) - 1e-12
        hi2 = np.maximum(seg.after_inter_v, seg.intra_msg_v) + 1e-12
        assert np.all(seg.visual.data >= lo2) and np.all(seg.visual.data <= hi2)
        for g in (seg.inter_gate_v, seg.inter_gate_s, seg.intra_gate_v, seg.intra_gate_s):
            assert np.all(g > 0.0) and np.all(g < 1.0)


def test_forward_attention_vectors_are_probabilities():
    rng = np.random.default_rng(21)
    ps = params_of(rng)
    trace = forward(make_clip(rng, n_segments=3), ps, cfg_of())
    for t in trace.temporal:
        assert abs(t.pool_weights.sum() - 1.0) <= 1e-12
        assert np.all(t.pool_weights > 0)
        for a in t.seg_attn_v + t.seg_attn_s:
            assert abs(a.sum() - 1.0) <= 1e-12


def test_forward_ablation_flags():
    rng = np.random.default_rng(22)
    ps = params_of(rng)
    clip = make_clip(rng)
    base = forward(clip, ps, cfg_of()).prob.item()
    for flags in ({"inter_modal": False}, {"intra_modal": False}, {"temporal": False},
                  {"adjacency_norm": "none"}, {"fixed_queries": 3}):
        alt = forward(clip, ps, cfg_of(**flags))
        assert np.isfinite(alt.prob.item())
        if flags != {"fixed_queries": 3}:
            assert alt.prob.item() != base  # flag actually changes the path
    fixed = forward(clip, ps, cfg_of(fixed_queries=3))
    assert fixed.n_queries == 3


def test_forward_gradcheck_composite_probability():
    rng = np.random.default_rng(23)
    ps = params_of(rng)
    clip = make_clip(rng, n_segments=2, frames_per=2, tokens_per=2)
    cfg = cfg_of()
    n = forward(clip, ps, cfg).n_queries
    frozen = FrozenDecisions(n_queries=n)
    rep = grad_check(lambda: forward(clip, ps, cfg, frozen=frozen).prob, ps)
    assert rep.passed(1e-4), repr(rep)
