"""Reflective flipped fusion: one cross-attention whose projections are shared by
both directions (video attending to text and text attending to video), each
followed by a branch-specific self-attention, stacked ``n`` times.

Also hosts the concatenation baseline encoder used for ablations.
"""

from dataclasses import dataclass

import numpy as np

from evimr import nn
from evimr.nn import ShapeError

VIDEO_AS_QUERY = "video_as_query"
TEXT_AS_QUERY = "text_as_query"
_PROJ = ("wq", "wk", "wv")


@dataclass(frozen=True)
class FusionState:
    video: np.ndarray
    text: np.ndarray
    layer_index: int = 0

    def __post_init__(self):
        if self.video.shape[-1] != self.text.shape[-1]:
            raise ShapeError(f"video width {self.video.shape[-1]} != text width {self.text.shape[-1]}")
        if self.video.shape[-2] < 1 or self.text.shape[-2] < 1:
            raise ShapeError("both branches need at least one token")


def add_rff_params(store, n_layers, width):
    for i in range(n_layers):
        for block in ("ca", "sa_v", "sa_q"):
            for w in _PROJ:
                store.add(f"rff.{i}.{block}.{w}", (width, width))


def _weights(store, prefix):
    return [store[f"{prefix}.{w}"] for w in _PROJ]


def cross_attend(store, layer, state: FusionState, direction):
    """Shared cross-attention. Returns ``(out, cache)``."""
    prefix = f"rff.{layer}.ca"
    if direction == VIDEO_AS_QUERY:
        return nn.projected_attention_forward(state.video, state.text, *_weights(store, prefix))
    if direction == TEXT_AS_QUERY:
        return nn.projected_attention_forward(state.text, state.video, *_weights(store, prefix))
    raise ValueError(f"unknown direction {direction!r}")


def self_refine(store, prefix, x):
    return nn.projected_attention_forward(x, x, *_weights(store, prefix))


def _self_refine_backward(store, prefix, dout, cache):
    dxq, dxc, dWq, dWk, dWv = nn.projected_attention_backward(dout, cache)
    for w, g in zip(_PROJ, (dWq, dWk, dWv)):
        store.accumulate(f"{prefix}.{w}", g)
    return dxq + dxc


def rff_layer(store, state: FusionState, residual=True):
    """One fusion layer. Both branch updates read the pre-update ``state``."""
    i = state.layer_index
    cv, cache_cv = cross_attend(store, i, state, VIDEO_AS_QUERY)
    ct, cache_ct = cross_attend(store, i, state, TEXT_AS_QUERY)
    sv, cache_sv = self_refine(store, f"rff.{i}.sa_v", cv)
    st, cache_st = self_refine(store, f"rff.{i}.sa_q", ct)
    video = state.video + sv if residual else sv
    text = state.text + st if residual else st
    out = FusionState(video, text, i + 1)
    return out, (i, residual, cache_cv, cache_ct, cache_sv, cache_st)


def rff_layer_backward(store, d_video, d_text, cache):
    i, residual, cache_cv, cache_ct, cache_sv, cache_st = cache
    d_cv = _self_refine_backward(store, f"rff.{i}.sa_v", d_video, cache_sv)
    d_ct = _self_refine_backward(store, f"rff.{i}.sa_q", d_text, cache_st)
    # video_as_query: video is the query side, text the context side
    dv_q, dt_c, dWq1, dWk1, dWv1 = nn.projected_attention_backward(d_cv, cache_cv)
    dt_q, dv_c, dWq2, dWk2, dWv2 = nn.projected_attention_backward(d_ct, cache_ct)
    for w, g in zip(_PROJ, (dWq1 + dWq2, dWk1 + dWk2, dWv1 + dWv2)):
        store.accumulate(f"rff.{i}.ca.{w}", g)
    dv = dv_q + dv_c
    dt = dt_q + dt_c
    if residual:
        dv = dv + d_video
        dt = dt + d_text
    return dv, dt


def rff_stack(store, video, text, n, residual=True):
    if n < 1:
        raise ValueError("the fusion stack needs at least one layer")
    state = FusionState(video, text, 0)
    caches = []
    for _ in range(n):
        state, c = rff_layer(store, state, residual)
        caches.append(c)
    return state, caches


def rff_stack_backward(store, d_video, d_text, caches):
    for c in reversed(caches):
        d_video, d_text = rff_layer_backward(store, d_video, d_text, c)
    return d_video, d_text


# ---------------------------------------------------------------- concat baseline

def add_concat_params(store, width, hidden):
    store.add("concat.w1", (2 * width, hidden))
    store.add("concat.b1", (hidden,), init="zeros")
    store.add("concat.w2", (hidden, width))
    store.add("concat.b2", (width,), init="zeros")


def concat_fusion(store, video, text):
    """Each clip is fused with the mean query embedding through a two-layer MLP."""
    q_mean = text.mean(axis=-2, keepdims=True)
    joint = np.concatenate([video, np.broadcast_to(q_mean, video.shape)], axis=-1)
    out, cache = nn.mlp_forward(joint, store["concat.w1"], store["concat.b1"],
                                store["concat.w2"], store["concat.b2"])
    return out, (cache, video.shape[-1], text.shape[-2])


def concat_fusion_backward(store, d_out, cache):
    mlp_cache, width, lq = cache
    dj, dW1, db1, dW2, db2 = nn.mlp_backward(d_out, mlp_cache)
    for n, g in zip(("w1", "b1", "w2", "b2"), (dW1, db1, dW2, db2)):
        store.accumulate(f"concat.{n}", g)
    d_video = dj[..., :width]
    d_qmean = dj[..., width:].sum(axis=-2, keepdims=True)
    d_text = np.repeat(d_qmean / lq, lq, axis=-2)
    return d_video, d_text

