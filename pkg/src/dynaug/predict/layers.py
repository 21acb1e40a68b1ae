"""Convolution, pooling and attention primitives for the age regressors.

Forward functions accept single instances or leading batch axes; each has a
matching backward that consumes the forward cache. Weight convention is
``out = x @ w.T`` with w shaped (out_dim, in_dim).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..numerics import RngStream, init_uniform, softmax_lastaxis

__all__ = [
    "MhaParams",
    "TimeAttentionParams",
    "conv1d",
    "conv1d_backward",
    "maxpool1d",
    "maxpool1d_backward",
    "maxpool1d_with_indices",
    "mha_backward",
    "mha_forward",
    "multihead_attention",
    "pooled_length",
    "softmax_backward",
    "time_attention",
    "time_attention_backward",
    "time_attention_forward",
]


def softmax_backward(d_probs: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Gradient through a last-axis softmax given grads on its output."""
    inner = np.sum(d_probs * probs, axis=-1, keepdims=True)
    return probs * (d_probs - inner)


# --- 1-D convolution (valid cross-correlation) --------------------------------


def _conv_shapes(x, weights):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 2:  # (F, k) over a single input channel
        w = w[:, None, :]
    if w.ndim != 3:
        raise ValueError(f"weights must be (F, k) or (F, C_in, k), got shape {w.shape}")
    squeeze = 0
    if x.ndim == 1:
        x = x[None, None, :]
        squeeze = 2
    elif x.ndim == 2:
        x = x[None]
        squeeze = 1
    if x.ndim != 3:
        raise ValueError(f"input must be (L,), (C_in, L) or (B, C_in, L), got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, weights expect {w.shape[1]}")
    return x, w, squeeze


def conv1d(x, weights, bias=None) -> np.ndarray:
    """Valid cross-correlation: (B, C_in, L) -> (B, F, L - k + 1)."""
    xb, w, squeeze = _conv_shapes(x, weights)
    b, c_in, l = xb.shape
    f, _, k = w.shape
    if l < k:
        raise ValueError(f"input length {l} shorter than kernel {k}")
    l_out = l - k + 1
    win = sliding_window_view(xb, k, axis=2)          # (B, C_in, L_out, k)
    cols = win.transpose(0, 2, 1, 3).reshape(b * l_out, c_in * k)
    out = (cols @ w.reshape(f, c_in * k).T).reshape(b, l_out, f).transpose(0, 2, 1)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)[:, None]
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def conv1d_backward(x, weights, d_out):
    """Gradients of conv1d: returns (d_x, d_w, d_bias)."""
    xb, w, squeeze = _conv_shapes(x, weights)
    b, c_in, l = xb.shape
    f, _, k = w.shape
    d_o = np.asarray(d_out, dtype=np.float64).reshape(b, f, l - k + 1)
    l_out = d_o.shape[2]

    win = sliding_window_view(xb, k, axis=2)
    cols = win.transpose(0, 2, 1, 3).reshape(b * l_out, c_in * k)
    d_flat = d_o.transpose(0, 2, 1).reshape(b * l_out, f)
    d_w = (d_flat.T @ cols).reshape(f, c_in, k)
    d_b = d_o.sum(axis=(0, 2))

    # d_x = full cross-correlation of d_out with kernels flipped along k
    pad = np.zeros((b, f, l_out + 2 * (k - 1)))
    pad[:, :, k - 1:k - 1 + l_out] = d_o
    w_flip = w[:, :, ::-1]
    pwin = sliding_window_view(pad, k, axis=2)        # (B, F, L, k)
    pcols = pwin.transpose(0, 2, 1, 3).reshape(b * l, f * k)
    wt = w_flip.transpose(1, 0, 2).reshape(c_in, f * k)
    d_x = (pcols @ wt.T).reshape(b, l, c_in).transpose(0, 2, 1)
    d_x = np.ascontiguousarray(d_x)
    if squeeze == 2:
        d_x = d_x[0, 0]
    elif squeeze:
        d_x = d_x[0]
    return d_x, d_w, d_b


# --- 1-D max pooling -----------------------------------------------------------


def pooled_length(l: int, kernel: int = 2, stride: int = 2, pad: int = 1) -> int:
    return (l + 2 * pad - kernel) // stride + 1


def maxpool1d_with_indices(x, kernel: int = 2, stride: int = 2, pad: int = 1):
    """Max pooling over -inf padding; returns (out, source indices into x)."""
    xb = np.asarray(x, dtype=np.float64)
    squeeze = xb.ndim == 2
    if squeeze:
        xb = xb[None]
    if xb.ndim != 3:
        raise ValueError(f"input must be (C, L) or (B, C, L), got shape {xb.shape}")
    b, c, l = xb.shape
    if kernel < 1 or stride < 1 or pad < 0:
        raise ValueError(f"invalid pooling geometry k={kernel} s={stride} pad={pad}")
    l_out = pooled_length(l, kernel, stride, pad)
    if l_out < 1:
        raise ValueError(f"input length {l} too short for pooling window {kernel}")
    padded = np.full((b, c, l + 2 * pad), -np.inf)
    padded[:, :, pad:pad + l] = xb
    win = sliding_window_view(padded, kernel, axis=2)[:, :, ::stride]  # (B, C, L_out, k)
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    if not np.all(np.isfinite(out)):
        raise ValueError("pooling window contained only padding")
    src = arg + np.arange(l_out) * stride - pad  # index back into the unpadded input
    if squeeze:
        return out[0], src[0]
    return out, src


def maxpool1d(x, kernel: int = 2, stride: int = 2, pad: int = 1) -> np.ndarray:
    out, _ = maxpool1d_with_indices(x, kernel, stride, pad)
    return out


def maxpool1d_backward(d_out, src, input_len: int, kernel: int = 2, stride: int = 2):
    """Scatter pooled gradients back to the argmax source positions."""
    d_o = np.asarray(d_out, dtype=np.float64)
    squeeze = d_o.ndim == 2
    if squeeze:
        d_o = d_o[None]
        src = src[None]
    b, c, l_out = d_o.shape
    d_x = np.zeros((b, c, input_len))
    bi = np.arange(b)[:, None, None]
    ci = np.arange(c)[None, :, None]
    if stride >= kernel:
        # windows are disjoint, so each source index appears at most once
        d_x[bi, ci, src] = d_o
    else:
        np.add.at(d_x, (np.broadcast_to(bi, d_o.shape),
                        np.broadcast_to(ci, d_o.shape), src), d_o)
    return d_x[0] if squeeze else d_x


# --- multi-head self-attention --------------------------------------------------


@dataclass
class MhaParams:
    """Projection weights for multi-head attention (no biases)."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    @classmethod
    def init(cls, dim: int, rng: RngStream) -> "MhaParams":
        gen = rng.generator()
        return cls(*(init_uniform(dim, dim, gen) for _ in range(4)))

    def params(self, prefix: str = "mha") -> dict[str, np.ndarray]:
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k,
                f"{prefix}.w_v": self.w_v, f"{prefix}.w_o": self.w_o}


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, l, d = x.shape
    return x.reshape(n, l, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    n, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, l, h * dh)


def mha_forward(tokens, params: MhaParams, heads: int = 2, want_cache: bool = False):
    """Scaled dot-product self-attention; tokens (L, d) or (N, L, d)."""
    x = np.asarray(tokens, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"tokens must be (L, d) or (N, L, d), got shape {x.shape}")
    d = x.shape[2]
    if heads < 1 or d % heads != 0:
        raise ValueError(f"token dim {d} not divisible by heads {heads}")
    q = _split_heads(x @ params.w_q.T, heads)
    k = _split_heads(x @ params.w_k.T, heads)
    v = _split_heads(x @ params.w_v.T, heads)
    scale = 1.0 / np.sqrt(d // heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    alpha = softmax_lastaxis(scores)
    ctx = _merge_heads(alpha @ v)
    out = ctx @ params.w_o.T
    cache = (params, x, q, k, v, alpha, ctx, heads, squeeze) if want_cache else None
    return (out[0] if squeeze else out), cache


def multihead_attention(tokens, params: MhaParams, heads: int = 2) -> np.ndarray:
    out, _ = mha_forward(tokens, params, heads)
    return out


def mha_backward(cache, d_out):
    """Gradients of mha_forward: returns (d_tokens, grads keyed like MhaParams)."""
    params, x, q, k, v, alpha, ctx, heads, squeeze = cache
    d_o = np.asarray(d_out, dtype=np.float64)
    if squeeze:
        d_o = d_o[None]
    n, l, d = x.shape
    scale = 1.0 / np.sqrt(d // heads)
    x_flat = x.reshape(n * l, d)
    d_o_flat = d_o.reshape(n * l, d)

    g_w_o = d_o_flat.T @ ctx.reshape(n * l, d)
    d_ctx = _split_heads(d_o @ params.w_o, heads)          # (N, h, L, dh)
    d_alpha = d_ctx @ v.transpose(0, 1, 3, 2)
    d_v = alpha.transpose(0, 1, 3, 2) @ d_ctx
    d_scores = softmax_backward(d_alpha, alpha) * scale
    d_q = d_scores @ k
    d_k = d_scores.transpose(0, 1, 3, 2) @ q

    d_qm = _merge_heads(d_q).reshape(n * l, d)
    d_km = _merge_heads(d_k).reshape(n * l, d)
    d_vm = _merge_heads(d_v).reshape(n * l, d)
    grads = {
        "w_q": d_qm.T @ x_flat,
        "w_k": d_km.T @ x_flat,
        "w_v": d_vm.T @ x_flat,
        "w_o": g_w_o,
    }
    d_x = (d_qm @ params.w_q + d_km @ params.w_k + d_vm @ params.w_v).reshape(n, l, d)
    return (d_x[0] if squeeze else d_x), grads


# --- time attention over LSTM hidden states --------------------------------------


@dataclass
class TimeAttentionParams:
    """Query/key/value projections (d_att x H) for attention over time steps."""

    w_q: np.ndarray
    w_e: np.ndarray
    w_v: np.ndarray

    @classmethod
    def init(cls, hidden: int, d_att: int, rng: RngStream) -> "TimeAttentionParams":
        gen = rng.generator()
        return cls(*(init_uniform(d_att, hidden, gen) for _ in range(3)))

    def params(self, prefix: str = "att") -> dict[str, np.ndarray]:
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.w_e": self.w_e, f"{prefix}.w_v": self.w_v}


def time_attention_forward(h_seq, params: TimeAttentionParams,
                           literal_scale: bool = False, want_cache: bool = False):
    """Scaled dot-product attention over time: returns (contexts, alpha, cache).

    Scores s_tj = (q_t . e_j) / sqrt(d_att) with q, e, v linear projections of
    the hidden states; each alpha row is a softmax over j. With
    ``literal_scale`` the contexts are additionally divided by d_att (the
    uniform prefactor reading; off by default since the next linear layer
    absorbs it).
    """
    h = np.asarray(h_seq, dtype=np.float64)
    squeeze = h.ndim == 2
    if squeeze:
        h = h[None]
    if h.ndim != 3:
        raise ValueError(f"hidden states must be (T, H) or (B, T, H), got shape {h.shape}")
    d_att = params.w_q.shape[0]
    q = h @ params.w_q.T
    e = h @ params.w_e.T
    v = h @ params.w_v.T
    scale = 1.0 / np.sqrt(d_att)
    scores = (q @ e.transpose(0, 2, 1)) * scale
    alpha = softmax_lastaxis(scores)
    ctx = alpha @ v
    if literal_scale:
        ctx = ctx / d_att
    cache = (params, h, q, e, v, alpha, literal_scale, squeeze) if want_cache else None
    if squeeze:
        return ctx[0], alpha[0], cache
    return ctx, alpha, cache


def time_attention(h_seq, params: TimeAttentionParams, literal_scale: bool = False):
    """Public forward: returns (contexts (T x d_att), weights alpha (T x T))."""
    ctx, alpha, _ = time_attention_forward(h_seq, params, literal_scale)
    return ctx, alpha


def time_attention_backward(cache, d_ctx):
    """Gradients of time_attention_forward: returns (d_hidden, grads dict)."""
    params, h, q, e, v, alpha, literal_scale, squeeze = cache
    d_c = np.asarray(d_ctx, dtype=np.float64)
    if squeeze:
        d_c = d_c[None]
    n, t, hid = h.shape
    d_att = params.w_q.shape[0]
    if literal_scale:
        d_c = d_c / d_att
    scale = 1.0 / np.sqrt(d_att)

    d_alpha = d_c @ v.transpose(0, 2, 1)
    d_v = alpha.transpose(0, 2, 1) @ d_c
    d_scores = softmax_backward(d_alpha, alpha) * scale
    d_q = d_scores @ e
    d_e = d_scores.transpose(0, 2, 1) @ q

    h_flat = h.reshape(n * t, hid)
    grads = {
        "w_q": d_q.reshape(n * t, d_att).T @ h_flat,
        "w_e": d_e.reshape(n * t, d_att).T @ h_flat,
        "w_v": d_v.reshape(n * t, d_att).T @ h_flat,
    }
    d_h = (d_q @ params.w_q + d_e @ params.w_e + d_v @ params.w_v)
    return (d_h[0] if squeeze else d_h), grads
