"""The three age regressors: per-channel CNN, CNN with attention, and a
three-layer LSTM with attention over time.

All models map one (C x T) series to a scalar age. Training happens on
standardized targets; each model stores the target mean/std it was fitted
with and inverts them at prediction time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..forecast import LstmParams, lstm_backward, lstm_forward
from ..numerics import RngStream, init_uniform, relu, softmax_lastaxis
from .layers import (
    MhaParams,
    TimeAttentionParams,
    conv1d,
    conv1d_backward,
    maxpool1d_backward,
    maxpool1d_with_indices,
    mha_backward,
    mha_forward,
    pooled_length,
    softmax_backward,
    time_attention_backward,
    time_attention_forward,
)

__all__ = ["CnnConfig", "CnnModel", "TalstmConfig", "TimeAttentionLstm", "tower_stage_lengths"]


def tower_stage_lengths(length: int, kernel: int = 3, pool_kernel: int = 2,
                        pool_stride: int = 2, pool_pad: int = 1) -> tuple[int, int, int, int]:
    """(conv1, pool1, conv2, pool2) output lengths for one tower; raises if any < 1."""
    l1 = length - kernel + 1
    p1 = pooled_length(l1, pool_kernel, pool_stride, pool_pad) if l1 >= 1 else 0
    l2 = p1 - kernel + 1
    p2 = pooled_length(l2, pool_kernel, pool_stride, pool_pad) if l2 >= 1 else 0
    if l1 < 1 or p1 < 1 or l2 < 1 or p2 < 1:
        raise ValueError(
            f"series length {length} too short for two conv+pool stages "
            f"(stage lengths {l1}, {p1}, {l2}, {p2})")
    return l1, p1, l2, p2


@dataclass
class CnnConfig:
    channels: int
    length: int
    filters1: int = 128
    filters2: int = 64
    kernel: int = 3
    pool_kernel: int = 2
    pool_stride: int = 2
    pool_pad: int = 1
    fc1_width: int = 128
    with_attention: bool = False
    heads: int = 2
    shared_towers: bool = False


@dataclass
class _Tower:
    w1: np.ndarray  # (F1, 1, k)
    b1: np.ndarray  # (F1,)
    w2: np.ndarray  # (F2, F1, k)
    b2: np.ndarray  # (F2,)


class CnnModel:
    """Per-channel conv towers -> optional 2-head attention -> two fc layers.

    Each channel gets its own tower (weights unshared unless
    ``shared_towers``); attention tokens are the pooled time positions of one
    channel with the filter activations as embeddings, shared weights across
    channels, residual added.
    """

    def __init__(self, config: CnnConfig, rng: RngStream):
        c = config.channels
        if c < 1:
            raise ValueError("need at least one channel")
        self.config = config
        self.stage_lengths = tower_stage_lengths(
            config.length, config.kernel, config.pool_kernel,
            config.pool_stride, config.pool_pad)
        _, _, _, p2 = self.stage_lengths
        gen = rng.derive("towers").generator()
        n_towers = 1 if config.shared_towers else c
        self.towers = []
        for _ in range(n_towers):
            w1 = init_uniform(config.filters1, config.kernel, gen).reshape(
                config.filters1, 1, config.kernel)
            b1 = np.zeros(config.filters1)
            w2 = init_uniform(config.filters2, config.filters1 * config.kernel, gen).reshape(
                config.filters2, config.filters1, config.kernel)
            b2 = np.zeros(config.filters2)
            self.towers.append(_Tower(w1, b1, w2, b2))
        self.mha = MhaParams.init(config.filters2, rng.derive("attention")) \
            if config.with_attention else None
        fc_in = c * config.filters2 * p2
        gen_fc = rng.derive("fc").generator()
        self.w_fc1 = init_uniform(config.fc1_width, fc_in, gen_fc)
        self.b_fc1 = np.zeros(config.fc1_width)
        self.w_fc2 = init_uniform(1, config.fc1_width, gen_fc)
        self.b_fc2 = np.zeros(1)
        self.target_mean = 0.0
        self.target_std = 1.0

    def _tower(self, channel: int) -> _Tower:
        return self.towers[0] if self.config.shared_towers else self.towers[channel]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, tw in enumerate(self.towers):
            out[f"tower{i}.w1"] = tw.w1
            out[f"tower{i}.b1"] = tw.b1
            out[f"tower{i}.w2"] = tw.w2
            out[f"tower{i}.b2"] = tw.b2
        if self.mha is not None:
            out.update(self.mha.params("mha"))
        out.update({"fc1.w": self.w_fc1, "fc1.b": self.b_fc1,
                    "fc2.w": self.w_fc2, "fc2.b": self.b_fc2})
        return out

    def forward_batch(self, x: np.ndarray, want_cache: bool = False):
        """x: (B, C, T) -> standardized-age predictions (B,)."""
        cfg = self.config
        b, c, t = x.shape
        if c != cfg.channels or t != cfg.length:
            raise ValueError(f"input shape {x.shape[1:]} does not match model "
                             f"({cfg.channels}, {cfg.length})")
        feats = []
        caches = []
        for ch in range(c):
            tw = self._tower(ch)
            a1 = conv1d(x[:, ch:ch + 1, :], tw.w1, tw.b1)
            mask1 = a1 > 0
            p1, src1 = maxpool1d_with_indices(a1 * mask1, cfg.pool_kernel,
                                              cfg.pool_stride, cfg.pool_pad)
            a2 = conv1d(p1, tw.w2, tw.b2)
            mask2 = a2 > 0
            p2, src2 = maxpool1d_with_indices(a2 * mask2, cfg.pool_kernel,
                                              cfg.pool_stride, cfg.pool_pad)
            att_cache = None
            if self.mha is not None:
                tokens = p2.transpose(0, 2, 1)  # (B, P2, F2)
                att_out, att_cache = mha_forward(tokens, self.mha, cfg.heads, want_cache)
                p2 = (tokens + att_out).transpose(0, 2, 1)  # residual
            feats.append(p2)
            if want_cache:
                caches.append((mask1, src1, p1, mask2, src2, att_cache))
        flat = np.concatenate([f.reshape(b, -1) for f in feats], axis=1)
        z1 = flat @ self.w_fc1.T + self.b_fc1
        h1 = relu(z1)
        out = (h1 @ self.w_fc2.T + self.b_fc2)[:, 0]
        if want_cache:
            return out, (x, caches, flat, z1, h1)
        return out

    def loss_and_grads(self, x: np.ndarray, targets: np.ndarray):
        """Mean squared error on standardized targets with exact gradients."""
        cfg = self.config
        b, c, _ = x.shape
        pred, cache = self.forward_batch(x, want_cache=True)
        xin, caches, flat, z1, h1 = cache
        diff = pred - targets
        loss = float(np.mean(diff * diff))

        d_out = (2.0 / b) * diff
        grads = {name: np.zeros_like(p) for name, p in self.params().items()}
        grads["fc2.w"] += d_out[None, :] @ h1
        grads["fc2.b"] += np.array([d_out.sum()])
        d_h1 = d_out[:, None] @ self.w_fc2
        d_z1 = d_h1 * (z1 > 0)
        grads["fc1.w"] += d_z1.T @ flat
        grads["fc1.b"] += d_z1.sum(axis=0)
        d_flat = d_z1 @ self.w_fc1

        l1_len, _, l2_len, p2_len = self.stage_lengths
        per = cfg.filters2 * p2_len
        for ch in range(c):
            mask1, src1, p1, mask2, src2, att_cache = caches[ch]
            d_p2 = d_flat[:, ch * per:(ch + 1) * per].reshape(b, cfg.filters2, p2_len)
            if self.mha is not None:
                d_tokens = d_p2.transpose(0, 2, 1)
                d_att_in, mha_grads = mha_backward(att_cache, d_tokens)
                for key, g in mha_grads.items():
                    grads[f"mha.{key}"] += g
                d_p2 = (d_tokens + d_att_in).transpose(0, 2, 1)
            d_r2 = maxpool1d_backward(d_p2, src2, l2_len, cfg.pool_kernel, cfg.pool_stride)
            d_a2 = d_r2 * mask2
            d_p1, d_w2, d_b2 = conv1d_backward(p1, self._tower(ch).w2, d_a2)
            d_r1 = maxpool1d_backward(d_p1, src1, l1_len, cfg.pool_kernel, cfg.pool_stride)
            d_a1 = d_r1 * mask1
            _, d_w1, d_b1 = conv1d_backward(xin[:, ch:ch + 1, :], self._tower(ch).w1, d_a1)
            ti = 0 if cfg.shared_towers else ch
            grads[f"tower{ti}.w1"] += d_w1
            grads[f"tower{ti}.b1"] += d_b1
            grads[f"tower{ti}.w2"] += d_w2
            grads[f"tower{ti}.b2"] += d_b2
        return loss, grads

    def predict_ages(self, x: np.ndarray) -> np.ndarray:
        """x: (B, C, T) -> predicted ages in years."""
        return self.forward_batch(x) * self.target_std + self.target_mean


@dataclass
class TalstmConfig:
    channels: int
    hidden: int = 64
    depth: int = 3
    d_att: int = 64
    eq1_literal: bool = False


class TimeAttentionLstm:
    """Stacked LSTM (depth x hidden) -> attention over time -> learned
    softmax reduction over time steps -> scalar age."""

    def __init__(self, config: TalstmConfig, rng: RngStream):
        if config.depth < 1:
            raise ValueError("need at least one LSTM layer")
        self.config = config
        self.layers = []
        in_size = config.channels
        for i in range(config.depth):
            self.layers.append(LstmParams.init(in_size, config.hidden, rng.derive(f"lstm{i}")))
            in_size = config.hidden
        self.att = TimeAttentionParams.init(config.hidden, config.d_att, rng.derive("att"))
        gen = rng.derive("head").generator()
        self.w_reduce = init_uniform(1, config.d_att, gen)[0]
        self.b_reduce = np.zeros(1)
        self.w_out = init_uniform(1, config.d_att, gen)[0]
        self.b_out = np.zeros(1)
        self.target_mean = 0.0
        self.target_std = 1.0

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"lstm{i}.w_x"] = layer.w_x
            out[f"lstm{i}.w_h"] = layer.w_h
            out[f"lstm{i}.b"] = layer.b
        out.update(self.att.params("att"))
        out.update({"reduce.w": self.w_reduce, "reduce.b": self.b_reduce,
                    "out.w": self.w_out, "out.b": self.b_out})
        return out

    def forward_batch(self, x: np.ndarray, want_cache: bool = False):
        """x: (B, C, T) -> standardized-age predictions (B,)."""
        cfg = self.config
        b, c, t = x.shape
        if c != cfg.channels:
            raise ValueError(f"input has {c} channels, model expects {cfg.channels}")
        seq = x.transpose(0, 2, 1)  # (B, T, C), one C-vector per step
        lstm_caches = []
        hidden = seq
        for layer in self.layers:
            hidden, cache = lstm_forward(layer, hidden, want_cache=want_cache)
            lstm_caches.append(cache)
        ctx, _, att_cache = time_attention_forward(
            hidden, self.att, cfg.eq1_literal, want_cache=want_cache)
        scores = ctx @ self.w_reduce + self.b_reduce[0]  # (B, T)
        beta = softmax_lastaxis(scores)
        pooled = np.einsum("bt,btd->bd", beta, ctx)
        out = pooled @ self.w_out + self.b_out[0]
        if want_cache:
            return out, (lstm_caches, att_cache, ctx, beta, pooled)
        return out

    def loss_and_grads(self, x: np.ndarray, targets: np.ndarray):
        b = x.shape[0]
        pred, cache = self.forward_batch(x, want_cache=True)
        lstm_caches, att_cache, ctx, beta, pooled = cache
        diff = pred - targets
        loss = float(np.mean(diff * diff))

        d_out = (2.0 / b) * diff  # (B,)
        grads = {}
        grads["out.w"] = d_out @ pooled
        grads["out.b"] = np.array([d_out.sum()])
        d_pooled = d_out[:, None] * self.w_out  # (B, d_att)

        d_beta = np.einsum("bd,btd->bt", d_pooled, ctx)
        d_ctx = beta[:, :, None] * d_pooled[:, None, :]
        d_scores = softmax_backward(d_beta, beta)
        grads["reduce.w"] = np.einsum("bt,btd->d", d_scores, ctx)
        grads["reduce.b"] = np.array([d_scores.sum()])
        d_ctx += d_scores[:, :, None] * self.w_reduce

        d_hidden, att_grads = time_attention_backward(att_cache, d_ctx)
        for key, g in att_grads.items():
            grads[f"att.{key}"] = g

        for i in range(len(self.layers) - 1, -1, -1):
            cg = lstm_backward(lstm_caches[i], d_hidden=d_hidden)
            grads[f"lstm{i}.w_x"] = cg.w_x
            grads[f"lstm{i}.w_h"] = cg.w_h
            grads[f"lstm{i}.b"] = cg.b
            d_hidden = cg.inputs
        return loss, grads

    def predict_ages(self, x: np.ndarray) -> np.ndarray:
        return self.forward_batch(x) * self.target_std + self.target_mean
