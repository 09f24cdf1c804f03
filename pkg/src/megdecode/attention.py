"""Scaled dot-product self-attention and Luong-style global attention.

Both mechanisms are bias-free linear projections around a softmax. The
self-attention path runs per head over a set of positions; the augmented
convolution concatenates those attention maps with an ordinary conv branch
along channels. Global attention scores one query state against a sequence
of states through a bilinear form, mixes the sequence with the resulting
weights, and projects [context; query] through tanh.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import Conv2D, Layer, glorot_uniform


class MultiHeadSelfAttention(Layer):
    """heads x (query/key width d_k, value width d_v), output projection W_o."""

    def __init__(self, in_width, heads=2, d_k=None, d_v=None, out_width=None,
                 rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        if heads < 1 or in_width < 1:
            raise ConfigError(f"attention needs heads >= 1 and in_width >= 1, got {heads}, {in_width}")
        d_k = d_k if d_k is not None else max(1, in_width // heads)
        d_v = d_v if d_v is not None else d_k
        if d_k < 1 or d_v < 1:
            raise ConfigError(f"attention head widths must be >= 1, got d_k={d_k}, d_v={d_v}")
        out_width = out_width if out_width is not None else heads * d_v
        self.in_width, self.heads, self.d_k, self.d_v, self.out_width = in_width, heads, d_k, d_v, out_width

        def proj(cols):
            return T.Tensor(glorot_uniform(rng, (in_width, cols), in_width, cols, dtype), requires_grad=True)

        self.w_q = proj(heads * d_k)
        self.w_k = proj(heads * d_k)
        self.w_v = proj(heads * d_v)
        self.w_o = T.Tensor(glorot_uniform(rng, (heads * d_v, out_width), heads * d_v, out_width, dtype),
                            requires_grad=True)

    def params(self):
        return [("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v), ("w_o", self.w_o)]

    def _check(self, x):
        if x.ndim not in (2, 3) or x.shape[-1] != self.in_width:
            raise ShapeError(f"attention expects (n, {self.in_width}) or (batch, n, {self.in_width}), got {x.shape}")
        if x.shape[-2] < 1:
            raise ShapeError("attention needs at least one position")

    def head_weights(self, x, head):
        """Softmax weight matrix of one head: (n, n) or (batch, n, n)."""
        if not 0 <= head < self.heads:
            raise ConfigError(f"head {head} out of range [0, {self.heads})")
        self._check(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        lo_k, hi_k = head * self.d_k, (head + 1) * self.d_k
        q = T.matmul(x, self.w_q[:, lo_k:hi_k])
        k = T.matmul(x, self.w_k[:, lo_k:hi_k])
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.d_k))
        a = T.softmax(scores, axis=-1)
        return T.reshape(a, a.shape[1:]) if squeeze else a

    def head(self, x, head):
        """Single-head output: (n, d_v) or (batch, n, d_v)."""
        if not 0 <= head < self.heads:
            raise ConfigError(f"head {head} out of range [0, {self.heads})")
        self._check(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        a = self.head_weights(x, head)
        lo_v, hi_v = head * self.d_v, (head + 1) * self.d_v
        v = T.matmul(x, self.w_v[:, lo_v:hi_v])
        out = T.matmul(a, v)
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def __call__(self, x):
        """All heads concatenated and projected: (..., n, out_width)."""
        self._check(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        bsz, n, _ = x.shape
        h, dk, dv = self.heads, self.d_k, self.d_v

        def split(m, d):
            y = T.matmul(x, m)
            return T.transpose(T.reshape(y, (bsz, n, h, d)), (0, 2, 1, 3))

        q = split(self.w_q, dk)
        k = split(self.w_k, dk)
        v = split(self.w_v, dv)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
        a = T.softmax(scores, axis=-1)
        mixed = T.matmul(a, v)
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (bsz, n, h * dv))
        out = T.matmul(merged, self.w_o)
        return T.reshape(out, (n, self.out_width)) if squeeze else out


def attention_head(x, attn, head):
    return attn.head(x, head)


def multihead(x, attn):
    return attn(x)


class AugmentedConv2D(Layer):
    """Conv branch and self-attention branch concatenated along channels.

    The attention branch flattens the spatial grid to a set of positions,
    attends over them, and reshapes back, so output channel count is
    conv filters + attention output width.
    """

    def __init__(self, in_channels, filters, kernel, heads=2, d_k=None, d_v=None,
                 attn_out=None, conv_bias=True, padding="same", rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.conv = Conv2D(in_channels, filters, kernel, padding=padding, bias=conv_bias,
                           rng=rng, dtype=dtype)
        self.attn = MultiHeadSelfAttention(in_channels, heads=heads, d_k=d_k, d_v=d_v,
                                           out_width=attn_out, rng=rng, dtype=dtype)
        self.out_channels = filters + self.attn.out_width

    def params(self):
        return ([("conv." + n, p) for n, p in self.conv.params()]
                + [("attn." + n, p) for n, p in self.attn.params()])

    def __call__(self, x):
        if x.ndim != 4:
            raise ShapeError(f"augmented conv expects (batch, h, w, c), got {x.shape}")
        bsz, hh, ww, cc = x.shape
        conv_out = self.conv(x)
        flat = T.reshape(x, (bsz, hh * ww, cc))
        att = self.attn(flat)
        att_maps = T.reshape(att, (bsz, hh, ww, self.attn.out_width))
        return T.concat([conv_out, att_maps], axis=3)


class GlobalAttention(Layer):
    """Bilinear scoring of one query state against a sequence of states.

    score_s = h_t^T W_a hbar_s; weights = softmax over s; context = weighted
    sum of hbar_s; output = tanh(W_c [context; h_t]).
    """

    def __init__(self, state_width, query_width, out_width, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        if min(state_width, query_width, out_width) < 1:
            raise ConfigError(f"global attention widths must be >= 1, got {state_width}, {query_width}, {out_width}")
        self.state_width, self.query_width, self.out_width = state_width, query_width, out_width
        self.w_a = T.Tensor(glorot_uniform(rng, (query_width, state_width), query_width, state_width, dtype),
                            requires_grad=True)
        self.w_c = T.Tensor(glorot_uniform(rng, (state_width + query_width, out_width),
                                           state_width + query_width, out_width, dtype),
                            requires_grad=True)

    def params(self):
        return [("w_a", self.w_a), ("w_c", self.w_c)]

    def _lift(self, h_s, h_t):
        if h_s.ndim == 2 and h_t.ndim == 1:
            h_s = T.reshape(h_s, (1,) + h_s.shape)
            h_t = T.reshape(h_t, (1,) + h_t.shape)
            squeeze = True
        elif h_s.ndim == 3 and h_t.ndim == 2:
            squeeze = False
        else:
            raise ShapeError(f"global attention expects (T,s)/(s,) or (B,T,s)/(B,s), got {h_s.shape}, {h_t.shape}")
        if h_s.shape[0] != h_t.shape[0]:
            raise ShapeError(f"batch mismatch: {h_s.shape} vs {h_t.shape}")
        if h_s.shape[1] < 1:
            raise ShapeError("global attention needs at least one state")
        if h_s.shape[2] != self.state_width or h_t.shape[1] != self.query_width:
            raise ShapeError(f"expected state width {self.state_width} and query width {self.query_width}, "
                             f"got {h_s.shape} and {h_t.shape}")
        return h_s, h_t, squeeze

    def scores(self, h_s, h_t):
        h_s, h_t, squeeze = self._lift(h_s, h_t)
        q = T.matmul(h_t, self.w_a)
        s = T.matmul(h_s, T.reshape(q, (q.shape[0], self.state_width, 1)))
        s = T.reshape(s, s.shape[:2])
        return T.reshape(s, (s.shape[1],)) if squeeze else s

    def __call__(self, h_s, h_t, return_weights=False):
        h_s, h_t, squeeze = self._lift(h_s, h_t)
        q = T.matmul(h_t, self.w_a)
        s = T.matmul(h_s, T.reshape(q, (q.shape[0], self.state_width, 1)))
        a = T.softmax(T.reshape(s, s.shape[:2]), axis=-1)
        ctx = T.matmul(T.reshape(a, (a.shape[0], 1, a.shape[1])), h_s)
        ctx = T.reshape(ctx, (ctx.shape[0], self.state_width))
        out = T.tanh(T.matmul(T.concat([ctx, h_t], axis=1), self.w_c))
        if squeeze:
            out = T.reshape(out, (self.out_width,))
            a = T.reshape(a, (a.shape[1],))
        return (out, a) if return_weights else out


def global_attention_score(h_s, h_t, attn):
    return attn.scores(h_s, h_t)


def global_attention_apply(h_s, h_t, attn, return_weights=False):
    return attn(h_s, h_t, return_weights=return_weights)
