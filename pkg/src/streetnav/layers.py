"""Neural layers built on the tensor engine: dense, LSTM, bi-LSTM, attention.

Layers own their parameter tensors and expose them through ``params()`` as
a flat name -> Tensor mapping so checkpoints can address every weight.
The LSTM runs as one fused op per layer and direction (hand-written
backpropagation through time); composing it from primitive ops would cost
an order of magnitude more Python overhead per timestep.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    k = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-k, k, size=shape).astype(np.float32)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def stack_time(steps: Sequence[Tensor]) -> Tensor:
    """Stack T tensors of shape (B, D) into (B, T, D)."""
    data = np.stack([s.data for s in steps], axis=1)

    def backward(grad):
        for i, s in enumerate(steps):
            if s.requires_grad:
                s.accumulate_grad(grad[:, i])

    return T._make(data, tuple(steps), backward)


def gather_time(seq: Tensor, index: np.ndarray) -> Tensor:
    """Permute time per batch row: out[b, t] = seq[b, index[b, t]]."""
    index = np.asarray(index, dtype=np.int64)
    batch = np.arange(seq.shape[0])[:, None]
    data = seq.data[batch, index]

    def backward(grad):
        if seq.requires_grad:
            full = np.zeros_like(seq.data)
            np.add.at(full, (batch, index), grad)
            seq.accumulate_grad(full)

    return T._make(data, (seq,), backward)


def reversal_index(lengths: np.ndarray, max_len: int) -> np.ndarray:
    """Per-row involution that reverses the first ``lengths[b]`` positions."""
    idx = np.tile(np.arange(max_len), (len(lengths), 1))
    for b, n in enumerate(lengths):
        idx[b, :n] = np.arange(n - 1, -1, -1)
    return idx


def lstm_layer(
    x_seq: Tensor,
    wx: Tensor,
    wh: Tensor,
    b: Tensor,
    h0: Tensor,
    c0: Tensor,
    lengths: np.ndarray,
) -> Tensor:
    """Unrolled LSTM over (B, T, D); gate order in the fused weights is i, f, g, o.

    Returns (B, T+1, H): positions 0..T-1 are the hidden states, position T
    carries the cell state at each row's final valid step (``lengths[b]-1``).
    Packing the final cell into the same output keeps the whole layer one
    autodiff node while letting callers slice off whichever part they need.
    """
    bsz, t_max, _ = x_seq.shape
    hidden = wh.shape[0]
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.min() < 1 or lengths.max() > t_max:
        raise ShapeError(f"lengths must lie in [1, {t_max}]")
    if wx.shape[1] != 4 * hidden or b.shape[0] != 4 * hidden:
        raise ShapeError("LSTM weight shapes are inconsistent")

    x_proj = x_seq.data @ wx.data + b.data  # (B, T, 4H); clobbered in the loop
    dtype = x_proj.dtype
    gates = np.empty((bsz, t_max, 4 * hidden), dtype=dtype)  # post-activation
    cs = np.empty((bsz, t_max, hidden), dtype=dtype)
    tcs = np.empty((bsz, t_max, hidden), dtype=dtype)
    hs = np.empty((bsz, t_max, hidden), dtype=dtype)
    h = h0.data.astype(dtype, copy=False)
    c = c0.data.astype(dtype, copy=False)
    for t in range(t_max):
        pre = x_proj[:, t]
        pre += h @ wh.data
        gate_t = gates[:, t]
        # sigmoid on the contiguous (i, f) and o blocks, tanh on g, in place
        for lo, hi in ((0, 2 * hidden), (3 * hidden, 4 * hidden)):
            blk = gate_t[:, lo:hi]
            np.multiply(pre[:, lo:hi], -1.0, out=blk)
            np.exp(blk, out=blk)
            blk += 1.0
            np.reciprocal(blk, out=blk)
        np.tanh(pre[:, 2 * hidden : 3 * hidden], out=gate_t[:, 2 * hidden : 3 * hidden])
        c_t = cs[:, t]
        np.multiply(gate_t[:, hidden : 2 * hidden], c, out=c_t)
        c_t += gate_t[:, :hidden] * gate_t[:, 2 * hidden : 3 * hidden]
        c = c_t
        tc = np.tanh(c_t, out=tcs[:, t])
        h = np.multiply(gate_t[:, 3 * hidden :], tc, out=hs[:, t])

    rows = np.arange(bsz)
    out = np.concatenate([hs, cs[rows, lengths - 1][:, None, :]], axis=1)

    def backward(grad):
        dh_seq = grad[:, :t_max]
        dc_final = grad[:, t_max]
        dgates_pre = np.zeros((bsz, t_max, 4 * hidden), dtype=dtype)
        dh_next = np.zeros((bsz, hidden), dtype=dtype)
        dc_next = np.zeros((bsz, hidden), dtype=dtype)
        wh_t = wh.data.T
        final_mask = lengths - 1
        for t in range(t_max - 1, -1, -1):
            i = gates[:, t, :hidden]
            f = gates[:, t, hidden : 2 * hidden]
            g = gates[:, t, 2 * hidden : 3 * hidden]
            o = gates[:, t, 3 * hidden :]
            tc = tcs[:, t]
            dh = dh_seq[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            at_final = final_mask == t
            if at_final.any():
                dc = dc + np.where(at_final[:, None], dc_final, 0.0)
            c_prev = cs[:, t - 1] if t > 0 else c0.data
            h_prev = hs[:, t - 1] if t > 0 else h0.data
            do = dh * tc
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dgates_pre[:, t, :hidden] = di * i * (1.0 - i)
            dgates_pre[:, t, hidden : 2 * hidden] = df * f * (1.0 - f)
            dgates_pre[:, t, 2 * hidden : 3 * hidden] = dg * (1.0 - g * g)
            dgates_pre[:, t, 3 * hidden :] = do * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dgates_pre[:, t] @ wh_t
        if x_seq.requires_grad:
            x_seq.accumulate_grad(dgates_pre @ wx.data.T)
        if wx.requires_grad:
            flat_x = x_seq.data.reshape(bsz * t_max, -1)
            wx.accumulate_grad(flat_x.T @ dgates_pre.reshape(bsz * t_max, -1))
        if wh.requires_grad:
            h_prev_all = np.concatenate([h0.data[:, None, :], hs[:, : t_max - 1]], axis=1)
            wh.accumulate_grad(
                h_prev_all.reshape(bsz * t_max, -1).T @ dgates_pre.reshape(bsz * t_max, -1)
            )
        if b.requires_grad:
            b.accumulate_grad(dgates_pre.sum(axis=(0, 1)))
        if h0.requires_grad:
            h0.accumulate_grad(dh_next)
        if c0.requires_grad:
            c0.accumulate_grad(dc_next)

    return T._make(out, (x_seq, wx, wh, b, h0, c0), backward)


def lstm_step_op(
    x: Tensor, wx: Tensor, wh: Tensor, b: Tensor, h0: Tensor, c0: Tensor
) -> Tensor:
    """One fused cell step; returns (B, 2H) with the new h and c side by side.

    The decoder calls this every timestep, so it avoids the sequence
    machinery of ``lstm_layer``.
    """
    hidden = wh.shape[0]
    pre = x.data @ wx.data + b.data
    pre += h0.data @ wh.data
    i = _sigmoid(pre[:, :hidden])
    f = _sigmoid(pre[:, hidden : 2 * hidden])
    g = np.tanh(pre[:, 2 * hidden : 3 * hidden])
    o = _sigmoid(pre[:, 3 * hidden :])
    c = f * c0.data + i * g
    tc = np.tanh(c)
    h = o * tc
    out = np.concatenate([h, c], axis=1)

    def backward(grad):
        dh = grad[:, :hidden]
        dc = grad[:, hidden:] + dh * o * (1.0 - tc * tc)
        dgates = np.empty_like(pre)
        dgates[:, :hidden] = (dc * g) * i * (1.0 - i)
        dgates[:, hidden : 2 * hidden] = (dc * c0.data) * f * (1.0 - f)
        dgates[:, 2 * hidden : 3 * hidden] = (dc * i) * (1.0 - g * g)
        dgates[:, 3 * hidden :] = (dh * tc) * o * (1.0 - o)
        if x.requires_grad:
            x.accumulate_grad(dgates @ wx.data.T)
        if wx.requires_grad:
            wx.accumulate_grad(x.data.T @ dgates)
        if wh.requires_grad:
            wh.accumulate_grad(h0.data.T @ dgates)
        if b.requires_grad:
            b.accumulate_grad(dgates.sum(axis=0))
        if h0.requires_grad:
            h0.accumulate_grad(dgates @ wh.data.T)
        if c0.requires_grad:
            c0.accumulate_grad(dc * f)

    return T._make(out, (x, wx, wh, b, h0, c0), backward)


class Dense:
    """Affine layer y = x @ w + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.w = T.parameter(_uniform_init(rng, (in_dim, out_dim), in_dim))
        self.b = T.parameter(np.zeros(out_dim, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


class LSTMCell:
    """LSTM parameters plus step/sequence application."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.wx = T.parameter(_uniform_init(rng, (in_dim, 4 * hidden), in_dim))
        self.wh = T.parameter(_uniform_init(rng, (hidden, 4 * hidden), hidden))
        self.b = T.parameter(np.zeros(4 * hidden, dtype=np.float32))

    def step(self, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        out = lstm_step_op(x, self.wx, self.wh, self.b, h_prev, c_prev)
        h = T.slice_axis(out, -1, 0, self.hidden)
        c = T.slice_axis(out, -1, self.hidden, 2 * self.hidden)
        return h, c

    def run(self, seq: Tensor, lengths: np.ndarray) -> tuple[Tensor, Tensor]:
        """(B, T, H) hidden states plus the per-row final cell state (B, H)."""
        bsz, t_max, _ = seq.shape
        dtype = seq.dtype
        out = lstm_layer(
            seq,
            self.wx,
            self.wh,
            self.b,
            T.zeros((bsz, self.hidden), dtype=dtype),
            T.zeros((bsz, self.hidden), dtype=dtype),
            lengths,
        )
        hs = T.slice_axis(out, 1, 0, t_max)
        c_final = T.reshape(T.slice_axis(out, 1, t_max, t_max + 1), (bsz, self.hidden))
        return hs, c_final

    def params(self) -> dict[str, Tensor]:
        return {"wx": self.wx, "wh": self.wh, "b": self.b}


class BiLSTM:
    """Stacked bidirectional LSTM over padded batches.

    Outputs per-token forward/backward concatenations (B, T, 2H) plus the
    final-layer final cell states of both directions, gathered at each
    sequence's true length so padding never leaks into them.
    """

    def __init__(self, in_dim: int, hidden: int, num_layers: int, rng: np.random.Generator):
        self.layers: list[tuple[LSTMCell, LSTMCell]] = []
        d = in_dim
        for _ in range(num_layers):
            fwd = LSTMCell(d, hidden, rng)
            bwd = LSTMCell(d, hidden, rng)
            self.layers.append((fwd, bwd))
            d = 2 * hidden

    def __call__(
        self,
        seq: Tensor,
        lengths: np.ndarray,
        drop: float = 0.0,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> tuple[Tensor, Tensor, Tensor]:
        if seq.shape[1] < 1:
            raise ShapeError("bi-lstm over an empty sequence")
        lengths = np.asarray(lengths, dtype=np.int64)
        rev = reversal_index(lengths, seq.shape[1])
        out = seq
        final_cf = final_cb = None
        for fwd, bwd in self.layers:
            hs_f, final_cf = fwd.run(out, lengths)
            hs_b_rev, final_cb = bwd.run(gather_time(out, rev), lengths)
            hs_b = gather_time(hs_b_rev, rev)
            out = T.concat([hs_f, hs_b], axis=-1)
            out = T.dropout(out, drop, training, rng)
        return out, final_cf, final_cb

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (fwd, bwd) in enumerate(self.layers):
            for k, v in fwd.params().items():
                out[f"l{i}.fwd.{k}"] = v
            for k, v in bwd.params().items():
                out[f"l{i}.bwd.{k}"] = v
        return out


class MultiHeadAttention:
    """Scaled dot-product attention for a single query vector per batch row.

    Heads are projections of the query and of every key/value; the head
    contexts are concatenated, output-projected back to the query dim, and
    regularized by dropout on the attention weights plus layer norm on the
    output.
    """

    def __init__(self, query_dim: int, kv_dim: int, heads: int, rng: np.random.Generator):
        if query_dim % heads != 0:
            raise ShapeError(f"heads ({heads}) must divide the projection dim ({query_dim})")
        self.heads = heads
        self.head_dim = query_dim // heads
        self.wq = T.parameter(_uniform_init(rng, (query_dim, query_dim), query_dim))
        self.wk = T.parameter(_uniform_init(rng, (kv_dim, query_dim), kv_dim))
        self.wv = T.parameter(_uniform_init(rng, (kv_dim, query_dim), kv_dim))
        self.wo = T.parameter(_uniform_init(rng, (query_dim, query_dim), query_dim))
        self.ln_gain = T.parameter(np.ones(query_dim, dtype=np.float32))
        self.ln_bias = T.parameter(np.zeros(query_dim, dtype=np.float32))

    def project_kv(self, keys: Tensor) -> tuple[Tensor, Tensor]:
        """Head-split key/value projections (b, nh, l, dh).

        Static memories (e.g. the encoded instruction) should be projected
        once per episode and reused across decode steps.
        """
        b, l = keys.shape[0], keys.shape[1]
        nh, dh = self.heads, self.head_dim
        k = T.swap_axes(T.reshape(T.matmul(keys, self.wk), (b, l, nh, dh)), 1, 2)
        v = T.swap_axes(T.reshape(T.matmul(keys, self.wv), (b, l, nh, dh)), 1, 2)
        return k, v

    def attend(
        self,
        query: Tensor,
        k: Tensor,
        v: Tensor,
        key_mask: Optional[np.ndarray] = None,
        attn_drop: float = 0.0,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        b = k.shape[0]
        nh, dh = self.heads, self.head_dim
        q = T.reshape(T.matmul(query, self.wq), (b, nh, dh, 1))
        scores = T.mul(T.matmul(k, q), T.Tensor(np.asarray(1.0 / math.sqrt(dh), dtype=query.dtype)))
        if key_mask is not None:
            bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, -1e9).astype(query.dtype)
            scores = T.add(scores, T.Tensor(bias[:, None, :, None]))
        attn = T.softmax(scores, axis=2)  # (b, nh, l, 1)
        attn = T.dropout(attn, attn_drop, training, rng)
        ctx = T.matmul(T.swap_axes(v, 2, 3), attn)  # (b, nh, dh, 1)
        ctx = T.reshape(ctx, (b, nh * dh))
        out = T.matmul(ctx, self.wo)
        return T.layer_norm(out, self.ln_gain, self.ln_bias)

    def __call__(
        self,
        query: Tensor,
        keys: Tensor,
        key_mask: Optional[np.ndarray] = None,
        attn_drop: float = 0.0,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        k, v = self.project_kv(keys)
        return self.attend(query, k, v, key_mask, attn_drop, training, rng)

    def params(self) -> dict[str, Tensor]:
        return {
            "wq": self.wq,
            "wk": self.wk,
            "wv": self.wv,
            "wo": self.wo,
            "ln_gain": self.ln_gain,
            "ln_bias": self.ln_bias,
        }
