"""Building blocks: modulated residual blocks, local attention, and the
cross-modality attention that conditions queries/keys on down-sampled copies
of the original inputs.

Every layer is a pure function of its input tensors plus read-only Params;
the reconstruction mode (MS or PAN) only switches which parameter half and
which conditioning image each op uses.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import (Param, Tensor, _as_tensor, concat, narrow, record,
                     reshape, silu, stack_halves)


class Mode(enum.Enum):
    """Which image the network reconstructs: the HRMS target or replicated PAN.

    DUAL carries both tasks in one batch - the first half of the samples run
    in MS mode and the second half in PAN mode - which is how the duplicated
    training batch is evaluated in a single pass.
    """

    MS = "ms"
    PAN = "pan"
    DUAL = "dual"


def _half(x) -> int:
    n = x.shape[0]
    if n % 2:
        raise ValueError(f"dual-mode batch must be even, got {n}")
    return n // 2


@dataclass(frozen=True)
class AttnConfig:
    """Local attention hyperparameters: odd window size and head count."""

    window: int = 3
    heads: int = 4

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"attention window must be odd, got {self.window}")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")


def local_attn(q, k, v, window: int, heads: int = 1) -> Tensor:
    """Attention restricted to each pixel's window x window neighborhood.

    Scores are scaled by sqrt(channels-per-head); out-of-image neighbors are
    masked to -inf before the softmax, so weights renormalize over the valid
    part of the window. Channels split into `heads` independent groups.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if not (q.shape == k.shape == v.shape):
        raise ValueError(f"Q/K/V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"attention window must be odd, got {window}")
    b, c, h, w = q.shape
    if c % heads:
        raise ValueError(f"{c} channels not divisible into {heads} heads")
    ch = c // heads
    scale = 1.0 / math.sqrt(ch)

    taps = window * window
    qh = (q.data * scale).reshape(b, heads, ch, h, w)
    kw_ = ops._unfold_taps(k.data, window).reshape(taps, b, heads, ch, h, w)
    scores = np.einsum("bgchw,tbgchw->bghwt", qh, kw_)
    scores += ops.neighbor_bias(h, w, window, q.dtype).reshape(h, w, taps)
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    vw = ops._unfold_taps(v.data, window).reshape(taps, b, heads, ch, h, w)
    out = np.einsum("bghwt,tbgchw->bgchw", attn, vw).reshape(b, c, h, w)

    def back(g):
        go = g.reshape(b, heads, ch, h, w)
        dattn = np.einsum("bgchw,tbgchw->bghwt", go, vw)
        dv = ops._fold_taps(
            np.einsum("bghwt,bgchw->tbgchw", attn, go).reshape(taps, b, c, h, w), window)
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dq = (np.einsum("bghwt,tbgchw->bgchw", dscores, kw_) * scale).reshape(q.shape)
        dk = ops._fold_taps(
            np.einsum("bghwt,bgchw->tbgchw", dscores, qh).reshape(taps, b, c, h, w), window)
        return dq, dk, dv

    return record(out, (q, k, v), back)


def _kaiming(rng: np.random.Generator, cout: int, cin: int, kh: int, kw: int, dtype):
    std = math.sqrt(2.0 / (cin * kh * kw))
    return (rng.standard_normal((cout, cin, kh, kw)) * std).astype(dtype)


class Conv2d:
    """Convolution parameters plus the call; zero_init makes a residual head."""

    def __init__(self, cin: int, cout: int, ksize: int, name: str, rng, dtype,
                 stride: int = 1, zero_init: bool = False):
        if zero_init:
            wdata = np.zeros((cout, cin, ksize, ksize), dtype=dtype)
        else:
            wdata = _kaiming(rng, cout, cin, ksize, ksize, dtype)
        self.w = Param(wdata, f"{name}.w")
        self.b = Param(np.zeros(cout, dtype=dtype), f"{name}.b")
        self.stride = stride

    def __call__(self, x) -> Tensor:
        return ops.conv2d(x, self.w.value, self.b.value, stride=self.stride)

    def params(self):
        return [self.w, self.b]


class LayerNorm:
    def __init__(self, c: int, name: str, dtype, eps: float = 1e-5):
        self.gamma = Param(np.ones(c, dtype=dtype), f"{name}.gamma")
        self.beta = Param(np.zeros(c, dtype=dtype), f"{name}.beta")
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.gamma.value, self.beta.value, self.eps)

    def params(self):
        return [self.gamma, self.beta]


class Modulate:
    """Channel-wise (1 + gamma) * x + beta with a separate pair per mode.

    All four vectors start at zero, so the layer is the identity at
    initialization and both modes agree bit-exactly until training moves them.
    """

    def __init__(self, c: int, name: str, dtype):
        self.gamma_ms = Param(np.zeros(c, dtype=dtype), f"{name}.gamma_ms")
        self.beta_ms = Param(np.zeros(c, dtype=dtype), f"{name}.beta_ms")
        self.gamma_pan = Param(np.zeros(c, dtype=dtype), f"{name}.gamma_pan")
        self.beta_pan = Param(np.zeros(c, dtype=dtype), f"{name}.beta_pan")
        self.c = c

    def __call__(self, x, mode: Mode) -> Tensor:
        shape = (1, self.c, 1, 1)
        if mode is Mode.DUAL:
            n = _half(x)
            g1 = stack_halves(reshape(self.gamma_ms.value, shape),
                              reshape(self.gamma_pan.value, shape), n) + 1.0
            b4 = stack_halves(reshape(self.beta_ms.value, shape),
                              reshape(self.beta_pan.value, shape), n)
        else:
            gamma = self.gamma_ms if mode is Mode.MS else self.gamma_pan
            beta = self.beta_ms if mode is Mode.MS else self.beta_pan
            g1 = reshape(gamma.value, shape) + 1.0
            b4 = reshape(beta.value, shape)
        return x * g1 + b4

    def params(self):
        return [self.gamma_ms, self.beta_ms, self.gamma_pan, self.beta_pan]

    def mode_params(self, mode: Mode):
        if mode is Mode.MS:
            return [self.gamma_ms, self.beta_ms]
        return [self.gamma_pan, self.beta_pan]


class Select:
    """Blend the two attention branches with learnable channel weights.

    Initialized at 0.5/0.5: an unweighted average of the branches.
    """

    def __init__(self, c: int, name: str, dtype):
        half = np.full(c, 0.5, dtype=dtype)
        self.alpha_ms_1 = Param(half.copy(), f"{name}.alpha_ms_1")
        self.alpha_ms_2 = Param(half.copy(), f"{name}.alpha_ms_2")
        self.alpha_pan_1 = Param(half.copy(), f"{name}.alpha_pan_1")
        self.alpha_pan_2 = Param(half.copy(), f"{name}.alpha_pan_2")
        self.c = c

    def __call__(self, x_ms, x_pan, mode: Mode) -> Tensor:
        shape = (1, self.c, 1, 1)
        if mode is Mode.DUAL:
            # here the branches arrive as (self-attention, cross-attention);
            # the PAN half weights the cross branch with its first alpha
            n = _half(x_ms)
            c_self = stack_halves(reshape(self.alpha_ms_1.value, shape),
                                  reshape(self.alpha_pan_2.value, shape), n)
            c_cross = stack_halves(reshape(self.alpha_ms_2.value, shape),
                                   reshape(self.alpha_pan_1.value, shape), n)
            return x_ms * c_self + x_pan * c_cross
        if mode is Mode.MS:
            a1, a2 = self.alpha_ms_1, self.alpha_ms_2
        else:
            a1, a2 = self.alpha_pan_1, self.alpha_pan_2
        return x_ms * reshape(a1.value, shape) + x_pan * reshape(a2.value, shape)

    def params(self):
        return [self.alpha_ms_1, self.alpha_ms_2, self.alpha_pan_1, self.alpha_pan_2]

    def mode_params(self, mode: Mode):
        if mode is Mode.MS:
            return [self.alpha_ms_1, self.alpha_ms_2]
        return [self.alpha_pan_1, self.alpha_pan_2]


class ResBlock:
    """Conv(SiLU(LN(x))) followed by a modulated residual branch.

    The first stage rewrites x; the second adds Conv(SiLU(Modulate(LN(x))))
    on top of it, with Modulate picking the parameter pair for `mode`.
    """

    def __init__(self, c: int, name: str, rng, dtype, ksize: int = 3):
        self.ln1 = LayerNorm(c, f"{name}.ln1", dtype)
        self.conv1 = Conv2d(c, c, ksize, f"{name}.conv1", rng, dtype)
        self.ln2 = LayerNorm(c, f"{name}.ln2", dtype)
        self.mod = Modulate(c, f"{name}.mod", dtype)
        self.conv2 = Conv2d(c, c, ksize, f"{name}.conv2", rng, dtype)

    def __call__(self, x, mode: Mode) -> Tensor:
        x = self.conv1(silu(self.ln1(x)))
        return x + self.conv2(silu(self.mod(self.ln2(x), mode)))

    def params(self):
        return (self.ln1.params() + self.conv1.params() + self.ln2.params()
                + self.mod.params() + self.conv2.params())


class CrossModalityAttention:
    """Local attention whose Q and K/V are conditioned on down-sampled originals.

    Three 1x1 convolutions are shared between modes: one for the query, one
    for the same-modality (self) K|V pair and one for the other-modality
    (cross) K|V pair. The mode decides which conditioning image plays which
    role: in MS mode the query and self branch see the down-sampled LRMS and
    the cross branch sees the down-sampled replicated PAN; PAN mode mirrors
    the roles. Returns (x_ms, x_pan) in that fixed order.

    With `conditioned=False` the down-sampled originals are dropped and the
    convs read the feature alone (the conditioning ablation).
    """

    def __init__(self, c: int, c_cond: int, cfg: AttnConfig, name: str, rng, dtype,
                 conditioned: bool = True):
        if c % cfg.heads:
            raise ValueError(f"channels {c} not divisible by heads {cfg.heads}")
        cin = c + (c_cond if conditioned else 0)
        self.conv_q = Conv2d(cin, c, 1, f"{name}.q", rng, dtype)
        self.conv_kv_self = Conv2d(cin, 2 * c, 1, f"{name}.kv_self", rng, dtype)
        self.conv_kv_cross = Conv2d(cin, 2 * c, 1, f"{name}.kv_cross", rng, dtype)
        self.cfg = cfg
        self.c = c
        self.conditioned = conditioned

    def __call__(self, x, ms_ds, pan_ds, mode: Mode) -> tuple[Tensor, Tensor]:
        """MS/PAN mode: returns (x_ms, x_pan). DUAL mode: returns the raw
        (self, cross) branch pair, whose per-half roles the Select layer
        resolves."""
        if self.conditioned:
            if ms_ds.shape[2:] != x.shape[2:] or pan_ds.shape[2:] != x.shape[2:]:
                raise ValueError(
                    f"conditioning images {ms_ds.shape[2:]}/{pan_ds.shape[2:]} do not "
                    f"match feature resolution {x.shape[2:]}")
            if mode is Mode.DUAL:
                # conditioning images are constants; splice the halves raw
                n = _half(x)
                own = Tensor(np.concatenate([ms_ds.data[:n], pan_ds.data[n:]]))
                other = Tensor(np.concatenate([pan_ds.data[:n], ms_ds.data[n:]]))
            else:
                own = ms_ds if mode is Mode.MS else pan_ds
                other = pan_ds if mode is Mode.MS else ms_ds
            own_in = concat([own, x], axis=1)
            other_in = concat([other, x], axis=1)
        else:
            own_in = other_in = x
        q = self.conv_q(own_in)
        kv_s = self.conv_kv_self(own_in)
        kv_c = self.conv_kv_cross(other_in)
        c = self.c
        a_self = local_attn(q, narrow(kv_s, 1, 0, c), narrow(kv_s, 1, c, c),
                            self.cfg.window, self.cfg.heads)
        a_cross = local_attn(q, narrow(kv_c, 1, 0, c), narrow(kv_c, 1, c, c),
                             self.cfg.window, self.cfg.heads)
        if mode is Mode.PAN:
            return a_cross, a_self
        return a_self, a_cross

    def params(self):
        return self.conv_q.params() + self.conv_kv_self.params() + self.conv_kv_cross.params()


class AttnBlock:
    """Attention layer with branch selection, then a feed-forward refinement.

    x += Select(CM3A(LN(x))); x += FFN(LN(x)) with FFN = 1x1 conv to 2C,
    SiLU, 1x1 conv back to C.
    """

    def __init__(self, c: int, c_cond: int, cfg: AttnConfig, name: str, rng, dtype,
                 conditioned: bool = True, ffn_expand: int = 2):
        self.ln_attn = LayerNorm(c, f"{name}.ln_attn", dtype)
        self.attn = CrossModalityAttention(c, c_cond, cfg, f"{name}.cma", rng, dtype,
                                           conditioned=conditioned)
        self.select = Select(c, f"{name}.select", dtype)
        self.ln_ffn = LayerNorm(c, f"{name}.ln_ffn", dtype)
        self.ffn_a = Conv2d(c, ffn_expand * c, 1, f"{name}.ffn_a", rng, dtype)
        self.ffn_b = Conv2d(ffn_expand * c, c, 1, f"{name}.ffn_b", rng, dtype)

    def __call__(self, x, ms_ds, pan_ds, mode: Mode) -> Tensor:
        x_ms, x_pan = self.attn(self.ln_attn(x), ms_ds, pan_ds, mode)
        x = x + self.select(x_ms, x_pan, mode)
        return x + self.ffn_b(silu(self.ffn_a(self.ln_ffn(x))))

    def params(self):
        return (self.ln_attn.params() + self.attn.params() + self.select.params()
                + self.ln_ffn.params() + self.ffn_a.params() + self.ffn_b.params())


class ConvBlock:
    """Drop-in for AttnBlock with the attention layer replaced by a 3x3 conv.

    Used by the ablation grid; keeps the LN/FFN scaffold so only the
    attention mechanism itself is swapped out.
    """

    def __init__(self, c: int, name: str, rng, dtype, ffn_expand: int = 2):
        self.ln_attn = LayerNorm(c, f"{name}.ln_attn", dtype)
        self.conv = Conv2d(c, c, 3, f"{name}.conv", rng, dtype)
        self.ln_ffn = LayerNorm(c, f"{name}.ln_ffn", dtype)
        self.ffn_a = Conv2d(c, ffn_expand * c, 1, f"{name}.ffn_a", rng, dtype)
        self.ffn_b = Conv2d(ffn_expand * c, c, 1, f"{name}.ffn_b", rng, dtype)

    def __call__(self, x, ms_ds, pan_ds, mode: Mode) -> Tensor:
        x = x + self.conv(self.ln_attn(x))
        return x + self.ffn_b(silu(self.ffn_a(self.ln_ffn(x))))

    def params(self):
        return (self.ln_attn.params() + self.conv.params() + self.ln_ffn.params()
                + self.ffn_a.params() + self.ffn_b.params())


class DownConv:
    """Stride-2 3x3 convolution halving the spatial extents."""

    def __init__(self, c: int, name: str, rng, dtype):
        self.conv = Conv2d(c, c, 3, name, rng, dtype, stride=2)

    def __call__(self, x) -> Tensor:
        return self.conv(x)

    def params(self):
        return self.conv.params()


class UpConv:
    """Nearest x2 up-sampling followed by a 3x3 convolution."""

    def __init__(self, c: int, name: str, rng, dtype):
        self.conv = Conv2d(c, c, 3, name, rng, dtype)

    def __call__(self, x) -> Tensor:
        return self.conv(ops.resample(x, 2, "nearest"))

    def params(self):
        return self.conv.params()
