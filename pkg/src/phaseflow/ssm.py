"""Selective state-space layer: input-dependent ZOH discretization, causal
scan over time, gated residual output.

Layer structure for input x[t] (width d_model):

    u   = in_proj(x)                          expansion to d_inner
    us  = silu(causal_depthwise_conv(u))      width-d_conv local mixing
    dt  = max(softplus(delta_proj(us)), DELTA_FLOOR)
    B,C = b_proj(us), c_proj(us)              per-step state projections
    w   = layer_norm(us)                      the normalized drive
    h[t] = exp(dt*A) h[t-1] + ((exp(dt*A)-1)/A) B[t] * w[t]
    y[t] = <C[t], h[t]>
    out  = x + out_proj(y * silu(gate_proj(x)))

A is a per-channel negative diagonal, stored as -exp(log_neg_A). The scan
itself runs through :mod:`phaseflow.kernels`; everything else is tape ops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import (
    EvaluationError,
    Tensor,
    clamp,
    exp,
    layer_norm,
    linear,
    mul,
    neg,
    record_op,
    silu,
    softplus,
)

DELTA_FLOOR = 1e-4


def discretize_zoh(A: np.ndarray, B: np.ndarray, delta: np.ndarray):
    """Zero-order-hold discretization of the diagonal system (A, B).

    Returns (A_bar, B_bar) with A_bar = exp(delta*A) and
    B_bar = ((exp(delta*A) - 1)/A) * B, broadcast channelwise. delta must be
    positive and A strictly negative; |delta*A| below 1e-8 switches to the
    Taylor form (flagged in :mod:`phaseflow.kernels`, not an error).
    """
    return kernels.zoh_discretize(delta, A, B)


def selective_scan(delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, w: Tensor) -> Tensor:
    """Tape primitive running the recurrence with a custom adjoint.

    delta, w: [B,T,D]; A: [D,N]; Bm, Cm: [B,T,N]. Returns y: [B,T,D].
    """
    y, h = kernels.scan_forward(delta.data, A.data, Bm.data, Cm.data, w.data)
    if not np.all(np.isfinite(y)):
        bad_t = int(np.argmin(np.isfinite(y).all(axis=(0, 2))))
        raise EvaluationError(f"non-finite scan output at timestep {bad_t}")

    def vjp(g):
        grads = kernels.scan_backward(
            np.ascontiguousarray(g), delta.data, A.data, Bm.data, Cm.data, w.data, h
        )
        kernels.release_state(h)
        return grads

    return record_op(y, (delta, A, Bm, Cm, w), vjp)


def _init_linear(rng, d_in, d_out, scale=None, dtype=np.float64):
    scale = (1.0 / np.sqrt(d_in)) if scale is None else scale
    w = Tensor(rng.normal(0.0, scale, size=(d_in, d_out)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
    return w, b


class SsmLayerParams:
    """Parameters of one selective-SSM layer."""

    def __init__(self, rng: np.random.Generator, d_model: int, d_state: int = 16,
                 d_conv: int = 4, expand: int = 2, dtype=np.float64):
        self.d_model = d_model
        self.d_state = d_state
        self.d_conv = d_conv
        self.expand = expand
        self.d_inner = expand * d_model
        di = self.d_inner

        self.in_w, self.in_b = _init_linear(rng, d_model, di, dtype=dtype)
        self.gate_w, self.gate_b = _init_linear(rng, d_model, di, dtype=dtype)
        bound = 1.0 / np.sqrt(d_conv)
        self.conv_k = Tensor(rng.uniform(-bound, bound, size=(di, d_conv)).astype(dtype),
                             requires_grad=True)
        self.conv_b = Tensor(np.zeros(di, dtype=dtype), requires_grad=True)
        self.delta_w, self.delta_b = _init_linear(rng, di, di, scale=0.1 / np.sqrt(di), dtype=dtype)
        # softplus(delta_b) spread over [1e-3, 0.1], the usual timescale window
        dt = rng.uniform(1e-3, 0.1, size=di)
        self.delta_b.data[:] = np.log(np.expm1(dt))
        self.b_w, self.b_b = _init_linear(rng, di, d_state, dtype=dtype)
        self.c_w, self.c_b = _init_linear(rng, di, d_state, dtype=dtype)
        self.norm_g = Tensor(np.ones(di, dtype=dtype), requires_grad=True)
        self.norm_b = Tensor(np.zeros(di, dtype=dtype), requires_grad=True)
        # S4D-real spectrum: A[d, n] = -(n + 1)
        log_a = np.log(np.arange(1, d_state + 1, dtype=dtype))
        self.log_neg_a = Tensor(np.tile(log_a, (di, 1)), requires_grad=True)
        self.out_w, self.out_b = _init_linear(rng, di, d_model, dtype=dtype)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "in_proj.w": self.in_w, "in_proj.b": self.in_b,
            "gate_proj.w": self.gate_w, "gate_proj.b": self.gate_b,
            "conv.k": self.conv_k, "conv.b": self.conv_b,
            "delta_proj.w": self.delta_w, "delta_proj.b": self.delta_b,
            "b_proj.w": self.b_w, "b_proj.b": self.b_b,
            "c_proj.w": self.c_w, "c_proj.b": self.c_b,
            "norm.g": self.norm_g, "norm.b": self.norm_b,
            "log_neg_a": self.log_neg_a,
            "out_proj.w": self.out_w, "out_proj.b": self.out_b,
        }


@dataclass
class SsmState:
    """Per-episode recurrent state: latent h and the conv lookback window."""

    h: np.ndarray  # [B, d_inner, d_state]
    conv_buf: np.ndarray  # [B, d_conv-1, d_inner]

    @classmethod
    def zeros(cls, params: SsmLayerParams, batch: int = 1, dtype=np.float64) -> "SsmState":
        return cls(
            h=np.zeros((batch, params.d_inner, params.d_state), dtype=dtype),
            conv_buf=np.zeros((batch, params.d_conv - 1, params.d_inner), dtype=dtype),
        )


def _causal_conv(params: SsmLayerParams, u: Tensor) -> Tensor:
    """Depthwise causal conv over time: position t sees u[t-d_conv+1 .. t].

    Fused primitive (one tape node): the sliding windows are materialized as
    shifted slices of a zero-padded copy.
    """
    kernel, bias = params.conv_k, params.conv_b
    bsz, t_len, di = u.shape
    kw = params.d_conv
    up = np.zeros((bsz, t_len + kw - 1, di), dtype=u.dtype)
    up[:, kw - 1:, :] = u.data
    out = np.zeros((bsz, t_len, di), dtype=u.dtype)
    for j in range(kw):
        out += up[:, j:j + t_len, :] * kernel.data[:, j]
    out += bias.data

    def vjp(g):
        gu = gk = gb = None
        if u.requires_grad:
            gup = np.zeros_like(up)
            for j in range(kw):
                gup[:, j:j + t_len, :] += g * kernel.data[:, j]
            gu = gup[:, kw - 1:, :]
        if kernel.requires_grad:
            gk = np.stack(
                [np.einsum("btd,btd->d", g, up[:, j:j + t_len, :]) for j in range(kw)],
                axis=1)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return gu, gk, gb

    return record_op(out, (u, kernel, bias), vjp)


def _scan_inputs(params: SsmLayerParams, us: Tensor):
    delta = clamp(softplus(linear(us, params.delta_w, params.delta_b)), DELTA_FLOOR, np.inf)
    bm = linear(us, params.b_w, params.b_b)
    cm = linear(us, params.c_w, params.c_b)
    w = layer_norm(us, params.norm_g, params.norm_b)
    a = neg(exp(params.log_neg_a))
    return delta, a, bm, cm, w


def ssm_scan(params: SsmLayerParams, x: Tensor) -> Tensor:
    """Full-sequence layer application; causal, residual, linear in T.

    x: [B,T,d_model] (or [T,d_model], lifted to batch 1).
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.shape[1] < 1:
        raise ValueError("ssm_scan needs T >= 1")
    u = linear(x, params.in_w, params.in_b)
    us = silu(_causal_conv(params, u))
    delta, a, bm, cm, w = _scan_inputs(params, us)
    y = selective_scan(delta, a, bm, cm, w)
    gated = mul(y, silu(linear(x, params.gate_w, params.gate_b)))
    out = x + linear(gated, params.out_w, params.out_b)
    return out.reshape(*out.shape[1:]) if squeeze else out


def ssm_step(params: SsmLayerParams, state: SsmState, x_t: Tensor):
    """Incremental layer application, equal to the t-th scan output.

    x_t: [B,d_model] (or [d_model]). Returns (y_t, new SsmState); the passed
    state is not mutated. Inference-only path: runs untracked.
    """
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t = x_t.reshape(1, -1)
    u = linear(x_t, params.in_w, params.in_b)  # [B, di]
    window = np.concatenate([state.conv_buf, u.data[:, None, :]], axis=1)
    uc = np.einsum("bjd,dj->bd", window, params.conv_k.data) + params.conv_b.data
    us = silu(Tensor(uc))
    us3 = us.reshape(us.shape[0], 1, us.shape[1])
    delta, a, bm, cm, w = _scan_inputs(params, us3)
    y, h_new = kernels.scan_step(
        delta.data[:, 0], a.data, bm.data[:, 0], cm.data[:, 0], w.data[:, 0], state.h
    )
    if not np.all(np.isfinite(y)):
        raise EvaluationError("non-finite ssm_step output")
    gated = y * silu(linear(x_t, params.gate_w, params.gate_b)).data
    out = x_t.data + (gated @ params.out_w.data) + params.out_b.data
    new_state = SsmState(h=h_new, conv_buf=window[:, 1:, :])
    out_t = Tensor(out[0] if squeeze else out)
    return out_t, new_state
