"""Phase-conditioned prior decoder.

The retrieved prototype is unfolded once per episode into H latent anchors
(generator MLP plus sinusoidal positions, added elementwise). Each control
step the live phase state interpolates the anchors through single-query
attention, and two linear heads turn the readout into a Gaussian over the
H-step action chunk. The log-stddev is clamped to [-5, 2].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import sinusoid_encoding
from .tensor import (
    Tensor,
    as_tensor,
    clamp,
    exp,
    linear,
    matmul,
    reshape,
    silu,
    softmax,
    square,
    swap_last_axes,
    tmean,
    tsum,
)

LOG_SIGMA_LO = -5.0
LOG_SIGMA_HI = 2.0
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class ActionPrior:
    mu: Tensor         # [..., H, D_a]
    log_sigma: Tensor  # [..., H, D_a], already clamped


class PbdParams:
    """Anchor generator, progress attention, and the two prior heads."""

    def __init__(self, rng: np.random.Generator, d_model: int, horizon: int,
                 d_act: int, dtype=np.float64):
        self.d_model, self.horizon, self.d_act = d_model, horizon, d_act
        d = d_model

        def init(d_in, d_out, scale=None):
            s = scale if scale is not None else 1.0 / np.sqrt(d_in)
            return Tensor(rng.normal(0, s, (d_in, d_out)).astype(dtype),
                          requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

        self.gen_w1, self.gen_b1 = init(d, d), zeros(d)
        self.gen_w2, self.gen_b2 = init(d, horizon * d), zeros(horizon * d)
        self.attn_wq, self.attn_wk, self.attn_wv = init(d, d), init(d, d), init(d, d)
        self.mu_w, self.mu_b = init(d, horizon * d_act), zeros(horizon * d_act)
        self.sigma_w, self.sigma_b = init(d, horizon * d_act), zeros(horizon * d_act)

    def parameters(self):
        return {
            "gen.w1": self.gen_w1, "gen.b1": self.gen_b1,
            "gen.w2": self.gen_w2, "gen.b2": self.gen_b2,
            "attn.wq": self.attn_wq, "attn.wk": self.attn_wk,
            "attn.wv": self.attn_wv,
            "mu.w": self.mu_w, "mu.b": self.mu_b,
            "sigma.w": self.sigma_w, "sigma.b": self.sigma_b,
        }


def unfold_anchors(pbd: PbdParams, z_proto_hat) -> Tensor:
    """[B,D] (or [D]) prototype -> [B,H,D] anchors with positional geometry."""
    z = as_tensor(z_proto_hat)
    squeeze = z.ndim == 1
    if squeeze:
        z = reshape(z, (1, -1))
    bsz = z.shape[0]
    hidden = silu(linear(z, pbd.gen_w1, pbd.gen_b1))
    m = reshape(linear(hidden, pbd.gen_w2, pbd.gen_b2),
                (bsz, pbd.horizon, pbd.d_model))
    pos = sinusoid_encoding(np.arange(pbd.horizon), pbd.d_model).astype(z.dtype)
    m = m + Tensor(pos)
    return reshape(m, (pbd.horizon, pbd.d_model)) if squeeze else m


def progress_attention(pbd: PbdParams, z_phase, anchors):
    """Single-query readout of the anchor sequence.

    z_phase: [B,D] (or [D]); anchors: [B,H,D] (or [H,D]). Returns
    (context [B,D], weights [B,H]); weights are exposed for diagnostics.
    """
    z = as_tensor(z_phase)
    m = as_tensor(anchors)
    squeeze = z.ndim == 1
    if squeeze:
        z = reshape(z, (1, -1))
        m = reshape(m, (1,) + m.shape)
    q = linear(z, pbd.attn_wq)                       # [B,D]
    k = linear(m, pbd.attn_wk)                       # [B,H,D]
    v = linear(m, pbd.attn_wv)                       # [B,H,D]
    scores = matmul(k, reshape(q, q.shape + (1,)))   # [B,H,1]
    scores = scores * (1.0 / np.sqrt(pbd.d_model))
    w = softmax(reshape(scores, scores.shape[:2]), axis=-1)  # [B,H]
    ctx = matmul(swap_last_axes(v), reshape(w, w.shape + (1,)))  # [B,D,1]
    ctx = reshape(ctx, ctx.shape[:2])
    if squeeze:
        return reshape(ctx, (ctx.shape[1],)), reshape(w, (w.shape[1],))
    return ctx, w


def prior_params(pbd: PbdParams, ctx) -> ActionPrior:
    """Two linear heads on the phase-aligned context; log-sigma clamped."""
    c = as_tensor(ctx)
    squeeze = c.ndim == 1
    if squeeze:
        c = reshape(c, (1, -1))
    bsz = c.shape[0]
    shape = (bsz, pbd.horizon, pbd.d_act)
    mu = reshape(linear(c, pbd.mu_w, pbd.mu_b), shape)
    log_sigma = clamp(reshape(linear(c, pbd.sigma_w, pbd.sigma_b), shape),
                      LOG_SIGMA_LO, LOG_SIGMA_HI)
    if squeeze:
        mu = reshape(mu, shape[1:])
        log_sigma = reshape(log_sigma, shape[1:])
    return ActionPrior(mu=mu, log_sigma=log_sigma)


def prior_nll(prior: ActionPrior, a0) -> Tensor:
    """Gaussian negative log-likelihood of an action chunk.

    Sums 0.5*((a0-mu)/sigma)^2 + log sigma + 0.5*log(2 pi) over the chunk;
    leading batch axes (if any) are averaged.
    """
    a = as_tensor(a0)
    inv_sigma = exp(-prior.log_sigma)
    z = (a - prior.mu) * inv_sigma
    per_elem = 0.5 * square(z) + prior.log_sigma + 0.5 * LOG_2PI
    if per_elem.ndim <= 2:
        return tsum(per_elem)
    chunk_sums = tsum(per_elem, axis=(-2, -1))
    return tmean(chunk_sums)
