"""Conditional flow-matching action head and the full episode-level policy.

The noisy action chunk is embedded per step, additively biased by the
projected prior mean (guidance strength lambda at inference, a Bernoulli mask
during training), and processed by a small self-attention trunk alongside a
noise-level token, an observation-feature token, and a prototype token. The
trunk regresses the straight-line velocity from data to noise; inference
integrates it backwards (sigma 1 -> 0) with explicit Euler.

`FlowPolicy` wires everything for rollouts: retrieval and anchor unfolding
happen once at episode start and stay frozen; each control step updates the
phase state, reads the prior, and integrates a fresh chunk when the action
queue runs dry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bank import MemoryBank, QueryHead, retrieve
from .decoder import PbdParams, prior_params, progress_attention, unfold_anchors
from .encoder import BehaviorEncoder, sinusoid_encoding
from .tensor import (
    EvaluationError,
    Tensor,
    as_tensor,
    concat,
    layer_norm,
    linear,
    matmul,
    reshape,
    silu,
    softmax,
    swap_last_axes,
)


def sigma_features(sigma, d: int) -> np.ndarray:
    """Sinusoidal embedding of the flow time sigma in [0, 1]; [B, d]."""
    s = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    half = d // 2
    freqs = np.exp(np.linspace(np.log(1.0), np.log(1000.0), half))
    ang = s[:, None] * freqs
    out = np.zeros((s.shape[0], d))
    out[:, 0::2] = np.sin(ang)[:, : (d + 1) // 2]
    out[:, 1::2] = np.cos(ang)[:, : d // 2]
    return out


class FlowParams:
    """Embeddings, prior projection, trunk blocks, and the velocity head."""

    def __init__(self, rng: np.random.Generator, d_model: int, horizon: int,
                 d_act: int, n_blocks: int = 2, dtype=np.float64):
        self.d_model, self.horizon, self.d_act = d_model, horizon, d_act
        self.n_blocks = n_blocks
        d = d_model

        def init(d_in, d_out):
            return Tensor(rng.normal(0, 1 / np.sqrt(d_in),
                                     (d_in, d_out)).astype(dtype),
                          requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

        self.e_w, self.e_b = init(d_act, d), zeros(d)
        self.proj_w = init(d_act, d)  # no bias: guidance vanishes at lambda=0
        # additive conditioning pathway: the context tokens alone are a weak
        # channel through single-head attention, so their summary is also
        # broadcast onto every action token
        self.cond_w, self.cond_b = init(3 * d, d), zeros(d)
        self.blocks = []
        for _ in range(n_blocks):
            self.blocks.append({
                "ln1.g": ones(d), "ln1.b": zeros(d),
                "wq": init(d, d), "wk": init(d, d), "wv": init(d, d),
                "wo": init(d, d),
                "ln2.g": ones(d), "ln2.b": zeros(d),
                "mlp.w1": init(d, 2 * d), "mlp.b1": zeros(2 * d),
                "mlp.w2": init(2 * d, d), "mlp.b2": zeros(d),
            })
        self.head_w, self.head_b = init(d, d_act), zeros(d_act)

    def parameters(self):
        out = {"e.w": self.e_w, "e.b": self.e_b, "proj.w": self.proj_w,
               "cond.w": self.cond_w, "cond.b": self.cond_b,
               "head.w": self.head_w, "head.b": self.head_b}
        for i, blk in enumerate(self.blocks):
            for k, v in blk.items():
                out[f"blocks.{i}.{k}"] = v
        return out


def inject_prior(flow: FlowParams, a_sigma, mu_prior, lam) -> Tensor:
    """Noisy-chunk embedding plus lambda-scaled projected prior mean.

    a_sigma, mu_prior: [B,H,D_a] (or [H,D_a]); lam: scalar or [B,1,1] tensor
    (the training-time Bernoulli mask rides through here).
    """
    a = as_tensor(a_sigma)
    e = linear(a, flow.e_w, flow.e_b)
    if isinstance(lam, (int, float)) and lam == 0.0:
        return e
    proj = linear(as_tensor(mu_prior), flow.proj_w)
    return e + proj * lam


def _self_attention(blk, x: Tensor, d: int) -> Tensor:
    xn = layer_norm(x, blk["ln1.g"], blk["ln1.b"])
    q = linear(xn, blk["wq"])
    k = linear(xn, blk["wk"])
    v = linear(xn, blk["wv"])
    scores = matmul(q, swap_last_axes(k)) * (1.0 / np.sqrt(d))
    w = softmax(scores, axis=-1)
    return linear(matmul(w, v), blk["wo"])


def vector_field(flow: FlowParams, e_tilde, sigma, phi_feat, z_proto) -> Tensor:
    """Velocity over the chunk: [B,H,D_a] from the biased embedding plus
    noise-level, observation, and prototype tokens."""
    x = as_tensor(e_tilde)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    bsz = x.shape[0]
    d = flow.d_model
    pos = sinusoid_encoding(np.arange(flow.horizon), d).astype(x.dtype)
    x = x + Tensor(pos)

    def lift(t):
        t = as_tensor(t)
        if t.ndim == 1:
            t = reshape(t, (1, -1))
        return reshape(t, (t.shape[0], 1, d))

    sig_tok = Tensor(np.broadcast_to(
        sigma_features(sigma, d).astype(x.dtype), (bsz, d)).copy())
    phi_tok, proto_tok = lift(phi_feat), lift(z_proto)
    sig_tok = lift(sig_tok)
    ctx = concat([sig_tok, phi_tok, proto_tok], axis=-1)  # [B,1,3D]
    x = x + linear(ctx, flow.cond_w, flow.cond_b)
    tokens = concat([x, sig_tok, phi_tok, proto_tok], axis=1)
    for blk in flow.blocks:
        tokens = tokens + _self_attention(blk, tokens, d)
        xn = layer_norm(tokens, blk["ln2.g"], blk["ln2.b"])
        tokens = tokens + linear(silu(linear(xn, blk["mlp.w1"], blk["mlp.b1"])),
                                 blk["mlp.w2"], blk["mlp.b2"])
    v = linear(tokens[:, :flow.horizon, :], flow.head_w, flow.head_b)
    return reshape(v, v.shape[1:]) if squeeze else v


def flow_target(a0: np.ndarray, a1: np.ndarray, sigma):
    """Optimal-transport path point and its sigma-independent velocity."""
    sigma_arr = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma_arr < 0) or np.any(sigma_arr > 1):
        raise ValueError("flow time sigma must lie in [0, 1]")
    a_sigma = sigma_arr * a1 + (1.0 - sigma_arr) * a0
    return a_sigma, a1 - a0


def integrate_flow(field_fn: Callable[[np.ndarray, float], np.ndarray],
                   a1: np.ndarray, steps: int) -> np.ndarray:
    """Explicit Euler from sigma=1 down to 0: a <- a - (1/steps) * v(a, sigma).

    ``field_fn(a, sigma) -> velocity`` is evaluated at the left endpoint of
    each interval. The trained field regresses u = a1 - a0, so stepping with
    negative d-sigma transports noise back to data; this sign pairing lives
    only here and is pinned by the constant-field unit test.
    """
    if steps < 1:
        raise ValueError("integrate_flow needs steps >= 1")
    a = np.array(a1, dtype=np.float64, copy=True)
    h = 1.0 / steps
    for i in range(steps):
        sigma = 1.0 - i * h
        a = a - h * np.asarray(field_fn(a, sigma))
        if not np.all(np.isfinite(a)):
            raise EvaluationError(f"flow integration diverged at step {i}")
    return a


# ---------------------------------------------------------------------------
# episode-level policy
# ---------------------------------------------------------------------------


@dataclass
class PolicyBundle:
    encoder: BehaviorEncoder
    query_head: QueryHead
    pbd: PbdParams
    flow: FlowParams
    bank: MemoryBank
    stats: dict
    config: dict = field(default_factory=dict)


class FlowPolicy:
    """Rollout protocol implementation: reset(task, seed) / act(obs) -> action.

    Retrieval runs once at the first act() of an episode and the prototype and
    anchors stay frozen; the phase state advances every step; a fresh chunk is
    integrated whenever the queue of pending actions is exhausted.
    """

    def __init__(self, bundle: PolicyBundle, lambda_guidance: float = 1.0,
                 flow_steps: int = 10, k_retrieve: int = 5,
                 exec_horizon: Optional[int] = None,
                 proto_mode: str = "retrieved"):
        if lambda_guidance < 0:
            raise ValueError("lambda_guidance must be >= 0")
        if proto_mode not in ("retrieved", "random"):
            raise ValueError(f"unknown proto_mode {proto_mode!r}")
        self.bundle = bundle
        self.lambda_guidance = lambda_guidance
        self.flow_steps = flow_steps
        self.k_retrieve = k_retrieve
        self.exec_horizon = exec_horizon or bundle.pbd.horizon
        self.proto_mode = proto_mode
        self.phase_trace: list[np.ndarray] = []
        self._task_id: Optional[int] = None

    def reset(self, task_id: int, seed: int) -> None:
        if self.bundle.bank is None or not self.bundle.bank.entries:
            raise RuntimeError("policy needs a loaded, non-empty memory bank")
        if task_id not in self.bundle.stats:
            raise ValueError(
                f"no normalization stats for task {task_id}: the policy was "
                f"trained on tasks {sorted(self.bundle.stats)}")
        self._task_id = task_id
        self._stats = self.bundle.stats[task_id]
        self._rng = np.random.default_rng([seed, task_id, 0xF10])
        self._ep = self.bundle.encoder.init_episode()
        self._prev_act_norm = np.zeros(self.bundle.pbd.d_act)
        self._z_proto: Optional[np.ndarray] = None
        self._anchors: Optional[np.ndarray] = None
        self._queue: list[np.ndarray] = []
        self.phase_trace = []
        self.retrieval: Optional[dict] = None

    def _retrieve_once(self, norm_obs: np.ndarray) -> None:
        enc = self.bundle.encoder
        phi0 = enc.phi(Tensor(norm_obs[None]), np.array([self._task_id]))
        query = self.bundle.query_head(phi0).data[0]
        if self.proto_mode == "random":
            idx = int(self._rng.integers(0, len(self.bundle.bank.entries)))
            z_hat = self.bundle.bank.entries[idx].value.astype(np.float64)
            self.retrieval = {"mode": "random", "indices": [idx]}
        else:
            z_hat, weights, idx = retrieve(self.bundle.bank, query, self.k_retrieve)
            self.retrieval = {"mode": "retrieved", "indices": idx.tolist(),
                              "weights": weights.tolist()}
        self._z_proto = z_hat
        self._anchors = unfold_anchors(self.bundle.pbd, Tensor(z_hat)).data

    def _plan(self, norm_obs: np.ndarray, z_phase: np.ndarray) -> None:
        enc, pbd, flow = self.bundle.encoder, self.bundle.pbd, self.bundle.flow
        ctx, _ = progress_attention(pbd, Tensor(z_phase), Tensor(self._anchors))
        prior = prior_params(pbd, ctx)
        mu = prior.mu.data
        phi_t = enc.phi(Tensor(norm_obs[None]), np.array([self._task_id])).data[0]
        z_proto = self._z_proto

        def field(a, sigma):
            e_tilde = inject_prior(flow, Tensor(a), Tensor(mu), self.lambda_guidance)
            return vector_field(flow, e_tilde, sigma, Tensor(phi_t),
                                Tensor(z_proto)).data

        a1 = self._rng.standard_normal((pbd.horizon, pbd.d_act))
        chunk = integrate_flow(field, a1, self.flow_steps)
        self._queue = [chunk[j] for j in range(min(self.exec_horizon, pbd.horizon))]

    def act(self, obs: np.ndarray) -> np.ndarray:
        if self._task_id is None:
            raise RuntimeError("call reset(task_id, seed) before act()")
        norm_obs = self._stats.normalize_obs(np.asarray(obs, dtype=np.float64))
        z_phase, self._ep = self.bundle.encoder.phase_step(
            self._ep, norm_obs, self._prev_act_norm, self._task_id)
        self.phase_trace.append(z_phase.data.copy())
        if self._z_proto is None:
            self._retrieve_once(norm_obs)
        if not self._queue:
            self._plan(norm_obs, z_phase.data)
        a_norm = self._queue.pop(0)
        a_raw = np.clip(self._stats.denormalize_act(a_norm), -1.0, 1.0)
        # the phase stream sees what was actually executed
        self._prev_act_norm = self._stats.normalize_act(a_raw)
        return a_raw
